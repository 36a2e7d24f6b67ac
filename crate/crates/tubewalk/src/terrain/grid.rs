//! Seeded synthetic heightmaps and noisy elevation sampling.
//!
//! The grid doubles as the simulation oracle (true heights) and as the
//! source of observations for the estimation pipeline.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TerrainError {
    #[error("invalid terrain spec: {0}")]
    InvalidSpec(String),
    #[error("requested {requested} observations but the grid has only {available} cells")]
    TooManySamples { requested: usize, available: usize },
    #[error("terrain i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("terrain file format: {0}")]
    Format(String),
}

/// Families of synthetic terrain, loosely ordered from rough to smooth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerrainStyle {
    /// Dense small bumps and short-wavelength roughness.
    Bumpy,
    /// Long coherent waves along a dominant direction.
    Wavy,
    /// A few large smooth hills.
    Hilly,
    /// Level ground with mild, low-amplitude roughness.
    FlatRough,
}

impl std::str::FromStr for TerrainStyle {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bumpy" => Ok(Self::Bumpy),
            "wavy" => Ok(Self::Wavy),
            "hilly" => Ok(Self::Hilly),
            "flat-rough" => Ok(Self::FlatRough),
            other => Err(format!(
                "unknown terrain style {other:?} (expected bumpy|wavy|hilly|flat-rough)"
            )),
        }
    }
}

impl std::fmt::Display for TerrainStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Bumpy => "bumpy",
            Self::Wavy => "wavy",
            Self::Hilly => "hilly",
            Self::FlatRough => "flat-rough",
        };
        f.write_str(s)
    }
}

/// Generator parameters for a synthetic terrain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub style: TerrainStyle,
    /// Side lengths in metres, x then y.
    pub extent: [f64; 2],
    /// Cells per axis; the grid has `resolution * resolution` cells.
    pub resolution: usize,
    /// Heights are affinely mapped into `[lo, hi]`.
    pub height_band: [f64; 2],
    pub seed: u64,
}

impl TerrainSpec {
    fn validate(&self) -> Result<(), TerrainError> {
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return Err(TerrainError::InvalidSpec(format!(
                "extent must be positive, got {:?}",
                self.extent
            )));
        }
        if self.resolution < 8 {
            return Err(TerrainError::InvalidSpec(format!(
                "resolution must be at least 8, got {}",
                self.resolution
            )));
        }
        if !(self.height_band[0] <= self.height_band[1])
            || !self.height_band.iter().all(|b| b.is_finite())
        {
            return Err(TerrainError::InvalidSpec(format!(
                "height band must be a finite [lo, hi] with lo <= hi, got {:?}",
                self.height_band
            )));
        }
        Ok(())
    }
}

/// Dense ground-truth heightmap over a rectangle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerrainGrid {
    pub origin: [f64; 2],
    pub extent: [f64; 2],
    /// Cells per axis.
    pub resolution: usize,
    /// Row-major heights, `heights[iy * resolution + ix]`.
    pub heights: Vec<f64>,
    pub seed: u64,
}

/// One noisy elevation measurement at a planar location.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Observation {
    pub location: [f64; 2],
    pub elevation: f64,
}

impl Observation {
    pub fn point(&self) -> Vector2<f64> {
        Vector2::new(self.location[0], self.location[1])
    }
}

impl TerrainGrid {
    /// Synthesize a terrain from a seeded spec. Deterministic per spec+seed;
    /// heights exactly fill the requested band (degenerate band gives a
    /// constant grid).
    pub fn generate(spec: &TerrainSpec) -> Result<Self, TerrainError> {
        spec.validate()?;
        let n = spec.resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut field = vec![0.0f64; n * n];

        let style = style_params(spec.style);
        let waves: Vec<Wave> = (0..style.n_waves)
            .map(|_| {
                let wavelength = rng.gen_range(style.wavelength[0]..style.wavelength[1]);
                let theta = match style.dominant_dir {
                    Some(d) => d + rng.gen_range(-0.35..0.35),
                    None => rng.gen_range(0.0..std::f64::consts::PI),
                };
                Wave {
                    amp: rng.gen_range(0.4..1.0),
                    kx: std::f64::consts::TAU / wavelength * theta.cos(),
                    ky: std::f64::consts::TAU / wavelength * theta.sin(),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        let hills: Vec<Hill> = (0..style.n_hills)
            .map(|_| Hill {
                cx: rng.gen_range(0.0..spec.extent[0]),
                cy: rng.gen_range(0.0..spec.extent[1]),
                radius: rng.gen_range(0.18..0.40) * spec.extent[0].min(spec.extent[1]),
                amp: rng.gen_range(0.6..1.2),
            })
            .collect();

        for iy in 0..n {
            for ix in 0..n {
                let x = (ix as f64 + 0.5) * spec.extent[0] / n as f64;
                let y = (iy as f64 + 0.5) * spec.extent[1] / n as f64;
                let mut v = 0.0;
                for w in &waves {
                    v += w.amp * (w.kx * x + w.ky * y + w.phase).sin();
                }
                for h in &hills {
                    let d2 = (x - h.cx).powi(2) + (y - h.cy).powi(2);
                    v += h.amp * (-d2 / (2.0 * h.radius * h.radius)).exp();
                }
                field[iy * n + ix] = v;
            }
        }

        if style.noise_amp > 0.0 {
            let mut noise: Vec<f64> = (0..n * n)
                .map(|_| style.noise_amp * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for _ in 0..style.smooth_passes {
                noise = box_blur(&noise, n);
            }
            for (f, z) in field.iter_mut().zip(noise.iter()) {
                *f += *z;
            }
        }

        // Affine map into the band; a flat field or a degenerate band maps to lo.
        let fmin = field.iter().cloned().fold(f64::INFINITY, f64::min);
        let fmax = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let [lo, hi] = spec.height_band;
        let span = fmax - fmin;
        let heights: Vec<f64> = field
            .iter()
            .map(|f| {
                let h = if span > 0.0 {
                    lo + (hi - lo) * (f - fmin) / span
                } else {
                    lo
                };
                h.clamp(lo, hi)
            })
            .collect();

        Ok(Self {
            origin: [0.0, 0.0],
            extent: spec.extent,
            resolution: n,
            heights,
            seed: spec.seed,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.resolution * self.resolution
    }

    /// Planar coordinates of a cell centre.
    pub fn cell_center(&self, ix: usize, iy: usize) -> Vector2<f64> {
        let n = self.resolution as f64;
        Vector2::new(
            self.origin[0] + (ix as f64 + 0.5) * self.extent[0] / n,
            self.origin[1] + (iy as f64 + 0.5) * self.extent[1] / n,
        )
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.origin[0]
            && p.x <= self.origin[0] + self.extent[0]
            && p.y >= self.origin[1]
            && p.y <= self.origin[1] + self.extent[1]
    }

    /// True height at a planar point, bilinearly interpolated between cell
    /// centres and clamped at the edges.
    pub fn height_at(&self, p: &Vector2<f64>) -> f64 {
        let n = self.resolution;
        let fx = ((p.x - self.origin[0]) / self.extent[0] * n as f64 - 0.5)
            .clamp(0.0, (n - 1) as f64);
        let fy = ((p.y - self.origin[1]) / self.extent[1] * n as f64 - 0.5)
            .clamp(0.0, (n - 1) as f64);
        let ix = (fx.floor() as usize).min(n - 2);
        let iy = (fy.floor() as usize).min(n - 2);
        let tx = fx - ix as f64;
        let ty = fy - iy as f64;
        let h = |i: usize, j: usize| self.heights[j * n + i];
        let top = h(ix, iy) * (1.0 - tx) + h(ix + 1, iy) * tx;
        let bot = h(ix, iy + 1) * (1.0 - tx) + h(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    pub fn min_height(&self) -> f64 {
        self.heights.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_height(&self) -> f64 {
        self.heights
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Write metadata JSON (pointing at the CSV) plus the height matrix CSV.
    /// `base` is a path prefix; the files become `<base>.json` and
    /// `<base>_heights.csv`.
    pub fn write_files(&self, base: &std::path::Path) -> Result<(), TerrainError> {
        let csv_name = format!(
            "{}_heights.csv",
            base.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "terrain".into())
        );
        let meta = serde_json::json!({
            "origin": self.origin,
            "extent": self.extent,
            "resolution": self.resolution,
            "seed": self.seed,
            "min_height": self.min_height(),
            "max_height": self.max_height(),
            "heights_csv": csv_name,
        });
        std::fs::write(
            base.with_extension("json"),
            serde_json::to_string_pretty(&meta).expect("terrain metadata serializes"),
        )?;
        let mut csv = std::fs::File::create(base.with_file_name(csv_name))?;
        for iy in 0..self.resolution {
            let row: Vec<String> = (0..self.resolution)
                .map(|ix| format!("{}", self.heights[iy * self.resolution + ix]))
                .collect();
            writeln!(csv, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Read a grid written by [`TerrainGrid::write_files`].
    pub fn read_files(json_path: &std::path::Path) -> Result<Self, TerrainError> {
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json_path)?)
            .map_err(|e| TerrainError::Format(e.to_string()))?;
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| TerrainError::Format(format!("missing field {k}")))
        };
        let origin: [f64; 2] = serde_json::from_value(get("origin")?)
            .map_err(|e| TerrainError::Format(e.to_string()))?;
        let extent: [f64; 2] = serde_json::from_value(get("extent")?)
            .map_err(|e| TerrainError::Format(e.to_string()))?;
        let resolution: usize = serde_json::from_value(get("resolution")?)
            .map_err(|e| TerrainError::Format(e.to_string()))?;
        let seed: u64 = serde_json::from_value(get("seed")?)
            .map_err(|e| TerrainError::Format(e.to_string()))?;
        let csv_name: String = serde_json::from_value(get("heights_csv")?)
            .map_err(|e| TerrainError::Format(e.to_string()))?;
        let csv_path = json_path.with_file_name(csv_name);
        let mut heights = Vec::with_capacity(resolution * resolution);
        for line in std::fs::read_to_string(&csv_path)?.lines() {
            for tok in line.split(',') {
                heights.push(
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|e| TerrainError::Format(e.to_string()))?,
                );
            }
        }
        if heights.len() != resolution * resolution {
            return Err(TerrainError::Format(format!(
                "height matrix has {} entries, expected {}",
                heights.len(),
                resolution * resolution
            )));
        }
        Ok(Self {
            origin,
            extent,
            resolution,
            heights,
            seed,
        })
    }
}

struct Wave {
    amp: f64,
    kx: f64,
    ky: f64,
    phase: f64,
}

struct Hill {
    cx: f64,
    cy: f64,
    radius: f64,
    amp: f64,
}

struct StyleParams {
    n_waves: usize,
    wavelength: [f64; 2],
    dominant_dir: Option<f64>,
    n_hills: usize,
    noise_amp: f64,
    smooth_passes: usize,
}

fn style_params(style: TerrainStyle) -> StyleParams {
    match style {
        TerrainStyle::Bumpy => StyleParams {
            n_waves: 10,
            wavelength: [0.9, 2.6],
            dominant_dir: None,
            n_hills: 0,
            noise_amp: 0.7,
            smooth_passes: 1,
        },
        TerrainStyle::Wavy => StyleParams {
            n_waves: 4,
            wavelength: [6.0, 11.0],
            dominant_dir: Some(0.5),
            n_hills: 0,
            noise_amp: 0.15,
            smooth_passes: 2,
        },
        TerrainStyle::Hilly => StyleParams {
            n_waves: 2,
            wavelength: [7.0, 12.0],
            dominant_dir: None,
            n_hills: 5,
            noise_amp: 0.08,
            smooth_passes: 3,
        },
        TerrainStyle::FlatRough => StyleParams {
            n_waves: 6,
            wavelength: [1.6, 4.0],
            dominant_dir: None,
            n_hills: 0,
            noise_amp: 0.25,
            smooth_passes: 2,
        },
    }
}

/// 3x3 box blur with clamped edges.
fn box_blur(src: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for iy in 0..n {
        for ix in 0..n {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let jx = ix as i64 + dx;
                    let jy = iy as i64 + dy;
                    if jx >= 0 && jy >= 0 && (jx as usize) < n && (jy as usize) < n {
                        acc += src[jy as usize * n + jx as usize];
                        cnt += 1.0;
                    }
                }
            }
            out[iy * n + ix] = acc / cnt;
        }
    }
    out
}

/// Sample `n` distinct cell centres without replacement and report their true
/// heights corrupted by zero-mean Gaussian noise.
pub fn sample_observations(
    grid: &TerrainGrid,
    n: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<Observation>, TerrainError> {
    let total = grid.cell_count();
    if n > total {
        return Err(TerrainError::TooManySamples {
            requested: n,
            available: total,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first n slots end up as a uniform sample
    // without replacement.
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..n {
        let j = rng.gen_range(i..total);
        idx.swap(i, j);
    }
    let res = grid.resolution;
    Ok(idx[..n]
        .iter()
        .map(|&cell| {
            let ix = cell % res;
            let iy = cell / res;
            let p = grid.cell_center(ix, iy);
            let noise: f64 = rng.sample(StandardNormal);
            Observation {
                location: [p.x, p.y],
                elevation: grid.heights[cell] + noise_std * noise,
            }
        })
        .collect())
}

/// Write observations as `x,y,z` CSV rows.
pub fn write_observations_csv(
    obs: &[Observation],
    mut w: impl Write,
) -> Result<(), std::io::Error> {
    writeln!(w, "x,y,z")?;
    for o in obs {
        writeln!(w, "{},{},{}", o.location[0], o.location[1], o.elevation)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec(style: TerrainStyle, band: [f64; 2], seed: u64) -> TerrainSpec {
        TerrainSpec {
            style,
            extent: [6.0, 6.0],
            resolution: 50,
            height_band: band,
            seed,
        }
    }

    #[test]
    fn degenerate_band_is_all_zero() {
        let g = TerrainGrid::generate(&spec(TerrainStyle::FlatRough, [0.0, 0.0], 3)).unwrap();
        assert!(g.heights.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn same_seed_same_grid() {
        let a = TerrainGrid::generate(&spec(TerrainStyle::Bumpy, [0.0, 0.7], 11)).unwrap();
        let b = TerrainGrid::generate(&spec(TerrainStyle::Bumpy, [0.0, 0.7], 11)).unwrap();
        assert_eq!(a.heights, b.heights);
        let c = TerrainGrid::generate(&spec(TerrainStyle::Bumpy, [0.0, 0.7], 12)).unwrap();
        assert_ne!(a.heights, c.heights);
    }

    #[test]
    fn hilly_fills_band() {
        let g = TerrainGrid::generate(&spec(TerrainStyle::Hilly, [0.0, 0.7], 7)).unwrap();
        assert!(g.min_height() >= 0.0);
        assert!(g.max_height() <= 0.7);
        assert!(
            g.heights.iter().any(|&h| h >= 0.5),
            "expected at least one tall cell, max={}",
            g.max_height()
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(TerrainStyle::Wavy, [0.0, 0.5], 1);
        s.resolution = 4;
        assert!(TerrainGrid::generate(&s).is_err());
        let mut s = spec(TerrainStyle::Wavy, [0.0, 0.5], 1);
        s.extent = [0.0, 6.0];
        assert!(TerrainGrid::generate(&s).is_err());
    }

    #[test]
    fn zero_noise_matches_grid() {
        let g = TerrainGrid::generate(&spec(TerrainStyle::Hilly, [0.0, 0.7], 5)).unwrap();
        let obs = sample_observations(&g, 40, 0.0, 9).unwrap();
        for o in obs {
            let p = o.point();
            assert!((o.elevation - g.height_at(&p)).abs() < 1e-12);
        }
    }

    #[test]
    fn seven_hundred_unique_locations() {
        let g = TerrainGrid::generate(&spec(TerrainStyle::Bumpy, [0.0, 0.7], 5)).unwrap();
        assert_eq!(g.cell_count(), 2500);
        let obs = sample_observations(&g, 700, 0.01, 42).unwrap();
        assert_eq!(obs.len(), 700);
        let uniq: HashSet<(u64, u64)> = obs
            .iter()
            .map(|o| (o.location[0].to_bits(), o.location[1].to_bits()))
            .collect();
        assert_eq!(uniq.len(), 700);
    }

    #[test]
    fn sampling_is_reproducible() {
        let g = TerrainGrid::generate(&spec(TerrainStyle::Wavy, [0.0, 0.4], 5)).unwrap();
        let a = sample_observations(&g, 100, 0.02, 7).unwrap();
        let b = sample_observations(&g, 100, 0.02, 7).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.location, y.location);
            assert_eq!(x.elevation, y.elevation);
        }
    }

    #[test]
    fn too_many_samples_is_error() {
        let g = TerrainGrid::generate(&spec(TerrainStyle::Wavy, [0.0, 0.4], 5)).unwrap();
        assert!(sample_observations(&g, 2501, 0.0, 1).is_err());
    }

    #[test]
    fn file_round_trip() {
        let g = TerrainGrid::generate(&spec(TerrainStyle::Hilly, [0.0, 0.7], 99)).unwrap();
        let dir = std::env::temp_dir().join(format!("tubewalk_grid_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("t");
        g.write_files(&base).unwrap();
        let r = TerrainGrid::read_files(&base.with_extension("json")).unwrap();
        assert_eq!(g.resolution, r.resolution);
        assert_eq!(g.heights, r.heights);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bilinear_interpolation_hits_cell_centers() {
        let g = TerrainGrid::generate(&spec(TerrainStyle::Bumpy, [0.0, 0.7], 2)).unwrap();
        let p = g.cell_center(10, 20);
        assert!((g.height_at(&p) - g.heights[20 * 50 + 10]).abs() < 1e-12);
    }
}
