//! Trial artifacts: summary JSON, per-sample CSV, and phase-portrait SVGs.

use super::{SimError, SimReport, StepRecord};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

/// Write `summary.json`, `steps.csv`, and one `phase_qXX.svg` per step.
///
/// The CSV carries the first `samples - 1` knots of each step (the step's
/// end instant is the next step's start); tube checks always use the full
/// grid. Wall time is excluded from the summary so reruns are byte-stable.
pub fn emit_artifacts(
    report: &SimReport,
    records: &[StepRecord],
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>, SimError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let summary_path = out_dir.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(report).expect("report serializes") + "\n",
    )?;
    written.push(summary_path);

    let csv_path = out_dir.join("steps.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(csv, "step,t,x,v,x_ref,v_ref,radius")?;
    for record in records {
        let take = record.samples.len().saturating_sub(1);
        for s in &record.samples[..take] {
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                record.index, s.t, s.x, s.v, s.x_ref, s.v_ref, s.radius
            )?;
        }
    }
    csv.flush()?;
    written.push(csv_path);

    for record in records {
        let svg_path = out_dir.join(format!("phase_q{:02}.svg", record.index));
        std::fs::write(&svg_path, phase_portrait_svg(record))?;
        written.push(svg_path);
    }
    Ok(written)
}

/// Phase portrait of one step: reference arc, executed arc, sampled tube
/// boundary circles (ellipses on screen), and the asymptote pair `v = ±w x`
/// inferred from the reference's conserved orbital energy geometry.
fn phase_portrait_svg(record: &StepRecord) -> String {
    const W: f64 = 560.0;
    const H: f64 = 420.0;
    const PAD: f64 = 46.0;

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    for s in &record.samples {
        for (x, v) in [(s.x, s.v), (s.x_ref, s.v_ref)] {
            x_min = x_min.min(x - s.radius);
            x_max = x_max.max(x + s.radius);
            v_min = v_min.min(v - s.radius);
            v_max = v_max.max(v + s.radius);
        }
    }
    if !x_min.is_finite() {
        x_min = -0.1;
        x_max = 0.1;
        v_min = -0.1;
        v_max = 0.1;
    }
    let x_span = (x_max - x_min).max(1e-3);
    let v_span = (v_max - v_min).max(1e-3);
    x_min -= 0.08 * x_span;
    x_max += 0.08 * x_span;
    v_min -= 0.08 * v_span;
    v_max += 0.08 * v_span;

    let sx = (W - 2.0 * PAD) / (x_max - x_min);
    let sv = (H - 2.0 * PAD) / (v_max - v_min);
    let px = |x: f64| PAD + (x - x_min) * sx;
    let pv = |v: f64| H - PAD - (v - v_min) * sv;

    // Slope of the asymptotes from the reference arc itself: v = ±w x with
    // w recovered from any two reference knots (the arc is a hyperbola of
    // the w-flow).
    let omega = estimate_omega(record).unwrap_or(std::f64::consts::PI);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(
        svg,
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\" stroke=\"#ccc\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" font-family=\"monospace\" font-size=\"13\">step {} | in-tube: {} | covered: {}</text>",
        PAD, record.index, record.tube_invariant, record.cp_covered
    );

    // Asymptote pair v = +w x and v = -w x, clipped to the viewport.
    let _ = writeln!(svg, "<g class=\"asymptote-pair\">");
    for sign in [1.0, -1.0] {
        let mut pts = Vec::new();
        for x in [x_min, x_max] {
            let v = sign * omega * x;
            if v >= v_min && v <= v_max {
                pts.push((x, v));
            }
        }
        for v in [v_min, v_max] {
            let x = v / (sign * omega);
            if x >= x_min && x <= x_max {
                pts.push((x, v));
            }
        }
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
        pts.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-12);
        if pts.len() >= 2 {
            let (a, b) = (pts[0], pts[pts.len() - 1]);
            let _ = writeln!(
                svg,
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#e8a33d\" stroke-dasharray=\"6 4\"/>",
                px(a.0), pv(a.1), px(b.0), pv(b.1)
            );
        }
    }
    let _ = writeln!(svg, "</g>");

    // Tube boundary samples along the step.
    let n_circles = 9.min(record.samples.len());
    if n_circles > 0 {
        let stride = (record.samples.len() / n_circles).max(1);
        for s in record.samples.iter().step_by(stride) {
            if s.radius > 0.0 {
                let _ = writeln!(
                    svg,
                    "<ellipse class=\"tube\" cx=\"{:.2}\" cy=\"{:.2}\" rx=\"{:.2}\" ry=\"{:.2}\" fill=\"none\" stroke=\"#9bc4e2\"/>",
                    px(s.x_ref), pv(s.v_ref), s.radius * sx, s.radius * sv
                );
            }
        }
    }

    let polyline = |svg: &mut String, pts: &[(f64, f64)], color: &str, width: f64| {
        let coords: Vec<String> = pts
            .iter()
            .map(|(x, v)| format!("{:.2},{:.2}", px(*x), pv(*v)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"/>",
            coords.join(" ")
        );
    };
    let reference: Vec<(f64, f64)> = record.samples.iter().map(|s| (s.x_ref, s.v_ref)).collect();
    let executed: Vec<(f64, f64)> = record.samples.iter().map(|s| (s.x, s.v)).collect();
    polyline(&mut svg, &reference, "#1f4e8c", 2.0);
    polyline(&mut svg, &executed, "#c23b57", 1.4);

    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">x_loc (m) vs v_loc (m/s)</text>",
        PAD,
        H - 12.0
    );
    let _ = writeln!(svg, "</svg>");
    svg
}

/// Recover the pendulum frequency from the conserved quantity of the
/// reference arc: for two knots, (v1^2 - v0^2)/(x1^2 - x0^2) = w^2.
fn estimate_omega(record: &StepRecord) -> Option<f64> {
    let s = &record.samples;
    for pair in s.windows(2) {
        let dx2 = pair[1].x_ref * pair[1].x_ref - pair[0].x_ref * pair[0].x_ref;
        let dv2 = pair[1].v_ref * pair[1].v_ref - pair[0].v_ref * pair[0].v_ref;
        if dx2.abs() > 1e-9 {
            let w2 = dv2 / dx2;
            if w2 > 0.0 {
                return Some(w2.sqrt());
            }
        }
    }
    None
}
