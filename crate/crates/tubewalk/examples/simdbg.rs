use nalgebra::Vector2;
use tubewalk::planner::*;
use tubewalk::rom::*;
use tubewalk::sim::*;
use tubewalk::terrain::{TerrainSpec, TerrainStyle};

fn main() {
    let hilly = TrialConfig { max_steps: 30, ..TrialConfig::default() };
    match run_trial(&hilly) {
        Ok((rep, recs)) => {
            println!("hilly: steps {} p_tube {} reached {} failed {} thr {:.4} w_bar {:.4}",
                rep.steps, rep.p_tube, rep.reached, rep.failed, rep.threshold, rep.w_bar);
            for r in &recs {
                println!("  q{} uf={:.3} dth={:.3} z={:.3} cov={}", r.index, r.control.foot_offset, r.control.heading_change, r.true_stance_height, r.cp_covered);
            }
        }
        Err(e) => println!("hilly error: {e}"),
    }
}
