//! Scratch probe (not part of the documented example set).

use hybrid_control::hmp::{self, HmpSolveOptions};
use hybrid_control::presets;

fn main() -> hybrid_control::Result<()> {
    let preset = presets::example2();
    let problem = preset.hmp_problem();
    let opts = HmpSolveOptions::default();

    for ts0 in [1.2, 1.5, std::f64::consts::FRAC_PI_2, 1.8, 2.1, 2.4, 2.8, 3.2] {
        for p0 in [-0.5, 0.0, 0.5] {
            let t_start = std::time::Instant::now();
            match hmp::solve(&problem, &[ts0], &[p0], &opts) {
                Ok(e) => {
                    let min_x2 = e.trajectory.segments[0]
                        .states
                        .iter()
                        .map(|x| x[1])
                        .fold(f64::INFINITY, f64::min);
                    println!(
                        "guess ({ts0:.3}, {p0:+.1}) -> ts = {:.6}, p = {:+.6}, J = {:.8}, realizable = {}, min x2 = {:+.4}, iters = {}, {:?}",
                        e.switch_times[0],
                        e.p_values[0],
                        e.cost,
                        e.realizable,
                        min_x2,
                        e.newton_iterations,
                        t_start.elapsed()
                    );
                }
                Err(err) => println!("guess ({ts0:.3}, {p0:+.1}) -> error: {err}"),
            }
        }
    }
    Ok(())
}
