//! Shooting solution of the scalar preset: one controlled switch with a
//! sign-flip jump. Prints the converged switch time, multiplier data,
//! Hamiltonian gap and cost.

use hybrid_control::hmp::{self, HmpSolveOptions};
use hybrid_control::presets;

fn main() -> hybrid_control::Result<()> {
    let preset = presets::example1();
    let problem = preset.hmp_problem();
    let opts = HmpSolveOptions::default();
    let extremal = hmp::solve(&problem, &preset.guess_times, &preset.guess_p, &opts)?;

    println!("switch time t_s = {:.12}", extremal.switch_times[0]);
    println!("cost J = {:.12}", extremal.cost);
    println!("residual = {:.3e}", extremal.residual_norm);
    println!("newton iterations = {}", extremal.newton_iterations);

    let gap = hmp::hamiltonian_gap(&problem, &extremal, 0)?;
    println!("hamiltonian gap at t_s = {:.3e}", gap);

    let sw = &extremal.trajectory.switches[0];
    println!(
        "x(t_s-) = {:.9}, x(t_s) = {:.9}",
        sw.pre_state[0], sw.post_state[0]
    );
    let x_f = extremal.trajectory.final_state();
    let lam_f = extremal.lambda(problem.tf);
    println!("x(t_f) = {:.9}, lambda(t_f) = {:.9}", x_f[0], lam_f[0]);
    Ok(())
}
