//! Shooting solution of the planar preset: one autonomous switch on the
//! velocity manifold `x2 = 0`. The unknowns are the switching time and the
//! manifold multiplier `p`; the residuals are the Hamiltonian gap and the
//! manifold membership of the pre-jump state.

use hybrid_control::hmp::{self, HmpSolveOptions};
use hybrid_control::presets;

fn main() -> hybrid_control::Result<()> {
    let preset = presets::example2();
    let problem = preset.hmp_problem();
    let opts = HmpSolveOptions::default();
    // Multistart: the shooting residuals admit several roots here, and the
    // event-driven semantics realize only the one whose oscillator arc
    // first reaches the manifold at the solved switch time.
    let extremal = hmp::solve_multistart(&problem, &preset.guess_grid(), &opts)?;
    assert!(extremal.realizable);

    println!("switch time t_s = {:.12}", extremal.switch_times[0]);
    println!("multiplier p = {:.12}", extremal.p_values[0]);
    println!("cost J = {:.12}", extremal.cost);
    println!("residual = {:.3e}", extremal.residual_norm);

    let sw = &extremal.trajectory.switches[0];
    println!(
        "x(t_s-) = ({:.9}, {:.3e})  [x2 should sit on the manifold]",
        sw.pre_state[0], sw.pre_state[1]
    );
    let gap = hmp::hamiltonian_gap(&problem, &extremal, 0)?;
    println!("hamiltonian gap at t_s = {:.3e}", gap);

    let x_f = extremal.trajectory.final_state();
    let lam_f = extremal.lambda(problem.tf);
    println!(
        "x(t_f) = ({:.9}, {:.9}), lambda(t_f) = ({:.3e}, {:.9})",
        x_f[0], x_f[1], lam_f[0], lam_f[1]
    );
    Ok(())
}
