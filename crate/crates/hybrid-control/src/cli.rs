//! Command-line front end: preset or config problems, solver runs and
//! plot-ready data emission. Exit codes: 0 success, 1 solver failure,
//! 2 configuration error.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::equivalence::{self, CompareOptions};
use crate::error::Error;
use crate::export;
use crate::hdp::{self, GridSpec};
use crate::hmp::{self, HmpSolveOptions};
use crate::oracle::{self, OracleSpec};
use crate::presets::{self, Preset};
use crate::riccati::{self, LqSolveOptions};
use crate::sensitivity;
use crate::simulator::{simulate, IntegratorConfig};
use crate::system::{ControlLaw, HybridInput};
use crate::types::{Loc, State};

#[derive(Parser)]
#[command(
    name = "hoctl",
    about = "Hybrid optimal control toolkit",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Preset name (example1 | example2 | lq) or a JSON config path.
    problem: String,
    /// Shooting residual tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Value-grid resolution `dx,dt` (applied to every stage).
    #[arg(long)]
    grid: Option<String>,
    /// Value-grid box `lo,hi[,lo,hi]` per state axis.
    #[arg(long = "box")]
    box_: Option<String>,
    /// Seed for the randomized checks.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for the emitted artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Constant control value for open-loop simulation.
    #[arg(long, default_value_t = 0.0)]
    u: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the hybrid input on the system and export the trajectory.
    Simulate(CommonArgs),
    /// Solve the minimum-principle boundary value problem by shooting.
    Hmp(CommonArgs),
    /// Solve the stacked value functions on grids and export them.
    Hdp(CommonArgs),
    /// Solve the linear-quadratic tracking instance by the matrix formalism.
    Riccati {
        #[command(flatten)]
        common: CommonArgs,
        /// Require the instance to be switch-free.
        #[arg(long)]
        no_switch: bool,
    },
    /// Run shooting + grids + the adjoint-gradient comparison + the
    /// sensitivity oracle, and emit the equivalence report.
    Verify(CommonArgs),
    /// Brute-force baseline over switch times and piecewise controls.
    Oracle(CommonArgs),
}

/// Parse and run; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> crate::Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Hmp(args) => cmd_hmp(&args),
        Command::Hdp(args) => cmd_hdp(&args),
        Command::Riccati { common, no_switch } => cmd_riccati(&common, no_switch),
        Command::Verify(args) => cmd_verify(&args),
        Command::Oracle(args) => cmd_oracle(&args),
    }
}

fn load_problem(name_or_path: &str) -> crate::Result<Preset> {
    if let Some(preset) = presets::by_name(name_or_path) {
        return Ok(preset);
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        return crate::config::load(path);
    }
    Err(Error::Config(format!(
        "unknown preset or missing config file `{name_or_path}`"
    )))
}

fn ensure_out(dir: &Path) -> crate::Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn parse_grid(args: &CommonArgs, preset: &Preset) -> crate::Result<Vec<GridSpec>> {
    let mut grids = preset.grids.clone();
    if let Some(spec) = &args.grid {
        let parts: Vec<&str> = spec.split(',').collect();
        if parts.len() != 2 {
            return Err(Error::Config("--grid expects `dx,dt`".into()));
        }
        let dx: f64 = parts[0]
            .parse()
            .map_err(|_| Error::Config("bad dx in --grid".into()))?;
        let dt: f64 = parts[1]
            .parse()
            .map_err(|_| Error::Config("bad dt in --grid".into()))?;
        for g in grids.iter_mut() {
            g.dx = vec![dx; g.dx.len()];
            g.dt = dt;
        }
    }
    if let Some(spec) = &args.box_ {
        let vals: Vec<f64> = spec
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Config("bad --box".into())))
            .collect::<crate::Result<_>>()?;
        if vals.len() % 2 != 0 {
            return Err(Error::Config("--box expects `lo,hi` pairs".into()));
        }
        let dims = vals.len() / 2;
        for g in grids.iter_mut() {
            if g.lo.len() != dims {
                return Err(Error::Config(format!(
                    "--box has {dims} axes, the problem has {}",
                    g.lo.len()
                )));
            }
            for j in 0..dims {
                g.lo[j] = vals[2 * j];
                g.hi[j] = vals[2 * j + 1];
            }
        }
    }
    Ok(grids)
}

fn config_json(args: &CommonArgs, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "problem": args.problem,
        "tol": args.tol,
        "grid": args.grid,
        "box": args.box_,
        "seed": args.seed,
        "u": args.u,
        "extra": extra,
    })
}

fn hmp_options(args: &CommonArgs) -> HmpSolveOptions {
    let mut opts = HmpSolveOptions::default();
    if let Some(tol) = args.tol {
        opts.newton.tol = tol;
    }
    opts
}

fn cmd_simulate(args: &CommonArgs) -> crate::Result<()> {
    let preset = load_problem(&args.problem)?;
    ensure_out(&args.out)?;
    let input = HybridInput::continuous(ControlLaw::constant(args.u));
    let traj = simulate(
        &preset.sys,
        &input,
        preset.q0,
        &preset.x0,
        (preset.t0, preset.tf),
        &IntegratorConfig::default(),
    )?;
    let traj_path = args.out.join("trajectory.csv");
    let sw_path = args.out.join("switches.csv");
    export::write_trajectory_csv(&traj_path, &traj)?;
    export::write_switches_csv(&sw_path, &preset.sys, &traj)?;
    export::write_gnuplot_script(&args.out, &["trajectory"])?;
    export::write_manifest(
        &args.out,
        &config_json(args, serde_json::json!({"subcommand": "simulate"})),
        &[traj_path, sw_path],
    )?;
    println!(
        "simulate {}: {} switches, final state {:?}",
        preset.name,
        traj.num_switches(),
        traj.final_state().as_slice()
    );
    for sw in &traj.switches {
        println!(
            "  switch at t = {:.9} ({}), pre-state {:?}",
            sw.time,
            sw.kind,
            sw.pre_state.as_slice()
        );
    }
    Ok(())
}

fn cmd_hmp(args: &CommonArgs) -> crate::Result<()> {
    let preset = load_problem(&args.problem)?;
    ensure_out(&args.out)?;
    let problem = preset.hmp_problem();
    let opts = hmp_options(args);
    let extremal = hmp::solve_multistart(&problem, &preset.guess_grid(), &opts)?;
    let csv = args.out.join("extremal.csv");
    let summary = args.out.join("extremal_summary.json");
    export::write_extremal_csv(&csv, &problem, &extremal)?;
    export::write_extremal_summary(&summary, &extremal)?;
    export::write_gnuplot_script(&args.out, &["extremal"])?;
    export::write_manifest(
        &args.out,
        &config_json(args, serde_json::json!({"subcommand": "hmp"})),
        &[csv, summary],
    )?;
    println!(
        "hmp {}: cost {:.9}, residual {:.3e}, switch times {:?}, p {:?}",
        preset.name, extremal.cost, extremal.residual_norm, extremal.switch_times, extremal.p_values
    );
    Ok(())
}

fn cmd_hdp(args: &CommonArgs) -> crate::Result<()> {
    let preset = load_problem(&args.problem)?;
    ensure_out(&args.out)?;
    let grids_spec = parse_grid(args, &preset)?;
    let grids = hdp::solve_hjb(
        &preset.sys,
        &preset.cost,
        &preset.seq,
        (preset.t0, preset.tf),
        &grids_spec,
    )?;
    let mut files = Vec::new();
    for g in &grids {
        let stem = format!("value_q{}_rem{}", g.q.0, g.remaining);
        let csv = args.out.join(format!("{stem}.csv"));
        let bin = args.out.join(format!("{stem}.bin"));
        // Strides keep the CSV at a plottable size.
        let ts = (g.n_t / 64).max(1);
        let ns = (g.n_nodes() / 2048).max(1);
        export::write_value_grid_csv(&csv, g, ts, ns)?;
        export::write_value_grid_binary(&bin, g)?;
        files.push(csv);
        files.push(bin);
        println!(
            "hdp {}: stage q{} remaining {} -> {} nodes x {} slices, {} clamped feet",
            preset.name,
            g.q.0,
            g.remaining,
            g.n_nodes(),
            g.n_t,
            g.boundary_clamps
        );
    }
    export::write_gnuplot_script(&args.out, &["value_q0_rem0"])?;
    export::write_manifest(
        &args.out,
        &config_json(args, serde_json::json!({"subcommand": "hdp"})),
        &files,
    )?;
    Ok(())
}

fn cmd_riccati(args: &CommonArgs, no_switch: bool) -> crate::Result<()> {
    ensure_out(&args.out)?;
    let (sys, cost, x0, span) = match args.problem.as_str() {
        "lq" | "tanh" => {
            let (sys, cost) = presets::lq_tanh_instance();
            (sys, cost, DVector::from_vec(vec![1.0]), (0.0, 1.0))
        }
        "example2" => {
            let (sys, cost) = presets::lq_example2_shaped();
            (sys, cost, DVector::from_vec(vec![0.0, 1.0]), (0.0, 4.0))
        }
        other => {
            return Err(Error::Config(format!(
                "riccati instances: lq | example2 (got `{other}`)"
            )))
        }
    };
    if no_switch && sys.num_switches() > 0 {
        return Err(Error::Config(
            "--no-switch requested but the instance has switches".into(),
        ));
    }
    let mut opts = LqSolveOptions::default();
    if let Some(tol) = args.tol {
        opts.newton.tol = tol;
    }
    let outcome = riccati::solve_tracking_multistart(&sys, &cost, &x0, span, &opts)?;
    let sol = &outcome.roots[0];
    let csv = args.out.join("riccati.csv");
    let summary = args.out.join("riccati_summary.json");
    export::write_riccati_csv(&csv, sol)?;
    export::write_riccati_summary(&summary, sol)?;
    export::write_gnuplot_script(&args.out, &["riccati"])?;
    export::write_manifest(
        &args.out,
        &config_json(args, serde_json::json!({"subcommand": "riccati"})),
        &[csv, summary],
    )?;
    println!(
        "riccati {}: K(t0) = {:?}, cost {:.9}, residual {:.3e}{}",
        args.problem,
        sol.k_at(span.0).as_slice(),
        sol.cost,
        sol.residual_norm,
        if outcome.multiple_roots {
            " (multiple roots found; cheapest realizable reported)"
        } else {
            ""
        }
    );
    Ok(())
}

fn cmd_verify(args: &CommonArgs) -> crate::Result<()> {
    let preset = load_problem(&args.problem)?;
    ensure_out(&args.out)?;
    let problem = preset.hmp_problem();
    let opts = hmp_options(args);

    let extremal = hmp::solve_multistart(&problem, &preset.guess_grid(), &opts)?;
    println!(
        "verify {}: extremal cost {:.9}, residual {:.3e}",
        preset.name, extremal.cost, extremal.residual_norm
    );
    for j in 0..extremal.trajectory.num_switches() {
        let gap = hmp::hamiltonian_gap(&problem, &extremal, j)?;
        println!("  hamiltonian gap at switch {j}: {gap:.3e}");
    }

    let grids_spec = parse_grid(args, &preset)?;
    let grids = hdp::solve_hjb(
        &preset.sys,
        &preset.cost,
        &preset.seq,
        (preset.t0, preset.tf),
        &grids_spec,
    )?;
    let report = equivalence::compare(
        &preset.sys,
        &preset.cost,
        &extremal,
        &grids,
        &CompareOptions::default(),
    )?;
    println!(
        "  adjoint vs value gradient: max rel {:.3e}, median rel {:.3e}, coverage {:.1}%",
        report.max_rel_error,
        report.median_rel_error,
        100.0 * report.coverage
    );

    // Sensitivity oracle under seeded non-optimal feedback laws.
    let cfg = IntegratorConfig::with_step(1e-4);
    let mut worst_rel: f64 = 0.0;
    let mut sens_entries = Vec::new();
    for k in 0..3u64 {
        let (a, b) = seeded_feedback_coeffs(args.seed, k);
        let sysc = preset.sys.clone();
        let feedback = ControlLaw::Feedback(Arc::new(move |_t: f64, q: Loc, x: &State| {
            let m = sysc.control_dim(q);
            let mut u = DVector::zeros(m);
            for i in 0..m {
                u[i] = a + b * x.iter().sum::<f64>();
            }
            sysc.project_control(q, &u)
        }));
        let controlled_times: Vec<f64> = preset
            .seq
            .steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == crate::types::SwitchKind::Controlled)
            .map(|(j, _)| {
                preset.t0 + (preset.tf - preset.t0) * (j + 1) as f64
                    / (preset.seq.num_switches() + 1) as f64
            })
            .collect();
        let sens = sensitivity::propagate_sensitivity(
            &preset.sys,
            &preset.cost,
            &feedback,
            &preset.seq,
            &preset.x0,
            (preset.t0, preset.tf),
            &controlled_times,
            &cfg,
        )?;
        let fd = sensitivity::sensitivity_fd_oracle(
            &preset.sys,
            &preset.cost,
            &sens,
            &feedback,
            preset.q0,
            &preset.x0,
            (preset.t0, preset.tf),
            1e-5,
            &cfg,
        )?;
        let g0 = sens.initial_gradient();
        let rel = (&g0 - &fd).amax() / fd.amax().max(1e-12);
        worst_rel = worst_rel.max(rel);
        sens_entries.push(serde_json::json!({
            "feedback": {"offset": a, "state_gain": b},
            "gradient": g0.as_slice(),
            "finite_difference": fd.as_slice(),
            "rel_error": rel,
        }));
    }
    println!("  sensitivity vs finite differences: worst rel {worst_rel:.3e}");

    let eq_csv = args.out.join("equivalence.csv");
    let eq_summary = args.out.join("equivalence_summary.json");
    let ex_csv = args.out.join("extremal.csv");
    let sens_path = args.out.join("sensitivity_summary.json");
    export::write_equivalence_csv(&eq_csv, &report)?;
    export::write_equivalence_summary(&eq_summary, &report)?;
    export::write_extremal_csv(&ex_csv, &problem, &extremal)?;
    std::fs::write(
        &sens_path,
        format!(
            "{:#}\n",
            serde_json::json!({"worst_rel_error": worst_rel, "runs": sens_entries})
        ),
    )?;
    export::write_gnuplot_script(&args.out, &["equivalence", "extremal"])?;
    export::write_manifest(
        &args.out,
        &config_json(args, serde_json::json!({"subcommand": "verify"})),
        &[eq_csv, eq_summary, ex_csv, sens_path],
    )?;
    Ok(())
}

/// Small deterministic feedback coefficients from the seed.
fn seeded_feedback_coeffs(seed: u64, k: u64) -> (f64, f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(k));
    (rng.gen_range(-0.3..0.3), rng.gen_range(-0.35..0.35))
}

fn cmd_oracle(args: &CommonArgs) -> crate::Result<()> {
    let preset = load_problem(&args.problem)?;
    ensure_out(&args.out)?;
    let problem = preset.hmp_problem();
    let outcome = oracle::brute_force(&problem, &OracleSpec::default())?;
    let path = args.out.join("oracle_summary.json");
    std::fs::write(
        &path,
        format!(
            "{:#}\n",
            serde_json::json!({
                "best_cost": outcome.best_cost,
                "best_switch_time": outcome.best_switch_time,
                "best_controls": outcome.best_controls,
                "evaluations": outcome.evaluations,
            })
        ),
    )?;
    export::write_manifest(
        &args.out,
        &config_json(args, serde_json::json!({"subcommand": "oracle"})),
        &[path],
    )?;
    println!(
        "oracle {}: best cost {:.9} at switch time {:?} ({} evaluations)",
        preset.name, outcome.best_cost, outcome.best_switch_time, outcome.evaluations
    );
    Ok(())
}
