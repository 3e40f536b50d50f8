//! File emission: stable CSV layouts for trajectories, extremals, value
//! grids, Riccati paths and equivalence reports, a compact binary grid
//! format, and a manifest recording the configuration hash and the content
//! hash of every emitted file.
//!
//! All floats are written with Rust's shortest round-trip formatting, so
//! identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::equivalence::EquivalenceReport;
use crate::error::Result;
use crate::hdp::ValueGrid;
use crate::hmp::{hamiltonian, HmpExtremal, HmpProblem};
use crate::riccati::RiccatiSolution;
use crate::system::HybridSystem;
use crate::trajectory::HybridTrajectory;

/// Maximum state and control dimension across the segments of a trajectory;
/// rows of lower-dimensional segments leave the extra columns empty.
fn traj_dims(traj: &HybridTrajectory) -> (usize, usize) {
    let n = traj.segments.iter().map(|s| s.states[0].len()).max().unwrap_or(0);
    let m = traj
        .segments
        .iter()
        .map(|s| s.controls[0].len())
        .max()
        .unwrap_or(0);
    (n, m)
}

fn push_padded(line: &mut String, values: &[f64], width: usize) {
    for k in 0..width {
        match values.get(k) {
            Some(v) => {
                let _ = write!(line, ",{v}");
            }
            None => line.push(','),
        }
    }
}

/// Trajectory CSV: `t,q,switch_count,x1..xn,u1..um`.
pub fn write_trajectory_csv(path: &Path, traj: &HybridTrajectory) -> Result<()> {
    let (n, m) = traj_dims(traj);
    let mut out = String::new();
    out.push_str("t,q,switch_count");
    for k in 1..=n {
        let _ = write!(out, ",x{k}");
    }
    for k in 1..=m {
        let _ = write!(out, ",u{k}");
    }
    out.push('\n');
    for (i, seg) in traj.segments.iter().enumerate() {
        for k in 0..seg.times.len() {
            let _ = write!(out, "{},{},{}", seg.times[k], seg.loc.0, i);
            push_padded(&mut out, seg.states[k].as_slice(), n);
            push_padded(&mut out, seg.controls[k].as_slice(), m);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Switch-record CSV: `t,kind,sigma,pre1..,post1..`.
pub fn write_switches_csv(path: &Path, sys: &HybridSystem, traj: &HybridTrajectory) -> Result<()> {
    let n_pre = traj.switches.iter().map(|s| s.pre_state.len()).max().unwrap_or(0);
    let n_post = traj
        .switches
        .iter()
        .map(|s| s.post_state.len())
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    out.push_str("t,kind,sigma");
    for k in 1..=n_pre {
        let _ = write!(out, ",pre{k}");
    }
    for k in 1..=n_post {
        let _ = write!(out, ",post{k}");
    }
    out.push('\n');
    for sw in &traj.switches {
        let _ = write!(out, "{},{},{}", sw.time, sw.kind, sys.event_name(sw.event));
        push_padded(&mut out, sw.pre_state.as_slice(), n_pre);
        push_padded(&mut out, sw.post_state.as_slice(), n_post);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Extremal CSV: `t,q,x..,lambda..,u..,H`.
pub fn write_extremal_csv(path: &Path, problem: &HmpProblem, extremal: &HmpExtremal) -> Result<()> {
    let (n, m) = traj_dims(&extremal.trajectory);
    let mut out = String::new();
    out.push_str("t,q");
    for k in 1..=n {
        let _ = write!(out, ",x{k}");
    }
    for k in 1..=n {
        let _ = write!(out, ",lambda{k}");
    }
    for k in 1..=m {
        let _ = write!(out, ",u{k}");
    }
    out.push_str(",H\n");
    for (i, seg) in extremal.trajectory.segments.iter().enumerate() {
        let adj = &extremal.adjoint[i];
        for k in 0..seg.times.len() {
            let h = hamiltonian(
                &problem.sys,
                &problem.cost,
                seg.loc,
                &seg.states[k],
                &adj.values[k],
                &seg.controls[k],
            );
            let _ = write!(out, "{},{}", seg.times[k], seg.loc.0);
            push_padded(&mut out, seg.states[k].as_slice(), n);
            push_padded(&mut out, adj.values[k].as_slice(), n);
            push_padded(&mut out, seg.controls[k].as_slice(), m);
            let _ = writeln!(out, ",{h}");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Extremal summary as structured text.
pub fn write_extremal_summary(path: &Path, extremal: &HmpExtremal) -> Result<()> {
    let summary = serde_json::json!({
        "switch_times": extremal.switch_times,
        "p_values": extremal.p_values,
        "cost": extremal.cost,
        "residual_norm": extremal.residual_norm,
        "newton_iterations": extremal.newton_iterations,
        "realizable": extremal.realizable,
    });
    fs::write(path, format!("{:#}\n", summary))?;
    Ok(())
}

/// Value-grid CSV at node strides: `t,x1..,V[,u1..]`.
pub fn write_value_grid_csv(
    path: &Path,
    grid: &ValueGrid,
    time_stride: usize,
    node_stride: usize,
) -> Result<()> {
    let d = grid.dim();
    let mut out = String::new();
    out.push('t');
    for k in 1..=d {
        let _ = write!(out, ",x{k}");
    }
    out.push_str(",V");
    if grid.has_policy() {
        out.push_str(",u1");
    }
    out.push('\n');
    let ts = time_stride.max(1);
    let ns = node_stride.max(1);
    for k in (0..grid.n_t).step_by(ts) {
        let t = grid.t0 + k as f64 * grid.dt;
        let vals = grid.slice(k);
        for node in (0..grid.n_nodes()).step_by(ns) {
            let x = grid.node_coords(node);
            let _ = write!(out, "{t}");
            for j in 0..d {
                let _ = write!(out, ",{}", x[j]);
            }
            let _ = write!(out, ",{}", vals[node]);
            if grid.has_policy() {
                if let Some(u) = grid.policy_at(t, &x) {
                    let _ = write!(out, ",{}", u[0]);
                } else {
                    out.push(',');
                }
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Compact binary layout of a value grid (see the README for the format):
/// magic `HOCVGRID`, a little-endian header with the dimensions and axes,
/// then all slice values as little-endian doubles, slice-major.
pub fn write_value_grid_binary(path: &Path, grid: &ValueGrid) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(b"HOCVGRID")?;
    file.write_all(&1u32.to_le_bytes())?; // version
    file.write_all(&(grid.dim() as u32).to_le_bytes())?;
    file.write_all(&(grid.n_t as u32).to_le_bytes())?;
    file.write_all(&(grid.q.0 as u32).to_le_bytes())?;
    file.write_all(&(grid.remaining as u32).to_le_bytes())?;
    file.write_all(&grid.t0.to_le_bytes())?;
    file.write_all(&grid.dt.to_le_bytes())?;
    for ax in &grid.axes {
        file.write_all(&ax.lo.to_le_bytes())?;
        file.write_all(&ax.dx.to_le_bytes())?;
        file.write_all(&(ax.n as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(grid.n_nodes() * 8);
    for k in 0..grid.n_t {
        buf.clear();
        for v in grid.slice(k) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)?;
    }
    Ok(())
}

/// Riccati solution CSV: `t,K11..Knn,s1..sn,gain1..gainm*n` per sample, with
/// `K` row-major and the gain `R^{-1} B^T K` evaluated at each time.
pub fn write_riccati_csv(path: &Path, sol: &RiccatiSolution) -> Result<()> {
    let mut out = String::new();
    let n = sol.stages[0].k_vals[0].nrows();
    out.push('t');
    for i in 1..=n {
        for j in 1..=n {
            let _ = write!(out, ",K{i}{j}");
        }
    }
    for i in 1..=n {
        let _ = write!(out, ",s{i}");
    }
    out.push('\n');
    for stage in &sol.stages {
        for (idx, &t) in stage.times.iter().enumerate() {
            let _ = write!(out, "{t}");
            let k = &stage.k_vals[idx];
            for i in 0..n {
                for j in 0..n {
                    let _ = write!(out, ",{}", k[(i, j)]);
                }
            }
            for i in 0..n {
                let _ = write!(out, ",{}", stage.s_vals[idx][i]);
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Riccati switch summary as structured text.
pub fn write_riccati_summary(path: &Path, sol: &RiccatiSolution) -> Result<()> {
    let switches: Vec<_> = sol
        .switch_records
        .iter()
        .map(|r| {
            serde_json::json!({
                "time": r.time,
                "p": r.p,
                "k_minus": r.k_minus.as_slice(),
                "s_minus": r.s_minus.as_slice(),
                "k_plus": r.k_plus.as_slice(),
                "s_plus": r.s_plus.as_slice(),
            })
        })
        .collect();
    let summary = serde_json::json!({
        "switch_times": sol.switch_times,
        "p_values": sol.p_values,
        "cost": sol.cost,
        "residual_norm": sol.residual_norm,
        "max_k_norm": sol.max_k_norm,
        "warnings": sol.warnings,
        "switches": switches,
    });
    fs::write(path, format!("{:#}\n", summary))?;
    Ok(())
}

/// Equivalence error series CSV: `t,segment,abs_err,rel_err`.
pub fn write_equivalence_csv(path: &Path, report: &EquivalenceReport) -> Result<()> {
    let mut out = String::new();
    out.push_str("t,segment,abs_err,rel_err\n");
    for seg in &report.segments {
        for (k, &t) in seg.times.iter().enumerate() {
            let _ = writeln!(
                out,
                "{t},{},{},{}",
                seg.segment,
                seg.abs_err[k],
                seg.abs_err[k] / report.denominator
            );
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Equivalence report summary as structured text.
pub fn write_equivalence_summary(path: &Path, report: &EquivalenceReport) -> Result<()> {
    let switches: Vec<_> = report
        .switches
        .iter()
        .map(|s| {
            serde_json::json!({
                "index": s.index,
                "time": s.time,
                "adjoint_residual": s.adjoint_residual,
                "gradient_residual": s.gradient_residual,
                "mismatch": s.mismatch,
            })
        })
        .collect();
    let summary = serde_json::json!({
        "max_rel_error": report.max_rel_error,
        "median_rel_error": report.median_rel_error,
        "denominator": report.denominator,
        "coverage": report.coverage,
        "grid_dx": report.grid_dx,
        "grid_dt": report.grid_dt,
        "switches": switches,
    });
    fs::write(path, format!("{:#}\n", summary))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `manifest.json` into `out_dir`: the configuration summary and its
/// hash, the crate version, and the content hash of every emitted file.
pub fn write_manifest(
    out_dir: &Path,
    config: &serde_json::Value,
    files: &[PathBuf],
) -> Result<PathBuf> {
    let config_text = format!("{config}");
    let mut entries = Vec::new();
    for f in files {
        let bytes = fs::read(f)?;
        entries.push(serde_json::json!({
            "file": f.file_name().and_then(|n| n.to_str()).unwrap_or_default(),
            "sha256": sha256_hex(&bytes),
            "bytes": bytes.len(),
        }));
    }
    let manifest = serde_json::json!({
        "tool": "hoctl",
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "config_sha256": sha256_hex(config_text.as_bytes()),
        "files": entries,
    });
    let path = out_dir.join("manifest.json");
    fs::write(&path, format!("{:#}\n", manifest))?;
    Ok(path)
}

/// A gnuplot script for the emitted CSV files (data-only plotting support).
pub fn write_gnuplot_script(out_dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    let mut out = String::from("# gnuplot script for the emitted CSV files\nset datafile separator \",\"\nset key autotitle columnhead\n");
    for stem in stems {
        let _ = writeln!(
            out,
            "# plot \"{stem}.csv\" using 1:4 with lines title \"{stem}\""
        );
    }
    let path = out_dir.join("plots.gp");
    fs::write(&path, out)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::simulator::{simulate, IntegratorConfig};
    use crate::system::{ControlLaw, HybridInput};
    use nalgebra::DVector;

    #[test]
    fn trajectory_csv_roundtrips_deterministically() {
        let p = presets::example2();
        let input = HybridInput::continuous(ControlLaw::constant(0.0));
        let traj = simulate(
            &p.sys,
            &input,
            crate::types::Loc(0),
            &DVector::from_vec(vec![0.0, 1.0]),
            (0.0, 2.0),
            &IntegratorConfig::with_step(1e-2),
        )
        .unwrap();
        let dir = std::env::temp_dir().join("hoctl-export-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("traj_a.csv");
        let p2 = dir.join("traj_b.csv");
        write_trajectory_csv(&p1, &traj).unwrap();
        write_trajectory_csv(&p2, &traj).unwrap();
        let (a, b) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,q,switch_count,x1,x2,u1");
        assert!(text.lines().count() > 100);

        let sw = dir.join("switches.csv");
        write_switches_csv(&sw, &p.sys, &traj).unwrap();
        let text = std::fs::read_to_string(&sw).unwrap();
        assert!(text.starts_with("t,kind,sigma,pre1,pre2,post1,post2"));
        assert!(text.contains("autonomous,touch"));
    }

    #[test]
    fn manifest_hashes_files() {
        let dir = std::env::temp_dir().join("hoctl-manifest-test");
        std::fs::create_dir_all(&dir).unwrap();
        let f = dir.join("data.csv");
        std::fs::write(&f, "a,b\n1,2\n").unwrap();
        let cfg = serde_json::json!({"problem": "example1", "tol": 1e-8});
        let path = write_manifest(&dir, &cfg, &[f]).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(manifest["files"][0]["file"], "data.csv");
        assert_eq!(
            manifest["files"][0]["sha256"]
                .as_str()
                .unwrap()
                .len(),
            64
        );
        assert!(manifest["config_sha256"].as_str().unwrap().len() == 64);
    }
}
