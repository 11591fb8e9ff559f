//! Run orchestration and the comparison harness.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use crate::error::{Error, Result};
use crate::fv::UniformSolver;
use crate::grid::CellIndex;
use crate::lts::AdaptiveSolver;
use crate::sim::config::{save_config, Mode, RunConfig};
use crate::sim::metrics::{error_norms, principal_axis, AxisFit, ErrorNorms, RunMetrics, SnapshotMetrics};
use crate::sim::snapshot::{list_snapshots, snapshot_file_name, Snapshot};
use crate::tree::{compression_rate, MrTree, TreeConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

enum Driver {
    Uniform(Box<UniformSolver<f64>>, f64),
    Adaptive(Box<AdaptiveSolver<f64>>),
}

impl Driver {
    fn new(cfg: &RunConfig, mode: Mode, level: u8) -> Result<Self> {
        let params = cfg.model.params();
        let stim = cfg.stimulus.protocol();
        Ok(match mode {
            Mode::Uniform => {
                let s = UniformSolver::new(level, params, stim, cfg.solver_settings(), cfg.time.cfl_factor)?;
                let m = s.state.v.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                Driver::Uniform(Box::new(s), m)
            }
            Mode::Mr | Mode::MrLts => {
                let mut c = cfg.clone();
                c.mode = mode;
                Driver::Adaptive(Box::new(AdaptiveSolver::new(params, stim, c.adaptive_settings()?)?))
            }
        })
    }

    fn dt(&self) -> f64 {
        match self {
            Driver::Uniform(s, _) => s.dt(),
            Driver::Adaptive(s) => s.dt(),
        }
    }

    fn step_count(&self) -> u64 {
        match self {
            Driver::Uniform(s, _) => s.state.step,
            Driver::Adaptive(s) => s.step_count(),
        }
    }

    fn time(&self) -> f64 {
        match self {
            Driver::Uniform(s, _) => s.time(),
            Driver::Adaptive(s) => s.time(),
        }
    }

    fn advance_to(&mut self, target: u64) -> Result<()> {
        let t = self.time();
        match self {
            Driver::Uniform(s, max_v) => {
                while s.state.step < target {
                    s.step().map_err(|e| e.at_time(s.time()))?;
                    *max_v = s.state.v.iter().fold(*max_v, |m, v| m.max(v.abs()));
                }
                Ok(())
            }
            Driver::Adaptive(s) => s.advance_to_step(target).map_err(|e| e.at_time(t.max(s.time()))),
        }
    }

    fn rows(&self) -> Vec<(CellIndex, [f64; 3])> {
        match self {
            Driver::Uniform(s, _) => s.rows(),
            Driver::Adaptive(s) => s.rows(),
        }
    }

    /// Fields `[v, u_e]` on the uniform grid of `level`, row-major.
    fn fields_on(&self, level: u8) -> Result<[Vec<f64>; 2]> {
        let vals = match self {
            Driver::Uniform(s, _) if s.grid.level == level => return Ok([s.state.v.clone(), s.state.ue.clone()]),
            Driver::Uniform(s, _) => {
                let tree = MrTree::from_leaves(uniform_tree_config(s.grid.level), s.params, &s.rows())?;
                tree.decode_to_level(level)
            }
            Driver::Adaptive(s) => s.tree.decode_to_level(level),
        };
        Ok([vals.iter().map(|x| x[0]).collect(), vals.iter().map(|x| x[1]).collect()])
    }

    fn leaf_count_and_eta(&self, max_level: u8) -> (usize, f64) {
        let n = match self {
            Driver::Uniform(s, _) => s.cells().len(),
            Driver::Adaptive(s) => s.leaf_count(),
        };
        (n, compression_rate(1u64 << (2 * max_level as u32), max_level, n))
    }

    fn max_abs_v(&self) -> f64 {
        match self {
            Driver::Uniform(_, m) => *m,
            Driver::Adaptive(s) => s.stats.max_abs_v,
        }
    }

    fn max_compatibility_defect(&self) -> f64 {
        match self {
            Driver::Uniform(s, _) => s.max_compatibility_defect,
            Driver::Adaptive(s) => s.stats.max_compatibility_defect,
        }
    }
}

fn uniform_tree_config(level: u8) -> TreeConfig<f64> {
    let mut t = TreeConfig::new(level, 1.0);
    t.adapt = false;
    t.min_level = 0;
    t
}

/// Finest step closest to `t`.
pub fn step_for_time(t: f64, dt: f64) -> u64 {
    (t / dt).round() as u64
}

struct Pass {
    snapshots: Vec<Snapshot>,
    fields: Vec<[Vec<f64>; 2]>,
    counts: Vec<(usize, f64)>,
    wall_clock: f64,
    dt: f64,
    steps: u64,
    max_abs_v: f64,
    max_compatibility_defect: f64,
}

/// Runs one pipeline, keeping snapshots and the fields decoded to `level`.
fn run_pass(cfg: &RunConfig, mode: Mode, grid_level: u8, level: u8) -> Result<Pass> {
    let mut driver = Driver::new(cfg, mode, grid_level)?;
    let dt = driver.dt();
    info!("{mode} at L={grid_level}: dt = {dt:e}, {} steps", step_for_time(cfg.t_final, dt));
    let mut pass = Pass {
        snapshots: Vec::new(),
        fields: Vec::new(),
        counts: Vec::new(),
        wall_clock: 0.0,
        dt,
        steps: 0,
        max_abs_v: 0.0,
        max_compatibility_defect: 0.0,
    };
    for &t in &cfg.snapshot_times {
        let start = Instant::now();
        driver.advance_to(step_for_time(t, dt))?;
        pass.wall_clock += start.elapsed().as_secs_f64();
        pass.snapshots.push(Snapshot::new(driver.time(), grid_level, mode.as_str(), driver.rows()));
        pass.fields.push(driver.fields_on(level)?);
        pass.counts.push(driver.leaf_count_and_eta(grid_level));
        info!("{mode}: snapshot at t = {} ({} leaves)", driver.time(), pass.counts.last().unwrap().0);
    }
    let start = Instant::now();
    driver.advance_to(step_for_time(cfg.t_final, dt))?;
    pass.wall_clock += start.elapsed().as_secs_f64();
    pass.steps = driver.step_count();
    pass.max_abs_v = driver.max_abs_v();
    pass.max_compatibility_defect = driver.max_compatibility_defect();
    Ok(pass)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub snapshots: Vec<Snapshot>,
    /// Snapshots of the paired uniform run, when one was made.
    pub uniform_snapshots: Vec<Snapshot>,
}

/// Executes the configured run; writes snapshots, the metrics file and the
/// configuration into `out` when given.
pub fn run(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let level = cfg.mr.max_level;
    let main = run_pass(cfg, cfg.mode, level, level)?;

    let paired = if cfg.harness.paired_uniform && cfg.mode != Mode::Uniform {
        Some(run_pass(cfg, Mode::Uniform, level, level)?)
    } else {
        None
    };
    let reference = match cfg.harness.reference_level {
        Some(r) => Some(run_pass(cfg, Mode::Uniform, r, level)?),
        None => None,
    };
    let (error_source, ref_fields) = match (&reference, &paired) {
        (Some(r), _) => ("reference", Some(&r.fields)),
        (None, Some(p)) => ("paired-uniform", Some(&p.fields)),
        (None, None) => ("none", None),
    };
    let area = vec![0.25f64.powi(level as i32); 1usize << (2 * level as u32)];
    let mut rows = Vec::with_capacity(main.snapshots.len());
    for (k, snap) in main.snapshots.iter().enumerate() {
        let (err_v, err_ue) = match ref_fields {
            Some(r) => (
                error_norms(&main.fields[k][0], &r[k][0], &area)?,
                error_norms(&main.fields[k][1], &r[k][1], &area)?,
            ),
            None => (ErrorNorms::NAN, ErrorNorms::NAN),
        };
        rows.push(SnapshotMetrics {
            time: snap.time,
            leaf_count: main.counts[k].0,
            eta: main.counts[k].1,
            err_v,
            err_ue,
        });
    }
    let metrics = RunMetrics {
        mode: cfg.mode.as_str().to_string(),
        max_level: level,
        fine_count: 1u64 << (2 * level as u32),
        comparison_level: level,
        error_source: error_source.to_string(),
        rows,
        dt: main.dt,
        steps: main.steps,
        wall_clock: main.wall_clock,
        uniform_wall_clock: paired.as_ref().map(|p| p.wall_clock),
        max_abs_v: main.max_abs_v,
        max_compatibility_defect: main.max_compatibility_defect,
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        save_config(cfg, &dir.join(CONFIG_FILE))?;
        for (k, s) in main.snapshots.iter().enumerate() {
            s.write(&dir.join(snapshot_file_name(k)))?;
        }
        metrics.write(&dir.join(METRICS_FILE))?;
        for (sub, pass) in [("uniform", &paired), ("reference", &reference)] {
            if let Some(p) = pass {
                let d = dir.join(sub);
                create_dir(&d)?;
                for (k, s) in p.snapshots.iter().enumerate() {
                    s.write(&d.join(snapshot_file_name(k)))?;
                }
            }
        }
    }
    Ok(RunOutput {
        metrics,
        snapshots: main.snapshots,
        uniform_snapshots: paired.map(|p| p.snapshots).unwrap_or_default(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Cell averages of a snapshot on the uniform grid of `level`: finer leaves
/// are averaged, coarser ones predicted. The leaves must tile the domain.
pub fn snapshot_fields(s: &Snapshot, level: u8) -> Result<Vec<[f64; 3]>> {
    let tree_level = s.max_level.max(level);
    let params = crate::model::ModelParams::default();
    let tree = MrTree::from_leaves(uniform_tree_config(tree_level), params, &s.rows)?;
    Ok(tree.decode_to_level(level))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub file: PathBuf,
    pub time_run: f64,
    pub time_reference: f64,
    pub level: u8,
    pub err_v: ErrorNorms,
    pub err_ue: ErrorNorms,
}

/// Compares matching snapshots of two run directories on the run's finest level.
pub fn compare_dirs(run_dir: &Path, reference_dir: &Path) -> Result<Vec<ComparisonRow>> {
    let a = list_snapshots(run_dir)?;
    let b = list_snapshots(reference_dir)?;
    if a.is_empty() {
        return Err(Error::Harness(format!("no snapshots in {}", run_dir.display())));
    }
    if a.len() != b.len() {
        return Err(Error::Harness(format!(
            "snapshot counts differ: {} in {} vs {} in {}",
            a.len(),
            run_dir.display(),
            b.len(),
            reference_dir.display()
        )));
    }
    let mut out = Vec::new();
    for (pa, pb) in a.iter().zip(&b) {
        let sa = Snapshot::read(pa)?;
        let sb = Snapshot::read(pb)?;
        if sb.max_level < sa.max_level {
            return Err(Error::Harness(format!(
                "reference level {} is coarser than run level {}",
                sb.max_level, sa.max_level
            )));
        }
        let level = sa.max_level;
        let fa = snapshot_fields(&sa, level)?;
        let fb = snapshot_fields(&sb, level)?;
        let area = vec![0.25f64.powi(level as i32); fa.len()];
        let comp = |f: &[[f64; 3]], k: usize| f.iter().map(|x| x[k]).collect::<Vec<_>>();
        out.push(ComparisonRow {
            file: pa.clone(),
            time_run: sa.time,
            time_reference: sb.time,
            level,
            err_v: error_norms(&comp(&fa, 0), &comp(&fb, 0), &area)?,
            err_ue: error_norms(&comp(&fa, 1), &comp(&fb, 1), &area)?,
        });
    }
    Ok(out)
}

/// Principal axis of `{v > threshold}` over the leaves of a snapshot.
pub fn snapshot_axis(s: &Snapshot, threshold: f64) -> Option<AxisFit> {
    principal_axis(
        s.rows.iter().map(|&(c, val)| {
            let g = c.geometry::<f64>();
            (g.center.0, g.center.1, g.area, val[0])
        }),
        threshold,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiescent(mode: Mode) -> RunConfig {
        let mut cfg = RunConfig { mode, ..RunConfig::default() };
        cfg.mr.max_level = 4;
        cfg.stimulus.v_inside = 0.0;
        cfg.stimulus.iapp_amplitude = 0.0;
        cfg.t_final = 0.002;
        cfg.snapshot_times = vec![0.0, 0.001, 0.002];
        cfg
    }

    #[test]
    fn quiescent_runs_stay_at_rest() {
        for mode in [Mode::Uniform, Mode::Mr, Mode::MrLts] {
            let out = run(&quiescent(mode), None).unwrap();
            assert_eq!(out.snapshots.len(), 3);
            for s in &out.snapshots {
                assert!(s.rows.iter().all(|r| r.1[0].abs() <= 1e-10), "{mode}");
            }
            assert!(out.metrics.max_abs_v <= 1e-10);
        }
    }

    #[test]
    fn quiescent_mr_matches_uniform() {
        let mut cfg = quiescent(Mode::Mr);
        cfg.harness.paired_uniform = true;
        let out = run(&cfg, None).unwrap();
        assert_eq!(out.metrics.error_source, "paired-uniform");
        for r in &out.metrics.rows {
            // both fields vanish identically
            assert_eq!(r.err_v.linf, 0.0);
            assert!(r.eta > 1.0);
        }
        assert!(out.metrics.nu().unwrap() > 0.0);
    }

    #[test]
    fn output_directory_round_trips_through_compare() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig { mode: Mode::MrLts, ..RunConfig::default() };
        cfg.mr.max_level = 4;
        cfg.t_final = 2e-4;
        cfg.snapshot_times = vec![1e-4, 2e-4];
        cfg.harness.paired_uniform = true;
        let out = run(&cfg, Some(dir.path())).unwrap();
        let files = list_snapshots(dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(Snapshot::read(&files[1]).unwrap(), out.snapshots[1]);
        let m = RunMetrics::read(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[1].err_v, out.metrics.rows[1].err_v);
        let cmp = compare_dirs(dir.path(), &dir.path().join("uniform")).unwrap();
        for (c, r) in cmp.iter().zip(&out.metrics.rows) {
            assert!((c.err_v.l1 - r.err_v.l1).abs() <= 1e-12 * r.err_v.l1.max(1e-300), "{c:?} {r:?}");
        }
        let same = compare_dirs(dir.path(), dir.path()).unwrap();
        assert!(same.iter().all(|c| c.err_v.linf == 0.0 && c.err_ue.linf == 0.0));
        assert_eq!(crate::sim::config::load_config(&dir.path().join(CONFIG_FILE)).unwrap(), cfg);
    }

    #[test]
    fn compare_rejects_a_coarser_reference() {
        let fine = tempfile::tempdir().unwrap();
        let coarse = tempfile::tempdir().unwrap();
        let mut cfg = quiescent(Mode::Uniform);
        cfg.snapshot_times = vec![0.0];
        run(&cfg, Some(fine.path())).unwrap();
        cfg.mr.max_level = 3;
        run(&cfg, Some(coarse.path())).unwrap();
        assert!(compare_dirs(coarse.path(), fine.path()).is_ok());
        let err = compare_dirs(fine.path(), coarse.path()).unwrap_err();
        assert!(err.to_string().contains("coarser"), "{err}");
    }

    #[test]
    fn runs_are_deterministic() {
        let mut cfg = RunConfig { mode: Mode::Mr, ..RunConfig::default() };
        cfg.mr.max_level = 4;
        cfg.t_final = 3e-4;
        cfg.snapshot_times = vec![3e-4];
        let a = run(&cfg, None).unwrap();
        let b = run(&cfg, None).unwrap();
        assert_eq!(a.snapshots[0].to_text(), b.snapshots[0].to_text());
    }

    #[test]
    fn snapshot_time_is_the_nearest_step() {
        assert_eq!(step_for_time(0.5, 0.2), 3);
        assert_eq!(step_for_time(0.0, 0.2), 0);
        assert_eq!(step_for_time(1.0, 1.0 / 3.0), 3);
    }
}
