//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. The desk-scale run (L = 6 to t = 0.5) is shared by the
//! threshold-control, compression, stability and anisotropy checks.

use std::io::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bidomain_mr::lts::AdaptiveSolver as Adaptive;
use bidomain_mr::multiresolution::{self as mr, Stencil, GAMMA};
use bidomain_mr::sim::{self, axis_difference, error_norms, snapshot_axis, snapshot_fields, Mode, RunConfig};
use bidomain_mr::{AdaptiveSettings, Error, Params, SolverSettings, Stimulus, TreeConfig, UniformSolver};

// Pinned tolerances.
const LOSSLESS_TOL: f64 = 1e-12;
const LOSSLESS_SECONDS: f64 = 5.0;
const CONSISTENCY_TOL: f64 = 1e-14;
const CONSISTENCY_SAMPLES: usize = 100_000;
const CANCELLATION_TOL: f64 = 1e-12;
const CONSERVATION_TOL: f64 = 1e-12;
const CONSERVATION_STEPS: u64 = 200;
const COMPATIBILITY_TOL: f64 = 1e-10;
const COMPATIBILITY_STEPS: u64 = 100;
const EQUIVALENCE_TOL: f64 = 1e-10;
const EQUIVALENCE_STEPS: u64 = 50;
const THRESHOLD_ERR_MAX: f64 = 5e-3;
const THRESHOLD_NOISE_FACTOR: f64 = 2.0;
const THRESHOLD_SECONDS: f64 = 120.0;
const ETA_MIN: f64 = 5.0;
const V_MAX_FACTOR: f64 = 1.5;
const UNSTABLE_CFL: f64 = 4.0;
const ANGLE_TOL_DEG: f64 = 5.0;

struct Report {
    failed: Vec<String>,
}

impl Report {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
        // written past the test harness capture so the table always appears
        let _ = std::io::stderr().write_all(line.as_bytes());
        if !pass {
            self.failed.push(name.to_string());
        }
    }
}

/// Exact average of `x^a y^b` over cell `(l, i, j)`.
fn monomial_average(a: i32, b: i32, l: u8, i: u32, j: u32) -> f64 {
    let h = 2f64.powi(-(l as i32));
    let prim = |p: i32, lo: f64, hi: f64| (hi.powi(p + 1) - lo.powi(p + 1)) / ((p + 1) as f64 * h);
    let (x0, y0) = (i as f64 * h, j as f64 * h);
    prim(a, x0, x0 + h) * prim(b, y0, y0 + h)
}

/// Largest detail of parents whose stencil stays inside the domain, relative
/// to the field's max norm.
fn interior_relative_detail(a: i32, b: i32, fine_level: u8) -> f64 {
    let n = 1u32 << fine_level;
    let fine: Vec<f64> =
        (0..n).flat_map(|j| (0..n).map(move |i| (i, j))).map(|(i, j)| monomial_average(a, b, fine_level, i, j)).collect();
    let scale = fine.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let ms = mr::encode(&fine, fine_level, GAMMA);
    let l = fine_level - 1;
    let nc = 1usize << l;
    let mut worst = 0.0f64;
    for j in 2..nc - 2 {
        for i in 2..nc - 2 {
            for d in ms.details[l as usize][j * nc + i] {
                worst = worst.max(d.abs() / scale);
            }
        }
    }
    worst
}

/// Highest total degree for which every monomial has vanishing details.
fn oracle_exactness_degree() -> i32 {
    let mut deg = -1;
    for d in 0..8 {
        if (0..=d).all(|a| interior_relative_detail(a, d - a, 5) <= CANCELLATION_TOL) {
            deg = d;
        } else {
            break;
        }
    }
    deg
}

fn lossless(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let level = 8;
    let fine: Vec<f64> = (0..1usize << (2 * level)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let start = Instant::now();
    let back = mr::decode(&mr::encode(&fine, level, GAMMA), GAMMA);
    let secs = start.elapsed().as_secs_f64();
    let err = fine.iter().zip(&back).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    r.record(
        "mr-transform-lossless",
        err <= LOSSLESS_TOL && secs < LOSSLESS_SECONDS,
        format!("max error {err:.3e} (tol {LOSSLESS_TOL:e}), {secs:.3} s (limit {LOSSLESS_SECONDS} s) on 256x256"),
    );
}

fn consistency(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..CONSISTENCY_SAMPLES {
        let mut s = [[0.0; 5]; 5];
        s.iter_mut().flatten().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        let st = Stencil(s);
        let kids = mr::predict_children(&st, GAMMA);
        worst = worst.max((mr::project(kids) - st.at(0, 0)).abs());
    }
    r.record(
        "prediction-consistency",
        worst <= CONSISTENCY_TOL,
        format!("max |mean(children) - parent| = {worst:.3e} over {CONSISTENCY_SAMPLES} stencils (tol {CONSISTENCY_TOL:e})"),
    );
}

fn cancellation(r: &mut Report) {
    let degree = oracle_exactness_degree();
    let mut worst = 0.0f64;
    for d in 0..=degree.max(0) {
        for a in 0..=d {
            worst = worst.max(interior_relative_detail(a, d - a, 6));
        }
    }
    r.record(
        "polynomial-cancellation",
        degree >= 2 && worst <= CANCELLATION_TOL,
        format!("oracle exactness degree {degree}; max relative detail {worst:.3e} (tol {CANCELLATION_TOL:e})"),
    );
}

fn conservation(r: &mut Report) {
    let params = Params { ionic: false, ..Params::default() };
    let stim = Stimulus { iapp_amplitude: 0.0, ..Stimulus::default() };
    let mut drift = Vec::new();
    let mut u = UniformSolver::new(6, params, stim, SolverSettings::default(), 0.5).unwrap();
    let m0 = u.total_v();
    u.advance(CONSERVATION_STEPS).unwrap();
    drift.push(("uniform", (u.total_v() - m0).abs(), 1));
    for (name, lts) in [("mr", false), ("mr-lts", true)] {
        let mut s = AdaptiveSettings::new(6, 5e-4);
        s.local_time_stepping = lts;
        let mut a = Adaptive::new(params, stim, s).unwrap();
        let m0 = a.total_v();
        a.advance_to_step(CONSERVATION_STEPS).unwrap();
        let levels = (a.plan().max_leaf_level - a.plan().min_leaf_level + 1) as usize;
        drift.push((name, (a.total_v() - m0).abs(), levels));
    }
    let pass = drift.iter().all(|d| d.1 <= CONSERVATION_TOL) && drift[2].2 > 1;
    let detail = drift.iter().map(|(n, d, l)| format!("{n} {d:.2e} ({l} levels)")).collect::<Vec<_>>().join(", ");
    r.record("conservation", pass, format!("|drift of sum |K| v| after {CONSERVATION_STEPS} steps: {detail} (tol {CONSERVATION_TOL:e})"));
}

fn compatibility(r: &mut Report) {
    let mut u = UniformSolver::new(5, Params::default(), Stimulus::default(), SolverSettings::default(), 0.5).unwrap();
    u.advance(COMPATIBILITY_STEPS).unwrap();
    let mut worst = vec![("uniform", u.max_compatibility_defect)];
    for (name, lts) in [("mr", false), ("mr-lts", true)] {
        let mut s = AdaptiveSettings::new(5, 5e-4);
        s.local_time_stepping = lts;
        let mut a = Adaptive::new(Params::default(), Stimulus::default(), s).unwrap();
        a.advance_to_step(COMPATIBILITY_STEPS).unwrap();
        worst.push((name, a.stats.max_compatibility_defect));
    }
    // Σ|K| = 1 on the unit square
    let pass = worst.iter().all(|w| w.1 <= COMPATIBILITY_TOL);
    let detail = worst.iter().map(|(n, d)| format!("{n} {d:.2e}")).collect::<Vec<_>>().join(", ");
    r.record("compatibility", pass, format!("max |sum |K| u_e| over {COMPATIBILITY_STEPS} steps at L=5: {detail} (tol {COMPATIBILITY_TOL:e})"));
}

fn equivalence(r: &mut Report) {
    let solver = SolverSettings { tol: 1e-13, max_iter: None };
    let mut u = UniformSolver::new(5, Params::default(), Stimulus::default(), solver, 0.5).unwrap();
    let mut s = AdaptiveSettings::new(5, 5e-4);
    s.tree = TreeConfig { adapt: false, ..s.tree };
    s.local_time_stepping = true;
    s.solver = solver;
    let mut a = Adaptive::new(Params::default(), Stimulus::default(), s).unwrap();
    let mut worst = 0.0f64;
    for step in 1..=EQUIVALENCE_STEPS {
        u.step().unwrap();
        a.advance_to_step(step).unwrap();
        let mut rows = a.rows();
        rows.sort_by_key(|(c, _)| (c.j, c.i));
        for ((_, x), (_, y)) in rows.iter().zip(u.rows()) {
            for k in 0..3 {
                worst = worst.max((x[k] - y[k]).abs());
            }
        }
    }
    r.record(
        "degenerate-equivalence",
        worst <= EQUIVALENCE_TOL,
        format!("max |mr-lts(full tree) - uniform| over {EQUIVALENCE_STEPS} steps at L=5: {worst:.3e} (tol {EQUIVALENCE_TOL:e})"),
    );
}

struct Desk {
    cfg: RunConfig,
    run: sim::RunOutput,
    half: sim::RunOutput,
}

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig { mode: Mode::Mr, ..RunConfig::default() };
    cfg.harness.paired_uniform = true;
    cfg
}

fn desk() -> Desk {
    let cfg = desk_config();
    let run = sim::run(&cfg, None).expect("desk run");
    let mut half_cfg = cfg.clone();
    half_cfg.mr.eps_ref /= 2.0;
    half_cfg.harness.paired_uniform = false;
    let half = sim::run(&half_cfg, None).expect("desk run at eps/2");
    Desk { cfg, run, half }
}

fn threshold_control(r: &mut Report, d: &Desk) {
    let level = d.cfg.mr.max_level;
    let area = vec![0.25f64.powi(level as i32); 1 << (2 * level)];
    let reference = snapshot_fields(d.run.uniform_snapshots.last().unwrap(), level).unwrap();
    let v_ref: Vec<f64> = reference.iter().map(|x| x[0]).collect();
    let err_of = |s: &sim::Snapshot| {
        let f = snapshot_fields(s, level).unwrap();
        let v: Vec<f64> = f.iter().map(|x| x[0]).collect();
        error_norms(&v, &v_ref, &area).unwrap().l1
    };
    let err = err_of(d.run.snapshots.last().unwrap());
    let err_half = err_of(d.half.snapshots.last().unwrap());
    let secs = d.run.metrics.wall_clock;
    let pass = err <= THRESHOLD_ERR_MAX && err_half <= THRESHOLD_NOISE_FACTOR * err && secs < THRESHOLD_SECONDS;
    r.record(
        "threshold-error-control",
        pass,
        format!(
            "L1(v) at t={:.4}: eps {:.1e} -> {err:.3e} (max {THRESHOLD_ERR_MAX:e}), eps/2 -> {err_half:.3e} (max {THRESHOLD_NOISE_FACTOR} x previous); mr run {secs:.1} s (limit {THRESHOLD_SECONDS} s), uniform run {:.1} s",
            d.run.snapshots.last().unwrap().time,
            d.cfg.mr.eps_ref,
            d.run.metrics.uniform_wall_clock.unwrap_or(f64::NAN)
        ),
    );
}

fn compression(r: &mut Report, d: &Desk) {
    let etas: Vec<f64> = d.run.metrics.rows.iter().map(|x| x.eta).collect();
    let pass = !etas.is_empty() && etas.iter().all(|&e| e >= ETA_MIN);
    let detail = d
        .run
        .metrics
        .rows
        .iter()
        .map(|x| format!("t={:.3} eta={:.3} leaves={}", x.time, x.eta, x.leaf_count))
        .collect::<Vec<_>>()
        .join("; ");
    r.record("compression", pass, format!("{detail} (min {ETA_MIN})"));
}

fn stability(r: &mut Report, d: &Desk) {
    let v_p = d.cfg.model.v_p;
    let max_v = d.run.metrics.max_abs_v;
    let unstable_uniform =
        UniformSolver::new(6, Params::default(), Stimulus::default(), SolverSettings::default(), UNSTABLE_CFL)
            .and_then(|mut u| u.advance(10));
    let mut s = AdaptiveSettings::new(6, 5e-4);
    s.cfl_factor = UNSTABLE_CFL;
    s.local_time_stepping = true;
    let unstable_mr = Adaptive::new(Params::default(), Stimulus::default(), s).and_then(|mut a| a.advance_to_step(10));
    let detected = |res: &bidomain_mr::Result<()>| matches!(res, Err(Error::Instability { .. }));
    let pass = max_v <= V_MAX_FACTOR * v_p && detected(&unstable_uniform) && detected(&unstable_mr);
    r.record(
        "stability",
        pass,
        format!(
            "max|v| = {max_v:.4} over the desk run (limit {}); cfl {UNSTABLE_CFL}: uniform {}, mr-lts {}",
            V_MAX_FACTOR * v_p,
            if detected(&unstable_uniform) { "instability raised" } else { "not detected" },
            if detected(&unstable_mr) { "instability raised" } else { "not detected" }
        ),
    );
}

fn anisotropy(r: &mut Report, d: &Desk) {
    let theta = d.cfg.model.fiber_angle;
    let k = d.run.snapshots.len() / 2 - usize::from(d.run.snapshots.len() % 2 == 0);
    let mid = &d.run.snapshots[k];
    match snapshot_axis(mid, d.cfg.model.v_p / 2.0) {
        Some(fit) => {
            let diff = axis_difference(fit.angle, theta).to_degrees();
            r.record(
                "anisotropy",
                diff <= ANGLE_TOL_DEG,
                format!(
                    "t={:.3}: axis {:.2} deg vs fiber {:.2} deg, difference {diff:.2} deg (tol {ANGLE_TOL_DEG}), elongation {:.3}",
                    mid.time,
                    fit.angle.to_degrees(),
                    theta.to_degrees(),
                    fit.elongation
                ),
            );
        }
        None => r.record("anisotropy", false, format!("t={:.3}: no activated region", mid.time)),
    }
}

#[test]
fn acceptance() {
    let mut r = Report { failed: Vec::new() };
    lossless(&mut r);
    consistency(&mut r);
    cancellation(&mut r);
    conservation(&mut r);
    compatibility(&mut r);
    equivalence(&mut r);
    let d = desk();
    threshold_control(&mut r, &d);
    compression(&mut r, &d);
    stability(&mut r, &d);
    anisotropy(&mut r, &d);
    assert!(r.failed.is_empty(), "failed criteria: {:?}", r.failed);
}
