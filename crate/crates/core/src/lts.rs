//! Time integration on the adaptive tree, with optional local time stepping.
//!
//! A leaf on level `l` advances with `Δt_l = 2^{L−l} Δt_L`. One synchronization
//! cycle is `K` finest substeps, `K = 2^{L−l_c}` for the coarsest leaf level
//! `l_c`. Fluxes across a face are evaluated on the finer side's schedule and
//! accumulated in an [`InterfaceFluxLedger`]; a leaf consumes its accumulated
//! flux when its own window closes, so the coarse side of an interface always
//! sees exactly minus the sum of the fine fluxes.

use log::debug;

use crate::elliptic::{self, LinearSystem, SolverSettings};
use crate::error::{Error, Result};
use crate::fv::{cfl_max_dt, conductivity_maximum, face_coefficient};
use crate::grid::{CellIndex, Direction, Neighbor};
use crate::model::{applied_current_cells, initial_cell_state, membrane, Medium, ModelParams, StimulusProtocol};
use crate::scalar::Real;
use crate::tree::{CompressionMetrics, MrTree, NodeKind, Plan, TreeConfig};

const V: usize = 0;
const UE: usize = 1;
const W: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EllipticCadence {
    EveryFineStep,
    SyncOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LtsSchedule<T> {
    pub dt_finest: T,
    pub max_level: u8,
    /// Finest steps between remeshes.
    pub remesh_interval: u64,
    /// False: every leaf uses `Δt_L`.
    pub local: bool,
}

impl<T: Real> LtsSchedule<T> {
    /// `Δt_l = 2^{L−l} Δt_L`.
    pub fn dt_for_level(&self, level: u8) -> T {
        T::pow2(self.max_level as i32 - level as i32) * self.dt_finest
    }

    /// Synchronization cycle length in finest steps.
    pub fn cycle_length(&self, coarsest_leaf_level: u8) -> u64 {
        if self.local {
            1u64 << (self.max_level - coarsest_leaf_level)
        } else {
            1
        }
    }

    /// Finest steps per local step of a level, within a cycle of `k` steps.
    pub fn window(&self, level: u8, k: u64) -> u64 {
        if self.local {
            (1u64 << (self.max_level - level)).min(k)
        } else {
            1
        }
    }
}

/// Per-leaf accumulated `Σ Δt_face · F` since the leaf's window opened.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InterfaceFluxLedger<T> {
    acc: Vec<T>,
}

impl<T: Real> InterfaceFluxLedger<T> {
    pub fn new(n: usize) -> Self {
        Self { acc: vec![T::zero(); n] }
    }

    pub fn reset(&mut self, n: usize) {
        self.acc.clear();
        self.acc.resize(n, T::zero());
    }

    /// `fine` gains `amount`, `other` loses it.
    #[inline]
    pub fn record(&mut self, fine: usize, other: usize, amount: T) {
        self.acc[fine] += amount;
        self.acc[other] -= amount;
    }

    #[inline]
    pub fn take(&mut self, leaf: usize) -> T {
        std::mem::replace(&mut self.acc[leaf], T::zero())
    }

    pub fn get(&self, leaf: usize) -> T {
        self.acc[leaf]
    }

    pub fn total(&self) -> T {
        self.acc.iter().copied().sum()
    }

    pub fn is_settled(&self) -> bool {
        self.acc.iter().all(|&a| a == T::zero())
    }
}

/// Fluxes through one edge of a coarse leaf, computed on the finer side.
#[derive(Clone, Debug, PartialEq)]
pub struct InterfaceFlux<T> {
    /// `(fine leaf, Σ_σ d* |σ| / d (u_virtual − u_fine))` per fine sub-edge.
    pub fine: Vec<(CellIndex, T)>,
    /// Minus the sum of the fine fluxes.
    pub coarse: T,
}

/// Flux of one component through the edge of `coarse` in direction `dir`,
/// using the virtual cousin of each fine leaf inside `coarse`.
pub fn interface_flux<T: Real>(
    tree: &MrTree<T>,
    coarse: CellIndex,
    dir: Direction,
    medium: Medium,
    component: usize,
) -> Result<InterfaceFlux<T>> {
    if tree.kind_of(coarse) != NodeKind::Leaf {
        return Err(Error::Invariant(format!("{coarse} is not a leaf")));
    }
    let Neighbor::Cell(n) = coarse.neighbor(dir) else {
        return Err(Error::Invariant(format!("{coarse} has no neighbour towards {dir:?}")));
    };
    if tree.kind_of(n) != NodeKind::Internal {
        return Err(Error::Invariant(format!("edge of {coarse} towards {dir:?} is not an interface")));
    }
    let back = dir.opposite().offset();
    let mut fine = Vec::with_capacity(2);
    for e in crate::grid::CHILD_OFFSETS {
        let k = n.child(e);
        let Some(cousin) = k.offset(back.0, back.1) else { continue };
        if !coarse.contains(cousin) {
            continue;
        }
        if tree.kind_of(k) != NodeKind::Leaf {
            return Err(Error::Invariant(format!("interface {coarse}|{k} is not graded")));
        }
        let (uk, uc) = match (tree.value(k), tree.value(cousin)) {
            (Some(a), Some(b)) => (a[component], b[component]),
            _ => return Err(Error::Invariant(format!("virtual cousin {cousin} missing"))),
        };
        let t = face_coefficient(k, cousin, medium, tree.params())?.transmissibility();
        fine.push((k, t * (uc - uk)));
    }
    let coarse_flux = -fine.iter().map(|(_, f)| *f).sum::<T>();
    Ok(InterfaceFlux { fine, coarse: coarse_flux })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveSettings<T> {
    pub tree: TreeConfig<T>,
    pub cfl_factor: T,
    pub remesh_interval: u64,
    pub local_time_stepping: bool,
    pub cadence: EllipticCadence,
    pub solver: SolverSettings<T>,
}

impl<T: Real> AdaptiveSettings<T> {
    pub fn new(max_level: u8, eps_ref: T) -> Self {
        Self {
            tree: TreeConfig::new(max_level, eps_ref),
            cfl_factor: T::of(0.5),
            remesh_interval: 2,
            local_time_stepping: false,
            cadence: EllipticCadence::EveryFineStep,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdaptiveStats {
    pub solves: u64,
    pub solver_iterations: u64,
    pub remeshes: u64,
    pub structure_changes: u64,
    pub cycles: u64,
    pub max_compatibility_defect: f64,
    pub max_abs_v: f64,
}

/// Multiresolution solver on a dynamic graded tree.
#[derive(Clone, Debug)]
pub struct AdaptiveSolver<T> {
    pub tree: MrTree<T>,
    pub params: ModelParams<T>,
    pub stimulus: StimulusProtocol<T>,
    pub settings: AdaptiveSettings<T>,
    pub schedule: LtsSchedule<T>,
    pub stats: AdaptiveStats,
    step: u64,
    last_remesh: u64,
    conductivity_max: T,
    plan: Plan<T>,
    ledger: InterfaceFluxLedger<T>,
    iapp_on: Vec<T>,
    iapp_off: Vec<T>,
    ue_work: Vec<T>,
    ue_prev: Vec<T>,
}

impl<T: Real> AdaptiveSolver<T> {
    pub fn new(params: ModelParams<T>, stimulus: StimulusProtocol<T>, settings: AdaptiveSettings<T>) -> Result<Self> {
        let tree = if settings.tree.adapt {
            MrTree::build_initial(settings.tree, params, |c| {
                let (v, w) = initial_cell_state(c, &stimulus);
                [v, T::zero(), w]
            })?
        } else {
            MrTree::full(settings.tree, params, |c| {
                let (v, w) = initial_cell_state(c, &stimulus);
                [v, T::zero(), w]
            })?
        };
        Self::from_tree(tree, stimulus, settings)
    }

    /// Starts from an existing tree; `u_e` is recomputed from its `v`.
    pub fn from_tree(mut tree: MrTree<T>, stimulus: StimulusProtocol<T>, settings: AdaptiveSettings<T>) -> Result<Self> {
        let params = *tree.params();
        params.validate()?;
        stimulus.validate()?;
        if !(settings.cfl_factor > T::zero()) {
            return Err(Error::param("cfl_factor", "must be > 0"));
        }
        if settings.remesh_interval == 0 {
            return Err(Error::param("remesh_interval", "must be >= 1"));
        }
        let plan = tree.plan()?.clone();
        let max_level = tree.max_level();
        let conductivity_max = conductivity_maximum(&params)?;
        let mut solver = Self {
            schedule: LtsSchedule {
                dt_finest: T::zero(),
                max_level,
                remesh_interval: settings.remesh_interval,
                local: settings.local_time_stepping,
            },
            tree,
            params,
            stimulus,
            settings,
            stats: AdaptiveStats::default(),
            step: 0,
            last_remesh: 0,
            conductivity_max,
            ledger: InterfaceFluxLedger::new(plan.leaves.len()),
            iapp_on: Vec::new(),
            iapp_off: Vec::new(),
            ue_work: Vec::new(),
            ue_prev: Vec::new(),
            plan,
        };
        solver.on_new_plan();
        let h = T::pow2(-(max_level as i32));
        solver.schedule.dt_finest =
            settings.cfl_factor * cfl_max_dt(solver.reaction_maximum(), conductivity_max, h);
        solver.solve_ue()?;
        solver.ue_prev.clear();
        solver.stats.max_abs_v = solver.max_abs_v().as_f64();
        Ok(solver)
    }

    fn on_new_plan(&mut self) {
        let n = self.plan.leaves.len();
        self.ledger.reset(n);
        self.iapp_on = applied_current_cells(self.stimulus.iapp_start, &self.plan.leaf_cells, &self.stimulus);
        self.iapp_off = vec![T::zero(); n];
        self.ue_work = self.plan.leaves.iter().map(|&id| self.tree.value_by_id(id)[UE]).collect();
        self.ue_prev.clear();
    }

    fn iapp_at(&self, t: T) -> &[T] {
        if self.stimulus.iapp_active(t) {
            &self.iapp_on
        } else {
            &self.iapp_off
        }
    }

    pub fn dt(&self) -> T {
        self.schedule.dt_finest
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// `step_count · Δt_L`.
    pub fn time(&self) -> T {
        T::of(self.step as f64) * self.schedule.dt_finest
    }

    pub fn plan(&self) -> &Plan<T> {
        &self.plan
    }

    pub fn leaf_count(&self) -> usize {
        self.plan.leaves.len()
    }

    pub fn compression(&self) -> CompressionMetrics<T> {
        self.tree.compression()
    }

    /// `(cell, [v, u_e, w])` per leaf, depth-first.
    pub fn rows(&self) -> Vec<(CellIndex, [T; 3])> {
        self.plan.leaves.iter().zip(&self.plan.leaf_cells).map(|(&id, &c)| (c, self.tree.value_by_id(id))).collect()
    }

    /// `Σ |K| v_K` over leaves.
    pub fn total_v(&self) -> T {
        self.plan.leaves.iter().zip(&self.plan.leaf_area).map(|(&id, &a)| a * self.tree.value_by_id(id)[V]).sum()
    }

    fn max_abs_v(&self) -> T {
        self.plan.leaves.iter().fold(T::zero(), |m, &id| m.max(self.tree.value_by_id(id)[V].abs()))
    }

    fn reaction_maximum(&self) -> T {
        let iapp = self.iapp_at(self.time());
        let mut m = T::zero();
        for (k, &id) in self.plan.leaves.iter().enumerate() {
            let [v, _, w] = self.tree.value_by_id(id);
            m = m.max(membrane(v, w, &self.params).0.abs() + T::of(2.0) * iapp[k].abs());
        }
        m
    }

    /// Solves for `u_e` on the leaves with their current `v`, then refreshes
    /// internal and virtual `u_e`.
    fn solve_ue(&mut self) -> Result<()> {
        let n = self.plan.leaves.len();
        let mut rhs = vec![T::zero(); n];
        for f in &self.plan.elliptic_faces {
            let va = self.tree.value_by_id(self.plan.leaves[f.a])[V];
            let vb = self.tree.value_by_id(self.plan.leaves[f.b])[V];
            let flux = f.t_i * (vb - va);
            rhs[f.a] += flux;
            rhs[f.b] -= flux;
        }
        let iapp = self.iapp_at(self.time());
        for k in 0..n {
            rhs[k] -= self.plan.leaf_area[k] * iapp[k];
        }
        let sys = LinearSystem {
            matrix: &self.plan.matrix,
            rhs: &rhs,
            weights: &self.plan.leaf_area,
            settings: self.settings.solver,
        };
        // linear extrapolation in time from the last two solutions
        let guess: Vec<T> = if self.ue_prev.len() == n {
            self.ue_work.iter().zip(&self.ue_prev).map(|(&a, &b)| a + a - b).collect()
        } else {
            self.ue_work.clone()
        };
        let (ue, report) = elliptic::solve_zero_mean(&sys, &guess).map_err(|e| match e {
            Error::Convergence { iterations, residual } => {
                debug!("elliptic solve failed at t = {}", self.time());
                Error::Convergence { iterations, residual }
            }
            other => other,
        })?;
        let defect: T = ue.iter().zip(&self.plan.leaf_area).map(|(&u, &a)| u * a).sum::<T>().abs();
        self.stats.max_compatibility_defect = self.stats.max_compatibility_defect.max(defect.as_f64());
        self.stats.solves += 1;
        self.stats.solver_iterations += report.iterations as u64;
        for (k, &id) in self.plan.leaves.iter().enumerate() {
            self.tree.value_mut(id)[UE] = ue[k];
        }
        self.ue_prev = std::mem::replace(&mut self.ue_work, ue);
        self.tree.project_component(&self.plan.internal, UE);
        self.tree.refresh_virtual_component(UE);
        Ok(())
    }

    fn check_stability(&self, cycle: u64) -> Result<()> {
        let reaction = self.reaction_maximum();
        for level in (self.plan.min_leaf_level..=self.plan.max_leaf_level).rev() {
            let dt = T::of(self.schedule.window(level, cycle) as f64) * self.schedule.dt_finest;
            let bound = cfl_max_dt(reaction, self.conductivity_max, T::pow2(-(level as i32)));
            if dt > bound {
                return Err(Error::Instability {
                    level,
                    time: self.time().as_f64(),
                    reason: format!("time step {dt:e} exceeds stability bound {bound:e}"),
                });
            }
        }
        Ok(())
    }

    /// Advances one synchronization cycle of at most `max_steps` finest steps
    /// (rounded down to a power of two) and remeshes when due. Returns the
    /// number of finest steps taken.
    pub fn advance_sync_cycle(&mut self, max_steps: u64) -> Result<u64> {
        if max_steps == 0 {
            return Ok(0);
        }
        let mut cycle = self.schedule.cycle_length(self.plan.min_leaf_level);
        while cycle > max_steps {
            cycle /= 2;
        }
        self.check_stability(cycle)?;
        let dt = self.schedule.dt_finest;
        let beta_cm = self.params.beta * self.params.c_m;
        let n = self.plan.leaves.len();
        let windows: Vec<u64> = self.plan.leaf_cells.iter().map(|c| self.schedule.window(c.level, cycle)).collect();
        let face_windows: Vec<u64> = self.plan.faces.iter().map(|f| self.schedule.window(f.level, cycle)).collect();
        for sub in 0..cycle {
            for (f, &wf) in self.plan.faces.iter().zip(&face_windows) {
                if sub % wf == 0 {
                    let ue_o = self.tree.value_by_id(f.src_other)[UE];
                    let ue_f = self.tree.value_by_id(f.src_fine)[UE];
                    let flux = f.t_e * (ue_o - ue_f) * (T::of(wf as f64) * dt);
                    self.ledger.record(f.fine, f.other, flux);
                }
            }
            for k in 0..n {
                let wk = windows[k];
                if (sub + 1) % wk != 0 {
                    continue;
                }
                let dt_k = T::of(wk as f64) * dt;
                let t_start = T::of((self.step + sub + 1 - wk) as f64) * dt;
                let iapp = self.iapp_at(t_start)[k];
                let id = self.plan.leaves[k];
                let [v, _, w] = self.tree.value_by_id(id);
                let (ion, h) = membrane(v, w, &self.params);
                let acc = self.ledger.take(k);
                let v_new = v + dt_k * (iapp - self.params.beta * ion) / beta_cm - acc / (beta_cm * self.plan.leaf_area[k]);
                if !v_new.is_finite() {
                    return Err(Error::Instability {
                        level: self.plan.leaf_cells[k].level,
                        time: t_start.as_f64(),
                        reason: format!("non-finite transmembrane potential at leaf {}", self.plan.leaf_cells[k]),
                    });
                }
                let val = self.tree.value_mut(id);
                val[V] = v_new;
                val[W] = w + dt_k * h;
            }
            let solve_now = self.settings.cadence == EllipticCadence::EveryFineStep || sub + 1 == cycle;
            if solve_now {
                self.solve_ue()?;
            }
            self.step += 1;
        }
        debug_assert!(self.ledger.is_settled());
        self.stats.cycles += 1;
        self.stats.max_abs_v = self.stats.max_abs_v.max(self.max_abs_v().as_f64());
        if self.settings.tree.adapt && self.step - self.last_remesh >= self.schedule.remesh_interval {
            self.remesh()?;
        }
        Ok(cycle)
    }

    /// Adapts the tree to the current solution.
    pub fn remesh(&mut self) -> Result<()> {
        self.last_remesh = self.step;
        self.stats.remeshes += 1;
        let report = self.tree.remesh()?;
        if report.structure_changed || self.tree.cached_plan().is_none() {
            self.plan = self.tree.plan()?.clone();
            self.stats.structure_changes += 1;
            self.on_new_plan();
        }
        Ok(())
    }

    /// Runs until `step_count` reaches `target_step`.
    pub fn advance_to_step(&mut self, target_step: u64) -> Result<()> {
        while self.step < target_step {
            self.advance_sync_cycle(target_step - self.step)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fv::UniformSolver;

    fn idx(l: u8, i: u32, j: u32) -> CellIndex {
        CellIndex::new(l, i, j).unwrap()
    }

    #[test]
    fn dt_for_level_examples() {
        let s = LtsSchedule { dt_finest: 0.25f64, max_level: 9, remesh_interval: 2, local: true };
        assert_eq!(s.dt_for_level(9), 0.25);
        assert_eq!(s.dt_for_level(7), 1.0);
        assert_eq!(s.dt_for_level(0), 128.0);
        assert_eq!(s.cycle_length(7), 4);
        assert_eq!(s.window(8, 4), 2);
        assert_eq!(s.window(5, 4), 4);
    }

    #[test]
    fn ledger_is_antisymmetric() {
        let mut l = InterfaceFluxLedger::<f64>::new(3);
        l.record(0, 2, 1.5);
        l.record(1, 2, -0.25);
        assert_eq!(l.total(), 0.0);
        assert_eq!(l.take(2), -1.25);
        assert_eq!(l.get(2), 0.0);
    }

    fn two_level_tree(p: ModelParams<f64>, f: impl Fn(CellIndex) -> [f64; 3]) -> MrTree<f64> {
        let cfg = TreeConfig { adapt: false, ..TreeConfig::new(4, 5e-4) };
        let mut t = MrTree::full(cfg, p, &f).unwrap();
        // coarsen the right half down to level 3
        let rows: Vec<(CellIndex, [f64; 3])> = t
            .leaves()
            .into_iter()
            .filter(|(c, _)| c.i < 8)
            .chain(crate::grid::level_cells(3).filter(|c| c.i >= 4).map(|c| (c, [0.0; 3])))
            .collect();
        t = MrTree::from_leaves(cfg, p, &rows).unwrap();
        t.set_leaf_values(&f);
        t.materialize_virtual_leaves();
        t.check_invariants().unwrap();
        t
    }

    #[test]
    fn interface_flux_examples() {
        // linear u_e = x: the virtual cousins are exact, so the fine flux equals the uniform one
        let t = two_level_tree(ModelParams::default(), |c| {
            let g = c.geometry::<f64>();
            [0.0, g.center.0, 0.0]
        });
        let p = ModelParams::<f64>::default();
        let coarse = idx(3, 4, 2);
        let flux = interface_flux(&t, coarse, Direction::MinusX, Medium::Extra, UE).unwrap();
        assert_eq!(flux.fine.len(), 2);
        let h = 1.0 / 16.0;
        let t_uniform = face_coefficient(idx(4, 7, 4), idx(4, 8, 4), Medium::Extra, &p).unwrap().transmissibility();
        for (_, f) in &flux.fine {
            assert!((f - t_uniform * h).abs() <= 1e-12);
        }
        assert_eq!(flux.coarse, -(flux.fine[0].1 + flux.fine[1].1));

        let flat = two_level_tree(ModelParams::default(), |_| [1.0, 2.0, 3.0]);
        let f0 = interface_flux(&flat, coarse, Direction::MinusX, Medium::Extra, UE).unwrap();
        assert!(f0.fine.iter().all(|(_, f)| f.abs() < 1e-14) && f0.coarse.abs() < 1e-14);
        assert!(interface_flux(&flat, coarse, Direction::PlusX, Medium::Extra, UE).is_err());
    }

    fn reaction_free() -> ModelParams<f64> {
        ModelParams { ionic: false, ..Default::default() }
    }

    #[test]
    fn lts_conserves_mass_on_two_level_tree() {
        let t = two_level_tree(reaction_free(), |c| {
            let g = c.geometry::<f64>();
            [100.0 * g.center.0 + 20.0 * g.center.1, 0.0, 1.0]
        });
        let mut s = AdaptiveSettings::new(4, 5e-4);
        s.tree.adapt = false;
        s.local_time_stepping = true;
        let mut solver = AdaptiveSolver::from_tree(t, StimulusProtocol::default(), s).unwrap();
        let m0 = solver.total_v();
        let steps = solver.advance_sync_cycle(u64::MAX).unwrap();
        assert_eq!(steps, 2);
        assert!((solver.total_v() - m0).abs() <= 1e-12);
    }

    #[test]
    fn forced_uniform_lts_matches_uniform_solver() {
        let level = 4;
        let stim = StimulusProtocol { radius: 0.2, ..Default::default() };
        let tight = SolverSettings { tol: 1e-13, max_iter: None };
        let mut s = AdaptiveSettings::new(level, 5e-4);
        s.tree.adapt = false;
        s.local_time_stepping = true;
        s.solver = tight;
        let mut mr = AdaptiveSolver::new(ModelParams::default(), stim, s).unwrap();
        let mut fv = UniformSolver::new(level, ModelParams::default(), stim, tight, 0.5).unwrap();
        assert_eq!(mr.dt(), fv.dt());
        for _ in 0..20 {
            mr.advance_sync_cycle(u64::MAX).unwrap();
            fv.step().unwrap();
        }
        let uniform = fv.rows();
        let mut worst = 0.0f64;
        for (c, val) in mr.rows() {
            let val: [f64; 3] = val;
            let k = (c.j as usize) * 16 + c.i as usize;
            assert_eq!(uniform[k].0, c);
            for comp in 0..3 {
                worst = worst.max((val[comp] - uniform[k].1[comp]).abs());
            }
        }
        assert!(worst <= 1e-10, "{worst}");
    }

    #[test]
    fn global_and_local_stepping_agree_to_first_order() {
        let stim = StimulusProtocol { radius: 0.2, ..Default::default() };
        let run = |local: bool, cfl: f64| {
            let mut s = AdaptiveSettings::new(5, 5e-3);
            s.local_time_stepping = local;
            s.cfl_factor = cfl;
            s.remesh_interval = u64::MAX;
            s.solver.tol = 1e-13;
            let mut solver = AdaptiveSolver::new(ModelParams::default(), stim, s).unwrap();
            let target = (64.0 * 0.5 / cfl) as u64;
            solver.advance_to_step(target).unwrap();
            solver
        };
        let diff = |a: &AdaptiveSolver<f64>, b: &AdaptiveSolver<f64>| {
            a.rows().iter().zip(b.rows()).fold(0.0f64, |m, (x, y)| {
                assert_eq!(x.0, y.0);
                m.max((x.1[0] - y.1[0]).abs())
            })
        };
        let coarse = diff(&run(true, 0.5), &run(false, 0.5));
        let fine = diff(&run(true, 0.25), &run(false, 0.25));
        assert!(coarse > 0.0);
        assert!(fine < coarse, "{fine} vs {coarse}");
    }

    #[test]
    fn excessive_cfl_is_detected() {
        let mut s = AdaptiveSettings::new(4, 5e-4);
        s.cfl_factor = 4.0;
        let mut solver = AdaptiveSolver::new(ModelParams::default(), StimulusProtocol::default(), s).unwrap();
        match solver.advance_sync_cycle(1) {
            Err(Error::Instability { level, .. }) => assert_eq!(level, 4),
            other => panic!("expected instability, got {other:?}"),
        }
    }
}
