//! Reference cell-centered finite-volume scheme on uniform dyadic meshes.
//!
//! One step advances `v` explicitly with the extracellular flux at the old
//! time, solves the implicit extracellular equation with the new `v`, then
//! advances the recovery variable explicitly.

use crate::elliptic::{self, CsrMatrix, LinearSystem, SolveReport, SolverSettings};
use crate::error::{Error, Result};
use crate::grid::{CellIndex, Direction, Neighbor};
use crate::model::{
    applied_current_cells, conductivity_tensor, initial_cell_state, membrane, Medium, ModelParams,
    StimulusProtocol, Tensor2,
};
use crate::scalar::Real;

/// Cell-averaged conductivity tensor `M_j,K = |K|⁻¹ ∫_K M_j(x) dx`.
/// Evaluated with the 2×2 Gauss rule, exact for bilinear fiber fields.
pub fn cell_tensor<T: Real>(c: CellIndex, medium: Medium, p: &ModelParams<T>) -> Result<Tensor2<T>> {
    let g = c.geometry::<T>();
    let off = g.side * T::of(0.5 / 3f64.sqrt());
    let mut acc = Tensor2 { xx: T::zero(), xy: T::zero(), yy: T::zero() };
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let x = (g.center.0 + T::of(sx) * off, g.center.1 + T::of(sy) * off);
        acc = acc.add(&conductivity_tensor(x, medium, p)?);
    }
    Ok(acc.scale(T::of(0.25)))
}

/// Two-point transmissibility data of one face.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceCoefficient<T> {
    pub d_star: T,
    /// `|σ_K,L|`
    pub face_length: T,
    /// `d(K, L)`
    pub distance: T,
    /// `d(K, σ)`
    pub dist_k: T,
    /// `d(L, σ)`
    pub dist_l: T,
}

impl<T: Real> FaceCoefficient<T> {
    /// Builds the coefficient from the two cell tensors and the unit normal `η_K,L`.
    pub fn from_tensors(
        m_k: &Tensor2<T>,
        m_l: &Tensor2<T>,
        normal: (T, T),
        face_length: T,
        dist_k: T,
        dist_l: T,
        distance: T,
    ) -> Self {
        let norm = |m: &Tensor2<T>| {
            let (a, b) = m.apply(normal);
            (a * a + b * b).sqrt()
        };
        let (mkl, mlk) = (norm(m_k), norm(m_l));
        let d_star = mkl * mlk / (dist_k * mkl + dist_l * mlk) * distance;
        Self { d_star, face_length, distance, dist_k, dist_l }
    }

    /// `d* |σ| / d(K,L)`, the factor multiplying `u_L − u_K`.
    #[inline]
    pub fn transmissibility(&self) -> T {
        self.d_star * self.face_length / self.distance
    }

    /// The same face seen from the other cell.
    pub fn reversed(&self) -> Self {
        Self { dist_k: self.dist_l, dist_l: self.dist_k, ..*self }
    }
}

/// Shared edge of two cells: `(direction from k, face length)`.
fn shared_face<T: Real>(k: CellIndex, l: CellIndex) -> Option<(Direction, T)> {
    let (fine, coarse, flip) = if k.level >= l.level { (k, l, false) } else { (l, k, true) };
    for dir in Direction::ALL {
        if let Neighbor::Cell(n) = fine.neighbor(dir) {
            if coarse.contains(n) {
                // the fine cell's whole edge must lie on the coarse cell's side
                let side = fine.geometry::<T>().side;
                let d = if flip { dir.opposite() } else { dir };
                return Some((d, side));
            }
        }
    }
    None
}

pub fn face_coefficient<T: Real>(
    k: CellIndex,
    l: CellIndex,
    medium: Medium,
    p: &ModelParams<T>,
) -> Result<FaceCoefficient<T>> {
    let (dir, face_length) =
        shared_face::<T>(k, l).ok_or_else(|| Error::NotAdjacent(k.to_string(), l.to_string()))?;
    let (gk, gl) = (k.geometry::<T>(), l.geometry::<T>());
    let (dx, dy) = (gl.center.0 - gk.center.0, gl.center.1 - gk.center.1);
    Ok(FaceCoefficient::from_tensors(
        &cell_tensor(k, medium, p)?,
        &cell_tensor(l, medium, p)?,
        dir.normal(),
        face_length,
        gk.side * T::of(0.5),
        gl.side * T::of(0.5),
        (dx * dx + dy * dy).sqrt(),
    ))
}

/// `F_K,L = d* |σ| / d(K,L) · (u_L − u_K)`.
#[inline]
pub fn numerical_flux<T: Real>(coef: &FaceCoefficient<T>, u_k: T, u_l: T) -> T {
    coef.transmissibility() * (u_l - u_k)
}

/// `Δt ≤ h / (2 max(|I_ion| + 2|I_app|) + 4 h⁻¹ max(|M_i| + |M_e|))`.
pub fn cfl_max_dt<T: Real>(reaction_max: T, conductivity_max: T, h: T) -> T {
    h / (T::of(2.0) * reaction_max + T::of(4.0) * conductivity_max / h)
}

/// `max_K (|I_ion,K| + 2|I_app,K|)` over the given cell values.
pub fn reaction_maximum<T: Real>(v: &[T], w: &[T], iapp: &[T], p: &ModelParams<T>) -> T {
    let mut m = T::zero();
    for k in 0..v.len() {
        let (ion, _) = membrane(v[k], w[k], p);
        m = m.max(ion.abs() + T::of(2.0) * iapp[k].abs());
    }
    m
}

/// `max_K (|M_i,K| + |M_e,K|)` with spectral norms, for a spatially uniform fiber field.
pub fn conductivity_maximum<T: Real>(p: &ModelParams<T>) -> Result<T> {
    let root = CellIndex::root();
    Ok(cell_tensor(root, Medium::Intra, p)?.spectral_norm() + cell_tensor(root, Medium::Extra, p)?.spectral_norm())
}

/// Face transmissibilities of a uniform level.
#[derive(Clone, Debug)]
pub struct UniformGrid<T> {
    pub level: u8,
    pub n: usize,
    pub area: T,
    /// Faces `(i,j)|(i+1,j)`, indexed `j·(n−1) + i`.
    pub tx: [Vec<T>; 2],
    /// Faces `(i,j)|(i,j+1)`, indexed `j·n + i`.
    pub ty: [Vec<T>; 2],
}

const INTRA: usize = 0;
const EXTRA: usize = 1;

impl<T: Real> UniformGrid<T> {
    pub fn new(level: u8, p: &ModelParams<T>) -> Result<Self> {
        let n = 1usize << level;
        let cell = |i: usize, j: usize| CellIndex { level, i: i as u32, j: j as u32 };
        let mut tx = [vec![], vec![]];
        let mut ty = [vec![], vec![]];
        for (m, medium) in [Medium::Intra, Medium::Extra].into_iter().enumerate() {
            tx[m] = Vec::with_capacity(n.saturating_sub(1) * n);
            for j in 0..n {
                for i in 0..n.saturating_sub(1) {
                    tx[m].push(face_coefficient(cell(i, j), cell(i + 1, j), medium, p)?.transmissibility());
                }
            }
            ty[m] = Vec::with_capacity(n * n.saturating_sub(1));
            for j in 0..n.saturating_sub(1) {
                for i in 0..n {
                    ty[m].push(face_coefficient(cell(i, j), cell(i, j + 1), medium, p)?.transmissibility());
                }
            }
        }
        Ok(Self { level, n, area: T::pow2(-2 * level as i32), tx, ty })
    }

    pub fn cells(&self) -> Vec<CellIndex> {
        crate::grid::level_cells(self.level).collect()
    }

    /// `Σ_L c_KL (u_L − u_K)` for every cell, zero flux across `∂Ω`.
    pub fn flux_sum(&self, medium: usize, u: &[T]) -> Vec<T> {
        let n = self.n;
        let mut out = vec![T::zero(); n * n];
        for j in 0..n {
            for i in 0..n.saturating_sub(1) {
                let (a, b) = (j * n + i, j * n + i + 1);
                let f = self.tx[medium][j * (n - 1) + i] * (u[b] - u[a]);
                out[a] += f;
                out[b] -= f;
            }
        }
        for j in 0..n.saturating_sub(1) {
            for i in 0..n {
                let (a, b) = (j * n + i, (j + 1) * n + i);
                let f = self.ty[medium][j * n + i] * (u[b] - u[a]);
                out[a] += f;
                out[b] -= f;
            }
        }
        out
    }

    /// Operator `A` with `(A u)_K = Σ_L (c^i + c^e)_KL (u_K − u_L)`.
    pub fn elliptic_matrix(&self) -> CsrMatrix<T> {
        let n = self.n;
        let mut t = Vec::with_capacity(5 * n * n);
        let mut push = |a: usize, b: usize, c: T| {
            t.push((a, a, c));
            t.push((b, b, c));
            t.push((a, b, -c));
            t.push((b, a, -c));
        };
        for j in 0..n {
            for i in 0..n.saturating_sub(1) {
                let f = j * (n - 1) + i;
                push(j * n + i, j * n + i + 1, self.tx[INTRA][f] + self.tx[EXTRA][f]);
            }
        }
        for j in 0..n.saturating_sub(1) {
            for i in 0..n {
                let f = j * n + i;
                push(j * n + i, (j + 1) * n + i, self.ty[INTRA][f] + self.ty[EXTRA][f]);
            }
        }
        if n == 1 {
            t.push((0, 0, T::zero()));
        }
        CsrMatrix::from_triplets(n * n, t)
    }
}

/// Level-`L` state arrays in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformState<T> {
    pub level: u8,
    pub v: Vec<T>,
    pub ue: Vec<T>,
    pub w: Vec<T>,
    pub step: u64,
    pub dt: T,
}

impl<T: Real> UniformState<T> {
    /// Time is derived from the step counter, never accumulated.
    pub fn time(&self) -> T {
        T::of(self.step as f64) * self.dt
    }
}

/// `v^{n+1}` from the explicit transmembrane equation.
pub fn explicit_v_step<T: Real>(
    grid: &UniformGrid<T>,
    state: &UniformState<T>,
    dt: T,
    p: &ModelParams<T>,
    iapp: &[T],
) -> Result<Vec<T>> {
    let flux = grid.flux_sum(EXTRA, &state.ue);
    let area = grid.area;
    let scale = dt / (p.beta * p.c_m * area);
    let mut out = Vec::with_capacity(state.v.len());
    for k in 0..state.v.len() {
        let (ion, _) = membrane(state.v[k], state.w[k], p);
        let next = state.v[k] + scale * (area * (iapp[k] - p.beta * ion) - flux[k]);
        if !next.is_finite() {
            return Err(Error::Instability {
                level: grid.level,
                time: state.time().as_f64(),
                reason: format!("non-finite transmembrane potential in cell {k}; reduce cfl_factor"),
            });
        }
        out.push(next);
    }
    Ok(out)
}

/// `w^{n+1} = w^n + Δt H(v^n, w^n)`.
pub fn w_step<T: Real>(state: &UniformState<T>, dt: T, p: &ModelParams<T>) -> Vec<T> {
    state.v.iter().zip(&state.w).map(|(&v, &w)| w + dt * membrane(v, w, p).1).collect()
}

/// Extracellular system for the new `v`: `A u_e = Σ_L c^i_KL (v_L − v_K) − |K| I_app,K`.
pub fn assemble_elliptic<T: Real>(grid: &UniformGrid<T>, v_new: &[T], iapp: &[T]) -> (CsrMatrix<T>, Vec<T>) {
    (grid.elliptic_matrix(), elliptic_rhs(grid, v_new, iapp))
}

pub fn elliptic_rhs<T: Real>(grid: &UniformGrid<T>, v_new: &[T], iapp: &[T]) -> Vec<T> {
    let mut rhs = grid.flux_sum(INTRA, v_new);
    for (r, &i) in rhs.iter_mut().zip(iapp) {
        *r -= grid.area * i;
    }
    rhs
}

/// Drives the uniform scheme; the elliptic operator is assembled once.
#[derive(Clone, Debug)]
pub struct UniformSolver<T> {
    pub grid: UniformGrid<T>,
    pub params: ModelParams<T>,
    pub stimulus: StimulusProtocol<T>,
    pub settings: SolverSettings<T>,
    pub state: UniformState<T>,
    matrix: CsrMatrix<T>,
    weights: Vec<T>,
    cells: Vec<CellIndex>,
    /// Cell averages of the stimulus while it is switched on, and zeros.
    iapp_on: Vec<T>,
    iapp_off: Vec<T>,
    conductivity_max: T,
    /// Largest `|Σ |K| u_e,K|` seen after any solve.
    pub max_compatibility_defect: T,
    pub last_solve: Option<SolveReport>,
    ue_prev: Vec<T>,
}

impl<T: Real> UniformSolver<T> {
    /// Sets `v⁰, w⁰` from the stimulus protocol, `u_e⁰` from the elliptic
    /// equation, and `Δt = cfl_factor ×` the stability bound of the initial state.
    pub fn new(
        level: u8,
        params: ModelParams<T>,
        stimulus: StimulusProtocol<T>,
        settings: SolverSettings<T>,
        cfl_factor: T,
    ) -> Result<Self> {
        let cells: Vec<CellIndex> = crate::grid::level_cells(level).collect();
        let (v, w): (Vec<T>, Vec<T>) = cells.iter().map(|&c| initial_cell_state(c, &stimulus)).unzip();
        Self::from_fields(level, params, stimulus, settings, cfl_factor, v, w)
    }

    pub fn from_fields(
        level: u8,
        params: ModelParams<T>,
        stimulus: StimulusProtocol<T>,
        settings: SolverSettings<T>,
        cfl_factor: T,
        v: Vec<T>,
        w: Vec<T>,
    ) -> Result<Self> {
        params.validate()?;
        stimulus.validate()?;
        if !(cfl_factor > T::zero()) {
            return Err(Error::param("cfl_factor", "must be > 0"));
        }
        let grid = UniformGrid::new(level, &params)?;
        let cells = grid.cells();
        let n = cells.len();
        let conductivity_max = conductivity_maximum(&params)?;
        let iapp_on = applied_current_cells(stimulus.iapp_start, &cells, &stimulus);
        let iapp_off = vec![T::zero(); n];
        let iapp = if stimulus.iapp_active(T::zero()) { &iapp_on } else { &iapp_off };
        let h = T::pow2(-(level as i32));
        let dt = cfl_factor * cfl_max_dt(reaction_maximum(&v, &w, iapp, &params), conductivity_max, h);
        let mut solver = Self {
            matrix: grid.elliptic_matrix(),
            weights: vec![grid.area; n],
            grid,
            params,
            stimulus,
            settings,
            state: UniformState { level, v, ue: vec![T::zero(); n], w, step: 0, dt },
            cells,
            iapp_on,
            iapp_off,
            conductivity_max,
            max_compatibility_defect: T::zero(),
            last_solve: None,
            ue_prev: Vec::new(),
        };
        let iapp = solver.iapp().to_vec();
        solver.state.ue = solver.solve_ue(&solver.state.v.clone(), &iapp)?;
        Ok(solver)
    }

    pub fn dt(&self) -> T {
        self.state.dt
    }

    pub fn time(&self) -> T {
        self.state.time()
    }

    pub fn cells(&self) -> &[CellIndex] {
        &self.cells
    }

    fn iapp(&self) -> &[T] {
        if self.stimulus.iapp_active(self.time()) {
            &self.iapp_on
        } else {
            &self.iapp_off
        }
    }

    fn solve_ue(&mut self, v: &[T], iapp: &[T]) -> Result<Vec<T>> {
        let rhs = elliptic_rhs(&self.grid, v, iapp);
        let sys = LinearSystem { matrix: &self.matrix, rhs: &rhs, weights: &self.weights, settings: self.settings };
        // linear extrapolation in time from the last two solutions
        let guess: Vec<T> = if self.ue_prev.len() == self.state.ue.len() {
            self.state.ue.iter().zip(&self.ue_prev).map(|(&a, &b)| a + a - b).collect()
        } else {
            self.state.ue.clone()
        };
        let (ue, report) = elliptic::solve_zero_mean(&sys, &guess)?;
        let defect: T = ue.iter().map(|&u| u * self.grid.area).sum::<T>().abs();
        self.max_compatibility_defect = self.max_compatibility_defect.max(defect);
        self.last_solve = Some(report);
        Ok(ue)
    }

    /// Stability bound for the current state.
    pub fn current_cfl_bound(&self) -> T {
        let h = T::pow2(-(self.grid.level as i32));
        cfl_max_dt(reaction_maximum(&self.state.v, &self.state.w, self.iapp(), &self.params), self.conductivity_max, h)
    }

    pub fn step(&mut self) -> Result<()> {
        let dt = self.state.dt;
        let bound = self.current_cfl_bound();
        if dt > bound {
            return Err(Error::Instability {
                level: self.grid.level,
                time: self.time().as_f64(),
                reason: format!("time step {dt:e} exceeds stability bound {bound:e}"),
            });
        }
        let iapp = self.iapp().to_vec();
        let v_new = explicit_v_step(&self.grid, &self.state, dt, &self.params, &iapp)?;
        let w_new = w_step(&self.state, dt, &self.params);
        let ue_new = self.solve_ue(&v_new, &iapp)?;
        self.state.v = v_new;
        self.state.w = w_new;
        self.ue_prev = std::mem::replace(&mut self.state.ue, ue_new);
        self.state.step += 1;
        Ok(())
    }

    pub fn advance(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    /// `Σ |K| v_K`.
    pub fn total_v(&self) -> T {
        self.state.v.iter().map(|&v| v * self.grid.area).sum()
    }

    /// `(cell, [v, u_e, w])` rows in row-major order.
    pub fn rows(&self) -> Vec<(CellIndex, [T; 3])> {
        self.cells
            .iter()
            .enumerate()
            .map(|(k, &c)| (c, [self.state.v[k], self.state.ue[k], self.state.w[k]]))
            .collect()
    }
}
