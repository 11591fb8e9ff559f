//! Cell-average multiresolution on dyadic grids.
//!
//! Projection averages four children. Prediction reconstructs children from
//! the 5×5 parent-level neighborhood with the `s = 2` centered polynomial
//! rule, applied as a tensor product in `x` and `y`. Details are the
//! residuals `true − predicted` of the children `e ∈ E* = {(1,0),(0,1),(1,1)}`;
//! the `(0,0)` residual follows from `Σ_e r_e = 0`.

use crate::error::{Error, Result};
use crate::grid::{reflect, CHILD_OFFSETS};
use crate::scalar::Real;

/// Prediction coefficients `(γ₁, γ₂)`.
pub const GAMMA: (f64, f64) = (-22.0 / 128.0, 3.0 / 128.0);

/// Constants of the derived reference tolerance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToleranceFormula<T> {
    pub c: T,
    pub alpha: T,
    pub d: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MrConfig<T> {
    pub max_level: u8,
    pub stencil_half_width: u8,
    pub gamma: (T, T),
    pub eps_ref: T,
    pub formula: Option<ToleranceFormula<T>>,
}

impl<T: Real> MrConfig<T> {
    pub fn new(max_level: u8, eps_ref: T) -> Self {
        Self { max_level, stencil_half_width: 2, gamma: (T::of(GAMMA.0), T::of(GAMMA.1)), eps_ref, formula: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=crate::grid::MAX_SUPPORTED_LEVEL).contains(&self.max_level) {
            return Err(Error::param("mr.max_level", format!("must be in 1..=14, got {}", self.max_level)));
        }
        if self.stencil_half_width != 2 {
            return Err(Error::param("mr.stencil_half_width", "only s = 2 is supported"));
        }
        if !(self.eps_ref > T::zero()) {
            return Err(Error::param("mr.eps_ref", "must be > 0"));
        }
        Ok(())
    }
}

/// Parent-level neighborhood, `values[dj + 2][di + 2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil<T>(pub [[T; 5]; 5]);

impl<T: Real> Stencil<T> {
    #[inline]
    pub fn at(&self, di: i64, dj: i64) -> T {
        self.0[(dj + 2) as usize][(di + 2) as usize]
    }

    pub fn constant(c: T) -> Self {
        Self([[c; 5]; 5])
    }

    /// Gathers from a full level array (row-major, `n × n`) with reflection at `∂Ω`.
    pub fn gather(values: &[T], level: u8, i: u32, j: u32) -> Self {
        let n = 1i64 << level;
        let mut s = [[T::zero(); 5]; 5];
        for (dj, row) in s.iter_mut().enumerate() {
            let jj = reflect(j as i64 + dj as i64 - 2, n);
            for (di, slot) in row.iter_mut().enumerate() {
                let ii = reflect(i as i64 + di as i64 - 2, n);
                *slot = values[(jj * n + ii) as usize];
            }
        }
        Self(s)
    }
}

/// `(Q_x, Q_y, Q_xy)` of a stencil.
pub fn prediction_terms<T: Real>(s: &Stencil<T>, gamma: (T, T)) -> (T, T, T) {
    let g = [gamma.0, gamma.1];
    let mut qx = T::zero();
    let mut qy = T::zero();
    let mut qxy = T::zero();
    for n in 1..=2i64 {
        let gn = g[n as usize - 1];
        qx += gn * (s.at(n, 0) - s.at(-n, 0));
        qy += gn * (s.at(0, n) - s.at(0, -n));
        for p in 1..=2i64 {
            let gp = g[p as usize - 1];
            qxy += gn * gp * (s.at(n, p) - s.at(n, -p) - s.at(-n, p) + s.at(-n, -p));
        }
    }
    (qx, qy, qxy)
}

#[inline]
fn sign<T: Real>(k: u32) -> T {
    if k % 2 == 0 {
        T::one()
    } else {
        -T::one()
    }
}

/// `û_e = ū + (−1)^{e₁} Q_x + (−1)^{e₂} Q_y + (−1)^{e₁+e₂} Q_xy`.
pub fn predict<T: Real>(s: &Stencil<T>, e: (u32, u32), gamma: (T, T)) -> T {
    let (qx, qy, qxy) = prediction_terms(s, gamma);
    s.at(0, 0) + sign::<T>(e.0) * qx + sign::<T>(e.1) * qy + sign::<T>(e.0 + e.1) * qxy
}

/// All four predictions in [`CHILD_OFFSETS`] order.
pub fn predict_children<T: Real>(s: &Stencil<T>, gamma: (T, T)) -> [T; 4] {
    let (qx, qy, qxy) = prediction_terms(s, gamma);
    CHILD_OFFSETS.map(|(e1, e2)| s.at(0, 0) + sign::<T>(e1) * qx + sign::<T>(e2) * qy + sign::<T>(e1 + e2) * qxy)
}

/// The prediction as a linear map: `û_e = Σ_k w[e][k] · stencil_k`, with
/// `k = (dj + 2)·5 + (di + 2)`.
pub fn prediction_weights<T: Real>(gamma: (T, T)) -> [[T; 25]; 4] {
    let mut w = [[T::zero(); 25]; 4];
    for k in 0..25 {
        let mut unit = [[T::zero(); 5]; 5];
        unit[k / 5][k % 5] = T::one();
        let pred = predict_children(&Stencil(unit), gamma);
        for e in 0..4 {
            w[e][k] = pred[e];
        }
    }
    w
}

/// Arithmetic mean of the four children.
#[inline]
pub fn project<T: Real>(children: [T; 4]) -> T {
    (children[0] + children[1] + children[2] + children[3]) * T::of(0.25)
}

/// Residuals `true − predicted` for all four children.
pub fn residuals<T: Real>(s: &Stencil<T>, children: [T; 4], gamma: (T, T)) -> [T; 4] {
    let pred = predict_children(s, gamma);
    [children[0] - pred[0], children[1] - pred[1], children[2] - pred[2], children[3] - pred[3]]
}

/// Stored details `(d_(1,0), d_(0,1), d_(1,1))` of one component.
pub fn details<T: Real>(s: &Stencil<T>, children: [T; 4], gamma: (T, T)) -> [T; 3] {
    let r = residuals(s, children, gamma);
    [r[1], r[2], r[3]]
}

/// All four residuals from the three stored details.
pub fn residuals_from_details<T: Real>(d: [T; 3]) -> [T; 4] {
    [-(d[0] + d[1] + d[2]), d[0], d[1], d[2]]
}

/// Details of a parent for each state component `(v, u_e, w)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DetailSet<T> {
    pub d: [[T; 3]; 3],
}

impl<T: Real> DetailSet<T> {
    pub fn compute(stencils: &[Stencil<T>; 3], children: &[[T; 4]; 3], gamma: (T, T)) -> Self {
        Self { d: [0, 1, 2].map(|c| details(&stencils[c], children[c], gamma)) }
    }

    /// `max_c max_e |d_c,e| / scale_c`.
    pub fn normalized_magnitude(&self, scale: [T; 3]) -> T {
        let mut m = T::zero();
        for c in 0..3 {
            for e in 0..3 {
                m = m.max(self.d[c][e].abs() / scale[c]);
            }
        }
        m
    }
}

/// `ε_l = 2^{2(l−L)} ε_R`.
pub fn threshold_for_level<T: Real>(level: u8, cfg: &MrConfig<T>) -> T {
    T::pow2(2 * (level as i32 - cfg.max_level as i32)) * cfg.eps_ref
}

/// `ε_R = C 2^{(2−α)L−2} / (reaction_max + D conductivity_max)`.
pub fn reference_tolerance<T: Real>(
    f: &ToleranceFormula<T>,
    max_level: u8,
    reaction_max: T,
    conductivity_max: T,
) -> Result<T> {
    let denom = reaction_max + f.d * conductivity_max;
    if !(denom > T::zero()) {
        return Err(Error::param("mr.formula", format!("denominator must be > 0, got {denom}")));
    }
    let exponent = (T::of(2.0) - f.alpha) * T::of(max_level as f64) - T::of(2.0);
    Ok(f.c * T::of(2.0).powf(exponent) / denom)
}

/// Uniform-level averages of the next coarser level.
pub fn project_level<T: Real>(fine: &[T], fine_level: u8) -> Vec<T> {
    assert!(fine_level >= 1);
    let nf = 1usize << fine_level;
    let nc = nf / 2;
    let mut out = Vec::with_capacity(nc * nc);
    for j in 0..nc {
        for i in 0..nc {
            let at = |a: usize, b: usize| fine[(2 * j + b) * nf + 2 * i + a];
            out.push(project([at(0, 0), at(1, 0), at(0, 1), at(1, 1)]));
        }
    }
    out
}

/// Predicted averages on level `coarse_level + 1` (no details).
pub fn predict_level<T: Real>(coarse: &[T], coarse_level: u8, gamma: (T, T)) -> Vec<T> {
    let nc = 1usize << coarse_level;
    let nf = 2 * nc;
    let mut out = vec![T::zero(); nf * nf];
    for j in 0..nc {
        for i in 0..nc {
            let kids = predict_children(&Stencil::gather(coarse, coarse_level, i as u32, j as u32), gamma);
            for (k, (e1, e2)) in CHILD_OFFSETS.iter().enumerate() {
                out[(2 * j + *e2 as usize) * nf + 2 * i + *e1 as usize] = kids[k];
            }
        }
    }
    out
}

/// Root average plus, for every parent level `l < L`, one detail triple per
/// parent in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleData<T> {
    pub max_level: u8,
    pub root: T,
    pub details: Vec<Vec<[T; 3]>>,
}

/// Fine-to-coarse transform of a complete level-`L` field.
pub fn encode<T: Real>(fine: &[T], max_level: u8, gamma: (T, T)) -> MultiscaleData<T> {
    assert_eq!(fine.len(), 1usize << (2 * max_level as usize));
    let mut levels = vec![Vec::new(); max_level as usize];
    let mut current = fine.to_vec();
    for l in (0..max_level).rev() {
        let coarse = project_level(&current, l + 1);
        let nc = 1usize << l;
        let nf = 2 * nc;
        let mut dl = Vec::with_capacity(nc * nc);
        for j in 0..nc {
            for i in 0..nc {
                let at = |a: usize, b: usize| current[(2 * j + b) * nf + 2 * i + a];
                let kids = [at(0, 0), at(1, 0), at(0, 1), at(1, 1)];
                dl.push(details(&Stencil::gather(&coarse, l, i as u32, j as u32), kids, gamma));
            }
        }
        levels[l as usize] = dl;
        current = coarse;
    }
    MultiscaleData { max_level, root: current[0], details: levels }
}

/// Coarse-to-fine inverse of [`encode`].
pub fn decode<T: Real>(ms: &MultiscaleData<T>, gamma: (T, T)) -> Vec<T> {
    let mut current = vec![ms.root];
    for l in 0..ms.max_level {
        let mut fine = predict_level(&current, l, gamma);
        let nc = 1usize << l;
        let nf = 2 * nc;
        for j in 0..nc {
            for i in 0..nc {
                let r = residuals_from_details(ms.details[l as usize][j * nc + i]);
                for (k, (e1, e2)) in CHILD_OFFSETS.iter().enumerate() {
                    fine[(2 * j + *e2 as usize) * nf + 2 * i + *e1 as usize] += r[k];
                }
            }
        }
        current = fine;
    }
    current
}

/// Zeroes every parent's details whose largest magnitude, divided by `scale`,
/// falls below `ε_l`. Returns the number of parents zeroed.
pub fn threshold_details<T: Real>(ms: &mut MultiscaleData<T>, cfg: &MrConfig<T>, scale: T) -> usize {
    let mut zeroed = 0;
    for (l, level) in ms.details.iter_mut().enumerate() {
        let eps = threshold_for_level(l as u8, cfg);
        for d in level.iter_mut() {
            let m = d[0].abs().max(d[1].abs()).max(d[2].abs());
            if m / scale < eps {
                *d = [T::zero(); 3];
                zeroed += 1;
            }
        }
    }
    zeroed
}
