//! Tissue model: anisotropic conductivities, Mitchell–Schaeffer membrane
//! kinetics, and the stimulus / initial-data protocol.

use crate::error::{Error, Result};
use crate::grid::CellIndex;
use crate::scalar::Real;

/// Symmetric 2×2 tensor `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tensor2<T> {
    pub xx: T,
    pub xy: T,
    pub yy: T,
}

impl<T: Real> Tensor2<T> {
    pub fn isotropic(c: T) -> Self {
        Self { xx: c, xy: T::zero(), yy: c }
    }

    pub fn apply(&self, (x, y): (T, T)) -> (T, T) {
        (self.xx * x + self.xy * y, self.xy * x + self.yy * y)
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (T, T) {
        let half = T::of(0.5);
        let mean = half * (self.xx + self.yy);
        let dev = half * (self.xx - self.yy);
        let r = (dev * dev + self.xy * self.xy).sqrt();
        (mean - r, mean + r)
    }

    /// Operator 2-norm; the largest eigenvalue magnitude for a symmetric tensor.
    pub fn spectral_norm(&self) -> T {
        let (a, b) = self.eigenvalues();
        a.abs().max(b.abs())
    }

    pub fn scale(&self, s: T) -> Self {
        Self { xx: self.xx * s, xy: self.xy * s, yy: self.yy * s }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self { xx: self.xx + o.xx, xy: self.xy + o.xy, yy: self.yy + o.yy }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Medium {
    Intra,
    Extra,
}

/// Physical constants of the bidomain / Mitchell–Schaeffer model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// Surface-to-volume ratio (cm⁻¹).
    pub beta: T,
    /// Membrane capacitance per unit area.
    pub c_m: T,
    /// Membrane surface resistivity (Ω cm²).
    pub r_m: T,
    /// Potential scale (mV).
    pub v_p: T,
    pub eta1: T,
    pub eta2: T,
    pub eta3: T,
    pub eta4: T,
    pub eta5: T,
    pub sigma_il: T,
    pub sigma_it: T,
    pub sigma_el: T,
    pub sigma_et: T,
    /// Fiber direction angle with the x axis (radians).
    pub fiber_angle: T,
    /// When false the ionic current and gate dynamics are switched off
    /// (pure diffusion runs for conservation checks).
    pub ionic: bool,
}

impl<T: Real> Default for ModelParams<T> {
    /// Reference tissue: c_m = 1, β = 4036.5, R_m = 2·10⁴, v_p = 100 mV,
    /// η = (0.005, 0.1, 1.5, 7.5, 0.1), σ_i = (6, 0.6), σ_e = (24, 12), fibers at −π/4.
    fn default() -> Self {
        Self {
            beta: T::of(4036.5),
            c_m: T::of(1.0),
            r_m: T::of(2.0e4),
            v_p: T::of(100.0),
            eta1: T::of(0.005),
            eta2: T::of(0.1),
            eta3: T::of(1.5),
            eta4: T::of(7.5),
            eta5: T::of(0.1),
            sigma_il: T::of(6.0),
            sigma_it: T::of(0.6),
            sigma_el: T::of(24.0),
            sigma_et: T::of(12.0),
            fiber_angle: T::of(-std::f64::consts::FRAC_PI_4),
            ionic: true,
        }
    }
}

impl<T: Real> ModelParams<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta", self.beta),
            ("c_m", self.c_m),
            ("r_m", self.r_m),
            ("v_p", self.v_p),
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("sigma_il", self.sigma_il),
            ("sigma_it", self.sigma_it),
            ("sigma_el", self.sigma_el),
            ("sigma_et", self.sigma_et),
        ];
        for (name, value) in positive {
            if !(value > T::zero()) || !value.is_finite() {
                return Err(Error::param(name, format!("must be finite and > 0, got {value}")));
            }
        }
        for (name, value) in [("eta3", self.eta3), ("eta4", self.eta4), ("eta5", self.eta5)] {
            if !value.is_finite() {
                return Err(Error::param(name, "must be finite"));
            }
        }
        if !self.fiber_angle.is_finite() {
            return Err(Error::param("fiber_angle", "must be finite"));
        }
        Ok(())
    }

    pub fn conductivities(&self, medium: Medium) -> (T, T) {
        match medium {
            Medium::Intra => (self.sigma_il, self.sigma_it),
            Medium::Extra => (self.sigma_el, self.sigma_et),
        }
    }

    /// Fiber direction `a_l(x)`; uniform over the tissue.
    pub fn fiber_direction(&self, _x: (T, T)) -> (T, T) {
        (self.fiber_angle.cos(), self.fiber_angle.sin())
    }
}

/// `M_j(x) = σ_t I + (σ_l − σ_t) a aᵀ`.
pub fn conductivity_tensor<T: Real>(x: (T, T), medium: Medium, p: &ModelParams<T>) -> Result<Tensor2<T>> {
    let (sl, st) = p.conductivities(medium);
    if !(sl > T::zero() && st > T::zero()) {
        return Err(Error::param("sigma", format!("conductivities must be > 0, got ({sl}, {st})")));
    }
    let (ax, ay) = p.fiber_direction(x);
    let d = sl - st;
    Ok(Tensor2 { xx: st + d * ax * ax, xy: d * ax * ay, yy: st + d * ay * ay })
}

/// Ionic current `(v_p/R_m)(v/(v_p η₂) − v²(1 − v/v_p) w/(v_p² η₁))`.
pub fn i_ion<T: Real>(v: T, w: T, p: &ModelParams<T>) -> T {
    let vp = p.v_p;
    (vp / p.r_m) * (v / (vp * p.eta2) - v * v * (T::one() - v / vp) * w / (vp * vp * p.eta1))
}

/// Gate target: 1 below the threshold `η₅`, 0 otherwise (strict `<`).
pub fn w_inf<T: Real>(s: T, p: &ModelParams<T>) -> T {
    if s < p.eta5 {
        T::one()
    } else {
        T::zero()
    }
}

/// Gate time-scale factor: `η₃` below the threshold `η₅`, `η₄` otherwise.
pub fn eta_inf<T: Real>(s: T, p: &ModelParams<T>) -> T {
    if s < p.eta5 {
        p.eta3
    } else {
        p.eta4
    }
}

/// Recovery rate `H(v, w) = (w_∞(v/v_p) − w) / (R_m c_m η_∞(v/v_p))`.
pub fn h_gate<T: Real>(v: T, w: T, p: &ModelParams<T>) -> T {
    let s = v / p.v_p;
    (w_inf(s, p) - w) / (p.r_m * p.c_m * eta_inf(s, p))
}

/// Membrane source terms `(I_ion, H)`, honoring [`ModelParams::ionic`].
#[inline]
pub fn membrane<T: Real>(v: T, w: T, p: &ModelParams<T>) -> (T, T) {
    if p.ionic {
        (i_ion(v, w, p), h_gate(v, w, p))
    } else {
        (T::zero(), T::zero())
    }
}

/// Initial data and applied current.
///
/// The initial excitation is a disc of raised transmembrane potential. An
/// optional applied current `I_app` acts on a second disc during
/// `[iapp_start, iapp_end)`; it is always returned with zero spatial mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StimulusProtocol<T> {
    pub center: (T, T),
    pub radius: T,
    /// Transmembrane potential inside the disc (outside it is 0).
    pub v_inside: T,
    pub w0: T,
    pub iapp_amplitude: T,
    pub iapp_center: (T, T),
    pub iapp_radius: T,
    pub iapp_start: T,
    pub iapp_end: T,
    /// Sub-samples per cell side used for cell averages of the discontinuous data.
    pub samples: u32,
}

impl<T: Real> Default for StimulusProtocol<T> {
    fn default() -> Self {
        Self {
            center: (T::of(0.5), T::of(0.5)),
            radius: T::of(0.05),
            v_inside: T::of(100.0),
            w0: T::one(),
            iapp_amplitude: T::zero(),
            iapp_center: (T::of(0.5), T::of(0.5)),
            iapp_radius: T::of(0.05),
            iapp_start: T::zero(),
            iapp_end: T::zero(),
            samples: 8,
        }
    }
}

impl<T: Real> StimulusProtocol<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > T::zero()) {
            return Err(Error::param("stimulus.radius", "must be > 0"));
        }
        if !(self.iapp_radius > T::zero()) {
            return Err(Error::param("stimulus.iapp_radius", "must be > 0"));
        }
        if self.samples == 0 {
            return Err(Error::param("stimulus.samples", "must be >= 1"));
        }
        if self.iapp_end < self.iapp_start {
            return Err(Error::param("stimulus.iapp_end", "must not precede iapp_start"));
        }
        Ok(())
    }

    fn in_disc(center: (T, T), radius: T, x: (T, T)) -> bool {
        let (dx, dy) = (x.0 - center.0, x.1 - center.1);
        dx * dx + dy * dy < radius * radius
    }

    pub fn iapp_active(&self, t: T) -> bool {
        self.iapp_amplitude != T::zero() && t >= self.iapp_start && t < self.iapp_end
    }

    /// Raw stimulus shape before mean removal.
    fn iapp_shape(&self, t: T, x: (T, T)) -> T {
        if self.iapp_active(t) && Self::in_disc(self.iapp_center, self.iapp_radius, x) {
            self.iapp_amplitude
        } else {
            T::zero()
        }
    }
}

/// Pointwise `I_app(t, x)`: the disc shape minus its exact mean over `Ω`.
///
/// The disc is assumed to lie inside the domain; cell-level solvers use
/// [`applied_current_cells`], which removes the discrete mean instead.
pub fn applied_current<T: Real>(t: T, x: (T, T), proto: &StimulusProtocol<T>) -> T {
    if !proto.iapp_active(t) {
        return T::zero();
    }
    let mean = proto.iapp_amplitude * T::of(std::f64::consts::PI) * proto.iapp_radius * proto.iapp_radius;
    proto.iapp_shape(t, x) - mean
}

/// Cell averages of `I_app` over a partition, with the area-weighted mean removed
/// so that `Σ |K| I_app,K = 0` holds to roundoff.
pub fn applied_current_cells<T: Real>(t: T, cells: &[CellIndex], proto: &StimulusProtocol<T>) -> Vec<T> {
    if !proto.iapp_active(t) {
        return vec![T::zero(); cells.len()];
    }
    let mut values: Vec<T> = cells
        .iter()
        .map(|&c| cell_average(c, proto.samples, |x| proto.iapp_shape(t, x)))
        .collect();
    let (mut num, mut den) = (T::zero(), T::zero());
    for (c, v) in cells.iter().zip(&values) {
        let a = c.geometry::<T>().area;
        num += a * *v;
        den += a;
    }
    let mean = num / den;
    for v in &mut values {
        *v -= mean;
    }
    values
}

/// `(v₀(x), w₀(x))`.
pub fn initial_state<T: Real>(x: (T, T), proto: &StimulusProtocol<T>) -> (T, T) {
    let v = if StimulusProtocol::in_disc(proto.center, proto.radius, x) { proto.v_inside } else { T::zero() };
    (v, proto.w0)
}

/// Midpoint-rule cell average of `f` with `samples²` points.
pub fn cell_average<T: Real>(c: CellIndex, samples: u32, f: impl Fn((T, T)) -> T) -> T {
    let g = c.geometry::<T>();
    let h = g.side / T::of(samples as f64);
    let x0 = g.center.0 - T::of(0.5) * g.side;
    let y0 = g.center.1 - T::of(0.5) * g.side;
    let half = T::of(0.5);
    let mut acc = T::zero();
    for b in 0..samples {
        let y = y0 + (T::of(b as f64) + half) * h;
        for a in 0..samples {
            let x = x0 + (T::of(a as f64) + half) * h;
            acc += f((x, y));
        }
    }
    acc / T::of((samples * samples) as f64)
}

/// Cell averages of `(v₀, w₀)`.
pub fn initial_cell_state<T: Real>(c: CellIndex, proto: &StimulusProtocol<T>) -> (T, T) {
    let v = cell_average(c, proto.samples, |x| initial_state(x, proto).0);
    let w = cell_average(c, proto.samples, |x| initial_state(x, proto).1);
    (v, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::level_cells;

    #[test]
    fn tensor_axis_aligned_and_isotropic() {
        let mut p = ModelParams::<f64>::default();
        p.fiber_angle = 0.0;
        let m = conductivity_tensor((0.3, 0.3), Medium::Intra, &p).unwrap();
        assert!((m.xx - 6.0).abs() < 1e-15 && m.xy.abs() < 1e-15 && (m.yy - 0.6).abs() < 1e-15);

        p.sigma_il = 2.5;
        p.sigma_it = 2.5;
        for th in [0.0, 0.3, -1.2, 2.0] {
            p.fiber_angle = th;
            let m = conductivity_tensor((0.1, 0.9), Medium::Intra, &p).unwrap();
            assert!((m.xx - 2.5).abs() < 1e-14 && m.xy.abs() < 1e-14 && (m.yy - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn tensor_reference_fibers() {
        // a = (√2/2, −√2/2): M = 0.6 I + 5.4 a aᵀ = [[3.3, −2.7], [−2.7, 3.3]].
        let p = ModelParams::<f64>::default();
        let m = conductivity_tensor((0.5, 0.5), Medium::Intra, &p).unwrap();
        assert!((m.xx - 3.3).abs() < 1e-12);
        assert!((m.xy + 2.7).abs() < 1e-12);
        assert!((m.yy - 3.3).abs() < 1e-12);
        let (lo, hi) = m.eigenvalues();
        assert!((lo - 0.6).abs() < 1e-12 && (hi - 6.0).abs() < 1e-12);
        let e = conductivity_tensor((0.5, 0.5), Medium::Extra, &p).unwrap();
        assert!((e.spectral_norm() - 24.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_conductivity_is_a_parameter_error() {
        let mut p = ModelParams::<f64>::default();
        p.sigma_it = 0.0;
        assert!(conductivity_tensor((0.5, 0.5), Medium::Intra, &p).is_err());
        assert!(p.validate().is_err());
    }

    #[test]
    fn ionic_current_examples() {
        let p = ModelParams::<f64>::default();
        assert_eq!(i_ion(0.0, 0.7, &p), 0.0);
        let at_vp = i_ion(100.0, 0.3, &p);
        assert!((at_vp - (100.0 / 2.0e4) / 0.1).abs() < 1e-15);
        // Independent scalar evaluation at v = 50, w = 1:
        // (100/2e4) * (50/(100*0.1) - 2500*0.5*1/(1e4*0.005)) = 0.005 * (5 - 25) = -0.1
        assert!((i_ion(50.0, 1.0, &p) + 0.1).abs() < 1e-14);
    }

    #[test]
    fn gate_examples() {
        let p = ModelParams::<f64>::default();
        assert_eq!(h_gate(0.0, 1.0, &p), 0.0);
        assert_eq!(h_gate(100.0, 0.0, &p), 0.0);
        assert!((h_gate(0.0, 0.0, &p) - 1.0 / (2.0e4 * 1.0 * 1.5)).abs() < 1e-20);
        // strict `<` at the threshold s = η₅
        assert_eq!(w_inf(0.1, &p), 0.0);
        assert_eq!(eta_inf(0.1, &p), 7.5);
        assert_eq!(w_inf(0.0999, &p), 1.0);
    }

    #[test]
    fn zero_amplitude_stimulus_vanishes() {
        let proto = StimulusProtocol::<f64> { iapp_end: 1.0, ..Default::default() };
        assert_eq!(applied_current(0.5, (0.5, 0.5), &proto), 0.0);
        let cells: Vec<_> = level_cells(3).collect();
        assert!(applied_current_cells(0.5, &cells, &proto).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discrete_applied_current_has_zero_mean_on_every_level() {
        let proto = StimulusProtocol::<f64> {
            iapp_amplitude: 37.0,
            iapp_radius: 0.13,
            iapp_center: (0.41, 0.58),
            iapp_end: 1.0,
            ..Default::default()
        };
        for l in 0..7 {
            let cells: Vec<_> = level_cells(l).collect();
            let vals = applied_current_cells(0.2, &cells, &proto);
            let mean: f64 = cells.iter().zip(&vals).map(|(c, v)| c.geometry::<f64>().area * v).sum();
            assert!(mean.abs() <= 1e-12 * 37.0, "level {l}: {mean}");
        }
        assert_eq!(applied_current_cells(1.5, &[CellIndex::root()], &proto), vec![0.0]);
    }

    #[test]
    fn default_initial_state_is_centered_disc() {
        let proto = StimulusProtocol::<f64>::default();
        assert_eq!(initial_state((0.5, 0.5), &proto), (100.0, 1.0));
        assert_eq!(initial_state((0.5, 0.56), &proto), (0.0, 1.0));
        assert_eq!(initial_state((0.53, 0.53), &proto), (100.0, 1.0));
    }
}
