//! TOML run configuration.
//!
//! Every section and key is optional; missing values take the reference
//! defaults with the desk-scale finest level `L = 6`. Unknown keys are rejected.
//!
//! ```toml
//! mode = "mr"                 # uniform | mr | mr-lts
//! t_final = 0.5
//! snapshot_times = [0.125, 0.25, 0.375, 0.5]
//!
//! [model]
//! beta = 4036.5
//! fiber_angle = -0.7853981633974483
//!
//! [stimulus]
//! center = [0.5, 0.5]
//! radius = 0.05
//!
//! [mr]
//! max_level = 6
//! eps_ref = 5e-4
//!
//! [time]
//! cfl_factor = 0.5
//! remesh_interval = 2
//! elliptic_cadence = "every_fine_step"
//!
//! [solver]
//! tol = 1e-8
//!
//! [harness]
//! paired_uniform = true
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::elliptic::SolverSettings;
use crate::error::{Error, Result};
use crate::lts::{AdaptiveSettings, EllipticCadence};
use crate::model::{ModelParams, StimulusProtocol};
use crate::multiresolution::{reference_tolerance, ToleranceFormula};
use crate::tree::TreeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Uniform,
    Mr,
    MrLts,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Uniform => "uniform",
            Mode::Mr => "mr",
            Mode::MrLts => "mr-lts",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Mode::Uniform),
            "mr" => Ok(Mode::Mr),
            "mr-lts" => Ok(Mode::MrLts),
            other => Err(Error::Config(format!("unknown mode {other:?}; expected uniform, mr or mr-lts"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CadenceSetting {
    EveryFineStep,
    SyncOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceMode {
    /// `eps_ref` is used as given.
    Direct,
    /// `eps_ref` follows from `C`, `alpha`, `D` and the initial maxima.
    Derived,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub beta: f64,
    pub c_m: f64,
    pub r_m: f64,
    pub v_p: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub eta4: f64,
    pub eta5: f64,
    pub sigma_il: f64,
    pub sigma_it: f64,
    pub sigma_el: f64,
    pub sigma_et: f64,
    pub fiber_angle: f64,
    pub ionic: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from(ModelParams::<f64>::default())
    }
}

impl From<ModelParams<f64>> for ModelSection {
    fn from(p: ModelParams<f64>) -> Self {
        Self {
            beta: p.beta,
            c_m: p.c_m,
            r_m: p.r_m,
            v_p: p.v_p,
            eta1: p.eta1,
            eta2: p.eta2,
            eta3: p.eta3,
            eta4: p.eta4,
            eta5: p.eta5,
            sigma_il: p.sigma_il,
            sigma_it: p.sigma_it,
            sigma_el: p.sigma_el,
            sigma_et: p.sigma_et,
            fiber_angle: p.fiber_angle,
            ionic: p.ionic,
        }
    }
}

impl ModelSection {
    pub fn params(&self) -> ModelParams<f64> {
        ModelParams {
            beta: self.beta,
            c_m: self.c_m,
            r_m: self.r_m,
            v_p: self.v_p,
            eta1: self.eta1,
            eta2: self.eta2,
            eta3: self.eta3,
            eta4: self.eta4,
            eta5: self.eta5,
            sigma_il: self.sigma_il,
            sigma_it: self.sigma_it,
            sigma_el: self.sigma_el,
            sigma_et: self.sigma_et,
            fiber_angle: self.fiber_angle,
            ionic: self.ionic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StimulusSection {
    pub center: [f64; 2],
    pub radius: f64,
    pub v_inside: f64,
    pub w0: f64,
    pub iapp_amplitude: f64,
    pub iapp_center: [f64; 2],
    pub iapp_radius: f64,
    pub iapp_start: f64,
    pub iapp_end: f64,
    pub samples: u32,
}

impl Default for StimulusSection {
    fn default() -> Self {
        let s = StimulusProtocol::<f64>::default();
        Self {
            center: [s.center.0, s.center.1],
            radius: s.radius,
            v_inside: s.v_inside,
            w0: s.w0,
            iapp_amplitude: s.iapp_amplitude,
            iapp_center: [s.iapp_center.0, s.iapp_center.1],
            iapp_radius: s.iapp_radius,
            iapp_start: s.iapp_start,
            iapp_end: s.iapp_end,
            samples: s.samples,
        }
    }
}

impl StimulusSection {
    pub fn protocol(&self) -> StimulusProtocol<f64> {
        StimulusProtocol {
            center: (self.center[0], self.center[1]),
            radius: self.radius,
            v_inside: self.v_inside,
            w0: self.w0,
            iapp_amplitude: self.iapp_amplitude,
            iapp_center: (self.iapp_center[0], self.iapp_center[1]),
            iapp_radius: self.iapp_radius,
            iapp_start: self.iapp_start,
            iapp_end: self.iapp_end,
            samples: self.samples,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrSection {
    pub max_level: u8,
    pub eps_ref: f64,
    pub min_level: u8,
    /// Keep the full level-`L` tree and never remesh.
    pub force_uniform: bool,
    pub tolerance: ToleranceMode,
    pub c: f64,
    pub alpha: f64,
    pub d: f64,
}

impl Default for MrSection {
    fn default() -> Self {
        Self {
            max_level: 6,
            eps_ref: 5e-4,
            min_level: 2,
            force_uniform: false,
            tolerance: ToleranceMode::Direct,
            c: 0.0601,
            alpha: 2.0,
            d: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSection {
    pub cfl_factor: f64,
    pub remesh_interval: u64,
    pub elliptic_cadence: CadenceSetting,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self { cfl_factor: 0.5, remesh_interval: 2, elliptic_cadence: CadenceSetting::EveryFineStep }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: Option<usize>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    /// Finest level of a uniform reference run used for error tables.
    pub reference_level: Option<u8>,
    /// Also run the uniform scheme at `L` for timing and, without a
    /// reference level, for the error columns.
    pub paired_uniform: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub t_final: f64,
    pub snapshot_times: Vec<f64>,
    pub model: ModelSection,
    pub stimulus: StimulusSection,
    pub mr: MrSection,
    pub time: TimeSection,
    pub solver: SolverSection,
    pub harness: HarnessSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Mr,
            t_final: 0.5,
            snapshot_times: vec![0.125, 0.25, 0.375, 0.5],
            model: ModelSection::default(),
            stimulus: StimulusSection::default(),
            mr: MrSection::default(),
            time: TimeSection::default(),
            solver: SolverSection::default(),
            harness: HarnessSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.params().validate()?;
        self.stimulus.protocol().validate()?;
        self.tree_config().validate()?;
        if !(self.t_final > 0.0) {
            return Err(Error::param("t_final", "must be > 0"));
        }
        if let Some(t) = self.snapshot_times.iter().find(|&&t| !(0.0..=self.t_final).contains(&t)) {
            return Err(Error::param("snapshot_times", format!("{t} lies outside [0, t_final]")));
        }
        if self.snapshot_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::param("snapshot_times", "must be sorted"));
        }
        if !(self.time.cfl_factor > 0.0) {
            return Err(Error::param("time.cfl_factor", "must be > 0"));
        }
        if self.time.remesh_interval == 0 {
            return Err(Error::param("time.remesh_interval", "must be >= 1"));
        }
        if !(self.solver.tol > 0.0) {
            return Err(Error::param("solver.tol", "must be > 0"));
        }
        if let Some(r) = self.harness.reference_level {
            if r < self.mr.max_level || r > crate::tree::MAX_TREE_LEVEL {
                return Err(Error::param(
                    "harness.reference_level",
                    format!("must lie in {}..={}", self.mr.max_level, crate::tree::MAX_TREE_LEVEL),
                ));
            }
        }
        Ok(())
    }

    pub fn tree_config(&self) -> TreeConfig<f64> {
        let mut t = TreeConfig::new(self.mr.max_level, self.mr.eps_ref);
        t.min_level = self.mr.min_level;
        t.adapt = !self.mr.force_uniform;
        t
    }

    pub fn solver_settings(&self) -> SolverSettings<f64> {
        SolverSettings { tol: self.solver.tol, max_iter: self.solver.max_iter }
    }

    /// Settings of the adaptive solver, with `ε_R` resolved.
    pub fn adaptive_settings(&self) -> Result<AdaptiveSettings<f64>> {
        let mut tree = self.tree_config();
        if self.mr.tolerance == ToleranceMode::Derived {
            let formula = ToleranceFormula { c: self.mr.c, alpha: self.mr.alpha, d: self.mr.d };
            tree.mr.formula = Some(formula);
            tree.mr.eps_ref = self.derived_eps_ref()?;
        }
        Ok(AdaptiveSettings {
            tree,
            cfl_factor: self.time.cfl_factor,
            remesh_interval: self.time.remesh_interval,
            local_time_stepping: self.mode == Mode::MrLts,
            cadence: match self.time.elliptic_cadence {
                CadenceSetting::EveryFineStep => EllipticCadence::EveryFineStep,
                CadenceSetting::SyncOnly => EllipticCadence::SyncOnly,
            },
            solver: self.solver_settings(),
        })
    }

    /// `ε_R` from the tolerance formula with the initial-state maxima.
    pub fn derived_eps_ref(&self) -> Result<f64> {
        let p = self.model.params();
        let s = self.stimulus.protocol();
        let formula = ToleranceFormula { c: self.mr.c, alpha: self.mr.alpha, d: self.mr.d };
        let (ion_in, _) = crate::model::membrane(s.v_inside, s.w0, &p);
        let (ion_out, _) = crate::model::membrane(0.0, s.w0, &p);
        let iapp = if s.iapp_amplitude != 0.0 { 2.0 * s.iapp_amplitude.abs() } else { 0.0 };
        let reaction = ion_in.abs().max(ion_out.abs()) + iapp;
        reference_tolerance(&formula, self.mr.max_level, reaction, crate::fv::conductivity_maximum(&p)?)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    RunConfig::parse(&text)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_toml()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
