//! Error norms, the metrics file and shape diagnostics of the wavefront.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorNorms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

impl ErrorNorms {
    pub const NAN: Self = Self { l1: f64::NAN, l2: f64::NAN, linf: f64::NAN };
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Relative errors of `a` against `b` with cell weights `area`.
pub fn error_norms(a: &[f64], b: &[f64], area: &[f64]) -> Result<ErrorNorms> {
    if a.len() != b.len() || a.len() != area.len() {
        return Err(Error::Harness(format!(
            "field lengths differ: {} vs {} (weights {})",
            a.len(),
            b.len(),
            area.len()
        )));
    }
    let (mut n1, mut d1, mut n2, mut d2, mut ni, mut di) = (0.0, 0.0, 0.0, 0.0, 0.0f64, 0.0f64);
    for k in 0..a.len() {
        let e = (a[k] - b[k]).abs();
        n1 += area[k] * e;
        d1 += area[k] * b[k].abs();
        n2 += area[k] * e * e;
        d2 += area[k] * b[k] * b[k];
        ni = ni.max(e);
        di = di.max(b[k].abs());
    }
    Ok(ErrorNorms { l1: ratio(n1, d1), l2: ratio(n2.sqrt(), d2.sqrt()), linf: ratio(ni, di) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnapshotMetrics {
    pub time: f64,
    pub leaf_count: usize,
    pub eta: f64,
    pub err_v: ErrorNorms,
    pub err_ue: ErrorNorms,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub mode: String,
    pub max_level: u8,
    pub fine_count: u64,
    pub comparison_level: u8,
    /// `reference`, `paired-uniform` or `none`.
    pub error_source: String,
    pub rows: Vec<SnapshotMetrics>,
    pub dt: f64,
    pub steps: u64,
    pub wall_clock: f64,
    pub uniform_wall_clock: Option<f64>,
    pub max_abs_v: f64,
    pub max_compatibility_defect: f64,
}

impl RunMetrics {
    /// Speed-up against the paired uniform run.
    pub fn nu(&self) -> Option<f64> {
        self.uniform_wall_clock.map(|u| u / self.wall_clock)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# mode={} L={} N={} comparison_level={} errors={} normalization=reference-norm",
            self.mode, self.max_level, self.fine_count, self.comparison_level, self.error_source
        );
        let _ = writeln!(
            s,
            "time,leaf_count,eta,err_v_L1,err_v_L2,err_v_Linf,err_ue_L1,err_ue_L2,err_ue_Linf"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.time, r.leaf_count, r.eta, r.err_v.l1, r.err_v.l2, r.err_v.linf, r.err_ue.l1, r.err_ue.l2, r.err_ue.linf
            );
        }
        let opt = |x: Option<f64>| x.map_or("nan".to_string(), |v| v.to_string());
        let _ = writeln!(
            s,
            "# nu={} wall_clock_s={} uniform_wall_clock_s={} dt={} steps={} max_abs_v={} max_compatibility_defect={}",
            opt(self.nu()),
            self.wall_clock,
            opt(self.uniform_wall_clock),
            self.dt,
            self.steps,
            self.max_abs_v,
            self.max_compatibility_defect
        );
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunMetrics {
            mode: String::new(),
            max_level: 0,
            fine_count: 0,
            comparison_level: 0,
            error_source: String::new(),
            rows: Vec::new(),
            dt: f64::NAN,
            steps: 0,
            wall_clock: f64::NAN,
            uniform_wall_clock: None,
            max_abs_v: f64::NAN,
            max_compatibility_defect: f64::NAN,
        };
        let bad = |n: usize, what: &str| Error::Harness(format!("metrics line {}: {what}", n + 1));
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("time,") {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for field in rest.split_whitespace() {
                    let Some((k, v)) = field.split_once('=') else { continue };
                    let num = || v.parse::<f64>().map_err(|_| bad(n, &format!("bad value for {k}")));
                    match k {
                        "mode" => m.mode = v.to_string(),
                        "L" => m.max_level = v.parse().map_err(|_| bad(n, "bad L"))?,
                        "N" => m.fine_count = v.parse().map_err(|_| bad(n, "bad N"))?,
                        "comparison_level" => m.comparison_level = v.parse().map_err(|_| bad(n, "bad level"))?,
                        "errors" => m.error_source = v.to_string(),
                        "wall_clock_s" => m.wall_clock = num()?,
                        "uniform_wall_clock_s" => {
                            let x = num()?;
                            m.uniform_wall_clock = if x.is_nan() { None } else { Some(x) };
                        }
                        "dt" => m.dt = num()?,
                        "steps" => m.steps = v.parse().map_err(|_| bad(n, "bad steps"))?,
                        "max_abs_v" => m.max_abs_v = num()?,
                        "max_compatibility_defect" => m.max_compatibility_defect = num()?,
                        _ => {}
                    }
                }
                continue;
            }
            let f: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(n, "non-numeric field"))?;
            if f.len() != 9 {
                return Err(bad(n, &format!("expected 9 fields, found {}", f.len())));
            }
            m.rows.push(SnapshotMetrics {
                time: f[0],
                leaf_count: f[1] as usize,
                eta: f[2],
                err_v: ErrorNorms { l1: f[3], l2: f[4], linf: f[5] },
                err_ue: ErrorNorms { l1: f[6], l2: f[7], linf: f[8] },
            });
        }
        if m.mode.is_empty() {
            return Err(Error::Harness("metrics file lacks its header".into()));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }
}

/// Orientation of a thresholded region from its area-weighted second moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisFit {
    /// Angle of the major axis in `(−π/2, π/2]`.
    pub angle: f64,
    /// Major over minor eigenvalue of the covariance.
    pub elongation: f64,
    pub area: f64,
}

/// Principal axis of `{v > threshold}`. `cells` holds `(x, y, area, v)`.
pub fn principal_axis(cells: impl IntoIterator<Item = (f64, f64, f64, f64)>, threshold: f64) -> Option<AxisFit> {
    let pts: Vec<_> = cells.into_iter().filter(|c| c.3 > threshold).collect();
    let area: f64 = pts.iter().map(|c| c.2).sum();
    if pts.len() < 3 || area <= 0.0 {
        return None;
    }
    let mx = pts.iter().map(|c| c.2 * c.0).sum::<f64>() / area;
    let my = pts.iter().map(|c| c.2 * c.1).sum::<f64>() / area;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y, a, _) in &pts {
        sxx += a * (x - mx) * (x - mx);
        sxy += a * (x - mx) * (y - my);
        syy += a * (y - my) * (y - my);
    }
    let mut angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    if angle <= -std::f64::consts::FRAC_PI_2 {
        angle += std::f64::consts::PI;
    }
    let tr = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy).sqrt();
    let (big, small) = (tr + disc, tr - disc);
    Some(AxisFit { angle, elongation: if small > 0.0 { big / small } else { f64::INFINITY }, area })
}

/// Smallest angle between two undirected axes, in `[0, π/2]`.
pub fn axis_difference(a: f64, b: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let d = (a - b).rem_euclid(pi);
    d.min(pi - d)
}
