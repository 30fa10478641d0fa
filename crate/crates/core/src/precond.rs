//! Sobolev preconditioning: the H1 gradient is the solution of
//! `G - ell^2 G'' = L2 gradient` on `[0, T]` with `G' = 0` at both ends.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::TridiagonalSystem;
use crate::functional::RawGradient;
use crate::grid::TimeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H1Gradient {
    pub grad_s: Vec<f64>,
    pub grad_g: Vec<f64>,
    pub ell_s: f64,
    pub ell_g: f64,
}

/// Solves the Neumann Helmholtz problem by central differences with ghost
/// nodes mirrored across both ends. The trapezoid mean is split off first
/// so constants pass through without roundoff.
pub fn helmholtz_neumann(rhs: &[f64], ell: f64, tau: f64) -> Result<Vec<f64>> {
    if !(ell >= 0.0) {
        return Err(Error::InvalidConfig(format!("length scale must be >= 0, got {ell}")));
    }
    if ell == 0.0 {
        return Ok(rhs.to_vec());
    }
    let n = rhs.len();
    if n < 2 {
        return Err(Error::Empty("gradient samples"));
    }
    let r = ell * ell / (tau * tau);
    let mut sys = TridiagonalSystem::zeros(n);
    for i in 0..n {
        sys.main[i] = 1.0 + 2.0 * r;
        if i > 0 {
            sys.sub[i] = -r;
        }
        if i + 1 < n {
            sys.sup[i] = -r;
        }
    }
    sys.sup[0] = -2.0 * r;
    sys.sub[n - 1] = -2.0 * r;
    let mean = rhs.iter().sum::<f64>() - 0.5 * (rhs[0] + rhs[n - 1]);
    let mean = mean / (n - 1) as f64;
    sys.rhs = rhs.iter().map(|v| v - mean).collect();
    Ok(sys.solve(0)?.into_iter().map(|v| v + mean).collect())
}

/// Condition imposed on the smoothed s-gradient at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartCondition {
    /// `G'(0) = 0`, then `G(0)` is reset to zero.
    #[default]
    Neumann,
    /// `G(0) = 0` inside the solve, so the direction has no jump at `t = 0`.
    Pinned,
}

/// Helmholtz solve with `G(0) = 0` and `G'(T) = 0`.
pub fn helmholtz_pinned(rhs: &[f64], ell: f64, tau: f64) -> Result<Vec<f64>> {
    if !(ell >= 0.0) {
        return Err(Error::InvalidConfig(format!("length scale must be >= 0, got {ell}")));
    }
    let n = rhs.len();
    if n < 2 {
        return Err(Error::Empty("gradient samples"));
    }
    let mut out = rhs.to_vec();
    out[0] = 0.0;
    if ell == 0.0 {
        return Ok(out);
    }
    let r = ell * ell / (tau * tau);
    let mut sys = TridiagonalSystem::zeros(n - 1);
    for i in 0..n - 1 {
        sys.main[i] = 1.0 + 2.0 * r;
        if i > 0 {
            sys.sub[i] = -r;
        }
        if i + 2 < n {
            sys.sup[i] = -r;
        }
    }
    sys.sub[n - 2] = if n > 2 { -2.0 * r } else { 0.0 };
    sys.rhs = rhs[1..].to_vec();
    let inner = sys.solve(0)?;
    out[1..].copy_from_slice(&inner);
    Ok(out)
}

/// Lifts the L2 gradient to H1. The `delta_T` part of the s-gradient enters
/// as `dirac_weight / tau` at the last node; `grad_s[0]` stays zero.
pub fn smooth_gradient(raw: &RawGradient, ell_s: f64, ell_g: f64, tg: &TimeGrid) -> Result<H1Gradient> {
    smooth_gradient_with(raw, ell_s, ell_g, tg, StartCondition::Neumann)
}

/// [`smooth_gradient`] with a choice of condition for `s` at `t = 0`.
pub fn smooth_gradient_with(
    raw: &RawGradient,
    ell_s: f64,
    ell_g: f64,
    tg: &TimeGrid,
    start: StartCondition,
) -> Result<H1Gradient> {
    let len = tg.nodes().len();
    if raw.grad_s.len() != len || raw.grad_g.len() != len {
        return Err(Error::GridMismatch(format!(
            "gradient has {} samples, time grid has {len} nodes",
            raw.grad_s.len()
        )));
    }
    let tau = tg.tau();
    let rhs_s = raw.s_with_dirac(tau);
    let mut grad_s = match start {
        StartCondition::Neumann => helmholtz_neumann(&rhs_s, ell_s, tau)?,
        StartCondition::Pinned => helmholtz_pinned(&rhs_s, ell_s, tau)?,
    };
    grad_s[0] = 0.0;
    let grad_g = helmholtz_neumann(&raw.grad_g, ell_g, tau)?;
    Ok(H1Gradient {
        grad_s,
        grad_g,
        ell_s,
        ell_g,
    })
}

/// Writes `t, raw_s, raw_g, h1_s, h1_g`; `raw_s` includes the Dirac spike.
pub fn write_comparison_csv(path: &Path, tg: &TimeGrid, raw: &RawGradient, h1: &H1Gradient) -> Result<()> {
    let raw_s = raw.s_with_dirac(tg.tau());
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["t", "raw_s", "raw_g", "h1_s", "h1_g"])?;
    for (k, &t) in tg.nodes().iter().enumerate() {
        wtr.write_record(&[
            format!("{t:e}"),
            format!("{:e}", raw_s[k]),
            format!("{:e}", raw.grad_g[k]),
            format!("{:e}", h1.grad_s[k]),
            format!("{:e}", h1.grad_g[k]),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
