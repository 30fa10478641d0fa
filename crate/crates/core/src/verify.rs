//! Gradient checks: the kappa ratio of a finite-difference directional
//! derivative to the adjoint pairing, and a nodal finite-difference oracle.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{Control, Objective, RawGradient};
use crate::grid::TimeGrid;

/// Which part of the gradient a perturbation probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    /// Perturbation of `s` vanishing at both ends.
    #[serde(rename = "s")]
    S,
    /// Perturbation of `s` vanishing at `t = 0` only, so the `delta_T` term counts.
    #[serde(rename = "s-terminal")]
    STerminal,
    #[serde(rename = "g")]
    G,
}

impl Component {
    pub fn label(self) -> &'static str {
        match self {
            Component::S => "s",
            Component::STerminal => "s-terminal",
            Component::G => "g",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "s" => Ok(Component::S),
            "s-terminal" => Ok(Component::STerminal),
            "g" => Ok(Component::G),
            other => Err(Error::InvalidConfig(format!("unknown component {other:?}"))),
        }
    }
}

/// Default smooth perturbation for `component`.
pub fn perturbation(component: Component, tg: &TimeGrid) -> Control {
    let len = tg.nodes().len();
    let t_final = tg.t_final();
    let pi = std::f64::consts::PI;
    match component {
        Component::S => Control::new(tg.sample(|t| (pi * t / t_final).sin()), vec![0.0; len]),
        Component::STerminal => Control::new(tg.sample(|t| 0.5 * (1.0 - (pi * t / t_final).cos())), vec![0.0; len]),
        Component::G => Control::new(
            vec![0.0; len],
            tg.sample(|t| 0.5 * (1.0 + (pi * t / t_final).cos()) + 0.5),
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaRecord {
    pub epsilon: f64,
    /// `NaN` when the pairing vanishes.
    pub kappa: f64,
    pub finite_difference: f64,
    pub pairing: f64,
    pub component: Component,
    pub n: usize,
    pub h_x: f64,
    pub degenerate: bool,
}

impl KappaRecord {
    pub fn abs_kappa_minus_1(&self) -> f64 {
        (self.kappa - 1.0).abs()
    }
}

fn shifted(v: &Control, dv: &Control, eps: f64) -> Control {
    Control::new(
        v.s.iter().zip(&dv.s).map(|(a, b)| a + eps * b).collect(),
        v.g.iter().zip(&dv.g).map(|(a, b)| a + eps * b).collect(),
    )
}

fn record(
    obj: &impl Objective,
    base: f64,
    grad: &RawGradient,
    v: &Control,
    dv: &Control,
    eps: f64,
    component: Component,
) -> Result<KappaRecord> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {eps}")));
    }
    let pairing = grad.pair(obj.time_grid(), &dv.s, &dv.g);
    let fd = (obj.cost(&shifted(v, dv, eps))? - base) / eps;
    let (n, h_x) = obj.resolution();
    let degenerate = pairing == 0.0 || !pairing.is_finite();
    Ok(KappaRecord {
        epsilon: eps,
        kappa: if degenerate { f64::NAN } else { fd / pairing },
        finite_difference: fd,
        pairing,
        component,
        n,
        h_x,
        degenerate,
    })
}

/// `kappa(eps) = [J(v + eps dv) - J(v)] / eps / <J'(v), dv>`.
pub fn kappa(obj: &impl Objective, v: &Control, dv: &Control, eps: f64, component: Component) -> Result<KappaRecord> {
    let (base, grad) = obj.cost_and_gradient(v)?;
    record(obj, base, &grad, v, dv, eps, component)
}

/// Kappa over a list of `eps`, sharing the base evaluation.
pub fn kappa_sweep(
    obj: &impl Objective,
    v: &Control,
    dv: &Control,
    epsilons: &[f64],
    component: Component,
) -> Result<Vec<KappaRecord>> {
    let (base, grad) = obj.cost_and_gradient(v)?;
    epsilons
        .par_iter()
        .map(|&eps| record(obj, base, &grad, v, dv, eps, component))
        .collect()
}

/// `count` values spaced evenly in log between `lo` and `hi`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Median of `|kappa - 1|` over non-degenerate records with `lo <= eps <= hi`.
pub fn median_deviation(records: &[KappaRecord], lo: f64, hi: f64) -> Option<f64> {
    let mut d: Vec<f64> = records
        .iter()
        .filter(|r| !r.degenerate && r.epsilon >= lo * (1.0 - 1e-9) && r.epsilon <= hi * (1.0 + 1e-9))
        .map(|r| r.abs_kappa_minus_1())
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    Some(if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    })
}

pub fn write_kappa_csv(path: &Path, records: &[KappaRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["epsilon", "kappa", "abs_kappa_minus_1", "component", "n", "h_x"])?;
    for r in records {
        wtr.write_record(&[
            format!("{:e}", r.epsilon),
            format!("{:e}", r.kappa),
            format!("{:e}", r.abs_kappa_minus_1()),
            r.component.label().to_string(),
            r.n.to_string(),
            format!("{:e}", r.h_x),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Central difference of `J` with respect to one nodal value of `s` or `g`.
/// Falls back to a one-sided difference when a probe is infeasible.
pub fn fd_gradient(obj: &impl Objective, v: &Control, component: Component, index: usize, eps: f64) -> Result<f64> {
    let len = v.len();
    if index >= len {
        return Err(Error::InvalidConfig(format!("node {index} out of range")));
    }
    let mut dv = Control::new(vec![0.0; len], vec![0.0; len]);
    match component {
        Component::S | Component::STerminal => dv.s[index] = 1.0,
        Component::G => dv.g[index] = 1.0,
    }
    let plus = obj.cost(&shifted(v, &dv, eps));
    let minus = obj.cost(&shifted(v, &dv, -eps));
    match (plus, minus) {
        (Ok(p), Ok(m)) => Ok((p - m) / (2.0 * eps)),
        (Ok(p), Err(_)) => Ok((p - obj.cost(v)?) / eps),
        (Err(_), Ok(m)) => Ok((obj.cost(v)? - m) / eps),
        (Err(e), Err(_)) => Err(e),
    }
}
