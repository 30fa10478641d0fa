//! Cost functional, its L2 gradient and boundary trace extraction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint, AdjointField};
use crate::error::{Error, Result};
use crate::forward::{extend_reflect, solve_forward, MeshField, QuadraticBoundary, StateField};
use crate::grid::{GridConfig, TimeGrid};
use crate::models::{BenchmarkModel, Measurements};

/// Free boundary and flux sampled on the time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub s: Vec<f64>,
    pub g: Vec<f64>,
}

impl Control {
    pub fn new(s: Vec<f64>, g: Vec<f64>) -> Self {
        Self { s, g }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// Weights of the final-profile, boundary-temperature and final-position terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            beta0: 1.0,
            beta1: 1.0,
            beta2: 1.0,
        }
    }
}

/// Tikhonov term `beta * ||s - centroid||^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub beta: f64,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub j_final: f64,
    pub j_boundary: f64,
    pub j_position: f64,
    pub j_reg: f64,
    pub total: f64,
}

/// L2 gradient with the `delta_T` coefficient of the s-part kept apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawGradient {
    pub grad_s: Vec<f64>,
    pub grad_g: Vec<f64>,
    pub dirac_weight: f64,
}

impl RawGradient {
    /// The s-gradient with `delta_T` realized as `dirac_weight / tau` at node n.
    pub fn s_with_dirac(&self, tau: f64) -> Vec<f64> {
        let mut d = self.grad_s.clone();
        let n = d.len() - 1;
        d[n] += self.dirac_weight / tau;
        d
    }

    /// Pairing `<grad, dv>` of the full derivative with a perturbation.
    pub fn pair(&self, tg: &TimeGrid, ds: &[f64], dg: &[f64]) -> f64 {
        let n = ds.len() - 1;
        tg.dot(&self.grad_s, ds) + self.dirac_weight * ds[n] + tg.dot(&self.grad_g, dg)
    }

    pub fn write_csv(&self, path: &Path, tg: &TimeGrid) -> Result<()> {
        use std::io::Write;
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "# dirac_weight={:e}", self.dirac_weight)?;
        let mut wtr = csv::Writer::from_writer(file);
        wtr.write_record(["t", "grad_s", "grad_g"])?;
        for (k, &t) in tg.nodes().iter().enumerate() {
            wtr.write_record(&[
                format!("{t:e}"),
                format!("{:e}", self.grad_s[k]),
                format!("{:e}", self.grad_g[k]),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let first = text.lines().next().unwrap_or_default();
        let dirac_weight = first
            .strip_prefix("# dirac_weight=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::InvalidConfig(format!("{}: missing dirac_weight header", path.display())))?;
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let (mut grad_s, mut grad_g) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |j: usize| -> Result<f64> {
                rec.get(j)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::InvalidConfig(format!("{}: bad row", path.display())))
            };
            grad_s.push(parse(1)?);
            grad_g.push(parse(2)?);
        }
        Ok(Self {
            grad_s,
            grad_g,
            dirac_weight,
        })
    }
}

fn check_levels(u: &MeshField, v: &Control, meas: &Measurements) -> Result<()> {
    let levels = u.time().nodes().len();
    if v.s.len() != levels || v.g.len() != levels {
        return Err(Error::GridMismatch(format!(
            "control has {} samples, field has {levels} levels",
            v.s.len()
        )));
    }
    if meas.mu.len() != levels {
        return Err(Error::MissingMeasurements(format!(
            "mu has {} samples, expected {levels}",
            meas.mu.len()
        )));
    }
    if meas.w.is_empty() {
        return Err(Error::MissingMeasurements("final-time profile is empty".into()));
    }
    Ok(())
}

pub fn evaluate_cost(
    u: &StateField,
    v: &Control,
    meas: &Measurements,
    weights: &Weights,
    reg: Option<&Regularization>,
) -> Result<CostBreakdown> {
    check_levels(u, v, meas)?;
    let tg = u.time();
    let sg = u.space();
    let n = tg.n();

    let last = u.level(n);
    let err: Vec<f64> = sg
        .active_nodes(n)
        .iter()
        .zip(last)
        .map(|(&x, &val)| val - meas.w_at(x))
        .collect();
    let j_final = weights.beta0
        * (0..err.len() - 1)
            .map(|i| 0.5 * sg.h(i) * (err[i] * err[i] + err[i + 1] * err[i + 1]))
            .sum::<f64>();

    let j_boundary =
        weights.beta1 * tg.tau() * (1..=n).map(|k| (u.boundary_value(k) - meas.mu[k]).powi(2)).sum::<f64>();

    let j_position = weights.beta2 * (v.s[n] - meas.s_star).powi(2);

    let j_reg = match reg {
        Some(r) => regularization_cost(tg, &v.s, r)?,
        None => 0.0,
    };
    Ok(CostBreakdown {
        j_final,
        j_boundary,
        j_position,
        j_reg,
        total: j_final + j_boundary + j_position + j_reg,
    })
}

/// `beta * tau * sum_k (s_k - centroid_k)^2`.
pub fn regularization_cost(tg: &TimeGrid, s: &[f64], reg: &Regularization) -> Result<f64> {
    if reg.centroid.len() != s.len() {
        return Err(Error::GridMismatch(format!(
            "centroid has {} samples, control has {}",
            reg.centroid.len(),
            s.len()
        )));
    }
    let sum: f64 = s.iter().zip(&reg.centroid).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(reg.beta * tg.tau() * sum)
}

/// Derivative `2 beta (s - centroid)` of the Tikhonov term.
pub fn regularization_gradient(s: &[f64], reg: &Regularization) -> Vec<f64> {
    s.iter()
        .zip(&reg.centroid)
        .map(|(a, b)| 2.0 * reg.beta * (a - b))
        .collect()
}

/// Quantities extracted at the free boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceQuantity {
    Value,
    Dx,
    /// `(a w_x)_x`
    FluxDx,
    /// Backward difference in time at the fixed boundary index.
    Dt,
}

/// Derivative at `x[2]` of the quadratic through three points.
fn one_sided_first(x: [f64; 3], v: [f64; 3]) -> f64 {
    let d12 = (v[2] - v[1]) / (x[2] - x[1]);
    let d01 = (v[1] - v[0]) / (x[1] - x[0]);
    let dd = (d12 - d01) / (x[2] - x[0]);
    d12 + dd * (x[2] - x[1])
}

/// Second divided difference times two.
fn second_difference(x: [f64; 3], v: [f64; 3]) -> f64 {
    let d01 = (v[1] - v[0]) / (x[1] - x[0]);
    let d12 = (v[2] - v[1]) / (x[2] - x[1]);
    2.0 * (d12 - d01) / (x[2] - x[0])
}

/// Finite-difference trace of `field` at the boundary node of level `k`.
pub fn boundary_trace(field: &MeshField, k: usize, quantity: TraceQuantity, model: &BenchmarkModel) -> Result<f64> {
    let m = field.boundary_index(k);
    if m < 2 {
        return Err(Error::InsufficientNodes {
            level: k,
            needed: 3,
            found: m + 1,
        });
    }
    let sg = field.space();
    let lv = field.level(k);
    let x = [sg.x(m - 2), sg.x(m - 1), sg.x(m)];
    let vals = [lv[m - 2], lv[m - 1], lv[m]];
    let t = field.time().t(k);
    match quantity {
        TraceQuantity::Value => Ok(vals[2]),
        TraceQuantity::Dx => Ok(one_sided_first(x, vals)),
        TraceQuantity::FluxDx => {
            let a = (model.a)(x[2], t);
            let d = 1e-6 * (1.0 + x[2].abs());
            let a_x = ((model.a)(x[2] + d, t) - (model.a)(x[2] - d, t)) / (2.0 * d);
            Ok(a * second_difference(x, vals) + a_x * one_sided_first(x, vals))
        }
        TraceQuantity::Dt => {
            let tau = field.time().tau();
            let n = field.time().n();
            let at = |j: usize| -> Result<f64> {
                if m < field.level(j).len() {
                    Ok(field.level(j)[m])
                } else {
                    extend_reflect(sg.active_nodes(j), field.level(j), x[2], sg.x_max())
                }
            };
            if k == 0 {
                // only the forward difference is available at t = 0
                if n == 0 {
                    return Err(Error::Empty("time levels"));
                }
                Ok((at(1)? - vals[2]) / tau)
            } else {
                Ok((vals[2] - at(k - 1)?) / tau)
            }
        }
    }
}

/// How the boundary traces inside the s-gradient are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceScheme {
    /// Boundary conditions for `u_x`, `psi_x`, the state equation for
    /// `(a u_x)_x`, and time derivatives along the moving boundary.
    #[default]
    Conditions,
    /// One-sided difference stencils at the boundary node.
    Stencil,
}

/// Central, or one-sided at the ends, difference of a per-level sequence.
fn along_boundary_rate(seq: &[f64], k: usize, tau: f64) -> f64 {
    let n = seq.len() - 1;
    if k == 0 {
        (seq[1] - seq[0]) / tau
    } else if k == n {
        (seq[n] - seq[n - 1]) / tau
    } else {
        (seq[k + 1] - seq[k - 1]) / (2.0 * tau)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn gradient_l2(
    u: &StateField,
    psi: &AdjointField,
    v: &Control,
    model: &BenchmarkModel,
    meas: &Measurements,
    weights: &Weights,
    reg: Option<&Regularization>,
    scheme: TraceScheme,
) -> Result<RawGradient> {
    check_levels(u, v, meas)?;
    if psi.space() != u.space() || psi.time() != u.time() {
        return Err(Error::GridMismatch("adjoint and state live on different grids".into()));
    }
    let tg = u.time();
    let tau = tg.tau();
    let n = tg.n();
    let boundary = QuadraticBoundary::new(&v.s, tau);
    let u_trace = u.boundary_trace();
    let psi_trace = psi.boundary_trace();

    // the level-k multiplier belongs to [t_{k-1}, t_k]; nodal values average
    // the two neighbouring steps, the end nodes see one
    let psi0: Vec<f64> = (0..n).map(|k| psi.level(k)[0]).collect();
    let grad_g: Vec<f64> = (0..=n)
        .map(|k| match k {
            0 => -psi0[0],
            k if k == n => -psi0[n - 1],
            k => -0.5 * (psi0[k - 1] + psi0[k]),
        })
        .collect();
    let mut grad_s = vec![0.0; n + 1];
    for k in 1..=n {
        let t = tg.t(k);
        let s = v.s[k];
        let s_dot = boundary.node_derivative(k);
        let (a, b, c, f) = ((model.a)(s, t), (model.b)(s, t), (model.c)(s, t), (model.f)(s, t));
        let gamma = (model.gamma)(s, t);
        let resid = u_trace[k] - meas.mu[k];
        let p = psi_trace[k];
        let (u_x, p_x, p_t, flux_x) = match scheme {
            TraceScheme::Conditions => {
                let u_x = ((model.chi)(s, t) - gamma * s_dot) / a;
                let p_x = ((b + s_dot) * p + 2.0 * weights.beta1 * resid) / a;
                let p_t = along_boundary_rate(&psi_trace, k, tau) - p_x * s_dot;
                let u_t = along_boundary_rate(&u_trace, k, tau) - u_x * s_dot;
                let flux_x = f - b * u_x - c * u_trace[k] + u_t;
                (u_x, p_x, p_t, flux_x)
            }
            TraceScheme::Stencil => (
                boundary_trace(u, k, TraceQuantity::Dx, model)?,
                boundary_trace(psi, k, TraceQuantity::Dx, model)?,
                boundary_trace(psi, k, TraceQuantity::Dt, model)?,
                boundary_trace(u, k, TraceQuantity::FluxDx, model)?,
            ),
        };
        grad_s[k] = 2.0 * weights.beta1 * resid * u_x
            + p * ((model.chi_x)(s, t) + (model.gamma_t)(s, t))
            + gamma * p_x * s_dot
            + gamma * p_t
            - p * flux_x;
    }
    if let Some(r) = reg {
        if r.centroid.len() != n + 1 {
            return Err(Error::GridMismatch("centroid length".into()));
        }
        for (gs, d) in grad_s.iter_mut().zip(regularization_gradient(&v.s, r)) {
            *gs += d;
        }
    }
    grad_s[0] = 0.0;

    let s_n = v.s[n];
    let t_final = tg.t_final();
    let final_mismatch = u_trace[n] - meas.w_at(s_n);
    let dirac_weight = weights.beta0 * final_mismatch * final_mismatch + 2.0 * weights.beta2 * (s_n - meas.s_star)
        - (model.gamma)(s_n, t_final) * psi_trace[n];
    Ok(RawGradient {
        grad_s,
        grad_g,
        dirac_weight,
    })
}

/// Everything needed to evaluate `J` and its gradient for a control.
#[derive(Debug, Clone)]
pub struct InverseProblem {
    pub model: BenchmarkModel,
    pub cfg: GridConfig,
    pub tg: TimeGrid,
    pub meas: Measurements,
    pub weights: Weights,
    pub reg: Option<Regularization>,
    pub scheme: TraceScheme,
}

/// Cost, gradient and the fields they were computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: CostBreakdown,
    pub gradient: RawGradient,
    pub state: StateField,
    pub adjoint: AdjointField,
}

impl InverseProblem {
    pub fn new(model: BenchmarkModel, cfg: GridConfig, meas: Measurements) -> Result<Self> {
        cfg.validate()?;
        let tg = cfg.time_grid()?;
        meas.validate(&tg)?;
        Ok(Self {
            model,
            cfg,
            tg,
            meas,
            weights: Weights::default(),
            reg: None,
            scheme: TraceScheme::default(),
        })
    }

    pub fn state(&self, v: &Control) -> Result<StateField> {
        solve_forward(v, &self.model, &self.tg, &self.cfg)
    }

    pub fn cost(&self, v: &Control) -> Result<CostBreakdown> {
        let u = self.state(v)?;
        evaluate_cost(&u, v, &self.meas, &self.weights, self.reg.as_ref())
    }

    pub fn evaluate(&self, v: &Control) -> Result<Evaluation> {
        let state = self.state(v)?;
        let cost = evaluate_cost(&state, v, &self.meas, &self.weights, self.reg.as_ref())?;
        let adjoint = solve_adjoint(&state, v, &self.meas, &self.weights, &self.model)?;
        let gradient = gradient_l2(
            &state,
            &adjoint,
            v,
            &self.model,
            &self.meas,
            &self.weights,
            self.reg.as_ref(),
            self.scheme,
        )?;
        Ok(Evaluation {
            cost,
            gradient,
            state,
            adjoint,
        })
    }
}

/// A differentiable cost on controls.
pub trait Objective: Sync {
    fn time_grid(&self) -> &TimeGrid;

    fn cost(&self, v: &Control) -> Result<f64>;

    /// Cost and gradient at `v`.
    fn cost_and_gradient(&self, v: &Control) -> Result<(f64, RawGradient)>;

    /// Cost terms and gradient; objectives without terms report the total only.
    fn evaluate_terms(&self, v: &Control) -> Result<(CostBreakdown, RawGradient)> {
        let (total, grad) = self.cost_and_gradient(v)?;
        Ok((
            CostBreakdown {
                total,
                ..CostBreakdown::default()
            },
            grad,
        ))
    }

    /// Resolution `(n, h_x)` reported alongside diagnostics.
    fn resolution(&self) -> (usize, f64) {
        (self.time_grid().n(), f64::NAN)
    }
}

impl Objective for InverseProblem {
    fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }

    fn cost(&self, v: &Control) -> Result<f64> {
        Ok(InverseProblem::cost(self, v)?.total)
    }

    fn cost_and_gradient(&self, v: &Control) -> Result<(f64, RawGradient)> {
        let e = self.evaluate(v)?;
        Ok((e.cost.total, e.gradient))
    }

    fn evaluate_terms(&self, v: &Control) -> Result<(CostBreakdown, RawGradient)> {
        let e = self.evaluate(v)?;
        Ok((e.cost, e.gradient))
    }

    fn resolution(&self) -> (usize, f64) {
        (self.cfg.n, self.cfg.h_x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::MeshField;
    use crate::grid::SpaceGrid;
    use crate::models::{model1, synthesize_measurements, SynthesisMode};

    fn field_from(f: impl Fn(f64, f64) -> f64, s: &[f64], cfg: &GridConfig) -> MeshField {
        let tg = cfg.time_grid().unwrap();
        let sg = SpaceGrid::build(s, cfg).unwrap();
        let levels = (0..=tg.n())
            .map(|k| sg.active_nodes(k).iter().map(|&x| f(x, tg.t(k))).collect())
            .collect();
        MeshField::new(tg, sg, levels).unwrap()
    }

    #[test]
    fn traces_are_exact_for_low_degree() {
        let model = model1();
        let cfg = GridConfig::new(10, 0.05);
        let s = vec![1.0; 11];
        let lin = field_from(|x, _| 3.0 * x - 1.0, &s, &cfg);
        assert!((boundary_trace(&lin, 4, TraceQuantity::Dx, &model).unwrap() - 3.0).abs() < 1e-12);
        let quad = field_from(|x, _| 2.0 * x * x - x, &s, &cfg);
        let q2 = boundary_trace(&quad, 4, TraceQuantity::FluxDx, &model).unwrap();
        assert!((q2 - 4.0).abs() < 1e-9, "{q2}");
        assert!((boundary_trace(&quad, 4, TraceQuantity::Dx, &model).unwrap() - 3.0).abs() < 1e-10);
        let moving = field_from(|x, t| x + 2.0 * t, &s, &cfg);
        let dt = boundary_trace(&moving, 5, TraceQuantity::Dt, &model).unwrap();
        assert!((dt - 2.0).abs() < 1e-10);
        let dt0 = boundary_trace(&moving, 0, TraceQuantity::Dt, &model).unwrap();
        assert!((dt0 - 2.0).abs() < 1e-10);
    }

    #[test]
    fn model1_flux_trace() {
        let model = model1();
        let cfg = GridConfig::new(100, 0.002);
        let tg = cfg.time_grid().unwrap();
        let s = tg.sample(model.s_true);
        let u = field_from(model.u_true, &s, &cfg);
        let ux = boundary_trace(&u, 50, TraceQuantity::Dx, &model).unwrap();
        let exact = -(1.0 + 0.5f64.exp());
        assert!((ux - exact).abs() < 1e-2, "{ux} vs {exact}");
    }

    #[test]
    fn too_few_nodes_for_trace() {
        let cfg = GridConfig::new(4, 1.5);
        let u = field_from(|x, _| x, &[1.0; 5], &cfg);
        assert!(matches!(
            boundary_trace(&u, 1, TraceQuantity::Dx, &model1()),
            Err(Error::InsufficientNodes { .. })
        ));
    }

    #[test]
    fn exact_data_cost_is_zero() {
        let model = model1();
        let cfg = GridConfig::new(20, 0.05);
        let meas = synthesize_measurements(&model, &cfg, SynthesisMode::Solver).unwrap();
        let p = InverseProblem::new(model, cfg, meas).unwrap();
        let v = model.true_control(&p.tg);
        let e = p.evaluate(&v).unwrap();
        assert_eq!(e.cost.total, 0.0);
        assert!(e.gradient.grad_s.iter().chain(&e.gradient.grad_g).all(|&x| x == 0.0));
        assert_eq!(e.gradient.dirac_weight, 0.0);
    }

    #[test]
    fn position_term_arithmetic() {
        let model = model1();
        let cfg = GridConfig::new(20, 0.05);
        let mut meas = synthesize_measurements(&model, &cfg, SynthesisMode::Solver).unwrap();
        meas.s_star -= 0.1;
        let p = InverseProblem::new(model, cfg, meas).unwrap();
        let c = p.cost(&model.true_control(&p.tg)).unwrap();
        assert!((c.j_position - 0.01).abs() < 1e-12);
        assert_eq!(c.total, c.j_final + c.j_boundary + c.j_position + c.j_reg);
    }

    #[test]
    fn analytic_floor_decreases() {
        let model = model1();
        let floors: Vec<f64> = [(25, 0.04), (100, 0.02), (400, 0.01)]
            .iter()
            .map(|&(n, h)| {
                let cfg = GridConfig::new(n, h);
                let meas = synthesize_measurements(&model, &cfg, SynthesisMode::Analytic).unwrap();
                let p = InverseProblem::new(model, cfg, meas).unwrap();
                p.cost(&model.true_control(&p.tg)).unwrap().total
            })
            .collect();
        assert!(floors[1] < floors[0] && floors[2] < floors[1], "{floors:?}");
    }

    #[test]
    fn regularization_gradient_alone() {
        let model = model1();
        let cfg = GridConfig::new(20, 0.05);
        let meas = synthesize_measurements(&model, &cfg, SynthesisMode::Solver).unwrap();
        let mut p = InverseProblem::new(model, cfg, meas).unwrap();
        let v = model.true_control(&p.tg);
        let centroid: Vec<f64> = v.s.iter().map(|s| s - 0.5).collect();
        p.reg = Some(Regularization { beta: 1.0, centroid });
        let e = p.evaluate(&v).unwrap();
        assert_eq!(e.gradient.grad_s[0], 0.0);
        for &gs in &e.gradient.grad_s[1..] {
            assert!((gs - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_csv_roundtrip() {
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let g = RawGradient {
            grad_s: vec![0.0, 1.0, -2.0, 3.5, 1e-9],
            grad_g: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            dirac_weight: -0.25,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grad.csv");
        g.write_csv(&path, &tg).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("# dirac_weight="));
        assert_eq!(RawGradient::read_csv(&path).unwrap(), g);
    }
}
