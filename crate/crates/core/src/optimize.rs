//! Projected steepest descent on `(s, g)` with preconditioned directions,
//! a bracketing golden-section line search and a relative-decrease stop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{Control, CostBreakdown, InverseProblem, Objective, Regularization, Weights};
use crate::grid::{GridConfig, TimeGrid};
use crate::models::{BenchmarkModel, Measurements};
use crate::precond::{smooth_gradient_with, StartCondition};

/// Order in which the two controls are updated when both are unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    Simultaneous,
    /// Blocks of `N` iterations on `s`, then `N` on `g`, and so on.
    Interchanging(usize),
}

impl Strategy {
    /// Which of `(s, g)` iteration `k >= 1` updates.
    pub fn schedule(self, k: usize) -> (bool, bool) {
        match self {
            Strategy::Simultaneous => (true, true),
            Strategy::Interchanging(block) => {
                let s_turn = ((k.max(1) - 1) / block.max(1)).is_multiple_of(2);
                (s_turn, !s_turn)
            }
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Simultaneous => write!(f, "simultaneous"),
            Strategy::Interchanging(n) => write!(f, "interchanging:{n}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        if text == "simultaneous" {
            return Ok(Strategy::Simultaneous);
        }
        let block = text
            .strip_prefix("interchanging:")
            .or_else(|| text.strip_prefix("interleave:"))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy {text:?}")))?;
        let n: usize = block
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad block length in {text:?}")))?;
        if n == 0 {
            return Err(Error::InvalidConfig("block length must be >= 1".into()));
        }
        Ok(Strategy::Interchanging(n))
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;
    fn try_from(text: String) -> Result<Self> {
        text.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

/// Which controls are unknown; the others stay at their initial values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    S,
    G,
    Both,
}

impl Target {
    pub fn flags(self) -> (bool, bool) {
        match self {
            Target::S => (true, false),
            Target::G => (false, true),
            Target::Both => (true, true),
        }
    }
}

impl FromStr for Target {
    type Err = Error;
    fn from_str(text: &str) -> Result<Self> {
        match text {
            "s" => Ok(Target::S),
            "g" => Ok(Target::G),
            "both" => Ok(Target::Both),
            other => Err(Error::InvalidConfig(format!("unknown target {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineSearchMode {
    /// One step size for both controls.
    #[default]
    Common,
    /// Separate step sizes found by one pass over each control.
    Coordinate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentConfig {
    pub grid: GridConfig,
    pub target: Target,
    pub strategy: Strategy,
    pub use_precond_s: bool,
    pub use_precond_g: bool,
    /// Condition on the smoothed s-direction at `t = 0`.
    pub s_start: StartCondition,
    pub ell_s: f64,
    pub ell_g: f64,
    pub beta_reg: f64,
    pub centroid: Option<Vec<f64>>,
    pub weights: Weights,
    pub tol: f64,
    pub max_iter: usize,
    /// Upper bracket for the step size; `None` means `1e4` times the first probe.
    pub alpha_max: Option<f64>,
    pub line_search: LineSearchMode,
    pub max_evaluations: usize,
    /// Optional stop on `||v_{k+1} - v_k|| / ||v_k||`.
    pub control_tol: Option<f64>,
    /// Keep every `snapshot_every`-th iterate in the trace; 0 keeps none.
    pub snapshot_every: usize,
    /// Retry a stalled preconditioned step along the L2 gradient.
    pub raw_fallback: bool,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            target: Target::Both,
            strategy: Strategy::Simultaneous,
            use_precond_s: true,
            use_precond_g: true,
            s_start: StartCondition::Pinned,
            ell_s: 0.47,
            ell_g: 1e-2,
            beta_reg: 0.0,
            centroid: None,
            weights: Weights::default(),
            tol: 1e-5,
            max_iter: 200,
            alpha_max: None,
            line_search: LineSearchMode::Common,
            max_evaluations: 30,
            control_tol: None,
            snapshot_every: 0,
            raw_fallback: true,
        }
    }
}

impl DescentConfig {
    /// Defaults with the calibrated length scales of `model`.
    pub fn for_model(model: &BenchmarkModel) -> Self {
        let d = model.defaults();
        Self {
            grid: GridConfig {
                t_final: model.t_final,
                ..GridConfig::default()
            },
            ell_s: d.ell_s,
            ell_g: d.ell_g,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if let Strategy::Interchanging(0) = self.strategy {
            return Err(Error::InvalidConfig("block length must be >= 1".into()));
        }
        if !(self.ell_s >= 0.0 && self.ell_g >= 0.0) {
            return Err(Error::InvalidConfig("length scales must be >= 0".into()));
        }
        if !(self.beta_reg >= 0.0) {
            return Err(Error::InvalidConfig("beta_reg must be >= 0".into()));
        }
        if self.beta_reg > 0.0 && self.centroid.is_none() {
            return Err(Error::InvalidConfig("beta_reg > 0 needs a centroid".into()));
        }
        if let Some(a) = self.alpha_max {
            if !(a > 0.0) {
                return Err(Error::InvalidConfig(format!("alpha_max must be positive, got {a}")));
            }
        }
        if self.max_evaluations < 3 {
            return Err(Error::InvalidConfig("line search needs at least 3 evaluations".into()));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        self.grid.delta
    }

    /// The cost functional this configuration minimizes.
    pub fn problem(&self, model: &BenchmarkModel, meas: &Measurements) -> Result<InverseProblem> {
        self.validate()?;
        let mut p = InverseProblem::new(*model, self.grid, meas.clone())?;
        p.weights = self.weights;
        if self.beta_reg > 0.0 {
            let centroid = self.centroid.clone().unwrap_or_default();
            if centroid.len() != p.tg.nodes().len() {
                return Err(Error::GridMismatch(format!(
                    "centroid has {} samples, time grid has {} nodes",
                    centroid.len(),
                    p.tg.nodes().len()
                )));
            }
            p.reg = Some(Regularization {
                beta: self.beta_reg,
                centroid,
            });
        }
        Ok(p)
    }
}

/// Resets `s(0)` to `s0` and clamps `s` from below at `delta`.
pub fn project(v: &Control, s0: f64, delta: f64) -> Control {
    let mut out = v.clone();
    for s in out.s.iter_mut() {
        if !(*s >= delta) {
            *s = delta;
        }
    }
    if let Some(first) = out.s.first_mut() {
        *first = s0;
    }
    out
}

/// `(1 - lambda) truth + lambda regular`, pointwise.
pub fn convex_comb_guess(truth: &[f64], regular: &[f64], lambda: f64) -> Vec<f64> {
    truth
        .iter()
        .zip(regular)
        .map(|(t, r)| (1.0 - lambda) * t + lambda * r)
        .collect()
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;
const GROWTH: f64 = 1.0 + 1.0 / GOLDEN;

/// Minimizes `f` over `(0, alpha_max]` by bracketing from `alpha0` and
/// golden-section refinement, with at most `budget` calls.
///
/// Returns `(alpha, f(alpha), calls)`; `alpha = 0` when no probe beats `f0`.
/// Non-finite values count as `+inf`.
pub fn minimize_step(
    mut f: impl FnMut(f64) -> f64,
    f0: f64,
    alpha0: f64,
    alpha_max: f64,
    budget: usize,
) -> (f64, f64, usize) {
    let mut calls = 0usize;
    let mut best = (0.0, f0);
    let mut eval = |a: f64, best: &mut (f64, f64), calls: &mut usize| {
        *calls += 1;
        let v = f(a);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        if v < best.1 {
            *best = (a, v);
        }
        v
    };

    let first = alpha0.min(alpha_max);
    if !(first > 0.0) || budget == 0 {
        return (0.0, f0, 0);
    }
    let f_first = eval(first, &mut best, &mut calls);
    let (mut lo, mut hi);
    if f_first < f0 {
        lo = 0.0;
        let (mut mid, mut f_mid) = (first, f_first);
        loop {
            if mid >= alpha_max || calls >= budget {
                return (best.0, best.1, calls);
            }
            let next = (mid * GROWTH).min(alpha_max);
            let f_next = eval(next, &mut best, &mut calls);
            if f_next < f_mid {
                lo = mid;
                mid = next;
                f_mid = f_next;
            } else {
                hi = next;
                break;
            }
        }
    } else {
        lo = 0.0;
        hi = first;
        loop {
            if calls >= budget || hi < first * 1e-12 {
                return (best.0, best.1, calls);
            }
            let trial = hi / GROWTH;
            if eval(trial, &mut best, &mut calls) < f0 {
                break;
            }
            hi = trial;
        }
    }

    let budget_left = |calls: usize| calls < budget;
    if !budget_left(calls) {
        return (best.0, best.1, calls);
    }
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut f1 = eval(x1, &mut best, &mut calls);
    if !budget_left(calls) {
        return (best.0, best.1, calls);
    }
    let mut x2 = lo + GOLDEN * (hi - lo);
    let mut f2 = eval(x2, &mut best, &mut calls);
    while budget_left(calls) && hi - lo > 1e-12 * hi {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = eval(x1, &mut best, &mut calls);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = eval(x2, &mut best, &mut calls);
        }
    }
    (best.0, best.1, calls)
}

/// Accepted step sizes and the cost they reach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub alpha_s: f64,
    pub alpha_g: f64,
    pub cost: f64,
    pub evaluations: usize,
}

fn trial(v: &Control, dir: &Control, alpha_s: f64, alpha_g: f64, s0: f64, delta: f64) -> Control {
    let c = Control::new(
        v.s.iter().zip(&dir.s).map(|(a, d)| a - alpha_s * d).collect(),
        v.g.iter().zip(&dir.g).map(|(a, d)| a - alpha_g * d).collect(),
    );
    project(&c, s0, delta)
}

fn first_probe(tg: &TimeGrid, v: &[&[f64]], dir: &[&[f64]]) -> f64 {
    let norm = |parts: &[&[f64]]| parts.iter().map(|p| tg.dot(p, p)).sum::<f64>().sqrt();
    let nv = norm(v);
    0.1 * if nv > 0.0 { nv } else { 1.0 } / norm(dir)
}

fn is_zero(x: &[f64]) -> bool {
    x.iter().all(|&v| v == 0.0)
}

/// Line search along `-dir` from `v`, whose cost is `j0`.
/// Trial controls are projected before evaluation.
pub fn line_search(obj: &impl Objective, v: &Control, dir: &Control, cfg: &DescentConfig, j0: f64) -> Result<Step> {
    if dir.s.iter().chain(&dir.g).any(|d| !d.is_finite()) {
        return Err(Error::InvalidConfig("non-finite search direction".into()));
    }
    let s0 = v.s[0];
    let delta = cfg.delta();
    let tg = obj.time_grid();
    let none = Step {
        alpha_s: 0.0,
        alpha_g: 0.0,
        cost: j0,
        evaluations: 0,
    };
    let (zero_s, zero_g) = (is_zero(&dir.s), is_zero(&dir.g));
    if zero_s && zero_g {
        return Ok(none);
    }
    let cost = |c: Control| obj.cost(&c).unwrap_or(f64::INFINITY);
    match cfg.line_search {
        LineSearchMode::Common => {
            let mut vs: Vec<&[f64]> = Vec::new();
            let mut ds: Vec<&[f64]> = Vec::new();
            if !zero_s {
                vs.push(&v.s);
                ds.push(&dir.s);
            }
            if !zero_g {
                vs.push(&v.g);
                ds.push(&dir.g);
            }
            let alpha0 = first_probe(tg, &vs, &ds);
            let alpha_max = cfg.alpha_max.unwrap_or(1e4 * alpha0);
            debug!("line search: first probe {alpha0:e}, cap {alpha_max:e}");
            let (a, f, calls) = minimize_step(
                |a| cost(trial(v, dir, a, a, s0, delta)),
                j0,
                alpha0,
                alpha_max,
                cfg.max_evaluations,
            );
            Ok(Step {
                alpha_s: a,
                alpha_g: a,
                cost: f,
                evaluations: calls,
            })
        }
        LineSearchMode::Coordinate => {
            let mut step = none;
            if !zero_s {
                let alpha0 = first_probe(tg, &[&v.s], &[&dir.s]);
                let alpha_max = cfg.alpha_max.unwrap_or(1e4 * alpha0);
                let (a, f, calls) = minimize_step(
                    |a| cost(trial(v, dir, a, 0.0, s0, delta)),
                    step.cost,
                    alpha0,
                    alpha_max,
                    cfg.max_evaluations,
                );
                step.alpha_s = a;
                step.cost = f;
                step.evaluations += calls;
            }
            if !zero_g {
                let alpha0 = first_probe(tg, &[&v.g], &[&dir.g]);
                let alpha_max = cfg.alpha_max.unwrap_or(1e4 * alpha0);
                let alpha_s = step.alpha_s;
                let (a, f, calls) = minimize_step(
                    |a| cost(trial(v, dir, alpha_s, a, s0, delta)),
                    step.cost,
                    alpha0,
                    alpha_max,
                    cfg.max_evaluations,
                );
                step.alpha_g = a;
                step.cost = f;
                step.evaluations += calls;
            }
            Ok(step)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    /// `|J_k - J_{k-1}| / J_{k-1} < tol`.
    Converged,
    /// Relative control change below `control_tol`.
    ControlConverged,
    /// The search direction vanished.
    Stationary,
    /// No step size decreased the cost.
    LineSearchFailed,
    MaxIterations,
    /// A solve failed; the trace ends at the last good iterate.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub cost: CostBreakdown,
    pub alpha_s: f64,
    pub alpha_g: f64,
    /// L2 norms of the raw gradient at this iterate.
    pub grad_norm_s: f64,
    pub grad_norm_g: f64,
    pub dirac_weight: f64,
    pub s_error: Option<f64>,
    pub g_error: Option<f64>,
    pub updated_s: bool,
    pub updated_g: bool,
    /// The step followed the L2 gradient after the smoothed one stalled.
    pub raw_step: bool,
    pub evaluations: usize,
    /// Seconds since the start of the run; kept out of serialized output.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub k: usize,
    pub control: Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    /// Record 0 is the initial control.
    pub records: Vec<IterationRecord>,
    pub snapshots: Vec<Snapshot>,
    pub final_control: Control,
    pub status: Status,
}

impl OptimizationTrace {
    pub fn initial_cost(&self) -> f64 {
        self.records[0].cost.total
    }

    pub fn final_cost(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.cost.total)
    }

    pub fn final_record(&self) -> &IterationRecord {
        self.records.last().expect("trace has an initial record")
    }

    /// Number of descent iterations performed.
    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    pub fn wall_time(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.wall_time)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record([
            "k",
            "j_total",
            "j_final",
            "j_boundary",
            "j_position",
            "j_reg",
            "alpha_s",
            "alpha_g",
            "grad_norm_s",
            "grad_norm_g",
            "dirac_weight",
            "s_error",
            "g_error",
            "updated_s",
            "updated_g",
            "raw_step",
            "evaluations",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.records {
            wtr.write_record(&[
                r.k.to_string(),
                format!("{:e}", r.cost.total),
                format!("{:e}", r.cost.j_final),
                format!("{:e}", r.cost.j_boundary),
                format!("{:e}", r.cost.j_position),
                format!("{:e}", r.cost.j_reg),
                format!("{:e}", r.alpha_s),
                format!("{:e}", r.alpha_g),
                format!("{:e}", r.grad_norm_s),
                format!("{:e}", r.grad_norm_g),
                format!("{:e}", r.dirac_weight),
                opt(r.s_error),
                opt(r.g_error),
                u8::from(r.updated_s).to_string(),
                u8::from(r.updated_g).to_string(),
                u8::from(r.raw_step).to_string(),
                r.evaluations.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    /// Writes `t, s, g` of the final control.
    pub fn write_controls_csv(&self, path: &Path, tg: &TimeGrid) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["t", "s", "g"])?;
        for (k, &t) in tg.nodes().iter().enumerate() {
            wtr.write_record(&[
                format!("{t:e}"),
                format!("{:e}", self.final_control.s[k]),
                format!("{:e}", self.final_control.g[k]),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn distance(tg: &TimeGrid, a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    tg.norm(&d)
}

/// Runs the descent for `model` from `v0`, recording errors against the truth.
pub fn descend(
    model: &BenchmarkModel,
    meas: &Measurements,
    v0: &Control,
    cfg: &DescentConfig,
) -> Result<OptimizationTrace> {
    let problem = cfg.problem(model, meas)?;
    let truth = model.true_control(&problem.tg);
    descend_objective(&problem, v0, cfg, Some(&truth))
}

/// The descent loop for any objective over controls.
///
/// Iteration `k` updates the controls chosen by the target and the strategy.
/// A rejected step (no decrease found) ends a simultaneous run; with
/// interchanging blocks the run ends once every unknown control is
/// stationary, i.e. its latest update changed `J` by less than `tol`
/// relatively or could not decrease it.
pub fn descend_objective(
    obj: &impl Objective,
    v0: &Control,
    cfg: &DescentConfig,
    truth: Option<&Control>,
) -> Result<OptimizationTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let tg = obj.time_grid().clone();
    if v0.s.len() != tg.nodes().len() || v0.g.len() != tg.nodes().len() {
        return Err(Error::GridMismatch(format!(
            "initial control has {} samples, time grid has {} nodes",
            v0.s.len(),
            tg.nodes().len()
        )));
    }
    let s0 = v0.s[0];
    let delta = cfg.delta();
    let (target_s, target_g) = cfg.target.flags();
    let interchanging = matches!(cfg.strategy, Strategy::Interchanging(_)) && target_s && target_g;
    let ell_s = if cfg.use_precond_s { cfg.ell_s } else { 0.0 };
    let ell_g = if cfg.use_precond_g { cfg.ell_g } else { 0.0 };

    let mut v = project(v0, s0, delta);
    let (mut terms, mut grad) = obj.evaluate_terms(&v)?;
    let make_record = |k: usize,
                       terms: CostBreakdown,
                       grad: &crate::functional::RawGradient,
                       v: &Control,
                       step: Step,
                       updated: (bool, bool)| IterationRecord {
        k,
        cost: terms,
        alpha_s: step.alpha_s,
        alpha_g: step.alpha_g,
        grad_norm_s: tg.norm(&grad.grad_s),
        grad_norm_g: tg.norm(&grad.grad_g),
        dirac_weight: grad.dirac_weight,
        s_error: truth.map(|t| distance(&tg, &v.s, &t.s)),
        g_error: truth.map(|t| distance(&tg, &v.g, &t.g)),
        updated_s: updated.0,
        updated_g: updated.1,
        raw_step: false,
        evaluations: step.evaluations,
        wall_time: start.elapsed().as_secs_f64(),
    };
    let idle_at = |cost: f64| Step {
        alpha_s: 0.0,
        alpha_g: 0.0,
        cost,
        evaluations: 0,
    };
    let mut trace = OptimizationTrace {
        records: vec![make_record(0, terms, &grad, &v, idle_at(terms.total), (false, false))],
        snapshots: Vec::new(),
        final_control: v.clone(),
        status: Status::MaxIterations,
    };
    if cfg.snapshot_every > 0 {
        trace.snapshots.push(Snapshot {
            k: 0,
            control: v.clone(),
        });
    }
    info!(
        "descent start: J0 = {:e}, target {:?}, strategy {}",
        terms.total, cfg.target, cfg.strategy
    );

    // latest relative change per control; infinite until first updated
    let mut rel_s = if target_s { f64::INFINITY } else { 0.0 };
    let mut rel_g = if target_g { f64::INFINITY } else { 0.0 };
    let (mut rejected_s, mut rejected_g) = (false, false);
    for k in 1..=cfg.max_iter {
        let (mut upd_s, mut upd_g) = (target_s, target_g);
        if interchanging {
            (upd_s, upd_g) = cfg.strategy.schedule(k);
        }
        // a rejected control stays rejected until the other one moves
        if interchanging && ((upd_s && rejected_s) || (upd_g && rejected_g)) {
            trace
                .records
                .push(make_record(k, terms, &grad, &v, idle_at(terms.total), (false, false)));
            continue;
        }
        let h1 = smooth_gradient_with(&grad, ell_s, ell_g, &tg, cfg.s_start)?;
        let len = tg.nodes().len();
        let dir = Control::new(
            if upd_s { h1.grad_s } else { vec![0.0; len] },
            if upd_g { h1.grad_g } else { vec![0.0; len] },
        );
        let mut vanished = is_zero(&dir.s) && is_zero(&dir.g);
        let mut step = line_search(obj, &v, &dir, cfg, terms.total)?;
        let mut dir = dir;
        let mut raw_step = false;
        // Smoothed directions cannot see kinks in s, where they may point uphill.
        let smoothed = (upd_s && ell_s > 0.0) || (upd_g && ell_g > 0.0);
        if cfg.raw_fallback && smoothed && terms.total - step.cost <= cfg.tol * terms.total {
            let raw = smooth_gradient_with(&grad, 0.0, 0.0, &tg, cfg.s_start)?;
            let raw_dir = Control::new(
                if upd_s { raw.grad_s } else { vec![0.0; len] },
                if upd_g { raw.grad_g } else { vec![0.0; len] },
            );
            let retry = line_search(obj, &v, &raw_dir, cfg, terms.total)?;
            debug!("iteration {k}: raw retry reached {:e}", retry.cost);
            if retry.cost < step.cost {
                let spent = step.evaluations;
                step = retry;
                step.evaluations += spent;
                dir = raw_dir;
                vanished = is_zero(&dir.s) && is_zero(&dir.g);
                raw_step = true;
            }
        }
        debug!(
            "iteration {k}: alpha = ({:e}, {:e}), {} evaluations",
            step.alpha_s, step.alpha_g, step.evaluations
        );

        if step.alpha_s == 0.0 && step.alpha_g == 0.0 {
            if upd_s {
                rel_s = 0.0;
                rejected_s = true;
            }
            if upd_g {
                rel_g = 0.0;
                rejected_g = true;
            }
            if !interchanging || (rel_s < cfg.tol && rel_g < cfg.tol) {
                trace.status = if vanished {
                    Status::Stationary
                } else {
                    Status::LineSearchFailed
                };
                break;
            }
            trace
                .records
                .push(make_record(k, terms, &grad, &v, step, (false, false)));
            continue;
        }
        rejected_s = false;
        rejected_g = false;

        let v_new = trial(&v, &dir, step.alpha_s, step.alpha_g, s0, delta);
        let (new_terms, new_grad) = match obj.evaluate_terms(&v_new) {
            Ok(e) => e,
            Err(e) => {
                warn!("iteration {k}: {e}");
                trace.status = Status::Failed(e.to_string());
                break;
            }
        };
        let rel = if terms.total > 0.0 {
            (terms.total - new_terms.total).abs() / terms.total
        } else {
            0.0
        };
        let control_change = {
            let num = distance(&tg, &v_new.s, &v.s).powi(2) + distance(&tg, &v_new.g, &v.g).powi(2);
            let den = tg.dot(&v.s, &v.s) + tg.dot(&v.g, &v.g);
            (num / den).sqrt()
        };
        v = v_new;
        terms = new_terms;
        grad = new_grad;
        let mut record = make_record(k, terms, &grad, &v, step, (upd_s, upd_g));
        record.raw_step = raw_step;
        trace.records.push(record);
        if cfg.snapshot_every > 0 && k % cfg.snapshot_every == 0 {
            trace.snapshots.push(Snapshot { k, control: v.clone() });
        }
        if upd_s {
            rel_s = rel;
        }
        if upd_g {
            rel_g = rel;
        }

        let converged = if interchanging {
            rel_s < cfg.tol && rel_g < cfg.tol
        } else {
            rel < cfg.tol
        };
        if converged || terms.total == 0.0 {
            trace.status = Status::Converged;
            break;
        }
        if cfg.control_tol.is_some_and(|ct| control_change < ct) {
            trace.status = Status::ControlConverged;
            break;
        }
    }
    trace.final_control = v;
    info!(
        "descent end: {:?} after {} iterations, J = {:e}",
        trace.status,
        trace.iterations(),
        trace.final_cost()
    );
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::functional::RawGradient;
    use crate::models::{model1, synthesize_measurements, SynthesisMode};
    use proptest::prelude::*;

    #[test]
    fn golden_section_finds_parabola_vertex() {
        let (a, f, calls) = minimize_step(|a| (a - 0.3).powi(2), 0.09, 0.1, 10.0, 30);
        assert!((a - 0.3).abs() < 1e-3, "{a}");
        assert!(f < 1e-6 && calls <= 30);
        // the vertex below the first probe
        let (a, _, _) = minimize_step(|a| (a - 0.3).powi(2), 0.09, 5.0, 10.0, 30);
        assert!((a - 0.3).abs() < 1e-3, "{a}");
    }

    #[test]
    fn step_is_capped() {
        let (a, _, _) = minimize_step(|a| -a, 0.0, 0.1, 2.0, 30);
        assert_eq!(a, 2.0);
    }

    #[test]
    fn no_decrease_gives_zero_step() {
        let (a, f, calls) = minimize_step(|a| a, 0.0, 0.1, 10.0, 30);
        assert_eq!((a, f), (0.0, 0.0));
        assert!(calls <= 30);
        let (a, _, _) = minimize_step(|_| f64::NAN, 1.0, 0.1, 10.0, 30);
        assert_eq!(a, 0.0);
    }

    #[test]
    fn non_finite_probes_shrink_the_bracket() {
        let f = |a: f64| if a > 0.05 { f64::NAN } else { (a - 0.02).powi(2) };
        let (a, _, _) = minimize_step(f, 4e-4, 1.0, 10.0, 30);
        assert!(a > 0.0 && (a - 0.02).abs() < 5e-3, "{a}");
    }

    #[test]
    fn projection_rules() {
        let v = Control::new(vec![0.8, 0.5, 0.04, 0.3], vec![1.0, -2.0, 3.0, 0.0]);
        let p = project(&v, 0.8, 0.1);
        assert_eq!(p.s, vec![0.8, 0.5, 0.1, 0.3]);
        assert_eq!(p.g, v.g);
        let drifted = Control::new(vec![0.81, 0.5], vec![0.0, 0.0]);
        assert_eq!(project(&drifted, 0.8, 0.1).s, vec![0.8, 0.5]);
        let ok = Control::new(vec![0.8, 0.9, 1.0], vec![0.0; 3]);
        assert_eq!(project(&ok, 0.8, 0.1), ok);
    }

    #[test]
    fn convex_combinations() {
        let truth = [1.0, 2.0];
        let regular = [3.0, 1.0];
        assert_eq!(convex_comb_guess(&truth, &regular, 1.0), regular.to_vec());
        assert_eq!(convex_comb_guess(&truth, &regular, 0.0), truth.to_vec());
        assert_eq!(convex_comb_guess(&truth, &regular, -1.0), vec![-1.0, 3.0]);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("simultaneous".parse::<Strategy>().unwrap(), Strategy::Simultaneous);
        assert_eq!("interleave:5".parse::<Strategy>().unwrap(), Strategy::Interchanging(5));
        assert_eq!(
            "interchanging:2".parse::<Strategy>().unwrap(),
            Strategy::Interchanging(2)
        );
        assert!("interleave:0".parse::<Strategy>().is_err());
        assert!("sideways".parse::<Strategy>().is_err());
        let text = serde_json::to_string(&Strategy::Interchanging(3)).unwrap();
        assert_eq!(text, "\"interchanging:3\"");
    }

    proptest! {
        #[test]
        fn interchanging_windows_are_balanced(block in 1usize..12, offset in 0usize..100) {
            let strategy = Strategy::Interchanging(block);
            let start = 1 + offset * block;
            let (mut ns, mut ng) = (0, 0);
            for k in start..start + 2 * block {
                let (s, g) = strategy.schedule(k);
                prop_assert!(s != g);
                ns += usize::from(s);
                ng += usize::from(g);
            }
            prop_assert_eq!((ns, ng), (block, block));
        }
    }

    /// `J = ||s - a||^2 + ||g - b||^2` with its trapezoid gradient.
    struct Bowl {
        tg: TimeGrid,
        centre: Control,
    }

    impl Objective for Bowl {
        fn time_grid(&self) -> &TimeGrid {
            &self.tg
        }
        fn cost(&self, v: &Control) -> Result<f64> {
            Ok(distance(&self.tg, &v.s, &self.centre.s).powi(2) + distance(&self.tg, &v.g, &self.centre.g).powi(2))
        }
        fn cost_and_gradient(&self, v: &Control) -> Result<(f64, RawGradient)> {
            let mut grad_s: Vec<f64> = v.s.iter().zip(&self.centre.s).map(|(a, b)| 2.0 * (a - b)).collect();
            grad_s[0] = 0.0;
            let grad_g = v.g.iter().zip(&self.centre.g).map(|(a, b)| 2.0 * (a - b)).collect();
            Ok((
                self.cost(v)?,
                RawGradient {
                    grad_s,
                    grad_g,
                    dirac_weight: 0.0,
                },
            ))
        }
    }

    fn bowl() -> (Bowl, Control) {
        let tg = TimeGrid::new(1.0, 40).unwrap();
        let centre = Control::new(tg.sample(|t| 1.0 + 0.5 * t), tg.sample(|t| (3.0 * t).sin()));
        let v0 = Control::new(tg.sample(|t| 1.0 + t * t), tg.sample(|t| 1.0 - t));
        (Bowl { tg, centre }, v0)
    }

    #[test]
    fn stalled_smoothed_step_falls_back_to_raw_gradient() {
        // an alternating centre is invisible to a wide smoothing filter
        let tg = TimeGrid::new(1.0, 40).unwrap();
        let zigzag: Vec<f64> = (0..41).map(|k| if k % 2 == 0 { 0.9 } else { 1.1 }).collect();
        let centre = Control::new(zigzag, vec![0.0; 41]);
        let obj = Bowl { tg: tg.clone(), centre };
        let v0 = Control::new(vec![1.0; 41], vec![0.0; 41]);
        let mut cfg = bowl_config();
        cfg.target = Target::S;
        cfg.ell_s = 2.0;
        // the smoothed step removes only the end effects, about half of J
        cfg.tol = 0.9;
        cfg.max_iter = 3;
        let with = descend_objective(&obj, &v0, &cfg, None).unwrap();
        assert!(with.records[1].raw_step);
        cfg.raw_fallback = false;
        let without = descend_objective(&obj, &v0, &cfg, None).unwrap();
        assert!(!without.records.iter().any(|r| r.raw_step));
        assert!(with.final_cost() < 0.5 * without.final_cost());
    }

    fn bowl_config() -> DescentConfig {
        DescentConfig {
            grid: GridConfig::new(40, 0.05),
            ell_s: 0.05,
            ell_g: 0.05,
            tol: 1e-10,
            max_iter: 500,
            ..DescentConfig::default()
        }
    }

    #[test]
    fn zero_direction_gives_zero_step() {
        let (obj, v0) = bowl();
        let len = v0.len();
        let dir = Control::new(vec![0.0; len], vec![0.0; len]);
        let step = line_search(&obj, &v0, &dir, &bowl_config(), 1.0).unwrap();
        assert_eq!(
            (step.alpha_s, step.alpha_g, step.cost, step.evaluations),
            (0.0, 0.0, 1.0, 0)
        );
    }

    #[test]
    fn coordinate_mode_decreases_both() {
        let (obj, v0) = bowl();
        let (j0, grad) = obj.cost_and_gradient(&v0).unwrap();
        let dir = Control::new(grad.grad_s, grad.grad_g);
        let cfg = DescentConfig {
            line_search: LineSearchMode::Coordinate,
            ..bowl_config()
        };
        let step = line_search(&obj, &v0, &dir, &cfg, j0).unwrap();
        assert!(step.alpha_s > 0.0 && step.alpha_g > 0.0 && step.cost < j0);
        // unpreconditioned exact minimizer along each coordinate is 1/2
        assert!((step.alpha_s - 0.5).abs() < 1e-3 && (step.alpha_g - 0.5).abs() < 1e-3);
    }

    #[test]
    fn bowl_descent_reaches_centre() {
        let (obj, v0) = bowl();
        for strategy in [
            Strategy::Simultaneous,
            Strategy::Interchanging(1),
            Strategy::Interchanging(4),
        ] {
            let cfg = DescentConfig {
                strategy,
                ..bowl_config()
            };
            let trace = descend_objective(&obj, &v0, &cfg, Some(&obj.centre)).unwrap();
            assert!(
                trace.final_cost() < 1e-8 * trace.initial_cost(),
                "{strategy}: {:?}",
                trace.status
            );
            assert_eq!(trace.final_control.s[0], v0.s[0]);
        }
    }

    #[test]
    fn fixed_point_is_left_alone() {
        let (obj, _) = bowl();
        let v = obj.centre.clone();
        for strategy in [
            Strategy::Simultaneous,
            Strategy::Interchanging(1),
            Strategy::Interchanging(3),
        ] {
            let cfg = DescentConfig {
                strategy,
                ..bowl_config()
            };
            let trace = descend_objective(&obj, &v, &cfg, None).unwrap();
            assert_eq!(trace.final_control, v);
            assert_eq!(trace.status, Status::Stationary);
            assert!(trace.iterations() <= 6);
        }
    }

    #[test]
    fn single_target_keeps_other_control() {
        let (obj, v0) = bowl();
        let cfg = DescentConfig {
            target: Target::S,
            ..bowl_config()
        };
        let trace = descend_objective(&obj, &v0, &cfg, None).unwrap();
        assert_eq!(trace.final_control.g, v0.g);
        assert!(distance(&obj.tg, &trace.final_control.s, &obj.centre.s) < 1e-4);
    }

    #[test]
    fn first_physical_iteration_descends() {
        let model = model1();
        let cfg = DescentConfig {
            grid: GridConfig::new(40, 0.02),
            target: Target::S,
            ell_s: 0.47,
            max_iter: 1,
            ..DescentConfig::default()
        };
        let meas = synthesize_measurements(&model, &cfg.grid, SynthesisMode::Solver).unwrap();
        let tg = cfg.grid.time_grid().unwrap();
        let v0 = Control::new(model.regular_s_guess(&tg), model.true_control(&tg).g);
        let trace = descend(&model, &meas, &v0, &cfg).unwrap();
        let r = &trace.records[1];
        assert!(r.alpha_s > 0.0);
        assert!(trace.final_cost() < trace.initial_cost());
    }

    #[test]
    fn trace_exports() {
        let (obj, v0) = bowl();
        let cfg = DescentConfig {
            max_iter: 3,
            snapshot_every: 1,
            ..bowl_config()
        };
        let trace = descend_objective(&obj, &v0, &cfg, Some(&obj.centre)).unwrap();
        assert_eq!(trace.snapshots.len(), trace.records.len());
        let dir = tempfile::tempdir().unwrap();
        trace.write_csv(&dir.path().join("trace.csv")).unwrap();
        trace.write_json(&dir.path().join("trace.json")).unwrap();
        trace
            .write_controls_csv(&dir.path().join("controls.csv"), &obj.tg)
            .unwrap();
        let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(csv.lines().count(), trace.records.len() + 1);
        let back: OptimizationTrace =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("trace.json")).unwrap()).unwrap();
        assert_eq!(back.final_control, trace.final_control);
        assert_eq!(back.status, trace.status);
    }

    #[test]
    fn config_validation() {
        let bad_tol = DescentConfig {
            tol: 0.0,
            ..DescentConfig::default()
        };
        assert!(bad_tol.validate().is_err());
        let no_centroid = DescentConfig {
            beta_reg: 1.0,
            ..DescentConfig::default()
        };
        assert!(no_centroid.validate().is_err());
        let parsed: DescentConfig = toml::from_str("strategy = \"interleave:5\"\ntarget = \"s\"\n").unwrap();
        assert_eq!(parsed.strategy, Strategy::Interchanging(5));
        assert_eq!(parsed.target, Target::S);
        assert_eq!(parsed.tol, 1e-5);
    }
}
