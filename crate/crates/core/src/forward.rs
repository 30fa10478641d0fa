//! Implicit finite-difference solver for the state problem on the moving
//! domain `0 < x < s(t)`.
//!
//! Each time level solves one tridiagonal system. Row 0 carries the flux
//! `g`, interior rows the nonuniform three-point stencil and the last row the
//! Stefan condition. Coefficients are Steklov cell averages. Values of the
//! previous level on nodes that have just become active are taken from the
//! even reflection about the previous boundary.

use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};
use crate::functional::Control;
use crate::grid::{interp_linear, GridConfig, SpaceGrid, TimeGrid};
use crate::models::BenchmarkModel;

const GAUSS: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)

/// Two-point Gauss abscissae on `[lo, hi]`.
fn gauss_points(lo: f64, hi: f64) -> [f64; 2] {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    [mid - half * GAUSS, mid + half * GAUSS]
}

/// Mean of `fun` over `[x0, x1] x [t0, t1]` by the 2x2 Gauss rule.
pub fn steklov_average(fun: impl Fn(f64, f64) -> f64, x0: f64, x1: f64, t0: f64, t1: f64) -> f64 {
    let xs = gauss_points(x0, x1);
    let ts = gauss_points(t0, t1);
    0.25 * (fun(xs[0], ts[0]) + fun(xs[0], ts[1]) + fun(xs[1], ts[0]) + fun(xs[1], ts[1]))
}

/// Mean of `fun` over `[t0, t1]` by the 2-point Gauss rule.
pub fn steklov_average_time(fun: impl Fn(f64) -> f64, t0: f64, t1: f64) -> f64 {
    let ts = gauss_points(t0, t1);
    0.5 * (fun(ts[0]) + fun(ts[1]))
}

/// Mean of `fun` over `[t0, t1]` by the 2-point Gauss rule on two halves.
pub fn composite_average_time(fun: impl Fn(f64) -> f64, t0: f64, t1: f64) -> f64 {
    let mid = 0.5 * (t0 + t1);
    0.5 * (steklov_average_time(&fun, t0, mid) + steklov_average_time(&fun, mid, t1))
}

/// Tridiagonal system `sub[i] x[i-1] + main[i] x[i] + sup[i] x[i+1] = rhs[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalSystem {
    pub sub: Vec<f64>,
    pub main: Vec<f64>,
    pub sup: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl TridiagonalSystem {
    pub fn zeros(len: usize) -> Self {
        Self {
            sub: vec![0.0; len],
            main: vec![0.0; len],
            sup: vec![0.0; len],
            rhs: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    /// Matrix-vector product.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut v = self.main[i] * x[i];
                if i > 0 {
                    v += self.sub[i] * x[i - 1];
                }
                if i + 1 < n {
                    v += self.sup[i] * x[i + 1];
                }
                v
            })
            .collect()
    }

    /// Product with the transpose.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|j| {
                let mut v = self.main[j] * x[j];
                if j > 0 {
                    v += self.sup[j - 1] * x[j - 1];
                }
                if j + 1 < n {
                    v += self.sub[j + 1] * x[j + 1];
                }
                v
            })
            .collect()
    }

    pub fn is_diagonally_dominant(&self) -> bool {
        let tol = 1e-12;
        (0..self.len()).all(|i| {
            let off = self.sub[i].abs() + self.sup[i].abs();
            self.main[i].abs() >= off * (1.0 - tol)
        })
    }

    /// Thomas algorithm without pivoting. `level` only labels errors.
    pub fn solve(&self, level: usize) -> Result<Vec<f64>> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Empty("tridiagonal system"));
        }
        if self.sub.len() != n || self.sup.len() != n || self.rhs.len() != n {
            return Err(Error::GridMismatch(
                "tridiagonal diagonals have inconsistent lengths".into(),
            ));
        }
        let scale = self.main.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tiny = f64::EPSILON * scale.max(f64::MIN_POSITIVE);
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut pivot = self.main[0];
        if !(pivot.abs() > tiny) {
            return Err(Error::SingularSystem { level, row: 0 });
        }
        c[0] = self.sup[0] / pivot;
        d[0] = self.rhs[0] / pivot;
        for i in 1..n {
            pivot = self.main[i] - self.sub[i] * c[i - 1];
            if !(pivot.abs() > tiny) || !pivot.is_finite() {
                return Err(Error::SingularSystem { level, row: i });
            }
            c[i] = if i + 1 < n { self.sup[i] / pivot } else { 0.0 };
            d[i] = (self.rhs[i] - self.sub[i] * d[i - 1]) / pivot;
        }
        let mut x = d;
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem { level, row: n - 1 });
        }
        Ok(x)
    }
}

/// Reflects `x` into `[0, s]` by `x -> 2^j s - x` for the stage
/// `2^(j-1) s <= x <= 2^j s`, repeated until it lands in `[0, s]`.
pub fn reflect_into(x: f64, s: f64, limit: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::DegenerateBoundary(s));
    }
    if !(x >= 0.0 && x <= limit) {
        return Err(Error::OutOfRange { x, lo: 0.0, hi: limit });
    }
    let mut y = x;
    while y > s {
        let mut top = 2.0 * s;
        while y > top {
            top *= 2.0;
        }
        y = top - y;
    }
    Ok(y)
}

/// Value of the piecewise-linear interpolant of `(nodes, values)` continued
/// to `[0, limit]` by iterated even reflection about `nodes.last()`.
pub fn extend_reflect(nodes: &[f64], values: &[f64], x: f64, limit: f64) -> Result<f64> {
    let s = *nodes.last().ok_or(Error::Empty("reflection nodes"))?;
    let y = reflect_into(x, s, limit.max(s))?;
    interp_linear(nodes, values, y)
}

/// Interpolation weights `(j, w)` with `value = (1 - w) v[j] + w v[j + 1]`
/// for the reflected point of `x`; `w = 0` when it lands on the last node.
fn reflection_weights(nodes: &[f64], x: f64, limit: f64) -> Result<(usize, f64)> {
    let s = *nodes.last().ok_or(Error::Empty("reflection nodes"))?;
    let y = reflect_into(x, s, limit.max(s))?;
    let last = nodes.len() - 1;
    if last == 0 || y >= s {
        return Ok((last, 0.0));
    }
    let j = nodes.partition_point(|&xi| xi <= y).saturating_sub(1).min(last - 1);
    let w = (y - nodes[j]) / (nodes[j + 1] - nodes[j]);
    Ok((j, w.clamp(0.0, 1.0)))
}

/// Linear map from the active values of one level to the first `len` grid
/// nodes: identity on shared nodes, reflection beyond the source boundary.
#[derive(Debug, Clone)]
pub struct ExtensionMap {
    source_len: usize,
    len: usize,
    extra: Vec<(usize, f64)>,
}

impl ExtensionMap {
    pub fn new(sg: &SpaceGrid, source_level: usize, len: usize) -> Result<Self> {
        let nodes = sg.active_nodes(source_level);
        let extra = (nodes.len()..len)
            .map(|i| reflection_weights(nodes, sg.x(i), sg.x_max()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            source_len: nodes.len(),
            len,
            extra,
        })
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = v[..self.source_len.min(self.len)].to_vec();
        for &(j, w) in &self.extra {
            let val = if w == 0.0 {
                v[j]
            } else {
                (1.0 - w) * v[j] + w * v[j + 1]
            };
            out.push(val);
        }
        out
    }

    pub fn apply_transpose(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.source_len];
        let shared = self.source_len.min(self.len);
        out[..shared].copy_from_slice(&z[..shared]);
        for (e, &(j, w)) in self.extra.iter().enumerate() {
            let zi = z[shared + e];
            out[j] += (1.0 - w) * zi;
            if w != 0.0 {
                out[j + 1] += w * zi;
            }
        }
        out
    }
}

/// Piecewise-quadratic C1 interpolant of the boundary samples.
///
/// On `[t_{k-1}, t_k]`, `k >= 2`, it is
/// `s_{k-1} + (t - t_{k-1} - tau/2) ds_{k-1} + (t - t_{k-1})^2 dds_{k-1} / 2`
/// with backward differences `ds`, `dds`; on the first interval it is
/// `s_0 + t^2 ds_1 / (2 tau)`.
#[derive(Debug, Clone)]
pub struct QuadraticBoundary<'a> {
    s: &'a [f64],
    tau: f64,
}

impl<'a> QuadraticBoundary<'a> {
    pub fn new(s: &'a [f64], tau: f64) -> Self {
        Self { s, tau }
    }

    fn n(&self) -> usize {
        self.s.len() - 1
    }

    fn cell(&self, t: f64) -> usize {
        ((t / self.tau).ceil() as usize).clamp(1, self.n())
    }

    pub fn value(&self, t: f64) -> f64 {
        let k = self.cell(t);
        let r = t - (k - 1) as f64 * self.tau;
        let s = self.s;
        if k == 1 {
            return s[0] + r * r / (2.0 * self.tau) * (s[1] - s[0]) / self.tau;
        }
        let ds = (s[k - 1] - s[k - 2]) / self.tau;
        let dds = (s[k] - 2.0 * s[k - 1] + s[k - 2]) / (self.tau * self.tau);
        s[k - 1] + (r - 0.5 * self.tau) * ds + 0.5 * r * r * dds
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let k = self.cell(t);
        let r = t - (k - 1) as f64 * self.tau;
        let s = self.s;
        if k == 1 {
            return r / self.tau * (s[1] - s[0]) / self.tau;
        }
        let ds = (s[k - 1] - s[k - 2]) / self.tau;
        let dds = (s[k] - 2.0 * s[k - 1] + s[k - 2]) / (self.tau * self.tau);
        ds + r * dds
    }

    /// Derivative at node `t_k`: `(s_k - s_{k-1}) / tau`, and 0 at `t_0`.
    pub fn node_derivative(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            (self.s[k] - self.s[k - 1]) / self.tau
        }
    }

    /// Cell mean of the derivative over `[t_{k-1}, t_k]`.
    pub fn mean_derivative(&self, k: usize) -> f64 {
        let s = self.s;
        if k == 1 {
            (s[1] - s[0]) / (2.0 * self.tau)
        } else {
            (s[k] - s[k - 2]) / (2.0 * self.tau)
        }
    }

    /// Steklov average of `gamma(s, t) s'(t) - chi(s, t)` over cell `k`.
    pub fn stefan_flux(&self, k: usize, model: &BenchmarkModel) -> f64 {
        let t0 = (k - 1) as f64 * self.tau;
        let t1 = k as f64 * self.tau;
        // keep evaluations inside cell k
        let eps = 1e-12 * self.tau;
        composite_average_time(
            |t| {
                let t = t.clamp(t0 + eps, t1);
                let sv = self.value(t);
                (model.gamma)(sv, t) * self.derivative(t) - (model.chi)(sv, t)
            },
            t0,
            t1,
        )
    }
}

/// Per-level coefficients of the discrete state equation.
#[derive(Debug, Clone)]
pub(crate) struct LevelCoefficients {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub f: Vec<f64>,
}

impl LevelCoefficients {
    /// Cell averages for cells `0..cells` over `[t_{k-1}, t_k]`.
    pub fn new(model: &BenchmarkModel, sg: &SpaceGrid, tg: &TimeGrid, k: usize, cells: usize) -> Self {
        let (t0, t1) = (tg.t(k - 1), tg.t(k));
        let ts = gauss_points(t0, t1);
        let mut out = Self {
            a: Vec::with_capacity(cells),
            b: Vec::with_capacity(cells),
            c: Vec::with_capacity(cells),
            f: Vec::with_capacity(cells),
        };
        for i in 0..cells {
            let xs = gauss_points(sg.x(i), sg.x(i + 1));
            let (mut a, mut b, mut c, mut f) = (0.0, 0.0, 0.0, 0.0);
            for &x in &xs {
                for &t in &ts {
                    a += (model.a)(x, t);
                    b += (model.b)(x, t);
                    c += (model.c)(x, t);
                    f += (model.f)(x, t);
                }
            }
            out.a.push(0.25 * a);
            out.b.push(0.25 * b);
            out.c.push(0.25 * c);
            out.f.push(0.25 * f);
        }
        out
    }
}

/// Values on the active nodes of every time level.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshField {
    tg: TimeGrid,
    space: SpaceGrid,
    levels: Vec<Vec<f64>>,
}

impl MeshField {
    pub(crate) fn new(tg: TimeGrid, space: SpaceGrid, levels: Vec<Vec<f64>>) -> Result<Self> {
        if levels.len() != tg.nodes().len() {
            return Err(Error::GridMismatch(format!(
                "{} levels for {} time nodes",
                levels.len(),
                tg.nodes().len()
            )));
        }
        for (k, lv) in levels.iter().enumerate() {
            if lv.len() != space.boundary_index(k) + 1 {
                return Err(Error::GridMismatch(format!(
                    "level {k} has {} values, expected {}",
                    lv.len(),
                    space.boundary_index(k) + 1
                )));
            }
        }
        Ok(Self { tg, space, levels })
    }

    pub fn time(&self) -> &TimeGrid {
        &self.tg
    }

    pub fn space(&self) -> &SpaceGrid {
        &self.space
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn boundary_index(&self, k: usize) -> usize {
        self.space.boundary_index(k)
    }

    /// Value at the boundary node of level `k`.
    pub fn boundary_value(&self, k: usize) -> f64 {
        self.levels[k][self.space.boundary_index(k)]
    }

    /// Boundary values for every level.
    pub fn boundary_trace(&self) -> Vec<f64> {
        (0..self.levels.len()).map(|k| self.boundary_value(k)).collect()
    }

    /// Value at `x` on level `k`, reflected beyond the boundary.
    pub fn value_at(&self, k: usize, x: f64) -> Result<f64> {
        extend_reflect(self.space.active_nodes(k), &self.levels[k], x, self.space.x_max())
    }

    /// Level `k` extended to the first `len` grid nodes.
    pub fn extended(&self, k: usize, len: usize) -> Result<Vec<f64>> {
        Ok(ExtensionMap::new(&self.space, k, len)?.apply(&self.levels[k]))
    }

    /// Writes `(t, x, <name>)` rows over the active nodes.
    pub fn write_csv(&self, path: &Path, name: &str) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["t", "x", name])?;
        for (k, lv) in self.levels.iter().enumerate() {
            let t = self.tg.t(k);
            for (i, v) in lv.iter().enumerate() {
                wtr.write_record(&[format!("{t:e}"), format!("{:e}", self.space.x(i)), format!("{v:e}")])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Discrete temperature field.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField(MeshField);

impl Deref for StateField {
    type Target = MeshField;
    fn deref(&self) -> &MeshField {
        &self.0
    }
}

impl StateField {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.0.write_csv(path, "u")
    }
}

/// Checks length, `s(0) = s0` and `s >= delta`.
pub fn check_admissible(v: &Control, model: &BenchmarkModel, tg: &TimeGrid, cfg: &GridConfig) -> Result<()> {
    let len = tg.nodes().len();
    if v.s.len() != len || v.g.len() != len {
        return Err(Error::GridMismatch(format!(
            "control has {} s and {} g samples, time grid has {len} nodes",
            v.s.len(),
            v.g.len()
        )));
    }
    if (v.s[0] - model.s0).abs() > 1e-12 * (1.0 + model.s0.abs()) {
        return Err(Error::InvalidConfig(format!(
            "s(0) = {} differs from s0 = {}",
            v.s[0], model.s0
        )));
    }
    for (k, &s) in v.s.iter().enumerate() {
        if !(s >= cfg.delta) {
            return Err(Error::ConstraintViolation {
                t: tg.t(k),
                value: s,
                delta: cfg.delta,
            });
        }
    }
    if v.g.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidConfig("non-finite flux sample".into()));
    }
    Ok(())
}

/// Assembles the level-`k` system in the row scaling of the scheme.
pub(crate) fn assemble_level(
    sg: &SpaceGrid,
    coef: &LevelCoefficients,
    m: usize,
    tau: f64,
    prev: &[f64],
    g_mean: f64,
    stefan_flux: f64,
) -> TridiagonalSystem {
    let mut sys = TridiagonalSystem::zeros(m + 1);
    let (a, b, c, f) = (&coef.a, &coef.b, &coef.c, &coef.f);

    let h = sg.h(0);
    sys.main[0] = a[0] + h * b[0] - h * h * c[0] + h * h / tau;
    sys.sup[0] = -(a[0] + h * b[0]);
    sys.rhs[0] = h * h / tau * prev[0] - h * h * f[0] - h * g_mean;

    for i in 1..m {
        let hi = sg.h(i);
        let hl = sg.h(i - 1);
        let mass = hi * hi * hl;
        sys.sub[i] = -a[i - 1] * hi;
        sys.main[i] = a[i - 1] * hi + a[i] * hl + b[i] * hi * hl - c[i] * mass + mass / tau;
        sys.sup[i] = -(a[i] * hl + b[i] * hi * hl);
        sys.rhs[i] = -mass * f[i] + mass / tau * prev[i];
    }

    let hl = sg.h(m - 1);
    sys.sub[m] = -a[m - 1];
    sys.main[m] = a[m - 1];
    sys.rhs[m] = -hl * stefan_flux;
    sys
}

/// Solves the state problem for control `v`.
pub fn solve_forward(v: &Control, model: &BenchmarkModel, tg: &TimeGrid, cfg: &GridConfig) -> Result<StateField> {
    check_admissible(v, model, tg, cfg)?;
    let sg = SpaceGrid::build(&v.s, cfg)?;
    let n = tg.n();
    let tau = tg.tau();
    let boundary = QuadraticBoundary::new(&v.s, tau);

    let m0 = sg.boundary_index(0);
    let mut levels: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    levels.push(sg.nodes()[..=m0].iter().map(|&x| (model.phi)(x)).collect());

    let mut warned = false;
    for k in 1..=n {
        let m = sg.boundary_index(k);
        let prev = ExtensionMap::new(&sg, k - 1, m + 1)?.apply(&levels[k - 1]);
        let coef = LevelCoefficients::new(model, &sg, tg, k, m);
        let g_mean = 0.5 * (v.g[k - 1] + v.g[k]);
        let flux = boundary.stefan_flux(k, model);
        let sys = assemble_level(&sg, &coef, m, tau, &prev, g_mean, flux);
        if !warned && !sys.is_diagonally_dominant() {
            log::warn!("forward system at level {k} is not diagonally dominant");
            warned = true;
        }
        levels.push(sys.solve(k)?);
    }
    Ok(StateField(MeshField::new(tg.clone(), sg, levels)?))
}
