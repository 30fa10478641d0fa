//! Time and space discretization.
//!
//! The time axis is uniform. The space axis is uniform on `[0, s_min]` and
//! above `s_min` it is built from the sorted free-boundary samples, so that
//! every retained sample `s(t_k)` is a grid node. Gaps larger than `h_x` are
//! subdivided uniformly, samples closer than `eps_x` to the previous node are
//! merged into it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discretization parameters shared by the forward and adjoint solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Largest admissible spatial step.
    pub h_x: f64,
    /// Smallest admissible spatial step.
    pub eps_x: f64,
    /// Number of time intervals.
    pub n: usize,
    /// Final time.
    pub t_final: f64,
    /// Lower bound on admissible boundary positions.
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    0.1
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            h_x: 0.01,
            eps_x: 1e-8,
            n: 100,
            t_final: 1.0,
            delta: default_delta(),
        }
    }
}

impl GridConfig {
    pub fn new(n: usize, h_x: f64) -> Self {
        Self {
            n,
            h_x,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_x > 0.0 && self.eps_x < self.h_x && self.h_x.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < eps_x < h_x, got eps_x = {}, h_x = {}",
                self.eps_x, self.h_x
            )));
        }
        if self.n < 2 {
            return Err(Error::InvalidConfig(format!("need n >= 2, got {}", self.n)));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::InvalidConfig(format!("need T > 0, got {}", self.t_final)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidConfig(format!("need delta > 0, got {}", self.delta)));
        }
        // h = O(sqrt(tau)) is what the convergence theory assumes; only warn.
        let tau = self.t_final / self.n as f64;
        if self.h_x > 10.0 * tau.sqrt() {
            log::warn!("h_x = {} is large compared to sqrt(tau) = {}", self.h_x, tau.sqrt());
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t_final, self.n)
    }
}

/// Uniform grid `t_j = j * tau`, `j = 0..=n` on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_final: f64,
    tau: f64,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t_final: f64, n: usize) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(Error::InvalidConfig(format!("need T > 0, got {t_final}")));
        }
        if n < 2 {
            return Err(Error::InvalidConfig(format!("need n >= 2, got {n}")));
        }
        let tau = t_final / n as f64;
        let mut nodes: Vec<f64> = (0..=n).map(|j| j as f64 * tau).collect();
        nodes[n] = t_final;
        Ok(Self { t_final, tau, nodes })
    }

    /// Number of intervals.
    pub fn n(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn t(&self, j: usize) -> f64 {
        self.nodes[j]
    }

    /// Samples `f` at every node.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|&t| f(t)).collect()
    }

    /// Trapezoid-rule integral of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.nodes.len());
        let n = values.len() - 1;
        let inner: f64 = values[1..n].iter().sum();
        self.tau * (inner + 0.5 * (values[0] + values[n]))
    }

    /// Trapezoid-rule L2 inner product.
    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        self.integrate(&prod)
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.dot(a, a).max(0.0).sqrt()
    }
}

/// Nonuniform spatial grid adapted to a set of free-boundary samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid {
    nodes: Vec<f64>,
    boundary_index: Vec<usize>,
}

/// Smallest piece count `m >= 1` with `gap / m <= h_max` in floating point.
fn piece_count(gap: f64, h_max: f64) -> usize {
    let mut m = (gap / h_max).ceil().max(1.0) as usize;
    while m > 1 && gap / (m - 1) as f64 <= h_max {
        m -= 1;
    }
    while gap / m as f64 > h_max {
        m += 1;
    }
    m
}

impl SpaceGrid {
    /// Builds the grid for boundary samples `s_samples[k] = s(t_k)`.
    pub fn build(s_samples: &[f64], cfg: &GridConfig) -> Result<Self> {
        if !(cfg.eps_x > 0.0 && cfg.eps_x < cfg.h_x) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < eps_x < h_x, got eps_x = {}, h_x = {}",
                cfg.eps_x, cfg.h_x
            )));
        }
        if s_samples.is_empty() {
            return Err(Error::Empty("free-boundary samples"));
        }
        if s_samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig("non-finite boundary sample".into()));
        }
        let s_max = s_samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if s_max <= 0.0 {
            return Err(Error::DegenerateBoundary(s_max));
        }
        let s_min = s_samples.iter().copied().fold(f64::INFINITY, f64::min);
        if s_min <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "boundary samples must be positive, min is {s_min}"
            )));
        }

        let m0 = piece_count(s_min, cfg.h_x);
        let h0 = s_min / m0 as f64;
        let mut nodes: Vec<f64> = (0..m0).map(|i| i as f64 * h0).collect();
        nodes.push(s_min);

        let mut order: Vec<usize> = (0..s_samples.len()).collect();
        order.sort_by(|&a, &b| s_samples[a].total_cmp(&s_samples[b]).then(a.cmp(&b)));

        let mut boundary_index = vec![0usize; s_samples.len()];
        for &k in &order {
            let v = s_samples[k];
            let last = *nodes.last().expect("grid has nodes");
            let gap = v - last;
            if gap < cfg.eps_x {
                boundary_index[k] = nodes.len() - 1;
                continue;
            }
            let pieces = piece_count(gap, cfg.h_x);
            let h = gap / pieces as f64;
            for j in 1..pieces {
                nodes.push(last + j as f64 * h);
            }
            nodes.push(v);
            boundary_index[k] = nodes.len() - 1;
        }
        Ok(Self { nodes, boundary_index })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Step `h_i = x_{i+1} - x_i`.
    pub fn h(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    pub fn steps(&self) -> Vec<f64> {
        self.nodes.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index `m_k` of the node identified with `s(t_k)`.
    pub fn boundary_index(&self, k: usize) -> usize {
        self.boundary_index[k]
    }

    pub fn boundary_indices(&self) -> &[usize] {
        &self.boundary_index
    }

    /// Position of the boundary node at level `k`.
    pub fn boundary(&self, k: usize) -> f64 {
        self.nodes[self.boundary_index[k]]
    }

    pub fn x_max(&self) -> f64 {
        *self.nodes.last().expect("grid has nodes")
    }

    /// Active nodes `x_0..=x_{m_k}` at level `k`.
    pub fn active_nodes(&self, k: usize) -> &[f64] {
        &self.nodes[..=self.boundary_index[k]]
    }
}

/// Piecewise-linear interpolation of `(xs, ys)` at `q`.
///
/// `xs` must be ascending. Queries outside the hull (beyond a relative slack
/// of 1e-12) are rejected.
pub fn interp_linear(xs: &[f64], ys: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::GridMismatch(format!(
            "interpolation with {} abscissae and {} values",
            xs.len(),
            ys.len()
        )));
    }
    let lo = xs[0];
    let hi = xs[xs.len() - 1];
    let slack = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
    if !(q >= lo - slack && q <= hi + slack) {
        return Err(Error::OutOfRange { x: q, lo, hi });
    }
    if xs.len() == 1 {
        return Ok(ys[0]);
    }
    let q = q.clamp(lo, hi);
    // first index with xs[j] > q
    let j = xs.partition_point(|&x| x <= q);
    if j == 0 {
        return Ok(ys[0]);
    }
    if j >= xs.len() {
        return Ok(ys[xs.len() - 1]);
    }
    let (x0, x1) = (xs[j - 1], xs[j]);
    if q == x0 {
        return Ok(ys[j - 1]);
    }
    let w = (q - x0) / (x1 - x0);
    Ok(ys[j - 1] + w * (ys[j] - ys[j - 1]))
}

/// Like [`interp_linear`] but clamps queries outside the hull to the end values.
pub fn interp_clamped(xs: &[f64], ys: &[f64], q: f64) -> f64 {
    let lo = xs[0];
    let hi = xs[xs.len() - 1];
    interp_linear(xs, ys, q.clamp(lo, hi)).expect("clamped query is in range")
}
