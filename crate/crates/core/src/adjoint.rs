//! Backward-in-time solver for the adjoint problem
//! `(a psi_x)_x - (b psi)_x + c psi + psi_t = 0` with Robin conditions at
//! both ends and terminal data `2 beta0 (u(x, T) - w(x))`.
//!
//! Each backward step is implicit and uses the cell coefficients of
//! `[t_{k-1}, t_k]`. The spatial operator is the transpose of the forward
//! one. The moving-boundary term `s' psi` of the continuous Robin condition
//! arises from the transpose of the reflection extension, which folds the
//! mass of nodes beyond the previous boundary back inside.

use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};
use crate::forward::{ExtensionMap, LevelCoefficients, MeshField, StateField, TridiagonalSystem};
use crate::functional::{Control, Weights};
use crate::grid::{SpaceGrid, TimeGrid};
use crate::models::{BenchmarkModel, Measurements};

/// Discrete adjoint field on the grids of the state it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointField(MeshField);

impl Deref for AdjointField {
    type Target = MeshField;
    fn deref(&self) -> &MeshField {
        &self.0
    }
}

impl AdjointField {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.0.write_csv(path, "psi")
    }
}

/// Weak-form adjoint system on nodes `0..=m`.
///
/// Row `j` is the coefficient of the test value `eta_j` in
/// `sum_i h_i [a psi_x eta_x - b psi_i eta_x - c psi_i eta_i
///  + (psi_i - prev_i) eta_i / tau] - (s' psi_m + r) eta_m`.
pub(crate) fn assemble_adjoint(
    sg: &SpaceGrid,
    coef: &LevelCoefficients,
    m: usize,
    tau: f64,
    prev: &[f64],
    s_dot: f64,
    boundary_source: f64,
) -> TridiagonalSystem {
    let mut sys = TridiagonalSystem::zeros(m + 1);
    for i in 0..m {
        let h = sg.h(i);
        let k = coef.a[i] / h;
        sys.main[i] += k + coef.b[i] - h * coef.c[i] + h / tau;
        sys.sup[i] -= k;
        sys.main[i + 1] += k;
        sys.sub[i + 1] -= k + coef.b[i];
        sys.rhs[i] += h / tau * prev[i];
    }
    sys.main[m] -= s_dot;
    sys.rhs[m] += boundary_source;
    sys
}

/// Solves the adjoint problem for state `u` of control `v`.
///
/// The march is the transpose of the forward recursion, including the
/// reflection extension, so that nodal flux sensitivities are exact.
/// Step `k` yields the multiplier of level `k`, which approximates `psi`
/// at `t_{k-1}`; it is stored as level `k - 1` after moving it onto that
/// level's active nodes. Level `n` holds the terminal data.
pub fn solve_adjoint(
    u: &StateField,
    v: &Control,
    meas: &Measurements,
    weights: &Weights,
    model: &BenchmarkModel,
) -> Result<AdjointField> {
    let tg: &TimeGrid = u.time();
    let sg = u.space();
    let n = tg.n();
    if v.s.len() != n + 1 {
        return Err(Error::GridMismatch(format!(
            "control has {} samples, state has {} levels",
            v.s.len(),
            n + 1
        )));
    }
    if meas.mu.len() != n + 1 {
        return Err(Error::GridMismatch(format!(
            "mu has {} samples, state has {} levels",
            meas.mu.len(),
            n + 1
        )));
    }
    for (k, &s) in v.s.iter().enumerate() {
        if (sg.boundary(k) - s).abs() > 1e-6 * (1.0 + s.abs()) {
            return Err(Error::GridMismatch(format!(
                "state boundary {} at level {k} does not match control {s}",
                sg.boundary(k)
            )));
        }
    }
    let tau = tg.tau();

    let final_nodes = sg.active_nodes(n);
    let final_mismatch: Vec<f64> = final_nodes
        .iter()
        .zip(u.level(n))
        .map(|(&x, &un)| un - meas.w_at(x))
        .collect();

    let mut levels: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    levels[n] = final_mismatch.iter().map(|e| 2.0 * weights.beta0 * e).collect();

    // E_{k+1}^T M_{k+1} psi(k+1) / tau on the level k nodes
    let mut carried: Option<Vec<f64>> = None;
    for k in (1..=n).rev() {
        let m = sg.boundary_index(k);
        let coef = LevelCoefficients::new(model, sg, tg, k, m);
        let zeros = vec![0.0; m + 1];
        let mut sys = assemble_adjoint(sg, &coef, m, tau, &zeros, 0.0, 0.0);
        if k == n {
            // trapezoid weights of the final-profile term
            for i in 0..=m {
                let left = if i > 0 { sg.h(i - 1) } else { 0.0 };
                let right = if i < m { sg.h(i) } else { 0.0 };
                sys.rhs[i] += weights.beta0 * (left + right) * final_mismatch[i] / tau;
            }
        }
        sys.rhs[m] += 2.0 * weights.beta1 * (u.boundary_value(k) - meas.mu[k]);
        if let Some(c) = carried.take() {
            for (r, c) in sys.rhs.iter_mut().zip(c) {
                *r += c;
            }
        }
        let multiplier = sys.solve(k)?;

        let mass: Vec<f64> = (0..=m)
            .map(|i| if i < m { sg.h(i) * multiplier[i] / tau } else { 0.0 })
            .collect();
        carried = Some(ExtensionMap::new(sg, k - 1, m + 1)?.apply_transpose(&mass));

        let target = sg.boundary_index(k - 1) + 1;
        levels[k - 1] = ExtensionMap::new(sg, k, target)?.apply(&multiplier);
    }
    Ok(AdjointField(MeshField::new(tg.clone(), sg.clone(), levels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{assemble_level, solve_forward};
    use crate::grid::GridConfig;
    use crate::models::{model1, model2, model3, synthesize_measurements, SynthesisMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn discrete_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for model in [model1(), model2(), model3()] {
            let cfg = GridConfig::new(30, 0.03);
            let tg = cfg.time_grid().unwrap();
            let s = model.true_control(&tg).s;
            let sg = SpaceGrid::build(&s, &cfg).unwrap();
            for _ in 0..10 {
                let k = rng.random_range(1..=tg.n());
                let m = sg.boundary_index(k);
                let coef = LevelCoefficients::new(&model, &sg, &tg, k, m);
                let zeros = vec![0.0; m + 1];
                let fwd = assemble_level(&sg, &coef, m, tg.tau(), &zeros, 0.0, 0.0);
                let s_dot: f64 = rng.random_range(-2.0..2.0);
                let adj = assemble_adjoint(&sg, &coef, m, tg.tau(), &zeros, s_dot, 0.0);
                // undo the row scaling of the forward scheme
                let scale: Vec<f64> = (0..=m)
                    .map(|i| match i {
                        0 => sg.h(0),
                        i if i == m => sg.h(m - 1),
                        i => sg.h(i) * sg.h(i - 1),
                    })
                    .collect();
                let y: Vec<f64> = (0..=m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let z: Vec<f64> = (0..=m).map(|_| rng.random_range(-1.0..1.0)).collect();
                // the forward weak form also has no mass at node m
                let ky: Vec<f64> = fwd.apply(&y).iter().zip(&scale).map(|(r, s)| r / s).collect();
                let lhs: f64 = ky.iter().zip(&z).map(|(a, b)| a * b).sum();
                let rhs: f64 = y.iter().zip(adj.apply(&z)).map(|(a, b)| a * b).sum();
                let boundary = s_dot * y[m] * z[m];
                let mag: f64 = ky.iter().map(|v| v.abs()).sum();
                assert!(
                    (lhs - rhs - boundary).abs() < 1e-10 * (1.0 + mag),
                    "model {} level {k}: {} vs {}",
                    model.id,
                    lhs - rhs,
                    boundary
                );
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_adjoint() {
        let model = model1();
        let cfg = GridConfig::new(20, 0.05);
        let tg = cfg.time_grid().unwrap();
        let v = model.regular_guess(&tg);
        let meas = synthesize_measurements(&model, &cfg, SynthesisMode::Analytic).unwrap();
        let u = solve_forward(&v, &model, &tg, &cfg).unwrap();
        let w = Weights {
            beta0: 0.0,
            beta1: 0.0,
            beta2: 1.0,
        };
        let psi = solve_adjoint(&u, &v, &meas, &w, &model).unwrap();
        assert!(psi.levels().iter().flatten().all(|&x| x == 0.0));
    }

    fn max_abs(psi: &AdjointField) -> f64 {
        psi.levels().iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn analytic_data_adjoint_shrinks_with_refinement() {
        let model = model1();
        let sizes: Vec<f64> = [(25, 0.04), (100, 0.02), (400, 0.01)]
            .iter()
            .map(|&(n, h)| {
                let cfg = GridConfig::new(n, h);
                let tg = cfg.time_grid().unwrap();
                let v = model.true_control(&tg);
                let meas = synthesize_measurements(&model, &cfg, SynthesisMode::Analytic).unwrap();
                let u = solve_forward(&v, &model, &tg, &cfg).unwrap();
                max_abs(&solve_adjoint(&u, &v, &meas, &Weights::default(), &model).unwrap())
            })
            .collect();
        assert!(sizes[1] < sizes[0] && sizes[2] < sizes[1], "{sizes:?}");
    }

    #[test]
    fn solver_data_adjoint_vanishes_at_truth() {
        let model = model2();
        let cfg = GridConfig::new(40, 0.02);
        let tg = cfg.time_grid().unwrap();
        let v = model.true_control(&tg);
        let meas = synthesize_measurements(&model, &cfg, SynthesisMode::Solver).unwrap();
        let u = solve_forward(&v, &model, &tg, &cfg).unwrap();
        let psi = solve_adjoint(&u, &v, &meas, &Weights::default(), &model).unwrap();
        assert!(max_abs(&psi) < 1e-12);
    }

    #[test]
    fn adjoint_stays_bounded_by_data() {
        // a perturbed control gives nonzero data; psi must not blow up
        for (n, h) in [(25, 0.04), (100, 0.02), (400, 0.01)] {
            let model = model3();
            let cfg = GridConfig::new(n, h);
            let tg = cfg.time_grid().unwrap();
            let v = model.regular_guess(&tg);
            let meas = synthesize_measurements(&model, &cfg, SynthesisMode::Analytic).unwrap();
            let u = solve_forward(&v, &model, &tg, &cfg).unwrap();
            let psi = solve_adjoint(&u, &v, &meas, &Weights::default(), &model).unwrap();
            let terminal = psi.level(n).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let bdry = (1..=n)
                .map(|k| 2.0 * (u.boundary_value(k) - meas.mu[k]).abs())
                .fold(0.0, f64::max);
            assert!(max_abs(&psi) <= 10.0 * (terminal + bdry), "n = {n}");
        }
    }
}
