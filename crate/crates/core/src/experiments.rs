//! Experiment protocols: length-scale calibration, convex-combination
//! sweeps, noise ensembles, joint identification and kappa tables, with
//! their on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::Control;
use crate::grid::TimeGrid;
use crate::models::{
    anchored_guess, model, noisy_boundary_samples, synthesize_measurements, BenchmarkModel, Measurements, NoiseSpec,
    SynthesisMode,
};
use crate::optimize::{convex_comb_guess, descend, DescentConfig, OptimizationTrace, Status, Strategy, Target};
use crate::verify::{kappa_sweep, log_spaced, median_deviation, perturbation, write_kappa_csv, Component, KappaRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    CalibrateEll,
    LambdaSweep,
    Reconstruct,
    NoiseEnsemble,
    Kappa,
    Joint,
}

/// Noise on the auxiliary boundary samples of a single reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseOptions {
    pub eta: f64,
    pub m: usize,
    /// 1: the samples give the initial guess; 2: they give the centroid.
    pub case: u8,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

/// A parsed experiment file. Keys of `[descent]` override the model defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: u8,
    pub kind: ExperimentKind,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synthesis: SynthesisMode,
    /// Control studied by calibration, sweeps and single reconstructions.
    #[serde(default)]
    pub target: Option<Target>,
    #[serde(default)]
    pub ell_values: Vec<f64>,
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub etas: Vec<f64>,
    #[serde(default)]
    pub ms: Vec<usize>,
    #[serde(default)]
    pub cases: Vec<u8>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub components: Vec<Component>,
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub noise: Option<NoiseOptions>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub descent: toml::Table,
}

fn merge_table(base: &mut toml::Table, over: &toml::Table) {
    for (key, value) in over {
        match (base.get_mut(key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_table(b, o),
            _ => {
                base.insert(key.clone(), value.clone());
            }
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn benchmark(&self) -> Result<BenchmarkModel> {
        model(self.model)
    }

    /// Model defaults overlaid with the `[descent]` table.
    pub fn descent_config(&self) -> Result<DescentConfig> {
        let base = DescentConfig::for_model(&self.benchmark()?);
        let mut table = toml::Table::try_from(&base)
            .map_err(|e| Error::InvalidConfig(format!("cannot encode descent defaults: {e}")))?;
        merge_table(&mut table, &self.descent);
        let cfg: DescentConfig = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn target_or(&self, default: Target) -> Target {
        self.target.unwrap_or(default)
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark()?;
        self.descent_config()?;
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{:?} experiment needs {what}", self.kind)))
            }
        };
        match self.kind {
            ExperimentKind::CalibrateEll => {
                need(self.ell_values.len() >= 4, "at least 4 ell_values")?;
                need(self.ell_values.iter().all(|&l| l >= 0.0), "ell_values >= 0")?;
                need(self.target != Some(Target::Both), "target s or g")?;
            }
            ExperimentKind::LambdaSweep => need(!self.lambdas.is_empty(), "lambdas")?,
            ExperimentKind::NoiseEnsemble => {
                need(!self.etas.is_empty() && !self.ms.is_empty(), "etas and ms")?;
                need(self.etas.iter().all(|&e| e >= 0.0), "etas >= 0")?;
                need(self.ms.iter().all(|&m| m >= 1), "ms >= 1")?;
                need(self.cases.iter().all(|&c| c == 1 || c == 2), "cases in {1, 2}")?;
                need(self.samples.unwrap_or(1) >= 1, "samples >= 1")?;
            }
            ExperimentKind::Reconstruct => {
                if let Some(n) = self.noise {
                    need(n.case == 1 || n.case == 2, "noise.case in {1, 2}")?;
                    need(n.m >= 1 && n.eta >= 0.0, "noise.m >= 1 and noise.eta >= 0")?;
                }
            }
            ExperimentKind::Kappa => need(self.epsilons.iter().all(|&e| e > 0.0), "positive epsilons")?,
            ExperimentKind::Joint => {}
        }
        Ok(())
    }
}

/// `y = c0 + c1 x + c2 x^2` fitted by least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Root-mean-square residual.
    pub residual: f64,
    /// Vertex clamped to the sampled range; `None` when `c2 <= 0`.
    pub vertex: Option<f64>,
    pub degenerate: bool,
}

/// Solves the 3x3 system by Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::InvalidConfig("quadratic fit needs 3 distinct abscissae".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Ok(x)
}

pub fn fit_quadratic(xs: &[f64], ys: &[f64]) -> Result<QuadraticFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::InvalidConfig("quadratic fit needs at least 3 points".into()));
    }
    // centred and scaled abscissa for conditioning
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let scale = xs.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(Error::InvalidConfig("quadratic fit needs 3 distinct abscissae".into()));
    }
    let mut ata = [[0.0; 3]; 3];
    let mut aty = [0.0; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let z = (x - mean) / scale;
        let row = [1.0, z, z * z];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * y;
        }
    }
    let [d0, d1, d2] = solve3(ata, aty)?;
    let c2 = d2 / (scale * scale);
    let c1 = d1 / scale - 2.0 * c2 * mean;
    let c0 = d0 - d1 * mean / scale + d2 * mean * mean / (scale * scale);
    let residual = (xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let z = (x - mean) / scale;
            (d0 + d1 * z + d2 * z * z - y).powi(2)
        })
        .sum::<f64>()
        / n)
        .sqrt();
    let degenerate = !(d2 > 0.0);
    let vertex = if degenerate {
        None
    } else {
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((mean - scale * d1 / (2.0 * d2)).clamp(lo, hi))
    };
    Ok(QuadraticFit {
        c0,
        c1,
        c2,
        residual,
        vertex,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub ell: f64,
    pub j_final: f64,
    pub solution_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub target: Target,
    pub samples: Vec<CalibrationSample>,
    pub fit_cost: QuadraticFit,
    pub fit_norm: QuadraticFit,
    /// Vertex of the cost fit.
    pub ell_star: Option<f64>,
    /// Vertex of the solution-norm fit.
    pub ell_star_norm: Option<f64>,
    /// Lowest sampled cost among the three samples nearest `ell_star`, or
    /// the model default when the cost fit is degenerate.
    pub ell_best: f64,
    pub fallback: bool,
}

fn component_error(tg: &TimeGrid, v: &Control, truth: &Control, target: Target) -> f64 {
    let diff = |a: &[f64], b: &[f64]| -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        tg.dot(&d, &d)
    };
    let (s, g) = target.flags();
    let mut sum = 0.0;
    if s {
        sum += diff(&v.s, &truth.s);
    }
    if g {
        sum += diff(&v.g, &truth.g);
    }
    sum.sqrt()
}

/// Initial control with the unknowns at their regular guesses and the rest at the truth.
pub fn initial_control(model: &BenchmarkModel, tg: &TimeGrid, target: Target) -> Control {
    let truth = model.true_control(tg);
    let regular = model.regular_guess(tg);
    let (s, g) = target.flags();
    Control::new(if s { regular.s } else { truth.s }, if g { regular.g } else { truth.g })
}

pub fn calibrate_ell(
    model: &BenchmarkModel,
    meas: &Measurements,
    target: Target,
    ell_values: &[f64],
    cfg: &DescentConfig,
) -> Result<(CalibrationResult, Vec<OptimizationTrace>)> {
    if target == Target::Both {
        return Err(Error::InvalidConfig("calibration is per control: target s or g".into()));
    }
    if ell_values.len() < 4 {
        return Err(Error::InvalidConfig("calibration needs at least 4 ell values".into()));
    }
    let tg = cfg.grid.time_grid()?;
    let truth = model.true_control(&tg);
    let v0 = initial_control(model, &tg, target);
    let runs: Vec<OptimizationTrace> = ell_values
        .par_iter()
        .map(|&ell| {
            let mut c = cfg.clone();
            c.target = target;
            match target {
                Target::S => {
                    c.ell_s = ell;
                    c.use_precond_s = true;
                }
                _ => {
                    c.ell_g = ell;
                    c.use_precond_g = true;
                }
            }
            descend(model, meas, &v0, &c)
        })
        .collect::<Result<_>>()?;
    let samples: Vec<CalibrationSample> = ell_values
        .iter()
        .zip(&runs)
        .map(|(&ell, r)| CalibrationSample {
            ell,
            j_final: r.final_cost(),
            solution_norm: component_error(&tg, &r.final_control, &truth, target),
            iterations: r.iterations(),
        })
        .collect();
    let xs: Vec<f64> = samples.iter().map(|s| s.ell).collect();
    let fit_cost = fit_quadratic(&xs, &samples.iter().map(|s| s.j_final).collect::<Vec<_>>())?;
    let fit_norm = fit_quadratic(&xs, &samples.iter().map(|s| s.solution_norm).collect::<Vec<_>>())?;
    let defaults = model.defaults();
    let fallback_ell = if target == Target::S {
        defaults.ell_s
    } else {
        defaults.ell_g
    };
    let (ell_best, fallback) = match fit_cost.vertex {
        Some(star) => {
            let mut near: Vec<&CalibrationSample> = samples.iter().collect();
            near.sort_by(|a, b| (a.ell - star).abs().total_cmp(&(b.ell - star).abs()));
            let best = near
                .into_iter()
                .take(3)
                .min_by(|a, b| a.j_final.total_cmp(&b.j_final))
                .expect("at least 4 samples");
            (best.ell, false)
        }
        None => (fallback_ell, true),
    };
    Ok((
        CalibrationResult {
            target,
            samples,
            fit_cost,
            fit_norm,
            ell_star: fit_cost.vertex,
            ell_star_norm: fit_norm.vertex,
            ell_best,
            fallback,
        },
        runs,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub j_initial: f64,
    pub j_final: f64,
    pub s_error: f64,
    pub g_error: f64,
    pub iterations: usize,
    pub status: Status,
}

/// Starts from `(1 - lambda) truth + lambda regular` in the unknown controls.
pub fn run_lambda_sweep(
    model: &BenchmarkModel,
    meas: &Measurements,
    target: Target,
    lambdas: &[f64],
    cfg: &DescentConfig,
) -> Result<(Vec<LambdaRow>, Vec<OptimizationTrace>)> {
    let tg = cfg.grid.time_grid()?;
    let truth = model.true_control(&tg);
    let regular = model.regular_guess(&tg);
    let (us, ug) = target.flags();
    let runs: Vec<OptimizationTrace> = lambdas
        .par_iter()
        .map(|&lambda| {
            let v0 = Control::new(
                if us {
                    convex_comb_guess(&truth.s, &regular.s, lambda)
                } else {
                    truth.s.clone()
                },
                if ug {
                    convex_comb_guess(&truth.g, &regular.g, lambda)
                } else {
                    truth.g.clone()
                },
            );
            let mut c = cfg.clone();
            c.target = target;
            descend(model, meas, &v0, &c)
        })
        .collect::<Result<_>>()?;
    let rows = lambdas
        .iter()
        .zip(&runs)
        .map(|(&lambda, r)| LambdaRow {
            lambda,
            j_initial: r.initial_cost(),
            j_final: r.final_cost(),
            s_error: r.final_record().s_error.unwrap_or(f64::NAN),
            g_error: r.final_record().g_error.unwrap_or(f64::NAN),
            iterations: r.iterations(),
            status: r.status.clone(),
        })
        .collect();
    Ok((rows, runs))
}

/// One descent of a noise ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSample {
    pub eta: f64,
    pub m: usize,
    pub case: u8,
    pub sample: usize,
    pub seed: u64,
    /// `None` when the descent failed.
    pub s_error: Option<f64>,
    pub data_mismatch: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub eta: f64,
    pub m: usize,
    pub case: u8,
    pub mean_s_error: f64,
    pub mean_data_mismatch: f64,
    pub completed: usize,
    pub samples: usize,
}

impl NoiseRow {
    pub fn complete(&self) -> bool {
        self.completed == self.samples
    }
}

/// Initial guess and configuration of one noisy s-reconstruction.
pub fn noisy_setup(
    model: &BenchmarkModel,
    noise: &NoiseSpec,
    case: u8,
    cfg: &DescentConfig,
) -> Result<(Control, DescentConfig)> {
    let tg = cfg.grid.time_grid()?;
    let aux = noisy_boundary_samples(model, noise)?;
    let piecewise = anchored_guess(model.s0, &aux, &tg)?;
    let truth = model.true_control(&tg);
    let mut c = cfg.clone();
    let s_ini = match case {
        1 => piecewise,
        2 => {
            c.centroid = Some(piecewise);
            if !(c.beta_reg > 0.0) {
                c.beta_reg = model.defaults().beta_reg;
            }
            model.regular_s_guess(&tg)
        }
        other => return Err(Error::InvalidConfig(format!("unknown noise case {other}"))),
    };
    let s_ini = s_ini.into_iter().map(|s| s.max(c.delta())).collect();
    Ok((Control::new(s_ini, truth.g), c))
}

/// Seed of sample `index` in an ensemble with master seed `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

pub fn run_noise_ensemble(
    model: &BenchmarkModel,
    meas: &Measurements,
    etas: &[f64],
    ms: &[usize],
    cases: &[u8],
    samples: usize,
    seed: u64,
    cfg: &DescentConfig,
) -> Result<(Vec<NoiseRow>, Vec<NoiseSample>)> {
    if samples == 0 {
        return Err(Error::InvalidConfig("noise ensemble needs samples >= 1".into()));
    }
    let mut jobs = Vec::new();
    for &eta in etas {
        for &m in ms {
            for &case in cases {
                for sample in 0..samples {
                    jobs.push((eta, m, case, sample));
                }
            }
        }
    }
    let mut s_cfg = cfg.clone();
    s_cfg.target = Target::S;
    let runs: Vec<NoiseSample> = jobs
        .par_iter()
        .map(|&(eta, m, case, sample)| {
            let noise = NoiseSpec {
                eta_percent: eta,
                m,
                seed: sample_seed(seed, sample),
            };
            let outcome = noisy_setup(model, &noise, case, &s_cfg).and_then(|(v0, c)| descend(model, meas, &v0, &c));
            let (s_error, data_mismatch, iterations) = match outcome {
                Ok(t) if !matches!(t.status, Status::Failed(_)) => {
                    let r = t.final_record();
                    (r.s_error, Some(r.cost.total - r.cost.j_reg), t.iterations())
                }
                _ => (None, None, 0),
            };
            NoiseSample {
                eta,
                m,
                case,
                sample,
                seed: noise.seed,
                s_error,
                data_mismatch,
                iterations,
            }
        })
        .collect();
    let rows = runs
        .chunks(samples)
        .map(|cell| {
            let ok: Vec<&NoiseSample> = cell.iter().filter(|s| s.s_error.is_some()).collect();
            let mean = |f: &dyn Fn(&NoiseSample) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|s| f(s)).sum::<f64>() / ok.len() as f64
                }
            };
            NoiseRow {
                eta: cell[0].eta,
                m: cell[0].m,
                case: cell[0].case,
                mean_s_error: mean(&|s| s.s_error.unwrap_or(f64::NAN)),
                mean_data_mismatch: mean(&|s| s.data_mismatch.unwrap_or(f64::NAN)),
                completed: ok.len(),
                samples,
            }
        })
        .collect();
    Ok((rows, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointResult {
    pub strategy: Strategy,
    pub trace: OptimizationTrace,
    pub s_relative: f64,
    pub g_relative: f64,
    /// `s_relative + g_relative`.
    pub combined: f64,
}

pub fn run_joint(
    model: &BenchmarkModel,
    meas: &Measurements,
    v0: &Control,
    strategy: Strategy,
    cfg: &DescentConfig,
) -> Result<JointResult> {
    let tg = cfg.grid.time_grid()?;
    let truth = model.true_control(&tg);
    let mut c = cfg.clone();
    c.target = Target::Both;
    c.strategy = strategy;
    let trace = descend(model, meas, v0, &c)?;
    let r = trace.final_record();
    let s_relative = r.s_error.unwrap_or(f64::NAN) / tg.norm(&truth.s);
    let g_relative = r.g_error.unwrap_or(f64::NAN) / tg.norm(&truth.g);
    Ok(JointResult {
        strategy,
        trace,
        s_relative,
        g_relative,
        combined: s_relative + g_relative,
    })
}

/// Kappa sweeps at the regular guess for each component.
pub fn run_kappa(
    model: &BenchmarkModel,
    meas: &Measurements,
    components: &[Component],
    epsilons: &[f64],
    cfg: &DescentConfig,
) -> Result<Vec<KappaRecord>> {
    let problem = cfg.problem(model, meas)?;
    let v = model.regular_guess(&problem.tg);
    let mut out = Vec::new();
    for &c in components {
        let dv = perturbation(c, &problem.tg);
        out.extend(kappa_sweep(&problem, &v, &dv, epsilons, c)?);
    }
    Ok(out)
}

fn csv_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(header)?;
    for r in rows {
        wtr.write_record(&r)?;
    }
    wtr.flush()?;
    Ok(())
}

fn e(x: f64) -> String {
    format!("{x:e}")
}

fn opt_e(x: Option<f64>) -> String {
    x.map(e).unwrap_or_default()
}

fn status_label(s: &Status) -> String {
    match s {
        Status::Failed(_) => "failed".into(),
        other => serde_json::to_value(other)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
    }
}

fn write_run(dir: &Path, trace: &OptimizationTrace, tg: &TimeGrid) -> Result<()> {
    fs::create_dir_all(dir)?;
    trace.write_csv(&dir.join("trace.csv"))?;
    trace.write_controls_csv(&dir.join("controls_final.csv"), tg)?;
    Ok(())
}

#[derive(Serialize)]
struct Echo<'a> {
    spec: &'a ExperimentSpec,
    descent: &'a DescentConfig,
}

#[derive(Serialize)]
struct Timing {
    total_seconds: f64,
    runs: Vec<f64>,
}

/// What a finished experiment wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub output: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Runs `spec` and writes its results under `spec.output`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_in_pool(spec))
}

fn run_in_pool(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let start = Instant::now();
    let model = spec.benchmark()?;
    let cfg = spec.descent_config()?;
    let tg = cfg.grid.time_grid()?;
    let meas = synthesize_measurements(&model, &cfg.grid, spec.synthesis)?;
    let out = spec.output.clone();
    fs::create_dir_all(&out)?;
    let echo = serde_json::to_string_pretty(&Echo { spec, descent: &cfg })?;
    fs::write(out.join("spec.json"), echo + "\n")?;
    info!(
        "experiment {:?} for model {} into {}",
        spec.kind,
        spec.model,
        out.display()
    );

    let mut runs_time = Vec::new();
    match spec.kind {
        ExperimentKind::Reconstruct => {
            let target = spec.target_or(cfg.target);
            let mut c = cfg.clone();
            c.target = target;
            let (v0, c) = match spec.noise {
                Some(n) => {
                    let noise = NoiseSpec {
                        eta_percent: n.eta,
                        m: n.m,
                        seed: spec.seed,
                    };
                    let (mut v0, c) = noisy_setup(&model, &noise, n.case, &c)?;
                    if target.flags().1 {
                        v0.g = model.regular_g_guess(&tg);
                    }
                    (v0, c)
                }
                None => (initial_control(&model, &tg, target), c),
            };
            let trace = descend(&model, &meas, &v0, &c)?;
            write_run(&out, &trace, &tg)?;
            trace.write_json(&out.join("trace.json"))?;
            runs_time.push(trace.wall_time());
            let truth = model.true_control(&tg);
            let r = trace.final_record();
            csv_rows(
                &out.join("summary.csv"),
                &[
                    "status",
                    "iterations",
                    "j_initial",
                    "j_final",
                    "s_error",
                    "g_error",
                    "s_relative",
                    "g_relative",
                ],
                [vec![
                    status_label(&trace.status),
                    trace.iterations().to_string(),
                    e(trace.initial_cost()),
                    e(trace.final_cost()),
                    opt_e(r.s_error),
                    opt_e(r.g_error),
                    opt_e(r.s_error.map(|x| x / tg.norm(&truth.s))),
                    opt_e(r.g_error.map(|x| x / tg.norm(&truth.g))),
                ]],
            )?;
        }
        ExperimentKind::CalibrateEll => {
            let target = spec.target_or(Target::S);
            let (res, traces) = calibrate_ell(&model, &meas, target, &spec.ell_values, &cfg)?;
            for (i, t) in traces.iter().enumerate() {
                write_run(&out.join("cells").join(format!("{i:03}")), t, &tg)?;
                runs_time.push(t.wall_time());
            }
            csv_rows(
                &out.join("summary.csv"),
                &["ell", "j_final", "solution_norm", "iterations"],
                res.samples
                    .iter()
                    .map(|s| vec![e(s.ell), e(s.j_final), e(s.solution_norm), s.iterations.to_string()]),
            )?;
            fs::write(out.join("calibration.json"), serde_json::to_string_pretty(&res)? + "\n")?;
        }
        ExperimentKind::LambdaSweep => {
            let target = spec.target_or(Target::S);
            let (rows, traces) = run_lambda_sweep(&model, &meas, target, &spec.lambdas, &cfg)?;
            for (i, t) in traces.iter().enumerate() {
                write_run(&out.join("cells").join(format!("{i:03}")), t, &tg)?;
                runs_time.push(t.wall_time());
            }
            csv_rows(
                &out.join("summary.csv"),
                &[
                    "lambda",
                    "j_initial",
                    "j_final",
                    "s_error",
                    "g_error",
                    "iterations",
                    "status",
                ],
                rows.iter().map(|r| {
                    vec![
                        e(r.lambda),
                        e(r.j_initial),
                        e(r.j_final),
                        e(r.s_error),
                        e(r.g_error),
                        r.iterations.to_string(),
                        status_label(&r.status),
                    ]
                }),
            )?;
        }
        ExperimentKind::NoiseEnsemble => {
            let cases = if spec.cases.is_empty() {
                vec![1]
            } else {
                spec.cases.clone()
            };
            let (rows, samples) = run_noise_ensemble(
                &model,
                &meas,
                &spec.etas,
                &spec.ms,
                &cases,
                spec.samples.unwrap_or(10),
                spec.seed,
                &cfg,
            )?;
            csv_rows(
                &out.join("summary.csv"),
                &[
                    "eta",
                    "m",
                    "case",
                    "mean_s_error",
                    "mean_data_mismatch",
                    "completed",
                    "samples",
                ],
                rows.iter().map(|r| {
                    vec![
                        e(r.eta),
                        r.m.to_string(),
                        r.case.to_string(),
                        e(r.mean_s_error),
                        e(r.mean_data_mismatch),
                        r.completed.to_string(),
                        r.samples.to_string(),
                    ]
                }),
            )?;
            csv_rows(
                &out.join("samples.csv"),
                &[
                    "eta",
                    "m",
                    "case",
                    "sample",
                    "seed",
                    "s_error",
                    "data_mismatch",
                    "iterations",
                ],
                samples.iter().map(|s| {
                    vec![
                        e(s.eta),
                        s.m.to_string(),
                        s.case.to_string(),
                        s.sample.to_string(),
                        s.seed.to_string(),
                        opt_e(s.s_error),
                        opt_e(s.data_mismatch),
                        s.iterations.to_string(),
                    ]
                }),
            )?;
        }
        ExperimentKind::Joint => {
            let strategies = if spec.strategies.is_empty() {
                vec![cfg.strategy]
            } else {
                spec.strategies.clone()
            };
            let v0 = model.regular_guess(&tg);
            let results: Vec<JointResult> = strategies
                .par_iter()
                .map(|&s| run_joint(&model, &meas, &v0, s, &cfg))
                .collect::<Result<_>>()?;
            for (i, r) in results.iter().enumerate() {
                write_run(&out.join("cells").join(format!("{i:03}")), &r.trace, &tg)?;
                runs_time.push(r.trace.wall_time());
            }
            csv_rows(
                &out.join("summary.csv"),
                &[
                    "strategy",
                    "status",
                    "iterations",
                    "j_initial",
                    "j_final",
                    "s_relative",
                    "g_relative",
                    "combined",
                ],
                results.iter().map(|r| {
                    vec![
                        r.strategy.to_string(),
                        status_label(&r.trace.status),
                        r.trace.iterations().to_string(),
                        e(r.trace.initial_cost()),
                        e(r.trace.final_cost()),
                        e(r.s_relative),
                        e(r.g_relative),
                        e(r.combined),
                    ]
                }),
            )?;
        }
        ExperimentKind::Kappa => {
            let components = if spec.components.is_empty() {
                vec![Component::S, Component::G]
            } else {
                spec.components.clone()
            };
            let epsilons = if spec.epsilons.is_empty() {
                log_spaced(1e-5, 1e-2, 10)
            } else {
                spec.epsilons.clone()
            };
            let records = run_kappa(&model, &meas, &components, &epsilons, &cfg)?;
            write_kappa_csv(&out.join("kappa.csv"), &records)?;
            let lo = epsilons.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = epsilons.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            csv_rows(
                &out.join("summary.csv"),
                &["component", "median_abs_kappa_minus_1", "n", "h_x"],
                components.iter().map(|&c| {
                    let recs: Vec<KappaRecord> = records.iter().filter(|r| r.component == c).cloned().collect();
                    vec![
                        c.label().to_string(),
                        opt_e(median_deviation(&recs, lo, hi)),
                        cfg.grid.n.to_string(),
                        e(cfg.grid.h_x),
                    ]
                }),
            )?;
        }
    }

    let timing = Timing {
        total_seconds: start.elapsed().as_secs_f64(),
        runs: runs_time,
    };
    fs::write(out.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
    let mut files = Vec::new();
    collect_files(&out, &mut files)?;
    files.sort();
    Ok(ExperimentReport { output: out, files })
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimize::Strategy;
    use proptest::prelude::*;

    #[test]
    fn exact_parabola_vertex() {
        let xs = [0.1, 0.2, 0.35, 0.5, 0.8];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * (x - 0.42) * (x - 0.42) + 0.7).collect();
        let fit = fit_quadratic(&xs, &ys).unwrap();
        assert!((fit.vertex.unwrap() - 0.42).abs() < 1e-10);
        assert!((fit.c2 - 3.0).abs() < 1e-9 && (fit.c0 - (0.7 + 3.0 * 0.42 * 0.42)).abs() < 1e-9);
        assert!(fit.residual < 1e-12 && !fit.degenerate);
    }

    #[test]
    fn concave_fit_is_degenerate() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [0.0, 1.0, 1.0, 0.0];
        let fit = fit_quadratic(&xs, &ys).unwrap();
        assert!(fit.degenerate && fit.vertex.is_none());
    }

    #[test]
    fn vertex_is_clamped() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| (x - 10.0) * (x - 10.0)).collect();
        assert_eq!(fit_quadratic(&xs, &ys).unwrap().vertex, Some(4.0));
    }

    proptest! {
        #[test]
        fn vertex_recovered(a in 0.1f64..10.0, v in 0.0f64..1.0, c in -5.0f64..5.0) {
            let xs: Vec<f64> = (0..6).map(|i| i as f64 * 0.2).collect();
            let ys: Vec<f64> = xs.iter().map(|x| a * (x - v) * (x - v) + c).collect();
            let fit = fit_quadratic(&xs, &ys).unwrap();
            prop_assert!((fit.vertex.unwrap() - v).abs() < 1e-8);
        }
    }

    #[test]
    fn spec_parsing_and_overrides() {
        let text = r#"
            model = 2
            kind = "lambda-sweep"
            lambdas = [0.0, 0.5]
            output = "out"
            [descent]
            max_iter = 7
            strategy = "interleave:3"
            [descent.grid]
            n = 50
        "#;
        let spec = ExperimentSpec::from_toml(text).unwrap();
        let cfg = spec.descent_config().unwrap();
        assert_eq!(cfg.max_iter, 7);
        assert_eq!(cfg.strategy, Strategy::Interchanging(3));
        assert_eq!(cfg.grid.n, 50);
        assert_eq!(cfg.grid.h_x, 0.01);
        // model-2 calibrated length scales survive
        assert_eq!((cfg.ell_s, cfg.ell_g), (0.2, 0.6));
    }

    #[test]
    fn spec_rejections() {
        assert!(ExperimentSpec::from_toml("model = 4\nkind = \"kappa\"").is_err());
        assert!(ExperimentSpec::from_toml("model = 1\nkind = \"calibrate-ell\"\nell_values = [0.1, 0.2]").is_err());
        assert!(ExperimentSpec::from_toml("model = 1\nkind = \"kappa\"\ncolour = 3").is_err());
        assert!(ExperimentSpec::from_toml("model = 1\nkind = \"kappa\"\n[descent]\ntoll = 1.0").is_err());
        assert!(ExperimentSpec::from_toml("model = 1\nkind = \"noise-ensemble\"\netas = [1.0]").is_err());
    }

    #[test]
    fn seeds_are_offsets() {
        assert_eq!(sample_seed(100, 0), 100);
        assert_eq!(sample_seed(100, 4), 104);
        assert_eq!(sample_seed(u64::MAX, 1), 0);
    }

    #[test]
    fn zero_noise_single_sample_is_regular_guess() {
        let m = crate::models::model2();
        let cfg = DescentConfig {
            grid: crate::grid::GridConfig::new(40, 0.02),
            ..DescentConfig::for_model(&m)
        };
        let noise = NoiseSpec {
            eta_percent: 0.0,
            m: 1,
            seed: 5,
        };
        let (v0, c) = noisy_setup(&m, &noise, 1, &cfg).unwrap();
        let tg = cfg.grid.time_grid().unwrap();
        let regular = m.regular_s_guess(&tg);
        for (a, b) in v0.s.iter().zip(&regular) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(c.centroid.is_none());
        let (_, c2) = noisy_setup(&m, &noise, 2, &cfg).unwrap();
        assert_eq!(c2.beta_reg, 1e3);
        assert!(c2.centroid.is_some());
    }
}
