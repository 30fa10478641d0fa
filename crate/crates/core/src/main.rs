use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use stefan_core::experiments::{run_experiment, ExperimentKind, ExperimentSpec, NoiseOptions};
use stefan_core::models::SynthesisMode;
use stefan_core::optimize::{Strategy, Target};
use stefan_core::verify::{log_spaced, Component};
use stefan_core::Result;

#[derive(Parser)]
#[command(name = "stefan-inverse", version, about = "Inverse Stefan problem reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Synthesis {
    Solver,
    Analytic,
}

impl From<Synthesis> for SynthesisMode {
    fn from(s: Synthesis) -> Self {
        match s {
            Synthesis::Solver => SynthesisMode::Solver,
            Synthesis::Analytic => SynthesisMode::Analytic,
        }
    }
}

#[derive(clap::Args)]
struct GridArgs {
    /// Number of time steps.
    #[arg(long)]
    n: Option<usize>,
    /// Maximal spatial step.
    #[arg(long = "h-x")]
    h_x: Option<f64>,
    /// How the measurements are synthesized.
    #[arg(long, value_enum, default_value = "solver")]
    synthesis: Synthesis,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML file.
    Run { spec: PathBuf },
    /// Gradient check by the kappa ratio at the regular initial guess.
    Kappa {
        #[arg(long)]
        model: u8,
        #[command(flatten)]
        grid: GridArgs,
        /// Components to check (s, s-terminal, g).
        #[arg(long = "component", value_parser = parse_component, num_args = 1..)]
        components: Vec<Component>,
        #[arg(long, default_value_t = 1e-5)]
        eps_min: f64,
        #[arg(long, default_value_t = 1e-2)]
        eps_max: f64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value = "results/kappa")]
        out: PathBuf,
    },
    /// A single reconstruction.
    Reconstruct {
        #[arg(long)]
        model: u8,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, value_parser = parse_target, default_value = "s")]
        target: Target,
        #[arg(long, value_enum, default_value = "on")]
        precond: Toggle,
        #[arg(long = "ell-s")]
        ell_s: Option<f64>,
        #[arg(long = "ell-g")]
        ell_g: Option<f64>,
        /// simultaneous or interleave:N
        #[arg(long, value_parser = parse_strategy, default_value = "simultaneous")]
        strategy: Strategy,
        /// Noise level in percent on the auxiliary boundary samples.
        #[arg(long = "noise-eta")]
        noise_eta: Option<f64>,
        /// Number of auxiliary boundary samples.
        #[arg(long = "noise-m")]
        noise_m: Option<usize>,
        /// 1: samples give the initial guess; 2: they give the centroid.
        #[arg(long, default_value_t = 1)]
        case: u8,
        /// Tikhonov weight.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "max-iter")]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value = "results/reconstruct")]
        out: PathBuf,
    },
}

fn parse_component(s: &str) -> std::result::Result<Component, String> {
    Component::parse(s).map_err(|e| e.to_string())
}

fn parse_target(s: &str) -> std::result::Result<Target, String> {
    s.parse().map_err(|e: stefan_core::Error| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: stefan_core::Error| e.to_string())
}

fn base_spec(model: u8, kind: ExperimentKind, out: PathBuf, grid: &GridArgs) -> ExperimentSpec {
    let mut spec = ExperimentSpec {
        model,
        kind,
        output: out,
        seed: 0,
        synthesis: grid.synthesis.into(),
        target: None,
        ell_values: Vec::new(),
        lambdas: Vec::new(),
        etas: Vec::new(),
        ms: Vec::new(),
        cases: Vec::new(),
        samples: None,
        epsilons: Vec::new(),
        components: Vec::new(),
        strategies: Vec::new(),
        noise: None,
        workers: None,
        descent: toml::Table::new(),
    };
    let mut g = toml::Table::new();
    if let Some(n) = grid.n {
        g.insert("n".into(), toml::Value::Integer(n as i64));
    }
    if let Some(h) = grid.h_x {
        g.insert("h_x".into(), toml::Value::Float(h));
    }
    if !g.is_empty() {
        spec.descent.insert("grid".into(), toml::Value::Table(g));
    }
    spec
}

fn execute(cli: Cli) -> Result<()> {
    let spec = match cli.command {
        Command::Run { spec } => ExperimentSpec::from_file(&spec)?,
        Command::Kappa {
            model,
            grid,
            components,
            eps_min,
            eps_max,
            count,
            out,
        } => {
            let mut spec = base_spec(model, ExperimentKind::Kappa, out, &grid);
            spec.components = components;
            spec.epsilons = log_spaced(eps_min, eps_max, count);
            spec
        }
        Command::Reconstruct {
            model,
            grid,
            target,
            precond,
            ell_s,
            ell_g,
            strategy,
            noise_eta,
            noise_m,
            case,
            beta,
            seed,
            max_iter,
            tol,
            out,
        } => {
            let mut spec = base_spec(model, ExperimentKind::Reconstruct, out, &grid);
            spec.target = Some(target);
            spec.seed = seed;
            let d = &mut spec.descent;
            let on = matches!(precond, Toggle::On);
            d.insert("use_precond_s".into(), toml::Value::Boolean(on));
            d.insert("use_precond_g".into(), toml::Value::Boolean(on));
            d.insert("strategy".into(), toml::Value::String(strategy.to_string()));
            for (key, value) in [("ell_s", ell_s), ("ell_g", ell_g), ("beta_reg", beta), ("tol", tol)] {
                if let Some(v) = value {
                    d.insert(key.into(), toml::Value::Float(v));
                }
            }
            if let Some(m) = max_iter {
                d.insert("max_iter".into(), toml::Value::Integer(m as i64));
            }
            if noise_eta.is_some() || noise_m.is_some() {
                spec.noise = Some(NoiseOptions {
                    eta: noise_eta.unwrap_or(0.0),
                    m: noise_m.unwrap_or(1),
                    case,
                });
            }
            spec.validate()?;
            spec
        }
    };
    let report = run_experiment(&spec)?;
    let summary = report.output.join("summary.csv");
    if let Ok(text) = std::fs::read_to_string(&summary) {
        print!("{text}");
    }
    for f in &report.files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
