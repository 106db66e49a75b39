//! `sinkcheck`: config-driven verification runs, rate predictions and the
//! rate catalog.

mod config;
mod plot;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sinkcheck::rate_theory::{rate_catalog, RateCertificate, Setting, CATALOG};

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "sinkcheck", about = "Numerical checks of Sinkhorn convergence rates", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the checks of a JSON experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for independent (instance, ε) cells.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate one catalog rate.
    Predict(PredictArgs),
    /// List catalog settings, or evaluate the rate specs of a config.
    Catalog {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the version.
    Version,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    setting: String,
    #[arg(long)]
    tau: f64,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "sigma-norm")]
    sigma_norm: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Curvature or tail constant L.
    #[arg(long = "L")]
    l: Option<f64>,
    /// Radius R; for `compact` it stands in for ‖g‖ when --g-norm is absent.
    #[arg(long = "R")]
    r: Option<f64>,
    #[arg(long = "C")]
    c: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Upper Hessian bound H(c).
    #[arg(long = "H", alias = "h-upper")]
    h_upper: Option<f64>,
    /// Lower Hessian bound h(c).
    #[arg(long = "h", alias = "h-lower")]
    h_lower: Option<f64>,
    #[arg(long)]
    lip: Option<f64>,
    #[arg(long = "c-rho")]
    c_rho: Option<f64>,
    #[arg(long = "g-norm")]
    g_norm: Option<f64>,
    #[arg(long = "grad-norm")]
    grad_norm: Option<f64>,
    #[arg(long = "K")]
    k: Option<f64>,
}

impl PredictArgs {
    fn params(&self) -> BTreeMap<String, f64> {
        let named = [
            ("lambda", self.lambda),
            ("sigma_norm", self.sigma_norm),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("l", self.l),
            ("r", self.r),
            ("c", self.c),
            ("delta", self.delta),
            ("h_upper", self.h_upper),
            ("h_lower", self.h_lower),
            ("lip", self.lip),
            ("c_rho", self.c_rho),
            ("g_norm", self.g_norm),
            ("grad_norm", self.grad_norm),
            ("k", self.k),
        ];
        let mut params: BTreeMap<String, f64> =
            named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect();
        if self.setting == "compact" && self.g_norm.is_none() {
            if let Some(r) = self.r {
                params.insert("g_norm".into(), r);
            }
        }
        params
    }
}

const USAGE: u8 = 2;

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(USAGE)
}

fn cert_row(cert: &RateCertificate, setting: &Setting) -> Vec<String> {
    let params: Vec<String> = setting.params().iter().map(|(k, v)| format!("{k}={v}")).collect();
    vec![
        cert.setting.to_string(),
        params.join(";"),
        format!("{}", cert.tau),
        format!("{}", cert.epsilon),
        format!("{:e}", cert.lambda),
        format!("{:e}", cert.contraction),
        format!("{:e}", cert.threshold),
        cert.threshold_ok.to_string(),
        cert.certified.to_string(),
    ]
}

const CERT_HEADER: [&str; 9] =
    ["setting", "parameters", "tau", "epsilon", "lambda", "contraction", "threshold", "threshold_ok", "certified"];

fn print_csv(rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record(CERT_HEADER)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()
}

fn predict(args: &PredictArgs) -> ExitCode {
    let setting = match Setting::from_params(&args.setting, &args.params()) {
        Ok(s) => s,
        Err(e) => return usage_error(e),
    };
    let cert = match rate_catalog(&setting, args.tau, args.eps) {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    println!("setting      {}", cert.setting);
    println!("rate         {}", cert.formula);
    println!("tau, eps     {}, {}", cert.tau, cert.epsilon);
    println!("Lambda       {:e}", cert.lambda);
    println!("contraction  {}", cert.contraction);
    println!("threshold    {:e} (ok: {})", cert.threshold, cert.threshold_ok);
    println!("certified    {}", cert.certified);
    println!();
    match print_csv(&[cert_row(&cert, &setting)]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => usage_error(e),
    }
}

fn catalog(config: Option<&PathBuf>) -> ExitCode {
    let Some(path) = config else {
        let mut w = csv::Writer::from_writer(std::io::stdout());
        let listed = (|| -> std::io::Result<()> {
            w.write_record(["setting", "parameters", "rate"])?;
            for e in &CATALOG {
                w.write_record([e.tag, &e.params.join(";"), e.formula])?;
            }
            w.flush()
        })();
        return listed.map_or_else(usage_error, |()| ExitCode::SUCCESS);
    };
    let config = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    let mut rows = Vec::new();
    for inst in &config.instances {
        let Some(rate) = &inst.rate else { continue };
        let Some(tau) = run::tau_for(inst) else {
            return usage_error(format!("{}: no τ given and none known for ν", inst.name));
        };
        let setting = match Setting::from_params(&rate.setting, &rate.params) {
            Ok(s) => s,
            Err(e) => return usage_error(format!("{}: {e}", inst.name)),
        };
        for &eps in &config.epsilons {
            match rate_catalog(&setting, tau, eps) {
                Ok(cert) => rows.push(cert_row(&cert, &setting)),
                Err(e) => return usage_error(format!("{}: {e}", inst.name)),
            }
        }
    }
    print_csv(&rows).map_or_else(usage_error, |()| ExitCode::SUCCESS)
}

fn run_command(config: &Path, out: Option<PathBuf>, seed: Option<u64>, jobs: Option<usize>) -> ExitCode {
    let mut config = match ExperimentConfig::load(config) {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(jobs) = jobs {
        if jobs == 0 {
            return usage_error("--jobs must be at least 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            return usage_error(e);
        }
    }
    let out = out.or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("sinkcheck-out"));
    match run::run(&config, &out) {
        Ok(report) => {
            run::print_report(&report);
            if report.all_hard_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => usage_error(format!("writing {}: {e}", out.display())),
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, out, seed, jobs } => run_command(&config, out, seed, jobs),
        Command::Predict(args) => predict(&args),
        Command::Catalog { config } => catalog(config.as_ref()),
        Command::Version => {
            println!("sinkcheck {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
    }
}
