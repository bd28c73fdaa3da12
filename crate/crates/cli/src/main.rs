use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use lab_core::enumeration::{enumerate_ball, enumerate_ball_bfs, enumerate_ball_direct, Gamma, GammaSpec};
use lab_core::geometry::GroupElement;
use lab_core::harness::{build_start, emit, evaluate, load_report, run, ExperimentConfig};
use lab_core::limit_law::{classify_start, sample_predicted, ClassifyOptions};
use lab_core::quadrature::{eval_w_infty, eval_w_p0, eval_w_theta0, QuadratureSpec};
use lab_core::{LabError, Mat, NormSpec};

#[derive(Parser)]
#[command(name = "lab", version, about = "Norm-ball orbit averages for lattices in SO(n,1)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write report.json, curves.csv, histograms.csv.
    Run {
        config: PathBuf,
        /// Overrides out_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enumerate Γ_T and print it as JSON.
    Enumerate {
        /// "phi-sl2z" or a path to a GammaSpec JSON file.
        #[arg(long, default_value = "phi-sl2z")]
        gamma: String,
        /// "frobenius", "max", or a NormSpec JSON object.
        #[arg(long, default_value = "frobenius")]
        norm: String,
        #[arg(short = 'T', long = "T")]
        t: f64,
        #[arg(long, value_enum, default_value_t = Method::Auto)]
        method: Method,
        #[arg(long, default_value_t = 4.0)]
        kappa: f64,
        #[arg(long, default_value_t = 2_000_000)]
        cap: usize,
        /// Print only T and the count.
        #[arg(long)]
        count_only: bool,
    },
    /// Evaluate a limiting density profile and print it as JSON.
    Density {
        #[arg(long, value_enum)]
        case: DensityKind,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        r: usize,
        /// Angle of the degenerate plane (degenerate-low only).
        #[arg(long, default_value_t = 0.0)]
        theta0: f64,
        /// Row-major g₀ as a JSON array; defaults to the identity.
        #[arg(long)]
        g0: Option<String>,
        #[arg(long, default_value = "frobenius")]
        norm: String,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Classify the config's start and print draws from the predicted law.
    Predict {
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Re-evaluate the verdicts of a finished run.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Auto,
    Direct,
    Bfs,
}

#[derive(Clone, Copy, ValueEnum)]
enum DensityKind {
    Nondegenerate,
    DegenerateHigh,
    DegenerateLow,
}

/// Exit code 2 for bad input, 1 for failed thresholds.
enum Failure {
    Input(anyhow::Error),
    Threshold,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        Failure::Input(e.into())
    }
}

fn parse_norm(s: &str) -> anyhow::Result<NormSpec> {
    Ok(match s {
        "frobenius" => NormSpec::Frobenius,
        "max" | "max_entry" => NormSpec::MaxEntry,
        _ => serde_json::from_str(s).with_context(|| format!("unrecognized norm {s:?}"))?,
    })
}

fn parse_gamma(s: &str) -> anyhow::Result<Gamma> {
    if s == "phi-sl2z" {
        return Ok(Gamma::phi_sl2z());
    }
    let text = std::fs::read_to_string(s).with_context(|| format!("reading {s}"))?;
    let spec: GammaSpec = serde_json::from_str(&text).with_context(|| format!("parsing {s}"))?;
    Ok(Gamma::new(spec)?)
}

fn parse_g0(s: Option<&str>, n: usize) -> anyhow::Result<GroupElement> {
    let Some(s) = s else {
        return Ok(GroupElement::identity(n));
    };
    let v: Vec<f64> = serde_json::from_str(s).context("g0 must be a JSON array of numbers")?;
    let d = n + 1;
    if v.len() != d * d {
        bail!("g0 needs {} entries", d * d);
    }
    Ok(GroupElement::new(Mat::from_row_slice(d, d, &v))?)
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run(&cfg)?;
            let dir = out
                .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            for p in emit(&report, &dir)? {
                eprintln!("wrote {}", p.display());
            }
            for v in &report.verdicts {
                println!("{} {} = {} (threshold {})", if v.pass { "PASS" } else { "FAIL" }, v.name, v.value, v.threshold);
            }
            if !report.pass {
                return Err(Failure::Threshold);
            }
        }
        Command::Enumerate { gamma, norm, t, method, kappa, cap, count_only } => {
            let g = parse_gamma(&gamma)?;
            let norm = parse_norm(&norm)?;
            let ball = match method {
                Method::Auto => enumerate_ball(&g, &norm, t, cap)?,
                Method::Direct => enumerate_ball_direct(&g, &norm, t)?,
                Method::Bfs => enumerate_ball_bfs(&g, &g.generators(&norm)?, &norm, t, kappa, cap)?,
            };
            if count_only {
                println!("{{\"T\": {}, \"count\": {}}}", ball.t, ball.count);
            } else {
                print_json(&ball.to_json())?;
            }
        }
        Command::Density { case, n, r, theta0, g0, norm, grid, samples, seed } => {
            let norm = parse_norm(&norm)?;
            let spec = QuadratureSpec::default().with_samples(samples).with_seed(seed);
            let profile = match case {
                DensityKind::Nondegenerate => eval_w_p0(r, n, &parse_g0(g0.as_deref(), n)?, &norm, grid, &spec)?,
                DensityKind::DegenerateHigh => eval_w_infty(r, n, &parse_g0(g0.as_deref(), n)?, &norm, grid, &spec)?,
                DensityKind::DegenerateLow => eval_w_theta0(theta0, &norm, grid, &spec)?,
            };
            print_json(&profile)?;
        }
        Command::Predict { config, samples } => {
            let cfg = ExperimentConfig::load(&config)?;
            let gamma = Gamma::new(cfg.gamma.clone())?;
            let (start, _) = build_start(&cfg, &gamma)?;
            let opts = ClassifyOptions {
                norm: cfg.norm.clone(),
                grid: cfg.density_grid,
                quadrature: cfg.quadrature.clone(),
                n_max: cfg.special_n_max,
            };
            let law = classify_start(&start, &gamma, &opts)?;
            let draws = sample_predicted(&law, samples, cfg.seed)?;
            print_json(&serde_json::json!({ "law": law.name(), "samples": draws }))?;
        }
        Command::Report { dir } => {
            let report = load_report(Path::new(&dir))?;
            let verdicts = evaluate(&report.rows, &report.config.thresholds);
            for r in &report.rows {
                println!("T = {} count = {} ks = {:?} shape = {:?}", r.t, r.count, r.ks_theta, r.shape_discrepancy);
            }
            for v in &verdicts {
                println!("{} {} = {} (threshold {})", if v.pass { "PASS" } else { "FAIL" }, v.name, v.value, v.threshold);
            }
            if !(verdicts.iter().all(|v| v.pass) && report.rows.iter().all(|r| r.complete)) {
                return Err(Failure::Threshold);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(threads) = std::env::var("LAB_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if threads > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Threshold) => ExitCode::from(1),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
