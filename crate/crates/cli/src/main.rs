use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use nlmemboot::bootstrap::{run_bootstrap, summarize_run, BootstrapConfig, EtaDraw, ResidualPool, Scheme, Strata};
use nlmemboot::io::{self, read_json, write_atomic, write_json};
use nlmemboot::model::{simulate_dataset, Dataset, PopulationParams};
use nlmemboot::plot;
use nlmemboot::saem::{fit_saem, sample_conditional, ConditionalDraws, ConditionalSettings, PopulationEstimate, SaemSettings};
use nlmemboot::study::{self, scenario_preset, Method, ModelKind, ScenarioFile, ScenarioSpec, StudyOptions, StudyStore};
use nlmemboot::{Error, Result};

/// SAEM fits, bootstrap confidence intervals and coverage studies for
/// sigmoid Emax mixed-effects models.
///
/// Exit codes: 0 success, 2 invalid input or configuration, 3 estimation
/// failure, 4 missing prerequisite artifact.
#[derive(Parser, Debug)]
#[command(name = "nlmemboot", version)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "NLMEMBOOT_OUT", default_value = "nlmemboot-out")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct FitArgs {
    /// Dataset CSV with columns id,x,y.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "emax", value_parser = parse_model)]
    model: ModelKind,
    /// Initial population parameters (JSON); derived from the data if absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 12345)]
    seed: u64,
    /// Conditional draws per subject saved after the fit; 0 skips sampling.
    #[arg(long = "M", default_value_t = 100)]
    m: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a dataset and sample the conditional distributions.
    Fit {
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Bootstrap a previous fit stored in the output directory.
    Bootstrap {
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Schemes to run (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "case", value_parser = parse_scheme)]
        scheme: Vec<Scheme>,
        #[arg(long = "B", default_value_t = 200)]
        b: usize,
        /// Stratify the case bootstrap by group label or by dose pattern.
        #[arg(long, value_parser = parse_strata)]
        stratify: Option<Strata>,
        /// Residual pool of the cnp scheme.
        #[arg(long, default_value = "per-subject", value_parser = parse_pool)]
        cnp_pool: ResidualPool,
        /// Random-effect draw of the cnp scheme.
        #[arg(long, default_value = "subject-then-sample", value_parser = parse_eta_draw)]
        cnp_eta: EtaDraw,
        /// Fit the dataset first instead of reading an earlier fit.
        #[arg(long)]
        fit_first: bool,
    },
    /// Simulate a dataset from a scenario.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run a coverage study and write tables and figures.
    Study {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Worker threads (0: all cores).
        #[arg(long, default_value_t = 0)]
        parallelism: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Rebuild tables and figures of a study from its saved records.
    Report {
        /// Study directory written by `study`.
        #[arg(long)]
        study: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct ScenarioArgs {
    /// Preset name (see the error message of an unknown name for the list).
    #[arg(long, conflicts_with = "scenario_file")]
    scenario: Option<String>,
    /// Scenario file (TOML).
    #[arg(long)]
    scenario_file: Option<PathBuf>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long = "B")]
    b: Option<usize>,
    #[arg(long = "M")]
    m: Option<usize>,
    /// Interval levels, for example `0.1,0.05`.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Methods, for example `asymptotic,case,par`.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    /// Full-size profile: K = 200 and B = 200 unless set explicitly.
    #[arg(long)]
    long_run: bool,
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_strata(s: &str) -> std::result::Result<Strata, String> {
    match s {
        "group" => Ok(Strata::Group),
        "design" => Ok(Strata::DesignPattern),
        _ => Err("expected `group` or `design`".into()),
    }
}

fn parse_pool(s: &str) -> std::result::Result<ResidualPool, String> {
    match s {
        "per-subject" => Ok(ResidualPool::PerSubject),
        "global" => Ok(ResidualPool::Global),
        _ => Err("expected `per-subject` or `global`".into()),
    }
}

fn parse_eta_draw(s: &str) -> std::result::Result<EtaDraw, String> {
    match s {
        "subject-then-sample" => Ok(EtaDraw::SubjectThenSample),
        "pooled" => Ok(EtaDraw::PooledFlat),
        _ => Err("expected `subject-then-sample` or `pooled`".into()),
    }
}

/// Contents of `fit.json`.
#[derive(Serialize, Deserialize)]
struct FitFile {
    model: ModelKind,
    data: PathBuf,
    settings: SaemSettings,
    estimate: PopulationEstimate,
}

const FIT_FILE: &str = "fit.json";
const DRAWS_FILE: &str = "conditional.json";

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::EstimationFailure { .. } | Error::NumericFailure(_) | Error::SamplerFailure(_) => 3,
        Error::MissingPrerequisite(_) => 4,
        _ => 2,
    }
}

/// Starting values from the data: E0 from the lowest dose, Emax from the
/// spread of dose means, ED50 from the median positive dose.
fn default_init(ds: &Dataset, model: ModelKind) -> PopulationParams {
    let mut by_dose: Vec<(f64, f64, usize)> = Vec::new();
    for (s, y) in ds.design.subjects.iter().zip(&ds.observations) {
        for (&x, &v) in s.doses.iter().zip(y) {
            match by_dose.iter_mut().find(|e| e.0 == x) {
                Some(e) => {
                    e.1 += v;
                    e.2 += 1;
                }
                None => by_dose.push((x, v, 1)),
            }
        }
    }
    by_dose.sort_by(|a, b| a.0.total_cmp(&b.0));
    let means: Vec<f64> = by_dose.iter().map(|e| e.1 / e.2 as f64).collect();
    let e0 = means[0].abs().max(1e-3);
    let top = means.iter().cloned().fold(f64::MIN, f64::max);
    let emax = (top - means[0]).abs().max(1e-3);
    let positive: Vec<f64> = by_dose.iter().map(|e| e.0).filter(|&x| x > 0.0).collect();
    let ed50 = if positive.is_empty() { 1.0 } else { positive[positive.len() / 2] };
    let mut theta = PopulationParams::reference_emax(1.0, 0.2);
    theta.mu = vec![e0, emax, ed50, if model == ModelKind::Hill { 1.5 } else { 1.0 }];
    theta.omega.fill(0.0);
    theta.omega.fill_diagonal(0.2);
    theta
}

fn do_fit(fit: &FitArgs, out: &Path) -> Result<(Dataset, PopulationEstimate, Option<ConditionalDraws>)> {
    let ds = io::read_dataset_csv(&fit.data)?;
    let spec = fit.model.spec();
    let init = match &fit.init {
        Some(p) => read_json::<PopulationParams>(p)?,
        None => default_init(&ds, fit.model),
    };
    let settings = SaemSettings { seed: fit.seed, ..Default::default() };
    let estimate = fit_saem(&spec, &ds, &init, &settings)?;
    write_json(&out.join(FIT_FILE), &FitFile { model: fit.model, data: fit.data.clone(), settings, estimate: estimate.clone() })?;
    info!("wrote {}", out.join(FIT_FILE).display());
    let draws = if fit.m > 0 {
        let d = sample_conditional(&spec, &ds, &estimate.theta_hat, fit.m, &ConditionalSettings::default(), fit.seed)?;
        write_json(&out.join(DRAWS_FILE), &d)?;
        Some(d)
    } else {
        let _ = std::fs::remove_file(out.join(DRAWS_FILE));
        None
    };
    Ok((ds, estimate, draws))
}

fn print_estimate(est: &PopulationEstimate) {
    println!("{:<16} {:>14} {:>14}", "parameter", "estimate", "se");
    for ((name, v), se) in est.param_names.iter().zip(&est.values).zip(&est.se) {
        println!("{:<16} {:>14} {:>14}", name, io::fmt_sig(*v), se.map_or("NA".into(), io::fmt_sig));
    }
}

fn resolve_scenario(args: &ScenarioArgs) -> Result<ScenarioSpec> {
    let mut s = match (&args.scenario, &args.scenario_file) {
        (Some(name), None) => scenario_preset(name)?,
        (None, Some(path)) => ScenarioFile::parse(&std::fs::read_to_string(path)?)?.resolve()?,
        _ => return Err(Error::InvalidConfig("give either --scenario or --scenario-file".into())),
    };
    if args.long_run {
        s = s.long_run();
    }
    if let Some(k) = args.k {
        s.k = k;
    }
    if let Some(b) = args.b {
        s.b = b;
    }
    if let Some(m) = args.m {
        s.m = m;
    }
    if let Some(a) = &args.alpha {
        s.alphas = a.clone();
    }
    if let Some(m) = &args.methods {
        s.methods = m.clone();
    }
    s.validate()?;
    Ok(s)
}

fn alpha_tag(alpha: f64) -> String {
    io::fmt_sig(alpha).replace('.', "")
}

fn write_report(dir: &Path, scenario: &ScenarioSpec, report: &study::CoverageReport) -> Result<()> {
    write_atomic(&dir.join("coverage.csv"), io::coverage_to_csv(&report.coverage).as_bytes())?;
    write_atomic(&dir.join("bias.csv"), io::bias_to_csv(&report.bias).as_bytes())?;
    write_json(&dir.join("report.json"), report)?;
    for &alpha in &scenario.alphas {
        let title = format!("{}: coverage of {}% intervals", scenario.name, io::fmt_sig(100.0 * (1.0 - alpha)));
        write_atomic(
            &dir.join(format!("coverage_a{}.svg", alpha_tag(alpha))),
            plot::coverage_svg(&title, &report.coverage, alpha).as_bytes(),
        )?;
    }
    write_atomic(&dir.join("bias.svg"), plot::bias_svg(&format!("{}: relative bias of SE", scenario.name), &report.bias).as_bytes())?;
    if report.flagged {
        eprintln!("warning: more than 20% of the fits failed ({} of {})", report.failed_fits, report.k);
    }
    println!("{}: {} replicates, {} failed fits; results in {}", scenario.name, report.k, report.failed_fits, dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { fit, out } => {
            let (_, est, _) = do_fit(&fit, &out.out)?;
            print_estimate(&est);
        }
        Command::Bootstrap { fit, out, scheme, b, stratify, cnp_pool, cnp_eta, fit_first } => {
            let dir = &out.out;
            let (ds, estimate, draws) = if fit_first {
                do_fit(&fit, dir)?
            } else {
                let path = dir.join(FIT_FILE);
                if !path.exists() {
                    return Err(Error::MissingPrerequisite(format!(
                        "{} not found; run `nlmemboot fit` with the same --out first or pass --fit-first",
                        path.display()
                    )));
                }
                let f: FitFile = read_json(&path)?;
                if f.model != fit.model {
                    return Err(Error::InvalidConfig(format!(
                        "{} holds a {:?} fit but --model is {:?}",
                        path.display(),
                        f.model,
                        fit.model
                    )));
                }
                let draws_path = dir.join(DRAWS_FILE);
                let draws = if draws_path.exists() { Some(read_json::<ConditionalDraws>(&draws_path)?) } else { None };
                (io::read_dataset_csv(&fit.data)?, f.estimate, draws)
            };
            let spec = fit.model.spec();
            let settings = SaemSettings { seed: fit.seed, ..Default::default() };
            for s in scheme {
                if s == Scheme::Cnp && draws.is_none() {
                    return Err(Error::MissingPrerequisite(format!(
                        "the cnp scheme needs {}; rerun `nlmemboot fit` with --M greater than 0 (or use --fit-first)",
                        dir.join(DRAWS_FILE).display()
                    )));
                }
                let mut config = BootstrapConfig::new(s, b, fit.seed);
                config.stratify_by = if s == Scheme::Case { stratify } else { None };
                config.cnp_residual_pool = cnp_pool;
                config.cnp_eta_draw = cnp_eta;
                config.m = fit.m.max(1);
                let run = run_bootstrap(&spec, &ds, &estimate, draws.as_ref(), &config, &settings)?;
                let summary = summarize_run(&run);
                write_atomic(&dir.join(format!("bootstrap_{s}.csv")), io::bootstrap_to_csv(&run).as_bytes())?;
                write_json(&dir.join(format!("bootstrap_{s}_summary.json")), &summary)?;
                println!("{s}: {} of {} refits succeeded{}", run.n_success, b, if run.unreliable { " (unreliable)" } else { "" });
            }
        }
        Command::Simulate { scenario, seed, out } => {
            let s = resolve_scenario(&scenario)?;
            let ds = simulate_dataset(&s.spec(), &s.theta_true, &s.design, seed)?;
            io::write_dataset_csv(&out.out.join("dataset.csv"), &ds)?;
            write_json(&out.out.join("simulation.json"), &ds.provenance)?;
            println!("wrote {}", out.out.join("dataset.csv").display());
        }
        Command::Study { scenario, seed, parallelism, out } => {
            let s = resolve_scenario(&scenario)?;
            let dir = out.out.join(&s.name);
            let options = StudyOptions { parallelism, store: Some(StudyStore::new(&dir)), ..Default::default() };
            let result = study::run_study(&s, seed, &options)?;
            if result.resumed > 0 {
                println!("reused {} saved replicates", result.resumed);
            }
            write_report(&dir, &s, &result.report)?;
        }
        Command::Report { study: dir } => {
            let (s, _, records) = StudyStore::new(&dir).load_all()?;
            if records.is_empty() {
                return Err(Error::MissingPrerequisite(format!("{} has no finished replicates", dir.display())));
            }
            write_report(&dir, &s, &study::aggregate(&s, &records))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
