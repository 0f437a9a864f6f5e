mod config;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slpkit::harness::{self, Dataset, EvalConfig, Models, Scenario, Scheme};
use slpkit::modulation::Modulation;
use slpkit::par::Execution;
use slpkit::robust::RslpnA;
use slpkit::slpn::{self, Slpn};

use config::{parse_grid, resolve, RunConfig};

#[derive(Parser)]
#[command(name = "slpkit", version, about = "Symbol-level precoding: oracles, learned solvers and evaluation")]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled dataset.
    Gen(GenArgs),
    /// Train a network (two stages for the robust scenario).
    Train(TrainArgs),
    /// Evaluate schemes and write a curve CSV.
    Eval(EvalArgs),
    /// Time schemes and write a runtime table.
    Bench(BenchArgs),
    /// Run property suites; nonzero exit on any failure.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    modulation: Option<String>,
    /// SNR grid in dB, `start:step:stop` or a list.
    #[arg(long)]
    snr: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path (RSLPN-A for the robust scenario).
    #[arg(long)]
    out: Option<PathBuf>,
    /// RSLPN-B checkpoint (robust only; default `<out>.b`).
    #[arg(long)]
    out_b: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Training log CSV (default `<out>.log.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Comma-separated schemes: zf, mmse, cizf, cimmse, cizf-dl, cimmse-dl, rcimmse, rcimmse-dl.
    #[arg(long)]
    scheme: String,
    /// Checkpoint for the single learned scheme requested.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    model_b: Option<PathBuf>,
    #[arg(long)]
    cizf_model: Option<PathBuf>,
    #[arg(long)]
    cimmse_model: Option<PathBuf>,
    /// ser, mse (robust block MSE) or power (power vs SINR threshold).
    #[arg(long, default_value = "ser")]
    metric: String,
    #[arg(long)]
    snr: Option<String>,
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    no_refine: bool,
    #[arg(long, default_value = "curve.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "cizf,cizf-dl")]
    scheme: String,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    nt: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// equivariance, kkt, gradients or all.
    #[arg(long, default_value = "all")]
    suite: String,
}

/// Usage problems map to exit code 2, everything else to 1.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<slpkit::Error> for Failure {
    fn from(e: slpkit::Error) -> Self {
        match e {
            slpkit::Error::Config(m) => Failure::Usage(m),
            e => Failure::Runtime(e.into()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
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
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(Failure::Usage)?;
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
    }
    let workers = if cli.deterministic { Some(1) } else { cli.workers };
    if let Some(n) = workers {
        if n == 0 {
            return Err(usage("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    }
    let exec = if cli.deterministic { Execution::Sequential } else { Execution::available() };
    match cli.cmd {
        Cmd::Gen(a) => gen(cfg, a, exec),
        Cmd::Train(a) => train(cfg, a, exec),
        Cmd::Eval(a) => eval(cfg, a, exec),
        Cmd::Bench(a) => bench(cfg, a, exec),
        Cmd::Verify(a) => verify_cmd(cfg, a),
    }
}

fn parse_scenario(s: &str) -> Result<Scenario, Failure> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| usage(format!("unknown scenario '{s}'")))
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    p.map(|p| resolve(&p)).ok_or_else(|| usage(format!("missing {what}")))
}

fn gen(mut cfg: RunConfig, a: GenArgs, exec: Execution) -> Result<(), Failure> {
    if let Some(s) = a.scenario {
        cfg.dataset.scenario = parse_scenario(&s)?;
    }
    if let Some(n) = a.n_train {
        cfg.dataset.n_train = n;
    }
    if let Some(n) = a.n_test {
        cfg.dataset.n_test = n;
    }
    if let Some(m) = a.modulation {
        cfg.dataset.modulation = m.parse::<Modulation>()?;
    }
    if let Some(g) = a.snr {
        cfg.dataset.snr_db = parse_grid(&g).map_err(Failure::Usage)?;
    }
    let out = required(a.out.or(cfg.data.clone()), "--out (or \"data\" in the config)")?;
    let data = harness::gen_dataset(&cfg.dataset, exec)?;
    data.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} train / {} test samples to {} ({} skipped)", data.manifest.train_count, data.manifest.test_count, out.display(), data.manifest.skipped);
    Ok(())
}

fn train(mut cfg: RunConfig, a: TrainArgs, exec: Execution) -> Result<(), Failure> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch {
        cfg.train.batch = b;
    }
    let data_dir = required(a.data.or(cfg.data.clone()), "--data (or \"data\" in the config)")?;
    let out = required(a.out.or(cfg.model.clone()), "--out (or \"model\" in the config)")?;
    let data = Dataset::load(&data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(data.manifest.config.seed);
    let log_path = a.log.map(|p| resolve(&p)).unwrap_or_else(|| with_suffix(&out, ".log.csv"));
    let meta = serde_json::json!({ "dataset": data.manifest.config, "train": cfg.train });
    match data.manifest.config.scenario {
        Scenario::Cizf | Scenario::Cimmse => {
            let (model, logs) = harness::train_slpn(&data, cfg.network.slpn, &cfg.train, &mut rng, exec)?;
            model.save(&out, meta)?;
            slpn::write_training_log(&log_path, &logs)?;
            report(&logs);
        }
        Scenario::Robust => {
            let t = harness::train_robust(&data, cfg.network.rslpn_a, cfg.network.rslpn_b, &cfg.train, &mut rng, exec)?;
            let out_b = a.out_b.map(|p| resolve(&p)).or(cfg.model_b.map(|p| resolve(&p))).unwrap_or_else(|| with_suffix(&out, ".b"));
            t.net_a.save(&out, meta.clone())?;
            t.net_b.save(&out_b, meta)?;
            slpn::write_training_log(&log_path, &t.logs_a)?;
            slpn::write_training_log(&with_suffix(&log_path, ".b.csv"), &t.logs_b)?;
            report(&t.logs_a);
            report(&t.logs_b);
        }
    }
    Ok(())
}

fn report(logs: &[slpn::EpochLog]) {
    if let Some(l) = logs.last() {
        println!("epoch {}: train {:.4e} test {:.4e}", l.epoch + 1, l.train_loss, l.test_loss);
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_schemes(s: &str) -> Result<Vec<Scheme>, Failure> {
    let v: Vec<Scheme> = s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.parse()).collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err(usage("no schemes given"));
    }
    Ok(v)
}

fn load_slpn(p: &Path) -> Result<Slpn, Failure> {
    Ok(Slpn::load(&resolve(p)).with_context(|| format!("loading {}", p.display()))?.0)
}

fn load_models(schemes: &[Scheme], a: &EvalArgs, cfg: &RunConfig) -> Result<Models, Failure> {
    let mut m = Models::default();
    let learned: Vec<Scheme> = schemes.iter().copied().filter(|s| matches!(s, Scheme::CizfDl | Scheme::CimmseDl | Scheme::RcimmseDl)).collect();
    let shared = a.model.clone().or(cfg.model.clone());
    if learned.len() > 1 && a.model.is_some() {
        return Err(usage("--model is ambiguous with several learned schemes; use --cizf-model, --cimmse-model or --model/--model-b for rcimmse-dl"));
    }
    for s in learned {
        match s {
            Scheme::CizfDl => {
                let p = a.cizf_model.clone().or(shared.clone()).ok_or_else(|| usage("cizf-dl needs --model or --cizf-model"))?;
                m.cizf = Some(load_slpn(&p)?);
            }
            Scheme::CimmseDl => {
                let p = a.cimmse_model.clone().or(shared.clone()).ok_or_else(|| usage("cimmse-dl needs --model or --cimmse-model"))?;
                m.cimmse = Some(load_slpn(&p)?);
            }
            _ => {
                let pa = shared.clone().ok_or_else(|| usage("rcimmse-dl needs --model"))?;
                let pb = a.model_b.clone().or(cfg.model_b.clone()).unwrap_or_else(|| with_suffix(&pa, ".b"));
                m.rslpn_a = Some(RslpnA::load(&resolve(&pa)).with_context(|| format!("loading {}", pa.display()))?.0);
                m.rslpn_b = Some(load_slpn(&pb)?);
            }
        }
    }
    Ok(m)
}

fn eval(cfg: RunConfig, a: EvalArgs, exec: Execution) -> Result<(), Failure> {
    let schemes = parse_schemes(&a.scheme)?;
    let models = load_models(&schemes, &a, &cfg)?;
    let d = &cfg.dataset;
    let snr = match &a.snr {
        Some(g) => parse_grid(g).map_err(Failure::Usage)?,
        None => cfg.eval.snr_db.clone(),
    };
    let ec = EvalConfig {
        modulation: d.modulation,
        l: d.l,
        p_t: d.p_t,
        snr_db: snr,
        seed: cfg.eval.seed,
        refine: cfg.eval.refine && !a.no_refine,
        repeats: a.repeats.unwrap_or(cfg.eval.repeats),
    };
    let n = a.channels.unwrap_or(cfg.eval.channels);
    if n == 0 {
        return Err(usage("--channels must be positive"));
    }
    let robust = schemes.iter().any(|s| matches!(s, Scheme::Rcimmse | Scheme::RcimmseDl));
    let out = resolve(&a.out);
    let (points, x_name) = match a.metric.as_str() {
        "ser" if robust => {
            let ch = harness::aging_channels(n, d.k, d.nt, d.l, d.alpha, d.fine, d.density, cfg.eval.seed)?;
            (harness::eval_ser_robust(&schemes, &ch, &models, &ec, exec)?, "snr_db")
        }
        "ser" => (harness::eval_ser(&schemes, &harness::rayleigh_channels(n, d.k, d.nt, cfg.eval.seed), &models, &ec, exec)?, "snr_db"),
        "mse" => {
            let ch = harness::aging_channels(n, d.k, d.nt, d.l, d.alpha, d.fine, d.density, cfg.eval.seed)?;
            (harness::eval_robust_mse(&schemes, &ch, &models, &ec, exec)?, "snr_db")
        }
        "power" => {
            let th = match &a.thresholds {
                Some(g) => parse_grid(g).map_err(Failure::Usage)?,
                None => cfg.eval.thresholds_db.clone(),
            };
            let ch = harness::rayleigh_channels(n, d.k, d.nt, cfg.eval.seed);
            (harness::eval_power_vs_sinr(&schemes, &ch, &th, &models, &ec, exec)?, "sinr_db")
        }
        other => return Err(usage(format!("unknown metric '{other}' (ser, mse, power)"))),
    };
    harness::write_curve_csv(&out, x_name, &points)?;
    println!("wrote {} rows to {}", points.len(), out.display());
    Ok(())
}

fn bench(cfg: RunConfig, a: BenchArgs, exec: Execution) -> Result<(), Failure> {
    let schemes = parse_schemes(&a.scheme)?;
    let mut bc = cfg.bench.clone();
    bc.k = a.k.unwrap_or(bc.k);
    bc.nt = a.nt.unwrap_or(bc.nt);
    bc.l = a.l.unwrap_or(bc.l);
    bc.reps = a.reps.unwrap_or(bc.reps);
    bc.blocks = a.blocks.unwrap_or(bc.blocks);
    if bc.k == 0 || bc.k > bc.nt || bc.l == 0 {
        return Err(usage("bench needs 0 < K <= N_T and L > 0"));
    }
    let mut models = Models::default();
    if let Some(p) = a.model.or(cfg.model.clone()) {
        let m = load_slpn(&p)?;
        models.cizf = Some(m.clone());
        models.cimmse = Some(m);
    }
    let rows = harness::bench_runtime(&schemes, &models, &bc, exec)?;
    let out = resolve(&a.out);
    harness::write_bench_csv(&out, &rows)?;
    for r in &rows {
        println!("{:<10} {:>12.3} us/symbol", r.scheme.name(), r.per_symbol_s * 1e6);
    }
    Ok(())
}

fn verify_cmd(cfg: RunConfig, a: VerifyArgs) -> Result<(), Failure> {
    let checks = verify::run(&a.suite, cfg.dataset.seed).map_err(Failure::Usage)?;
    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}
