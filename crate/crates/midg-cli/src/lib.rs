//! Command-line surface: `gen`, `train`, `eval`, `ablate`, `gradcheck`.
//!
//! Exit codes: 0 on success, 1 on runtime failures (with a diagnostic on
//! stderr), 2 on usage errors (unknown flags, missing required files).
//!
//! Train/ablate settings can come from a flat `key = value` config file;
//! any key can be overridden by the matching CLI flag, and flags win.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use midg::data::{self, Dataset, Sample, Split, SyntheticSpec};
use midg::error::{Error, Result};
use midg::gradcheck::{primitive_suite, SuiteCheck};
use midg::pipeline::{
    ablate, load_model, save_model, training_graph_gradcheck, AblationSwitches, MidgModel,
    ModelConfig, PredictMode, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "midg",
    version,
    about = "Domain-generalizing multimodal sentiment regression on synthetic benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multimodal domain-shift dataset
    Gen(GenArgs),
    /// Train a model: writes a parameter file and a JSONL epoch log
    Train(TrainArgs),
    /// Evaluate a trained model (test protocol by default)
    Eval(EvalArgs),
    /// Train and evaluate all four module configurations
    Ablate(AblateArgs),
    /// Run the finite-difference gradient-check suite
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset file
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    d_t: usize,
    #[arg(long, default_value_t = 6)]
    d_a: usize,
    #[arg(long, default_value_t = 6)]
    d_v: usize,
    #[arg(long, default_value_t = 2)]
    domains: usize,
    /// Domain shift scale (0 = all domains identical)
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long)]
    label_lo: Option<f64>,
    #[arg(long)]
    label_hi: Option<f64>,
    /// Use the [-1, 1] label range instead of the default [-3, 3]
    #[arg(long)]
    sims: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Default, Clone)]
struct SettingsArgs {
    /// Flat `key = value` config file; CLI flags override file entries
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    label_lo: Option<f64>,
    #[arg(long)]
    label_hi: Option<f64>,
    /// Ramp the gradient-reversal strength in over training
    #[arg(long)]
    grl_warmup: bool,
    #[arg(long)]
    d_code: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    d_repr: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_fuse: Option<usize>,
    /// Gradient-reversal strength
    #[arg(long)]
    lambda: Option<f64>,
    /// Adapter dropout rate
    #[arg(long)]
    dropout: Option<f64>,
    /// Literal one-source-to-K, other-to-V attention
    #[arg(long)]
    literal_kv: bool,
    /// Replace the expert mixture by a plain fusion network
    #[arg(long)]
    no_moie: bool,
    /// Bypass the cross-modal adapters
    #[arg(long)]
    no_adapter: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset file
    #[arg(long)]
    data: PathBuf,
    /// Parameter file to write
    #[arg(long, default_value = "params.json")]
    params_out: PathBuf,
    /// JSONL epoch log to write
    #[arg(long, default_value = "train.jsonl")]
    log_out: PathBuf,
    /// Which split to train on: train, valid, test or all
    #[arg(long, default_value = "train")]
    split: String,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Parameter file written by `train`
    #[arg(long)]
    params: PathBuf,
    /// Input dataset file
    #[arg(long)]
    data: PathBuf,
    /// Which split to evaluate: train, valid, test or all
    #[arg(long, default_value = "test")]
    split: String,
    /// test = out-of-domain pipeline only; train-fusion = weighted sum of
    /// both branch predictions
    #[arg(long, default_value = "test")]
    mode: String,
    /// Metrics JSON file to write (metrics always print to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Input dataset file
    #[arg(long)]
    data: PathBuf,
    /// Ablation table JSON to write
    #[arg(long, default_value = "ablation.json")]
    out: PathBuf,
    /// Also write the table as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Comma-separated training domains
    #[arg(long, default_value = "0,1")]
    train_domains: String,
    /// Held-out evaluation domain
    #[arg(long, default_value_t = 2)]
    test_domain: usize,
    /// Number of seeds per configuration
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// First seed; runs use seed_base..seed_base+seeds
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random points per primitive
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 0xC0FFEE)]
    seed: u64,
}

/// Runs the CLI against an argument vector and returns the process exit
/// code. Kept in-process so tests can drive it directly.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match cli.cmd {
        Cmd::Gen(args) => run_or_report(|| cmd_gen(&args)),
        Cmd::Train(args) => match require_files("train", &[&args.data]) {
            Some(code) => code,
            None => run_or_report(|| cmd_train(&args)),
        },
        Cmd::Eval(args) => match require_files("eval", &[&args.params, &args.data]) {
            Some(code) => code,
            None => run_or_report(|| cmd_eval(&args)),
        },
        Cmd::Ablate(args) => match require_files("ablate", &[&args.data]) {
            Some(code) => code,
            None => run_or_report(|| cmd_ablate(&args)),
        },
        Cmd::Gradcheck(args) => run_or_report(|| cmd_gradcheck(&args)),
    }
}

fn run_or_report(f: impl FnOnce() -> Result<i32>) -> i32 {
    match f() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Missing input files are usage errors: exit 2 with the subcommand usage.
fn require_files(sub: &str, paths: &[&Path]) -> Option<i32> {
    for p in paths {
        if !p.exists() {
            eprintln!("error: required file '{}' does not exist", p.display());
            let mut root = Cli::command();
            if let Some(cmd) = root.find_subcommand_mut(sub) {
                eprintln!("{}", cmd.render_usage());
            }
            return Some(2);
        }
    }
    None
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "valid" => Ok(Some(Split::Valid)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(Error::Config(format!(
            "unknown split '{other}' (expected train, valid, test or all)"
        ))),
    }
}

fn select_split<'a>(ds: &'a Dataset<f32>, split: Option<Split>) -> Vec<&'a Sample<f32>> {
    match split {
        Some(s) => ds.split(s),
        None => ds.samples.iter().collect(),
    }
}

// ---- config file / flag merge -----------------------------------------

const CONFIG_KEYS: &[&str] = &[
    "alpha", "beta", "gamma", "delta", "w1", "w2", "lr", "epochs", "batch", "seed", "label_lo",
    "label_hi", "grl_warmup", "d_code", "hidden", "experts", "d_repr", "heads", "d_fuse",
    "lambda", "dropout", "literal_kv", "no_moie", "no_adapter",
];

fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(Error::Parse {
            line: i + 1,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = key.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("unknown config key '{key}'"),
            });
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

struct Merger {
    file: HashMap<String, String>,
}

impl Merger {
    fn get<T: std::str::FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(s) => s.parse::<T>().map_err(|_| {
                Error::Config(format!("config key '{key}': cannot parse '{s}'"))
            }),
            None => Ok(default),
        }
    }

    /// Bool flags are presence-only: a set flag wins, otherwise the file
    /// value (true/false) applies.
    fn get_bool(&self, key: &str, flag: bool) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        match self.file.get(key) {
            Some(s) => s.parse::<bool>().map_err(|_| {
                Error::Config(format!("config key '{key}': cannot parse '{s}' as bool"))
            }),
            None => Ok(false),
        }
    }
}

fn build_settings(
    s: &SettingsArgs,
    d_t: usize,
    d_a: usize,
    d_v: usize,
) -> Result<(ModelConfig, TrainConfig)> {
    let file = match &s.config {
        Some(p) => parse_config_file(p)?,
        None => HashMap::new(),
    };
    let m = Merger { file };
    let td = TrainConfig::default();
    let md = ModelConfig::default();
    let seed = m.get("seed", s.seed, td.seed)?;
    let tc = TrainConfig {
        alpha: m.get("alpha", s.alpha, td.alpha)?,
        beta: m.get("beta", s.beta, td.beta)?,
        gamma: m.get("gamma", s.gamma, td.gamma)?,
        delta: m.get("delta", s.delta, td.delta)?,
        w1: m.get("w1", s.w1, td.w1)?,
        w2: m.get("w2", s.w2, td.w2)?,
        lr: m.get("lr", s.lr, td.lr)?,
        epochs: m.get("epochs", s.epochs, td.epochs)?,
        batch_size: m.get("batch", s.batch, td.batch_size)?,
        seed,
        label_lo: m.get("label_lo", s.label_lo, td.label_lo)?,
        label_hi: m.get("label_hi", s.label_hi, td.label_hi)?,
        grl_warmup: m.get_bool("grl_warmup", s.grl_warmup)?,
    };
    let mc = ModelConfig {
        d_t,
        d_a,
        d_v,
        d_code: m.get("d_code", s.d_code, md.d_code)?,
        d_hidden: m.get("hidden", s.hidden, md.d_hidden)?,
        k_experts: m.get("experts", s.experts, md.k_experts)?,
        d_repr: m.get("d_repr", s.d_repr, md.d_repr)?,
        heads: m.get("heads", s.heads, md.heads)?,
        d_fuse: m.get("d_fuse", s.d_fuse, md.d_fuse)?,
        grl_lambda: m.get("lambda", s.lambda, md.grl_lambda)?,
        attn_dropout: m.get("dropout", s.dropout, md.attn_dropout)?,
        literal_kv: m.get_bool("literal_kv", s.literal_kv)?,
        ablation: AblationSwitches {
            no_moie: m.get_bool("no_moie", s.no_moie)?,
            no_adapter: m.get_bool("no_adapter", s.no_adapter)?,
        },
        init_seed: seed,
    };
    tc.validate()?;
    mc.validate()?;
    Ok((mc, tc))
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---- subcommands --------------------------------------------------------

fn cmd_gen(args: &GenArgs) -> Result<i32> {
    let (lo_default, hi_default) = if args.sims { (-1.0, 1.0) } else { (-3.0, 3.0) };
    let spec = SyntheticSpec {
        n_samples: args.samples,
        d_t: args.d_t,
        d_a: args.d_a,
        d_v: args.d_v,
        n_domains: args.domains,
        domain_shift_scale: args.shift,
        label_lo: args.label_lo.unwrap_or(lo_default),
        label_hi: args.label_hi.unwrap_or(hi_default),
        noise_std: args.noise,
        seed: args.seed,
    };
    let ds: Dataset<f32> = data::generate(&spec)?;
    data::write_dataset(&ds, &args.out)?;
    println!(
        "wrote {} samples ({} train / {} valid / {} test) to {}",
        ds.samples.len(),
        ds.split(Split::Train).len(),
        ds.split(Split::Valid).len(),
        ds.split(Split::Test).len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let ds: Dataset<f32> = data::read_dataset(&args.data)?;
    let (mc, tc) = build_settings(&args.settings, ds.d_t, ds.d_a, ds.d_v)?;
    let split = parse_split(&args.split)?;
    let samples = select_split(&ds, split);
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "no samples in split '{}' of {}",
            args.split,
            args.data.display()
        )));
    }
    let mut model = MidgModel::<f32>::new(&mc)?;
    let log = model.train(&samples, &tc)?;

    let mut jsonl = String::new();
    for rec in &log {
        jsonl.push_str(&serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?);
        jsonl.push('\n');
    }
    write_atomic(&args.log_out, &jsonl)?;
    save_model(&model, &tc, &args.params_out)?;

    let last = log.last().expect("epochs >= 1");
    println!(
        "trained {} epochs on {} samples; final losses: l_dis {:.4} l_in {:.4} l_out {:.4} l_reg {:.4} total {:.4}",
        log.len(),
        samples.len(),
        last.l_dis,
        last.l_in,
        last.l_out,
        last.l_reg,
        last.total
    );
    println!(
        "wrote {} and {}",
        args.params_out.display(),
        args.log_out.display()
    );
    Ok(0)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let (model, tc) = load_model::<f32>(&args.params)?;
    let ds: Dataset<f32> = data::read_dataset(&args.data)?;
    let split = parse_split(&args.split)?;
    let samples = select_split(&ds, split);
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "no samples in split '{}' of {}",
            args.split,
            args.data.display()
        )));
    }
    let mode = match args.mode.as_str() {
        "test" => PredictMode::Test,
        "train-fusion" => PredictMode::TrainFusion,
        other => {
            return Err(Error::Config(format!(
                "unknown mode '{other}' (expected test or train-fusion)"
            )))
        }
    };
    let report = model.evaluate(&samples, &tc, mode)?;
    if report.corr_degenerate {
        eprintln!("warning: zero-variance predictions, Pearson correlation reported as 0");
    }
    let json = serde_json::to_string(&report).map_err(|e| Error::Data(e.to_string()))?;
    println!("{json}");
    if let Some(out) = &args.out {
        write_atomic(out, &format!("{json}\n"))?;
    }
    Ok(0)
}

fn cmd_ablate(args: &AblateArgs) -> Result<i32> {
    let ds: Dataset<f32> = data::read_dataset(&args.data)?;
    let (mc, tc) = build_settings(&args.settings, ds.d_t, ds.d_a, ds.d_v)?;
    let train_domains: Vec<usize> = args
        .train_domains
        .split(',')
        .map(|s| {
            s.trim().parse::<usize>().map_err(|_| {
                Error::Config(format!("bad --train-domains entry '{s}'"))
            })
        })
        .collect::<Result<_>>()?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| args.seed_base + i).collect();
    let rows = ablate(&ds, &mc, &tc, &train_domains, args.test_domain, &seeds)?;

    let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&args.out, &format!("{json}\n"))?;
    if let Some(csv) = &args.csv {
        let mut text = String::from("moie,adapter,acc,corr,f1,mae\n");
        for r in &rows {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.moie, r.adapter, r.acc, r.corr, r.f1, r.mae
            ));
        }
        write_atomic(csv, &text)?;
    }

    println!("moie     adapter  acc     corr     f1      mae");
    for r in &rows {
        println!(
            "{:<8} {:<8} {:.4}  {:+.4}  {:.4}  {:.4}",
            r.moie, r.adapter, r.acc, r.corr, r.f1, r.mae
        );
    }
    println!("wrote {}", args.out.display());
    Ok(0)
}

/// Toy configuration for the composed-graph check: 4-dim codes, 2 experts,
/// 2 attention heads.
pub fn toy_graph_config() -> ModelConfig {
    ModelConfig {
        d_t: 4,
        d_a: 3,
        d_v: 3,
        d_code: 4,
        d_hidden: 4,
        k_experts: 2,
        d_repr: 4,
        heads: 2,
        d_fuse: 4,
        ..ModelConfig::default()
    }
}

/// Runs the per-primitive suite plus the composed training-graph check.
pub fn gradcheck_report(points: usize, epsilon: f64, seed: u64) -> Result<(Vec<SuiteCheck>, f64)> {
    let checks = primitive_suite(points, epsilon, seed)?;
    let cfg = toy_graph_config();
    let spec = SyntheticSpec {
        n_samples: 2,
        d_t: cfg.d_t,
        d_a: cfg.d_a,
        d_v: cfg.d_v,
        n_domains: 2,
        seed,
        ..SyntheticSpec::default()
    };
    let ds = data::generate::<f64>(&spec)?;
    let refs: Vec<&Sample<f64>> = ds.samples.iter().collect();
    let graph_err = training_graph_gradcheck(&cfg, &TrainConfig::default(), &refs, epsilon)?;
    Ok((checks, graph_err))
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    if args.points == 0 {
        return Err(Error::Config("--points must be >= 1".into()));
    }
    let (checks, graph_err) = gradcheck_report(args.points, args.epsilon, args.seed)?;
    let mut all_ok = true;
    for c in &checks {
        let ok = c.passed();
        all_ok &= ok;
        println!(
            "{:<16} max rel err {:10.3e}  (tol {:.0e})  {}",
            c.name,
            c.max_rel_err,
            c.tolerance,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    let graph_ok = graph_err < 1e-4;
    all_ok &= graph_ok;
    println!(
        "{:<16} max rel err {:10.3e}  (tol 1e-4)  {}",
        "training_graph",
        graph_err,
        if graph_ok { "PASS" } else { "FAIL" }
    );
    Ok(if all_ok { 0 } else { 1 })
}
