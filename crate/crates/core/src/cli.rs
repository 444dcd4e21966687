//! `symfuse` command-line front end.
//!
//! Exit codes: 0 on success, 2 on usage errors (bad flags, missing input
//! files), 1 on runtime errors. Output files are written only after every
//! computation of the command has succeeded.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{equivalence_check, interpolate_losses, param_distance, DEFAULT_POINTS};
use crate::error::Error;
use crate::fusion::{fuse, FusionMethod, DEFAULT_FISHER_EPSILON, DEFAULT_FISHER_ITEMS, DEFAULT_GAMMA, DEFAULT_RIDGE};
use crate::matching::{match_model, MatchOptions, MatchReport};
use crate::model::{SyntheticDataset, TransformerConfig, TransformerModel};
use crate::persistence::{encode_dataset, encode_model, load_dataset, load_model, report_json};
use crate::symmetry::{apply_model_symmetry, SymmetryTransform};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const DEFAULT_CONFIG: &str = "n_layers=2,n_heads=2,d_model=8,d_ff=16,vocab_size=16,n_classes=3,seq_len=6";

#[derive(Parser, Debug)]
#[command(name = "symfuse", version, about = "Transformer parameter matching and symmetry-aware fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a base model, symmetric noisy end models and labelled datasets.
    Gen(GenArgs),
    /// Match a source model to an anchor model.
    Match(MatchArgs),
    /// Merge several models, optionally matching them to an anchor first.
    Fuse(FuseArgs),
    /// Losses along the straight line between two models.
    Interpolate(InterpolateArgs),
    /// L2 distance between two models' parameters.
    Distance(PairArgs),
    /// Compare two models' logits on seeded random inputs.
    EquivCheck(EquivArgs),
    /// Loss and accuracy of a model on a dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Inline `key=value,...` list or path to a JSON config file.
    #[arg(long, default_value = DEFAULT_CONFIG)]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the Gaussian noise added to each end model.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    n_models: usize,
    #[arg(long, default_value_t = 200)]
    n_items: usize,
    /// Standard deviation of the base model's weights.
    #[arg(long, default_value_t = 0.5)]
    scale: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct MatchFlags {
    #[arg(long)]
    no_ffn: bool,
    #[arg(long)]
    no_attn: bool,
    #[arg(long)]
    no_rescale: bool,
    /// Comma-separated layer indices to match.
    #[arg(long, value_delimiter = ',', conflicts_with = "tail")]
    layers: Option<Vec<usize>>,
    /// Match only the last `k` layers.
    #[arg(long)]
    tail: Option<usize>,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

impl MatchFlags {
    fn options(&self, n_layers: usize) -> Result<MatchOptions, CliError> {
        let layer_subset = match (&self.layers, self.tail) {
            (Some(l), _) => Some(l.clone()),
            (None, Some(k)) => {
                if k == 0 || k > n_layers {
                    return Err(CliError::Usage(format!("--tail {k} outside 1..={n_layers}")));
                }
                Some(MatchOptions::tail_layers(k, n_layers))
            }
            (None, None) => None,
        };
        let opts = MatchOptions {
            enable_ffn: !self.no_ffn,
            enable_attn: !self.no_attn,
            enable_rescale: !self.no_rescale,
            layer_subset,
            parallel_degree: self.parallel,
        };
        opts.validate(n_layers).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(opts)
    }
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    anchor: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: MatchFlags,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<PathBuf>,
    #[arg(long, value_parser = ["simple", "fisher", "regmean"], default_value = "simple")]
    method: String,
    /// Match every model to the anchor before merging.
    #[arg(long = "match")]
    match_first: bool,
    #[arg(long, default_value_t = 0)]
    anchor_index: usize,
    /// One dataset per model, or a single dataset shared by all.
    #[arg(long, value_delimiter = ',')]
    data: Vec<PathBuf>,
    /// Simple-fusion weights, summing to 1.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_FISHER_ITEMS)]
    fisher_items: usize,
    #[arg(long, default_value_t = DEFAULT_FISHER_EPSILON)]
    fisher_epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[command(flatten)]
    flags: MatchFlags,
    #[arg(long)]
    out: PathBuf,
    /// JSON array of match reports.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EquivArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exit with status 1 when the maximum logit difference exceeds this.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs the CLI with the process's standard streams.
pub fn execute<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    execute_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn execute_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "usage error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file {} does not exist", path.display())))
    }
}

fn require_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(CliError::Usage(format!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Runtime(Error::Io(e)))
}

/// Parses `key=value,...` (any subset of the default keys) or a JSON file.
pub fn parse_config(spec: &str) -> crate::Result<TransformerConfig> {
    let path = Path::new(spec);
    if !spec.contains('=') && path.is_file() {
        let text = std::fs::read_to_string(path)?;
        let cfg: TransformerConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config file: {e}")))?;
        cfg.validate()?;
        return Ok(cfg);
    }
    let mut values = std::collections::BTreeMap::new();
    for pair in DEFAULT_CONFIG.split(',').chain(spec.split(',').filter(|s| !s.trim().is_empty())) {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        let k = k.trim();
        if !DEFAULT_CONFIG.contains(&format!("{k}=")) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        let v: usize = v.trim().parse().map_err(|_| Error::Config(format!("bad value for {k}: `{v}`")))?;
        values.insert(k.to_string(), v);
    }
    TransformerConfig::new(
        values["n_layers"],
        values["n_heads"],
        values["d_model"],
        values["d_ff"],
        values["vocab_size"],
        values["n_classes"],
        values["seq_len"],
    )
}

fn run(command: Command, out: &mut dyn Write) -> CliResult<i32> {
    match command {
        Command::Gen(a) => gen(a, out),
        Command::Match(a) => run_match(a, out),
        Command::Fuse(a) => run_fuse(a, out),
        Command::Interpolate(a) => interpolate(a, out),
        Command::Distance(a) => distance(a, out),
        Command::EquivCheck(a) => equiv(a, out),
        Command::Eval(a) => eval(a, out),
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments) -> CliResult<()> {
    out.write_fmt(text).map_err(|e| CliError::Runtime(Error::Io(e)))?;
    out.write_all(b"\n").map_err(|e| CliError::Runtime(Error::Io(e)))
}

fn gen(a: GenArgs, out: &mut dyn Write) -> CliResult<i32> {
    let config = parse_config(&a.config).map_err(|e| CliError::Usage(e.to_string()))?;
    if a.n_models == 0 || a.n_items == 0 {
        return Err(CliError::Usage("--n-models and --n-items must be at least 1".into()));
    }
    if !(a.noise >= 0.0 && a.noise.is_finite()) || !(a.scale >= 0.0 && a.scale.is_finite()) {
        return Err(CliError::Usage("--noise and --scale must be finite and non-negative".into()));
    }
    if a.out.exists() && !a.out.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", a.out.display())));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(a.seed);
    let base = TransformerModel::random(config, seeds.next_u64(), a.scale)?;
    let data = SyntheticDataset::generate(&config, &base, a.n_items, seeds.next_u64())?;
    let heldout = SyntheticDataset::generate(&config, &base, a.n_items, seeds.next_u64())?;
    let mut files = vec![
        ("base.rsym".to_string(), encode_model(&base)?),
        ("data.rsds".to_string(), encode_dataset(&data)?),
        ("heldout.rsds".to_string(), encode_dataset(&heldout)?),
    ];
    for i in 0..a.n_models {
        let t = SymmetryTransform::random(&config, seeds.next_u64())?;
        let noise_seed = seeds.next_u64();
        let model = apply_model_symmetry(&base, &t)?.with_noise(a.noise, noise_seed)?;
        files.push((format!("model_{i}.rsym"), encode_model(&model)?));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Runtime(Error::Io(e)))?;
    for (name, bytes) in &files {
        write_file(&a.out.join(name), bytes)?;
    }
    say(out, format_args!("config {}", serde_json::to_string(&config).unwrap()))?;
    say(out, format_args!("parameters {}", config.param_count()))?;
    for (name, _) in &files {
        say(out, format_args!("wrote {}", a.out.join(name).display()))?;
    }
    Ok(EXIT_OK)
}

fn print_report(out: &mut dyn Write, r: &MatchReport) -> CliResult<()> {
    say(out, format_args!("layer matched ffn_before ffn_after attn_before attn_after rescale_before rescale_after"))?;
    for l in &r.layers {
        say(
            out,
            format_args!(
                "{} {} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
                l.layer, l.matched, l.ffn_before, l.ffn_after, l.attn_before, l.attn_after, l.rescale_before, l.rescale_after
            ),
        )?;
    }
    let fallbacks: usize = r.layers.iter().map(|l| l.rescale_fallbacks).sum();
    say(out, format_args!("rescale_fallbacks {fallbacks}"))?;
    say(out, format_args!("distance_before {:.17e}", r.distance_before))?;
    say(out, format_args!("distance_after {:.17e}", r.distance_after))?;
    say(out, format_args!("wall_time_s {:.6}", r.wall_time.as_secs_f64()))
}

fn run_match(a: MatchArgs, out: &mut dyn Write) -> CliResult<i32> {
    require_file(&a.src)?;
    require_file(&a.anchor)?;
    require_parent(&a.out)?;
    if let Some(r) = &a.report {
        require_parent(r)?;
    }
    let src = load_model(&a.src)?;
    let anchor = load_model(&a.anchor)?;
    let opts = a.flags.options(src.config.n_layers)?;
    let (matched, report) = match_model(&src, &anchor, &opts)?;
    let model_bytes = encode_model(&matched)?;
    let report_text = a.report.as_ref().map(|_| report_json(&report)).transpose()?;
    write_file(&a.out, &model_bytes)?;
    if let (Some(path), Some(text)) = (&a.report, report_text) {
        write_file(path, text.as_bytes())?;
    }
    print_report(out, &report)?;
    Ok(EXIT_OK)
}

fn run_fuse(a: FuseArgs, out: &mut dyn Write) -> CliResult<i32> {
    for p in a.models.iter().chain(&a.data) {
        require_file(p)?;
    }
    require_parent(&a.out)?;
    if let Some(r) = &a.report {
        require_parent(r)?;
    }
    let method = match a.method.as_str() {
        "simple" => FusionMethod::Simple { weights: a.weights.clone() },
        "fisher" => FusionMethod::Fisher { items: a.fisher_items, epsilon: a.fisher_epsilon },
        _ => FusionMethod::RegMean { ridge: a.ridge, gamma: a.gamma },
    };
    method.validate(a.models.len()).map_err(|e| CliError::Usage(e.to_string()))?;
    if a.anchor_index >= a.models.len() {
        return Err(CliError::Usage(format!("--anchor-index {} out of range", a.anchor_index)));
    }
    if method.needs_data() && a.data.is_empty() {
        return Err(CliError::Usage(format!("--method {} needs --data", method.name())));
    }
    if !a.data.is_empty() && a.data.len() != 1 && a.data.len() != a.models.len() {
        return Err(CliError::Usage(format!("{} datasets for {} models", a.data.len(), a.models.len())));
    }
    let models: Vec<TransformerModel> = a.models.iter().map(|p| load_model(p)).collect::<crate::Result<_>>()?;
    let mut datasets: Vec<SyntheticDataset> = a.data.iter().map(|p| load_dataset(p)).collect::<crate::Result<_>>()?;
    if datasets.len() == 1 {
        datasets = vec![datasets[0].clone(); models.len()];
    }
    let opts = a.flags.options(models[0].config.n_layers)?;
    let data_ref = (!datasets.is_empty()).then_some(datasets.as_slice());
    let (merged, reports) = fuse(&models, data_ref, &method, a.match_first, &opts, a.anchor_index)?;
    let bytes = encode_model(&merged)?;
    let report_text = match &a.report {
        Some(_) => Some(serde_json::to_string_pretty(&reports).map_err(|e| Error::Format(e.to_string()))? + "\n"),
        None => None,
    };
    write_file(&a.out, &bytes)?;
    if let (Some(path), Some(text)) = (&a.report, report_text) {
        write_file(path, text.as_bytes())?;
    }
    say(out, format_args!("method {} match {} models {}", method.name(), a.match_first, models.len()))?;
    for (i, r) in reports.iter().enumerate() {
        say(out, format_args!("report {i}: distance_before {:.17e} distance_after {:.17e}", r.distance_before, r.distance_after))?;
    }
    if let Some(d) = datasets.first() {
        say(out, format_args!("loss {:.17e}", merged.loss(d)?))?;
    }
    say(out, format_args!("wrote {}", a.out.display()))?;
    Ok(EXIT_OK)
}

fn load_pair(p: &PairArgs) -> CliResult<(TransformerModel, TransformerModel)> {
    require_file(&p.a)?;
    require_file(&p.b)?;
    Ok((load_model(&p.a)?, load_model(&p.b)?))
}

fn interpolate(a: InterpolateArgs, out: &mut dyn Write) -> CliResult<i32> {
    require_file(&a.data)?;
    require_parent(&a.out)?;
    if a.points < 3 {
        return Err(CliError::Usage(format!("--points must be at least 3, got {}", a.points)));
    }
    let (ma, mb) = load_pair(&a.pair)?;
    let data = load_dataset(&a.data)?;
    let curve = interpolate_losses(&ma, &mb, &data, a.points)?;
    write_file(&a.out, curve.to_csv().as_bytes())?;
    say(out, format_args!("loss_a {:.17e}", curve.loss_a))?;
    say(out, format_args!("loss_b {:.17e}", curve.loss_b))?;
    say(out, format_args!("barrier {:.17e}", curve.barrier))?;
    Ok(EXIT_OK)
}

fn distance(a: PairArgs, out: &mut dyn Write) -> CliResult<i32> {
    let (ma, mb) = load_pair(&a)?;
    say(out, format_args!("distance {:.17e}", param_distance(&ma, &mb)?))?;
    Ok(EXIT_OK)
}

fn equiv(a: EquivArgs, out: &mut dyn Write) -> CliResult<i32> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let (ma, mb) = load_pair(&a.pair)?;
    let r = equivalence_check(&ma, &mb, a.n, a.seed)?;
    say(out, format_args!("n_inputs {}", r.n_inputs))?;
    say(out, format_args!("max_abs_logit_diff {:.6e}", r.max_abs_logit_diff))?;
    say(out, format_args!("mean_abs_diff {:.6e}", r.mean_abs_diff))?;
    if let Some(tol) = a.tol {
        if r.max_abs_logit_diff.is_nan() || r.max_abs_logit_diff > tol {
            say(out, format_args!("not equivalent within {tol:e}"))?;
            return Ok(EXIT_RUNTIME);
        }
    }
    Ok(EXIT_OK)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<i32> {
    require_file(&a.model)?;
    require_file(&a.data)?;
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    data.validate(&model.config)?;
    say(out, format_args!("loss {:.17e}", model.loss(&data)?))?;
    say(out, format_args!("accuracy {:.6}", model.accuracy(&data)?))?;
    Ok(EXIT_OK)
}
