//! Command-line driver. Every subcommand writes a JSON run manifest
//! (arguments, resolved configuration, seeds, input checksums, outputs and
//! wall time) atomically at the end of the run.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or format error,
//! 4 a checked threshold was not met.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::binder::ReCoParams;
use crate::cache;
use crate::diagnostics;
use crate::dpo::{self, DpoConfig};
use crate::experiment::{self, CaptionSettings};
use crate::ga;
use crate::metrics::{self, Answer, BinaryEval, BinaryItem, ChairCorpus, EvalReport, Label};
use crate::vlm::{self, DecodeMode, SceneSpec, ToyVlm, VlmConfig};
use crate::Fnv1a;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_THRESHOLD: i32 = 4;

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "RECO_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "reco-lab", version, about = "Toy VLM simulation, ReCo training and hallucination diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Caption scenes with the toy model and cache preference traces.
    Simulate(SimulateArgs),
    /// Train ReCo on a trace cache with the DPO objective.
    Train(TrainArgs),
    /// Score captions (CHAIR) and optional yes/no answers (POPE, AMBER, accuracy+).
    Eval(EvalArgs),
    /// Image-influence curve (Hellinger distance per step).
    Diagnose(DiagnoseArgs),
    /// Geometric-algebra checks.
    Ga {
        #[command(subcommand)]
        command: GaCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum GaCommand {
    /// Run the randomized property suite; exits 4 if any property fails.
    Check(GaCheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Greedy,
    Temperature,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Model configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Scene set (JSON lines).
    #[arg(long)]
    pub scenes: PathBuf,
    /// Output trace cache.
    #[arg(long)]
    pub out: PathBuf,
    /// Captions output (JSON lines); defaults to `<out>.captions.jsonl`.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// ReCo checkpoint applied while captioning.
    #[arg(long)]
    pub reco: Option<PathBuf>,
    #[arg(long, default_value_t = 96)]
    pub max_len: usize,
    #[arg(long, value_enum, default_value_t = Mode::Greedy)]
    pub mode: Mode,
    /// Sampling temperature for `--mode temperature`.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Sampling seed for `--mode temperature`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Prompt token ids, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub prompt: Vec<u32>,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Trace cache produced by `simulate` or an exporter.
    #[arg(long)]
    pub cache: PathBuf,
    /// Model configuration; supplies the frozen prediction head.
    #[arg(long)]
    pub model_config: PathBuf,
    /// DPO configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub dpo_config: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Starting (and reference) parameters; identity if absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Overrides the shuffle seed from the DPO configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Captions (JSON lines with `scene_index` and `tokens`).
    #[arg(long)]
    pub captions: PathBuf,
    /// Scene set the captions describe.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Model configuration; supplies the object-token range.
    #[arg(long)]
    pub config: PathBuf,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Single-row report CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Yes/no answers (JSON lines with `answer`, `label`, optional `pair_id`).
    #[arg(long)]
    pub pope: Option<PathBuf>,
    /// Run name recorded in the report.
    #[arg(long, default_value = "run")]
    pub run: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub scenes: PathBuf,
    /// Curve CSV (`t,hellinger`); metadata goes to `<out>.meta.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// ReCo checkpoint.
    #[arg(long)]
    pub reco: Option<PathBuf>,
    #[arg(long, default_value_t = 96)]
    pub t_max: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub prompt: Vec<u32>,
    /// Also write one column per scene to this CSV.
    #[arg(long)]
    pub per_scene: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GaCheckArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 2)]
    pub min_dim: usize,
    #[arg(long, default_value_t = 5)]
    pub max_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Swap in a product with a broken sign rule (mutation check).
    #[arg(long, hide = true)]
    pub inject_sign_bug: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Threshold(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Threshold(_) => EXIT_THRESHOLD,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Threshold(m) => write!(f, "check failed: {m}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn data<E: Display>(context: impl Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

/// One caption line of `simulate` output and `eval` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub example_id: String,
    pub scene_index: usize,
    pub tokens: Vec<u32>,
}

/// One yes/no item of `eval --pope` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeLine {
    pub answer: String,
    pub label: String,
    #[serde(default)]
    pub pair_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub fnv1a: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub subcommand: String,
    /// Command-line arguments after the program name, for replay.
    pub args: Vec<String>,
    /// Resolved configuration, including defaults.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, InputDigest>,
    pub outputs: BTreeMap<String, String>,
    /// Summary numbers of the run (checksums, losses, scores).
    pub results: Value,
    pub threads: usize,
    pub wall_time_secs: f64,
}

impl RunManifest {
    /// Write to a sibling temporary file, then rename over `path`.
    pub fn write_atomic(&self, path: &Path) -> std::io::Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec_pretty(self).expect("manifest serializes"))?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)
    }

    pub fn read(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Collects what a subcommand touched for its manifest.
struct Recorder {
    subcommand: &'static str,
    args: Vec<String>,
    start: Instant,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, InputDigest>,
    outputs: BTreeMap<String, String>,
}

impl Recorder {
    fn new(subcommand: &'static str, args: &[String]) -> Self {
        Self {
            subcommand,
            args: args.to_vec(),
            start: Instant::now(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(data(format!("reading {}", path.display())))?;
        self.inputs.insert(
            name.into(),
            InputDigest { path: path.display().to_string(), fnv1a: format!("{:016x}", Fnv1a::hash(&bytes)) },
        );
        Ok(())
    }

    fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.display().to_string());
    }

    fn finish(self, config: Value, results: Value, path: Option<&Path>) -> Result<()> {
        let Some(path) = path else { return Ok(()) };
        let manifest = RunManifest {
            tool: format!("reco-lab {}", env!("CARGO_PKG_VERSION")),
            subcommand: self.subcommand.into(),
            args: self.args,
            config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            results,
            threads: rayon::current_num_threads(),
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        manifest.write_atomic(path).map_err(data(format!("writing manifest {}", path.display())))
    }
}

fn default_manifest(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

fn load_model(path: &Path) -> Result<ToyVlm> {
    let cfg = VlmConfig::load(path).map_err(data(format!("model config {}", path.display())))?;
    ToyVlm::build(cfg).map_err(data(format!("model config {}", path.display())))
}

fn load_scenes(path: &Path, n_obj: usize) -> Result<Vec<SceneSpec>> {
    let scenes = vlm::read_scenes(path).map_err(data(format!("scenes {}", path.display())))?;
    for (i, s) in scenes.iter().enumerate() {
        s.validate(n_obj).map_err(data(format!("scenes {} entry {i}", path.display())))?;
    }
    Ok(scenes)
}

fn load_checkpoint(path: &Path, d: usize) -> Result<ReCoParams> {
    let p = ReCoParams::load(path).map_err(data(format!("checkpoint {}", path.display())))?;
    if p.dim() != d {
        return Err(CliError::Data(format!("checkpoint {} has d = {} but the model has d = {d}", path.display(), p.dim())));
    }
    Ok(p)
}

fn check_prompt(prompt: &[u32], vocab: usize) -> Result<()> {
    match prompt.iter().find(|&&t| t as usize >= vocab) {
        Some(t) => Err(CliError::Usage(format!("prompt token {t} outside the vocabulary of {vocab}"))),
        None => Ok(()),
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(data(format!("opening {}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(data(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(data(format!("{} line {}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("serializable");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(data(format!("writing {}", path.display())))
}

fn set_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // A pool may already exist when the driver runs more than once in one
    // process; the first setting then stays in force.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let rest: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match set_threads().and_then(|_| dispatch(cli.command, &rest)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("reco-lab: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command, args: &[String]) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a, args),
        Command::Train(a) => train(a, args),
        Command::Eval(a) => eval(a, args),
        Command::Diagnose(a) => diagnose(a, args),
        Command::Ga { command: GaCommand::Check(a) } => ga_check(a, args),
    }
}

fn simulate(a: SimulateArgs, args: &[String]) -> Result<()> {
    let mut rec = Recorder::new("simulate", args);
    let model = load_model(&a.config)?;
    rec.input("config", &a.config)?;
    let cfg = model.config().clone();
    let scenes = load_scenes(&a.scenes, cfg.n_obj)?;
    rec.input("scenes", &a.scenes)?;
    check_prompt(&a.prompt, cfg.vocab_size)?;
    if a.max_len == 0 {
        return Err(CliError::Usage("--max-len must be at least 1".into()));
    }
    let reco = match &a.reco {
        Some(p) => {
            rec.input("reco", p)?;
            Some(load_checkpoint(p, cfg.d)?)
        }
        None => None,
    };
    let mode = match a.mode {
        Mode::Greedy => DecodeMode::Greedy,
        Mode::Temperature => {
            if !(a.temperature > 0.0 && a.temperature.is_finite()) {
                return Err(CliError::Usage("--temperature must be positive".into()));
            }
            rec.seeds.insert("sampling".into(), a.seed);
            DecodeMode::Temperature { temperature: a.temperature, seed: a.seed }
        }
    };
    rec.seeds.insert("model".into(), cfg.seed);

    let settings = CaptionSettings { max_len: a.max_len, reco: reco.as_ref(), mode };
    let pairs = experiment::preference_records(&model, &scenes, &a.prompt, &settings).map_err(data("simulation"))?;
    let (records, captions): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let checksum =
        cache::write_cache_with_dim(&records, cfg.d, &a.out).map_err(data(format!("writing {}", a.out.display())))?;
    rec.output("cache", &a.out);

    let captions_path = a.captions.clone().unwrap_or_else(|| {
        let mut p = a.out.as_os_str().to_owned();
        p.push(".captions.jsonl");
        PathBuf::from(p)
    });
    let lines: Vec<CaptionLine> = captions
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| CaptionLine { example_id: experiment::example_id(i), scene_index: i, tokens })
        .collect();
    write_jsonl(&captions_path, &lines)?;
    rec.output("captions", &captions_path);

    println!("wrote {} records to {} (checksum {checksum:016x})", records.len(), a.out.display());
    let config = json!({
        "model": cfg,
        "max_len": a.max_len,
        "mode": a.mode,
        "temperature": a.temperature,
        "prompt": a.prompt,
        "reco": a.reco.as_ref().map(|p| p.display().to_string()),
    });
    let results = json!({ "cache_checksum": format!("{checksum:016x}"), "records": records.len() });
    rec.finish(config, results, Some(&a.manifest.unwrap_or_else(|| default_manifest(&a.out))))
}

fn train(a: TrainArgs, args: &[String]) -> Result<()> {
    let mut rec = Recorder::new("train", args);
    let model = load_model(&a.model_config)?;
    rec.input("model_config", &a.model_config)?;
    let mut cfg: DpoConfig = match &a.dpo_config {
        Some(p) => {
            rec.input("dpo_config", p)?;
            let bytes = std::fs::read(p).map_err(data(format!("reading {}", p.display())))?;
            serde_json::from_slice(&bytes).map_err(data(format!("DPO config {}", p.display())))?
        }
        None => DpoConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    rec.seeds.insert("shuffle".into(), cfg.seed);

    let contents = cache::read_cache(&a.cache).map_err(data(format!("cache {}", a.cache.display())))?;
    rec.input("cache", &a.cache)?;
    let d = model.config().d;
    if contents.header.d as usize != d {
        return Err(CliError::Data(format!("cache has d = {} but the model has d = {d}", contents.header.d)));
    }
    let fingerprint = model.config().fingerprint();
    if let Some(r) = contents.records.iter().find(|r| r.source.model == experiment::SOURCE_MODEL && r.source.config_fingerprint != fingerprint) {
        return Err(CliError::Data(format!(
            "record {} was produced by model config {} but --model-config is {fingerprint}",
            r.example_id, r.source.config_fingerprint
        )));
    }
    let quads = contents
        .records
        .iter()
        .map(dpo::PreferenceQuad::from_record)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(data("cache records"))?;
    let init = match &a.init {
        Some(p) => {
            rec.input("init", p)?;
            load_checkpoint(p, d)?
        }
        None => ReCoParams::identity_init(d).map_err(data("identity init"))?,
    };
    let outcome = dpo::train(model.head(), &quads, &cfg, &init).map_err(data("training"))?;
    outcome.params.save(&a.out).map_err(data(format!("writing {}", a.out.display())))?;
    rec.output("checkpoint", &a.out);

    println!("trained on {} quads: loss {:.6} -> {:.6}", quads.len(), outcome.initial_loss, outcome.epoch_losses.last().copied().unwrap_or(outcome.initial_loss));
    let results = json!({
        "cache_checksum": format!("{:016x}", contents.checksum),
        "quads": quads.len(),
        "initial_loss": outcome.initial_loss,
        "epoch_losses": outcome.epoch_losses,
        "steps": outcome.steps,
    });
    rec.finish(json!({ "dpo": cfg, "model": model.config() }), results, Some(&a.manifest.unwrap_or_else(|| default_manifest(&a.out))))
}

fn parse_label(s: &str) -> Option<Label> {
    match s.trim().to_ascii_lowercase().as_str() {
        "yes" => Some(Label::Yes),
        "no" => Some(Label::No),
        _ => None,
    }
}

fn eval(a: EvalArgs, args: &[String]) -> Result<()> {
    let mut rec = Recorder::new("eval", args);
    let cfg = VlmConfig::load(&a.config).map_err(data(format!("model config {}", a.config.display())))?;
    cfg.validate().map_err(data("model config"))?;
    rec.input("config", &a.config)?;
    let scenes = load_scenes(&a.scenes, cfg.n_obj)?;
    rec.input("scenes", &a.scenes)?;
    let captions: Vec<CaptionLine> = read_jsonl(&a.captions)?;
    rec.input("captions", &a.captions)?;

    let mut corpus = ChairCorpus::default();
    for c in &captions {
        let scene = scenes.get(c.scene_index).ok_or_else(|| {
            CliError::Data(format!("caption {} refers to scene {} of {}", c.example_id, c.scene_index, scenes.len()))
        })?;
        corpus.add(&experiment::caption_eval(&cfg, &c.tokens, scene));
    }
    let mut report = EvalReport::new(a.run.clone());
    report.add_chair(&corpus).map_err(data("CHAIR"))?;

    if let Some(path) = &a.pope {
        let lines: Vec<PopeLine> = read_jsonl(path)?;
        rec.input("pope", path)?;
        let items = lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let label = parse_label(&l.label)
                    .ok_or_else(|| CliError::Data(format!("{} item {}: label {:?} is not yes/no", path.display(), i + 1, l.label)))?;
                Ok(BinaryItem { predicted: Answer::parse(&l.answer), label, pair_id: l.pair_id.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        let eval = BinaryEval { items };
        let scores = metrics::pope_scores(&eval).map_err(data("POPE"))?;
        report.add_pope(&scores);
        let amber = metrics::amber_score(100.0 * corpus.chair_i().value, 100.0 * scores.f1).map_err(data("AMBER"))?;
        report.metrics.insert("amber".into(), amber);
        if eval.items.iter().all(|i| i.pair_id.is_some()) {
            report.metrics.insert("accuracy_plus".into(), metrics::accuracy_plus(&eval).map_err(data("accuracy+"))?);
        } else {
            report.warnings.push("answers lack pair ids; accuracy+ skipped".into());
        }
    }

    report.write_json(&a.out).map_err(data(format!("writing {}", a.out.display())))?;
    rec.output("report", &a.out);
    if let Some(csv) = &a.csv {
        report.write_csv(csv).map_err(data(format!("writing {}", csv.display())))?;
        rec.output("csv", csv);
    }
    for (k, v) in &report.metrics {
        println!("{k:>16} {v:.6}");
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let results = serde_json::to_value(&report.metrics).expect("metrics serialize");
    rec.finish(json!({ "model": cfg, "run": a.run }), results, Some(&a.manifest.unwrap_or_else(|| default_manifest(&a.out))))
}

fn diagnose(a: DiagnoseArgs, args: &[String]) -> Result<()> {
    let mut rec = Recorder::new("diagnose", args);
    let model = load_model(&a.config)?;
    rec.input("config", &a.config)?;
    let cfg = model.config().clone();
    rec.seeds.insert("model".into(), cfg.seed);
    let scenes = load_scenes(&a.scenes, cfg.n_obj)?;
    rec.input("scenes", &a.scenes)?;
    check_prompt(&a.prompt, cfg.vocab_size)?;
    if a.t_max == 0 {
        return Err(CliError::Usage("--t-max must be at least 1".into()));
    }
    let reco = match &a.reco {
        Some(p) => {
            rec.input("reco", p)?;
            Some(load_checkpoint(p, cfg.d)?)
        }
        None => None,
    };
    let curves = diagnostics::per_scene_curves(&model, &scenes, &a.prompt, a.t_max, reco.as_ref()).map_err(data("diagnostics"))?;
    let curve = diagnostics::influence_curve(&model, &scenes, &a.prompt, a.t_max, reco.as_ref()).map_err(data("diagnostics"))?;
    diagnostics::export_curve(&curve, &a.out).map_err(data(format!("writing {}", a.out.display())))?;
    rec.output("curve", &a.out);
    rec.output("curve_meta", &diagnostics::sidecar_path(&a.out));
    if let Some(p) = &a.per_scene {
        diagnostics::export_per_scene(&curves, p).map_err(data(format!("writing {}", p.display())))?;
        rec.output("per_scene", p);
    }
    let early = curve.window_mean(0..(a.t_max / 12).max(1));
    let late = curve.window_mean(2 * a.t_max / 3..a.t_max);
    println!("{} scenes, {} steps: early mean {:?}, late mean {:?}", scenes.len(), a.t_max, early, late);
    let config = json!({ "model": cfg, "t_max": a.t_max, "prompt": a.prompt, "reco": a.reco.as_ref().map(|p| p.display().to_string()) });
    rec.finish(config, json!({ "early_mean": early, "late_mean": late }), Some(&a.manifest.unwrap_or_else(|| default_manifest(&a.out))))
}

fn ga_check(a: GaCheckArgs, args: &[String]) -> Result<()> {
    let mut rec = Recorder::new("ga check", args);
    rec.seeds.insert("suite".into(), a.seed);
    let cfg = ga::SuiteConfig { trials: a.trials, min_dim: a.min_dim, max_dim: a.max_dim, seed: a.seed, ..ga::SuiteConfig::default() };
    let product: &ga::ProductFn = if a.inject_sign_bug { &ga::sign_bug_product } else { &ga::geometric_product };
    let report = ga::run_property_suite_with(&cfg, product).map_err(|e| CliError::Usage(e.to_string()))?;
    for p in &report.properties {
        println!("{:<28} checked {:>6}  failures {:>4}  worst {:.3e}", p.name, p.checked, p.failures, p.worst);
    }
    let passed = report.passed();
    println!("{}", if passed { "all properties hold" } else { "property violations found" });
    let results = json!({
        "passed": passed,
        "properties": report.properties.iter().map(|p| json!({"name": p.name, "checked": p.checked, "failures": p.failures, "worst": p.worst})).collect::<Vec<_>>(),
    });
    let config = json!({ "trials": a.trials, "min_dim": a.min_dim, "max_dim": a.max_dim, "inject_sign_bug": a.inject_sign_bug });
    rec.finish(config, results, a.manifest.as_deref())?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Threshold("geometric-algebra property suite".into()))
    }
}
