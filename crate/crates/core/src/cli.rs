//! The `mosbench` command line: simulate, train, evaluate, ablate, analyze, replay.
//!
//! A data directory holds `<split>.csv` rating tables, optional
//! `embeddings/<utterance_id>.emb` frame files and an optional
//! `baseline_mos.csv`. Every command writes `run_manifest.txt` next to its
//! outputs; `replay` re-executes a manifest.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::analysis::report;
use crate::analysis::svg::{render_svg, Figure, GridOverlay};
use crate::analysis::{
    default_count_edges, default_mos_edges, flag_small_systems, split_divergence, system_mos_grid,
    utterance_count_histogram, utterance_counts,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Predictor};
use crate::config::KeyValues;
use crate::data::{
    compute_utterance_mos, load_baseline_mos, load_ratings, save_baseline_mos, save_ratings, split_stats,
    SplitTag, UtteranceRecord,
};
use crate::emb::{parse_emb1, save_emb1};
use crate::error::{Error, Result};
use crate::features::{build_vocab, FeatureConfig, DEFAULT_UNKNOWN_DROPOUT_P};
use crate::metrics::{csv_field, evaluate, Aggregation, MetricReport, REPORT_CSV_HEADER};
use crate::model::{Example, Model, ModelConfig, TrainHyper, TrainLog};
use crate::simulator::{known_keys, save_ground_truth, simulate_dataset, SimConfig, SplitPlan};

pub const MANIFEST_FILE: &str = "run_manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "mosbench", version, about = "MOS prediction with listening-test metadata")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic listening test.
    Simulate(SimulateArgs),
    /// Train a predictor on one split.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Train and score a grid of feature configurations.
    Ablate(AblateArgs),
    /// Split diagnostics: counts, MOS grid, reliability flags, divergence.
    Analyze(AnalyzeArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// `key = value` simulator and split settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 25)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_UNKNOWN_DROPOUT_P)]
    pub unknown_dropout_p: f64,
}

impl HyperArgs {
    fn hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    fn write_to(&self, kv: &mut KeyValues) {
        kv.set("config.lr", format!("{:?}", self.lr));
        kv.set("config.epochs", self.epochs);
        kv.set("config.batch_size", self.batch_size);
        kv.set("config.unknown_dropout_p", format!("{:?}", self.unknown_dropout_p));
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// System one-hot (S).
    #[arg(long)]
    pub system: bool,
    /// Rater-group one-hot (R).
    #[arg(long)]
    pub rater: bool,
    /// Force the rater group to unknown at inference (BR); needs --rater.
    #[arg(long)]
    pub blind_rater: bool,
    /// Acoustic frame embeddings (W2V).
    #[arg(long)]
    pub w2v: bool,
    /// External baseline MOS (M).
    #[arg(long)]
    pub baseline_mos: bool,
    /// Also train on the validation split.
    #[arg(long)]
    pub include_validation: bool,
    /// Write the train-split global MOS as a constant predictor instead of training.
    #[arg(long)]
    pub constant_mean: bool,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

impl TrainArgs {
    fn features(&self) -> Result<FeatureConfig> {
        let f = FeatureConfig {
            use_acoustic: self.w2v,
            use_system: self.system,
            use_rater: self.rater,
            rater_blinded: self.blind_rater,
            use_baseline_mos: self.baseline_mos,
            unknown_dropout_p: self.hyper.unknown_dropout_p,
        };
        f.validate()?;
        if self.constant_mean && !f.is_no_input() {
            return Err(Error::Config("--constant-mean takes no feature flags".into()));
        }
        Ok(f)
    }
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Replace every rater group by the unknown slot.
    #[arg(long)]
    pub blinded: bool,
    #[arg(long, default_value = "unweighted")]
    pub aggregation: Aggregation,
    /// Drop utterances whose rater group the checkpoint has never seen.
    #[arg(long)]
    pub subset_known_raters: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// One configuration label per line; defaults to the built-in 19-row grid.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Split the grid is scored on.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "unweighted")]
    pub aggregation: Aggregation,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Rating tables as `name=path.csv` (or a path; the name is its file stem).
    #[arg(required = true)]
    pub splits: Vec<String>,
    /// Split the others are compared with. Defaults to `train` when present.
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::analysis::DEFAULT_MIN_COUNT)]
    pub min_count: usize,
    #[arg(long, default_value_t = crate::analysis::DEFAULT_MOS_BIN_WIDTH)]
    pub mos_bin_width: f64,
    #[arg(long, default_value_t = 0.95)]
    pub confidence: f64,
    /// Any of md, csv, svg.
    #[arg(long, value_delimiter = ',', default_value = "md,csv,svg")]
    pub format: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn main_entry<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let argv: Vec<String> = argv.into_iter().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match run(cli, &argv[1..]) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mosbench: {e}");
            e.exit_code()
        }
    }
}

/// Runs a command given its arguments without the program name.
pub fn run_args<S: AsRef<str>>(args: &[S]) -> Result<()> {
    let argv: Vec<String> = std::iter::once("mosbench".to_string())
        .chain(args.iter().map(|a| a.as_ref().to_string()))
        .collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Config(e.to_string()))?;
    run(cli, &argv[1..])
}

pub fn run(cli: Cli, args: &[String]) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, args),
        Command::Train(a) => cmd_train(&a, args),
        Command::Evaluate(a) => cmd_evaluate(&a, args),
        Command::Ablate(a) => cmd_ablate(&a, args),
        Command::Analyze(a) => cmd_analyze(&a, args),
        Command::Replay(a) => cmd_replay(&a),
    }
}

fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// SHA-256 digests of everything a run read.
#[derive(Default)]
struct Inputs {
    digests: BTreeMap<String, String>,
    frames: Option<(String, Sha256)>,
}

impl Inputs {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.digests
            .insert(path.display().to_string(), hex(&Sha256::digest(&bytes)));
        Ok(bytes)
    }

    /// Frame files are folded into one digest per directory.
    fn read_frames(&mut self, dir: &Path, utterance: &str) -> Result<Vec<u8>> {
        let path = dir.join(format!("{utterance}.emb"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let key = dir.display().to_string();
        let (_, hasher) = self.frames.get_or_insert_with(|| (key, Sha256::new()));
        hasher.update(utterance.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        Ok(bytes)
    }

    fn write_to(mut self, kv: &mut KeyValues) {
        if let Some((key, hasher)) = self.frames.take() {
            self.digests.insert(key, hex(&hasher.finalize()));
        }
        for (path, digest) in self.digests {
            kv.set(&format!("input.{path}"), digest);
        }
    }
}

/// What a run did, in enough detail to redo it.
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// `config.*` entries with every default materialized.
    pub config: KeyValues,
}

impl RunManifest {
    fn render(&self, inputs: Inputs) -> String {
        let mut kv = KeyValues::new();
        kv.set("command", &self.command);
        kv.set("version", crate::VERSION);
        if let Some(seed) = self.seed {
            kv.set("seed", seed);
        }
        for (i, a) in self.args.iter().enumerate() {
            kv.set(&format!("arg.{i}"), a);
        }
        for (k, v) in self.config.iter() {
            kv.set(k, v);
        }
        inputs.write_to(&mut kv);
        format!("# mosbench run manifest\n{}", kv.render())
    }

    fn save(&self, inputs: Inputs, dir: &Path) -> Result<()> {
        write_file(dir.join(MANIFEST_FILE), self.render(inputs))
    }

    /// Recorded arguments, in order.
    pub fn read_args(path: &Path) -> Result<Vec<String>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let kv = KeyValues::parse(&text, &path.display().to_string())?;
        let mut args: Vec<(usize, String)> = Vec::new();
        for (k, v) in kv.iter() {
            if let Some(i) = k.strip_prefix("arg.") {
                let i = i
                    .parse()
                    .map_err(|_| Error::Config(format!("{}: bad argument key `{k}`", path.display())))?;
                args.push((i, v.to_string()));
            }
        }
        args.sort();
        if args.is_empty() || args.iter().enumerate().any(|(n, (i, _))| n != *i) {
            return Err(Error::Config(format!("{}: missing or gapped arg.N entries", path.display())));
        }
        Ok(args.into_iter().map(|(_, a)| a).collect())
    }
}

fn cmd_simulate(a: &SimulateArgs, args: &[String]) -> Result<()> {
    let mut inputs = Inputs::default();
    let mut kv = match &a.config {
        Some(path) => {
            let bytes = inputs.read(path)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
            KeyValues::parse(&text, &path.display().to_string())?
        }
        None => KeyValues::new(),
    };
    kv.reject_unknown(&known_keys())?;
    if let Some(seed) = a.seed {
        kv.set("seed", seed);
    }
    let sim = SimConfig::from_kv(&kv)?;
    let plan = SplitPlan::from_kv(&kv, &sim)?;
    let data = simulate_dataset(&sim)?;
    let splits = plan.apply(&data.table, &sim)?;

    let emb_dir = a.out.join("embeddings");
    create_dir(&emb_dir)?;
    save_ratings(&data.table, a.out.join("ratings.csv"))?;
    save_ratings(&splits.train, a.out.join("train.csv"))?;
    if let Some(t) = &splits.validation {
        save_ratings(t, a.out.join("validation.csv"))?;
    }
    if let Some(t) = &splits.test {
        save_ratings(t, a.out.join("test.csv"))?;
    }
    for (utt, frames) in &data.embeddings {
        save_emb1(frames, emb_dir.join(format!("{utt}.emb")))?;
    }
    save_ground_truth(&data.truth, &a.out)?;
    save_baseline_mos(data.baseline.iter().map(|(k, v)| (k.as_str(), *v)), a.out.join("baseline_mos.csv"))?;

    let mut resolved = KeyValues::new();
    sim.write_to(&mut resolved);
    plan.write_to(&mut resolved);
    let mut config = KeyValues::new();
    for (k, v) in resolved.iter() {
        config.set(&format!("config.{k}"), v);
    }
    RunManifest {
        command: "simulate".into(),
        args: args.to_vec(),
        seed: Some(sim.seed),
        config,
    }
    .save(inputs, &a.out)?;
    println!(
        "simulated {} utterances ({} ratings) from {} systems into {}",
        data.embeddings.len(),
        data.table.len(),
        sim.n_systems,
        a.out.display()
    );
    Ok(())
}

fn split_tag(name: &str) -> SplitTag {
    name.parse().unwrap_or(SplitTag::Custom)
}

fn load_split_records(root: &Path, split: &str, inputs: &mut Inputs) -> Result<Vec<UtteranceRecord>> {
    let path = root.join(format!("{split}.csv"));
    inputs.read(&path)?;
    let table = load_ratings(&path, split_tag(split))?;
    if table.is_empty() {
        return Err(Error::Validation(format!("{}: no ratings", path.display())));
    }
    Ok(compute_utterance_mos(&table))
}

/// Side inputs of a data directory, loaded on demand.
struct SideInputs {
    root: PathBuf,
    baseline: Option<HashMap<String, f64>>,
}

impl SideInputs {
    fn new(root: &Path) -> Self {
        SideInputs { root: root.to_path_buf(), baseline: None }
    }

    fn has_frames(&self) -> bool {
        self.root.join("embeddings").is_dir()
    }

    fn has_baseline(&self) -> bool {
        self.root.join("baseline_mos.csv").is_file()
    }

    fn examples(
        &mut self,
        records: Vec<UtteranceRecord>,
        frames: bool,
        baseline: bool,
        inputs: &mut Inputs,
    ) -> Result<Vec<Example>> {
        if baseline && self.baseline.is_none() {
            let path = self.root.join("baseline_mos.csv");
            inputs.read(&path)?;
            self.baseline = Some(load_baseline_mos(&path)?);
        }
        let emb_dir = self.root.join("embeddings");
        records
            .into_iter()
            .map(|record| {
                let frames = if frames {
                    let bytes = inputs.read_frames(&emb_dir, &record.utterance_id)?;
                    Some(parse_emb1(&bytes).map_err(|e| {
                        Error::Format(format!("{}/{}.emb: {e}", emb_dir.display(), record.utterance_id))
                    })?)
                } else {
                    None
                };
                let baseline = match &self.baseline {
                    Some(map) if baseline => Some(*map.get(&record.utterance_id).ok_or_else(|| {
                        Error::Config(format!(
                            "baseline_mos.csv has no prediction for utterance `{}`",
                            record.utterance_id
                        ))
                    })?),
                    _ => None,
                };
                Ok(Example { record, frames, baseline })
            })
            .collect()
    }
}

/// Builds the vocabulary from `train`, initializes from `hyper.seed` and trains.
pub fn fit(
    features: FeatureConfig,
    hyper: &TrainHyper,
    train: &[Example],
    validation: Option<&[Example]>,
) -> Result<(Model, TrainLog)> {
    features.validate()?;
    let records: Vec<UtteranceRecord> = train.iter().map(|e| e.record.clone()).collect();
    let vocab = build_vocab(&records)?;
    let mut config = ModelConfig {
        seed: hyper.seed,
        ..ModelConfig::default()
    };
    if features.use_acoustic {
        let frames = train
            .iter()
            .find_map(|e| e.frames.as_ref())
            .ok_or_else(|| Error::Config("acoustic features requested but no frames loaded".into()))?;
        config.embed_dim = frames.dim();
    }
    let mut model = Model::init(config, features, vocab)?;
    let log = model.train(train, validation, hyper)?;
    Ok((model, log))
}

/// Constant predictor at the global MOS of `train`.
pub fn constant_mean(train: &[Example]) -> Result<Predictor> {
    let records: Vec<UtteranceRecord> = train.iter().map(|e| e.record.clone()).collect();
    Ok(Predictor::ConstantMean {
        mos: split_stats(&records)?.global_mos,
        vocab: build_vocab(&records)?,
    })
}

/// Predicts and scores `examples`. Returns the report and the predictions.
pub fn score(
    predictor: &Predictor,
    examples: &[Example],
    blinded: bool,
    aggregation: Aggregation,
) -> Result<(MetricReport, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let preds: Vec<f64> = predictor
        .predict_batch(examples, blinded)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let labels: Vec<f64> = examples.iter().map(|e| e.record.mos).collect();
    let systems: Vec<&str> = examples.iter().map(|e| e.record.system_id.as_str()).collect();
    Ok((evaluate(&preds, &labels, &systems, aggregation)?, preds))
}

fn cmd_train(a: &TrainArgs, args: &[String]) -> Result<()> {
    let features = a.features()?;
    let hyper = a.hyper.hyper();
    let mut inputs = Inputs::default();
    let mut side = SideInputs::new(&a.data);
    let mut records = load_split_records(&a.data, &a.split, &mut inputs)?;
    let val_path = a.data.join("validation.csv");
    let val_records = if a.include_validation || (val_path.is_file() && a.split != "validation") {
        Some(load_split_records(&a.data, "validation", &mut inputs)?)
    } else {
        None
    };
    let mut validation = None;
    if let Some(v) = val_records {
        if a.include_validation {
            records.extend(v);
        } else {
            validation = Some(side.examples(v, features.use_acoustic, features.use_baseline_mos, &mut inputs)?);
        }
    }
    let train = side.examples(records, features.use_acoustic, features.use_baseline_mos, &mut inputs)?;

    create_dir(&a.out)?;
    let mut config = KeyValues::new();
    config.set("config.split", &a.split);
    config.set("config.include_validation", a.include_validation);
    let predictor = if a.constant_mean {
        config.set("config.features", "Constant Mean");
        constant_mean(&train)?
    } else {
        let (model, log) = fit(features, &hyper, &train, validation.as_deref())?;
        config.set("config.features", features);
        a.hyper.write_to(&mut config);
        let mut model_kv = KeyValues::new();
        model.config.write_to(&mut model_kv);
        for (k, v) in model_kv.iter() {
            config.set(&format!("config.model.{k}"), v);
        }
        write_file(a.out.join("train_log.csv"), log.to_csv())?;
        model.into()
    };
    let ckpt = a.out.join("model.ckpt");
    save_checkpoint(&predictor, &ckpt)?;
    RunManifest {
        command: "train".into(),
        args: args.to_vec(),
        seed: Some(hyper.seed),
        config,
    }
    .save(inputs, &a.out)?;
    let count = match &predictor {
        Predictor::Network(m) => m.parameter_count(),
        Predictor::ConstantMean { .. } => 0,
    };
    println!("{}: {count} parameters, checkpoint {}", predictor.label(), ckpt.display());
    Ok(())
}

fn predictions_csv(examples: &[Example], preds: &[f64]) -> String {
    let mut out = String::from("utterance_id,system_id,rater_group_id,mos,prediction\n");
    for (e, p) in examples.iter().zip(preds) {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?}",
            csv_field(&e.record.utterance_id),
            csv_field(&e.record.system_id),
            csv_field(&e.record.rater_group_id),
            e.record.mos,
            p
        );
    }
    out
}

fn cmd_evaluate(a: &EvaluateArgs, args: &[String]) -> Result<()> {
    let mut inputs = Inputs::default();
    inputs.read(&a.checkpoint)?;
    let predictor = load_checkpoint(&a.checkpoint)?;
    let features = predictor.features();
    let mut records = load_split_records(&a.data, &a.split, &mut inputs)?;
    if a.subset_known_raters {
        let before = records.len();
        records = crate::analysis::keep_known_raters(&records, predictor.vocab());
        log::info!("kept {} of {before} utterances with known rater groups", records.len());
        if records.is_empty() {
            return Err(Error::Validation("no utterance has a known rater group".into()));
        }
    }
    let mut side = SideInputs::new(&a.data);
    let examples = side.examples(records, features.use_acoustic, features.use_baseline_mos, &mut inputs)?;
    let (report, preds) = score(&predictor, &examples, a.blinded, a.aggregation)?;

    let mut label = predictor.label();
    if a.blinded && features.use_rater && !features.rater_blinded {
        label.push_str(" (blinded)");
    }
    if a.subset_known_raters {
        label.push_str(" (known raters)");
    }
    create_dir(&a.out)?;
    write_file(
        a.out.join("report.csv"),
        format!("{REPORT_CSV_HEADER}\n{}\n", report.csv_row(&label)),
    )?;
    let text = report.to_text(&label);
    write_file(a.out.join("report.txt"), &text)?;
    write_file(a.out.join("predictions.csv"), predictions_csv(&examples, &preds))?;
    let mut config = KeyValues::new();
    config.set("config.split", &a.split);
    config.set("config.blinded", a.blinded);
    config.set("config.aggregation", a.aggregation);
    config.set("config.subset_known_raters", a.subset_known_raters);
    RunManifest {
        command: "evaluate".into(),
        args: args.to_vec(),
        seed: None,
        config,
    }
    .save(inputs, &a.out)?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowKind {
    ConstantMean,
    Network(FeatureConfig),
}

/// One configuration of an ablation grid, e.g. `W2V+BR+S+M (valtrain)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub kind: RowKind,
    /// Train on train + validation.
    pub valtrain: bool,
}

impl FromStr for GridRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let label = s.trim().to_string();
        let (name, valtrain) = match label.strip_suffix("(valtrain)") {
            Some(rest) => (rest.trim(), true),
            None => (label.as_str(), false),
        };
        let name = name.trim_start_matches('(').trim_end_matches(')').trim();
        let kind = if name.eq_ignore_ascii_case("constant mean") {
            RowKind::ConstantMean
        } else if name.eq_ignore_ascii_case("no input dnn") {
            RowKind::Network(FeatureConfig::default())
        } else {
            RowKind::Network(name.parse()?)
        };
        Ok(GridRow { label, kind, valtrain })
    }
}

impl GridRow {
    /// Directory name for the row's outputs.
    pub fn slug(&self) -> String {
        let mut out = String::new();
        for c in self.label.chars() {
            if c.is_ascii_alphanumeric() {
                out.push(c.to_ascii_lowercase());
            } else if !out.ends_with('_') && !out.is_empty() {
                out.push('_');
            }
        }
        out.trim_end_matches('_').to_string()
    }
}

pub const DEFAULT_GRID: [&str; 19] = [
    "Constant Mean",
    "(No Input DNN)",
    "R",
    "S",
    "S+BR",
    "S+R",
    "W2V",
    "W2V+BR",
    "W2V+R",
    "W2V+S",
    "W2V+BR+S",
    "W2V+R+S",
    "M",
    "BR+S+M",
    "R+S+M",
    "W2V+BR+S+M",
    "W2V+R+S+M",
    "W2V+BR+S+M (valtrain)",
    "W2V+R+S+M (valtrain)",
];

pub fn default_grid() -> Vec<GridRow> {
    DEFAULT_GRID.iter().map(|r| r.parse().unwrap()).collect()
}

/// One label per line; blank lines and `#` comments are ignored.
pub fn parse_grid(text: &str) -> Result<Vec<GridRow>> {
    let rows: Vec<GridRow> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::Config("grid lists no configurations".into()));
    }
    let mut slugs = std::collections::HashSet::new();
    for r in &rows {
        if !slugs.insert(r.slug()) {
            return Err(Error::Config(format!("grid lists `{}` twice", r.label)));
        }
    }
    Ok(rows)
}

/// Examples for an ablation run.
pub struct GridData {
    pub train: Vec<Example>,
    pub validation: Option<Vec<Example>>,
    pub eval: Vec<Example>,
}

pub struct GridOutcome {
    pub predictor: Predictor,
    pub log: Option<TrainLog>,
    pub report: MetricReport,
}

/// Trains and scores one row. Rows with a blinded rater are scored blinded.
pub fn run_row(
    row: &GridRow,
    data: &GridData,
    hyper: &TrainHyper,
    unknown_dropout_p: f64,
    aggregation: Aggregation,
) -> Result<GridOutcome> {
    let joined;
    let train: &[Example] = if row.valtrain {
        let val = data
            .validation
            .as_ref()
            .ok_or_else(|| Error::Config("valtrain row needs a validation split".into()))?;
        joined = data.train.iter().chain(val).cloned().collect::<Vec<_>>();
        &joined
    } else {
        &data.train
    };
    let (predictor, log) = match &row.kind {
        RowKind::ConstantMean => (constant_mean(train)?, None),
        RowKind::Network(features) => {
            let features = FeatureConfig {
                unknown_dropout_p,
                ..*features
            };
            let validation = if row.valtrain { None } else { data.validation.as_deref() };
            let (model, log) = fit(features, hyper, train, validation)?;
            (model.into(), Some(log))
        }
    };
    let (report, _) = score(&predictor, &data.eval, false, aggregation)?;
    Ok(GridOutcome { predictor, log, report })
}

/// Runs every row in parallel; results come back in grid order.
pub fn run_grid(
    rows: &[GridRow],
    data: &GridData,
    hyper: &TrainHyper,
    unknown_dropout_p: f64,
    aggregation: Aggregation,
) -> Vec<Result<GridOutcome>> {
    rows.par_iter()
        .map(|row| {
            let out = run_row(row, data, hyper, unknown_dropout_p, aggregation);
            match &out {
                Ok(o) => log::info!("{}: utterance MSE {:.4}", row.label, o.report.utterance_mse),
                Err(e) => log::warn!("{}: {e}", row.label),
            }
            out
        })
        .collect()
}

pub const ABLATION_CSV_HEADER: &str =
    "config,sys_srcc,sys_mse,utt_srcc,utt_mse,n_utt,n_sys,aggregation,status";

pub fn ablation_row(row: &GridRow, outcome: &Result<GridOutcome>) -> String {
    match outcome {
        Ok(o) => format!("{},ok", o.report.csv_row(&row.label)),
        Err(e) => format!("{},,,,,,,,{}", csv_field(&row.label), csv_field(&format!("error: {e}"))),
    }
}

fn cmd_ablate(a: &AblateArgs, args: &[String]) -> Result<()> {
    let mut inputs = Inputs::default();
    let rows = match &a.grid {
        Some(path) => {
            let bytes = inputs.read(path)?;
            parse_grid(&String::from_utf8_lossy(&bytes))?
        }
        None => default_grid(),
    };
    if !(0.0..=1.0).contains(&a.hyper.unknown_dropout_p) {
        return Err(Error::Config(format!(
            "--unknown-dropout-p {} outside [0, 1]",
            a.hyper.unknown_dropout_p
        )));
    }
    let net = |f: fn(&FeatureConfig) -> bool| {
        rows.iter().any(|r| matches!(&r.kind, RowKind::Network(c) if f(c)))
    };
    let mut side = SideInputs::new(&a.data);
    let frames = net(|c| c.use_acoustic) && side.has_frames();
    let baseline = net(|c| c.use_baseline_mos) && side.has_baseline();
    if net(|c| c.use_acoustic) && !frames {
        log::warn!("no embeddings/ directory; acoustic rows will fail");
    }
    if net(|c| c.use_baseline_mos) && !baseline {
        log::warn!("no baseline_mos.csv; baseline rows will fail");
    }
    let train = load_split_records(&a.data, "train", &mut inputs)?;
    let validation = if a.data.join("validation.csv").is_file() {
        Some(load_split_records(&a.data, "validation", &mut inputs)?)
    } else {
        None
    };
    let eval = load_split_records(&a.data, &a.split, &mut inputs)?;
    let data = GridData {
        train: side.examples(train, frames, baseline, &mut inputs)?,
        validation: validation
            .map(|v| side.examples(v, frames, baseline, &mut inputs))
            .transpose()?,
        eval: side.examples(eval, frames, baseline, &mut inputs)?,
    };

    let hyper = a.hyper.hyper();
    let outcomes = run_grid(&rows, &data, &hyper, a.hyper.unknown_dropout_p, a.aggregation);

    let configs = a.out.join("configs");
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    for (row, outcome) in rows.iter().zip(&outcomes) {
        csv.push_str(&ablation_row(row, outcome));
        csv.push('\n');
        if let Ok(o) = outcome {
            let dir = configs.join(row.slug());
            create_dir(&dir)?;
            save_checkpoint(&o.predictor, dir.join("model.ckpt"))?;
            if let Some(log) = &o.log {
                write_file(dir.join("train_log.csv"), log.to_csv())?;
            }
        }
    }
    create_dir(&a.out)?;
    write_file(a.out.join("ablation.csv"), &csv)?;

    let mut config = KeyValues::new();
    config.set("config.split", &a.split);
    config.set("config.aggregation", a.aggregation);
    config.set(
        "config.grid",
        rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>().join(" | "),
    );
    a.hyper.write_to(&mut config);
    RunManifest {
        command: "ablate".into(),
        args: args.to_vec(),
        seed: Some(hyper.seed),
        config,
    }
    .save(inputs, &a.out)?;
    print!("{csv}");
    Ok(())
}

fn parse_split_spec(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), path.into())),
        Some(_) => Err(Error::Config(format!("split `{spec}`: expected name=path.csv"))),
        None => {
            let path = PathBuf::from(spec);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| Error::Config(format!("split `{spec}` has no file name")))?;
            Ok((name, path))
        }
    }
}

fn cmd_analyze(a: &AnalyzeArgs, args: &[String]) -> Result<()> {
    let mut formats = [false; 3];
    for f in &a.format {
        match f.trim() {
            "md" => formats[0] = true,
            "csv" => formats[1] = true,
            "svg" => formats[2] = true,
            other => return Err(Error::Config(format!("unknown format `{other}` (md, csv, svg)"))),
        }
    }
    let [md, csv, svg] = formats;
    if !(a.confidence > 0.0 && a.confidence < 1.0) {
        return Err(Error::Config(format!("--confidence {} outside (0, 1)", a.confidence)));
    }
    if a.min_count == 0 {
        return Err(Error::Config("--min-count must be at least 1".into()));
    }
    let mos_edges = default_mos_edges(a.mos_bin_width)?;

    let mut inputs = Inputs::default();
    let mut splits: Vec<(String, Vec<UtteranceRecord>)> = Vec::new();
    for spec in &a.splits {
        let (name, path) = parse_split_spec(spec)?;
        if splits.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("split name `{name}` given twice")));
        }
        inputs.read(&path)?;
        let table = load_ratings(&path, split_tag(&name))?;
        let records = compute_utterance_mos(&table);
        if records.is_empty() {
            return Err(Error::Validation(format!("{}: no ratings", path.display())));
        }
        splits.push((name, records));
    }
    let reference = match &a.reference {
        Some(r) if splits.iter().any(|(n, _)| n == r) => Some(r.clone()),
        Some(r) => return Err(Error::Config(format!("--reference `{r}` is not one of the splits"))),
        None if splits.len() > 1 && splits.iter().any(|(n, _)| n == "train") => Some("train".into()),
        None => None,
    };
    let ref_records = reference
        .as_ref()
        .and_then(|r| splits.iter().find(|(n, _)| n == r))
        .map(|(_, recs)| recs.as_slice());

    create_dir(&a.out)?;
    let max_count = splits
        .iter()
        .flat_map(|(_, recs)| utterance_counts(recs).into_values())
        .max()
        .unwrap_or(1);
    let count_edges = default_count_edges(max_count);
    let overlays: Vec<GridOverlay> = splits
        .iter()
        .map(|(n, recs)| GridOverlay::from_records(n, recs))
        .collect();

    let mut doc = String::from("# Split diagnostics\n\n");
    for (name, records) in &splits {
        let stats = split_stats(records)?;
        let _ = writeln!(
            doc,
            "## Split `{name}`\n\n{} utterances, {} systems, {} rater groups, MOS {:.3}\n",
            stats.n_utterances, stats.n_systems, stats.n_rater_groups, stats.global_mos
        );
        let mut hist = utterance_count_histogram(records, &count_edges)?;
        hist.title = format!("{name}: utterances per system");
        let grid = system_mos_grid(records, &mos_edges)?;
        let against = if reference.as_deref() == Some(name.as_str()) { None } else { ref_records };
        let diags = flag_small_systems(records, a.min_count, against)?;
        if md {
            doc.push_str(&report::histogram_markdown(&hist));
            doc.push('\n');
            doc.push_str(&report::diagnostics_markdown(&diags, a.confidence, a.min_count)?);
            doc.push('\n');
        }
        if csv {
            write_file(a.out.join(format!("{name}_counts.csv")), report::histogram_csv(&hist))?;
            write_file(a.out.join(format!("{name}_mos_grid.csv")), report::grid_csv(&grid))?;
            write_file(
                a.out.join(format!("{name}_systems.csv")),
                report::diagnostics_csv(&diags, a.confidence)?,
            )?;
        }
        if svg {
            render_svg(&Figure::Histogram(&hist), a.out.join(format!("{name}_counts.svg")))?;
            render_svg(&Figure::Grid(&grid, &overlays), a.out.join(format!("{name}_mos_grid.svg")))?;
        }
    }
    if let (Some(rname), Some(rrecs)) = (&reference, ref_records) {
        for (name, records) in splits.iter().filter(|(n, _)| n != rname) {
            let d = split_divergence(rrecs, records)?;
            if md {
                doc.push_str(&report::divergence_markdown(name, rname, &d));
                doc.push('\n');
            }
            if csv {
                write_file(a.out.join(format!("divergence_{name}.csv")), report::divergence_csv(&d))?;
            }
        }
    }
    if md {
        write_file(a.out.join("report.md"), &doc)?;
    }

    let mut config = KeyValues::new();
    config.set("config.reference", reference.as_deref().unwrap_or(""));
    config.set("config.min_count", a.min_count);
    config.set("config.mos_bin_width", format!("{:?}", a.mos_bin_width));
    config.set("config.confidence", format!("{:?}", a.confidence));
    config.set("config.format", a.format.join(","));
    RunManifest {
        command: "analyze".into(),
        args: args.to_vec(),
        seed: None,
        config,
    }
    .save(inputs, &a.out)?;
    if md {
        print!("{doc}");
    }
    Ok(())
}

/// Replaces the value of `--out` (either `--out DIR` or `--out=DIR`).
fn override_out(args: &mut [String], out: &Path) -> Result<()> {
    let out = out.display().to_string();
    for i in 0..args.len() {
        if args[i] == "--out" && i + 1 < args.len() {
            args[i + 1] = out;
            return Ok(());
        }
        if args[i].starts_with("--out=") {
            args[i] = format!("--out={out}");
            return Ok(());
        }
    }
    Err(Error::Config("recorded command has no --out".into()))
}

fn cmd_replay(a: &ReplayArgs) -> Result<()> {
    let mut args = RunManifest::read_args(&a.manifest)?;
    if args.first().map(String::as_str) == Some("replay") {
        return Err(Error::Config("a replay manifest cannot be replayed".into()));
    }
    if let Some(out) = &a.out {
        override_out(&mut args, out)?;
    }
    run_args(&args)
}
