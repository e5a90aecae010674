//! Command implementations behind the `mcoref` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Args;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{pseudo_coref, pseudo_grounding};
use crate::data::{load_jsonl, split, synth_generate, write_jsonl, Sample, SyntheticConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, Fault, GradcheckConfig, GradcheckReport};
use crate::infer::{predict_sample, read_predictions, score_prediction, write_predictions, InferConfig, PredictionRecord};
use crate::losses::{LossConfig, Term};
use crate::metrics::{EvalReport, Evaluator};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::train::{fit_with, FitHooks, TrainConfig};

/// Content digest of one file: SHA-256 over `blob <len>\0<bytes>`, as in
/// git's SHA-256 object format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn file_digest(path: &Path) -> Result<FileDigest> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", data.len()).as_bytes());
    h.update(&data);
    let sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(FileDigest {
        path: path.display().to_string(),
        bytes: data.len() as u64,
        sha256,
    })
}

/// Record of one command run, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix_secs: f64,
    pub elapsed_secs: f64,
}

struct ManifestBuilder {
    command: &'static str,
    started: Instant,
    started_unix: f64,
}

impl ManifestBuilder {
    fn start(command: &'static str) -> Self {
        ManifestBuilder {
            command,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
        }
    }

    fn finish<C: Serialize>(self, config: &C, seed: u64, inputs: &[&Path], outputs: &[&Path], dest: &Path) -> Result<RunManifest> {
        let m = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: inputs.iter().map(|p| file_digest(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| file_digest(p)).collect::<Result<_>>()?,
            started_unix_secs: self.started_unix,
            elapsed_secs: self.started.elapsed().as_secs_f64(),
        };
        write_json(dest, &m)?;
        Ok(m)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Manifest path of a single-file output: `<file>.manifest.json`.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Reads a config document; `.json` files are JSON, anything else TOML.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load_config)
}

// ---------------------------------------------------------------- synth

#[derive(Args, Clone, Debug, Default)]
pub struct SynthArgs {
    /// Generator config (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output JSONL dataset.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub world_seed: Option<u64>,
    /// Feature noise standard deviation.
    #[arg(long)]
    pub sigma: Option<f64>,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<RunManifest> {
    let mb = ManifestBuilder::start("synth");
    let mut cfg: SyntheticConfig = load_or_default(args.config.as_deref())?;
    if let Some(n) = args.n_samples {
        cfg.n_samples = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.world_seed {
        cfg.world_seed = s;
    }
    if let Some(s) = args.sigma {
        cfg.feature_noise_sigma = s;
    }
    let (world, samples) = synth_generate(&cfg)?;
    write_jsonl(&args.out, &samples)?;
    let mut vocab_path = args.out.as_os_str().to_owned();
    vocab_path.push(".vocab.json");
    let vocab_path = PathBuf::from(vocab_path);
    write_json(&vocab_path, &world.vocab)?;
    let mut inputs = Vec::new();
    if let Some(c) = &args.config {
        inputs.push(c.as_path());
    }
    mb.finish(&cfg, cfg.seed, &inputs, &[&args.out, &vocab_path], &manifest_path_for(&args.out))
}

// ---------------------------------------------------------------- train

/// Everything a training run reads from its config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    /// Share of the annotated samples whose labels are kept.
    pub labeled_frac: f64,
    /// Share of the annotated samples held out for model selection.
    pub val_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            labeled_frac: 1.0,
            val_frac: 0.0,
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    /// Training dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Run config (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of annotated samples that keep their labels.
    #[arg(long)]
    pub labeled_frac: Option<f64>,
    /// Fraction of annotated samples held out for model selection.
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Loss multipliers, e.g. `pcr=0,pgd=0`.
    #[arg(long)]
    pub loss_weights: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Save a checkpoint every N epochs.
    #[arg(long)]
    pub ckpt_every: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

pub const CHECKPOINT_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "train_summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Applies command-line overrides to a run config.
pub fn resolve_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = load_or_default(args.config.as_deref())?;
    if let Some(f) = args.labeled_frac {
        cfg.labeled_frac = f;
    }
    if let Some(f) = args.val_frac {
        cfg.val_frac = f;
    }
    if let Some(w) = &args.loss_weights {
        cfg.loss.loss_weights.apply_overrides(w)?;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(t) = args.threads {
        cfg.train.threads = t;
    }
    if !(0.0..1.0).contains(&cfg.val_frac) {
        return Err(Error::Config(format!("val_frac must lie in [0, 1), got {}", cfg.val_frac)));
    }
    Ok(cfg)
}

/// Fits `model` dimensions that come from the data: region feature width and
/// vocabulary size.
pub fn adapt_model_config(cfg: &mut ModelConfig, samples: &[Sample]) -> Result<()> {
    if let Some(first) = samples.first() {
        let d = first.regions.features.cols();
        if let Some(s) = samples.iter().find(|s| s.regions.features.cols() != d) {
            return Err(Error::Schema {
                sample: s.id.clone(),
                field: "regions".into(),
                msg: format!("feature width {} differs from {} in sample {}", s.regions.features.cols(), d, first.id),
            });
        }
        cfg.d_region = d;
    }
    let max_id = samples.iter().flat_map(|s| s.narration.token_ids.iter().copied()).max();
    if let Some(m) = max_id {
        cfg.vocab_size = cfg.vocab_size.max(m + 1);
    }
    let max_regions = samples.iter().map(|s| s.regions.len()).max().unwrap_or(0);
    cfg.max_regions = cfg.max_regions.max(max_regions);
    let max_tokens = samples.iter().map(|s| s.narration.token_ids.len()).max().unwrap_or(0);
    cfg.max_tokens = cfg.max_tokens.max(max_tokens);
    Ok(())
}

/// Validation, labeled and unlabeled sets drawn from a dataset. Samples that
/// arrive without labels always join the unlabeled set.
pub fn partition_dataset(samples: &[Sample], cfg: &RunConfig, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let mut annotated: Vec<Sample> = samples.iter().filter(|s| s.is_labeled()).cloned().collect();
    let mut du: Vec<Sample> = samples.iter().filter(|s| !s.is_labeled()).cloned().collect();
    let mut val = Vec::new();
    if cfg.val_frac > 0.0 {
        let k = (cfg.val_frac * annotated.len() as f64).round() as usize;
        let mut idx: Vec<usize> = (0..annotated.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5641_4C49_4441_5445));
        let mut held = vec![false; annotated.len()];
        for &i in &idx[..k] {
            held[i] = true;
        }
        let mut rest = Vec::new();
        for (i, s) in annotated.into_iter().enumerate() {
            if held[i] {
                val.push(s);
            } else {
                rest.push(s);
            }
        }
        annotated = rest;
    }
    let (ds, du_split) = split(&annotated, cfg.labeled_frac, seed)?;
    du.extend(du_split);
    Ok((ds, du, val))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_validation: usize,
    pub epochs: Vec<crate::train::EpochSummary>,
    pub best_epoch: Option<usize>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let mb = ManifestBuilder::start("train");
    let mut cfg = resolve_run_config(args)?;
    let samples = load_jsonl(&args.data)?;
    adapt_model_config(&mut cfg.model, &samples)?;
    let seed = cfg.train.seed;
    let (ds, du, val) = partition_dataset(&samples, &cfg, seed)?;
    let model = Model::new(cfg.model.clone())?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let ckpt_dir = args.out.join("checkpoints");
    let quiet = args.quiet;
    let every = args.ckpt_every.unwrap_or(0);
    let hooks = FitHooks {
        validation: (!val.is_empty()).then_some((val.as_slice(), cfg.infer)),
        on_epoch_end: Some(Box::new(|epoch: usize, m: &Model| {
            if !quiet {
                eprintln!("epoch {} done", epoch + 1);
            }
            if every > 0 && (epoch + 1).is_multiple_of(every) {
                let p = ckpt_dir.join(format!("epoch_{:03}.json", epoch + 1));
                save_checkpoint(m, &p)?;
            }
            Ok(())
        })),
    };
    let (trained, log) = fit_with(model, &ds, &du, &cfg.loss, &cfg.train, hooks)?;

    let ckpt = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&trained, &ckpt)?;
    let log_path = args.out.join(TRAIN_LOG_FILE);
    let mut w = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    for r in &log.steps {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&log_path, e))?;
    drop(w);
    let summary_path = args.out.join(SUMMARY_FILE);
    write_json(
        &summary_path,
        &TrainSummary {
            n_labeled: ds.len(),
            n_unlabeled: du.len(),
            n_validation: val.len(),
            epochs: log.epochs.clone(),
            best_epoch: log.best_epoch,
        },
    )?;
    let mut inputs: Vec<&Path> = vec![&args.data];
    if let Some(c) = &args.config {
        inputs.push(c);
    }
    let saved = ckpt_saved(&args.out, every, cfg.train.epochs);
    let mut outputs: Vec<&Path> = vec![&ckpt, &log_path, &summary_path];
    outputs.extend(saved.iter().map(PathBuf::as_path));
    mb.finish(&cfg, seed, &inputs, &outputs, &args.out.join(MANIFEST_FILE))
}

fn ckpt_saved(out: &Path, every: usize, epochs: usize) -> Vec<PathBuf> {
    if every == 0 {
        return Vec::new();
    }
    (1..=epochs)
        .filter(|e| e % every == 0)
        .map(|e| out.join("checkpoints").join(format!("epoch_{e:03}.json")))
        .collect()
}

// ---------------------------------------------------------------- eval

/// A checkpoint file, or a training output directory holding one.
fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct EvalArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labeled evaluation dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Report destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Inference config (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub chain_thresh: Option<f64>,
    /// Also write predictions to this JSONL file.
    #[arg(long)]
    pub pred: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let mb = ManifestBuilder::start("eval");
    let mut cfg: InferConfig = load_or_default(args.config.as_deref())?;
    if let Some(t) = args.chain_thresh {
        cfg.chain_thresh = t;
    }
    let ckpt = checkpoint_file(&args.ckpt);
    let model = load_checkpoint(&ckpt)?;
    let samples = load_jsonl(&args.data)?;
    let mut ev = Evaluator::new();
    let mut preds = Vec::with_capacity(samples.len());
    for s in &samples {
        let p = predict_sample(&model, s, &cfg)?;
        score_prediction(&mut ev, s, &p)?;
        preds.push(p);
    }
    let report = ev.report();
    write_json(&args.out, &report)?;
    let mut outputs: Vec<&Path> = vec![&args.out];
    if let Some(p) = &args.pred {
        ensure_parent(p)?;
        write_predictions(p, &preds)?;
        outputs.push(p);
    }
    let mut inputs: Vec<&Path> = vec![&ckpt, &args.data];
    if let Some(c) = &args.config {
        inputs.push(c);
    }
    mb.finish(&cfg, 0, &inputs, &outputs, &manifest_path_for(&args.out))?;
    Ok(report)
}

// ---------------------------------------------------------------- score

#[derive(Args, Clone, Debug, Default)]
pub struct ScoreArgs {
    /// Labeled dataset (JSONL).
    #[arg(long)]
    pub gold: PathBuf,
    /// Prediction file (JSONL).
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn score_records(gold: &[Sample], preds: &[PredictionRecord]) -> Result<EvalReport> {
    let by_id: std::collections::HashMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    if by_id.len() != preds.len() {
        return Err(Error::Eval("prediction file repeats a sample id".into()));
    }
    let mut ev = Evaluator::new();
    for s in gold {
        let p = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::Eval(format!("no prediction for sample {}", s.id)))?;
        score_prediction(&mut ev, s, p)?;
    }
    if preds.len() != gold.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} gold samples",
            preds.len(),
            gold.len()
        )));
    }
    Ok(ev.report())
}

pub fn cmd_score(args: &ScoreArgs) -> Result<EvalReport> {
    let mb = ManifestBuilder::start("score");
    let gold = load_jsonl(&args.gold)?;
    let preds = read_predictions(&args.pred)?;
    let report = score_records(&gold, &preds)?;
    write_json(&args.out, &report)?;
    mb.finish(&serde_json::Value::Null, 0, &[&args.gold, &args.pred], &[&args.out], &manifest_path_for(&args.out))?;
    Ok(report)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Args, Clone, Debug)]
pub struct GradcheckArgs {
    /// Number of random instances per mention count.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Mention counts of the checked instances.
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    pub mentions: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub d_embed: usize,
    #[arg(long, default_value_t = crate::gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Negate the analytic gradient of one loss term (self-test of the check).
    #[arg(long, hide = true)]
    pub inject_sign_flip: Option<String>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        GradcheckArgs {
            seeds: 10,
            mentions: vec![2, 3],
            d_embed: 8,
            tolerance: crate::gradcheck::DEFAULT_TOLERANCE,
            threads: 1,
            inject_sign_flip: None,
            out: None,
        }
    }
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradcheckReport> {
    let mb = ManifestBuilder::start("gradcheck");
    let fault = match &args.inject_sign_flip {
        Some(name) => Some(Fault::FlipSign(
            Term::parse(name).ok_or_else(|| Error::Config(format!("unknown loss term `{name}`")))?,
        )),
        None => None,
    };
    if args.mentions.is_empty() || args.seeds == 0 {
        return Err(Error::Config("gradcheck needs at least one seed and one mention count".into()));
    }
    let cfg = GradcheckConfig {
        seeds: (0..args.seeds).collect(),
        mention_counts: args.mentions.clone(),
        d_embed: args.d_embed,
        tolerance: args.tolerance,
        threads: args.threads.max(1),
        fault,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
        #[derive(Serialize)]
        struct Snapshot<'a> {
            seeds: u64,
            mentions: &'a [usize],
            d_embed: usize,
            tolerance: f64,
            inject_sign_flip: &'a Option<String>,
        }
        let snap = Snapshot {
            seeds: args.seeds,
            mentions: &args.mentions,
            d_embed: args.d_embed,
            tolerance: args.tolerance,
            inject_sign_flip: &args.inject_sign_flip,
        };
        mb.finish(&snap, 0, &[], &[out], &manifest_path_for(out))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- pseudo-dump

#[derive(Args, Clone, Debug, Default)]
pub struct PseudoDumpArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss config (TOML or JSON) supplying the thresholds.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ground_thresh: Option<f64>,
    #[arg(long)]
    pub coref_thresh: Option<f64>,
}

/// One line of a pseudo-label dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub sample_id: String,
    pub pseudo_positives: Vec<[usize; 2]>,
    pub pseudo_grounding: Vec<[usize; 2]>,
}

pub fn pseudo_labels(model: &Model, sample: &Sample, cfg: &LossConfig) -> Result<PseudoLabelRecord> {
    let out = model.infer(&sample.regions, &sample.narration)?;
    let sets = pseudo_coref(&out.fused, cfg.coref_pseudo_thresh);
    let h = pseudo_grounding(&out.grounding, cfg.ground_thresh);
    Ok(PseudoLabelRecord {
        sample_id: sample.id.clone(),
        pseudo_positives: sets.positive_pairs(),
        pseudo_grounding: h.active().into_iter().map(|(m, r)| [m, r]).collect(),
    })
}

pub fn cmd_pseudo_dump(args: &PseudoDumpArgs) -> Result<Vec<PseudoLabelRecord>> {
    let mb = ManifestBuilder::start("pseudo-dump");
    let mut cfg: LossConfig = load_or_default(args.config.as_deref())?;
    if let Some(t) = args.ground_thresh {
        cfg.ground_thresh = t;
    }
    if let Some(t) = args.coref_thresh {
        cfg.coref_pseudo_thresh = t;
    }
    cfg.validate()?;
    let ckpt = checkpoint_file(&args.ckpt);
    let model = load_checkpoint(&ckpt)?;
    let samples = load_jsonl(&args.data)?;
    let records = samples.iter().map(|s| pseudo_labels(&model, s, &cfg)).collect::<Result<Vec<_>>>()?;
    ensure_parent(&args.out)?;
    let mut w = std::io::BufWriter::new(fs::File::create(&args.out).map_err(|e| Error::io(&args.out, e))?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&args.out, e))?;
    }
    w.flush().map_err(|e| Error::io(&args.out, e))?;
    drop(w);
    let mut inputs: Vec<&Path> = vec![&ckpt, &args.data];
    if let Some(c) = &args.config {
        inputs.push(c);
    }
    mb.finish(&cfg, 0, &inputs, &[&args.out], &manifest_path_for(&args.out))?;
    Ok(records)
}
