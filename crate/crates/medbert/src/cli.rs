//! Command-line interface: one executable exposing the pipeline as
//! subcommands with a flat `key=value` config file, command-line
//! overrides, and a manifest JSON written per run.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::autodiff::{
    grad_check, load_checkpoint, save_checkpoint, AdamW, GradCheckOptions, ParameterStore,
    Tensor,
};
use crate::baselines::{
    add_gru_params, add_retain_params, gru_forward, retain_forward, skipgram_pair_loss,
    train_skipgram, GruDims, InputMode, SkipGramConfig, SkipGramParams,
};
use crate::ehr::{
    build_vocabulary, encode_patient, read_cohort_jsonl, write_cohort_jsonl, ModelInput,
    PatientRecord, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{
    ex1_conditions, run_ex1, run_finetune, run_size_sweep, ExperimentOptions, FinetuneArtifacts,
    FinetuneConfig, ModelFamily,
};
use crate::model::{MedBertConfig, MedBertModel};
use crate::pretrain::{run_pretraining, PretrainConfig};
use crate::synth::{generate_cohort, split_cohort, SynthConfig};
use crate::viz::{extract_attention, locality_csv, render_attention, summarize_locality, HeadSelection};

/// Scalar type used by all CLI training runs.
type S = f32;

#[derive(Parser)]
#[command(
    name = "medbert",
    version,
    about = "Pretraining and fine-tuning pipeline for EHR code sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as JSONL.
    Synth(SynthArgs),
    /// Build a vocabulary file from a cohort.
    Vocab(VocabArgs),
    /// Pretrain the encoder (masked-code + prolonged-stay tasks).
    Pretrain(PretrainArgs),
    /// Fine-tune one model for outcome prediction.
    Finetune(FinetuneArgs),
    /// Run the ten-condition comparison table.
    Ex1(Ex1Args),
    /// Run the training-size sweep.
    Sweep(SweepArgs),
    /// Extract and render attention for one patient.
    Viz(VizArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

// ---------------------------------------------------------------------------
// Flat config file
// ---------------------------------------------------------------------------

/// `key=value` lines; `#` comments and blank lines ignored. Keys must
/// belong to the active subcommand's accepted set. Command-line flags
/// override file values.
struct Resolver {
    map: HashMap<String, String>,
    resolved: std::cell::RefCell<Vec<(String, String)>>,
}

impl Resolver {
    fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    reason: "expected key=value".into(),
                })?;
                let key = key.trim().to_string();
                if !allowed.contains(&key.as_str()) {
                    return Err(Error::config(
                        "config",
                        format!("unknown key {key:?} (accepted: {})", allowed.join(", ")),
                    ));
                }
                map.insert(key, value.trim().to_string());
            }
        }
        Ok(Resolver {
            map,
            resolved: std::cell::RefCell::new(Vec::new()),
        })
    }

    fn record(&self, key: &str, value: impl std::fmt::Display) {
        self.resolved
            .borrow_mut()
            .push((key.to_string(), value.to_string()));
    }

    fn get<T: FromStr + std::fmt::Display>(
        &self,
        key: &str,
        cli: Option<T>,
        default: T,
    ) -> Result<T> {
        let value = match cli {
            Some(v) => v,
            None => match self.map.get(key) {
                Some(raw) => raw.parse().map_err(|_| {
                    Error::config("config", format!("bad value {raw:?} for key {key:?}"))
                })?,
                None => default,
            },
        };
        self.record(key, &value);
        Ok(value)
    }

    fn get_path(&self, key: &str, cli: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let value = cli.or_else(|| self.map.get(key).map(PathBuf::from));
        if let Some(v) = &value {
            self.record(key, v.display());
        }
        Ok(value)
    }

    fn require_path(&self, key: &str, cli: Option<PathBuf>) -> Result<PathBuf> {
        self.get_path(key, cli)?
            .ok_or_else(|| Error::config("config", format!("missing required key {key:?}")))
    }

    fn get_flag(&self, key: &str, cli: bool) -> Result<bool> {
        let value = if cli {
            true
        } else {
            match self.map.get(key) {
                Some(raw) => raw.parse().map_err(|_| {
                    Error::config("config", format!("bad boolean {raw:?} for key {key:?}"))
                })?,
                None => false,
            }
        };
        self.record(key, value);
        Ok(value)
    }

    fn snapshot(&self) -> Vec<(String, String)> {
        self.resolved.borrow().clone()
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Write `run_config.cfg` (the resolved flat config) and
/// `manifest.json` (config snapshot, seed, input/output checksums) into
/// the run's output directory.
fn write_run_records(
    out_dir: &Path,
    command: &str,
    config: &[(String, String)],
    seed: u64,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let cfg_text: String = config
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    let cfg_path = out_dir.join("run_config.cfg");
    std::fs::write(&cfg_path, cfg_text)
        .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;

    let checksums = |paths: &[&Path]| -> Result<serde_json::Value> {
        let mut map = serde_json::Map::new();
        for p in paths {
            if p.exists() {
                map.insert(p.display().to_string(), sha256_hex(p)?.into());
            }
        }
        Ok(serde_json::Value::Object(map))
    };
    let manifest = serde_json::json!({
        "command": command,
        "seed": seed,
        "config": config.iter().cloned().collect::<std::collections::BTreeMap<_, _>>(),
        "inputs": checksums(inputs)?,
        "outputs": checksums(outputs)?,
    });
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn save_encoder(
    dir: &Path,
    config: &MedBertConfig,
    store: &ParameterStore<S>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let cfg_path = dir.join("model_config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(config).unwrap())
        .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;
    save_checkpoint(store, serde_json::Value::Null, &dir.join("final.ckpt"))
}

/// Load an encoder directory produced by `pretrain`: `model_config.json`
/// plus `final.ckpt`.
fn load_encoder(dir: &Path) -> Result<(MedBertModel, ParameterStore<S>)> {
    let cfg_path = dir.join("model_config.json");
    let text = std::fs::read_to_string(&cfg_path)
        .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;
    let config: MedBertConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: cfg_path.display().to_string(),
        line: 0,
        reason: e.to_string(),
    })?;
    let (store, _) = load_checkpoint::<S>(&dir.join("final.ckpt"))?;
    Ok((MedBertModel::new(config)?, store))
}

fn load_cohort_and_vocab(cohort: &Path, vocab: &Path) -> Result<(Vec<PatientRecord>, Vocabulary)> {
    Ok((read_cohort_jsonl(cohort)?, Vocabulary::read_from(vocab)?))
}

fn encode_all(
    patients: &[PatientRecord],
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<Vec<ModelInput>> {
    patients
        .iter()
        .map(|p| encode_patient(p, vocab, max_seq_len))
        .collect()
}

fn parse_family(s: &str) -> Result<ModelFamily> {
    match s {
        "gru" => Ok(ModelFamily::Gru),
        "bigru" => Ok(ModelFamily::BiGru),
        "retain" => Ok(ModelFamily::Retain),
        "med_bert_only" => Ok(ModelFamily::MedBertOnly),
        other => Err(Error::config(
            "family",
            format!("unknown family {other:?} (gru|bigru|retain|med_bert_only)"),
        )),
    }
}

fn parse_mode(s: &str) -> Result<InputMode> {
    match s {
        "none" => Ok(InputMode::OneHotEmbed),
        "skipgram" => Ok(InputMode::SkipGram),
        "med_bert" => Ok(InputMode::MedBert),
        other => Err(Error::config(
            "mode",
            format!("unknown mode {other:?} (none|skipgram|med_bert)"),
        )),
    }
}

/// Skip-gram artifact: load from `path` if given, else train on the
/// provided patients deterministically and save into `out_dir`.
fn obtain_skipgram(
    path: Option<&Path>,
    train: &[PatientRecord],
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<SkipGramParams<S>> {
    match path {
        Some(p) => SkipGramParams::load(p),
        None => {
            let params = train_skipgram(
                train,
                vocab,
                &SkipGramConfig {
                    dim,
                    seed,
                    ..Default::default()
                },
            )?;
            params.save(&out_dir.join("skipgram.ckpt"))?;
            Ok(params)
        }
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of patients.
    #[arg(long)]
    n: Option<usize>,
    /// Number of distinct synthetic codes.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Mean visits per patient.
    #[arg(long)]
    mean_visits: Option<f64>,
    /// Mean codes per visit.
    #[arg(long)]
    mean_codes: Option<f64>,
    /// Target outcome prevalence in (0,1).
    #[arg(long)]
    prevalence: Option<f64>,
    /// Outcome log-odds per risk-code occurrence.
    #[arg(long)]
    signal: Option<f64>,
    /// Target prolonged-stay rate in (0,1).
    #[arg(long)]
    los_rate: Option<f64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSONL path.
    #[arg(long)]
    out: Option<PathBuf>,
}

const SYNTH_KEYS: &[&str] = &[
    "n",
    "vocab_size",
    "mean_visits",
    "mean_codes",
    "prevalence",
    "signal",
    "los_rate",
    "seed",
    "out",
];

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let r = Resolver::load(args.config.as_deref(), SYNTH_KEYS)?;
    let config = SynthConfig {
        n_patients: r.get("n", args.n, 1000)?,
        vocab_size: r.get("vocab_size", args.vocab_size, 500)?,
        mean_visits: r.get("mean_visits", args.mean_visits, 8.0)?,
        mean_codes_per_visit: r.get("mean_codes", args.mean_codes, 2.0)?,
        outcome_prevalence: r.get("prevalence", args.prevalence, 0.3)?,
        signal_strength: r.get("signal", args.signal, 2.0)?,
        prolonged_los_rate: r.get("los_rate", args.los_rate, 0.3)?,
        seed: r.get("seed", args.seed, 42)?,
    };
    let out = r.require_path("out", args.out)?;
    let cohort = generate_cohort(&config)?;
    write_cohort_jsonl(&cohort, &out)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_run_records(dir, "synth", &r.snapshot(), config.seed, &[], &[&out])?;
    }
    println!("wrote {} patients to {}", cohort.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// vocab
// ---------------------------------------------------------------------------

#[derive(Args)]
struct VocabArgs {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input cohort JSONL.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Output vocabulary file (token<TAB>id).
    #[arg(long)]
    out: Option<PathBuf>,
}

const VOCAB_KEYS: &[&str] = &["cohort", "out"];

fn cmd_vocab(args: VocabArgs) -> Result<()> {
    let r = Resolver::load(args.config.as_deref(), VOCAB_KEYS)?;
    let cohort_path = r.require_path("cohort", args.cohort)?;
    let out = r.require_path("out", args.out)?;
    let cohort = read_cohort_jsonl(&cohort_path)?;
    let vocab = build_vocabulary(&cohort)?;
    vocab.write_to(&out)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_run_records(dir, "vocab", &r.snapshot(), 0, &[&cohort_path], &[&out])?;
    }
    println!("wrote {} tokens to {}", vocab.size(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PretrainArgs {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input cohort JSONL.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Vocabulary file.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output directory (checkpoints, loss curve, manifest).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Resume from this checkpoint instead of fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Encoder hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Encoder layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Feed-forward inner width.
    #[arg(long)]
    intermediate: Option<usize>,
    /// Maximum sequence length.
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Dropout rate in [0,1).
    #[arg(long)]
    dropout: Option<f64>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Sequences per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the prolonged-stay loss.
    #[arg(long)]
    los_weight: Option<f64>,
    /// Loss-curve logging interval (steps).
    #[arg(long)]
    log_every: Option<u64>,
    /// Checkpoint interval (steps); 0 writes only the final checkpoint.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Fraction of patients held out for validation AUC logging.
    #[arg(long)]
    valid_fraction: Option<f64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

const PRETRAIN_KEYS: &[&str] = &[
    "cohort",
    "vocab",
    "out_dir",
    "resume",
    "hidden",
    "layers",
    "heads",
    "intermediate",
    "max_seq_len",
    "dropout",
    "steps",
    "batch_size",
    "lr",
    "los_weight",
    "log_every",
    "checkpoint_every",
    "valid_fraction",
    "seed",
];

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let r = Resolver::load(args.config.as_deref(), PRETRAIN_KEYS)?;
    let cohort_path = r.require_path("cohort", args.cohort)?;
    let vocab_path = r.require_path("vocab", args.vocab)?;
    let out_dir = r.require_path("out_dir", args.out_dir)?;
    let resume = r.get_path("resume", args.resume)?;
    let seed = r.get("seed", args.seed, 42)?;

    let (cohort, vocab) = load_cohort_and_vocab(&cohort_path, &vocab_path)?;
    let mut model_config = MedBertConfig::desk(vocab.size());
    model_config.hidden_size = r.get("hidden", args.hidden, model_config.hidden_size)?;
    model_config.n_layers = r.get("layers", args.layers, model_config.n_layers)?;
    model_config.n_heads = r.get("heads", args.heads, model_config.n_heads)?;
    model_config.intermediate_size =
        r.get("intermediate", args.intermediate, model_config.intermediate_size)?;
    model_config.max_seq_len = r.get("max_seq_len", args.max_seq_len, model_config.max_seq_len)?;
    model_config.dropout = r.get("dropout", args.dropout, model_config.dropout)?;
    model_config.seed = seed;
    let model = MedBertModel::new(model_config.clone())?;

    let pretrain_config = PretrainConfig {
        steps: r.get("steps", args.steps, 1000)?,
        batch_size: r.get("batch_size", args.batch_size, 32)?,
        optimizer: AdamW::with_lr(r.get("lr", args.lr, 1e-3)?),
        los_weight: r.get("los_weight", args.los_weight, 1.0)?,
        log_every: r.get("log_every", args.log_every, 50)?,
        checkpoint_every: r.get("checkpoint_every", args.checkpoint_every, 0)?,
        seed,
    };
    let valid_fraction = r.get("valid_fraction", args.valid_fraction, 0.1)?;
    if !(0.0..0.5).contains(&valid_fraction) {
        return Err(Error::config("valid_fraction", "must be in [0, 0.5)"));
    }

    let inputs = encode_all(&cohort, &vocab, model.config.max_seq_len)?;
    let n_valid = (inputs.len() as f64 * valid_fraction) as usize;
    let (valid, train) = inputs.split_at(n_valid);

    let mut store: ParameterStore<S> = match &resume {
        Some(path) => load_checkpoint::<S>(path)?.0,
        None => model.init_params(),
    };
    let curve = run_pretraining(&model, &mut store, train, valid, &pretrain_config, Some(&out_dir))?;
    save_encoder(&out_dir, &model_config, &store)?;
    write_run_records(
        &out_dir,
        "pretrain",
        &r.snapshot(),
        seed,
        &[&cohort_path, &vocab_path],
        &[
            &out_dir.join("final.ckpt"),
            &out_dir.join("model_config.json"),
            &out_dir.join("loss_curve.csv"),
        ],
    )?;
    if let Some(last) = curve.last() {
        println!(
            "pretraining done at step {}: mlm_loss {:.4} los_loss {:.4} valid_auc {:.4}",
            last.step, last.mlm_loss, last.los_loss, last.valid_auc
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune / ex1 / sweep shared flags
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TuneCommonArgs {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input cohort JSONL (with outcome labels).
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Vocabulary file.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Pretrained encoder directory (from `pretrain`).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Skip-gram checkpoint; trained on the fly when omitted.
    #[arg(long)]
    skipgram: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Fine-tuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Patients per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Early-stopping patience (validation evaluations).
    #[arg(long)]
    patience: Option<usize>,
    /// Recurrent baseline hidden width.
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Embedding width for the table-based modes.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Keep the pretrained encoder fixed during fine-tuning.
    #[arg(long)]
    freeze: bool,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread cap.
    #[arg(long)]
    jobs: Option<usize>,
}

const TUNE_KEYS: &[&str] = &[
    "cohort",
    "vocab",
    "pretrained",
    "skipgram",
    "out_dir",
    "epochs",
    "batch_size",
    "lr",
    "patience",
    "hidden_dim",
    "embed_dim",
    "freeze",
    "seed",
    "jobs",
];

struct TuneSetup {
    r: Resolver,
    cohort_path: PathBuf,
    vocab_path: PathBuf,
    out_dir: PathBuf,
    vocab: Vocabulary,
    split: crate::synth::CohortSplit,
    encoder: Option<(MedBertModel, ParameterStore<S>)>,
    skipgram: Option<SkipGramParams<S>>,
    template: FinetuneConfig,
    embed_dim: usize,
    max_seq_len: usize,
    seed: u64,
    jobs: usize,
}

fn tune_setup(args: TuneCommonArgs, extra_keys: &[&str], need_encoder: bool) -> Result<TuneSetup> {
    let allowed: Vec<&str> = TUNE_KEYS.iter().chain(extra_keys).copied().collect();
    let r = Resolver::load(args.config.as_deref(), &allowed)?;
    let cohort_path = r.require_path("cohort", args.cohort)?;
    let vocab_path = r.require_path("vocab", args.vocab)?;
    let out_dir = r.require_path("out_dir", args.out_dir)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let seed = r.get("seed", args.seed, 42)?;
    let jobs = r.get("jobs", args.jobs, 1)?;

    let (cohort, vocab) = load_cohort_and_vocab(&cohort_path, &vocab_path)?;
    let split = split_cohort(&cohort, (0.7, 0.1, 0.2), seed)?;

    let pretrained_dir = r.get_path("pretrained", args.pretrained)?;
    let encoder = match &pretrained_dir {
        Some(dir) => Some(load_encoder(dir)?),
        None if need_encoder => {
            return Err(Error::config("pretrained", "pretrained encoder directory required"))
        }
        None => None,
    };
    let embed_dim = r.get(
        "embed_dim",
        args.embed_dim,
        encoder
            .as_ref()
            .map(|(m, _)| m.config.hidden_size)
            .unwrap_or(32),
    )?;
    let max_seq_len = encoder
        .as_ref()
        .map(|(m, _)| m.config.max_seq_len)
        .unwrap_or(128);

    let skipgram_path = r.get_path("skipgram", args.skipgram)?;
    let skipgram = Some(obtain_skipgram(
        skipgram_path.as_deref(),
        &split.train,
        &vocab,
        embed_dim,
        seed,
        &out_dir,
    )?);

    let template = FinetuneConfig {
        epochs: r.get("epochs", args.epochs, 20)?,
        batch_size: r.get("batch_size", args.batch_size, 8)?,
        lr: r.get("lr", args.lr, 1e-3)?,
        early_stop_patience: r.get("patience", args.patience, 5)?,
        hidden_dim: r.get("hidden_dim", args.hidden_dim, 32)?,
        freeze_encoder: r.get_flag("freeze", args.freeze)?,
        seed,
        ..FinetuneConfig::default()
    };
    Ok(TuneSetup {
        r,
        cohort_path,
        vocab_path,
        out_dir,
        vocab,
        split,
        encoder,
        skipgram,
        template,
        embed_dim,
        max_seq_len,
        seed,
        jobs,
    })
}

impl TuneSetup {
    fn artifacts(&self) -> FinetuneArtifacts<'_, S> {
        FinetuneArtifacts {
            model: self.encoder.as_ref().map(|(m, _)| m),
            pretrained: self.encoder.as_ref().map(|(_, s)| s),
            skipgram: self.skipgram.as_ref(),
            vocab_size: self.vocab.size(),
            embed_dim: self.embed_dim,
        }
    }

    fn encoded_splits(&self) -> Result<(Vec<ModelInput>, Vec<ModelInput>, Vec<ModelInput>)> {
        Ok((
            encode_all(&self.split.train, &self.vocab, self.max_seq_len)?,
            encode_all(&self.split.valid, &self.vocab, self.max_seq_len)?,
            encode_all(&self.split.test, &self.vocab, self.max_seq_len)?,
        ))
    }
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: TuneCommonArgs,
    /// Model family: gru | bigru | retain | med_bert_only.
    #[arg(long)]
    family: Option<String>,
    /// Input mode: none | skipgram | med_bert.
    #[arg(long)]
    mode: Option<String>,
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let family_raw = args.family.clone();
    let mode_raw = args.mode.clone();
    let setup = tune_setup(args.common, &["family", "mode"], false)?;
    let family = parse_family(&setup.r.get("family", family_raw, "gru".to_string())?)?;
    let mode = parse_mode(&setup.r.get("mode", mode_raw, "none".to_string())?)?;
    if mode == InputMode::MedBert && setup.encoder.is_none() {
        return Err(Error::config("pretrained", "med_bert mode requires --pretrained"));
    }
    let config = FinetuneConfig {
        family,
        mode,
        ..setup.template.clone()
    };
    let (train, valid, test) = setup.encoded_splits()?;
    let result = run_finetune(&train, &valid, &test, &config, &setup.artifacts())?;
    let ckpt = setup.out_dir.join("finetuned.ckpt");
    save_checkpoint(
        &result.store,
        serde_json::json!({"type": "finetuned", "test_auc": result.test_auc}),
        &ckpt,
    )?;
    write_run_records(
        &setup.out_dir,
        "finetune",
        &setup.r.snapshot(),
        setup.seed,
        &[&setup.cohort_path, &setup.vocab_path],
        &[&ckpt],
    )?;
    println!(
        "test_auc {:.4} (best valid {:.4}, {} epochs)",
        result.test_auc, result.best_valid_auc, result.epochs_ran
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ex1
// ---------------------------------------------------------------------------

#[derive(Args)]
struct Ex1Args {
    #[command(flatten)]
    common: TuneCommonArgs,
    /// Bootstrap replicates per condition.
    #[arg(long)]
    replicates: Option<usize>,
}

fn cmd_ex1(args: Ex1Args) -> Result<()> {
    let replicates_raw = args.replicates;
    let setup = tune_setup(args.common, &["replicates"], true)?;
    let opts = ExperimentOptions {
        replicates: setup.r.get("replicates", replicates_raw, 10)?,
        template: setup.template.clone(),
        seed: setup.seed,
        jobs: setup.jobs,
    };
    let (train, valid, test) = setup.encoded_splits()?;
    let report = run_ex1(&train, &valid, &test, &setup.artifacts(), &opts)?;
    report.write(&setup.out_dir, "ex1")?;
    write_run_records(
        &setup.out_dir,
        "ex1",
        &setup.r.snapshot(),
        setup.seed,
        &[&setup.cohort_path, &setup.vocab_path],
        &[
            &setup.out_dir.join("ex1.csv"),
            &setup.out_dir.join("ex1.json"),
        ],
    )?;
    for row in &report.rows {
        println!(
            "{:24} mean {:.4} std {:.4} (n={})",
            row.condition,
            row.mean,
            row.std,
            row.replicates.len()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: TuneCommonArgs,
    /// Comma-separated training sizes, e.g. 100,300,500.
    #[arg(long)]
    sizes: Option<String>,
    /// Comma-separated condition labels (defaults to all ten).
    #[arg(long)]
    conditions: Option<String>,
    /// Bootstrap replicates per size and condition.
    #[arg(long)]
    replicates: Option<usize>,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let sizes_raw = args.sizes.clone();
    let conditions_raw = args.conditions.clone();
    let replicates_raw = args.replicates;
    let setup = tune_setup(args.common, &["sizes", "conditions", "replicates"], true)?;
    let sizes_text = setup.r.get("sizes", sizes_raw, "100,300,500".to_string())?;
    let sizes: Vec<usize> = sizes_text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config("sizes", format!("bad size {s:?}")))
        })
        .collect::<Result<_>>()?;
    let all = ex1_conditions();
    let conditions: Vec<(String, ModelFamily, InputMode)> = match setup
        .r
        .get("conditions", conditions_raw, String::new())?
        .as_str()
    {
        "" => all,
        list => list
            .split(',')
            .map(|label| {
                let label = label.trim();
                all.iter()
                    .find(|(l, _, _)| l == label)
                    .cloned()
                    .ok_or_else(|| Error::config("conditions", format!("unknown condition {label:?}")))
            })
            .collect::<Result<_>>()?,
    };
    let opts = ExperimentOptions {
        replicates: setup.r.get("replicates", replicates_raw, 10)?,
        template: setup.template.clone(),
        seed: setup.seed,
        jobs: setup.jobs,
    };
    let test = encode_all(&setup.split.test, &setup.vocab, setup.max_seq_len)?;
    let vocab = &setup.vocab;
    let max_seq_len = setup.max_seq_len;
    let report = run_size_sweep(
        &setup.split.train,
        |p| encode_patient(p, vocab, max_seq_len),
        &test,
        &sizes,
        &conditions,
        &setup.artifacts(),
        &opts,
    )?;
    report.write(&setup.out_dir, "sweep")?;
    write_run_records(
        &setup.out_dir,
        "sweep",
        &setup.r.snapshot(),
        setup.seed,
        &[&setup.cohort_path, &setup.vocab_path],
        &[
            &setup.out_dir.join("sweep.csv"),
            &setup.out_dir.join("sweep.json"),
        ],
    )?;
    for row in &report.rows {
        println!(
            "size {:5} {:24} mean {:.4} std {:.4}",
            row.train_size, row.condition, row.mean, row.std
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// viz
// ---------------------------------------------------------------------------

#[derive(Args)]
struct VizArgs {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input cohort JSONL.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Vocabulary file.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Pretrained encoder directory (from `pretrain`).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Patient to visualize (defaults to the first in the cohort).
    #[arg(long)]
    patient_id: Option<String>,
    /// Encoder layer to render.
    #[arg(long)]
    layer: Option<usize>,
    /// Head index, or `all`.
    #[arg(long)]
    head: Option<String>,
    /// Minimum attention weight for a drawn edge, in [0,1).
    #[arg(long)]
    threshold: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

const VIZ_KEYS: &[&str] = &[
    "cohort",
    "vocab",
    "pretrained",
    "patient_id",
    "layer",
    "head",
    "threshold",
    "out_dir",
];

fn cmd_viz(args: VizArgs) -> Result<()> {
    let r = Resolver::load(args.config.as_deref(), VIZ_KEYS)?;
    let cohort_path = r.require_path("cohort", args.cohort)?;
    let vocab_path = r.require_path("vocab", args.vocab)?;
    let pretrained = r.require_path("pretrained", args.pretrained)?;
    let out_dir = r.require_path("out_dir", args.out_dir)?;
    let layer = r.get("layer", args.layer, 0)?;
    let head_text = r.get("head", args.head, "all".to_string())?;
    let head = match head_text.as_str() {
        "all" => HeadSelection::All,
        n => HeadSelection::One(n.parse().map_err(|_| {
            Error::config("head", format!("expected an index or `all`, got {n:?}"))
        })?),
    };
    let threshold = r.get("threshold", args.threshold, 0.05)?;

    let (cohort, vocab) = load_cohort_and_vocab(&cohort_path, &vocab_path)?;
    let (model, store) = load_encoder(&pretrained)?;
    let patient = match r.get("patient_id", args.patient_id, String::new())?.as_str() {
        "" => cohort.first().ok_or(Error::EmptyCohort)?,
        id => cohort
            .iter()
            .find(|p| p.patient_id == id)
            .ok_or_else(|| Error::config("patient_id", format!("no patient {id:?}")))?,
    };

    let record = extract_attention(&model, &store, patient, &vocab)?;
    let html = render_attention(&record, layer, head, threshold)?;
    let stats = summarize_locality(&record)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let html_path = out_dir.join("attention.html");
    let json_path = out_dir.join("attention_record.json");
    let csv_path = out_dir.join("locality.csv");
    std::fs::write(&html_path, html).map_err(|e| Error::io(html_path.display().to_string(), e))?;
    std::fs::write(&json_path, record.to_json())
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    std::fs::write(&csv_path, locality_csv(&stats))
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    write_run_records(
        &out_dir,
        "viz",
        &r.snapshot(),
        0,
        &[&cohort_path, &vocab_path],
        &[&html_path, &json_path, &csv_path],
    )?;
    println!(
        "rendered layer {layer} ({} positions) to {}",
        record.len(),
        html_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Relative-error tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Check at most this many elements per parameter (0 = all).
    #[arg(long)]
    sample_cap: Option<usize>,
}

const GRADCHECK_KEYS: &[&str] = &["seed", "tolerance", "sample_cap"];

/// Micro-config gradient checks for every model family, at f64.
fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    use rand::SeedableRng;
    let r = Resolver::load(args.config.as_deref(), GRADCHECK_KEYS)?;
    let seed = r.get("seed", args.seed, 0)?;
    let tolerance = r.get("tolerance", args.tolerance, 1e-4)?;
    let sample_cap = r.get("sample_cap", args.sample_cap, 8)?;
    let opts = GradCheckOptions {
        tolerance,
        sample_cap: if sample_cap == 0 { None } else { Some(sample_cap) },
        ..Default::default()
    };
    let input = ModelInput {
        code_ids: vec![5, 1, 7, 3, 8],
        serialization_ids: vec![0, 1, 0, 1, 2],
        visit_ids: vec![1, 1, 2, 2, 2],
        length: 5,
        prolonged_los_label: true,
        outcome_label: Some(true),
    };
    let seq = Tensor::from_f64_slice(
        vec![4, 3],
        &[0.5, -1.0, 0.3, 0.2, 0.8, -0.4, -0.9, 0.1, 0.6, 0.4, 0.4, -0.2],
    );
    let dims = GruDims {
        input_dim: 3,
        hidden_dim: 2,
    };
    let mut all_pass = true;
    let mut worst: f64 = 0.0;

    // encoder with both heads
    {
        let mut config = MedBertConfig::desk(12);
        config.dropout = 0.0;
        config.seed = seed;
        let model = MedBertModel::new(config)?;
        let mut store: ParameterStore<f64> = model.init_params();
        let input = input.clone();
        let report = grad_check(
            move |g, binding| {
                let out = model.forward(g, binding, &input)?;
                let logits = model.masked_lm_logits(g, binding, out.hidden)?;
                let row = g.gather(logits, &[2])?;
                let mlm = g.cross_entropy_rows(row, &[7])?;
                let logit = model.pooled_logit(g, binding, &out, "los")?;
                let los = g.bce_logit(logit, true)?;
                g.add(mlm, los)
            },
            &mut store,
            &opts,
        )?;
        println!("med_bert   max rel err {:.3e}", report.max_rel_err);
        all_pass &= report.pass;
        worst = worst.max(report.max_rel_err);
    }
    // GRU and Bi-GRU
    for bidirectional in [false, true] {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 1);
        if bidirectional {
            add_gru_params(&mut store, "g.fwd", dims, 0.5, &mut rng);
            add_gru_params(&mut store, "g.bwd", dims, 0.5, &mut rng);
        } else {
            add_gru_params(&mut store, "g", dims, 0.5, &mut rng);
        }
        let seq = seq.clone();
        let report = grad_check(
            move |g, binding| {
                let x = g.constant(seq.clone());
                let h = gru_forward(g, binding, "g", x, bidirectional)?;
                let sq = g.mul(h, h)?;
                g.sum_all(sq)
            },
            &mut store,
            &opts,
        )?;
        println!(
            "{:10} max rel err {:.3e}",
            if bidirectional { "bigru" } else { "gru" },
            report.max_rel_err
        );
        all_pass &= report.pass;
        worst = worst.max(report.max_rel_err);
    }
    // RETAIN
    {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 2);
        add_retain_params(&mut store, "r", 3, 2, 0.5, &mut rng);
        let seq = seq.clone();
        let report = grad_check(
            move |g, binding| {
                let x = g.constant(seq.clone());
                let (logit, _, _) = retain_forward(g, binding, "r", x)?;
                g.bce_logit(logit, true)
            },
            &mut store,
            &opts,
        )?;
        println!("retain     max rel err {:.3e}", report.max_rel_err);
        all_pass &= report.pass;
        worst = worst.max(report.max_rel_err);
    }
    // skip-gram
    {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 3);
        store.add_trunc_normal("sg.in", vec![5, 3], 0.3, &mut rng);
        store.add_trunc_normal("sg.out", vec![5, 3], 0.3, &mut rng);
        let triples = vec![(0, 1, true), (0, 3, false), (2, 4, true), (2, 1, false)];
        let report = grad_check(
            move |g, binding| skipgram_pair_loss(g, binding, &triples),
            &mut store,
            &opts,
        )?;
        println!("skipgram   max rel err {:.3e}", report.max_rel_err);
        all_pass &= report.pass;
        worst = worst.max(report.max_rel_err);
    }
    println!(
        "gradcheck: max rel err {worst:.3e} vs tolerance {tolerance:.1e} -> {}",
        if all_pass { "PASS" } else { "FAIL" }
    );
    if all_pass {
        Ok(())
    } else {
        Err(Error::Numerics(format!(
            "gradient check failed: max rel err {worst:.3e}"
        )))
    }
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

/// Parse and run; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version as "errors" with exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Vocab(args) => cmd_vocab(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Ex1(args) => cmd_ex1(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Viz(args) => cmd_viz(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
