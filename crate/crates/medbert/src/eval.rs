//! Evaluation: AUC metric, fine-tuning driver with early stopping, and
//! the comparison-table / size-sweep experiment runners with bootstrap
//! means and standard deviations.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Binding, Graph, NodeId, ParameterStore};
use crate::baselines::{
    add_gru_params, add_retain_params, gru_forward, retain_forward, Composer, GruDims,
    InputMode, SkipGramParams,
};
use crate::ehr::ModelInput;
use crate::error::{Error, Result};
use crate::model::MedBertModel;
use crate::scalar::Scalar;
use crate::synth::subsample_training;

/// Area under the ROC curve by exact pair counting (Mann–Whitney):
/// over all (positive, negative) pairs, count wins as 1, ties as 0.5.
///
/// Fails with `DegenerateLabels` unless both classes are present.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "scores ({}) and labels ({}) must have equal length",
            scores.len(),
            labels.len()
        )));
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(Error::Numerics("non-finite score in AUC input".into()));
        }
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    let mut wins = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    /// Pooling head on the encoder output directly.
    MedBertOnly,
    Gru,
    BiGru,
    Retain,
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub family: ModelFamily,
    pub mode: InputMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop after this many validation evaluations without improvement.
    pub early_stop_patience: usize,
    /// Keep the pretrained encoder fixed during fine-tuning.
    pub freeze_encoder: bool,
    /// Hidden width of the recurrent baselines.
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            family: ModelFamily::Gru,
            mode: InputMode::OneHotEmbed,
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            early_stop_patience: 5,
            freeze_encoder: false,
            hidden_dim: 32,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.family == ModelFamily::MedBertOnly && self.mode != InputMode::MedBert {
            return Err(Error::config(
                "mode",
                "the pooling-head family requires pretrained encoder artifacts",
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(Error::config("epochs", "epochs/batch_size/hidden_dim must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        Ok(())
    }
}

/// External inputs to fine-tuning: the encoder (with its pretrained
/// parameters) and/or skip-gram table, depending on the input mode.
pub struct FinetuneArtifacts<'a, S: Scalar> {
    pub model: Option<&'a MedBertModel>,
    pub pretrained: Option<&'a ParameterStore<S>>,
    pub skipgram: Option<&'a SkipGramParams<S>>,
    pub vocab_size: usize,
    /// Embedding width used by the table-based modes.
    pub embed_dim: usize,
}

pub struct FinetuneResult<S: Scalar> {
    pub test_auc: f64,
    pub best_valid_auc: f64,
    pub epochs_ran: usize,
    /// Parameters restored to the best-validation snapshot.
    pub store: ParameterStore<S>,
}

fn labeled(inputs: &[ModelInput]) -> Vec<(usize, bool)> {
    inputs
        .iter()
        .enumerate()
        .filter_map(|(i, x)| x.outcome_label.map(|l| (i, l)))
        .collect()
}

fn require_both_classes(pairs: &[(usize, bool)]) -> Result<()> {
    let pos = pairs.iter().any(|&(_, l)| l);
    let neg = pairs.iter().any(|&(_, l)| !l);
    if pos && neg {
        Ok(())
    } else {
        Err(Error::DegenerateLabels)
    }
}

struct FinetuneModel<'a, S: Scalar> {
    composer: Composer,
    config: &'a FinetuneConfig,
    _marker: std::marker::PhantomData<S>,
}

impl<'a, S: Scalar> FinetuneModel<'a, S> {
    fn build(
        config: &'a FinetuneConfig,
        artifacts: &FinetuneArtifacts<'a, S>,
    ) -> Result<(Self, ParameterStore<S>)> {
        config.validate()?;
        let composer = match config.mode {
            InputMode::OneHotEmbed => Composer::scratch(artifacts.embed_dim),
            InputMode::SkipGram => Composer::skipgram(artifacts.embed_dim),
            InputMode::MedBert => {
                let model = artifacts.model.ok_or_else(|| {
                    Error::config("model", "encoder required for the med_bert mode")
                })?;
                Composer::med_bert(model.clone(), config.freeze_encoder)
            }
        };

        let mut store = ParameterStore::new();
        if config.mode == InputMode::MedBert {
            let pretrained = artifacts.pretrained.ok_or_else(|| {
                Error::config("pretrained", "encoder checkpoint required for the med_bert mode")
            })?;
            for name in pretrained.names() {
                store.add(name.clone(), pretrained.get(name).clone());
            }
        }
        composer.init_params(&mut store, artifacts.vocab_size, config.seed, artifacts.skipgram)?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC1A5);
        match config.family {
            ModelFamily::MedBertOnly => {
                let model = composer.model.as_ref().unwrap();
                model.add_head_params(&mut store, "cls", config.seed ^ 0xC1A5);
            }
            ModelFamily::Gru => {
                let dims = GruDims {
                    input_dim: composer.dim,
                    hidden_dim: config.hidden_dim,
                };
                add_gru_params(&mut store, "rnn", dims, 0.2, &mut rng);
                store.add_trunc_normal("clf.w", vec![config.hidden_dim, 1], 0.2, &mut rng);
                store.add_zeros("clf.b", vec![1]);
            }
            ModelFamily::BiGru => {
                let dims = GruDims {
                    input_dim: composer.dim,
                    hidden_dim: config.hidden_dim,
                };
                add_gru_params(&mut store, "rnn.fwd", dims, 0.2, &mut rng);
                add_gru_params(&mut store, "rnn.bwd", dims, 0.2, &mut rng);
                store.add_trunc_normal("clf.w", vec![2 * config.hidden_dim, 1], 0.2, &mut rng);
                store.add_zeros("clf.b", vec![1]);
            }
            ModelFamily::Retain => {
                add_retain_params(
                    &mut store,
                    "retain",
                    composer.dim,
                    config.hidden_dim,
                    0.2,
                    &mut rng,
                );
            }
        }
        Ok((
            FinetuneModel {
                composer,
                config,
                _marker: std::marker::PhantomData,
            },
            store,
        ))
    }

    fn logit(&self, g: &mut Graph<S>, binding: &Binding, input: &ModelInput) -> Result<NodeId> {
        match self.config.family {
            ModelFamily::MedBertOnly => {
                let model = self.composer.model.as_ref().unwrap();
                let out = model.forward(g, binding, input)?;
                model.pooled_logit(g, binding, &out, "cls")
            }
            ModelFamily::Gru | ModelFamily::BiGru => {
                let seq = self.composer.code_sequence(g, binding, input)?;
                let h = gru_forward(
                    g,
                    binding,
                    "rnn",
                    seq,
                    self.config.family == ModelFamily::BiGru,
                )?;
                let out = g.matmul(h, binding.get("clf.w"))?;
                let out = g.add_bias(out, binding.get("clf.b"))?;
                g.sum_all(out)
            }
            ModelFamily::Retain => {
                let seq = self.composer.code_sequence(g, binding, input)?;
                let visits = self.composer.visit_sums(g, seq, input)?;
                let (logit, _, _) = retain_forward(g, binding, "retain", visits)?;
                Ok(logit)
            }
        }
    }

    fn scores(&self, store: &ParameterStore<S>, inputs: &[ModelInput], which: &[(usize, bool)]) -> Result<(Vec<f64>, Vec<bool>)> {
        let mut scores = Vec::with_capacity(which.len());
        let mut labels = Vec::with_capacity(which.len());
        for &(i, label) in which {
            let mut g = Graph::new(false, 0);
            let binding = store.bind_all(&mut g);
            let logit = self.logit(&mut g, &binding, &inputs[i])?;
            scores.push(g.value(logit).scalar_value().as_f64());
            labels.push(label);
        }
        Ok((scores, labels))
    }
}

fn snapshot<S: Scalar>(store: &ParameterStore<S>) -> Vec<(String, Vec<S>)> {
    store
        .names()
        .iter()
        .map(|n| (n.clone(), store.get(n).data.clone()))
        .collect()
}

fn restore<S: Scalar>(store: &mut ParameterStore<S>, snap: &[(String, Vec<S>)]) {
    for (name, data) in snap {
        store.get_mut(name).data.clone_from(data);
    }
}

/// Train with binary cross-entropy on the outcome labels, early-stop on
/// validation AUC, and report test AUC from the best-validation state.
pub fn run_finetune<S: Scalar>(
    train: &[ModelInput],
    valid: &[ModelInput],
    test: &[ModelInput],
    config: &FinetuneConfig,
    artifacts: &FinetuneArtifacts<S>,
) -> Result<FinetuneResult<S>> {
    let train_pairs = labeled(train);
    let valid_pairs = labeled(valid);
    let test_pairs = labeled(test);
    require_both_classes(&train_pairs)?;
    require_both_classes(&valid_pairs)?;
    require_both_classes(&test_pairs)?;

    let (model, mut store) = FinetuneModel::build(config, artifacts)?;
    let opt = AdamW::with_lr(config.lr);

    let mut best_valid = f64::NEG_INFINITY;
    let mut best_snap = snapshot(&store);
    let mut stale = 0usize;
    let mut epochs_ran = 0usize;
    for epoch in 0..config.epochs {
        let mut order = train_pairs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let graph_seed = config.seed
                ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                ^ (batch_no as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            let mut g = Graph::new(true, graph_seed);
            let binding = store.bind_all(&mut g);
            let mut terms = Vec::with_capacity(batch.len());
            for &(i, label) in batch {
                let logit = model.logit(&mut g, &binding, &train[i])?;
                terms.push(g.bce_logit(logit, label)?);
            }
            let sum = g.add_n(&terms)?;
            let loss = g.scale(sum, S::of_f64(1.0 / batch.len() as f64))?;
            g.backward(loss)?;
            store.clear_grads();
            store.collect_grads(&g, &binding);
            store.adamw_step(&opt)?;
        }
        epochs_ran = epoch + 1;

        let (scores, lbls) = model.scores(&store, valid, &valid_pairs)?;
        let auc = compute_auc(&scores, &lbls)?;
        if auc > best_valid {
            best_valid = auc;
            best_snap = snapshot(&store);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }

    restore(&mut store, &best_snap);
    let (scores, lbls) = model.scores(&store, test, &test_pairs)?;
    let test_auc = compute_auc(&scores, &lbls)?;
    Ok(FinetuneResult {
        test_auc,
        best_valid_auc: best_valid,
        epochs_ran,
        store,
    })
}

// ---------------------------------------------------------------------------
// Experiment reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub train_size: usize,
    pub replicates: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub wall_clock_secs: f64,
}

impl ConditionResult {
    pub fn from_replicates(
        condition: impl Into<String>,
        train_size: usize,
        replicates: Vec<f64>,
        wall_clock_secs: f64,
    ) -> Self {
        let n = replicates.len().max(1) as f64;
        let mean = replicates.iter().sum::<f64>() / n;
        let var = replicates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        ConditionResult {
            condition: condition.into(),
            train_size,
            replicates,
            mean,
            std: var.sqrt(),
            wall_clock_secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ConditionResult>,
}

impl ExperimentReport {
    /// Aggregate CSV: one row per condition × size, replicates joined
    /// with `;`. Floats use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,train_size,mean,std,wall_clock_secs,replicates\n");
        for r in &self.rows {
            let reps: Vec<String> = r.replicates.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.condition,
                r.train_size,
                r.mean,
                r.std,
                r.wall_clock_secs,
                reps.join(";")
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 6 {
                return Err(Error::Parse {
                    path: "<csv>".into(),
                    line: i + 1,
                    reason: format!("expected 6 fields, got {}", parts.len()),
                });
            }
            let field = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    path: "<csv>".into(),
                    line: i + 1,
                    reason: format!("bad number {s:?}"),
                })
            };
            let replicates = if parts[5].is_empty() {
                Vec::new()
            } else {
                parts[5]
                    .split(';')
                    .map(field)
                    .collect::<Result<Vec<f64>>>()?
            };
            rows.push(ConditionResult {
                condition: parts[0].to_string(),
                train_size: parts[1].parse().map_err(|_| Error::Parse {
                    path: "<csv>".into(),
                    line: i + 1,
                    reason: format!("bad size {:?}", parts[1]),
                })?,
                mean: field(parts[2])?,
                std: field(parts[3])?,
                wall_clock_secs: field(parts[4])?,
                replicates,
            });
        }
        Ok(ExperimentReport { rows })
    }

    /// Long-format CSV for plotting: one row per replicate.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("condition,train_size,replicate,auc\n");
        for r in &self.rows {
            for (k, auc) in r.replicates.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", r.condition, r.train_size, k, auc));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<json>".into(),
            line: 0,
            reason: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for (name, content) in [
            (format!("{stem}.csv"), self.to_csv()),
            (format!("{stem}_long.csv"), self.to_long_csv()),
            (format!("{stem}.json"), self.to_json()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Experiment runners
// ---------------------------------------------------------------------------

/// The ten comparison-table conditions: three recurrent baselines, each
/// alone / with skip-gram embeddings / with the pretrained encoder,
/// plus the encoder's own pooling head.
pub fn ex1_conditions() -> Vec<(String, ModelFamily, InputMode)> {
    let mut out = Vec::new();
    for (family, base) in [
        (ModelFamily::Gru, "GRU"),
        (ModelFamily::BiGru, "Bi-GRU"),
        (ModelFamily::Retain, "RETAIN"),
    ] {
        out.push((base.to_string(), family, InputMode::OneHotEmbed));
        out.push((format!("{base}+t-W2V"), family, InputMode::SkipGram));
        out.push((format!("{base}+Med-BERT"), family, InputMode::MedBert));
    }
    out.push((
        "Med-BERT_only (FFL)".to_string(),
        ModelFamily::MedBertOnly,
        InputMode::MedBert,
    ));
    out
}

/// Shared settings for the experiment runners.
#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub replicates: usize,
    pub template: FinetuneConfig,
    pub seed: u64,
    /// Worker-thread cap for replicate-level parallelism.
    pub jobs: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            replicates: 10,
            template: FinetuneConfig::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

/// Run `n` independent replicates, at most `jobs` at a time, preserving
/// the result order (each replicate has its own seed, so the schedule
/// does not affect the numbers).
fn run_replicates<F>(n: usize, jobs: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let mut out: Vec<Result<f64>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in (0..n).collect::<Vec<_>>().chunks(n.div_ceil(jobs)) {
            let chunk = chunk.to_vec();
            let f = &f;
            handles.push(scope.spawn(move || chunk.into_iter().map(f).collect::<Vec<_>>()));
        }
        for handle in handles {
            out.extend(handle.join().expect("replicate worker panicked"));
        }
    });
    out.into_iter().collect()
}

fn check_ex_artifacts<S: Scalar>(artifacts: &FinetuneArtifacts<S>) -> Result<()> {
    if artifacts.model.is_none() || artifacts.pretrained.is_none() {
        return Err(Error::config(
            "pretrained",
            "pretrained encoder checkpoint required",
        ));
    }
    if artifacts.skipgram.is_none() {
        return Err(Error::config("skipgram", "skip-gram embeddings required"));
    }
    Ok(())
}

/// Full-size comparison: each condition fine-tuned `replicates` times
/// with fresh initialization seeds on the same splits.
pub fn run_ex1<S: Scalar>(
    train: &[ModelInput],
    valid: &[ModelInput],
    test: &[ModelInput],
    artifacts: &FinetuneArtifacts<S>,
    opts: &ExperimentOptions,
) -> Result<ExperimentReport> {
    check_ex_artifacts(artifacts)?;
    let mut rows = Vec::new();
    for (label, family, mode) in ex1_conditions() {
        let start = Instant::now();
        let replicates = run_replicates(opts.replicates, opts.jobs, |rep| {
            let config = FinetuneConfig {
                family,
                mode,
                seed: opts
                    .seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add(rep as u64 + 1),
                ..opts.template.clone()
            };
            Ok(run_finetune(train, valid, test, &config, artifacts)?.test_auc)
        })?;
        rows.push(ConditionResult::from_replicates(
            label,
            train.len(),
            replicates,
            start.elapsed().as_secs_f64(),
        ));
    }
    Ok(ExperimentReport { rows })
}

/// Sample-efficiency sweep: for each size and condition, `replicates`
/// bootstrap subsamples of the training patients; 25% of each subsample
/// is held out for validation; test AUC is measured on the fixed test
/// split.
pub fn run_size_sweep<S: Scalar>(
    train_cohort: &[crate::ehr::PatientRecord],
    encode: impl Fn(&crate::ehr::PatientRecord) -> Result<ModelInput> + Sync,
    test: &[ModelInput],
    sizes: &[usize],
    conditions: &[(String, ModelFamily, InputMode)],
    artifacts: &FinetuneArtifacts<S>,
    opts: &ExperimentOptions,
) -> Result<ExperimentReport> {
    for &size in sizes {
        if size < 4 || size > train_cohort.len() {
            return Err(Error::Range {
                index: size,
                limit: train_cohort.len(),
            });
        }
    }
    let mut rows = Vec::new();
    for &size in sizes {
        for (label, family, mode) in conditions {
            let start = Instant::now();
            let replicates = run_replicates(opts.replicates, opts.jobs, |rep| {
                let rep_seed = opts
                    .seed
                    .wrapping_mul(7_368_787)
                    .wrapping_add((size as u64) << 16)
                    .wrapping_add(rep as u64);
                let mut sample = subsample_training(train_cohort, size, rep_seed)?;
                let n_valid = (sample.len() / 4).max(1);
                // The subsample holds both outcome classes, but the
                // leading validation quarter may not; swap in the first
                // missing-class patient from the remainder so early
                // stopping stays well-defined at small sizes.
                for class in [true, false] {
                    let has = |p: &crate::ehr::PatientRecord| p.outcome_label == Some(class);
                    if !sample[..n_valid].iter().any(|p| has(p)) {
                        if let Some(j) = sample[n_valid..].iter().position(|p| has(p)) {
                            sample.swap(0, n_valid + j);
                        }
                    }
                }
                let (valid_part, train_part) = sample.split_at(n_valid);
                let train_inputs: Vec<ModelInput> =
                    train_part.iter().map(&encode).collect::<Result<_>>()?;
                let valid_inputs: Vec<ModelInput> =
                    valid_part.iter().map(&encode).collect::<Result<_>>()?;
                let config = FinetuneConfig {
                    family: *family,
                    mode: *mode,
                    seed: rep_seed ^ 0xFACE,
                    ..opts.template.clone()
                };
                Ok(run_finetune(&train_inputs, &valid_inputs, test, &config, artifacts)?.test_auc)
            })?;
            rows.push(ConditionResult::from_replicates(
                label.clone(),
                size,
                replicates,
                start.elapsed().as_secs_f64(),
            ));
        }
    }
    Ok(ExperimentReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{train_skipgram, SkipGramConfig};
    use crate::ehr::{build_vocabulary, encode_patient};
    use crate::model::MedBertConfig;
    use crate::synth::{generate_cohort, split_cohort, SynthConfig};
    use rand::{Rng, SeedableRng};

    #[test]
    fn known_values() {
        // [TRIVIAL] perfect separation and perfect inversion
        assert_eq!(
            compute_auc(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(compute_auc(&[0.2, 0.8], &[true, false]).unwrap(), 0.0);
        // pairs: 0.8>0.3, 0.8>0.6, 0.4>0.3 win; 0.4<0.6 loses -> 3/4
        assert_eq!(
            compute_auc(&[0.8, 0.4, 0.3, 0.6], &[true, true, false, false]).unwrap(),
            0.75
        );
    }

    #[test]
    fn worked_tie_example() {
        // [DERIVED] pairs: (0.7 vs 0.5) wins, (0.7 vs 0.7) ties -> 1.5/2
        assert_eq!(
            compute_auc(&[0.7, 0.5, 0.7], &[true, false, false]).unwrap(),
            0.75
        );
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(compute_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_and_mismatch_rejected() {
        assert!(matches!(
            compute_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::DegenerateLabels)
        ));
        assert!(compute_auc(&[0.1], &[true, false]).is_err());
        assert!(compute_auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn complement_identity_and_monotone_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(4..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let auc = compute_auc(&scores, &labels).unwrap();
            let flipped: Vec<bool> = labels.iter().map(|&l| !l).collect();
            let auc_flip = compute_auc(&scores, &flipped).unwrap();
            assert!((auc + auc_flip - 1.0).abs() < 1e-12);
            // strictly increasing transform leaves AUC unchanged
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
            let auc_warp = compute_auc(&warped, &labels).unwrap();
            assert!((auc - auc_warp).abs() < 1e-12);
        }
    }

    #[test]
    fn report_roundtrips_csv_and_json() {
        let report = ExperimentReport {
            rows: vec![
                ConditionResult::from_replicates("GRU", 500, vec![0.71, 0.734, 0.69], 12.5),
                ConditionResult::from_replicates("RETAIN+Med-BERT", 300, vec![0.8125, 0.7991], 3.25),
            ],
        };
        assert_eq!(ExperimentReport::from_csv(&report.to_csv()).unwrap(), report);
        assert_eq!(ExperimentReport::from_json(&report.to_json()).unwrap(), report);
        assert!(report.rows.iter().all(|r| r.std >= 0.0));
    }

    #[test]
    fn condition_set_is_the_expected_ten() {
        let labels: Vec<String> = ex1_conditions().into_iter().map(|(l, _, _)| l).collect();
        assert_eq!(
            labels,
            vec![
                "GRU",
                "GRU+t-W2V",
                "GRU+Med-BERT",
                "Bi-GRU",
                "Bi-GRU+t-W2V",
                "Bi-GRU+Med-BERT",
                "RETAIN",
                "RETAIN+t-W2V",
                "RETAIN+Med-BERT",
                "Med-BERT_only (FFL)"
            ]
        );
    }

    fn tiny_setup() -> (
        Vec<ModelInput>,
        Vec<ModelInput>,
        Vec<ModelInput>,
        MedBertModel,
        ParameterStore<f32>,
        SkipGramParams<f32>,
        usize,
    ) {
        let cohort = generate_cohort(&SynthConfig {
            n_patients: 120,
            vocab_size: 40,
            signal_strength: 3.0,
            ..Default::default()
        })
        .unwrap();
        let vocab = build_vocabulary(&cohort).unwrap();
        let split = split_cohort(&cohort, (0.7, 0.1, 0.2), 1).unwrap();
        let enc = |ps: &[crate::ehr::PatientRecord]| -> Vec<ModelInput> {
            ps.iter().map(|p| encode_patient(p, &vocab, 128).unwrap()).collect()
        };
        let mut config = MedBertConfig::desk(vocab.size());
        config.dropout = 0.0;
        let model = MedBertModel::new(config).unwrap();
        let store: ParameterStore<f32> = model.init_params();
        let sg = train_skipgram(
            &cohort,
            &vocab,
            &SkipGramConfig {
                steps: 30,
                ..Default::default()
            },
        )
        .unwrap();
        (
            enc(&split.train),
            enc(&split.valid),
            enc(&split.test),
            model,
            store,
            sg,
            vocab.size(),
        )
    }

    #[test]
    fn finetune_runs_all_families_and_is_deterministic() {
        let (train, valid, test, model, pretrained, sg, vocab_size) = tiny_setup();
        let artifacts = FinetuneArtifacts {
            model: Some(&model),
            pretrained: Some(&pretrained),
            skipgram: Some(&sg),
            vocab_size,
            embed_dim: 32,
        };
        for (family, mode) in [
            (ModelFamily::Gru, InputMode::OneHotEmbed),
            (ModelFamily::BiGru, InputMode::SkipGram),
            (ModelFamily::Retain, InputMode::OneHotEmbed),
            (ModelFamily::MedBertOnly, InputMode::MedBert),
        ] {
            let config = FinetuneConfig {
                family,
                mode,
                epochs: 2,
                seed: 7,
                ..Default::default()
            };
            let a = run_finetune::<f32>(&train, &valid, &test, &config, &artifacts).unwrap();
            let b = run_finetune::<f32>(&train, &valid, &test, &config, &artifacts).unwrap();
            assert!((0.0..=1.0).contains(&a.test_auc));
            assert_eq!(a.test_auc, b.test_auc, "family {family:?} not deterministic");
        }
    }

    #[test]
    fn finetune_rejects_bad_configs() {
        let (train, valid, test, model, pretrained, sg, vocab_size) = tiny_setup();
        let artifacts = FinetuneArtifacts {
            model: Some(&model),
            pretrained: Some(&pretrained),
            skipgram: Some(&sg),
            vocab_size,
            embed_dim: 32,
        };
        // pooling head without encoder artifacts
        let config = FinetuneConfig {
            family: ModelFamily::MedBertOnly,
            mode: InputMode::OneHotEmbed,
            ..Default::default()
        };
        assert!(run_finetune::<f32>(&train, &valid, &test, &config, &artifacts).is_err());
        // degenerate labels
        let config = FinetuneConfig::default();
        let all_pos: Vec<ModelInput> = train
            .iter()
            .map(|x| {
                let mut x = x.clone();
                x.outcome_label = Some(true);
                x
            })
            .collect();
        assert!(matches!(
            run_finetune::<f32>(&all_pos, &valid, &test, &config, &artifacts),
            Err(Error::DegenerateLabels)
        ));
    }

    #[test]
    fn shuffled_labels_give_chance_auc() {
        let (train, valid, test, model, pretrained, sg, vocab_size) = tiny_setup();
        let artifacts = FinetuneArtifacts {
            model: Some(&model),
            pretrained: Some(&pretrained),
            skipgram: Some(&sg),
            vocab_size,
            embed_dim: 32,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let shuffle_labels = |xs: &[ModelInput], rng: &mut ChaCha8Rng| -> Vec<ModelInput> {
            xs.iter()
                .map(|x| {
                    let mut x = x.clone();
                    x.outcome_label = Some(rng.random_bool(0.5));
                    x
                })
                .collect()
        };
        let mut aucs = Vec::new();
        for seed in 0..6u64 {
            let train_s = shuffle_labels(&train, &mut rng);
            let valid_s = shuffle_labels(&valid, &mut rng);
            let test_s = shuffle_labels(&test, &mut rng);
            let config = FinetuneConfig {
                epochs: 2,
                seed,
                ..Default::default()
            };
            let r = run_finetune::<f32>(&train_s, &valid_s, &test_s, &config, &artifacts).unwrap();
            aucs.push(r.test_auc);
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((0.35..=0.65).contains(&mean), "null AUC mean {mean} from {aucs:?}");
    }

    #[test]
    fn sweep_missing_artifacts_and_bad_size_rejected() {
        let (train, valid, test, model, pretrained, _sg, vocab_size) = tiny_setup();
        let artifacts = FinetuneArtifacts::<f32> {
            model: Some(&model),
            pretrained: Some(&pretrained),
            skipgram: None,
            vocab_size,
            embed_dim: 32,
        };
        assert!(matches!(
            run_ex1(&train, &valid, &test, &artifacts, &ExperimentOptions::default()),
            Err(Error::Config { .. })
        ));

        let cohort = generate_cohort(&SynthConfig {
            n_patients: 20,
            vocab_size: 30,
            ..Default::default()
        })
        .unwrap();
        let vocab = build_vocabulary(&cohort).unwrap();
        let res = run_size_sweep(
            &cohort,
            |p| encode_patient(p, &vocab, 128),
            &test,
            &[50],
            &[("GRU".into(), ModelFamily::Gru, InputMode::OneHotEmbed)],
            &artifacts,
            &ExperimentOptions::default(),
        );
        assert!(matches!(res, Err(Error::Range { .. })));
    }
}
