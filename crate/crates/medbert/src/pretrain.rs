//! Pretraining: masked-code prediction plus a prolonged-stay head.
//!
//! Every patient contributes exactly one masked position per example.
//! Batches are drawn with replacement from a per-step RNG stream, so a
//! run resumed from a checkpoint replays the identical sequence of
//! batches and masking decisions from that step onward.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{save_checkpoint, AdamW, Graph, ParameterStore};
use crate::ehr::{ModelInput, MASK_ID, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::eval::compute_auc;
use crate::model::MedBertModel;
use crate::scalar::Scalar;

/// One pretraining example: the input with one position replaced
/// according to the 80/10/10 rule, and the original code to recover.
#[derive(Debug, Clone)]
pub struct MaskedExample {
    pub input: ModelInput,
    pub position: usize,
    pub target: usize,
}

/// Replace exactly one real position: 80% with the mask token, 10% with
/// a random non-reserved code, 10% left unchanged.
pub fn apply_masking(
    input: &ModelInput,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<MaskedExample> {
    let n_reserved = RESERVED_TOKENS.len();
    if vocab_size <= n_reserved {
        return Err(Error::config("vocab_size", "has no maskable codes"));
    }
    if input.length == 0 || input.length > input.code_ids.len() {
        return Err(Error::Contract("invalid input length for masking".into()));
    }
    let position = rng.random_range(0..input.length);
    let target = input.code_ids[position];
    let mut masked = input.clone();
    let roll: f64 = rng.random();
    if roll < 0.8 {
        masked.code_ids[position] = MASK_ID;
    } else if roll < 0.9 {
        masked.code_ids[position] = rng.random_range(n_reserved..vocab_size);
    }
    Ok(MaskedExample {
        input: masked,
        position,
        target,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamW,
    /// Weight of the prolonged-stay loss in the joint objective.
    pub los_weight: f64,
    /// Emit a loss-curve row (and validation AUC) every this many steps.
    pub log_every: u64,
    /// Write `step{N}.ckpt` every this many steps; 0 writes only `final.ckpt`.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1000,
            batch_size: 32,
            optimizer: AdamW::with_lr(1e-3),
            los_weight: 1.0,
            log_every: 50,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.los_weight < 0.0 {
            return Err(Error::config("los_weight", "must be non-negative"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be positive"));
        }
        self.optimizer.validate()
    }
}

/// One logged point of the loss curve.
#[derive(Debug, Clone)]
pub struct LossPoint {
    pub step: u64,
    pub mlm_loss: f64,
    pub los_loss: f64,
    /// Prolonged-stay AUC on the validation inputs; NaN if degenerate.
    pub valid_auc: f64,
}

/// One optimizer step on a batch of masked examples. Returns the mean
/// masked-code loss and mean prolonged-stay loss over the batch.
pub fn pretrain_step<S: Scalar>(
    model: &MedBertModel,
    store: &mut ParameterStore<S>,
    batch: &[MaskedExample],
    config: &PretrainConfig,
    graph_seed: u64,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty pretraining batch".into()));
    }
    let mut g = Graph::new(true, graph_seed);
    let binding = store.bind_all(&mut g);
    let mut mlm_terms = Vec::with_capacity(batch.len());
    let mut los_terms = Vec::with_capacity(batch.len());
    for example in batch {
        let out = model.forward(&mut g, &binding, &example.input)?;
        let logits = model.masked_lm_logits(&mut g, &binding, out.hidden)?;
        let picked = g.gather(logits, &[example.position])?;
        mlm_terms.push(g.cross_entropy_rows(picked, &[example.target])?);
        let logit = model.pooled_logit(&mut g, &binding, &out, "los")?;
        los_terms.push(g.bce_logit(logit, example.input.prolonged_los_label)?);
    }
    let inv = S::of_f64(1.0 / batch.len() as f64);
    let mlm_sum = g.add_n(&mlm_terms)?;
    let mlm_mean = g.scale(mlm_sum, inv)?;
    let los_sum = g.add_n(&los_terms)?;
    let los_mean = g.scale(los_sum, inv)?;
    let weighted = g.scale(los_mean, S::of_f64(config.los_weight))?;
    let loss = g.add(mlm_mean, weighted)?;
    g.backward(loss)?;
    store.clear_grads();
    store.collect_grads(&g, &binding);
    store.adamw_step(&config.optimizer)?;
    Ok((
        g.value(mlm_mean).scalar_value().as_f64(),
        g.value(los_mean).scalar_value().as_f64(),
    ))
}

/// Prolonged-stay validation AUC with the current parameters
/// (evaluation mode, dropout off). NaN when labels are degenerate.
pub fn los_valid_auc<S: Scalar>(
    model: &MedBertModel,
    store: &ParameterStore<S>,
    valid: &[ModelInput],
) -> Result<f64> {
    if valid.is_empty() {
        return Ok(f64::NAN);
    }
    let mut scores = Vec::with_capacity(valid.len());
    let mut labels = Vec::with_capacity(valid.len());
    for input in valid {
        let mut g = Graph::new(false, 0);
        let binding = store.bind_all(&mut g);
        let out = model.forward(&mut g, &binding, input)?;
        let logit = model.pooled_logit(&mut g, &binding, &out, "los")?;
        scores.push(g.value(logit).scalar_value().as_f64());
        labels.push(input.prolonged_los_label);
    }
    match compute_auc(&scores, &labels) {
        Ok(auc) => Ok(auc),
        Err(Error::DegenerateLabels) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Run (or resume) pretraining from `store.step` up to `config.steps`.
///
/// When `out_dir` is given, appends `loss_curve.csv` rows
/// (`step,mlm_loss,los_loss,valid_auc`) and writes checkpoints there.
pub fn run_pretraining<S: Scalar>(
    model: &MedBertModel,
    store: &mut ParameterStore<S>,
    train: &[ModelInput],
    valid: &[ModelInput],
    config: &PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<LossPoint>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let vocab_size = model.config.vocab_size;
    let mut curve = Vec::new();
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let path = dir.join("loss_curve.csv");
            let fresh = !path.exists();
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            if fresh {
                writeln!(file, "step,mlm_loss,los_loss,valid_auc")
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            Some((file, path))
        }
        None => None,
    };

    while store.step < config.steps {
        let step = store.step; // step about to be taken (0-based)
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step + 1);
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let idx = rng.random_range(0..train.len());
            batch.push(apply_masking(&train[idx], vocab_size, &mut rng)?);
        }
        let graph_seed = config.seed ^ (step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (mlm_loss, los_loss) = pretrain_step(model, store, &batch, config, graph_seed)?;
        let done = store.step;
        if done % config.log_every == 0 || done == config.steps {
            let valid_auc = los_valid_auc(model, store, valid)?;
            if let Some((file, path)) = csv.as_mut() {
                writeln!(file, "{done},{mlm_loss:.6},{los_loss:.6},{valid_auc:.6}")
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            curve.push(LossPoint {
                step: done,
                mlm_loss,
                los_loss,
                valid_auc,
            });
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                save_checkpoint(
                    store,
                    serde_json::Value::Null,
                    &dir.join(format!("step{done}.ckpt")),
                )?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(store, serde_json::Value::Null, &dir.join("final.ckpt"))?;
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::load_checkpoint;
    use crate::ehr::{build_vocabulary, encode_patient};
    use crate::model::MedBertConfig;
    use crate::synth::{generate_cohort, SynthConfig};

    fn sample_input() -> ModelInput {
        ModelInput {
            code_ids: vec![5, 7, 3, 9],
            serialization_ids: vec![0, 1, 2, 0],
            visit_ids: vec![1, 1, 1, 2],
            length: 4,
            prolonged_los_label: true,
            outcome_label: None,
        }
    }

    #[test]
    fn masking_changes_exactly_one_position_or_none() {
        let input = sample_input();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let ex = apply_masking(&input, 50, &mut rng).unwrap();
            assert_eq!(ex.target, input.code_ids[ex.position]);
            let n_diff = input
                .code_ids
                .iter()
                .zip(&ex.input.code_ids)
                .filter(|(a, b)| a != b)
                .count();
            assert!(n_diff <= 1);
            if n_diff == 1 {
                assert_ne!(input.code_ids[ex.position], ex.input.code_ids[ex.position]);
            }
            // other streams untouched
            assert_eq!(ex.input.visit_ids, input.visit_ids);
            assert_eq!(ex.input.serialization_ids, input.serialization_ids);
        }
    }

    #[test]
    fn masking_frequencies_match_80_10_10() {
        let input = sample_input();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 10_000usize;
        let (mut mask, mut random, mut keep) = (0usize, 0usize, 0usize);
        let mut position_counts = vec![0usize; input.length];
        for _ in 0..trials {
            let ex = apply_masking(&input, 1000, &mut rng).unwrap();
            position_counts[ex.position] += 1;
            let new = ex.input.code_ids[ex.position];
            if new == MASK_ID {
                mask += 1;
            } else if new == ex.target {
                keep += 1;
            } else {
                random += 1;
                assert!(new >= RESERVED_TOKENS.len(), "reserved replacement {new}");
            }
        }
        let f = |c: usize| c as f64 / trials as f64;
        assert!((0.78..=0.82).contains(&f(mask)), "mask {}", f(mask));
        assert!((0.08..=0.12).contains(&f(random)), "random {}", f(random));
        assert!((0.08..=0.12).contains(&f(keep)), "keep {}", f(keep));
        // positions chosen uniformly: chi-square on 4 cells, df=3,
        // critical value 11.345 at p=0.01
        let expected = trials as f64 / input.length as f64;
        let chi2: f64 = position_counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 11.345, "chi2 {chi2} counts {position_counts:?}");
    }

    #[test]
    fn initial_losses_match_uniform_predictions() {
        // [DERIVED] at random init the masked-code loss is close to
        // ln(vocab) and the prolonged-stay loss close to ln 2.
        let vocab = 40;
        let mut config = MedBertConfig::desk(vocab);
        config.dropout = 0.0;
        let model = MedBertModel::new(config).unwrap();
        let mut store: ParameterStore<f32> = model.init_params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<MaskedExample> = (0..16)
            .map(|_| apply_masking(&sample_input(), vocab, &mut rng).unwrap())
            .collect();
        // losses are reported before the optimizer step applies
        let pc = PretrainConfig::default();
        let (mlm, los) = pretrain_step(&model, &mut store, &batch, &pc, 0).unwrap();
        let ln_v = (vocab as f64).ln();
        assert!((mlm - ln_v).abs() < 0.25 * ln_v, "mlm {mlm} vs {ln_v}");
        assert!((los - std::f64::consts::LN_2).abs() < 0.15, "los {los}");
    }

    #[test]
    fn training_reduces_joint_loss() {
        let cohort = generate_cohort(&SynthConfig {
            n_patients: 24,
            vocab_size: 30,
            ..Default::default()
        })
        .unwrap();
        let vocab = build_vocabulary(&cohort).unwrap();
        let inputs: Vec<ModelInput> = cohort
            .iter()
            .map(|p| encode_patient(p, &vocab, 128).unwrap())
            .collect();
        let model = MedBertModel::new(MedBertConfig::desk(vocab.size())).unwrap();
        let mut store: ParameterStore<f32> = model.init_params();
        let config = PretrainConfig {
            steps: 60,
            batch_size: 8,
            optimizer: AdamW::with_lr(3e-3),
            log_every: 10,
            ..Default::default()
        };
        let curve =
            run_pretraining(&model, &mut store, &inputs, &[], &config, None).unwrap();
        let first = &curve[0];
        let last = curve.last().unwrap();
        assert!(
            last.mlm_loss + config.los_weight * last.los_loss
                < first.mlm_loss + config.los_weight * first.los_loss,
            "first {:?} last {:?}",
            (first.mlm_loss, first.los_loss),
            (last.mlm_loss, last.los_loss)
        );
        assert_eq!(store.step, 60);
    }

    #[test]
    fn resume_is_bitwise_identical() {
        let cohort = generate_cohort(&SynthConfig {
            n_patients: 12,
            vocab_size: 25,
            ..Default::default()
        })
        .unwrap();
        let vocab = build_vocabulary(&cohort).unwrap();
        let inputs: Vec<ModelInput> = cohort
            .iter()
            .map(|p| encode_patient(p, &vocab, 128).unwrap())
            .collect();
        let model = MedBertModel::new(MedBertConfig::desk(vocab.size())).unwrap();
        let config = PretrainConfig {
            steps: 20,
            batch_size: 4,
            log_every: 5,
            checkpoint_every: 10,
            ..Default::default()
        };

        // straight run
        let mut store_a: ParameterStore<f32> = model.init_params();
        let dir_a = tempfile::tempdir().unwrap();
        run_pretraining(&model, &mut store_a, &inputs, &[], &config, Some(dir_a.path()))
            .unwrap();

        // run to 10, reload the checkpoint, continue to 20
        let mut store_b: ParameterStore<f32> = model.init_params();
        let dir_b = tempfile::tempdir().unwrap();
        let half = PretrainConfig {
            steps: 10,
            ..config.clone()
        };
        run_pretraining(&model, &mut store_b, &inputs, &[], &half, Some(dir_b.path()))
            .unwrap();
        let mut resumed: ParameterStore<f32> =
            load_checkpoint(&dir_b.path().join("step10.ckpt")).unwrap().0;
        assert_eq!(resumed.step, 10);
        run_pretraining(&model, &mut resumed, &inputs, &[], &config, None).unwrap();

        for name in store_a.names() {
            let a = &store_a.get(name).data;
            let b = &resumed.get(name).data;
            assert!(
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "parameter {name} diverged after resume"
            );
        }
    }
}
