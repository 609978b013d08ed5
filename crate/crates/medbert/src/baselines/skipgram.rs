//! Skip-gram code embeddings with negative sampling.
//!
//! Positive pairs are codes within `window` positions of each other in
//! the flattened patient sequence; each positive draws `negatives`
//! uniform non-reserved negatives. The logistic loss is optimized with
//! AdamW on minibatches of pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    load_checkpoint, save_checkpoint, AdamW, Binding, Graph, NodeId, ParameterStore, Tensor,
};
use crate::ehr::{PatientRecord, Vocabulary, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub steps: u64,
    pub batch_pairs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 32,
            window: 5,
            negatives: 5,
            steps: 2000,
            batch_pairs: 64,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SkipGramParams<S: Scalar> {
    /// `[vocab_size, dim]` center-word table (used downstream).
    pub input: Tensor<S>,
    /// `[vocab_size, dim]` context table.
    pub output: Tensor<S>,
    pub window: usize,
    pub negatives: usize,
}

impl<S: Scalar> SkipGramParams<S> {
    pub fn dim(&self) -> usize {
        self.input.shape[1]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = ParameterStore::new();
        store.add("sg.in", self.input.clone());
        store.add("sg.out", self.output.clone());
        let extra = serde_json::json!({
            "type": "skipgram",
            "window": self.window,
            "negatives": self.negatives,
        });
        save_checkpoint(&store, extra, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, extra) = load_checkpoint::<S>(path)?;
        if extra.get("type").and_then(|t| t.as_str()) != Some("skipgram") {
            return Err(Error::config("checkpoint", "not a skip-gram checkpoint"));
        }
        if !store.contains("sg.in") || !store.contains("sg.out") {
            return Err(Error::config("checkpoint", "missing skip-gram tables"));
        }
        Ok(SkipGramParams {
            input: store.get("sg.in").clone(),
            output: store.get("sg.out").clone(),
            window: extra["window"].as_u64().unwrap_or(5) as usize,
            negatives: extra["negatives"].as_u64().unwrap_or(5) as usize,
        })
    }
}

/// Loss over explicit (center, context, label) triples; exposed for
/// gradient checking. Mean over triples.
pub fn skipgram_pair_loss<S: Scalar>(
    g: &mut Graph<S>,
    binding: &Binding,
    triples: &[(usize, usize, bool)],
) -> Result<NodeId> {
    if triples.is_empty() {
        return Err(Error::Contract("no skip-gram pairs".into()));
    }
    let mut terms = Vec::with_capacity(triples.len());
    for &(center, context, label) in triples {
        let c = g.gather(binding.get("sg.in"), &[center])?;
        let o = g.gather(binding.get("sg.out"), &[context])?;
        let prod = g.mul(c, o)?;
        let score = g.sum_all(prod)?;
        terms.push(g.bce_logit(score, label)?);
    }
    let sum = g.add_n(&terms)?;
    g.scale(sum, S::of_f64(1.0 / triples.len() as f64))
}

/// Collect the positive pair list from the flattened code sequences.
fn positive_pairs(cohort: &[PatientRecord], vocab: &Vocabulary, window: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for patient in cohort {
        let ids: Vec<usize> = patient
            .visits
            .iter()
            .flat_map(|v| v.codes.iter())
            .map(|c| vocab.id_of(&c.code).unwrap_or(crate::ehr::UNK_ID))
            .collect();
        for i in 0..ids.len() {
            let hi = (i + window).min(ids.len().saturating_sub(1));
            for j in (i + 1)..=hi {
                pairs.push((ids[i], ids[j]));
                pairs.push((ids[j], ids[i]));
            }
        }
    }
    pairs
}

/// Train skip-gram embeddings; deterministic for a given seed.
pub fn train_skipgram<S: Scalar>(
    cohort: &[PatientRecord],
    vocab: &Vocabulary,
    config: &SkipGramConfig,
) -> Result<SkipGramParams<S>> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let n_reserved = RESERVED_TOKENS.len();
    if vocab.size() < n_reserved + config.negatives + 1 {
        return Err(Error::config(
            "negatives",
            "vocabulary too small for the negative sample count",
        ));
    }
    if config.dim == 0 || config.steps == 0 || config.batch_pairs == 0 {
        return Err(Error::config("dim", "dim/steps/batch_pairs must be positive"));
    }
    let pairs = positive_pairs(cohort, vocab, config.window);
    if pairs.is_empty() {
        return Err(Error::Contract(
            "cohort yields no co-occurring code pairs".into(),
        ));
    }

    let mut store: ParameterStore<S> = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    store.add_trunc_normal("sg.in", vec![vocab.size(), config.dim], 0.05, &mut rng);
    store.add_trunc_normal("sg.out", vec![vocab.size(), config.dim], 0.05, &mut rng);
    let opt = AdamW {
        weight_decay: 0.0,
        ..AdamW::with_lr(config.lr)
    };

    for step in 0..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step + 1);
        let mut triples = Vec::with_capacity(config.batch_pairs * (1 + config.negatives));
        for _ in 0..config.batch_pairs {
            let (center, context) = pairs[rng.random_range(0..pairs.len())];
            triples.push((center, context, true));
            for _ in 0..config.negatives {
                let neg = rng.random_range(n_reserved..vocab.size());
                triples.push((center, neg, false));
            }
        }
        let mut g = Graph::new(false, step);
        let binding = store.bind_all(&mut g);
        let loss = skipgram_pair_loss(&mut g, &binding, &triples)?;
        g.backward(loss)?;
        store.clear_grads();
        store.collect_grads(&g, &binding);
        store.adamw_step(&opt)?;
    }
    Ok(SkipGramParams {
        input: store.get("sg.in").clone(),
        output: store.get("sg.out").clone(),
        window: config.window,
        negatives: config.negatives,
    })
}
