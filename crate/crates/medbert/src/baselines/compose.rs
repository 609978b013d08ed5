//! Input composition for the baseline predictors.
//!
//! Baselines consume either code-level embedding sequences (GRU,
//! Bi-GRU) or per-visit sums of those embeddings (RETAIN). Three
//! sources are supported: a freshly initialized learnable table, a
//! table initialized from trained skip-gram embeddings (fine-tuned
//! further), or the contextual hidden states of a pretrained encoder
//! (fine-tuned jointly unless frozen).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binding, Graph, NodeId, ParameterStore};
use crate::ehr::ModelInput;
use crate::error::{Error, Result};
use crate::model::MedBertModel;
use crate::scalar::Scalar;

use super::skipgram::SkipGramParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// Learnable embedding table trained from scratch.
    OneHotEmbed,
    /// Table initialized from skip-gram vectors, then fine-tuned.
    SkipGram,
    /// Contextual hidden states from the pretrained encoder.
    MedBert,
}

impl InputMode {
    pub fn tag(&self) -> &'static str {
        match self {
            InputMode::OneHotEmbed => "none",
            InputMode::SkipGram => "skipgram",
            InputMode::MedBert => "med_bert",
        }
    }
}

/// Builds baseline input sequences from one of the three sources.
pub struct Composer {
    pub mode: InputMode,
    /// Output dimension of the composed sequence.
    pub dim: usize,
    /// In `MedBert` mode, keep the encoder parameters fixed.
    pub freeze_encoder: bool,
    /// Present only in `MedBert` mode.
    pub model: Option<MedBertModel>,
}

/// Name of the learnable code-embedding table for table-based modes.
pub const BASE_EMBED: &str = "base.embed";

impl Composer {
    pub fn scratch(dim: usize) -> Self {
        Composer {
            mode: InputMode::OneHotEmbed,
            dim,
            freeze_encoder: false,
            model: None,
        }
    }

    pub fn skipgram(dim: usize) -> Self {
        Composer {
            mode: InputMode::SkipGram,
            dim,
            freeze_encoder: false,
            model: None,
        }
    }

    pub fn med_bert(model: MedBertModel, freeze_encoder: bool) -> Self {
        Composer {
            dim: model.config.hidden_size,
            mode: InputMode::MedBert,
            freeze_encoder,
            model: Some(model),
        }
    }

    /// Install the source parameters into `store`.
    ///
    /// * `OneHotEmbed`: fresh truncated-normal table.
    /// * `SkipGram`: copies the trained input table (required artifact).
    /// * `MedBert`: expects the pretrained encoder parameters to be in
    ///   the store already (required artifact); applies the freeze flag.
    pub fn init_params<S: Scalar>(
        &self,
        store: &mut ParameterStore<S>,
        vocab_size: usize,
        seed: u64,
        skipgram: Option<&SkipGramParams<S>>,
    ) -> Result<()> {
        match self.mode {
            InputMode::OneHotEmbed => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                store.add_trunc_normal(BASE_EMBED, vec![vocab_size, self.dim], 0.02, &mut rng);
            }
            InputMode::SkipGram => {
                let params = skipgram.ok_or_else(|| {
                    Error::config("skipgram", "skip-gram artifact required for this mode")
                })?;
                if params.input.shape != [vocab_size, self.dim] {
                    return Err(Error::Shape {
                        op: "compose_init".into(),
                        lhs: params.input.shape.clone(),
                        rhs: vec![vocab_size, self.dim],
                    });
                }
                store.add(BASE_EMBED, params.input.clone());
            }
            InputMode::MedBert => {
                let model = self.model.as_ref().ok_or_else(|| {
                    Error::config("med_bert", "encoder model required for this mode")
                })?;
                if !store.contains("embed.code") {
                    return Err(Error::config(
                        "med_bert",
                        "pretrained encoder parameters missing from store",
                    ));
                }
                if model.config.vocab_size != vocab_size {
                    return Err(Error::config(
                        "med_bert",
                        "encoder vocabulary does not match the cohort vocabulary",
                    ));
                }
                if self.freeze_encoder {
                    store.set_trainable_prefix("embed.", false);
                    store.set_trainable_prefix("layer", false);
                    store.set_trainable_prefix("mlm.", false);
                }
            }
        }
        Ok(())
    }

    /// Code-level sequence `[length, dim]` for one encoded patient.
    pub fn code_sequence<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        binding: &Binding,
        input: &ModelInput,
    ) -> Result<NodeId> {
        match self.mode {
            InputMode::OneHotEmbed | InputMode::SkipGram => {
                let rows = &input.code_ids[..input.length];
                g.gather(binding.get(BASE_EMBED), rows)
            }
            InputMode::MedBert => {
                let model = self
                    .model
                    .as_ref()
                    .ok_or_else(|| Error::config("med_bert", "encoder model missing"))?;
                let out = model.forward(g, binding, input)?;
                Ok(out.hidden)
            }
        }
    }

    /// Per-visit sums of the code-level sequence: `[n_visits, dim]`.
    pub fn visit_sums<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        seq: NodeId,
        input: &ModelInput,
    ) -> Result<NodeId> {
        let groups = visit_groups(input)?;
        let mut rows = Vec::with_capacity(groups.len());
        for group in &groups {
            let sub = g.gather(seq, group)?;
            let mean = g.mean_rows(sub, group.len())?;
            rows.push(g.scale(mean, S::of_f64(group.len() as f64))?);
        }
        g.concat_rows(&rows)
    }
}

/// Positions of each visit, in order, over the real (unpadded) prefix.
pub fn visit_groups(input: &ModelInput) -> Result<Vec<Vec<usize>>> {
    if input.length == 0 {
        return Err(Error::Contract("empty input for visit grouping".into()));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = input.visit_ids[0];
    let mut group = Vec::new();
    for pos in 0..input.length {
        if input.visit_ids[pos] != current {
            groups.push(std::mem::take(&mut group));
            current = input.visit_ids[pos];
        }
        group.push(pos);
    }
    groups.push(group);
    Ok(groups)
}
