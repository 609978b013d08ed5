//! Transformer encoder over EHR code sequences.
//!
//! The input embedding is the sum of a code embedding, a within-visit
//! serialization embedding, and a visit embedding; there are no special
//! boundary tokens. Encoder blocks are post-norm (residual add, then
//! layer norm). Attention over padding positions is suppressed with a
//! large negative additive mask, which underflows to exactly zero after
//! softmax. Two output heads are provided: a masked-code prediction
//! head tied to the code embedding table, and a feed-forward pooling
//! head over the mean of the real (unpadded) positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binding, Graph, NodeId, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::ehr::ModelInput;
use crate::scalar::Scalar;

/// Additive mask value for padding columns; after the softmax max-trick
/// this underflows so masked weights are exactly zero.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MedBertConfig {
    /// Total vocabulary size including reserved tokens.
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward inner width.
    pub intermediate_size: usize,
    pub max_seq_len: usize,
    /// Serialization embedding rows; larger ids are clamped.
    pub max_serialization: usize,
    /// Visit embedding rows are `max_visits + 1` (row 0 is PAD).
    pub max_visits: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub initializer_range: f64,
    /// Tie the masked-code decoder to the code embedding table.
    pub tie_mlm_weights: bool,
    pub seed: u64,
}

impl MedBertConfig {
    /// Small configuration sized for CPU experiments.
    pub fn desk(vocab_size: usize) -> Self {
        MedBertConfig {
            vocab_size,
            hidden_size: 32,
            n_layers: 2,
            n_heads: 2,
            intermediate_size: 128,
            max_seq_len: 128,
            max_serialization: 64,
            max_visits: 512,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            initializer_range: 0.02,
            tie_mlm_weights: true,
            seed: 0,
        }
    }

    /// Full-size configuration (6 layers, 6 heads of width 32).
    pub fn full(vocab_size: usize) -> Self {
        MedBertConfig {
            hidden_size: 192,
            n_layers: 6,
            n_heads: 6,
            intermediate_size: 768,
            max_seq_len: 512,
            ..Self::desk(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size", "must cover reserved tokens"));
        }
        if self.hidden_size == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::config("hidden_size", "sizes must be positive"));
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                "hidden_size must be divisible by n_heads",
            ));
        }
        if self.intermediate_size == 0 || self.max_seq_len == 0 {
            return Err(Error::config("intermediate_size", "must be positive"));
        }
        if self.max_serialization == 0 || self.max_visits == 0 {
            return Err(Error::config("max_serialization", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0,1)"));
        }
        Ok(())
    }
}

/// Result of one encoder pass over a single sequence.
pub struct ForwardOutput {
    /// `[seq_len, hidden]` final hidden states.
    pub hidden: NodeId,
    /// Softmax node per `[layer][head]`, each `[seq_len, seq_len]`.
    pub attention: Vec<Vec<NodeId>>,
    /// Number of real (unpadded) positions.
    pub n_real: usize,
}

#[derive(Clone)]
pub struct MedBertModel {
    pub config: MedBertConfig,
}

impl MedBertModel {
    pub fn new(config: MedBertConfig) -> Result<Self> {
        config.validate()?;
        Ok(MedBertModel { config })
    }

    /// Fresh parameter store with truncated-normal weights, zero biases,
    /// and unit layer-norm gains.
    pub fn init_params<S: Scalar>(&self) -> ParameterStore<S> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let std = c.initializer_range;
        let (h, d, i) = (c.hidden_size, c.head_dim(), c.intermediate_size);
        let mut p = ParameterStore::new();

        p.add_trunc_normal("embed.code", vec![c.vocab_size, h], std, &mut rng);
        p.add_trunc_normal("embed.serialization", vec![c.max_serialization, h], std, &mut rng);
        p.add_trunc_normal("embed.visit", vec![c.max_visits + 1, h], std, &mut rng);
        add_norm(&mut p, "embed.norm", h);

        for l in 0..c.n_layers {
            for head in 0..c.n_heads {
                for proj in ["q", "k", "v"] {
                    p.add_trunc_normal(
                        format!("layer{l}.attn.{proj}{head}.w"),
                        vec![h, d],
                        std,
                        &mut rng,
                    );
                    p.add_zeros(format!("layer{l}.attn.{proj}{head}.b"), vec![d]);
                }
            }
            p.add_trunc_normal(format!("layer{l}.attn.out.w"), vec![h, h], std, &mut rng);
            p.add_zeros(format!("layer{l}.attn.out.b"), vec![h]);
            add_norm(&mut p, &format!("layer{l}.attn.norm"), h);
            p.add_trunc_normal(format!("layer{l}.ff.w1"), vec![h, i], std, &mut rng);
            p.add_zeros(format!("layer{l}.ff.b1"), vec![i]);
            p.add_trunc_normal(format!("layer{l}.ff.w2"), vec![i, h], std, &mut rng);
            p.add_zeros(format!("layer{l}.ff.b2"), vec![h]);
            add_norm(&mut p, &format!("layer{l}.ff.norm"), h);
        }

        p.add_trunc_normal("mlm.dense.w", vec![h, h], std, &mut rng);
        p.add_zeros("mlm.dense.b", vec![h]);
        add_norm(&mut p, "mlm.norm", h);
        if !c.tie_mlm_weights {
            p.add_trunc_normal("mlm.out.w", vec![h, c.vocab_size], std, &mut rng);
        }
        p.add_zeros("mlm.out.b", vec![c.vocab_size]);

        self.add_head_params(&mut p, "los", c.seed ^ 0x5f5f);
        p
    }

    /// Add a feed-forward pooling head under `prefix` (used for the
    /// pretraining prolonged-stay head and for fine-tuning heads).
    pub fn add_head_params<S: Scalar>(
        &self,
        p: &mut ParameterStore<S>,
        prefix: &str,
        seed: u64,
    ) {
        let h = self.config.hidden_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.add_trunc_normal(
            format!("{prefix}.ffl.w1"),
            vec![h, h],
            self.config.initializer_range,
            &mut rng,
        );
        p.add_zeros(format!("{prefix}.ffl.b1"), vec![h]);
        p.add_trunc_normal(
            format!("{prefix}.ffl.w2"),
            vec![h, 1],
            self.config.initializer_range,
            &mut rng,
        );
        p.add_zeros(format!("{prefix}.ffl.b2"), vec![1]);
    }

    /// Sum-of-embeddings input representation: `[seq_len, hidden]`.
    pub fn embed_inputs<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        binding: &Binding,
        input: &ModelInput,
    ) -> Result<NodeId> {
        let c = &self.config;
        let seq_len = input.code_ids.len();
        if seq_len == 0 {
            return Err(Error::Contract("empty model input".into()));
        }
        if seq_len > c.max_seq_len {
            return Err(Error::Range {
                index: seq_len,
                limit: c.max_seq_len,
            });
        }
        for &id in &input.code_ids {
            if id >= c.vocab_size {
                return Err(Error::VocabRange {
                    id,
                    size: c.vocab_size,
                });
            }
        }
        let ser_rows: Vec<usize> = input
            .serialization_ids
            .iter()
            .map(|&s| s.min(c.max_serialization - 1))
            .collect();
        let visit_rows: Vec<usize> =
            input.visit_ids.iter().map(|&v| v.min(c.max_visits)).collect();

        let code_e = g.gather(binding.get("embed.code"), &input.code_ids)?;
        let ser_e = g.gather(binding.get("embed.serialization"), &ser_rows)?;
        let visit_e = g.gather(binding.get("embed.visit"), &visit_rows)?;
        let sum = g.add_n(&[code_e, ser_e, visit_e])?;
        let normed = g.layer_norm(
            sum,
            binding.get("embed.norm.gain"),
            binding.get("embed.norm.bias"),
            S::of_f64(c.layer_norm_eps),
        )?;
        g.dropout(normed, c.dropout)
    }

    /// Full encoder pass for one (possibly padded) sequence.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        binding: &Binding,
        input: &ModelInput,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let seq_len = input.code_ids.len();
        let n_real = input.length.min(seq_len);
        if n_real == 0 {
            return Err(Error::Contract("model input has zero real length".into()));
        }
        let mut x = self.embed_inputs(g, binding, input)?;

        // Additive mask: -1e9 on padding columns.
        let mask = if n_real < seq_len {
            let mut data = vec![S::zero(); seq_len * seq_len];
            for r in 0..seq_len {
                for col in n_real..seq_len {
                    data[r * seq_len + col] = S::of_f64(MASK_NEG);
                }
            }
            Some(g.constant(Tensor::new(vec![seq_len, seq_len], data)))
        } else {
            None
        };
        let scale = S::of_f64(1.0 / (c.head_dim() as f64).sqrt());

        let mut attention = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let mut heads = Vec::with_capacity(c.n_heads);
            let mut maps = Vec::with_capacity(c.n_heads);
            for head in 0..c.n_heads {
                let name = |proj: &str, part: &str| {
                    binding.get(&format!("layer{l}.attn.{proj}{head}.{part}"))
                };
                let q = linear(g, x, name("q", "w"), name("q", "b"))?;
                let k = linear(g, x, name("k", "w"), name("k", "b"))?;
                let v = linear(g, x, name("v", "w"), name("v", "b"))?;
                let scores = g.matmul_transb(q, k)?;
                let mut scores = g.scale(scores, scale)?;
                if let Some(m) = mask {
                    scores = g.add(scores, m)?;
                }
                let weights = g.softmax(scores)?;
                maps.push(weights);
                heads.push(g.matmul(weights, v)?);
            }
            attention.push(maps);
            let ctx = g.concat_cols(&heads)?;
            let out = linear(
                g,
                ctx,
                binding.get(&format!("layer{l}.attn.out.w")),
                binding.get(&format!("layer{l}.attn.out.b")),
            )?;
            let out = g.dropout(out, c.dropout)?;
            let res = g.add(x, out)?;
            x = g.layer_norm(
                res,
                binding.get(&format!("layer{l}.attn.norm.gain")),
                binding.get(&format!("layer{l}.attn.norm.bias")),
                S::of_f64(c.layer_norm_eps),
            )?;

            let h1 = linear(
                g,
                x,
                binding.get(&format!("layer{l}.ff.w1")),
                binding.get(&format!("layer{l}.ff.b1")),
            )?;
            let h1 = g.gelu(h1)?;
            let h2 = linear(
                g,
                h1,
                binding.get(&format!("layer{l}.ff.w2")),
                binding.get(&format!("layer{l}.ff.b2")),
            )?;
            let h2 = g.dropout(h2, c.dropout)?;
            let res = g.add(x, h2)?;
            x = g.layer_norm(
                res,
                binding.get(&format!("layer{l}.ff.norm.gain")),
                binding.get(&format!("layer{l}.ff.norm.bias")),
                S::of_f64(c.layer_norm_eps),
            )?;
        }

        Ok(ForwardOutput {
            hidden: x,
            attention,
            n_real,
        })
    }

    /// Masked-code prediction logits `[seq_len, vocab_size]`.
    pub fn masked_lm_logits<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        binding: &Binding,
        hidden: NodeId,
    ) -> Result<NodeId> {
        let c = &self.config;
        let h = linear(g, hidden, binding.get("mlm.dense.w"), binding.get("mlm.dense.b"))?;
        let h = g.gelu(h)?;
        let h = g.layer_norm(
            h,
            binding.get("mlm.norm.gain"),
            binding.get("mlm.norm.bias"),
            S::of_f64(c.layer_norm_eps),
        )?;
        let logits = if c.tie_mlm_weights {
            g.matmul_transb(h, binding.get("embed.code"))?
        } else {
            g.matmul(h, binding.get("mlm.out.w"))?
        };
        g.add_bias(logits, binding.get("mlm.out.b"))
    }

    /// Scalar logit from the head under `prefix`: mean over the real
    /// positions, dense + GELU, then a linear map to one unit.
    pub fn pooled_logit<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        binding: &Binding,
        output: &ForwardOutput,
        prefix: &str,
    ) -> Result<NodeId> {
        let pooled = g.mean_rows(output.hidden, output.n_real)?;
        let h = linear(
            g,
            pooled,
            binding.get(&format!("{prefix}.ffl.w1")),
            binding.get(&format!("{prefix}.ffl.b1")),
        )?;
        let h = g.gelu(h)?;
        let logit = linear(
            g,
            h,
            binding.get(&format!("{prefix}.ffl.w2")),
            binding.get(&format!("{prefix}.ffl.b2")),
        )?;
        g.sum_all(logit)
    }
}

fn add_norm<S: Scalar>(p: &mut ParameterStore<S>, prefix: &str, h: usize) {
    p.add(format!("{prefix}.gain"), Tensor::new(vec![h], vec![S::one(); h]));
    p.add_zeros(format!("{prefix}.bias"), vec![h]);
}

pub fn linear<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use crate::ehr::{ModelInput, PAD_ID};

    fn tiny_model() -> MedBertModel {
        let mut config = MedBertConfig::desk(20);
        config.dropout = 0.0;
        MedBertModel::new(config).unwrap()
    }

    fn sample_input() -> ModelInput {
        ModelInput {
            code_ids: vec![5, 7, 3, 9, 4],
            serialization_ids: vec![0, 1, 2, 0, 1],
            visit_ids: vec![1, 1, 1, 2, 2],
            length: 5,
            prolonged_los_label: false,
            outcome_label: Some(true),
        }
    }

    fn run_hidden(model: &MedBertModel, input: &ModelInput, seed: u64) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
        let store: ParameterStore<f64> = model.init_params();
        let mut g = Graph::new(false, seed);
        let binding = store.bind_all(&mut g);
        let out = model.forward(&mut g, &binding, input).unwrap();
        let attn = out
            .attention
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&id| g.value(id).to_f64_vec())
                    .collect()
            })
            .collect();
        (g.value(out.hidden).to_f64_vec(), attn)
    }

    #[test]
    fn shapes_desk_and_full() {
        for model in [tiny_model(), MedBertModel::new(MedBertConfig::full(30)).unwrap()] {
            let store: ParameterStore<f32> = model.init_params();
            let mut g = Graph::new(false, 0);
            let binding = store.bind_all(&mut g);
            let input = sample_input();
            let out = model.forward(&mut g, &binding, &input).unwrap();
            assert_eq!(
                g.value(out.hidden).shape,
                vec![5, model.config.hidden_size]
            );
            assert_eq!(out.attention.len(), model.config.n_layers);
            assert_eq!(out.attention[0].len(), model.config.n_heads);
            assert_eq!(g.value(out.attention[0][0]).shape, vec![5, 5]);
            let logits = model.masked_lm_logits(&mut g, &binding, out.hidden).unwrap();
            assert_eq!(g.value(logits).shape, vec![5, model.config.vocab_size]);
            let logit = model.pooled_logit(&mut g, &binding, &out, "los").unwrap();
            assert!(g.value(logit).is_scalar());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = MedBertConfig::desk(20);
        c.n_heads = 3; // 32 % 3 != 0
        assert!(MedBertModel::new(c).is_err());
        let mut c = MedBertConfig::desk(20);
        c.dropout = 1.0;
        assert!(MedBertModel::new(c).is_err());
    }

    #[test]
    fn embedding_sum_matches_three_gathers() {
        // [DERIVED] oracle: with dropout off and the layer norm replaced
        // by identity parameters, embed_inputs equals an independently
        // computed normalized sum of the three table rows.
        let model = tiny_model();
        let mut store: ParameterStore<f64> = model.init_params();
        let input = sample_input();
        let mut g = Graph::new(false, 0);
        let binding = store.bind_all(&mut g);
        let embedded = model.embed_inputs(&mut g, &binding, &input).unwrap();
        let got = g.value(embedded).to_f64_vec();

        let h = model.config.hidden_size;
        for (pos, ((&c, &s), &v)) in input
            .code_ids
            .iter()
            .zip(&input.serialization_ids)
            .zip(&input.visit_ids)
            .enumerate()
        {
            let mut row: Vec<f64> = (0..h)
                .map(|j| {
                    store.get("embed.code").data[c * h + j]
                        + store.get("embed.serialization").data[s * h + j]
                        + store.get("embed.visit").data[v * h + j]
                })
                .collect();
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / h as f64;
            for x in row.iter_mut() {
                *x = (*x - mean) / (var + model.config.layer_norm_eps).sqrt();
            }
            for j in 0..h {
                assert!(
                    (got[pos * h + j] - row[j]).abs() < 1e-10,
                    "pos {pos} dim {j}"
                );
            }
        }
        store.clear_grads();
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_padding() {
        let model = tiny_model();
        let padded = sample_input().pad_to(9);
        assert_eq!(padded.code_ids.len(), 9);
        assert!(padded.code_ids[5..].iter().all(|&c| c == PAD_ID));
        let (_, attn) = run_hidden(&model, &padded, 0);
        for layer in &attn {
            for head in layer {
                for r in 0..9 {
                    let row = &head[r * 9..(r + 1) * 9];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12, "row {r} sums {sum}");
                    // padded columns are exactly zero
                    for col in 5..9 {
                        assert_eq!(row[col], 0.0, "row {r} col {col}");
                    }
                }
            }
        }
    }

    #[test]
    fn padding_does_not_change_real_hidden_states() {
        let model = tiny_model();
        let input = sample_input();
        let (h_plain, _) = run_hidden(&model, &input, 0);
        let (h_padded, _) = run_hidden(&model, &input.pad_to(12), 0);
        let h = model.config.hidden_size;
        for i in 0..5 * h {
            assert!(
                (h_plain[i] - h_padded[i]).abs() < 1e-12,
                "element {i}: {} vs {}",
                h_plain[i],
                h_padded[i]
            );
        }
    }

    #[test]
    fn single_position_attention_is_exactly_one() {
        // [DERIVED] a length-1 sequence must attend to itself with
        // weight exactly 1 regardless of parameters.
        let model = tiny_model();
        let input = ModelInput {
            code_ids: vec![6],
            serialization_ids: vec![0],
            visit_ids: vec![1],
            length: 1,
            prolonged_los_label: false,
            outcome_label: None,
        };
        let (_, attn) = run_hidden(&model, &input, 0);
        for layer in &attn {
            for head in layer {
                assert_eq!(head.len(), 1);
                assert_eq!(head[0], 1.0);
            }
        }
    }

    #[test]
    fn two_token_attention_matches_hand_softmax() {
        // [DERIVED] recompute one head's weights from raw Q/K values.
        let model = tiny_model();
        let store: ParameterStore<f64> = model.init_params();
        let input = ModelInput {
            code_ids: vec![4, 11],
            serialization_ids: vec![0, 1],
            visit_ids: vec![1, 1],
            length: 2,
            prolonged_los_label: false,
            outcome_label: None,
        };
        let mut g = Graph::new(false, 0);
        let binding = store.bind_all(&mut g);
        let embedded = model.embed_inputs(&mut g, &binding, &input).unwrap();
        let x = g.value(embedded).to_f64_vec();
        let out = model.forward(&mut g, &binding, &input).unwrap();
        let got = g.value(out.attention[0][0]).to_f64_vec();

        let h = model.config.hidden_size;
        let d = model.config.head_dim();
        let wq = store.get("layer0.attn.q0.w");
        let wk = store.get("layer0.attn.k0.w");
        let project = |row: usize, w: &Tensor<f64>| -> Vec<f64> {
            (0..d)
                .map(|j| (0..h).map(|i| x[row * h + i] * w.data[i * d + j]).sum())
                .collect()
        };
        let (q0, q1) = (project(0, wq), project(1, wq));
        let (k0, k1) = (project(0, wk), project(1, wk));
        let dot = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt()
        };
        let expect_row = |q: &[f64]| -> (f64, f64) {
            let (s0, s1) = (dot(q, &k0), dot(q, &k1));
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            (e0 / (e0 + e1), e1 / (e0 + e1))
        };
        let (a00, a01) = expect_row(&q0);
        let (a10, a11) = expect_row(&q1);
        for (want, have) in [(a00, got[0]), (a01, got[1]), (a10, got[2]), (a11, got[3])] {
            assert!((want - have).abs() < 1e-12, "{want} vs {have}");
        }
    }

    #[test]
    fn deterministic_forward_bitwise() {
        let model = tiny_model();
        let input = sample_input();
        let (h1, a1) = run_hidden(&model, &input, 3);
        let (h2, a2) = run_hidden(&model, &input, 9);
        assert!(h1.iter().zip(&h2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(a1, a2);
    }

    #[test]
    fn full_model_gradient_check() {
        // joint loss through both heads on a tiny model
        let mut config = MedBertConfig::desk(12);
        config.hidden_size = 8;
        config.n_heads = 2;
        config.n_layers = 1;
        config.intermediate_size = 16;
        config.dropout = 0.0;
        let model = MedBertModel::new(config).unwrap();
        let mut store: ParameterStore<f64> = model.init_params();
        let input = ModelInput {
            code_ids: vec![5, 1, 7, 3],
            serialization_ids: vec![0, 1, 0, 1],
            visit_ids: vec![1, 1, 2, 2],
            length: 4,
            prolonged_los_label: true,
            outcome_label: None,
        };
        let report = grad_check(
            move |g, binding| {
                let out = model.forward(g, binding, &input)?;
                let logits = model.masked_lm_logits(g, binding, out.hidden)?;
                let masked = g.gather(logits, &[1])?;
                let row = g.cross_entropy_rows(masked, &[7])?;
                let logit = model.pooled_logit(g, binding, &out, "los")?;
                let bce = g.bce_logit(logit, true)?;
                g.add(row, bce)
            },
            &mut store,
            &GradCheckOptions {
                tolerance: 1e-4,
                sample_cap: Some(8),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
