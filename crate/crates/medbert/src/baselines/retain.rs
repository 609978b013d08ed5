//! RETAIN: two-level reverse-time attention over visit vectors.
//!
//! Two GRUs consume the visit sequence in reverse time. One drives a
//! scalar attention logit per visit (alpha, softmax over visits); the
//! other drives a per-dimension gate (beta, tanh). The context vector
//! is the alpha-weighted sum of beta-gated visit vectors, classified by
//! a linear layer.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binding, Graph, NodeId, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::gru::{add_gru_params, gru_states_reverse_time, GruDims};

/// Register RETAIN parameters under `prefix`.
pub fn add_retain_params<S: Scalar>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    visit_dim: usize,
    rnn_hidden: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) {
    let dims = GruDims {
        input_dim: visit_dim,
        hidden_dim: rnn_hidden,
    };
    add_gru_params(store, &format!("{prefix}.alpha_rnn"), dims, std, &mut *rng);
    add_gru_params(store, &format!("{prefix}.beta_rnn"), dims, std, &mut *rng);
    store.add_trunc_normal(format!("{prefix}.alpha.w"), vec![rnn_hidden, 1], std, &mut *rng);
    store.add_zeros(format!("{prefix}.alpha.b"), vec![1]);
    store.add_trunc_normal(
        format!("{prefix}.beta.w"),
        vec![rnn_hidden, visit_dim],
        std,
        &mut *rng,
    );
    store.add_zeros(format!("{prefix}.beta.b"), vec![visit_dim]);
    store.add_trunc_normal(format!("{prefix}.out.w"), vec![visit_dim, 1], std, &mut *rng);
    store.add_zeros(format!("{prefix}.out.b"), vec![1]);
}

/// RETAIN forward pass over `visit_vectors` `[n_visits, dim]`.
/// Returns (scalar logit, alphas `[1, n_visits]`, betas `[n_visits, dim]`).
pub fn retain_forward<S: Scalar>(
    g: &mut Graph<S>,
    binding: &Binding,
    prefix: &str,
    visit_vectors: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let shape = g.value(visit_vectors).shape.clone();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Contract(format!(
            "retain_forward expects [n_visits >= 1, dim], got {shape:?}"
        )));
    }
    let n = shape[0];
    let p = |part: &str| binding.get(&format!("{prefix}.{part}"));

    let alpha_states =
        gru_states_reverse_time(g, binding, &format!("{prefix}.alpha_rnn"), visit_vectors)?;
    let beta_states =
        gru_states_reverse_time(g, binding, &format!("{prefix}.beta_rnn"), visit_vectors)?;

    // scalar attention logit per visit -> [1, n] -> softmax over visits
    let mut logits = Vec::with_capacity(n);
    for &state in &alpha_states {
        let e = g.matmul(state, p("alpha.w"))?;
        logits.push(g.add_bias(e, p("alpha.b"))?);
    }
    let row = g.concat_cols(&logits)?;
    let alphas = g.softmax(row)?;

    // per-dimension gate per visit
    let mut gated = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    for (j, &state) in beta_states.iter().enumerate() {
        let b = g.matmul(state, p("beta.w"))?;
        let b = g.add_bias(b, p("beta.b"))?;
        let b = g.tanh(b)?;
        betas.push(b);
        let v = g.gather(visit_vectors, &[j])?;
        gated.push(g.mul(b, v)?);
    }
    let gated_matrix = g.concat_rows(&gated)?;
    let betas_matrix = g.concat_rows(&betas)?;

    // context = alphas @ gated -> [1, dim]
    let context = g.matmul(alphas, gated_matrix)?;
    let out = g.matmul(context, p("out.w"))?;
    let out = g.add_bias(out, p("out.b"))?;
    let logit = g.sum_all(out)?;
    Ok((logit, alphas, betas_matrix))
}
