//! GRU sequence encoder (unidirectional and bidirectional).
//!
//! Recurrence from a zero initial state:
//!   z = sigmoid(x W_z + h U_z + b_z)
//!   r = sigmoid(x W_r + h U_r + b_r)
//!   h~ = tanh(x W_h + (r (.) h) U_h + b_h)
//!   h <- (1 - z) (.) h + z (.) h~

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binding, Graph, NodeId, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GruDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Register one GRU cell's parameters under `prefix`:
/// `{prefix}.{wz,uz,bz,wr,ur,br,wh,uh,bh}`.
pub fn add_gru_params<S: Scalar>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    dims: GruDims,
    std: f64,
    rng: &mut ChaCha8Rng,
) {
    let (i, h) = (dims.input_dim, dims.hidden_dim);
    for gate in ["z", "r", "h"] {
        store.add_trunc_normal(format!("{prefix}.w{gate}"), vec![i, h], std, &mut *rng);
        store.add_trunc_normal(format!("{prefix}.u{gate}"), vec![h, h], std, &mut *rng);
        store.add_zeros(format!("{prefix}.b{gate}"), vec![h]);
    }
}

fn gate<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    h: NodeId,
    w: NodeId,
    u: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let sum = g.add(xw, hu)?;
    g.add_bias(sum, b)
}

/// One cell step: `x` and `h` are `[1, dim]` rows; returns the new state.
pub fn gru_cell<S: Scalar>(
    g: &mut Graph<S>,
    binding: &Binding,
    prefix: &str,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let p = |part: &str| binding.get(&format!("{prefix}.{part}"));
    let z = gate(g, x, h, p("wz"), p("uz"), p("bz"))?;
    let z = g.sigmoid(z)?;
    let r = gate(g, x, h, p("wr"), p("ur"), p("br"))?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h)?;
    let cand = gate(g, x, rh, p("wh"), p("uh"), p("bh"))?;
    let cand = g.tanh(cand)?;
    let keep = g.one_minus(z)?;
    let keep = g.mul(keep, h)?;
    let take = g.mul(z, cand)?;
    g.add(keep, take)
}

/// Run the cell under `prefix` over the rows of `inputs` in the order
/// given by `order`; returns (final state `[1, hidden]`, all states in
/// visit order of `order`).
fn run_direction<S: Scalar>(
    g: &mut Graph<S>,
    binding: &Binding,
    prefix: &str,
    inputs: NodeId,
    order: &[usize],
    hidden_dim: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let mut h = g.constant(Tensor::zeros(vec![1, hidden_dim]));
    let mut states = Vec::with_capacity(order.len());
    for &t in order {
        let x = g.gather(inputs, &[t])?;
        h = gru_cell(g, binding, prefix, x, h)?;
        states.push(h);
    }
    Ok((h, states))
}

/// Final GRU state over `inputs` `[length, input_dim]`. Bidirectional
/// runs a second cell (under `{prefix}.bwd`; the forward cell is
/// `{prefix}.fwd`) on the reversed sequence and concatenates the final
/// states. Unidirectional uses the single cell under `prefix`.
pub fn gru_forward<S: Scalar>(
    g: &mut Graph<S>,
    binding: &Binding,
    prefix: &str,
    inputs: NodeId,
    bidirectional: bool,
) -> Result<NodeId> {
    let shape = g.value(inputs).shape.clone();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Contract(format!(
            "gru_forward expects [length >= 1, dim], got {shape:?}"
        )));
    }
    let len = shape[0];
    let forward_order: Vec<usize> = (0..len).collect();
    if !bidirectional {
        let hidden_dim = hidden_dim_of(g, binding, prefix)?;
        let (h, _) = run_direction(g, binding, prefix, inputs, &forward_order, hidden_dim)?;
        Ok(h)
    } else {
        let fwd = format!("{prefix}.fwd");
        let bwd = format!("{prefix}.bwd");
        let hidden_dim = hidden_dim_of(g, binding, &fwd)?;
        let (hf, _) = run_direction(g, binding, &fwd, inputs, &forward_order, hidden_dim)?;
        let reversed: Vec<usize> = (0..len).rev().collect();
        let (hb, _) = run_direction(g, binding, &bwd, inputs, &reversed, hidden_dim)?;
        g.concat_cols(&[hf, hb])
    }
}

/// All states in input order from a reversed-time pass (state for the
/// earliest position has seen the whole future), as used by RETAIN.
pub fn gru_states_reverse_time<S: Scalar>(
    g: &mut Graph<S>,
    binding: &Binding,
    prefix: &str,
    inputs: NodeId,
) -> Result<Vec<NodeId>> {
    let len = g.value(inputs).shape[0];
    let hidden_dim = hidden_dim_of(g, binding, prefix)?;
    let reversed: Vec<usize> = (0..len).rev().collect();
    let (_, mut states) = run_direction(g, binding, prefix, inputs, &reversed, hidden_dim)?;
    states.reverse();
    Ok(states)
}

fn hidden_dim_of<S: Scalar>(
    g: &Graph<S>,
    binding: &Binding,
    prefix: &str,
) -> Result<usize> {
    let name = format!("{prefix}.uz");
    let id = binding
        .try_get(&name)
        .ok_or_else(|| Error::config("prefix", format!("no GRU parameters named {name}")))?;
    Ok(g.value(id).shape[0])
}
