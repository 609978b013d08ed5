//! Central-finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::store::{Binding, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over checked elements)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn print(&self) {
        for (name, err) in &self.per_param {
            println!("  {name:40} max rel err {err:.3e}");
        }
        println!(
            "grad check: max rel err {:.3e} vs tolerance {:.1e} -> {}",
            self.max_rel_err,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        );
    }
}

pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many elements per parameter (deterministic
    /// stride sampling); `None` checks every element.
    pub sample_cap: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            h: 1e-5,
            sample_cap: None,
        }
    }
}

/// Compare analytic gradients against central finite differences for a
/// deterministic loss closure over the store's parameters.
///
/// The closure must build the loss from the bound parameters; any
/// source of nondeterminism (dropout in train mode) is detected by
/// evaluating the loss twice with different graph seeds and rejected.
pub fn grad_check<S: Scalar>(
    build: impl Fn(&mut Graph<S>, &Binding) -> Result<NodeId>,
    store: &mut ParameterStore<S>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let eval = |store: &ParameterStore<S>, seed: u64| -> Result<f64> {
        let mut g = Graph::new(false, seed);
        let binding = store.bind_all(&mut g);
        let loss = build(&mut g, &binding)?;
        if !g.value(loss).is_scalar() {
            return Err(Error::Contract("grad_check loss must be scalar".into()));
        }
        Ok(g.value(loss).scalar_value().as_f64())
    };

    // Determinism probe: different graph seeds must not change the loss.
    let l1 = eval(store, 11)?;
    let l2 = eval(store, 97)?;
    if l1 != l2 {
        return Err(Error::Contract(
            "closure is nondeterministic (is dropout enabled?)".into(),
        ));
    }

    // Analytic gradients.
    let mut g = Graph::new(false, 0);
    let binding = store.bind_all(&mut g);
    let loss = build(&mut g, &binding)?;
    g.backward(loss)?;
    store.clear_grads();
    store.collect_grads(&g, &binding);

    let h = opts.h;
    let names: Vec<String> = store.names().to_vec();
    let mut per_param = Vec::with_capacity(names.len());
    let mut max_rel_err: f64 = 0.0;
    for name in &names {
        let analytic: Vec<f64> = store
            .grad_of(name)
            .expect("grad collected")
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let n = analytic.len();
        let stride = match opts.sample_cap {
            Some(cap) if n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut param_err: f64 = 0.0;
        let mut idx = 0;
        while idx < n {
            let orig = store.get(name).data[idx];
            store.get_mut(name).data[idx] = orig + S::of_f64(h);
            let plus = eval(store, 0)?;
            store.get_mut(name).data[idx] = orig - S::of_f64(h);
            let minus = eval(store, 0)?;
            store.get_mut(name).data[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[idx];
            let denom = (a.abs() + numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            param_err = param_err.max(rel);
            idx += stride;
        }
        max_rel_err = max_rel_err.max(param_err);
        per_param.push((name.clone(), param_err));
    }
    store.clear_grads();
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        tolerance: opts.tolerance,
        pass: max_rel_err < opts.tolerance,
    })
}
