//! Glue between a recorded forward pass and an optimizer step.

use indexmap::IndexMap;
use serde::Serialize;

use super::layers::buffer_updates_f32;
use super::optim::{adam_step, OptimizerState, ParameterStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Loss value and named terms at one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub terms: IndexMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
}

impl LossCurve {
    pub fn push(&mut self, step: u64, total: f64, terms: IndexMap<String, f64>) {
        self.records.push(LossRecord { step, total, terms });
    }

    pub fn last(&self) -> Option<&LossRecord> {
        self.records.last()
    }

    /// Value of `term` (or `"total"`) at `step`, if recorded.
    pub fn at(&self, step: u64, term: &str) -> Option<f64> {
        let r = self.records.iter().find(|r| r.step == step)?;
        if term == "total" {
            Some(r.total)
        } else {
            r.terms.get(term).copied()
        }
    }

    /// `step,total,<terms...>` with one row per record.
    pub fn to_csv(&self) -> String {
        let names: Vec<&String> = self.records.first().map(|r| r.terms.keys().collect()).unwrap_or_default();
        let mut out = String::from("step,total");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{}", r.step, r.total));
            for n in &names {
                out.push_str(&format!(",{}", r.terms.get(*n).copied().unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }
}

/// Backpropagates `root`, folds pending buffer updates into the store and
/// applies one Adam step. Trainable parameters the forward pass never touched
/// receive zero gradients. A non-finite loss or gradient aborts with
/// [`Error::Diverged`] before anything is modified.
pub fn apply_gradients(store: &mut ParameterStore, opt: &mut OptimizerState, tape: &mut Tape<f32>, root: Var) -> Result<()> {
    let loss = tape.value(root).item();
    let step = store.step();
    if !loss.is_finite() {
        return Err(Error::Diverged { step, detail: format!("loss is {loss}") });
    }
    let mut grads = tape.backward(root).params();
    for (name, g) in &grads {
        if !g.all_finite() {
            return Err(Error::Diverged { step, detail: format!("gradient of {name} is not finite") });
        }
    }
    let names: Vec<String> = store.params.trainable_names().cloned().collect();
    for n in names {
        if !grads.contains_key(&n) {
            let (r, c) = store.params.get(&n)?.shape();
            grads.insert(n, Tensor::zeros(r, c));
        }
    }
    let updates = buffer_updates_f32(tape);
    store.clear_grads();
    store.accumulate_grads(grads)?;
    store.apply_buffer_updates(updates)?;
    adam_step(store, opt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{AdamConfig, Params};

    #[test]
    fn nan_loss_aborts_without_touching_parameters() {
        let mut p = Params::new();
        p.insert("w", Tensor::row(vec![1.0f32]), true).unwrap();
        let mut store = ParameterStore::new(p);
        let mut opt = OptimizerState::new(AdamConfig::default()).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store.params, "w").unwrap();
        let bad = tape.scale(w, f32::NAN);
        let root = tape.sum(bad);
        let err = apply_gradients(&mut store, &mut opt, &mut tape, root).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }));
        assert_eq!(store.params.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut p = Params::new();
        p.insert("a", Tensor::row(vec![1.0f32]), true).unwrap();
        p.insert("b", Tensor::row(vec![2.0f32]), true).unwrap();
        let mut store = ParameterStore::new(p);
        let mut opt = OptimizerState::new(AdamConfig::default()).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store.params, "a").unwrap();
        let root = tape.sum(a);
        apply_gradients(&mut store, &mut opt, &mut tape, root).unwrap();
        assert_eq!(store.params.get("b").unwrap().data(), &[2.0]);
        assert!(store.params.get("a").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn curve_csv_has_header_and_rows() {
        let mut c = LossCurve::default();
        let mut t = IndexMap::new();
        t.insert("recon".to_string(), 0.5);
        c.push(0, 1.0, t.clone());
        c.push(1, 0.75, t);
        let csv = c.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "step,total,recon");
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(c.at(1, "total"), Some(0.75));
    }
}
