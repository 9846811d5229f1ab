//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::Params;
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Base finite-difference step; the actual step is `step · max(1, |p|)`.
    pub step: f64,
    /// Minimum number of coordinates compared.
    pub min_coords: usize,
    /// Denominator floor for the relative error of near-zero gradients.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, min_coords: 100, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic parameter gradients of `forward` (which must return a
/// scalar loss) against central differences on a random coordinate subset.
pub fn grad_check<T, F>(forward: F, params: &Params<T>, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &Params<T>) -> Result<Var>,
{
    let eval = |p: &Params<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = forward(&mut tape, p)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut tape = Tape::new();
    let root = forward(&mut tape, params)?;
    let base = tape.value(root).item().as_f64();
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "forward evaluated to {base} and then {again}"
        )));
    }
    let grads = tape.backward(root).params();

    let names: Vec<String> = params.trainable_names().cloned().collect();
    if names.is_empty() {
        return Err(Error::Invalid("grad_check: no trainable parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let picks_by_tensor = pick_coordinates(params, &names, config.min_coords, &mut rng)?;

    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = params.clone();
    for (name, picks) in names.iter().zip(picks_by_tensor) {
        let analytic = grads.get(name).cloned().unwrap_or_else(|| {
            let (r, c) = params.get(name).unwrap().shape();
            Tensor::zeros(r, c)
        });
        for idx in picks {
            let orig = params.get(name)?.data()[idx];
            let h = config.step * orig.as_f64().abs().max(1.0);
            work.get_mut(name)?.data_mut()[idx] = T::from_f64_lossy(orig.as_f64() + h);
            let fp = eval(&work)?;
            work.get_mut(name)?.data_mut()[idx] = T::from_f64_lossy(orig.as_f64() - h);
            let fm = eval(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[idx].as_f64();
            let e = rel_error(a, numeric, config.floor);
            report.coords_checked += 1;
            if e > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = e;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// At least two coordinates per tensor (all of them for tiny tensors), then
/// uniformly random extra coordinates until `min_total` are chosen or every
/// coordinate is taken.
fn pick_coordinates<T: Scalar, R: Rng>(
    params: &Params<T>,
    names: &[String],
    min_total: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let lens: Vec<usize> = names.iter().map(|n| params.get(n).map(|t| t.len())).collect::<Result<_>>()?;
    let mut chosen: Vec<std::collections::BTreeSet<usize>> = lens
        .iter()
        .map(|&len| {
            if len <= 2 {
                (0..len).collect()
            } else {
                sample(rng, len, 2).into_iter().collect()
            }
        })
        .collect();
    let total: usize = lens.iter().sum();
    let target = min_total.min(total);
    let mut count: usize = chosen.iter().map(|c| c.len()).sum();
    while count < target {
        let mut flat = rng.random_range(0..total);
        let mut k = 0;
        while flat >= lens[k] {
            flat -= lens[k];
            k += 1;
        }
        if chosen[k].insert(flat) {
            count += 1;
        }
    }
    Ok(chosen.into_iter().map(|c| c.into_iter().collect()).collect())
}

/// Checks gradients with respect to plain input tensors, every coordinate.
/// Used for operation-level tests; returns the max relative error.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: &F, floor: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let run = |xs: &[Tensor<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = run(inputs);
    let grads = tape.backward(out);
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v);
        for idx in 0..inputs[k].len() {
            let orig = inputs[k].data()[idx];
            let h = 1e-5 * orig.abs().max(1.0);
            work[k].data_mut()[idx] = orig + h;
            let (tp, _, o) = run(&work);
            let fp = tp.value(o).item();
            work[k].data_mut()[idx] = orig - h;
            let (tm, _, o) = run(&work);
            let fm = tm.value(o).item();
            work[k].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_error(g.data()[idx], numeric, floor.max(1e-7)));
        }
    }
    worst
}
