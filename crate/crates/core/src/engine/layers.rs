//! Parameterized building blocks shared by the models. Each layer knows its
//! parameter names and how to register initial values; the weights
//! themselves always live in a [`Params`] table.

use rand::Rng;

use super::params::{Init, Params};
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self { name: name.into(), inputs, outputs }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn register<R: Rng>(&self, params: &mut Params<f32>, init: &mut Init<R>) -> Result<()> {
        params.insert(self.weight_name(), init.linear(self.inputs, self.outputs), true)?;
        params.insert(self.bias_name(), Tensor::zeros(1, self.outputs), true)
    }

    /// Registers all-zero weights and bias.
    pub fn register_zero(&self, params: &mut Params<f32>) -> Result<()> {
        params.insert(self.weight_name(), Tensor::zeros(self.inputs, self.outputs), true)?;
        params.insert(self.bias_name(), Tensor::zeros(1, self.outputs), true)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, &self.weight_name())?;
        let b = tape.param(params, &self.bias_name())?;
        Ok(tape.linear(x, w, b))
    }
}

/// Length-preserving 1D convolution over the rows of a `T×C` matrix.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize, kernel: usize, dilation: usize) -> Self {
        Self { name: name.into(), inputs, outputs, kernel, dilation }
    }

    fn as_linear(&self) -> Linear {
        Linear::new(self.name.clone(), self.kernel * self.inputs, self.outputs)
    }

    pub fn register<R: Rng>(&self, params: &mut Params<f32>, init: &mut Init<R>) -> Result<()> {
        self.as_linear().register(params, init)
    }

    pub fn register_zero(&self, params: &mut Params<f32>) -> Result<()> {
        self.as_linear().register_zero(params)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Result<Var> {
        let cols = if self.kernel == 1 {
            x
        } else {
            tape.im2col_1d(x, self.kernel, self.dilation)
        };
        self.as_linear().forward(tape, params, cols)
    }
}

/// Batch normalization over rows with learned affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub features: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, features: usize) -> Self {
        Self { name: name.into(), features, eps: 1e-5, momentum: 0.1 }
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }

    pub fn mean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    pub fn var_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn register(&self, params: &mut Params<f32>) -> Result<()> {
        let n = self.features;
        params.insert(self.gamma_name(), Tensor::filled(1, n, 1.0), true)?;
        params.insert(self.beta_name(), Tensor::zeros(1, n), true)?;
        params.insert(self.mean_name(), Tensor::zeros(1, n), false)?;
        params.insert(self.var_name(), Tensor::filled(1, n, 1.0), false)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var, mode: Mode) -> Result<Var> {
        let eps = T::from_f64_lossy(self.eps);
        let normalized = match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_cols(x, eps);
                let m = tape.shape(x).0;
                let mom = T::from_f64_lossy(self.momentum);
                let rm = params.get(&self.mean_name())?;
                let rv = params.get(&self.var_name())?;
                let unbias = if m > 1 {
                    T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap()
                } else {
                    T::one()
                };
                let new_mean = Tensor::row(
                    rm.data().iter().zip(&mean).map(|(&r, &b)| (T::one() - mom) * r + mom * b).collect(),
                );
                let new_var = Tensor::row(
                    rv.data()
                        .iter()
                        .zip(&var)
                        .map(|(&r, &b)| (T::one() - mom) * r + mom * b * unbias)
                        .collect(),
                );
                tape.push_buffer_update(self.mean_name(), new_mean);
                tape.push_buffer_update(self.var_name(), new_var);
                y
            }
            Mode::Eval => {
                let rm = params.get(&self.mean_name())?;
                let rv = params.get(&self.var_name())?;
                let shift = tape.constant(rm.map(|v| -v));
                let inv = tape.constant(rv.map(|v| T::one() / (v + eps).sqrt()));
                let centered = tape.add_row(x, shift);
                tape.mul_row(centered, inv)
            }
        };
        let g = tape.param(params, &self.gamma_name())?;
        let b = tape.param(params, &self.beta_name())?;
        let scaled = tape.mul_row(normalized, g);
        Ok(tape.add_row(scaled, b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub features: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, features: usize) -> Self {
        Self { name: name.into(), features, eps: 1e-5 }
    }

    pub fn register(&self, params: &mut Params<f32>) -> Result<()> {
        params.insert(format!("{}.gamma", self.name), Tensor::filled(1, self.features, 1.0), true)?;
        params.insert(format!("{}.beta", self.name), Tensor::zeros(1, self.features), true)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Result<Var> {
        let y = tape.layer_norm_rows(x, T::from_f64_lossy(self.eps));
        let g = tape.param(params, &format!("{}.gamma", self.name))?;
        let b = tape.param(params, &format!("{}.beta", self.name))?;
        let scaled = tape.mul_row(y, g);
        Ok(tape.add_row(scaled, b))
    }
}

/// Casts buffer updates recorded on a tape to the store precision.
pub fn buffer_updates_f32<T: Scalar>(tape: &mut Tape<T>) -> Vec<(String, Tensor<f32>)> {
    tape.take_buffer_updates().into_iter().map(|(k, v)| (k, v.cast())).collect()
}

/// Fails with the stage name when a node holds NaN or infinity.
pub fn ensure_finite<T: Scalar>(tape: &Tape<T>, v: Var, stage: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(crate::error::Error::NonFinite(stage.to_string()))
    }
}
