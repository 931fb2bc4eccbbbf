//! Parameter storage and the handful of layers the backbone is assembled from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Owns every trainable tensor of a model, in construction order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Binds store parameters to tape leaves for one forward pass. Each parameter
/// is registered at most once so repeated use accumulates into one gradient.
pub struct Binding<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Binding<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Binding { store, vars: vec![None; store.len()], trainable }
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(self.store.get(id).value.clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Use `var` in place of the stored value of `id` (for gradient checks
    /// with respect to a parameter).
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    /// Gradients for every bound parameter, aligned with the store order.
    /// Unused parameters get zero gradients.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.store
            .iter()
            .zip(&self.vars)
            .map(|(p, v)| {
                v.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

/// Kaiming-uniform initialisation over `fan_in`: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "{name}: channels {in_channels}->{out_channels} not divisible by {groups} groups"
            )));
        }
        let per_group = in_channels / groups;
        let fan_in = per_group * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[out_channels, per_group, kernel, kernel], fan_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Ok(Conv2d { weight, bias, groups, stride, padding })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
        let w = bind.var(tape, self.weight);
        let b = self.bias.map(|b| bind.var(tape, b));
        tape.conv2d(x, w, b, self.groups, self.stride, self.padding)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// In train mode the batch statistics are appended to `stats`; apply them
    /// with [`BatchNorm2d::commit`] once the step is accepted.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: Var,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let g = bind.var(tape, self.gamma);
        let b = bind.var(tape, self.beta);
        match mode {
            Mode::Eval => tape.batch_norm_eval(x, g, b, &self.running_mean, &self.running_var, BN_EPS),
            Mode::Train => {
                let shape = tape.value(x).shape().to_vec();
                let count = shape[0] * shape[2] * shape[3];
                let (y, mean, var) = tape.batch_norm_train(x, g, b, BN_EPS)?;
                stats.push(BatchStats { mean, var, count });
                Ok(y)
            }
        }
    }

    pub fn commit(&mut self, stats: &BatchStats) {
        let unbias = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        for c in 0..stats.mean.len() {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * stats.mean[c];
            self.running_var[c] =
                (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * stats.var[c] * unbias;
        }
    }
}

/// Per-channel batch mean and biased variance from one training forward.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                kaiming_uniform(&[out_features, in_features], in_features, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
        let w = bind.var(tape, self.weight);
        let b = bind.var(tape, self.bias);
        tape.linear(x, w, Some(b))
    }
}
