//! Parameterized building blocks. Each layer owns [`ParamId`]s into a
//! shared [`ParamStore`] and records its forward pass on a [`Graph`].

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.param(&format!("{name}.weight"), init.kaiming(&[cout, cin, k, k], fan_in, 2f32.sqrt()));
        let bias = bias.then(|| store.param(&format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, stride, pad }
    }

    /// `k×k` convolution with "same" padding and stride 1.
    pub fn same(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(store, init, name, cin, cout, k, 1, k / 2, true)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let weight = store.param(&format!("{name}.weight"), init.kaiming(&[dout, din], din, 1.0));
        let bias = bias.then(|| store.param(&format!("{name}.bias"), Tensor::zeros(&[dout])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.param(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.param(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            (self.running_mean, store.get(self.running_mean)),
            (self.running_var, store.get(self.running_var)),
        )
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.param(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.param(&format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}
