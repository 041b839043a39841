use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::NetConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) const PER_LAYER: usize = 10;
pub(crate) const LN1_GAIN: usize = 0;
pub(crate) const LN1_BIAS: usize = 1;
pub(crate) const U_QKV: usize = 2;
pub(crate) const W_O: usize = 3;
pub(crate) const LN2_GAIN: usize = 4;
pub(crate) const LN2_BIAS: usize = 5;
pub(crate) const MLP_W1: usize = 6;
pub(crate) const MLP_B1: usize = 7;
pub(crate) const MLP_W2: usize = 8;
pub(crate) const MLP_B2: usize = 9;

/// Position of every named array inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    n_layers: usize,
    learned_pos: bool,
}

impl Layout {
    pub fn new(config: &NetConfig) -> Self {
        Layout {
            n_layers: config.n_layers,
            learned_pos: config.learned_pos,
        }
    }

    pub const EMBEDDING: usize = 0;
    pub const POLICY_TOKEN: usize = 1;

    pub fn layer(&self, l: usize, which: usize) -> usize {
        2 + l * PER_LAYER + which
    }

    pub fn final_gain(&self) -> usize {
        2 + self.n_layers * PER_LAYER
    }

    pub fn final_bias(&self) -> usize {
        self.final_gain() + 1
    }

    pub fn head_weight(&self) -> usize {
        self.final_gain() + 2
    }

    pub fn head_bias(&self) -> usize {
        self.final_gain() + 3
    }

    pub fn pos_table(&self) -> Option<usize> {
        self.learned_pos.then_some(self.final_gain() + 4)
    }

    pub fn len(&self) -> usize {
        self.final_gain() + 4 + self.learned_pos as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Names and shapes of all arrays, in storage order.
pub fn parameter_shapes(config: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let inner = config.n_heads * config.d_head;
    let hidden = config.mlp_hidden();
    let mut out = vec![
        (String::from("embedding"), vec![config.token_len, d]),
        (String::from("policy_token"), vec![1, d]),
    ];
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![1, d]),
            (p("ln1.bias"), vec![1, d]),
            (p("attn.u_qkv"), vec![d, 3 * inner]),
            (p("attn.w_o"), vec![inner, d]),
            (p("ln2.gain"), vec![1, d]),
            (p("ln2.bias"), vec![1, d]),
            (p("mlp.w1"), vec![d, hidden]),
            (p("mlp.b1"), vec![1, hidden]),
            (p("mlp.w2"), vec![hidden, d]),
            (p("mlp.b2"), vec![1, d]),
        ]);
    }
    out.extend([
        (String::from("final_ln.gain"), vec![1, d]),
        (String::from("final_ln.bias"), vec![1, d]),
        (String::from("head.weight"), vec![d, config.n_outputs()]),
        (String::from("head.bias"), vec![1, config.n_outputs()]),
    ]);
    if config.learned_pos {
        out.push((String::from("pos_table"), vec![config.n_pos, d]));
    }
    out
}

/// Closed-form parameter count of a configuration.
pub fn parameter_count(config: &NetConfig) -> usize {
    let d = config.d_model;
    let inner = config.n_heads * config.d_head;
    let hidden = config.mlp_hidden();
    let per_layer = 4 * d + d * 3 * inner + inner * d + d * hidden + hidden + hidden * d + d;
    config.token_len * d
        + d
        + config.n_layers * per_layer
        + 2 * d
        + d * config.n_outputs()
        + config.n_outputs()
        + if config.learned_pos { config.n_pos * d } else { 0 }
}

/// All learnable arrays of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub config: NetConfig,
    pub tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn names(&self) -> Vec<String> {
        parameter_shapes(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    /// Rebuilds a set from named arrays, checking every name and shape.
    pub fn from_named(config: NetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = parameter_shapes(&config);
        if named.len() != expected.len() {
            return Err(Error::Parameter(format!(
                "expected {} arrays, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape), (got_name, t)) in expected.into_iter().zip(named) {
            if name != got_name || t.shape() != shape.as_slice() {
                return Err(Error::Parameter(format!(
                    "array {got_name} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(ParameterSet { config, tensors })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

fn glorot<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let (fan_in, fan_out) = (shape[0], shape[1]);
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Glorot-uniform weights, zero biases, unit norm gains, small normal
/// policy token (and learned position table).
pub fn init_parameters<R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Result<ParameterSet> {
    config.validate()?;
    let tensors = parameter_shapes(config)
        .into_iter()
        .map(|(name, shape)| {
            if name == "policy_token" || name == "pos_table" {
                normal(&shape, 0.02, rng)
            } else if name.ends_with(".gain") {
                Tensor::ones(&shape)
            } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else {
                glorot(&shape, rng)
            }
        })
        .collect();
    Ok(ParameterSet {
        config: config.clone(),
        tensors,
    })
}
