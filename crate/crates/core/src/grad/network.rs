use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::flow::{MixtureFlowParams, MIN_SCALE};
use crate::special::{softmax_into, softplus};
use crate::Rng;

/// Lower bound added to the softplus that produces `g_max`.
pub const MIN_G_MAX: f64 = 0.1;

/// Parameter tensor names in storage order.
pub const TENSOR_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

/// Layer sizes of the parameter network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetworkDims {
    pub n_states: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub n_actions: usize,
    pub n_components: usize,
}

impl NetworkDims {
    /// Outputs per action: logits, means and scale pre-activations for each
    /// component, plus one `g_max` pre-activation.
    pub fn head_width(&self) -> usize {
        3 * self.n_components + 1
    }

    pub fn n_outputs(&self) -> usize {
        self.n_actions * self.head_width()
    }

    /// `(rows, cols)` of each tensor; biases are `(rows, 1)`.
    pub fn shapes(&self) -> [(usize, usize); 6] {
        [
            (self.hidden1, self.n_states),
            (self.hidden1, 1),
            (self.hidden2, self.hidden1),
            (self.hidden2, 1),
            (self.n_outputs(), self.hidden2),
            (self.n_outputs(), 1),
        ]
    }

    pub fn n_parameters(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("n_states", self.n_states),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("n_actions", self.n_actions),
            ("n_components", self.n_components),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config {
                    field: name,
                    reason: "must be at least 1".into(),
                });
            }
        }
        Ok(())
    }
}

/// One tensor per entry of [`TENSOR_NAMES`], row-major.
fn zero_tensors(dims: &NetworkDims) -> Vec<Vec<f64>> {
    dims.shapes().iter().map(|(r, c)| vec![0.0; r * c]).collect()
}

/// Fully connected `one-hot state -> ReLU -> ReLU -> per-action heads`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    dims: NetworkDims,
    tensors: Vec<Vec<f64>>,
}

/// Gradient of a scalar with respect to every entry of a [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    dims: NetworkDims,
    tensors: Vec<Vec<f64>>,
}

/// Hidden activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub(crate) out: Vec<f64>,
}

impl NetworkParams {
    /// He-uniform hidden layers with zero biases. Head weights are zero and
    /// head biases spread the component means evenly over `[-1, 1]`, so
    /// every state starts from the same valid mixture.
    pub fn init(dims: NetworkDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let mut tensors = zero_tensors(&dims);
        for (t, fan_in) in [(0, dims.n_states), (2, dims.hidden1)] {
            let bound = libm::sqrt(6.0 / fan_in as f64);
            for w in tensors[t].iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        let n = dims.n_components;
        let width = dims.head_width();
        for a in 0..dims.n_actions {
            for i in 0..n {
                let mean = if n == 1 {
                    0.0
                } else {
                    -1.0 + 2.0 * i as f64 / (n - 1) as f64
                };
                tensors[5][a * width + n + i] = mean;
            }
        }
        Ok(Self { dims, tensors })
    }

    /// Rebuild from named tensors, e.g. a checkpoint.
    pub fn from_tensors(dims: NetworkDims, tensors: Vec<Vec<f64>>) -> Result<Self> {
        dims.validate()?;
        check_shapes(&dims, &tensors)?;
        if tensors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("network parameters must be finite".into()));
        }
        Ok(Self { dims, tensors })
    }

    pub fn dims(&self) -> &NetworkDims {
        &self.dims
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }

    /// Flat view of every parameter in storage order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    /// Overwrite every parameter from a flat vector in storage order.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.dims.n_parameters() {
            return Err(Error::Dimension {
                expected: self.dims.n_parameters(),
                got: values.len(),
            });
        }
        let mut rest = values;
        for t in self.tensors.iter_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn one_hot(&self, state: usize) -> Result<Vec<f64>> {
        if state >= self.dims.n_states {
            return Err(Error::Dimension {
                expected: self.dims.n_states,
                got: state,
            });
        }
        let mut x = vec![0.0; self.dims.n_states];
        x[state] = 1.0;
        Ok(x)
    }

    pub(crate) fn forward(&self, input: &[f64]) -> Result<ForwardCache> {
        let d = &self.dims;
        if input.len() != d.n_states {
            return Err(Error::Dimension {
                expected: d.n_states,
                got: input.len(),
            });
        }
        let h1 = dense(&self.tensors[0], &self.tensors[1], input, true);
        let h2 = dense(&self.tensors[2], &self.tensors[3], &h1, true);
        let out = dense(&self.tensors[4], &self.tensors[5], &h2, false);
        Ok(ForwardCache {
            input: input.to_vec(),
            h1,
            h2,
            out,
        })
    }

    /// Flow parameters of every action for an input vector.
    pub fn forward_params(&self, input: &[f64]) -> Result<Vec<MixtureFlowParams>> {
        let cache = self.forward(input)?;
        (0..self.dims.n_actions)
            .map(|a| head_to_flow(self.head(&cache.out, a)))
            .collect()
    }

    /// Flow parameters of every action for a state id.
    pub fn flows_for_state(&self, state: usize) -> Result<Vec<MixtureFlowParams>> {
        self.forward_params(&self.one_hot(state)?)
    }

    pub(crate) fn head<'a>(&self, out: &'a [f64], action: usize) -> &'a [f64] {
        let w = self.dims.head_width();
        &out[action * w..(action + 1) * w]
    }

    /// Accumulate into `grads` the gradient of a scalar whose derivative with
    /// respect to the output layer is `d_out`.
    pub(crate) fn backward(&self, cache: &ForwardCache, d_out: &[f64], grads: &mut GradientSet) {
        let d = &self.dims;
        let g = &mut grads.tensors;
        let d_h2 = dense_backward(&self.tensors[4], &cache.h2, d_out, layer_mut(g, 4), d.hidden2);
        let d_a2: Vec<f64> = d_h2
            .iter()
            .zip(&cache.h2)
            .map(|(&dh, &h)| if h > 0.0 { dh } else { 0.0 })
            .collect();
        let d_h1 = dense_backward(&self.tensors[2], &cache.h1, &d_a2, layer_mut(g, 2), d.hidden1);
        let d_a1: Vec<f64> = d_h1
            .iter()
            .zip(&cache.h1)
            .map(|(&dh, &h)| if h > 0.0 { dh } else { 0.0 })
            .collect();
        dense_backward(&self.tensors[0], &cache.input, &d_a1, layer_mut(g, 0), d.n_states);
    }
}

fn check_shapes(dims: &NetworkDims, tensors: &[Vec<f64>]) -> Result<()> {
    if tensors.len() != TENSOR_NAMES.len() {
        return Err(Error::Dimension {
            expected: TENSOR_NAMES.len(),
            got: tensors.len(),
        });
    }
    for (t, (r, c)) in tensors.iter().zip(dims.shapes()) {
        if t.len() != r * c {
            return Err(Error::Dimension {
                expected: r * c,
                got: t.len(),
            });
        }
    }
    Ok(())
}

/// `w x + b`, optionally followed by ReLU; `w` is row-major `(len(b), len(x))`.
fn dense(w: &[f64], b: &[f64], x: &[f64], relu: bool) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            let row = &w[r * cols..(r + 1) * cols];
            let v = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            if relu {
                v.max(0.0)
            } else {
                v
            }
        })
        .collect()
}

/// Backward pass of [`dense`] without activation; returns the input gradient.
fn layer_mut(g: &mut [Vec<f64>], weight: usize) -> (&mut [f64], &mut [f64]) {
    let (w, b) = g[weight..weight + 2].split_at_mut(1);
    (&mut w[0], &mut b[0])
}

fn dense_backward(w: &[f64], x: &[f64], d_y: &[f64], (d_w, d_b): (&mut [f64], &mut [f64]), cols: usize) -> Vec<f64> {
    let mut d_x = vec![0.0; cols];
    for (r, &dy) in d_y.iter().enumerate() {
        if dy == 0.0 {
            continue;
        }
        d_b[r] += dy;
        let row = &w[r * cols..(r + 1) * cols];
        let d_row = &mut d_w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            d_row[c] += dy * x[c];
            d_x[c] += dy * row[c];
        }
    }
    d_x
}

/// Head activations: softmax weights, `softplus + 1e-4` scales, identity
/// means, `softplus + 0.1` range.
pub(crate) fn head_to_flow(head: &[f64]) -> Result<MixtureFlowParams> {
    let n = (head.len() - 1) / 3;
    let mut weights = vec![0.0; n];
    softmax_into(&head[..n], &mut weights);
    let means = head[n..2 * n].to_vec();
    let scales = head[2 * n..3 * n].iter().map(|&s| softplus(s) + MIN_SCALE).collect();
    let g_max = softplus(head[3 * n]) + MIN_G_MAX;
    MixtureFlowParams::new(weights, means, scales, g_max)
        .map_err(|e| Error::InvalidParams(format!("network produced invalid flow: {e}")))
}

impl GradientSet {
    pub fn zeros(dims: NetworkDims) -> Self {
        Self {
            tensors: zero_tensors(&dims),
            dims,
        }
    }

    pub fn dims(&self) -> &NetworkDims {
        &self.dims
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn from_tensors(dims: NetworkDims, tensors: Vec<Vec<f64>>) -> Result<Self> {
        check_shapes(&dims, &tensors)?;
        Ok(Self { dims, tensors })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.tensors.iter().flatten().map(|g| g * g).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= factor);
    }
}
