//! Small dense networks with hand-written backpropagation.
//!
//! Layer weights are stored `in × out`, so a layer maps a row batch `H` to
//! `H W + 1 bᵀ`. Hidden layers use tanh; a hidden-to-hidden layer whose input
//! and output widths agree becomes a residual block `h + tanh(h W + b)` when
//! the spec asks for it. The input and output layers never skip.

mod adam;
mod gradcheck;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use train::{minibatches, EarlyStopping, TrainConfig};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// No nonlinearity; used for linear ablations.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub residual: bool,
    pub activation: Activation,
    pub weight_decay: f64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            residual: true,
            activation: Activation::Tanh,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return invalid("network widths must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return invalid("weight decay must be non-negative");
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    /// Whether layer `l` (0-based over all layers) is a residual block.
    fn is_residual(&self, l: usize) -> bool {
        let w = self.widths();
        self.residual && l >= 1 && l < self.hidden.len() && w[l] == w[l + 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: DMatrix::zeros(n_in, n_out),
            b: DVector::zeros(n_out),
        }
    }
}

/// Anything Adam and the gradient checker can treat as a flat list of reals.
pub trait Parameters: Clone {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn get(&self, mut k: usize) -> f64 {
        for s in self.slices() {
            if k < s.len() {
                return s[k];
            }
            k -= s.len();
        }
        panic!("parameter index out of range");
    }

    fn set(&mut self, mut k: usize, v: f64) {
        for s in self.slices_mut() {
            if k < s.len() {
                s[k] = v;
                return;
            }
            k -= s.len();
        }
        panic!("parameter index out of range");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl Parameters for MlpParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }
}

impl<A: Parameters, B: Parameters> Parameters for (A, B) {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.0.slices();
        v.extend(self.1.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.0.slices_mut();
        v.extend(self.1.slices_mut());
        v
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn slices(&self) -> Vec<&[f64]> {
        self.iter().flat_map(|p| p.slices()).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().flat_map(|p| p.slices_mut()).collect()
    }
}

/// Intermediate values from `forward` needed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to every layer.
    inputs: Vec<DMatrix<f64>>,
    /// Activation output of every hidden layer.
    acts: Vec<DMatrix<f64>>,
}

/// A network: its spec plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    /// LeCun-normal weights (variance 1/fan_in), zero biases.
    pub fn init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let w = spec.widths();
        let layers = w
            .windows(2)
            .map(|p| {
                let sd = (1.0 / p[0] as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(p[0], p[1], |_, _| sd * rng.sample::<f64, _>(StandardNormal)),
                    b: DVector::zeros(p[1]),
                }
            })
            .collect();
        Ok(Self {
            spec,
            params: MlpParams { layers },
        })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.widths().windows(2).map(|p| Layer::zeros(p[0], p[1])).collect();
        Ok(Self {
            spec,
            params: MlpParams { layers },
        })
    }

    pub fn check_params(&self, params: &MlpParams) -> Result<()> {
        let w = self.spec.widths();
        if params.layers.len() != w.len() - 1 {
            return invalid("parameter layer count does not match the spec");
        }
        for (l, layer) in params.layers.iter().enumerate() {
            if layer.w.shape() != (w[l], w[l + 1]) || layer.b.len() != w[l + 1] {
                return invalid(format!("layer {l} has the wrong shape"));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        forward(&self.spec, &self.params, x)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(x)?.0)
    }
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
}

/// Outputs (`n × output_dim`) and the cache for `backward`.
pub fn forward(spec: &MlpSpec, params: &MlpParams, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
    if x.ncols() != spec.input_dim {
        return invalid(format!("network expects {} inputs, got {}", spec.input_dim, x.ncols()));
    }
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut acts = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut h = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut a = &h * &layer.w;
        add_bias(&mut a, &layer.b);
        if l + 1 == n_layers {
            inputs.push(h);
            return Ok((a, ForwardCache { inputs, acts }));
        }
        if spec.activation == Activation::Tanh {
            a.apply(|v| *v = v.tanh());
        }
        let next = if spec.is_residual(l) { &h + &a } else { a.clone() };
        inputs.push(h);
        acts.push(a);
        h = next;
    }
    unreachable!("a network always has an output layer")
}

/// Parameter gradients and the gradient with respect to the inputs.
pub fn backward(
    spec: &MlpSpec,
    params: &MlpParams,
    cache: &ForwardCache,
    upstream: &DMatrix<f64>,
) -> Result<(MlpParams, DMatrix<f64>)> {
    let n_layers = params.layers.len();
    let last = &params.layers[n_layers - 1];
    let n = cache.inputs[0].nrows();
    if upstream.shape() != (n, last.w.ncols()) {
        return invalid("upstream gradient shape does not match the network output");
    }
    let mut grads: Vec<Layer> = Vec::with_capacity(n_layers);
    let mut delta = upstream.clone();
    for l in (0..n_layers).rev() {
        let layer = &params.layers[l];
        let hidden = l + 1 < n_layers;
        let mut da = delta.clone();
        if hidden && spec.activation == Activation::Tanh {
            da.zip_apply(&cache.acts[l], |g, t| *g *= 1.0 - t * t);
        }
        let gw = cache.inputs[l].transpose() * &da;
        let gb = DVector::from_iterator(da.ncols(), da.column_iter().map(|c| c.sum()));
        let mut d_in = &da * layer.w.transpose();
        if hidden && spec.is_residual(l) {
            d_in += &delta;
        }
        grads.push(Layer { w: gw, b: gb });
        delta = d_in;
    }
    grads.reverse();
    Ok((MlpParams { layers: grads }, delta))
}
