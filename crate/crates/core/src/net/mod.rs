//! Feed-forward ReLU networks with exact reverse-mode gradients.
//!
//! Each layer computes `h = aug(a) · Wᵀ` where `aug` appends a constant-1
//! column, so `W` is `h_out × (h_in + 1)` and its last column is the bias.

pub mod loss;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, stream};

pub use loss::Loss;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    // relu'(0) = 0
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Intermediates of one forward pass. `post[l] = act(pre[l])` exactly; the
/// last entry of `pre` holds the logits.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    fingerprint: u64,
    pub input: Matrix,
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
}

impl ForwardTape {
    pub fn logits(&self) -> &Matrix {
        self.post.last().expect("tape has at least one layer")
    }

    /// Input to layer `l` (0-based) without the bias column.
    pub fn layer_input(&self, l: usize) -> &Matrix {
        if l == 0 {
            &self.input
        } else {
            &self.post[l - 1]
        }
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

/// Per-layer weight gradients, shaped like the network's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net.layers.iter().map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols())).collect(),
        }
    }

    pub fn axpy(&mut self, s: f64, other: &Gradients) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(s, b);
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.layers.iter_mut().for_each(|m| m.scale_in_place(s));
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().map(Matrix::max_abs).fold(0.0, f64::max)
    }
}

/// Upstream gradients injected into a backward pass.
///
/// `activations` entries `(l, g)` add `g = ∂L/∂(input of layer l)` (bias
/// column excluded); `l = 0` seeds the raw input.
#[derive(Debug, Default, Clone)]
pub struct Seeds<'a> {
    pub logits: Option<&'a Matrix>,
    pub activations: Vec<(usize, &'a Matrix)>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<Vec<f64>>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidShape("network needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weight.cols() < 2 {
                return Err(Error::InvalidShape(format!("layer {l} has no input columns")));
            }
            if !layer.weight.is_finite() {
                return Err(Error::Invalid(format!("layer {l} has non-finite weights")));
            }
            if l > 0 && layers[l - 1].out_dim() != layer.in_dim() {
                return Err(Error::InvalidShape(format!(
                    "layer {l} expects {} inputs but layer {} emits {}",
                    layer.in_dim(),
                    l - 1,
                    layers[l - 1].out_dim()
                )));
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::Invalid("final layer must use the identity activation".into()));
        }
        Ok(Network { layers })
    }

    /// He-initialized ReLU network with the given widths
    /// `[input, hidden..., output]`; biases start at zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidShape(format!("bad layer widths {dims:?}")));
        }
        let mut r = rng::rng_for(seed, stream::INIT, 0);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (h_in, h_out) = (dims[l], dims[l + 1]);
                let normal = Normal::new(0.0, (2.0 / h_in as f64).sqrt()).unwrap();
                let weight = Matrix::from_fn(h_out, h_in + 1, |_, j| {
                    if j == h_in {
                        0.0
                    } else {
                        normal.sample(&mut r)
                    }
                });
                let activation = if l + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer { weight, activation }
            })
            .collect();
        Network::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// `[input, h_1, ..., output]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len()).sum()
    }

    pub fn weight(&self, l: usize) -> &Matrix {
        &self.layers[l].weight
    }

    /// Mutable weight access. Shapes must be preserved; tapes recorded before
    /// a mutation become stale.
    pub fn weight_mut(&mut self, l: usize) -> &mut Matrix {
        &mut self.layers[l].weight
    }

    /// Hash of the exact weight bits, used to detect stale tapes.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in &self.layers {
            for v in layer.weight.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
                h ^= h >> 29;
            }
        }
        h
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTape> {
        if batch.cols() != self.input_dim() {
            return Err(Error::InvalidShape(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut aug = batch.with_constant_column(1.0);
        for layer in &self.layers {
            let h = aug.matmul_nt(&layer.weight);
            let a = h.map(|v| layer.activation.apply(v));
            aug = a.with_constant_column(1.0);
            pre.push(h);
            post.push(a);
        }
        if let Some(index) = post.last().unwrap().data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(ForwardTape {
            fingerprint: self.fingerprint(),
            input: batch.clone(),
            pre,
            post,
        })
    }

    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        let mut tape = self.forward(batch)?;
        Ok(tape.post.pop().unwrap())
    }

    fn check_tape(&self, tape: &ForwardTape) -> Result<()> {
        if tape.pre.len() != self.layers.len() || tape.fingerprint != self.fingerprint() {
            return Err(Error::StaleTape);
        }
        Ok(())
    }

    /// Reverse pass for arbitrary upstream seeds. Returns weight gradients and
    /// the gradient w.r.t. the batch.
    pub fn backprop(&self, tape: &ForwardTape, seeds: &Seeds) -> Result<(Gradients, Matrix)> {
        self.check_tape(tape)?;
        let b = tape.batch_size();
        let n = self.layers.len();
        for &(l, g) in &seeds.activations {
            if l >= n || g.shape() != (b, self.layers[l].in_dim()) {
                return Err(Error::InvalidShape(format!("activation seed for layer {l} has shape {:?}", g.shape())));
            }
        }
        // upstream gradient w.r.t. post[n-1] = logits
        let mut upstream = match seeds.logits {
            Some(g) if g.shape() != (b, self.output_dim()) => {
                return Err(Error::InvalidShape(format!("logit seed has shape {:?}", g.shape())));
            }
            Some(g) => g.clone(),
            None => Matrix::zeros(b, self.output_dim()),
        };
        let mut grads = Vec::with_capacity(n);
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let pre = &tape.pre[l];
            let mut delta = upstream;
            for (d, &h) in delta.data_mut().iter_mut().zip(pre.data()) {
                *d *= layer.activation.derivative(h);
            }
            let aug = tape.layer_input(l).with_constant_column(1.0);
            grads.push(delta.matmul_tn(&aug));
            let full = delta.matmul(&layer.weight);
            let mut down = full.columns(0, layer.in_dim());
            for &(sl, g) in &seeds.activations {
                if sl == l {
                    down.axpy(1.0, g);
                }
            }
            upstream = down;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, upstream))
    }

    /// Gradients of `loss` evaluated on the tape's logits.
    pub fn backward(&self, tape: &ForwardTape, loss: &Loss, labels: &[usize]) -> Result<Gradients> {
        self.check_tape(tape)?;
        let (_, dlogits) = loss.value_and_grad(tape.logits(), labels)?;
        let seeds = Seeds {
            logits: Some(&dlogits),
            ..Seeds::default()
        };
        Ok(self.backprop(tape, &seeds)?.0)
    }

    /// Loss value and its gradient w.r.t. the batch entries.
    pub fn input_gradient(&self, batch: &Matrix, loss: &Loss, labels: &[usize]) -> Result<(f64, Matrix)> {
        let tape = self.forward(batch)?;
        let (value, dlogits) = loss.value_and_grad(tape.logits(), labels)?;
        let seeds = Seeds {
            logits: Some(&dlogits),
            ..Seeds::default()
        };
        Ok((value, self.backprop(&tape, &seeds)?.1))
    }

    pub fn to_checkpoint_json(&self) -> String {
        let ck = Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            layer_dims: self.layer_dims(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            weights: self.layers.iter().map(|l| l.weight.data().to_vec()).collect(),
        };
        let mut s = serde_json::to_string_pretty(&ck).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Parse(format!("unsupported checkpoint schema {}", ck.schema_version)));
        }
        let n = ck.layer_dims.len().saturating_sub(1);
        if n == 0 || ck.activations.len() != n || ck.weights.len() != n {
            return Err(Error::Parse("checkpoint layer counts disagree".into()));
        }
        let layers = (0..n)
            .map(|l| {
                let (h_in, h_out) = (ck.layer_dims[l], ck.layer_dims[l + 1]);
                Ok(Layer {
                    weight: Matrix::new(h_out, h_in + 1, ck.weights[l].clone())?,
                    activation: ck.activations[l],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Network::from_checkpoint_json(&text)
    }
}
