//! Small dense feed-forward networks with hand-written backpropagation and
//! RMSprop, plus the `RLNN` binary container used to store them.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{RelocError, Result};

const MAGIC: &[u8; 4] = b"RLNN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// `y = f(W·x + b)` with `W` of shape `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

/// Activations recorded by [`DenseNet::forward_cached`]; `outputs[0]` is the input batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    outputs: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.outputs.last().expect("cache holds at least the input")
    }
}

/// Parameter gradients, one `(weights, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        DMatrix::zeros(l.outputs(), l.inputs()),
                        DVector::zeros(l.outputs()),
                    )
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            *w *= factor;
            *b *= factor;
        }
    }

    /// Flattened in the same order as [`DenseNet::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            push_row_major(&mut out, w);
            out.extend(b.iter());
        }
        out
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
}

/// Xavier-uniform `rows × cols` matrix, bound `√(6 / (rows + cols))`.
pub fn init_weights(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    xavier(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let values: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(RelocError::InvalidConfig("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(RelocError::shape(
                    format!("layer {i} bias of length {}", l.outputs()),
                    l.bias.len(),
                ));
            }
            if !l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(RelocError::InvalidConfig(format!("layer {i} has non-finite weights")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(RelocError::shape(
                    format!("layer {} input width {}", i + 1, pair[0].outputs()),
                    pair[1].inputs(),
                ));
            }
        }
        Ok(DenseNet { layers })
    }

    /// Xavier-initialized network with zero biases. `widths` lists every
    /// layer boundary, so `widths.len() == activations.len() + 1`.
    pub fn xavier(widths: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if widths.len() != activations.len() + 1 {
            return Err(RelocError::shape(activations.len() + 1, widths.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| DenseLayer {
                weights: xavier(w[1], w[0], &mut rng),
                bias: DVector::zeros(w[1]),
                activation,
            })
            .collect();
        DenseNet::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// Runs a batch whose rows are samples. Each row is evaluated on its own,
    /// so a sample's output never depends on its position in the batch.
    pub fn forward(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(batch)?.outputs.pop().expect("non-empty"))
    }

    pub fn forward_cached(&self, batch: &DMatrix<f64>) -> Result<ForwardCache> {
        if batch.ncols() != self.input_width() {
            return Err(RelocError::shape(
                format!("{} input columns", self.input_width()),
                batch.ncols(),
            ));
        }
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(batch.clone());
        for layer in &self.layers {
            let input = outputs.last().expect("non-empty");
            let (n, n_in, n_out) = (input.nrows(), layer.inputs(), layer.outputs());
            let mut w = Vec::with_capacity(n_in * n_out);
            push_row_major(&mut w, &layer.weights);
            let mut out = DMatrix::zeros(n, n_out);
            let mut x = vec![0.0; n_in];
            for r in 0..n {
                for (k, v) in x.iter_mut().enumerate() {
                    *v = input[(r, k)];
                }
                for c in 0..n_out {
                    let row = &w[c * n_in..(c + 1) * n_in];
                    let mut z = layer.bias[c];
                    for (a, b) in row.iter().zip(&x) {
                        z += a * b;
                    }
                    out[(r, c)] = layer.activation.apply(z);
                }
            }
            outputs.push(out);
        }
        Ok(ForwardCache { outputs })
    }

    /// Reverse-mode pass. `loss_grad` is `∂L/∂output` with the batch layout
    /// of the forward pass. Returns parameter gradients and `∂L/∂input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        loss_grad: &DMatrix<f64>,
    ) -> Result<(Gradients, DMatrix<f64>)> {
        let out = cache.output();
        if loss_grad.shape() != out.shape() {
            return Err(RelocError::shape(
                format!("{:?}", out.shape()),
                format!("{:?}", loss_grad.shape()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = loss_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let activated = &cache.outputs[i + 1];
            let input = &cache.outputs[i];
            let delta = upstream.zip_map(activated, |g, a| g * layer.activation.derivative_from_output(a));
            let dw = delta.transpose() * input;
            let db = DVector::from_iterator(
                delta.ncols(),
                delta.column_iter().map(|c| c.sum()),
            );
            upstream = &delta * &layer.weights;
            grads.push((dw, db));
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, upstream))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters, per layer: weights row-major then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            push_row_major(&mut out, &l.weights);
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(RelocError::shape(self.param_count(), params.len()));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            let (rows, cols) = l.weights.shape();
            for r in 0..rows {
                for c in 0..cols {
                    l.weights[(r, c)] = it.next().expect("length checked");
                }
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&[l.activation.tag()])?;
            w.write_all(&(l.outputs() as u32).to_le_bytes())?;
            w.write_all(&(l.inputs() as u32).to_le_bytes())?;
            for r in 0..l.outputs() {
                for v in l.weights.row(r).iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            for v in l.bias.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads a network; `InvalidConfig` describes malformed content.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: String| RelocError::InvalidConfig(format!("RLNN container: {m}"));
        let io = |e: std::io::Error| bad(format!("truncated or unreadable ({e})"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r).map_err(io)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(r).map_err(io)? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(io)?;
            let activation =
                Activation::from_tag(tag[0]).ok_or_else(|| bad(format!("unknown activation tag {}", tag[0])))?;
            let rows = read_u32(r).map_err(io)? as usize;
            let cols = read_u32(r).map_err(io)? as usize;
            if rows == 0 || cols == 0 || rows.saturating_mul(cols) > 1 << 26 {
                return Err(bad(format!("implausible layer shape {rows}x{cols}")));
            }
            let mut weights = DMatrix::zeros(rows, cols);
            for rr in 0..rows {
                for c in 0..cols {
                    weights[(rr, c)] = read_f64(r).map_err(io)?;
                }
            }
            let mut bias = DVector::zeros(rows);
            for b in bias.iter_mut() {
                *b = read_f64(r).map_err(io)?;
            }
            layers.push(DenseLayer {
                weights,
                bias,
                activation,
            });
        }
        DenseNet::new(layers)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// RMSprop: `acc ← ρ·acc + (1−ρ)·g²`, `p ← p − lr·g/√(acc + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    accumulators: Vec<f64>,
}

impl RmspropState {
    pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;

    pub fn new(param_count: usize, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(RelocError::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(RmspropState {
            learning_rate,
            decay: 0.9,
            epsilon: 1e-8,
            accumulators: vec![0.0; param_count],
        })
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.accumulators
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.accumulators.len() || grads.len() != params.len() {
            return Err(RelocError::shape(
                self.accumulators.len(),
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.accumulators) {
            *acc = self.decay * *acc + (1.0 - self.decay) * g * g;
            *p -= self.learning_rate * g / (*acc + self.epsilon).sqrt();
        }
        Ok(())
    }

    /// Applies one step to every parameter of `net`.
    pub fn step_net(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        let mut params = net.params();
        self.step(&mut params, &grads.flatten())?;
        net.set_params(&params)
    }
}

pub fn rmsprop_step(state: &mut RmspropState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}
