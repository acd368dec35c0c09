//! Small dense feed-forward networks with reverse-mode gradients and Adam.
//!
//! Batches are row-major: one sample per row. A network may take an
//! auxiliary input that is concatenated onto the input of one hidden layer,
//! which is how the critic receives its action.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Linear => z,
        }
    }

    /// Derivative written in terms of the activated value.
    fn slope_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, limit: f64, rng: &mut R) -> Self {
        let mut draw = || if limit > 0.0 { rng.gen_range(-limit..=limit) } else { 0.0 };
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| draw());
        let bias = Array1::from_shape_fn(out_dim, |_| draw());
        Self {
            weights,
            bias,
            activation,
        }
    }
}

/// Extra input concatenated after the previous layer's output, feeding `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxInput {
    pub layer: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpDocument", try_from = "MlpDocument")]
pub struct Mlp {
    layers: Vec<Layer>,
    aux: Option<AuxInput>,
}

/// Per-layer `(dW, db)` pairs, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Layer inputs (after any auxiliary concatenation) and activated outputs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("network has at least one layer")
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: Gradients,
    pub d_input: Array2<f64>,
    pub d_aux: Option<Array2<f64>>,
}

/// Scalar losses averaged over the rows of a batch.
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    BinaryCrossEntropy(ArrayView2<'a, f64>),
    MeanSquared(ArrayView2<'a, f64>),
}

impl Mlp {
    /// Uniform `±1/√fan_in` initialisation of every weight and bias.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        Self::build(widths, activations, None, rng)
    }

    pub fn random_with_aux<R: Rng + ?Sized>(
        widths: &[usize],
        activations: &[Activation],
        aux: AuxInput,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(widths, activations, Some(aux), rng)
    }

    fn build<R: Rng + ?Sized>(
        widths: &[usize],
        activations: &[Activation],
        aux: Option<AuxInput>,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} widths need {} activations, got {}",
                widths.len(),
                widths.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = (0..activations.len())
            .map(|k| {
                let extra = aux.filter(|a| a.layer == k).map_or(0, |a| a.dim);
                let fan_in = widths[k] + extra;
                Layer::random(fan_in, widths[k + 1], activations[k], 1.0 / (fan_in as f64).sqrt(), rng)
            })
            .collect();
        Self::from_layers(layers, aux)
    }

    pub fn from_layers(layers: Vec<Layer>, aux: Option<AuxInput>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if let Some(a) = aux {
            if a.layer == 0 || a.layer >= layers.len() || a.dim == 0 {
                return Err(Error::Config(format!("auxiliary input {a:?} does not feed a hidden layer")));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.out_dim(),
                    got: l.bias.len(),
                });
            }
            if k > 0 {
                let extra = aux.filter(|a| a.layer == k).map_or(0, |a| a.dim);
                let expected = layers[k - 1].out_dim() + extra;
                if l.in_dim() != expected {
                    return Err(Error::DimensionMismatch {
                        expected,
                        got: l.in_dim(),
                    });
                }
            }
            if !l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Config(format!("layer {k} has non-finite parameters")));
            }
        }
        Ok(Self { layers, aux })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, k: usize) -> &mut Layer {
        &mut self.layers[k]
    }

    pub fn aux(&self) -> Option<AuxInput> {
        self.aux
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: values.len(),
            });
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for p in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *p = *it.next().unwrap();
            }
        }
        Ok(())
    }

    fn check_batch(&self, x: &ArrayView2<f64>, aux: Option<&ArrayView2<f64>>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        match (self.aux, aux) {
            (None, None) => Ok(()),
            (Some(a), Some(v)) => {
                if v.ncols() != a.dim {
                    Err(Error::DimensionMismatch {
                        expected: a.dim,
                        got: v.ncols(),
                    })
                } else if v.nrows() != x.nrows() {
                    Err(Error::DimensionMismatch {
                        expected: x.nrows(),
                        got: v.nrows(),
                    })
                } else {
                    Ok(())
                }
            }
            (Some(a), None) => Err(Error::DimensionMismatch { expected: a.dim, got: 0 }),
            (None, Some(v)) => Err(Error::DimensionMismatch {
                expected: 0,
                got: v.ncols(),
            }),
        }
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>, aux: Option<ArrayView2<f64>>) -> Result<ForwardCache> {
        self.check_batch(&x, aux.as_ref())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            let input = match outputs.last() {
                None => x.to_owned(),
                Some(prev) => match (self.aux, aux.as_ref()) {
                    (Some(a), Some(v)) if a.layer == k => concatenate![Axis(1), prev.view(), v.view()],
                    _ => prev.clone(),
                },
            };
            let mut z = input.dot(&l.weights.t());
            z += &l.bias;
            z.mapv_inplace(|v| l.activation.apply(v));
            inputs.push(input);
            outputs.push(z);
        }
        Ok(ForwardCache { inputs, outputs })
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>, aux: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        let mut cache = self.forward_cached(x, aux)?;
        Ok(cache.outputs.pop().unwrap())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward_batch(row, None)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_with_aux(&self, x: &[f64], aux: &[f64]) -> Result<Vec<f64>> {
        let row = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let extra = ArrayView2::from_shape((1, aux.len()), aux).unwrap();
        Ok(self.forward_batch(row, Some(extra))?.into_raw_vec_and_offset().0)
    }

    /// Reverse pass for an arbitrary gradient with respect to the outputs.
    /// Parameter gradients are summed over rows.
    pub fn backward(&self, cache: &ForwardCache, d_output: ArrayView2<f64>) -> Result<Backward> {
        let out = cache.output();
        if d_output.dim() != out.dim() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                got: d_output.len(),
            });
        }
        let act = self.layers[self.layers.len() - 1].activation;
        let mut delta = d_output.to_owned();
        delta.zip_mut_with(out, |d, &y| *d *= act.slope_at_output(y));
        Ok(self.backward_from_delta(cache, delta))
    }

    /// `delta` is the gradient with respect to the last pre-activation.
    fn backward_from_delta(&self, cache: &ForwardCache, mut delta: Array2<f64>) -> Backward {
        let n = self.layers.len();
        let mut layers = Vec::with_capacity(n);
        let mut d_aux = None;
        let mut d_input = Array2::zeros((0, 0));
        for k in (0..n).rev() {
            let l = &self.layers[k];
            let dw = delta.t().dot(&cache.inputs[k]);
            let db = delta.sum_axis(Axis(0));
            layers.push((dw, db));
            let mut d_in = delta.dot(&l.weights);
            if k == 0 {
                d_input = d_in;
                break;
            }
            if let Some(a) = self.aux.filter(|a| a.layer == k) {
                let split = d_in.ncols() - a.dim;
                d_aux = Some(d_in.slice(s![.., split..]).to_owned());
                d_in = d_in.slice(s![.., ..split]).to_owned();
            }
            let prev_act = self.layers[k - 1].activation;
            d_in.zip_mut_with(&cache.outputs[k - 1], |d, &y| *d *= prev_act.slope_at_output(y));
            delta = d_in;
        }
        layers.reverse();
        Backward {
            grads: Gradients { layers },
            d_input,
            d_aux,
        }
    }

    /// Forward pass, loss value, and gradients of the batch-mean loss.
    pub fn backprop(&self, x: ArrayView2<f64>, aux: Option<ArrayView2<f64>>, loss: Loss) -> Result<(f64, Backward)> {
        let cache = self.forward_cached(x, aux)?;
        let out = cache.output();
        let targets = match loss {
            Loss::BinaryCrossEntropy(y) | Loss::MeanSquared(y) => y,
        };
        if targets.dim() != out.dim() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                got: targets.len(),
            });
        }
        let rows = out.nrows().max(1) as f64;
        match loss {
            Loss::MeanSquared(y) => {
                let diff = out - &y;
                let value = diff.iter().map(|d| d * d).sum::<f64>() / rows;
                let grad = diff * (2.0 / rows);
                Ok((value, self.backward(&cache, grad.view())?))
            }
            Loss::BinaryCrossEntropy(y) => {
                const CLAMP: f64 = 1e-12;
                let value = -out
                    .iter()
                    .zip(y.iter())
                    .map(|(&p, &t)| {
                        let p = p.clamp(CLAMP, 1.0 - CLAMP);
                        t * p.ln() + (1.0 - t) * (1.0 - p).ln()
                    })
                    .sum::<f64>()
                    / rows;
                let last = self.layers[self.layers.len() - 1].activation;
                if last == Activation::Sigmoid {
                    // sigmoid and cross-entropy cancel into p − y
                    let delta = (out - &y) / rows;
                    Ok((value, self.backward_from_delta(&cache, delta)))
                } else {
                    let mut grad = out.clone();
                    grad.zip_mut_with(&y, |p, &t| {
                        let q = p.clamp(CLAMP, 1.0 - CLAMP);
                        *p = (q - t) / (q * (1.0 - q)) / rows;
                    });
                    Ok((value, self.backward(&cache, grad.view())?))
                }
            }
        }
    }

    fn check_same_shape(&self, other: &Mlp) -> Result<()> {
        if self.layers.len() != other.layers.len() || self.aux != other.aux {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: other.layers.len(),
            });
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.weights.dim() != b.weights.dim() {
                return Err(Error::DimensionMismatch {
                    expected: a.weights.len(),
                    got: b.weights.len(),
                });
            }
        }
        Ok(())
    }

    /// Largest absolute parameter difference between two equally shaped networks.
    pub fn max_param_distance(&self, other: &Mlp) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .params()
            .iter()
            .zip(other.params())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

/// Polyak averaging: `target ← τ·learned + (1 − τ)·target`.
pub fn soft_update(target: &mut Mlp, learned: &Mlp, tau: f64) -> Result<()> {
    target.check_same_shape(learned)?;
    for (t, l) in target.layers.iter_mut().zip(&learned.layers) {
        t.weights.zip_mut_with(&l.weights, |t, &l| *t = tau * l + (1.0 - tau) * *t);
        t.bias.zip_mut_with(&l.bias, |t, &l| *t = tau * l + (1.0 - tau) * *t);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
}

impl AdamState {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let zeros = Gradients::zeros_like(net).layers;
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len() || self.m.len() != net.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: net.layers.len(),
                got: grads.layers.len(),
            });
        }
        for (l, (gw, gb)) in net.layers.iter().zip(&grads.layers) {
            if l.weights.dim() != gw.dim() || l.bias.len() != gb.len() {
                return Err(Error::DimensionMismatch {
                    expected: l.weights.len() + l.bias.len(),
                    got: gw.len() + gb.len(),
                });
            }
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (k, l) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[k];
            let (mw, mb) = &mut self.m[k];
            let (vw, vb) = &mut self.v[k];
            ndarray::Zip::from(&mut l.weights)
                .and(gw)
                .and(mw)
                .and(vw)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut l.bias)
                .and(gb)
                .and(mb)
                .and(vb)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDocument {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpDocument {
    layers: Vec<LayerDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aux: Option<AuxInput>,
}

impl From<Mlp> for MlpDocument {
    fn from(net: Mlp) -> Self {
        Self {
            layers: net
                .layers
                .into_iter()
                .map(|l| LayerDocument {
                    weights: l.weights.outer_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.to_vec(),
                    activation: l.activation,
                })
                .collect(),
            aux: net.aux,
        }
    }
}

impl TryFrom<MlpDocument> for Mlp {
    type Error = Error;

    fn try_from(doc: MlpDocument) -> Result<Self> {
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let rows = l.weights.len();
                let cols = l.weights.first().map_or(0, Vec::len);
                if l.weights.iter().any(|r| r.len() != cols) {
                    return Err(Error::Config("ragged weight matrix".into()));
                }
                let flat: Vec<f64> = l.weights.into_iter().flatten().collect();
                Ok(Layer {
                    weights: Array2::from_shape_vec((rows, cols), flat).unwrap(),
                    bias: Array1::from(l.bias),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers, doc.aux)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_layer_passes_input() {
        let layer = Layer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Linear,
        };
        let net = Mlp::from_layers(vec![layer], None).unwrap();
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let layer = Layer {
            weights: Array2::zeros((1, 2)),
            bias: Array1::zeros(1),
            activation: Activation::Sigmoid,
        };
        let net = Mlp::from_layers(vec![layer], None).unwrap();
        assert_eq!(net.forward(&[3.0, 4.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(Activation::Sigmoid.apply(-800.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(800.0), 1.0);
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        let mut r = rng();
        let net = Mlp::random(&[3, 4, 2], &[Activation::Tanh, Activation::Linear], &mut r).unwrap();
        let x = [0.3, -1.2, 0.7];
        let l0 = &net.layers()[0];
        let l1 = &net.layers()[1];
        let mut hidden = [0.0; 4];
        for j in 0..4 {
            let mut z = l0.bias[j];
            for (k, xk) in x.iter().enumerate() {
                z += l0.weights[[j, k]] * xk;
            }
            hidden[j] = z.tanh();
        }
        let out = net.forward(&x).unwrap();
        for j in 0..2 {
            let mut z = l1.bias[j];
            for k in 0..4 {
                z += l1.weights[[j, k]] * hidden[k];
            }
            assert!((z - out[j]).abs() <= 1e-12 * z.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let net = Mlp::random(&[3, 2], &[Activation::Relu], &mut rng()).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::DimensionMismatch { expected: 3, got: 2 })));
    }

    #[test]
    fn rejects_broken_chain() {
        let a = Layer {
            weights: Array2::zeros((4, 2)),
            bias: Array1::zeros(4),
            activation: Activation::Relu,
        };
        let b = Layer {
            weights: Array2::zeros((1, 3)),
            bias: Array1::zeros(1),
            activation: Activation::Linear,
        };
        assert!(Mlp::from_layers(vec![a, b], None).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let net = Mlp::random(&[16, 8, 1], &[Activation::Relu, Activation::Linear], &mut rng()).unwrap();
        assert!(net.layers()[0].weights.iter().all(|w| w.abs() <= 0.25));
        assert!(net.layers()[1].weights.iter().all(|w| w.abs() <= 1.0 / 8f64.sqrt()));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::random(&[3, 5, 2], &[Activation::Relu, Activation::Tanh], &mut rng()).unwrap();
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let cache = net.forward_cached(x.view(), None).unwrap();
        let back = net.backward(&cache, Array2::zeros((2, 2)).view()).unwrap();
        assert_eq!(back.grads.max_abs(), 0.0);
    }

    #[test]
    fn linear_mse_closed_form() {
        let layer = Layer {
            weights: array![[0.5, -1.0], [2.0, 0.25]],
            bias: array![0.1, -0.2],
            activation: Activation::Linear,
        };
        let net = Mlp::from_layers(vec![layer.clone()], None).unwrap();
        let x = array![[1.5, -0.5]];
        let y = array![[0.0, 1.0]];
        let (_, back) = net.backprop(x.view(), None, Loss::MeanSquared(y.view())).unwrap();
        let residual = layer.weights.dot(&x.row(0)) + &layer.bias - y.row(0);
        for j in 0..2 {
            for k in 0..2 {
                let expected = 2.0 * residual[j] * x[[0, k]];
                assert!((back.grads.layers[0].0[[j, k]] - expected).abs() < 1e-14);
            }
            assert!((back.grads.layers[0].1[j] - 2.0 * residual[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn aux_input_is_concatenated() {
        let mut r = rng();
        let net = Mlp::random_with_aux(
            &[2, 3, 1],
            &[Activation::Relu, Activation::Linear],
            AuxInput { layer: 1, dim: 1 },
            &mut r,
        )
        .unwrap();
        assert_eq!(net.layers()[1].in_dim(), 4);
        assert!(net.forward(&[1.0, 2.0]).is_err());
        let a = net.forward_with_aux(&[1.0, 2.0], &[0.0]).unwrap()[0];
        let b = net.forward_with_aux(&[1.0, 2.0], &[1.0]).unwrap()[0];
        let slope = net.layers()[1].weights[[0, 3]];
        assert!((b - a - slope).abs() < 1e-14);
    }

    #[test]
    fn adam_zero_gradient_only_counts() {
        let mut net = Mlp::random(&[2, 2], &[Activation::Linear], &mut rng()).unwrap();
        let before = net.clone();
        let mut opt = AdamState::new(&net, 1e-3);
        let zero = Gradients::zeros_like(&net);
        opt.step(&mut net, &zero).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adam_first_step_has_size_lr() {
        let mut net = Mlp::random(&[3, 2], &[Activation::Linear], &mut rng()).unwrap();
        let before = net.params();
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].0.fill(-3.7);
        grads.layers[0].1.fill(0.02);
        let mut opt = AdamState::new(&net, 0.01);
        opt.step(&mut net, &grads).unwrap();
        for (a, b) in before.iter().zip(net.params()) {
            assert!(((b - a).abs() - 0.01).abs() < 1e-8);
        }
    }

    #[test]
    fn soft_update_arithmetic() {
        let one = |v: f64| {
            Mlp::from_layers(
                vec![Layer {
                    weights: array![[v]],
                    bias: array![v],
                    activation: Activation::Linear,
                }],
                None,
            )
            .unwrap()
        };
        let learned = one(1.0);
        let mut target = one(0.0);
        soft_update(&mut target, &learned, 0.1).unwrap();
        assert!((target.params()[0] - 0.1).abs() < 1e-15);
        soft_update(&mut target, &learned, 0.0).unwrap();
        assert!((target.params()[0] - 0.1).abs() < 1e-15);
        soft_update(&mut target, &learned, 1.0).unwrap();
        assert_eq!(target, learned);
    }

    #[test]
    fn soft_update_rejects_mismatch() {
        let mut a = Mlp::random(&[2, 3], &[Activation::Linear], &mut rng()).unwrap();
        let b = Mlp::random(&[2, 4], &[Activation::Linear], &mut rng()).unwrap();
        assert!(soft_update(&mut a, &b, 0.5).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let net = Mlp::random_with_aux(
            &[5, 8, 8, 1],
            &[Activation::Relu, Activation::Relu, Activation::Linear],
            AuxInput { layer: 1, dim: 1 },
            &mut rng(),
        )
        .unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&text).unwrap();
        assert_eq!(back, net);
        assert!(text.contains("\"activation\":\"relu\""));
    }
}
