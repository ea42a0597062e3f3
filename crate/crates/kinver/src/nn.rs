//! Fully-connected layers with hand-derived backward passes.
//!
//! The three trainable components of the pipeline (encoder, projection head,
//! classifier) are all small MLPs: linear layers with ReLU in the hidden
//! layers and a configurable output activation. Gradients are exact; the
//! test suite verifies them against central finite differences.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > F::zero() {
                    z
                } else {
                    F::zero()
                }
            }
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Identity => F::one(),
            Activation::Relu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (F::one() - s)
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// One dense layer, `weight` stored as `out_dim × in_dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    /// Fan-in-scaled uniform init: `U(-1/sqrt(in_dim), 1/sqrt(in_dim))` for
    /// weights and biases.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut sample = || F::from_f64(rng.random_range(-bound..bound));
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), &mut sample);
        let bias = Array1::from_shape_simple_fn(out_dim, &mut sample);
        Linear { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// `x (batch × in) · Wᵀ + b`.
    fn affine(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut out = linalg::matmul_bt(x, self.weight.view());
        let bias = self.bias.as_slice().expect("contiguous bias");
        linalg::for_each_row(&mut out, |_, row| {
            for (o, &b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        });
        out
    }
}

/// Shape and output activation of an MLP; hidden activations are ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths from input to output, e.g. `[32, 512, 128]`.
    pub dims: Vec<usize>,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>, output_activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least input and output widths, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("zero-width MLP layer in {dims:?}")));
        }
        Ok(MlpSpec {
            dims,
            output_activation,
        })
    }
}

/// Multilayer perceptron with ReLU hidden activations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp<F> {
    layers: Vec<Linear<F>>,
    output_activation: Activation,
}

/// Per-layer inputs and pre-activations recorded by a cached forward pass.
pub struct MlpCache<F> {
    inputs: Vec<Array2<F>>,
    preacts: Vec<Array2<F>>,
}

/// Gradients with the same shapes as the layers of the MLP that produced them.
#[derive(Debug, Clone)]
pub struct MlpGrads<F> {
    pub layers: Vec<(Array2<F>, Array1<F>)>,
}

impl<F: Scalar> Mlp<F> {
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Self {
        let layers = spec
            .dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            output_activation: spec.output_activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("non-empty MLP").in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty MLP").out_dim()
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn spec(&self) -> MlpSpec {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Linear::out_dim));
        MlpSpec {
            dims,
            output_activation: self.output_activation,
        }
    }

    pub fn layers(&self) -> &[Linear<F>] {
        &self.layers
    }

    /// Zeroes the final layer so the raw output (and a sigmoid output's
    /// probability of 0.5) is independent of the input. Used to build
    /// calibrated untrained classifiers.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty MLP");
        last.weight.fill(F::zero());
        last.bias.fill(F::zero());
    }

    fn check_input(&self, x: ArrayView2<F>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "MLP expects input width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn activation_for_layer(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            Activation::Relu
        }
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_input(x)?;
        let mut current = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(current.view());
            let act = self.activation_for_layer(l);
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            current = z;
        }
        Ok(current)
    }

    /// Forward pass through the output layer's affine map only, skipping the
    /// output activation. For sigmoid classifiers this yields the logits.
    pub fn forward_logits(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_input(x)?;
        let mut current = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(current.view());
            if l + 1 < self.layers.len() {
                z.mapv_inplace(|v| Activation::Relu.apply(v));
            }
            current = z;
        }
        Ok(current)
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward_cached(&self, x: ArrayView2<F>) -> Result<(Array2<F>, MlpCache<F>)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(current.view());
            inputs.push(current);
            let act = self.activation_for_layer(l);
            let mut out = z.clone();
            preacts.push(z);
            if act != Activation::Identity {
                out.mapv_inplace(|v| act.apply(v));
            }
            current = out;
        }
        Ok((current, MlpCache { inputs, preacts }))
    }

    /// Backward pass from the gradient w.r.t. the activated output.
    /// Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache<F>, d_output: ArrayView2<F>) -> (MlpGrads<F>, Array2<F>) {
        self.backward_inner(cache, d_output, true)
    }

    /// Backward pass from the gradient w.r.t. the output layer's
    /// pre-activation (e.g. BCE-with-logits skips the sigmoid derivative).
    pub fn backward_from_logits(
        &self,
        cache: &MlpCache<F>,
        d_logits: ArrayView2<F>,
    ) -> (MlpGrads<F>, Array2<F>) {
        self.backward_inner(cache, d_logits, false)
    }

    fn backward_inner(
        &self,
        cache: &MlpCache<F>,
        d_out: ArrayView2<F>,
        through_output_activation: bool,
    ) -> (MlpGrads<F>, Array2<F>) {
        let mut grads = vec![None; self.layers.len()];
        let mut d_post = d_out.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let act = self.activation_for_layer(l);
            let skip_activation =
                l + 1 == self.layers.len() && (!through_output_activation || act == Activation::Identity);
            let mut d_z = d_post;
            if !skip_activation {
                let pre = &cache.preacts[l];
                ndarray::Zip::from(&mut d_z)
                    .and(pre)
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
            let x = &cache.inputs[l];
            let d_w = linalg::matmul_at_b(d_z.view(), x.view());
            let d_b = linalg::column_sums(d_z.view());
            d_post = linalg::matmul(d_z.view(), layer.weight.view());
            grads[l] = Some((d_w, d_b));
        }
        let layers = grads.into_iter().map(|g| g.expect("all layers visited")).collect();
        (MlpGrads { layers }, d_post)
    }

    /// Flat view of all parameters, layer by layer (weights then bias).
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Bitwise equality of all parameters; used by the frozen-mode tests.
    pub fn params_identical(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.iter().zip(b.weight.iter()).all(|(x, y)| x == y)
                    && a.bias.iter().zip(b.bias.iter()).all(|(x, y)| x == y)
            })
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Linear<F>] {
        &mut self.layers
    }
}

impl<F: Scalar> MlpGrads<F> {
    /// Gradients of the same shape as `mlp`, all zero. `d_w` gradients of
    /// frozen components stay at this value.
    pub fn zeros_like(mlp: &Mlp<F>) -> Self {
        let layers = mlp
            .layers
            .iter()
            .map(|l| {
                (
                    Array2::zeros(l.weight.raw_dim()),
                    Array1::zeros(l.bias.raw_dim()),
                )
            })
            .collect();
        MlpGrads { layers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn tiny_mlp(out_act: Activation) -> Mlp<f64> {
        let spec = MlpSpec::new(vec![3, 5, 2], out_act).unwrap();
        Mlp::init(&spec, &mut seeded_rng(11))
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mlp = tiny_mlp(Activation::Identity);
        let x = array![[0.1, -0.2, 0.3], [1.0, 2.0, -1.0]];
        let y1 = mlp.forward(x.view()).unwrap();
        let y2 = mlp.forward(x.view()).unwrap();
        assert_eq!(y1.dim(), (2, 2));
        assert_eq!(y1, y2);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Relu).unwrap();
        let a = Mlp::<f32>::init(&spec, &mut seeded_rng(5));
        let b = Mlp::<f32>::init(&spec, &mut seeded_rng(5));
        assert!(a.params_identical(&b));
    }

    #[test]
    fn input_width_mismatch_is_an_error() {
        let mlp = tiny_mlp(Activation::Identity);
        let x = array![[0.1, -0.2]];
        assert!(matches!(mlp.forward(x.view()), Err(Error::Dimension(_))));
    }

    #[test]
    fn zeroed_output_layer_gives_half_probability() {
        let mut mlp = tiny_mlp(Activation::Sigmoid);
        mlp.zero_output_layer();
        let x = array![[0.4, -1.0, 2.0]];
        let y = mlp.forward(x.view()).unwrap();
        assert_eq!(y[(0, 0)], 0.5);
        assert_eq!(y[(0, 1)], 0.5);
    }

    /// Central finite differences over every parameter and input of a small
    /// MLP, against the analytic backward pass. Loss is `sum(output²)/2`.
    #[test]
    fn backward_matches_finite_differences() {
        for out_act in [Activation::Identity, Activation::Sigmoid] {
            let mlp = tiny_mlp(out_act);
            let x = array![[0.3, -0.7, 0.2], [0.9, 0.1, -0.4], [-0.2, 0.5, 0.8]];

            let loss_of = |m: &Mlp<f64>, x: &Array2<f64>| -> f64 {
                let y = m.forward(x.view()).unwrap();
                0.5 * y.iter().map(|v| v * v).sum::<f64>()
            };

            let (y, cache) = mlp.forward_cached(x.view()).unwrap();
            let (grads, d_input) = mlp.backward(&cache, y.view());

            let h = 1e-6;
            // input gradient
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    let mut xp = x.clone();
                    xp[(i, j)] += h;
                    let mut xm = x.clone();
                    xm[(i, j)] -= h;
                    let num = (loss_of(&mlp, &xp) - loss_of(&mlp, &xm)) / (2.0 * h);
                    assert_relative_eq!(d_input[(i, j)], num, max_relative = 1e-5, epsilon = 1e-8);
                }
            }
            // parameter gradients
            for l in 0..mlp.layers().len() {
                let w_dim = mlp.layers()[l].weight.raw_dim();
                for i in 0..w_dim[0] {
                    for j in 0..w_dim[1] {
                        let mut mp = mlp.clone();
                        mp.layers_mut()[l].weight[(i, j)] += h;
                        let mut mm = mlp.clone();
                        mm.layers_mut()[l].weight[(i, j)] -= h;
                        let num = (loss_of(&mp, &x) - loss_of(&mm, &x)) / (2.0 * h);
                        assert_relative_eq!(
                            grads.layers[l].0[(i, j)],
                            num,
                            max_relative = 1e-5,
                            epsilon = 1e-8
                        );
                    }
                }
                for i in 0..mlp.layers()[l].bias.len() {
                    let mut mp = mlp.clone();
                    mp.layers_mut()[l].bias[i] += h;
                    let mut mm = mlp.clone();
                    mm.layers_mut()[l].bias[i] -= h;
                    let num = (loss_of(&mp, &x) - loss_of(&mm, &x)) / (2.0 * h);
                    assert_relative_eq!(grads.layers[l].1[i], num, max_relative = 1e-5, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn logits_path_matches_sigmoid_forward() {
        let mlp = tiny_mlp(Activation::Sigmoid);
        let x = array![[0.3, -0.7, 0.2]];
        let probs = mlp.forward(x.view()).unwrap();
        let logits = mlp.forward_logits(x.view()).unwrap();
        for (p, l) in probs.iter().zip(logits.iter()) {
            assert_relative_eq!(*p, sigmoid(*l), max_relative = 1e-12);
        }
    }
}
