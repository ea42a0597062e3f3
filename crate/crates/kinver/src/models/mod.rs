//! Model components: the encoder `f`, the projection head `g`, the quadratic
//! feature fusion and the binary kin classifier `d`.
//!
//! The encoder consumes input vectors (oracle features in synthetic mode,
//! flattened 112×112 faces in image mode) and is a small trainable MLP. A
//! real face backbone is plugged in by loading externally provided weights
//! through [`Encoder::from_pretrained`]; nothing else in the pipeline
//! changes.

mod checkpoint;

pub use checkpoint::{Checkpoint, EncoderState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Scalar};
use crate::nn::{Activation, Mlp, MlpCache, MlpGrads, MlpSpec};

/// Whether stage-2 training updates the encoder's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableMode {
    Frozen,
    Finetuned,
}

/// The contrastive space is 128-dimensional.
pub const PROJECTION_DIM: usize = 128;

/// Architecture of the toy encoder MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Output embedding dimension D.
    pub embedding_dim: usize,
}

impl EncoderSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, embedding_dim: usize) -> Self {
        EncoderSpec {
            input_dim,
            hidden_dim,
            embedding_dim,
        }
    }
}

/// Facial encoder `f`: input vectors to D-dimensional embeddings.
#[derive(Debug, Clone)]
pub struct Encoder {
    mlp: Mlp<f32>,
    mode: TrainableMode,
    stage1_trained: bool,
}

impl Encoder {
    /// Seeded trainable MLP encoder standing in for a pretrained face
    /// backbone at desk scale.
    pub fn toy(spec: &EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        let mlp_spec = MlpSpec::new(
            vec![spec.input_dim, spec.hidden_dim, spec.embedding_dim],
            Activation::Identity,
        )?;
        Ok(Encoder {
            mlp: Mlp::init(&mlp_spec, rng),
            mode: TrainableMode::Finetuned,
            stage1_trained: false,
        })
    }

    /// Real-backbone adapter: loads externally provided encoder weights from
    /// a checkpoint file and exposes the same interface as the toy encoder.
    pub fn from_pretrained(path: &std::path::Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let state = ckpt.encoder.ok_or_else(|| {
            Error::Checkpoint(format!("{} holds no encoder weights", path.display()))
        })?;
        Ok(Self::from_state(state))
    }

    pub fn from_state(state: EncoderState) -> Self {
        Encoder {
            mlp: state.mlp,
            mode: state.mode,
            stage1_trained: state.stage1_trained,
        }
    }

    pub fn to_state(&self) -> EncoderState {
        EncoderState {
            mlp: self.mlp.clone(),
            mode: self.mode,
            stage1_trained: self.stage1_trained,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn mode(&self) -> TrainableMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: TrainableMode) {
        self.mode = mode;
    }

    /// Stage-1 provenance marker; stage 2 refuses encoders without it unless
    /// explicitly overridden.
    pub fn stage1_trained(&self) -> bool {
        self.stage1_trained
    }

    pub fn mark_stage1_trained(&mut self) {
        self.stage1_trained = true;
    }

    /// Deterministic evaluation-mode encoding of a batch of input vectors.
    pub fn encode_batch(&self, inputs: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.mlp.forward(inputs)
    }

    pub fn forward_cached(&self, inputs: ArrayView2<f32>) -> Result<(Array2<f32>, MlpCache<f32>)> {
        self.mlp.forward_cached(inputs)
    }

    pub fn backward(
        &self,
        cache: &MlpCache<f32>,
        d_embeddings: ArrayView2<f32>,
    ) -> (MlpGrads<f32>, Array2<f32>) {
        self.mlp.backward(cache, d_embeddings)
    }

    pub fn mlp(&self) -> &Mlp<f32> {
        &self.mlp
    }

    pub(crate) fn mlp_mut(&mut self) -> &mut Mlp<f32> {
        &mut self.mlp
    }
}

/// Projection head `g`: a 2-layer MLP mapping embeddings into the
/// 128-dimensional contrastive space (ReLU hidden, linear output).
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    mlp: Mlp<f32>,
}

impl ProjectionHead {
    pub fn new(embedding_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let spec = MlpSpec::new(
            vec![embedding_dim, hidden_dim, PROJECTION_DIM],
            Activation::Identity,
        )?;
        Ok(ProjectionHead {
            mlp: Mlp::init(&spec, rng),
        })
    }

    pub fn from_mlp(mlp: Mlp<f32>) -> Result<Self> {
        if mlp.output_dim() != PROJECTION_DIM {
            return Err(Error::Checkpoint(format!(
                "projection heads map into {PROJECTION_DIM} dimensions, got {}",
                mlp.output_dim()
            )));
        }
        Ok(ProjectionHead { mlp })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn project(&self, embeddings: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.mlp.forward(embeddings)
    }

    pub fn forward_cached(
        &self,
        embeddings: ArrayView2<f32>,
    ) -> Result<(Array2<f32>, MlpCache<f32>)> {
        self.mlp.forward_cached(embeddings)
    }

    pub fn backward(
        &self,
        cache: &MlpCache<f32>,
        d_projection: ArrayView2<f32>,
    ) -> (MlpGrads<f32>, Array2<f32>) {
        self.mlp.backward(cache, d_projection)
    }

    pub fn mlp(&self) -> &Mlp<f32> {
        &self.mlp
    }

    pub(crate) fn mlp_mut(&mut self) -> &mut Mlp<f32> {
        &mut self.mlp
    }
}

/// Elementwise quadratic fusion `[h_i² − h_j² ; (h_i − h_j)²]`.
pub fn fuse<F: Scalar>(h_i: ArrayView1<F>, h_j: ArrayView1<F>) -> Result<Array1<F>> {
    if h_i.len() != h_j.len() {
        return Err(Error::Dimension(format!(
            "fuse of embeddings with lengths {} and {}",
            h_i.len(),
            h_j.len()
        )));
    }
    let d = h_i.len();
    let mut out = Array1::zeros(2 * d);
    for k in 0..d {
        let (a, b) = (h_i[k], h_j[k]);
        out[k] = a * a - b * b;
        out[d + k] = (a - b) * (a - b);
    }
    Ok(out)
}

/// Row-wise [`fuse`] over two batches of embeddings.
pub fn fuse_batch<F: Scalar>(h_a: ArrayView2<F>, h_b: ArrayView2<F>) -> Result<Array2<F>> {
    if h_a.dim() != h_b.dim() {
        return Err(Error::Dimension(format!(
            "fuse_batch of shapes {:?} and {:?}",
            h_a.dim(),
            h_b.dim()
        )));
    }
    let d = h_a.ncols();
    let mut out = Array2::zeros((h_a.nrows(), 2 * d));
    linalg::for_each_row(&mut out, |row, fused| {
        for k in 0..d {
            let (a, b) = (h_a[(row, k)], h_b[(row, k)]);
            fused[k] = a * a - b * b;
            fused[d + k] = (a - b) * (a - b);
        }
    });
    Ok(out)
}

/// Gradients of [`fuse_batch`] w.r.t. both embedding batches, given the
/// gradient w.r.t. the fused rows.
pub fn fuse_batch_backward<F: Scalar>(
    h_a: ArrayView2<F>,
    h_b: ArrayView2<F>,
    d_fused: ArrayView2<F>,
) -> (Array2<F>, Array2<F>) {
    let d = h_a.ncols();
    debug_assert_eq!(d_fused.ncols(), 2 * d);
    let two = F::from_f64(2.0);
    let mut d_a = Array2::zeros(h_a.raw_dim());
    let mut d_b = Array2::zeros(h_b.raw_dim());
    for row in 0..h_a.nrows() {
        for k in 0..d {
            let (a, b) = (h_a[(row, k)], h_b[(row, k)]);
            let g1 = d_fused[(row, k)];
            let g2 = d_fused[(row, d + k)];
            d_a[(row, k)] = two * a * g1 + two * (a - b) * g2;
            d_b[(row, k)] = -two * b * g1 - two * (a - b) * g2;
        }
    }
    (d_a, d_b)
}

/// Binary kin classifier `d`: a 2-layer MLP over the fused features with a
/// sigmoid output.
#[derive(Debug, Clone)]
pub struct FusionClassifier {
    mlp: Mlp<f32>,
}

impl FusionClassifier {
    /// `embedding_dim` is D; the classifier input is the 2D fused vector.
    pub fn new(embedding_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let spec = MlpSpec::new(vec![2 * embedding_dim, hidden_dim, 1], Activation::Sigmoid)?;
        Ok(FusionClassifier {
            mlp: Mlp::init(&spec, rng),
        })
    }

    pub fn from_mlp(mlp: Mlp<f32>) -> Result<Self> {
        if mlp.output_dim() != 1 || mlp.output_activation() != Activation::Sigmoid {
            return Err(Error::Checkpoint(
                "kin classifiers end in a single sigmoid output".into(),
            ));
        }
        Ok(FusionClassifier { mlp })
    }

    /// D, recovered from the fused input width.
    pub fn embedding_dim(&self) -> usize {
        self.mlp.input_dim() / 2
    }

    /// Zeroes the output layer so every probability is exactly 0.5.
    pub fn zero_output_layer(&mut self) {
        self.mlp.zero_output_layer();
    }

    /// Kin probabilities for a batch of fused vectors, strictly inside
    /// (0, 1). The sigmoid can underflow to exactly 0 or round to exactly 1
    /// in `f32` for extreme logits; those are nudged back into the open
    /// interval.
    pub fn probabilities(&self, fused: ArrayView2<f32>) -> Result<Array1<f32>> {
        let out = self.mlp.forward(fused)?;
        Ok(out
            .column(0)
            .mapv(|p| p.clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)))
    }

    pub fn forward_logits_cached(
        &self,
        fused: ArrayView2<f32>,
    ) -> Result<(Array2<f32>, MlpCache<f32>)> {
        // the cached forward records pre-activations, so the output layer's
        // logits are recoverable from the same pass
        let (_, cache) = self.mlp.forward_cached(fused)?;
        let logits = self.mlp.forward_logits(fused)?;
        Ok((logits, cache))
    }

    pub fn backward_from_logits(
        &self,
        cache: &MlpCache<f32>,
        d_logits: ArrayView2<f32>,
    ) -> (MlpGrads<f32>, Array2<f32>) {
        self.mlp.backward_from_logits(cache, d_logits)
    }

    pub fn mlp(&self) -> &Mlp<f32> {
        &self.mlp
    }

    pub(crate) fn mlp_mut(&mut self) -> &mut Mlp<f32> {
        &mut self.mlp
    }
}

/// `P(kin) = d(f(x_i), f(x_j))` for one pair of input vectors.
pub fn classify_pair(
    x_i: ArrayView1<f32>,
    x_j: ArrayView1<f32>,
    encoder: &Encoder,
    classifier: &FusionClassifier,
) -> Result<f32> {
    if classifier.embedding_dim() != encoder.embedding_dim() {
        return Err(Error::Dimension(format!(
            "classifier expects embeddings of dimension {}, encoder produces {}",
            classifier.embedding_dim(),
            encoder.embedding_dim()
        )));
    }
    let mut inputs = Array2::zeros((2, x_i.len()));
    inputs.row_mut(0).assign(&x_i);
    inputs.row_mut(1).assign(&x_j);
    let h = encoder.encode_batch(inputs.view())?;
    let fused = fuse(h.row(0), h.row(1))?;
    let fused = fused.insert_axis(ndarray::Axis(0));
    let probs = classifier.probabilities(fused.view())?;
    Ok(probs[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn fuse_hand_example() {
        let a = array![2.0, 1.0];
        let b = array![1.0, 3.0];
        let fused = fuse(a.view(), b.view()).unwrap();
        assert_eq!(fused, array![3.0, -8.0, 1.0, 4.0]);
    }

    #[test]
    fn fuse_of_identical_vectors_is_zero() {
        let v = array![0.5f64, -2.0, 3.25, 0.0];
        let fused = fuse(v.view(), v.view()).unwrap();
        assert!(fused.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fuse_dimension_mismatch_is_an_error() {
        let a = array![1.0, 2.0];
        let b = array![1.0, 2.0, 3.0];
        assert!(matches!(fuse(a.view(), b.view()), Err(Error::Dimension(_))));
    }

    #[test]
    fn fuse_batch_matches_per_row_fuse() {
        let mut rng = seeded_rng(2);
        let a = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-2.0f64..2.0));
        let b = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-2.0f64..2.0));
        let fused = fuse_batch(a.view(), b.view()).unwrap();
        for row in 0..5 {
            let single = fuse(a.row(row), b.row(row)).unwrap();
            assert_eq!(fused.row(row).to_owned(), single);
        }
    }

    #[test]
    fn fuse_backward_matches_finite_differences() {
        let mut rng = seeded_rng(8);
        let a = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0f64..1.0));
        let b = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0f64..1.0));
        // loss = sum(fused²)/2 so d_fused = fused
        let fused = fuse_batch(a.view(), b.view()).unwrap();
        let (da, db) = fuse_batch_backward(a.view(), b.view(), fused.view());
        let loss_of = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
            let f = fuse_batch(a.view(), b.view()).unwrap();
            0.5 * f.iter().map(|v| v * v).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut ap = a.clone();
                ap[(i, j)] += h;
                let mut am = a.clone();
                am[(i, j)] -= h;
                let num = (loss_of(&ap, &b) - loss_of(&am, &b)) / (2.0 * h);
                assert_relative_eq!(da[(i, j)], num, max_relative = 1e-5, epsilon = 1e-9);

                let mut bp = b.clone();
                bp[(i, j)] += h;
                let mut bm = b.clone();
                bm[(i, j)] -= h;
                let num = (loss_of(&a, &bp) - loss_of(&a, &bm)) / (2.0 * h);
                assert_relative_eq!(db[(i, j)], num, max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn projection_head_outputs_128_dimensions() {
        let head = ProjectionHead::new(32, 64, &mut seeded_rng(1)).unwrap();
        assert_eq!(head.output_dim(), PROJECTION_DIM);
        let x = Array2::<f32>::ones((3, 32));
        let z = head.project(x.view()).unwrap();
        assert_eq!(z.dim(), (3, PROJECTION_DIM));
    }

    fn toy_setup() -> (Encoder, FusionClassifier) {
        let mut rng = seeded_rng(5);
        let encoder = Encoder::toy(&EncoderSpec::new(8, 16, 12), &mut rng).unwrap();
        let classifier = FusionClassifier::new(12, 32, &mut rng).unwrap();
        (encoder, classifier)
    }

    #[test]
    fn classify_pair_is_a_probability_and_deterministic() {
        let (encoder, classifier) = toy_setup();
        let mut rng = seeded_rng(6);
        let x: Array1<f32> = Array1::from_shape_simple_fn(8, || rng.random_range(-1.0..1.0));
        let y: Array1<f32> = Array1::from_shape_simple_fn(8, || rng.random_range(-1.0..1.0));
        let p1 = classify_pair(x.view(), y.view(), &encoder, &classifier).unwrap();
        let p2 = classify_pair(x.view(), y.view(), &encoder, &classifier).unwrap();
        assert!(p1 > 0.0 && p1 < 1.0);
        assert_eq!(p1, p2);
    }

    #[test]
    fn zeroed_classifier_outputs_exactly_half() {
        let (encoder, mut classifier) = toy_setup();
        classifier.zero_output_layer();
        let x = Array1::from(vec![0.5f32; 8]);
        let y = Array1::from(vec![-0.25f32; 8]);
        let p = classify_pair(x.view(), y.view(), &encoder, &classifier).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn encoder_dimension_mismatch_is_detected() {
        let mut rng = seeded_rng(5);
        let encoder = Encoder::toy(&EncoderSpec::new(8, 16, 12), &mut rng).unwrap();
        let classifier = FusionClassifier::new(10, 32, &mut rng).unwrap();
        let x = Array1::from(vec![0.0f32; 8]);
        assert!(matches!(
            classify_pair(x.view(), x.view(), &encoder, &classifier),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn toy_encoder_is_seed_deterministic() {
        let spec = EncoderSpec::new(8, 16, 12);
        let a = Encoder::toy(&spec, &mut seeded_rng(9)).unwrap();
        let b = Encoder::toy(&spec, &mut seeded_rng(9)).unwrap();
        assert!(a.mlp().params_identical(b.mlp()));
    }

    proptest! {
        /// fuse(a, b) = S · fuse(b, a) with S = diag(−1 on the first block,
        /// +1 on the second): antisymmetric first block, symmetric second.
        #[test]
        fn fuse_block_symmetry(a in proptest::collection::vec(-10.0f64..10.0, 1..16)) {
            let d = a.len();
            let b: Vec<f64> = a.iter().map(|v| v * 0.5 - 1.0).collect();
            let av = Array1::from(a);
            let bv = Array1::from(b);
            let ab = fuse(av.view(), bv.view()).unwrap();
            let ba = fuse(bv.view(), av.view()).unwrap();
            for k in 0..d {
                prop_assert_eq!(ab[k], -ba[k]);
                prop_assert_eq!(ab[d + k], ba[d + k]);
            }
        }
    }
}
