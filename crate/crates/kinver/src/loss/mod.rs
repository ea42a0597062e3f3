//! Supervised contrastive loss over batches of positive pairs.
//!
//! The 2N projected embeddings of a batch are ordered `[z_x1..z_xN,
//! z_y1..z_yN]`; embedding `i`'s positive partner sits at `(i + N) mod 2N`.
//! Each directed pair contributes
//!
//! ```text
//! L(i, j) = -log( exp(sim(z_i, z_j)/τ) / Σ_{k≠i} exp(sim(z_i, z_k)/τ) )
//! ```
//!
//! with cosine similarity and the sum running over all other embeddings
//! (the partner included). The batch loss is the mean of the 2N directed
//! losses. Similarities are evaluated as one normalized matrix product and
//! each anchor's log-sum-exp is max-subtracted, so small temperatures
//! (1/0.07 ≈ 14.3 in the exponent) cannot overflow. Gradients are analytic;
//! `reference` holds a naive direct-summation oracle the tests compare
//! against.

pub mod reference;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{self, Scalar};

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`; zero-norm inputs are a domain error.
pub fn cosine_similarity<F: Scalar>(a: ArrayView1<F>, b: ArrayView1<F>) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine similarity of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = linalg::norm(a);
    let nb = linalg::norm(b);
    if na == F::zero() || nb == F::zero() {
        return Err(Error::Domain(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok(linalg::dot(a, b) / (na * nb))
}

/// A validated batch of 2N projected embeddings plus the temperature.
#[derive(Debug, Clone)]
pub struct ProjectedBatch<F> {
    /// Stacked embeddings, shape `2N × P`.
    z: Array2<F>,
    n: usize,
    temperature: F,
}

impl<F: Scalar> ProjectedBatch<F> {
    /// Builds a batch from the projections of the first-of-pair images
    /// (`z_x`, N×P) and second-of-pair images (`z_y`, N×P).
    pub fn new(z_x: ArrayView2<F>, z_y: ArrayView2<F>, temperature: F) -> Result<Self> {
        if z_x.dim() != z_y.dim() {
            return Err(Error::Dimension(format!(
                "z_x is {:?} but z_y is {:?}",
                z_x.dim(),
                z_y.dim()
            )));
        }
        let mut z = Array2::zeros((2 * z_x.nrows(), z_x.ncols()));
        z.slice_mut(ndarray::s![..z_x.nrows(), ..]).assign(&z_x);
        z.slice_mut(ndarray::s![z_x.nrows().., ..]).assign(&z_y);
        Self::from_stacked(z, temperature)
    }

    /// Builds a batch from already-stacked embeddings `[z_x; z_y]` (2N × P).
    pub fn from_stacked(z: Array2<F>, temperature: F) -> Result<Self> {
        if !z.nrows().is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "stacked embeddings need an even row count, got {}",
                z.nrows()
            )));
        }
        let n = z.nrows() / 2;
        if n < 2 {
            return Err(Error::Config(format!(
                "a contrastive batch needs at least 2 pairs, got {n}"
            )));
        }
        if temperature <= F::zero() || !temperature.is_finite() || temperature.is_nan() {
            return Err(Error::Domain(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        for (i, row) in z.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("embedding {i} is not finite")));
            }
            if linalg::norm(row) == F::zero() {
                return Err(Error::Domain(format!("embedding {i} has zero norm")));
            }
        }
        Ok(ProjectedBatch { z, n, temperature })
    }

    /// Number of positive pairs N.
    pub fn num_pairs(&self) -> usize {
        self.n
    }

    pub fn temperature(&self) -> F {
        self.temperature
    }

    /// All 2N embeddings, `[z_x1..z_xN, z_y1..z_yN]`.
    pub fn embeddings(&self) -> ArrayView2<'_, F> {
        self.z.view()
    }

    pub fn z_x(&self) -> ArrayView2<'_, F> {
        self.z.slice(ndarray::s![..self.n, ..])
    }

    pub fn z_y(&self) -> ArrayView2<'_, F> {
        self.z.slice(ndarray::s![self.n.., ..])
    }

    /// Index of embedding `i`'s positive partner.
    pub fn partner(&self, i: usize) -> usize {
        (i + self.n) % (2 * self.n)
    }
}

/// Rows scaled to unit norm, plus the original norms.
fn normalize_rows<F: Scalar>(z: ArrayView2<F>) -> (Array2<F>, Array1<F>) {
    let mut unit = z.to_owned();
    let mut norms = Array1::zeros(z.nrows());
    for (mut row, norm_slot) in unit.rows_mut().into_iter().zip(norms.iter_mut()) {
        let norm = linalg::norm(row.view());
        *norm_slot = norm;
        row.mapv_inplace(|v| v / norm);
    }
    (unit, norms)
}

/// Loss of one directed positive pair against all other embeddings in `z`.
/// `anchor` and `partner` index rows of `z` (any even count ≥ 2); the
/// denominator excludes only the anchor itself.
pub fn supcon_pair_loss<F: Scalar>(
    z: ArrayView2<F>,
    anchor: usize,
    partner: usize,
    temperature: F,
) -> Result<F> {
    let rows = z.nrows();
    if rows < 2 {
        return Err(Error::Config(format!(
            "need at least 2 embeddings, got {rows}"
        )));
    }
    if anchor >= rows || partner >= rows {
        return Err(Error::Domain(format!(
            "anchor {anchor} / partner {partner} out of range for {rows} embeddings"
        )));
    }
    if anchor == partner {
        return Err(Error::Domain(
            "a pair loss needs two distinct embeddings".into(),
        ));
    }
    if temperature <= F::zero() || temperature.is_nan() || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    for row in z.rows() {
        if linalg::norm(row) == F::zero() {
            return Err(Error::Domain("embedding with zero norm".into()));
        }
    }
    let (unit, _) = normalize_rows(z);
    let sims = linalg::matmul_bt(unit.view(), unit.view());
    Ok(anchor_loss(sims.row(anchor), anchor, partner, temperature))
}

/// Stabilized `-log softmax` for one anchor row of the similarity matrix.
/// Evaluated as `(m - s_j/τ) + log Σ exp(s_k/τ - m)`, which is non-negative
/// in floating point because `m ≥ s_j/τ` and the max term makes the sum ≥ 1.
fn anchor_loss<F: Scalar>(sims: ArrayView1<F>, anchor: usize, partner: usize, tau: F) -> F {
    let mut max = F::neg_infinity();
    for (k, &s) in sims.iter().enumerate() {
        if k != anchor && s / tau > max {
            max = s / tau;
        }
    }
    let mut sum = F::zero();
    for (k, &s) in sims.iter().enumerate() {
        if k != anchor {
            sum += (s / tau - max).exp();
        }
    }
    (max - sims[partner] / tau) + sum.ln()
}

/// Mean of the 2N directed positive-pair losses.
pub fn batch_loss<F: Scalar>(batch: &ProjectedBatch<F>) -> F {
    let (unit, _) = normalize_rows(batch.embeddings());
    let sims = linalg::matmul_bt(unit.view(), unit.view());
    let rows = 2 * batch.num_pairs();
    let mut losses = Array2::zeros((rows, 1));
    linalg::for_each_row(&mut losses, |i, out| {
        out[0] = anchor_loss(sims.row(i), i, batch.partner(i), batch.temperature());
    });
    losses.sum() / F::from_f64(rows as f64)
}

/// Batch loss plus its exact gradient with respect to every embedding
/// (stacked `2N × P`, same layout as [`ProjectedBatch::embeddings`]).
pub fn batch_loss_with_grad<F: Scalar>(batch: &ProjectedBatch<F>) -> (F, Array2<F>) {
    let z = batch.embeddings();
    let rows = 2 * batch.num_pairs();
    let tau = batch.temperature();
    let (unit, norms) = normalize_rows(z);
    let sims = linalg::matmul_bt(unit.view(), unit.view());

    // Per-anchor losses and the coefficient matrix
    //   C[i, k] = (softmax_k(sims[i, ·]/τ over k≠i) − 1[k = partner(i)]) / (2N τ)
    // so that grad wrt the unit embeddings is (C + Cᵀ) · U.
    let mut losses = Array2::zeros((rows, 1));
    linalg::for_each_row(&mut losses, |i, out| {
        out[0] = anchor_loss(sims.row(i), i, batch.partner(i), tau);
    });
    let scale = F::one() / (F::from_f64(rows as f64) * tau);
    let mut coeff = Array2::zeros((rows, rows));
    linalg::for_each_row(&mut coeff, |i, crow| {
        let srow = sims.row(i);
        let mut max = F::neg_infinity();
        for (k, &s) in srow.iter().enumerate() {
            if k != i && s / tau > max {
                max = s / tau;
            }
        }
        let mut sum = F::zero();
        for (k, &s) in srow.iter().enumerate() {
            if k != i {
                let e = (s / tau - max).exp();
                crow[k] = e;
                sum += e;
            }
        }
        let partner = batch.partner(i);
        for (k, c) in crow.iter_mut().enumerate() {
            if k != i {
                let mut v = *c / sum;
                if k == partner {
                    v -= F::one();
                }
                *c = v * scale;
            }
        }
    });

    // grad_u = (C + Cᵀ) U, then through the row normalization
    // u = z/‖z‖: grad_z = (grad_u − (grad_u·u) u) / ‖z‖.
    let coeff_t = coeff.t().as_standard_layout().to_owned();
    let mut symmetric = coeff;
    symmetric += &coeff_t;
    let grad_unit = linalg::matmul(symmetric.view(), unit.view());

    let mut grad = grad_unit;
    for ((mut grow, urow), &norm) in grad
        .rows_mut()
        .into_iter()
        .zip(unit.rows())
        .zip(norms.iter())
    {
        let radial = linalg::dot(grow.view(), urow);
        ndarray::Zip::from(&mut grow)
            .and(&urow)
            .for_each(|g, &u| *g = (*g - radial * u) / norm);
    }

    let loss = losses.sum() / F::from_f64(rows as f64);
    (loss, grad)
}

/// Mean over `Axis(0)`-stacked per-anchor values; exposed for logging.
pub fn mean<F: Scalar>(values: ArrayView2<F>) -> F {
    values.sum() / F::from_f64(values.len_of(Axis(0)) as f64)
}
