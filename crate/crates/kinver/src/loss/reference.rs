//! Naive direct-summation reference implementations.
//!
//! These follow the loss definition literally — per-pair cosine calls,
//! unstabilized exponentials, an explicit partner sum — and share no code
//! with the production path in the parent module. The unit tests and the
//! acceptance suite use them as the independent oracle.

use ndarray::{Array2, ArrayView2};

use crate::linalg::Scalar;

fn naive_cosine<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut dot = F::zero();
    let mut na = F::zero();
    let mut nb = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// `-log( exp(sim(i,j)/τ) / Σ_{k≠i} exp(sim(i,k)/τ) )`, summed directly.
pub fn naive_pair_loss<F: Scalar>(
    embeddings: &[Vec<F>],
    anchor: usize,
    partner: usize,
    temperature: F,
) -> F {
    let numerator = (naive_cosine(&embeddings[anchor], &embeddings[partner]) / temperature).exp();
    let mut denominator = F::zero();
    for (k, other) in embeddings.iter().enumerate() {
        if k != anchor {
            denominator += (naive_cosine(&embeddings[anchor], other) / temperature).exp();
        }
    }
    -(numerator / denominator).ln()
}

/// `(1/2N) Σ_i ( L(z_xi, z_yi) + L(z_yi, z_xi) )` with the 2N embeddings
/// stacked `[z_x; z_y]`, summed directly.
pub fn naive_batch_loss<F: Scalar>(
    z_x: ArrayView2<F>,
    z_y: ArrayView2<F>,
    temperature: F,
) -> F {
    let n = z_x.nrows();
    let mut embeddings: Vec<Vec<F>> = Vec::with_capacity(2 * n);
    for row in z_x.rows() {
        embeddings.push(row.to_vec());
    }
    for row in z_y.rows() {
        embeddings.push(row.to_vec());
    }
    let mut total = F::zero();
    for i in 0..n {
        total += naive_pair_loss(&embeddings, i, i + n, temperature);
        total += naive_pair_loss(&embeddings, i + n, i, temperature);
    }
    total / F::from_f64(2.0 * n as f64)
}

/// Central finite differences of the batch loss over every embedding
/// component, evaluated through the naive loss.
pub fn numeric_gradient(z: ArrayView2<f64>, temperature: f64, step: f64) -> Array2<f64> {
    let n = z.nrows() / 2;
    let loss_of = |z: &Array2<f64>| {
        naive_batch_loss(
            z.slice(ndarray::s![..n, ..]),
            z.slice(ndarray::s![n.., ..]),
            temperature,
        )
    };
    let mut grad = Array2::zeros(z.raw_dim());
    let base = z.to_owned();
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            let mut plus = base.clone();
            plus[(i, j)] += step;
            let mut minus = base.clone();
            minus[(i, j)] -= step;
            grad[(i, j)] = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
        }
    }
    grad
}
