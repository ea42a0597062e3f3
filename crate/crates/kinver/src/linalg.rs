//! Small dense kernels used by the models and the contrastive loss.
//!
//! Every kernel computes each output row with the same sequential inner loop;
//! with the `parallel` feature the rows are distributed over a rayon pool.
//! Because rows never share accumulators, the parallel and sequential builds
//! produce bit-identical results, which the determinism tests rely on.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_traits::Float;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Scalar type of the numeric stack. Models train in `f32`; the loss tests
/// and gradient checks instantiate `f64`.
pub trait Scalar:
    Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
}

/// Minimum rows per rayon task; below this the split overhead dominates.
#[cfg(feature = "parallel")]
const MIN_ROWS_PER_TASK: usize = 4;

/// Applies `kernel` to every row of `out`, in parallel when the `parallel`
/// feature is enabled. `out` must be in standard layout.
pub fn for_each_row<F: Scalar>(
    out: &mut Array2<F>,
    kernel: impl Fn(usize, &mut [F]) + Send + Sync,
) {
    let n = out.ncols();
    let slice = out.as_slice_mut().expect("row-major output");
    if n == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        slice
            .par_chunks_mut(n)
            .with_min_len(MIN_ROWS_PER_TASK)
            .enumerate()
            .for_each(|(i, row)| kernel(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in slice.chunks_mut(n).enumerate() {
            kernel(i, row);
        }
    }
}

fn row_mul_add<F: Scalar>(acc: &mut [F], scale: F, row: &[F]) {
    for (a, &r) in acc.iter_mut().zip(row) {
        *a += scale * r;
    }
}

/// `a (m×k) · b (k×n)`, rows computed independently.
pub fn matmul<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions");
    let (m, n) = (a.nrows(), b.ncols());
    let b_slice = b.as_slice().expect("row-major rhs");
    let mut out = Array2::zeros((m, n));
    for_each_row(&mut out, |i, orow| {
        let arow = a.row(i);
        for (k, &av) in arow.iter().enumerate() {
            row_mul_add(orow, av, &b_slice[k * n..(k + 1) * n]);
        }
    });
    out
}

/// Sequential reference for the dispatching [`matmul`]; used by the benches
/// to compare against the parallel path.
pub fn matmul_seq<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions");
    let (m, n) = (a.nrows(), b.ncols());
    let b_slice = b.as_slice().expect("row-major rhs");
    let mut out = Array2::zeros((m, n));
    let slice = out.as_slice_mut().expect("row-major output");
    for i in 0..m {
        let orow = &mut slice[i * n..(i + 1) * n];
        for (k, &av) in a.row(i).iter().enumerate() {
            row_mul_add(orow, av, &b_slice[k * n..(k + 1) * n]);
        }
    }
    out
}

/// `a (m×k) · bᵀ (n×k)` without materializing the transpose.
pub fn matmul_bt<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    assert_eq!(a.ncols(), b.ncols(), "matmul_bt: inner dimensions");
    let (m, n) = (a.nrows(), b.nrows());
    let mut out = Array2::zeros((m, n));
    for_each_row(&mut out, |i, orow| {
        let arow = a.row(i);
        let arow = arow.as_slice().expect("row-major lhs");
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = b.row(j);
            let brow = brow.as_slice().expect("row-major rhs");
            *o = dot_slices(arow, brow);
        }
    });
    out
}

/// `aᵀ (k×m) · b (k×n)` without materializing the transpose; used for weight
/// gradients (`xᵀ · delta`).
pub fn matmul_at_b<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    assert_eq!(a.nrows(), b.nrows(), "matmul_at_b: inner dimensions");
    let (m, n) = (a.ncols(), b.ncols());
    let b_slice = b.as_slice().expect("row-major rhs");
    let mut out = Array2::zeros((m, n));
    for_each_row(&mut out, |i, orow| {
        // out[i, :] = sum_k a[k, i] * b[k, :]
        for (k, brow) in b_slice.chunks(n).enumerate() {
            row_mul_add(orow, a[(k, i)], brow);
        }
    });
    out
}

fn dot_slices<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Plain dot product.
pub fn dot<F: Scalar>(a: ArrayView1<F>, b: ArrayView1<F>) -> F {
    assert_eq!(a.len(), b.len(), "dot: lengths");
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// Euclidean norm.
pub fn norm<F: Scalar>(a: ArrayView1<F>) -> F {
    dot(a, a).sqrt()
}

/// Column sums (used for bias gradients).
pub fn column_sums<F: Scalar>(a: ArrayView2<F>) -> Array1<F> {
    let mut out = Array1::zeros(a.ncols());
    for row in a.rows() {
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_matches_hand_result() {
        let a = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let b = array![[7.0, 8.0, 9.0], [10.0, 11.0, 12.0]];
        let c = matmul(a.view(), b.view());
        assert_eq!(c, array![[27.0, 30.0, 33.0], [61.0, 68.0, 75.0], [95.0, 106.0, 117.0]]);
        assert_eq!(c, matmul_seq(a.view(), b.view()));
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = array![[1.0f64, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = array![[1.0, 0.5, -1.0], [2.0, -2.0, 0.0]];
        let bt = b.t().as_standard_layout().to_owned();
        assert_eq!(matmul_bt(a.view(), b.view()), matmul(a.view(), bt.view()));

        let at = a.t().as_standard_layout().to_owned();
        let c = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(matmul_at_b(a.view(), c.view()), matmul(at.view(), c.view()));
    }

    #[test]
    fn column_sums_adds_rows() {
        let a = array![[1.0, 2.0], [10.0, 20.0]];
        assert_eq!(column_sums(a.view()), array![11.0, 22.0]);
    }
}
