use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::Scalar;

/// `y = x W + b` with `x: (N, in)`, `W: (in, out)`.
pub fn linear_forward<F: Scalar>(
    x: ArrayView2<'_, F>,
    weight: ArrayView2<'_, F>,
    bias: ArrayView1<'_, F>,
) -> Array2<F> {
    let mut y = Array2::from_shape_fn((x.nrows(), weight.ncols()), |(_, j)| bias[j]);
    general_mat_mul(F::one(), &x, &weight, F::one(), &mut y);
    y
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward<F: Scalar>(
    x: ArrayView2<'_, F>,
    weight: ArrayView2<'_, F>,
    dy: ArrayView2<'_, F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let mut dw = Array2::zeros(weight.raw_dim());
    general_mat_mul(F::one(), &x.t(), &dy, F::zero(), &mut dw);
    let db = dy.sum_axis(Axis(0));
    let mut dx = Array2::zeros(x.raw_dim());
    general_mat_mul(F::one(), &dy, &weight.t(), F::zero(), &mut dx);
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gradient_matches_finite_differences() {
        let x = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let w = array![[0.1, 0.2], [-0.3, 0.4], [0.5, -0.6]];
        let b = array![0.05, -0.05];
        let up = array![[1.0, -2.0], [0.5, 3.0]];
        let f = |x: &Array2<f64>, w: &Array2<f64>| (linear_forward(x.view(), w.view(), b.view()) * &up).sum();
        let (dx, dw, db) = linear_backward(x.view(), w.view(), up.view());
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let (mut a, mut c) = (x.clone(), x.clone());
                a[[i, j]] += h;
                c[[i, j]] -= h;
                assert!(((f(&a, &w) - f(&c, &w)) / (2.0 * h) - dx[[i, j]]).abs() < 1e-8);
            }
        }
        for i in 0..3 {
            for j in 0..2 {
                let (mut a, mut c) = (w.clone(), w.clone());
                a[[i, j]] += h;
                c[[i, j]] -= h;
                assert!(((f(&x, &a) - f(&x, &c)) / (2.0 * h) - dw[[i, j]]).abs() < 1e-8);
            }
        }
        assert_eq!(db, array![1.5, 1.0]);
    }

    #[test]
    fn empty_batch_is_fine() {
        let x = Array2::<f32>::zeros((0, 3));
        let w = Array2::<f32>::ones((3, 4));
        let y = linear_forward(x.view(), w.view(), Array1::zeros(4).view());
        assert_eq!(y.dim(), (0, 4));
    }
}
