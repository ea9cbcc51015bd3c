//! Stride-1 "same" 3D convolution through im2col and GEMM.
//!
//! Weights are stored as a `(k^3 * C_in, C_out)` matrix whose row index is
//! `((dx * k + dy) * k + dz) * C_in + c_in`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array5, ArrayView1, ArrayView2, ArrayView5, Axis};

use super::Scalar;
use crate::par;

/// Fills `col` (`S x k^3*cin`, row-major) with zero-padded neighbourhoods.
fn im2col<F: Scalar>(x: &[F], dims: [usize; 3], cin: usize, k: usize, col: &mut [F]) {
    let [w, h, d] = dims;
    let p = (k / 2) as isize;
    let row_len = k * k * k * cin;
    col.fill(F::zero());
    for ox in 0..w {
        for oy in 0..h {
            for oz in 0..d {
                let s = (ox * h + oy) * d + oz;
                let row = &mut col[s * row_len..(s + 1) * row_len];
                // valid dz range: 0 <= oz + dz - p < d
                let dz_lo = (p - oz as isize).max(0) as usize;
                let dz_hi = ((d as isize - oz as isize + p).min(k as isize)) as usize;
                if dz_lo >= dz_hi {
                    continue;
                }
                let iz0 = (oz as isize + dz_lo as isize - p) as usize;
                let run = (dz_hi - dz_lo) * cin;
                for dx in 0..k {
                    let ix = ox as isize + dx as isize - p;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    for dy in 0..k {
                        let iy = oy as isize + dy as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = ((ix as usize * h + iy as usize) * d + iz0) * cin;
                        let dst = ((dx * k + dy) * k + dz_lo) * cin;
                        row[dst..dst + run].copy_from_slice(&x[src..src + run]);
                    }
                }
            }
        }
    }
}

fn kernel_size(weight_rows: usize, cin: usize) -> usize {
    let kk = weight_rows / cin;
    let k = (kk as f64).cbrt().round() as usize;
    assert_eq!(k * k * k * cin, weight_rows, "weight rows must be k^3 * cin");
    assert!(k % 2 == 1, "kernel size must be odd");
    k
}

/// `x`: `(B, W, H, D, C_in)`; `weight`: `(k^3 C_in, C_out)`; returns `(B, W, H, D, C_out)`.
pub fn conv3d_forward<F: Scalar>(
    x: ArrayView5<'_, F>,
    weight: ArrayView2<'_, F>,
    bias: ArrayView1<'_, F>,
) -> Array5<F> {
    let (b, w, h, d, cin) = x.dim();
    let cout = weight.ncols();
    let k = kernel_size(weight.nrows(), cin);
    let s = w * h * d;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let per_item = par::map_range(b, |i| {
        let item = &xs[i * s * cin..(i + 1) * s * cin];
        let mut col = vec![F::zero(); s * weight.nrows()];
        im2col(item, [w, h, d], cin, k, &mut col);
        let col = ArrayView2::from_shape((s, weight.nrows()), &col).expect("col shape");
        let mut out = Array2::from_shape_fn((s, cout), |(_, c)| bias[c]);
        general_mat_mul(F::one(), &col, &weight, F::one(), &mut out);
        out
    });
    let mut out = Array5::zeros((b, w, h, d, cout));
    for (i, item) in per_item.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(item.as_slice().expect("standard layout"));
    }
    out
}

#[derive(Debug, Clone)]
pub struct Conv3dGrads<F> {
    pub input: Array5<F>,
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

/// Gradients of [`conv3d_forward`] given the upstream gradient `dout`.
///
/// The input gradient is itself a convolution of `dout` with the
/// spatially flipped, channel-transposed kernel.
pub fn conv3d_backward<F: Scalar>(
    x: ArrayView5<'_, F>,
    weight: ArrayView2<'_, F>,
    dout: ArrayView5<'_, F>,
    need_input_grad: bool,
) -> Conv3dGrads<F> {
    let (b, w, h, d, cin) = x.dim();
    let cout = weight.ncols();
    let k = kernel_size(weight.nrows(), cin);
    let kk = k * k * k;
    let s = w * h * d;
    assert_eq!(dout.dim(), (b, w, h, d, cout), "dout shape");

    let mut flipped = Array2::<F>::zeros((kk * cout, cin));
    if need_input_grad {
        for kidx in 0..kk {
            let fidx = kk - 1 - kidx;
            for ci in 0..cin {
                for co in 0..cout {
                    flipped[[fidx * cout + co, ci]] = weight[[kidx * cin + ci, co]];
                }
            }
        }
    }

    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dout = dout.as_standard_layout();
    let ds = dout.as_slice().expect("standard layout");
    let per_item = par::map_range(b, |i| {
        let item = &xs[i * s * cin..(i + 1) * s * cin];
        let gitem = &ds[i * s * cout..(i + 1) * s * cout];
        let g = ArrayView2::from_shape((s, cout), gitem).expect("dout shape");

        let mut col = vec![F::zero(); s * kk * cin];
        im2col(item, [w, h, d], cin, k, &mut col);
        let colv = ArrayView2::from_shape((s, kk * cin), &col).expect("col shape");
        let mut dw = Array2::<F>::zeros((kk * cin, cout));
        general_mat_mul(F::one(), &colv.t(), &g, F::zero(), &mut dw);
        drop(col);
        let db = g.sum_axis(Axis(0));

        let dx = if need_input_grad {
            let mut gcol = vec![F::zero(); s * kk * cout];
            im2col(gitem, [w, h, d], cout, k, &mut gcol);
            let gcolv = ArrayView2::from_shape((s, kk * cout), &gcol).expect("col shape");
            let mut dx = Array2::<F>::zeros((s, cin));
            general_mat_mul(F::one(), &gcolv, &flipped, F::zero(), &mut dx);
            Some(dx)
        } else {
            None
        };
        (dw, db, dx)
    });

    let mut grads = Conv3dGrads {
        input: Array5::zeros(if need_input_grad {
            (b, w, h, d, cin)
        } else {
            (0, 0, 0, 0, 0)
        }),
        weight: Array2::zeros((kk * cin, cout)),
        bias: Array1::zeros(cout),
    };
    for (i, (dw, db, dx)) in per_item.into_iter().enumerate() {
        grads.weight += &dw;
        grads.bias += &db;
        if let Some(dx) = dx {
            grads
                .input
                .index_axis_mut(Axis(0), i)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(dx.as_slice().expect("standard layout"));
        }
    }
    grads
}
