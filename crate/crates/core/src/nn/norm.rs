//! Batch normalization over the rows of an `(N, C)` matrix.
//!
//! Channels-last activations of any rank reshape to `(N, C)` for free, so
//! the same routine serves the U-Net blocks and the MLP heads.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, Zip};

use super::{Mode, Scalar};

/// PyTorch defaults.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNormCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
    pub mode: Mode,
}

/// Normalizes `x` and, in train mode, updates the running statistics.
pub fn batch_norm_forward<F: Scalar>(
    x: ArrayView2<'_, F>,
    gamma: ArrayView1<'_, F>,
    beta: ArrayView1<'_, F>,
    mut running_mean: ArrayViewMut1<'_, F>,
    mut running_var: ArrayViewMut1<'_, F>,
    mode: Mode,
) -> (Array2<F>, BatchNormCache<F>) {
    let (n, c) = x.dim();
    let eps = F::of(BN_EPS);
    let (mean, inv_std) = match mode {
        Mode::Train | Mode::Calibrate { .. } if n > 0 => {
            let nf = F::from_usize(n).unwrap();
            let mean = x.sum_axis(Axis(0)) / nf;
            let mut var = Array1::<F>::zeros(c);
            for row in x.rows() {
                Zip::from(&mut var).and(&row).and(&mean).for_each(|v, &xi, &m| {
                    let d = xi - m;
                    *v += d * d;
                });
            }
            var /= nf;
            let m = match mode {
                Mode::Calibrate { seen } => F::one() / F::from_usize(seen + 1).unwrap(),
                _ => F::of(BN_MOMENTUM),
            };
            // Calibration keeps the biased variance so eval reproduces the
            // batch normalization of the calibration volume exactly.
            let unbias = if n > 1 && mode == Mode::Train {
                nf / (nf - F::one())
            } else {
                F::one()
            };
            Zip::from(&mut running_mean)
                .and(&mut running_var)
                .and(&mean)
                .and(&var)
                .for_each(|rm, rv, &bm, &bv| {
                    *rm = (F::one() - m) * *rm + m * bm;
                    *rv = (F::one() - m) * *rv + m * bv * unbias;
                });
            let inv = var.mapv(|v| F::one() / (v + eps).sqrt());
            (mean, inv)
        }
        Mode::Train | Mode::Calibrate { .. } => (Array1::zeros(c), Array1::ones(c)),
        Mode::Eval => (
            running_mean.to_owned(),
            running_var.mapv(|v| F::one() / (v + eps).sqrt()),
        ),
    };
    let mut xhat = x.to_owned();
    for mut row in xhat.rows_mut() {
        Zip::from(&mut row)
            .and(&mean)
            .and(&inv_std)
            .for_each(|v, &m, &s| *v = (*v - m) * s);
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        Zip::from(&mut row)
            .and(&gamma)
            .and(&beta)
            .for_each(|v, &g, &b| *v = *v * g + b);
    }
    (y, BatchNormCache { xhat, inv_std, mode })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<F: Scalar>(
    dy: ArrayView2<'_, F>,
    gamma: ArrayView1<'_, F>,
    cache: &BatchNormCache<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (n, c) = dy.dim();
    let dbeta = dy.sum_axis(Axis(0));
    let mut dgamma = Array1::<F>::zeros(c);
    for (dr, xr) in dy.rows().into_iter().zip(cache.xhat.rows()) {
        Zip::from(&mut dgamma)
            .and(&dr)
            .and(&xr)
            .for_each(|g, &d, &x| *g += d * x);
    }
    let mut dx = Array2::<F>::zeros((n, c));
    if n == 0 {
        return (dx, dgamma, dbeta);
    }
    match cache.mode {
        Mode::Train | Mode::Calibrate { .. } => {
            let nf = F::from_usize(n).unwrap();
            let scale = Zip::from(&gamma)
                .and(&cache.inv_std)
                .map_collect(|&g, &s| g * s / nf);
            for ((mut out, dr), xr) in dx
                .rows_mut()
                .into_iter()
                .zip(dy.rows())
                .zip(cache.xhat.rows())
            {
                for j in 0..c {
                    out[j] = scale[j] * (nf * dr[j] - dbeta[j] - xr[j] * dgamma[j]);
                }
            }
        }
        Mode::Eval => {
            for (mut out, dr) in dx.rows_mut().into_iter().zip(dy.rows()) {
                for j in 0..c {
                    out[j] = dr[j] * gamma[j] * cache.inv_std[j];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
