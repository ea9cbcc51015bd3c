use ndarray::{s, Array2, Array5, ArrayD, ArrayView2, ArrayView5, ArrayViewD, Axis, Zip};

use super::Scalar;

pub fn relu<F: Scalar>(x: ArrayViewD<'_, F>) -> ArrayD<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Gradient of ReLU; `pre` is the activation input.
pub fn relu_backward<F: Scalar>(pre: ArrayViewD<'_, F>, dy: ArrayViewD<'_, F>) -> ArrayD<F> {
    Zip::from(&pre)
        .and(&dy)
        .map_collect(|&p, &g| if p > F::zero() { g } else { F::zero() })
}

/// 2x2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the winning position inside its window (`(dx*2+dy)*2+dz`).
pub fn maxpool2_forward<F: Scalar>(x: ArrayView5<'_, F>) -> (Array5<F>, Array5<u8>) {
    let (b, w, h, d, c) = x.dim();
    assert!(w % 2 == 0 && h % 2 == 0 && d % 2 == 0, "pooling needs even dims");
    let shape = (b, w / 2, h / 2, d / 2, c);
    let mut out = Array5::from_elem(shape, F::neg_infinity());
    let mut arg = Array5::<u8>::zeros(shape);
    for n in 0..b {
        for ox in 0..w / 2 {
            for oy in 0..h / 2 {
                for oz in 0..d / 2 {
                    for k in 0..8u8 {
                        let (dx, dy, dz) = ((k >> 2) as usize, ((k >> 1) & 1) as usize, (k & 1) as usize);
                        let src = x.slice(s![n, 2 * ox + dx, 2 * oy + dy, 2 * oz + dz, ..]);
                        let mut dst = out.slice_mut(s![n, ox, oy, oz, ..]);
                        let mut am = arg.slice_mut(s![n, ox, oy, oz, ..]);
                        for ch in 0..c {
                            if src[ch] > dst[ch] {
                                dst[ch] = src[ch];
                                am[ch] = k;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<F: Scalar>(dy: ArrayView5<'_, F>, arg: ArrayView5<'_, u8>) -> Array5<F> {
    let (b, w, h, d, c) = dy.dim();
    let mut dx = Array5::zeros((b, 2 * w, 2 * h, 2 * d, c));
    for n in 0..b {
        for ox in 0..w {
            for oy in 0..h {
                for oz in 0..d {
                    for ch in 0..c {
                        let k = arg[[n, ox, oy, oz, ch]] as usize;
                        let (px, py, pz) = (2 * ox + (k >> 2), 2 * oy + ((k >> 1) & 1), 2 * oz + (k & 1));
                        dx[[n, px, py, pz, ch]] += dy[[n, ox, oy, oz, ch]];
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by 2 along every spatial axis.
pub fn upsample2_forward<F: Scalar>(x: ArrayView5<'_, F>) -> Array5<F> {
    let (b, w, h, d, c) = x.dim();
    let mut out = Array5::zeros((b, 2 * w, 2 * h, 2 * d, c));
    for n in 0..b {
        for ox in 0..2 * w {
            for oy in 0..2 * h {
                for oz in 0..2 * d {
                    out.slice_mut(s![n, ox, oy, oz, ..])
                        .assign(&x.slice(s![n, ox / 2, oy / 2, oz / 2, ..]));
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Scalar>(dy: ArrayView5<'_, F>) -> Array5<F> {
    let (b, w, h, d, c) = dy.dim();
    let mut dx = Array5::zeros((b, w / 2, h / 2, d / 2, c));
    for n in 0..b {
        for ox in 0..w {
            for oy in 0..h {
                for oz in 0..d {
                    let src = dy.slice(s![n, ox, oy, oz, ..]);
                    let mut dst = dx.slice_mut(s![n, ox / 2, oy / 2, oz / 2, ..]);
                    dst += &src;
                }
            }
        }
    }
    dx
}

/// Concatenates along the channel (last) axis, `a` first.
pub fn concat_channels<'a, F: Scalar>(a: ArrayView5<'a, F>, b: ArrayView5<'a, F>) -> Array5<F> {
    ndarray::concatenate(Axis(4), &[a, b])
        .expect("concat shapes")
        .as_standard_layout()
        .to_owned()
}

/// Inverse of [`concat_channels`]: splits off the first `c_first` channels.
pub fn split_channels<F: Scalar>(x: ArrayView5<'_, F>, c_first: usize) -> (Array5<F>, Array5<F>) {
    (
        x.slice(s![.., .., .., .., ..c_first]).to_owned(),
        x.slice(s![.., .., .., .., c_first..]).to_owned(),
    )
}

/// Softmax over the last axis.
pub fn softmax_last<F: Scalar>(x: ArrayViewD<'_, F>) -> ArrayD<F> {
    let mut out = x.as_standard_layout().to_owned();
    let last = Axis(out.ndim() - 1);
    for mut lane in out.lanes_mut(last) {
        let max = lane.fold(F::neg_infinity(), |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient of [`softmax_last`] given its output `p`.
pub fn softmax_last_backward<F: Scalar>(p: ArrayViewD<'_, F>, dp: ArrayViewD<'_, F>) -> ArrayD<F> {
    let mut dx = dp.to_owned();
    let last = Axis(p.ndim() - 1);
    for (mut g, pl) in dx.lanes_mut(last).into_iter().zip(p.lanes(last)) {
        let dot = Zip::from(&g).and(&pl).fold(F::zero(), |a, &x, &y| a + x * y);
        Zip::from(&mut g).and(&pl).for_each(|x, &y| *x = y * (*x - dot));
    }
    dx
}

const NORM_EPS: f64 = 1e-12;

/// Row-wise `x / max(|x|, eps)`.
pub fn l2_normalize_rows<F: Scalar>(x: ArrayView2<'_, F>) -> Array2<F> {
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        let n = row.dot(&row).sqrt().max(F::of(NORM_EPS));
        row.mapv_inplace(|v| v / n);
    }
    y
}

pub fn l2_normalize_rows_backward<F: Scalar>(x: ArrayView2<'_, F>, dy: ArrayView2<'_, F>) -> Array2<F> {
    let mut dx = Array2::zeros(x.raw_dim());
    for ((mut out, xr), gr) in dx.rows_mut().into_iter().zip(x.rows()).zip(dy.rows()) {
        let n = xr.dot(&xr).sqrt();
        if n <= F::of(NORM_EPS) {
            out.assign(&gr.mapv(|g| g / F::of(NORM_EPS)));
            continue;
        }
        let dot = xr.dot(&gr) / (n * n);
        Zip::from(&mut out)
            .and(&xr)
            .and(&gr)
            .for_each(|o, &xv, &g| *o = (g - xv * dot) / n);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    #[test]
    fn pool_then_upsample_shapes_and_routing() {
        let x = Array::from_shape_fn((1, 4, 4, 4, 2), |(_, a, b, c, ch)| (a * 16 + b * 4 + c + ch * 100) as f64);
        let (p, arg) = maxpool2_forward(x.view());
        assert_eq!(p.dim(), (1, 2, 2, 2, 2));
        assert_eq!(p[[0, 0, 0, 0, 0]], (16 + 4 + 1) as f64);
        let g = maxpool2_backward(Array5::<f64>::ones(p.raw_dim()).view(), arg.view());
        assert_eq!(g.sum(), 16.0);
        assert_eq!(g[[0, 1, 1, 1, 0]], 1.0);
        assert_eq!(g[[0, 0, 0, 0, 0]], 0.0);
        let u = upsample2_forward(p.view());
        assert_eq!(u.dim(), (1, 4, 4, 4, 2));
        assert_eq!(u[[0, 3, 2, 1, 1]], p[[0, 1, 1, 0, 1]]);
        let back = upsample2_backward(Array5::<f64>::ones(u.raw_dim()).view());
        assert!(back.iter().all(|&v| v == 8.0));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = array![[0.3, -1.2, 2.0], [0.0, 0.5, 0.5]].into_dyn();
        let up = array![[1.0, 0.0, -2.0], [0.3, 0.2, 0.1]].into_dyn();
        let f = |x: &ArrayD<f64>| (softmax_last(x.view()) * &up).sum();
        let p = softmax_last(x.view());
        let g = softmax_last_backward(p.view(), up.view());
        for i in 0..2 {
            for j in 0..3 {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[[i, j]] += 1e-6;
                b[[i, j]] -= 1e-6;
                assert!(((f(&a) - f(&b)) / 2e-6 - g[[i, j]]).abs() < 1e-8);
            }
        }
        for row in p.lanes(Axis(1)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_gradient() {
        let x = array![[3.0, 4.0, 0.0], [1.0, -2.0, 2.0]];
        let up = array![[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let f = |x: &Array2<f64>| (l2_normalize_rows(x.view()) * &up).sum();
        let g = l2_normalize_rows_backward(x.view(), up.view());
        for i in 0..2 {
            for j in 0..3 {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[[i, j]] += 1e-6;
                b[[i, j]] -= 1e-6;
                assert!(((f(&a) - f(&b)) / 2e-6 - g[[i, j]]).abs() < 1e-8);
            }
        }
        assert!((l2_normalize_rows(x.view())[[0, 0]] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn concat_split_inverse() {
        let a = Array::from_shape_fn((2, 2, 2, 2, 3), |(n, x, y, z, c)| (n + x + y + z + c) as f32);
        let b = Array::from_shape_fn((2, 2, 2, 2, 1), |(n, ..)| -(n as f32));
        let cat = concat_channels(a.view(), b.view());
        assert_eq!(cat.dim(), (2, 2, 2, 2, 4));
        let (a2, b2) = split_channels(cat.view(), 3);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }
}
