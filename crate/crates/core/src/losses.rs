//! Training objectives with analytic gradients, evaluated in `f64`.
//!
//! Feature losses take `(M, n)` row matrices. Segmentation losses take
//! channels-last probability tensors whose last axis is the class.

use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewD, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard for row normalization in cosine terms.
pub const NORM_EPS: f64 = 1e-8;
/// Smoothing added to numerator and denominator of soft Dice.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probabilities are clamped here before taking logs.
pub const CE_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sim: f64,
    pub alpha_rec: f64,
    pub mu_std: f64,
    pub gamma_cov: f64,
    pub beta_orth: f64,
    /// Target standard deviation of the variance hinge.
    pub eta: f64,
    /// Added to the variance before the square root.
    pub epsilon: f64,
    pub cs_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sim: 1.0,
            alpha_rec: 10.0,
            mu_std: 1e-3,
            gamma_cov: 1e-3,
            beta_orth: 100.0,
            eta: 1.0,
            epsilon: 1e-4,
            cs_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_sim,
            self.alpha_rec,
            self.mu_std,
            self.gamma_cov,
            self.beta_orth,
            self.cs_weight,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.eta > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("eta and epsilon must be positive".into()));
        }
        Ok(())
    }
}

fn same_shape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Row-wise cosine of `a` against `b` plus its gradient with respect to `a`.
fn cosine_rows(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>) {
    let mut cos = Vec::with_capacity(a.nrows());
    let mut grad = Array2::zeros(a.raw_dim());
    for ((ar, br), mut g) in a.rows().into_iter().zip(b.rows()).zip(grad.rows_mut()) {
        let na = ar.dot(&ar).sqrt();
        let nb = br.dot(&br).sqrt().max(NORM_EPS);
        let c = ar.dot(&br) / (na.max(NORM_EPS) * nb);
        cos.push(c);
        if na > NORM_EPS {
            Zip::from(&mut g)
                .and(&ar)
                .and(&br)
                .for_each(|g, &x, &y| *g = (y / nb - c * x / na) / na);
        } else {
            Zip::from(&mut g).and(&br).for_each(|g, &y| *g = y / (nb * NORM_EPS));
        }
    }
    (cos, grad)
}

/// Value and gradients of [`sim_pair`]. The `z` gradients are always zero.
#[derive(Debug, Clone)]
pub struct SimGrad {
    pub value: f64,
    pub dp1: Array2<f64>,
    pub dz1: Array2<f64>,
    pub dp2: Array2<f64>,
    pub dz2: Array2<f64>,
}

/// `mean_m [ -cos(p1, z2) / 2 - cos(p2, z1) / 2 ]` with `z` treated as a
/// constant.
pub fn sim_pair(
    p1: ArrayView2<'_, f64>,
    z1: ArrayView2<'_, f64>,
    p2: ArrayView2<'_, f64>,
    z2: ArrayView2<'_, f64>,
) -> Result<SimGrad> {
    same_shape(p1, z1, "sim_pair")?;
    same_shape(p1, p2, "sim_pair")?;
    same_shape(p1, z2, "sim_pair")?;
    let m = p1.nrows();
    if m == 0 {
        return Err(Error::InvalidInput("sim_pair needs at least one row".into()));
    }
    let (c12, g1) = cosine_rows(p1, z2);
    let (c21, g2) = cosine_rows(p2, z1);
    let value = -(c12.iter().sum::<f64>() + c21.iter().sum::<f64>()) / (2.0 * m as f64);
    let scale = -0.5 / m as f64;
    Ok(SimGrad {
        value,
        dp1: g1 * scale,
        dz1: Array2::zeros(z1.raw_dim()),
        dp2: g2 * scale,
        dz2: Array2::zeros(z2.raw_dim()),
    })
}

/// Mean of the per-layer similarity terms.
pub fn sim_total(terms: &[f64]) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::InvalidInput("sim_total needs at least one layer".into()));
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Mean row-wise cosine between encoder and decoder projections, or its
/// square when `squared` is set. Gradients flow to both arguments.
pub fn orth_loss(
    z_e: ArrayView2<'_, f64>,
    z_d: ArrayView2<'_, f64>,
    squared: bool,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    same_shape(z_e, z_d, "orth_loss")?;
    let m = z_e.nrows();
    if m == 0 {
        return Err(Error::InvalidInput("orth_loss needs at least one row".into()));
    }
    let (cos, mut ge) = cosine_rows(z_e, z_d);
    let (_, mut gd) = cosine_rows(z_d, z_e);
    let coef: Vec<f64> = cos
        .iter()
        .map(|&c| if squared { 2.0 * c } else { 1.0 } / m as f64)
        .collect();
    for (i, &k) in coef.iter().enumerate() {
        ge.row_mut(i).mapv_inplace(|v| v * k);
        gd.row_mut(i).mapv_inplace(|v| v * k);
    }
    let value = cos.iter().map(|&c| if squared { c * c } else { c }).sum::<f64>() / m as f64;
    Ok((value, ge, gd))
}

fn centered(z: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = z.mean_axis(Axis(0)).expect("non-empty");
    &z - &mean
}

fn check_layers(zs: &[ArrayView2<'_, f64>], what: &str) -> Result<()> {
    if zs.is_empty() {
        return Err(Error::InvalidInput(format!("{what} needs at least one layer")));
    }
    if let Some(z) = zs.iter().find(|z| z.nrows() < 2) {
        return Err(Error::InvalidInput(format!(
            "{what} needs at least two samples, got {}",
            z.nrows()
        )));
    }
    Ok(())
}

/// Per-dimension hinge `max(0, eta - sqrt(var + eps))` averaged over
/// dimensions, then over layers. Variance is unbiased over the rows.
pub fn std_loss(zs: &[ArrayView2<'_, f64>], eta: f64, eps: f64) -> Result<(f64, Vec<Array2<f64>>)> {
    check_layers(zs, "std_loss")?;
    let k = zs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(zs.len());
    for z in zs {
        let (m, n) = z.dim();
        let zc = centered(*z);
        let var = zc.map_axis(Axis(0), |c| c.dot(&c) / (m - 1) as f64);
        let s = var.mapv(|v| (v + eps).sqrt());
        total += s.iter().map(|&s| (eta - s).max(0.0)).sum::<f64>() / (n as f64 * k);
        // dS/dz_ij = (z_ij - mean_j) / ((M - 1) S_j)
        let coef = s.mapv(|s| if s < eta { -1.0 / (k * n as f64 * (m - 1) as f64 * s) } else { 0.0 });
        grads.push(zc * &coef);
    }
    Ok((total, grads))
}

/// Sum of squared off-diagonal covariance entries divided by the embedding
/// width, averaged over layers. Covariance uses divisor `M - 1`.
pub fn cov_loss(zs: &[ArrayView2<'_, f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
    check_layers(zs, "cov_loss")?;
    let k = zs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(zs.len());
    for z in zs {
        let (m, n) = z.dim();
        let zc = centered(*z);
        let mut c = zc.t().dot(&zc) / (m - 1) as f64;
        c.diag_mut().fill(0.0);
        total += c.iter().map(|v| v * v).sum::<f64>() / (n as f64 * k);
        // centering needs no correction: the columns of zc sum to zero
        grads.push(zc.dot(&c) * (4.0 / (n as f64 * k * (m - 1) as f64)));
    }
    Ok((total, grads))
}

/// Mean squared error and its gradient with respect to `output`.
pub fn rec_loss(output: ArrayViewD<'_, f64>, target: ArrayViewD<'_, f64>) -> Result<(f64, ArrayD<f64>)> {
    if output.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "rec_loss: {:?} vs {:?}",
            output.shape(),
            target.shape()
        )));
    }
    let n = output.len().max(1) as f64;
    let diff = &output - &target;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

fn check_probs(p: ArrayViewD<'_, f64>, what: &str) -> Result<usize> {
    if p.ndim() < 2 {
        return Err(Error::Shape(format!("{what}: need a class axis")));
    }
    let k = p.shape()[p.ndim() - 1];
    if k < 2 {
        return Err(Error::Shape(format!("{what}: need at least one foreground class")));
    }
    let last = Axis(p.ndim() - 1);
    for lane in p.lanes(last) {
        let s = lane.sum();
        if (s - 1.0).abs() > 1e-3 || lane.iter().any(|&v| !(v >= -1e-6)) {
            return Err(Error::InvalidInput(format!(
                "{what}: probabilities must be non-negative and sum to 1 (got {s})"
            )));
        }
    }
    Ok(k)
}

/// `1 - mean_c dice_c` over foreground classes with
/// `dice_c = (2 sum(a b) + s) / (sum(a^2) + sum(b^2) + s)`, summed over all
/// voxels of the batch, plus gradients for both arguments.
fn soft_dice_loss(a: ArrayViewD<'_, f64>, b: ArrayViewD<'_, f64>) -> (f64, ArrayD<f64>, ArrayD<f64>) {
    let k = a.shape()[a.ndim() - 1];
    let last = Axis(a.ndim() - 1);
    let mut inter = vec![0.0; k];
    let mut sa = vec![0.0; k];
    let mut sb = vec![0.0; k];
    for (la, lb) in a.lanes(last).into_iter().zip(b.lanes(last)) {
        for c in 1..k {
            inter[c] += la[c] * lb[c];
            sa[c] += la[c] * la[c];
            sb[c] += lb[c] * lb[c];
        }
    }
    let fg = (k - 1) as f64;
    let mut value = 1.0;
    // d(1 - dice/fg)/da = -(2 b den - num 2 a) / (den^2 fg)
    let mut ca = vec![(0.0, 0.0); k];
    for c in 1..k {
        let num = 2.0 * inter[c] + DICE_SMOOTH;
        let den = sa[c] + sb[c] + DICE_SMOOTH;
        value -= num / den / fg;
        ca[c] = (-2.0 / (den * fg), 2.0 * num / (den * den * fg));
    }
    let mut ga = ArrayD::zeros(a.raw_dim());
    let mut gb = ArrayD::zeros(b.raw_dim());
    for (((mut ra, mut rb), la), lb) in ga
        .lanes_mut(last)
        .into_iter()
        .zip(gb.lanes_mut(last))
        .zip(a.lanes(last))
        .zip(b.lanes(last))
    {
        for c in 1..k {
            let (p, q) = ca[c];
            ra[c] = p * lb[c] + q * la[c];
            rb[c] = p * la[c] + q * lb[c];
        }
    }
    (value, ga, gb)
}

/// Soft Dice disagreement between two timepoints' predictions.
pub fn cs_loss(
    prob_j: ArrayViewD<'_, f64>,
    prob_k: ArrayViewD<'_, f64>,
) -> Result<(f64, ArrayD<f64>, ArrayD<f64>)> {
    if prob_j.shape() != prob_k.shape() {
        return Err(Error::Shape(format!(
            "cs_loss: {:?} vs {:?}",
            prob_j.shape(),
            prob_k.shape()
        )));
    }
    check_probs(prob_j.view(), "cs_loss")?;
    check_probs(prob_k.view(), "cs_loss")?;
    Ok(soft_dice_loss(prob_j, prob_k))
}

/// Parts of the supervised loss.
#[derive(Debug, Clone)]
pub struct SupLoss {
    pub dice: f64,
    pub ce: f64,
    pub grad: ArrayD<f64>,
}

impl SupLoss {
    pub fn value(&self) -> f64 {
        self.dice + self.ce
    }
}

/// `(1 - soft Dice against the one-hot label) + mean cross-entropy`;
/// `label` has the shape of `prob` without the class axis.
pub fn sup_loss(prob: ArrayViewD<'_, f64>, label: ArrayViewD<'_, u16>) -> Result<SupLoss> {
    let k = check_probs(prob.view(), "sup_loss")?;
    if label.shape() != &prob.shape()[..prob.ndim() - 1] {
        return Err(Error::Shape(format!(
            "sup_loss: label {:?} vs prob {:?}",
            label.shape(),
            prob.shape()
        )));
    }
    if let Some(&bad) = label.iter().find(|&&l| l as usize >= k) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {k} classes")));
    }
    let last = Axis(prob.ndim() - 1);
    let mut onehot = ArrayD::zeros(prob.raw_dim());
    for (mut lane, &l) in onehot.lanes_mut(last).into_iter().zip(label.iter()) {
        lane[l as usize] = 1.0;
    }
    let (dice, mut grad, _) = soft_dice_loss(prob.view(), onehot.view());
    let voxels = label.len().max(1) as f64;
    let mut ce = 0.0;
    for ((mut g, p), &l) in grad.lanes_mut(last).into_iter().zip(prob.lanes(last)).zip(label.iter()) {
        let py = p[l as usize];
        ce -= py.max(CE_CLAMP).ln();
        if py > CE_CLAMP {
            g[l as usize] -= 1.0 / (py * voxels);
        }
    }
    Ok(SupLoss {
        dice,
        ce: ce / voxels,
        grad,
    })
}

/// Unweighted pretraining terms; `None` marks a disabled term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PretrainParts {
    pub sim: Option<f64>,
    pub rec: Option<f64>,
    pub std: Option<f64>,
    pub cov: Option<f64>,
    pub orth: Option<f64>,
}

pub fn pretrain_total(parts: &PretrainParts, w: &LossWeights) -> f64 {
    [
        (parts.sim, w.lambda_sim),
        (parts.rec, w.alpha_rec),
        (parts.std, w.mu_std),
        (parts.cov, w.gamma_cov),
        (parts.orth, w.beta_orth),
    ]
    .iter()
    .filter_map(|&(v, k)| v.map(|v| v * k))
    .sum()
}

pub fn finetune_total(sup: f64, cs: Option<f64>, w: &LossWeights) -> f64 {
    sup + cs.map_or(0.0, |c| w.cs_weight * c)
}
