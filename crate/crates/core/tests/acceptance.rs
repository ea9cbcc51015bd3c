//! End-to-end acceptance criteria. Each test writes one `criterion N ... PASS|FAIL`
//! line to stderr and then asserts it. A global lock runs them one at a time so that the
//! measured runtimes are not inflated by each other.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use longiseg::diagnostics::{diagnose, DiagnoseOptions};
use longiseg::losses::*;
use longiseg::metrics::{aspc, dice, evaluate_split, hd95, iou, label_volume_mm3, stcs};
use longiseg::network::{LayerKind, UNet, UNetSpec};
use longiseg::nn::Mode;
use longiseg::par;
use longiseg::sampling::{gather_array, make_plan};
use longiseg::synth::{generate_dataset, generate_subject, PhantomConfig};
use longiseg::training::*;
use longiseg::volume::{DatasetManifest, LabelVolume};
use ndarray::{array, concatenate, s, Array2, Array3, Array5, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

struct Verdict {
    id: &'static str,
    name: &'static str,
    start: Instant,
    budget_s: Option<f64>,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Verdict {
    fn new(id: &'static str, name: &'static str, budget_s: Option<f64>) -> Self {
        Self {
            id,
            name,
            start: Instant::now(),
            budget_s,
            failures: vec![],
            notes: vec![],
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    fn finish(mut self) {
        let t = self.start.elapsed().as_secs_f64();
        if let Some(b) = self.budget_s {
            self.check(t <= b, format!("runtime {t:.1}s exceeds {b}s"));
        }
        let status = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        let mut detail = self.notes.clone();
        detail.extend(self.failures.iter().map(|f| format!("failed: {f}")));
        // straight to the stream so the line survives test output capture
        let _ = writeln!(
            std::io::stderr(),
            "criterion {} {}: {status} ({:.1}s) {}",
            self.id,
            self.name,
            t,
            detail.join("; ")
        );
        assert!(self.failures.is_empty(), "criterion {} failed: {:?}", self.id, self.failures);
    }
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_loss_identities() {
    let _g = lock();
    let mut v = Verdict::new("1", "loss identity suite", Some(10.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let a = rand2(&mut rng, 6, 5);
    let b = rand2(&mut rng, 6, 5);
    let r = sim_pair(a.view(), b.view(), b.view(), a.view()).unwrap();
    v.check(close(r.value, -1.0, 1e-6), format!("sim_pair aligned = {}", r.value));
    let p = array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
    let z = array![[0.0, 3.0, 1.0], [1.0, 0.0, -4.0]];
    let r = sim_pair(p.view(), z.view(), p.view(), z.view()).unwrap();
    v.check(close(r.value, 0.0, 1e-12), format!("sim_pair orthogonal = {}", r.value));

    v.check(sim_total(&[-0.3]).unwrap() == -0.3, "sim_total single");
    v.check(close(sim_total(&[-1.0, 0.0]).unwrap(), -0.5, 1e-15), "sim_total (-1, 0)");

    let e = rand2(&mut rng, 5, 4);
    v.check(close(orth_loss(e.view(), e.view(), false).unwrap().0, 1.0, 1e-12), "orth same");
    let neg = -&e;
    v.check(close(orth_loss(e.view(), neg.view(), false).unwrap().0, -1.0, 1e-12), "orth opposite");
    let o1 = array![[1.0, 0.0], [0.0, 1.0]];
    let o2 = array![[0.0, 5.0], [-2.0, 0.0]];
    v.check(close(orth_loss(o1.view(), o2.view(), false).unwrap().0, 0.0, 1e-15), "orth orthogonal");
    for _ in 0..200 {
        let (x, y) = (rand2(&mut rng, 5, 4), rand2(&mut rng, 5, 4));
        for sq in [false, true] {
            let o = orth_loss(x.view(), y.view(), sq).unwrap().0;
            v.check((-1.0..=1.0).contains(&o), format!("orth out of range {o}"));
        }
    }

    let same = Array2::from_elem((6, 3), 0.7);
    let (sv, _) = std_loss(&[same.view()], 1.0, 1e-4).unwrap();
    v.check(close(sv, 1.0 - 1e-2, 1e-12), format!("std identical rows = {sv}"));
    let wide = array![[3.0, -4.0], [-3.0, 4.0], [0.0, 0.0]];
    let (sv, _) = std_loss(&[wide.view()], 1.0, 1e-4).unwrap();
    v.check(sv == 0.0, format!("std wide = {sv}"));
    // two samples +-a have unbiased std a*sqrt(2)
    let (a1, a2) = (0.5 / 2f64.sqrt(), 2.0 / 2f64.sqrt());
    let two = array![[a1, a2], [-a1, -a2]];
    let (sv, _) = std_loss(&[two.view()], 1.0, 1e-4).unwrap();
    let want = (1.0 - (0.25f64 + 1e-4).sqrt()) / 2.0;
    v.check(close(sv, want, 1e-12) && close(sv, 0.25, 1e-4), format!("std (0.5, 2.0) = {sv}"));

    let diag = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
    let (cv, _) = cov_loss(&[diag.view()]).unwrap();
    v.check(close(cv, 0.0, 1e-15), format!("cov diagonal = {cv}"));
    let corr = array![[1.0, 1.0], [-1.0, -1.0]];
    let (cv, _) = cov_loss(&[corr.view()]).unwrap();
    v.check(close(cv, 4.0, 1e-12), format!("cov hand case = {cv}"));

    let t = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (i[0] + 2 * i[1] + 3 * i[2]) as f64 * 0.1);
    v.check(rec_loss(t.view(), t.view()).unwrap().0 == 0.0, "rec identical");
    let shifted = &t + 0.5;
    v.check(close(rec_loss(shifted.view(), t.view()).unwrap().0, 0.25, 1e-12), "rec offset");

    let probs = ArrayD::from_shape_fn(IxDyn(&[4, 3]), |i| [0.2, 0.3, 0.5][(i[1] + i[0]) % 3]);
    v.check(close(cs_loss(probs.view(), probs.view()).unwrap().0, 0.0, 1e-12), "cs identical");
    let hard = |labels: &[usize], k: usize| {
        ArrayD::from_shape_fn(IxDyn(&[labels.len(), k]), |i| (labels[i[0]] == i[1]) as u8 as f64)
    };
    let dj = hard(&[1, 1, 2, 2, 0, 0], 3);
    let dk = hard(&[2, 2, 1, 1, 0, 0], 3);
    let cs = cs_loss(dj.view(), dk.view()).unwrap().0;
    v.check(close(cs, 1.0, 1e-5), format!("cs disjoint = {cs}"));
    let h1 = hard(&[1, 1, 1, 1, 0, 0, 0, 0], 2);
    let h2 = hard(&[0, 0, 1, 1, 1, 1, 0, 0], 2);
    let cs = cs_loss(h1.view(), h2.view()).unwrap().0;
    v.check(close(cs, 0.5, 1e-5), format!("cs half overlap = {cs}"));

    let lab = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0u16, 1, 2, 3, 3, 1]).unwrap();
    let onehot = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (lab[[i[0], i[1]]] as usize == i[2]) as u8 as f64);
    let sl = sup_loss(onehot.view(), lab.view()).unwrap();
    v.check(close(sl.dice, 0.0, 1e-12) && sl.ce == 0.0, format!("sup perfect = {} {}", sl.dice, sl.ce));
    let uni = ArrayD::from_elem(IxDyn(&[2, 3, 4]), 0.25);
    let sl = sup_loss(uni.view(), lab.view()).unwrap();
    v.check(close(sl.ce, 4f64.ln(), 1e-12), format!("sup uniform ce = {}", sl.ce));

    let unit = PretrainParts {
        sim: Some(1.0),
        rec: Some(1.0),
        std: Some(1.0),
        cov: Some(1.0),
        orth: Some(1.0),
    };
    let zero = LossWeights {
        lambda_sim: 0.0,
        alpha_rec: 0.0,
        mu_std: 0.0,
        gamma_cov: 0.0,
        beta_orth: 0.0,
        cs_weight: 0.0,
        ..LossWeights::default()
    };
    v.check(pretrain_total(&unit, &zero) == 0.0, "total with zero weights");
    let tot = pretrain_total(&unit, &LossWeights::default());
    v.check(close(tot, 111.002, 1e-9), format!("total with defaults = {tot}"));
    v.check(finetune_total(0.7, Some(0.4), &zero) == 0.7, "finetune total without cs");
    v.finish();
}

// ---------------------------------------------------------------- criterion 2

/// Largest absolute deviation relative to the largest finite-difference entry.
fn rel_err(analytic: &ArrayD<f64>, fd: &ArrayD<f64>) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(fd)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

fn central_fd(x: &ArrayD<f64>, f: impl Fn(&ArrayD<f64>) -> f64) -> ArrayD<f64> {
    let h = 1e-6;
    let mut g = ArrayD::zeros(x.raw_dim());
    for (i, gi) in g.iter_mut().enumerate() {
        let mut a = x.clone();
        let mut b = x.clone();
        a.as_slice_mut().unwrap()[i] += h;
        b.as_slice_mut().unwrap()[i] -= h;
        *gi = (f(&a) - f(&b)) / (2.0 * h);
    }
    g
}

fn d2(a: &Array2<f64>) -> ArrayD<f64> {
    a.clone().into_dyn()
}

fn two(x: &ArrayD<f64>) -> Array2<f64> {
    x.clone().into_dimensionality().unwrap()
}

fn softmax_rows(r: usize, k: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let mut p = Array2::from_shape_fn((r, k), |_| rng.gen_range(-1.0..1.0f64).exp());
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p.into_dyn()
}

#[test]
fn criterion_2_gradients() {
    let _g = lock();
    let mut v = Verdict::new("2", "stop-gradient and finite differences", Some(30.0));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut record = |v: &mut Verdict, name: &str, e: f64| {
        worst = worst.max(e);
        v.check(e < 1e-4, format!("{name} rel err {e:.2e}"));
    };

    let (p1, z1, p2, z2) = (
        rand2(&mut rng, 5, 4),
        rand2(&mut rng, 5, 4),
        rand2(&mut rng, 5, 4),
        rand2(&mut rng, 5, 4),
    );
    let g = sim_pair(p1.view(), z1.view(), p2.view(), z2.view()).unwrap();
    v.check(g.dz1.iter().chain(g.dz2.iter()).all(|&x| x == 0.0), "sim_pair z-branch gradient not zero");
    let fd = central_fd(&d2(&p1), |x| sim_pair(two(x).view(), z1.view(), p2.view(), z2.view()).unwrap().value);
    record(&mut v, "sim_pair dp1", rel_err(&d2(&g.dp1), &fd));
    let fd = central_fd(&d2(&p2), |x| sim_pair(p1.view(), z1.view(), two(x).view(), z2.view()).unwrap().value);
    record(&mut v, "sim_pair dp2", rel_err(&d2(&g.dp2), &fd));

    for sq in [false, true] {
        let (e, d) = (rand2(&mut rng, 5, 4), rand2(&mut rng, 5, 4));
        let (_, ge, gd) = orth_loss(e.view(), d.view(), sq).unwrap();
        let fd = central_fd(&d2(&e), |x| orth_loss(two(x).view(), d.view(), sq).unwrap().0);
        record(&mut v, "orth d_e", rel_err(&d2(&ge), &fd));
        let fd = central_fd(&d2(&d), |x| orth_loss(e.view(), two(x).view(), sq).unwrap().0);
        record(&mut v, "orth d_d", rel_err(&d2(&gd), &fd));
    }

    // columns scaled so some sit below and some above the hinge
    let scales = [0.3, 2.5, 0.6, 4.0];
    let za = Array2::from_shape_fn((5, 4), |(_, j)| rng.gen_range(-1.0..1.0) * scales[j]);
    let zb = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-0.5..0.5));
    let (_, gs) = std_loss(&[za.view(), zb.view()], 1.0, 1e-4).unwrap();
    let fd = central_fd(&d2(&za), |x| std_loss(&[two(x).view(), zb.view()], 1.0, 1e-4).unwrap().0);
    record(&mut v, "std layer 0", rel_err(&d2(&gs[0]), &fd));
    let fd = central_fd(&d2(&zb), |x| std_loss(&[za.view(), two(x).view()], 1.0, 1e-4).unwrap().0);
    record(&mut v, "std layer 1", rel_err(&d2(&gs[1]), &fd));

    let (ca, cb) = (rand2(&mut rng, 5, 4), rand2(&mut rng, 3, 4));
    let (_, gc) = cov_loss(&[ca.view(), cb.view()]).unwrap();
    let fd = central_fd(&d2(&ca), |x| cov_loss(&[two(x).view(), cb.view()]).unwrap().0);
    record(&mut v, "cov layer 0", rel_err(&d2(&gc[0]), &fd));
    let fd = central_fd(&d2(&cb), |x| cov_loss(&[ca.view(), two(x).view()]).unwrap().0);
    record(&mut v, "cov layer 1", rel_err(&d2(&gc[1]), &fd));

    let (out, tgt) = (d2(&rand2(&mut rng, 5, 4)), d2(&rand2(&mut rng, 5, 4)));
    let (_, gr) = rec_loss(out.view(), tgt.view()).unwrap();
    let fd = central_fd(&out, |x| rec_loss(x.view(), tgt.view()).unwrap().0);
    record(&mut v, "rec", rel_err(&gr, &fd));

    let (pj, pk) = (softmax_rows(5, 4, &mut rng), softmax_rows(5, 4, &mut rng));
    let (_, gj, gk) = cs_loss(pj.view(), pk.view()).unwrap();
    let fd = central_fd(&pj, |x| cs_loss(x.view(), pk.view()).unwrap().0);
    record(&mut v, "cs d_j", rel_err(&gj, &fd));
    let fd = central_fd(&pk, |x| cs_loss(pj.view(), x.view()).unwrap().0);
    record(&mut v, "cs d_k", rel_err(&gk, &fd));

    let ps = softmax_rows(5, 4, &mut rng);
    let lab = ArrayD::from_shape_vec(IxDyn(&[5]), vec![0u16, 3, 1, 2, 3]).unwrap();
    let sl = sup_loss(ps.view(), lab.view()).unwrap();
    let fd = central_fd(&ps, |x| sup_loss(x.view(), lab.view()).unwrap().value());
    record(&mut v, "sup", rel_err(&sl.grad, &fd));

    v.note(format!("worst relative error {worst:.2e}"));
    v.finish();
}

// ---------------------------------------------------------------- criterion 3

fn oracle_boundary(m: &Array3<bool>) -> Vec<[usize; 3]> {
    let (w, h, d) = m.dim();
    let mut out = vec![];
    for x in 0..w {
        for y in 0..h {
            for z in 0..d {
                if !m[[x, y, z]] {
                    continue;
                }
                let p = [x as i64, y as i64, z as i64];
                let dims = [w as i64, h as i64, d as i64];
                let mut edge = false;
                for a in 0..3 {
                    for s in [-1i64, 1] {
                        let mut q = p;
                        q[a] += s;
                        if q[a] < 0 || q[a] >= dims[a] || !m[[q[0] as usize, q[1] as usize, q[2] as usize]] {
                            edge = true;
                        }
                    }
                }
                if edge {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn oracle_hd95(a: &Array3<bool>, b: &Array3<bool>, sp: [f64; 3]) -> f64 {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|i| ((p[i] as f64 - q[i] as f64) * sp[i]).powi(2))
            .sum::<f64>()
    };
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min).sqrt();
    let mut all: Vec<f64> = ba.iter().map(|p| nearest(p, &bb)).collect();
    all.extend(bb.iter().map(|p| nearest(p, &ba)));
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    all[lo] * (1.0 - (rank - lo as f64)) + all[hi] * (rank - lo as f64)
}

#[test]
fn criterion_3_metric_oracles() {
    let _g = lock();
    let mut v = Verdict::new("3", "metric oracle equivalence", Some(60.0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_hd = 0.0f64;
    let mut hd_cases = 0;
    for case in 0..1000 {
        let spacing = match case % 3 {
            0 => [1.0, 1.0, 1.0],
            1 => [1.0, 1.5, 2.5],
            _ => [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)],
        };
        let (pa, pb) = (rng.gen_range(0.02..0.7), rng.gen_range(0.02..0.7));
        let a = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_bool(pa));
        let b = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_bool(pb));
        let (na, nb) = (a.iter().filter(|&&x| x).count(), b.iter().filter(|&&x| x).count());
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let want_dice = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        let want_iou = if na + nb == inter { 1.0 } else { inter as f64 / (na + nb - inter) as f64 };
        v.check(dice(a.view(), b.view()).unwrap() == want_dice, format!("dice case {case}"));
        v.check(iou(a.view(), b.view()).unwrap() == want_iou, format!("iou case {case}"));
        match hd95(a.view(), b.view(), spacing) {
            Ok(h) => {
                let e = (h - oracle_hd95(&a, &b, spacing)).abs();
                worst_hd = worst_hd.max(e);
                hd_cases += 1;
                v.check(e <= 1e-9, format!("hd95 case {case} off by {e:e}"));
            }
            Err(_) => v.check(na == 0 || nb == 0, format!("hd95 refused non-empty case {case}")),
        }

        let k = 4u16;
        let la = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_range(0..k));
        let lb = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_range(0..k));
        let (sa, sb) = (LabelVolume::new(la.clone(), k).unwrap(), LabelVolume::new(lb.clone(), k).unwrap());
        let mut want = 0.0;
        for l in 1..k {
            let (ma, mb) = (la.mapv(|x| x == l), lb.mapv(|x| x == l));
            let (ca, cb) = (ma.iter().filter(|&&x| x).count(), mb.iter().filter(|&&x| x).count());
            let i = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count();
            want += if ca + cb == 0 { 1.0 } else { 2.0 * i as f64 / (ca + cb) as f64 };
        }
        want /= (k - 1) as f64;
        v.check(stcs(&sa, &sb).unwrap() == want, format!("stcs case {case}"));
        for l in 1..k {
            let vox = spacing[0] * spacing[1] * spacing[2];
            let v1 = la.iter().filter(|&&x| x == l).count() as f64 * vox;
            let v2 = lb.iter().filter(|&&x| x == l).count() as f64 * vox;
            let (g1, g2) = (label_volume_mm3(&sa, l, spacing), label_volume_mm3(&sb, l, spacing));
            v.check(g1 == v1 && g2 == v2, format!("label volume case {case}"));
            if v1 + v2 > 0.0 {
                let want = 100.0 * (v2 - v1).abs() / ((v1 + v2) / 2.0);
                v.check(aspc(v1, v2).unwrap() == want, format!("aspc case {case}"));
            }
        }
    }
    v.note(format!("{hd_cases} hd95 cases, worst deviation {worst_hd:.1e}"));
    v.finish();
}

// ---------------------------------------------------------------- criterion 4

fn centre_tap_net(spec: UNetSpec) -> UNet {
    let mut net = UNet::new(spec, 0);
    let defs = spec.layers();
    for def in &defs {
        let LayerKind::Conv { .. } = def.kind else { continue };
        // after a concatenation only the skip half (listed first) feeds through
        let feeding = match def.id.checked_sub(1).map(|p| defs[p].kind) {
            Some(LayerKind::UpConcat { skip }) => defs[skip].out_channels,
            _ => def.in_channels,
        };
        let conv = net.conv_layer_mut(def.id).unwrap();
        let cin = conv.in_channels;
        let w = &mut conv.weight.value;
        w.fill(0.0);
        for o in 0..conv.out_channels {
            for i in 0..feeding {
                w[[13 * cin + i, o]] = 1.0 / feeding as f32;
            }
        }
        conv.bias.value.fill(0.0);
    }
    net
}

#[test]
fn criterion_4_correspondence() {
    let _g = lock();
    let mut v = Verdict::new("4", "correspondence soundness", None);
    let spec = UNetSpec {
        nc: 4,
        in_channels: 1,
        out_channels: 4,
    };
    let all: BTreeSet<usize> = (0..24).collect();

    let series = generate_subject(&PhantomConfig::default(), "sub", 11).unwrap();
    let img = series.timepoints()[0].image.data().clone().insert_axis(Axis(0));
    let x = concatenate(Axis(0), &[img.view(), img.view()]).unwrap();
    let mut net = UNet::new(spec, 4);
    for mode in [Mode::Eval, Mode::Train] {
        let (_, feats, _) = net.forward(x.view(), &all, mode).unwrap();
        let plan = make_plan(&feats.shapes(), 64, 9).unwrap();
        for l in feats.layers() {
            let t = feats.get(l).unwrap();
            let idx = plan.layer(l).unwrap();
            let gj = gather_array(t.slice(s![0..1, .., .., .., ..]), idx, l).unwrap();
            let gk = gather_array(t.slice(s![1..2, .., .., .., ..]), idx, l).unwrap();
            v.check(gj == gk, format!("{mode:?} layer {l} gathered rows differ"));
        }
    }

    let mut net = centre_tap_net(spec);
    let defs = spec.layers();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut probes: Vec<[usize; 3]> = vec![[0, 0, 0], [15, 15, 15], [7, 8, 9], [8, 7, 0]];
    probes.extend((0..40).map(|_| [rng.gen_range(0..16), rng.gen_range(0..16), rng.gen_range(0..16)]));
    for p in &probes {
        let mut x = Array5::<f32>::zeros((1, 16, 16, 16, 1));
        x[[0, p[0], p[1], p[2], 0]] = 1.0;
        let (_, feats, _) = net.forward(x.view(), &all, Mode::Eval).unwrap();
        for def in &defs {
            let t = feats.get(def.id).unwrap();
            let channels = match def.kind {
                LayerKind::UpConcat { skip } => defs[skip].out_channels,
                _ => def.out_channels,
            };
            let mut hit = BTreeSet::new();
            for ((_, a, b, c, ch), &val) in t.indexed_iter() {
                if ch < channels && val != 0.0 {
                    hit.insert([a, b, c]);
                }
            }
            let cell = p.map(|q| q >> def.level);
            let want = BTreeSet::from([cell]);
            v.check(hit == want, format!("impulse {p:?} at layer {} lit {hit:?}, expected {cell:?}", def.id));
        }
    }
    v.note(format!("{} impulses over 24 layers", probes.len()));
    v.finish();
}

// ------------------------------------------------------- shared desk settings

fn desk_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        crop_size: [16; 3],
        batch_size: 1,
        patches_per_layer: 256,
        val_batches: 2,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    cfg.heads.mlp_width = 128;
    cfg.unet.nc = 8;
    cfg
}

fn dataset(dir: &Path, cfg: &PhantomConfig) -> DatasetManifest {
    generate_dataset(cfg, &dir.join("data")).unwrap()
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_collapse_reproduction() {
    let _g = lock();
    let mut v = Verdict::new("5", "collapse reproduction", Some(900.0));
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &PhantomConfig::default());
    v.check(m.subjects.len() == 10, "dataset size");
    let test = m.load_split("test").unwrap();
    let decoder = [12usize, 15, 18];
    let opts = DiagnoseOptions {
        layers: decoder.into_iter().collect(),
        slice: None,
        rank_threshold: 1e-2,
        query: None,
    };
    let mut rank = BTreeMap::new();
    let mut early_min = BTreeMap::new();
    for row in [AblationRow::E, AblationRow::J] {
        let mut cfg = desk_config(0);
        cfg.pretrain_steps = 500;
        cfg.validate_every = 0;
        row.apply(&mut cfg);
        let o = pretrain(&cfg, &m, &dir.path().join(row.to_string()), &RunOptions::default()).unwrap();
        let (header, rows) = read_log(&o.log).unwrap();
        let mins: Vec<f64> = decoder
            .iter()
            .map(|l| {
                let c = header.iter().position(|h| *h == format!("sim_L{l:02}")).unwrap();
                rows.iter().take(25).map(|r| r[c].unwrap()).fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mut model = Checkpoint::load(&o.last).unwrap().model().unwrap();
        let ranks: Vec<f64> = test
            .iter()
            .map(|s| diagnose(&mut model, s, &opts).unwrap().0.mean_rank(&decoder).unwrap())
            .collect();
        rank.insert(row, ranks.iter().sum::<f64>() / ranks.len() as f64);
        early_min.insert(row, mins);
    }
    let (re, rj) = (rank[&AblationRow::E], rank[&AblationRow::J]);
    v.note(format!("mean decoder effective rank E {re:.2} J {rj:.2}"));
    v.check(rj > re, "(a) row J rank not above row E");
    let e = &early_min[&AblationRow::E];
    v.note(format!("row E decoder sim minima over steps 1-25 {e:.3?}"));
    v.check(e.iter().all(|&x| x <= -0.95), "(b) row E decoder sim terms did not reach -0.95 within 25 steps");
    v.finish();
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_transfer_benefit() {
    let _g = lock();
    let mut v = Verdict::new("6", "transfer benefit direction", Some(1800.0));
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &PhantomConfig::isointense());
    let mut sums = [[0.0; 2]; 2];
    let seeds = [0u64, 1, 2];
    for &seed in &seeds {
        let root = dir.path().join(format!("seed{seed}"));
        let mut cfg = desk_config(seed);
        cfg.pretrain_steps = 500;
        cfg.finetune_steps = 600;
        cfg.validate_every = 200;
        cfg.label_timepoints = LabelTimepoints::Last;
        let pre = pretrain(&cfg, &m, &root.join("pretrain"), &RunOptions::default()).unwrap();

        let mut ft = cfg.clone();
        ft.batch_size = 2;
        let arms = [(Some(pre.best.as_path()), 1.0), (None, 0.0)];
        for (arm, (init, cs)) in arms.into_iter().enumerate() {
            let mut c = ft.clone();
            c.weights.cs_weight = cs;
            c.flags.use_cs = cs > 0.0;
            let o = finetune(&c, init, &m, Budget::OneShot, &root.join(format!("arm{arm}")), &RunOptions::default())
                .unwrap();
            let mut model = Checkpoint::load(&o.best).unwrap().segmentation_model().unwrap();
            let r = evaluate_split(&mut model, &m, "test").unwrap();
            let (d, s) = (r.mean_dice.unwrap().mean, r.stcs.unwrap().mean);
            v.note(format!("seed {seed} {} dice {d:.3} stcs {s:.3}", ["pretrained", "random"][arm]));
            sums[arm][0] += d / seeds.len() as f64;
            sums[arm][1] += s / seeds.len() as f64;
        }
    }
    let ([pd, ps], [rd, rs]) = (sums[0], sums[1]);
    v.note(format!("mean dice {pd:.4} vs {rd:.4}, mean stcs {ps:.4} vs {rs:.4}"));
    v.check(pd >= rd + 0.02, "pretrained Dice margin below 0.02");
    v.check(ps > rs, "pretrained STCS not higher");
    v.finish();
}

// ---------------------------------------------------------------- criterion 7

/// Table rows as `(encoder only, narrow heads, rec, aug, beta, mu, gamma, cs)`.
const TABLE: [(char, bool, bool, bool, bool, Option<f64>, Option<f64>, Option<f64>, bool); 12] = [
    ('A', true, true, false, false, None, None, None, false),
    ('B', true, false, false, false, None, None, None, false),
    ('C', true, false, true, false, None, None, None, false),
    ('D', false, false, true, false, None, None, None, false),
    ('E', false, false, false, true, None, None, None, false),
    ('F', false, false, true, true, None, None, None, false),
    ('G', false, false, true, false, Some(100.0), None, None, false),
    ('H', false, false, true, false, None, Some(1e-3), Some(1e-3), false),
    ('I', false, false, true, false, Some(100.0), Some(1e-3), Some(1e-3), false),
    ('J', false, false, true, true, Some(100.0), Some(1e-3), Some(1e-3), false),
    ('K', false, false, true, true, Some(100.0), Some(1e-2), Some(1e-3), false),
    ('L', false, false, true, true, Some(100.0), Some(1e-3), Some(1e-3), true),
];

#[test]
fn criterion_7_ablation_switchboard() {
    let _g = lock();
    let mut v = Verdict::new("7", "ablation switchboard", None);
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(
        dir.path(),
        &PhantomConfig {
            num_subjects: 5,
            timepoints_per_subject: [2, 3],
            ..PhantomConfig::default()
        },
    );
    let enc: BTreeSet<usize> = [1, 3, 5, 7].into_iter().collect();
    let encdec: BTreeSet<usize> = [1, 3, 5, 7, 9, 12, 15, 18].into_iter().collect();
    for (id, enc_only, narrow, rec, aug, beta, mu, gamma, cs) in TABLE {
        let row: AblationRow = id.to_string().parse().unwrap();
        let mut cfg = TrainConfig {
            patches_per_layer: 8,
            batch_size: 1,
            crop_size: [16; 3],
            pretrain_steps: 2,
            finetune_steps: 1,
            validate_every: 0,
            val_batches: 1,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        cfg.unet.nc = 2;
        cfg.heads.mlp_width = 64;
        row.apply(&mut cfg);
        let out = dir.path().join(id.to_string());
        let o = pretrain(&cfg, &m, &out.join("pre"), &RunOptions::default()).unwrap();
        let (header, rows) = read_log(&o.log).unwrap();
        let taps = if enc_only { &enc } else { &encdec };
        for r in &rows {
            for (h, cell) in header.iter().zip(r) {
                let want = match h.as_str() {
                    "step" | "lr" | "total" | "sim" => true,
                    "rec" => rec,
                    "aug" => aug,
                    "orth" => beta.is_some(),
                    "std" => mu.is_some(),
                    "cov" => gamma.is_some(),
                    other => taps.contains(&other.trim_start_matches("sim_L").parse::<usize>().unwrap()),
                };
                v.check(cell.is_some() == want, format!("row {id} column {h}"));
            }
        }
        let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("pre/config.json")).unwrap()).unwrap();
        let w = &saved["weights"];
        if let Some(b) = beta {
            v.check(w["beta_orth"] == b, format!("row {id} beta"));
        }
        if let Some(g) = gamma {
            v.check(w["gamma_cov"] == g, format!("row {id} gamma"));
        }
        if let (Some(mu), false) = (mu, cs) {
            v.check(w["mu_std"] == mu, format!("row {id} mu"));
        }
        let heads = cfg.effective_heads().mlp_width;
        v.check((heads == 64 / 8) == narrow, format!("row {id} head width {heads}"));

        let f = finetune(&cfg, Some(&o.best), &m, Budget::OneShot, &out.join("ft"), &RunOptions::default()).unwrap();
        let (fh, frows) = read_log(&f.log).unwrap();
        let c = fh.iter().position(|h| h == "cs").unwrap();
        v.check(frows.iter().all(|r| r[c].is_some() == cs), format!("row {id} finetune cs column"));
    }
    v.note("12 rows checked");
    v.finish();
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_determinism() {
    let _g = lock();
    let mut v = Verdict::new("8", "determinism and lossless resume", None);
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &PhantomConfig::default());
    let mut cfg = desk_config(7);
    cfg.pretrain_steps = 100;
    cfg.validate_every = 50;
    let run = |name: &str, opts: RunOptions| {
        let out = dir.path().join(name);
        par::sequential(|| pretrain(&cfg, &m, &out, &opts)).unwrap();
        (fs::read(out.join("pretrain_log.csv")).unwrap(), fs::read(out.join("last.ckpt")).unwrap())
    };
    let (log_a, ck_a) = run("a", RunOptions::default());
    let (log_b, ck_b) = run("b", RunOptions::default());
    v.check(log_a == log_b, "repeated loss logs differ");
    v.check(ck_a == ck_b, "repeated checkpoints differ");

    let out = dir.path().join("c");
    par::sequential(|| {
        pretrain(
            &cfg,
            &m,
            &out,
            &RunOptions {
                stop_at: Some(37),
                ..RunOptions::default()
            },
        )
    })
    .unwrap();
    let (log_c, ck_c) = run(
        "c",
        RunOptions {
            resume: Some(out.join("last.ckpt")),
            ..RunOptions::default()
        },
    );
    v.check(log_c == log_a, "resumed loss log differs");
    v.check(ck_c == ck_a, "resumed checkpoint differs");
    v.note(format!("{} log bytes, {} checkpoint bytes", log_a.len(), ck_a.len()));
    v.finish();
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_default_constants() {
    let _g = lock();
    let mut v = Verdict::new("9", "default constants", None);
    let j: serde_json::Value = serde_json::from_str(&TrainConfig::default().to_json().unwrap()).unwrap();
    let w = &j["weights"];
    for (k, want) in [
        ("lambda_sim", 1.0),
        ("alpha_rec", 10.0),
        ("gamma_cov", 1e-3),
        ("beta_orth", 100.0),
        ("eta", 1.0),
        ("epsilon", 1e-4),
    ] {
        v.check(w[k].as_f64() == Some(want), format!("{k} = {}", w[k]));
    }
    for (k, want) in [
        ("lr", 2e-4),
        ("adam_beta1_pretrain", 0.9),
        ("adam_beta1_finetune", 0.5),
        ("adam_beta2", 0.999),
    ] {
        v.check(j[k].as_f64() == Some(want), format!("{k} = {}", j[k]));
    }
    let list = |k: &str| -> Vec<u64> { j[k].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect() };
    v.check(list("taps_sim") == [1, 3, 5, 7, 9, 12, 15, 18], "taps_sim");
    v.check(list("taps_orth") == [8, 12], "taps_orth");
    v.check(list("taps_varcov") == [12, 15, 18], "taps_varcov");
    v.check(j["pretrain_steps"] == 30_000 && j["finetune_steps"] == 35_000, "step counts");
    v.check(j["heads"]["mlp_width"] == 128 && j["unet"]["nc"] == 8, "desk widths");
    v.finish();
}
