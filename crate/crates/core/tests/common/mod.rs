//! Brute-force oracles shared by the integration and acceptance suites.
//!
//! Everything here is written against plain loops and `nalgebra` so that no
//! code path is shared with the library under test.

#![allow(dead_code)]

pub mod grads;

use std::collections::HashSet;

use deocc_core::evalkit::{frechet_distance, iou};
use deocc_core::maskcomp::{invisible_mask, kmeans, KMEANS_MAX_ITERS, KMEANS_REL_TOL};
use deocc_core::recovery::{partial_conv_eval, pga_relation_logits, pga_relation_matrix, Assembly, PgaConfig, PgaGuide};
use deocc_core::BinaryMask;
use deocc_tensor::{Graph, Init, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_INSTANCES: usize = 100;
/// Double-precision oracle tolerance.
pub const TOL: f64 = 1e-9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| r.gen_bool(density))
}

fn pixel_set(m: &BinaryMask) -> HashSet<(usize, usize)> {
    let mut s = HashSet::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                s.insert((y, x));
            }
        }
    }
    s
}

pub fn oracle_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (sa, sb) = (pixel_set(a), pixel_set(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        1.0
    } else {
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

/// Largest |library − oracle| IoU over random pairs, including empty ones.
pub fn iou_max_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..ORACLE_INSTANCES {
        let (h, w) = (r.gen_range(1..12), r.gen_range(1..12));
        let da = if i % 10 == 0 { 0.0 } else { r.gen_range(0.0..1.0) };
        let db = if i % 15 == 0 { 0.0 } else { r.gen_range(0.0..1.0) };
        let a = random_mask(&mut r, h, w, da);
        let b = random_mask(&mut r, h, w, db);
        worst = worst.max((iou(&a, &b).unwrap() - oracle_iou(&a, &b)).abs());
    }
    worst
}

/// Number of random cases where `amodal ∧ ¬modal` disagrees with set difference.
pub fn invisible_mismatches(seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..ORACLE_INSTANCES {
        let (h, w) = (r.gen_range(1..12), r.gen_range(1..12));
        let amodal = random_mask(&mut r, h, w, 0.6);
        let modal = random_mask(&mut r, h, w, 0.4);
        let lib = pixel_set(&invisible_mask(&amodal, &modal).unwrap());
        let want: HashSet<_> = pixel_set(&amodal).difference(&pixel_set(&modal)).copied().collect();
        if lib != want {
            bad += 1;
        }
    }
    bad
}

fn sqd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub struct LloydResult {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub objective: f64,
}

/// Textbook Lloyd iterations from given centers.
pub fn naive_lloyd(points: &[Vec<f64>], init: &[Vec<f64>]) -> LloydResult {
    let mut centers = init.to_vec();
    let mut prev_assign: Option<Vec<usize>> = None;
    let mut prev_obj: Option<f64> = None;
    let mut round = 0;
    loop {
        round += 1;
        let mut assign = Vec::new();
        let mut obj = 0.0;
        for p in points {
            let mut best = 0;
            for j in 1..centers.len() {
                if sqd(p, &centers[j]) < sqd(p, &centers[best]) {
                    best = j;
                }
            }
            obj += sqd(p, &centers[best]);
            assign.push(best);
        }
        let done = match prev_obj {
            None => false,
            Some(po) => prev_assign.as_ref() == Some(&assign) || po <= 0.0 || (po - obj) / po < KMEANS_REL_TOL,
        };
        if done || round == KMEANS_MAX_ITERS {
            return LloydResult {
                centers,
                assignments: assign,
                objective: obj,
            };
        }
        for j in 0..centers.len() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for d in 0..centers[j].len() {
                    centers[j][d] = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        prev_assign = Some(assign);
        prev_obj = Some(obj);
    }
}

/// Worst objective / center discrepancy and assignment mismatches between
/// the library and the naive oracle started from the library's seeding.
pub fn kmeans_max_error(seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let (mut worst, mut mismatched) = (0.0f64, 0);
    for i in 0..ORACLE_INSTANCES {
        let n = r.gen_range(4..30);
        let dim = r.gen_range(1..10);
        let k = r.gen_range(1..=n.min(5));
        // Binary points, like flattened masks.
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| r.gen_bool(0.5) as u8 as f64).collect())
            .collect();
        let fit = kmeans(&points, k, i as u64).unwrap();
        let o = naive_lloyd(&points, &fit.initial_centers);
        let brute: f64 = points.iter().zip(&fit.assignments).map(|(p, &a)| sqd(p, &fit.centers[a])).sum();
        worst = worst.max((fit.objective() - o.objective).abs());
        worst = worst.max((fit.objective() - brute).abs());
        for (a, b) in fit.centers.iter().zip(&o.centers) {
            worst = worst.max(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
        if fit.assignments != o.assignments {
            mismatched += 1;
        }
    }
    (worst, mismatched)
}

pub struct RelationCase {
    pub f: Tensor,
    pub modal_parsing: Tensor,
    pub amodal_parsing: Tensor,
    pub visible: Tensor,
    pub cfg: PgaConfig,
    pub seed: u64,
}

fn one_hot(r: &mut ChaCha8Rng, p: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros([1, p, h, w]);
    for i in 0..h * w {
        let c = r.gen_range(0..p);
        t.data_mut()[c * h * w + i] = 1.0;
    }
    t
}

pub fn relation_case(r: &mut ChaCha8Rng, seed: u64) -> RelationCase {
    let (h, w) = (r.gen_range(2..6), r.gen_range(2..6));
    let (c, p, kc) = (r.gen_range(1..5), r.gen_range(2..5), r.gen_range(1..5));
    let f = Init::new(seed).uniform([1, c, h, w], -1.0, 1.0);
    let vis_density = r.gen_range(0.1..0.9);
    let visible = BinaryMask::from_fn(h, w, |_, _| r.gen_bool(vis_density)).to_tensor();
    RelationCase {
        f,
        modal_parsing: one_hot(r, p, h, w),
        amodal_parsing: one_hot(r, p, h, w),
        visible,
        cfg: PgaConfig {
            channels: c,
            part_count: p,
            key_channels: kc,
            body: false,
            relation: true,
            assembly: Assembly::Fusion,
        },
        seed,
    }
}

/// Library `(R̃, R)` for a case, as row-major `HW×HW` arrays.
pub fn library_relation(case: &RelationCase) -> (Vec<f64>, Vec<f64>) {
    let store = case.cfg.init(case.seed);
    let g = Graph::new();
    let b = store.bind(&g, false);
    let s = b.scope("");
    let guide = PgaGuide {
        modal_parsing: g.input(case.modal_parsing.clone()),
        amodal_parsing: g.input(case.amodal_parsing.clone()),
        visible: g.input(case.visible.clone()),
    };
    let f = g.input(case.f.clone());
    let logits = pga_relation_logits(&s, f, &guide).value().data().to_vec();
    let r = pga_relation_matrix(&s, f, &guide).value().data().to_vec();
    (logits, r)
}

/// Triple-loop `(R̃, R)` from the same parameters.
pub fn oracle_relation(case: &RelationCase) -> (Vec<f64>, Vec<f64>) {
    let store = case.cfg.init(case.seed);
    let (_, c, h, w) = case.f.dims4();
    let hw = h * w;
    let p = case.cfg.part_count;
    let kc = case.cfg.key_channels;
    let key = |name: &str, parsing: &Tensor| -> Vec<Vec<f64>> {
        let wt = store.get(&format!("{name}.w")).unwrap().data().to_vec();
        let bs = store.get(&format!("{name}.b")).unwrap().data().to_vec();
        let cin = c + p;
        (0..kc)
            .map(|o| {
                (0..hw)
                    .map(|pix| {
                        let mut acc = bs[o];
                        for i in 0..cin {
                            let v = if i < c { case.f.data()[i * hw + pix] } else { parsing.data()[(i - c) * hw + pix] };
                            acc += wt[o * cin + i] * v;
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    };
    let kv = key("phi", &case.modal_parsing);
    let ka = key("psi", &case.amodal_parsing);
    let mv = case.visible.data();
    let mut logits = vec![0.0; hw * hw];
    for a in 0..hw {
        for b in 0..hw {
            let mut acc = 0.0;
            for o in 0..kc {
                acc += mv[a] * kv[o][a] * (1.0 - mv[b]) * ka[o][b];
            }
            logits[a * hw + b] = acc;
        }
    }
    let mut r = vec![0.0; hw * hw];
    for b in 0..hw {
        let m = (0..hw).map(|a| logits[a * hw + b]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..hw).map(|a| (logits[a * hw + b] - m).exp()).sum();
        for a in 0..hw {
            r[a * hw + b] = (logits[a * hw + b] - m).exp() / z;
        }
    }
    (logits, r)
}

pub fn relation_max_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..ORACLE_INSTANCES {
        let case = relation_case(&mut r, seed * 1000 + i as u64);
        let (l1, r1) = library_relation(&case);
        let (l2, r2) = oracle_relation(&case);
        for (a, b) in l1.iter().zip(&l2).chain(r1.iter().zip(&r2)) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Window-loop partial convolution; returns `(out, valid)` flat arrays.
pub fn oracle_partial_conv(
    x: &Tensor,
    mask: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (n, cin, h, w) = x.dims4();
    let (cout, _, k, _) = weight.dims4();
    let mc = mask.shape()[1];
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    let mut valid = vec![0.0; n * oh * ow];
    let xa = |b: usize, c: usize, y: usize, xx: usize| x.data()[((b * cin + c) * h + y) * w + xx];
    let ma = |b: usize, c: usize, y: usize, xx: usize| mask.data()[((b * mc + c) * h + y) * w + xx];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut in_canvas = 0.0;
                let mut msum = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let (y, xx) = ((oy * stride + ky) as isize - pad as isize, (ox * stride + kx) as isize - pad as isize);
                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            in_canvas += 1.0;
                            msum += ma(b, if mc == 1 { 0 } else { c }, y as usize, xx as usize);
                        }
                    }
                }
                let ok = msum > 0.0;
                valid[(b * oh + oy) * ow + ox] = ok as u8 as f64;
                for o in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let (y, xx) =
                                ((oy * stride + ky) as isize - pad as isize, (ox * stride + kx) as isize - pad as isize);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                let (yy, xu) = (y as usize, xx as usize);
                                let m = ma(b, if mc == 1 { 0 } else { c }, yy, xu);
                                acc += weight.data()[((o * cin + c) * k + ky) * k + kx] * xa(b, c, yy, xu) * m;
                            }
                        }
                    }
                    out[((b * cout + o) * oh + oy) * ow + ox] =
                        if ok { acc * in_canvas / msum + bias.data()[o] } else { 0.0 };
                }
            }
        }
    }
    (out, valid)
}

pub fn pconv_max_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..ORACLE_INSTANCES {
        let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(3..9), r.gen_range(3..9));
        let k = [1, 3, 3, 4][r.gen_range(0..4)];
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..=k / 2);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let mut init = Init::new(seed * 7919 + i as u64);
        let x = init.uniform([n, cin, h, w], -1.0, 1.0);
        let mc = if r.gen_bool(0.5) { 1 } else { cin };
        let density = r.gen_range(0.0..1.0);
        let mask = Tensor::new(
            [n, mc, h, w],
            (0..n * mc * h * w).map(|_| r.gen_bool(density) as u8 as f64).collect(),
        );
        let weight = init.uniform([cout, cin, k, k], -1.0, 1.0);
        let bias = init.uniform([cout], -1.0, 1.0);
        let (lo, lv) = partial_conv_eval(&x, &mask, &weight, &bias, stride, pad);
        let (oo, ov) = oracle_partial_conv(&x, &mask, &weight, &bias, stride, pad);
        for (a, b) in lo.data().iter().zip(&oo).chain(lv.data().iter().zip(&ov)) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Literal Fréchet formula with nalgebra eigendecompositions.
pub fn oracle_frechet(a: &[Vec<f64>], b: &[Vec<f64>], ridge: f64) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let d = a[0].len();
    let stats = |xs: &[Vec<f64>]| {
        let n = xs.len() as f64;
        let mu = DVector::from_fn(d, |i, _| xs.iter().map(|x| x[i]).sum::<f64>() / n);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for x in xs {
            let v = DVector::from_fn(d, |i, _| x[i] - mu[i]);
            cov += &v * v.transpose();
        }
        cov /= n - 1.0;
        cov += DMatrix::<f64>::identity(d, d) * ridge;
        (mu, cov)
    };
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let root = |m: &DMatrix<f64>| {
        let e = m.clone().symmetric_eigen();
        let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
        &e.eigenvectors * s * e.eigenvectors.transpose()
    };
    let ra = root(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = inner.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_root
}

pub fn frechet_max_error(seed: u64, ridge: f64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let d = r.gen_range(1..7);
        let (na, nb) = (r.gen_range(d + 2..d + 20), r.gen_range(d + 2..d + 20));
        let shift: f64 = r.gen_range(-2.0..2.0);
        let scale: f64 = r.gen_range(0.2..3.0);
        let a: Vec<Vec<f64>> = (0..na).map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..nb)
            .map(|_| (0..d).map(|_| shift + scale * r.gen_range(-1.0..1.0)).collect())
            .collect();
        worst = worst.max((frechet_distance(&a, &b).unwrap() - oracle_frechet(&a, &b, ridge)).abs());
    }
    worst
}
