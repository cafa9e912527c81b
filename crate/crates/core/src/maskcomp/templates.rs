//! Pose templates: k-means cluster means of training amodal masks, and the
//! distance-weighted attention that feeds them to the amodal hourglass.

use deocc_tensor::{nearest_index, Scope, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::conv;
use crate::types::BinaryMask;

/// `ε` in `W = 1/(D + ε)`.
pub const WEIGHT_EPS: f64 = 1e-6;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_REL_TOL: f64 = 1e-6;

/// Result of Lloyd's algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub initial_centers: Vec<Vec<f64>>,
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Objective (sum of squared distances) after each assignment step.
    pub history: Vec<f64>,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        *self.history.last().expect("at least one iteration")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center, lowest index on ties.
fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Stops once assignments are stable, the objective improves by less than
/// [`KMEANS_REL_TOL`] relatively, or after [`KMEANS_MAX_ITERS`] rounds. An
/// emptied cluster keeps its previous center.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    if k > points.len() {
        return Err(Error::Validation(format!("k = {k} exceeds the {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points differ in dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial_centers = plus_plus_init(points, k, &mut rng);
    let mut centers = initial_centers.clone();
    let mut assignments: Vec<usize> = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut objective = 0.0;
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let (j, d) = nearest(p, &centers);
                objective += d;
                j
            })
            .collect();
        let stable = next == assignments;
        assignments = next;
        let converged = match history.last() {
            Some(&prev) => stable || prev <= 0.0 || (prev - objective) / prev < KMEANS_REL_TOL,
            None => false,
        };
        history.push(objective);
        if converged {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Ok(KMeansFit {
        initial_centers,
        centers,
        assignments,
        history,
    })
}

/// K soft template masks at a fixed resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateBank {
    height: usize,
    width: usize,
    templates: Vec<Vec<f64>>,
}

impl TemplateBank {
    pub fn new(height: usize, width: usize, templates: Vec<Vec<f64>>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Validation("template bank is empty".into()));
        }
        if templates
            .iter()
            .any(|t| t.len() != height * width || t.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::Validation("templates must be H·W values in [0,1]".into()));
        }
        Ok(Self {
            height,
            width,
            templates,
        })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn templates(&self) -> &[Vec<f64>] {
        &self.templates
    }

    /// `1×K×h×w` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [1, self.len(), self.height, self.width],
            self.templates.concat(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 4 || t.shape()[0] != 1 {
            return Err(Error::Shape(format!("template tensor must be 1×K×h×w, got {:?}", t.shape())));
        }
        let (_, k, h, w) = t.dims4();
        Self::new(h, w, t.data().chunks(h * w).take(k).map(<[f64]>::to_vec).collect())
    }
}

/// Nearest-neighbour resample of a mask to `h×w`, flattened to 0.0/1.0.
pub fn flatten_resized(mask: &BinaryMask, h: usize, w: usize) -> Vec<f64> {
    let ys = nearest_index(mask.height(), h);
    let xs = nearest_index(mask.width(), w);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .map(|(y, x)| mask.get(y, x) as u8 as f64)
        .collect()
}

/// Clusters `masks` (resampled to `resolution`) into `k` templates.
pub fn build_template_bank(
    masks: &[BinaryMask],
    k: usize,
    resolution: (usize, usize),
    seed: u64,
) -> Result<(TemplateBank, KMeansFit)> {
    if k > masks.len() {
        return Err(Error::Validation(format!("k = {k} exceeds the {} training masks", masks.len())));
    }
    let (h, w) = resolution;
    let points: Vec<Vec<f64>> = masks.iter().map(|m| flatten_resized(m, h, w)).collect();
    let fit = kmeans(&points, k, seed)?;
    Ok((TemplateBank::new(h, w, fit.centers.clone())?, fit))
}

/// Attention weights `W_t = 1/(‖M̂_m − M_t‖₂ + ε)`, shaped `N×K×1×1`.
///
/// `soft_modal` is `N×1×H×W`; `templates` is the bank tensor.
pub fn template_weights<'g>(soft_modal: Var<'g>, templates: Var<'g>) -> Var<'g> {
    let ts = templates.shape();
    let (k, th, tw) = (ts[1], ts[2], ts[3]);
    let n = soft_modal.shape()[0];
    let m = soft_modal.resize_nearest(th, tw);
    (m - templates)
        .square()
        .reshape([n, k, th * tw])
        .sum_axis(2)
        .sqrt()
        .add_scalar(WEIGHT_EPS)
        .recip()
        .reshape([n, k, 1, 1])
}

/// Re-weights every template, mixes them with a bias-carrying 1×1
/// convolution and resamples the single-channel result to `out`.
pub fn template_attention<'g>(
    s: &Scope<'_, 'g>,
    soft_modal: Var<'g>,
    templates: Var<'g>,
    out: (usize, usize),
) -> Var<'g> {
    let weighted = templates * template_weights(soft_modal, templates);
    conv(s, "combine", weighted, 1, 0).resize_nearest(out.0, out.1)
}
