//! Loss primitives and the frozen feature embedding behind the perceptual,
//! style and Fréchet computations.

use deocc_tensor::{Graph, Init, Tensor, Var};

use crate::nn::LEAK;

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` inside every log.
pub const PROB_EPS: f64 = 1e-7;

/// Seed of the shared embedding; recorded in checkpoints and reports.
pub const EMBEDDING_SEED: u64 = 0;

/// Mean binary cross-entropy between probabilities `pred` and targets in `{0,1}`.
pub fn bce<'g>(pred: Var<'g>, target: Var<'g>) -> Var<'g> {
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = target * p.ln();
    let neg = target.rsub_scalar(1.0) * p.rsub_scalar(1.0).ln();
    -(pos + neg).mean()
}

/// Categorical cross-entropy of `N×P×H×W` scores against one-hot targets,
/// averaged over pixels.
pub fn categorical_ce<'g>(scores: Var<'g>, target: Var<'g>) -> Var<'g> {
    let shape = scores.shape();
    let pixels = (shape[0] * shape[2] * shape[3]) as f64;
    -(target * scores.log_softmax(1)).sum().scale(1.0 / pixels)
}

/// Mean absolute difference.
pub fn l1<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    (a - b).abs().mean()
}

/// How the generator's adversarial term is written.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// `−E[log D(fake)]`.
    #[default]
    NonSaturating,
    /// `E[log(1 − D(fake))]`, the literal minimax form.
    Minimax,
}

impl std::str::FromStr for AdversarialMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "non_saturating" => Ok(Self::NonSaturating),
            "minimax" => Ok(Self::Minimax),
            other => Err(format!("unknown adversarial mode `{other}`")),
        }
    }
}

impl AdversarialMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NonSaturating => "non_saturating",
            Self::Minimax => "minimax",
        }
    }
}

fn prob(logits: Var<'_>) -> Var<'_> {
    logits.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `−(E[log D(real)] + E[log(1 − D(fake))])` over patch logits.
pub fn discriminator_loss<'g>(real_logits: Var<'g>, fake_logits: Var<'g>) -> Var<'g> {
    let real = prob(real_logits).ln().mean();
    let fake = prob(fake_logits).rsub_scalar(1.0).ln().mean();
    -(real + fake)
}

/// The generator's adversarial term for patch logits of generated data.
pub fn generator_adv_loss<'g>(fake_logits: Var<'g>, mode: AdversarialMode) -> Var<'g> {
    let p = prob(fake_logits);
    match mode {
        AdversarialMode::NonSaturating => -p.ln().mean(),
        AdversarialMode::Minimax => p.rsub_scalar(1.0).ln().mean(),
    }
}

/// `(d_loss, g_loss)` for one pair of discriminator outputs.
pub fn adversarial_pair<'g>(real_logits: Var<'g>, fake_logits: Var<'g>, mode: AdversarialMode) -> (Var<'g>, Var<'g>) {
    (
        discriminator_loss(real_logits, fake_logits),
        generator_adv_loss(fake_logits, mode),
    )
}

/// Frozen random convolutional feature extractor.
///
/// Three `k4 s2 p1` convolutions (3→8→16→32) with leaky activations; the
/// output of every layer is a tap. Inputs should be at least 8×8.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    seed: u64,
    layers: Vec<(Tensor, Tensor)>,
}

impl Embedding {
    pub const CHANNELS: [usize; 4] = [3, 8, 16, 32];

    pub fn new(seed: u64) -> Self {
        let mut init = Init::new(seed);
        let layers = Self::CHANNELS
            .windows(2)
            .map(|c| {
                // widened range keeps activations from shrinking layer to layer
                let fan_in = c[0] * 16;
                let bound = (6.0 / fan_in as f64).sqrt();
                (init.uniform([c[1], c[0], 4, 4], -bound, bound), init.uniform([c[1]], -0.1, 0.1))
            })
            .collect();
        Self { seed, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Total channels over all taps.
    pub fn feature_dim(&self) -> usize {
        Self::CHANNELS[1..].iter().sum()
    }

    /// Tapped features of an `N×3×H×W` input.
    pub fn features<'g>(&self, x: Var<'g>) -> Vec<Var<'g>> {
        let g = x.graph();
        let mut h = x;
        let mut taps = Vec::with_capacity(self.layers.len());
        for (w, b) in &self.layers {
            h = h
                .conv2d(g.input(w.clone()), Some(g.input(b.clone())), 2, 1)
                .leaky_relu(LEAK);
            taps.push(h);
        }
        taps
    }

    /// Per-sample vector of spatially averaged taps, `feature_dim` long.
    pub fn pooled(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let g = Graph::new();
        let taps = self.features(g.input(x.clone()));
        let n = x.shape()[0];
        let mut out = vec![Vec::with_capacity(self.feature_dim()); n];
        for t in taps {
            let v = t.value();
            let (_, c, h, w) = v.dims4();
            let hw = h * w;
            for (i, row) in out.iter_mut().enumerate() {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    row.push(v.data()[base..base + hw].iter().sum::<f64>() / hw as f64);
                }
            }
        }
        out
    }
}

/// Repeats a one-channel map to three channels.
pub fn to_rgb<'g>(x: Var<'g>) -> Var<'g> {
    if x.shape()[1] == 3 {
        return x;
    }
    Var::concat(&[x, x, x], 1)
}

/// `Σ_layers mean|φ_l(a) − φ_l(b)|`; one-channel inputs are replicated.
pub fn perceptual<'g>(a: Var<'g>, b: Var<'g>, emb: &Embedding) -> Var<'g> {
    let fa = emb.features(to_rgb(a));
    let fb = emb.features(to_rgb(b));
    let mut terms = fa.into_iter().zip(fb).map(|(x, y)| l1(x, y));
    let first = terms.next().expect("embedding has layers");
    terms.fold(first, |acc, t| acc + t)
}

/// Per-sample Gram matrices `F Fᵀ / (C·H·W)` of an `N×C×H×W` map.
pub fn gram<'g>(f: Var<'g>) -> Var<'g> {
    let s = f.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let flat = f.reshape([n, c, hw]);
    flat.bmm(flat.transpose()).scale(1.0 / (c * hw) as f64)
}

/// `Σ_layers mean|G(φ_l(a)) − G(φ_l(b))|`.
pub fn style<'g>(a: Var<'g>, b: Var<'g>, emb: &Embedding) -> Var<'g> {
    let fa = emb.features(to_rgb(a));
    let fb = emb.features(to_rgb(b));
    let mut terms = fa.into_iter().zip(fb).map(|(x, y)| l1(gram(x), gram(y)));
    let first = terms.next().expect("embedding has layers");
    terms.fold(first, |acc, t| acc + t)
}
