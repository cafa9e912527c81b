//! Parsing guided attention: a body-part stream and a visible→invisible
//! relation stream.

use deocc_tensor::{Init, ParamStore, Scope, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::nn::{add_conv, conv};

/// How the two streams are put together.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assembly {
    /// Both streams read the input; their outputs and the input are fused.
    #[default]
    Fusion,
    /// The relation stream reads the body stream's output.
    Cascade,
}

impl std::str::FromStr for Assembly {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fusion" => Ok(Self::Fusion),
            "cascade" => Ok(Self::Cascade),
            other => Err(format!("unknown assembly `{other}`")),
        }
    }
}

impl Assembly {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fusion => "fusion",
            Self::Cascade => "cascade",
        }
    }
}

/// One PGA block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PgaConfig {
    pub channels: usize,
    pub part_count: usize,
    pub key_channels: usize,
    pub body: bool,
    pub relation: bool,
    pub assembly: Assembly,
}

/// Parsing and visibility resampled to a block's resolution.
#[derive(Clone, Copy, Debug)]
pub struct PgaGuide<'g> {
    /// `N×P×h×w` one-hot modal parsing.
    pub modal_parsing: Var<'g>,
    /// `N×P×h×w` one-hot amodal parsing.
    pub amodal_parsing: Var<'g>,
    /// `N×1×h×w` visible mask.
    pub visible: Var<'g>,
}

impl<'g> PgaGuide<'g> {
    /// Nearest-neighbour resamples full-resolution guides to `h×w`.
    pub fn at(&self, h: usize, w: usize) -> Self {
        Self {
            modal_parsing: self.modal_parsing.resize_nearest(h, w),
            amodal_parsing: self.amodal_parsing.resize_nearest(h, w),
            visible: self.visible.resize_nearest(h, w),
        }
    }
}

impl PgaConfig {
    pub fn is_identity(&self) -> bool {
        !self.body && !self.relation
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut init = Init::new(seed);
        let mut s = ParamStore::new();
        let (c, p) = (self.channels, self.part_count);
        if self.body {
            add_conv(&mut s, &mut init, "reduce", p, c, 1);
            add_conv(&mut s, &mut init, "body_fuse", c, 2 * p, 1);
        }
        if self.relation {
            add_conv(&mut s, &mut init, "phi", self.key_channels, c + p, 1);
            add_conv(&mut s, &mut init, "psi", self.key_channels, c + p, 1);
        }
        if !self.is_identity() {
            let streams = self.body as usize + self.relation as usize;
            let fused_in = match self.assembly {
                Assembly::Fusion => c * (streams + 1),
                Assembly::Cascade => 2 * c,
            };
            add_conv(&mut s, &mut init, "fuse", c, fused_in, 1);
        }
        s
    }

    /// Applies the block; output shape equals the input's.
    pub fn forward<'g>(&self, s: &Scope<'_, 'g>, f: Var<'g>, guide: &PgaGuide<'g>) -> Var<'g> {
        if self.is_identity() {
            return f;
        }
        let fused = match (self.assembly, self.body, self.relation) {
            (Assembly::Cascade, true, true) => {
                let h = pga_body_stream(s, f, guide);
                vec![relation_stream(s, h, guide), f]
            }
            _ => {
                let mut parts = Vec::with_capacity(3);
                if self.body {
                    parts.push(pga_body_stream(s, f, guide));
                }
                if self.relation {
                    parts.push(relation_stream(s, f, guide));
                }
                parts.push(f);
                parts
            }
        };
        conv(s, "fuse", Var::concat(&fused, 1), 1, 0)
    }
}

/// Zeroes channel 0 (background) of a one-hot parsing map.
fn foreground_channels<'g>(parsing: Var<'g>) -> Var<'g> {
    let p = parsing.shape()[1];
    let mut keep = Tensor::ones([1, p, 1, 1]);
    keep.data_mut()[0] = 0.0;
    parsing * parsing.graph().input(keep)
}

/// Reduces `f` to `P` channels, gates it by each parsing's part channels,
/// concatenates the two products and fuses them back to `C` channels.
pub fn pga_body_stream<'g>(s: &Scope<'_, 'g>, f: Var<'g>, guide: &PgaGuide<'g>) -> Var<'g> {
    let r = conv(s, "reduce", f, 1, 0);
    let by_modal = r * foreground_channels(guide.modal_parsing);
    let by_amodal = r * foreground_channels(guide.amodal_parsing);
    conv(s, "body_fuse", Var::concat(&[by_modal, by_amodal], 1), 1, 0)
}

/// Pre-softmax relations `R̃ = (M_v⊙K_vis)ᵀ((1−M_v)⊙K_amo)`, `N×HW×HW`.
pub fn pga_relation_logits<'g>(s: &Scope<'_, 'g>, f: Var<'g>, guide: &PgaGuide<'g>) -> Var<'g> {
    let shape = f.shape();
    let (n, hw) = (shape[0], shape[2] * shape[3]);
    let k_vis = conv(s, "phi", Var::concat(&[f, guide.modal_parsing], 1), 1, 0);
    let k_amo = conv(s, "psi", Var::concat(&[f, guide.amodal_parsing], 1), 1, 0);
    let ck = k_vis.shape()[1];
    let vis = (k_vis * guide.visible).reshape([n, ck, hw]);
    let amo = (k_amo * guide.visible.rsub_scalar(1.0)).reshape([n, ck, hw]);
    vis.transpose().bmm(amo)
}

/// `R = softmax(R̃, dim 0)`: every column is a distribution over positions.
pub fn pga_relation_matrix<'g>(s: &Scope<'_, 'g>, f: Var<'g>, guide: &PgaGuide<'g>) -> Var<'g> {
    pga_relation_logits(s, f, guide).softmax(1)
}

/// Aggregates `f` through the relation matrix: `out[:, q] = Σ_p f[:, p] R[p, q]`.
fn relation_stream<'g>(s: &Scope<'_, 'g>, f: Var<'g>, guide: &PgaGuide<'g>) -> Var<'g> {
    let shape = f.shape();
    let r = pga_relation_matrix(s, f, guide);
    f.reshape([shape[0], shape[1], shape[2] * shape[3]])
        .bmm(r)
        .reshape(shape)
}

/// The relation stream on its own, exposed for ablations and checks.
pub fn pga_relation_stream<'g>(s: &Scope<'_, 'g>, f: Var<'g>, guide: &PgaGuide<'g>) -> Var<'g> {
    relation_stream(s, f, guide)
}
