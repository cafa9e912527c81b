//! Small layer helpers shared by the two stages.

use deocc_tensor::{Init, ParamStore, Scope, Var};

use crate::error::{Error, Result};

pub(crate) const LEAK: f64 = 0.2;

/// Inserts `{name}.w` and `{name}.b` for a `k×k` convolution.
pub(crate) fn add_conv(store: &mut ParamStore, init: &mut Init, name: &str, cout: usize, cin: usize, k: usize) {
    let (w, b) = init.conv(cout, cin, k);
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), b);
}

pub(crate) fn conv<'g>(s: &Scope<'_, 'g>, name: &str, x: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
    x.conv2d(s.var(&format!("{name}.w")), Some(s.var(&format!("{name}.b"))), stride, pad)
}

/// Four `k4 s2 p1` convolutions; the spatial output is `⌊H/16⌋×⌊W/16⌋`.
///
/// Used for both PatchGAN discriminators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchDiscriminator {
    pub in_channels: usize,
    pub base_channels: usize,
}

impl PatchDiscriminator {
    pub const MIN_SIDE: usize = 16;

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let b = self.base_channels;
        let chans = [self.in_channels, b, 2 * b, 4 * b, 1];
        for i in 0..4 {
            add_conv(&mut store, &mut init, &format!("d{i}"), chans[i + 1], chans[i], 4);
        }
        store
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects N×{}×H×W, got {shape:?}",
                self.in_channels
            )));
        }
        if shape[2] < Self::MIN_SIDE || shape[3] < Self::MIN_SIDE {
            return Err(Error::Shape(format!(
                "discriminator input {}×{} is below {}×{}",
                shape[2],
                shape[3],
                Self::MIN_SIDE,
                Self::MIN_SIDE
            )));
        }
        Ok(())
    }

    /// Patch logits `N×1×⌊H/16⌋×⌊W/16⌋`.
    pub fn forward<'g>(&self, s: &Scope<'_, 'g>, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        for i in 0..4 {
            h = conv(s, &format!("d{i}"), h, 2, 1);
            if i < 3 {
                h = h.leaky_relu(LEAK);
            }
        }
        h
    }
}
