use deocc_tensor::{Init, ParamStore, Scope, Var};

use crate::nn::{add_conv, conv, LEAK};

/// Shape of one hourglass module and its two heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HourglassConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub part_count: usize,
}

/// Raw hourglass outputs: sigmoid mask, parsing scores and the pre-head feature.
#[derive(Clone, Copy, Debug)]
pub struct HourglassOutput<'g> {
    pub mask: Var<'g>,
    pub parsing: Var<'g>,
    pub feature: Var<'g>,
}

impl HourglassConfig {
    /// Channels at encoder level `i`; doubling, capped at four times the base.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(2)
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut init = Init::new(seed);
        let mut s = ParamStore::new();
        let c = self.base_channels;
        add_conv(&mut s, &mut init, "stem", c, self.in_channels, 3);
        for i in 1..=self.depth {
            add_conv(&mut s, &mut init, &format!("down{i}"), self.channels(i), self.channels(i - 1), 3);
        }
        let cd = self.channels(self.depth);
        add_conv(&mut s, &mut init, "mid", cd, cd, 3);
        for i in (1..=self.depth).rev() {
            add_conv(&mut s, &mut init, &format!("up{i}"), self.channels(i - 1), self.channels(i), 3);
        }
        add_conv(&mut s, &mut init, "feat", c, c, 3);
        add_conv(&mut s, &mut init, "mask", 1, c, 1);
        add_conv(&mut s, &mut init, "parse", self.part_count, c, 1);
        s
    }

    /// Stride-2 encoder, nearest-upsampling decoder with additive skips.
    pub fn forward<'g>(&self, s: &Scope<'_, 'g>, x: Var<'g>) -> HourglassOutput<'g> {
        let mut skips = Vec::with_capacity(self.depth + 1);
        let mut h = conv(s, "stem", x, 1, 1).leaky_relu(LEAK);
        skips.push(h);
        for i in 1..=self.depth {
            h = conv(s, &format!("down{i}"), h, 2, 1).leaky_relu(LEAK);
            skips.push(h);
        }
        h = conv(s, "mid", h, 1, 1).leaky_relu(LEAK);
        for i in (1..=self.depth).rev() {
            let skip = skips[i - 1];
            let shape = skip.shape();
            h = h.resize_nearest(shape[2], shape[3]);
            h = conv(s, &format!("up{i}"), h, 1, 1).leaky_relu(LEAK) + skip;
        }
        let feature = conv(s, "feat", h, 1, 1).leaky_relu(LEAK);
        HourglassOutput {
            mask: conv(s, "mask", feature, 1, 0).sigmoid(),
            parsing: conv(s, "parse", feature, 1, 0),
            feature,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use deocc_tensor::{Graph, Tensor};

    #[test]
    fn odd_sizes_round_trip_through_the_decoder() {
        let cfg = HourglassConfig {
            in_channels: 4,
            base_channels: 4,
            depth: 3,
            part_count: 5,
        };
        let store = cfg.init(1);
        let g = Graph::new();
        let b = store.bind(&g, false);
        let out = cfg.forward(&b.scope(""), g.input(Tensor::zeros([2, 4, 19, 23])));
        assert_eq!(out.mask.shape(), vec![2, 1, 19, 23]);
        assert_eq!(out.parsing.shape(), vec![2, 5, 19, 23]);
        assert_eq!(out.feature.shape(), vec![2, 4, 19, 23]);
    }
}
