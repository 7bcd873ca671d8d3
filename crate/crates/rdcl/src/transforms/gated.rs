//! Reference transform 2: stride-2 patch-down layers interleaved with
//! activation-free gated blocks (elementwise gate plus channel attention).

use rand_chacha::ChaCha12Rng;

use super::{build_hyper, HyperPair, Layer, Stack, TransformConfig, TransformError, TransformPair};
use crate::nn::{Conv2d, ConvT2d, ParamStore};
use crate::tensor::{Tape, T};

/// Residual gated block: 1x1 expand, split-gate, squeeze-excite style
/// channel attention, 1x1 project. No pointwise nonlinearity anywhere.
pub struct NafBlock {
    expand: Conv2d,
    attention: Conv2d,
    project: Conv2d,
    channels: usize,
}

impl NafBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, channels: usize) -> Self {
        NafBlock {
            expand: Conv2d::new(store, rng, &format!("{name}.expand"), channels, 2 * channels, 1, 1, 0),
            attention: Conv2d::new(store, rng, &format!("{name}.attn"), channels, channels, 1, 1, 0),
            project: Conv2d::new(store, rng, &format!("{name}.proj"), channels, channels, 1, 1, 0),
            channels,
        }
    }

    pub fn forward(&self, t: &Tape, ps: &ParamStore, x: T) -> T {
        let h = self.expand.forward(t, ps, x);
        let a = t.slice_channels(h, 0, self.channels);
        let b = t.slice_channels(h, self.channels, 2 * self.channels);
        let gated = t.mul(a, b);
        let pooled = t.global_avg_pool(gated);
        let weights = self.attention.forward(t, ps, pooled);
        let attended = t.mul_bc(gated, weights);
        let out = self.project.forward(t, ps, attended);
        t.add(x, out)
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.attention.param_count() + self.project.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        // attention conv runs on the pooled 1x1 map
        self.expand.macs(h, w) + self.attention.macs(1, 1) + self.project.macs(h, w)
    }
}

pub(super) fn build(
    config: &TransformConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
) -> Result<(TransformPair, HyperPair), TransformError> {
    let u = config.width;
    let m = config.latent_channels;
    if u == 0 || m == 0 || config.hyper_channels == 0 {
        return Err(TransformError::BadConfig("zero channel width".into()));
    }
    let analysis = Stack {
        name: "g_a".into(),
        layers: vec![
            Layer::Conv(Conv2d::new(store, rng, "g_a.down0", 3, u, 2, 2, 0)),
            Layer::Naf(NafBlock::new(store, rng, "g_a.blk0", u)),
            Layer::Conv(Conv2d::new(store, rng, "g_a.down1", u, u, 2, 2, 0)),
            Layer::Naf(NafBlock::new(store, rng, "g_a.blk1", u)),
            Layer::Conv(Conv2d::new(store, rng, "g_a.down2", u, u, 2, 2, 0)),
            Layer::Naf(NafBlock::new(store, rng, "g_a.blk2", u)),
            Layer::Conv(Conv2d::new(store, rng, "g_a.down3", u, m, 2, 2, 0)),
        ],
    };
    let synthesis = Stack {
        name: "g_s".into(),
        layers: vec![
            Layer::ConvT(ConvT2d::new(store, rng, "g_s.up0", m, u, 2, 2, 0, 0)),
            Layer::Naf(NafBlock::new(store, rng, "g_s.blk0", u)),
            Layer::ConvT(ConvT2d::new(store, rng, "g_s.up1", u, u, 2, 2, 0, 0)),
            Layer::Naf(NafBlock::new(store, rng, "g_s.blk1", u)),
            Layer::ConvT(ConvT2d::new(store, rng, "g_s.up2", u, u, 2, 2, 0, 0)),
            Layer::Naf(NafBlock::new(store, rng, "g_s.blk2", u)),
            Layer::ConvT(ConvT2d::new(store, rng, "g_s.up3", u, 3, 2, 2, 0, 0)),
            Layer::ClampUnit,
        ],
    };
    let pair = TransformPair {
        name: "gated_block".into(),
        analysis,
        synthesis,
        latent_channels: m,
    };
    Ok((pair, build_hyper(config, store, rng)))
}
