//! Reference transform 1: four stride-2 convolutions with divisive
//! normalization between them, mirrored by transposed convolutions.

use rand_chacha::ChaCha12Rng;

use super::{build_hyper, HyperPair, Layer, Stack, TransformConfig, TransformError, TransformPair};
use crate::nn::{Conv2d, ConvT2d, Gdn, ParamStore};

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
            Layer::Conv(Conv2d::new(store, rng, "g_a.0", 3, u, 5, 2, 2)),
            Layer::Gdn(Gdn::new(store, "g_a.gdn0", u, false)),
            Layer::Conv(Conv2d::new(store, rng, "g_a.1", u, u, 5, 2, 2)),
            Layer::Gdn(Gdn::new(store, "g_a.gdn1", u, false)),
            Layer::Conv(Conv2d::new(store, rng, "g_a.2", u, u, 5, 2, 2)),
            Layer::Gdn(Gdn::new(store, "g_a.gdn2", u, false)),
            Layer::Conv(Conv2d::new(store, rng, "g_a.3", u, m, 5, 2, 2)),
        ],
    };
    let synthesis = Stack {
        name: "g_s".into(),
        layers: vec![
            Layer::ConvT(ConvT2d::new(store, rng, "g_s.0", m, u, 5, 2, 2, 1)),
            Layer::Gdn(Gdn::new(store, "g_s.igdn0", u, true)),
            Layer::ConvT(ConvT2d::new(store, rng, "g_s.1", u, u, 5, 2, 2, 1)),
            Layer::Gdn(Gdn::new(store, "g_s.igdn1", u, true)),
            Layer::ConvT(ConvT2d::new(store, rng, "g_s.2", u, u, 5, 2, 2, 1)),
            Layer::Gdn(Gdn::new(store, "g_s.igdn2", u, true)),
            Layer::ConvT(ConvT2d::new(store, rng, "g_s.3", u, 3, 5, 2, 2, 1)),
            Layer::ClampUnit,
        ],
    };
    let pair = TransformPair {
        name: "baseline_conv".into(),
        analysis,
        synthesis,
        latent_channels: m,
    };
    Ok((pair, build_hyper(config, store, rng)))
}
