//! Pluggable analysis/synthesis transform pairs behind a registry.

mod baseline;
mod gated;

pub use gated::NafBlock;

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Conv2d, ConvT2d, Gdn, ParamStore};
use crate::tensor::{Tape, T};

/// Spatial reduction from image to latent.
pub const LATENT_DOWNSAMPLE: usize = 16;
/// Additional reduction from latent to hyper-latent.
pub const HYPER_DOWNSAMPLE: usize = 4;
/// Images must be padded to multiples of this before analysis.
pub const IMAGE_MULTIPLE: usize = 64;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("unknown transform '{0}'")]
    UnknownName(String),
    #[error("transform '{name}' is registered but not available: {reason}")]
    Unavailable { name: String, reason: String },
    #[error("bad transform config: {0}")]
    BadConfig(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransformConfig {
    /// Internal conv width.
    pub width: usize,
    /// Latent channels M.
    pub latent_channels: usize,
    /// Hyper-latent channels N.
    pub hyper_channels: usize,
    /// Channels produced by hyper synthesis for the context model
    /// (must be 2*M for the hyperprior-only context, which reads mu/sigma
    /// straight off the features).
    pub feature_channels: usize,
}

impl Default for TransformConfig {
    fn default() -> Self {
        // common hyperprior sizing
        TransformConfig {
            width: 128,
            latent_channels: 192,
            hyper_channels: 128,
            feature_channels: 384,
        }
    }
}

impl TransformConfig {
    pub fn toy(width: usize, m: usize, n: usize, feat: usize) -> Self {
        TransformConfig {
            width,
            latent_channels: m,
            hyper_channels: n,
            feature_channels: feat,
        }
    }
}

/// One step of a feed-forward stack.
pub enum Layer {
    Conv(Conv2d),
    ConvT(ConvT2d),
    Gdn(Gdn),
    Relu,
    Naf(NafBlock),
    /// Clamp to [0,1] with pass-through gradient (synthesis output contract).
    ClampUnit,
}

/// A named sequence of layers with parameter/MAC accounting.
pub struct Stack {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn forward(&self, t: &Tape, ps: &ParamStore, mut x: T) -> T {
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(c) => c.forward(t, ps, x),
                Layer::ConvT(c) => c.forward(t, ps, x),
                Layer::Gdn(g) => g.forward(t, ps, x),
                Layer::Relu => t.relu(x),
                Layer::Naf(n) => n.forward(t, ps, x),
                Layer::ClampUnit => t.clamp_ste(x, 0.0, 1.0),
            };
        }
        x
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.param_count(),
                Layer::ConvT(c) => c.param_count(),
                Layer::Gdn(g) => g.param_count(),
                Layer::Naf(n) => n.param_count(),
                Layer::Relu | Layer::ClampUnit => 0,
            })
            .sum()
    }

    /// (total MACs, output dims) for an `h x w` input to the stack.
    pub fn macs(&self, h: usize, w: usize) -> (u64, (usize, usize)) {
        let mut total = 0u64;
        let (mut h, mut w) = (h, w);
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    total += c.macs(h, w);
                    let (nh, nw) = c.out_dims(h, w);
                    h = nh;
                    w = nw;
                }
                Layer::ConvT(c) => {
                    total += c.macs(h, w);
                    let (nh, nw) = c.out_dims(h, w);
                    h = nh;
                    w = nw;
                }
                Layer::Gdn(g) => total += g.macs(h, w),
                Layer::Naf(n) => total += n.macs(h, w),
                Layer::Relu | Layer::ClampUnit => {}
            }
        }
        (total, (h, w))
    }
}

/// Analysis/synthesis pair mapping images to latents and back.
pub struct TransformPair {
    pub name: String,
    pub analysis: Stack,
    pub synthesis: Stack,
    pub latent_channels: usize,
}

impl TransformPair {
    /// `x [B,3,H,W]` with H, W multiples of 64 -> `y [B,M,H/16,W/16]`.
    pub fn analyze(&self, t: &Tape, ps: &ParamStore, x: T) -> Result<T, TransformError> {
        let shape = t.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(TransformError::Contract(format!("expected [B,3,H,W], got {shape:?}")));
        }
        if shape[2] % IMAGE_MULTIPLE != 0 || shape[3] % IMAGE_MULTIPLE != 0 {
            return Err(TransformError::Contract(format!(
                "image dims {}x{} not multiples of {IMAGE_MULTIPLE} (pad first)",
                shape[2], shape[3]
            )));
        }
        Ok(self.analysis.forward(t, ps, x))
    }

    /// `y_hat [B,M,h,w]` -> image in [0,1] of shape `[B,3,16h,16w]`.
    pub fn synthesize(&self, t: &Tape, ps: &ParamStore, y: T) -> Result<T, TransformError> {
        let shape = t.shape(y);
        if shape.len() != 4 || shape[1] != self.latent_channels {
            return Err(TransformError::Contract(format!(
                "expected [B,{},h,w], got {shape:?}",
                self.latent_channels
            )));
        }
        Ok(self.synthesis.forward(t, ps, y))
    }

    pub fn param_count(&self) -> usize {
        self.analysis.param_count() + self.synthesis.param_count()
    }
}

/// Hyper analysis/synthesis pair around the hyper-latent z.
pub struct HyperPair {
    pub hyper_analysis: Stack,
    pub hyper_synthesis: Stack,
    pub hyper_channels: usize,
    pub feature_channels: usize,
}

impl HyperPair {
    /// `y [B,M,h,w]` -> `z [B,N,h/4,w/4]`.
    pub fn hyper_analyze(&self, t: &Tape, ps: &ParamStore, y: T) -> T {
        self.hyper_analysis.forward(t, ps, y)
    }

    /// `z_hat [B,N,h/4,w/4]` -> context features `[B,F,h,w]`.
    pub fn hyper_synthesize(&self, t: &Tape, ps: &ParamStore, z: T) -> T {
        self.hyper_synthesis.forward(t, ps, z)
    }

    pub fn param_count(&self) -> usize {
        self.hyper_analysis.param_count() + self.hyper_synthesis.param_count()
    }
}

pub type BuildFn =
    fn(&TransformConfig, &mut ParamStore, &mut ChaCha12Rng) -> Result<(TransformPair, HyperPair), TransformError>;

/// Name -> constructor map for transform pairs.
pub struct TransformRegistry {
    entries: BTreeMap<String, BuildFn>,
}

impl TransformRegistry {
    pub fn empty() -> Self {
        TransformRegistry { entries: BTreeMap::new() }
    }

    /// Registry with the built-in transforms.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("baseline_conv", baseline::build);
        r.register("gated_block", gated::build);
        // contract slot for a deformable-conv transform; the kernel itself
        // is not bundled, so building it reports unavailability
        r.register("dcnv4", |_, _, _| {
            Err(TransformError::Unavailable {
                name: "dcnv4".into(),
                reason: "deformable-conv kernels are not bundled with this build".into(),
            })
        });
        r
    }

    pub fn register(&mut self, name: &str, f: BuildFn) {
        self.entries.insert(name.to_string(), f);
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn build(
        &self,
        name: &str,
        config: &TransformConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
    ) -> Result<(TransformPair, HyperPair), TransformError> {
        let f = self
            .entries
            .get(name)
            .ok_or_else(|| TransformError::UnknownName(name.to_string()))?;
        f(config, store, rng)
    }

    /// Parameter-budget fairness report across registered transforms.
    pub fn budget_report(
        &self,
        names: &[&str],
        config: &TransformConfig,
        target_params: usize,
        tolerance: f64,
    ) -> Vec<BudgetRow> {
        names
            .iter()
            .map(|name| {
                let mut store = ParamStore::new();
                let mut rng = ChaCha12Rng::seed_from_u64(0);
                match self.build(name, config, &mut store, &mut rng) {
                    Ok((tp, hp)) => {
                        let params = tp.param_count() + hp.param_count();
                        let deviation =
                            (params as f64 - target_params as f64) / target_params as f64;
                        BudgetRow {
                            name: name.to_string(),
                            params: Some(params),
                            deviation,
                            flagged: deviation.abs() > tolerance,
                            note: None,
                        }
                    }
                    Err(e) => BudgetRow {
                        name: name.to_string(),
                        params: None,
                        deviation: 0.0,
                        flagged: false,
                        note: Some(e.to_string()),
                    },
                }
            })
            .collect()
    }
}

use rand::SeedableRng;

#[derive(Debug, Clone, Serialize)]
pub struct BudgetRow {
    pub name: String,
    pub params: Option<usize>,
    pub deviation: f64,
    pub flagged: bool,
    pub note: Option<String>,
}

/// Shared hyper pair used by both reference transforms.
pub(crate) fn build_hyper(
    config: &TransformConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
) -> HyperPair {
    let m = config.latent_channels;
    let n = config.hyper_channels;
    let feat = config.feature_channels;
    let ha = Stack {
        name: "h_a".into(),
        layers: vec![
            Layer::Conv(Conv2d::new(store, rng, "h_a.0", m, n, 3, 1, 1)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(store, rng, "h_a.1", n, n, 5, 2, 2)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(store, rng, "h_a.2", n, n, 5, 2, 2)),
        ],
    };
    let hs = Stack {
        name: "h_s".into(),
        layers: vec![
            Layer::ConvT(ConvT2d::new(store, rng, "h_s.0", n, n, 5, 2, 2, 1)),
            Layer::Relu,
            Layer::ConvT(ConvT2d::new(store, rng, "h_s.1", n, n, 5, 2, 2, 1)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(store, rng, "h_s.2", n, feat, 3, 1, 1)),
        ],
    };
    HyperPair {
        hyper_analysis: ha,
        hyper_synthesis: hs,
        hyper_channels: n,
        feature_channels: feat,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Arr;
    use ndarray::IxDyn;
    use rand::Rng;

    fn build_toy(name: &str, seed: u64) -> (ParamStore, TransformPair, HyperPair) {
        let reg = TransformRegistry::with_defaults();
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let cfg = TransformConfig::toy(8, 16, 8, 32);
        let (tp, hp) = reg.build(name, &cfg, &mut store, &mut rng).unwrap();
        (store, tp, hp)
    }

    #[test]
    fn shape_contracts_both_transforms() {
        for name in ["baseline_conv", "gated_block"] {
            let (store, tp, hp) = build_toy(name, 1);
            let t = Tape::no_grad();
            let x = t.constant(Arr::zeros(IxDyn(&[1, 3, 128, 64])));
            let y = tp.analyze(&t, &store, x).unwrap();
            assert_eq!(t.shape(y), vec![1, 16, 8, 4], "{name} analyze shape");
            let z = hp.hyper_analyze(&t, &store, y);
            assert_eq!(t.shape(z), vec![1, 8, 2, 1], "{name} hyper shape");
            let f = hp.hyper_synthesize(&t, &store, z);
            assert_eq!(t.shape(f), vec![1, 32, 8, 4], "{name} features shape");
            let xh = tp.synthesize(&t, &store, y).unwrap();
            assert_eq!(t.shape(xh), vec![1, 3, 128, 64], "{name} synth shape");
            // synthesized output clamped to [0,1]
            let v = t.value(xh);
            assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn non_multiple_dims_rejected() {
        let (store, tp, _) = build_toy("baseline_conv", 1);
        let t = Tape::no_grad();
        let x = t.constant(Arr::zeros(IxDyn(&[1, 3, 100, 64])));
        assert!(matches!(tp.analyze(&t, &store, x), Err(TransformError::Contract(_))));
    }

    #[test]
    fn hyperprior_features_are_two_m_under_default_config() {
        let cfg = TransformConfig::default();
        assert_eq!(cfg.feature_channels, 2 * cfg.latent_channels);
    }

    #[test]
    fn zero_hyper_latent_gives_finite_features() {
        let (store, _, hp) = build_toy("baseline_conv", 3);
        let t = Tape::no_grad();
        let z = t.constant(Arr::zeros(IxDyn(&[1, 8, 2, 2])));
        let f = t.value(hp.hyper_synthesize(&t, &store, z));
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn registry_rebuild_is_deterministic() {
        for name in ["baseline_conv", "gated_block"] {
            let (store_a, tp_a, hp_a) = build_toy(name, 9);
            let (store_b, tp_b, hp_b) = build_toy(name, 9);
            assert_eq!(tp_a.param_count(), tp_b.param_count());
            assert_eq!(hp_a.param_count(), hp_b.param_count());
            let mut rng = ChaCha12Rng::seed_from_u64(55);
            let x0 = Arr::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |_| rng.random::<f32>());
            let ta = Tape::no_grad();
            let xa = ta.constant(x0.clone());
            let ya = ta.value(tp_a.analyze(&ta, &store_a, xa).unwrap());
            let tb = Tape::no_grad();
            let xb = tb.constant(x0);
            let yb = tb.value(tp_b.analyze(&tb, &store_b, xb).unwrap());
            assert_eq!(ya, yb, "{name} eval outputs differ across rebuilds");
        }
    }

    #[test]
    fn batch_composition_does_not_change_per_image_outputs() {
        for name in ["baseline_conv", "gated_block"] {
            let (store, tp, _) = build_toy(name, 21);
            let mut rng = ChaCha12Rng::seed_from_u64(77);
            let x1 = Arr::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |_| rng.random::<f32>());
            let x2 = Arr::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |_| rng.random::<f32>());
            let mut pair = Arr::zeros(IxDyn(&[2, 3, 64, 64]));
            pair.index_axis_mut(ndarray::Axis(0), 0)
                .assign(&x1.index_axis(ndarray::Axis(0), 0));
            pair.index_axis_mut(ndarray::Axis(0), 1)
                .assign(&x2.index_axis(ndarray::Axis(0), 0));
            let t = Tape::no_grad();
            let solo = t.value(tp.analyze(&t, &store, t.constant(x1)).unwrap());
            let both = t.value(tp.analyze(&t, &store, t.constant(pair)).unwrap());
            let first = both.index_axis(ndarray::Axis(0), 0);
            assert_eq!(
                solo.index_axis(ndarray::Axis(0), 0),
                first,
                "{name}: batching changed image 0's latent"
            );
        }
    }

    #[test]
    fn unknown_and_unavailable_names() {
        let reg = TransformRegistry::with_defaults();
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let cfg = TransformConfig::default();
        assert!(matches!(
            reg.build("swin", &cfg, &mut store, &mut rng),
            Err(TransformError::UnknownName(_))
        ));
        assert!(matches!(
            reg.build("dcnv4", &cfg, &mut store, &mut rng),
            Err(TransformError::Unavailable { .. })
        ));
        assert!(reg.names().contains(&"dcnv4".to_string()));
    }

    #[test]
    fn budget_report_flags_deviating_entries() {
        let reg = TransformRegistry::with_defaults();
        let cfg = TransformConfig::toy(8, 16, 8, 32);
        let rows = reg.budget_report(&["baseline_conv", "gated_block", "dcnv4"], &cfg, 0, 0.1);
        // target 0 is degenerate; recompute against baseline's own count
        let base = rows[0].params.unwrap();
        let rows = reg.budget_report(
            &["baseline_conv", "gated_block", "dcnv4"],
            &cfg,
            base,
            0.10,
        );
        assert!(!rows[0].flagged);
        let gated = &rows[1];
        let expected_flag =
            ((gated.params.unwrap() as f64 - base as f64) / base as f64).abs() > 0.10;
        assert_eq!(gated.flagged, expected_flag);
        assert!(rows[2].params.is_none() && rows[2].note.is_some());
    }

    #[test]
    fn baseline_param_count_matches_closed_form() {
        let (_, tp, _) = build_toy("baseline_conv", 2);
        // analysis: conv(3->8,k5) + gdn(8) + conv(8->8,k5) + gdn + conv + gdn + conv(8->16,k5)
        let conv = |ci: usize, co: usize| 25 * ci * co + co;
        let gdn = |c: usize| c + c * c;
        let analysis = conv(3, 8) + gdn(8) + conv(8, 8) + gdn(8) + conv(8, 8) + gdn(8) + conv(8, 16);
        assert_eq!(tp.analysis.param_count(), analysis);
        let synthesis = conv(16, 8) + gdn(8) + conv(8, 8) + gdn(8) + conv(8, 8) + gdn(8) + conv(8, 3);
        assert_eq!(tp.synthesis.param_count(), synthesis);
    }
}
