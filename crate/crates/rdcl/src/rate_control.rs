//! Variable-rate gain mechanism and quantization surrogates.

use ndarray::{Array3, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The Lagrange multipliers the model is trained over.
pub const LAMBDA_VALUES: [f64; 11] = [
    0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483, 0.0932, 0.1800, 0.3600, 0.7200, 1.4400,
];
pub const LAMBDA_REF: f64 = 0.0018;

#[derive(Debug, Error, PartialEq)]
pub enum RateControlError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub values: Vec<f64>,
    pub lambda_ref: f64,
}

impl LambdaGrid {
    pub fn paper_default() -> Self {
        LambdaGrid { values: LAMBDA_VALUES.to_vec(), lambda_ref: LAMBDA_REF }
    }

    pub fn validate(&self) -> Result<(), RateControlError> {
        if self.values.is_empty() || self.values.iter().any(|v| *v <= 0.0) {
            return Err(RateControlError::Domain("lambda grid must be positive".into()));
        }
        if !self.values.windows(2).all(|w| w[1] > w[0]) {
            return Err(RateControlError::Domain("lambda grid must be strictly increasing".into()));
        }
        if !self.values.iter().any(|v| (*v - self.lambda_ref).abs() < 1e-12) {
            return Err(RateControlError::Domain("lambda_ref must be a grid member".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, lambda: f64) -> Option<usize> {
        self.values.iter().position(|v| (*v - lambda).abs() < 1e-12)
    }
}

/// Scalar multiplier applied to the latent before coding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainParameter {
    pub a: f64,
    pub trainable: bool,
}

/// Gain initialization: `a = sqrt(lambda / lambda_ref)`.
pub fn init_gain(lambda: f64, lambda_ref: f64) -> Result<GainParameter, RateControlError> {
    if lambda <= 0.0 || lambda_ref <= 0.0 {
        return Err(RateControlError::Domain(format!(
            "lambda ({lambda}) and lambda_ref ({lambda_ref}) must be positive"
        )));
    }
    Ok(GainParameter { a: (lambda / lambda_ref).sqrt(), trainable: true })
}

/// Latent array with its spatial downsample factor relative to the image.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    pub data: Array3<f32>,
    pub downsample: u32,
}

impl LatentTensor {
    pub fn new(data: Array3<f32>, downsample: u32) -> Self {
        LatentTensor { data, downsample }
    }
}

pub fn apply_gain(y: &LatentTensor, g: &GainParameter) -> LatentTensor {
    LatentTensor { data: &y.data * g.a as f32, downsample: y.downsample }
}

pub fn remove_gain(y_scaled: &LatentTensor, g: &GainParameter) -> LatentTensor {
    LatentTensor { data: &y_scaled.data / g.a as f32, downsample: y_scaled.downsample }
}

/// Training-mode quantization surrogate: adds i.i.d. uniform noise on
/// `[-0.5, 0.5)`. Deterministic for a fixed caller-supplied RNG state.
pub fn quantize_noise<D: ndarray::Dimension>(
    y: &ndarray::Array<f32, D>,
    rng: &mut impl Rng,
) -> ndarray::Array<f32, D> {
    y.map(|v| v + (rng.random::<f32>() - 0.5))
}

/// Hard rounding (half away from zero); eval-path counterpart of the STE op.
pub fn quantize_ste<D: ndarray::Dimension>(y: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    y.mapv(f32::round)
}

/// Mean-centered quantization: symbols `round(y - mu)` and the dequantized
/// reconstruction `symbols + mu`.
pub fn center_quantize(
    y: &ArrayD<f32>,
    mu: &ArrayD<f32>,
) -> Result<(ArrayD<i32>, ArrayD<f32>), RateControlError> {
    if y.shape() != mu.shape() {
        return Err(RateControlError::ShapeMismatch {
            left: y.shape().to_vec(),
            right: mu.shape().to_vec(),
        });
    }
    let mut symbols = ArrayD::<i32>::zeros(y.raw_dim());
    let mut yhat = ArrayD::<f32>::zeros(y.raw_dim());
    ndarray::Zip::from(&mut symbols)
        .and(&mut yhat)
        .and(y)
        .and(mu)
        .for_each(|s, r, yv, mv| {
            let sym = (yv - mv).round();
            *s = sym as i32;
            *r = sym + mv;
        });
    Ok((symbols, yhat))
}

/// Trained per-lambda gain values plus geometric interpolation between them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainTable {
    pub grid: LambdaGrid,
    pub gains: Vec<f64>,
}

impl GainTable {
    pub fn initialized(grid: &LambdaGrid) -> Result<Self, RateControlError> {
        grid.validate()?;
        let gains = grid
            .values
            .iter()
            .map(|l| init_gain(*l, grid.lambda_ref).map(|g| g.a))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GainTable { grid: grid.clone(), gains })
    }

    /// Gain for an arbitrary lambda: exact at grid points, geometric
    /// interpolation in log-lambda between them, clamped at the ends.
    pub fn gain_for_lambda(&self, lambda: f64) -> Result<f64, RateControlError> {
        if lambda <= 0.0 {
            return Err(RateControlError::Domain("lambda must be positive".into()));
        }
        let vs = &self.grid.values;
        if lambda <= vs[0] {
            return Ok(self.gains[0]);
        }
        if lambda >= *vs.last().unwrap() {
            return Ok(*self.gains.last().unwrap());
        }
        let mut i = 0;
        while vs[i + 1] < lambda {
            i += 1;
        }
        let t = (lambda.ln() - vs[i].ln()) / (vs[i + 1].ln() - vs[i].ln());
        Ok((self.gains[i].ln() * (1.0 - t) + self.gains[i + 1].ln() * t).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn init_gain_examples() {
        assert_eq!(init_gain(0.0018, 0.0018).unwrap().a, 1.0);
        assert_eq!(init_gain(0.0072, 0.0018).unwrap().a, 2.0);
        // sqrt(1.44 / 0.0018) = sqrt(800) = 28.2842712...
        let a = init_gain(1.4400, 0.0018).unwrap().a;
        assert!((a - 28.284271).abs() < 1e-5);
    }

    #[test]
    fn init_gain_rejects_non_positive() {
        assert!(init_gain(0.0, 0.0018).is_err());
        assert!(init_gain(-1.0, 0.0018).is_err());
        assert!(init_gain(0.1, 0.0).is_err());
    }

    #[test]
    fn init_gain_monotone_over_grid() {
        let grid = LambdaGrid::paper_default();
        grid.validate().unwrap();
        let gains: Vec<f64> =
            grid.values.iter().map(|l| init_gain(*l, grid.lambda_ref).unwrap().a).collect();
        assert!(gains.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(gains[0], 1.0);
    }

    #[test]
    fn gain_apply_remove_roundtrip() {
        let y = LatentTensor::new(
            Array3::from_shape_vec((1, 1, 2), vec![1.0, -2.0]).unwrap(),
            16,
        );
        let g = GainParameter { a: 2.0, trainable: false };
        let scaled = apply_gain(&y, &g);
        assert_eq!(scaled.data.as_slice().unwrap(), &[2.0, -4.0]);
        let ident = apply_gain(&y, &GainParameter { a: 1.0, trainable: false });
        assert_eq!(ident.data, y.data);

        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let data = Array3::from_shape_fn((4, 8, 8), |_| (rng.random::<f32>() - 0.5) * 10.0);
        let y = LatentTensor::new(data.clone(), 16);
        let g = GainParameter { a: 28.2843, trainable: true };
        let back = remove_gain(&apply_gain(&y, &g), &g);
        for (a, b) in back.data.iter().zip(data.iter()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn noise_support_mean_and_determinism() {
        let y = ndarray::Array1::<f32>::zeros(1_000_000);
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let noisy = quantize_noise(&y, &mut rng);
        let mut sum = 0.0f64;
        for v in noisy.iter() {
            assert!(*v >= -0.5 && *v < 0.5);
            sum += *v as f64;
        }
        let mean = sum / noisy.len() as f64;
        assert!(mean.abs() < 0.002, "noise mean {mean} outside CLT bound");

        let mut rng2 = ChaCha12Rng::seed_from_u64(77);
        let again = quantize_noise(&y, &mut rng2);
        assert_eq!(noisy, again);
    }

    #[test]
    fn ste_rounding_rule_on_dense_grid() {
        // half-away-from-zero, probed across ties
        let xs: Vec<f32> = (-60..=60).map(|i| i as f32 * 0.05).collect();
        let arr = ndarray::Array1::from_vec(xs.clone());
        let rounded = quantize_ste(&arr);
        for (x, r) in xs.iter().zip(rounded.iter()) {
            let expect = if *x >= 0.0 { (x + 0.5).floor() } else { (x - 0.5).ceil() };
            assert_eq!(*r, expect, "at {x}");
        }
        assert_eq!(quantize_ste(&ndarray::arr1(&[1.4f32]))[0], 1.0);
        assert_eq!(quantize_ste(&ndarray::arr1(&[-1.5f32]))[0], -2.0);
        assert_eq!(quantize_ste(&ndarray::arr1(&[0.5f32]))[0], 1.0);
        assert_eq!(quantize_ste(&ndarray::arr1(&[1.5f32]))[0], 2.0);
        assert_eq!(quantize_ste(&ndarray::arr1(&[-0.5f32]))[0], -1.0);
    }

    #[test]
    fn center_quantize_examples_and_bound() {
        let y = ArrayD::from_elem(IxDyn(&[1]), 3.7f32);
        let mu = ArrayD::from_elem(IxDyn(&[1]), 3.2f32);
        let (s, yhat) = center_quantize(&y, &mu).unwrap();
        assert_eq!(s[[0]], 1);
        assert!((yhat[[0]] - 4.2).abs() < 1e-6);

        // mu = 0 degenerates to plain rounding
        let y = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.6f32, -1.2, 2.5]).unwrap();
        let (s, _) = center_quantize(&y, &ArrayD::zeros(IxDyn(&[3]))).unwrap();
        assert_eq!(s.as_slice().unwrap(), &[1, -1, 3]);

        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 1_000_000;
        let y = ArrayD::from_shape_fn(IxDyn(&[n]), |_| (rng.random::<f32>() - 0.5) * 100.0);
        let mu = ArrayD::from_shape_fn(IxDyn(&[n]), |_| (rng.random::<f32>() - 0.5) * 100.0);
        let (_, yhat) = center_quantize(&y, &mu).unwrap();
        for (r, yv) in yhat.iter().zip(y.iter()) {
            assert!((r - yv).abs() <= 0.5 + 1e-4);
        }
    }

    #[test]
    fn center_quantize_shape_mismatch() {
        let y = ArrayD::<f32>::zeros(IxDyn(&[2]));
        let mu = ArrayD::<f32>::zeros(IxDyn(&[3]));
        assert!(matches!(
            center_quantize(&y, &mu),
            Err(RateControlError::ShapeMismatch { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn center_quantize_bound_holds_for_any_inputs(
            pairs in proptest::collection::vec((-1e4f32..1e4, -1e4f32..1e4), 1..64)
        ) {
            let n = pairs.len();
            let y = ArrayD::from_shape_vec(IxDyn(&[n]), pairs.iter().map(|p| p.0).collect()).unwrap();
            let mu = ArrayD::from_shape_vec(IxDyn(&[n]), pairs.iter().map(|p| p.1).collect()).unwrap();
            let (_, yhat) = center_quantize(&y, &mu).unwrap();
            for ((r, yv), mv) in yhat.iter().zip(y.iter()).zip(mu.iter()) {
                // half-step bound with float slack scaled to the magnitudes
                let slack = (yv.abs() + mv.abs()) * 4.0 * f32::EPSILON + 1e-5;
                proptest::prop_assert!((r - yv).abs() <= 0.5 + slack);
            }
        }
    }

    #[test]
    fn gain_table_interpolates_geometrically() {
        let table = GainTable::initialized(&LambdaGrid::paper_default()).unwrap();
        // exact at grid points
        for (l, g) in table.grid.values.iter().zip(table.gains.iter()) {
            assert!((table.gain_for_lambda(*l).unwrap() - g).abs() < 1e-9);
        }
        // between points: geometric mean at the log midpoint
        let l_mid = (0.0018f64.ln() * 0.5 + 0.0035f64.ln() * 0.5).exp();
        let expect = (table.gains[0] * table.gains[1]).sqrt();
        assert!((table.gain_for_lambda(l_mid).unwrap() - expect).abs() < 1e-9);
        // clamped outside
        assert_eq!(table.gain_for_lambda(1e-9).unwrap(), table.gains[0]);
        assert_eq!(table.gain_for_lambda(10.0).unwrap(), *table.gains.last().unwrap());
    }
}
