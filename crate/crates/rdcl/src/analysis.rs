//! Diagnostic instruments: latent correlation and bit-allocation maps.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::Serialize;
use thiserror::Error;

use crate::entropy::{gaussian_bin_prob, EntropyParams, LIKELIHOOD_FLOOR};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Sliding-window latent correlation. `rho[i]` is the mean product of the
/// standardized latent at window offset `i` with the window center, pooled
/// over all valid windows and channels.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelationMap {
    pub k: usize,
    /// Row-major `k*k` correlations.
    pub rho: Vec<f64>,
    pub n_windows: u64,
}

impl CorrelationMap {
    pub fn center_index(&self) -> usize {
        (self.k * self.k - 1) / 2
    }

    pub fn center(&self) -> f64 {
        self.rho[self.center_index()]
    }

    pub fn at(&self, di: isize, dj: isize) -> f64 {
        let r = self.k / 2;
        let i = (di + r as isize) as usize;
        let j = (dj + r as isize) as usize;
        self.rho[i * self.k + j]
    }
}

/// Correlation of each window offset with the window center over the
/// standardized latent `(y_hat - mu) / sigma`. Windows that would cross the
/// border are skipped; channels are pooled uniformly.
pub fn latent_correlation(
    y_hat: &Array3<f32>,
    params: &EntropyParams,
    k: usize,
) -> Result<CorrelationMap, AnalysisError> {
    let (c, h, w) = y_hat.dim();
    if k % 2 == 0 || k == 0 {
        return Err(AnalysisError::Contract(format!("window size {k} must be odd")));
    }
    if params.mu.shape() != [c, h, w] {
        return Err(AnalysisError::Contract(format!(
            "entropy params shape {:?} does not match latent [{c},{h},{w}]",
            params.mu.shape()
        )));
    }
    let r = k / 2;
    if h < k || w < k {
        return Err(AnalysisError::Contract(format!(
            "window {k}x{k} larger than latent {h}x{w}"
        )));
    }
    // standardize once
    let mut z = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mu = params.mu[[ci, i, j]] as f64;
                let sg = (params.sigma[[ci, i, j]] as f64).max(crate::entropy::SIGMA_MIN);
                z[[ci, i, j]] = (y_hat[[ci, i, j]] as f64 - mu) / sg;
            }
        }
    }
    let mut acc = vec![0.0f64; k * k];
    let mut n_windows = 0u64;
    for ci in 0..c {
        for i in r..h - r {
            for j in r..w - r {
                let zc = z[[ci, i, j]];
                for di in 0..k {
                    for dj in 0..k {
                        let zi = z[[ci, i + di - r, j + dj - r]];
                        acc[di * k + dj] += zi * zc;
                    }
                }
                n_windows += 1;
            }
        }
    }
    let rho = acc.iter().map(|a| a / n_windows as f64).collect();
    Ok(CorrelationMap { k, rho, n_windows })
}

/// Mean absolute off-center correlation; the center entry carries no
/// de-correlation information (it is the standardized second moment).
pub fn avg_rho(map: &CorrelationMap) -> f64 {
    let c = map.center_index();
    let sum: f64 = map
        .rho
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != c)
        .map(|(_, v)| v.abs())
        .sum();
    sum / (map.k * map.k - 1) as f64
}

/// Per-location estimated bits of the coded latent, summed over channels.
#[derive(Debug, Clone, Serialize)]
pub struct BitsMap {
    pub shape: (usize, usize),
    /// Row-major `h*w` bits.
    pub bits: Vec<f64>,
    pub total_bits: f64,
}

impl BitsMap {
    pub fn as_array(&self) -> Array2<f64> {
        Array2::from_shape_vec(self.shape, self.bits.clone()).unwrap()
    }
}

/// Bits per latent spatial location under the Gaussian model. The sum over
/// the map equals the total rate estimate by construction.
pub fn bits_allocation_map(
    y_hat: &Array3<f32>,
    params: &EntropyParams,
) -> Result<BitsMap, AnalysisError> {
    let (c, h, w) = y_hat.dim();
    if params.mu.shape() != [c, h, w] {
        return Err(AnalysisError::Contract(format!(
            "entropy params shape {:?} does not match latent [{c},{h},{w}]",
            params.mu.shape()
        )));
    }
    let mut bits = vec![0.0f64; h * w];
    let mut total = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            let mut b = 0.0f64;
            for ci in 0..c {
                let p = gaussian_bin_prob(
                    y_hat[[ci, i, j]] as f64,
                    params.mu[[ci, i, j]] as f64,
                    params.sigma[[ci, i, j]] as f64,
                )
                .max(LIKELIHOOD_FLOOR);
                b -= p.log2();
            }
            bits[i * w + j] = b;
            total += b;
        }
    }
    Ok(BitsMap { shape: (h, w), bits, total_bits: total })
}

/// 8-bit grayscale heatmap: darkest pixel = min bits, brightest = max bits.
pub fn export_heatmap(map: &BitsMap, path: &Path) -> Result<(), AnalysisError> {
    let (h, w) = map.shape;
    let (lo, hi) = map
        .bits
        .iter()
        .fold((f64::MAX, f64::MIN), |a, v| (a.0.min(*v), a.1.max(*v)));
    let span = (hi - lo).max(1e-12);
    let pixels: Vec<u8> = map
        .bits
        .iter()
        .map(|v| (((v - lo) / span) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("buffer matches dims")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| AnalysisError::Io(e.to_string()))
}
