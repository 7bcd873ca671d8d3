//! Context models: coding schedules, causal masks and parameter prediction.

mod model;

pub use model::{context_param_count, matched_scctx_width, matched_width, ContextModel, UnitParams};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    Hyperprior,
    Checkerboard,
    Charm,
    Scctx,
}

impl ContextKind {
    /// High nibble of the bitstream model id.
    pub fn id_nibble(&self) -> u8 {
        match self {
            ContextKind::Hyperprior => 0,
            ContextKind::Checkerboard => 1,
            ContextKind::Charm => 2,
            ContextKind::Scctx => 3,
        }
    }

    pub fn parse(s: &str) -> Result<Self, ContextError> {
        match s {
            "hyperprior" => Ok(ContextKind::Hyperprior),
            "checkerboard" => Ok(ContextKind::Checkerboard),
            "charm" => Ok(ContextKind::Charm),
            "scctx" => Ok(ContextKind::Scctx),
            other => Err(ContextError::Config(format!("unknown context kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContextKind::Hyperprior => "hyperprior",
            ContextKind::Checkerboard => "checkerboard",
            ContextKind::Charm => "charm",
            ContextKind::Scctx => "scctx",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialPass {
    All,
    Anchor,
    NonAnchor,
}

/// One coding unit: a channel group restricted to a spatial pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingUnit {
    pub ch_start: usize,
    pub ch_end: usize,
    pub pass: SpatialPass,
}

impl CodingUnit {
    pub fn channels(&self) -> usize {
        self.ch_end - self.ch_start
    }
}

/// Ordered list of coding units; identical at encode and decode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingSchedule {
    pub units: Vec<CodingUnit>,
    pub group_sizes: Vec<usize>,
}

impl CodingSchedule {
    pub fn n_units(&self) -> usize {
        self.units.len()
    }
}

/// Complementary parity masks; anchors sit at even `i + j`.
pub fn checkerboard_masks(h: usize, w: usize) -> (Array2<f32>, Array2<f32>) {
    assert!(h >= 1 && w >= 1);
    let anchor = Array2::from_shape_fn((h, w), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { 0.0 });
    let non_anchor = anchor.mapv(|v| 1.0 - v);
    (anchor, non_anchor)
}

/// Even channel split used by the channel-autoregressive model.
pub fn charm_groups(m: usize, n_slices: usize) -> Result<Vec<usize>, ContextError> {
    if n_slices == 0 || m == 0 {
        return Err(ContextError::Config("empty channel grouping".into()));
    }
    if m % n_slices != 0 {
        return Err(ContextError::Config(format!(
            "latent channels {m} not divisible into {n_slices} equal slices"
        )));
    }
    Ok(vec![m / n_slices; n_slices])
}

/// Uneven doubling split `[g, g, 2g, 4g, remainder]` with `g = M/20`
/// rounded to a multiple of 8 (at least 8).
pub fn scctx_groups(m: usize) -> Result<Vec<usize>, ContextError> {
    let g_raw = m as f64 / 20.0;
    let g = (((g_raw / 8.0).round() as usize) * 8).max(8);
    let head = 8 * g; // g + g + 2g + 4g
    if head >= m {
        return Err(ContextError::Config(format!(
            "latent channels {m} too small for the uneven grouping rule (needs > {head})"
        )));
    }
    Ok(vec![g, g, 2 * g, 4 * g, m - head])
}

/// Schedule for a context kind over `m` latent channels.
pub fn schedule_for(kind: ContextKind, m: usize) -> Result<CodingSchedule, ContextError> {
    let schedule = match kind {
        ContextKind::Hyperprior => CodingSchedule {
            units: vec![CodingUnit { ch_start: 0, ch_end: m, pass: SpatialPass::All }],
            group_sizes: vec![m],
        },
        ContextKind::Checkerboard => CodingSchedule {
            units: vec![
                CodingUnit { ch_start: 0, ch_end: m, pass: SpatialPass::Anchor },
                CodingUnit { ch_start: 0, ch_end: m, pass: SpatialPass::NonAnchor },
            ],
            group_sizes: vec![m],
        },
        ContextKind::Charm => {
            let sizes = charm_groups(m, 10)?;
            let mut units = Vec::new();
            let mut at = 0;
            for g in &sizes {
                units.push(CodingUnit { ch_start: at, ch_end: at + g, pass: SpatialPass::All });
                at += g;
            }
            CodingSchedule { units, group_sizes: sizes }
        }
        ContextKind::Scctx => {
            let sizes = scctx_groups(m)?;
            let mut units = Vec::new();
            let mut at = 0;
            for g in &sizes {
                units.push(CodingUnit { ch_start: at, ch_end: at + g, pass: SpatialPass::Anchor });
                units.push(CodingUnit {
                    ch_start: at,
                    ch_end: at + g,
                    pass: SpatialPass::NonAnchor,
                });
                at += g;
            }
            CodingSchedule { units, group_sizes: sizes }
        }
    };
    Ok(schedule)
}

/// Raster-order element positions of a spatial pass on an `h x w` grid.
pub fn pass_positions(pass: SpatialPass, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let anchor = (i + j) % 2 == 0;
            let take = match pass {
                SpatialPass::All => true,
                SpatialPass::Anchor => anchor,
                SpatialPass::NonAnchor => !anchor,
            };
            if take {
                out.push((i, j));
            }
        }
    }
    out
}
