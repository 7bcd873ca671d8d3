//! Quantized cumulative-frequency tables for the range coder.

use super::gaussian::{phi, SIGMA_MIN};
use super::EntropyError;

pub const DEFAULT_PRECISION: u8 = 16;
/// Mass left outside the central support (split between the two escape bins).
pub const DEFAULT_TAIL_MASS: f64 = 1.0 / 512.0;
/// Tables always cover at least this many symbols on each side of center.
pub const MIN_HALF_SUPPORT: i64 = 8;

/// Cumulative counts over an integer symbol range. `cum` has one entry per
/// bin boundary: `cum[0] = 0`, `cum[n] = 2^precision`, strictly increasing,
/// so every bin carries at least one count and stays codable.
#[derive(Debug, Clone)]
pub struct CdfTable {
    pub precision: u8,
    /// Symbol value of the first bin (the low escape bin).
    pub offset: i32,
    pub cum: Vec<u32>,
    /// Whether the two end bins are escape markers routing to bypass coding
    /// rather than literal symbols.
    pub has_escapes: bool,
}

impl CdfTable {
    pub fn n_bins(&self) -> usize {
        self.cum.len() - 1
    }

    /// Inclusive codable symbol range (escape bins included).
    pub fn symbol_range(&self) -> (i32, i32) {
        (self.offset, self.offset + self.n_bins() as i32 - 1)
    }

    pub fn total(&self) -> u32 {
        1u32 << self.precision
    }

    /// (cumulative, frequency) of `symbol`, or an out-of-range error.
    pub fn lookup(&self, symbol: i32) -> Result<(u32, u32), EntropyError> {
        let (lo, hi) = self.symbol_range();
        if symbol < lo || symbol > hi {
            return Err(EntropyError::SymbolOutOfRange { symbol, lo, hi });
        }
        let i = (symbol - lo) as usize;
        Ok((self.cum[i], self.cum[i + 1] - self.cum[i]))
    }

    /// Find the bin containing a scaled value in `[0, 2^precision)`.
    /// Returns `(symbol, cumulative, frequency)`.
    pub fn find(&self, scaled: u32) -> (i32, u32, u32) {
        debug_assert!(scaled < self.total());
        // binary search for the last boundary <= scaled
        let mut lo = 0usize;
        let mut hi = self.cum.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= scaled {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (self.offset + lo as i32, self.cum[lo], self.cum[lo + 1] - self.cum[lo])
    }

    /// Inclusive range of symbols coded literally (escape markers trimmed).
    pub fn literal_range(&self) -> (i32, i32) {
        let (lo, hi) = self.symbol_range();
        if self.has_escapes {
            (lo + 1, hi - 1)
        } else {
            (lo, hi)
        }
    }

    /// Table-implied code length of a symbol, for coder-vs-estimate checks.
    pub fn bits(&self, symbol: i32) -> Result<f64, EntropyError> {
        let (_, freq) = self.lookup(symbol)?;
        Ok(-(freq as f64 / self.total() as f64).log2())
    }
}

/// Build a table from cumulative probabilities at each bin boundary.
/// `bounds[i]` is `P(X < boundary_i)` for `n_bins + 1` boundaries, with
/// `bounds[0] = 0` and `bounds[n] = 1`. Rounding happens on the cumulative
/// values so mass is conserved exactly; a two-pass sweep then guarantees
/// every bin at least one count.
pub(crate) fn quantize_boundaries(bounds: &[f64], precision: u8, offset: i32) -> CdfTable {
    assert!((8..=16).contains(&precision), "precision must be in [8, 16]");
    let total = 1u64 << precision;
    let n = bounds.len() - 1;
    assert!(n as u64 <= total, "too many bins for precision");
    let mut cum: Vec<u32> = bounds
        .iter()
        .map(|b| ((b * total as f64).round() as u64).min(total) as u32)
        .collect();
    cum[0] = 0;
    cum[n] = total as u32;
    // forward: strictly increasing from below
    for i in 1..=n {
        let min_allowed = cum[i - 1] + 1;
        if cum[i] < min_allowed {
            cum[i] = min_allowed;
        }
    }
    cum[n] = total as u32;
    // backward: restore the fixed top, keep bins nonempty
    for i in (1..n).rev() {
        let max_allowed = cum[i + 1] - 1;
        if cum[i] > max_allowed {
            cum[i] = max_allowed;
        }
    }
    debug_assert!(cum.windows(2).all(|w| w[1] > w[0]));
    CdfTable { precision, offset, cum, has_escapes: false }
}

/// Discretized-Gaussian table: central bins covering `1 - tail_mass` of the
/// probability plus an escape bin at each end absorbing the remaining tails.
pub fn build_cdf(mu_frac: f64, sigma: f64, precision: u8, tail_mass: f64) -> CdfTable {
    let sigma = sigma.max(SIGMA_MIN);
    assert!(tail_mass > 0.0 && tail_mass < 0.5);
    let half = tail_mass / 2.0;
    // quantile of the half-tail via bisection on Phi
    let mut lo = -40.0f64;
    let mut hi = 0.0f64;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < half {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = 0.5 * (lo + hi); // negative
    let mut s_lo = (mu_frac + sigma * z).round() as i64;
    let mut s_hi = (mu_frac - sigma * z).round() as i64;
    // widen small-sigma tables so mildly miscalibrated residuals stay
    // codable; the cost is one count on each extra bin
    let center = mu_frac.round() as i64;
    s_lo = s_lo.min(center - MIN_HALF_SUPPORT);
    s_hi = s_hi.max(center + MIN_HALF_SUPPORT);

    // boundaries: escape_lo | s_lo .. s_hi | escape_hi
    let n_central = (s_hi - s_lo + 1) as usize;
    let mut bounds = Vec::with_capacity(n_central + 3);
    bounds.push(0.0);
    for s in s_lo..=(s_hi + 1) {
        bounds.push(phi((s as f64 - 0.5 - mu_frac) / sigma));
    }
    bounds.push(1.0);
    let mut t = quantize_boundaries(&bounds, precision, (s_lo - 1) as i32);
    t.has_escapes = true;
    t
}

/// Uniform fallback table used after an escape marker; covers
/// `[-BYPASS_MAX, BYPASS_MAX]` at roughly equal mass per symbol.
pub const BYPASS_MAX: i32 = 2048;

pub fn bypass_table() -> &'static CdfTable {
    static TABLE: std::sync::OnceLock<CdfTable> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        let n = (2 * BYPASS_MAX + 1) as usize;
        let bounds: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        quantize_boundaries(&bounds, DEFAULT_PRECISION, -BYPASS_MAX)
    })
}

/// Geometric grid of coding scales. Predicted sigmas snap to the nearest
/// grid point (in log space) so the decoder rebuilds identical tables.
#[derive(Debug, Clone)]
pub struct SigmaGrid {
    sigmas: Vec<f64>,
}

pub const SIGMA_GRID_POINTS: usize = 64;
pub const SIGMA_GRID_MAX: f64 = 256.0;

impl SigmaGrid {
    pub fn new() -> Self {
        let lo = SIGMA_MIN.ln();
        let hi = SIGMA_GRID_MAX.ln();
        let n = SIGMA_GRID_POINTS;
        let sigmas = (0..n)
            .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp())
            .collect();
        SigmaGrid { sigmas }
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sigma(&self, idx: usize) -> f64 {
        self.sigmas[idx]
    }

    pub fn index_for(&self, sigma: f64) -> usize {
        let s = sigma.clamp(SIGMA_MIN, SIGMA_GRID_MAX);
        let lo = SIGMA_MIN.ln();
        let hi = SIGMA_GRID_MAX.ln();
        let n = self.sigmas.len();
        let t = (s.ln() - lo) / (hi - lo) * (n - 1) as f64;
        (t.round() as usize).min(n - 1)
    }
}

impl Default for SigmaGrid {
    fn default() -> Self {
        Self::new()
    }
}

/// One coding table per sigma-grid point (centered symbols, `mu' = 0`).
pub struct GaussianTables {
    pub grid: SigmaGrid,
    pub tables: Vec<CdfTable>,
}

impl GaussianTables {
    pub fn new(precision: u8) -> Self {
        let grid = SigmaGrid::new();
        let tables = (0..grid.len())
            .map(|i| build_cdf(0.0, grid.sigma(i), precision, DEFAULT_TAIL_MASS))
            .collect();
        GaussianTables { grid, tables }
    }

    pub fn table_for(&self, sigma: f64) -> &CdfTable {
        &self.tables[self.grid.index_for(sigma)]
    }
}
