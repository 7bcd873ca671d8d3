//! Rate-distortion-complexity measurement.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::model::CodecModel;
use crate::transforms::{HYPER_DOWNSAMPLE, LATENT_DOWNSAMPLE};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("curve needs at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("curves do not overlap in PSNR by at least 1 dB (overlap {0:.3} dB)")]
    NoOverlap(f64),
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("no usable images in {0}")]
    NoImages(String),
    #[error(transparent)]
    Codec(#[from] codec::CodecError),
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 1e-10 {
        100.0
    } else {
        (-10.0 * mse.log10()).min(100.0)
    }
}

/// PSNR in dB between two `[3,H,W]` images in [0,1], peak 1.0, capped at 100.
pub fn psnr(x: &Array3<f32>, xhat: &Array3<f32>) -> Result<f64, EvalError> {
    if x.dim() != xhat.dim() {
        return Err(EvalError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: xhat.shape().to_vec(),
        });
    }
    let mut se = 0.0f64;
    for (a, b) in x.iter().zip(xhat.iter()) {
        let d = (*a as f64) - (*b as f64);
        se += d * d;
    }
    Ok(psnr_from_mse(se / x.len() as f64))
}

/// Bits per pixel of a payload against true (pre-padding) dimensions.
pub fn bpp(n_bytes: usize, width: u32, height: u32) -> f64 {
    8.0 * n_bytes as f64 / (width as f64 * height as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RDCurve {
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(points: Vec<RDPoint>) -> Self {
        let mut c = RDCurve { points };
        c.sort();
        c
    }

    pub fn sort(&mut self) {
        self.points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).unwrap());
    }

    /// Warn-level sanity: PSNR should not decrease as bpp grows.
    pub fn monotone_violations(&self) -> usize {
        self.points.windows(2).filter(|w| w[1].psnr < w[0].psnr).count()
    }
}

/// Monotone piecewise-cubic (Fritsch–Carlson) interpolant.
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self, EvalError> {
        let n = x.len();
        if n < 2 {
            return Err(EvalError::TooFewPoints { need: 2, got: n });
        }
        if !x.windows(2).all(|w| w[1] > w[0]) {
            return Err(EvalError::InvalidCurve("PSNR values must be strictly increasing".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0f64; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            d[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] <= 0.0 {
                    d[i] = 0.0;
                } else {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
        }
        Ok(Pchip { x, y, d })
    }

    /// Integral over `[a, b]`, which must lie inside the knot range.
    fn integrate(&self, a: f64, b: f64) -> f64 {
        debug_assert!(a >= self.x[0] - 1e-9 && b <= *self.x.last().unwrap() + 1e-9);
        let mut total = 0.0;
        for i in 0..self.x.len() - 1 {
            let (x0, x1) = (self.x[i], self.x[i + 1]);
            let lo = a.max(x0);
            let hi = b.min(x1);
            if hi <= lo {
                continue;
            }
            let h = x1 - x0;
            let t0 = (lo - x0) / h;
            let t1 = (hi - x0) / h;
            total += h * self.segment_integral(i, t0, t1);
        }
        total
    }

    /// Integral of the Hermite cubic on segment `i` over `t in [t0, t1]`
    /// (in unit-parameter coordinates).
    fn segment_integral(&self, i: usize, t0: f64, t1: f64) -> f64 {
        let h = self.x[i + 1] - self.x[i];
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let (d0, d1) = (self.d[i] * h, self.d[i + 1] * h);
        // antiderivatives of the Hermite basis
        let h00 = |t: f64| t - t.powi(3) + t.powi(4) / 2.0;
        let h10 = |t: f64| t.powi(2) / 2.0 - 2.0 * t.powi(3) / 3.0 + t.powi(4) / 4.0;
        let h01 = |t: f64| t.powi(3) - t.powi(4) / 2.0;
        let h11 = |t: f64| -t.powi(3) / 3.0 + t.powi(4) / 4.0;
        let at = |t: f64| h00(t) * y0 + h10(t) * d0 + h01(t) * y1 + h11(t) * d1;
        at(t1) - at(t0)
    }
}

fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

fn curve_to_xy(curve: &RDCurve) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    if curve.points.len() < 4 {
        return Err(EvalError::TooFewPoints { need: 4, got: curve.points.len() });
    }
    let mut pts = curve.points.clone();
    pts.sort_by(|a, b| a.psnr.partial_cmp(&b.psnr).unwrap());
    for p in &pts {
        if !(p.bpp > 0.0) {
            return Err(EvalError::InvalidCurve(format!("non-positive bpp {}", p.bpp)));
        }
    }
    let x: Vec<f64> = pts.iter().map(|p| p.psnr).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.bpp.log10()).collect();
    Ok((x, y))
}

/// Bjøntegaard delta rate of `test` against `anchor`, in percent.
/// Positive means the test codec spends more bits at equal quality.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<f64, EvalError> {
    let (xa, ya) = curve_to_xy(anchor)?;
    let (xt, yt) = curve_to_xy(test)?;
    let lo = xa[0].max(xt[0]);
    let hi = xa.last().unwrap().min(*xt.last().unwrap());
    if hi - lo < 1.0 {
        return Err(EvalError::NoOverlap((hi - lo).max(0.0)));
    }
    let pa = Pchip::new(xa, ya)?;
    let pt = Pchip::new(xt, yt)?;
    let avg_diff = (pt.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo);
    Ok(100.0 * (10f64.powf(avg_diff) - 1.0))
}

/// Total trainable scalars.
pub fn count_params(model: &CodecModel) -> usize {
    model.total_params()
}

/// Multiply-accumulates per image pixel for one encode + decode of an
/// `HxW` image. The decoder's recomputation of the hyper synthesis and the
/// context nets is counted (that work really runs twice).
pub fn macs_per_pixel(model: &CodecModel, h: usize, w: usize) -> u64 {
    assert!(h % 64 == 0 && w % 64 == 0, "measure at padded dims");
    let (lh, lw) = (h / LATENT_DOWNSAMPLE, w / LATENT_DOWNSAMPLE);
    let (zh, zw) = (lh / HYPER_DOWNSAMPLE, lw / HYPER_DOWNSAMPLE);
    let (ga, _) = model.transform.analysis.macs(h, w);
    let (gs, _) = model.transform.synthesis.macs(lh, lw);
    let (ha, _) = model.hyper.hyper_analysis.macs(lh, lw);
    let (hs, _) = model.hyper.hyper_synthesis.macs(zh, zw);
    let ctx = model.context.macs(lh, lw);
    let enc = ga + ha + hs + ctx;
    let dec = hs + ctx + gs;
    let total = enc + dec;
    ((total as f64) / (h as f64 * w as f64)).round() as u64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub params_total: usize,
    pub macs_per_pixel: u64,
    pub enc_seconds: f64,
    pub dec_seconds: f64,
}

/// Mean per-point RD evaluation of `images` over a gain grid. Each point
/// averages payload bpp and PSNR (in dB) across the images.
pub fn rd_curve(
    model: &CodecModel,
    images: &[Array3<f32>],
    gains: &[f64],
) -> Result<RDCurve, EvalError> {
    if images.is_empty() {
        return Err(EvalError::NoImages("<memory>".into()));
    }
    let mut points = Vec::with_capacity(gains.len());
    for g in gains {
        let mut bpp_sum = 0.0;
        let mut psnr_sum = 0.0;
        for img in images {
            let r = codec::compress_to_stream(model, img, *g as f32)?;
            let decoded = codec::decompress_from_stream(model, &r.stream)?;
            bpp_sum += bpp(r.stream.payload_bytes(), r.stream.header.width, r.stream.header.height);
            psnr_sum += psnr(img, &decoded)?;
        }
        points.push(RDPoint {
            bpp: bpp_sum / images.len() as f64,
            psnr: psnr_sum / images.len() as f64,
        });
    }
    Ok(RDCurve::new(points))
}

/// Wall-clock encode/decode means over `images x repeats`, single worker,
/// entropy coding included, one discarded warmup run.
pub fn latency_benchmark(
    model: &CodecModel,
    images: &[Array3<f32>],
    gain: f64,
    repeats: usize,
) -> Result<(f64, f64), EvalError> {
    assert!(repeats >= 1 && !images.is_empty());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        // warmup
        let r = codec::compress_to_stream(model, &images[0], gain as f32)?;
        let _ = codec::decompress_from_stream(model, &r.stream)?;
        let mut enc = 0.0;
        let mut dec = 0.0;
        let mut n = 0usize;
        for _ in 0..repeats {
            for img in images {
                let t0 = std::time::Instant::now();
                let r = codec::compress_to_stream(model, img, gain as f32)?;
                enc += t0.elapsed().as_secs_f64();
                let t1 = std::time::Instant::now();
                let _ = codec::decompress_from_stream(model, &r.stream)?;
                dec += t1.elapsed().as_secs_f64();
                n += 1;
            }
        }
        Ok((enc / n as f64, dec / n as f64))
    })
}

/// Minimal SVG rate-distortion plot (bpp horizontal, PSNR vertical).
pub fn rd_curve_svg(curves: &[(String, RDCurve)]) -> String {
    let (w, h, mx, my) = (640.0, 480.0, 60.0, 40.0);
    let mut all: Vec<RDPoint> = curves.iter().flat_map(|(_, c)| c.points.clone()).collect();
    if all.is_empty() {
        all.push(RDPoint { bpp: 1.0, psnr: 30.0 });
    }
    let (bmin, bmax) = all.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.bpp), a.1.max(p.bpp)));
    let (pmin, pmax) = all.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.psnr), a.1.max(p.psnr)));
    let (bspan, pspan) = ((bmax - bmin).max(1e-6), (pmax - pmin).max(1e-6));
    let sx = |b: f64| mx + (b - bmin) / bspan * (w - 2.0 * mx);
    let sy = |p: f64| h - my - (p - pmin) / pspan * (h - 2.0 * my);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{:.0}\" y=\"{:.0}\" font-size=\"12\">bpp</text>\n\
         <text x=\"8\" y=\"{:.0}\" font-size=\"12\">PSNR (dB)</text>\n",
        w / 2.0,
        h - 8.0,
        h / 2.0
    );
    for (ci, (label, curve)) in curves.iter().enumerate() {
        let color = colors[ci % colors.len()];
        let path: Vec<String> = curve
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, sx(p.bpp), sy(p.psnr))
            })
            .collect();
        s.push_str(&format!(
            "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        for p in &curve.points {
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(p.bpp),
                sy(p.psnr)
            ));
        }
        s.push_str(&format!(
            "<text x=\"{:.0}\" y=\"{:.0}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            w - 2.0 * mx,
            my + 14.0 * ci as f64
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let x = Array3::<f32>::zeros((3, 4, 4));
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        // uniform error of 1/255 -> 20 log10(255)
        let y = x.mapv(|v| v + 1.0 / 255.0);
        let p = psnr(&x, &y).unwrap();
        assert!((p - 48.1308).abs() < 1e-3, "{p}");
        // symmetric
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
    }

    #[test]
    fn psnr_shape_mismatch() {
        let x = Array3::<f32>::zeros((3, 4, 4));
        let y = Array3::<f32>::zeros((3, 4, 5));
        assert!(psnr(&x, &y).is_err());
    }

    #[test]
    fn bpp_examples() {
        assert_eq!(bpp(49152, 768, 512), 1.0);
        assert_eq!(bpp(0, 10, 10), 0.0);
        // linear in byte count
        assert_eq!(bpp(2 * 49152, 768, 512), 2.0);
    }

    fn curve(points: &[(f64, f64)]) -> RDCurve {
        RDCurve::new(points.iter().map(|(b, p)| RDPoint { bpp: *b, psnr: *p }).collect())
    }

    fn base_curve() -> RDCurve {
        curve(&[(0.25, 30.0), (0.5, 33.5), (1.0, 37.0), (2.0, 40.2), (4.0, 43.0)])
    }

    #[test]
    fn bd_rate_identical_is_zero() {
        let a = base_curve();
        assert_eq!(bd_rate(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn bd_rate_constant_offsets_closed_form() {
        let a = base_curve();
        let up = RDCurve::new(
            a.points.iter().map(|p| RDPoint { bpp: p.bpp * 1.10, psnr: p.psnr }).collect(),
        );
        let down = RDCurve::new(
            a.points.iter().map(|p| RDPoint { bpp: p.bpp * 0.90, psnr: p.psnr }).collect(),
        );
        assert!((bd_rate(&a, &up).unwrap() - 10.0).abs() < 0.001);
        assert!((bd_rate(&a, &down).unwrap() + 10.0).abs() < 0.001);
    }

    #[test]
    fn bd_rate_invariant_to_point_order() {
        let a = base_curve();
        let mut shuffled = a.clone();
        shuffled.points.reverse();
        let t = RDCurve::new(
            a.points.iter().map(|p| RDPoint { bpp: p.bpp * 1.05, psnr: p.psnr }).collect(),
        );
        let r1 = bd_rate(&a, &t).unwrap();
        let r2 = bd_rate(&shuffled, &t).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn bd_rate_requires_overlap() {
        let a = base_curve();
        let far = curve(&[(0.1, 50.0), (0.2, 52.0), (0.4, 54.0), (0.8, 56.0)]);
        assert!(matches!(bd_rate(&a, &far), Err(EvalError::NoOverlap(_))));
    }

    #[test]
    fn bd_rate_requires_four_points() {
        let a = base_curve();
        let few = curve(&[(0.25, 30.0), (0.5, 33.0), (1.0, 36.0)]);
        assert!(matches!(bd_rate(&a, &few), Err(EvalError::TooFewPoints { .. })));
    }

    #[test]
    fn pchip_matches_linear_data_exactly() {
        // on affine data the monotone interpolant reproduces the line
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let p = Pchip::new(x, y).unwrap();
        // integral of 2x+1 over [0.5, 4.5] = (x^2 + x) | = (20.25+4.5)-(0.25+0.5)
        let exact = 24.75 - 0.75;
        assert!((p.integrate(0.5, 4.5) - exact).abs() < 1e-12);
    }

    #[test]
    fn monotone_violation_counter() {
        let c = curve(&[(0.2, 30.0), (0.4, 29.0), (0.8, 35.0)]);
        assert_eq!(c.monotone_violations(), 1);
    }
}
