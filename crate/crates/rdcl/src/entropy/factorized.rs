//! Learned factorized prior on the hyper-latent.
//!
//! Each channel gets an independent scalar CDF built from a small stack of
//! monotone nonlinear maps: `u = softplus(H) v + b`, gated inner layers
//! `v' = u + tanh(a) .* tanh(u)`, sigmoid on top. Positivity of the matrix
//! weights and |tanh(a)| < 1 keep the composition strictly increasing.

use ndarray::{ArrayD, ArrayView3, IxDyn};
use rand::Rng;

use super::cdf::quantize_boundaries;
use super::gaussian::LIKELIHOOD_FLOOR;
use super::CdfTable;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Arr, Tape, T};

/// A per-channel scalar CDF over the real line.
pub trait ZDensity {
    fn channels(&self) -> usize;
    fn cdf(&self, ch: usize, x: f64) -> f64;
}

/// Total bits of a `[C, h, w]` integer-valued hyper-latent under a density:
/// `sum -log2(CDF(z + 0.5) - CDF(z - 0.5))`, floored.
pub fn factorized_bits(z: ArrayView3<f32>, density: &impl ZDensity) -> f64 {
    let (c, _, _) = z.dim();
    assert_eq!(c, density.channels(), "channel count mismatch");
    let mut total = 0.0;
    for (ch, plane) in z.outer_iter().enumerate() {
        for v in plane.iter() {
            let x = *v as f64;
            let p = (density.cdf(ch, x + 0.5) - density.cdf(ch, x - 0.5)).max(LIKELIHOOD_FLOOR);
            total -= p.log2();
        }
    }
    total
}

/// Coding table for one channel: integer support covering all but
/// `tail_mass` of the probability plus an escape bin per side.
pub fn factorized_cdf(
    density: &impl ZDensity,
    ch: usize,
    precision: u8,
    tail_mass: f64,
) -> CdfTable {
    let half = tail_mass / 2.0;
    let bound = 1 << 20;
    // smallest s with CDF(s - 0.5) > half
    let mut lo = -(bound as i64);
    let mut hi = bound as i64;
    while lo < hi {
        let mid = (lo + hi).div_euclid(2);
        if density.cdf(ch, mid as f64 - 0.5) > half {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let s_lo = lo;
    // largest s with CDF(s + 0.5) < 1 - half
    let mut lo2 = -(bound as i64);
    let mut hi2 = bound as i64;
    while lo2 < hi2 {
        let mid = (lo2 + hi2 + 1).div_euclid(2);
        if density.cdf(ch, mid as f64 + 0.5) < 1.0 - half {
            lo2 = mid;
        } else {
            hi2 = mid - 1;
        }
    }
    let s_hi = lo2.max(s_lo);
    // widen around the median like the Gaussian tables, so a mildly
    // drifting hyper-latent stays codable
    let median = (s_lo + s_hi).div_euclid(2);
    let s_lo = s_lo.min(median - crate::entropy::cdf::MIN_HALF_SUPPORT);
    let s_hi = s_hi.max(median + crate::entropy::cdf::MIN_HALF_SUPPORT);

    let mut bounds = Vec::with_capacity((s_hi - s_lo) as usize + 4);
    bounds.push(0.0);
    for s in s_lo..=(s_hi + 1) {
        bounds.push(density.cdf(ch, s as f64 - 0.5).clamp(0.0, 1.0));
    }
    bounds.push(1.0);
    let mut t = quantize_boundaries(&bounds, precision, (s_lo - 1) as i32);
    t.has_escapes = true;
    t
}

const FILTER_DIMS: [usize; 5] = [1, 3, 3, 3, 1];
const N_LAYERS: usize = 4;

/// Learned per-channel density with trainable parameters.
pub struct FactorizedDensity {
    pub channels: usize,
    /// matrix weights, one per layer: `[C, out_k, in_k]`
    pub h: Vec<ParamId>,
    /// biases `[C, out_k]`
    pub b: Vec<ParamId>,
    /// gates `[C, out_k]`, absent on the last layer
    pub a: Vec<ParamId>,
}

fn softplus64(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Raw parameter views for one channel, borrowed from node values.
struct ChannelParams<'p> {
    h: Vec<&'p [f32]>,
    b: Vec<&'p [f32]>,
    a: Vec<&'p [f32]>,
}

fn channel_slice<'p>(arr: &'p Arr, ch: usize) -> &'p [f32] {
    let per = arr.len() / arr.shape()[0];
    &arr.as_slice().unwrap()[ch * per..(ch + 1) * per]
}

/// Forward pass of one channel's CDF at x, optionally recording
/// intermediates for backprop.
fn cdf_forward(p: &ChannelParams, x: f64, trace: Option<&mut Vec<Vec<f64>>>) -> f64 {
    let mut v = vec![x];
    let mut us: Vec<Vec<f64>> = Vec::new();
    for k in 0..N_LAYERS {
        let (fi, fo) = (FILTER_DIMS[k], FILTER_DIMS[k + 1]);
        let mut u = vec![0.0f64; fo];
        for i in 0..fo {
            let mut acc = p.b[k][i] as f64;
            for (j, vj) in v.iter().enumerate() {
                acc += softplus64(p.h[k][i * fi + j] as f64) * vj;
            }
            u[i] = acc;
        }
        if k + 1 < N_LAYERS {
            let mut vn = vec![0.0f64; fo];
            for i in 0..fo {
                vn[i] = u[i] + (p.a[k][i] as f64).tanh() * u[i].tanh();
            }
            us.push(u);
            v = vn;
        } else {
            us.push(u.clone());
            v = u;
        }
    }
    if let Some(t) = trace {
        *t = us;
    }
    sigmoid64(v[0])
}

/// Gradient of the CDF output wrt x and all channel parameters.
/// Returns (dcdf/dx) and appends into the per-parameter grad buffers.
#[allow(clippy::too_many_arguments)]
fn cdf_backward(
    p: &ChannelParams,
    x: f64,
    upstream: f64,
    gh: &mut [Vec<f64>],
    gb: &mut [Vec<f64>],
    ga: &mut [Vec<f64>],
) -> f64 {
    let mut us = Vec::new();
    let c = cdf_forward(p, x, Some(&mut us));
    // rebuild v_k values from traces
    let mut vs: Vec<Vec<f64>> = vec![vec![x]];
    for k in 0..N_LAYERS - 1 {
        let u = &us[k];
        let mut vk = vec![0.0; u.len()];
        for i in 0..u.len() {
            vk[i] = u[i] + (p.a[k][i] as f64).tanh() * u[i].tanh();
        }
        vs.push(vk);
    }
    // sigmoid head
    let mut delta_v = vec![upstream * c * (1.0 - c)];
    for k in (0..N_LAYERS).rev() {
        let (fi, fo) = (FILTER_DIMS[k], FILTER_DIMS[k + 1]);
        let u = &us[k];
        let mut delta_u = vec![0.0f64; fo];
        if k + 1 < N_LAYERS {
            for i in 0..fo {
                let ta = (p.a[k][i] as f64).tanh();
                let tu = u[i].tanh();
                delta_u[i] = delta_v[i] * (1.0 + ta * (1.0 - tu * tu));
                ga[k][i] += delta_v[i] * tu * (1.0 - ta * ta);
            }
        } else {
            delta_u[0] = delta_v[0];
        }
        let vin = &vs[k];
        let mut delta_prev = vec![0.0f64; fi];
        for i in 0..fo {
            gb[k][i] += delta_u[i];
            for j in 0..fi {
                let hraw = p.h[k][i * fi + j] as f64;
                gh[k][i * fi + j] += delta_u[i] * vin[j] * sigmoid64(hraw);
                delta_prev[j] += softplus64(hraw) * delta_u[i];
            }
        }
        delta_v = delta_prev;
    }
    delta_v[0]
}

impl FactorizedDensity {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        let init_scale = 10.0f64;
        let scale = init_scale.powf(1.0 / N_LAYERS as f64);
        let mut h = Vec::new();
        let mut b = Vec::new();
        let mut a = Vec::new();
        for k in 0..N_LAYERS {
            let (fi, fo) = (FILTER_DIMS[k], FILTER_DIMS[k + 1]);
            let hinit = ((1.0 / scale / fo as f64).exp_m1()).ln() as f32;
            let harr = ArrayD::from_elem(IxDyn(&[channels, fo, fi]), hinit);
            let mut barr = ArrayD::zeros(IxDyn(&[channels, fo]));
            for v in barr.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            h.push(store.add(format!("{name}.h{k}"), harr));
            b.push(store.add(format!("{name}.b{k}"), barr));
            if k + 1 < N_LAYERS {
                a.push(store.add(format!("{name}.a{k}"), ArrayD::zeros(IxDyn(&[channels, fo]))));
            }
        }
        FactorizedDensity { channels, h, b, a }
    }

    fn gather<'p>(&self, values: &'p [Arr], ch: usize) -> ChannelParams<'p> {
        ChannelParams {
            h: (0..N_LAYERS).map(|k| channel_slice(&values[k], ch)).collect(),
            b: (0..N_LAYERS).map(|k| channel_slice(&values[N_LAYERS + k], ch)).collect(),
            a: (0..N_LAYERS - 1)
                .map(|k| channel_slice(&values[2 * N_LAYERS + k], ch))
                .collect(),
        }
    }

    fn param_values(&self, ps: &ParamStore) -> Vec<Arr> {
        self.h
            .iter()
            .chain(self.b.iter())
            .chain(self.a.iter())
            .map(|pid| ps.value(*pid).clone())
            .collect()
    }

    /// Differentiable total bits of a `[B, C, h, w]` hyper-latent tensor.
    pub fn bits_op(&self, tape: &Tape, ps: &ParamStore, z: T) -> T {
        let pids: Vec<ParamId> =
            self.h.iter().chain(self.b.iter()).chain(self.a.iter()).copied().collect();
        let leaves: Vec<T> = pids.iter().map(|pid| ps.leaf(tape, *pid)).collect();
        let channels = self.channels;

        let value = tape.with_value(z, |zv| {
            assert_eq!(zv.shape()[1], channels, "hyper-latent channel mismatch");
            let values: Vec<Arr> = self.param_values(ps);
            let mut out = Arr::zeros(zv.raw_dim());
            let (bsz, _, h, w) = crate::tensor::dims4(zv.shape());
            for ch in 0..channels {
                let p = self.gather_from(&values, ch);
                for bi in 0..bsz {
                    for yi in 0..h {
                        for xi in 0..w {
                            let x = zv[[bi, ch, yi, xi]] as f64;
                            let pr = (cdf_forward(&p, x + 0.5, None)
                                - cdf_forward(&p, x - 0.5, None))
                            .max(LIKELIHOOD_FLOOR);
                            out[[bi, ch, yi, xi]] = (-pr.log2()) as f32;
                        }
                    }
                }
            }
            out
        });

        let zi = z.0;
        let leaf_ids: Vec<usize> = leaves.iter().map(|l| l.0).collect();
        let this = self.snapshot();
        tape.push(
            value,
            Some(Box::new(move |g, nodes| {
                let zv = &nodes[zi].value;
                let values: Vec<Arr> = leaf_ids.iter().map(|i| nodes[*i].value.clone()).collect();
                let (bsz, _, h, w) = crate::tensor::dims4(zv.shape());
                let mut gz = Arr::zeros(zv.raw_dim());
                let mut gparams: Vec<Arr> =
                    values.iter().map(|v| Arr::zeros(v.raw_dim())).collect();
                let ln2 = std::f64::consts::LN_2;
                for ch in 0..this.channels {
                    let p = this.gather_from(&values, ch);
                    // per-channel parameter grad buffers
                    let mut gh: Vec<Vec<f64>> = (0..N_LAYERS)
                        .map(|k| vec![0.0; FILTER_DIMS[k] * FILTER_DIMS[k + 1]])
                        .collect();
                    let mut gb: Vec<Vec<f64>> =
                        (0..N_LAYERS).map(|k| vec![0.0; FILTER_DIMS[k + 1]]).collect();
                    let mut ga: Vec<Vec<f64>> =
                        (0..N_LAYERS - 1).map(|k| vec![0.0; FILTER_DIMS[k + 1]]).collect();
                    for bi in 0..bsz {
                        for yi in 0..h {
                            for xi in 0..w {
                                let x = zv[[bi, ch, yi, xi]] as f64;
                                let pr = cdf_forward(&p, x + 0.5, None)
                                    - cdf_forward(&p, x - 0.5, None);
                                if pr <= LIKELIHOOD_FLOOR {
                                    continue;
                                }
                                let up = g[[bi, ch, yi, xi]] as f64;
                                let coef = -up / (pr * ln2);
                                let dhi =
                                    cdf_backward(&p, x + 0.5, coef, &mut gh, &mut gb, &mut ga);
                                let dlo =
                                    cdf_backward(&p, x - 0.5, -coef, &mut gh, &mut gb, &mut ga);
                                gz[[bi, ch, yi, xi]] = (dhi + dlo) as f32;
                            }
                        }
                    }
                    // scatter channel grads into the flat parameter buffers
                    for k in 0..N_LAYERS {
                        let dst = &mut gparams[k];
                        let per = dst.len() / this.channels;
                        let sl = dst.as_slice_mut().unwrap();
                        for (j, v) in gh[k].iter().enumerate() {
                            sl[ch * per + j] += *v as f32;
                        }
                        let dstb = &mut gparams[N_LAYERS + k];
                        let perb = dstb.len() / this.channels;
                        let slb = dstb.as_slice_mut().unwrap();
                        for (j, v) in gb[k].iter().enumerate() {
                            slb[ch * perb + j] += *v as f32;
                        }
                        if k + 1 < N_LAYERS {
                            let dsta = &mut gparams[2 * N_LAYERS + k];
                            let pera = dsta.len() / this.channels;
                            let sla = dsta.as_slice_mut().unwrap();
                            for (j, v) in ga[k].iter().enumerate() {
                                sla[ch * pera + j] += *v as f32;
                            }
                        }
                    }
                }
                let mut grads = vec![(zi, gz)];
                for (i, gp) in leaf_ids.iter().zip(gparams) {
                    grads.push((*i, gp));
                }
                grads
            })),
            None,
        )
    }

    fn snapshot(&self) -> FactorizedShape {
        FactorizedShape { channels: self.channels }
    }

    fn gather_from<'p>(&self, values: &'p [Arr], ch: usize) -> ChannelParams<'p> {
        self.gather(values, ch)
    }

    /// Evaluation-time density view; parameter values are snapshotted once.
    pub fn density(&self, ps: &ParamStore) -> FactorizedEval {
        FactorizedEval { channels: self.channels, values: self.param_values(ps) }
    }
}

/// Channel-count-only copy captured by backward closures.
struct FactorizedShape {
    channels: usize,
}

impl FactorizedShape {
    fn gather_from<'p>(&self, values: &'p [Arr], ch: usize) -> ChannelParams<'p> {
        ChannelParams {
            h: (0..N_LAYERS).map(|k| channel_slice(&values[k], ch)).collect(),
            b: (0..N_LAYERS).map(|k| channel_slice(&values[N_LAYERS + k], ch)).collect(),
            a: (0..N_LAYERS - 1)
                .map(|k| channel_slice(&values[2 * N_LAYERS + k], ch))
                .collect(),
        }
    }
}

pub struct FactorizedEval {
    channels: usize,
    values: Vec<Arr>,
}

impl ZDensity for FactorizedEval {
    fn channels(&self) -> usize {
        self.channels
    }

    fn cdf(&self, ch: usize, x: f64) -> f64 {
        let p = FactorizedShape { channels: self.channels }.gather_from(&self.values, ch);
        cdf_forward(&p, x, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Uniform density over `n` integer bins centered at zero.
    struct UniformDensity {
        n: usize,
    }

    impl ZDensity for UniformDensity {
        fn channels(&self) -> usize {
            1
        }
        fn cdf(&self, _ch: usize, x: f64) -> f64 {
            let half = self.n as f64 / 2.0;
            ((x + half) / self.n as f64).clamp(0.0, 1.0)
        }
    }

    #[test]
    fn uniform_bins_cost_log2_n() {
        let d = UniformDensity { n: 5 };
        for s in -2..=2 {
            let z = ndarray::Array3::from_elem((1, 1, 1), s as f32);
            let bits = factorized_bits(z.view(), &d);
            assert!((bits - 2.321928).abs() < 1e-6, "bin {s}: {bits}");
        }
    }

    #[test]
    fn learned_cdf_is_monotone_with_limits() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let d = FactorizedDensity::new(&mut store, &mut rng, "z", 4);
        let eval = d.density(&store);
        for ch in 0..4 {
            let mut last = -1.0;
            for i in -400..=400 {
                let x = i as f64 * 0.25;
                let c = eval.cdf(ch, x);
                assert!(c >= last - 1e-12, "CDF not monotone at {x}");
                last = c;
            }
            assert!(eval.cdf(ch, -1e4) < 1e-6);
            assert!(eval.cdf(ch, 1e4) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn factorized_table_roundtrips_with_coder() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let d = FactorizedDensity::new(&mut store, &mut rng, "z", 2);
        let eval = d.density(&store);
        let t0 = factorized_cdf(&eval, 0, 16, 1.0 / 512.0);
        let t1 = factorized_cdf(&eval, 1, 16, 1.0 / 512.0);
        assert_eq!(*t0.cum.last().unwrap(), 65536);
        let symbols: Vec<i32> = (-5..=5).collect();
        let tables: Vec<&CdfTable> = symbols.iter().map(|_| &t0).collect();
        let bytes = crate::entropy::coder::encode_symbols(&symbols, tables.into_iter()).unwrap();
        let back = crate::entropy::coder::decode_symbols(
            &bytes,
            symbols.len(),
            symbols.iter().map(|_| &t0),
        )
        .unwrap();
        assert_eq!(symbols, back);
        assert!(t1.n_bins() >= 3);
    }

    #[test]
    fn estimated_bits_close_to_coded_length() {
        // draw from the model's own table and compare estimate vs actual
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let d = FactorizedDensity::new(&mut store, &mut rng, "z", 1);
        let eval = d.density(&store);
        let table = factorized_cdf(&eval, 0, 16, 1.0 / 512.0);
        let n = 4096;
        let symbols: Vec<i32> = (0..n)
            .map(|_| table.find(rng.random_range(0..table.total())).0)
            .collect();
        let z = ndarray::Array3::from_shape_vec(
            (1, 1, n),
            symbols.iter().map(|s| *s as f32).collect(),
        )
        .unwrap();
        let est = factorized_bits(z.view(), &eval);
        let bytes =
            crate::entropy::coder::encode_symbols(&symbols, symbols.iter().map(|_| &table))
                .unwrap();
        let actual = bytes.len() as f64 * 8.0;
        assert!(
            actual <= est + 32.0 + 0.01 * est,
            "coded {actual} bits vs estimate {est}"
        );
    }

    #[test]
    fn bits_op_grad_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let d = FactorizedDensity::new(&mut store, &mut rng, "z", 2);
        let z0 = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 2, 1]),
            vec![0.3f32, -1.4, 2.2, 0.0],
        )
        .unwrap();

        let eval_loss = |store: &ParamStore, z: &Arr| -> f64 {
            let t = Tape::no_grad();
            let zt = t.constant(z.clone());
            let bits = d.bits_op(&t, store, zt);
            t.value(t.sum_all(bits))[[0]] as f64
        };

        let tape = Tape::new();
        let zt = tape.leaf(z0.clone(), usize::MAX);
        let bits = d.bits_op(&tape, &store, zt);
        let loss = tape.sum_all(bits);
        let mut zgrad: Option<Arr> = None;
        let mut pgrads: std::collections::HashMap<usize, Arr> = Default::default();
        tape.backward(loss, &mut |pid, g| {
            if pid == usize::MAX {
                zgrad = Some(g.clone());
            } else {
                pgrads.entry(pid).and_modify(|a| *a += g).or_insert_with(|| g.clone());
            }
        });

        // finite differences on z
        let zg = zgrad.unwrap();
        let eps = 1e-3f32;
        for i in 0..z0.len() {
            let mut plus = z0.clone();
            let mut minus = z0.clone();
            plus.as_slice_mut().unwrap()[i] += eps;
            minus.as_slice_mut().unwrap()[i] -= eps;
            let fd =
                ((eval_loss(&store, &plus) - eval_loss(&store, &minus)) / (2.0 * eps as f64)) as f32;
            let an = zg.as_slice().unwrap()[i];
            assert!(
                (fd - an).abs() < 3e-2 * fd.abs().max(an.abs()).max(0.05),
                "z grad {i}: fd={fd} analytic={an}"
            );
        }

        // finite differences on a few parameters of every tensor
        let probe = |pid: ParamId, store: &mut ParamStore| {
            let n = store.value(pid).len();
            for i in (0..n).step_by((n / 4).max(1)) {
                let orig = store.value(pid).as_slice().unwrap()[i];
                store.value_mut(pid).as_slice_mut().unwrap()[i] = orig + eps;
                let fp = eval_loss(store, &z0);
                store.value_mut(pid).as_slice_mut().unwrap()[i] = orig - eps;
                let fm = eval_loss(store, &z0);
                store.value_mut(pid).as_slice_mut().unwrap()[i] = orig;
                let fd = ((fp - fm) / (2.0 * eps as f64)) as f32;
                let an = pgrads
                    .get(&pid.0)
                    .map(|g| g.as_slice().unwrap()[i])
                    .unwrap_or(0.0);
                assert!(
                    (fd - an).abs() < 3e-2 * fd.abs().max(an.abs()).max(0.05),
                    "param {pid:?}[{i}]: fd={fd} analytic={an}"
                );
            }
        };
        let all: Vec<ParamId> =
            d.h.iter().chain(d.b.iter()).chain(d.a.iter()).copied().collect();
        for pid in all {
            probe(pid, &mut store);
        }
    }
}
