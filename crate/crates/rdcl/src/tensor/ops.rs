use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{Arr, Tape, T};

pub(crate) fn softplus_f(x: f32) -> f32 {
    // log(1 + e^x), stable on both tails
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_f(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    fn binary_same_shape(&self, a: T, b: T) {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[a.0].value.shape(),
            nodes[b.0].value.shape(),
            "elementwise op requires matching shapes"
        );
    }

    pub fn add(&self, a: T, b: T) -> T {
        self.binary_same_shape(a, b);
        let v = &self.nodes.borrow()[a.0].value + &self.nodes.borrow()[b.0].value;
        self.push(
            v,
            Some(Box::new(move |g, _| vec![(a.0, g.clone()), (b.0, g.clone())])),
            None,
        )
    }

    pub fn sub(&self, a: T, b: T) -> T {
        self.binary_same_shape(a, b);
        let v = &self.nodes.borrow()[a.0].value - &self.nodes.borrow()[b.0].value;
        self.push(
            v,
            Some(Box::new(move |g, _| vec![(a.0, g.clone()), (b.0, -g)])),
            None,
        )
    }

    pub fn mul(&self, a: T, b: T) -> T {
        self.binary_same_shape(a, b);
        let v = &self.nodes.borrow()[a.0].value * &self.nodes.borrow()[b.0].value;
        self.push(
            v,
            Some(Box::new(move |g, nodes| {
                vec![(a.0, g * &nodes[b.0].value), (b.0, g * &nodes[a.0].value)]
            })),
            None,
        )
    }

    pub fn div(&self, a: T, b: T) -> T {
        self.binary_same_shape(a, b);
        let v = &self.nodes.borrow()[a.0].value / &self.nodes.borrow()[b.0].value;
        self.push(
            v,
            Some(Box::new(move |g, nodes| {
                let bv = &nodes[b.0].value;
                let ga = g / bv;
                let gb = -g * &nodes[a.0].value / (bv * bv);
                vec![(a.0, ga), (b.0, gb)]
            })),
            None,
        )
    }

    pub fn scale(&self, a: T, c: f32) -> T {
        let v = &self.nodes.borrow()[a.0].value * c;
        self.push(v, Some(Box::new(move |g, _| vec![(a.0, g * c)])), None)
    }

    /// Add a constant array (same shape). Used for additive uniform noise.
    pub fn add_const(&self, a: T, c: &Arr) -> T {
        let v = &self.nodes.borrow()[a.0].value + c;
        self.push(v, Some(Box::new(move |g, _| vec![(a.0, g.clone())])), None)
    }

    /// Multiply by a constant array (same shape). Used for causal masks.
    pub fn mul_const(&self, a: T, c: &Arr) -> T {
        let v = &self.nodes.borrow()[a.0].value * c;
        let cc = c.clone();
        self.push(v, Some(Box::new(move |g, _| vec![(a.0, g * &cc)])), None)
    }

    /// `x * s` where `s` is a single-element tensor, broadcast over `x`.
    pub fn mul_scalar_t(&self, x: T, s: T) -> T {
        let sv = self.nodes.borrow()[s.0].value[[0]];
        let v = &self.nodes.borrow()[x.0].value * sv;
        self.push(
            v,
            Some(Box::new(move |g, nodes| {
                let sv = nodes[s.0].value[[0]];
                let gx = g * sv;
                let gs = (g * &nodes[x.0].value).sum();
                vec![(x.0, gx), (s.0, ArrayD::from_elem(IxDyn(&[1]), gs))]
            })),
            None,
        )
    }

    /// `x / s`, scalar-tensor divisor.
    pub fn div_scalar_t(&self, x: T, s: T) -> T {
        let sv = self.nodes.borrow()[s.0].value[[0]];
        let v = &self.nodes.borrow()[x.0].value / sv;
        self.push(
            v,
            Some(Box::new(move |g, nodes| {
                let sv = nodes[s.0].value[[0]];
                let gx = g / sv;
                let gs = -(g * &nodes[x.0].value).sum() / (sv * sv);
                vec![(x.0, gx), (s.0, ArrayD::from_elem(IxDyn(&[1]), gs))]
            })),
            None,
        )
    }

    pub fn square(&self, a: T) -> T {
        let v = self.nodes.borrow()[a.0].value.mapv(|x| x * x);
        self.push(
            v,
            Some(Box::new(move |g, nodes| vec![(a.0, g * &nodes[a.0].value * 2.0)])),
            None,
        )
    }

    pub fn sqrt(&self, a: T) -> T {
        let v = self.nodes.borrow()[a.0].value.mapv(f32::sqrt);
        let out = self.push(v, None, None);
        if self.grad_enabled() {
            // reuse the forward value: d sqrt = g / (2 sqrt)
            self.nodes.borrow_mut()[out.0].backward = Some(Box::new(move |g, nodes| {
                vec![(a.0, g / (&nodes[out.0].value * 2.0))]
            }));
        }
        out
    }

    pub fn relu(&self, a: T) -> T {
        let v = self.nodes.borrow()[a.0].value.mapv(|x| x.max(0.0));
        self.push(
            v,
            Some(Box::new(move |g, nodes| {
                let mask = nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(a.0, g * &mask)]
            })),
            None,
        )
    }

    pub fn sigmoid(&self, a: T) -> T {
        let v = self.nodes.borrow()[a.0].value.mapv(sigmoid_f);
        let out = self.push(v, None, None);
        if self.grad_enabled() {
            self.nodes.borrow_mut()[out.0].backward = Some(Box::new(move |g, nodes| {
                let s = &nodes[out.0].value;
                vec![(a.0, g * s * &s.mapv(|x| 1.0 - x))]
            }));
        }
        out
    }

    pub fn softplus(&self, a: T) -> T {
        let v = self.nodes.borrow()[a.0].value.mapv(softplus_f);
        self.push(
            v,
            Some(Box::new(move |g, nodes| {
                let s = nodes[a.0].value.mapv(sigmoid_f);
                vec![(a.0, g * &s)]
            })),
            None,
        )
    }

    /// Round half away from zero forward; identity gradient (STE).
    pub fn ste_round(&self, a: T) -> T {
        let v = self.nodes.borrow()[a.0].value.mapv(f32::round);
        self.push(v, Some(Box::new(move |g, _| vec![(a.0, g.clone())])), None)
    }

    /// Clamp to `[lo, hi]` forward; pass-through gradient.
    pub fn clamp_ste(&self, a: T, lo: f32, hi: f32) -> T {
        let v = self.nodes.borrow()[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Some(Box::new(move |g, _| vec![(a.0, g.clone())])), None)
    }

    pub fn sum_all(&self, a: T) -> T {
        let s = self.nodes.borrow()[a.0].value.sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), s);
        self.push(
            v,
            Some(Box::new(move |g, nodes| {
                let gv = g[[0]];
                vec![(a.0, Arr::from_elem(nodes[a.0].value.raw_dim(), gv))]
            })),
            None,
        )
    }

    pub fn mean_all(&self, a: T) -> T {
        let n = self.nodes.borrow()[a.0].value.len() as f32;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Concatenate along the channel axis (axis 1 of `[B,C,H,W]`).
    pub fn concat_channels(&self, parts: &[T]) -> T {
        assert!(!parts.is_empty());
        let views: Vec<Arr> = parts.iter().map(|p| self.nodes.borrow()[p.0].value.clone()).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(1), &view_refs).expect("concat shape mismatch");
        let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let widths: Vec<usize> = views.iter().map(|v| v.shape()[1]).collect();
        self.push(
            v,
            Some(Box::new(move |g, _| {
                let mut out = Vec::with_capacity(idxs.len());
                let mut at = 0usize;
                for (i, w) in idxs.iter().zip(&widths) {
                    let part = g
                        .slice_axis(Axis(1), Slice::from(at..at + w))
                        .to_owned()
                        .into_dyn();
                    out.push((*i, part));
                    at += w;
                }
                out
            })),
            None,
        )
    }

    /// Slice channels `[start, end)` along axis 1.
    pub fn slice_channels(&self, a: T, start: usize, end: usize) -> T {
        let v = self.nodes.borrow()[a.0]
            .value
            .slice_axis(Axis(1), Slice::from(start..end))
            .to_owned()
            .into_dyn();
        self.push(
            v,
            Some(Box::new(move |g, nodes| {
                let mut full = Arr::zeros(nodes[a.0].value.raw_dim());
                full.slice_axis_mut(Axis(1), Slice::from(start..end)).assign(g);
                vec![(a.0, full)]
            })),
            None,
        )
    }

    /// Select one element of a 1-d tensor as a `[1]` scalar tensor.
    pub fn pick(&self, a: T, idx: usize) -> T {
        let v = self.nodes.borrow()[a.0].value[[idx]];
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), v),
            Some(Box::new(move |g, nodes| {
                let mut full = Arr::zeros(nodes[a.0].value.raw_dim());
                full[[idx]] = g[[0]];
                vec![(a.0, full)]
            })),
            None,
        )
    }

    /// Embed `x [B,c,H,W]` into a zero tensor of `total` channels at `start`.
    /// Adjoint of [`Self::slice_channels`].
    pub fn pad_channels(&self, x: T, total: usize, start: usize) -> T {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let (b, c, h, w) = dims4(xv.shape());
        assert!(start + c <= total);
        let mut out = Arr::zeros(IxDyn(&[b, total, h, w]));
        out.slice_axis_mut(Axis(1), Slice::from(start..start + c)).assign(xv);
        drop(nodes);
        self.push(
            out,
            Some(Box::new(move |g, _| {
                let part = g
                    .slice_axis(Axis(1), Slice::from(start..start + c))
                    .to_owned()
                    .into_dyn();
                vec![(x.0, part)]
            })),
            None,
        )
    }

    /// Global average pool: `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_avg_pool(&self, a: T) -> T {
        let nodes = self.nodes.borrow();
        let x = &nodes[a.0].value;
        let (b, c, h, w) = dims4(x.shape());
        let mut v = ArrayD::zeros(IxDyn(&[b, c, 1, 1]));
        for bi in 0..b {
            for ci in 0..c {
                let mut s = 0.0f32;
                for hi in 0..h {
                    for wi in 0..w {
                        s += x[[bi, ci, hi, wi]];
                    }
                }
                v[[bi, ci, 0, 0]] = s / (h * w) as f32;
            }
        }
        drop(nodes);
        self.push(
            v,
            Some(Box::new(move |g, nodes| {
                let (b, c, h, w) = dims4(nodes[a.0].value.shape());
                let mut out = Arr::zeros(nodes[a.0].value.raw_dim());
                let inv = 1.0 / (h * w) as f32;
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = g[[bi, ci, 0, 0]] * inv;
                        for hi in 0..h {
                            for wi in 0..w {
                                out[[bi, ci, hi, wi]] = gv;
                            }
                        }
                    }
                }
                vec![(a.0, out)]
            })),
            None,
        )
    }

    /// `x[B,C,H,W] * s[B,C,1,1]`, broadcast over spatial dims.
    pub fn mul_bc(&self, x: T, s: T) -> T {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let sv = &nodes[s.0].value;
        let (b, c, h, w) = dims4(xv.shape());
        assert_eq!(sv.shape(), &[b, c, 1, 1]);
        let mut v = xv.clone();
        for bi in 0..b {
            for ci in 0..c {
                let m = sv[[bi, ci, 0, 0]];
                for hi in 0..h {
                    for wi in 0..w {
                        v[[bi, ci, hi, wi]] *= m;
                    }
                }
            }
        }
        drop(nodes);
        self.push(
            v,
            Some(Box::new(move |g, nodes| {
                let xv = &nodes[x.0].value;
                let sv = &nodes[s.0].value;
                let (b, c, h, w) = dims4(xv.shape());
                let mut gx = g.clone();
                let mut gs = Arr::zeros(IxDyn(&[b, c, 1, 1]));
                for bi in 0..b {
                    for ci in 0..c {
                        let m = sv[[bi, ci, 0, 0]];
                        let mut acc = 0.0f32;
                        for hi in 0..h {
                            for wi in 0..w {
                                acc += g[[bi, ci, hi, wi]] * xv[[bi, ci, hi, wi]];
                                gx[[bi, ci, hi, wi]] *= m;
                            }
                        }
                        gs[[bi, ci, 0, 0]] = acc;
                    }
                }
                vec![(x.0, gx), (s.0, gs)]
            })),
            None,
        )
    }
}

/// Unpack a `[B,C,H,W]` shape.
pub fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected a [B,C,H,W] tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}
