//! conv2d / conv_transpose2d forward and backward via im2col + GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView3, Axis, Ix1, Ix4};
use rayon::prelude::*;

use super::{Arr, Tape, T};

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvTSpec {
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

pub fn convt_out_dim(input: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (input - 1) * stride + k + out_pad - 2 * pad
}

/// Gather patches: `img [C,H,W]` -> `[C*k*k, gh*gw]` where grid position
/// `(gi,gj)` reads `img[c, gi*s + ki - p, gj*s + kj - p]` (zero outside).
fn im2col(img: ArrayView3<f32>, k: usize, s: usize, p: usize, gh: usize, gw: usize) -> Array2<f32> {
    let (c, h, w) = img.dim();
    let mut col = Array2::<f32>::zeros((c * k * k, gh * gw));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut dst = col.row_mut(row);
                for gi in 0..gh {
                    let iy = (gi * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for gj in 0..gw {
                        let ix = (gj * s + kj) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[gi * gw + gj] = img[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add `col` back into a `[C,oh,ow]` image.
fn col2im(
    col: &Array2<f32>,
    c: usize,
    k: usize,
    s: usize,
    p: usize,
    gh: usize,
    gw: usize,
    oh: usize,
    ow: usize,
) -> Array3<f32> {
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = col.row(row);
                for gi in 0..gh {
                    let iy = (gi * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= oh as isize {
                        continue;
                    }
                    for gj in 0..gw {
                        let ix = (gj * s + kj) as isize - p as isize;
                        if ix < 0 || ix >= ow as isize {
                            continue;
                        }
                        out[[ci, iy as usize, ix as usize]] += src[gi * gw + gj];
                    }
                }
            }
        }
    }
    out
}

fn as4(a: &Arr) -> ndarray::ArrayView4<'_, f32> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-d tensor")
}

fn stack_images(images: Vec<Array3<f32>>) -> Arr {
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    ndarray::stack(Axis(0), &views).unwrap().into_dyn()
}

impl Tape {
    /// 2-d convolution. `x [B,Cin,H,W]`, `w [Cout,Cin,k,k]`, `b [Cout]`.
    pub fn conv2d(&self, x: T, w: T, b: Option<T>, spec: ConvSpec) -> T {
        let (value, cout, k) = {
            let nodes = self.nodes.borrow();
            let xv = as4(&nodes[x.0].value);
            let wv = as4(&nodes[w.0].value);
            let (batch, cin, h, wd) = xv.dim();
            let (cout, wcin, k, k2) = wv.dim();
            assert_eq!(cin, wcin, "conv2d channel mismatch");
            assert_eq!(k, k2, "conv2d expects square kernels");
            let oh = conv_out_dim(h, k, spec.stride, spec.pad);
            let ow = conv_out_dim(wd, k, spec.stride, spec.pad);
            let w_mat = wv.into_shape_with_order((cout, cin * k * k)).unwrap();
            let bias: Option<ndarray::ArrayView1<f32>> = b.map(|bi| {
                nodes[bi.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("bias must be 1-d")
            });
            // per-image views are read-only; bias copied so the borrow can drop
            let bias_own = bias.map(|bv| bv.to_owned());
            let images: Vec<Array3<f32>> = (0..batch)
                .into_par_iter()
                .map(|bi| {
                    let col = im2col(xv.index_axis(Axis(0), bi), k, spec.stride, spec.pad, oh, ow);
                    let mut y_mat = Array2::<f32>::zeros((cout, oh * ow));
                    general_mat_mul(1.0, &w_mat, &col, 0.0, &mut y_mat);
                    if let Some(bv) = &bias_own {
                        for (mut row, bb) in y_mat.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                            row += *bb;
                        }
                    }
                    y_mat.into_shape_with_order((cout, oh, ow)).unwrap()
                })
                .collect();
            (stack_images(images), cout, k)
        };
        let back = move |g: &Arr, nodes: &[super::Node]| {
            let xv = as4(&nodes[x.0].value);
            let wv = as4(&nodes[w.0].value);
            let gv = as4(g);
            let (batch, cin, h, wd) = xv.dim();
            let (_, _, oh, ow) = gv.dim();
            let w_mat = wv.into_shape_with_order((cout, cin * k * k)).unwrap();
            let per_image: Vec<(Array3<f32>, Array2<f32>)> = (0..batch)
                .into_par_iter()
                .map(|bi| {
                    let dy_mat = gv
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((cout, oh * ow))
                        .unwrap();
                    // dx = W^T dy, scattered back through the patch map
                    let mut col_grad = Array2::<f32>::zeros((cin * k * k, oh * ow));
                    general_mat_mul(1.0, &w_mat.t(), &dy_mat, 0.0, &mut col_grad);
                    let dx = col2im(&col_grad, cin, k, spec.stride, spec.pad, oh, ow, h, wd);
                    // dW = dy col^T
                    let col = im2col(xv.index_axis(Axis(0), bi), k, spec.stride, spec.pad, oh, ow);
                    let mut dw = Array2::<f32>::zeros((cout, cin * k * k));
                    general_mat_mul(1.0, &dy_mat, &col.t(), 0.0, &mut dw);
                    (dx, dw)
                })
                .collect();
            let mut dw_total = Array2::<f32>::zeros((cout, cin * k * k));
            let mut dxs = Vec::with_capacity(batch);
            for (dx, dw) in per_image {
                dw_total += &dw;
                dxs.push(dx);
            }
            let mut grads = vec![
                (x.0, stack_images(dxs)),
                (
                    w.0,
                    dw_total.into_shape_with_order((cout, cin, k, k)).unwrap().into_dyn(),
                ),
            ];
            if let Some(bi) = b {
                let db = gv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                grads.push((bi.0, db.into_dyn()));
            }
            grads
        };
        self.push(value, Some(Box::new(back)), None)
    }

    /// Transposed 2-d convolution. `x [B,Cin,h,w]`, `w [Cin,Cout,k,k]`.
    pub fn conv_transpose2d(&self, x: T, w: T, b: Option<T>, spec: ConvTSpec) -> T {
        let (value, cout, k) = {
            let nodes = self.nodes.borrow();
            let xv = as4(&nodes[x.0].value);
            let wv = as4(&nodes[w.0].value);
            let (batch, cin, h, wd) = xv.dim();
            let (wcin, cout, k, k2) = wv.dim();
            assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
            assert_eq!(k, k2);
            let oh = convt_out_dim(h, k, spec.stride, spec.pad, spec.out_pad);
            let ow = convt_out_dim(wd, k, spec.stride, spec.pad, spec.out_pad);
            let w_mat = wv.into_shape_with_order((cin, cout * k * k)).unwrap();
            let bias_own = b.map(|bi| {
                nodes[bi.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("bias must be 1-d")
                    .to_owned()
            });
            let images: Vec<Array3<f32>> = (0..batch)
                .into_par_iter()
                .map(|bi| {
                    let x_mat = xv
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((cin, h * wd))
                        .unwrap();
                    let mut tmp = Array2::<f32>::zeros((cout * k * k, h * wd));
                    general_mat_mul(1.0, &w_mat.t(), &x_mat, 0.0, &mut tmp);
                    let mut out = col2im(&tmp, cout, k, spec.stride, spec.pad, h, wd, oh, ow);
                    if let Some(bv) = &bias_own {
                        for (mut plane, bb) in out.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                            plane += *bb;
                        }
                    }
                    out
                })
                .collect();
            (stack_images(images), cout, k)
        };
        let back = move |g: &Arr, nodes: &[super::Node]| {
            let xv = as4(&nodes[x.0].value);
            let wv = as4(&nodes[w.0].value);
            let gv = as4(g);
            let (batch, cin, h, wd) = xv.dim();
            let w_mat = wv.into_shape_with_order((cin, cout * k * k)).unwrap();
            let per_image: Vec<(Array3<f32>, Array2<f32>)> = (0..batch)
                .into_par_iter()
                .map(|bi| {
                    // adjoint of col2im is im2col over the output gradient
                    let d_tmp =
                        im2col(gv.index_axis(Axis(0), bi), k, spec.stride, spec.pad, h, wd);
                    let mut dx_mat = Array2::<f32>::zeros((cin, h * wd));
                    general_mat_mul(1.0, &w_mat, &d_tmp, 0.0, &mut dx_mat);
                    let x_mat = xv
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((cin, h * wd))
                        .unwrap();
                    let mut dw = Array2::<f32>::zeros((cin, cout * k * k));
                    general_mat_mul(1.0, &x_mat, &d_tmp.t(), 0.0, &mut dw);
                    (dx_mat.into_shape_with_order((cin, h, wd)).unwrap(), dw)
                })
                .collect();
            let mut dw_total = Array2::<f32>::zeros((cin, cout * k * k));
            let mut dxs = Vec::with_capacity(batch);
            for (dx, dw) in per_image {
                dw_total += &dw;
                dxs.push(dx);
            }
            let mut grads = vec![
                (x.0, stack_images(dxs)),
                (
                    w.0,
                    dw_total.into_shape_with_order((cin, cout, k, k)).unwrap().into_dyn(),
                ),
            ];
            if let Some(bi) = b {
                let db = gv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                grads.push((bi.0, db.into_dyn()));
            }
            grads
        };
        self.push(value, Some(Box::new(back)), None)
    }
}
