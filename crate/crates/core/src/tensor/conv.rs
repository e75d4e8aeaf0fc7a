//! 2-D cross-correlation: a naive reference and an im2col fast path.
//!
//! Both accumulate every output element over (channel, ky, kx) in the same
//! ascending order, padding contributions included, so their results are
//! bitwise identical. The layers module runs on the im2col path; tests pin
//! it against `conv2d_ref`.

use super::gemm::{gemm_abt_acc, gemm_acc};
use super::{KernelWeights, Shape, Tensor};
use crate::error::{Error, Result};

/// Output extent of one spatial dimension, or an error when non-positive.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArg("conv stride must be >= 1".into()));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!(
            "conv output dimension <= 0 (input {input}, kernel {k}, pad {pad})"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn validate(input: &Tensor, weights: &KernelWeights, stride: usize, pad: usize) -> Result<Shape> {
    let s = input.shape();
    if s.c != weights.c_in() {
        return Err(Error::Shape(format!(
            "conv input has {} channels but kernel expects {} ({} groups x {})",
            s.c,
            weights.c_in(),
            weights.groups(),
            weights.c_in_per_group()
        )));
    }
    let oh = conv_out_dim(s.h, weights.k(), stride, pad)?;
    let ow = conv_out_dim(s.w, weights.k(), stride, pad)?;
    Ok(Shape::new(s.n, weights.c_out(), oh, ow))
}

/// Direct sliding-window cross-correlation with zero padding. Oracle path.
pub fn conv2d_ref(
    input: &Tensor,
    weights: &KernelWeights,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let out_shape = validate(input, weights, stride, pad)?;
    let s = input.shape();
    let k = weights.k();
    let groups = weights.groups();
    let cin_pg = weights.c_in_per_group();
    let cout_pg = weights.c_out() / groups;
    let w = weights.tensor();
    let mut out = Tensor::zeros(out_shape);
    let pad = pad as i64;

    for n in 0..s.n {
        for g in 0..groups {
            for co_local in 0..cout_pg {
                let co = g * cout_pg + co_local;
                for oy in 0..out_shape.h {
                    for ox in 0..out_shape.w {
                        let mut acc = 0.0;
                        for ci_local in 0..cin_pg {
                            let ci = g * cin_pg + ci_local;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as i64 - pad;
                                    let ix = (ox * stride + kx) as i64 - pad;
                                    let v = if iy < 0
                                        || ix < 0
                                        || iy >= s.h as i64
                                        || ix >= s.w as i64
                                    {
                                        0.0
                                    } else {
                                        input.at(n, ci, iy as usize, ix as usize)
                                    };
                                    acc += w.at(co, ci_local, ky, kx) * v;
                                }
                            }
                        }
                        *out.at_mut(n, co, oy, ox) = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Lower one (sample, group) into columns: row (ci_local*k*k + ky*k + kx),
/// column (oy*ow + ox). Out-of-bounds cells become 0.
fn im2col(
    input: &Tensor,
    n: usize,
    group: usize,
    cin_pg: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let s = input.shape();
    let ohw = oh * ow;
    let pad = pad as i64;
    for ci_local in 0..cin_pg {
        let plane = input.plane(n, group * cin_pg + ci_local);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci_local * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad;
                    let dst = &mut row[oy * ow..oy * ow + ow];
                    if iy < 0 || iy >= s.h as i64 {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..iy as usize * s.w + s.w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as i64 - pad;
                        dst[ox] = if ix < 0 || ix >= s.w as i64 {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add column gradients back onto the input.
fn col2im_acc(
    dinput: &mut Tensor,
    n: usize,
    group: usize,
    cin_pg: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dcols: &[f64],
) {
    let s = dinput.shape();
    let (ih, iw) = (s.h, s.w);
    let ohw = oh * ow;
    let pad = pad as i64;
    for ci_local in 0..cin_pg {
        let plane = dinput.plane_mut(n, group * cin_pg + ci_local);
        for ky in 0..k {
            for kx in 0..k {
                let row = &dcols[((ci_local * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad;
                    if iy < 0 || iy >= ih as i64 {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * iw..iy as usize * iw + iw];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as i64 - pad;
                        if ix >= 0 && ix < iw as i64 {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// im2col + GEMM cross-correlation. Bitwise-equal to `conv2d_ref`.
pub fn conv2d(
    input: &Tensor,
    weights: &KernelWeights,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let out_shape = validate(input, weights, stride, pad)?;
    let s = input.shape();
    let k = weights.k();
    let groups = weights.groups();
    let cin_pg = weights.c_in_per_group();
    let cout_pg = weights.c_out() / groups;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let ohw = oh * ow;
    let krows = cin_pg * k * k;
    let wdata = weights.tensor().data();

    let mut out = Tensor::zeros(out_shape);
    let mut cols = vec![0.0; krows * ohw];
    for n in 0..s.n {
        for g in 0..groups {
            im2col(input, n, g, cin_pg, k, stride, pad, oh, ow, &mut cols);
            let wg = &wdata[g * cout_pg * krows..(g + 1) * cout_pg * krows];
            let dst_start = out.idx(n, g * cout_pg, 0, 0);
            let dst = &mut out.data_mut()[dst_start..dst_start + cout_pg * ohw];
            gemm_acc(wg, cout_pg, krows, &cols, ohw, dst);
        }
    }
    Ok(out)
}

/// d(loss)/d(input) of `conv2d` given upstream gradient `dout`.
pub fn conv2d_grad_input(
    dout: &Tensor,
    weights: &KernelWeights,
    stride: usize,
    pad: usize,
    in_shape: Shape,
) -> Tensor {
    let k = weights.k();
    let groups = weights.groups();
    let cin_pg = weights.c_in_per_group();
    let cout_pg = weights.c_out() / groups;
    let os = dout.shape();
    let (oh, ow) = (os.h, os.w);
    let ohw = oh * ow;
    let krows = cin_pg * k * k;
    let wdata = weights.tensor().data();

    // Per-group transposed weights: (krows x cout_pg).
    let mut wt = vec![vec![0.0; krows * cout_pg]; groups];
    for (g, wtg) in wt.iter_mut().enumerate() {
        let wg = &wdata[g * cout_pg * krows..(g + 1) * cout_pg * krows];
        for co in 0..cout_pg {
            for r in 0..krows {
                wtg[r * cout_pg + co] = wg[co * krows + r];
            }
        }
    }

    let mut dinput = Tensor::zeros(in_shape);
    let mut dcols = vec![0.0; krows * ohw];
    for n in 0..os.n {
        for g in 0..groups {
            dcols.fill(0.0);
            let src_start = dout.idx(n, g * cout_pg, 0, 0);
            let src = &dout.data()[src_start..src_start + cout_pg * ohw];
            gemm_acc(&wt[g], krows, cout_pg, src, ohw, &mut dcols);
            col2im_acc(&mut dinput, n, g, cin_pg, k, stride, pad, oh, ow, &dcols);
        }
    }
    dinput
}

/// d(loss)/d(weights) of `conv2d` given upstream gradient `dout`.
pub fn conv2d_grad_weights(
    dout: &Tensor,
    input: &Tensor,
    weights: &KernelWeights,
    stride: usize,
    pad: usize,
) -> Tensor {
    let k = weights.k();
    let groups = weights.groups();
    let cin_pg = weights.c_in_per_group();
    let cout_pg = weights.c_out() / groups;
    let os = dout.shape();
    let (oh, ow) = (os.h, os.w);
    let ohw = oh * ow;
    let krows = cin_pg * k * k;

    let mut dw = Tensor::zeros(weights.tensor().shape());
    let mut cols = vec![0.0; krows * ohw];
    for n in 0..os.n {
        for g in 0..groups {
            im2col(input, n, g, cin_pg, k, stride, pad, oh, ow, &mut cols);
            let src_start = dout.idx(n, g * cout_pg, 0, 0);
            let src = &dout.data()[src_start..src_start + cout_pg * ohw];
            let dst = &mut dw.data_mut()[g * cout_pg * krows..(g + 1) * cout_pg * krows];
            // dW_g += dOut_g (cout_pg x ohw) * cols^T (ohw x krows)
            gemm_abt_acc(src, cout_pg, ohw, &cols, krows, dst);
        }
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn kernel(c_out: usize, c_in_pg: usize, k: usize, groups: usize, data: Vec<f64>) -> KernelWeights {
        KernelWeights::new(
            Tensor::from_vec(Shape::new(c_out, c_in_pg, k, k), data).unwrap(),
            groups,
        )
        .unwrap()
    }

    #[test]
    fn scalar_product() {
        let input = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let w = kernel(1, 1, 1, 1, vec![3.0]);
        let out = conv2d_ref(&input, &w, 1, 0).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = Rng::seed_from(2);
        let input = Tensor::zeros(Shape::new(2, 3, 5, 5));
        let w = kernel(
            4,
            3,
            3,
            1,
            (0..4 * 3 * 9).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        let out = conv2d_ref(&input, &w, 1, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_kernel_sums_window() {
        let input = Tensor::from_vec(
            Shape::new(1, 1, 3, 3),
            (1..=9).map(|i| i as f64).collect(),
        )
        .unwrap();
        let w = kernel(1, 1, 3, 1, vec![1.0; 9]);
        let out = conv2d_ref(&input, &w, 1, 0).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(out.data()[0], 45.0);
    }

    #[test]
    fn output_shape_formula() {
        let input = Tensor::zeros(Shape::new(1, 3, 224, 224));
        let w = kernel(64, 3, 7, 1, vec![0.0; 64 * 3 * 49]);
        let out = conv2d_ref(&input, &w, 2, 3).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 64, 112, 112));
    }

    #[test]
    fn rejects_channel_mismatch_and_degenerate_output() {
        let input = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = kernel(1, 3, 3, 1, vec![0.0; 27]);
        assert!(conv2d_ref(&input, &w, 1, 1).is_err());
        let tiny = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let w5 = kernel(1, 1, 5, 1, vec![0.0; 25]);
        assert!(conv2d_ref(&tiny, &w5, 1, 0).is_err());
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = Rng::seed_from(3);
        let s = Shape::new(1, 2, 6, 6);
        let w = kernel(
            3,
            2,
            3,
            1,
            (0..3 * 2 * 9).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        for _ in 0..20 {
            let x = Tensor::random_uniform(s, -1.0, 1.0, &mut rng);
            let y = Tensor::random_uniform(s, -1.0, 1.0, &mut rng);
            let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
            let lhs = conv2d_ref(&x.scale(a).add(&y.scale(b)).unwrap(), &w, 1, 1).unwrap();
            let rhs = conv2d_ref(&x, &w, 1, 1)
                .unwrap()
                .scale(a)
                .add(&conv2d_ref(&y, &w, 1, 1).unwrap().scale(b))
                .unwrap();
            let denom = rhs.data().iter().map(|v| v.abs()).fold(1e-10, f64::max);
            assert!(lhs.max_abs_diff(&rhs) / denom < 1e-10);
        }
    }

    #[test]
    fn depthwise_equals_per_channel_correlation() {
        let mut rng = Rng::seed_from(4);
        let s = Shape::new(2, 3, 5, 5);
        let x = Tensor::random_uniform(s, -1.0, 1.0, &mut rng);
        let w = kernel(
            3,
            1,
            3,
            3,
            (0..27).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        let out = conv2d_ref(&x, &w, 1, 1).unwrap();
        // Independent scalar loop per channel.
        for n in 0..2 {
            for c in 0..3 {
                for oy in 0..5usize {
                    for ox in 0..5usize {
                        let mut acc = 0.0;
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = oy as i64 + ky as i64 - 1;
                                let ix = ox as i64 + kx as i64 - 1;
                                if iy >= 0 && ix >= 0 && iy < 5 && ix < 5 {
                                    acc += w.tensor().at(c, 0, ky, kx)
                                        * x.at(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                        assert!((out.at(n, c, oy, ox) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn im2col_path_matches_reference_bitwise() {
        let mut rng = Rng::seed_from(6);
        let cases = [
            (1, 1, 1, 1, 1, 5, 5, 1, 0),
            (2, 3, 4, 3, 1, 8, 8, 1, 1),
            (1, 4, 6, 3, 2, 9, 7, 2, 1),
            (2, 6, 6, 3, 6, 6, 6, 1, 1),
            (1, 3, 8, 7, 1, 16, 16, 2, 3),
            (2, 8, 8, 1, 1, 6, 6, 1, 0),
        ];
        for &(n, cin, cout, k, groups, h, w, stride, pad) in &cases {
            let x = Tensor::random_uniform(Shape::new(n, cin, h, w), -1.0, 1.0, &mut rng);
            let kw = kernel(
                cout,
                cin / groups,
                k,
                groups,
                (0..cout * (cin / groups) * k * k)
                    .map(|_| rng.uniform(-1.0, 1.0))
                    .collect(),
            );
            let a = conv2d_ref(&x, &kw, stride, pad).unwrap();
            let b = conv2d(&x, &kw, stride, pad).unwrap();
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data(), "case {:?}", (n, cin, cout, k, groups));
        }
    }

    #[test]
    fn grad_input_matches_finite_differences() {
        let mut rng = Rng::seed_from(7);
        let s = Shape::new(1, 2, 5, 5);
        let x = Tensor::random_uniform(s, -1.0, 1.0, &mut rng);
        let kw = kernel(3, 2, 3, 1, (0..54).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let proj = Tensor::random_uniform(Shape::new(1, 3, 5, 5), -1.0, 1.0, &mut rng);
        let loss = |input: &Tensor| -> f64 {
            conv2d(input, &kw, 1, 1).unwrap().mul(&proj).unwrap().sum()
        };
        let g = conv2d_grad_input(&proj, &kw, 1, 1, s);
        let e = 1e-6;
        for i in (0..s.numel()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += e;
            let mut xm = x.clone();
            xm.data_mut()[i] -= e;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * e);
            assert!((g.data()[i] - fd).abs() < 1e-6, "coord {i}: {} vs {fd}", g.data()[i]);
        }
    }

    #[test]
    fn grad_weights_matches_finite_differences() {
        let mut rng = Rng::seed_from(8);
        let s = Shape::new(2, 2, 4, 4);
        let x = Tensor::random_uniform(s, -1.0, 1.0, &mut rng);
        let wshape = Shape::new(3, 2, 3, 3);
        let wdata: Vec<f64> = (0..wshape.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let kw = kernel(3, 2, 3, 1, wdata.clone());
        let proj = Tensor::random_uniform(Shape::new(2, 3, 4, 4), -1.0, 1.0, &mut rng);
        let loss = |wd: &[f64]| -> f64 {
            let k = kernel(3, 2, 3, 1, wd.to_vec());
            conv2d(&x, &k, 1, 1).unwrap().mul(&proj).unwrap().sum()
        };
        let g = conv2d_grad_weights(&proj, &x, &kw, 1, 1);
        let e = 1e-6;
        for i in (0..wshape.numel()).step_by(5) {
            let mut wp = wdata.clone();
            wp[i] += e;
            let mut wm = wdata.clone();
            wm[i] -= e;
            let fd = (loss(&wp) - loss(&wm)) / (2.0 * e);
            assert!((g.data()[i] - fd).abs() < 1e-6);
        }
    }
}
