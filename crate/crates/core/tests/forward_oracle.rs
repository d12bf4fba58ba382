//! Independent straight-line re-implementation of the forward primitives.
//!
//! The oracle below shares no code with the tape: plain nested loops,
//! no im2col, no matmul kernels. A random 3-layer network on a 4x8x8
//! batch must agree with the tape forward to 1e-5 relative.

use simreg_core::rng::Rng;
use simreg_core::tensor::{Layer, LayerOp, NetworkGraph, Tensor};

fn naive_conv2d(
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f32],
    (f, kh, kw): (usize, usize, usize),
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> (Vec<f32>, (usize, usize, usize, usize)) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * f * oh * ow];
    for i in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((i * c + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((i * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, (n, f, oh, ow))
}

fn naive_relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

fn naive_gap(x: &[f32], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f32> {
    let mut out = vec![0.0f32; n * c];
    for i in 0..n {
        for ci in 0..c {
            let mut acc = 0.0f32;
            for j in 0..h * w {
                acc += x[(i * c + ci) * h * w + j];
            }
            out[i * c + ci] = acc / (h * w) as f32;
        }
    }
    out
}

fn naive_linear(x: &[f32], n: usize, d: usize, wt: &[f32], m: usize, bias: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = bias[j];
            for k in 0..d {
                acc += x[i * d + k] * wt[j * d + k];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

fn assert_close(a: &[f32], b: &[f32], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: lengths differ");
    for (i, (&x, &y)) in a.iter().zip(b.iter()).enumerate() {
        let rel = ((x as f64) - (y as f64)).abs() / (x as f64).abs().max((y as f64).abs()).max(1.0);
        assert!(rel < tol, "{what}: element {i}: {x} vs {y} (rel {rel:.2e})");
    }
}

#[test]
fn three_layer_net_matches_straight_line_oracle() {
    for seed in 0..5u64 {
        let mut rng = Rng::new(40 + seed);
        let net = NetworkGraph::new(
            [1, 8, 8],
            vec![
                Layer { op: LayerOp::Conv2d { out_channels: 3, kernel: 3, stride: 1, pad: 1 }, input: 0 },
                Layer { op: LayerOp::Relu, input: 1 },
                Layer { op: LayerOp::Conv2d { out_channels: 4, kernel: 3, stride: 2, pad: 1 }, input: 2 },
                Layer { op: LayerOp::Relu, input: 3 },
                Layer { op: LayerOp::GlobalAvgPool, input: 4 },
                Layer { op: LayerOp::Linear { out_features: 5 }, input: 5 },
            ],
            vec![1, 3],
            &mut rng,
        )
        .unwrap();

        let batch = Tensor::rand_uniform(&[4, 1, 8, 8], 0.0, 1.0, &mut rng);
        let (logits, taps) = net.infer(&batch).unwrap();

        let p = net.params();
        let w0 = p.get("layer00.weight").unwrap().data();
        let b0 = p.get("layer00.bias").unwrap().data();
        let w2 = p.get("layer02.weight").unwrap().data();
        let b2 = p.get("layer02.bias").unwrap().data();
        let wl = p.get("layer05.weight").unwrap().data();
        let bl = p.get("layer05.bias").unwrap().data();

        let (c1, s1) = naive_conv2d(batch.data(), (4, 1, 8, 8), w0, (3, 3, 3), b0, 1, 1);
        let r1 = naive_relu(&c1);
        let (c2, s2) = naive_conv2d(&r1, s1, w2, (4, 3, 3), b2, 2, 1);
        let r2 = naive_relu(&c2);
        let pooled = naive_gap(&r2, s2);
        let out = naive_linear(&pooled, 4, 4, wl, 5, bl);

        assert_close(logits.data(), &out, 1e-5, "logits");
        assert_close(taps[0].data(), &r1, 1e-5, "tap layer 1");
        assert_close(taps[1].data(), &r2, 1e-5, "tap layer 3");
    }
}
