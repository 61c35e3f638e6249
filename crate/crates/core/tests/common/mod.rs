//! Brute-force reference implementations shared by the integration tests.
//! Each one is written from the definition, without reusing library code.

#![allow(dead_code)]

use salmod::rng::Rng;
use salmod::Tensor;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

pub fn random_image(rng: &mut Rng) -> Tensor {
    random_tensor(rng, &[3, 64, 64], 0.0, 1.0)
}

/// Direct six-loop convolution with zero padding.
pub fn conv2d_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[f, oh, ow]);
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.get(&[fi]);
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.get(&[ci, iy as usize, ix as usize]) * w.get(&[fi, ci, ky, kx]);
                        }
                    }
                }
                out.set(&[fi, oy, ox], acc);
            }
        }
    }
    out
}

pub fn maxpool_oracle(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
    for ci in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let window = [
                    x.get(&[ci, 2 * y, 2 * xx]),
                    x.get(&[ci, 2 * y, 2 * xx + 1]),
                    x.get(&[ci, 2 * y + 1, 2 * xx]),
                    x.get(&[ci, 2 * y + 1, 2 * xx + 1]),
                ];
                out.set(&[ci, y, xx], window.into_iter().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    out
}

/// Samples the source at continuous coordinates with half-pixel centers,
/// clamping to the border.
pub fn bilinear_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let coord = |d: usize, src: usize, dst: usize| -> f64 {
        let s = (d as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
        s.max(0.0).min((src - 1) as f64)
    };
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let sy = coord(y, h, oh);
                let sx = coord(xx, w, ow);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
                let top = x.get(&[ci, y0, x0]) * (1.0 - tx) + x.get(&[ci, y0, x1]) * tx;
                let bottom = x.get(&[ci, y1, x0]) * (1.0 - tx) + x.get(&[ci, y1, x1]) * tx;
                out.set(&[ci, y, xx], top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

/// Naive `-log(softmax(z)[label])` through an explicit log-sum-exp.
pub fn cross_entropy_oracle(z: &[f64], label: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Central finite difference of a scalar function at every coordinate.
pub fn numeric_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
