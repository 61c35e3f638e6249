//! Forward and adjoint kernels. Every function here is pure; the tape in
//! [`crate::graph`] decides which ones to call and stores what they need.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `m x k` and `op(b)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above pin every slice to the extent implied by its
    // strides, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::Shape(format!("conv2d input must be [C,H,W], got {input:?}"))),
        };
        let (f, wc, kh, kw) = match *weight {
            [f, wc, kh, kw] => (f, wc, kh, kw),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d weight must be [F,C,kh,kw], got {weight:?}"
                )))
            }
        };
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `[C,H,W]` into a `[C*kh*kw, out_h*out_w]` patch matrix.
fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input grid.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let mut out = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded cross-correlation. Returns the output and the patch matrix
/// needed by [`conv2d_backward`].
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<f64>, ConvGeom)> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, pad)?;
    if bias.shape() != [g.filters] {
        return Err(Error::Shape(format!(
            "conv2d bias must be [{}], got {:?}",
            g.filters,
            bias.shape()
        )));
    }
    let cols = im2col(input.data(), &g);
    let p = g.positions();
    let mut out = vec![0.0; g.filters * p];
    for (f, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias.data()[f]);
    }
    gemm(g.filters, g.patch_len(), p, weight.data(), false, &cols, false, 1.0, &mut out);
    let out = Tensor::new(&[g.filters, g.out_h, g.out_w], out)?;
    Ok((out, cols, g))
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv2d_forward(input, weight, bias, stride, pad).map(|(out, _, _)| out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    upstream: &Tensor,
    weight: &Tensor,
    cols: &[f64],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads {
    let p = g.positions();
    let dy = upstream.data();
    let mut dw = vec![0.0; g.filters * g.patch_len()];
    gemm(g.filters, p, g.patch_len(), dy, false, cols, true, 0.0, &mut dw);
    let db: Vec<f64> = dy.chunks_exact(p).map(|r| r.iter().sum()).collect();
    let input = need_input.then(|| conv2d_backward_input(upstream, weight, g));
    ConvGrads {
        input,
        weight: Tensor::new(weight.shape(), dw).expect("conv weight grad"),
        bias: Tensor::new(&[g.filters], db).expect("conv bias grad"),
    }
}

/// Input adjoint only, for convolutions whose parameters are frozen.
pub fn conv2d_backward_input(upstream: &Tensor, weight: &Tensor, g: &ConvGeom) -> Tensor {
    let p = g.positions();
    let mut dcols = vec![0.0; g.patch_len() * p];
    gemm(g.patch_len(), g.filters, p, weight.data(), true, upstream.data(), false, 0.0, &mut dcols);
    Tensor::new(&[g.channels, g.height, g.width], col2im(&dcols, g)).expect("conv input grad")
}

/// 2x2 / stride-2 max pooling. Returns the pooled map and, per output cell,
/// the flat input index that won (first maximum in row-major window order).
pub fn maxpool2d_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2d needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, arg))
}

pub fn maxpool2d(input: &Tensor) -> Result<Tensor> {
    maxpool2d_forward(input).map(|(t, _)| t)
}

pub fn maxpool2d_backward(upstream: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(upstream.data()) {
        d[i] += g;
    }
    dx
}

/// 2x2 / stride-2 average pooling.
pub fn avgpool2d(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("avgpool2d needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = base + 2 * oy * w + 2 * ox;
                out.push(0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]));
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub fn avgpool2d_backward(upstream: &Tensor, input_shape: &[usize]) -> Tensor {
    let (h, w) = (input_shape[1], input_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (o, &g) in upstream.data().iter().enumerate() {
        let ch = o / (oh * ow);
        let (oy, ox) = ((o / ow) % oh, o % ow);
        let i = ch * h * w + 2 * oy * w + 2 * ox;
        for j in [i, i + 1, i + w, i + w + 1] {
            d[j] += 0.25 * g;
        }
    }
    dx
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient at zero is zero.
pub fn relu_backward(upstream: &Tensor, input: &Tensor) -> Tensor {
    let data = upstream
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data).expect("relu grad")
}

/// Interpolation taps along one axis: for each destination index, the two
/// source indices and the weight on the second one.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling with half-pixel centers and edge clamping, applied
/// per channel of a `[C,h,w]` map.
pub fn bilinear_upsample(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if out_h < h || out_w < w || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "bilinear_upsample cannot shrink {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let top = p[y0 * w + x0] * (1.0 - wx) + p[y0 * w + x1] * wx;
                let bot = p[y1 * w + x0] * (1.0 - wx) + p[y1 * w + x1] * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub fn bilinear_upsample_backward(upstream: &Tensor, input_shape: &[usize]) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (out_h, out_w) = (upstream.shape()[1], upstream.shape()[2]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    let g = upstream.data();
    for ch in 0..c {
        let p = &mut d[ch * h * w..(ch + 1) * h * w];
        let gp = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v = gp[oy * out_w + ox];
                p[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                p[y0 * w + x1] += v * (1.0 - wy) * wx;
                p[y1 * w + x0] += v * wy * (1.0 - wx);
                p[y1 * w + x1] += v * wy * wx;
            }
        }
    }
    dx
}

/// Affine map `W x + b` for `x: [n]`, `W: [m, n]`, `b: [m]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.len();
    let m = match *weight.shape() {
        [m, wn] if wn == n => m,
        _ => {
            return Err(Error::Shape(format!(
                "linear weight {:?} does not accept input of length {n}",
                weight.shape()
            )))
        }
    };
    if input.rank() != 1 || bias.shape() != [m] {
        return Err(Error::Shape(format!(
            "linear expects input [n] and bias [{m}], got {:?} and {:?}",
            input.shape(),
            bias.shape()
        )));
    }
    let out = weight
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(input.data()).map(|(w, x)| w * x).sum::<f64>() + b)
        .collect();
    Tensor::new(&[m], out)
}

pub struct LinearGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(upstream: &Tensor, input: &Tensor, weight: &Tensor, need_input: bool) -> LinearGrads {
    let n = input.len();
    let g = upstream.data();
    let mut dw = Vec::with_capacity(weight.len());
    for &gi in g {
        dw.extend(input.data().iter().map(|x| gi * x));
    }
    let input_grad = need_input.then(|| {
        let mut dx = vec![0.0; n];
        for (row, &gi) in weight.data().chunks_exact(n).zip(g) {
            for (d, w) in dx.iter_mut().zip(row) {
                *d += gi * w;
            }
        }
        Tensor::new(input.shape(), dx).expect("linear input grad")
    });
    LinearGrads {
        input: input_grad,
        weight: Tensor::new(weight.shape(), dw).expect("linear weight grad"),
        bias: upstream.clone(),
    }
}

/// Max-subtracted softmax followed by negative log-likelihood of `label`.
/// Returns the loss and the class probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Vec<f64>)> {
    let m = logits.len();
    if label >= m {
        return Err(Error::Contract(format!("label {label} out of range for {m} classes")));
    }
    let z = logits.data();
    let max = logits.max();
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (z[label] - max);
    let probs = exps.into_iter().map(|e| e / total).collect();
    Ok((loss, probs))
}

/// Saliency modulation with skip connection:
/// `out[z,y,x] = feature[z,y,x] * (saliency[y,x] + 1)`, one map shared by all channels.
pub fn modulate(feature: &Tensor, saliency: &Tensor) -> Result<Tensor> {
    let (c, h, w) = feature.chw()?;
    if saliency.shape() != [1, h, w] {
        return Err(Error::Shape(format!(
            "saliency map {:?} does not match feature extents {h}x{w}",
            saliency.shape()
        )));
    }
    let s = saliency.data();
    let mut out = feature.data().to_vec();
    for plane in out.chunks_exact_mut(h * w) {
        for (v, si) in plane.iter_mut().zip(s) {
            *v *= si + 1.0;
        }
    }
    debug_assert_eq!(out.len(), c * h * w);
    Tensor::new(feature.shape(), out)
}

/// Adjoints of [`modulate`]: the feature receives `upstream * (s + 1)`, the
/// saliency map receives the channel sum of `upstream * feature`.
pub fn modulate_backward(
    upstream: &Tensor,
    feature: &Tensor,
    saliency: &Tensor,
    need_feature: bool,
    need_saliency: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let hw = saliency.len();
    let s = saliency.data();
    let g = upstream.data();
    let dfeat = need_feature.then(|| {
        let data = g
            .chunks_exact(hw)
            .flat_map(|plane| plane.iter().zip(s).map(|(gi, si)| gi * (si + 1.0)))
            .collect();
        Tensor::new(feature.shape(), data).expect("modulate feature grad")
    });
    let dsal = need_saliency.then(|| {
        let mut ds = vec![0.0; hw];
        for (gp, fp) in g.chunks_exact(hw).zip(feature.data().chunks_exact(hw)) {
            for ((d, gi), fi) in ds.iter_mut().zip(gp).zip(fp) {
                *d += gi * fi;
            }
        }
        Tensor::new(saliency.shape(), ds).expect("modulate saliency grad")
    });
    (dfeat, dsal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_on_ones() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert!(y.bit_eq(&Tensor::full(&[1, 3, 3], 1.0)));
    }

    #[test]
    fn conv_diagonal_kernel() {
        let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn conv_strided_shape() {
        let x = Tensor::zeros(&[3, 64, 64]);
        let w = Tensor::zeros(&[16, 3, 5, 5]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[16]), 2, 2).unwrap();
        assert_eq!(y.shape(), &[16, 32, 32]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 1, 1]), &Tensor::zeros(&[1]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 5, 5]), &Tensor::zeros(&[1]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 5, 5]), &Tensor::zeros(&[1]), 1, 1).is_ok());
    }

    #[test]
    fn maxpool_single_window_and_constant() {
        let y = maxpool2d(&t(&[1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let c = maxpool2d(&Tensor::full(&[2, 4, 6], 0.7)).unwrap();
        assert!(c.bit_eq(&Tensor::full(&[2, 2, 3], 0.7)));
        assert!(maxpool2d(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let (_, arg) = maxpool2d_forward(&t(&[1, 2, 2], &[5., 5., 5., 5.])).unwrap();
        assert_eq!(arg, vec![0]);
        let (_, arg) = maxpool2d_forward(&t(&[1, 2, 2], &[1., 5., 5., 2.])).unwrap();
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn relu_values() {
        let y = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&Tensor::full(&[3], 1.0), &Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn upsample_constant_and_shape() {
        let y = bilinear_upsample(&Tensor::full(&[1, 13, 13], 2.5), 27, 27).unwrap();
        assert_eq!(y.shape(), &[1, 27, 27]);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        assert!(bilinear_upsample(&Tensor::zeros(&[1, 4, 4]), 2, 4).is_err());
    }

    #[test]
    fn upsample_same_size_is_identity() {
        let x = t(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert!(bilinear_upsample(&x, 2, 3).unwrap().bit_eq(&x));
    }

    #[test]
    fn linear_values() {
        let y = linear(
            &Tensor::from_vec(vec![2.0, 3.0]),
            &t(&[1, 2], &[1.0, 1.0]),
            &Tensor::zeros(&[1]),
        )
        .unwrap();
        assert_eq!(y.data(), &[5.0]);
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert!(linear(&x, &eye, &Tensor::zeros(&[3])).unwrap().bit_eq(&x));
        assert!(linear(&x, &t(&[1, 2], &[1.0, 1.0]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = softmax_cross_entropy(&Tensor::from_vec(vec![0.0, 0.0]), 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, _) = softmax_cross_entropy(&Tensor::from_vec(vec![1000.0, 0.0]), 0).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-300);
        assert!(softmax_cross_entropy(&Tensor::from_vec(vec![0.0, 0.0]), 2).is_err());
    }

    #[test]
    fn modulate_cases() {
        let f = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let s = t(&[1, 2, 2], &[0.5, 0.0, 1.0, 3.0]);
        assert_eq!(modulate(&f, &s).unwrap().data(), &[1.5, 2.0, 6.0, 16.0]);
        assert!(modulate(&f, &Tensor::zeros(&[1, 2, 2])).unwrap().bit_eq(&f));
        assert!(modulate(&f, &Tensor::full(&[1, 2, 2], 1.0)).unwrap().bit_eq(&f.scale(2.0)));
        assert!(modulate(&f, &Tensor::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn modulate_broadcasts_over_channels() {
        let f = Tensor::full(&[3, 2, 2], 2.0);
        let s = t(&[1, 2, 2], &[0., 1., 2., 3.]);
        let y = modulate(&f, &s).unwrap();
        for plane in y.data().chunks(4) {
            assert_eq!(plane, &[2., 4., 6., 8.]);
        }
        let (df, ds) = modulate_backward(&Tensor::full(&[3, 2, 2], 1.0), &f, &s, true, true);
        assert_eq!(&df.unwrap().data()[..4], &[1., 2., 3., 4.]);
        assert_eq!(ds.unwrap().data(), &[6., 6., 6., 6.]);
    }
}
