//! Batched NHWC kernels for convolution, pooling and dense layers.

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, Tensor4};

/// A batch of feature maps, NHWC, channel index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        FeatureMap { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::Shape(format!(
                "feature map {n}x{h}x{w}x{c} needs {} values, got {}",
                n * h * w * c,
                data.len()
            )));
        }
        Ok(FeatureMap { n, h, w, c, data })
    }

    #[inline]
    pub fn offset(&self, n: usize, y: usize, x: usize, ch: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.offset(n, y, x, ch)]
    }

    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[f64] {
        let o = self.offset(n, y, x, 0);
        &self.data[o..o + self.c]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.h * self.w * self.c;
        &self.data[n * len..(n + 1) * len]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }
}

pub(crate) fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Cross-correlation of a batch with a `(D_h, D_w, S, T)` kernel.
pub fn conv2d_forward(
    kernel: &Tensor4,
    bias: Option<&[f64]>,
    input: &FeatureMap,
    stride: usize,
    pad: usize,
) -> Result<FeatureMap> {
    let [dh, dw, s, t] = kernel.dims();
    if input.c != s {
        return Err(Error::Shape(format!("conv expects {s} input channels, got {}", input.c)));
    }
    if let Some(b) = bias {
        if b.len() != t {
            return Err(Error::Shape(format!("conv bias has {} entries, expected {t}", b.len())));
        }
    }
    let (oh, ow) = match (conv_output_size(input.h, dh, stride, pad), conv_output_size(input.w, dw, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "{}x{} input too small for {dh}x{dw} kernel with pad {pad}",
                input.h, input.w
            )))
        }
    };
    let mut out = FeatureMap::zeros(input.n, oh, ow, t);
    let k = kernel.data();
    for n in 0..input.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = out.offset(n, oy, ox, 0);
                let acc = &mut out.data[o..o + t];
                if let Some(b) = bias {
                    acc.copy_from_slice(b);
                }
                for kh in 0..dh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for kw in 0..dw {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        if ix < 0 || ix >= input.w as isize {
                            continue;
                        }
                        let px = input.pixel(n, iy as usize, ix as usize);
                        let kbase = (kh * dw + kw) * s * t;
                        for (si, &v) in px.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let krow = &k[kbase + si * t..kbase + (si + 1) * t];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += v * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a conv layer given the upstream gradient `dout`.
/// Returns `(d_kernel, d_bias, d_input)`.
pub fn conv2d_backward(
    kernel: &Tensor4,
    input: &FeatureMap,
    dout: &FeatureMap,
    stride: usize,
    pad: usize,
) -> (Tensor4, Vec<f64>, FeatureMap) {
    let [dh, dw, s, t] = kernel.dims();
    let mut dk = Tensor4::zeros(kernel.dims());
    let mut db = vec![0.0; t];
    let mut din = FeatureMap::zeros(input.n, input.h, input.w, input.c);
    let k = kernel.data();
    for n in 0..dout.n {
        for oy in 0..dout.h {
            for ox in 0..dout.w {
                let g = dout.pixel(n, oy, ox);
                for (b, gv) in db.iter_mut().zip(g) {
                    *b += gv;
                }
                for kh in 0..dh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for kw in 0..dw {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        if ix < 0 || ix >= input.w as isize {
                            continue;
                        }
                        let io = input.offset(n, iy as usize, ix as usize, 0);
                        let kbase = (kh * dw + kw) * s * t;
                        let dkd = dk.data_mut();
                        for si in 0..s {
                            let v = input.data[io + si];
                            let krow = &k[kbase + si * t..kbase + (si + 1) * t];
                            let dkrow = &mut dkd[kbase + si * t..kbase + (si + 1) * t];
                            let mut back = 0.0;
                            for ((dkv, &kv), &gv) in dkrow.iter_mut().zip(krow).zip(g) {
                                *dkv += v * gv;
                                back += kv * gv;
                            }
                            din.data[io + si] += back;
                        }
                    }
                }
            }
        }
    }
    (dk, db, din)
}

/// 2×2, stride-2 max pool. Returns the output and, per output element, the
/// flat input index of the winner (first maximum in scan order).
pub fn maxpool2_forward(input: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut out = FeatureMap::zeros(input.n, oh, ow, input.c);
    let mut arg = vec![0usize; out.data.len()];
    for n in 0..input.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..input.c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = input.offset(n, 2 * oy + dy, 2 * ox + dx, ch);
                            if input.data[i] > best || (dy == 0 && dx == 0) {
                                best = input.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = out.offset(n, oy, ox, ch);
                    out.data[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(input: &FeatureMap, arg: &[usize], dout: &FeatureMap) -> FeatureMap {
    let mut din = FeatureMap::zeros(input.n, input.h, input.w, input.c);
    for (&i, &g) in arg.iter().zip(&dout.data) {
        din.data[i] += g;
    }
    din
}

/// `y = x W + b` over rows of a flat batch (`h = w = 1`).
pub fn linear_forward(weight: &DenseMatrix, bias: &[f64], input: &FeatureMap) -> Result<FeatureMap> {
    let (fin, fout) = (weight.rows(), weight.cols());
    let features = input.h * input.w * input.c;
    if features != fin {
        return Err(Error::Shape(format!("linear expects {fin} features, got {features}")));
    }
    let mut out = FeatureMap::zeros(input.n, 1, 1, fout);
    for n in 0..input.n {
        let y = &mut out.data[n * fout..(n + 1) * fout];
        y.copy_from_slice(bias);
        for (i, &x) in input.sample(n).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (yv, &wv) in y.iter_mut().zip(weight.row(i)) {
                *yv += x * wv;
            }
        }
    }
    Ok(out)
}

/// Returns `(d_weight, d_bias, d_input)`; `d_input` has the input's shape.
pub fn linear_backward(weight: &DenseMatrix, input: &FeatureMap, dout: &FeatureMap) -> (DenseMatrix, Vec<f64>, FeatureMap) {
    let (fin, fout) = (weight.rows(), weight.cols());
    let mut dw = DenseMatrix::zeros(fin, fout);
    let mut db = vec![0.0; fout];
    let mut din = FeatureMap::zeros(input.n, input.h, input.w, input.c);
    for n in 0..input.n {
        let g = &dout.data[n * fout..(n + 1) * fout];
        for (b, gv) in db.iter_mut().zip(g) {
            *b += gv;
        }
        let x = input.sample(n);
        let dx = &mut din.data[n * fin..(n + 1) * fin];
        let dwd = dw.data_mut();
        for i in 0..fin {
            let wrow = weight.row(i);
            let dwrow = &mut dwd[i * fout..(i + 1) * fout];
            let mut back = 0.0;
            for ((dwv, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(g) {
                *dwv += x[i] * gv;
                back += wv * gv;
            }
            dx[i] = back;
        }
    }
    (dw, db, din)
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &FeatureMap, labels: &[usize]) -> Result<(f64, FeatureMap)> {
    let classes = logits.h * logits.w * logits.c;
    if labels.len() != logits.n {
        return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), logits.n)));
    }
    let mut grad = FeatureMap::zeros(logits.n, 1, 1, classes);
    let inv_n = 1.0 / logits.n as f64;
    let mut loss = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let z = logits.sample(n);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - z[y];
        let g = &mut grad.data[n * classes..(n + 1) * classes];
        for (gv, &zv) in g.iter_mut().zip(z) {
            *gv = (zv - log_sum).exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}
