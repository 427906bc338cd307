//! Forward and backward kernels for the layer kinds.

use super::{LayerKind, LayerParams, Tensor};
use crate::error::{Error, Result};

/// Gradients returned by the backward pass of a parameterized layer.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (n_in, _) = params.dense_dims()?;
    if input.len() != n_in {
        return Err(Error::shape("dense_forward", n_in, input.len()));
    }
    let x = input.data();
    let w = params.weights.data();
    let out = params
        .bias
        .data()
        .iter()
        .enumerate()
        .map(|(j, b)| b + dot(&w[j * n_in..(j + 1) * n_in], x))
        .collect();
    Ok(Tensor::from_vec(out))
}

pub fn dense_backward(input: &Tensor, params: &LayerParams, upstream: &Tensor) -> Result<LayerGrads> {
    let (n_in, n_out) = params.dense_dims()?;
    if input.len() != n_in {
        return Err(Error::shape("dense_backward", n_in, input.len()));
    }
    if upstream.len() != n_out {
        return Err(Error::shape("dense_backward upstream", n_out, upstream.len()));
    }
    let x = input.data();
    let w = params.weights.data();
    let g = upstream.data();
    let mut input_grad = vec![0.0; n_in];
    let mut weight_grad = Tensor::zeros(&[n_out, n_in]);
    let wg = weight_grad.data_mut();
    for (j, &gj) in g.iter().enumerate() {
        if gj == 0.0 {
            continue;
        }
        let row = &w[j * n_in..(j + 1) * n_in];
        axpy(gj, row, &mut input_grad);
        axpy(gj, x, &mut wg[j * n_in..(j + 1) * n_in]);
    }
    Ok(LayerGrads {
        input: Some(Tensor::from_vec(input_grad)),
        weights: weight_grad,
        bias: upstream.clone(),
    })
}

/// 3x3 cross-correlation, stride 1, zero same-padding.
pub fn conv3x3_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (c_in, c_out) = params.conv_dims()?;
    let (h, w, c) = input.dims3()?;
    if c != c_in {
        return Err(Error::shape("conv3x3_forward channels", c_in, c));
    }
    let x = input.data();
    let k = params.weights.data();
    let mut out = Tensor::zeros(&[h, w, c_out]);
    let o = out.data_mut();
    for (row, chunk) in o.chunks_mut(w * c_out).enumerate() {
        for col in 0..w {
            let acc = &mut chunk[col * c_out..(col + 1) * c_out];
            acc.copy_from_slice(params.bias.data());
            for dy in 0..3 {
                let Some(r) = (row + dy).checked_sub(1).filter(|&r| r < h) else {
                    continue;
                };
                for dx in 0..3 {
                    let Some(s) = (col + dx).checked_sub(1).filter(|&s| s < w) else {
                        continue;
                    };
                    let src = &x[(r * w + s) * c_in..(r * w + s + 1) * c_in];
                    let taps = &k[(dy * 3 + dx) * c_in * c_out..(dy * 3 + dx + 1) * c_in * c_out];
                    for (ci, &xv) in src.iter().enumerate() {
                        if xv != 0.0 {
                            axpy(xv, &taps[ci * c_out..(ci + 1) * c_out], acc);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv3x3_forward`]. The input gradient is skipped when
/// `need_input_grad` is false (first layer of a network).
pub fn conv3x3_backward(
    input: &Tensor,
    params: &LayerParams,
    upstream: &Tensor,
    need_input_grad: bool,
) -> Result<LayerGrads> {
    let (c_in, c_out) = params.conv_dims()?;
    let (h, w, c) = input.dims3()?;
    if c != c_in {
        return Err(Error::shape("conv3x3_backward channels", c_in, c));
    }
    if upstream.shape() != [h, w, c_out] {
        return Err(Error::shape(
            "conv3x3_backward upstream",
            format!("[{h}, {w}, {c_out}]"),
            format!("{:?}", upstream.shape()),
        ));
    }
    let x = input.data();
    let k = params.weights.data();
    let g = upstream.data();
    let mut gin = need_input_grad.then(|| Tensor::zeros(&[h, w, c_in]));
    let mut gw = Tensor::zeros(&[3, 3, c_in, c_out]);
    let mut gb = vec![0.0; c_out];
    let gwd = gw.data_mut();
    for row in 0..h {
        for col in 0..w {
            let go = &g[(row * w + col) * c_out..(row * w + col + 1) * c_out];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (b, gv) in gb.iter_mut().zip(go) {
                *b += gv;
            }
            for dy in 0..3 {
                let Some(r) = (row + dy).checked_sub(1).filter(|&r| r < h) else {
                    continue;
                };
                for dx in 0..3 {
                    let Some(s) = (col + dx).checked_sub(1).filter(|&s| s < w) else {
                        continue;
                    };
                    let base = (r * w + s) * c_in;
                    let tap = (dy * 3 + dx) * c_in * c_out;
                    for ci in 0..c_in {
                        let xv = x[base + ci];
                        let wrow = tap + ci * c_out;
                        if xv != 0.0 {
                            axpy(xv, go, &mut gwd[wrow..wrow + c_out]);
                        }
                        if let Some(gi) = gin.as_mut() {
                            gi.data_mut()[base + ci] += dot(&k[wrow..wrow + c_out], go);
                        }
                    }
                }
            }
        }
    }
    Ok(LayerGrads {
        input: gin,
        weights: gw,
        bias: Tensor::from_vec(gb),
    })
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// Uses the forward *output*: the gradient passes where the output is positive.
pub fn relu_backward(output: &Tensor, upstream: &Tensor) -> Tensor {
    let mut g = upstream.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Geometry of a max-pool: stride-1 pooling is same-padded (output keeps
/// the input size), strided pooling tiles the input with a ceil-sized output.
/// Window cells outside the input are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeometry {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "maxpool needs window >= 1 and stride >= 1, got {window}/{stride}"
            )));
        }
        let pad = if stride == 1 { (window - 1) / 2 } else { 0 };
        Ok(PoolGeometry { window, stride, pad })
    }

    pub fn output_len(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.window > n + 2 * self.pad {
            return Err(Error::InvalidArgument(format!(
                "pool window {} larger than padded input extent {}",
                self.window,
                n + 2 * self.pad
            )));
        }
        Ok(())
    }

    /// Input index range covered by output index `i`.
    fn span(&self, i: usize, n: usize) -> std::ops::Range<usize> {
        let start = (i * self.stride) as isize - self.pad as isize;
        let end = start + self.window as isize;
        (start.max(0) as usize)..(end.min(n as isize) as usize)
    }
}

/// Max-pool output plus, for every output cell, the linear input index of
/// the selected maximum (first maximum in row-major window order).
#[derive(Clone, Debug)]
pub struct PoolOutput {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

pub fn maxpool_forward(input: &Tensor, window: usize, stride: usize) -> Result<PoolOutput> {
    let geo = PoolGeometry::new(window, stride)?;
    let (h, w, c) = input.dims3()?;
    geo.check(h)?;
    geo.check(w)?;
    let (oh, ow) = (geo.output_len(h), geo.output_len(w));
    let x = input.data();
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let mut argmax = vec![0usize; oh * ow * c];
    let od = out.data_mut();
    for i in 0..oh {
        let rows = geo.span(i, h);
        for j in 0..ow {
            let cols = geo.span(j, w);
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for r in rows.clone() {
                    for s in cols.clone() {
                        let idx = (r * w + s) * c + ch;
                        if x[idx] > best || best_idx == usize::MAX {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (i * ow + j) * c + ch;
                od[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok(PoolOutput { output: out, argmax })
}

/// Routes each upstream value to its argmax input position.
pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if argmax.len() != upstream.len() {
        return Err(Error::shape("maxpool_backward", argmax.len(), upstream.len()));
    }
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&idx, &u) in argmax.iter().zip(upstream.data()) {
        gd[idx] += u;
    }
    Ok(g)
}

/// Numerically stable softmax over a score vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Vector-Jacobian product of softmax: `dL/ds = p * (g - <g, p>)`.
pub fn softmax_backward(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner = dot(probs, upstream);
    probs.iter().zip(upstream).map(|(p, g)| p * (g - inner)).collect()
}

/// Cross-entropy `-log softmax(scores)[target]` and its gradient
/// `softmax(scores) - onehot(target)`.
pub fn softmax_cross_entropy(scores: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mut grad = softmax(scores);
    let loss = log_sum_exp(scores) - scores[target];
    grad[target] -= 1.0;
    (loss, grad)
}

/// Per-axis interpolation taps for align-corners resizing.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Align-corners bilinear resize of an `[H, W, C]` tensor.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "bilinear target extent must be positive, got {out_h}x{out_w}"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let rows = resize_taps(h, out_h);
    let cols = resize_taps(w, out_w);
    let x = input.data();
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    let od = out.data_mut();
    for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
            let o = (i * out_w + j) * c;
            let corners = [
                (r0, c0, (1.0 - fy) * (1.0 - fx)),
                (r0, c1, (1.0 - fy) * fx),
                (r1, c0, fy * (1.0 - fx)),
                (r1, c1, fy * fx),
            ];
            for (r, s, wt) in corners {
                if wt == 0.0 {
                    continue;
                }
                let src = &x[(r * w + s) * c..(r * w + s + 1) * c];
                axpy(wt, src, &mut od[o..o + c]);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters the upstream gradient back onto
/// the `in_h x in_w` grid.
pub fn bilinear_resize_backward(upstream: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (out_h, out_w, c) = upstream.dims3()?;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(upstream.clone());
    }
    let rows = resize_taps(in_h, out_h);
    let cols = resize_taps(in_w, out_w);
    let g = upstream.data();
    let mut gin = Tensor::zeros(&[in_h, in_w, c]);
    let gd = gin.data_mut();
    for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
            let o = (i * out_w + j) * c;
            let src = &g[o..o + c];
            let corners = [
                (r0, c0, (1.0 - fy) * (1.0 - fx)),
                (r0, c1, (1.0 - fy) * fx),
                (r1, c0, fy * (1.0 - fx)),
                (r1, c1, fy * fx),
            ];
            for (r, s, wt) in corners {
                if wt == 0.0 {
                    continue;
                }
                let base = (r * in_w + s) * c;
                axpy(wt, src, &mut gd[base..base + c]);
            }
        }
    }
    Ok(gin)
}

/// Concatenates `[H, W, C_k]` tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::InvalidArgument("concat of zero tensors".into()));
    };
    let (h, w, _) = first.dims3()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (ph, pw, pc) = p.dims3()?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape("concat_channels", format!("{h}x{w}"), format!("{ph}x{pw}")));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(h * w * total);
    for cell in 0..h * w {
        for (p, &pc) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[cell * pc..(cell + 1) * pc]);
        }
    }
    Tensor::new(vec![h, w, total], data)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels(grad: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    let (h, w, c) = grad.dims3()?;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::shape("split_channels", c, widths.iter().sum::<usize>()));
    }
    let mut parts: Vec<Vec<f64>> = widths.iter().map(|&pc| Vec::with_capacity(h * w * pc)).collect();
    for cell in grad.data().chunks(c) {
        let mut offset = 0;
        for (part, &pc) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&cell[offset..offset + pc]);
            offset += pc;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &pc)| Tensor::new(vec![h, w, pc], d))
        .collect()
}

/// Applies a parameter-free or parameterized layer in the forward direction.
/// Pooling layers drop their argmax record; use [`maxpool_forward`] when the
/// backward pass is needed.
pub fn layer_forward(input: &Tensor, layer: &LayerParams) -> Result<Tensor> {
    layer.validate()?;
    match layer.kind {
        LayerKind::Dense => dense_forward(input, layer),
        LayerKind::Conv3x3 => conv3x3_forward(input, layer),
        LayerKind::Relu => Ok(relu_forward(input)),
        LayerKind::Maxpool => {
            let window = layer.hyper(super::layer::HYPER_WINDOW).unwrap_or(1);
            let stride = layer.hyper(super::layer::HYPER_STRIDE).unwrap_or(1);
            Ok(maxpool_forward(input, window, stride)?.output)
        }
        LayerKind::Softmax => Ok(Tensor::new(input.shape().to_vec(), softmax(input.data()))?),
        LayerKind::BilinearResize | LayerKind::Concat => Err(Error::InvalidArgument(format!(
            "{:?} takes explicit target arguments; call it directly",
            layer.kind
        ))),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    fn dense_layer(weights: Vec<f64>, bias: Vec<f64>) -> LayerParams {
        let n_out = bias.len();
        let n_in = weights.len() / n_out;
        let mut layer = LayerParams::dense(n_in, n_out, ParamGroup::New, &mut ChaCha8Rng::seed_from_u64(0));
        layer.weights = Tensor::new(vec![n_out, n_in], weights).unwrap();
        layer.bias = Tensor::from_vec(bias);
        layer
    }

    #[test]
    fn dense_zero_weights_gives_bias() {
        let layer = dense_layer(vec![0.0; 6], vec![1.5, -2.0, 0.25]);
        let out = dense_forward(&Tensor::from_vec(vec![3.0, -7.0]), &layer).unwrap();
        assert_eq!(out.data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn dense_identity_passes_input() {
        let layer = dense_layer(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
        let x = Tensor::from_vec(vec![0.3, -0.9]);
        assert_eq!(dense_forward(&x, &layer).unwrap(), x);
    }

    #[test]
    fn dense_matches_elementwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = LayerParams::dense(2, 3, ParamGroup::New, &mut rng);
        let x = [0.7, -1.3];
        let out = dense_forward(&Tensor::from_vec(x.to_vec()), &layer).unwrap();
        let w = layer.weights.data();
        for j in 0..3 {
            let mut expected = layer.bias.data()[j];
            expected += w[j * 2] * x[0];
            expected += w[j * 2 + 1] * x[1];
            assert_eq!(out.data()[j], expected);
        }
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let layer = dense_layer(vec![0.0; 6], vec![0.0; 3]);
        assert!(matches!(
            dense_forward(&Tensor::from_vec(vec![1.0; 3]), &layer),
            Err(Error::Shape { .. })
        ));
        let x = Tensor::from_vec(vec![1.0; 2]);
        assert!(dense_backward(&x, &layer, &Tensor::from_vec(vec![1.0; 2])).is_err());
    }

    #[test]
    fn dense_backward_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = LayerParams::dense(4, 3, ParamGroup::New, &mut rng);
        let x = random_tensor(&[4], &mut rng);
        let g = dense_backward(&x, &layer, &Tensor::zeros(&[3])).unwrap();
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_backward_single_unit() {
        let layer = dense_layer(vec![2.0], vec![0.5]);
        let g = dense_backward(&Tensor::from_vec(vec![3.0]), &layer, &Tensor::from_vec(vec![-1.5])).unwrap();
        assert_eq!(g.weights.data(), &[-4.5]);
        assert_eq!(g.bias.data(), &[-1.5]);
        assert_eq!(g.input.unwrap().data(), &[-3.0]);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = LayerParams::dense(4, 3, ParamGroup::New, &mut rng);
        let x = random_tensor(&[4], &mut rng);
        let up = random_tensor(&[3], &mut rng);
        let loss = |l: &LayerParams, x: &Tensor| dot(dense_forward(x, l).unwrap().data(), up.data());
        let g = dense_backward(&x, &layer, &up).unwrap();
        let eps = 1e-5;
        for i in 0..layer.weights.len() {
            let (mut lp, mut lm) = (layer.clone(), layer.clone());
            lp.weights.data_mut()[i] += eps;
            lm.weights.data_mut()[i] -= eps;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            let an = g.weights.data()[i];
            assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-6, "w{i}: {fd} vs {an}");
        }
        let gi = g.input.unwrap();
        for i in 0..4 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * eps);
            assert!((fd - gi.data()[i]).abs() / gi.data()[i].abs().max(1e-8) < 1e-6);
        }
    }

    fn conv_layer(c_in: usize, c_out: usize, weights: Vec<f64>) -> LayerParams {
        let mut layer = LayerParams::conv3x3(c_in, c_out, ParamGroup::New, &mut ChaCha8Rng::seed_from_u64(0));
        layer.weights = Tensor::new(vec![3, 3, c_in, c_out], weights).unwrap();
        layer.bias = Tensor::zeros(&[c_out]);
        layer
    }

    #[test]
    fn conv_identity_kernel() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let layer = conv_layer(1, 1, k);
        let x = random_tensor(&[4, 5, 1], &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(conv3x3_forward(&x, &layer).unwrap(), x);
    }

    #[test]
    fn conv_constant_field_all_ones() {
        let layer = conv_layer(1, 1, vec![1.0; 9]);
        let x = Tensor::filled(&[4, 4, 1], 2.0);
        let out = conv3x3_forward(&x, &layer).unwrap();
        assert_eq!(out.at3(1, 1, 0), 18.0);
        assert_eq!(out.at3(2, 2, 0), 18.0);
        assert_eq!(out.at3(0, 0, 0), 8.0);
        assert_eq!(out.at3(0, 1, 0), 12.0);
    }

    /// Direct nested-loop cross-correlation.
    fn conv_oracle(x: &Tensor, layer: &LayerParams) -> Tensor {
        let (h, w, ci) = x.dims3().unwrap();
        let co = layer.bias.len();
        let mut out = Tensor::zeros(&[h, w, co]);
        for r in 0..h as isize {
            for s in 0..w as isize {
                for o in 0..co {
                    let mut acc = layer.bias.data()[o];
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (rr, ss) = (r + dy, s + dx);
                            if rr < 0 || ss < 0 || rr >= h as isize || ss >= w as isize {
                                continue;
                            }
                            for i in 0..ci {
                                let widx = ((((dy + 1) * 3 + dx + 1) as usize * ci) + i) * co + o;
                                acc += x.at3(rr as usize, ss as usize, i) * layer.weights.data()[widx];
                            }
                        }
                    }
                    let idx = (r as usize * w + s as usize) * co + o;
                    out.data_mut()[idx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layer = LayerParams::conv3x3(2, 3, ParamGroup::New, &mut rng);
        layer.bias = random_tensor(&[3], &mut rng);
        let x = random_tensor(&[5, 5, 2], &mut rng);
        let got = conv3x3_forward(&x, &layer).unwrap();
        assert!(got.max_abs_diff(&conv_oracle(&x, &layer)) < 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let layer = conv_layer(2, 1, vec![0.0; 18]);
        assert!(conv3x3_forward(&Tensor::zeros(&[3, 3, 1]), &layer).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut layer = LayerParams::conv3x3(2, 2, ParamGroup::New, &mut rng);
        layer.bias = random_tensor(&[2], &mut rng);
        let x = random_tensor(&[4, 3, 2], &mut rng);
        let up = random_tensor(&[4, 3, 2], &mut rng);
        let loss = |l: &LayerParams, x: &Tensor| dot(conv3x3_forward(x, l).unwrap().data(), up.data());
        let g = conv3x3_backward(&x, &layer, &up, true).unwrap();
        let eps = 1e-5;
        for i in 0..layer.weights.len() {
            let (mut lp, mut lm) = (layer.clone(), layer.clone());
            lp.weights.data_mut()[i] += eps;
            lm.weights.data_mut()[i] -= eps;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            let an = g.weights.data()[i];
            assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-6);
        }
        let gi = g.input.unwrap();
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * eps);
            assert!((fd - gi.data()[i]).abs() / gi.data()[i].abs().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn maxpool_constant_field() {
        let x = Tensor::filled(&[7, 6, 2], -3.5);
        for (window, stride) in [(2, 2), (3, 1), (5, 1), (9, 1), (2, 1)] {
            let out = maxpool_forward(&x, window, stride).unwrap().output;
            assert!(out.data().iter().all(|&v| v == -3.5), "{window}/{stride}");
        }
    }

    #[test]
    fn maxpool_sliding_keeps_size() {
        let x = Tensor::zeros(&[11, 8, 1]);
        let out = maxpool_forward(&x, 5, 1).unwrap().output;
        assert_eq!(out.shape(), &[11, 8, 1]);
        let tiled = maxpool_forward(&x, 2, 2).unwrap().output;
        assert_eq!(tiled.shape(), &[6, 4, 1]);
    }

    #[test]
    fn maxpool_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[7, 9, 2], &mut rng);
        for (window, stride) in [(3, 1), (5, 1), (2, 2), (3, 3)] {
            let out = maxpool_forward(&x, window, stride).unwrap().output;
            let pad = if stride == 1 { (window as isize - 1) / 2 } else { 0 };
            let (oh, ow, _) = out.dims3().unwrap();
            for i in 0..oh {
                for j in 0..ow {
                    for c in 0..2 {
                        let mut best = f64::NEG_INFINITY;
                        for r in 0..7isize {
                            for s in 0..9isize {
                                let r0 = (i * stride) as isize - pad;
                                let s0 = (j * stride) as isize - pad;
                                if r >= r0 && r < r0 + window as isize && s >= s0 && s < s0 + window as isize {
                                    best = best.max(x.at3(r as usize, s as usize, c));
                                }
                            }
                        }
                        assert_eq!(out.at3(i, j, c), best);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let x = Tensor::filled(&[2, 2, 1], 1.0);
        let pooled = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(pooled.argmax, vec![0]);
    }

    #[test]
    fn maxpool_window_too_large() {
        let x = Tensor::zeros(&[3, 3, 1]);
        assert!(maxpool_forward(&x, 4, 4).is_err());
        assert!(maxpool_forward(&x, 9, 1).is_ok());
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = softmax(&[0.3, -1.0, 2.0]);
        let b = softmax(&[100.3, 99.0, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_high_precision_oracle() {
        // exp(-2), exp(-1), 1 normalized; reference computed in 50-digit arithmetic.
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]);
        for (v, e) in p.iter().zip(expected) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let s = [0.2, -0.4, 1.1, 0.0];
        let g = [0.5, -1.0, 0.25, 2.0];
        let an = softmax_backward(&softmax(&s), &g);
        let eps = 1e-6;
        for i in 0..4 {
            let (mut sp, mut sm) = (s, s);
            sp[i] += eps;
            sm[i] -= eps;
            let fd = (dot(&softmax(&sp), &g) - dot(&softmax(&sm), &g)) / (2.0 * eps);
            assert!((fd - an[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&[3, 4, 2], &mut rng);
        assert_eq!(bilinear_resize(&x, 3, 4).unwrap(), x);
        let c = Tensor::filled(&[3, 5, 1], 0.75);
        let up = bilinear_resize(&c, 7, 2).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
        assert!(bilinear_resize(&x, 0, 4).is_err());
    }

    #[test]
    fn bilinear_2x2_to_4x4_closed_form() {
        let (a, b, c, d) = (1.0, 4.0, -2.0, 0.5);
        let x = Tensor::new(vec![2, 2, 1], vec![a, b, c, d]).unwrap();
        let out = bilinear_resize(&x, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (u, v) = (i as f64 / 3.0, j as f64 / 3.0);
                let expected = a * (1.0 - u) * (1.0 - v) + b * (1.0 - u) * v + c * u * (1.0 - v) + d * u * v;
                assert!((out.at3(i, j, 0) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&[3, 5, 2], &mut rng);
        let y = random_tensor(&[7, 4, 2], &mut rng);
        let lhs = dot(bilinear_resize(&x, 7, 4).unwrap().data(), y.data());
        let rhs = dot(x.data(), bilinear_resize_backward(&y, 3, 5).unwrap().data());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_tensor(&[2, 3, 1], &mut rng);
        let b = random_tensor(&[2, 3, 4], &mut rng);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3, 5]);
        assert_eq!(cat.at3(1, 2, 3), b.at3(1, 2, 2));
        let parts = split_channels(&cat, &[1, 4]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
