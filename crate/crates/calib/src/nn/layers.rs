//! Layer primitives operating on one image at a time.
//!
//! Every kernel works on plain slices in NCHW order and is written so the
//! inner loops run over contiguous memory. Reductions use a fixed 8-lane
//! accumulation order, which keeps results bit-identical for any worker
//! count while still vectorizing.

use super::tensor::{Elem, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[inline]
fn axpy<E: Elem>(dst: &mut [E], src: &[E], a: E) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + a * *s;
    }
}

/// Dot product with a fixed lane order (8 partial sums combined pairwise).
#[inline]
pub(crate) fn dot<E: Elem>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [E::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = E::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// Sum with the same fixed lane order as [`dot`].
#[inline]
pub(crate) fn sum<E: Elem>(a: &[E]) -> E {
    let mut acc = [E::zero(); 8];
    let mut ca = a.chunks_exact(8);
    for xa in &mut ca {
        for l in 0..8 {
            acc[l] = acc[l] + xa[l];
        }
    }
    let mut tail = E::zero();
    for x in ca.remainder() {
        tail = tail + *x;
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// 3x3 convolution, stride 1, zero padding 1. Weights are `[out, in, 3, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<E> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Elem> Conv3x3<E> {
    pub fn new(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            w: Tensor::zeros(&[out_ch, in_ch, 3, 3]),
            b: Tensor::zeros(&[out_ch]),
        }
    }

    /// He fan-in initialization; biases start at zero.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let std = (2.0 / (self.in_ch as f64 * 9.0)).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        for w in self.w.data_mut() {
            *w = E::from_f64c(normal.sample(rng));
        }
    }

    /// `out[o] = b[o] + sum_c w[o,c] * in[c]`, each plane `h x w` pixels.
    pub fn forward(&self, input: &[E], output: &mut [E], h: usize, w: usize) {
        let plane = h * w;
        debug_assert_eq!(input.len(), self.in_ch * plane);
        debug_assert_eq!(output.len(), self.out_ch * plane);
        let wdat = self.w.data();
        for o in 0..self.out_ch {
            let out_plane = &mut output[o * plane..(o + 1) * plane];
            out_plane.fill(self.b.data()[o]);
            for c in 0..self.in_ch {
                let in_plane = &input[c * plane..(c + 1) * plane];
                let wbase = (o * self.in_ch + c) * 9;
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)) as usize;
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)) as usize;
                        if x1 <= x0 {
                            continue;
                        }
                        let wv = wdat[wbase + ky * 3 + kx];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let src0 = iy * w + (x0 as isize + dx) as usize;
                            let dst = &mut out_plane[y * w + x0..y * w + x1];
                            let src = &in_plane[src0..src0 + (x1 - x0)];
                            axpy(dst, src, wv);
                        }
                    }
                }
            }
        }
    }

    /// Gradients w.r.t. input, weights and bias for one image. `d_input` may
    /// be `None` for the first layer. Weight/bias gradients accumulate.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        input: &[E],
        d_output: &[E],
        d_input: Option<&mut [E]>,
        d_w: &mut Tensor<E>,
        d_b: &mut Tensor<E>,
        h: usize,
        w: usize,
    ) {
        let plane = h * w;
        let wdat = self.w.data();

        if let Some(d_in) = d_input {
            d_in.fill(E::zero());
            for o in 0..self.out_ch {
                let d_out_plane = &d_output[o * plane..(o + 1) * plane];
                for c in 0..self.in_ch {
                    let d_in_plane = &mut d_in[c * plane..(c + 1) * plane];
                    let wbase = (o * self.in_ch + c) * 9;
                    for ky in 0..3usize {
                        let dy = ky as isize - 1;
                        // d_in[iy] receives from d_out[iy - dy].
                        let y0 = dy.max(0) as usize;
                        let y1 = ((h as isize + dy).min(h as isize)) as usize;
                        for kx in 0..3usize {
                            let dx = kx as isize - 1;
                            let x0 = dx.max(0) as usize;
                            let x1 = ((w as isize + dx).min(w as isize)) as usize;
                            if x1 <= x0 {
                                continue;
                            }
                            let wv = wdat[wbase + ky * 3 + kx];
                            for iy in y0..y1 {
                                let oy = (iy as isize - dy) as usize;
                                let src0 = oy * w + (x0 as isize - dx) as usize;
                                let dst = &mut d_in_plane[iy * w + x0..iy * w + x1];
                                let src = &d_out_plane[src0..src0 + (x1 - x0)];
                                axpy(dst, src, wv);
                            }
                        }
                    }
                }
            }
        }

        let dw = d_w.data_mut();
        for o in 0..self.out_ch {
            let d_out_plane = &d_output[o * plane..(o + 1) * plane];
            for c in 0..self.in_ch {
                let in_plane = &input[c * plane..(c + 1) * plane];
                let wbase = (o * self.in_ch + c) * 9;
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)) as usize;
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)) as usize;
                        if x1 <= x0 {
                            continue;
                        }
                        let mut acc = E::zero();
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let src0 = iy * w + (x0 as isize + dx) as usize;
                            acc = acc
                                + dot(
                                    &d_out_plane[y * w + x0..y * w + x1],
                                    &in_plane[src0..src0 + (x1 - x0)],
                                );
                        }
                        dw[wbase + ky * 3 + kx] = dw[wbase + ky * 3 + kx] + acc;
                    }
                }
            }
        }

        let db = d_b.data_mut();
        for o in 0..self.out_ch {
            db[o] = db[o] + sum(&d_output[o * plane..(o + 1) * plane]);
        }
    }
}

/// ReLU in place; the mask for backward is recovered from the outputs.
pub fn relu_forward<E: Elem>(x: &mut [E]) {
    for v in x.iter_mut() {
        if *v < E::zero() {
            *v = E::zero();
        }
    }
}

/// `d_x = d_y` where the forward output was positive, else 0.
pub fn relu_backward<E: Elem>(output: &[E], d: &mut [E]) {
    for (v, o) in d.iter_mut().zip(output) {
        if *o <= E::zero() {
            *v = E::zero();
        }
    }
}

/// 2x2 max pooling with stride 2. `argmax` records which of the four inputs
/// won (0..4, row-major within the window) for the backward scatter.
pub fn maxpool2_forward<E: Elem>(
    input: &[E],
    output: &mut [E],
    argmax: &mut [u8],
    ch: usize,
    h: usize,
    w: usize,
) {
    let (oh, ow) = (h / 2, w / 2);
    for c in 0..ch {
        let in_plane = &input[c * h * w..(c + 1) * h * w];
        let out_plane = &mut output[c * oh * ow..(c + 1) * oh * ow];
        let idx_plane = &mut argmax[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            let r0 = 2 * y * w;
            let r1 = r0 + w;
            for x in 0..ow {
                let cand = [
                    in_plane[r0 + 2 * x],
                    in_plane[r0 + 2 * x + 1],
                    in_plane[r1 + 2 * x],
                    in_plane[r1 + 2 * x + 1],
                ];
                let mut best = 0u8;
                for k in 1..4u8 {
                    if cand[k as usize] > cand[best as usize] {
                        best = k;
                    }
                }
                out_plane[y * ow + x] = cand[best as usize];
                idx_plane[y * ow + x] = best;
            }
        }
    }
}

pub fn maxpool2_backward<E: Elem>(
    d_output: &[E],
    argmax: &[u8],
    d_input: &mut [E],
    ch: usize,
    h: usize,
    w: usize,
) {
    let (oh, ow) = (h / 2, w / 2);
    d_input.fill(E::zero());
    for c in 0..ch {
        let d_out_plane = &d_output[c * oh * ow..(c + 1) * oh * ow];
        let idx_plane = &argmax[c * oh * ow..(c + 1) * oh * ow];
        let d_in_plane = &mut d_input[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let k = idx_plane[y * ow + x] as usize;
                let iy = 2 * y + k / 2;
                let ix = 2 * x + k % 2;
                d_in_plane[iy * w + ix] = d_out_plane[y * ow + x];
            }
        }
    }
}

/// Global average pooling: `C x H x W -> C`.
pub fn gap_forward<E: Elem>(input: &[E], output: &mut [E], ch: usize, plane: usize) {
    let inv = E::from_f64c(1.0 / plane as f64);
    for c in 0..ch {
        output[c] = sum(&input[c * plane..(c + 1) * plane]) * inv;
    }
}

pub fn gap_backward<E: Elem>(d_output: &[E], d_input: &mut [E], ch: usize, plane: usize) {
    let inv = E::from_f64c(1.0 / plane as f64);
    for c in 0..ch {
        let g = d_output[c] * inv;
        d_input[c * plane..(c + 1) * plane].fill(g);
    }
}

/// Fully connected layer, weights `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<E> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Elem> Linear<E> {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: Tensor::zeros(&[out_dim, in_dim]),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let std = (2.0 / self.in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        for w in self.w.data_mut() {
            *w = E::from_f64c(normal.sample(rng));
        }
    }

    pub fn forward(&self, input: &[E], output: &mut [E]) {
        let wdat = self.w.data();
        for o in 0..self.out_dim {
            output[o] = self.b.data()[o] + dot(&wdat[o * self.in_dim..(o + 1) * self.in_dim], input);
        }
    }

    pub fn backward(
        &self,
        input: &[E],
        d_output: &[E],
        d_input: Option<&mut [E]>,
        d_w: &mut Tensor<E>,
        d_b: &mut Tensor<E>,
    ) {
        if let Some(d_in) = d_input {
            d_in.fill(E::zero());
            let wdat = self.w.data();
            for o in 0..self.out_dim {
                axpy(
                    d_in,
                    &wdat[o * self.in_dim..(o + 1) * self.in_dim],
                    d_output[o],
                );
            }
        }
        let dw = d_w.data_mut();
        for o in 0..self.out_dim {
            axpy(
                &mut dw[o * self.in_dim..(o + 1) * self.in_dim],
                input,
                d_output[o],
            );
            d_b.data_mut()[o] = d_b.data()[o] + d_output[o];
        }
    }
}

pub(crate) fn softplus<E: Elem>(x: E) -> E {
    let twenty = E::from_f64c(20.0);
    if x > twenty {
        x
    } else {
        (E::one() + x.exp()).ln()
    }
}

pub(crate) fn sigmoid<E: Elem>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

/// Raw scale parameter whose softplus equals 1, the initial cosine-head gain.
pub const COSINE_SCALE_INIT: f64 = 0.541_324_854_612_918_1;

/// Cosine-normalized output head: `out_k = softplus(s_k) * <w_k/|w_k|, f/|f|>`.
/// Outputs are invariant to positive rescaling of the features and of each
/// weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineHead<E> {
    pub out_dim: usize,
    pub in_dim: usize,
    pub w: Tensor<E>,
    /// Raw scale parameters; the effective gain is `softplus(s)`.
    pub s: Tensor<E>,
}

impl<E: Elem> CosineHead<E> {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            w: Tensor::zeros(&[out_dim, in_dim]),
            s: Tensor::scalar_fill(&[out_dim], E::from_f64c(COSINE_SCALE_INIT)),
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let std = (1.0 / self.in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        for w in self.w.data_mut() {
            *w = E::from_f64c(normal.sample(rng));
        }
        self.s
            .fill(E::from_f64c(COSINE_SCALE_INIT));
    }

    /// Returns `Err(())` on a zero-norm feature vector.
    pub fn forward(&self, features: &[E], output: &mut [E]) -> Result<(), ()> {
        let fnorm = dot(features, features).sqrt();
        if !(fnorm > E::zero()) || !fnorm.is_finite() {
            return Err(());
        }
        let wdat = self.w.data();
        for k in 0..self.out_dim {
            let wk = &wdat[k * self.in_dim..(k + 1) * self.in_dim];
            let wnorm = dot(wk, wk).sqrt();
            let cos = dot(wk, features) / (wnorm * fnorm);
            output[k] = softplus(self.s.data()[k]) * cos;
        }
        Ok(())
    }

    pub fn backward(
        &self,
        features: &[E],
        d_output: &[E],
        d_features: &mut [E],
        d_w: &mut Tensor<E>,
        d_s: &mut Tensor<E>,
    ) {
        let fnorm = dot(features, features).sqrt();
        let wdat = self.w.data();
        d_features.fill(E::zero());
        for k in 0..self.out_dim {
            let wk = &wdat[k * self.in_dim..(k + 1) * self.in_dim];
            let wnorm = dot(wk, wk).sqrt();
            let raw = dot(wk, features);
            let cos = raw / (wnorm * fnorm);
            let sk = self.s.data()[k];
            let eta = softplus(sk);
            let g = d_output[k];

            d_s.data_mut()[k] = d_s.data()[k] + g * cos * sigmoid(sk);

            // d cos / d f = (w_hat - cos * f_hat) / |f|; likewise for w.
            let dcos = g * eta;
            let inv_wf = E::one() / (wnorm * fnorm);
            let coef_f = dcos * inv_wf;
            let coef_f_self = dcos * cos / (fnorm * fnorm);
            let coef_w_self = dcos * cos / (wnorm * wnorm);
            let dwk = &mut d_w.data_mut()[k * self.in_dim..(k + 1) * self.in_dim];
            for i in 0..self.in_dim {
                d_features[i] = d_features[i] + coef_f * wk[i] - coef_f_self * features[i];
                dwk[i] = dwk[i] + coef_f * features[i] - coef_w_self * wk[i];
            }
        }
    }
}
