//! Small planar reference encoder.
//!
//! A strided 3×3 convolution pyramid over the ERP raster with horizontally
//! circular padding (the raster wraps in longitude) and zero padding
//! vertically. It stands in for a pretrained backbone: scale k feeds decoder
//! level k, the finest scale at stride 4.

use crate::error::{Error, Result};
use crate::mat::{Mat, Scalar};
use crate::nn::{gelu, gelu_grad, Params};
use crate::raster::ErpImage;

/// Planar feature map: h·w rows (y-major) × channels.
#[derive(Debug, Clone)]
pub struct PlanarFeat<S> {
    pub w: usize,
    pub h: usize,
    pub data: Mat<S>,
}

impl<S: Scalar> PlanarFeat<S> {
    pub fn from_image(img: &ErpImage) -> Self {
        PlanarFeat {
            w: img.width,
            h: img.height,
            data: Mat::from_vec(
                img.width * img.height,
                img.channels,
                img.data.iter().map(|&v| S::from_f64(v as f64)).collect(),
            ),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

/// 3×3 planar convolution; weight layout is out × (9·in) with tap index
/// (dy·3+dx)·in + ci.
#[derive(Debug, Clone)]
pub struct PlanarConv<S> {
    pub weight: Mat<S>,
    pub bias: Vec<S>,
    pub stride: usize,
}

impl<S: Scalar> PlanarConv<S> {
    pub fn zeros(out: usize, inp: usize, stride: usize) -> Self {
        PlanarConv {
            weight: Mat::zeros(out, 9 * inp),
            bias: vec![S::zero(); out],
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        PlanarConv {
            weight: Mat::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![S::zero(); self.bias.len()],
            stride: self.stride,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols() / 9
    }
}

impl<S: Scalar> Params<S> for PlanarConv<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        f(
            &format!("{prefix}.weight"),
            &[self.weight.rows(), self.weight.cols()],
            self.weight.data(),
        );
        f(&format!("{prefix}.bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        let shape = [self.weight.rows(), self.weight.cols()];
        f(&format!("{prefix}.weight"), &shape, self.weight.data_mut());
        let n = self.bias.len();
        f(&format!("{prefix}.bias"), &[n], &mut self.bias);
    }
}

fn conv_fwd<S: Scalar>(p: &PlanarConv<S>, x: &PlanarFeat<S>) -> Result<PlanarFeat<S>> {
    if x.channels() != p.in_dim() {
        return Err(Error::shape(format!(
            "planar conv expects {} channels, got {}",
            p.in_dim(),
            x.channels()
        )));
    }
    if x.w % p.stride != 0 || x.h % p.stride != 0 {
        return Err(Error::invalid(format!(
            "raster {}×{} not divisible by stride {}",
            x.w, x.h, p.stride
        )));
    }
    let (wo, ho) = (x.w / p.stride, x.h / p.stride);
    let cin = p.in_dim();
    let cout = p.out_dim();
    let mut out = Mat::zeros(wo * ho, cout);
    let mut patch = vec![S::zero(); 9 * cin];
    for yo in 0..ho {
        for xo in 0..wo {
            gather_patch(x, xo * p.stride, yo * p.stride, &mut patch);
            let dst = out.row_mut(yo * wo + xo);
            for (o, d) in dst.iter_mut().enumerate() {
                let wrow = p.weight.row(o);
                let mut acc = p.bias[o];
                for (wv, pv) in wrow.iter().zip(patch.iter()) {
                    acc += *wv * *pv;
                }
                *d = acc;
            }
        }
    }
    Ok(PlanarFeat {
        w: wo,
        h: ho,
        data: out,
    })
}

#[inline]
fn gather_patch<S: Scalar>(x: &PlanarFeat<S>, cx: usize, cy: usize, patch: &mut [S]) {
    let cin = x.channels();
    for dy in 0..3usize {
        let yi = cy as i64 + dy as i64 - 1;
        for dx in 0..3usize {
            let dst = &mut patch[(dy * 3 + dx) * cin..(dy * 3 + dx + 1) * cin];
            if yi < 0 || yi >= x.h as i64 {
                dst.iter_mut().for_each(|v| *v = S::zero());
                continue;
            }
            let xi = (cx as i64 + dx as i64 - 1).rem_euclid(x.w as i64) as usize;
            dst.copy_from_slice(x.data.row(yi as usize * x.w + xi));
        }
    }
}

/// Returns (∂params, ∂x).
fn conv_bwd<S: Scalar>(
    p: &PlanarConv<S>,
    x: &PlanarFeat<S>,
    grad_out: &Mat<S>,
) -> Result<(PlanarConv<S>, PlanarFeat<S>)> {
    let (wo, ho) = (x.w / p.stride, x.h / p.stride);
    if grad_out.rows() != wo * ho || grad_out.cols() != p.out_dim() {
        return Err(Error::shape("planar conv backward shapes"));
    }
    let cin = p.in_dim();
    let mut d_w = Mat::zeros(p.weight.rows(), p.weight.cols());
    let mut d_b = vec![S::zero(); p.bias.len()];
    let mut d_x = Mat::zeros(x.w * x.h, cin);
    let mut patch = vec![S::zero(); 9 * cin];
    for yo in 0..ho {
        for xo in 0..wo {
            let (cx, cy) = (xo * p.stride, yo * p.stride);
            gather_patch(x, cx, cy, &mut patch);
            let g = grad_out.row(yo * wo + xo);
            for (o, &gv) in g.iter().enumerate() {
                d_b[o] += gv;
                let dw = d_w.row_mut(o);
                for (d, &pv) in dw.iter_mut().zip(patch.iter()) {
                    *d += gv * pv;
                }
            }
            // Scatter into input gradient.
            for dy in 0..3usize {
                let yi = cy as i64 + dy as i64 - 1;
                if yi < 0 || yi >= x.h as i64 {
                    continue;
                }
                for dx in 0..3usize {
                    let xi = (cx as i64 + dx as i64 - 1).rem_euclid(x.w as i64) as usize;
                    let dst = d_x.row_mut(yi as usize * x.w + xi);
                    let tap = (dy * 3 + dx) * cin;
                    for (o, &gv) in g.iter().enumerate() {
                        let wrow = &p.weight.row(o)[tap..tap + cin];
                        for (d, &wv) in dst.iter_mut().zip(wrow) {
                            *d += gv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok((
        PlanarConv {
            weight: d_w,
            bias: d_b,
            stride: p.stride,
        },
        PlanarFeat {
            w: x.w,
            h: x.h,
            data: d_x,
        },
    ))
}

/// Encoder parameters: a two-conv stem to stride 4, then one stride-2 conv
/// per additional (coarser) scale.
#[derive(Debug, Clone)]
pub struct EncoderParams<S> {
    pub stem_a: PlanarConv<S>,
    pub stem_b: PlanarConv<S>,
    /// downs[i] maps the scale of decoder level L−1−i to level L−2−i.
    pub downs: Vec<PlanarConv<S>>,
}

impl<S: Scalar> EncoderParams<S> {
    /// `channels` are per decoder level, coarse→fine.
    pub fn zeros(channels: &[usize], image_channels: usize) -> Self {
        let l = channels.len();
        let fine = channels[l - 1];
        let mut downs = Vec::new();
        for i in 0..l - 1 {
            downs.push(PlanarConv::zeros(channels[l - 2 - i], channels[l - 1 - i], 2));
        }
        EncoderParams {
            stem_a: PlanarConv::zeros(fine, image_channels, 2),
            stem_b: PlanarConv::zeros(fine, fine, 2),
            downs,
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            stem_a: self.stem_a.zeros_like(),
            stem_b: self.stem_b.zeros_like(),
            downs: self.downs.iter().map(|d| d.zeros_like()).collect(),
        }
    }

    pub fn levels(&self) -> usize {
        self.downs.len() + 1
    }
}

impl<S: Scalar> Params<S> for EncoderParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        self.stem_a.visit(&format!("{prefix}.stem_a"), f);
        self.stem_b.visit(&format!("{prefix}.stem_b"), f);
        for (i, d) in self.downs.iter().enumerate() {
            d.visit(&format!("{prefix}.down{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        self.stem_a.visit_mut(&format!("{prefix}.stem_a"), f);
        self.stem_b.visit_mut(&format!("{prefix}.stem_b"), f);
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&format!("{prefix}.down{i}"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache<S> {
    input: PlanarFeat<S>,
    /// (conv input, pre-activation) per conv in forward order.
    steps: Vec<(PlanarFeat<S>, PlanarFeat<S>)>,
}

fn act<S: Scalar>(f: &PlanarFeat<S>) -> PlanarFeat<S> {
    PlanarFeat {
        w: f.w,
        h: f.h,
        data: f.data.map(gelu),
    }
}

/// Runs the pyramid; returns activated features per decoder level
/// (coarse→fine) and the cache for the backward pass.
pub fn encoder_forward<S: Scalar>(
    p: &EncoderParams<S>,
    img: &ErpImage,
) -> Result<(Vec<PlanarFeat<S>>, EncoderCache<S>)> {
    let l = p.levels();
    let min_div = 4 << (l - 1);
    if img.width % min_div != 0 || img.height % min_div != 0 {
        return Err(Error::invalid(format!(
            "raster {}×{} not divisible by {min_div} for {l} levels",
            img.width, img.height
        )));
    }
    let input = PlanarFeat::from_image(img);
    let mut steps = Vec::new();
    let pre_a = conv_fwd(&p.stem_a, &input)?;
    let act_a = act(&pre_a);
    steps.push((input.clone(), pre_a));
    let pre_b = conv_fwd(&p.stem_b, &act_a)?;
    let act_b = act(&pre_b);
    steps.push((act_a, pre_b));
    let mut feats = vec![act_b];
    for d in &p.downs {
        let cur = feats.last().expect("stem output present");
        let pre = conv_fwd(d, cur)?;
        let a = act(&pre);
        steps.push((cur.clone(), pre));
        feats.push(a);
    }
    feats.reverse(); // coarse→fine
    Ok((feats, EncoderCache { input, steps }))
}

/// Backward of [`encoder_forward`]; `grads` are per decoder level
/// (coarse→fine), matching the forward output.
pub fn encoder_backward<S: Scalar>(
    p: &EncoderParams<S>,
    cache: &EncoderCache<S>,
    grads: &[Mat<S>],
) -> Result<EncoderParams<S>> {
    let l = p.levels();
    if grads.len() != l {
        return Err(Error::shape("encoder backward expects one grad per level"));
    }
    let mut out = p.zeros_like();
    // Walk the down chain from the coarsest feature back to the stem. The
    // running gradient is with respect to the *activated* feature of the
    // current scale (fine-first index k = l−1−lvl).
    let mut d_act: Option<Mat<S>> = None;
    for lvl in 0..l - 1 {
        let mut g = grads[lvl].clone();
        if let Some(extra) = d_act {
            g.add_assign(&extra);
        }
        let down_idx = l - 2 - lvl;
        let (input, pre) = &cache.steps[2 + down_idx];
        let d_pre = gelu_bwd_feat(pre, &g);
        let (d_params, d_input) = conv_bwd(&p.downs[down_idx], input, &d_pre.data)?;
        accumulate_conv(&mut out.downs[down_idx], &d_params);
        d_act = Some(d_input.data);
    }
    let mut g_fine = grads[l - 1].clone();
    if let Some(extra) = d_act {
        g_fine.add_assign(&extra);
    }
    let (stem_b_in, pre_b) = &cache.steps[1];
    let d_pre_b = gelu_bwd_feat(pre_b, &g_fine);
    let (d_stem_b, d_act_a) = conv_bwd(&p.stem_b, stem_b_in, &d_pre_b.data)?;
    accumulate_conv(&mut out.stem_b, &d_stem_b);
    let (_, pre_a) = &cache.steps[0];
    let d_pre_a = gelu_bwd_feat(pre_a, &d_act_a.data);
    let (d_stem_a, _d_img) = conv_bwd(&p.stem_a, &cache.input, &d_pre_a.data)?;
    accumulate_conv(&mut out.stem_a, &d_stem_a);
    Ok(out)
}

fn gelu_bwd_feat<S: Scalar>(pre: &PlanarFeat<S>, grad: &Mat<S>) -> PlanarFeat<S> {
    let mut data = Mat::zeros(grad.rows(), grad.cols());
    for (o, (&x, &g)) in data
        .data_mut()
        .iter_mut()
        .zip(pre.data.data().iter().zip(grad.data().iter()))
    {
        *o = g * gelu_grad(x);
    }
    PlanarFeat {
        w: pre.w,
        h: pre.h,
        data,
    }
}

fn accumulate_conv<S: Scalar>(dst: &mut PlanarConv<S>, src: &PlanarConv<S>) {
    dst.weight.add_assign(&src.weight);
    for (a, b) in dst.bias.iter_mut().zip(src.bias.iter()) {
        *a += *b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(levels: &[usize]) -> EncoderParams<f64> {
        let mut p = EncoderParams::zeros(levels, 3);
        let mut k = 0usize;
        let mut fill = |c: &mut PlanarConv<f64>| {
            for v in c.weight.data_mut() {
                k = (k * 161 + 7) % 541;
                *v = (k as f64 / 541.0 - 0.5) * 0.4;
            }
            for v in &mut c.bias {
                k = (k * 161 + 7) % 541;
                *v = (k as f64 / 541.0 - 0.5) * 0.1;
            }
        };
        fill(&mut p.stem_a);
        fill(&mut p.stem_b);
        for d in &mut p.downs {
            fill(d);
        }
        p
    }

    #[test]
    fn pyramid_shapes() {
        let p = tiny_params(&[8, 6, 4, 4]);
        let img = ErpImage::constant(256, 128, 3, 0.3);
        let (feats, _) = encoder_forward(&p, &img).unwrap();
        assert_eq!(feats.len(), 4);
        // coarse→fine: strides 32, 16, 8, 4
        assert_eq!((feats[0].w, feats[0].h), (8, 4));
        assert_eq!((feats[1].w, feats[1].h), (16, 8));
        assert_eq!((feats[2].w, feats[2].h), (32, 16));
        assert_eq!((feats[3].w, feats[3].h), (64, 32));
        assert_eq!(feats[0].channels(), 8);
        assert_eq!(feats[3].channels(), 4);
    }

    #[test]
    fn rejects_indivisible_dims() {
        let p = tiny_params(&[4, 4]);
        let img = ErpImage::constant(30, 14, 3, 0.1);
        assert!(encoder_forward(&p, &img).is_err());
    }

    #[test]
    fn circular_padding_gives_shift_equivariance() {
        // Shifting the input by one output-stride step in x shifts features
        // identically (full wraparound, no seam effects).
        let p = tiny_params(&[4, 4]);
        let img = ErpImage::from_fn(32, 16, 3, |x, y, c| {
            ((x * 7 + y * 3 + c) % 13) as f32 * 0.07
        });
        let shift = 8usize; // one full stride-8 cell
        let shifted = ErpImage::from_fn(32, 16, 3, |x, y, c| {
            let xs = (x + shift) % 32;
            img.pixel(xs, y)[c]
        });
        let (fa, _) = encoder_forward(&p, &img).unwrap();
        let (fb, _) = encoder_forward(&p, &shifted).unwrap();
        // Coarse feature: 4×2 at stride 8 → shift of 1 column.
        let (w, h) = (fa[0].w, fa[0].h);
        for y in 0..h {
            for x in 0..w {
                let xs = (x + shift / 8) % w;
                let a = fa[0].data.row(y * w + xs);
                let b = fb[0].data.row(y * w + x);
                for (u, v) in a.iter().zip(b.iter()) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }
}
