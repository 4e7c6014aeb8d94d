//! Dense kernels on spherical feature maps, each with an analytic backward
//! pass.
//!
//! There is deliberately no autodiff graph here: the decoder has a small
//! fixed architecture, so every composite block hand-chains the backward
//! passes of these kernels. All ops are pure; identical inputs give
//! bitwise-identical outputs regardless of worker count.

use crate::error::{Error, Result};
use crate::healpix::{SphericalGrid, MISSING};
use crate::mat::{col_sums, matmul_nn, matmul_nt, matmul_tn, Mat, Scalar};
use std::sync::Arc;

/// Layer-norm variance regularizer.
pub const LN_EPS: f64 = 1e-5;

/// Feature map on a grid level: npix × channels.
#[derive(Debug, Clone)]
pub struct SphereTensor<S> {
    grid: Arc<SphericalGrid>,
    data: Mat<S>,
}

impl<S: Scalar> SphereTensor<S> {
    pub fn new(grid: Arc<SphericalGrid>, data: Mat<S>) -> Result<Self> {
        if data.rows() != grid.npix() {
            return Err(Error::shape(format!(
                "tensor rows {} != grid npix {}",
                data.rows(),
                grid.npix()
            )));
        }
        Ok(SphereTensor { grid, data })
    }

    pub fn zeros(grid: Arc<SphericalGrid>, channels: usize) -> Self {
        let data = Mat::zeros(grid.npix(), channels);
        SphereTensor { grid, data }
    }

    pub fn grid(&self) -> &Arc<SphericalGrid> {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Mat<S> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Mat<S> {
        &mut self.data
    }

    pub fn into_data(self) -> Mat<S> {
        self.data
    }
}

/// Affine map parameters; `weight` is out×in.
#[derive(Debug, Clone)]
pub struct LinearParams<S> {
    pub weight: Mat<S>,
    pub bias: Option<Vec<S>>,
}

impl<S: Scalar> LinearParams<S> {
    pub fn zeros(out: usize, inp: usize, bias: bool) -> Self {
        LinearParams {
            weight: Mat::zeros(out, inp),
            bias: if bias { Some(vec![S::zero(); out]) } else { None },
        }
    }

    pub fn zeros_like(&self) -> Self {
        LinearParams {
            weight: Mat::zeros(self.weight.rows(), self.weight.cols()),
            bias: self.bias.as_ref().map(|b| vec![S::zero(); b.len()]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Per-channel scale and shift of layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNormParams<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn identity(channels: usize) -> Self {
        LayerNormParams {
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNormParams {
            gamma: vec![S::zero(); self.gamma.len()],
            beta: vec![S::zero(); self.beta.len()],
        }
    }
}

/// Spherical convolution parameters: slot 0 is the center tap, slots 1..=8
/// follow the compass neighbor order (SW,W,NW,N,NE,E,SE,S). Each weight is
/// out×in; missing neighbor slots contribute zero.
#[derive(Debug, Clone)]
pub struct ConvParams<S> {
    pub weights: Vec<Mat<S>>,
    pub bias: Vec<S>,
}

impl<S: Scalar> ConvParams<S> {
    pub fn zeros(out: usize, inp: usize) -> Self {
        ConvParams {
            weights: (0..9).map(|_| Mat::zeros(out, inp)).collect(),
            bias: vec![S::zero(); out],
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvParams {
            weights: self
                .weights
                .iter()
                .map(|w| Mat::zeros(w.rows(), w.cols()))
                .collect(),
            bias: vec![S::zero(); self.bias.len()],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].cols()
    }
}

/// Feed-forward block parameters: expand, activate, contract.
#[derive(Debug, Clone)]
pub struct FfnParams<S> {
    pub lin1: LinearParams<S>,
    pub lin2: LinearParams<S>,
}

impl<S: Scalar> FfnParams<S> {
    pub fn zeros(channels: usize, expansion: usize) -> Self {
        FfnParams {
            lin1: LinearParams::zeros(channels * expansion, channels, true),
            lin2: LinearParams::zeros(channels, channels * expansion, true),
        }
    }

    pub fn zeros_like(&self) -> Self {
        FfnParams {
            lin1: self.lin1.zeros_like(),
            lin2: self.lin2.zeros_like(),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter tree visiting (checkpoints, optimizers, gradient flattening).
// ---------------------------------------------------------------------------

/// Uniform access to every tensor of a parameter tree, in a deterministic
/// order shared by `visit` and `visit_mut`.
pub trait Params<S: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S]));
}

impl<S: Scalar> Params<S> for LinearParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        f(
            &format!("{prefix}.weight"),
            &[self.weight.rows(), self.weight.cols()],
            self.weight.data(),
        );
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), &[b.len()], b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        let shape = [self.weight.rows(), self.weight.cols()];
        f(&format!("{prefix}.weight"), &shape, self.weight.data_mut());
        if let Some(b) = &mut self.bias {
            let n = b.len();
            f(&format!("{prefix}.bias"), &[n], b);
        }
    }
}

impl<S: Scalar> Params<S> for LayerNormParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        f(&format!("{prefix}.gamma"), &[self.gamma.len()], &self.gamma);
        f(&format!("{prefix}.beta"), &[self.beta.len()], &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        let n = self.gamma.len();
        f(&format!("{prefix}.gamma"), &[n], &mut self.gamma);
        let n = self.beta.len();
        f(&format!("{prefix}.beta"), &[n], &mut self.beta);
    }
}

impl<S: Scalar> Params<S> for ConvParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        for (s, w) in self.weights.iter().enumerate() {
            f(
                &format!("{prefix}.w{s}"),
                &[w.rows(), w.cols()],
                w.data(),
            );
        }
        f(&format!("{prefix}.bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        for (s, w) in self.weights.iter_mut().enumerate() {
            let shape = [w.rows(), w.cols()];
            f(&format!("{prefix}.w{s}"), &shape, w.data_mut());
        }
        let n = self.bias.len();
        f(&format!("{prefix}.bias"), &[n], &mut self.bias);
    }
}

impl<S: Scalar> Params<S> for FfnParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        self.lin1.visit(&format!("{prefix}.lin1"), f);
        self.lin2.visit(&format!("{prefix}.lin2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        self.lin1.visit_mut(&format!("{prefix}.lin1"), f);
        self.lin2.visit_mut(&format!("{prefix}.lin2"), f);
    }
}

/// Copies every parameter into one flat vector (visit order).
pub fn flatten_params<S: Scalar>(p: &impl Params<S>) -> Vec<S> {
    let mut out = Vec::new();
    p.visit("p", &mut |_, _, data| out.extend_from_slice(data));
    out
}

/// Writes a flat vector back into the parameter tree (visit order).
pub fn assign_params<S: Scalar>(p: &mut impl Params<S>, flat: &[S]) {
    let mut at = 0usize;
    p.visit_mut("p", &mut |_, _, data| {
        data.copy_from_slice(&flat[at..at + data.len()]);
        at += data.len();
    });
    assert_eq!(at, flat.len(), "flat parameter length mismatch");
}

/// Named shapes of the parameter tree, in visit order.
pub fn param_entries<S: Scalar>(p: &impl Params<S>) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    p.visit("p", &mut |name, shape, _| {
        out.push((name.to_string(), shape.to_vec()));
    });
    out
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y = x·Wᵀ + b, per row.
pub fn linear_fwd<S: Scalar>(p: &LinearParams<S>, x: &Mat<S>) -> Result<Mat<S>> {
    if x.cols() != p.in_dim() {
        return Err(Error::shape(format!(
            "linear expects {} input channels, got {}",
            p.in_dim(),
            x.cols()
        )));
    }
    let mut y = matmul_nt(x, &p.weight);
    if let Some(b) = &p.bias {
        for r in 0..y.rows() {
            for (v, &bv) in y.row_mut(r).iter_mut().zip(b.iter()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

/// Gradients of [`linear_fwd`]: returns (∂params, ∂x).
pub fn linear_bwd<S: Scalar>(
    p: &LinearParams<S>,
    x: &Mat<S>,
    grad_out: &Mat<S>,
) -> Result<(LinearParams<S>, Mat<S>)> {
    if grad_out.rows() != x.rows() || grad_out.cols() != p.out_dim() {
        return Err(Error::shape("linear backward shapes"));
    }
    let d_weight = matmul_tn(grad_out, x);
    let d_bias = p.bias.as_ref().map(|_| col_sums(grad_out));
    let d_x = matmul_nn(grad_out, &p.weight);
    Ok((
        LinearParams {
            weight: d_weight,
            bias: d_bias,
        },
        d_x,
    ))
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    /// Normalized activations (x − μ)/√(σ²+ε).
    pub xhat: Mat<S>,
    /// Per-row 1/√(σ²+ε).
    pub inv_std: Vec<S>,
}

/// Per-row normalization across channels: (x−μ)/√(σ²+ε)·γ + β.
pub fn layer_norm_fwd<S: Scalar>(
    p: &LayerNormParams<S>,
    x: &Mat<S>,
) -> Result<(Mat<S>, LayerNormCache<S>)> {
    let c = x.cols();
    if c < 2 {
        return Err(Error::invalid(format!(
            "layer norm needs at least 2 channels, got {c}"
        )));
    }
    if p.gamma.len() != c || p.beta.len() != c {
        return Err(Error::shape("layer norm parameter channels"));
    }
    let eps = S::from_f64(LN_EPS);
    let inv_c = S::from_f64(1.0 / c as f64);
    let mut xhat = Mat::zeros(x.rows(), c);
    let mut inv_std = vec![S::zero(); x.rows()];
    let mut y = Mat::zeros(x.rows(), c);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut mean = S::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_c;
        let mut var = S::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_c;
        let istd = S::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        let xh = xhat.row_mut(r);
        let yr = y.row_mut(r);
        for k in 0..c {
            let h = (row[k] - mean) * istd;
            xh[k] = h;
            yr[k] = h * p.gamma[k] + p.beta[k];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Gradients of [`layer_norm_fwd`]: returns (∂params, ∂x).
pub fn layer_norm_bwd<S: Scalar>(
    p: &LayerNormParams<S>,
    cache: &LayerNormCache<S>,
    grad_out: &Mat<S>,
) -> Result<(LayerNormParams<S>, Mat<S>)> {
    let c = grad_out.cols();
    if c != p.gamma.len() || grad_out.rows() != cache.xhat.rows() {
        return Err(Error::shape("layer norm backward shapes"));
    }
    let inv_c = S::from_f64(1.0 / c as f64);
    let mut d_gamma = vec![S::zero(); c];
    let mut d_beta = vec![S::zero(); c];
    let mut d_x = Mat::zeros(grad_out.rows(), c);
    for r in 0..grad_out.rows() {
        let g = grad_out.row(r);
        let xh = cache.xhat.row(r);
        let istd = cache.inv_std[r];
        let mut mean_gh = S::zero();
        let mut mean_gh_xh = S::zero();
        for k in 0..c {
            let gh = g[k] * p.gamma[k];
            mean_gh += gh;
            mean_gh_xh += gh * xh[k];
            d_gamma[k] += g[k] * xh[k];
            d_beta[k] += g[k];
        }
        mean_gh *= inv_c;
        mean_gh_xh *= inv_c;
        let dx = d_x.row_mut(r);
        for k in 0..c {
            let gh = g[k] * p.gamma[k];
            dx[k] = (gh - mean_gh - xh[k] * mean_gh_xh) * istd;
        }
    }
    Ok((
        LayerNormParams {
            gamma: d_gamma,
            beta: d_beta,
        },
        d_x,
    ))
}

// ---------------------------------------------------------------------------
// Softmax attention core
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(scores: &Mat<S>) -> Mat<S> {
    let mut out = scores.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = S::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct AttentionCache<S> {
    /// Softmax probabilities, queries × keys.
    pub probs: Mat<S>,
}

/// SoftMax(Q·Kᵀ·scale)·V.
pub fn attention_core_fwd<S: Scalar>(
    q: &Mat<S>,
    k: &Mat<S>,
    v: &Mat<S>,
    scale: S,
) -> Result<(Mat<S>, AttentionCache<S>)> {
    if q.cols() != k.cols() {
        return Err(Error::shape("query/key channels differ"));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("key/value row counts differ"));
    }
    let mut scores = matmul_nt(q, k);
    scores.scale(scale);
    let probs = softmax_rows(&scores);
    let out = matmul_nn(&probs, v);
    Ok((out, AttentionCache { probs }))
}

/// Gradients of [`attention_core_fwd`]: returns (∂q, ∂k, ∂v).
pub fn attention_core_bwd<S: Scalar>(
    q: &Mat<S>,
    k: &Mat<S>,
    v: &Mat<S>,
    scale: S,
    cache: &AttentionCache<S>,
    grad_out: &Mat<S>,
) -> Result<(Mat<S>, Mat<S>, Mat<S>)> {
    let p = &cache.probs;
    if grad_out.rows() != q.rows() || grad_out.cols() != v.cols() {
        return Err(Error::shape("attention backward shapes"));
    }
    let d_v = matmul_tn(p, grad_out);
    let d_p = matmul_nt(grad_out, v); // d_p[i][j] = Σ_c grad_out[i][c]·v[j][c]
    // dS = P ⊙ (dP − rowsum(dP ⊙ P))
    let mut d_s = Mat::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let dpr = d_p.row(r);
        let mut dot = S::zero();
        for (pv, dv) in pr.iter().zip(dpr.iter()) {
            dot += *pv * *dv;
        }
        let ds = d_s.row_mut(r);
        for kk in 0..pr.len() {
            ds[kk] = pr[kk] * (dpr[kk] - dot);
        }
    }
    let mut d_q = matmul_nn(&d_s, k);
    d_q.scale(scale);
    let mut d_k = matmul_tn(&d_s, q);
    d_k.scale(scale);
    Ok((d_q, d_k, d_v))
}

// ---------------------------------------------------------------------------
// GELU
// ---------------------------------------------------------------------------

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_B: f64 = 0.044_715;

#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let a = S::from_f64(GELU_A);
    let b = S::from_f64(GELU_B);
    let half = S::from_f64(0.5);
    let t = (a * (x + b * x * x * x)).tanh();
    half * x * (S::one() + t)
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let a = S::from_f64(GELU_A);
    let b = S::from_f64(GELU_B);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = (a * (x + b * x * x * x)).tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * a * (S::one() + three * b * x * x)
}

pub fn gelu_fwd<S: Scalar>(x: &Mat<S>) -> Mat<S> {
    x.map(gelu)
}

pub fn gelu_bwd<S: Scalar>(x: &Mat<S>, grad_out: &Mat<S>) -> Mat<S> {
    assert_eq!(x.rows(), grad_out.rows());
    assert_eq!(x.cols(), grad_out.cols());
    let mut out = Mat::zeros(x.rows(), x.cols());
    for (o, (&xv, &gv)) in out
        .data_mut()
        .iter_mut()
        .zip(x.data().iter().zip(grad_out.data().iter()))
    {
        *o = gv * gelu_grad(xv);
    }
    out
}

// ---------------------------------------------------------------------------
// Spherical convolution
// ---------------------------------------------------------------------------

fn gather_slot<S: Scalar>(grid: &SphericalGrid, x: &Mat<S>, slot: usize) -> Mat<S> {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let nb = grid.neighbor_table()[i][slot];
        if nb != MISSING {
            out.row_mut(i).copy_from_slice(x.row(nb as usize));
        }
    }
    out
}

/// y[i] = b + W₀·x[i] + Σ_slot W_slot·x[neighbor(i,slot)]; missing slots
/// contribute zero.
pub fn sphere_conv_fwd<S: Scalar>(
    p: &ConvParams<S>,
    grid: &SphericalGrid,
    x: &Mat<S>,
) -> Result<Mat<S>> {
    if x.rows() != grid.npix() {
        return Err(Error::shape("conv input rows != npix"));
    }
    if x.cols() != p.in_dim() {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {}",
            p.in_dim(),
            x.cols()
        )));
    }
    let mut y = matmul_nt(x, &p.weights[0]);
    for slot in 0..8 {
        let xs = gather_slot(grid, x, slot);
        y.add_assign(&matmul_nt(&xs, &p.weights[slot + 1]));
    }
    for r in 0..y.rows() {
        for (v, &b) in y.row_mut(r).iter_mut().zip(p.bias.iter()) {
            *v += b;
        }
    }
    Ok(y)
}

/// Gradients of [`sphere_conv_fwd`]: returns (∂params, ∂x).
pub fn sphere_conv_bwd<S: Scalar>(
    p: &ConvParams<S>,
    grid: &SphericalGrid,
    x: &Mat<S>,
    grad_out: &Mat<S>,
) -> Result<(ConvParams<S>, Mat<S>)> {
    if grad_out.rows() != x.rows() || grad_out.cols() != p.out_dim() {
        return Err(Error::shape("conv backward shapes"));
    }
    let mut d_weights = Vec::with_capacity(9);
    d_weights.push(matmul_tn(grad_out, x));
    for slot in 0..8 {
        let xs = gather_slot(grid, x, slot);
        d_weights.push(matmul_tn(grad_out, &xs));
    }
    let d_bias = col_sums(grad_out);
    // Center contribution, then scatter of neighbor slots via the incoming
    // index (deterministic per destination row).
    let mut d_x = matmul_nn(grad_out, &p.weights[0]);
    for j in 0..x.rows() {
        for &(i, s) in grid.incoming(j) {
            let w = &p.weights[s as usize + 1];
            let g = grad_out.row(i as usize);
            let dst = d_x.row_mut(j);
            for (o, &gv) in g.iter().enumerate() {
                let wrow = w.row(o);
                for (d, &wv) in dst.iter_mut().zip(wrow) {
                    *d += gv * wv;
                }
            }
        }
    }
    Ok((
        ConvParams {
            weights: d_weights,
            bias: d_bias,
        },
        d_x,
    ))
}

// ---------------------------------------------------------------------------
// Feed-forward block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FfnCache<S> {
    pub pre_act: Mat<S>,
    pub act: Mat<S>,
}

/// linear → GELU → linear.
pub fn ffn_fwd<S: Scalar>(p: &FfnParams<S>, x: &Mat<S>) -> Result<(Mat<S>, FfnCache<S>)> {
    let pre_act = linear_fwd(&p.lin1, x)?;
    let act = gelu_fwd(&pre_act);
    let y = linear_fwd(&p.lin2, &act)?;
    Ok((y, FfnCache { pre_act, act }))
}

/// Gradients of [`ffn_fwd`]: returns (∂params, ∂x).
pub fn ffn_bwd<S: Scalar>(
    p: &FfnParams<S>,
    x: &Mat<S>,
    cache: &FfnCache<S>,
    grad_out: &Mat<S>,
) -> Result<(FfnParams<S>, Mat<S>)> {
    let (d_lin2, d_act) = linear_bwd(&p.lin2, &cache.act, grad_out)?;
    let d_pre = gelu_bwd(&cache.pre_act, &d_act);
    let (d_lin1, d_x) = linear_bwd(&p.lin1, x, &d_pre)?;
    Ok((
        FfnParams {
            lin1: d_lin1,
            lin2: d_lin2,
        },
        d_x,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_bias() {
        let p = LinearParams {
            weight: Mat::<f64>::eye(3),
            bias: None,
        };
        let x = Mat::from_fn(5, 3, |r, c| (r + c) as f64);
        let y = linear_fwd(&p, &x).unwrap();
        assert_eq!(y, x);

        let p = LinearParams {
            weight: Mat::<f64>::zeros(2, 3),
            bias: Some(vec![1.5, -2.0]),
        };
        let y = linear_fwd(&p, &x).unwrap();
        for r in 0..5 {
            assert_eq!(y.row(r), &[1.5, -2.0]);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let p = LayerNormParams::<f64>::identity(4);
        let x = Mat::from_fn(3, 4, |r, _| r as f64 + 1.0);
        let (y, _) = layer_norm_fwd(&p, &x).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let p = LayerNormParams::<f64>::identity(8);
        let x = Mat::from_fn(4, 8, |r, c| ((r * 13 + c * 7) % 11) as f64 - 3.0);
        let (y, _) = layer_norm_fwd(&p, &x).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // ε-induced slack
        }
    }

    #[test]
    fn layer_norm_rejects_single_channel() {
        let p = LayerNormParams::<f64>::identity(1);
        let x = Mat::zeros(3, 1);
        assert!(layer_norm_fwd(&p, &x).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = Mat::from_fn(6, 5, |r, c| ((r * 5 + c) % 7) as f64 * 1.7 - 3.0);
        let p = softmax_rows(&s);
        for r in 0..6 {
            let sum: f64 = p.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_uniform_and_saturated() {
        // All-zero scores → unweighted mean of V rows.
        let q = Mat::<f64>::zeros(2, 4);
        let k = Mat::<f64>::zeros(3, 4);
        let v = Mat::from_fn(3, 2, |r, c| (r * 2 + c) as f64);
        let (out, _) = attention_core_fwd(&q, &k, &v, 0.5).unwrap();
        for r in 0..2 {
            assert!((out.get(r, 0) - 2.0).abs() < 1e-12);
            assert!((out.get(r, 1) - 3.0).abs() < 1e-12);
        }
        // A query aligned with one key and orthogonal to the rest saturates
        // onto that key's value row at large scale.
        let q = Mat::<f64>::from_vec(1, 3, vec![1.0, 0.0, 0.0]);
        let k = Mat::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let v = Mat::from_vec(3, 2, vec![5.0, -1.0, 0.0, 0.0, 7.0, 7.0]);
        let (out, _) = attention_core_fwd(&q, &k, &v, 50.0).unwrap();
        assert!((out.get(0, 0) - 5.0).abs() < 1e-9);
        assert!((out.get(0, 1) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_zero_is_exact() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(gelu(0.0f32), 0.0);
    }

    #[test]
    fn conv_identity_and_degree_counting() {
        let grid = SphericalGrid::build(2).unwrap();
        let x = Mat::from_fn(grid.npix(), 3, |r, c| ((r * 3 + c) % 5) as f64);

        let mut p = ConvParams::<f64>::zeros(3, 3);
        p.weights[0] = Mat::eye(3);
        let y = sphere_conv_fwd(&p, &grid, &x).unwrap();
        assert_eq!(y, x);

        // Constant field with all nine identity weights: y = (1+deg)·x.
        let mut p = ConvParams::<f64>::zeros(3, 3);
        for w in &mut p.weights {
            *w = Mat::eye(3);
        }
        let ones = Mat::from_fn(grid.npix(), 3, |_, _| 1.0);
        let y = sphere_conv_fwd(&p, &grid, &ones).unwrap();
        for i in 0..grid.npix() {
            let deg = grid.neighbors8(i).unwrap().iter().filter(|&&q| q != MISSING).count();
            assert!((y.get(i, 0) - (1.0 + deg as f64)).abs() < 1e-12);
            assert!(deg == 7 || deg == 8);
        }
    }

    #[test]
    fn ffn_zero_params_zero_output() {
        let p = FfnParams::<f64>::zeros(4, 2);
        let x = Mat::from_fn(6, 4, |r, c| (r + c) as f64);
        let (y, _) = ffn_fwd(&p, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_assign_roundtrip() {
        let mut p = FfnParams::<f64>::zeros(3, 2);
        let flat = flatten_params(&p);
        let vals: Vec<f64> = (0..flat.len()).map(|i| i as f64 * 0.5).collect();
        assign_params(&mut p, &vals);
        assert_eq!(flatten_params(&p), vals);
        let names = param_entries(&p);
        assert_eq!(names.len(), 4);
        assert!(names[0].0.contains("lin1.weight"));
    }
}
