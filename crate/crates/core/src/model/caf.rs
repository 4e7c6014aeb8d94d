//! Cross attention fusion blocks and their supporting pieces: window-mean
//! sub-sampling, the multi-head wrapper over the attention core, residual
//! spherical convolution units, additive base fusion, and nested upsampling.

use crate::error::{Error, Result};
use crate::healpix::{SphericalGrid, WindowPartition};
use crate::mat::{Mat, Scalar};
use crate::model::spe::{spe_bwd, spe_embed, SpeParams};
use crate::nn::{
    attention_core_bwd, attention_core_fwd, ffn_bwd, ffn_fwd, gelu_bwd, gelu_fwd, layer_norm_bwd,
    layer_norm_fwd, linear_bwd, linear_fwd, sphere_conv_bwd, sphere_conv_fwd, AttentionCache,
    ConvParams, FfnCache, FfnParams, LayerNormCache, LayerNormParams, LinearParams, Params,
};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Window-mean sub-sampling (GSA representatives)
// ---------------------------------------------------------------------------

/// Mean of each window's member rows: n_windows × channels.
pub fn window_mean_fwd<S: Scalar>(x: &Mat<S>, part: &WindowPartition) -> Result<Mat<S>> {
    if x.rows() != part.ids().len() {
        return Err(Error::shape("window partition does not cover tensor"));
    }
    let mut out = Mat::zeros(part.n_windows(), x.cols());
    for (r, &w) in part.ids().iter().enumerate() {
        let src = x.row(r);
        let dst = out.row_mut(w as usize);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    for (w, &count) in part.counts().iter().enumerate() {
        let inv = S::from_f64(1.0 / count as f64);
        for v in out.row_mut(w) {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Backward of [`window_mean_fwd`]: broadcast of each window gradient over
/// its members, divided by the member count.
pub fn window_mean_bwd<S: Scalar>(grad_rep: &Mat<S>, part: &WindowPartition) -> Mat<S> {
    let mut out = Mat::zeros(part.ids().len(), grad_rep.cols());
    for (r, &w) in part.ids().iter().enumerate() {
        let inv = S::from_f64(1.0 / part.counts()[w as usize] as f64);
        let src = grad_rep.row(w as usize);
        let dst = out.row_mut(r);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s * inv;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Multi-head attention over the core
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MhaCache<S> {
    heads: usize,
    per_head: Vec<(Mat<S>, Mat<S>, Mat<S>, AttentionCache<S>)>,
}

/// Splits channels into `heads` groups, runs the attention core per head
/// with scale 1/√(d/heads), and concatenates the outputs.
pub fn mha_fwd<S: Scalar>(
    q: &Mat<S>,
    k: &Mat<S>,
    v: &Mat<S>,
    heads: usize,
) -> Result<(Mat<S>, MhaCache<S>)> {
    let d = q.cols();
    if d != k.cols() || d != v.cols() {
        return Err(Error::shape("attention channel mismatch"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!(
            "head count {heads} must divide channels {d}"
        )));
    }
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = Mat::zeros(q.rows(), d);
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi);
        let kh = k.slice_cols(lo, hi);
        let vh = v.slice_cols(lo, hi);
        let (oh, cache) = attention_core_fwd(&qh, &kh, &vh, scale)?;
        out.add_into_cols(lo, &oh);
        per_head.push((qh, kh, vh, cache));
    }
    Ok((out, MhaCache { heads, per_head }))
}

/// Backward of [`mha_fwd`]: returns (∂q, ∂k, ∂v).
pub fn mha_bwd<S: Scalar>(
    cache: &MhaCache<S>,
    grad_out: &Mat<S>,
) -> Result<(Mat<S>, Mat<S>, Mat<S>)> {
    let d = grad_out.cols();
    let heads = cache.heads;
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let (nq, nk) = (
        cache.per_head[0].0.rows(),
        cache.per_head[0].1.rows(),
    );
    let mut d_q = Mat::zeros(nq, d);
    let mut d_k = Mat::zeros(nk, d);
    let mut d_v = Mat::zeros(nk, d);
    for (h, (qh, kh, vh, att)) in cache.per_head.iter().enumerate() {
        let lo = h * dh;
        let gh = grad_out.slice_cols(lo, lo + dh);
        let (dq, dk, dv) = attention_core_bwd(qh, kh, vh, scale, att, &gh)?;
        d_q.add_into_cols(lo, &dq);
        d_k.add_into_cols(lo, &dk);
        d_v.add_into_cols(lo, &dv);
    }
    Ok((d_q, d_k, d_v))
}

// ---------------------------------------------------------------------------
// Residual spherical convolution unit
// ---------------------------------------------------------------------------

/// x + conv2(gelu(conv1(gelu(x)))).
#[derive(Debug, Clone)]
pub struct ResConvUnit<S> {
    pub conv1: ConvParams<S>,
    pub conv2: ConvParams<S>,
}

impl<S: Scalar> ResConvUnit<S> {
    pub fn zeros(channels: usize) -> Self {
        ResConvUnit {
            conv1: ConvParams::zeros(channels, channels),
            conv2: ConvParams::zeros(channels, channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ResConvUnit {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
        }
    }
}

impl<S: Scalar> Params<S> for ResConvUnit<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct ResConvCache<S> {
    x: Mat<S>,
    a1: Mat<S>,
    c1: Mat<S>,
    a2: Mat<S>,
}

pub fn rescon_fwd<S: Scalar>(
    p: &ResConvUnit<S>,
    grid: &SphericalGrid,
    x: &Mat<S>,
) -> Result<(Mat<S>, ResConvCache<S>)> {
    let a1 = gelu_fwd(x);
    let c1 = sphere_conv_fwd(&p.conv1, grid, &a1)?;
    let a2 = gelu_fwd(&c1);
    let c2 = sphere_conv_fwd(&p.conv2, grid, &a2)?;
    let y = x.add(&c2);
    Ok((
        y,
        ResConvCache {
            x: x.clone(),
            a1,
            c1,
            a2,
        },
    ))
}

pub fn rescon_bwd<S: Scalar>(
    p: &ResConvUnit<S>,
    grid: &SphericalGrid,
    cache: &ResConvCache<S>,
    grad_out: &Mat<S>,
) -> Result<(ResConvUnit<S>, Mat<S>)> {
    let (d_conv2, d_a2) = sphere_conv_bwd(&p.conv2, grid, &cache.a2, grad_out)?;
    let d_c1 = gelu_bwd(&cache.c1, &d_a2);
    let (d_conv1, d_a1) = sphere_conv_bwd(&p.conv1, grid, &cache.a1, &d_c1)?;
    let mut d_x = gelu_bwd(&cache.x, &d_a1);
    d_x.add_assign(grad_out);
    Ok((
        ResConvUnit {
            conv1: d_conv1,
            conv2: d_conv2,
        },
        d_x,
    ))
}

// ---------------------------------------------------------------------------
// Base fusion: two residual conv units on F0 + F1
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BaseFuseParams<S> {
    pub unit1: ResConvUnit<S>,
    pub unit2: ResConvUnit<S>,
}

impl<S: Scalar> BaseFuseParams<S> {
    pub fn zeros(channels: usize) -> Self {
        BaseFuseParams {
            unit1: ResConvUnit::zeros(channels),
            unit2: ResConvUnit::zeros(channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        BaseFuseParams {
            unit1: self.unit1.zeros_like(),
            unit2: self.unit2.zeros_like(),
        }
    }
}

impl<S: Scalar> Params<S> for BaseFuseParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        self.unit1.visit(&format!("{prefix}.unit1"), f);
        self.unit2.visit(&format!("{prefix}.unit2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        self.unit1.visit_mut(&format!("{prefix}.unit1"), f);
        self.unit2.visit_mut(&format!("{prefix}.unit2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct BaseFuseCache<S> {
    u1: ResConvCache<S>,
    u2: ResConvCache<S>,
}

/// Two residual spherical-convolution units applied to F0 + F1.
pub fn base_fuse_fwd<S: Scalar>(
    p: &BaseFuseParams<S>,
    grid: &SphericalGrid,
    f0: &Mat<S>,
    f1: &Mat<S>,
) -> Result<(Mat<S>, BaseFuseCache<S>)> {
    if f0.rows() != f1.rows() || f0.cols() != f1.cols() {
        return Err(Error::shape("base fuse inputs differ in shape"));
    }
    let sum = f0.add(f1);
    let (y1, u1) = rescon_fwd(&p.unit1, grid, &sum)?;
    let (y2, u2) = rescon_fwd(&p.unit2, grid, &y1)?;
    Ok((y2, BaseFuseCache { u1, u2 }))
}

/// Backward of [`base_fuse_fwd`]: returns (∂params, ∂f0, ∂f1). The two input
/// gradients are equal; they are returned once to avoid a copy.
pub fn base_fuse_bwd<S: Scalar>(
    p: &BaseFuseParams<S>,
    grid: &SphericalGrid,
    cache: &BaseFuseCache<S>,
    grad_out: &Mat<S>,
) -> Result<(BaseFuseParams<S>, Mat<S>)> {
    let (d_u2, d_y1) = rescon_bwd(&p.unit2, grid, &cache.u2, grad_out)?;
    let (d_u1, d_sum) = rescon_bwd(&p.unit1, grid, &cache.u1, &d_y1)?;
    Ok((
        BaseFuseParams {
            unit1: d_u1,
            unit2: d_u2,
        },
        d_sum,
    ))
}

// ---------------------------------------------------------------------------
// Nested upsampling
// ---------------------------------------------------------------------------

/// Broadcasts each parent row to its 4 nested children on the next finer grid.
pub fn upsample_nested<S: Scalar>(x: &Mat<S>, fine_npix: usize) -> Result<Mat<S>> {
    if fine_npix != 4 * x.rows() {
        return Err(Error::invalid(format!(
            "upsample target {fine_npix} is not 4× source {}",
            x.rows()
        )));
    }
    let mut out = Mat::zeros(fine_npix, x.cols());
    for i in 0..fine_npix {
        out.row_mut(i).copy_from_slice(x.row(i >> 2));
    }
    Ok(out)
}

/// Backward of [`upsample_nested`]: sums the 4 child gradients per parent.
pub fn upsample_nested_bwd<S: Scalar>(grad_out: &Mat<S>) -> Mat<S> {
    let coarse = grad_out.rows() / 4;
    let mut out = Mat::zeros(coarse, grad_out.cols());
    for i in 0..grad_out.rows() {
        let dst = out.row_mut(i >> 2);
        for (d, &g) in dst.iter_mut().zip(grad_out.row(i)) {
            *d += g;
        }
    }
    out
}

/// Mean of the 4 nested children per parent (the exact inverse of
/// [`upsample_nested`] on broadcast fields).
pub fn downsample_mean<S: Scalar>(x: &Mat<S>) -> Result<Mat<S>> {
    if x.rows() % 4 != 0 {
        return Err(Error::invalid("downsample input rows not divisible by 4"));
    }
    let mut out = upsample_nested_bwd(x);
    out.scale(S::from_f64(0.25));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cross attention fusion block
// ---------------------------------------------------------------------------

/// All learnable parameters of one CAF block. Path 0 is the skip connection,
/// path 1 the decoder path; each has its own projections and positional
/// embedding, while the two layer norms (input and pre-FFN) are shared.
#[derive(Debug, Clone)]
pub struct CafParams<S> {
    pub spe: [SpeParams<S>; 2],
    pub q_proj: [LinearParams<S>; 2],
    pub k_proj: [LinearParams<S>; 2],
    pub v_proj: [LinearParams<S>; 2],
    pub ln_in: LayerNormParams<S>,
    pub ln_mid: LayerNormParams<S>,
    pub ffn: FfnParams<S>,
    pub rescon: ResConvUnit<S>,
    pub heads: usize,
}

impl<S: Scalar> CafParams<S> {
    pub fn zeros(channels: usize, ffn_expansion: usize, heads: usize, spe: [SpeParams<S>; 2]) -> Self {
        let lp = || LinearParams::zeros(channels, channels, true);
        CafParams {
            spe,
            q_proj: [lp(), lp()],
            k_proj: [lp(), lp()],
            v_proj: [lp(), lp()],
            ln_in: LayerNormParams::identity(channels),
            ln_mid: LayerNormParams::identity(channels),
            ffn: FfnParams::zeros(channels, ffn_expansion),
            rescon: ResConvUnit::zeros(channels),
            heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = CafParams {
            spe: [self.spe[0].zeros_like(), self.spe[1].zeros_like()],
            q_proj: [self.q_proj[0].zeros_like(), self.q_proj[1].zeros_like()],
            k_proj: [self.k_proj[0].zeros_like(), self.k_proj[1].zeros_like()],
            v_proj: [self.v_proj[0].zeros_like(), self.v_proj[1].zeros_like()],
            ln_in: self.ln_in.zeros_like(),
            ln_mid: self.ln_mid.zeros_like(),
            ffn: self.ffn.zeros_like(),
            rescon: self.rescon.zeros_like(),
            heads: self.heads,
        };
        // Gradient containers must not look like identity layer norms.
        out.ln_in = self.ln_in.zeros_like();
        out.ln_mid = self.ln_mid.zeros_like();
        out
    }

    /// Swaps the two paths' parameter sets (used by the symmetry checks).
    pub fn swapped_paths(&self) -> Self {
        let mut out = self.clone();
        out.spe.swap(0, 1);
        out.q_proj.swap(0, 1);
        out.k_proj.swap(0, 1);
        out.v_proj.swap(0, 1);
        out
    }
}

impl<S: Scalar> Params<S> for CafParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        for i in 0..2 {
            self.spe[i].visit(&format!("{prefix}.spe{i}"), f);
            self.q_proj[i].visit(&format!("{prefix}.q{i}"), f);
            self.k_proj[i].visit(&format!("{prefix}.k{i}"), f);
            self.v_proj[i].visit(&format!("{prefix}.v{i}"), f);
        }
        self.ln_in.visit(&format!("{prefix}.ln_in"), f);
        self.ln_mid.visit(&format!("{prefix}.ln_mid"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
        self.rescon.visit(&format!("{prefix}.rescon"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        for i in 0..2 {
            self.spe[i].visit_mut(&format!("{prefix}.spe{i}"), f);
            self.q_proj[i].visit_mut(&format!("{prefix}.q{i}"), f);
            self.k_proj[i].visit_mut(&format!("{prefix}.k{i}"), f);
            self.v_proj[i].visit_mut(&format!("{prefix}.v{i}"), f);
        }
        self.ln_in.visit_mut(&format!("{prefix}.ln_in"), f);
        self.ln_mid.visit_mut(&format!("{prefix}.ln_mid"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
        self.rescon.visit_mut(&format!("{prefix}.rescon"), f);
    }
}

/// Per-level geometric context shared by all blocks at that level.
#[derive(Debug, Clone)]
pub struct LevelCtx {
    pub grid: Arc<SphericalGrid>,
    pub partition: WindowPartition,
    /// Coordinate features for the SPE (npix × dim), f64 master copy.
    pub coords: Mat<f64>,
}

impl LevelCtx {
    /// Builds the context for one grid with the ancestry partition clamped to
    /// the grid's depth.
    pub fn new(
        grid: Arc<SphericalGrid>,
        gsa_offset: u32,
        coords: Mat<f64>,
    ) -> Result<Self> {
        let eff = gsa_offset.min(grid.nside().trailing_zeros());
        let partition = WindowPartition::ancestry(&grid, eff)?;
        Ok(LevelCtx {
            grid,
            partition,
            coords,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CafCache<S> {
    coords: Mat<S>,
    ln_in: [LayerNormCache<S>; 2],
    x: [Mat<S>; 2],
    xrep: [Mat<S>; 2],
    mha0: MhaCache<S>,
    mha1: MhaCache<S>,
    ln_mid: LayerNormCache<S>,
    m: Mat<S>,
    ffn: FfnCache<S>,
    rescon: ResConvCache<S>,
}

/// One cross attention fusion step.
///
/// X_i = LN(F_i + ζ_i); queries of each path attend over the other path's
/// window-mean key/value representatives (Att₀ = Attn(Q₁,K₀,V₀), Att₁ =
/// Attn(Q₀,K₁,V₁)); the four-term sum S = X₀+Att₀+X₁+Att₁ passes through a
/// residual FFN (S + FFN(LN(S))) and a final residual spherical convolution.
pub fn caf_forward<S: Scalar>(
    p: &CafParams<S>,
    ctx: &LevelCtx,
    f0: &Mat<S>,
    f1: &Mat<S>,
) -> Result<(Mat<S>, CafCache<S>)> {
    if f0.rows() != f1.rows() || f0.cols() != f1.cols() {
        return Err(Error::shape("fusion inputs differ in shape"));
    }
    if f0.rows() != ctx.grid.npix() {
        return Err(Error::shape("fusion input rows != level npix"));
    }
    let coords: Mat<S> = ctx.coords.convert();
    let zeta0 = spe_embed(&p.spe[0], &coords)?;
    let zeta1 = spe_embed(&p.spe[1], &coords)?;
    let x0_raw = f0.add(&zeta0);
    let x1_raw = f1.add(&zeta1);
    let (x0, ln0) = layer_norm_fwd(&p.ln_in, &x0_raw)?;
    let (x1, ln1) = layer_norm_fwd(&p.ln_in, &x1_raw)?;
    let q0 = linear_fwd(&p.q_proj[0], &x0)?;
    let q1 = linear_fwd(&p.q_proj[1], &x1)?;
    let x0_rep = window_mean_fwd(&x0, &ctx.partition)?;
    let x1_rep = window_mean_fwd(&x1, &ctx.partition)?;
    let k0 = linear_fwd(&p.k_proj[0], &x0_rep)?;
    let v0 = linear_fwd(&p.v_proj[0], &x0_rep)?;
    let k1 = linear_fwd(&p.k_proj[1], &x1_rep)?;
    let v1 = linear_fwd(&p.v_proj[1], &x1_rep)?;
    let (att0, mha0) = mha_fwd(&q1, &k0, &v0, p.heads)?;
    let (att1, mha1) = mha_fwd(&q0, &k1, &v1, p.heads)?;
    let mut s = x0.add(&att0);
    s.add_assign(&x1);
    s.add_assign(&att1);
    let (m, ln_mid) = layer_norm_fwd(&p.ln_mid, &s)?;
    let (ffn_out, ffn_cache) = ffn_fwd(&p.ffn, &m)?;
    let x_ca = s.add(&ffn_out);
    let (y, rescon) = rescon_fwd(&p.rescon, &ctx.grid, &x_ca)?;
    Ok((
        y,
        CafCache {
            coords,
            ln_in: [ln0, ln1],
            x: [x0, x1],
            xrep: [x0_rep, x1_rep],
            mha0,
            mha1,
            ln_mid,
            m,
            ffn: ffn_cache,
            rescon,
        },
    ))
}

/// Backward of [`caf_forward`]: returns (∂params, ∂f0, ∂f1).
pub fn caf_backward<S: Scalar>(
    p: &CafParams<S>,
    ctx: &LevelCtx,
    cache: &CafCache<S>,
    grad_out: &Mat<S>,
) -> Result<(CafParams<S>, Mat<S>, Mat<S>)> {
    let (d_rescon, d_xca) = rescon_bwd(&p.rescon, &ctx.grid, &cache.rescon, grad_out)?;
    // x_ca = s + ffn(ln_mid(s))
    let (d_ffn, d_m) = ffn_bwd(&p.ffn, &cache.m, &cache.ffn, &d_xca)?;
    let (d_ln_mid, d_s_from_ffn) = layer_norm_bwd(&p.ln_mid, &cache.ln_mid, &d_m)?;
    let mut d_s = d_xca;
    d_s.add_assign(&d_s_from_ffn);
    // s = x0 + att0 + x1 + att1: the same gradient flows into all four terms.
    let (d_q1, d_k0, d_v0) = mha_bwd(&cache.mha0, &d_s)?;
    let (d_q0, d_k1, d_v1) = mha_bwd(&cache.mha1, &d_s)?;
    let (d_kp0, d_x0rep_a) = linear_bwd(&p.k_proj[0], &cache.xrep[0], &d_k0)?;
    let (d_vp0, d_x0rep_b) = linear_bwd(&p.v_proj[0], &cache.xrep[0], &d_v0)?;
    let (d_kp1, d_x1rep_a) = linear_bwd(&p.k_proj[1], &cache.xrep[1], &d_k1)?;
    let (d_vp1, d_x1rep_b) = linear_bwd(&p.v_proj[1], &cache.xrep[1], &d_v1)?;
    let mut d_x0rep = d_x0rep_a;
    d_x0rep.add_assign(&d_x0rep_b);
    let mut d_x1rep = d_x1rep_a;
    d_x1rep.add_assign(&d_x1rep_b);
    let (d_qp0, d_x0_from_q) = linear_bwd(&p.q_proj[0], &cache.x[0], &d_q0)?;
    let (d_qp1, d_x1_from_q) = linear_bwd(&p.q_proj[1], &cache.x[1], &d_q1)?;
    // Total gradient on x_i: direct sum term + query path + pooled K/V path.
    let mut d_x0 = d_s.clone();
    d_x0.add_assign(&d_x0_from_q);
    d_x0.add_assign(&window_mean_bwd(&d_x0rep, &ctx.partition));
    let mut d_x1 = d_s;
    d_x1.add_assign(&d_x1_from_q);
    d_x1.add_assign(&window_mean_bwd(&d_x1rep, &ctx.partition));
    let (d_ln_in_0, d_x0_raw) = layer_norm_bwd(&p.ln_in, &cache.ln_in[0], &d_x0)?;
    let (d_ln_in_1, d_x1_raw) = layer_norm_bwd(&p.ln_in, &cache.ln_in[1], &d_x1)?;
    let mut d_ln_in = d_ln_in_0;
    for (a, b) in d_ln_in.gamma.iter_mut().zip(d_ln_in_1.gamma.iter()) {
        *a += *b;
    }
    for (a, b) in d_ln_in.beta.iter_mut().zip(d_ln_in_1.beta.iter()) {
        *a += *b;
    }
    let d_spe0 = spe_bwd(&p.spe[0], &cache.coords, &d_x0_raw);
    let d_spe1 = spe_bwd(&p.spe[1], &cache.coords, &d_x1_raw);
    Ok((
        CafParams {
            spe: [d_spe0, d_spe1],
            q_proj: [d_qp0, d_qp1],
            k_proj: [d_kp0, d_kp1],
            v_proj: [d_vp0, d_vp1],
            ln_in: d_ln_in,
            ln_mid: d_ln_mid,
            ffn: d_ffn,
            rescon: d_rescon,
            heads: p.heads,
        },
        d_x0_raw,
        d_x1_raw,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::healpix::SphericalGrid;
    use crate::model::spe::CoordSet;

    fn level_ctx(nside: u32, offset: u32) -> LevelCtx {
        let grid = Arc::new(SphericalGrid::build(nside).unwrap());
        let coords = CoordSet::Xyz.coords_mat(&grid);
        LevelCtx::new(grid, offset, coords).unwrap()
    }

    #[test]
    fn window_mean_constant_and_offset_zero() {
        let ctx = level_ctx(4, 2);
        let x = Mat::from_fn(192, 3, |_, c| c as f64 + 0.5);
        let rep = window_mean_fwd(&x, &ctx.partition).unwrap();
        assert_eq!(rep.rows(), 12);
        for w in 0..12 {
            for c in 0..3 {
                assert!((rep.get(w, c) - (c as f64 + 0.5)).abs() < 1e-12);
            }
        }
        let ctx0 = level_ctx(4, 0);
        let rep0 = window_mean_fwd(&x, &ctx0.partition).unwrap();
        assert_eq!(rep0.rows(), 192);
        assert_eq!(rep0, x);
    }

    #[test]
    fn upsample_broadcast_and_mean_inverse() {
        let x = Mat::from_fn(12, 2, |r, c| (r * 2 + c) as f64);
        let up = upsample_nested(&x, 48).unwrap();
        assert_eq!(up.rows(), 48);
        for i in 0..48 {
            assert_eq!(up.row(i), x.row(i >> 2));
        }
        let back = downsample_mean(&up).unwrap();
        assert_eq!(back, x);
        assert!(upsample_nested(&x, 36).is_err());
    }

    #[test]
    fn base_fuse_zero_params_is_identity_on_sum() {
        let ctx = level_ctx(2, 1);
        let p = BaseFuseParams::<f64>::zeros(4);
        let f0 = Mat::from_fn(48, 4, |r, c| (r + c) as f64 * 0.1);
        let f1 = Mat::from_fn(48, 4, |r, c| (r as f64 - c as f64) * 0.05);
        let (y, _) = base_fuse_fwd(&p, &ctx.grid, &f0, &f1).unwrap();
        let sum = f0.add(&f1);
        for (a, b) in y.data().iter().zip(sum.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // F1 = 0 reduces to the units applied to F0 alone.
        let zero = Mat::zeros(48, 4);
        let (y0, _) = base_fuse_fwd(&p, &ctx.grid, &f0, &zero).unwrap();
        for (a, b) in y0.data().iter().zip(f0.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn caf_path_swap_symmetry() {
        let ctx = level_ctx(2, 1);
        let mut p = CafParams::<f64>::zeros(
            8,
            2,
            2,
            [
                SpeParams::Linear {
                    coords: CoordSet::Xyz,
                    matrix: Mat::from_fn(8, 3, |r, c| ((r * 3 + c) % 7) as f64 * 0.1 - 0.3),
                },
                SpeParams::Linear {
                    coords: CoordSet::Xyz,
                    matrix: Mat::from_fn(8, 3, |r, c| ((r + c) % 5) as f64 * 0.2 - 0.4),
                },
            ],
        );
        // Give every parameter a distinct value.
        let n = crate::nn::flatten_params(&p).len();
        let vals: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) * 0.013).collect();
        crate::nn::assign_params(&mut p, &vals);
        let f0 = Mat::from_fn(48, 8, |r, c| ((r * 5 + c) % 11) as f64 * 0.07 - 0.3);
        let f1 = Mat::from_fn(48, 8, |r, c| ((r * 3 + 2 * c) % 13) as f64 * 0.05 - 0.2);
        let (y, _) = caf_forward(&p, &ctx, &f0, &f1).unwrap();
        let swapped = p.swapped_paths();
        let (y_sw, _) = caf_forward(&swapped, &ctx, &f1, &f0).unwrap();
        for (a, b) in y.data().iter().zip(y_sw.data().iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn caf_zeroed_attention_and_ffn_collapses_to_sum_of_normed_inputs() {
        let ctx = level_ctx(2, 1);
        let p = CafParams::<f64>::zeros(
            4,
            2,
            1,
            [
                SpeParams::Linear {
                    coords: CoordSet::Xyz,
                    matrix: Mat::zeros(4, 3),
                },
                SpeParams::Linear {
                    coords: CoordSet::Xyz,
                    matrix: Mat::zeros(4, 3),
                },
            ],
        );
        let f0 = Mat::from_fn(48, 4, |r, c| ((r + c) % 9) as f64 * 0.11 + 0.1);
        let f1 = Mat::from_fn(48, 4, |r, c| ((r * 2 + c) % 7) as f64 * 0.09 - 0.2);
        let (y, _) = caf_forward(&p, &ctx, &f0, &f1).unwrap();
        // With zero V projections the attention terms vanish, zero FFN adds
        // nothing, and the zero rescon passes through: y = LN(F0) + LN(F1).
        let ln = crate::nn::LayerNormParams::identity(4);
        let (x0, _) = crate::nn::layer_norm_fwd(&ln, &f0).unwrap();
        let (x1, _) = crate::nn::layer_norm_fwd(&ln, &f1).unwrap();
        let expect = x0.add(&x1);
        for (a, b) in y.data().iter().zip(expect.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
