//! The composed depth network: reference encoder on the ERP raster, per-level
//! resampling onto the sphere, coarse→fine decoder of fusion blocks with
//! nested upsampling, and the exponential depth head.

use crate::error::{Error, Result};
use crate::healpix::SphericalGrid;
use crate::mat::{Mat, Scalar};
use crate::metrics::{loss_masked, DepthFrame, LossKind};
use crate::model::caf::{
    base_fuse_bwd, base_fuse_fwd, caf_backward, caf_forward, upsample_nested, upsample_nested_bwd,
    BaseFuseCache, BaseFuseParams, CafCache, CafParams, LevelCtx,
};
use crate::model::encoder::{
    encoder_backward, encoder_forward, EncoderCache, EncoderParams, PlanarConv,
};
use crate::model::spe::{PositionalKind, SpeParams};
use crate::model::ModelConfig;
use crate::model::Variant;
use crate::nn::{
    linear_bwd, linear_fwd, sphere_conv_bwd, sphere_conv_fwd, ConvParams, LinearParams, Params,
    SphereTensor,
};
use crate::raster::ErpImage;
use crate::transfer::{cached_table, Direction, ReverseTaps, TransferTable};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;

/// Log-depth is clamped to ±ln(1000) before exponentiation; the head then
/// always emits depths in (0.001, 1000) meters.
pub const LOG_DEPTH_CLAMP: f64 = 6.907_755_278_982_137;

/// Depth range stamped on predicted frames (wider than the head can emit, so
/// prediction pixels are never masked out by their own frame).
const PRED_MIN: f32 = 1e-4;
const PRED_MAX: f32 = 1e4;

/// One fusion stage of the decoder.
#[derive(Debug, Clone)]
pub enum FuseBlock<S> {
    Base(BaseFuseParams<S>),
    Caf(CafParams<S>),
}

impl<S: Scalar> FuseBlock<S> {
    fn zeros_like(&self) -> Self {
        match self {
            FuseBlock::Base(p) => FuseBlock::Base(p.zeros_like()),
            FuseBlock::Caf(p) => FuseBlock::Caf(p.zeros_like()),
        }
    }
}

impl<S: Scalar> Params<S> for FuseBlock<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        match self {
            FuseBlock::Base(p) => p.visit(&format!("{prefix}.base"), f),
            FuseBlock::Caf(p) => p.visit(&format!("{prefix}.caf"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        match self {
            FuseBlock::Base(p) => p.visit_mut(&format!("{prefix}.base"), f),
            FuseBlock::Caf(p) => p.visit_mut(&format!("{prefix}.caf"), f),
        }
    }
}

/// Every learnable parameter of the network.
#[derive(Debug, Clone)]
pub struct ModelParams<S> {
    pub encoder: EncoderParams<S>,
    /// Per level: encoder channels → decoder channels, applied on the sphere.
    pub skip_proj: Vec<LinearParams<S>>,
    /// Two residual conv units on the coarsest skip feature.
    pub root: BaseFuseParams<S>,
    /// Fusion block per finer level (levels 1..L).
    pub blocks: Vec<FuseBlock<S>>,
    /// Channel transition conv after each upsample (levels 1..L).
    pub transitions: Vec<ConvParams<S>>,
    /// Depth head: finest channels → 1 log-depth channel.
    pub head: ConvParams<S>,
}

/// Gradients share the parameter layout.
pub type ModelGrads<S> = ModelParams<S>;

impl<S: Scalar> Params<S> for ModelParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        self.encoder.visit(&format!("{prefix}.encoder"), f);
        for (i, p) in self.skip_proj.iter().enumerate() {
            p.visit(&format!("{prefix}.skip_proj{i}"), f);
        }
        self.root.visit(&format!("{prefix}.root"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        for (i, t) in self.transitions.iter().enumerate() {
            t.visit(&format!("{prefix}.transition{i}"), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        self.encoder.visit_mut(&format!("{prefix}.encoder"), f);
        for (i, p) in self.skip_proj.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.skip_proj{i}"), f);
        }
        self.root.visit_mut(&format!("{prefix}.root"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), f);
        }
        for (i, t) in self.transitions.iter_mut().enumerate() {
            t.visit_mut(&format!("{prefix}.transition{i}"), f);
        }
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

fn fill_uniform<S: Scalar>(data: &mut [S], bound: f64, rng: &mut ChaCha8Rng) {
    for v in data {
        *v = S::from_f64(rng.gen_range(-bound..bound));
    }
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_linear<S: Scalar>(p: &mut LinearParams<S>, rng: &mut ChaCha8Rng) {
    let b = xavier(p.in_dim(), p.out_dim());
    fill_uniform(p.weight.data_mut(), b, rng);
}

fn init_conv<S: Scalar>(p: &mut ConvParams<S>, rng: &mut ChaCha8Rng, scale: f64) {
    let b = xavier(9 * p.in_dim(), p.out_dim()) * scale;
    for w in &mut p.weights {
        fill_uniform(w.data_mut(), b, rng);
    }
}

fn init_planar<S: Scalar>(p: &mut PlanarConv<S>, rng: &mut ChaCha8Rng) {
    let b = xavier(p.weight.cols(), p.out_dim());
    fill_uniform(p.weight.data_mut(), b, rng);
}

fn make_spe<S: Scalar>(config: &ModelConfig, channels: usize, npix: usize, rng: &mut ChaCha8Rng) -> SpeParams<S> {
    match config.positional {
        PositionalKind::Spe => {
            let dim = config.spe_coords.dim();
            let mut m = Mat::zeros(channels, dim);
            fill_uniform(m.data_mut(), 0.1, rng);
            SpeParams::Linear {
                coords: config.spe_coords,
                matrix: m,
            }
        }
        PositionalKind::Learnable => {
            let mut t = Mat::zeros(npix, channels);
            fill_uniform(t.data_mut(), 0.02, rng);
            SpeParams::Learnable { table: t }
        }
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Deterministic random initialization. Residual-unit second convs start
    /// at zero (pass-through residuals); the head starts near zero so the
    /// initial prediction sits near 1 m everywhere.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = config.levels();
        let mut encoder = EncoderParams::zeros(&config.encoder_channels, 3);
        init_planar(&mut encoder.stem_a, &mut rng);
        init_planar(&mut encoder.stem_b, &mut rng);
        for d in &mut encoder.downs {
            init_planar(d, &mut rng);
        }
        let mut skip_proj = Vec::new();
        for lvl in 0..l {
            let mut p = LinearParams::zeros(config.channels[lvl], config.encoder_channels[lvl], true);
            init_linear(&mut p, &mut rng);
            skip_proj.push(p);
        }
        let mut root = BaseFuseParams::zeros(config.channels[0]);
        init_conv(&mut root.unit1.conv1, &mut rng, 1.0);
        init_conv(&mut root.unit2.conv1, &mut rng, 1.0);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for lvl in 1..l {
            let d = config.channels[lvl];
            let npix = 12 * (config.level_nsides[lvl] as usize).pow(2);
            let mut t = ConvParams::zeros(d, config.channels[lvl - 1]);
            init_conv(&mut t, &mut rng, 1.0);
            transitions.push(t);
            match config.variant {
                Variant::Base => {
                    let mut b = BaseFuseParams::zeros(d);
                    init_conv(&mut b.unit1.conv1, &mut rng, 1.0);
                    init_conv(&mut b.unit2.conv1, &mut rng, 1.0);
                    blocks.push(FuseBlock::Base(b));
                }
                Variant::Fusion => {
                    let spe = [
                        make_spe(config, d, npix, &mut rng),
                        make_spe(config, d, npix, &mut rng),
                    ];
                    let mut c = CafParams::zeros(d, config.ffn_expansion, config.heads, spe);
                    for p in c.q_proj.iter_mut().chain(c.k_proj.iter_mut()).chain(c.v_proj.iter_mut()) {
                        init_linear(p, &mut rng);
                    }
                    init_linear(&mut c.ffn.lin1, &mut rng);
                    init_linear(&mut c.ffn.lin2, &mut rng);
                    init_conv(&mut c.rescon.conv1, &mut rng, 1.0);
                    blocks.push(FuseBlock::Caf(c));
                }
            }
        }
        let mut head = ConvParams::zeros(1, config.channels[l - 1]);
        init_conv(&mut head, &mut rng, 0.05);
        Ok(ModelParams {
            encoder,
            skip_proj,
            root,
            blocks,
            transitions,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            skip_proj: self.skip_proj.iter().map(|p| p.zeros_like()).collect(),
            root: self.root.zeros_like(),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            transitions: self.transitions.iter().map(|t| t.zeros_like()).collect(),
            head: self.head.zeros_like(),
        }
    }
}

/// Geometry, window partitions and transfer tables prepared for one raster
/// size. Prepare once, reuse across forward passes.
pub struct ModelContext {
    pub config: ModelConfig,
    pub width: usize,
    pub height: usize,
    pub levels: Vec<LevelCtx>,
    /// Plane→sphere table per level at that level's encoder raster.
    pub fwd_tables: Vec<TransferTable>,
    pub rev_tables: Vec<ReverseTaps>,
    /// Full-resolution plane→sphere table at the finest level, for mapping
    /// ground-truth depth onto the sphere.
    pub gt_table: TransferTable,
    /// Finest sphere→plane table at full resolution, for emitting ERP depth.
    pub inv_table: TransferTable,
}

impl ModelContext {
    pub fn prepare(
        config: &ModelConfig,
        width: usize,
        height: usize,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        if width != 2 * height && !config.allow_nonstandard_aspect {
            return Err(Error::invalid(format!(
                "input raster {width}×{height} is not 2:1 ERP"
            )));
        }
        let l = config.levels();
        let min_div = 4 << (l - 1);
        if width % min_div != 0 || height % min_div != 0 {
            return Err(Error::invalid(format!(
                "raster {width}×{height} not divisible by {min_div}"
            )));
        }
        let mut grids: Vec<Arc<SphericalGrid>> = Vec::new();
        for &n in &config.level_nsides {
            let existing = grids.iter().find(|g| g.nside() == n).cloned();
            let grid = match existing {
                Some(g) => g,
                None => Arc::new(SphericalGrid::build(n)?),
            };
            grids.push(grid);
        }
        let mut levels = Vec::new();
        let mut fwd_tables = Vec::new();
        let mut rev_tables = Vec::new();
        for (lvl, grid) in grids.iter().enumerate() {
            let coords = config.spe_coords.coords_mat(grid);
            levels.push(LevelCtx::new(grid.clone(), config.gsa_offset, coords)?);
            let stride = config.stride_for_level(lvl);
            let table = cached_table(
                grid,
                Direction::PlaneToSphere,
                width / stride,
                height / stride,
                cache_dir,
            )?;
            rev_tables.push(table.reverse());
            fwd_tables.push(table);
        }
        let finest = grids.last().expect("at least one level");
        let gt_table = cached_table(finest, Direction::PlaneToSphere, width, height, cache_dir)?;
        let inv_table = cached_table(finest, Direction::SphereToPlane, width, height, cache_dir)?;
        Ok(ModelContext {
            config: config.clone(),
            width,
            height,
            levels,
            fwd_tables,
            rev_tables,
            gt_table,
            inv_table,
        })
    }

    pub fn finest_grid(&self) -> &Arc<SphericalGrid> {
        &self.levels.last().expect("levels nonempty").grid
    }
}

enum BlockCache<S> {
    Base(BaseFuseCache<S>),
    Caf(CafCache<S>),
}

struct LevelForward<S> {
    trans_in: Mat<S>,
    block: BlockCache<S>,
}

/// Every intermediate needed by the backward pass.
pub struct ModelCache<S> {
    enc_cache: EncoderCache<S>,
    resampled: Vec<Mat<S>>,
    root: BaseFuseCache<S>,
    stages: Vec<LevelForward<S>>,
    head_in: Mat<S>,
    log_depth_raw: Mat<S>,
    /// Final spherical depth in meters (finest level, one channel).
    pub depth_sphere: Vec<S>,
}

fn clamp_exp<S: Scalar>(raw: S) -> S {
    let c = S::from_f64(LOG_DEPTH_CLAMP);
    let x = if raw > c {
        c
    } else if raw < -c {
        -c
    } else {
        raw
    };
    x.exp()
}

/// Full forward pass: returns the cache and the spherical depth (meters) at
/// the finest level.
pub fn model_forward<S: Scalar>(
    params: &ModelParams<S>,
    ctx: &ModelContext,
    img: &ErpImage,
) -> Result<ModelCache<S>> {
    if img.channels != 3 {
        return Err(Error::invalid("model expects a 3-channel color image"));
    }
    if img.width != ctx.width || img.height != ctx.height {
        return Err(Error::Precondition(format!(
            "context prepared for {}×{}, image is {}×{}",
            ctx.width, ctx.height, img.width, img.height
        )));
    }
    img.require_standard_aspect(ctx.config.allow_nonstandard_aspect)?;
    let l = ctx.config.levels();
    let (enc_feats, enc_cache) = encoder_forward(&params.encoder, img)?;
    let mut resampled = Vec::with_capacity(l);
    let mut skips = Vec::with_capacity(l);
    for lvl in 0..l {
        let r = ctx.fwd_tables[lvl].apply(&enc_feats[lvl].data)?;
        skips.push(linear_fwd(&params.skip_proj[lvl], &r)?);
        resampled.push(r);
    }
    let zero0 = Mat::zeros(skips[0].rows(), skips[0].cols());
    let (mut x, root) = base_fuse_fwd(&params.root, &ctx.levels[0].grid, &skips[0], &zero0)?;
    let mut stages = Vec::with_capacity(l - 1);
    for lvl in 1..l {
        let same_nside = ctx.config.level_nsides[lvl] == ctx.config.level_nsides[lvl - 1];
        let trans_in = if same_nside {
            x.clone()
        } else {
            upsample_nested(&x, ctx.levels[lvl].grid.npix())?
        };
        let trans_out = sphere_conv_fwd(&params.transitions[lvl - 1], &ctx.levels[lvl].grid, &trans_in)?;
        let (y, block) = match &params.blocks[lvl - 1] {
            FuseBlock::Base(p) => {
                let (y, c) = base_fuse_fwd(p, &ctx.levels[lvl].grid, &skips[lvl], &trans_out)?;
                (y, BlockCache::Base(c))
            }
            FuseBlock::Caf(p) => {
                let (y, c) = caf_forward(p, &ctx.levels[lvl], &skips[lvl], &trans_out)?;
                (y, BlockCache::Caf(c))
            }
        };
        stages.push(LevelForward { trans_in, block });
        x = y;
    }
    let head_in = x;
    let log_depth_raw = sphere_conv_fwd(&params.head, ctx.finest_grid(), &head_in)?;
    let depth_sphere: Vec<S> = log_depth_raw.data().iter().map(|&v| clamp_exp(v)).collect();
    Ok(ModelCache {
        enc_cache,
        resampled,
        root,
        stages,
        head_in,
        log_depth_raw,
        depth_sphere,
    })
}

/// Backward pass from a gradient with respect to the spherical depth.
pub fn model_backward<S: Scalar>(
    params: &ModelParams<S>,
    ctx: &ModelContext,
    cache: &ModelCache<S>,
    d_depth: &[S],
) -> Result<ModelGrads<S>> {
    let l = ctx.config.levels();
    if d_depth.len() != ctx.finest_grid().npix() {
        return Err(Error::shape("depth gradient length != finest npix"));
    }
    let mut grads = params.zeros_like();
    let clamp = S::from_f64(LOG_DEPTH_CLAMP);
    let mut d_log = Mat::zeros(d_depth.len(), 1);
    for i in 0..d_depth.len() {
        let raw = cache.log_depth_raw.get(i, 0);
        let g = if raw > clamp || raw < -clamp {
            S::zero()
        } else {
            d_depth[i] * cache.depth_sphere[i]
        };
        d_log.set(i, 0, g);
    }
    let (d_head, mut d_x) = sphere_conv_bwd(&params.head, ctx.finest_grid(), &cache.head_in, &d_log)?;
    grads.head = d_head;
    let mut d_skips: Vec<Option<Mat<S>>> = vec![None; l];
    for lvl in (1..l).rev() {
        let stage = &cache.stages[lvl - 1];
        let (d_skip, d_trans_out) = match (&params.blocks[lvl - 1], &stage.block) {
            (FuseBlock::Base(p), BlockCache::Base(c)) => {
                let (d_p, d_sum) = base_fuse_bwd(p, &ctx.levels[lvl].grid, c, &d_x)?;
                grads.blocks[lvl - 1] = FuseBlock::Base(d_p);
                (d_sum.clone(), d_sum)
            }
            (FuseBlock::Caf(p), BlockCache::Caf(c)) => {
                let (d_p, d_f0, d_f1) = caf_backward(p, &ctx.levels[lvl], c, &d_x)?;
                grads.blocks[lvl - 1] = FuseBlock::Caf(d_p);
                (d_f0, d_f1)
            }
            _ => return Err(Error::Precondition("block/cache variant mismatch".into())),
        };
        d_skips[lvl] = Some(d_skip);
        let (d_trans, d_up) = sphere_conv_bwd(
            &params.transitions[lvl - 1],
            &ctx.levels[lvl].grid,
            &stage.trans_in,
            &d_trans_out,
        )?;
        grads.transitions[lvl - 1] = d_trans;
        let same_nside = ctx.config.level_nsides[lvl] == ctx.config.level_nsides[lvl - 1];
        d_x = if same_nside { d_up } else { upsample_nested_bwd(&d_up) };
    }
    let (d_root, d_sum0) = base_fuse_bwd(&params.root, &ctx.levels[0].grid, &cache.root, &d_x)?;
    grads.root = d_root;
    d_skips[0] = Some(d_sum0);
    let mut d_enc: Vec<Mat<S>> = Vec::with_capacity(l);
    for lvl in 0..l {
        let d_skip = d_skips[lvl].take().expect("skip gradient missing");
        let (d_proj, d_resampled) = linear_bwd(&params.skip_proj[lvl], &cache.resampled[lvl], &d_skip)?;
        grads.skip_proj[lvl] = d_proj;
        d_enc.push(ctx.fwd_tables[lvl].apply_transpose(&ctx.rev_tables[lvl], &d_resampled)?);
    }
    grads.encoder = encoder_backward(&params.encoder, &cache.enc_cache, &d_enc)?;
    Ok(grads)
}

/// Runs the model and resamples the spherical prediction to the ERP raster.
pub fn model_predict<S: Scalar>(
    params: &ModelParams<S>,
    ctx: &ModelContext,
    img: &ErpImage,
) -> Result<(DepthFrame, SphereTensor<S>)> {
    let cache = model_forward(params, ctx, img)?;
    let sphere = SphereTensor::new(
        ctx.finest_grid().clone(),
        Mat::from_vec(cache.depth_sphere.len(), 1, cache.depth_sphere.clone()),
    )?;
    let erp = ctx.inv_table.apply(sphere.data())?;
    let frame = DepthFrame::new(
        ctx.width,
        ctx.height,
        erp.data().iter().map(|v| v.to_f64v() as f32).collect(),
        PRED_MIN,
        PRED_MAX,
    )?;
    Ok((frame, sphere))
}

/// Loss value and parameter gradients of one (image, ground-truth) pair.
pub struct TrainingStep<S> {
    pub loss: f64,
    pub n_valid: usize,
    pub grads: ModelGrads<S>,
}

/// Forward + loss on spherical pixels with valid depth + full backward.
pub fn training_loss_and_grads<S: Scalar>(
    params: &ModelParams<S>,
    ctx: &ModelContext,
    img: &ErpImage,
    gt: &DepthFrame,
    kind: LossKind,
) -> Result<TrainingStep<S>> {
    if gt.width != ctx.width || gt.height != ctx.height {
        return Err(Error::shape("ground truth dims do not match context"));
    }
    let cache = model_forward(params, ctx, img)?;
    let gt_mat = Mat::from_vec(
        gt.width * gt.height,
        1,
        gt.depth.iter().map(|&v| S::from_f64(v as f64)).collect(),
    );
    let gt_sphere = ctx.gt_table.apply(&gt_mat)?;
    let valid: Vec<bool> = gt_sphere
        .data()
        .iter()
        .map(|&v| {
            let v = v.to_f64v();
            v.is_finite() && v > gt.min_depth as f64 && v < gt.max_depth as f64
        })
        .collect();
    let (loss, d_pred) = loss_masked(kind, &cache.depth_sphere, gt_sphere.data(), &valid)?;
    let n_valid = valid.iter().filter(|&&v| v).count();
    let grads = model_backward(params, ctx, &cache, &d_pred)?;
    Ok(TrainingStep {
        loss,
        n_valid,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoordSet;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            level_nsides: vec![1, 2, 4],
            channels: vec![8, 8, 6],
            encoder_channels: vec![6, 5, 4],
            variant: Variant::Fusion,
            gsa_offset: 2,
            ffn_expansion: 2,
            heads: 2,
            positional: PositionalKind::Spe,
            spe_coords: CoordSet::Xyz,
            allow_nonstandard_aspect: false,
        }
    }

    #[test]
    fn forward_shapes_and_positivity() {
        let config = tiny_config();
        let params = ModelParams::<f32>::init(&config, 7).unwrap();
        let ctx = ModelContext::prepare(&config, 32, 16, None).unwrap();
        let img = ErpImage::from_fn(32, 16, 3, |x, y, c| {
            ((x * 3 + y * 5 + c) % 17) as f32 / 17.0
        });
        let (frame, sphere) = model_predict(&params, &ctx, &img).unwrap();
        assert_eq!(frame.width, 32);
        assert_eq!(frame.height, 16);
        assert!(frame.depth.iter().all(|&d| d > 0.0));
        assert_eq!(sphere.data().rows(), 192);
        assert_eq!(sphere.channels(), 1);
    }

    #[test]
    fn init_is_deterministic() {
        let config = tiny_config();
        let a = ModelParams::<f32>::init(&config, 11).unwrap();
        let b = ModelParams::<f32>::init(&config, 11).unwrap();
        assert_eq!(
            crate::nn::flatten_params(&a),
            crate::nn::flatten_params(&b)
        );
        let c = ModelParams::<f32>::init(&config, 12).unwrap();
        assert_ne!(
            crate::nn::flatten_params(&a),
            crate::nn::flatten_params(&c)
        );
    }

    #[test]
    fn repeated_finest_level_is_supported() {
        // The "upsample" pixel preset repeats the finest nside.
        let mut config = tiny_config();
        config.level_nsides = vec![1, 2, 2];
        let params = ModelParams::<f32>::init(&config, 3).unwrap();
        let ctx = ModelContext::prepare(&config, 32, 16, None).unwrap();
        let img = ErpImage::constant(32, 16, 3, 0.4);
        let (frame, sphere) = model_predict(&params, &ctx, &img).unwrap();
        assert_eq!(sphere.data().rows(), 48);
        assert!(frame.depth.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn training_step_runs_and_is_deterministic() {
        let config = tiny_config();
        let params = ModelParams::<f32>::init(&config, 5).unwrap();
        let ctx = ModelContext::prepare(&config, 32, 16, None).unwrap();
        let img = ErpImage::from_fn(32, 16, 3, |x, y, c| ((x + y + c) % 11) as f32 / 11.0);
        let gt = DepthFrame::new(32, 16, vec![2.0; 32 * 16], 0.01, 20.0).unwrap();
        let a = training_loss_and_grads(&params, &ctx, &img, &gt, LossKind::Rmsle).unwrap();
        let b = training_loss_and_grads(&params, &ctx, &img, &gt, LossKind::Rmsle).unwrap();
        assert!(a.loss > 0.0);
        assert_eq!(a.n_valid, ctx.finest_grid().npix());
        assert_eq!(
            crate::nn::flatten_params(&a.grads),
            crate::nn::flatten_params(&b.grads)
        );
    }
}
