//! Depth losses, the evaluation metric suite, and scale alignment.
//!
//! The training loss is the root mean squared logarithmic error over valid
//! pixels; the relative RMSE alternative exists for the loss-ablation
//! harness. All statistics accumulate in f64 with a fixed order.

use crate::error::{Error, Result};
use crate::mat::Scalar;
use crate::nn::SphereTensor;
use serde::{Deserialize, Serialize};

/// ERP depth raster with validity mask and depth-range metadata (meters).
#[derive(Debug, Clone)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
    pub min_depth: f32,
    pub max_depth: f32,
}

impl DepthFrame {
    /// Builds a frame; pixels outside (min_depth, max_depth) are invalid.
    pub fn new(
        width: usize,
        height: usize,
        depth: Vec<f32>,
        min_depth: f32,
        max_depth: f32,
    ) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::shape(format!(
                "depth length {} != {width}×{height}",
                depth.len()
            )));
        }
        if !(min_depth > 0.0) || !(max_depth > min_depth) {
            return Err(Error::invalid(format!(
                "bad depth range ({min_depth}, {max_depth})"
            )));
        }
        let valid = depth
            .iter()
            .map(|&d| d.is_finite() && d > min_depth && d < max_depth)
            .collect();
        Ok(DepthFrame {
            width,
            height,
            depth,
            valid,
            min_depth,
            max_depth,
        })
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn check_same_shape(&self, other: &DepthFrame) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(format!(
                "depth frames {}×{} vs {}×{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Root mean squared logarithmic error over masked samples, with the
/// analytic gradient with respect to `pred`.
pub fn rmsle_masked<S: Scalar>(pred: &[S], gt: &[S], valid: &[bool]) -> Result<(f64, Vec<S>)> {
    check_lens(pred, gt, valid)?;
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        n += 1;
        let p = pred[i].to_f64v();
        let g = gt[i].to_f64v();
        if !(p > 0.0) {
            return Err(Error::Domain(format!(
                "nonpositive prediction {p} on valid pixel {i}"
            )));
        }
        if !(g > 0.0) {
            return Err(Error::Domain(format!(
                "nonpositive ground truth {g} on valid pixel {i}"
            )));
        }
        let d = p.ln() - g.ln();
        sum += d * d;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let loss = (sum / n as f64).sqrt();
    let mut grad = vec![S::zero(); pred.len()];
    if loss > 0.0 {
        let scale = 1.0 / (n as f64 * loss);
        for i in 0..pred.len() {
            if !valid[i] {
                continue;
            }
            let p = pred[i].to_f64v();
            let g = gt[i].to_f64v();
            grad[i] = S::from_f64((p.ln() - g.ln()) * scale / p);
        }
    }
    Ok((loss, grad))
}

/// Relative RMSE over masked samples, with the analytic gradient with
/// respect to `pred`.
pub fn rmserel_masked<S: Scalar>(pred: &[S], gt: &[S], valid: &[bool]) -> Result<(f64, Vec<S>)> {
    check_lens(pred, gt, valid)?;
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        n += 1;
        let p = pred[i].to_f64v();
        let g = gt[i].to_f64v();
        if !(g > 0.0) {
            return Err(Error::Domain(format!(
                "nonpositive ground truth {g} on valid pixel {i}"
            )));
        }
        let d = (p - g) / g;
        sum += d * d;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let loss = (sum / n as f64).sqrt();
    let mut grad = vec![S::zero(); pred.len()];
    if loss > 0.0 {
        let scale = 1.0 / (n as f64 * loss);
        for i in 0..pred.len() {
            if !valid[i] {
                continue;
            }
            let p = pred[i].to_f64v();
            let g = gt[i].to_f64v();
            grad[i] = S::from_f64((p - g) / (g * g) * scale);
        }
    }
    Ok((loss, grad))
}

fn check_lens<S>(pred: &[S], gt: &[S], valid: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::shape(format!(
            "loss inputs {} / {} / {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    Ok(())
}

/// Which loss supervises training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Rmsle,
    Rmserel,
}

pub fn loss_masked<S: Scalar>(
    kind: LossKind,
    pred: &[S],
    gt: &[S],
    valid: &[bool],
) -> Result<(f64, Vec<S>)> {
    match kind {
        LossKind::Rmsle => rmsle_masked(pred, gt, valid),
        LossKind::Rmserel => rmserel_masked(pred, gt, valid),
    }
}

/// RMSLE between two depth frames over their joint valid mask.
pub fn rmsle_loss_frames(pred: &DepthFrame, gt: &DepthFrame) -> Result<(f64, Vec<f32>)> {
    pred.check_same_shape(gt)?;
    let valid: Vec<bool> = pred
        .valid
        .iter()
        .zip(gt.valid.iter())
        .map(|(&a, &b)| a && b)
        .collect();
    rmsle_masked(&pred.depth, &gt.depth, &valid)
}

/// RMSLE between single-channel spherical fields.
pub fn rmsle_loss_sphere<S: Scalar>(
    pred: &SphereTensor<S>,
    gt: &SphereTensor<S>,
    valid: &[bool],
) -> Result<(f64, Vec<S>)> {
    if pred.channels() != 1 || gt.channels() != 1 {
        return Err(Error::shape("spherical loss expects 1 channel"));
    }
    rmsle_masked(pred.data().data(), gt.data().data(), valid)
}

/// The standard depth metric suite; deltas are percentages in [0,100].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub rmsle: f64,
    pub absrel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
}

/// Computes MAE, RMSE, RMSLE, AbsRel and the three δ-threshold accuracies
/// over the joint valid mask of `pred` and `gt`.
pub fn metrics(pred: &DepthFrame, gt: &DepthFrame) -> Result<MetricReport> {
    pred.check_same_shape(gt)?;
    let valid: Vec<bool> = pred
        .valid
        .iter()
        .zip(gt.valid.iter())
        .map(|(&a, &b)| a && b)
        .collect();
    metrics_masked(&pred.depth, &gt.depth, &valid)
}

/// Metric suite over explicit masked samples (spherical or planar).
pub fn metrics_masked(pred: &[f32], gt: &[f32], valid: &[bool]) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::shape("metric input lengths"));
    }
    let mut n = 0usize;
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    let mut log_sq_sum = 0.0f64;
    let mut rel_sum = 0.0f64;
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    let t1 = 1.25f64;
    let t2 = t1 * t1;
    let t3 = t2 * t1;
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        let p = pred[i] as f64;
        let g = gt[i] as f64;
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::Domain(format!(
                "nonpositive depth on valid pixel {i}: pred {p}, gt {g}"
            )));
        }
        n += 1;
        let diff = p - g;
        abs_sum += diff.abs();
        sq_sum += diff * diff;
        let ld = p.ln() - g.ln();
        log_sq_sum += ld * ld;
        rel_sum += diff.abs() / g;
        let ratio = (p / g).max(g / p);
        if ratio < t1 {
            d1 += 1;
        }
        if ratio < t2 {
            d2 += 1;
        }
        if ratio < t3 {
            d3 += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    Ok(MetricReport {
        mae: abs_sum / nf,
        rmse: (sq_sum / nf).sqrt(),
        rmsle: (log_sq_sum / nf).sqrt(),
        absrel: rel_sum / nf,
        delta1: 100.0 * d1 as f64 / nf,
        delta2: 100.0 * d2 as f64 / nf,
        delta3: 100.0 * d3 as f64 / nf,
        n_valid: n,
    })
}

/// Statistic used for scale alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Median,
    Max,
}

/// Rescales `pred` by stat(gt)/stat(pred) over the joint valid mask.
pub fn align_scale(pred: &DepthFrame, gt: &DepthFrame, mode: AlignMode) -> Result<DepthFrame> {
    pred.check_same_shape(gt)?;
    let mut pv = Vec::new();
    let mut gv = Vec::new();
    for i in 0..pred.depth.len() {
        if pred.valid[i] && gt.valid[i] {
            pv.push(pred.depth[i] as f64);
            gv.push(gt.depth[i] as f64);
        }
    }
    if pv.is_empty() {
        return Err(Error::EmptyMask);
    }
    let stat = |v: &mut Vec<f64>| -> f64 {
        match mode {
            AlignMode::Max => v.iter().copied().fold(f64::MIN, f64::max),
            AlignMode::Median => {
                v.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    0.5 * (v[n / 2 - 1] + v[n / 2])
                }
            }
        }
    };
    let sp = stat(&mut pv);
    let sg = stat(&mut gv);
    if !(sp > 0.0) || !(sg > 0.0) {
        return Err(Error::Domain(format!(
            "degenerate alignment statistic pred {sp}, gt {sg}"
        )));
    }
    let scale = (sg / sp) as f32;
    let depth: Vec<f32> = pred.depth.iter().map(|&d| d * scale).collect();
    let mut out = pred.clone();
    // Keep the original mask: alignment must not reclassify pixels.
    out.depth = depth;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(vals: &[f32]) -> DepthFrame {
        DepthFrame::new(vals.len(), 1, vals.to_vec(), 0.01, 100.0).unwrap()
    }

    #[test]
    fn rmsle_exact_values() {
        let gt = [2.0f64, 1.0];
        let pred = [1.0f64, 2.0];
        let valid = [true, true];
        let (loss, _) = rmsle_masked(&pred, &gt, &valid).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        // pred = e·gt ⇒ loss exactly 1.
        let gt = [0.5f64, 3.0, 7.0];
        let pred: Vec<f64> = gt.iter().map(|g| g * std::f64::consts::E).collect();
        let (loss, _) = rmsle_masked(&pred, &gt, &[true; 3]).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rmserel_exact_values() {
        let gt = [2.0f64];
        let pred = [3.0f64];
        let (loss, _) = rmserel_masked(&pred, &gt, &[true]).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
        let gt = [1.0f64, 4.0];
        let pred = [2.0f64, 8.0];
        let (loss, _) = rmserel_masked(&pred, &gt, &[true, true]).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_errors() {
        assert!(matches!(
            rmsle_masked(&[1.0f64], &[1.0], &[false]),
            Err(Error::EmptyMask)
        ));
        assert!(matches!(
            rmsle_masked(&[-1.0f64], &[1.0], &[true]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn metrics_identity_and_uniform_ratio() {
        let gt = frame(&[1.0, 2.0, 3.0, 4.0]);
        let rep = metrics(&gt, &gt).unwrap();
        assert_eq!(rep.n_valid, 4);
        assert_eq!(rep.mae, 0.0);
        assert_eq!(rep.delta1, 100.0);

        let pred = frame(&[1.3, 2.6, 3.9, 5.2]);
        let rep = metrics(&pred, &gt).unwrap();
        assert_eq!(rep.delta1, 0.0); // 1.3 > 1.25
        assert_eq!(rep.delta2, 100.0); // 1.3 < 1.5625
        assert!(rep.delta1 <= rep.delta2 && rep.delta2 <= rep.delta3);
    }

    #[test]
    fn invalid_pixels_never_contribute() {
        let gt = frame(&[1.0, 2.0, 0.001, 3.0]); // third pixel below min → invalid
        let mut pred = frame(&[1.0, 2.0, 50.0, 3.0]);
        pred.depth[2] = 99.0; // garbage on an invalid gt pixel
        let rep = metrics(&pred, &gt).unwrap();
        assert_eq!(rep.n_valid, 3);
        assert_eq!(rep.mae, 0.0);
    }

    #[test]
    fn align_scale_recovers_scale() {
        let gt = frame(&[1.0, 2.0, 3.0, 5.0]);
        let pred = frame(&[2.5, 5.0, 7.5, 12.5]); // 2.5·gt
        let aligned = align_scale(&pred, &gt, AlignMode::Median).unwrap();
        for (a, g) in aligned.depth.iter().zip(gt.depth.iter()) {
            assert!((a - g).abs() < 1e-6);
        }
        let aligned = align_scale(&pred, &gt, AlignMode::Max).unwrap();
        for (a, g) in aligned.depth.iter().zip(gt.depth.iter()) {
            assert!((a - g).abs() < 1e-6);
        }
        // Already aligned input is unchanged.
        let same = align_scale(&gt, &gt, AlignMode::Median).unwrap();
        assert_eq!(same.depth, gt.depth);
    }
}
