//! Spherical positional embedding: a linear map of each pixel's unit-sphere
//! coordinates into the feature dimension, ζ = C·[x,y,z]ᵀ, with the reduced
//! coordinate subsets used by the coordinate ablation and a learnable
//! per-pixel table as the comparison alternative.

use crate::error::{Error, Result};
use crate::healpix::SphericalGrid;
use crate::mat::{matmul_nt, matmul_tn, Mat, Scalar};
use serde::{Deserialize, Serialize};

/// Which positional signal the decoder blocks add to their inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalKind {
    /// Linear embedding of sphere coordinates.
    Spe,
    /// Free per-pixel embedding table (learned position comparison).
    Learnable,
}

/// Coordinate subset fed to the linear embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordSet {
    Xyz,
    Xy,
    Yz,
    Xz,
    LatLon,
}

impl CoordSet {
    pub fn dim(&self) -> usize {
        match self {
            CoordSet::Xyz => 3,
            _ => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "xyz" => Ok(CoordSet::Xyz),
            "xy" => Ok(CoordSet::Xy),
            "yz" => Ok(CoordSet::Yz),
            "xz" => Ok(CoordSet::Xz),
            "latlon" => Ok(CoordSet::LatLon),
            other => Err(Error::invalid(format!("unknown coordinate set {other:?}"))),
        }
    }

    /// Per-pixel coordinate features of a grid (npix × dim).
    pub fn coords_mat(&self, grid: &SphericalGrid) -> Mat<f64> {
        let n = grid.npix();
        let mut out = Mat::zeros(n, self.dim());
        for (p, c) in grid.centers().iter().enumerate() {
            let row = out.row_mut(p);
            match self {
                CoordSet::Xyz => {
                    row.copy_from_slice(c);
                }
                CoordSet::Xy => {
                    row[0] = c[0];
                    row[1] = c[1];
                }
                CoordSet::Yz => {
                    row[0] = c[1];
                    row[1] = c[2];
                }
                CoordSet::Xz => {
                    row[0] = c[0];
                    row[1] = c[2];
                }
                CoordSet::LatLon => {
                    row[0] = c[2].clamp(-1.0, 1.0).asin();
                    row[1] = c[1].atan2(c[0]).rem_euclid(2.0 * std::f64::consts::PI);
                }
            }
        }
        out
    }
}

/// Positional embedding parameters of one path of one block.
#[derive(Debug, Clone)]
pub enum SpeParams<S> {
    /// ζ = coords · Cᵀ, no bias. `matrix` is M × dim(coords).
    Linear { coords: CoordSet, matrix: Mat<S> },
    /// ζ is the table itself (npix × M).
    Learnable { table: Mat<S> },
}

impl<S: Scalar> SpeParams<S> {
    pub fn zeros_like(&self) -> Self {
        match self {
            SpeParams::Linear { coords, matrix } => SpeParams::Linear {
                coords: *coords,
                matrix: Mat::zeros(matrix.rows(), matrix.cols()),
            },
            SpeParams::Learnable { table } => SpeParams::Learnable {
                table: Mat::zeros(table.rows(), table.cols()),
            },
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            SpeParams::Linear { matrix, .. } => matrix.rows(),
            SpeParams::Learnable { table } => table.cols(),
        }
    }
}

impl<S: Scalar> crate::nn::Params<S> for SpeParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        match self {
            SpeParams::Linear { matrix, .. } => f(
                &format!("{prefix}.matrix"),
                &[matrix.rows(), matrix.cols()],
                matrix.data(),
            ),
            SpeParams::Learnable { table } => f(
                &format!("{prefix}.table"),
                &[table.rows(), table.cols()],
                table.data(),
            ),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        match self {
            SpeParams::Linear { matrix, .. } => {
                let shape = [matrix.rows(), matrix.cols()];
                f(&format!("{prefix}.matrix"), &shape, matrix.data_mut())
            }
            SpeParams::Learnable { table } => {
                let shape = [table.rows(), table.cols()];
                f(&format!("{prefix}.table"), &shape, table.data_mut())
            }
        }
    }
}

/// Embedding of every pixel of a grid: npix × M.
///
/// `coords` must be the matrix produced by the parameter's coordinate set for
/// the same grid (the model context precomputes it per level).
pub fn spe_embed<S: Scalar>(p: &SpeParams<S>, coords: &Mat<S>) -> Result<Mat<S>> {
    match p {
        SpeParams::Linear { matrix, .. } => {
            if coords.cols() != matrix.cols() {
                return Err(Error::shape(format!(
                    "coordinate dim {} != embedding dim {}",
                    coords.cols(),
                    matrix.cols()
                )));
            }
            Ok(matmul_nt(coords, matrix))
        }
        SpeParams::Learnable { table } => {
            if table.rows() != coords.rows() {
                return Err(Error::shape("learnable table rows != npix"));
            }
            Ok(table.clone())
        }
    }
}

/// Gradient of [`spe_embed`] with respect to the parameters.
pub fn spe_bwd<S: Scalar>(p: &SpeParams<S>, coords: &Mat<S>, grad_out: &Mat<S>) -> SpeParams<S> {
    match p {
        SpeParams::Linear { coords: cs, .. } => SpeParams::Linear {
            coords: *cs,
            matrix: matmul_tn(grad_out, coords),
        },
        SpeParams::Learnable { .. } => SpeParams::Learnable {
            table: grad_out.clone(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::healpix::SphericalGrid;

    #[test]
    fn identity_rows_pick_out_coordinates() {
        // C = [I₃; 0] embeds the raw (x,y,z) into the first three channels.
        let grid = SphericalGrid::build(2).unwrap();
        let coords = CoordSet::Xyz.coords_mat(&grid);
        let mut c = Mat::<f64>::zeros(5, 3);
        for i in 0..3 {
            c.set(i, i, 1.0);
        }
        let p = SpeParams::Linear {
            coords: CoordSet::Xyz,
            matrix: c,
        };
        let z = spe_embed(&p, &coords).unwrap();
        for pix in 0..grid.npix() {
            let ctr = grid.center(pix).unwrap();
            for k in 0..3 {
                assert!((z.get(pix, k) - ctr[k]).abs() < 1e-15);
            }
            assert_eq!(z.get(pix, 3), 0.0);
            assert_eq!(z.get(pix, 4), 0.0);
        }
    }

    #[test]
    fn antipodal_centers_negate() {
        // Linearity with no bias: ζ(−v) = −ζ(v).
        let grid = SphericalGrid::build(1).unwrap();
        let coords = CoordSet::Xyz.coords_mat(&grid);
        let m = Mat::from_fn(4, 3, |r, c| ((r * 3 + c) % 5) as f64 - 2.0);
        let p = SpeParams::Linear {
            coords: CoordSet::Xyz,
            matrix: m,
        };
        let z = spe_embed(&p, &coords).unwrap();
        // Base pixels 4..8 are equatorial; 4 and 6 are antipodal.
        let c4 = grid.center(4).unwrap();
        let c6 = grid.center(6).unwrap();
        for k in 0..3 {
            assert!((c4[k] + c6[k]).abs() < 1e-12);
        }
        for k in 0..4 {
            assert!((z.get(4, k) + z.get(6, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinate_subsets_have_expected_dims() {
        let grid = SphericalGrid::build(1).unwrap();
        for (cs, d) in [
            (CoordSet::Xyz, 3),
            (CoordSet::Xy, 2),
            (CoordSet::Yz, 2),
            (CoordSet::Xz, 2),
            (CoordSet::LatLon, 2),
        ] {
            let m = cs.coords_mat(&grid);
            assert_eq!(m.cols(), d);
            assert_eq!(m.rows(), 12);
        }
        // Latitude of the north polar pixels is positive, longitude in range.
        let ll = CoordSet::LatLon.coords_mat(&grid);
        assert!(ll.get(0, 0) > 0.5);
        assert!(ll.get(0, 1) >= 0.0 && ll.get(0, 1) < 2.0 * std::f64::consts::PI);
    }
}
