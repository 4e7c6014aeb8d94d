//! Hierarchical equal-area isolatitude pixelization of the unit sphere,
//! nested indexing scheme.
//!
//! A grid with refinement parameter `nside` (a power of two) carries
//! `12·nside²` equal-area cells. Nested indexing makes the quadtree implicit:
//! the four children of pixel `i` at the next finer level are `4i..4i+3`, and
//! the ancestor `k` levels up is `i >> 2k`. Pixel centers and the 8-slot
//! neighbor table (compass order SW,W,NW,N,NE,E,SE,S) are precomputed at
//! construction; queries are pure and the built grid is immutable.

use crate::error::{Error, Result};
use rayon::prelude::*;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Sentinel for an absent neighbor slot.
pub const MISSING: i32 = -1;

/// Largest supported refinement parameter.
pub const MAX_NSIDE: u32 = 1024;

/// Ring index (in units of nside) of each base face center, north to south.
const JRLL: [i64; 12] = [2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4];
/// Longitude index (in units of π/4) of each base face center.
const JPLL: [i64; 12] = [1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7];

/// In-face displacement of each compass slot; the face x axis points
/// north-east and the y axis north-west.
const XOFF: [i64; 8] = [-1, -1, 0, 1, 1, 1, 0, -1];
const YOFF: [i64; 8] = [0, 1, 1, 1, 0, -1, -1, -1];

/// Face reached when stepping off a face edge, indexed by the 3×3 step code
/// (S,SE,E,SW,center,NE,W,NW,N) and the source face; -1 where no face exists
/// (the step exits across a corner where only three faces meet).
const FACEARRAY: [[i64; 12]; 9] = [
    [8, 9, 10, 11, -1, -1, -1, -1, 10, 11, 8, 9],
    [5, 6, 7, 4, 8, 9, 10, 11, 9, 10, 11, 8],
    [-1, -1, -1, -1, 5, 6, 7, 4, -1, -1, -1, -1],
    [4, 5, 6, 7, 11, 8, 9, 10, 11, 8, 9, 10],
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
    [1, 2, 3, 0, 0, 1, 2, 3, 5, 6, 7, 4],
    [-1, -1, -1, -1, 7, 4, 5, 6, -1, -1, -1, -1],
    [3, 0, 1, 2, 3, 0, 1, 2, 4, 5, 6, 7],
    [2, 3, 0, 1, -1, -1, -1, -1, 0, 1, 2, 3],
];

/// Coordinate fixup when crossing a face boundary: bit 0 mirrors x, bit 1
/// mirrors y, bit 2 swaps the axes. Indexed by step code and face row
/// (north/equator/south).
const SWAPARRAY: [[u8; 3]; 9] = [
    [0, 0, 3],
    [0, 0, 6],
    [0, 0, 0],
    [0, 0, 5],
    [0, 0, 0],
    [5, 0, 0],
    [0, 0, 0],
    [6, 0, 0],
    [3, 0, 0],
];

#[inline]
fn spread_bits(v: u64) -> u64 {
    let mut x = v & 0x0000_0000_ffff_ffff;
    x = (x | (x << 16)) & 0x0000_ffff_0000_ffff;
    x = (x | (x << 8)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x << 4)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x
}

#[inline]
fn compress_bits(v: u64) -> u64 {
    let mut x = v & 0x5555_5555_5555_5555;
    x = (x | (x >> 1)) & 0x3333_3333_3333_3333;
    x = (x | (x >> 2)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x >> 4)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x >> 8)) & 0x0000_ffff_0000_ffff;
    x = (x | (x >> 16)) & 0x0000_0000_ffff_ffff;
    x
}

#[inline]
fn xyf2nest(nside: u32, ix: u64, iy: u64, face: u64) -> usize {
    (face * (nside as u64) * (nside as u64) + (spread_bits(ix) | (spread_bits(iy) << 1))) as usize
}

#[inline]
fn nest2xyf(nside: u32, pix: usize) -> (u64, u64, u64) {
    let npface = (nside as u64) * (nside as u64);
    let face = pix as u64 / npface;
    let t = pix as u64 & (npface - 1);
    (compress_bits(t), compress_bits(t >> 1), face)
}

/// One HEALPix resolution level: pixel centers, neighbor table, and the
/// reverse adjacency used by convolution backward passes.
#[derive(Debug)]
pub struct SphericalGrid {
    nside: u32,
    npix: usize,
    centers: Vec<[f64; 3]>,
    neighbors: Vec<[i32; 8]>,
    /// CSR layout of the incoming edges: for pixel `j`, entries
    /// `incoming[off[j]..off[j+1]]` list every `(i, slot)` with
    /// `neighbors[i][slot] == j`, in ascending `(i, slot)` order.
    incoming_off: Vec<u32>,
    incoming: Vec<(u32, u8)>,
}

impl SphericalGrid {
    /// Builds the grid for a power-of-two `nside` up to 1024.
    pub fn build(nside: u32) -> Result<Self> {
        if nside == 0 || !nside.is_power_of_two() || nside > MAX_NSIDE {
            return Err(Error::invalid(format!(
                "nside must be a power of two in 1..={MAX_NSIDE}, got {nside}"
            )));
        }
        let npix = 12 * (nside as usize) * (nside as usize);
        let centers: Vec<[f64; 3]> = (0..npix)
            .into_par_iter()
            .map(|p| {
                let (z, phi) = center_zphi(nside, p);
                let sth = ((1.0 - z) * (1.0 + z)).max(0.0).sqrt();
                [sth * phi.cos(), sth * phi.sin(), z]
            })
            .collect();
        let neighbors: Vec<[i32; 8]> = (0..npix)
            .into_par_iter()
            .map(|p| neighbors_of(nside, p))
            .collect();
        let (incoming_off, incoming) = build_incoming(npix, &neighbors);
        Ok(SphericalGrid {
            nside,
            npix,
            centers,
            neighbors,
            incoming_off,
            incoming,
        })
    }

    /// Reassembles a grid from stored tables (lengths validated, values
    /// trusted; `verify` does the deep checks).
    pub fn from_parts(nside: u32, centers: Vec<[f64; 3]>, neighbors: Vec<[i32; 8]>) -> Result<Self> {
        if nside == 0 || !nside.is_power_of_two() || nside > MAX_NSIDE {
            return Err(Error::invalid(format!("bad nside {nside}")));
        }
        let npix = 12 * (nside as usize) * (nside as usize);
        if centers.len() != npix || neighbors.len() != npix {
            return Err(Error::shape(format!(
                "expected {npix} centers/neighbor rows, got {}/{}",
                centers.len(),
                neighbors.len()
            )));
        }
        let (incoming_off, incoming) = build_incoming(npix, &neighbors);
        Ok(SphericalGrid {
            nside,
            npix,
            centers,
            neighbors,
            incoming_off,
            incoming,
        })
    }

    pub fn nside(&self) -> u32 {
        self.nside
    }

    pub fn npix(&self) -> usize {
        self.npix
    }

    /// Unit vector of the pixel center.
    pub fn center(&self, pix: usize) -> Result<[f64; 3]> {
        self.check_pix(pix)?;
        Ok(self.centers[pix])
    }

    pub fn centers(&self) -> &[[f64; 3]] {
        &self.centers
    }

    /// Angular center of pixel `pix`: (colatitude in [0,π], longitude in [0,2π)).
    pub fn pix2ang(&self, pix: usize) -> Result<(f64, f64)> {
        self.check_pix(pix)?;
        let (z, phi) = center_zphi(self.nside, pix);
        Ok((z.acos(), phi))
    }

    /// Index of the cell containing the direction (colatitude, longitude).
    /// Longitude may be any finite real; it is reduced modulo 2π.
    pub fn ang2pix(&self, theta: f64, phi: f64) -> Result<usize> {
        if !theta.is_finite() || !phi.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite direction ({theta}, {phi})"
            )));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::invalid(format!(
                "colatitude {theta} outside [0, π]"
            )));
        }
        Ok(ang2pix_nested(self.nside, theta, phi))
    }

    /// Cell containing a unit direction vector.
    pub fn vec2pix(&self, v: [f64; 3]) -> Result<usize> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::invalid("zero or non-finite direction vector"));
        }
        let theta = (v[2] / norm).clamp(-1.0, 1.0).acos();
        let phi = v[1].atan2(v[0]);
        Ok(ang2pix_nested(self.nside, theta, phi))
    }

    /// Neighbor slots of `pix` in compass order (SW,W,NW,N,NE,E,SE,S);
    /// absent slots hold [`MISSING`].
    pub fn neighbors8(&self, pix: usize) -> Result<[i32; 8]> {
        self.check_pix(pix)?;
        Ok(self.neighbors[pix])
    }

    pub fn neighbor_table(&self) -> &[[i32; 8]] {
        &self.neighbors
    }

    /// Incoming edges of `pix`: every `(source, slot)` with
    /// `neighbors[source][slot] == pix`.
    pub fn incoming(&self, pix: usize) -> &[(u32, u8)] {
        let lo = self.incoming_off[pix] as usize;
        let hi = self.incoming_off[pix + 1] as usize;
        &self.incoming[lo..hi]
    }

    fn check_pix(&self, pix: usize) -> Result<()> {
        if pix >= self.npix {
            return Err(Error::IndexOutOfRange {
                what: "pixel",
                index: pix,
                size: self.npix,
            });
        }
        Ok(())
    }

    /// Deep validation of the structural invariants. Returns a line per check.
    pub fn verify(&self) -> Result<Vec<String>> {
        let mut lines = Vec::new();
        if self.npix != 12 * (self.nside as usize).pow(2) {
            return Err(Error::Format("npix != 12·nside²".into()));
        }
        lines.push(format!("npix == 12·nside² == {}", self.npix));
        for (p, c) in self.centers.iter().enumerate() {
            let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(Error::Format(format!("center {p} has norm {norm}")));
            }
        }
        lines.push("all centers unit norm within 1e-12".into());
        let mut seven = 0usize;
        for p in 0..self.npix {
            let nb = &self.neighbors[p];
            let mut count = 0;
            for (s, &q) in nb.iter().enumerate() {
                if q == MISSING {
                    continue;
                }
                count += 1;
                let q = q as usize;
                if q == p {
                    return Err(Error::Format(format!("pixel {p} neighbors itself")));
                }
                if q >= self.npix {
                    return Err(Error::Format(format!("pixel {p} slot {s} out of range")));
                }
                if !self.neighbors[q].contains(&(p as i32)) {
                    return Err(Error::Format(format!(
                        "neighbor relation not symmetric between {p} and {q}"
                    )));
                }
                if nb.iter().filter(|&&r| r == q as i32).count() != 1 {
                    return Err(Error::Format(format!("pixel {p} lists {q} twice")));
                }
            }
            if count == 7 {
                seven += 1;
            }
        }
        lines.push(format!(
            "neighbor table symmetric and irreflexive; {seven} pixels with 7 slots"
        ));
        if self.nside >= 2 && seven != 24 {
            return Err(Error::Format(format!(
                "expected 24 seven-neighbor pixels, found {seven}"
            )));
        }
        Ok(lines)
    }

    /// Serializes the grid (magic, version, nside, centers, neighbor table).
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"SPHGRID1")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&self.nside.to_le_bytes())?;
        for c in &self.centers {
            for v in c {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for nb in &self.neighbors {
            for v in nb {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"SPHGRID1" {
            return Err(Error::Format("bad grid magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported grid version {version}")));
        }
        let nside = read_u32(r)?;
        if nside == 0 || !nside.is_power_of_two() || nside > MAX_NSIDE {
            return Err(Error::Format(format!("bad nside {nside} in grid file")));
        }
        let npix = 12 * (nside as usize) * (nside as usize);
        let mut centers = Vec::with_capacity(npix);
        for _ in 0..npix {
            let mut c = [0f64; 3];
            for v in &mut c {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            centers.push(c);
        }
        let mut neighbors = Vec::with_capacity(npix);
        for _ in 0..npix {
            let mut nb = [0i32; 8];
            for v in &mut nb {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                *v = i32::from_le_bytes(b);
            }
            neighbors.push(nb);
        }
        SphericalGrid::from_parts(nside, centers, neighbors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        SphericalGrid::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn build_incoming(npix: usize, neighbors: &[[i32; 8]]) -> (Vec<u32>, Vec<(u32, u8)>) {
    let mut counts = vec![0u32; npix + 1];
    for nb in neighbors {
        for &q in nb {
            if q != MISSING {
                counts[q as usize + 1] += 1;
            }
        }
    }
    for j in 0..npix {
        counts[j + 1] += counts[j];
    }
    let mut entries = vec![(0u32, 0u8); counts[npix] as usize];
    let mut cursor = counts.clone();
    for (i, nb) in neighbors.iter().enumerate() {
        for (s, &q) in nb.iter().enumerate() {
            if q != MISSING {
                let at = cursor[q as usize];
                entries[at as usize] = (i as u32, s as u8);
                cursor[q as usize] += 1;
            }
        }
    }
    (counts, entries)
}

/// (z, longitude) of the nested pixel center, via the equal-area projection
/// plane (x in [0,8), y in [-2,2]).
fn center_zphi(nside: u32, pix: usize) -> (f64, f64) {
    let (ix, iy, face) = nest2xyf(nside, pix);
    let n = nside as f64;
    let xc = JPLL[face as usize] as f64;
    let yc = 3.0 - JRLL[face as usize] as f64;
    let x = xc + (ix as f64 - iy as f64) / n;
    let y = yc + ((ix + iy + 1) as f64 - n) / n;
    if y.abs() <= 1.0 {
        let z = y * (2.0 / 3.0);
        let phi = (x * FRAC_PI_4).rem_euclid(2.0 * PI);
        (z, phi)
    } else {
        let sigma = 2.0 - y.abs();
        let z = (1.0 - sigma * sigma / 3.0) * y.signum();
        let phi = ((xc + (x - xc) / sigma) * FRAC_PI_4).rem_euclid(2.0 * PI);
        (z, phi)
    }
}

fn ang2pix_nested(nside: u32, theta: f64, phi: f64) -> usize {
    let z = theta.cos();
    let za = z.abs();
    let tt = phi.rem_euclid(2.0 * PI) / FRAC_PI_2; // in [0,4)
    let ns = nside as i64;
    let (ix, iy, face) = if za <= 2.0 / 3.0 {
        let temp1 = nside as f64 * (0.5 + tt);
        let temp2 = nside as f64 * (z * 0.75);
        let jp = (temp1 - temp2) as i64; // ascending edge line
        let jm = (temp1 + temp2) as i64; // descending edge line
        let ifp = jp / ns;
        let ifm = jm / ns;
        let face = if ifp == ifm {
            if ifp == 4 {
                4
            } else {
                ifp + 4
            }
        } else if ifp < ifm {
            ifp
        } else {
            ifm + 8
        };
        let ix = jm & (ns - 1);
        let iy = ns - (jp & (ns - 1)) - 1;
        (ix, iy, face)
    } else {
        let ntt = (tt as i64).min(3);
        let tp = tt - ntt as f64;
        let tmp = nside as f64 * (3.0 * (1.0 - za)).sqrt();
        let jp = ((tp * tmp) as i64).min(ns - 1); // line increasing toward NE
        let jm = (((1.0 - tp) * tmp) as i64).min(ns - 1); // line increasing toward NW
        if z >= 0.0 {
            (ns - jm - 1, ns - jp - 1, ntt)
        } else {
            (jp, jm, ntt + 8)
        }
    };
    xyf2nest(nside, ix as u64, iy as u64, face as u64)
}

fn neighbors_of(nside: u32, pix: usize) -> [i32; 8] {
    let (ix, iy, face) = nest2xyf(nside, pix);
    let (ix, iy, face) = (ix as i64, iy as i64, face as i64);
    let ns = nside as i64;
    let mut out = [MISSING; 8];
    for (m, slot) in out.iter_mut().enumerate() {
        let mut x = ix + XOFF[m];
        let mut y = iy + YOFF[m];
        let mut code = 4i64;
        if x < 0 {
            x += ns;
            code -= 1;
        } else if x >= ns {
            x -= ns;
            code += 1;
        }
        if y < 0 {
            y += ns;
            code -= 3;
        } else if y >= ns {
            y -= ns;
            code += 3;
        }
        let f = FACEARRAY[code as usize][face as usize];
        if f < 0 {
            continue;
        }
        let bits = SWAPARRAY[code as usize][(face >> 2) as usize];
        if bits & 1 != 0 {
            x = ns - x - 1;
        }
        if bits & 2 != 0 {
            y = ns - y - 1;
        }
        if bits & 4 != 0 {
            std::mem::swap(&mut x, &mut y);
        }
        *slot = xyf2nest(nside, x as u64, y as u64, f as u64) as i32;
    }
    out
}

/// Window id of a nested pixel: its ancestor `offset` levels up.
#[inline]
pub fn window_of(pix: usize, offset: u32) -> usize {
    pix >> (2 * offset)
}

/// Assignment of every pixel of one grid level to a window.
#[derive(Debug, Clone)]
pub struct WindowPartition {
    ids: Vec<u32>,
    n_windows: usize,
    counts: Vec<u32>,
}

impl WindowPartition {
    /// Ancestry partition of a grid: window of `p` is `p >> 2·offset`.
    /// Valid while the ancestor level exists, i.e. `2^offset ≤ nside`
    /// (offset 0 puts every pixel in its own window).
    pub fn ancestry(grid: &SphericalGrid, offset: u32) -> Result<Self> {
        if (1u64 << offset) > grid.nside() as u64 {
            return Err(Error::invalid(format!(
                "window offset {offset} exceeds hierarchy depth of nside {}",
                grid.nside()
            )));
        }
        let ids: Vec<u32> = (0..grid.npix())
            .map(|p| window_of(p, offset) as u32)
            .collect();
        let n_windows = grid.npix() >> (2 * offset);
        Self::from_ids(ids, n_windows)
    }

    /// Builds from explicit ids (used by tests for permuted structures).
    pub fn from_ids(ids: Vec<u32>, n_windows: usize) -> Result<Self> {
        let mut counts = vec![0u32; n_windows];
        for &w in &ids {
            if w as usize >= n_windows {
                return Err(Error::invalid(format!(
                    "window id {w} out of range {n_windows}"
                )));
            }
            counts[w as usize] += 1;
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::invalid("empty window in partition"));
        }
        Ok(WindowPartition {
            ids,
            n_windows,
            counts,
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }
}

/// Ordered list of grids, coarse to fine, nside doubling at each step.
#[derive(Debug, Clone)]
pub struct GridHierarchy {
    levels: Vec<Arc<SphericalGrid>>,
}

impl GridHierarchy {
    pub fn build(nsides: &[u32]) -> Result<Self> {
        if nsides.is_empty() {
            return Err(Error::invalid("hierarchy needs at least one level"));
        }
        for w in nsides.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(Error::invalid(format!(
                    "hierarchy nsides must double per step, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let levels = nsides
            .iter()
            .map(|&n| SphericalGrid::build(n).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(GridHierarchy { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, i: usize) -> Result<&Arc<SphericalGrid>> {
        self.levels.get(i).ok_or(Error::IndexOutOfRange {
            what: "hierarchy level",
            index: i,
            size: self.levels.len(),
        })
    }

    pub fn levels(&self) -> &[Arc<SphericalGrid>] {
        &self.levels
    }

    /// Parent of `pix` one level up.
    pub fn parent(pix: usize) -> usize {
        pix >> 2
    }

    /// Children of `pix` one level down.
    pub fn children(pix: usize) -> [usize; 4] {
        [4 * pix, 4 * pix + 1, 4 * pix + 2, 4 * pix + 3]
    }

    /// Window assignment of `fine_level` with windows `coarse_offset`
    /// ancestry levels up.
    pub fn window_partition(&self, fine_level: usize, coarse_offset: u32) -> Result<WindowPartition> {
        let grid = self.level(fine_level)?;
        WindowPartition::ancestry(grid, coarse_offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npix_counts() {
        assert_eq!(SphericalGrid::build(1).unwrap().npix(), 12);
        assert_eq!(SphericalGrid::build(4).unwrap().npix(), 192);
        assert_eq!(SphericalGrid::build(32).unwrap().npix(), 12288);
    }

    #[test]
    fn rejects_bad_nside() {
        assert!(SphericalGrid::build(0).is_err());
        assert!(SphericalGrid::build(3).is_err());
        assert!(SphericalGrid::build(2048).is_err());
    }

    #[test]
    fn base_pixel_centers() {
        // Equatorial base pixels sit at z = 0, longitudes 0, π/2, π, 3π/2;
        // polar base pixels have |z| = 2/3.
        let g = SphericalGrid::build(1).unwrap();
        for (i, lon) in [(4usize, 0.0), (5, FRAC_PI_2), (6, PI), (7, 3.0 * FRAC_PI_2)] {
            let (theta, phi) = g.pix2ang(i).unwrap();
            assert!((theta - FRAC_PI_2).abs() < 1e-14, "pixel {i} colat {theta}");
            assert!((phi - lon).abs() < 1e-14, "pixel {i} lon {phi}");
        }
        for i in 0..4 {
            let c = g.center(i).unwrap();
            assert!((c[2] - 2.0 / 3.0).abs() < 1e-14);
        }
        for i in 8..12 {
            let c = g.center(i).unwrap();
            assert!((c[2] + 2.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn ang2pix_identity_and_periodicity() {
        for nside in [1u32, 2, 8] {
            let g = SphericalGrid::build(nside).unwrap();
            for p in 0..g.npix() {
                let (theta, phi) = g.pix2ang(p).unwrap();
                assert_eq!(g.ang2pix(theta, phi).unwrap(), p);
                assert_eq!(g.ang2pix(theta, phi + 2.0 * PI).unwrap(), p);
                assert_eq!(g.ang2pix(theta, phi - 2.0 * PI).unwrap(), p);
            }
        }
    }

    #[test]
    fn ang2pix_rejects_nonfinite() {
        let g = SphericalGrid::build(2).unwrap();
        assert!(g.ang2pix(f64::NAN, 0.0).is_err());
        assert!(g.ang2pix(0.5, f64::INFINITY).is_err());
        assert!(g.ang2pix(4.0, 0.0).is_err());
    }

    #[test]
    fn neighbor_slots_distinct_and_symmetric() {
        for nside in [1u32, 2, 4] {
            let g = SphericalGrid::build(nside).unwrap();
            for p in 0..g.npix() {
                let nb = g.neighbors8(p).unwrap();
                let mut present: Vec<i32> = nb.iter().copied().filter(|&q| q != MISSING).collect();
                assert!(!present.contains(&(p as i32)));
                let len = present.len();
                present.sort_unstable();
                present.dedup();
                assert_eq!(present.len(), len, "duplicate neighbor at pixel {p}");
                for q in present {
                    let back = g.neighbors8(q as usize).unwrap();
                    assert!(back.contains(&(p as i32)));
                }
            }
        }
    }

    #[test]
    fn seven_neighbor_pixel_count() {
        for nside in [2u32, 4, 8] {
            let g = SphericalGrid::build(nside).unwrap();
            let mut seven = 0;
            for p in 0..g.npix() {
                let deg = g
                    .neighbors8(p)
                    .unwrap()
                    .iter()
                    .filter(|&&q| q != MISSING)
                    .count();
                assert!(deg == 7 || deg == 8, "degree {deg} at nside {nside}");
                if deg == 7 {
                    seven += 1;
                }
            }
            assert_eq!(seven, 24);
        }
    }

    #[test]
    fn hierarchy_parenthood() {
        let h = GridHierarchy::build(&[4, 8, 16, 32]).unwrap();
        assert_eq!(
            h.levels().iter().map(|g| g.npix()).collect::<Vec<_>>(),
            vec![192, 768, 3072, 12288]
        );
        for p in 0..h.level(0).unwrap().npix() {
            for c in GridHierarchy::children(p) {
                assert_eq!(GridHierarchy::parent(c), p);
            }
        }
        assert!(GridHierarchy::build(&[4, 16]).is_err());
    }

    #[test]
    fn window_partition_shapes() {
        let h = GridHierarchy::build(&[4, 8, 16]).unwrap();
        let w = h.window_partition(0, 2).unwrap();
        assert_eq!(w.n_windows(), 12);
        assert!(w.counts().iter().all(|&c| c == 16));
        let w0 = h.window_partition(0, 0).unwrap();
        assert_eq!(w0.n_windows(), 192);
        assert!(h.window_partition(0, 3).is_err());
        // Partition property: every pixel in exactly one window.
        let total: u32 = w.counts().iter().sum();
        assert_eq!(total as usize, 192);
    }

    #[test]
    fn grid_io_roundtrip() {
        let g = SphericalGrid::build(4).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let g2 = SphericalGrid::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(g2.nside(), 4);
        assert_eq!(g2.centers(), g.centers());
        assert_eq!(g2.neighbor_table(), g.neighbor_table());
        g2.verify().unwrap();
    }
}
