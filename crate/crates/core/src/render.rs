//! Analytic panorama renderer for axis-aligned box rooms.
//!
//! Each ERP pixel casts a ray from the camera through its center direction;
//! depth is the Euclidean ray length to the nearest hit (panorama range
//! convention, not planar z). Color is the hit surface's albedo under fixed
//! Lambert shading — the light never depends on the camera, so brightness
//! carries no depth shortcut.

use crate::error::{Error, Result};
use crate::metrics::DepthFrame;
use crate::raster::ErpImage;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Depth range stamped onto rendered frames (meters).
pub const DEPTH_MIN: f32 = 0.01;
pub const DEPTH_MAX: f32 = 20.0;

/// Fixed world-space light direction (toward the light), normalized lazily.
const LIGHT: [f64; 3] = [0.3, 0.5, 0.8];
const AMBIENT: f64 = 0.35;

/// Axis-aligned box obstacle inside the room.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub albedo: [f32; 3],
}

/// Box room with a camera inside it.
///
/// `rotation` is a unit quaternion (w,x,y,z) mapping camera frame to world;
/// `face_albedos` are the six wall colors in +x,−x,+y,−y,+z,−z order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxScene {
    pub half_extents: [f64; 3],
    pub camera: [f64; 3],
    pub rotation: [f64; 4],
    pub face_albedos: [[f32; 3]; 6],
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

fn quat_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

impl BoxScene {
    /// Validates geometry: unit rotation, camera strictly inside the room and
    /// outside every obstacle.
    pub fn validate(&self) -> Result<()> {
        let qn: f64 = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidScene(format!(
                "rotation quaternion norm {qn} (must be 1 within 1e-10)"
            )));
        }
        for a in 0..3 {
            if !(self.half_extents[a] > 0.0) {
                return Err(Error::InvalidScene("nonpositive room extent".into()));
            }
            if self.camera[a].abs() >= self.half_extents[a] {
                return Err(Error::InvalidScene(format!(
                    "camera outside room on axis {a}"
                )));
            }
        }
        for (k, ob) in self.obstacles.iter().enumerate() {
            let mut inside = true;
            for a in 0..3 {
                if !(ob.half_extents[a] > 0.0) {
                    return Err(Error::InvalidScene(format!("obstacle {k} degenerate")));
                }
                if (self.camera[a] - ob.center[a]).abs() >= ob.half_extents[a] {
                    inside = false;
                }
            }
            if inside {
                return Err(Error::InvalidScene(format!("camera inside obstacle {k}")));
            }
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        quat_to_matrix(self.rotation)
    }

    /// Largest possible in-room ray length.
    pub fn diagonal(&self) -> f64 {
        2.0 * (self.half_extents.iter().map(|h| h * h).sum::<f64>()).sqrt()
    }

    /// Scene with the camera pitched by `angle_deg` about its own x axis.
    pub fn tilted(&self, angle_deg: f64) -> BoxScene {
        let half = angle_deg.to_radians() * 0.5;
        let tilt = [half.cos(), half.sin(), 0.0, 0.0];
        let mut out = self.clone();
        out.rotation = quat_mul(self.rotation, tilt);
        // Renormalize against accumulated rounding.
        let n: f64 = out.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut out.rotation {
            *v /= n;
        }
        out
    }
}

/// One resolved ray: hit distance, surface albedo, inward normal.
struct Hit {
    t: f64,
    albedo: [f32; 3],
    normal: [f64; 3],
}

/// Casts a world-space ray from the camera; `dir` must be unit length.
/// Returns (depth in meters, shaded RGB).
pub fn cast_ray(scene: &BoxScene, dir: [f64; 3]) -> (f64, [f32; 3]) {
    let p = scene.camera;
    // Exit through the room shell: min positive slab distance per axis.
    let mut room = Hit {
        t: f64::INFINITY,
        albedo: [0.0; 3],
        normal: [0.0; 3],
    };
    for a in 0..3 {
        if dir[a] == 0.0 {
            continue;
        }
        let bound = if dir[a] > 0.0 {
            scene.half_extents[a]
        } else {
            -scene.half_extents[a]
        };
        let t = (bound - p[a]) / dir[a];
        if t > 0.0 && t < room.t {
            let face = 2 * a + if dir[a] > 0.0 { 0 } else { 1 };
            let mut normal = [0.0; 3];
            normal[a] = -dir[a].signum();
            room = Hit {
                t,
                albedo: scene.face_albedos[face],
                normal,
            };
        }
    }
    let mut best = room;
    for ob in &scene.obstacles {
        if let Some(hit) = ray_aabb(p, dir, ob) {
            if hit.t < best.t {
                best = hit;
            }
        }
    }
    let ln = (LIGHT[0] * LIGHT[0] + LIGHT[1] * LIGHT[1] + LIGHT[2] * LIGHT[2]).sqrt();
    let ndotl = (best.normal[0] * LIGHT[0] + best.normal[1] * LIGHT[1] + best.normal[2] * LIGHT[2])
        / ln;
    let shade = (AMBIENT + (1.0 - AMBIENT) * ndotl.max(0.0)) as f32;
    let color = [
        best.albedo[0] * shade,
        best.albedo[1] * shade,
        best.albedo[2] * shade,
    ];
    (best.t, color)
}

fn ray_aabb(p: [f64; 3], dir: [f64; 3], ob: &Obstacle) -> Option<Hit> {
    let mut t_lo = 0.0f64;
    let mut t_hi = f64::INFINITY;
    let mut axis = 0usize;
    for a in 0..3 {
        let lo = ob.center[a] - ob.half_extents[a];
        let hi = ob.center[a] + ob.half_extents[a];
        if dir[a] == 0.0 {
            if p[a] < lo || p[a] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut t0, mut t1) = ((lo - p[a]) * inv, (hi - p[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_lo {
            t_lo = t0;
            axis = a;
        }
        t_hi = t_hi.min(t1);
        if t_lo > t_hi {
            return None;
        }
    }
    if t_lo <= 1e-12 {
        return None;
    }
    let mut normal = [0.0; 3];
    normal[axis] = -dir[axis].signum();
    Some(Hit {
        t: t_lo,
        albedo: ob.albedo,
        normal,
    })
}

/// Direction of an ERP pixel center in the camera frame (+z up).
#[inline]
pub fn erp_direction(x: usize, y: usize, w: usize, h: usize) -> [f64; 3] {
    let lon = 2.0 * PI * (x as f64 + 0.5) / w as f64;
    let colat = PI * (y as f64 + 0.5) / h as f64;
    [colat.sin() * lon.cos(), colat.sin() * lon.sin(), colat.cos()]
}

/// Renders the scene to a color image and exact depth frame.
pub fn render_erp(scene: &BoxScene, w: usize, h: usize) -> Result<(ErpImage, DepthFrame)> {
    scene.validate()?;
    if w == 0 || h == 0 {
        return Err(Error::invalid("zero render dimension"));
    }
    let rot = scene.rotation_matrix();
    let mut color = vec![0f32; w * h * 3];
    let mut depth = vec![0f32; w * h];
    color
        .par_chunks_mut(w * 3)
        .zip(depth.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (crow, drow))| {
            for x in 0..w {
                let d_cam = erp_direction(x, y, w, h);
                let d_world = mat_vec(&rot, d_cam);
                let (t, rgb) = cast_ray(scene, d_world);
                drow[x] = t as f32;
                crow[x * 3..x * 3 + 3].copy_from_slice(&rgb);
            }
        });
    let img = ErpImage::new(w, h, 3, color)?;
    let frame = DepthFrame::new(w, h, depth, DEPTH_MIN, DEPTH_MAX)?;
    Ok((img, frame))
}

/// Renders the scene re-tilted by each angle (degrees, pitch axis).
pub fn render_tilted_set(
    scene: &BoxScene,
    angles_deg: &[f64],
    w: usize,
    h: usize,
) -> Result<Vec<(f64, ErpImage, DepthFrame)>> {
    angles_deg
        .iter()
        .map(|&a| {
            let (img, depth) = render_erp(&scene.tilted(a), w, h)?;
            Ok((a, img, depth))
        })
        .collect()
}

/// Deterministic pseudo-random rooms: extents 2–8 m per axis, up to three
/// obstacles, camera placed with at least 0.3 m clearance from walls and
/// obstacles, random yaw.
pub fn make_scenes(seed: u64, n_scenes: usize) -> Vec<BoxScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_scenes).map(|_| random_scene(&mut rng)).collect()
}

/// Camera clearance enforced by the generator (meters).
pub const CAMERA_CLEARANCE: f64 = 0.3;

fn random_scene(rng: &mut ChaCha8Rng) -> BoxScene {
    let half_extents = [
        rng.gen_range(1.0..4.0),
        rng.gen_range(1.0..4.0),
        rng.gen_range(1.0..4.0),
    ];
    let camera = [
        rng.gen_range(-(half_extents[0] - CAMERA_CLEARANCE)..(half_extents[0] - CAMERA_CLEARANCE)),
        rng.gen_range(-(half_extents[1] - CAMERA_CLEARANCE)..(half_extents[1] - CAMERA_CLEARANCE)),
        rng.gen_range(-(half_extents[2] - CAMERA_CLEARANCE)..(half_extents[2] - CAMERA_CLEARANCE)),
    ];
    let yaw = rng.gen_range(0.0..2.0 * PI);
    let rotation = [(yaw * 0.5).cos(), 0.0, 0.0, (yaw * 0.5).sin()];
    let mut albedo = || {
        [
            rng.gen_range(0.15..0.95) as f32,
            rng.gen_range(0.15..0.95) as f32,
            rng.gen_range(0.15..0.95) as f32,
        ]
    };
    let face_albedos = [albedo(), albedo(), albedo(), albedo(), albedo(), albedo()];
    let n_obstacles = rng.gen_range(0..=3usize);
    let mut obstacles = Vec::new();
    for _ in 0..n_obstacles {
        for _attempt in 0..20 {
            let he = [
                rng.gen_range(0.1..0.75),
                rng.gen_range(0.1..0.75),
                rng.gen_range(0.1..0.75),
            ];
            let mut center = [0.0; 3];
            let mut fits = true;
            for a in 0..3 {
                let room = half_extents[a] - he[a] - 0.05;
                if room <= 0.0 {
                    fits = false;
                    break;
                }
                center[a] = rng.gen_range(-room..room);
            }
            if !fits {
                continue;
            }
            let clear = (0..3).any(|a| {
                (camera[a] - center[a]).abs() >= he[a] + CAMERA_CLEARANCE
            });
            if !clear {
                continue;
            }
            let albedo = [
                rng.gen_range(0.15..0.95) as f32,
                rng.gen_range(0.15..0.95) as f32,
                rng.gen_range(0.15..0.95) as f32,
            ];
            obstacles.push(Obstacle {
                center,
                half_extents: he,
                albedo,
            });
            break;
        }
    }
    BoxScene {
        half_extents,
        camera,
        rotation,
        face_albedos,
        obstacles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_room() -> BoxScene {
        BoxScene {
            half_extents: [1.0, 1.0, 1.0],
            camera: [0.0, 0.0, 0.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
            face_albedos: [[0.5; 3]; 6],
            obstacles: vec![],
        }
    }

    #[test]
    fn center_camera_axis_and_corner_depths() {
        let scene = unit_room();
        for dir in [
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, -1.0],
        ] {
            let (t, _) = cast_ray(&scene, dir);
            assert!((t - 1.0).abs() < 1e-12);
        }
        let s = 1.0 / 3f64.sqrt();
        let (t, _) = cast_ray(&scene, [s, s, s]);
        assert!((t - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn depth_positive_and_bounded_by_diagonal() {
        let scenes = make_scenes(7, 3);
        for scene in &scenes {
            let (_, depth) = render_erp(scene, 32, 16).unwrap();
            let diag = scene.diagonal() as f32;
            for &d in &depth.depth {
                assert!(d > 0.0 && d <= diag + 1e-4);
            }
        }
    }

    #[test]
    fn tilt_zero_is_identity() {
        let scene = make_scenes(3, 1).remove(0);
        let (img0, d0) = render_erp(&scene, 16, 8).unwrap();
        let set = render_tilted_set(&scene, &[0.0, 2.0, 5.0], 16, 8).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set[0].1.data, img0.data);
        assert_eq!(set[0].2.depth, d0.depth);
        // Same geometry: bounds preserved under tilt.
        let (min0, max0) = min_max(&d0.depth);
        let (min5, max5) = min_max(&set[2].2.depth);
        assert!((min0 - min5).abs() < 0.2 && (max0 - max5).abs() < 0.2);
    }

    fn min_max(v: &[f32]) -> (f32, f32) {
        v.iter()
            .fold((f32::MAX, f32::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }

    #[test]
    fn generator_is_deterministic_and_clear() {
        let a = make_scenes(42, 8);
        let b = make_scenes(42, 8);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        for scene in &a {
            scene.validate().unwrap();
            for ax in 0..3 {
                assert!(scene.camera[ax].abs() <= scene.half_extents[ax] - CAMERA_CLEARANCE);
            }
            for ob in &scene.obstacles {
                let clear = (0..3).any(|k| {
                    (scene.camera[k] - ob.center[k]).abs() >= ob.half_extents[k] + CAMERA_CLEARANCE
                });
                assert!(clear);
            }
        }
    }

    #[test]
    fn rejects_camera_outside() {
        let mut scene = unit_room();
        scene.camera = [1.5, 0.0, 0.0];
        assert!(matches!(scene.validate(), Err(Error::InvalidScene(_))));
        assert!(render_erp(&scene, 8, 4).is_err());
    }

    #[test]
    fn obstacle_occludes() {
        let mut scene = unit_room();
        scene.half_extents = [2.0, 2.0, 2.0];
        scene.obstacles.push(Obstacle {
            center: [1.0, 0.0, 0.0],
            half_extents: [0.25, 0.25, 0.25],
            albedo: [0.9, 0.1, 0.1],
        });
        let (t, _) = cast_ray(&scene, [1.0, 0.0, 0.0]);
        assert!((t - 0.75).abs() < 1e-12);
        let (t, _) = cast_ray(&scene, [-1.0, 0.0, 0.0]);
        assert!((t - 2.0).abs() < 1e-12);
    }
}
