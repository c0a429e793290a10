//! Procedural corridor scenes with exact depth and poses.
//!
//! World axes follow the camera convention: x right, y down, z forward.
//! The corridor has a flat floor and ceiling, side walls whose lateral
//! position is a height field `w + a sin(2 pi z / lambda + phase)` over z,
//! and an end wall. Surfaces carry band-limited value-noise textures whose
//! octaves fade out as their period approaches the pixel footprint.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::maps::{DepthMap, Image};

/// Minimum clearance between the camera and any surface.
const CLEARANCE: f64 = 0.2;
const MARCH_STEPS: usize = 24;
const BISECT_STEPS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Corridor {
    pub half_width: f64,
    pub wall_amplitude: f64,
    pub wall_wavelength: f64,
    /// Floor plane `y = floor_y` (below the camera, so positive).
    pub floor_y: f64,
    /// Ceiling plane `y = ceiling_y` (negative).
    pub ceiling_y: f64,
    pub end_z: f64,
    pub texture_seed: u64,
}

impl Default for Corridor {
    fn default() -> Self {
        Self {
            half_width: 2.2,
            wall_amplitude: 0.35,
            wall_wavelength: 7.0,
            floor_y: 1.4,
            ceiling_y: -2.2,
            end_z: 400.0,
            texture_seed: 0,
        }
    }
}

/// Fronto-parallel textured plane `z = depth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneWorld {
    pub depth: f64,
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum World {
    Corridor(Corridor),
    Plane(PlaneWorld),
}

/// Smooth forward motion with lateral sway, vertical bob and yaw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Trajectory {
    pub start_z: f64,
    /// Mean forward speed in meters per frame.
    pub speed: f64,
    /// Relative amplitude of periodic speed changes.
    pub speed_variation: f64,
    pub speed_period: f64,
    pub sway_amplitude: f64,
    pub sway_period: f64,
    pub bob_amplitude: f64,
    pub bob_period: f64,
    pub yaw_amplitude: f64,
    pub yaw_period: f64,
    pub phase: f64,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            start_z: 0.0,
            speed: 0.22,
            speed_variation: 0.3,
            speed_period: 80.0,
            sway_amplitude: 0.4,
            sway_period: 90.0,
            bob_amplitude: 0.05,
            bob_period: 25.0,
            yaw_amplitude: 0.08,
            yaw_period: 70.0,
            phase: 0.0,
        }
    }
}

impl Trajectory {
    /// A static camera at the origin of the trajectory.
    pub fn stationary(start_z: f64) -> Self {
        Self {
            start_z,
            speed: 0.0,
            speed_variation: 0.0,
            sway_amplitude: 0.0,
            bob_amplitude: 0.0,
            yaw_amplitude: 0.0,
            ..Self::default()
        }
    }

    /// Random motion parameters around the defaults.
    pub fn random(start_z: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = std::f64::consts::TAU;
        Self {
            start_z,
            speed: rng.gen_range(0.18..0.26),
            speed_variation: rng.gen_range(0.1..0.4),
            speed_period: rng.gen_range(50.0..120.0),
            sway_amplitude: rng.gen_range(0.2..0.5),
            sway_period: rng.gen_range(60.0..140.0),
            bob_amplitude: rng.gen_range(0.0..0.06),
            bob_period: rng.gen_range(15.0..40.0),
            yaw_amplitude: rng.gen_range(0.03..0.1),
            yaw_period: rng.gen_range(50.0..110.0),
            phase: rng.gen_range(0.0..tau),
        }
    }

    /// Camera-to-world pose at (possibly fractional) frame time `t`.
    pub fn camera_to_world(&self, t: f64) -> Pose {
        let tau = std::f64::consts::TAU;
        let p = self.phase;
        let w = tau / self.speed_period;
        let z = self.start_z + self.speed * t
            - self.speed * self.speed_variation / w * ((w * t + p).cos() - p.cos());
        let x = self.sway_amplitude * (tau * t / self.sway_period + 1.3 * p).sin();
        let y = self.bob_amplitude * (tau * t / self.bob_period + 0.7 * p).sin();
        let yaw = self.yaw_amplitude * (tau * t / self.yaw_period + 2.1 * p).sin();
        let pitch = 0.5 * self.bob_amplitude * (tau * t / self.bob_period + 0.7 * p).cos();
        let r = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
        Pose {
            axis_angle: r.scaled_axis().into(),
            translation: [x, y, z],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub world: World,
    pub trajectory: Trajectory,
    pub intrinsics: Intrinsics,
    pub frames: usize,
    /// Color samples per pixel along each axis.
    pub supersample: usize,
}

impl SyntheticScene {
    /// Random trajectory through `world` starting at `start_z`.
    pub fn random(world: World, intrinsics: Intrinsics, frames: usize, start_z: f64, seed: u64) -> Self {
        Self {
            world,
            trajectory: Trajectory::random(start_z, seed),
            intrinsics,
            frames,
            supersample: 1,
        }
    }
}

/// KITTI-like intrinsics rescaled to `width x height`.
pub fn default_intrinsics(width: usize, height: usize) -> Intrinsics {
    // Normalized values of the KITTI raw left color camera.
    let (fx, fy, cx, cy) = (0.58, 1.92, 0.5, 0.5);
    Intrinsics {
        fx: fx * width as f64,
        fy: fy * height as f64,
        cx: cx * width as f64 - 0.5,
        cy: cy * height as f64 - 0.5,
        width,
        height,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Surface {
    Floor,
    Ceiling,
    LeftWall,
    RightWall,
    End,
}

impl Surface {
    fn id(self) -> u64 {
        self as u64
    }

    fn tint(self) -> [f64; 3] {
        match self {
            Surface::Floor => [0.55, 0.6, 0.5],
            Surface::Ceiling => [0.6, 0.65, 0.8],
            Surface::LeftWall => [0.85, 0.55, 0.45],
            Surface::RightWall => [0.5, 0.7, 0.85],
            Surface::End => [0.9, 0.85, 0.45],
        }
    }
}

struct Hit {
    t: f64,
    surface: Surface,
    /// Unit surface normal, used for the pixel footprint.
    normal: Vector3<f64>,
}

impl World {
    fn texture_seed(&self) -> u64 {
        match self {
            World::Corridor(c) => c.texture_seed,
            World::Plane(p) => p.texture_seed,
        }
    }

    /// Error unless `o` lies inside free space with some clearance.
    fn check_camera(&self, o: &Vector3<f64>) -> Result<()> {
        let ok = match self {
            World::Corridor(c) => {
                o.x.abs() < c.half_width - c.wall_amplitude - CLEARANCE
                    && o.y < c.floor_y - CLEARANCE
                    && o.y > c.ceiling_y + CLEARANCE
                    && o.z < c.end_z - CLEARANCE
            }
            World::Plane(p) => o.z < p.depth - CLEARANCE,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "camera at ({:.3}, {:.3}, {:.3}) is outside the free space of the scene",
                o.x, o.y, o.z
            )))
        }
    }

    /// First intersection along `o + t d`, where `t` is camera depth.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match self {
            World::Plane(p) => (d.z > 0.0).then(|| Hit {
                t: (p.depth - o.z) / d.z,
                surface: Surface::End,
                normal: Vector3::new(0.0, 0.0, -1.0),
            }),
            World::Corridor(c) => {
                let mut best: Option<Hit> = None;
                let mut offer = |t: f64, surface: Surface, normal: Vector3<f64>| {
                    if t > 0.0 && t.is_finite() && best.as_ref().map_or(true, |b| t < b.t) {
                        best = Some(Hit { t, surface, normal });
                    }
                };
                if d.y > 0.0 {
                    offer((c.floor_y - o.y) / d.y, Surface::Floor, Vector3::new(0.0, -1.0, 0.0));
                }
                if d.y < 0.0 {
                    offer((c.ceiling_y - o.y) / d.y, Surface::Ceiling, Vector3::new(0.0, 1.0, 0.0));
                }
                if d.z > 0.0 {
                    offer((c.end_z - o.z) / d.z, Surface::End, Vector3::new(0.0, 0.0, -1.0));
                }
                if d.x > 0.0 {
                    if let Some(t) = c.wall_hit(o, d, 1.0) {
                        offer(t, Surface::RightWall, Vector3::new(-1.0, 0.0, 0.0));
                    }
                }
                if d.x < 0.0 {
                    if let Some(t) = c.wall_hit(o, d, -1.0) {
                        offer(t, Surface::LeftWall, Vector3::new(1.0, 0.0, 0.0));
                    }
                }
                best
            }
        }
    }
}

impl Corridor {
    fn wall_phase(side: f64) -> f64 {
        if side > 0.0 {
            0.0
        } else {
            1.9
        }
    }

    /// Lateral distance of the wall on `side` (+1 right, -1 left) at depth `z`.
    pub fn wall_offset(&self, z: f64, side: f64) -> f64 {
        let k = std::f64::consts::TAU / self.wall_wavelength;
        self.half_width + self.wall_amplitude * (k * z + Self::wall_phase(side)).sin()
    }

    /// Smallest positive root of the wall clearance along the ray.
    fn wall_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>, side: f64) -> Option<f64> {
        let g = |t: f64| {
            let p = o + d * t;
            self.wall_offset(p.z, side) - side * p.x
        };
        let dx = side * d.x;
        let t_in = ((self.half_width - self.wall_amplitude) - side * o.x) / dx;
        let t_out = ((self.half_width + self.wall_amplitude) - side * o.x) / dx;
        let mut lo = t_in.max(0.0);
        let step = (t_out - lo) / MARCH_STEPS as f64;
        let mut hi = None;
        for k in 1..=MARCH_STEPS {
            let t = lo + step;
            if k == MARCH_STEPS || g(t) <= 0.0 {
                hi = Some(if k == MARCH_STEPS { t_out } else { t });
                break;
            }
            lo = t;
        }
        let mut hi = hi?;
        for _ in 0..BISECT_STEPS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

fn hash(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, key: u64) -> f64 {
    let h = hash(hash(key ^ ix as u64).wrapping_add(iy as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Value noise in `[0, 1]` on a unit lattice.
fn value_noise(u: f64, v: f64, key: u64) -> f64 {
    let (fu, fv) = (u.floor(), v.floor());
    let (iu, iv) = (fu as i64, fv as i64);
    let (su, sv) = (fade(u - fu), fade(v - fv));
    let a = lattice(iu, iv, key);
    let b = lattice(iu + 1, iv, key);
    let c = lattice(iu, iv + 1, key);
    let d = lattice(iu + 1, iv + 1, key);
    let top = a + (b - a) * su;
    let bottom = c + (d - c) * su;
    top + (bottom - top) * sv
}

const OCTAVES: [(f64, f64); 5] = [(0.5, 0.3), (1.1, 0.25), (2.3, 0.2), (4.7, 0.15), (9.5, 0.1)];

/// Multi-octave noise; octaves whose period is close to the pixel
/// footprint (meters) are faded out to avoid aliasing.
fn fbm(u: f64, v: f64, key: u64, footprint: f64) -> f64 {
    let mut acc = 0.5;
    for (o, &(freq, amp)) in OCTAVES.iter().enumerate() {
        let cycles_per_pixel = freq * footprint;
        let w = (1.5 - 2.0 * cycles_per_pixel).clamp(0.0, 1.0);
        if w > 0.0 {
            acc += amp * w * (value_noise(u * freq, v * freq, hash(key ^ o as u64)) - 0.5) * 1.6;
        }
    }
    acc.clamp(0.0, 1.0)
}

fn shade(hit: &Hit, p: &Vector3<f64>, footprint: f64, seed: u64) -> [f64; 3] {
    let (u, v) = match hit.surface {
        Surface::Floor | Surface::Ceiling => (p.x, p.z),
        Surface::LeftWall | Surface::RightWall => (p.z, p.y),
        Surface::End => (p.x, p.y),
    };
    let key = hash(seed ^ (hit.surface.id() << 40));
    let intensity = 0.12 + 0.8 * fbm(u, v, key, footprint);
    let tint = hit.surface.tint();
    let mut rgb = [0.0; 3];
    for (k, c) in rgb.iter_mut().enumerate() {
        let hue = value_noise(u * 0.35, v * 0.35, hash(key ^ (0x100 + k as u64))) - 0.5;
        *c = (intensity * (tint[k] + 0.3 * hue)).clamp(0.0, 1.0);
    }
    rgb
}

/// Render one view. Depth is the z-distance along the pixel-centre ray.
pub fn render_frame(world: &World, intr: &Intrinsics, camera_to_world: &Pose, supersample: usize) -> Result<(Image, DepthMap)> {
    intr.validate()?;
    let r = camera_to_world.rotation();
    let o = Vector3::from(camera_to_world.translation);
    world.check_camera(&o)?;
    let (w, h) = (intr.width, intr.height);
    let n = w * h;
    let ss = supersample.max(1);
    let seed = world.texture_seed();
    let mut rgb = vec![0f32; 3 * n];
    let mut depth = vec![0f32; n];
    let ray = |x: f64, y: f64| r * Vector3::new((x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0);
    for py in 0..h {
        for px in 0..w {
            let i = py * w + px;
            let d = ray(px as f64, py as f64);
            if let Some(hit) = world.intersect(&o, &d) {
                depth[i] = hit.t as f32;
            }
            let mut acc = [0.0f64; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = px as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                    let y = py as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                    let d = ray(x, y);
                    let Some(hit) = world.intersect(&o, &d) else {
                        continue;
                    };
                    let p = o + d * hit.t;
                    let cos = (hit.normal.dot(&d).abs() / d.norm()).max(0.1);
                    let footprint = hit.t * d.norm() / intr.fx.min(intr.fy) / cos / ss as f64;
                    let c = shade(&hit, &p, footprint, seed);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let norm = (ss * ss) as f64;
            for k in 0..3 {
                rgb[k * n + i] = (acc[k] / norm) as f32;
            }
        }
    }
    Ok((Image::new(w, h, rgb)?, DepthMap::new(w, h, depth)?))
}

/// Render every frame of `scene`.
pub fn generate_synthetic(scene: &SyntheticScene, id: &str) -> Result<Sequence> {
    if scene.frames == 0 {
        return Err(Error::Config("synthetic scene needs at least one frame".into()));
    }
    let mut frames = Vec::with_capacity(scene.frames);
    for t in 0..scene.frames {
        let pose = scene.trajectory.camera_to_world(t as f64);
        let (image, depth) = render_frame(&scene.world, &scene.intrinsics, &pose, scene.supersample)?;
        frames.push(Frame {
            image,
            depth: Some(depth),
            camera_to_world: Some(pose),
        });
    }
    Ok(Sequence {
        id: id.to_string(),
        intrinsics: scene.intrinsics.clone(),
        frames,
    })
}
