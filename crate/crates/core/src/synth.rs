//! Synthetic worlds, trajectories, and scans, plus brute-force oracles used
//! by the desk-scale test suites.
//!
//! Everything here is deterministic in its seed. Ray casting derives an
//! independent random stream per ray, so parallel casting produces identical
//! scans regardless of schedule.

use crate::geometry::{RigidTransform, Rotation};
use crate::scan::{Point, Scan};
use crate::voxel_grid::{Correspondence, VoxelMap};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// A bounded rectangular patch: center, unit normal, and half-extents along
/// the two in-plane axes.
#[derive(Debug, Clone)]
pub struct PlanePatch {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub extent: (f64, f64),
    axes: (Vector3<f64>, Vector3<f64>),
}

impl PlanePatch {
    /// `extent.0` spans the first in-plane axis (the projection of x, or of
    /// y when the normal is x-like), `extent.1` the second.
    pub fn new(center: Vector3<f64>, normal: Vector3<f64>, extent: (f64, f64)) -> Self {
        let normal = normal.normalize();
        let seed_axis = if normal.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let u = (seed_axis - normal * seed_axis.dot(&normal)).normalize();
        let v = normal.cross(&u).normalize();
        PlanePatch {
            center,
            normal,
            extent,
            axes: (u, v),
        }
    }

    fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = dir.dot(&self.normal);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.center - origin).dot(&self.normal) / denom;
        if t <= 1e-6 {
            return None;
        }
        let hit = origin + dir * t;
        let local = hit - self.center;
        if local.dot(&self.axes.0).abs() <= self.extent.0
            && local.dot(&self.axes.1).abs() <= self.extent.1
        {
            Some(t)
        } else {
            None
        }
    }

    fn transformed(&self, t: &RigidTransform) -> Self {
        PlanePatch {
            center: t.transform_point(&self.center),
            normal: t.rotation * self.normal,
            extent: self.extent,
            axes: (t.rotation * self.axes.0, t.rotation * self.axes.1),
        }
    }
}

/// A straight edge segment: anchor point, unit direction, length.
#[derive(Debug, Clone)]
pub struct EdgeSegment {
    pub point: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub length: f64,
}

impl EdgeSegment {
    pub fn new(point: Vector3<f64>, direction: Vector3<f64>, length: f64) -> Self {
        EdgeSegment {
            point,
            direction: direction.normalize(),
            length,
        }
    }

    /// Distance from `p` to the segment.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let s = (p - self.point).dot(&self.direction).clamp(0.0, self.length);
        (p - (self.point + self.direction * s)).norm()
    }
}

/// Sinusoidal ground height field `z = amplitude · sin(2π x / wavelength)`.
#[derive(Debug, Clone, Copy)]
pub struct Undulation {
    pub amplitude: f64,
    pub wavelength: f64,
    pub base_z: f64,
}

impl Undulation {
    pub fn height(&self, x: f64) -> f64 {
        self.base_z + self.amplitude * (2.0 * std::f64::consts::PI * x / self.wavelength).sin()
    }

    pub fn slope(&self, x: f64) -> f64 {
        let k = 2.0 * std::f64::consts::PI / self.wavelength;
        self.amplitude * k * (k * x).cos()
    }

    fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<f64> {
        // Sphere-tracing style march: |d/dt (z(t) − h(x(t)))| is bounded by
        // |d_z| + |d_x| · A · 2π/λ, so stepping by f/L never crosses zero.
        let k = 2.0 * std::f64::consts::PI / self.wavelength;
        let lip = dir.z.abs() + dir.x.abs() * self.amplitude.abs() * k + 1e-9;
        let f = |t: f64| {
            let p = origin + dir * t;
            p.z - self.height(p.x)
        };
        let mut t = 1e-4;
        let mut ft = f(t);
        if ft < 0.0 {
            return None; // started below ground
        }
        while t < max_range {
            let step = (ft / lip).max(0.02);
            let t_next = t + step;
            let f_next = f(t_next);
            if f_next <= 0.0 {
                // Bisect inside [t, t_next].
                let (mut lo, mut hi) = (t, t_next);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let hit = 0.5 * (lo + hi);
                return (hit <= max_range).then_some(hit);
            }
            // Heading away from the ground with no chance to return.
            if dir.z >= 0.0 && f_next > self.amplitude.abs() * 2.0 + 1.0 {
                return None;
            }
            t = t_next;
            ft = f_next;
        }
        None
    }
}

/// Synthetic scene: bounded plane patches, edge segments shared between
/// them, and an optional undulating ground.
#[derive(Debug, Clone)]
pub struct World {
    pub planes: Vec<PlanePatch>,
    pub edges: Vec<EdgeSegment>,
    pub ground: Option<Undulation>,
    pub seed: u64,
}

impl World {
    /// Nearest surface hit along a ray, if any.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<f64> {
        let mut best: Option<f64> = None;
        for plane in &self.planes {
            if let Some(t) = plane.raycast(origin, dir) {
                if t <= max_range && best.map_or(true, |b| t < b) {
                    best = Some(t);
                }
            }
        }
        if let Some(ground) = &self.ground {
            if let Some(t) = ground.raycast(origin, dir, best.unwrap_or(max_range)) {
                if best.map_or(true, |b| t < b) {
                    best = Some(t);
                }
            }
        }
        best
    }

    /// Rigidly transformed copy (undulating ground does not support
    /// transformation and must be absent).
    pub fn transformed(&self, t: &RigidTransform) -> World {
        assert!(
            self.ground.is_none(),
            "height-field ground cannot be rigidly transformed"
        );
        World {
            planes: self.planes.iter().map(|p| p.transformed(t)).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeSegment {
                    point: t.transform_point(&e.point),
                    direction: t.rotation * e.direction,
                    length: e.length,
                })
                .collect(),
            ground: None,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub enum WorldPreset {
    /// Closed rectangular room: 6 planes, 12 edges.
    BoxRoom { size: f64, height: f64 },
    /// Ground plane (optionally undulating) with two side walls, an end
    /// wall, and alternating partial cross-walls, for straight courses
    /// along +x.
    Corridor {
        length: f64,
        width: f64,
        wall_height: f64,
        cross_walls: usize,
    },
}

#[derive(Debug, Clone)]
pub struct WorldParams {
    pub preset: WorldPreset,
    pub undulation_amplitude: f64,
    pub undulation_wavelength: f64,
    /// Free-standing box pillars with random yaw, for extra vertical edges.
    pub pillar_count: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            preset: WorldPreset::BoxRoom {
                size: 16.0,
                height: 5.0,
            },
            undulation_amplitude: 0.0,
            undulation_wavelength: 20.0,
            pillar_count: 0,
        }
    }
}

/// Builds a deterministic scene from a seed and parameters.
pub fn generate_world(seed: u64, params: &WorldParams) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planes = Vec::new();
    let mut edges = Vec::new();
    let mut ground = None;

    match params.preset {
        WorldPreset::BoxRoom { size, height } => {
            let h = size / 2.0;
            // Floor and ceiling.
            if params.undulation_amplitude > 0.0 {
                ground = Some(Undulation {
                    amplitude: params.undulation_amplitude,
                    wavelength: params.undulation_wavelength,
                    base_z: 0.0,
                });
            } else {
                planes.push(PlanePatch::new(
                    Vector3::new(0.0, 0.0, 0.0),
                    Vector3::z(),
                    (h, h),
                ));
            }
            planes.push(PlanePatch::new(
                Vector3::new(0.0, 0.0, height),
                -Vector3::z(),
                (h, h),
            ));
            // Walls with inward normals.
            let walls = [
                (Vector3::new(h, 0.0, height / 2.0), -Vector3::x()),
                (Vector3::new(-h, 0.0, height / 2.0), Vector3::x()),
                (Vector3::new(0.0, h, height / 2.0), -Vector3::y()),
                (Vector3::new(0.0, -h, height / 2.0), Vector3::y()),
            ];
            for (center, normal) in walls {
                planes.push(PlanePatch::new(center, normal, (h, height / 2.0)));
            }
            // 4 vertical edges, 4 floor edges, 4 ceiling edges.
            for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                edges.push(EdgeSegment::new(
                    Vector3::new(sx * h, sy * h, 0.0),
                    Vector3::z(),
                    height,
                ));
            }
            for z in [0.0, height] {
                edges.push(EdgeSegment::new(
                    Vector3::new(-h, h, z),
                    Vector3::x(),
                    size,
                ));
                edges.push(EdgeSegment::new(
                    Vector3::new(-h, -h, z),
                    Vector3::x(),
                    size,
                ));
                edges.push(EdgeSegment::new(
                    Vector3::new(h, -h, z),
                    Vector3::y(),
                    size,
                ));
                edges.push(EdgeSegment::new(
                    Vector3::new(-h, -h, z),
                    Vector3::y(),
                    size,
                ));
            }
        }
        WorldPreset::Corridor {
            length,
            width,
            wall_height,
            cross_walls,
        } => {
            if params.undulation_amplitude > 0.0 {
                ground = Some(Undulation {
                    amplitude: params.undulation_amplitude,
                    wavelength: params.undulation_wavelength,
                    base_z: 0.0,
                });
            } else {
                planes.push(PlanePatch::new(
                    Vector3::new(length / 2.0, 0.0, 0.0),
                    Vector3::z(),
                    (length / 2.0 + 20.0, width / 2.0 + 20.0),
                ));
            }
            let top = params.undulation_amplitude.abs() + wall_height / 2.0;
            for side in [-1.0, 1.0] {
                planes.push(PlanePatch::new(
                    Vector3::new(length / 2.0, side * width / 2.0, top),
                    Vector3::new(0.0, -side, 0.0),
                    (length / 2.0 + 10.0, wall_height / 2.0 + params.undulation_amplitude.abs()),
                ));
            }
            for (x_end, normal) in [(length + 10.0, -Vector3::x()), (-10.0, Vector3::x())] {
                planes.push(PlanePatch::new(
                    Vector3::new(x_end, 0.0, top),
                    normal,
                    (
                        width / 2.0 + 10.0,
                        wall_height / 2.0 + params.undulation_amplitude.abs(),
                    ),
                ));
            }
            // Chicane walls jutting from alternating sides; they face along
            // the corridor and keep the centerline clear.
            for c in 0..cross_walls {
                let x = length * (c + 1) as f64 / (cross_walls + 1) as f64;
                let side = if c % 2 == 0 { 1.0 } else { -1.0 };
                let depth = width / 3.0;
                let cy = side * (width / 2.0 - depth / 2.0);
                let base = ground.map_or(0.0, |g: Undulation| g.height(x));
                let half_h = wall_height / 2.0;
                for normal in [Vector3::x(), -Vector3::x()] {
                    planes.push(PlanePatch::new(
                        Vector3::new(x, cy, base + half_h) + normal * 0.15,
                        normal,
                        (depth / 2.0, half_h),
                    ));
                }
                // Vertical edges at the free end of each chicane.
                let free_y = cy - side * depth / 2.0;
                for dx in [-0.15, 0.15] {
                    edges.push(EdgeSegment::new(
                        Vector3::new(x + dx, free_y, base),
                        Vector3::z(),
                        wall_height,
                    ));
                }
            }
        }
    }

    for _ in 0..params.pillar_count {
        // Pillar placement keeps the vehicle's driving band clear: the
        // center of the room for box worlds, the centerline for corridors.
        let (cx, cy, half, yaw, height) = match params.preset {
            WorldPreset::BoxRoom { size, height } => (
                rng.gen_range(-size / 6.0..size / 6.0),
                rng.gen_range(-size / 6.0..size / 6.0),
                rng.gen_range(0.3..0.8),
                rng.gen_range(0.0..std::f64::consts::PI),
                height,
            ),
            WorldPreset::Corridor { length, width, wall_height, .. } => {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                (
                    rng.gen_range(5.0..length - 5.0),
                    side * rng.gen_range(2.0..(width / 2.0 - 1.2).max(2.1)),
                    rng.gen_range(0.3..0.8),
                    rng.gen_range(0.0..std::f64::consts::PI),
                    wall_height,
                )
            }
        };
        let rot = Rotation::rot_z(yaw);
        let base = ground.map_or(0.0, |g| g.height(cx) - 0.5);
        let center = Vector3::new(cx, cy, 0.0);
        let top = base + height;
        let mid_z = (base + top) / 2.0;
        let half_h = (top - base) / 2.0;
        for (dir, ext) in [
            (Vector3::x(), half),
            (-Vector3::x(), half),
            (Vector3::y(), half),
            (-Vector3::y(), half),
        ] {
            let n = rot * dir;
            planes.push(PlanePatch::new(
                center + n * ext + Vector3::new(0.0, 0.0, mid_z),
                n,
                (half, half_h),
            ));
        }
        for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let corner = center
                + rot * Vector3::new(sx * half, sy * half, 0.0)
                + Vector3::new(0.0, 0.0, base);
            edges.push(EdgeSegment::new(corner, Vector3::z(), top - base));
        }
    }

    World {
        planes,
        edges,
        ground,
        seed,
    }
}

/// Mechanical spinning LiDAR model (defaults are VLP-32C-like).
#[derive(Debug, Clone)]
pub struct LidarModel {
    pub rings: u32,
    /// Vertical field of view (min, max), degrees.
    pub vertical_fov_deg: (f64, f64),
    pub azimuth_step_deg: f64,
    pub max_range: f64,
    pub range_noise_sigma: f64,
    pub sweep_duration: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        LidarModel {
            rings: 32,
            vertical_fov_deg: (-25.0, 15.0),
            azimuth_step_deg: 0.4,
            max_range: 100.0,
            range_noise_sigma: 0.02,
            sweep_duration: 0.1,
        }
    }
}

impl LidarModel {
    /// Coarser model for fast tests.
    pub fn coarse() -> Self {
        LidarModel {
            rings: 16,
            vertical_fov_deg: (-25.0, 15.0),
            azimuth_step_deg: 1.5,
            max_range: 60.0,
            range_noise_sigma: 0.0,
            sweep_duration: 0.1,
        }
    }

    pub fn ring_elevation_deg(&self, ring: u32) -> f64 {
        if self.rings <= 1 {
            return self.vertical_fov_deg.0;
        }
        let (lo, hi) = self.vertical_fov_deg;
        lo + (hi - lo) * ring as f64 / (self.rings - 1) as f64
    }

    pub fn azimuth_steps(&self) -> usize {
        (360.0 / self.azimuth_step_deg).round() as usize
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Casts one ray per (ring, azimuth) from `pose` and returns the hits as a
/// sensor-frame scan. Range noise is sampled from a per-ray derived stream,
/// and each point's noise covariance is `σ² d dᵀ` along its ray direction.
pub fn simulate_scan(world: &World, pose: &RigidTransform, model: &LidarModel, seed: u64) -> Scan {
    let n_az = model.azimuth_steps();
    let sigma = model.range_noise_sigma;
    let points: Vec<Point> = (0..model.rings)
        .into_par_iter()
        .flat_map_iter(|ring| {
            let elevation = model.ring_elevation_deg(ring).to_radians();
            let (sin_e, cos_e) = (elevation.sin(), elevation.cos());
            let mut ring_points = Vec::with_capacity(n_az / 4);
            for j in 0..n_az {
                let az = j as f64 * model.azimuth_step_deg.to_radians();
                let dir_sensor = Vector3::new(cos_e * az.cos(), cos_e * az.sin(), sin_e);
                let dir_world = pose.rotation * dir_sensor;
                if let Some(range) = world.raycast(&pose.translation, &dir_world, model.max_range)
                {
                    let range = if sigma > 0.0 {
                        let key = ((ring as u64) << 32) | j as u64;
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(key)));
                        let n: f64 = rng.sample(StandardNormal);
                        range + sigma * n
                    } else {
                        range
                    };
                    let time_offset = j as f64 / n_az as f64 * model.sweep_duration;
                    let noise_cov = if sigma > 0.0 {
                        sigma * sigma * dir_sensor * dir_sensor.transpose()
                    } else {
                        Matrix3::zeros()
                    };
                    ring_points.push(
                        Point::new(dir_sensor * range, time_offset, ring)
                            .with_noise_cov(noise_cov),
                    );
                }
            }
            ring_points
        })
        .collect();
    Scan::from_sorted_points(points, 0.0, model.sweep_duration)
}

#[derive(Debug, Clone)]
pub enum PathKind {
    /// Straight line along `direction` at constant speed.
    Line { direction: Vector3<f64> },
    /// Closed square loop with rounded corners, counter-clockwise, starting
    /// at the middle of the first straight.
    SquareLoop { side: f64, corner_radius: f64 },
}

#[derive(Debug, Clone)]
pub struct TrajectoryParams {
    pub kind: PathKind,
    pub start: Vector3<f64>,
    pub speed: f64,
    pub scan_rate: f64,
    pub scan_count: usize,
    /// Elevation sinusoid amplitude (meters); pitch follows the slope.
    pub elevation_amplitude: f64,
    pub elevation_wavelength: f64,
    /// Seconds to ramp from standstill to cruise speed.
    pub speed_ramp: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        TrajectoryParams {
            kind: PathKind::Line {
                direction: Vector3::x(),
            },
            start: Vector3::new(0.0, 0.0, 1.2),
            speed: 1.0,
            scan_rate: 10.0,
            scan_count: 100,
            elevation_amplitude: 0.0,
            elevation_wavelength: 20.0,
            speed_ramp: 0.0,
        }
    }
}

/// Samples `(stamp, pose)` pairs at the scan rate. Zero sinusoid amplitude
/// gives a planar trajectory with zero pitch.
pub fn generate_trajectory(params: &TrajectoryParams) -> Vec<(f64, RigidTransform)> {
    let dt = 1.0 / params.scan_rate;
    (0..params.scan_count)
        .map(|i| {
            let t = i as f64 * dt;
            let s = if params.speed_ramp > 0.0 && t < params.speed_ramp {
                params.speed * t * t / (2.0 * params.speed_ramp)
            } else if params.speed_ramp > 0.0 {
                params.speed * (t - params.speed_ramp / 2.0)
            } else {
                params.speed * t
            };
            let (pos_xy, yaw) = match &params.kind {
                PathKind::Line { direction } => {
                    let d = direction.normalize();
                    (params.start + d * s, d.y.atan2(d.x))
                }
                PathKind::SquareLoop {
                    side,
                    corner_radius,
                } => {
                    let (p, yaw) = square_loop_point(*side, *corner_radius, s);
                    (params.start + p, yaw)
                }
            };
            let (z_off, pitch) = if params.elevation_amplitude != 0.0 {
                let k = 2.0 * std::f64::consts::PI / params.elevation_wavelength;
                let z = params.elevation_amplitude * (k * s).sin();
                let slope = params.elevation_amplitude * k * (k * s).cos();
                (z, -slope.atan())
            } else {
                (0.0, 0.0)
            };
            let rotation = Rotation::rot_z(yaw) * Rotation::rot_y(pitch);
            (
                t,
                RigidTransform::new(rotation, pos_xy + Vector3::new(0.0, 0.0, z_off)),
            )
        })
        .collect()
}

/// Arc-length point on a rounded square loop of the given side length,
/// wrapping around so `s = perimeter` lands exactly on `s = 0`.
fn square_loop_point(side: f64, corner_radius: f64, s: f64) -> (Vector3<f64>, f64) {
    let r = corner_radius.min(side / 2.0);
    let straight = side - 2.0 * r;
    let arc = std::f64::consts::FRAC_PI_2 * r;
    let perimeter = 4.0 * (straight + arc);
    let mut s = s % perimeter;
    if s < 0.0 {
        s += perimeter;
    }
    // Segment-local frames: straights then quarter arcs, CCW starting at the
    // midpoint of the bottom straight heading +x.
    let half = straight / 2.0;
    let mut remaining = s;
    // Start at bottom-straight midpoint.
    let mut pos = Vector3::new(0.0, 0.0, 0.0);
    let mut heading = 0.0f64;
    // First half-straight.
    let first = half.min(remaining);
    pos += Vector3::new(first, 0.0, 0.0);
    remaining -= first;
    if remaining <= 0.0 {
        return (pos, heading);
    }
    for leg in 0..4 {
        // Quarter arc turning left.
        let arc_len = arc.min(remaining);
        let phi = arc_len / r;
        let center = pos
            + Vector3::new(-heading.sin(), heading.cos(), 0.0) * r;
        let start_angle = heading - std::f64::consts::FRAC_PI_2;
        let angle = start_angle + phi;
        pos = center + Vector3::new(angle.cos(), angle.sin(), 0.0) * r;
        heading += phi;
        remaining -= arc_len;
        if remaining <= 0.0 {
            return (pos, heading);
        }
        // Straight (the last one is the closing half-straight).
        let len = if leg == 3 { half } else { straight };
        let step = len.min(remaining);
        pos += Vector3::new(heading.cos(), heading.sin(), 0.0) * step;
        remaining -= step;
        if remaining <= 0.0 {
            return (pos, heading);
        }
    }
    (pos, heading)
}

/// Exhaustive matching oracle: recomputes every point's cell membership by
/// scanning all voxels, never touching the hash path. Output must equal
/// `match_correspondences` exactly.
pub fn oracle_match(source: &Scan, map: &VoxelMap, n_min: usize) -> Vec<Correspondence> {
    let mut result = Vec::new();
    for (i, p) in source.points().iter().enumerate() {
        let scaled = (p.position - map.ref_point) / map.resolution;
        let coords = (
            scaled.x.round() as i64,
            scaled.y.round() as i64,
            scaled.z.round() as i64,
        );
        if coords.0 < 0
            || coords.1 < 0
            || coords.2 < 0
            || coords.0 >= map.dims.width
            || coords.1 >= map.dims.height
            || coords.2 >= map.dims.depth
        {
            continue;
        }
        for (key, voxel) in map.voxels() {
            if map.decode(*key) == coords && voxel.count >= n_min {
                result.push(Correspondence {
                    source_index: i,
                    source: *p,
                    voxel_index: *key,
                    voxel: *voxel,
                });
            }
        }
    }
    result
}

/// Spherical-alignment cost at a fixed rotation: Σ dᵢᵀ Wᵢ dᵢ with
/// `d = (R pₛ · n̂) n̂ − R pₛ` against the voxel-mean directions.
pub fn spherical_alignment_cost(
    rotation: &Rotation,
    source: &[Vector3<f64>],
    target_means: &[Vector3<f64>],
    weights: &[Matrix3<f64>],
) -> f64 {
    let mut cost = 0.0;
    for ((p, mean), w) in source.iter().zip(target_means).zip(weights) {
        let n = mean / mean.norm();
        let q = *rotation * *p;
        let d = n * q.dot(&n) - q;
        cost += (d.transpose() * w * d)[(0, 0)];
    }
    cost
}

/// Grid-search oracle for the rotation registration: exhaustive scan of a
/// 0.25° Euler grid in ±12°, returning the grid minimizer of the
/// spherical-alignment cost. Bounds the solver's solution quality on tiny
/// instances (≤ 50 correspondences, true rotation < 10°).
pub fn oracle_rotation(
    source: &[Vector3<f64>],
    target_means: &[Vector3<f64>],
    weights: &[Matrix3<f64>],
) -> Rotation {
    let step = 0.25f64.to_radians();
    let limit = 12.0f64.to_radians();
    let n = (2.0 * limit / step).round() as i64 + 1;
    let angles: Vec<f64> = (0..n).map(|i| -limit + i as f64 * step).collect();

    let best = angles
        .par_iter()
        .map(|&roll| {
            let mut local_best = (f64::INFINITY, (0.0, 0.0, 0.0));
            for &pitch in &angles {
                for &yaw in &angles {
                    let rot = Rotation::from_euler(roll, pitch, yaw);
                    let cost = spherical_alignment_cost(&rot, source, target_means, weights);
                    if cost < local_best.0 {
                        local_best = (cost, (roll, pitch, yaw));
                    }
                }
            }
            local_best
        })
        .reduce(
            || (f64::INFINITY, (0.0, 0.0, 0.0)),
            |a, b| if a.0 <= b.0 { a } else { b },
        );
    let (roll, pitch, yaw) = best.1;
    Rotation::from_euler(roll, pitch, yaw)
}
