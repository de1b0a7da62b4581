//! Point-cloud representation, motion-distortion correction, and
//! smoothness-based edge/planar feature extraction.

use crate::geometry::{RigidTransform, Rotation};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use std::ops::Range;

/// Isotropic per-point noise sigma (meters) used when the sensor model does
/// not provide one.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.02;

/// One LiDAR return. `noise_cov` is the measurement noise covariance in the
/// sensor frame (symmetric PSD).
#[derive(Debug, Clone, Copy)]
pub struct Point {
    pub position: Vector3<f64>,
    /// Seconds since the sweep start, in `[0, sweep_duration]`.
    pub time_offset: f64,
    pub ring: u32,
    pub noise_cov: Matrix3<f64>,
}

impl Point {
    pub fn new(position: Vector3<f64>, time_offset: f64, ring: u32) -> Self {
        Point {
            position,
            time_offset,
            ring,
            noise_cov: Matrix3::identity() * (DEFAULT_NOISE_SIGMA * DEFAULT_NOISE_SIGMA),
        }
    }

    pub fn with_noise_cov(mut self, noise_cov: Matrix3<f64>) -> Self {
        self.noise_cov = noise_cov;
        self
    }

    /// Azimuth in `[0, 2π)`.
    pub fn azimuth(&self) -> f64 {
        let az = self.position.y.atan2(self.position.x);
        if az < 0.0 {
            az + 2.0 * std::f64::consts::PI
        } else {
            az
        }
    }
}

/// One full sweep. Points are stored grouped by ring (ascending) and ordered
/// by azimuth within each ring.
#[derive(Debug, Clone)]
pub struct Scan {
    points: Vec<Point>,
    /// Sweep start time, seconds.
    pub stamp: f64,
    pub sweep_duration: f64,
    ring_spans: Vec<(u32, Range<usize>)>,
}

impl Scan {
    pub fn empty(stamp: f64, sweep_duration: f64) -> Self {
        Scan {
            points: Vec::new(),
            stamp,
            sweep_duration,
            ring_spans: Vec::new(),
        }
    }

    /// Builds a scan from unordered points, sorting by `(ring, azimuth)`.
    pub fn from_points(mut points: Vec<Point>, stamp: f64, sweep_duration: f64) -> Self {
        points.sort_by(|a, b| {
            a.ring
                .cmp(&b.ring)
                .then(a.azimuth().partial_cmp(&b.azimuth()).unwrap_or(std::cmp::Ordering::Equal))
        });
        Self::from_sorted_points(points, stamp, sweep_duration)
    }

    /// Builds a scan from points already grouped by ring and azimuth-ordered.
    pub fn from_sorted_points(points: Vec<Point>, stamp: f64, sweep_duration: f64) -> Self {
        let ring_spans = compute_ring_spans(&points);
        Scan {
            points,
            stamp,
            sweep_duration,
            ring_spans,
        }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Contiguous index ranges per ring, ascending ring order.
    pub fn ring_spans(&self) -> &[(u32, Range<usize>)] {
        &self.ring_spans
    }

    /// Applies `f` to every point position, keeping structure intact.
    pub fn map_positions(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64> + Sync) -> Scan {
        let points = self
            .points
            .iter()
            .map(|p| Point {
                position: f(&p.position),
                ..*p
            })
            .collect();
        Scan {
            points,
            stamp: self.stamp,
            sweep_duration: self.sweep_duration,
            ring_spans: self.ring_spans.clone(),
        }
    }
}

fn compute_ring_spans(points: &[Point]) -> Vec<(u32, Range<usize>)> {
    let mut spans = Vec::new();
    let mut start = 0usize;
    for i in 1..=points.len() {
        if i == points.len() || points[i].ring != points[start].ring {
            spans.push((points[start].ring, start..i));
            start = i;
        }
    }
    spans
}

/// Re-expresses every point in the sweep-end frame, assuming the sensor moved
/// by `motion` over the full sweep at constant rate (translation linear in
/// time, rotation scaled as a constant-rate axis-angle).
///
/// A point captured at fraction `s` of the sweep is corrected by
/// `motion⁻¹ ∘ interp(motion, s)`, so points at the sweep end are untouched
/// and points at the sweep start receive the full inverse motion.
pub fn deskew(scan: &Scan, motion: &RigidTransform) -> Scan {
    if *motion == RigidTransform::identity() {
        return scan.clone();
    }
    let log_rot = motion.rotation.log();
    let inv = motion.invert();
    let duration = scan.sweep_duration;
    let points: Vec<Point> = scan
        .points
        .par_iter()
        .map(|p| {
            let s = if duration > 0.0 {
                (p.time_offset / duration).clamp(0.0, 1.0)
            } else {
                1.0
            };
            let partial = RigidTransform::new(
                Rotation::exp(log_rot * s),
                motion.translation * s,
            );
            let correction = inv.compose(&partial);
            Point {
                position: correction.transform_point(&p.position),
                noise_cov: correction.rotation.matrix()
                    * p.noise_cov
                    * correction.rotation.matrix().transpose(),
                ..*p
            }
        })
        .collect();
    Scan {
        points,
        stamp: scan.stamp,
        sweep_duration: scan.sweep_duration,
        ring_spans: scan.ring_spans.clone(),
    }
}

/// Per-point smoothness values. Boundary points and points on degenerate
/// rings are flagged ineligible and never become features.
#[derive(Debug, Clone)]
pub struct Smoothness {
    pub values: Vec<f64>,
    pub eligible: Vec<bool>,
    /// Rings with fewer than `2w + 1` points; they yield no features.
    pub degenerate_rings: Vec<u32>,
}

/// Computes `c_i = ‖Σ_{j∈window, j≠i}(p_j − p_i)‖ / (2w · ‖p_i‖)` over a
/// symmetric window of `half_width` ring neighbors on each side.
pub fn smoothness(scan: &Scan, half_width: usize) -> Smoothness {
    let w = half_width;
    let n = scan.points.len();
    let mut values = vec![0.0; n];
    let mut eligible = vec![false; n];
    let mut degenerate_rings = Vec::new();

    let per_ring: Vec<(u32, Range<usize>, Vec<(usize, f64)>)> = scan
        .ring_spans
        .par_iter()
        .map(|(ring, span)| {
            let pts = &scan.points[span.clone()];
            if pts.len() < 2 * w + 1 {
                return (*ring, span.clone(), Vec::new());
            }
            let mut out = Vec::with_capacity(pts.len().saturating_sub(2 * w));
            for i in w..pts.len() - w {
                let pi = pts[i].position;
                let norm = pi.norm();
                if norm < 1e-9 {
                    continue;
                }
                let mut sum = Vector3::zeros();
                for j in i - w..=i + w {
                    if j != i {
                        sum += pts[j].position - pi;
                    }
                }
                out.push((span.start + i, sum.norm() / (2.0 * w as f64 * norm)));
            }
            (*ring, span.clone(), out)
        })
        .collect();

    for (ring, _span, entries) in per_ring {
        if entries.is_empty() {
            degenerate_rings.push(ring);
            continue;
        }
        for (idx, c) in entries {
            values[idx] = c;
            eligible[idx] = true;
        }
    }

    // Points bordering a range discontinuity sit on occlusion boundaries;
    // the apparent corner there moves with the viewpoint and must not
    // become a feature.
    for (_ring, span) in &scan.ring_spans {
        let pts = &scan.points[span.clone()];
        for i in 0..pts.len().saturating_sub(1) {
            let r_a = pts[i].position.norm();
            let r_b = pts[i + 1].position.norm();
            let gap = 0.3f64.max(0.05 * r_a.min(r_b));
            if r_a - r_b > gap {
                // Occluded region ends at i: the far side looks back.
                let lo = i.saturating_sub(w);
                for e in &mut eligible[span.start + lo..=span.start + i] {
                    *e = false;
                }
            } else if r_b - r_a > gap {
                let hi = (i + 1 + w).min(pts.len() - 1);
                for e in &mut eligible[span.start + i + 1..=span.start + hi] {
                    *e = false;
                }
            }
        }
    }

    Smoothness {
        values,
        eligible,
        degenerate_rings,
    }
}

/// Edge and planar feature subsets of a scan. Disjoint by construction.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub edge: Vec<Point>,
    pub planar: Vec<Point>,
}

impl FeatureSet {
    pub fn is_empty(&self) -> bool {
        self.edge.is_empty() && self.planar.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct FeatureConfig {
    /// Smoothness window half-width `w`.
    pub half_width: usize,
    /// Minimum smoothness for edge candidates.
    pub edge_threshold: f64,
    /// Maximum smoothness for planar candidates.
    pub planar_threshold: f64,
    /// Edge features kept per ring per azimuth sector.
    pub edges_per_sector: usize,
    /// Planar features kept per ring per azimuth sector.
    pub planar_per_sector: usize,
    /// Number of azimuth sectors.
    pub sectors: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            half_width: 5,
            // The normalized smoothness metric tops out near
            // (w+1)/4 · √2 · Δφ for a right-angle corner, so the gate sits
            // well below that and well above flat-surface response.
            edge_threshold: 0.005,
            planar_threshold: 0.1,
            edges_per_sector: 2,
            planar_per_sector: 4,
            sectors: 6,
        }
    }
}

/// Selects edge (high smoothness) and planar (low smoothness) features per
/// ring and azimuth sector, suppressing the `w` ring neighbors of every
/// selected feature to spread picks spatially.
pub fn extract_features(scan: &Scan, cfg: &FeatureConfig) -> FeatureSet {
    let sm = smoothness(scan, cfg.half_width);
    extract_features_with(scan, &sm, cfg)
}

/// Same as [`extract_features`], reusing a precomputed smoothness result.
pub fn extract_features_with(scan: &Scan, sm: &Smoothness, cfg: &FeatureConfig) -> FeatureSet {
    let mut edge = Vec::new();
    let mut planar = Vec::new();
    let sector_width = 2.0 * std::f64::consts::PI / cfg.sectors.max(1) as f64;

    for (_ring, span) in scan.ring_spans() {
        let pts = &scan.points[span.clone()];
        let mut suppressed = vec![false; pts.len()];

        // Candidate indices per sector, local to the ring.
        let mut sectors: Vec<Vec<usize>> = vec![Vec::new(); cfg.sectors.max(1)];
        for (local, p) in pts.iter().enumerate() {
            if !sm.eligible[span.start + local] {
                continue;
            }
            let sector = ((p.azimuth() / sector_width) as usize).min(cfg.sectors.max(1) - 1);
            sectors[sector].push(local);
        }

        for sector in &sectors {
            let mut by_c: Vec<usize> = sector.clone();
            by_c.sort_by(|&a, &b| {
                sm.values[span.start + b]
                    .partial_cmp(&sm.values[span.start + a])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });

            let mut taken = 0;
            for &local in &by_c {
                if taken >= cfg.edges_per_sector {
                    break;
                }
                let c = sm.values[span.start + local];
                if c <= cfg.edge_threshold {
                    break;
                }
                if suppressed[local] {
                    continue;
                }
                edge.push(pts[local]);
                suppress_window(&mut suppressed, local, cfg.half_width);
                taken += 1;
            }

            let mut taken = 0;
            for &local in by_c.iter().rev() {
                if taken >= cfg.planar_per_sector {
                    break;
                }
                let c = sm.values[span.start + local];
                if c >= cfg.planar_threshold {
                    break;
                }
                if suppressed[local] {
                    continue;
                }
                planar.push(pts[local]);
                suppress_window(&mut suppressed, local, cfg.half_width);
                taken += 1;
            }
        }
    }
    FeatureSet { edge, planar }
}

fn suppress_window(suppressed: &mut [bool], center: usize, half_width: usize) {
    let lo = center.saturating_sub(half_width);
    let hi = (center + half_width).min(suppressed.len().saturating_sub(1));
    for s in &mut suppressed[lo..=hi] {
        *s = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ring_of_points(positions: &[Vector3<f64>], ring: u32) -> Vec<Point> {
        positions
            .iter()
            .enumerate()
            .map(|(i, p)| Point::new(*p, i as f64 * 1e-3, ring))
            .collect()
    }

    /// Points on an arc of constant range; azimuth-ordered by construction.
    fn arc_ring(range: f64, n: usize) -> Vec<Point> {
        (0..n)
            .map(|i| {
                let az = 0.1 + i as f64 * 0.005;
                Point::new(
                    Vector3::new(range * az.cos(), range * az.sin(), 0.0),
                    i as f64 * 1e-3,
                    0,
                )
            })
            .collect()
    }

    #[test]
    fn deskew_identity_is_bitwise_noop() {
        let pts = arc_ring(5.0, 40);
        let scan = Scan::from_sorted_points(pts, 0.0, 0.1);
        let out = deskew(&scan, &RigidTransform::identity());
        assert_eq!(out.len(), scan.len());
        for (a, b) in scan.points().iter().zip(out.points()) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.noise_cov, b.noise_cov);
        }
    }

    #[test]
    fn deskew_endpoint_anchor() {
        let sweep = 0.1;
        let p = Point::new(Vector3::new(3.0, 1.0, 0.5), sweep, 2);
        let scan = Scan::from_sorted_points(vec![p], 0.0, sweep);
        let motion = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let out = deskew(&scan, &motion);
        assert_eq!(out.points()[0].position, p.position);
    }

    #[test]
    fn deskew_start_gets_full_inverse_motion() {
        let sweep = 0.1;
        let p = Point::new(Vector3::new(3.0, 1.0, 0.5), 0.0, 2);
        let scan = Scan::from_sorted_points(vec![p], 0.0, sweep);
        let motion = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let out = deskew(&scan, &motion);
        let moved = out.points()[0].position - p.position;
        assert_relative_eq!(moved.x, -1.0, epsilon = 1e-12);
        assert_relative_eq!(moved.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(moved.z, 0.0, epsilon = 1e-12);
    }

    /// Conjugating the motion by a pure rotation commutes exactly with the
    /// decoupled interpolation, so equivariance holds to round-off there.
    /// (With a translated conjugator the decoupled interpolation only
    /// commutes when the motion's rotation vanishes; that exact case is
    /// checked below.)
    #[test]
    fn deskew_equivariance_rotation_conjugator() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..20 {
            let pts = arc_ring(rng.gen_range(2.0..10.0), 30);
            let scan = Scan::from_sorted_points(pts, 0.0, 0.1);
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let motion = RigidTransform::new(
                Rotation::exp(axis * rng.gen_range(0.0..(5f64).to_radians())),
                Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
            );
            let g = RigidTransform::from_rotation(Rotation::exp(
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize()
                    * rng.gen_range(0.0..1.0),
            ));
            let conjugated = g.compose(&motion).compose(&g.invert());

            let deskew_then_transform =
                deskew(&scan, &motion).map_positions(|p| g.transform_point(p));
            let transform_then_deskew =
                deskew(&scan.map_positions(|p| g.transform_point(p)), &conjugated);
            for (a, b) in deskew_then_transform
                .points()
                .iter()
                .zip(transform_then_deskew.points())
            {
                assert!((a.position - b.position).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn deskew_equivariance_pure_translation_motion() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(37);
        for _ in 0..20 {
            let pts = arc_ring(rng.gen_range(2.0..10.0), 30);
            let scan = Scan::from_sorted_points(pts, 0.0, 0.1);
            let motion = RigidTransform::from_translation(Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let g = RigidTransform::new(
                Rotation::exp(
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                    .normalize()
                        * rng.gen_range(0.0..1.0),
                ),
                Vector3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ),
            );
            let conjugated = g.compose(&motion).compose(&g.invert());
            let a = deskew(&scan, &motion).map_positions(|p| g.transform_point(p));
            let b = deskew(&scan.map_positions(|p| g.transform_point(p)), &conjugated);
            for (pa, pb) in a.points().iter().zip(b.points()) {
                assert!((pa.position - pb.position).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn smoothness_vanishes_on_collinear_segment() {
        // Equally spaced points along a line.
        let positions: Vec<Vector3<f64>> = (0..21)
            .map(|i| Vector3::new(5.0, -1.0 + 0.1 * i as f64, 0.0))
            .collect();
        let scan = Scan::from_sorted_points(ring_of_points(&positions, 0), 0.0, 0.1);
        let sm = smoothness(&scan, 5);
        let center = 10;
        assert!(sm.eligible[center]);
        assert!(sm.values[center] < 1e-12);
    }

    #[test]
    fn smoothness_peaks_at_corner() {
        // Two line segments meeting at a right angle; the corner sits at
        // index 10.
        let mut positions = Vec::new();
        for i in 0..=10 {
            positions.push(Vector3::new(5.0, -0.1 * (10 - i) as f64, 0.0));
        }
        for i in 1..=10 {
            positions.push(Vector3::new(5.0 - 0.1 * i as f64, 0.0, 0.0));
        }
        let pts: Vec<Point> = positions
            .iter()
            .enumerate()
            .map(|(i, p)| Point::new(*p, i as f64 * 1e-3, 0))
            .collect();
        // Hand-ordered; bypass azimuth sorting.
        let scan = Scan::from_sorted_points(pts, 0.0, 0.1);
        let sm = smoothness(&scan, 5);

        // Brute-force oracle for the corner point.
        let w = 5usize;
        let i = 10usize;
        let mut sum = Vector3::zeros();
        for j in i - w..=i + w {
            if j != i {
                sum += positions[j] - positions[i];
            }
        }
        let expected = sum.norm() / (2.0 * w as f64 * positions[i].norm());
        assert_relative_eq!(sm.values[i], expected, epsilon = 1e-12);
        assert!(sm.values[i] > 4.0 * sm.values[7]);
        assert!(sm.values[i] > 4.0 * sm.values[13]);
    }

    #[test]
    fn smoothness_invariant_to_range_scaling() {
        let positions: Vec<Vector3<f64>> = (0..25)
            .map(|i| {
                let az = 0.2 + 0.01 * i as f64;
                let r = 4.0 + 0.3 * (i as f64 * 0.7).sin();
                Vector3::new(r * az.cos(), r * az.sin(), 0.4)
            })
            .collect();
        let scaled: Vec<Vector3<f64>> = positions.iter().map(|p| p * 2.0).collect();
        let a = smoothness(
            &Scan::from_sorted_points(ring_of_points(&positions, 0), 0.0, 0.1),
            5,
        );
        let b = smoothness(
            &Scan::from_sorted_points(ring_of_points(&scaled, 0), 0.0, 0.1),
            5,
        );
        for i in 0..positions.len() {
            if a.eligible[i] {
                assert_relative_eq!(a.values[i], b.values[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_ring_yields_no_features() {
        let positions: Vec<Vector3<f64>> =
            (0..5).map(|i| Vector3::new(5.0, 0.1 * i as f64, 0.0)).collect();
        let scan = Scan::from_sorted_points(ring_of_points(&positions, 3), 0.0, 0.1);
        let sm = smoothness(&scan, 5);
        assert_eq!(sm.degenerate_rings, vec![3]);
        assert!(sm.eligible.iter().all(|e| !e));
        let feats = extract_features(&scan, &FeatureConfig::default());
        assert!(feats.is_empty());
    }

    #[test]
    fn empty_scan_gives_empty_features() {
        let scan = Scan::empty(0.0, 0.1);
        let feats = extract_features(&scan, &FeatureConfig::default());
        assert!(feats.is_empty());
    }

    #[test]
    fn flat_segment_yields_planar_only() {
        let positions: Vec<Vector3<f64>> = (0..200)
            .map(|i| {
                let az = 0.1 + 0.004 * i as f64;
                Vector3::new(5.0 * az.cos(), 5.0 * az.sin(), 0.0)
            })
            .collect();
        let scan = Scan::from_sorted_points(ring_of_points(&positions, 0), 0.0, 0.1);
        let feats = extract_features(&scan, &FeatureConfig::default());
        assert!(feats.edge.is_empty());
        assert!(!feats.planar.is_empty());
    }

    #[test]
    fn edge_suppression_enforces_spacing() {
        // A zig-zag ring with many corners; selected edges on the same ring
        // must be at least w indices apart.
        let mut positions = Vec::new();
        for i in 0..240 {
            let az = 0.05 + 0.004 * i as f64;
            let r = if (i / 12) % 2 == 0 { 5.0 } else { 5.4 };
            positions.push(Vector3::new(r * az.cos(), r * az.sin(), 0.0));
        }
        let cfg = FeatureConfig::default();
        let scan = Scan::from_sorted_points(ring_of_points(&positions, 0), 0.0, 0.1);
        let feats = extract_features(&scan, &cfg);
        assert!(!feats.edge.is_empty());
        // Recover ring indices by matching azimuth order.
        let mut indices: Vec<usize> = feats
            .edge
            .iter()
            .map(|e| {
                positions
                    .iter()
                    .position(|p| (p - e.position).norm() < 1e-12)
                    .unwrap()
            })
            .collect();
        indices.sort_unstable();
        for pair in indices.windows(2) {
            assert!(
                pair[1] - pair[0] > cfg.half_width,
                "edges {} and {} too close",
                pair[0],
                pair[1]
            );
        }
    }
}
