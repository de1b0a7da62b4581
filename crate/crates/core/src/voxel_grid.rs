//! Gaussian voxel map construction and point-to-voxel correspondence
//! matching.
//!
//! The map is a sparse hash keyed by the scalar cell index
//! `ix + W·iy + W·H·iz`, where the integer coordinates come from rounding
//! `(p − p_min) / resolution` half away from zero.

use crate::scan::{Point, Scan};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use std::collections::HashMap;
use thiserror::Error;

/// Covariance added to every voxel covariance before it is inverted
/// downstream; single-point voxels and coplanar clusters are singular
/// without it.
pub const COVARIANCE_FLOOR: f64 = 1e-6;

/// Chunk size for the parallel build; fixed so the merge order (and thus the
/// floating-point result) does not depend on the thread schedule.
const BUILD_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error("point ({0:.3}, {1:.3}, {2:.3}) falls outside the voxel grid")]
    OutOfBounds(f64, f64, f64),
    #[error("cannot build a voxel map from an empty scan")]
    EmptyScan,
}

/// Per-voxel Gaussian statistics: point count, mean position, and the mean
/// of the inserted per-point noise covariances (or the sample covariance of
/// positions, depending on [`CovarianceMode`]).
#[derive(Debug, Clone, Copy)]
pub struct GaussianVoxel {
    pub count: usize,
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

impl GaussianVoxel {
    /// Covariance with the inversion floor applied.
    pub fn floored_cov(&self) -> Matrix3<f64> {
        self.cov + Matrix3::identity() * COVARIANCE_FLOOR
    }
}

/// How a voxel's covariance is accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceMode {
    /// Arithmetic mean of the inserted per-point noise covariances.
    #[default]
    MeanNoise,
    /// Sample covariance of the inserted point positions.
    SamplePositions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelDims {
    pub width: i64,
    pub height: i64,
    pub depth: i64,
}

/// Sparse Gaussian voxel map over a target scan.
#[derive(Debug, Clone)]
pub struct VoxelMap {
    pub resolution: f64,
    pub ref_point: Vector3<f64>,
    pub dims: VoxelDims,
    voxels: HashMap<i64, GaussianVoxel>,
}

impl VoxelMap {
    pub fn voxels(&self) -> &HashMap<i64, GaussianVoxel> {
        &self.voxels
    }

    pub fn get(&self, index: i64) -> Option<&GaussianVoxel> {
        self.voxels.get(&index)
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index_of(&self, p: &Vector3<f64>) -> Result<i64, VoxelError> {
        voxel_index(p, &self.ref_point, self.resolution, &self.dims)
    }

    /// Decodes a scalar index back into integer cell coordinates.
    pub fn decode(&self, index: i64) -> (i64, i64, i64) {
        let plane = self.dims.width * self.dims.height;
        let iz = index / plane;
        let rem = index % plane;
        let iy = rem / self.dims.width;
        let ix = rem % self.dims.width;
        (ix, iy, iz)
    }
}

fn round_half_away(x: f64) -> i64 {
    // f64::round implements round-half-away-from-zero.
    x.round() as i64
}

/// Scalar cell index of `p` relative to `ref_point`, or `OutOfBounds` when a
/// rounded coordinate leaves `[0, dim)`.
pub fn voxel_index(
    p: &Vector3<f64>,
    ref_point: &Vector3<f64>,
    resolution: f64,
    dims: &VoxelDims,
) -> Result<i64, VoxelError> {
    debug_assert!(resolution > 0.0);
    let scaled = (p - ref_point) / resolution;
    let ix = round_half_away(scaled.x);
    let iy = round_half_away(scaled.y);
    let iz = round_half_away(scaled.z);
    if ix < 0 || iy < 0 || iz < 0 || ix >= dims.width || iy >= dims.height || iz >= dims.depth {
        return Err(VoxelError::OutOfBounds(p.x, p.y, p.z));
    }
    Ok(ix + dims.width * iy + dims.width * dims.height * iz)
}

#[derive(Clone, Default)]
struct Accumulator {
    count: usize,
    pos_sum: Vector3<f64>,
    cov_sum: Matrix3<f64>,
    outer_sum: Matrix3<f64>,
}

impl Accumulator {
    fn add(&mut self, p: &Point) {
        self.count += 1;
        self.pos_sum += p.position;
        self.cov_sum += p.noise_cov;
        self.outer_sum += p.position * p.position.transpose();
    }

    fn merge(&mut self, other: &Accumulator) {
        self.count += other.count;
        self.pos_sum += other.pos_sum;
        self.cov_sum += other.cov_sum;
        self.outer_sum += other.outer_sum;
    }

    fn finalize(&self, mode: CovarianceMode) -> GaussianVoxel {
        let n = self.count as f64;
        let mean = self.pos_sum / n;
        let cov = match mode {
            CovarianceMode::MeanNoise => self.cov_sum / n,
            CovarianceMode::SamplePositions => self.outer_sum / n - mean * mean.transpose(),
        };
        GaussianVoxel {
            count: self.count,
            mean,
            cov,
        }
    }
}

fn grid_geometry(
    target: &Scan,
    resolution: f64,
    min_bounds: Option<Vector3<f64>>,
) -> Result<(Vector3<f64>, VoxelDims), VoxelError> {
    if target.is_empty() {
        return Err(VoxelError::EmptyScan);
    }
    let mut min = target.points()[0].position;
    let mut max = min;
    for p in target.points() {
        min = min.inf(&p.position);
        max = max.sup(&p.position);
    }
    let ref_point = min_bounds.unwrap_or(min);
    let dim = |lo: f64, hi: f64| round_half_away(((hi - lo).max(0.0)) / resolution) + 1;
    let dims = VoxelDims {
        width: dim(ref_point.x, max.x),
        height: dim(ref_point.y, max.y),
        depth: dim(ref_point.z, max.z),
    };
    Ok((ref_point, dims))
}

/// Builds the Gaussian voxel map for `target`. `min_bounds` overrides the
/// reference point; by default it is the componentwise minimum of the target
/// positions. Points whose cell falls outside the grid are excluded.
pub fn build_voxel_map(
    target: &Scan,
    resolution: f64,
    min_bounds: Option<Vector3<f64>>,
) -> Result<VoxelMap, VoxelError> {
    build_voxel_map_with(target, resolution, min_bounds, CovarianceMode::MeanNoise)
}

pub fn build_voxel_map_with(
    target: &Scan,
    resolution: f64,
    min_bounds: Option<Vector3<f64>>,
    mode: CovarianceMode,
) -> Result<VoxelMap, VoxelError> {
    let (ref_point, dims) = grid_geometry(target, resolution, min_bounds)?;

    // Per-chunk partial accumulators, merged in chunk order so the result is
    // schedule-independent.
    let partials: Vec<HashMap<i64, Accumulator>> = target
        .points()
        .par_chunks(BUILD_CHUNK)
        .map(|chunk| {
            let mut acc: HashMap<i64, Accumulator> = HashMap::new();
            for p in chunk {
                if let Ok(idx) = voxel_index(&p.position, &ref_point, resolution, &dims) {
                    acc.entry(idx).or_default().add(p);
                }
            }
            acc
        })
        .collect();

    let mut merged: HashMap<i64, Accumulator> = HashMap::new();
    for partial in partials {
        // Fixed per-voxel merge order: sort the partial's keys.
        let mut keys: Vec<i64> = partial.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            merged.entry(k).or_default().merge(&partial[&k]);
        }
    }

    let voxels = merged
        .into_iter()
        .map(|(k, acc)| (k, acc.finalize(mode)))
        .collect();
    Ok(VoxelMap {
        resolution,
        ref_point,
        dims,
        voxels,
    })
}

/// Sequential reference build; the parallel build must agree with it within
/// 1e-9 per statistic.
pub fn build_voxel_map_sequential(
    target: &Scan,
    resolution: f64,
    min_bounds: Option<Vector3<f64>>,
    mode: CovarianceMode,
) -> Result<VoxelMap, VoxelError> {
    let (ref_point, dims) = grid_geometry(target, resolution, min_bounds)?;
    let mut acc: HashMap<i64, Accumulator> = HashMap::new();
    for p in target.points() {
        if let Ok(idx) = voxel_index(&p.position, &ref_point, resolution, &dims) {
            acc.entry(idx).or_default().add(p);
        }
    }
    let voxels = acc
        .into_iter()
        .map(|(k, a)| (k, a.finalize(mode)))
        .collect();
    Ok(VoxelMap {
        resolution,
        ref_point,
        dims,
        voxels,
    })
}

/// A source point paired with the target voxel it fell into.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub source_index: usize,
    pub source: Point,
    pub voxel_index: i64,
    pub voxel: GaussianVoxel,
}

/// Pairs each source point with its target voxel when the cell exists and
/// holds at least `n_min` points. Output order follows source point order.
pub fn match_correspondences(source: &Scan, map: &VoxelMap, n_min: usize) -> Vec<Correspondence> {
    source
        .points()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let idx = map.index_of(&p.position).ok()?;
            let voxel = map.get(idx)?;
            if voxel.count < n_min {
                return None;
            }
            Some(Correspondence {
                source_index: i,
                source: *p,
                voxel_index: idx,
                voxel: *voxel,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scan_of(positions: Vec<Vector3<f64>>) -> Scan {
        let points = positions
            .into_iter()
            .enumerate()
            .map(|(i, p)| Point::new(p, i as f64 * 1e-4, 0))
            .collect();
        Scan::from_sorted_points(points, 0.0, 0.1)
    }

    fn random_positions(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                )
            })
            .collect()
    }

    #[test]
    fn index_of_reference_point_is_zero() {
        let dims = VoxelDims {
            width: 10,
            height: 10,
            depth: 10,
        };
        let p_min = Vector3::new(-3.0, 2.0, 0.5);
        assert_eq!(voxel_index(&p_min, &p_min, 1.0, &dims).unwrap(), 0);
    }

    #[test]
    fn index_hand_example() {
        // p_min = origin, res = 1, W = 10, H = 10:
        // round(2.3, 3.6, 1.2) = (2, 4, 1) → 2 + 10·4 + 100·1 = 142
        let dims = VoxelDims {
            width: 10,
            height: 10,
            depth: 10,
        };
        let idx = voxel_index(
            &Vector3::new(2.3, 3.6, 1.2),
            &Vector3::zeros(),
            1.0,
            &dims,
        )
        .unwrap();
        assert_eq!(idx, 142);
    }

    #[test]
    fn points_in_same_cell_share_index() {
        let dims = VoxelDims {
            width: 100,
            height: 100,
            depth: 100,
        };
        let a = Vector3::new(5.1, 5.1, 5.1);
        let b = Vector3::new(5.3, 4.9, 5.2);
        let ia = voxel_index(&a, &Vector3::zeros(), 1.0, &dims).unwrap();
        let ib = voxel_index(&b, &Vector3::zeros(), 1.0, &dims).unwrap();
        assert_eq!(ia, ib);
    }

    #[test]
    fn out_of_bounds_rejected() {
        let dims = VoxelDims {
            width: 4,
            height: 4,
            depth: 4,
        };
        assert!(voxel_index(&Vector3::new(-1.0, 0.0, 0.0), &Vector3::zeros(), 1.0, &dims).is_err());
        assert!(voxel_index(&Vector3::new(3.6, 0.0, 0.0), &Vector3::zeros(), 1.0, &dims).is_err());
    }

    #[test]
    fn single_point_voxel() {
        let scan = scan_of(vec![Vector3::new(1.5, 2.5, 3.5)]);
        let map = build_voxel_map(&scan, 1.0, None).unwrap();
        assert_eq!(map.len(), 1);
        let v = map.voxels().values().next().unwrap();
        assert_eq!(v.count, 1);
        assert!((v.mean - Vector3::new(1.5, 2.5, 3.5)).norm() < 1e-12);
        assert!((v.cov - scan.points()[0].noise_cov).norm() < 1e-12);
    }

    #[test]
    fn two_points_average() {
        let scan = scan_of(vec![Vector3::zeros(), Vector3::new(0.2, 0.0, 0.0)]);
        let map = build_voxel_map(&scan, 1.0, None).unwrap();
        assert_eq!(map.len(), 1);
        let v = map.voxels().values().next().unwrap();
        assert_eq!(v.count, 2);
        assert_relative_eq!(v.mean.x, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn sample_covariance_mode() {
        let scan = scan_of(vec![
            Vector3::new(-0.2, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.2, 0.0, 0.0),
        ]);
        let map =
            build_voxel_map_with(&scan, 1.0, None, CovarianceMode::SamplePositions).unwrap();
        let v = map.voxels().values().next().unwrap();
        // Var(x) of {-0.2, 0, 0.2} = 0.08/3
        assert_relative_eq!(v.cov[(0, 0)], 0.08 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(v.cov[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn partition_no_point_lost() {
        let mut rng = StdRng::seed_from_u64(41);
        let scan = scan_of(random_positions(&mut rng, 1000, 20.0));
        let map = build_voxel_map(&scan, 1.0, None).unwrap();
        let total: usize = map.voxels().values().map(|v| v.count).sum();
        assert_eq!(total, 1000);
    }

    #[test]
    fn parallel_build_matches_sequential() {
        let mut rng = StdRng::seed_from_u64(43);
        let scan = scan_of(random_positions(&mut rng, 20_000, 30.0));
        let par = build_voxel_map(&scan, 1.0, None).unwrap();
        let seq =
            build_voxel_map_sequential(&scan, 1.0, None, CovarianceMode::MeanNoise).unwrap();
        assert_eq!(par.len(), seq.len());
        for (k, v) in par.voxels() {
            let s = seq.get(*k).expect("voxel present in sequential build");
            assert_eq!(v.count, s.count);
            assert!((v.mean - s.mean).norm() < 1e-9);
            assert!((v.cov - s.cov).norm() < 1e-9);
        }
    }

    #[test]
    fn match_against_self_respects_threshold() {
        let mut rng = StdRng::seed_from_u64(47);
        let scan = scan_of(random_positions(&mut rng, 2000, 10.0));
        let map = build_voxel_map(&scan, 2.0, None).unwrap();
        let n_min = 5;
        let corr = match_correspondences(&scan, &map, n_min);
        for c in &corr {
            assert!(c.voxel.count >= n_min);
        }
        // Every point whose voxel is populous enough must be matched.
        let expected = scan
            .points()
            .iter()
            .filter(|p| {
                map.index_of(&p.position)
                    .ok()
                    .and_then(|i| map.get(i))
                    .map(|v| v.count >= n_min)
                    .unwrap_or(false)
            })
            .count();
        assert_eq!(corr.len(), expected);
    }

    #[test]
    fn source_point_in_empty_region_unmatched() {
        let scan = scan_of(vec![Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0)]);
        let map = build_voxel_map(&scan, 1.0, None).unwrap();
        let probe = scan_of(vec![Vector3::new(50.0, 50.0, 50.0)]);
        assert!(match_correspondences(&probe, &map, 1).is_empty());
    }

    #[test]
    fn match_order_follows_source_order() {
        let mut rng = StdRng::seed_from_u64(53);
        let scan = scan_of(random_positions(&mut rng, 500, 8.0));
        let map = build_voxel_map(&scan, 1.0, None).unwrap();
        let corr = match_correspondences(&scan, &map, 1);
        for pair in corr.windows(2) {
            assert!(pair[0].source_index < pair[1].source_index);
        }
    }

    proptest! {
        #[test]
        fn prop_partition_counts(seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.gen_range(1..300usize);
            let scan = scan_of(random_positions(&mut rng, n, 15.0));
            let map = build_voxel_map(&scan, 1.0, None).unwrap();
            let total: usize = map.voxels().values().map(|v| v.count).sum();
            prop_assert_eq!(total, n);
        }

        #[test]
        fn prop_mean_stays_in_cell(seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed.wrapping_mul(77).wrapping_add(3));
            let n = rng.gen_range(1..300usize);
            let scan = scan_of(random_positions(&mut rng, n, 15.0));
            let map = build_voxel_map(&scan, 1.0, None).unwrap();
            for (k, v) in map.voxels() {
                let idx = map.index_of(&v.mean).unwrap();
                prop_assert_eq!(idx, *k);
            }
        }
    }
}
