//! Flat `key = value` configuration covering every tunable of the pipeline.
//! CLI flags override file values through [`PipelineConfig::set`].

use crate::back_end::BackEndConfig;
use crate::front_end::{CountWeight, FrontEndConfig};
use crate::scan::FeatureConfig;
use crate::solver::{Method, SolverConfig};
use crate::synth::LidarModel;
use crate::voxel_grid::CovarianceMode;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', found '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key '{key}'")]
    UnknownKey { key: String },
    #[error("key '{key}': cannot parse '{value}': {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// Everything the pipeline runner needs, in one place.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub sensor: LidarModel,
    pub features: FeatureConfig,
    pub front_end: FrontEndConfig,
    pub back_end: BackEndConfig,
    /// Shared solver settings, applied to both front- and back-end.
    pub solver: SolverConfig,
    /// Motion-compensate scans with the previous frame's relative motion.
    pub deskew: bool,
    /// Run scan-to-submap refinement, keyframes, and loop closure.
    pub backend: bool,
    /// Nominal time between scans when the dataset has no stamp file.
    pub scan_period: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sensor: LidarModel::default(),
            features: FeatureConfig::default(),
            front_end: FrontEndConfig::default(),
            back_end: BackEndConfig::default(),
            solver: SolverConfig::default(),
            deskew: true,
            backend: true,
            scan_period: 0.1,
        }
    }
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.to_string(),
    }
}

macro_rules! parse_as {
    ($t:ty, $key:expr, $value:expr) => {
        $value
            .parse::<$t>()
            .map_err(|e| bad($key, $value, e))?
    };
}

impl PipelineConfig {
    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "sensor.rings" => self.sensor.rings = parse_as!(u32, key, v),
            "sensor.vertical_fov_min_deg" => self.sensor.vertical_fov_deg.0 = parse_as!(f64, key, v),
            "sensor.vertical_fov_max_deg" => self.sensor.vertical_fov_deg.1 = parse_as!(f64, key, v),
            "sensor.azimuth_step_deg" => self.sensor.azimuth_step_deg = parse_as!(f64, key, v),
            "sensor.max_range" => self.sensor.max_range = parse_as!(f64, key, v),
            "sensor.range_noise_sigma" => self.sensor.range_noise_sigma = parse_as!(f64, key, v),
            "sensor.sweep_duration" => self.sensor.sweep_duration = parse_as!(f64, key, v),

            "features.half_width" => self.features.half_width = parse_as!(usize, key, v),
            "features.edge_threshold" => self.features.edge_threshold = parse_as!(f64, key, v),
            "features.planar_threshold" => self.features.planar_threshold = parse_as!(f64, key, v),
            "features.edges_per_sector" => self.features.edges_per_sector = parse_as!(usize, key, v),
            "features.planar_per_sector" => self.features.planar_per_sector = parse_as!(usize, key, v),
            "features.sectors" => self.features.sectors = parse_as!(usize, key, v),

            "front_end.lambda_ct" => self.front_end.lambda_ct = parse_as!(f64, key, v),
            "front_end.n_min" => self.front_end.n_min = parse_as!(usize, key, v),
            "front_end.resolution" => self.front_end.resolution = parse_as!(f64, key, v),
            "front_end.svd_epsilon_ratio" => {
                self.front_end.svd_epsilon_ratio = parse_as!(f64, key, v)
            }
            "front_end.max_spherical_angle_deg" => {
                self.front_end.max_spherical_angle = parse_as!(f64, key, v).to_radians()
            }
            "front_end.min_correspondences" => {
                self.front_end.min_correspondences = parse_as!(usize, key, v)
            }
            "front_end.translation_outer_iterations" => {
                self.front_end.translation_outer_iterations = parse_as!(usize, key, v)
            }
            "front_end.count_weight" => {
                self.front_end.count_weight = match v {
                    "linear" => CountWeight::Linear,
                    "sqrt" => CountWeight::Sqrt,
                    other => return Err(bad(key, other, "expected linear|sqrt")),
                }
            }
            "front_end.covariance_mode" => {
                self.front_end.covariance_mode = match v {
                    "mean_noise" => CovarianceMode::MeanNoise,
                    "sample_positions" => CovarianceMode::SamplePositions,
                    other => return Err(bad(key, other, "expected mean_noise|sample_positions")),
                }
            }

            "solver.method" => {
                self.solver.method = match v {
                    "lm" => Method::LevenbergMarquardt,
                    "gn" => Method::GaussNewton,
                    other => return Err(bad(key, other, "expected lm|gn")),
                }
            }
            "solver.max_iterations" => self.solver.max_iterations = parse_as!(usize, key, v),
            "solver.param_tolerance" => self.solver.param_tolerance = parse_as!(f64, key, v),
            "solver.cost_tolerance" => self.solver.cost_tolerance = parse_as!(f64, key, v),
            "solver.lm_initial_damping" => {
                self.solver.lm_initial_damping = parse_as!(f64, key, v)
            }

            "back_end.time_interval" => self.back_end.keyframe.time_interval = parse_as!(f64, key, v),
            "back_end.distance_gate" => self.back_end.keyframe.distance_gate = parse_as!(f64, key, v),
            "back_end.angle_gate_deg" => {
                self.back_end.keyframe.angle_gate = parse_as!(f64, key, v).to_radians()
            }
            "back_end.submap_window" => self.back_end.submap_window = parse_as!(usize, key, v),
            "back_end.fit_neighbors" => self.back_end.fit_neighbors = parse_as!(usize, key, v),
            "back_end.max_outer_iterations" => {
                self.back_end.max_outer_iterations = parse_as!(usize, key, v)
            }
            "back_end.max_correspondence_distance" => {
                self.back_end.max_correspondence_distance = parse_as!(f64, key, v)
            }
            "back_end.fit_rms_tolerance" => {
                self.back_end.fit_rms_tolerance = parse_as!(f64, key, v)
            }
            "back_end.min_edge_points" => self.back_end.min_edge_points = parse_as!(usize, key, v),
            "back_end.min_planar_points" => {
                self.back_end.min_planar_points = parse_as!(usize, key, v)
            }
            "back_end.loop_search_radius" => {
                self.back_end.loop_search_radius = parse_as!(f64, key, v)
            }
            "back_end.loop_time_gap" => self.back_end.loop_time_gap = parse_as!(f64, key, v),
            "back_end.loop_fitness_threshold" => {
                self.back_end.loop_fitness_threshold = parse_as!(f64, key, v)
            }
            "back_end.loop_min_history" => {
                self.back_end.loop_min_history = parse_as!(usize, key, v)
            }
            "back_end.loop_cooldown" => {
                self.back_end.loop_cooldown = parse_as!(usize, key, v)
            }
            "back_end.queue_capacity" => self.back_end.queue_capacity = parse_as!(usize, key, v),

            "pipeline.deskew" => self.deskew = parse_as!(bool, key, v),
            "pipeline.backend" => self.backend = parse_as!(bool, key, v),
            "pipeline.scan_period" => self.scan_period = parse_as!(f64, key, v),

            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    /// Parses a whole config file; `#` starts a comment, blank lines are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: idx + 1,
                    text: raw.to_string(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        // The shared solver settings feed both stages.
        self.front_end.solver = self.solver.clone();
        self.back_end.solver = self.solver.clone();
        Ok(())
    }

    /// Renders the full configuration as a parseable key = value file.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "sensor.rings = {}", self.sensor.rings).unwrap();
        writeln!(s, "sensor.vertical_fov_min_deg = {}", self.sensor.vertical_fov_deg.0).unwrap();
        writeln!(s, "sensor.vertical_fov_max_deg = {}", self.sensor.vertical_fov_deg.1).unwrap();
        writeln!(s, "sensor.azimuth_step_deg = {}", self.sensor.azimuth_step_deg).unwrap();
        writeln!(s, "sensor.max_range = {}", self.sensor.max_range).unwrap();
        writeln!(s, "sensor.range_noise_sigma = {}", self.sensor.range_noise_sigma).unwrap();
        writeln!(s, "sensor.sweep_duration = {}", self.sensor.sweep_duration).unwrap();
        writeln!(s, "features.half_width = {}", self.features.half_width).unwrap();
        writeln!(s, "features.edge_threshold = {}", self.features.edge_threshold).unwrap();
        writeln!(s, "features.planar_threshold = {}", self.features.planar_threshold).unwrap();
        writeln!(s, "features.edges_per_sector = {}", self.features.edges_per_sector).unwrap();
        writeln!(s, "features.planar_per_sector = {}", self.features.planar_per_sector).unwrap();
        writeln!(s, "features.sectors = {}", self.features.sectors).unwrap();
        writeln!(s, "front_end.lambda_ct = {}", self.front_end.lambda_ct).unwrap();
        writeln!(s, "front_end.n_min = {}", self.front_end.n_min).unwrap();
        writeln!(s, "front_end.resolution = {}", self.front_end.resolution).unwrap();
        writeln!(s, "front_end.svd_epsilon_ratio = {}", self.front_end.svd_epsilon_ratio).unwrap();
        writeln!(
            s,
            "front_end.max_spherical_angle_deg = {}",
            self.front_end.max_spherical_angle.to_degrees()
        )
        .unwrap();
        writeln!(
            s,
            "front_end.min_correspondences = {}",
            self.front_end.min_correspondences
        )
        .unwrap();
        writeln!(
            s,
            "front_end.translation_outer_iterations = {}",
            self.front_end.translation_outer_iterations
        )
        .unwrap();
        writeln!(
            s,
            "front_end.count_weight = {}",
            match self.front_end.count_weight {
                CountWeight::Linear => "linear",
                CountWeight::Sqrt => "sqrt",
            }
        )
        .unwrap();
        writeln!(
            s,
            "front_end.covariance_mode = {}",
            match self.front_end.covariance_mode {
                CovarianceMode::MeanNoise => "mean_noise",
                CovarianceMode::SamplePositions => "sample_positions",
            }
        )
        .unwrap();
        writeln!(
            s,
            "solver.method = {}",
            match self.solver.method {
                Method::LevenbergMarquardt => "lm",
                Method::GaussNewton => "gn",
            }
        )
        .unwrap();
        writeln!(s, "solver.max_iterations = {}", self.solver.max_iterations).unwrap();
        writeln!(s, "solver.param_tolerance = {}", self.solver.param_tolerance).unwrap();
        writeln!(s, "solver.cost_tolerance = {}", self.solver.cost_tolerance).unwrap();
        writeln!(s, "solver.lm_initial_damping = {}", self.solver.lm_initial_damping).unwrap();
        writeln!(s, "back_end.time_interval = {}", self.back_end.keyframe.time_interval).unwrap();
        writeln!(s, "back_end.distance_gate = {}", self.back_end.keyframe.distance_gate).unwrap();
        writeln!(
            s,
            "back_end.angle_gate_deg = {}",
            self.back_end.keyframe.angle_gate.to_degrees()
        )
        .unwrap();
        writeln!(s, "back_end.submap_window = {}", self.back_end.submap_window).unwrap();
        writeln!(s, "back_end.fit_neighbors = {}", self.back_end.fit_neighbors).unwrap();
        writeln!(
            s,
            "back_end.max_outer_iterations = {}",
            self.back_end.max_outer_iterations
        )
        .unwrap();
        writeln!(s, "back_end.min_edge_points = {}", self.back_end.min_edge_points).unwrap();
        writeln!(
            s,
            "back_end.max_correspondence_distance = {}",
            self.back_end.max_correspondence_distance
        )
        .unwrap();
        writeln!(s, "back_end.fit_rms_tolerance = {}", self.back_end.fit_rms_tolerance).unwrap();
        writeln!(s, "back_end.min_planar_points = {}", self.back_end.min_planar_points).unwrap();
        writeln!(s, "back_end.loop_search_radius = {}", self.back_end.loop_search_radius).unwrap();
        writeln!(s, "back_end.loop_time_gap = {}", self.back_end.loop_time_gap).unwrap();
        writeln!(
            s,
            "back_end.loop_fitness_threshold = {}",
            self.back_end.loop_fitness_threshold
        )
        .unwrap();
        writeln!(s, "back_end.loop_min_history = {}", self.back_end.loop_min_history).unwrap();
        writeln!(s, "back_end.loop_cooldown = {}", self.back_end.loop_cooldown).unwrap();
        writeln!(s, "back_end.queue_capacity = {}", self.back_end.queue_capacity).unwrap();
        writeln!(s, "pipeline.deskew = {}", self.deskew).unwrap();
        writeln!(s, "pipeline.backend = {}", self.backend).unwrap();
        writeln!(s, "pipeline.scan_period = {}", self.scan_period).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_render_and_parse_back() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_text();
        let parsed = PipelineConfig::parse(&text).unwrap();
        assert_eq!(parsed.sensor.rings, cfg.sensor.rings);
        assert_eq!(parsed.front_end.lambda_ct, cfg.front_end.lambda_ct);
        assert_eq!(parsed.back_end.submap_window, cfg.back_end.submap_window);
        assert_eq!(parsed.deskew, cfg.deskew);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            PipelineConfig::parse("bogus.key = 1\n"),
            Err(ConfigError::UnknownKey { .. })
        ));
    }

    #[test]
    fn bad_value_carries_key() {
        match PipelineConfig::parse("sensor.rings = many\n") {
            Err(ConfigError::BadValue { key, .. }) => assert_eq!(key, "sensor.rings"),
            other => panic!("expected BadValue, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = PipelineConfig::parse(
            "# comment\nfront_end.lambda_ct = 2.0  # trailing\n\nsolver.method = gn\n",
        )
        .unwrap();
        assert_eq!(cfg.front_end.lambda_ct, 2.0);
        assert_eq!(cfg.solver.method, Method::GaussNewton);
        assert_eq!(cfg.front_end.solver.method, Method::GaussNewton);
        cfg.set("front_end.lambda_ct", "0.25").unwrap();
        assert_eq!(cfg.front_end.lambda_ct, 0.25);
    }
}
