//! Pipeline configuration and its plain-text `key = value` file format.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Unknown keys are an error so that typos do not silently fall
//! back to defaults.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Every tunable of preprocessing, registration, odometry and localization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Peaks kept per azimuth.
    pub k: usize,
    /// Intensity threshold; returns must be strictly above it.
    pub z_min: f64,
    /// Range resolution in meters per bin.
    pub gamma: f64,
    /// Doppler correction factor.
    pub beta: f64,
    /// Static range offset in meters.
    pub dr_r: f64,
    /// Surface-point grid cell size in meters.
    pub grid_res: f64,
    /// Minimum neighbourhood size for a surface point.
    pub min_points: usize,
    /// Keyframes in the odometry submap.
    pub s_o: usize,
    /// Map frames used during repeat localization (odd).
    pub s_m: usize,
    /// Live frames used during repeat localization; 0 disables the window.
    pub s_l: usize,
    pub kf_dist: f64,
    pub kf_rot: f64,
    /// Scale of the Cauchy loss.
    pub cauchy_c: f64,
    pub max_iters: usize,
    pub conv_tol: f64,
    /// Correspondence gate in meters; `None` means `2 * grid_res`.
    pub r_max: Option<f64>,
    pub use_doppler: bool,
    pub use_range_offset: bool,
    pub use_encoder: bool,
    pub use_motion_comp: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 40,
            z_min: 60.0,
            gamma: 0.0596,
            beta: 0.0,
            dr_r: -0.31,
            grid_res: 3.0,
            min_points: 6,
            s_o: 3,
            s_m: 5,
            s_l: 3,
            kf_dist: 1.5,
            kf_rot: 5f64.to_radians(),
            cauchy_c: 0.1,
            max_iters: 50,
            conv_tol: 1e-7,
            r_max: None,
            use_doppler: true,
            use_range_offset: true,
            use_encoder: true,
            use_motion_comp: true,
        }
    }
}

/// Stages that can be switched off individually for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoDoppler,
    NoRangeOffset,
    NoEncoder,
    NoMotionComp,
    /// All four undistortion steps disabled.
    NoUndistortion,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no-doppler" => Ok(Ablation::NoDoppler),
            "no-range-offset" => Ok(Ablation::NoRangeOffset),
            "no-encoder" => Ok(Ablation::NoEncoder),
            "no-motion-comp" => Ok(Ablation::NoMotionComp),
            "none-of-three" | "no-undistortion" => Ok(Ablation::NoUndistortion),
            other => Err(format!(
                "unknown ablation `{other}` (expected no-doppler, no-range-offset, no-encoder, no-motion-comp, no-undistortion)"
            )),
        }
    }
}

const KEYS: &[&str] = &[
    "k",
    "z_min",
    "gamma",
    "beta",
    "dr_r",
    "grid_res",
    "min_points",
    "s_o",
    "s_m",
    "s_l",
    "kf_dist",
    "kf_rot",
    "cauchy_c",
    "max_iters",
    "conv_tol",
    "r_max",
    "use_doppler",
    "use_range_offset",
    "use_encoder",
    "use_motion_comp",
];

impl PipelineConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Correspondence gate actually used by registration.
    pub fn correspondence_radius(&self) -> f64 {
        self.r_max.unwrap_or(2.0 * self.grid_res)
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::NoDoppler => self.use_doppler = false,
            Ablation::NoRangeOffset => self.use_range_offset = false,
            Ablation::NoEncoder => self.use_encoder = false,
            Ablation::NoMotionComp => self.use_motion_comp = false,
            Ablation::NoUndistortion => {
                self.use_doppler = false;
                self.use_range_offset = false;
                self.use_encoder = false;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.k < 1 {
            return fail("k must be >= 1");
        }
        if self.s_m < 1 || self.s_m % 2 == 0 {
            return fail("s_m must be odd and >= 1");
        }
        if !(self.gamma > 0.0) {
            return fail("gamma must be > 0");
        }
        if !(self.grid_res > 0.0) {
            return fail("grid_res must be > 0");
        }
        if !(self.kf_dist > 0.0) {
            return fail("kf_dist must be > 0");
        }
        if !(self.kf_rot > 0.0) {
            return fail("kf_rot must be > 0");
        }
        if self.min_points < 3 {
            return fail("min_points must be >= 3");
        }
        if self.s_o < 1 {
            return fail("s_o must be >= 1");
        }
        if !(self.cauchy_c > 0.0) {
            return fail("cauchy_c must be > 0");
        }
        if !(self.conv_tol > 0.0) {
            return fail("conv_tol must be > 0");
        }
        if let Some(r) = self.r_max {
            if !(r > 0.0) {
                return fail("r_max must be > 0");
            }
        }
        if !self.z_min.is_finite() || !self.beta.is_finite() || !self.dr_r.is_finite() {
            return fail("z_min, beta and dr_r must be finite");
        }
        Ok(())
    }

    /// Warnings for legal but questionable settings.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.s_l > self.s_m {
            out.push(format!(
                "s_l = {} exceeds s_m = {}; localization may lean on drifting live frames",
                self.s_l, self.s_m
            ));
        }
        out
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse::<T>().map_err(|_| ConfigError::InvalidValue {
                key: key.to_string(),
                message: format!("cannot parse `{value}`"),
            })
        }
        fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
            match value {
                "true" | "1" | "on" | "yes" => Ok(true),
                "false" | "0" | "off" | "no" => Ok(false),
                _ => Err(ConfigError::InvalidValue {
                    key: key.to_string(),
                    message: format!("expected a boolean, got `{value}`"),
                }),
            }
        }
        match key {
            "k" => self.k = num(key, value)?,
            "z_min" => self.z_min = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "dr_r" => self.dr_r = num(key, value)?,
            "grid_res" => self.grid_res = num(key, value)?,
            "min_points" => self.min_points = num(key, value)?,
            "s_o" => self.s_o = num(key, value)?,
            "s_m" => self.s_m = num(key, value)?,
            "s_l" => self.s_l = num(key, value)?,
            "kf_dist" => self.kf_dist = num(key, value)?,
            "kf_rot" => self.kf_rot = num(key, value)?,
            "cauchy_c" => self.cauchy_c = num(key, value)?,
            "max_iters" => self.max_iters = num(key, value)?,
            "conv_tol" => self.conv_tol = num(key, value)?,
            "r_max" => {
                self.r_max = if value == "auto" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "use_doppler" => self.use_doppler = flag(key, value)?,
            "use_range_offset" => self.use_range_offset = flag(key, value)?,
            "use_encoder" => self.use_encoder = flag(key, value)?,
            "use_motion_comp" => self.use_motion_comp = flag(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses a `key = value` document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        for (key, value, line) in parse_key_values(text)? {
            cfg.set(&key, &value).map_err(|e| ConfigError::Parse {
                line,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Renders every key in a form that `parse` reads back exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "k = {}", self.k);
        let _ = writeln!(out, "z_min = {:?}", self.z_min);
        let _ = writeln!(out, "gamma = {:?}", self.gamma);
        let _ = writeln!(out, "beta = {:?}", self.beta);
        let _ = writeln!(out, "dr_r = {:?}", self.dr_r);
        let _ = writeln!(out, "grid_res = {:?}", self.grid_res);
        let _ = writeln!(out, "min_points = {}", self.min_points);
        let _ = writeln!(out, "s_o = {}", self.s_o);
        let _ = writeln!(out, "s_m = {}", self.s_m);
        let _ = writeln!(out, "s_l = {}", self.s_l);
        let _ = writeln!(out, "kf_dist = {:?}", self.kf_dist);
        let _ = writeln!(out, "kf_rot = {:?}", self.kf_rot);
        let _ = writeln!(out, "cauchy_c = {:?}", self.cauchy_c);
        let _ = writeln!(out, "max_iters = {}", self.max_iters);
        let _ = writeln!(out, "conv_tol = {:?}", self.conv_tol);
        match self.r_max {
            Some(r) => {
                let _ = writeln!(out, "r_max = {r:?}");
            }
            None => {
                let _ = writeln!(out, "r_max = auto");
            }
        }
        let _ = writeln!(out, "use_doppler = {}", self.use_doppler);
        let _ = writeln!(out, "use_range_offset = {}", self.use_range_offset);
        let _ = writeln!(out, "use_encoder = {}", self.use_encoder);
        let _ = writeln!(out, "use_motion_comp = {}", self.use_motion_comp);
        out
    }
}

/// Splits a `key = value` document into `(key, value, line_number)` triples.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        out.push((key.trim().to_string(), value.trim().to_string(), idx + 1));
    }
    Ok(out)
}
