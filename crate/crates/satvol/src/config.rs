//! Pipeline configuration: defaults, the text key-value file format, and a
//! stable hash over the canonical serialization.

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
}

/// All pipeline settings. Defaults carry the published constants: the
/// (5, 35) degree convergence window, the 200 m intersection minimum, the
/// 0.6 ratio test, the 3-30 m height band, 1 m GSD and the 85% training
/// fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Area of interest as a (lon, lat) polygon. Required by the pipeline
    /// commands; empty means "not set".
    pub aoi: Vec<(f64, f64)>,
    pub gsd: f64,
    pub convergence_min_deg: f64,
    pub convergence_max_deg: f64,
    pub min_intersection_m: f64,
    pub ratio_test: f64,
    pub ransac_threshold_px: f64,
    pub ransac_iterations: usize,
    pub lm_max_iterations: usize,
    pub lm_lambda_init: f64,
    pub mask_tau: f64,
    pub ndsm_hmin: f64,
    pub ndsm_hmax: f64,
    pub align_search_radius: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Worker threads for date-level parallelism; 0 picks the machine's
    /// core count.
    pub workers: usize,
    /// Output directory, relative to the series root unless absolute.
    pub output_dir: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            aoi: Vec::new(),
            gsd: 1.0,
            convergence_min_deg: 5.0,
            convergence_max_deg: 35.0,
            min_intersection_m: 200.0,
            ratio_test: 0.6,
            ransac_threshold_px: 1.0,
            ransac_iterations: 2000,
            lm_max_iterations: 100,
            lm_lambda_init: 1e-3,
            mask_tau: 1.0,
            ndsm_hmin: 3.0,
            ndsm_hmax: 30.0,
            align_search_radius: 20,
            train_fraction: 0.85,
            seed: 0,
            workers: 0,
            output_dir: "out".to_string(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &'static str, message: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid { key, message: message.to_string() })
            }
        };
        check(self.gsd > 0.0 && self.gsd.is_finite(), "gsd", "must be positive")?;
        check(
            self.convergence_min_deg >= 0.0 && self.convergence_max_deg > self.convergence_min_deg,
            "convergence_max_deg",
            "window must be ordered and non-negative",
        )?;
        check(self.min_intersection_m >= 0.0, "min_intersection_m", "must be non-negative")?;
        check(self.ratio_test > 0.0 && self.ratio_test < 1.0, "ratio_test", "must be in (0, 1)")?;
        check(self.ransac_threshold_px > 0.0, "ransac_threshold_px", "must be positive")?;
        check(self.ransac_iterations >= 1, "ransac_iterations", "must be at least 1")?;
        check(self.lm_max_iterations >= 1, "lm_max_iterations", "must be at least 1")?;
        check(self.lm_lambda_init > 0.0, "lm_lambda_init", "must be positive")?;
        check(self.mask_tau > 0.0, "mask_tau", "must be positive")?;
        check(
            self.ndsm_hmin >= 0.0 && self.ndsm_hmax > self.ndsm_hmin,
            "ndsm_hmax",
            "band must be ordered and non-negative",
        )?;
        check(self.align_search_radius >= 1, "align_search_radius", "must be at least 1")?;
        check(
            self.train_fraction > 0.0 && self.train_fraction <= 1.0,
            "train_fraction",
            "must be in (0, 1]",
        )?;
        check(!self.output_dir.is_empty(), "output_dir", "must not be empty")?;
        for (lon, lat) in &self.aoi {
            check(
                lon.is_finite() && lat.is_finite() && (-180.0..=180.0).contains(lon) && (-90.0..=90.0).contains(lat),
                "aoi",
                "vertices must be finite (lon, lat) pairs in range",
            )?;
        }
        check(self.aoi.is_empty() || self.aoi.len() >= 3, "aoi", "polygon needs at least 3 vertices")?;
        Ok(())
    }

    /// Canonical text form: every key in a fixed order, one `key = value`
    /// per line.
    pub fn to_text(&self) -> String {
        let aoi = self
            .aoi
            .iter()
            .map(|(lon, lat)| format!("{lon},{lat}"))
            .collect::<Vec<_>>()
            .join(" ");
        format!(
            "aoi = {}\ngsd = {}\nconvergence_min_deg = {}\nconvergence_max_deg = {}\n\
             min_intersection_m = {}\nratio_test = {}\nransac_threshold_px = {}\n\
             ransac_iterations = {}\nlm_max_iterations = {}\nlm_lambda_init = {}\n\
             mask_tau = {}\nndsm_hmin = {}\nndsm_hmax = {}\nalign_search_radius = {}\n\
             train_fraction = {}\nseed = {}\nworkers = {}\noutput_dir = {}\n",
            aoi,
            self.gsd,
            self.convergence_min_deg,
            self.convergence_max_deg,
            self.min_intersection_m,
            self.ratio_test,
            self.ransac_threshold_px,
            self.ransac_iterations,
            self.lm_max_iterations,
            self.lm_lambda_init,
            self.mask_tau,
            self.ndsm_hmin,
            self.ndsm_hmax,
            self.align_search_radius,
            self.train_fraction,
            self.seed,
            self.workers,
            self.output_dir,
        )
    }

    /// Hash of the canonical serialization; stable under re-serialization.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse the key-value text form. Unset keys keep their defaults; `#`
/// starts a comment.
pub fn parse_config(text: &str) -> Result<PipelineConfig, ConfigError> {
    let mut config = PipelineConfig::default();
    let mut seen: Vec<String> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: line_no,
            message: "expected key = value".to_string(),
        })?;
        let key = key.trim();
        let value = value.trim();
        if seen.iter().any(|k| k == key) {
            return Err(ConfigError::DuplicateKey(key.to_string()));
        }
        seen.push(key.to_string());

        let parse_f64 = |v: &str| -> Result<f64, ConfigError> {
            v.parse::<f64>().map_err(|_| ConfigError::Parse {
                line: line_no,
                message: format!("bad number {v:?}"),
            })
        };
        let parse_usize = |v: &str| -> Result<usize, ConfigError> {
            v.parse::<usize>().map_err(|_| ConfigError::Parse {
                line: line_no,
                message: format!("bad integer {v:?}"),
            })
        };

        match key {
            "aoi" => {
                let mut poly = Vec::new();
                for pair in value.split_whitespace() {
                    let (lon, lat) = pair.split_once(',').ok_or_else(|| ConfigError::Parse {
                        line: line_no,
                        message: format!("aoi vertex {pair:?} must be lon,lat"),
                    })?;
                    poly.push((parse_f64(lon)?, parse_f64(lat)?));
                }
                config.aoi = poly;
            }
            "gsd" => config.gsd = parse_f64(value)?,
            "convergence_min_deg" => config.convergence_min_deg = parse_f64(value)?,
            "convergence_max_deg" => config.convergence_max_deg = parse_f64(value)?,
            "min_intersection_m" => config.min_intersection_m = parse_f64(value)?,
            "ratio_test" => config.ratio_test = parse_f64(value)?,
            "ransac_threshold_px" => config.ransac_threshold_px = parse_f64(value)?,
            "ransac_iterations" => config.ransac_iterations = parse_usize(value)?,
            "lm_max_iterations" => config.lm_max_iterations = parse_usize(value)?,
            "lm_lambda_init" => config.lm_lambda_init = parse_f64(value)?,
            "mask_tau" => config.mask_tau = parse_f64(value)?,
            "ndsm_hmin" => config.ndsm_hmin = parse_f64(value)?,
            "ndsm_hmax" => config.ndsm_hmax = parse_f64(value)?,
            "align_search_radius" => config.align_search_radius = parse_usize(value)?,
            "train_fraction" => config.train_fraction = parse_f64(value)?,
            "seed" => {
                config.seed = value.parse::<u64>().map_err(|_| ConfigError::Parse {
                    line: line_no,
                    message: format!("bad integer {value:?}"),
                })?;
            }
            "workers" => config.workers = parse_usize(value)?,
            "output_dir" => config.output_dir = value.to_string(),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
    }

    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_constants() {
        let c = PipelineConfig::default();
        assert_eq!(c.convergence_min_deg, 5.0);
        assert_eq!(c.convergence_max_deg, 35.0);
        assert_eq!(c.min_intersection_m, 200.0);
        assert_eq!(c.ratio_test, 0.6);
        assert_eq!(c.ndsm_hmin, 3.0);
        assert_eq!(c.ndsm_hmax, 30.0);
        assert_eq!(c.gsd, 1.0);
        assert_eq!(c.train_fraction, 0.85);
        c.validate().unwrap();
    }

    #[test]
    fn roundtrip_and_hash_stability() {
        let mut c = PipelineConfig::default();
        c.aoi = vec![(29.9, -25.1), (30.1, -25.1), (30.1, -24.9), (29.9, -24.9)];
        c.seed = 42;
        c.mask_tau = 1.5;
        let text = c.to_text();
        let parsed = parse_config(&text).unwrap();
        assert_eq!(parsed, c);
        assert_eq!(parsed.hash(), c.hash());
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = PipelineConfig::default();
        let mut c = base.clone();
        c.seed = 1;
        assert_ne!(base.hash(), c.hash());
        let mut c = base.clone();
        c.ndsm_hmax = 31.0;
        assert_ne!(base.hash(), c.hash());
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(matches!(parse_config("nope = 3\n"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(parse_config("gsd = x\n"), Err(ConfigError::Parse { .. })));
        assert!(matches!(parse_config("gsd = 1\ngsd = 2\n"), Err(ConfigError::DuplicateKey(_))));
        assert!(matches!(parse_config("gsd = -1\n"), Err(ConfigError::Invalid { .. })));
        assert!(matches!(parse_config("ratio_test = 1.5\n"), Err(ConfigError::Invalid { .. })));
        assert!(parse_config("# comment\n\ngsd = 2.0\n").is_ok());
    }

    #[test]
    fn comments_and_whitespace_ignored() {
        let c = parse_config("  mask_tau =  2.0   # site is noisy\n").unwrap();
        assert_eq!(c.mask_tau, 2.0);
    }
}
