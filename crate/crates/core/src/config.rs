//! Flat `key = value` configuration with namespaced keys.
//!
//! ```text
//! # comments and blank lines are ignored
//! window.ms = 5000
//! filter.ecg.low_hz = 0.5
//! risk.model.path = model.conf
//! ```
//!
//! Unknown keys are rejected so typos surface at startup.

use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::broker::Retention;
use crate::delineate::DelineationConfig;
use crate::dsp::FilterSpec;
use crate::stress::{SpectralConfig, StressConfig};
use crate::wire::TimestampUnit;
use crate::windowing::{WindowConfig, DEFAULT_LATENESS_MS, DEFAULT_RR_CAPACITY, DEFAULT_WINDOW_MS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}: {1}")]
    Io(String, #[source] io::Error),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {message}")]
    BadValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Splits text into `(line number, key, value)` triples.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((i + 1, key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicNames {
    pub ecg: String,
    pub bp: String,
    pub risk: String,
    pub stress: String,
    pub retention: Retention,
}

impl Default for TopicNames {
    fn default() -> Self {
        TopicNames {
            ecg: "ecg".into(),
            bp: "bp".into(),
            risk: "chf-risk".into(),
            stress: "stress".into(),
            retention: Retention::Forever,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub topics: TopicNames,
    pub broker_address: String,
    pub broker_data_dir: Option<PathBuf>,

    pub window_ms: u64,
    pub lateness_ms: u64,
    pub rr_capacity: usize,

    pub ecg_rate_hz: f64,
    pub bp_rate_hz: f64,
    pub timestamp_unit: TimestampUnit,

    pub ecg_low_hz: f64,
    pub ecg_high_hz: f64,
    pub ecg_filter_order: usize,
    pub bp_cutoff_hz: f64,
    pub bp_filter_order: usize,

    pub delineation: DelineationConfig,

    pub risk_model_path: Option<PathBuf>,
    /// ECG windows a risk window waits for its BP partner.
    pub bp_wait_windows: u64,
    /// Longest RR interval accepted across a window boundary.
    pub max_rr_ms: f64,

    pub stress: StressConfig,

    pub store_dir: PathBuf,
    pub group: Option<String>,
    pub poll_max: usize,
    pub stats_interval_ms: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            topics: TopicNames::default(),
            broker_address: "127.0.0.1:7070".into(),
            broker_data_dir: None,
            window_ms: DEFAULT_WINDOW_MS,
            lateness_ms: DEFAULT_LATENESS_MS,
            rr_capacity: DEFAULT_RR_CAPACITY,
            ecg_rate_hz: 500.0,
            bp_rate_hz: 500.0,
            timestamp_unit: TimestampUnit::Millis,
            ecg_low_hz: 0.5,
            ecg_high_hz: 40.0,
            ecg_filter_order: 4,
            bp_cutoff_hz: 10.0,
            bp_filter_order: 4,
            delineation: DelineationConfig::default(),
            risk_model_path: None,
            bp_wait_windows: 2,
            max_rr_ms: 2000.0,
            stress: StressConfig::default(),
            store_dir: PathBuf::from("results"),
            group: None,
            poll_max: 2000,
            stats_interval_ms: 10_000,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        line,
        key: key.to_string(),
        message: e.to_string(),
    })
}

impl Config {
    /// Parses config text. Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut c = Config::default();
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            match base_dir {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        for (line, key, v) in parse_key_values(text)? {
            let k = key.as_str();
            let d = &mut c.delineation;
            match k {
                "topics.ecg" => c.topics.ecg = v,
                "topics.bp" => c.topics.bp = v,
                "topics.risk" => c.topics.risk = v,
                "topics.stress" => c.topics.stress = v,
                "topics.retention_ms" => c.topics.retention = parse(line, k, &v)?,
                "broker.address" => c.broker_address = v,
                "broker.data_dir" => c.broker_data_dir = Some(resolve(&v)),
                "window.ms" => c.window_ms = parse(line, k, &v)?,
                "window.lateness_ms" => c.lateness_ms = parse(line, k, &v)?,
                "window.rr_capacity" => c.rr_capacity = parse(line, k, &v)?,
                "signal.ecg.rate_hz" => c.ecg_rate_hz = parse(line, k, &v)?,
                "signal.bp.rate_hz" => c.bp_rate_hz = parse(line, k, &v)?,
                "signal.timestamp_unit" => c.timestamp_unit = parse(line, k, &v)?,
                "filter.ecg.low_hz" => c.ecg_low_hz = parse(line, k, &v)?,
                "filter.ecg.high_hz" => c.ecg_high_hz = parse(line, k, &v)?,
                "filter.ecg.order" => c.ecg_filter_order = parse(line, k, &v)?,
                "filter.bp.cutoff_hz" => c.bp_cutoff_hz = parse(line, k, &v)?,
                "filter.bp.order" => c.bp_filter_order = parse(line, k, &v)?,
                "delineate.r_threshold" => d.r_threshold = parse(line, k, &v)?,
                "delineate.refractory_ms" => d.refractory_ms = parse(line, k, &v)?,
                "delineate.q_window_ms" => d.q_window_ms = parse(line, k, &v)?,
                "delineate.s_window_ms" => d.s_window_ms = parse(line, k, &v)?,
                "delineate.p_min_ms" => d.p_min_ms = parse(line, k, &v)?,
                "delineate.p_max_ms" => d.p_max_ms = parse(line, k, &v)?,
                "delineate.t_min_ms" => d.t_min_ms = parse(line, k, &v)?,
                "delineate.t_max_ms" => d.t_max_ms = parse(line, k, &v)?,
                "delineate.st_offset_ms" => d.st_offset_ms = parse(line, k, &v)?,
                "delineate.theta_st" => d.theta_st = parse(line, k, &v)?,
                "delineate.theta_t" => d.theta_t = parse(line, k, &v)?,
                "risk.model.path" => c.risk_model_path = Some(resolve(&v)),
                "risk.bp_wait_windows" => c.bp_wait_windows = parse(line, k, &v)?,
                "stress.initial" => c.stress.initial = parse(line, k, &v)?,
                "stress.step" => c.stress.step = parse(line, k, &v)?,
                "stress.max_rr_ms" => c.max_rr_ms = parse(line, k, &v)?,
                "stress.tachogram_rate_hz" => {
                    c.stress.spectral.tachogram_rate_hz = parse(line, k, &v)?
                }
                "stress.lf_low_hz" => c.stress.spectral.lf_band.0 = parse(line, k, &v)?,
                "stress.lf_high_hz" => c.stress.spectral.lf_band.1 = parse(line, k, &v)?,
                "stress.hf_low_hz" => c.stress.spectral.hf_band.0 = parse(line, k, &v)?,
                "stress.hf_high_hz" => c.stress.spectral.hf_band.1 = parse(line, k, &v)?,
                "store.dir" => c.store_dir = resolve(&v),
                "job.group" => c.group = Some(v),
                "job.poll_max" => c.poll_max = parse(line, k, &v)?,
                "job.stats_interval_ms" => c.stats_interval_ms = parse(line, k, &v)?,
                _ => return Err(ConfigError::UnknownKey { line, key }),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.window_ms == 0 {
            return invalid("window.ms must be positive".into());
        }
        if self.rr_capacity == 0 {
            return invalid("window.rr_capacity must be positive".into());
        }
        if self.poll_max == 0 {
            return invalid("job.poll_max must be positive".into());
        }
        for (name, rate) in [("ecg", self.ecg_rate_hz), ("bp", self.bp_rate_hz)] {
            if !(rate > 0.0 && rate.is_finite()) {
                return invalid(format!("signal.{name}.rate_hz must be positive"));
            }
        }
        self.ecg_filter()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("filter.ecg: {e}")))?;
        self.bp_filter()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("filter.bp: {e}")))?;
        let s = &self.stress;
        if !(0.0..=1.0).contains(&s.initial) || !(s.step > 0.0 && s.step <= 1.0) {
            return invalid("stress.initial must be in [0, 1] and stress.step in (0, 1]".into());
        }
        let SpectralConfig {
            tachogram_rate_hz,
            lf_band,
            hf_band,
            ..
        } = s.spectral;
        let nyquist = tachogram_rate_hz / 2.0;
        if !(tachogram_rate_hz > 0.0)
            || !(0.0 < lf_band.0 && lf_band.0 < lf_band.1 && lf_band.1 <= hf_band.0)
            || !(hf_band.0 < hf_band.1 && hf_band.1 <= nyquist)
        {
            return invalid("stress spectral bands must be ordered and below Nyquist".into());
        }
        for t in [
            &self.topics.ecg,
            &self.topics.bp,
            &self.topics.risk,
            &self.topics.stress,
        ] {
            crate::broker::validate_name(t).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn ecg_filter(&self) -> FilterSpec {
        FilterSpec::bandpass(
            self.ecg_low_hz,
            self.ecg_high_hz,
            self.ecg_filter_order,
            self.ecg_rate_hz,
        )
    }

    pub fn bp_filter(&self) -> FilterSpec {
        FilterSpec::lowpass(self.bp_cutoff_hz, self.bp_filter_order, self.bp_rate_hz)
    }

    pub fn ecg_windows(&self) -> WindowConfig {
        WindowConfig {
            window_ms: self.window_ms,
            lateness_ms: self.lateness_ms,
            sample_rate: self.ecg_rate_hz,
        }
    }

    pub fn bp_windows(&self) -> WindowConfig {
        WindowConfig {
            sample_rate: self.bp_rate_hz,
            ..self.ecg_windows()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Config::default().validate().unwrap();
        assert_eq!(Config::parse("", None).unwrap(), Config::default());
    }

    #[test]
    fn parses_namespaced_keys() {
        let c = Config::parse(
            "# test\nwindow.ms = 4000\nfilter.ecg.low_hz=1.0\nstress.step = 0.05\n\
             topics.retention_ms = 60000\nrisk.model.path = m.conf\n",
            Some(Path::new("/etc/app")),
        )
        .unwrap();
        assert_eq!(c.window_ms, 4000);
        assert_eq!(c.ecg_low_hz, 1.0);
        assert_eq!(c.stress.step, 0.05);
        assert_eq!(c.topics.retention, Retention::Millis(60_000));
        assert_eq!(c.risk_model_path, Some(PathBuf::from("/etc/app/m.conf")));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Config::parse("window.mss = 1", None),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            Config::parse("\nwindow.ms = soon", None),
            Err(ConfigError::BadValue { line: 2, .. })
        ));
        assert!(matches!(
            Config::parse("just text", None),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            Config::parse("filter.ecg.high_hz = 300", None),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::parse("topics.ecg = has space", None),
            Err(ConfigError::Invalid(_))
        ));
    }
}
