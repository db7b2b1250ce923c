//! Replays a signal file into the broker at a configurable pace.
//!
//! Input rows are either `timestamp_ms,value` or a bare `value`; bare values
//! get timestamps synthesized from the sample rate. Lines starting with `#`
//! and blank lines are skipped, anything else unparsable is counted.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::broker::{BrokerApi, BrokerError};
use crate::wire::{encode_sample, DataType, SampleRecord};

#[derive(Debug, Error)]
pub enum ProducerError {
    #[error("cannot read {path}: {source}")]
    SourceUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("invalid replay settings: {0}")]
    Invalid(String),
}

/// Publishing pace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClockMode {
    Realtime,
    /// `k` times faster than real time; record timestamps are unchanged.
    Accelerated(f64),
    AsFastAsPossible,
}

impl ClockMode {
    fn speedup(self) -> Option<f64> {
        match self {
            ClockMode::Realtime => Some(1.0),
            ClockMode::Accelerated(k) => Some(k),
            ClockMode::AsFastAsPossible => None,
        }
    }
}

impl FromStr for ClockMode {
    type Err = String;

    /// `realtime`, `fast`, or `xK` / `accelerated:K`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        let k = match s.as_str() {
            "realtime" | "real-time" => return Ok(ClockMode::Realtime),
            "fast" | "asap" | "as-fast-as-possible" => return Ok(ClockMode::AsFastAsPossible),
            _ => s
                .strip_prefix('x')
                .or_else(|| s.strip_prefix("accelerated:"))
                .ok_or_else(|| format!("unknown clock mode {s:?}"))?,
        };
        let k: f64 = k.parse().map_err(|_| format!("bad speed-up in {s:?}"))?;
        if k > 0.0 && k.is_finite() {
            Ok(ClockMode::Accelerated(k))
        } else {
            Err(format!("speed-up must be positive, got {k}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySpec {
    pub path: PathBuf,
    pub topic: String,
    pub user_id: String,
    pub data_type: DataType,
    pub sample_rate: f64,
    pub clock: ClockMode,
    /// Replays the file again after the end, shifting timestamps forward.
    pub looped: bool,
    /// Origin for synthesized timestamps.
    pub start_ms: u64,
    /// Upper bound on passes when looping; `None` loops until stopped.
    pub max_passes: Option<usize>,
}

impl ReplaySpec {
    pub fn new(path: impl Into<PathBuf>, topic: &str, user_id: &str, data_type: DataType, sample_rate: f64) -> Self {
        ReplaySpec {
            path: path.into(),
            topic: topic.to_string(),
            user_id: user_id.to_string(),
            data_type,
            sample_rate,
            clock: ClockMode::AsFastAsPossible,
            looped: false,
            start_ms: 0,
            max_passes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProducerReport {
    pub published: u64,
    pub malformed_rows: u64,
    pub passes: usize,
}

/// Parsed source rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceRows {
    pub rows: Vec<(u64, f64)>,
    pub malformed: u64,
    /// Time from the last row to the first row of the next pass.
    pub period_ms: u64,
}

/// Parses CSV text. A bare value in row `n` (counting accepted rows) is
/// stamped `start_ms + n * 1000 / sample_rate`, rounded to whole ms.
pub fn parse_rows(text: &str, sample_rate: f64, start_ms: u64) -> SourceRows {
    let spacing = 1000.0 / sample_rate;
    let mut rows: Vec<(u64, f64)> = Vec::new();
    let mut malformed = 0;
    let mut synthesized = 0u64;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = match line.split_once(',') {
            Some((ts, v)) => ts
                .trim()
                .parse::<u64>()
                .ok()
                .zip(v.trim().parse::<f64>().ok()),
            None => line.parse::<f64>().ok().map(|v| {
                let ts = start_ms + (synthesized as f64 * spacing).round() as u64;
                (ts, v)
            }),
        };
        match parsed {
            Some((ts, v)) if v.is_finite() && rows.last().is_none_or(|&(p, _)| ts > p) => {
                rows.push((ts, v));
            }
            _ => {
                malformed += 1;
                continue;
            }
        }
        synthesized += 1;
    }
    let period_ms = match rows.as_slice() {
        [] => 0,
        [_] => spacing.round().max(1.0) as u64,
        [first, ..] => {
            let (prev, last) = (rows[rows.len() - 2].0, rows[rows.len() - 1].0);
            last - first.0 + (last - prev)
        }
    };
    SourceRows {
        rows,
        malformed,
        period_ms,
    }
}

pub fn read_source(path: &Path, sample_rate: f64, start_ms: u64) -> Result<SourceRows, ProducerError> {
    let text = fs::read_to_string(path).map_err(|source| ProducerError::SourceUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_rows(&text, sample_rate, start_ms))
}

/// Publishes the file. Returns early, with a partial report, once `stop` is
/// set.
pub fn run_producer(
    spec: &ReplaySpec,
    broker: &impl BrokerApi,
    stop: &AtomicBool,
) -> Result<ProducerReport, ProducerError> {
    if !(spec.sample_rate > 0.0 && spec.sample_rate.is_finite()) {
        return Err(ProducerError::Invalid("sample rate must be positive".into()));
    }
    let source = read_source(&spec.path, spec.sample_rate, spec.start_ms)?;
    let mut report = ProducerReport {
        malformed_rows: source.malformed,
        ..Default::default()
    };
    let Some(&(t0, _)) = source.rows.first() else {
        return Ok(report);
    };
    let speedup = spec.clock.speedup();
    let started = Instant::now();
    let max_passes = if spec.looped { spec.max_passes } else { Some(1) };
    let mut shift = 0u64;
    while max_passes.is_none_or(|m| report.passes < m) {
        for &(ts, value) in &source.rows {
            if stop.load(Ordering::Relaxed) {
                return Ok(report);
            }
            let ts = ts + shift;
            if let Some(k) = speedup {
                let due = Duration::from_secs_f64((ts - t0) as f64 / 1000.0 / k);
                let now = started.elapsed();
                if due > now {
                    std::thread::sleep(due - now);
                }
            }
            let record = SampleRecord::new(spec.user_id.clone(), spec.data_type, value, ts)
                .expect("rows hold finite values");
            broker.publish(&spec.topic, &encode_sample(&record))?;
            report.published += 1;
        }
        report.passes += 1;
        shift += source.period_ms;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::{Broker, Retention};
    use crate::wire::decode_sample;

    #[test]
    fn clock_modes_parse() {
        assert_eq!("realtime".parse(), Ok(ClockMode::Realtime));
        assert_eq!("fast".parse(), Ok(ClockMode::AsFastAsPossible));
        assert_eq!("x10".parse(), Ok(ClockMode::Accelerated(10.0)));
        assert_eq!("accelerated:2.5".parse(), Ok(ClockMode::Accelerated(2.5)));
        assert!("x0".parse::<ClockMode>().is_err());
        assert!("slow".parse::<ClockMode>().is_err());
    }

    #[test]
    fn bare_values_get_spaced_timestamps() {
        let src = parse_rows("# header\n1.0\n2.0\n\nnope\n3.0\n", 500.0, 1000);
        assert_eq!(src.rows, vec![(1000, 1.0), (1002, 2.0), (1004, 3.0)]);
        assert_eq!(src.malformed, 1);
        assert_eq!(src.period_ms, 6);
    }

    #[test]
    fn timestamped_rows_kept_and_disorder_rejected() {
        let src = parse_rows("10,1.5\n20,2.5\n15,9\n30,NaN\n40,4\n", 500.0, 0);
        assert_eq!(src.rows, vec![(10, 1.5), (20, 2.5), (40, 4.0)]);
        assert_eq!(src.malformed, 2);
    }

    #[test]
    fn non_integer_spacing_rounds() {
        let src = parse_rows("1\n2\n3\n4\n", 360.0, 0);
        let ts: Vec<u64> = src.rows.iter().map(|r| r.0).collect();
        assert_eq!(ts, vec![0, 3, 6, 8]);
    }

    #[test]
    fn looping_keeps_timestamps_monotonic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        fs::write(&path, "1\n2\n3\n").unwrap();
        let broker = Broker::in_memory();
        broker.create_topic("ecg", Retention::Forever).unwrap();
        let mut spec = ReplaySpec::new(&path, "ecg", "u", DataType::Ecg, 500.0);
        spec.looped = true;
        spec.max_passes = Some(3);
        let report = run_producer(&spec, &broker, &AtomicBool::new(false)).unwrap();
        assert_eq!(report.published, 9);
        let batch = broker.fetch("ecg", 0, 100).unwrap();
        let ts: Vec<u64> = batch
            .records
            .iter()
            .map(|(_, l)| decode_sample(l).unwrap().timestamp)
            .collect();
        assert_eq!(ts, vec![0, 2, 4, 6, 8, 10, 12, 14, 16]);
    }

    #[test]
    fn missing_file_is_unreadable() {
        let broker = Broker::in_memory();
        let spec = ReplaySpec::new("/nonexistent/file.csv", "ecg", "u", DataType::Ecg, 500.0);
        assert!(matches!(
            run_producer(&spec, &broker, &AtomicBool::new(false)),
            Err(ProducerError::SourceUnreadable { .. })
        ));
    }
}
