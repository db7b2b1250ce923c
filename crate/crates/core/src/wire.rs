//! Record formats exchanged between producers, the broker and the analytics
//! jobs, and their line-delimited JSON encoding.
//!
//! A sample line looks like
//!
//! ```text
//! {"UserID":"101","DataType":"ECG","ValueType":"DOUBLE","Value":82.28,"TimeStamp":1498004502000}
//! ```
//!
//! Numbers are written in their shortest round-trip form, so any value that
//! was itself read from a decimal of at most 15 significant digits is written
//! back with at most 15 digits, and every finite `f64` survives a round trip.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Value used on the wire for a feature or measurement that could not be
/// computed.
pub const INVALID: f64 = -1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
}

fn malformed(msg: impl Into<String>) -> WireError {
    WireError::MalformedRecord(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DataType {
    #[serde(rename = "ECG")]
    Ecg,
    #[serde(rename = "BP")]
    Bp,
}

impl DataType {
    pub fn as_str(self) -> &'static str {
        match self {
            DataType::Ecg => "ECG",
            DataType::Bp => "BP",
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DataType {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "ECG" => Ok(DataType::Ecg),
            "BP" => Ok(DataType::Bp),
            other => Err(malformed(format!("unknown DataType {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueType {
    #[serde(rename = "DOUBLE")]
    Double,
}

/// Unit of the `TimeStamp` field in an incoming line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimestampUnit {
    #[default]
    Millis,
    /// Whole seconds, as in files exported with second resolution; scaled by
    /// 1000 on ingest.
    Seconds,
}

impl FromStr for TimestampUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ms" | "millis" | "milliseconds" => Ok(TimestampUnit::Millis),
            "s" | "seconds" => Ok(TimestampUnit::Seconds),
            other => Err(format!("unknown timestamp unit {other:?}")),
        }
    }
}

/// One timestamped sensor sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub user_id: String,
    pub data_type: DataType,
    pub value_type: ValueType,
    pub value: f64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl SampleRecord {
    pub fn new(
        user_id: impl Into<String>,
        data_type: DataType,
        value: f64,
        timestamp: u64,
    ) -> Result<Self, WireError> {
        if !value.is_finite() {
            return Err(malformed("non-finite Value"));
        }
        Ok(SampleRecord {
            user_id: user_id.into(),
            data_type,
            value_type: ValueType::Double,
            value,
            timestamp,
        })
    }
}

#[derive(Serialize)]
struct SampleOut<'a> {
    #[serde(rename = "UserID")]
    user_id: &'a str,
    #[serde(rename = "DataType")]
    data_type: DataType,
    #[serde(rename = "ValueType")]
    value_type: ValueType,
    #[serde(rename = "Value")]
    value: f64,
    #[serde(rename = "TimeStamp")]
    timestamp: u64,
}

// Fields are taken as raw JSON values so that type errors in one field are
// reported with a useful message instead of serde's generic one.
#[derive(Deserialize)]
struct SampleIn {
    #[serde(rename = "UserID")]
    user_id: Option<serde_json::Value>,
    #[serde(rename = "DataType")]
    data_type: Option<serde_json::Value>,
    #[serde(rename = "ValueType")]
    value_type: Option<serde_json::Value>,
    #[serde(rename = "Value")]
    value: Option<serde_json::Value>,
    #[serde(rename = "TimeStamp")]
    timestamp: Option<serde_json::Value>,
}

/// Encodes a sample as one JSON line, without the trailing newline.
pub fn encode_sample(r: &SampleRecord) -> String {
    let out = SampleOut {
        user_id: &r.user_id,
        data_type: r.data_type,
        value_type: r.value_type,
        value: r.value,
        timestamp: r.timestamp,
    };
    // serializing a struct of strings and finite numbers cannot fail
    serde_json::to_string(&out).expect("sample serialization")
}

pub fn decode_sample(line: &str) -> Result<SampleRecord, WireError> {
    decode_sample_with(line, TimestampUnit::Millis)
}

pub fn decode_sample_with(line: &str, unit: TimestampUnit) -> Result<SampleRecord, WireError> {
    let raw: SampleIn = serde_json::from_str(line.trim_end_matches(['\r', '\n']))
        .map_err(|e| malformed(e.to_string()))?;

    let user_id = match raw.user_id {
        Some(serde_json::Value::String(s)) => s,
        Some(_) => return Err(malformed("UserID must be a string")),
        None => return Err(malformed("missing UserID")),
    };
    let data_type = match raw.data_type {
        Some(serde_json::Value::String(s)) => match s.as_str() {
            "ECG" => DataType::Ecg,
            "BP" => DataType::Bp,
            _ => return Err(malformed(format!("unknown DataType {s:?}"))),
        },
        Some(_) => return Err(malformed("DataType must be a string")),
        None => return Err(malformed("missing DataType")),
    };
    match raw.value_type {
        Some(serde_json::Value::String(s)) if s == "DOUBLE" => {}
        Some(other) => return Err(malformed(format!("unsupported ValueType {other}"))),
        None => return Err(malformed("missing ValueType")),
    }
    let value = match raw.value {
        Some(serde_json::Value::Number(n)) => n
            .as_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| malformed("non-finite Value"))?,
        Some(_) => return Err(malformed("Value must be a number")),
        None => return Err(malformed("missing Value")),
    };
    let timestamp = match raw.timestamp {
        Some(serde_json::Value::Number(n)) => n
            .as_u64()
            .ok_or_else(|| malformed("TimeStamp must be a non-negative integer"))?,
        Some(_) => return Err(malformed("TimeStamp must be a number")),
        None => return Err(malformed("missing TimeStamp")),
    };
    let timestamp = match unit {
        TimestampUnit::Millis => timestamp,
        TimestampUnit::Seconds => timestamp
            .checked_mul(1000)
            .ok_or_else(|| malformed("TimeStamp overflows milliseconds"))?,
    };

    Ok(SampleRecord {
        user_id,
        data_type,
        value_type: ValueType::Double,
        value,
        timestamp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResultKind {
    #[serde(rename = "CHF_RISK")]
    ChfRisk,
    #[serde(rename = "STRESS")]
    Stress,
}

impl ResultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResultKind::ChfRisk => "CHF_RISK",
            ResultKind::Stress => "STRESS",
        }
    }

    /// Inclusive range of the published value.
    pub fn range(self) -> (f64, f64) {
        match self {
            ResultKind::ChfRisk => (0.0, 100.0),
            ResultKind::Stress => (0.0, 1.0),
        }
    }
}

impl fmt::Display for ResultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A per-window analytic output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    #[serde(rename = "UserID")]
    pub user_id: String,
    #[serde(rename = "Kind")]
    pub kind: ResultKind,
    #[serde(rename = "WindowStart")]
    pub window_start: u64,
    #[serde(rename = "WindowEnd")]
    pub window_end: u64,
    #[serde(rename = "Value")]
    pub value: f64,
    #[serde(rename = "Aux", default)]
    pub aux: BTreeMap<String, f64>,
}

impl ResultRecord {
    pub fn validate(&self) -> Result<(), WireError> {
        if self.window_start >= self.window_end {
            return Err(malformed("WindowStart must precede WindowEnd"));
        }
        let (lo, hi) = self.kind.range();
        if !(self.value.is_finite() && self.value >= lo && self.value <= hi) {
            return Err(malformed(format!(
                "{} value {} outside [{lo}, {hi}]",
                self.kind, self.value
            )));
        }
        if let Some((k, _)) = self.aux.iter().find(|(_, v)| !v.is_finite()) {
            return Err(malformed(format!("non-finite aux entry {k:?}")));
        }
        Ok(())
    }
}

pub fn encode_result(r: &ResultRecord) -> String {
    serde_json::to_string(r).expect("result serialization")
}

pub fn decode_result(line: &str) -> Result<ResultRecord, WireError> {
    let r: ResultRecord = serde_json::from_str(line.trim_end_matches(['\r', '\n']))
        .map_err(|e| malformed(e.to_string()))?;
    r.validate()?;
    Ok(r)
}

/// Emitted in place of a result when a window produced nothing publishable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    #[serde(rename = "UserID")]
    pub user_id: String,
    /// Kind of result that was withheld.
    #[serde(rename = "Withheld")]
    pub withheld: ResultKind,
    #[serde(rename = "WindowStart")]
    pub window_start: u64,
    #[serde(rename = "WindowEnd")]
    pub window_end: u64,
    #[serde(rename = "Reason")]
    pub reason: String,
}

pub fn encode_diagnostic(d: &DiagnosticRecord) -> String {
    serde_json::to_string(d).expect("diagnostic serialization")
}

/// Anything a job writes to its output topic or result store.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputRecord {
    Result(ResultRecord),
    Diagnostic(DiagnosticRecord),
}

impl OutputRecord {
    pub fn user_id(&self) -> &str {
        match self {
            OutputRecord::Result(r) => &r.user_id,
            OutputRecord::Diagnostic(d) => &d.user_id,
        }
    }

    pub fn kind(&self) -> ResultKind {
        match self {
            OutputRecord::Result(r) => r.kind,
            OutputRecord::Diagnostic(d) => d.withheld,
        }
    }

    pub fn window_start(&self) -> u64 {
        match self {
            OutputRecord::Result(r) => r.window_start,
            OutputRecord::Diagnostic(d) => d.window_start,
        }
    }

    pub fn encode(&self) -> String {
        match self {
            OutputRecord::Result(r) => encode_result(r),
            OutputRecord::Diagnostic(d) => encode_diagnostic(d),
        }
    }
}

pub fn decode_output(line: &str) -> Result<OutputRecord, WireError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    if value.get("Withheld").is_some() {
        let d: DiagnosticRecord =
            serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        if d.window_start >= d.window_end {
            return Err(malformed("WindowStart must precede WindowEnd"));
        }
        Ok(OutputRecord::Diagnostic(d))
    } else {
        decode_result(line).map(OutputRecord::Result)
    }
}
