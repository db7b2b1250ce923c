//! CHF risk: seven binary high-level ECG features scored by a naive Bayes
//! model in log-odds form, rescaled between the lowest and highest scores
//! reachable with the features that could be measured.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::config::{parse_key_values, ConfigError};
use crate::delineate::{BeatIntervals, MorphologyFlags};

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    HrGt80,
    QrsGt100,
    QrsGt120,
    QtGt410,
    StDepression,
    StElevation,
    InvertedT,
}

impl Feature {
    pub const ALL: [Feature; 7] = [
        Feature::HrGt80,
        Feature::QrsGt100,
        Feature::QrsGt120,
        Feature::QtGt410,
        Feature::StDepression,
        Feature::StElevation,
        Feature::InvertedT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::HrGt80 => "hr_gt_80",
            Feature::QrsGt100 => "qrs_gt_100",
            Feature::QrsGt120 => "qrs_gt_120",
            Feature::QtGt410 => "qt_gt_410",
            Feature::StDepression => "st_depression",
            Feature::StElevation => "st_elevation",
            Feature::InvertedT => "inverted_t",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = RiskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| RiskError::InvalidModel(format!("unknown feature {s:?}")))
    }
}

/// Seven ternary flags; `None` marks a feature that could not be measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChfFeatureVector(pub [Option<bool>; 7]);

impl ChfFeatureVector {
    pub fn get(&self, f: Feature) -> Option<bool> {
        self.0[f.index()]
    }

    pub fn set(&mut self, f: Feature, v: Option<bool>) {
        self.0[f.index()] = v;
    }

    pub fn valid_count(&self) -> usize {
        self.0.iter().flatten().count()
    }

    /// Builds a fully valid vector from the low seven bits of `bits`, in
    /// [`Feature::ALL`] order.
    pub fn from_bits(bits: u8) -> Self {
        let mut v = [None; 7];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = Some(bits >> i & 1 == 1);
        }
        ChfFeatureVector(v)
    }

    /// `1.0`, `0.0`, or `-1.0` for invalid, keyed by feature name.
    pub fn to_wire(&self) -> BTreeMap<String, f64> {
        Feature::ALL
            .iter()
            .map(|&f| {
                let v = match self.get(f) {
                    Some(true) => 1.0,
                    Some(false) => 0.0,
                    None => crate::wire::INVALID,
                };
                (f.name().to_string(), v)
            })
            .collect()
    }
}

/// Thresholds are strict: a value exactly at the threshold is not flagged.
pub fn extract_features(bi: &BeatIntervals, mf: &MorphologyFlags) -> ChfFeatureVector {
    let gt = |v: Option<f64>, limit: f64| v.map(|v| v > limit);
    ChfFeatureVector([
        gt(bi.hr_bpm, 80.0),
        gt(bi.mean_qrs_ms, 100.0),
        gt(bi.mean_qrs_ms, 120.0),
        gt(bi.mean_qt_ms, 410.0),
        mf.st_depression,
        mf.st_elevation,
        mf.inverted_t,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureLikelihood {
    /// P(feature | CHF)
    pub p: f64,
    /// P(feature | healthy)
    pub q: f64,
}

impl FeatureLikelihood {
    /// Log-odds contribution of the feature being present and absent.
    fn log_ratios(&self) -> (f64, f64) {
        (
            (self.p / self.q).ln(),
            ((1.0 - self.p) / (1.0 - self.q)).ln(),
        )
    }

    /// Log-odds swing between absent and present.
    pub fn weight(&self) -> f64 {
        let (on, off) = self.log_ratios();
        on - off
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveBayesModel {
    pub prior: f64,
    pub likelihoods: [FeatureLikelihood; 7],
}

impl Default for NaiveBayesModel {
    /// Illustrative parameters; replace them with literature-derived values
    /// for real use.
    fn default() -> Self {
        let l = |p, q| FeatureLikelihood { p, q };
        NaiveBayesModel {
            prior: 0.1,
            likelihoods: [
                l(0.6, 0.3),
                l(0.5, 0.2),
                l(0.35, 0.08),
                l(0.45, 0.15),
                l(0.4, 0.1),
                l(0.3, 0.08),
                l(0.4, 0.12),
            ],
        }
    }
}

fn open_unit(v: f64) -> bool {
    v > 0.0 && v < 1.0
}

impl NaiveBayesModel {
    pub fn validate(&self) -> Result<(), RiskError> {
        if !open_unit(self.prior) {
            return Err(RiskError::InvalidModel(format!(
                "prior {} outside (0, 1)",
                self.prior
            )));
        }
        for (f, l) in Feature::ALL.iter().zip(&self.likelihoods) {
            if !open_unit(l.p) || !open_unit(l.q) {
                return Err(RiskError::InvalidModel(format!(
                    "{f}: p={} q={} must lie in (0, 1)",
                    l.p, l.q
                )));
            }
            if l.p <= l.q {
                return Err(RiskError::InvalidModel(format!(
                    "{f}: p={} must exceed q={}",
                    l.p, l.q
                )));
            }
        }
        Ok(())
    }

    pub fn likelihood(&self, f: Feature) -> FeatureLikelihood {
        self.likelihoods[f.index()]
    }

    /// Parses `prior = x` and `<feature>.p = x` / `<feature>.q = x` lines.
    /// Keys not given keep their default values.
    pub fn parse(text: &str) -> Result<Self, RiskError> {
        let mut model = NaiveBayesModel::default();
        for (line, key, value) in parse_key_values(text)? {
            let number: f64 = value.parse().map_err(|_| {
                RiskError::InvalidModel(format!("line {line}: {value:?} is not a number"))
            })?;
            if key == "prior" {
                model.prior = number;
                continue;
            }
            let (name, which) = key.rsplit_once('.').ok_or_else(|| {
                RiskError::InvalidModel(format!("line {line}: unknown key {key:?}"))
            })?;
            let l = &mut model.likelihoods[name.parse::<Feature>()?.index()];
            match which {
                "p" => l.p = number,
                "q" => l.q = number,
                _ => {
                    return Err(RiskError::InvalidModel(format!(
                        "line {line}: unknown key {key:?}"
                    )))
                }
            }
        }
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RiskError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        Self::parse(&text)
    }
}

/// Risk percentage in `[0, 100]`, or `None` when no feature is valid.
pub fn score(fv: &ChfFeatureVector, m: &NaiveBayesModel) -> Result<Option<f64>, RiskError> {
    m.validate()?;
    // the prior cancels out of the normalized score
    let (mut num, mut den) = (0.0, 0.0);
    let mut any = false;
    for f in Feature::ALL {
        let Some(present) = fv.get(f) else {
            continue;
        };
        any = true;
        let (on, off) = m.likelihood(f).log_ratios();
        if present {
            num += on - off;
        }
        den += on - off;
    }
    if !any {
        return Ok(None);
    }
    // p > q makes every "on" term exceed its "off" term, so den > 0
    Ok(Some((100.0 * (num / den)).clamp(0.0, 100.0)))
}
