//! Per-window analytics shared by the jobs: preprocessing, delineation and
//! the conversion of analytic results into output records.

use std::collections::BTreeMap;

use crate::config::Config;
use crate::delineate::{
    beat_intervals, bp_features, delineate_ecg, morphology, BeatIntervals, BpFeatures,
    DelineationConfig, EcgKeyPoints, MorphologyFlags,
};
use crate::dsp::{self, DspError, SosFilter};
use crate::risk::{extract_features, score, ChfFeatureVector, NaiveBayesModel, RiskError};
use crate::stress::StressResult;
use crate::windowing::SignalWindow;
use crate::wire::{DiagnosticRecord, OutputRecord, ResultKind, ResultRecord, INVALID};

/// ECG preprocessing and delineation for one window.
#[derive(Debug, Clone)]
pub struct EcgAnalyzer {
    filter: SosFilter,
    order: usize,
    delineation: DelineationConfig,
}

#[derive(Debug, Clone, Default)]
pub struct EcgAnalysis {
    pub keypoints: EcgKeyPoints,
    pub intervals: BeatIntervals,
    pub morphology: MorphologyFlags,
}

impl EcgAnalyzer {
    pub fn new(config: &Config) -> Result<Self, DspError> {
        let spec = config.ecg_filter();
        Ok(EcgAnalyzer {
            filter: SosFilter::design(&spec)?,
            order: spec.order,
            delineation: config.delineation,
        })
    }

    /// Z-normalizes, band-passes and delineates. Windows shorter than a
    /// second, constant windows and windows too short to filter produce no
    /// beats.
    pub fn analyze(&self, w: &SignalWindow) -> EcgAnalysis {
        let values = w.values();
        let long_enough = w.len() as f64 >= w.sample_rate && values.len() > 3 * self.order;
        let Some(filtered) = long_enough
            .then(|| dsp::znormalize(&values).ok())
            .flatten()
            .map(|z| self.filter.apply(&z))
        else {
            return EcgAnalysis::default();
        };
        let keypoints = delineate_ecg(&filtered, w.sample_rate, &self.delineation);
        EcgAnalysis {
            intervals: beat_intervals(&keypoints, w.sample_rate),
            morphology: morphology(&keypoints, w.sample_rate, &self.delineation),
            keypoints,
        }
    }

    /// Absolute timestamps (ms) of the detected R peaks.
    pub fn r_times(analysis: &EcgAnalysis, w: &SignalWindow) -> Vec<f64> {
        analysis
            .keypoints
            .r_indices()
            .into_iter()
            .map(|i| w.samples[i].0 as f64)
            .collect()
    }
}

/// Low-pass filtering and pressure extrema for one BP window.
#[derive(Debug, Clone)]
pub struct BpAnalyzer {
    filter: SosFilter,
    order: usize,
}

impl BpAnalyzer {
    pub fn new(config: &Config) -> Result<Self, DspError> {
        let spec = config.bp_filter();
        Ok(BpAnalyzer {
            filter: SosFilter::design(&spec)?,
            order: spec.order,
        })
    }

    pub fn analyze(&self, w: &SignalWindow) -> BpFeatures {
        let values = w.values();
        if values.len() <= 3 * self.order {
            return BpFeatures::default();
        }
        bp_features(&self.filter.apply(&values))
    }
}

fn or_invalid(v: Option<f64>) -> f64 {
    v.unwrap_or(INVALID)
}

/// Builds the risk job's output for one ECG window and its BP partner.
pub fn risk_output(
    ecg: &SignalWindow,
    analysis: &EcgAnalysis,
    bp: BpFeatures,
    model: &NaiveBayesModel,
) -> Result<OutputRecord, RiskError> {
    let features: ChfFeatureVector = extract_features(&analysis.intervals, &analysis.morphology);
    let (start, end) = (ecg.window_start, ecg.window_end());
    let Some(value) = score(&features, model)? else {
        return Ok(OutputRecord::Diagnostic(DiagnosticRecord {
            user_id: ecg.user_id.clone(),
            withheld: ResultKind::ChfRisk,
            window_start: start,
            window_end: end,
            reason: format!(
                "no valid features ({} beats detected)",
                analysis.keypoints.beats.len()
            ),
        }));
    };
    let bi = &analysis.intervals;
    let mut aux: BTreeMap<String, f64> = features.to_wire();
    aux.insert("BEATS".into(), analysis.keypoints.beats.len() as f64);
    aux.insert("HR".into(), or_invalid(bi.hr_bpm));
    aux.insert("QRS_MS".into(), or_invalid(bi.mean_qrs_ms));
    aux.insert("QT_MS".into(), or_invalid(bi.mean_qt_ms));
    aux.insert("SBP".into(), or_invalid(bp.sbp_mmhg));
    aux.insert("DBP".into(), or_invalid(bp.dbp_mmhg));
    Ok(OutputRecord::Result(ResultRecord {
        user_id: ecg.user_id.clone(),
        kind: ResultKind::ChfRisk,
        window_start: start,
        window_end: end,
        value,
        aux,
    }))
}

/// Builds the stress job's output for one window.
/// `last_r_ms` is the time of the window's last R peak, kept so a restarted
/// job can measure the interval across the boundary.
pub fn stress_output(
    w: &SignalWindow,
    r: &StressResult,
    beats: usize,
    last_r_ms: Option<f64>,
) -> OutputRecord {
    let mut aux = BTreeMap::new();
    aux.insert("BEATS".to_string(), beats as f64);
    aux.insert("LAST_R_MS".to_string(), or_invalid(last_r_ms));
    aux.insert("HR".to_string(), or_invalid(r.hr_bpm));
    aux.insert("HRV".to_string(), or_invalid(r.hrv_ms));
    aux.insert("LF".to_string(), or_invalid(r.lf_hf.map(|x| x.lf)));
    aux.insert("HF".to_string(), or_invalid(r.lf_hf.map(|x| x.hf)));
    aux.insert("LF_HF".to_string(), or_invalid(r.lf_hf.map(|x| x.ratio)));
    aux.insert(
        "FROM_BUFFER".to_string(),
        if r.from_buffer { 1.0 } else { 0.0 },
    );
    OutputRecord::Result(ResultRecord {
        user_id: w.user_id.clone(),
        kind: ResultKind::Stress,
        window_start: w.window_start,
        window_end: w.window_end(),
        value: r.stress_index,
        aux,
    })
}
