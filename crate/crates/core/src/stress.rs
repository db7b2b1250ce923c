//! Heart-rate variability and the stepped stress index.
//!
//! HRV is the RMSSD of the RR series. Each window's HRV is compared with the
//! previous window's: a drop raises the index by one step, a rise lowers it.

use thiserror::Error;

use crate::dsp::{self, DspError};
use crate::windowing::RrBuffer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StressError {
    #[error("insufficient RR data: {0}")]
    InsufficientData(String),
    #[error("degenerate spectrum: no power in the HF band")]
    DegenerateSpectrum,
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Root mean square of successive differences of `rr` (ms).
pub fn rmssd(rr: &[f64]) -> Result<f64, StressError> {
    if rr.len() < 3 {
        return Err(StressError::InsufficientData(format!(
            "RMSSD needs 3 intervals, got {}",
            rr.len()
        )));
    }
    let sum_sq: f64 = rr.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Ok((sum_sq / (rr.len() - 1) as f64).sqrt())
}

/// RMSSD from already differenced intervals.
pub fn rmssd_from_diffs(diffs: &[f64]) -> Result<f64, StressError> {
    if diffs.len() < 2 {
        return Err(StressError::InsufficientData(format!(
            "RMSSD needs 2 differences, got {}",
            diffs.len()
        )));
    }
    Ok((diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralConfig {
    pub tachogram_rate_hz: f64,
    pub lf_band: (f64, f64),
    pub hf_band: (f64, f64),
    /// Minimum RR data for a spectral estimate, ms.
    pub min_span_ms: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            tachogram_rate_hz: 4.0,
            lf_band: (0.04, 0.15),
            hf_band: (0.15, 0.4),
            min_span_ms: crate::windowing::RR_FULL_SPAN_MS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfHf {
    pub vlf: f64,
    pub lf: f64,
    pub hf: f64,
    pub ratio: f64,
}

/// Resamples an RR series onto a uniform grid by linear interpolation. Each
/// interval is placed at the time of the beat that ends it.
pub fn tachogram(rr: &[f64], rate_hz: f64) -> Vec<f64> {
    if rr.len() < 2 {
        return rr.to_vec();
    }
    let mut times = Vec::with_capacity(rr.len());
    let mut t = 0.0;
    for &r in rr {
        t += r / 1000.0;
        times.push(t);
    }
    let step = 1.0 / rate_hz;
    let n = ((times[times.len() - 1] - times[0]) / step).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for i in 0..n {
        let t = times[0] + i as f64 * step;
        while k + 2 < times.len() && times[k + 1] < t {
            k += 1;
        }
        let (t0, t1) = (times[k], times[k + 1]);
        let frac = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        out.push(rr[k] + frac * (rr[k + 1] - rr[k]));
    }
    out
}

/// LF and HF power of a uniformly sampled tachogram.
pub fn lf_hf_from_tachogram(
    tacho: &[f64],
    cfg: &SpectralConfig,
) -> Result<LfHf, StressError> {
    let s = dsp::psd(tacho, cfg.tachogram_rate_hz)?;
    let vlf = dsp::band_power(&s, 0.0, cfg.lf_band.0)?;
    let lf = dsp::band_power(&s, cfg.lf_band.0, cfg.lf_band.1)?;
    let hf = dsp::band_power(&s, cfg.hf_band.0, cfg.hf_band.1)?;
    if hf <= 1e-12 * s.total_power() || hf <= 0.0 {
        return Err(StressError::DegenerateSpectrum);
    }
    Ok(LfHf {
        vlf,
        lf,
        hf,
        ratio: lf / hf,
    })
}

/// LF/HF of at least a minute of RR intervals (ms).
pub fn lf_hf_ratio(rr: &[f64], cfg: &SpectralConfig) -> Result<LfHf, StressError> {
    let span: f64 = rr.iter().sum();
    if span + 1e-6 < cfg.min_span_ms {
        return Err(StressError::InsufficientData(format!(
            "{span:.0} ms of RR data, need {:.0}",
            cfg.min_span_ms
        )));
    }
    lf_hf_from_tachogram(&tachogram(rr, cfg.tachogram_rate_hz), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressConfig {
    pub initial: f64,
    pub step: f64,
    pub spectral: SpectralConfig,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            initial: 0.1,
            step: 0.1,
            spectral: SpectralConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StressState {
    config: StressConfig,
    pub rr_buffer: RrBuffer,
    pub baseline_hrv: Option<f64>,
    pub stress_index: f64,
    pub last_hr: Option<f64>,
    pub last_hrv: Option<f64>,
    pub last_lf_hf: Option<LfHf>,
}

/// Outcome of one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressResult {
    pub hr_bpm: Option<f64>,
    pub hrv_ms: Option<f64>,
    pub lf_hf: Option<LfHf>,
    pub stress_index: f64,
    /// HRV came from the full RR buffer rather than the window alone.
    pub from_buffer: bool,
}

// keeps repeated steps on the decimal grid (0.1 + 0.1 + 0.1 == 0.3)
fn quantize(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

impl StressState {
    pub fn new(config: StressConfig, rr_capacity: usize) -> Self {
        StressState {
            config,
            rr_buffer: RrBuffer::new(rr_capacity),
            baseline_hrv: None,
            stress_index: config.initial.clamp(0.0, 1.0),
            last_hr: None,
            last_hrv: None,
            last_lf_hf: None,
        }
    }

    pub fn config(&self) -> &StressConfig {
        &self.config
    }

    /// Moves the index by one step against the change in HRV, then makes
    /// `hrv` the new baseline. An unknown HRV leaves everything unchanged.
    pub fn apply_hrv(&mut self, hrv: Option<f64>) -> f64 {
        let Some(hrv) = hrv else {
            return self.stress_index;
        };
        if let Some(baseline) = self.baseline_hrv {
            let delta = if hrv < baseline {
                self.config.step
            } else if hrv > baseline {
                -self.config.step
            } else {
                0.0
            };
            self.stress_index = quantize((self.stress_index + delta).clamp(0.0, 1.0));
        }
        self.baseline_hrv = Some(hrv);
        self.last_hrv = Some(hrv);
        self.stress_index
    }

    /// Processes the RR intervals (ms) measured in one window.
    pub fn update(&mut self, window_rr: &[f64]) -> StressResult {
        self.rr_buffer.push_intervals(window_rr);
        let hr = (!window_rr.is_empty())
            .then(|| 60_000.0 * window_rr.len() as f64 / window_rr.iter().sum::<f64>());
        let from_buffer = self.rr_buffer.is_full();
        let hrv = if from_buffer {
            rmssd_from_diffs(&self.rr_buffer.snapshot()).ok()
        } else {
            rmssd(window_rr).ok()
        };
        let lf_hf = if from_buffer {
            lf_hf_ratio(&self.rr_buffer.intervals(), &self.config.spectral).ok()
        } else {
            None
        };
        let index = self.apply_hrv(hrv);
        self.last_hr = hr.or(self.last_hr);
        if lf_hf.is_some() {
            self.last_lf_hf = lf_hf;
        }
        StressResult {
            hr_bpm: hr,
            hrv_ms: hrv,
            lf_hf,
            stress_index: index,
            from_buffer,
        }
    }
}
