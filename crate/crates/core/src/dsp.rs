//! Numerical kernels shared by the risk and stress pipelines.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("degenerate signal: {0}")]
    DegenerateSignal(&'static str),
    #[error("invalid filter design: {0}")]
    InvalidFilter(String),
    #[error("unstable filter design: pole magnitude {0}")]
    UnstableDesign(f64),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid band [{lo}, {hi}] Hz")]
    InvalidBand { lo: f64, hi: f64 },
}

/// Affine map of `x` onto `[0, 1]`.
pub fn minmax_normalize(x: &[f64]) -> Result<Vec<f64>, DspError> {
    if x.len() < 2 {
        return Err(DspError::InsufficientData {
            needed: 2,
            got: x.len(),
        });
    }
    let (min, max) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = max - min;
    if !(span > 0.0) || !span.is_finite() {
        return Err(DspError::DegenerateSignal("constant window"));
    }
    Ok(x.iter().map(|&v| ((v - min) / span).clamp(0.0, 1.0)).collect())
}

/// Zero mean, unit population standard deviation.
pub fn znormalize(x: &[f64]) -> Result<Vec<f64>, DspError> {
    if x.is_empty() {
        return Err(DspError::InsufficientData { needed: 1, got: 0 });
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(DspError::DegenerateSignal("zero variance"));
    }
    Ok(x.iter().map(|v| (v - mean) / std).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    Lowpass { cutoff_hz: f64 },
    Highpass { cutoff_hz: f64 },
    Bandpass { low_hz: f64, high_hz: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Total design order. Must be even; a bandpass splits it evenly between
    /// its highpass and lowpass halves.
    pub order: usize,
    pub sample_rate: f64,
}

impl FilterSpec {
    pub fn lowpass(cutoff_hz: f64, order: usize, sample_rate: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Lowpass { cutoff_hz },
            order,
            sample_rate,
        }
    }

    pub fn highpass(cutoff_hz: f64, order: usize, sample_rate: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Highpass { cutoff_hz },
            order,
            sample_rate,
        }
    }

    pub fn bandpass(low_hz: f64, high_hz: f64, order: usize, sample_rate: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Bandpass { low_hz, high_hz },
            order,
            sample_rate,
        }
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let nyquist = self.sample_rate / 2.0;
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return Err(DspError::InvalidFilter(format!(
                "sample rate {} Hz",
                self.sample_rate
            )));
        }
        if self.order == 0 || self.order % 2 != 0 {
            return Err(DspError::InvalidFilter(format!(
                "order {} is not a positive even number",
                self.order
            )));
        }
        let check = |f: f64| {
            if f > 0.0 && f < nyquist {
                Ok(())
            } else {
                Err(DspError::InvalidFilter(format!(
                    "cutoff {f} Hz outside (0, {nyquist})"
                )))
            }
        };
        match self.kind {
            FilterKind::Lowpass { cutoff_hz } | FilterKind::Highpass { cutoff_hz } => {
                check(cutoff_hz)
            }
            FilterKind::Bandpass { low_hz, high_hz } => {
                check(low_hz)?;
                check(high_hz)?;
                if low_hz < high_hz {
                    Ok(())
                } else {
                    Err(DspError::InvalidFilter(format!(
                        "bandpass low {low_hz} Hz not below high {high_hz} Hz"
                    )))
                }
            }
        }
    }
}

/// Second-order section in transposed direct form II, normalized so that
/// `a0 == 1`. First-order sections have `b2 == a2 == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn lowpass(w0: f64, q: f64) -> Self {
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 - cos) / 2.0 / a0,
            b1: (1.0 - cos) / a0,
            b2: (1.0 - cos) / 2.0 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn highpass(w0: f64, q: f64) -> Self {
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 + cos) / 2.0 / a0,
            b1: -(1.0 + cos) / a0,
            b2: (1.0 + cos) / 2.0 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn lowpass_first(w0: f64) -> Self {
        let k = (w0 / 2.0).tan();
        Biquad {
            b0: k / (1.0 + k),
            b1: k / (1.0 + k),
            b2: 0.0,
            a1: (k - 1.0) / (k + 1.0),
            a2: 0.0,
        }
    }

    fn highpass_first(w0: f64) -> Self {
        let k = (w0 / 2.0).tan();
        Biquad {
            b0: 1.0 / (1.0 + k),
            b1: -1.0 / (1.0 + k),
            b2: 0.0,
            a1: (k - 1.0) / (k + 1.0),
            a2: 0.0,
        }
    }

    /// Gain at z = 1.
    pub fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Largest pole magnitude of `z^2 + a1 z + a2`.
    pub fn pole_radius(&self) -> f64 {
        let disc = self.a1 * self.a1 - 4.0 * self.a2;
        if disc >= 0.0 {
            let r = disc.sqrt();
            ((-self.a1 + r) / 2.0).abs().max(((-self.a1 - r) / 2.0).abs())
        } else {
            // complex pair: |p|^2 = a2
            self.a2.sqrt()
        }
    }

    /// State that makes a constant input `u` produce a constant output.
    fn steady_state(&self, u: f64) -> [f64; 2] {
        let y = self.dc_gain() * u;
        [y - self.b0 * u, self.b2 * u - self.a2 * y]
    }

    #[inline]
    fn step(&self, state: &mut [f64; 2], x: f64) -> f64 {
        let y = self.b0 * x + state[0];
        state[0] = self.b1 * x - self.a1 * y + state[1];
        state[1] = self.b2 * x - self.a2 * y;
        y
    }
}

/// Butterworth sections of the given order at normalized angular cutoff `w0`,
/// using the bilinear transform with prewarping.
fn butterworth_sections(order: usize, w0: f64, highpass: bool) -> Vec<Biquad> {
    let mut sections = Vec::with_capacity(order.div_ceil(2));
    for k in 0..order / 2 {
        let q = 1.0 / (2.0 * ((2 * k + 1) as f64 * PI / (2 * order) as f64).sin());
        sections.push(if highpass {
            Biquad::highpass(w0, q)
        } else {
            Biquad::lowpass(w0, q)
        });
    }
    if order % 2 == 1 {
        sections.push(if highpass {
            Biquad::highpass_first(w0)
        } else {
            Biquad::lowpass_first(w0)
        });
    }
    sections
}

/// A designed cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    pub fn design(spec: &FilterSpec) -> Result<Self, DspError> {
        spec.validate()?;
        let w = |f: f64| 2.0 * PI * f / spec.sample_rate;
        let sections = match spec.kind {
            FilterKind::Lowpass { cutoff_hz } => {
                butterworth_sections(spec.order, w(cutoff_hz), false)
            }
            FilterKind::Highpass { cutoff_hz } => {
                butterworth_sections(spec.order, w(cutoff_hz), true)
            }
            FilterKind::Bandpass { low_hz, high_hz } => {
                let half = spec.order / 2;
                let mut s = butterworth_sections(half, w(low_hz), true);
                s.extend(butterworth_sections(half, w(high_hz), false));
                s
            }
        };
        for s in &sections {
            let r = s.pole_radius();
            if !(r < 1.0) {
                return Err(DspError::UnstableDesign(r));
            }
        }
        Ok(SosFilter { sections })
    }

    pub fn dc_gain(&self) -> f64 {
        self.sections.iter().map(Biquad::dc_gain).product()
    }

    /// Causal filtering. The section states start at the steady state for
    /// the first sample, so a constant input passes through without a
    /// start-up transient.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        let Some(&first) = x.first() else {
            return y;
        };
        let mut u = first;
        for s in &self.sections {
            let mut state = s.steady_state(u);
            u *= s.dc_gain();
            for v in y.iter_mut() {
                *v = s.step(&mut state, *v);
            }
        }
        y
    }
}

/// Designs and applies a Butterworth filter.
pub fn butterworth(x: &[f64], spec: &FilterSpec) -> Result<Vec<f64>, DspError> {
    let filter = SosFilter::design(spec)?;
    let needed = 3 * spec.order + 1;
    if x.len() < needed {
        return Err(DspError::InsufficientData {
            needed,
            got: x.len(),
        });
    }
    Ok(filter.apply(x))
}

/// `d[i] = x[i + 1] - x[i]`.
pub fn first_difference(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[1] - w[0]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtremumKind {
    Maximum,
    Minimum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extremum {
    /// Index into the original (undifferenced) series.
    pub index: usize,
    pub kind: ExtremumKind,
}

/// Sign changes of a difference series. An extremum between `d[i-1]` and
/// `d[i]` sits at index `i` of the original series; across a plateau the
/// first plateau index is reported.
pub fn zero_crossing_extrema(d: &[f64]) -> Vec<Extremum> {
    let mut out = Vec::new();
    let mut last_sign: Option<bool> = None;
    let mut plateau_start: Option<usize> = None;
    for (i, &v) in d.iter().enumerate() {
        if v == 0.0 {
            plateau_start.get_or_insert(i);
            continue;
        }
        let rising = v > 0.0;
        if let Some(prev) = last_sign {
            if prev != rising {
                out.push(Extremum {
                    index: plateau_start.unwrap_or(i),
                    kind: if prev {
                        ExtremumKind::Maximum
                    } else {
                        ExtremumKind::Minimum
                    },
                });
            }
        }
        last_sign = Some(rising);
        plateau_start = None;
    }
    out
}

/// Local maxima of a normalized series above `threshold`, at least
/// `refractory` samples apart. Within a refractory span the larger peak
/// wins; equal peaks resolve to the earlier one.
pub fn peaks_above(x: &[f64], threshold: f64, refractory: usize) -> Vec<usize> {
    let extrema = zero_crossing_extrema(&first_difference(x));
    peaks_from_extrema(x, &extrema, threshold, refractory)
}

pub(crate) fn peaks_from_extrema(
    x: &[f64],
    extrema: &[Extremum],
    threshold: f64,
    refractory: usize,
) -> Vec<usize> {
    let mut candidates: Vec<usize> = extrema
        .iter()
        .filter(|e| e.kind == ExtremumKind::Maximum && x[e.index] > threshold)
        .map(|e| e.index)
        .collect();
    candidates.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut accepted: Vec<usize> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|&a| a.abs_diff(c) >= refractory) {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();
    accepted
}

/// One-sided power spectral density.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

impl Spectrum {
    pub fn resolution(&self) -> f64 {
        self.freqs.get(1).copied().unwrap_or(0.0) - self.freqs[0]
    }

    pub fn max_freq(&self) -> f64 {
        *self.freqs.last().unwrap_or(&0.0)
    }

    /// Integral over the whole frequency axis.
    pub fn total_power(&self) -> f64 {
        self.freqs
            .windows(2)
            .zip(self.power.windows(2))
            .map(|(f, p)| (f[1] - f[0]) * (p[0] + p[1]) / 2.0)
            .sum()
    }
}

/// Periodogram of the mean-removed, Hann-windowed series, scaled as a
/// density (units²/Hz) with the window's power gain divided out.
pub fn psd(x: &[f64], sample_rate: f64) -> Result<Spectrum, DspError> {
    const MIN_LEN: usize = 16;
    if x.len() < MIN_LEN {
        return Err(DspError::InsufficientData {
            needed: MIN_LEN,
            got: x.len(),
        });
    }
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    // symmetric Hann
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect();
    let window_power: f64 = window.iter().map(|w| w * w).sum();

    let mut buf: Vec<Complex64> = x
        .iter()
        .zip(&window)
        .map(|(v, w)| Complex64::new((v - mean) * w, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let bins = n / 2 + 1;
    let scale = 1.0 / (sample_rate * window_power);
    let mut freqs = Vec::with_capacity(bins);
    let mut power = Vec::with_capacity(bins);
    for (k, c) in buf.iter().take(bins).enumerate() {
        let edge = k == 0 || (n % 2 == 0 && k == n / 2);
        let p = c.norm_sqr() * scale * if edge { 1.0 } else { 2.0 };
        freqs.push(k as f64 * sample_rate / n as f64);
        power.push(p.max(0.0));
    }
    Ok(Spectrum { freqs, power })
}

/// Trapezoidal integral of the spectrum over `[lo, hi]`, interpolating
/// linearly at band edges that fall between bins.
pub fn band_power(s: &Spectrum, lo: f64, hi: f64) -> Result<f64, DspError> {
    let top = s.max_freq();
    if !(lo >= 0.0 && lo < hi && hi <= top + 1e-12) {
        return Err(DspError::InvalidBand { lo, hi });
    }
    let hi = hi.min(top);
    let mut total = 0.0;
    for (f, p) in s.freqs.windows(2).zip(s.power.windows(2)) {
        let (f0, f1) = (f[0], f[1]);
        let a = lo.max(f0);
        let b = hi.min(f1);
        if b <= a {
            continue;
        }
        let at = |t: f64| p[0] + (p[1] - p[0]) * (t - f0) / (f1 - f0);
        total += (b - a) * (at(a) + at(b)) / 2.0;
    }
    Ok(total)
}
