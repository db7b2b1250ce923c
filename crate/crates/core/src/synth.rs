//! Synthetic ECG and blood-pressure signals for demos and tests.
//!
//! Each ECG beat is a sum of Gaussian bumps for the P, Q, R, S and T waves
//! centered on the beat's R time, plus an optional ST-segment shift.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    /// Offset from the R peak, seconds.
    pub at: f64,
    pub amp: f64,
    /// Standard deviation, seconds.
    pub width: f64,
}

impl Bump {
    fn eval(&self, dt: f64) -> f64 {
        let z = (dt - self.at) / self.width;
        self.amp * (-0.5 * z * z).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcgTemplate {
    pub p_amp: f64,
    pub q_amp: f64,
    pub r_amp: f64,
    pub s_amp: f64,
    pub t_amp: f64,
    /// Added around the ST segment (about 110 ms after R); negative values
    /// depress it.
    pub st_shift: f64,
    /// Widens the Q and S bumps, stretching the QRS complex.
    pub qrs_widen: f64,
    /// Delays the T wave, stretching the QT interval (seconds).
    pub t_delay: f64,
}

impl Default for EcgTemplate {
    fn default() -> Self {
        EcgTemplate {
            p_amp: 0.15,
            q_amp: -0.10,
            r_amp: 1.0,
            s_amp: -0.20,
            t_amp: 0.30,
            st_shift: 0.0,
            qrs_widen: 1.0,
            t_delay: 0.0,
        }
    }
}

impl EcgTemplate {
    pub fn bumps(&self) -> Vec<Bump> {
        let mut b = vec![
            Bump {
                at: -0.200,
                amp: self.p_amp,
                width: 0.025,
            },
            Bump {
                at: -0.030 * self.qrs_widen,
                amp: self.q_amp,
                width: 0.008 * self.qrs_widen,
            },
            Bump {
                at: 0.0,
                amp: self.r_amp,
                width: 0.010,
            },
            Bump {
                at: 0.030 * self.qrs_widen,
                amp: self.s_amp,
                width: 0.008 * self.qrs_widen,
            },
            Bump {
                at: 0.250 + self.t_delay,
                amp: self.t_amp,
                width: 0.040,
            },
        ];
        if self.st_shift != 0.0 {
            b.push(Bump {
                at: 0.110,
                amp: self.st_shift,
                width: 0.030,
            });
        }
        b
    }

    /// Approximate peak-to-peak amplitude of one beat.
    pub fn span(&self) -> f64 {
        let b = self.bumps();
        let hi = b.iter().map(|b| b.amp).fold(0.0, f64::max);
        let lo = b.iter().map(|b| b.amp).fold(0.0, f64::min);
        hi - lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticEcg {
    pub template: EcgTemplate,
    pub sample_rate: f64,
}

impl SyntheticEcg {
    /// Renders `duration_s` seconds with R peaks at `beats_at_s`.
    pub fn render(&self, beats_at_s: &[f64], duration_s: f64) -> Vec<f64> {
        let n = (duration_s * self.sample_rate).round() as usize;
        self.render_range(beats_at_s, 0, n)
    }

    /// Renders samples `[start, end)` of the infinite signal.
    pub fn render_range(&self, beats_at_s: &[f64], start: usize, end: usize) -> Vec<f64> {
        let bumps = self.template.bumps();
        // bumps are negligible beyond 0.6 s from their beat
        const REACH: f64 = 0.6;
        (start..end)
            .map(|i| {
                let t = i as f64 / self.sample_rate;
                let lo = beats_at_s.partition_point(|&c| c < t - REACH);
                beats_at_s[lo..]
                    .iter()
                    .take_while(|&&c| c <= t + REACH)
                    .map(|&c| bumps.iter().map(|b| b.eval(t - c)).sum::<f64>())
                    .sum()
            })
            .collect()
    }
}

/// Beat times from `first_s` until `duration_s`, with RR intervals given by
/// `rr_ms(beat_time_s)`.
pub fn beat_times(first_s: f64, duration_s: f64, mut rr_ms: impl FnMut(f64) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = first_s;
    while t < duration_s {
        out.push(t);
        t += rr_ms(t) / 1000.0;
    }
    out
}

/// RR series around `mean_ms` modulated by an LF and an HF sinusoid.
pub fn modulated_rr(mean_ms: f64, lf_amp_ms: f64, hf_amp_ms: f64) -> impl FnMut(f64) -> f64 {
    move |t| {
        mean_ms
            + lf_amp_ms * (2.0 * PI * 0.1 * t).sin()
            + hf_amp_ms * (2.0 * PI * 0.25 * t).sin()
    }
}

/// Arterial pressure oscillating between `dbp` and `sbp` once per beat.
pub fn bp_waveform(beats_at_s: &[f64], sbp: f64, dbp: f64, sample_rate: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate;
            let k = beats_at_s.partition_point(|&c| c <= t);
            let phase = match (k.checked_sub(1).map(|j| beats_at_s[j]), beats_at_s.get(k)) {
                (Some(a), Some(&b)) => (t - a) / (b - a),
                (Some(a), None) => {
                    let period = if k >= 2 { a - beats_at_s[k - 2] } else { 1.0 };
                    ((t - a) / period).fract()
                }
                (None, Some(&b)) => 1.0 - ((b - t) / 1.0).fract(),
                (None, None) => t.fract(),
            };
            // systolic peak a fifth of the way into the cycle
            let shape = 0.5 - 0.5 * (2.0 * PI * (phase + 0.3)).cos();
            dbp + (sbp - dbp) * shape
        })
        .collect()
}
