//! ECG key-point delineation, interval measurement and morphology flags, and
//! blood-pressure extrema.
//!
//! Anything that cannot be measured is `None` here and travels on the wire as
//! [`crate::wire::INVALID`].

use crate::dsp::{self, Extremum, ExtremumKind};
use crate::windowing::SignalWindow;

/// Search windows and thresholds for delineation, in milliseconds and
/// normalized amplitude units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelineationConfig {
    pub r_threshold: f64,
    pub refractory_ms: f64,
    /// Q is searched in `(R - q_window_ms, R)`.
    pub q_window_ms: f64,
    /// S is searched in `(R, R + s_window_ms)`.
    pub s_window_ms: f64,
    /// P is searched in `(R - p_max_ms, R - p_min_ms)`.
    pub p_min_ms: f64,
    pub p_max_ms: f64,
    /// T is searched in `(R + t_min_ms, R + t_max_ms)`.
    pub t_min_ms: f64,
    pub t_max_ms: f64,
    /// ST level is read this long after S.
    pub st_offset_ms: f64,
    pub theta_st: f64,
    pub theta_t: f64,
}

impl Default for DelineationConfig {
    fn default() -> Self {
        DelineationConfig {
            r_threshold: 0.90,
            refractory_ms: 200.0,
            q_window_ms: 50.0,
            s_window_ms: 50.0,
            p_min_ms: 80.0,
            p_max_ms: 250.0,
            t_min_ms: 80.0,
            t_max_ms: 400.0,
            st_offset_ms: 80.0,
            theta_st: 0.04,
            theta_t: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyPoint {
    pub index: usize,
    /// Amplitude in the min-max normalized window.
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beat {
    pub r: KeyPoint,
    pub p: Option<KeyPoint>,
    pub q: Option<KeyPoint>,
    pub s: Option<KeyPoint>,
    pub t: Option<KeyPoint>,
}

impl Beat {
    /// Index or `-1`, in P, Q, R, S, T order.
    pub fn sentinel_indices(&self) -> [i64; 5] {
        let idx = |k: Option<KeyPoint>| k.map_or(-1, |k| k.index as i64);
        [idx(self.p), idx(self.q), self.r.index as i64, idx(self.s), idx(self.t)]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EcgKeyPoints {
    pub beats: Vec<Beat>,
    /// The normalized window the amplitudes refer to. Empty when the window
    /// was degenerate.
    pub normalized: Vec<f64>,
}

impl EcgKeyPoints {
    pub fn r_indices(&self) -> Vec<usize> {
        self.beats.iter().map(|b| b.r.index).collect()
    }
}

fn ms_to_samples(ms: f64, rate: f64) -> f64 {
    ms * rate / 1000.0
}

/// Picks the extremum of `kind` strictly inside `(lo, hi)` with the most
/// extreme amplitude. `None` if the range leaves the window or holds no
/// candidate.
fn pick(
    x: &[f64],
    extrema: &[Extremum],
    kind: ExtremumKind,
    lo: f64,
    hi: f64,
) -> Option<KeyPoint> {
    if lo < 0.0 || hi > (x.len() - 1) as f64 {
        return None;
    }
    let start = extrema.partition_point(|e| (e.index as f64) <= lo);
    extrema[start..]
        .iter()
        .take_while(|e| (e.index as f64) < hi)
        .filter(|e| e.kind == kind)
        .map(|e| KeyPoint {
            index: e.index,
            amplitude: x[e.index],
        })
        .reduce(|best, k| {
            let better = match kind {
                ExtremumKind::Maximum => k.amplitude > best.amplitude,
                ExtremumKind::Minimum => k.amplitude < best.amplitude,
            };
            if better {
                k
            } else {
                best
            }
        })
}

/// Locates R peaks and their P, Q, S and T companions.
pub fn delineate_ecg(values: &[f64], sample_rate: f64, cfg: &DelineationConfig) -> EcgKeyPoints {
    let Ok(x) = dsp::minmax_normalize(values) else {
        return EcgKeyPoints::default();
    };
    let extrema = dsp::zero_crossing_extrema(&dsp::first_difference(&x));
    let refractory = ms_to_samples(cfg.refractory_ms, sample_rate).round().max(1.0) as usize;
    let peaks = dsp::peaks_from_extrema(&x, &extrema, cfg.r_threshold, refractory);
    let s = |ms: f64| ms_to_samples(ms, sample_rate);

    let beats = peaks
        .into_iter()
        .map(|r| {
            let rf = r as f64;
            Beat {
                r: KeyPoint {
                    index: r,
                    amplitude: x[r],
                },
                q: pick(&x, &extrema, ExtremumKind::Minimum, rf - s(cfg.q_window_ms), rf),
                s: pick(&x, &extrema, ExtremumKind::Minimum, rf, rf + s(cfg.s_window_ms)),
                p: pick(
                    &x,
                    &extrema,
                    ExtremumKind::Maximum,
                    rf - s(cfg.p_max_ms),
                    rf - s(cfg.p_min_ms),
                ),
                t: pick(
                    &x,
                    &extrema,
                    ExtremumKind::Maximum,
                    rf + s(cfg.t_min_ms),
                    rf + s(cfg.t_max_ms),
                ),
            }
        })
        .collect();
    EcgKeyPoints {
        beats,
        normalized: x,
    }
}

/// Convenience wrapper over a window's values.
pub fn delineate_window(w: &SignalWindow, cfg: &DelineationConfig) -> EcgKeyPoints {
    delineate_ecg(&w.values(), w.sample_rate, cfg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BeatInterval {
    pub qrs_ms: Option<f64>,
    pub qt_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeatIntervals {
    /// Between consecutive R peaks; one fewer than beats.
    pub rr_ms: Vec<f64>,
    pub beats: Vec<BeatInterval>,
    pub hr_bpm: Option<f64>,
    pub mean_qrs_ms: Option<f64>,
    pub mean_qt_ms: Option<f64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn beat_intervals(k: &EcgKeyPoints, sample_rate: f64) -> BeatIntervals {
    let to_ms = |samples: usize| samples as f64 * 1000.0 / sample_rate;
    let rr_ms: Vec<f64> = k
        .beats
        .windows(2)
        .map(|w| to_ms(w[1].r.index - w[0].r.index))
        .collect();
    let beats: Vec<BeatInterval> = k
        .beats
        .iter()
        .map(|b| BeatInterval {
            qrs_ms: b.q.zip(b.s).map(|(q, s)| to_ms(s.index - q.index)),
            qt_ms: b.q.zip(b.t).map(|(q, t)| to_ms(t.index - q.index)),
        })
        .collect();
    BeatIntervals {
        hr_bpm: mean(rr_ms.iter().copied()).map(|m| 60_000.0 / m),
        mean_qrs_ms: mean(beats.iter().filter_map(|b| b.qrs_ms)),
        mean_qt_ms: mean(beats.iter().filter_map(|b| b.qt_ms)),
        rr_ms,
        beats,
    }
}

/// Window-level morphology patterns; `None` when no beat could be assessed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MorphologyFlags {
    pub st_depression: Option<bool>,
    pub st_elevation: Option<bool>,
    pub inverted_t: Option<bool>,
}

fn majority(votes: &[bool]) -> Option<bool> {
    if votes.is_empty() {
        return None;
    }
    let yes = votes.iter().filter(|&&v| v).count();
    Some(2 * yes > votes.len())
}

/// Compares ST level and T amplitude with the isoelectric baseline taken at
/// the PQ midpoint of each beat.
pub fn morphology(k: &EcgKeyPoints, sample_rate: f64, cfg: &DelineationConfig) -> MorphologyFlags {
    let x = &k.normalized;
    let st_offset = ms_to_samples(cfg.st_offset_ms, sample_rate).round() as usize;
    let mut dep = Vec::new();
    let mut elev = Vec::new();
    let mut inv = Vec::new();
    for b in &k.beats {
        let (Some(p), Some(q)) = (b.p, b.q) else {
            continue;
        };
        let baseline = x[(p.index + q.index) / 2];
        if let Some(st) = b.s.map(|s| s.index + st_offset).and_then(|i| x.get(i)) {
            dep.push(baseline - st > cfg.theta_st);
            elev.push(st - baseline > cfg.theta_st);
        }
        if let Some(t) = b.t {
            inv.push(t.amplitude - baseline < -cfg.theta_t);
        }
    }
    MorphologyFlags {
        st_depression: majority(&dep),
        st_elevation: majority(&elev),
        inverted_t: majority(&inv),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BpFeatures {
    pub sbp_mmhg: Option<f64>,
    pub dbp_mmhg: Option<f64>,
}

/// Systolic and diastolic pressure as the mean of the local maxima and
/// minima of a filtered window, in its own units.
pub fn bp_features(values: &[f64]) -> BpFeatures {
    let extrema = dsp::zero_crossing_extrema(&dsp::first_difference(values));
    let mean_of = |kind: ExtremumKind| {
        let picked: Vec<f64> = extrema
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| values[e.index])
            .collect();
        (picked.len() >= 2).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    };
    BpFeatures {
        sbp_mmhg: mean_of(ExtremumKind::Maximum),
        dbp_mmhg: mean_of(ExtremumKind::Minimum),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{EcgTemplate, SyntheticEcg};

    const RATE: f64 = 500.0;

    fn train(beats_at_s: &[f64], template: EcgTemplate) -> Vec<f64> {
        SyntheticEcg {
            template,
            sample_rate: RATE,
        }
        .render(beats_at_s, 5.0)
    }

    #[test]
    fn healthy_train_fully_delineated() {
        let centers = [0.5, 1.5, 2.5, 3.5, 4.5];
        let x = train(&centers, EcgTemplate::default());
        let k = delineate_ecg(&x, RATE, &DelineationConfig::default());
        assert_eq!(k.beats.len(), 5);
        for (b, c) in k.beats.iter().zip(centers) {
            let expected = (c * RATE) as usize;
            assert!(b.r.index.abs_diff(expected) <= 5, "{} vs {expected}", b.r.index);
            let idx = b.sentinel_indices();
            assert!(idx.iter().all(|&i| i >= 0), "{idx:?}");
            assert!(idx.windows(2).all(|w| w[0] < w[1]), "{idx:?}");
        }
        let m = morphology(&k, RATE, &DelineationConfig::default());
        assert_eq!(
            m,
            MorphologyFlags {
                st_depression: Some(false),
                st_elevation: Some(false),
                inverted_t: Some(false),
            }
        );
    }

    #[test]
    fn constant_window_is_invalid() {
        let k = delineate_ecg(&[0.3; 2500], RATE, &DelineationConfig::default());
        assert!(k.beats.is_empty());
        let bi = beat_intervals(&k, RATE);
        assert_eq!(bi.hr_bpm, None);
        assert_eq!(bi.mean_qrs_ms, None);
        assert_eq!(morphology(&k, RATE, &DelineationConfig::default()), MorphologyFlags::default());
    }

    #[test]
    fn edge_beat_loses_p() {
        // R 60 ms into the window: P search reaches before sample 0
        let x = train(&[0.06, 1.06, 2.06, 3.06, 4.06], EcgTemplate::default());
        let k = delineate_ecg(&x, RATE, &DelineationConfig::default());
        assert_eq!(k.beats.len(), 5);
        let first = k.beats[0];
        assert!(first.p.is_none());
        assert!(first.q.is_some() && first.s.is_some() && first.t.is_some());
        for b in &k.beats[1..] {
            assert!(b.sentinel_indices().iter().all(|&i| i >= 0));
        }
    }

    #[test]
    fn intervals_from_index_arithmetic() {
        let kp = |i| Some(KeyPoint {
            index: i,
            amplitude: 0.0,
        });
        let beat = |r: usize| Beat {
            r: KeyPoint {
                index: r,
                amplitude: 1.0,
            },
            p: None,
            q: kp(r - 10),
            s: kp(r + 50),
            t: kp(r + 190),
        };
        // R every 750 ms at 500 Hz
        let k = EcgKeyPoints {
            beats: vec![beat(110), beat(485), beat(860)],
            normalized: vec![],
        };
        let bi = beat_intervals(&k, RATE);
        assert_eq!(bi.rr_ms, vec![750.0, 750.0]);
        assert_eq!(bi.hr_bpm, Some(80.0));
        // Q at 100, S at 160
        assert_eq!(bi.beats[0].qrs_ms, Some(120.0));
        assert_eq!(bi.beats[0].qt_ms, Some(400.0));

        let single = EcgKeyPoints {
            beats: vec![beat(110)],
            normalized: vec![],
        };
        let bi = beat_intervals(&single, RATE);
        assert!(bi.rr_ms.is_empty());
        assert_eq!(bi.hr_bpm, None);
        assert_eq!(bi.mean_qrs_ms, Some(120.0));
    }

    #[test]
    fn st_depression_detected() {
        let cfg = DelineationConfig::default();
        let base = EcgTemplate::default();
        // lower the ST segment by twice the threshold, in normalized units
        let depth = 2.0 * cfg.theta_st * base.span();
        let x = train(
            &[0.5, 1.5, 2.5, 3.5, 4.5],
            EcgTemplate {
                st_shift: -depth,
                ..base
            },
        );
        let k = delineate_ecg(&x, RATE, &cfg);
        assert_eq!(k.beats.len(), 5);
        let m = morphology(&k, RATE, &cfg);
        assert_eq!(m.st_depression, Some(true));
        assert_eq!(m.st_elevation, Some(false));
    }

    #[test]
    fn inverted_t_detected() {
        // T is the largest maximum after R; with a depressed ST segment the
        // hump between ST and the inverted T sits below baseline
        let cfg = DelineationConfig::default();
        let x = train(
            &[0.5, 1.5, 2.5, 3.5, 4.5],
            EcgTemplate {
                t_amp: -0.3,
                st_shift: -0.15,
                ..EcgTemplate::default()
            },
        );
        let k = delineate_ecg(&x, RATE, &cfg);
        let m = morphology(&k, RATE, &cfg);
        assert_eq!(m.inverted_t, Some(true));
    }

    #[test]
    fn no_p_means_unknown_morphology() {
        let cfg = DelineationConfig::default();
        let k = delineate_ecg(
            &train(&[0.5, 1.5, 2.5, 3.5, 4.5], EcgTemplate::default()),
            RATE,
            &cfg,
        );
        let stripped = EcgKeyPoints {
            beats: k.beats.iter().map(|b| Beat { p: None, ..*b }).collect(),
            normalized: k.normalized.clone(),
        };
        assert_eq!(morphology(&stripped, RATE, &cfg), MorphologyFlags::default());
    }

    #[test]
    fn scaling_leaves_indices_unchanged() {
        let x = train(&[0.4, 1.3, 2.2, 3.1, 4.0], EcgTemplate::default());
        let cfg = DelineationConfig::default();
        let base = delineate_ecg(&x, RATE, &cfg);
        for (a, b) in [(2.0, 0.0), (0.01, -3.0), (1e4, 17.0)] {
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let k = delineate_ecg(&y, RATE, &cfg);
            let idx = |k: &EcgKeyPoints| {
                k.beats.iter().map(Beat::sentinel_indices).collect::<Vec<_>>()
            };
            assert_eq!(idx(&k), idx(&base));
        }
    }

    #[test]
    fn bp_from_sine() {
        let x: Vec<f64> = (0..2500)
            .map(|i| {
                let t = i as f64 / RATE;
                100.0 + 40.0 * (2.0 * std::f64::consts::PI * 1.2 * t).sin()
            })
            .collect();
        let bp = bp_features(&x);
        assert!((bp.sbp_mmhg.unwrap() - 140.0).abs() < 1.0);
        assert!((bp.dbp_mmhg.unwrap() - 60.0).abs() < 1.0);
        assert_eq!(bp_features(&[100.0; 2500]), BpFeatures::default());
    }

    #[test]
    fn bp_from_sawtooth() {
        let peaks = [121.0, 133.5, 118.25, 140.0];
        let mut x = Vec::new();
        for &p in &peaks {
            for i in 0..100 {
                x.push(70.0 + (p - 70.0) * i as f64 / 99.0);
            }
        }
        x.push(70.0);
        let bp = bp_features(&x);
        let expected = peaks.iter().sum::<f64>() / peaks.len() as f64;
        assert!((bp.sbp_mmhg.unwrap() - expected).abs() < 1e-6);
        assert!((bp.dbp_mmhg.unwrap() - 70.0).abs() < 1e-6);
    }
}
