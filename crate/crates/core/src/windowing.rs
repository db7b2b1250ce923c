//! Event-time tumbling windows per (user, signal) stream, and the circular
//! buffer of successive RR-interval differences used by the stress job.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::wire::{DataType, SampleRecord};

pub const DEFAULT_WINDOW_MS: u64 = 5000;
pub const DEFAULT_LATENESS_MS: u64 = 500;
pub const DEFAULT_RR_CAPACITY: usize = 512;
/// RR data needed before the buffer counts as full.
pub const RR_FULL_SPAN_MS: f64 = 60_000.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamKey {
    pub user_id: String,
    pub data_type: DataType,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowKey {
    pub user_id: String,
    pub data_type: DataType,
    pub window_index: u64,
}

/// `floor(timestamp / window_ms)` for the record's stream.
pub fn assign(record: &SampleRecord, window_ms: u64) -> WindowKey {
    WindowKey {
        user_id: record.user_id.clone(),
        data_type: record.data_type,
        window_index: record.timestamp / window_ms,
    }
}

/// A contiguous fixed-duration buffer of samples for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    pub user_id: String,
    pub data_type: DataType,
    pub window_start: u64,
    pub window_length: u64,
    /// Sorted by timestamp, no duplicate timestamps.
    pub samples: Vec<(u64, f64)>,
    pub sample_rate: f64,
    /// Smallest tag offered into this window, see [`Windower::offer_tagged`].
    pub min_tag: Option<u64>,
}

impl SignalWindow {
    pub fn window_index(&self) -> u64 {
        self.window_start / self.window_length
    }

    pub fn window_end(&self) -> u64 {
        self.window_start + self.window_length
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|&(_, v)| v).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WindowConfig {
    pub window_ms: u64,
    pub lateness_ms: u64,
    pub sample_rate: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_ms: DEFAULT_WINDOW_MS,
            lateness_ms: DEFAULT_LATENESS_MS,
            sample_rate: 500.0,
        }
    }
}

impl WindowConfig {
    /// Upper bound on samples in one window at the nominal rate.
    pub fn max_samples(&self) -> usize {
        (self.window_ms as f64 * self.sample_rate / 1000.0).floor() as usize + 1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WindowStats {
    pub late: u64,
    pub duplicate: u64,
    pub overflow: u64,
    pub emitted: u64,
}

#[derive(Debug, Default)]
struct Pending {
    samples: BTreeMap<u64, f64>,
    min_tag: Option<u64>,
}

#[derive(Debug, Default)]
struct StreamState {
    watermark: u64,
    /// Windows with index below this are closed.
    closed_below: u64,
    pending: BTreeMap<u64, Pending>,
}

/// Assembles tumbling windows from a sample stream.
///
/// Every stream's watermark is the largest timestamp it has seen. A window
/// closes once its end is at or below `watermark - lateness`; records that
/// would land in a closed window are counted as late and dropped.
#[derive(Debug)]
pub struct Windower {
    config: WindowConfig,
    streams: HashMap<StreamKey, StreamState>,
    stats: WindowStats,
}

impl Windower {
    pub fn new(config: WindowConfig) -> Self {
        assert!(config.window_ms > 0, "window length must be positive");
        Windower {
            config,
            streams: HashMap::new(),
            stats: WindowStats::default(),
        }
    }

    pub fn config(&self) -> &WindowConfig {
        &self.config
    }

    pub fn stats(&self) -> WindowStats {
        self.stats
    }

    pub fn offer(&mut self, record: &SampleRecord) -> Vec<SignalWindow> {
        self.offer_tagged(record, None)
    }

    /// Like [`Windower::offer`], remembering the smallest `tag` (typically a
    /// source offset) that contributed to each open window.
    pub fn offer_tagged(&mut self, record: &SampleRecord, tag: Option<u64>) -> Vec<SignalWindow> {
        let key = StreamKey {
            user_id: record.user_id.clone(),
            data_type: record.data_type,
        };
        let WindowConfig {
            window_ms,
            lateness_ms,
            ..
        } = self.config;
        let max_samples = self.config.max_samples();
        let stream = self.streams.entry(key.clone()).or_default();

        let index = record.timestamp / window_ms;
        if index < stream.closed_below {
            self.stats.late += 1;
            return Vec::new();
        }
        let pending = stream.pending.entry(index).or_default();
        if pending.samples.contains_key(&record.timestamp) {
            self.stats.duplicate += 1;
        } else if pending.samples.len() >= max_samples {
            self.stats.overflow += 1;
        } else {
            pending.samples.insert(record.timestamp, record.value);
            if let Some(t) = tag {
                pending.min_tag = Some(pending.min_tag.map_or(t, |m| m.min(t)));
            }
        }

        stream.watermark = stream.watermark.max(record.timestamp);
        let horizon = stream.watermark.saturating_sub(lateness_ms);
        // window i closes when (i + 1) * window_ms <= horizon
        let close_below = horizon / window_ms;
        if close_below <= stream.closed_below {
            return Vec::new();
        }
        stream.closed_below = close_below;
        let still_open = stream.pending.split_off(&close_below);
        let closed = std::mem::replace(&mut stream.pending, still_open);
        let out = self.materialize(&key, closed);
        self.stats.emitted += out.len() as u64;
        out
    }

    /// Emits every buffered window, partial ones included.
    pub fn flush(&mut self) -> Vec<SignalWindow> {
        let mut keys: Vec<StreamKey> = self.streams.keys().cloned().collect();
        keys.sort();
        let mut out = Vec::new();
        for key in keys {
            let stream = self.streams.get_mut(&key).expect("key present");
            let pending = std::mem::take(&mut stream.pending);
            if let Some((&last, _)) = pending.last_key_value() {
                stream.closed_below = stream.closed_below.max(last + 1);
            }
            out.extend(self.materialize(&key, pending));
        }
        self.stats.emitted += out.len() as u64;
        out
    }

    /// Marks every window of `key` with index below `index` as already
    /// emitted, e.g. when resuming after a restart.
    pub fn close_through(&mut self, key: &StreamKey, index: u64) {
        let stream = self.streams.entry(key.clone()).or_default();
        if index > stream.closed_below {
            stream.closed_below = index;
            stream.pending = stream.pending.split_off(&index);
            stream.watermark = stream.watermark.max(index * self.config.window_ms);
        }
    }

    /// Watermark of one stream, if it has seen any record.
    pub fn watermark(&self, key: &StreamKey) -> Option<u64> {
        self.streams.get(key).map(|s| s.watermark)
    }

    /// Index below which all windows of `key` are closed.
    pub fn closed_below(&self, key: &StreamKey) -> u64 {
        self.streams.get(key).map_or(0, |s| s.closed_below)
    }

    /// Smallest tag among windows that are still open.
    pub fn oldest_pending_tag(&self) -> Option<u64> {
        self.streams
            .values()
            .flat_map(|s| s.pending.values())
            .filter_map(|p| p.min_tag)
            .min()
    }

    pub fn has_pending(&self) -> bool {
        self.streams.values().any(|s| !s.pending.is_empty())
    }

    fn materialize(&self, key: &StreamKey, closed: BTreeMap<u64, Pending>) -> Vec<SignalWindow> {
        closed
            .into_iter()
            .filter(|(_, p)| !p.samples.is_empty())
            .map(|(index, p)| SignalWindow {
                user_id: key.user_id.clone(),
                data_type: key.data_type,
                window_start: index * self.config.window_ms,
                window_length: self.config.window_ms,
                samples: p.samples.into_iter().collect(),
                sample_rate: self.config.sample_rate,
                min_tag: p.min_tag,
            })
            .collect()
    }
}

/// One RR interval and its difference from the interval before it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RrEntry {
    pub diff_ms: f64,
    pub interval_ms: f64,
}

/// Bounded circular buffer of successive RR differences. It counts as full
/// once the intervals it holds cover a minute.
#[derive(Debug, Clone)]
pub struct RrBuffer {
    capacity: usize,
    entries: VecDeque<RrEntry>,
    span_ms: f64,
    last_interval: Option<f64>,
}

impl Default for RrBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_RR_CAPACITY)
    }
}

impl RrBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        RrBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            span_ms: 0.0,
            last_interval: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_span_ms(&self) -> f64 {
        self.span_ms
    }

    pub fn push(&mut self, entries: impl IntoIterator<Item = RrEntry>) {
        for e in entries {
            if self.entries.len() == self.capacity {
                if let Some(old) = self.entries.pop_front() {
                    self.span_ms -= old.interval_ms;
                }
            }
            self.span_ms += e.interval_ms;
            self.entries.push_back(e);
            self.last_interval = Some(e.interval_ms);
        }
        if self.entries.is_empty() {
            self.span_ms = 0.0;
        }
    }

    /// Pushes the successive differences of `rr`, continuing from the last
    /// interval seen by this buffer.
    pub fn push_intervals(&mut self, rr: &[f64]) {
        let mut prev = self.last_interval;
        let mut entries = Vec::with_capacity(rr.len());
        for &interval in rr {
            if let Some(p) = prev {
                entries.push(RrEntry {
                    diff_ms: interval - p,
                    interval_ms: interval,
                });
            }
            prev = Some(interval);
        }
        self.push(entries);
        if let Some(p) = prev {
            self.last_interval = Some(p);
        }
    }

    /// Drops the continuity with the previous interval, so the next push
    /// starts a fresh difference chain.
    pub fn break_chain(&mut self) {
        self.last_interval = None;
    }

    pub fn is_full(&self) -> bool {
        // tolerate rounding in the running sum
        self.span_ms + 1e-6 >= RR_FULL_SPAN_MS
    }

    /// Differences oldest to newest.
    pub fn snapshot(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.diff_ms).collect()
    }

    /// RR intervals oldest to newest.
    pub fn intervals(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.interval_ms).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(user: &str, ts: u64, v: f64) -> SampleRecord {
        SampleRecord::new(user, DataType::Ecg, v, ts).unwrap()
    }

    fn windower(lateness: u64) -> Windower {
        Windower::new(WindowConfig {
            window_ms: 5000,
            lateness_ms: lateness,
            sample_rate: 500.0,
        })
    }

    #[test]
    fn assign_half_open() {
        assert_eq!(assign(&rec("u", 0, 0.0), 5000).window_index, 0);
        assert_eq!(assign(&rec("u", 4999, 0.0), 5000).window_index, 0);
        assert_eq!(assign(&rec("u", 5000, 0.0), 5000).window_index, 1);
    }

    #[test]
    fn full_window_emitted_once_watermark_passes() {
        let mut w = windower(0);
        for i in 0..2500u64 {
            assert!(w.offer(&rec("u", i * 2, i as f64)).is_empty());
        }
        let out = w.offer(&rec("u", 5000, 0.0));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].samples.len(), 2500);
        assert_eq!(out[0].window_start, 0);
        assert!(out[0].samples.windows(2).all(|p| p[0].0 < p[1].0));
        // boundary sample is in the next window
        let rest = w.flush();
        assert_eq!(rest.len(), 1);
        assert_eq!(rest[0].window_start, 5000);
        assert_eq!(rest[0].samples, vec![(5000, 0.0)]);
    }

    #[test]
    fn default_lateness_delays_emission() {
        let mut w = windower(DEFAULT_LATENESS_MS);
        for i in 0..2500u64 {
            w.offer(&rec("u", i * 2, 1.0));
        }
        assert!(w.offer(&rec("u", 5000, 1.0)).is_empty());
        assert!(w.offer(&rec("u", 5498, 1.0)).is_empty());
        let out = w.offer(&rec("u", 5500, 1.0));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].samples.len(), 2500);
    }

    #[test]
    fn single_record_flushes_as_partial() {
        let mut w = windower(500);
        assert!(w.offer(&rec("u", 1234, 3.0)).is_empty());
        let out = w.flush();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].samples, vec![(1234, 3.0)]);
        assert!(w.flush().is_empty());
    }

    #[test]
    fn late_records_counted_not_emitted() {
        let mut w = windower(500);
        w.offer(&rec("u", 20_000, 1.0));
        assert!(w.offer(&rec("u", 10_000, 1.0)).is_empty());
        assert_eq!(w.stats().late, 1);
        let out = w.flush();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].window_start, 20_000);
        // late after flush as well
        w.offer(&rec("u", 20_001, 1.0));
        assert_eq!(w.stats().late, 2);
    }

    #[test]
    fn duplicates_and_overflow_dropped() {
        let mut w = windower(0);
        w.offer(&rec("u", 10, 1.0));
        w.offer(&rec("u", 10, 2.0));
        assert_eq!(w.stats().duplicate, 1);
        // 1 ms spacing overfills a 500 Hz window
        for t in 0..5000 {
            w.offer(&rec("v", t, 0.0));
        }
        let out = w.offer(&rec("v", 5000, 0.0));
        assert_eq!(out[0].samples.len(), w.config().max_samples());
        assert!(w.stats().overflow > 0);
    }

    #[test]
    fn streams_are_independent() {
        let mut w = windower(0);
        w.offer(&rec("a", 100, 1.0));
        w.offer(&rec("b", 100, 2.0));
        let out = w.offer(&rec("a", 5000, 1.0));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].user_id, "a");
        let bp = SampleRecord::new("a", DataType::Bp, 90.0, 100).unwrap();
        assert!(w.offer(&bp).is_empty());
        assert_eq!(w.stats().late, 0);
    }

    #[test]
    fn pending_tags_track_oldest_open_window() {
        let mut w = windower(0);
        w.offer_tagged(&rec("u", 0, 1.0), Some(0));
        w.offer_tagged(&rec("u", 2, 1.0), Some(1));
        assert_eq!(w.oldest_pending_tag(), Some(0));
        w.offer_tagged(&rec("u", 5000, 1.0), Some(2));
        assert_eq!(w.oldest_pending_tag(), Some(2));
    }

    #[test]
    fn close_through_marks_resumed_windows() {
        let mut w = windower(0);
        let key = StreamKey {
            user_id: "u".into(),
            data_type: DataType::Ecg,
        };
        w.close_through(&key, 2);
        assert!(w.offer(&rec("u", 9_999, 1.0)).is_empty());
        assert_eq!(w.stats().late, 1);
        w.offer(&rec("u", 10_000, 1.0));
        assert_eq!(w.flush().len(), 1);
    }

    #[test]
    fn rr_buffer_span_accounting() {
        let mut b = RrBuffer::new(1024);
        assert!(!b.is_full());
        // 599 intervals of 100 ms = 59.9 s
        b.push((0..599).map(|_| RrEntry {
            diff_ms: 0.0,
            interval_ms: 100.0,
        }));
        assert!(!b.is_full());
        b.push([RrEntry {
            diff_ms: 100.0,
            interval_ms: 200.0,
        }]);
        assert!(b.is_full());
    }

    #[test]
    fn rr_buffer_evicts_oldest() {
        let mut b = RrBuffer::new(3);
        b.push_intervals(&[800.0, 810.0, 790.0, 800.0, 820.0]);
        assert_eq!(b.len(), 3);
        assert_eq!(b.snapshot(), vec![-20.0, 10.0, 20.0]);
        assert_eq!(b.intervals(), vec![790.0, 800.0, 820.0]);
        assert!((b.total_span_ms() - 2410.0).abs() < 1e-9);
        // the chain continues across pushes
        b.push_intervals(&[830.0]);
        assert_eq!(b.snapshot(), vec![10.0, 20.0, 10.0]);
        b.break_chain();
        b.push_intervals(&[900.0]);
        assert_eq!(b.snapshot(), vec![10.0, 20.0, 10.0]);
    }

    proptest! {
        #[test]
        fn assign_is_floor_division(ts in any::<u64>(), len in 1u64..1_000_000) {
            let k = assign(&rec("u", ts, 0.0), len);
            prop_assert_eq!(k.window_index, ts / len);
            prop_assert!(k.window_index * len <= ts);
            prop_assert!(ts - k.window_index * len < len);
        }

        #[test]
        fn jitter_within_allowance_is_invisible(
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ts: Vec<u64> = (0..6000u64).map(|i| i * 2).collect();
            // shuffle inside 200 ms blocks, well under the 500 ms allowance
            let mut jittered = ts.clone();
            for chunk in jittered.chunks_mut(100) {
                chunk.shuffle(&mut rng);
            }
            let run = |order: &[u64]| {
                let mut w = windower(500);
                let mut out = Vec::new();
                for &t in order {
                    out.extend(w.offer(&rec("u", t, t as f64 * 0.5)));
                }
                out.extend(w.flush());
                (out, w.stats())
            };
            let (a, sa) = run(&ts);
            let (b, sb) = run(&jittered);
            prop_assert_eq!(a, b);
            prop_assert_eq!(sa.late, 0);
            prop_assert_eq!(sb.late, 0);
        }

        #[test]
        fn windows_emitted_once(ts in proptest::collection::vec(0u64..60_000, 1..500)) {
            let mut w = windower(500);
            let mut seen = std::collections::HashSet::new();
            let mut all = Vec::new();
            for &t in &ts {
                all.extend(w.offer(&rec("u", t, 1.0)));
            }
            all.extend(w.flush());
            for win in &all {
                prop_assert!(seen.insert(win.window_index()));
                prop_assert!(win.samples.len() <= w.config().max_samples());
                for &(t, _) in &win.samples {
                    prop_assert!(t >= win.window_start && t < win.window_end());
                }
            }
        }

        #[test]
        fn rr_snapshot_preserves_insertion_order(
            rr in proptest::collection::vec(300.0..1500.0f64, 2..100),
            cap in 1usize..50,
        ) {
            let mut b = RrBuffer::new(cap);
            b.push_intervals(&rr);
            let diffs: Vec<f64> = rr.windows(2).map(|w| w[1] - w[0]).collect();
            let keep = diffs.len().min(cap);
            prop_assert_eq!(b.snapshot(), diffs[diffs.len() - keep..].to_vec());
        }
    }
}
