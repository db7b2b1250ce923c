//! The two analytics jobs and the loop that drives them off the broker.
//!
//! A [`JobRunner`] owns a read position per input topic, feeds decoded
//! samples into a [`WindowJob`], writes every output record to the result
//! store and the output topic, and commits offsets only below the oldest
//! sample still held in an unfinished window. After a crash the uncommitted
//! tail is re-read and windows already present in the store are skipped.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::broker::{BrokerApi, BrokerError};
use crate::config::Config;
use crate::delineate::BpFeatures;
use crate::dsp::DspError;
use crate::risk::{NaiveBayesModel, RiskError};
use crate::runtime::analysis::{risk_output, stress_output, BpAnalyzer, EcgAnalyzer};
use crate::runtime::store::ResultStore;
use crate::stress::StressState;
use crate::windowing::{SignalWindow, StreamKey, WindowStats, Windower};
use crate::wire::{decode_sample_with, DataType, OutputRecord, ResultKind, SampleRecord, TimestampUnit};

#[derive(Debug, Error)]
pub enum JobError {
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("result store: {0}")]
    Store(#[from] io::Error),
    #[error(transparent)]
    Filter(#[from] DspError),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

/// Windowed analytics fed one sample at a time.
pub trait WindowJob {
    fn kind(&self) -> ResultKind;

    /// Input topics with the signal each is expected to carry.
    fn inputs(&self) -> Vec<(String, DataType)>;

    /// Accepts one sample read from input `input` at `offset`.
    fn offer(&mut self, input: usize, record: &SampleRecord, offset: u64) -> Result<Vec<OutputRecord>, JobError>;

    /// Emits everything still buffered; used at end of stream.
    fn flush(&mut self) -> Result<Vec<OutputRecord>, JobError>;

    /// Smallest offset of input `input` still needed by an unfinished window.
    fn oldest_pending(&self, input: usize) -> Option<u64>;

    /// Skips windows up to and including the last stored record per user.
    fn resume(&mut self, last: &[OutputRecord]);

    fn window_stats(&self) -> WindowStats;
}

fn window_index(r: &OutputRecord, window_ms: u64) -> u64 {
    r.window_start() / window_ms
}

/// Heart-failure risk per ECG window, paired with the same-index BP window.
///
/// An ECG window is scored once its BP partner is closed, or once the BP
/// stream has closed past it (no partner exists), or once the ECG stream is
/// `bp_wait_windows` windows further on. A BP window likewise waits at most
/// `bp_wait_windows` windows for its ECG partner. Missing BP leaves the BP
/// features invalid; it never blocks scoring.
pub struct RiskJob {
    ecg_topic: String,
    bp_topic: String,
    ecg: EcgAnalyzer,
    bp: BpAnalyzer,
    model: NaiveBayesModel,
    wait_windows: u64,
    ecg_windows: Windower,
    bp_windows: Windower,
    /// ECG windows waiting for their BP partner, by user then index.
    held: BTreeMap<String, BTreeMap<u64, SignalWindow>>,
    /// Analyzed BP windows and the smallest offset they were built from.
    bp_ready: HashMap<String, BTreeMap<u64, (BpFeatures, Option<u64>)>>,
}

impl RiskJob {
    pub fn new(config: &Config, model: NaiveBayesModel) -> Result<Self, JobError> {
        model.validate()?;
        Ok(RiskJob {
            ecg_topic: config.topics.ecg.clone(),
            bp_topic: config.topics.bp.clone(),
            ecg: EcgAnalyzer::new(config)?,
            bp: BpAnalyzer::new(config)?,
            model,
            wait_windows: config.bp_wait_windows,
            ecg_windows: Windower::new(config.ecg_windows()),
            bp_windows: Windower::new(config.bp_windows()),
            held: BTreeMap::new(),
            bp_ready: HashMap::new(),
        })
    }

    pub fn from_config(config: &Config) -> Result<Self, JobError> {
        let model = match &config.risk_model_path {
            Some(p) => NaiveBayesModel::load(p)?,
            None => NaiveBayesModel::default(),
        };
        Self::new(config, model)
    }

    fn key(user: &str, data_type: DataType) -> StreamKey {
        StreamKey {
            user_id: user.to_string(),
            data_type,
        }
    }

    fn accept_ecg(&mut self, windows: Vec<SignalWindow>) {
        for w in windows {
            self.held
                .entry(w.user_id.clone())
                .or_default()
                .insert(w.window_index(), w);
        }
    }

    fn accept_bp(&mut self, windows: Vec<SignalWindow>) {
        for w in windows {
            let features = self.bp.analyze(&w);
            self.bp_ready
                .entry(w.user_id.clone())
                .or_default()
                .insert(w.window_index(), (features, w.min_tag));
        }
    }

    /// Scores held windows of `user` in index order while their BP partner
    /// is known or known to be missing. `force` treats every missing
    /// partner as absent.
    fn resolve(&mut self, user: &str, force: bool) -> Result<Vec<OutputRecord>, JobError> {
        let mut out = Vec::new();
        let ecg_closed = self.ecg_windows.closed_below(&Self::key(user, DataType::Ecg));
        let bp_closed = self.bp_windows.closed_below(&Self::key(user, DataType::Bp));
        let Some(held) = self.held.get_mut(user) else {
            return Ok(out);
        };
        let ready = self.bp_ready.entry(user.to_string()).or_default();
        while let Some(entry) = held.first_entry() {
            let k = *entry.key();
            let bp = match ready.remove(&k) {
                Some((f, _)) => f,
                None if force || bp_closed > k || ecg_closed > k + self.wait_windows => {
                    BpFeatures::default()
                }
                None => break,
            };
            let w = entry.remove();
            let analysis = self.ecg.analyze(&w);
            out.push(risk_output(&w, &analysis, bp, &self.model)?);
        }
        // drop BP windows whose ECG partner can no longer appear, or is
        // further behind than the wait allowance
        let next_held = held.keys().next().copied();
        let wait = self.wait_windows;
        ready.retain(|&k, _| {
            (k >= ecg_closed || next_held.is_some_and(|h| h <= k)) && k + wait >= bp_closed
        });
        if held.is_empty() {
            self.held.remove(user);
        }
        Ok(out)
    }
}

impl WindowJob for RiskJob {
    fn kind(&self) -> ResultKind {
        ResultKind::ChfRisk
    }

    fn inputs(&self) -> Vec<(String, DataType)> {
        vec![
            (self.ecg_topic.clone(), DataType::Ecg),
            (self.bp_topic.clone(), DataType::Bp),
        ]
    }

    fn offer(&mut self, input: usize, record: &SampleRecord, offset: u64) -> Result<Vec<OutputRecord>, JobError> {
        if input == 0 {
            let w = self.ecg_windows.offer_tagged(record, Some(offset));
            self.accept_ecg(w);
        } else {
            let w = self.bp_windows.offer_tagged(record, Some(offset));
            self.accept_bp(w);
        }
        self.resolve(&record.user_id, false)
    }

    fn flush(&mut self) -> Result<Vec<OutputRecord>, JobError> {
        let ecg = self.ecg_windows.flush();
        self.accept_ecg(ecg);
        let bp = self.bp_windows.flush();
        self.accept_bp(bp);
        let users: Vec<String> = self.held.keys().cloned().collect();
        let mut out = Vec::new();
        for u in users {
            out.extend(self.resolve(&u, true)?);
        }
        Ok(out)
    }

    fn oldest_pending(&self, input: usize) -> Option<u64> {
        if input == 0 {
            let held = self
                .held
                .values()
                .flat_map(|m| m.values())
                .filter_map(|w| w.min_tag)
                .min();
            match (self.ecg_windows.oldest_pending_tag(), held) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            }
        } else {
            let ready = self
                .bp_ready
                .values()
                .flat_map(|m| m.values())
                .filter_map(|(_, tag)| *tag)
                .min();
            match (self.bp_windows.oldest_pending_tag(), ready) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            }
        }
    }

    fn resume(&mut self, last: &[OutputRecord]) {
        let window_ms = self.ecg_windows.config().window_ms;
        for r in last {
            let next = window_index(r, window_ms) + 1;
            self.ecg_windows
                .close_through(&Self::key(r.user_id(), DataType::Ecg), next);
            self.bp_windows
                .close_through(&Self::key(r.user_id(), DataType::Bp), next);
        }
    }

    fn window_stats(&self) -> WindowStats {
        let (a, b) = (self.ecg_windows.stats(), self.bp_windows.stats());
        WindowStats {
            late: a.late + b.late,
            duplicate: a.duplicate + b.duplicate,
            overflow: a.overflow + b.overflow,
            emitted: a.emitted + b.emitted,
        }
    }
}

#[derive(Debug)]
struct UserStress {
    state: StressState,
    /// Time of the last R peak and the window it was seen in.
    last_r: Option<(f64, u64)>,
}

/// Stress index per ECG window from heart-rate variability.
pub struct StressJob {
    ecg_topic: String,
    config: Config,
    ecg: EcgAnalyzer,
    windows: Windower,
    users: HashMap<String, UserStress>,
}

impl StressJob {
    pub fn new(config: &Config) -> Result<Self, JobError> {
        Ok(StressJob {
            ecg_topic: config.topics.ecg.clone(),
            config: config.clone(),
            ecg: EcgAnalyzer::new(config)?,
            windows: Windower::new(config.ecg_windows()),
            users: HashMap::new(),
        })
    }

    fn user(&mut self, user: &str) -> &mut UserStress {
        let (cfg, cap) = (self.config.stress, self.config.rr_capacity);
        self.users
            .entry(user.to_string())
            .or_insert_with(|| UserStress {
                state: StressState::new(cfg, cap),
                last_r: None,
            })
    }

    fn process(&mut self, w: SignalWindow) -> OutputRecord {
        let analysis = self.ecg.analyze(&w);
        let r_times = EcgAnalyzer::r_times(&analysis, &w);
        let k = w.window_index();
        let max_rr = self.config.max_rr_ms;
        let u = self.user(&w.user_id);

        let mut rr: Vec<f64> = r_times.windows(2).map(|p| p[1] - p[0]).collect();
        let adjacent = u.last_r.filter(|&(_, idx)| idx + 1 == k);
        if adjacent.is_none() {
            u.state.rr_buffer.break_chain();
        }
        if let (Some((prev, _)), Some(&first)) = (adjacent, r_times.first()) {
            let across = first - prev;
            if plausible_boundary_rr(across, &rr, max_rr) {
                rr.insert(0, across);
            }
        }
        if let Some(&last) = r_times.last() {
            u.last_r = Some((last, k));
        } else if adjacent.is_none() {
            u.last_r = None;
        }
        let result = u.state.update(&rr);
        stress_output(&w, &result, r_times.len(), r_times.last().copied())
    }
}

/// An RR interval spanning a window boundary is kept unless it is outside
/// the physiological range or far from the window's own intervals, which
/// usually means a beat at the edge was missed.
fn plausible_boundary_rr(rr: f64, in_window: &[f64], max_rr: f64) -> bool {
    if !(250.0..=max_rr).contains(&rr) {
        return false;
    }
    if in_window.is_empty() {
        return true;
    }
    let mean = in_window.iter().sum::<f64>() / in_window.len() as f64;
    (rr - mean).abs() <= 0.3 * mean
}

impl WindowJob for StressJob {
    fn kind(&self) -> ResultKind {
        ResultKind::Stress
    }

    fn inputs(&self) -> Vec<(String, DataType)> {
        vec![(self.ecg_topic.clone(), DataType::Ecg)]
    }

    fn offer(&mut self, _input: usize, record: &SampleRecord, offset: u64) -> Result<Vec<OutputRecord>, JobError> {
        let closed = self.windows.offer_tagged(record, Some(offset));
        Ok(closed.into_iter().map(|w| self.process(w)).collect())
    }

    fn flush(&mut self) -> Result<Vec<OutputRecord>, JobError> {
        let closed = self.windows.flush();
        Ok(closed.into_iter().map(|w| self.process(w)).collect())
    }

    fn oldest_pending(&self, _input: usize) -> Option<u64> {
        self.windows.oldest_pending_tag()
    }

    /// Restores the index, HRV baseline and last R peak from the last stored
    /// result. The RR buffer starts empty.
    fn resume(&mut self, last: &[OutputRecord]) {
        let window_ms = self.windows.config().window_ms;
        for r in last {
            let k = window_index(r, window_ms);
            self.windows.close_through(
                &StreamKey {
                    user_id: r.user_id().to_string(),
                    data_type: DataType::Ecg,
                },
                k + 1,
            );
            if let OutputRecord::Result(res) = r {
                let hrv = res.aux.get("HRV").copied().filter(|&v| v >= 0.0);
                let last_r = res.aux.get("LAST_R_MS").copied().filter(|&v| v >= 0.0);
                let u = self.user(&res.user_id);
                u.state.stress_index = res.value;
                u.state.baseline_hrv = hrv;
                u.last_r = last_r.map(|t| (t, k));
            }
        }
    }

    fn window_stats(&self) -> WindowStats {
        self.windows.stats()
    }
}

/// Counters reported on the `stats` line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JobStats {
    pub records: u64,
    pub malformed: u64,
    /// Samples whose signal type does not match their topic.
    pub misrouted: u64,
    pub gaps: u64,
    pub results: u64,
    pub diagnostics: u64,
    pub windows: WindowStats,
}

impl fmt::Display for JobStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "records={} malformed={} misrouted={} late={} duplicate={} overflow={} gaps={} windows={} results={} diagnostics={}",
            self.records,
            self.malformed,
            self.misrouted,
            self.windows.late,
            self.windows.duplicate,
            self.windows.overflow,
            self.gaps,
            self.windows.emitted,
            self.results,
            self.diagnostics
        )
    }
}

/// Drives a [`WindowJob`] from a broker.
pub struct JobRunner<B: BrokerApi, J: WindowJob> {
    broker: B,
    job: J,
    group: String,
    inputs: Vec<(String, DataType)>,
    output_topic: String,
    positions: Vec<u64>,
    store: ResultStore,
    unit: TimestampUnit,
    poll_max: usize,
    stats: JobStats,
}

pub fn default_group(kind: ResultKind) -> String {
    format!("{}-job", crate::runtime::store::job_dir_name(kind))
}

pub fn output_topic(config: &Config, kind: ResultKind) -> String {
    match kind {
        ResultKind::ChfRisk => config.topics.risk.clone(),
        ResultKind::Stress => config.topics.stress.clone(),
    }
}

impl<B: BrokerApi, J: WindowJob> JobRunner<B, J> {
    /// Creates missing topics, reads committed positions and skips windows
    /// already in the result store.
    pub fn new(broker: B, mut job: J, config: &Config, run_id: &str) -> Result<Self, JobError> {
        let kind = job.kind();
        let inputs = job.inputs();
        let output = output_topic(config, kind);
        let group = config.group.clone().unwrap_or_else(|| default_group(kind));
        for (t, _) in &inputs {
            broker.create_topic(t, config.topics.retention)?;
        }
        broker.create_topic(&output, config.topics.retention)?;
        let positions = inputs
            .iter()
            .map(|(t, _)| broker.committed(t, &group))
            .collect::<Result<Vec<_>, _>>()?;
        let store = ResultStore::open(&config.store_dir, kind, run_id)?;
        job.resume(&store.last_records()?);
        Ok(JobRunner {
            broker,
            job,
            group,
            inputs,
            output_topic: output,
            positions,
            store,
            unit: config.timestamp_unit,
            poll_max: config.poll_max,
            stats: JobStats::default(),
        })
    }

    pub fn stats(&self) -> JobStats {
        JobStats {
            windows: self.job.window_stats(),
            ..self.stats
        }
    }

    pub fn job(&self) -> &J {
        &self.job
    }

    fn emit(&mut self, outputs: Vec<OutputRecord>) -> Result<(), JobError> {
        for o in outputs {
            self.store.append(&o)?;
            self.broker.publish(&self.output_topic, &o.encode())?;
            match o {
                OutputRecord::Result(_) => self.stats.results += 1,
                OutputRecord::Diagnostic(_) => self.stats.diagnostics += 1,
            }
        }
        Ok(())
    }

    /// Polls each input once. Returns the number of records read.
    pub fn step(&mut self) -> Result<usize, JobError> {
        let mut read = 0;
        for i in 0..self.inputs.len() {
            let (topic, expected) = self.inputs[i].clone();
            let batch = self.broker.fetch(&topic, self.positions[i], self.poll_max)?;
            if batch.gap {
                self.stats.gaps += 1;
                log::warn!("{topic}: records before offset {} were pruned", self.positions[i]);
            }
            if let Some(next) = batch.next_offset() {
                self.positions[i] = next;
            }
            read += batch.records.len();
            for (offset, line) in batch.records {
                self.stats.records += 1;
                let record = match decode_sample_with(&line, self.unit) {
                    Ok(r) => r,
                    Err(e) => {
                        self.stats.malformed += 1;
                        log::debug!("{topic}@{offset}: {e}");
                        continue;
                    }
                };
                if record.data_type != expected {
                    self.stats.misrouted += 1;
                    continue;
                }
                let out = self.job.offer(i, &record, offset)?;
                self.emit(out)?;
            }
        }
        if read > 0 {
            self.commit()?;
        }
        Ok(read)
    }

    /// Makes results durable, then commits below anything still buffered.
    pub fn commit(&mut self) -> Result<(), JobError> {
        self.store.flush()?;
        for (i, (topic, _)) in self.inputs.iter().enumerate() {
            let pos = self.positions[i];
            let safe = self.job.oldest_pending(i).map_or(pos, |p| p.min(pos));
            self.broker.commit(topic, &self.group, safe)?;
        }
        Ok(())
    }

    /// End of stream: emits partial windows and commits everything read.
    pub fn finish(&mut self) -> Result<(), JobError> {
        let out = self.job.flush()?;
        self.emit(out)?;
        self.commit()
    }

    /// Reads until the inputs are exhausted, then flushes.
    pub fn drain(&mut self) -> Result<JobStats, JobError> {
        while self.step()? > 0 {}
        self.finish()?;
        Ok(self.stats())
    }

    /// Runs until `stop` is set. Partial windows stay uncommitted so a
    /// restart completes them. With `exit_when_idle` the job drains and
    /// returns once no input arrives for `idle` time.
    pub fn run(
        &mut self,
        stop: &AtomicBool,
        stats_every: Duration,
        exit_when_idle: Option<Duration>,
    ) -> Result<JobStats, JobError> {
        let kind = self.job.kind();
        let mut last_report = Instant::now();
        let mut last_input = Instant::now();
        while !stop.load(Ordering::Relaxed) {
            if self.step()? > 0 {
                last_input = Instant::now();
            } else if exit_when_idle.is_some_and(|idle| last_input.elapsed() >= idle) {
                self.finish()?;
                break;
            } else {
                std::thread::sleep(Duration::from_millis(20));
            }
            if last_report.elapsed() >= stats_every {
                eprintln!("stats job={} {}", store_name(kind), self.stats());
                last_report = Instant::now();
            }
        }
        self.commit()?;
        let stats = self.stats();
        eprintln!("stats job={} {}", store_name(kind), stats);
        Ok(stats)
    }
}

fn store_name(kind: ResultKind) -> &'static str {
    crate::runtime::store::job_dir_name(kind)
}
