//! Embedded topic-based publish/subscribe log.
//!
//! Each topic is an append-only sequence of payload lines with monotone
//! offsets and a time-based retention period. Consumer groups keep a
//! committed offset per topic; polling never moves it. Logs and cursors can
//! be snapshotted to a directory and recovered from it:
//!
//! ```text
//! <data-dir>/<topic>/meta      retention_ms=<n|inf> and next_offset=<n>
//! <data-dir>/<topic>/records   one payload line per record
//! <data-dir>/<topic>/index     offset<TAB>arrival_ms, aligned with records
//! <data-dir>/<topic>/cursors   group_id<TAB>offset
//! ```

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("topic {topic:?} exists with retention {existing}, requested {requested}")]
    ConflictingRetention {
        topic: String,
        existing: Retention,
        requested: Retention,
    },
    #[error("offset {offset} is ahead of the log head {head} of {topic:?}")]
    OffsetAhead { topic: String, offset: u64, head: u64 },
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("payload must be a single line")]
    InvalidPayload,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl BrokerError {
    /// Short tag used on the socket protocol.
    pub fn code(&self) -> &'static str {
        match self {
            BrokerError::UnknownTopic(_) => "UnknownTopic",
            BrokerError::ConflictingRetention { .. } => "ConflictingRetention",
            BrokerError::OffsetAhead { .. } => "OffsetAhead",
            BrokerError::InvalidName(_) => "InvalidName",
            BrokerError::InvalidPayload => "InvalidPayload",
            BrokerError::Io(_) => "Io",
            BrokerError::Protocol(_) => "Protocol",
        }
    }
}

pub type Result<T> = std::result::Result<T, BrokerError>;

/// How long a topic keeps records, measured from their arrival.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retention {
    Forever,
    Millis(u64),
}

impl std::fmt::Display for Retention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Retention::Forever => f.write_str("inf"),
            Retention::Millis(ms) => write!(f, "{ms}"),
        }
    }
}

impl std::str::FromStr for Retention {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "inf" | "forever" => Ok(Retention::Forever),
            n => n
                .parse()
                .map(Retention::Millis)
                .map_err(|_| format!("bad retention {n:?}")),
        }
    }
}

/// Source of arrival times.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now_ms(&self) -> u64 {
        (**self).now_ms()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub offset: u64,
    pub arrival_ms: u64,
    pub payload: String,
}

/// Result of a poll.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PollBatch {
    pub records: Vec<(u64, String)>,
    /// The committed offset pointed into records removed by retention; the
    /// batch starts at the oldest surviving record instead.
    pub gap: bool,
}

impl PollBatch {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Offset one past the last record in the batch.
    pub fn next_offset(&self) -> Option<u64> {
        self.records.last().map(|(o, _)| o + 1)
    }
}

/// Operations shared by the in-process broker and the socket client.
pub trait BrokerApi: Send + Sync {
    fn create_topic(&self, name: &str, retention: Retention) -> Result<()>;
    fn publish(&self, topic: &str, payload: &str) -> Result<u64>;
    fn poll(&self, topic: &str, group: &str, max_records: usize) -> Result<PollBatch>;
    /// Reads from an explicit position instead of a committed cursor.
    fn fetch(&self, topic: &str, from: u64, max_records: usize) -> Result<PollBatch>;
    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<()>;
    fn prune(&self, topic: &str, now_ms: u64) -> Result<usize>;
    /// One past the newest offset of the topic.
    fn head(&self, topic: &str) -> Result<u64>;
    fn committed(&self, topic: &str, group: &str) -> Result<u64>;
}

pub(crate) fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| !c.is_whitespace() && !c.is_control() && c != '/' && c != '\\');
    if ok {
        Ok(())
    } else {
        Err(BrokerError::InvalidName(name.to_string()))
    }
}

#[derive(Debug)]
struct TopicState {
    retention: Retention,
    records: VecDeque<Record>,
    next_offset: u64,
    cursors: BTreeMap<String, u64>,
    /// Records below this offset are already on disk.
    persisted_upto: u64,
    /// Pruning invalidated the on-disk files; rewrite on next snapshot.
    needs_rewrite: bool,
}

impl TopicState {
    fn new(retention: Retention) -> Self {
        TopicState {
            retention,
            records: VecDeque::new(),
            next_offset: 0,
            cursors: BTreeMap::new(),
            persisted_upto: 0,
            needs_rewrite: true,
        }
    }

    fn position(&self, offset: u64) -> usize {
        self.records.partition_point(|r| r.offset < offset)
    }
}

#[derive(Debug)]
struct Topic {
    state: Mutex<TopicState>,
    appended: Condvar,
}

fn lock(topic: &Topic) -> MutexGuard<'_, TopicState> {
    topic.state.lock().unwrap_or_else(|e| e.into_inner())
}

/// The in-process broker. Share it behind an `Arc`.
pub struct Broker {
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    clock: Box<dyn Clock>,
    data_dir: Option<PathBuf>,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("data_dir", &self.data_dir)
            .finish_non_exhaustive()
    }
}

impl Default for Broker {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Broker {
    /// A broker without persistence.
    pub fn in_memory() -> Self {
        Self::with_clock(SystemClock)
    }

    pub fn with_clock(clock: impl Clock + 'static) -> Self {
        Broker {
            topics: RwLock::new(HashMap::new()),
            clock: Box::new(clock),
            data_dir: None,
        }
    }

    /// Opens (or creates) a persistent broker, recovering any snapshot found
    /// in `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_with_clock(dir, SystemClock)
    }

    pub fn open_with_clock(dir: impl AsRef<Path>, clock: impl Clock + 'static) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut topics = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if validate_name(&name).is_err() || !entry.path().join("meta").exists() {
                continue;
            }
            let state = load_topic(&entry.path())?;
            topics.insert(
                name,
                Arc::new(Topic {
                    state: Mutex::new(state),
                    appended: Condvar::new(),
                }),
            );
        }
        Ok(Broker {
            topics: RwLock::new(topics),
            clock: Box::new(clock),
            data_dir: Some(dir),
        })
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>> {
        self.topics
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(name)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownTopic(name.to_string()))
    }

    pub fn topic_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .topics
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .cloned()
            .collect();
        names.sort();
        names
    }

    pub fn retention(&self, topic: &str) -> Result<Retention> {
        Ok(lock(&*self.topic(topic)?).retention)
    }

    /// Appends with an explicit arrival time.
    pub fn publish_at(&self, topic: &str, payload: &str, arrival_ms: u64) -> Result<u64> {
        if payload.contains(['\n', '\r']) {
            return Err(BrokerError::InvalidPayload);
        }
        let t = self.topic(topic)?;
        let offset = {
            let mut st = lock(&t);
            let offset = st.next_offset;
            st.next_offset += 1;
            st.records.push_back(Record {
                offset,
                arrival_ms,
                payload: payload.to_string(),
            });
            offset
        };
        t.appended.notify_all();
        Ok(offset)
    }

    /// Blocks until the topic holds a record at or beyond `offset`, or the
    /// timeout passes. Returns whether such a record exists.
    pub fn wait_for(&self, topic: &str, offset: u64, timeout: Duration) -> Result<bool> {
        let t = self.topic(topic)?;
        let st = lock(&t);
        let (st, _) = t
            .appended
            .wait_timeout_while(st, timeout, |s| s.next_offset <= offset)
            .unwrap_or_else(|e| e.into_inner());
        Ok(st.next_offset > offset)
    }

    /// Writes every topic to the data directory. A no-op in memory mode.
    pub fn snapshot(&self) -> Result<()> {
        let Some(dir) = &self.data_dir else {
            return Ok(());
        };
        let topics: Vec<(String, Arc<Topic>)> = self
            .topics
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (name, t) in topics {
            let mut st = lock(&t);
            snapshot_topic(&dir.join(&name), &mut st)?;
        }
        Ok(())
    }

    fn snapshot_one(&self, name: &str, st: &mut TopicState) -> Result<()> {
        match &self.data_dir {
            Some(dir) => snapshot_topic(&dir.join(name), st),
            None => Ok(()),
        }
    }
}

fn read_locked(st: &TopicState, from: u64, max_records: usize) -> PollBatch {
    let oldest = st.records.front().map_or(st.next_offset, |r| r.offset);
    let gap = from < oldest;
    let start = st.position(from);
    PollBatch {
        records: st
            .records
            .iter()
            .skip(start)
            .take(max_records)
            .map(|r| (r.offset, r.payload.clone()))
            .collect(),
        gap,
    }
}

impl BrokerApi for Broker {
    fn create_topic(&self, name: &str, retention: Retention) -> Result<()> {
        validate_name(name)?;
        let mut topics = self.topics.write().unwrap_or_else(|e| e.into_inner());
        if let Some(t) = topics.get(name) {
            let existing = lock(t).retention;
            return if existing == retention {
                Ok(())
            } else {
                Err(BrokerError::ConflictingRetention {
                    topic: name.to_string(),
                    existing,
                    requested: retention,
                })
            };
        }
        let mut state = TopicState::new(retention);
        self.snapshot_one(name, &mut state)?;
        topics.insert(
            name.to_string(),
            Arc::new(Topic {
                state: Mutex::new(state),
                appended: Condvar::new(),
            }),
        );
        Ok(())
    }

    fn publish(&self, topic: &str, payload: &str) -> Result<u64> {
        self.publish_at(topic, payload, self.clock.now_ms())
    }

    fn poll(&self, topic: &str, group: &str, max_records: usize) -> Result<PollBatch> {
        validate_name(group)?;
        let t = self.topic(topic)?;
        let st = lock(&t);
        let from = st.cursors.get(group).copied().unwrap_or(0);
        Ok(read_locked(&st, from, max_records))
    }

    fn fetch(&self, topic: &str, from: u64, max_records: usize) -> Result<PollBatch> {
        let t = self.topic(topic)?;
        let st = lock(&t);
        Ok(read_locked(&st, from, max_records))
    }

    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<()> {
        validate_name(group)?;
        let t = self.topic(topic)?;
        let mut st = lock(&t);
        if offset > st.next_offset {
            return Err(BrokerError::OffsetAhead {
                topic: topic.to_string(),
                offset,
                head: st.next_offset,
            });
        }
        let current = st.cursors.entry(group.to_string()).or_insert(0);
        *current = (*current).max(offset);
        self.snapshot_one(topic, &mut st)
    }

    fn prune(&self, topic: &str, now_ms: u64) -> Result<usize> {
        let t = self.topic(topic)?;
        let mut st = lock(&t);
        let Retention::Millis(keep) = st.retention else {
            return Ok(0);
        };
        let cutoff = now_ms.saturating_sub(keep);
        let before = st.records.len();
        st.records.retain(|r| r.arrival_ms >= cutoff);
        let removed = before - st.records.len();
        if removed > 0 {
            st.needs_rewrite = true;
        }
        Ok(removed)
    }

    fn head(&self, topic: &str) -> Result<u64> {
        Ok(lock(&*self.topic(topic)?).next_offset)
    }

    fn committed(&self, topic: &str, group: &str) -> Result<u64> {
        let t = self.topic(topic)?;
        let st = lock(&t);
        Ok(st.cursors.get(group).copied().unwrap_or(0))
    }
}

impl<B: BrokerApi + ?Sized> BrokerApi for Arc<B> {
    fn create_topic(&self, name: &str, retention: Retention) -> Result<()> {
        (**self).create_topic(name, retention)
    }
    fn publish(&self, topic: &str, payload: &str) -> Result<u64> {
        (**self).publish(topic, payload)
    }
    fn poll(&self, topic: &str, group: &str, max_records: usize) -> Result<PollBatch> {
        (**self).poll(topic, group, max_records)
    }
    fn fetch(&self, topic: &str, from: u64, max_records: usize) -> Result<PollBatch> {
        (**self).fetch(topic, from, max_records)
    }
    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<()> {
        (**self).commit(topic, group, offset)
    }
    fn prune(&self, topic: &str, now_ms: u64) -> Result<usize> {
        (**self).prune(topic, now_ms)
    }
    fn head(&self, topic: &str) -> Result<u64> {
        (**self).head(topic)
    }
    fn committed(&self, topic: &str, group: &str) -> Result<u64> {
        (**self).committed(topic, group)
    }
}

fn write_atomic(path: &Path, contents: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        contents(&mut w)?;
        w.flush()?;
    }
    fs::rename(tmp, path)
}

fn snapshot_topic(dir: &Path, st: &mut TopicState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let records_path = dir.join("records");
    let index_path = dir.join("index");
    if st.needs_rewrite {
        write_atomic(&records_path, |w| {
            st.records
                .iter()
                .try_for_each(|r| writeln!(w, "{}", r.payload))
        })?;
        write_atomic(&index_path, |w| {
            st.records
                .iter()
                .try_for_each(|r| writeln!(w, "{}\t{}", r.offset, r.arrival_ms))
        })?;
        st.needs_rewrite = false;
    } else {
        let start = st.position(st.persisted_upto);
        if start < st.records.len() {
            let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p);
            let mut rec = BufWriter::new(open(&records_path)?);
            let mut idx = BufWriter::new(open(&index_path)?);
            for r in st.records.iter().skip(start) {
                writeln!(rec, "{}", r.payload)?;
                writeln!(idx, "{}\t{}", r.offset, r.arrival_ms)?;
            }
            rec.flush()?;
            idx.flush()?;
        }
    }
    st.persisted_upto = st.next_offset;
    let cursors = &st.cursors;
    write_atomic(&dir.join("cursors"), |w| {
        cursors
            .iter()
            .try_for_each(|(g, o)| writeln!(w, "{g}\t{o}"))
    })?;
    let (retention, next) = (st.retention, st.next_offset);
    write_atomic(&dir.join("meta"), |w| {
        writeln!(w, "retention_ms={retention}")?;
        writeln!(w, "next_offset={next}")
    })?;
    Ok(())
}

fn corrupt(path: &Path, line: &str) -> BrokerError {
    BrokerError::Io(io::Error::new(
        io::ErrorKind::InvalidData,
        format!("{}: bad line {line:?}", path.display()),
    ))
}

fn read_lines(path: &Path) -> io::Result<Vec<String>> {
    match File::open(path) {
        Ok(f) => BufReader::new(f).lines().collect(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

fn load_topic(dir: &Path) -> Result<TopicState> {
    let meta_path = dir.join("meta");
    let mut retention = Retention::Forever;
    let mut next_offset = 0;
    for line in read_lines(&meta_path)? {
        match line.split_once('=') {
            Some(("retention_ms", v)) => {
                retention = v.parse().map_err(|_| corrupt(&meta_path, &line))?
            }
            Some(("next_offset", v)) => {
                next_offset = v.parse().map_err(|_| corrupt(&meta_path, &line))?
            }
            _ => return Err(corrupt(&meta_path, &line)),
        }
    }

    let index_path = dir.join("index");
    let payloads = read_lines(&dir.join("records"))?;
    let index = read_lines(&index_path)?;
    let mut records = VecDeque::with_capacity(index.len());
    // a crash between the two appends leaves one file longer; keep the
    // common prefix
    for (line, payload) in index.iter().zip(payloads) {
        let (o, a) = line
            .split_once('\t')
            .ok_or_else(|| corrupt(&index_path, line))?;
        let offset: u64 = o.parse().map_err(|_| corrupt(&index_path, line))?;
        let arrival_ms = a.parse().map_err(|_| corrupt(&index_path, line))?;
        if records.back().is_some_and(|r: &Record| r.offset >= offset) {
            return Err(corrupt(&index_path, line));
        }
        records.push_back(Record {
            offset,
            arrival_ms,
            payload,
        });
    }
    if let Some(last) = records.back() {
        next_offset = next_offset.max(last.offset + 1);
    }

    let cursor_path = dir.join("cursors");
    let mut cursors = BTreeMap::new();
    for line in read_lines(&cursor_path)? {
        let (g, o) = line
            .split_once('\t')
            .ok_or_else(|| corrupt(&cursor_path, &line))?;
        let o: u64 = o.parse().map_err(|_| corrupt(&cursor_path, &line))?;
        cursors.insert(g.to_string(), o.min(next_offset));
    }

    Ok(TopicState {
        retention,
        records,
        next_offset,
        cursors,
        persisted_upto: next_offset,
        // files may hold a torn tail; rewrite them on the next snapshot
        needs_rewrite: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn broker() -> (Broker, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(1_000_000));
        (Broker::with_clock(clock.clone()), clock)
    }

    #[test]
    fn create_is_idempotent() {
        let (b, _) = broker();
        b.create_topic("ecg", Retention::Millis(60_000)).unwrap();
        b.create_topic("ecg", Retention::Millis(60_000)).unwrap();
        assert_eq!(b.topic_names(), vec!["ecg"]);
        assert!(matches!(
            b.create_topic("ecg", Retention::Millis(10_000)),
            Err(BrokerError::ConflictingRetention { .. })
        ));
    }

    #[test]
    fn names_are_validated() {
        let (b, _) = broker();
        for bad in ["", "a b", "a/b", "..", "x\ty"] {
            assert!(matches!(
                b.create_topic(bad, Retention::Forever),
                Err(BrokerError::InvalidName(_))
            ));
        }
    }

    #[test]
    fn publish_assigns_offsets() {
        let (b, _) = broker();
        b.create_topic("t", Retention::Forever).unwrap();
        assert_eq!(b.publish("t", "a").unwrap(), 0);
        assert_eq!(b.publish("t", "b").unwrap(), 1);
        assert!(matches!(
            b.publish("missing", "a"),
            Err(BrokerError::UnknownTopic(_))
        ));
        assert!(matches!(
            b.publish("t", "two\nlines"),
            Err(BrokerError::InvalidPayload)
        ));
    }

    #[test]
    fn poll_does_not_advance() {
        let (b, _) = broker();
        b.create_topic("t", Retention::Forever).unwrap();
        assert!(b.poll("t", "g", 10).unwrap().is_empty());
        for i in 0..5 {
            b.publish("t", &i.to_string()).unwrap();
        }
        let offsets = |p: PollBatch| p.records.into_iter().map(|r| r.0).collect::<Vec<_>>();
        assert_eq!(offsets(b.poll("t", "g", 3).unwrap()), vec![0, 1, 2]);
        assert_eq!(offsets(b.poll("t", "g", 3).unwrap()), vec![0, 1, 2]);
        b.commit("t", "g", 2).unwrap();
        assert_eq!(offsets(b.poll("t", "g", 10).unwrap()), vec![2, 3, 4]);
        // commits never move backwards
        b.commit("t", "g", 1).unwrap();
        assert_eq!(b.committed("t", "g").unwrap(), 2);
        b.commit("t", "g", 5).unwrap();
        assert!(b.poll("t", "g", 10).unwrap().is_empty());
        assert!(matches!(
            b.commit("t", "g", 6),
            Err(BrokerError::OffsetAhead { .. })
        ));
    }

    #[test]
    fn prune_respects_retention() {
        let (b, clock) = broker();
        b.create_topic("keep", Retention::Forever).unwrap();
        b.publish("keep", "x").unwrap();
        assert_eq!(b.prune("keep", u64::MAX).unwrap(), 0);

        b.create_topic("t", Retention::Millis(1000)).unwrap();
        for i in 0..10 {
            b.publish("t", &format!("old{i}")).unwrap();
        }
        clock.advance(5000);
        for i in 0..5 {
            b.publish("t", &format!("new{i}")).unwrap();
        }
        assert_eq!(b.prune("t", clock.now_ms()).unwrap(), 10);
        let p = b.poll("t", "g", 100).unwrap();
        assert!(p.gap);
        assert_eq!(
            p.records.iter().map(|r| r.0).collect::<Vec<_>>(),
            vec![10, 11, 12, 13, 14]
        );
        assert_eq!(b.head("t").unwrap(), 15);
        b.commit("t", "g", 10).unwrap();
        assert!(!b.poll("t", "g", 100).unwrap().gap);
    }

    #[test]
    fn wait_for_wakes_on_publish() {
        let (b, _) = broker();
        let b = Arc::new(b);
        b.create_topic("t", Retention::Forever).unwrap();
        assert!(!b.wait_for("t", 0, Duration::from_millis(10)).unwrap());
        let b2 = b.clone();
        let h = std::thread::spawn(move || b2.wait_for("t", 0, Duration::from_secs(5)).unwrap());
        std::thread::sleep(Duration::from_millis(20));
        b.publish("t", "x").unwrap();
        assert!(h.join().unwrap());
    }

    #[test]
    fn snapshot_and_recover() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(0));
        {
            let b = Broker::open_with_clock(dir.path(), clock.clone()).unwrap();
            b.create_topic("t", Retention::Millis(100)).unwrap();
            for i in 0..6 {
                b.publish("t", &format!("r{i}")).unwrap();
            }
            b.commit("t", "g", 3).unwrap();
            clock.set(500);
            b.publish("t", "late").unwrap();
            assert_eq!(b.prune("t", 500).unwrap(), 6);
            b.snapshot().unwrap();
            b.publish("t", "lost").unwrap();
        }
        let b = Broker::open_with_clock(dir.path(), clock).unwrap();
        assert_eq!(b.retention("t").unwrap(), Retention::Millis(100));
        assert_eq!(b.committed("t", "g").unwrap(), 3);
        assert_eq!(b.head("t").unwrap(), 7);
        let p = b.poll("t", "g", 10).unwrap();
        assert!(p.gap);
        assert_eq!(p.records, vec![(6, "late".to_string())]);
    }
}
