//! Broker properties, run against any backend.
//!
//! Each check returns `Err(description)` instead of panicking so the
//! acceptance runner can report it.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;

use vitalcep::broker::{Broker, BrokerApi, BrokerError, ManualClock, Retention};
use vitalcep::runtime::{serve, RemoteBroker, ServerHandle};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<T>(r: Result<T, BrokerError>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// A broker under test with a controllable clock.
pub trait Backend {
    fn name(&self) -> &'static str;
    /// A fresh client handle; socket backends open a new connection.
    fn client(&self) -> Box<dyn BrokerApi>;
    fn clock(&self) -> &ManualClock;
    /// Snapshots, tears the broker down and recovers it from disk.
    fn restart(&mut self);
}

pub struct Local {
    broker: Option<Arc<Broker>>,
    clock: Arc<ManualClock>,
    dir: PathBuf,
    _tmp: tempfile::TempDir,
}

impl Local {
    pub fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("broker");
        let clock = Arc::new(ManualClock::new(0));
        let broker = Arc::new(Broker::open_with_clock(&dir, clock.clone()).unwrap());
        Local {
            broker: Some(broker),
            clock,
            dir,
            _tmp: tmp,
        }
    }

    fn broker(&self) -> Arc<Broker> {
        self.broker.clone().expect("broker running")
    }
}

impl Backend for Local {
    fn name(&self) -> &'static str {
        "in-process"
    }

    fn client(&self) -> Box<dyn BrokerApi> {
        Box::new(self.broker())
    }

    fn clock(&self) -> &ManualClock {
        &self.clock
    }

    fn restart(&mut self) {
        let old = self.broker.take().expect("broker running");
        old.snapshot().unwrap();
        drop(old);
        self.broker = Some(Arc::new(
            Broker::open_with_clock(&self.dir, self.clock.clone()).unwrap(),
        ));
    }
}

pub struct Socket {
    local: Local,
    server: Option<ServerHandle>,
}

impl Socket {
    pub fn new() -> Self {
        let local = Local::new();
        let server = serve(local.broker(), "127.0.0.1:0").unwrap();
        Socket {
            local,
            server: Some(server),
        }
    }
}

impl Backend for Socket {
    fn name(&self) -> &'static str {
        "socket"
    }

    fn client(&self) -> Box<dyn BrokerApi> {
        let addr = self.server.as_ref().expect("server running").local_addr();
        Box::new(RemoteBroker::connect(addr.to_string()).unwrap())
    }

    fn clock(&self) -> &ManualClock {
        self.local.clock()
    }

    fn restart(&mut self) {
        self.server.take().expect("server running").shutdown();
        self.local.restart();
        self.server = Some(serve(self.local.broker(), "127.0.0.1:0").unwrap());
    }
}

pub fn create_is_idempotent(b: &mut dyn Backend) -> Check {
    let c = b.client();
    e(c.create_topic("ecg", Retention::Millis(60_000)))?;
    e(c.create_topic("ecg", Retention::Millis(60_000)))?;
    match c.create_topic("ecg", Retention::Millis(10_000)) {
        Err(BrokerError::ConflictingRetention { .. }) => {}
        other => return Err(format!("expected ConflictingRetention, got {other:?}")),
    }
    for i in 0..100 {
        e(c.create_topic(&format!("t{i}"), Retention::Forever))?;
        e(c.publish(&format!("t{i}"), &format!("only {i}")))?;
    }
    for i in 0..100 {
        let batch = e(c.poll(&format!("t{i}"), "g", 10))?;
        ensure!(
            batch.records == vec![(0, format!("only {i}"))],
            "topic t{i} holds {:?}",
            batch.records
        );
    }
    Ok(())
}

pub fn publish_and_poll(b: &mut dyn Backend) -> Check {
    let c = b.client();
    ensure!(
        matches!(c.publish("missing", "x"), Err(BrokerError::UnknownTopic(_))),
        "publish to a missing topic must fail"
    );
    e(c.create_topic("p", Retention::Forever))?;
    ensure!(e(c.poll("p", "g", 10))?.is_empty(), "empty topic polled records");
    for i in 0..5 {
        let o = e(c.publish("p", &format!("r{i}")))?;
        ensure!(o == i, "publish {i} got offset {o}");
    }
    let offsets = |b: vitalcep::broker::PollBatch| b.records.iter().map(|r| r.0).collect::<Vec<_>>();
    ensure!(offsets(e(c.poll("p", "g", 3))?) == [0, 1, 2], "first poll");
    ensure!(offsets(e(c.poll("p", "g", 3))?) == [0, 1, 2], "poll must not advance");
    e(c.commit("p", "g", 2))?;
    ensure!(offsets(e(c.poll("p", "g", 10))?) == [2, 3, 4], "poll after commit");
    e(c.commit("p", "g", 1))?;
    ensure!(e(c.committed("p", "g"))? == 2, "commit went backwards");
    ensure!(
        matches!(c.commit("p", "g", 6), Err(BrokerError::OffsetAhead { .. })),
        "commit beyond head must fail"
    );
    ensure!(e(c.head("p"))? == 5, "head");
    Ok(())
}

pub fn groups_are_independent(b: &mut dyn Backend) -> Check {
    let c = b.client();
    e(c.create_topic("shared", Retention::Forever))?;
    for i in 0..20 {
        e(c.publish("shared", &i.to_string()))?;
    }
    e(c.commit("shared", "a", 15))?;
    ensure!(e(c.poll("shared", "b", 100))?.records.len() == 20, "group b lost records");
    ensure!(e(c.poll("shared", "a", 100))?.records.len() == 5, "group a tail");
    Ok(())
}

/// `publishers` threads each publish `per` records; a consumer must see one
/// total order that respects every publisher's own order.
pub fn concurrent_fifo(b: &mut dyn Backend, publishers: usize, per: usize) -> Check {
    e(b.client().create_topic("fifo", Retention::Forever))?;
    let clients: Vec<Box<dyn BrokerApi>> = (0..publishers).map(|_| b.client()).collect();
    let results: Vec<Result<(), String>> = thread::scope(|s| {
        let handles: Vec<_> = clients
            .iter()
            .enumerate()
            .map(|(p, c)| {
                s.spawn(move || {
                    let mut last = None;
                    for i in 0..per {
                        let o = e(c.publish("fifo", &format!("{p}:{i}")))?;
                        ensure!(last.is_none_or(|l| o > l), "publisher {p} offsets went back");
                        last = Some(o);
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        r?;
    }

    let c = b.client();
    let total = publishers * per;
    let mut next_seq: HashMap<usize, usize> = HashMap::new();
    let mut expected_offset = 0u64;
    loop {
        let batch = e(c.poll("fifo", "reader", 4096))?;
        let Some(next) = batch.next_offset() else { break };
        for (o, line) in &batch.records {
            ensure!(*o == expected_offset, "offset {o}, expected {expected_offset}");
            expected_offset += 1;
            let (p, i): (usize, usize) = line
                .split_once(':')
                .and_then(|(p, i)| Some((p.parse().ok()?, i.parse().ok()?)))
                .ok_or_else(|| format!("bad payload {line}"))?;
            let want = next_seq.entry(p).or_insert(0);
            ensure!(i == *want, "publisher {p}: saw {i}, expected {want}");
            *want += 1;
        }
        e(c.commit("fifo", "reader", next))?;
    }
    ensure!(expected_offset as usize == total, "read {expected_offset} of {total}");
    Ok(())
}

/// After a restart a consumer re-reads exactly the uncommitted suffix.
pub fn restart_resumes_from_commit(b: &mut dyn Backend) -> Check {
    {
        let c = b.client();
        e(c.create_topic("durable", Retention::Forever))?;
        for i in 0..100 {
            e(c.publish("durable", &format!("m{i}")))?;
        }
        let batch = e(c.poll("durable", "g", 40))?;
        e(c.commit("durable", "g", batch.next_offset().unwrap_or(0)))?;
    }
    b.restart();
    let c = b.client();
    let batch = e(c.poll("durable", "g", 1000))?;
    let offsets: Vec<u64> = batch.records.iter().map(|r| r.0).collect();
    ensure!(offsets == (40..100).collect::<Vec<_>>(), "resumed at {:?}", offsets.first());
    ensure!(batch.records[0].1 == "m40", "payload changed across restart");
    ensure!(e(c.poll("durable", "other", 1000))?.records.len() == 100, "fresh group");
    ensure!(e(c.publish("durable", "after"))? == 100, "offsets continue after restart");
    Ok(())
}

/// Pruning removes exactly the records older than `now - retention`.
pub fn prune_removes_aged_records(b: &mut dyn Backend) -> Check {
    let c = b.client();
    e(c.create_topic("aged", Retention::Millis(1000)))?;
    e(c.create_topic("kept", Retention::Forever))?;
    b.clock().set(10_000);
    for i in 0..10 {
        e(c.publish("aged", &format!("old{i}")))?;
        e(c.publish("kept", "x"))?;
    }
    e(c.commit("aged", "g", 3))?;
    b.clock().set(10_900);
    for i in 0..5 {
        e(c.publish("aged", &format!("new{i}")))?;
    }
    // nothing is older than 1000 ms yet
    ensure!(e(c.prune("aged", 11_000))? == 0, "pruned too early");
    let removed = e(c.prune("aged", 11_500))?;
    ensure!(removed == 10, "removed {removed}, expected 10");
    ensure!(e(c.prune("kept", 1_000_000))? == 0, "infinite retention pruned");
    let batch = e(c.poll("aged", "g", 100))?;
    let offsets: Vec<u64> = batch.records.iter().map(|r| r.0).collect();
    ensure!(batch.gap, "poll into a pruned range must report a gap");
    ensure!(offsets == [10, 11, 12, 13, 14], "surviving offsets {offsets:?}");
    ensure!(e(c.head("aged"))? == 15, "head moved");
    // survivors also survive a restart
    b.restart();
    let c = b.client();
    let offsets: Vec<u64> = e(c.poll("aged", "fresh", 100))?.records.iter().map(|r| r.0).collect();
    ensure!(offsets == [10, 11, 12, 13, 14], "after restart {offsets:?}");
    Ok(())
}

pub type Property = (&'static str, fn(&mut dyn Backend) -> Check);

pub const PROPERTIES: &[Property] = &[
    ("create_is_idempotent", create_is_idempotent),
    ("publish_and_poll", publish_and_poll),
    ("groups_are_independent", groups_are_independent),
    ("fifo_4x10000", |b| concurrent_fifo(b, 4, 10_000)),
    ("restart_resumes_from_commit", restart_resumes_from_commit),
    ("prune_removes_aged_records", prune_removes_aged_records),
];
