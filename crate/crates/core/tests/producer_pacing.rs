//! Replay pacing against the wall clock.

use std::sync::atomic::AtomicBool;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use vitalcep::broker::{Broker, BrokerApi, PollBatch, Result, Retention};
use vitalcep::runtime::{run_producer, ClockMode, ReplaySpec};
use vitalcep::wire::DataType;

/// Records when each publish arrived.
struct Timed {
    inner: Broker,
    arrivals: Mutex<Vec<Instant>>,
}

impl BrokerApi for Timed {
    fn create_topic(&self, name: &str, retention: Retention) -> Result<()> {
        self.inner.create_topic(name, retention)
    }
    fn publish(&self, topic: &str, payload: &str) -> Result<u64> {
        self.arrivals.lock().unwrap().push(Instant::now());
        self.inner.publish(topic, payload)
    }
    fn poll(&self, topic: &str, group: &str, max: usize) -> Result<PollBatch> {
        self.inner.poll(topic, group, max)
    }
    fn fetch(&self, topic: &str, from: u64, max: usize) -> Result<PollBatch> {
        self.inner.fetch(topic, from, max)
    }
    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<()> {
        self.inner.commit(topic, group, offset)
    }
    fn prune(&self, topic: &str, now_ms: u64) -> Result<usize> {
        self.inner.prune(topic, now_ms)
    }
    fn head(&self, topic: &str) -> Result<u64> {
        self.inner.head(topic)
    }
    fn committed(&self, topic: &str, group: &str) -> Result<u64> {
        self.inner.committed(topic, group)
    }
}

fn replay(seconds: usize, clock: ClockMode) -> Vec<Instant> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sig.csv");
    let text: String = (0..seconds * 500).map(|i| format!("{}\n", (i % 97) as f64)).collect();
    std::fs::write(&path, text).unwrap();
    let broker = Timed {
        inner: Broker::in_memory(),
        arrivals: Mutex::new(Vec::new()),
    };
    broker.create_topic("ecg", Retention::Forever).unwrap();
    let mut spec = ReplaySpec::new(&path, "ecg", "u", DataType::Ecg, 500.0);
    spec.clock = clock;
    let report = run_producer(&spec, &broker, &AtomicBool::new(false)).unwrap();
    assert_eq!(report.published as usize, seconds * 500);
    broker.arrivals.into_inner().unwrap()
}

#[test]
fn realtime_holds_500_hz_over_one_second_spans() {
    let arrivals = replay(3, ClockMode::Realtime);
    for k in 1..3 {
        let elapsed = arrivals[k * 500] - arrivals[(k - 1) * 500];
        let err = (elapsed.as_secs_f64() - 1.0).abs();
        assert!(err < 0.1, "span {k}: {elapsed:?}");
    }
    let total = arrivals[arrivals.len() - 1] - arrivals[0];
    assert!((total.as_secs_f64() - 2.998).abs() < 0.1, "{total:?}");
}

#[test]
fn acceleration_divides_wall_time() {
    let arrivals = replay(4, ClockMode::Accelerated(4.0));
    let total = arrivals[arrivals.len() - 1] - arrivals[0];
    assert!(total > Duration::from_millis(900) && total < Duration::from_millis(1100), "{total:?}");
}
