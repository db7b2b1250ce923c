#![allow(dead_code)]

pub mod suite;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use vitalcep::broker::BrokerApi;
use vitalcep::config::Config;
use vitalcep::runtime::{run_producer, JobRunner, JobStats, ReplaySpec, RiskJob, StressJob};
use vitalcep::synth::{beat_times, bp_waveform, modulated_rr, EcgTemplate, SyntheticEcg};
use vitalcep::wire::DataType;

pub const RATE: f64 = 500.0;

/// One user's synthetic recording on disk.
pub struct Recording {
    pub user: String,
    pub ecg: PathBuf,
    pub bp: PathBuf,
}

/// Writes `seconds` of ECG and BP for `user`, bare values at 500 Hz.
pub fn write_recording(dir: &Path, user: &str, seconds: f64, rr_ms: f64, template: EcgTemplate) -> Recording {
    let beats = beat_times(0.3, seconds + 1.0, modulated_rr(rr_ms, 25.0, 12.0));
    let n = (seconds * RATE) as usize;
    let ecg = SyntheticEcg {
        template,
        sample_rate: RATE,
    }
    .render_range(&beats, 0, n);
    let bp = bp_waveform(&beats, 125.0, 82.0, RATE, n);
    let write = |name: &str, v: &[f64]| {
        let path = dir.join(format!("{user}-{name}.csv"));
        let mut text = String::with_capacity(v.len() * 22);
        for x in v {
            text.push_str(&format!("{x}\n"));
        }
        fs::write(&path, text).unwrap();
        path
    };
    Recording {
        user: user.to_string(),
        ecg: write("ecg", &ecg),
        bp: write("bp", &bp),
    }
}

/// Publishes every recording as fast as possible, ECG then BP per user.
pub fn publish_all(broker: &impl BrokerApi, config: &Config, recs: &[Recording]) -> u64 {
    let stop = AtomicBool::new(false);
    let mut total = 0;
    for r in recs {
        for (path, topic, t) in [
            (&r.ecg, &config.topics.ecg, DataType::Ecg),
            (&r.bp, &config.topics.bp, DataType::Bp),
        ] {
            broker.create_topic(topic, config.topics.retention).unwrap();
            let spec = ReplaySpec::new(path, topic, &r.user, t, RATE);
            total += run_producer(&spec, broker, &stop).unwrap().published;
        }
    }
    total
}

pub fn drain_risk(broker: impl BrokerApi, config: &Config, run_id: &str) -> JobStats {
    let job = RiskJob::from_config(config).unwrap();
    JobRunner::new(broker, job, config, run_id)
        .unwrap()
        .drain()
        .unwrap()
}

pub fn drain_stress(broker: impl BrokerApi, config: &Config, run_id: &str) -> JobStats {
    let job = StressJob::new(config).unwrap();
    JobRunner::new(broker, job, config, run_id)
        .unwrap()
        .drain()
        .unwrap()
}

/// Every store file under `root`, relative path to contents with run
/// headers removed.
pub fn store_contents(root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for job in ["risk", "stress"] {
        let dir = root.join(job);
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        let mut files: Vec<PathBuf> = entries.map(|e| e.unwrap().path()).collect();
        files.sort();
        for f in files {
            let text = fs::read_to_string(&f).unwrap();
            let body: String = text
                .lines()
                .filter(|l| !l.starts_with('#'))
                .map(|l| format!("{l}\n"))
                .collect();
            out.push((
                format!("{job}/{}", f.file_name().unwrap().to_string_lossy()),
                body,
            ));
        }
    }
    out
}

pub fn config_with_store(store: &Path) -> Config {
    Config {
        store_dir: store.to_path_buf(),
        ..Config::default()
    }
}
