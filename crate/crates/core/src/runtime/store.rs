//! Append-only result store: one line-delimited file per (job, user).
//!
//! Every time a job opens a file it writes a `#run <id>` header line; all
//! other lines are wire-format output records.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::wire::{decode_output, OutputRecord, ResultKind};

pub const RUN_HEADER: &str = "#run ";

pub fn job_dir_name(kind: ResultKind) -> &'static str {
    match kind {
        ResultKind::ChfRisk => "risk",
        ResultKind::Stress => "stress",
    }
}

/// Maps a user id onto a safe file name. Reversible by [`decode_user`].
pub fn encode_user(user: &str) -> String {
    let mut out = String::from("u-");
    for b in user.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out.push_str(".jsonl");
    out
}

pub fn decode_user(file_name: &str) -> Option<String> {
    let body = file_name.strip_prefix("u-")?.strip_suffix(".jsonl")?;
    let mut bytes = Vec::with_capacity(body.len());
    let raw = body.as_bytes();
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'%' {
            let hex = body.get(i + 1..i + 3)?;
            bytes.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            bytes.push(raw[i]);
            i += 1;
        }
    }
    String::from_utf8(bytes).ok()
}

/// Writer side of the store for one job.
#[derive(Debug)]
pub struct ResultStore {
    dir: PathBuf,
    run_id: String,
    open: HashMap<String, BufWriter<File>>,
}

impl ResultStore {
    pub fn open(root: impl AsRef<Path>, kind: ResultKind, run_id: impl Into<String>) -> io::Result<Self> {
        let dir = root.as_ref().join(job_dir_name(kind));
        fs::create_dir_all(&dir)?;
        Ok(ResultStore {
            dir,
            run_id: run_id.into(),
            open: HashMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&mut self, record: &OutputRecord) -> io::Result<()> {
        let user = record.user_id();
        if !self.open.contains_key(user) {
            let path = self.dir.join(encode_user(user));
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            let mut w = BufWriter::new(file);
            writeln!(w, "{RUN_HEADER}{}", self.run_id)?;
            self.open.insert(user.to_string(), w);
        }
        let w = self.open.get_mut(user).expect("writer just inserted");
        writeln!(w, "{}", record.encode())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        for w in self.open.values_mut() {
            w.flush()?;
        }
        Ok(())
    }

    /// Last record per user already in the store, for resuming.
    pub fn last_records(&self) -> io::Result<Vec<OutputRecord>> {
        let mut out = Vec::new();
        for user in list_users(&self.dir)? {
            if let Some(r) = read_records(&self.dir.join(encode_user(&user)))?.pop() {
                out.push(r);
            }
        }
        Ok(out)
    }
}

impl Drop for ResultStore {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Users with a file under `dir`, sorted.
pub fn list_users(dir: &Path) -> io::Result<Vec<String>> {
    let mut users = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(users),
        Err(e) => return Err(e),
    };
    for entry in entries {
        if let Some(u) = entry?.file_name().to_str().and_then(decode_user) {
            users.push(u);
        }
    }
    users.sort();
    Ok(users)
}

/// Decodes a store file, skipping headers and unreadable lines.
pub fn read_records(path: &Path) -> io::Result<Vec<OutputRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if let Ok(r) = decode_output(&line) {
            out.push(r);
        }
    }
    Ok(out)
}

/// The file for `(kind, user)` under the store root.
pub fn user_file(root: &Path, kind: ResultKind, user: &str) -> PathBuf {
    root.join(job_dir_name(kind)).join(encode_user(user))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::ResultRecord;
    use proptest::prelude::*;

    fn result(user: &str, start: u64) -> OutputRecord {
        OutputRecord::Result(ResultRecord {
            user_id: user.into(),
            kind: ResultKind::Stress,
            window_start: start,
            window_end: start + 5000,
            value: 0.1,
            aux: Default::default(),
        })
    }

    #[test]
    fn appends_with_run_headers() {
        let tmp = tempfile::tempdir().unwrap();
        {
            let mut s = ResultStore::open(tmp.path(), ResultKind::Stress, "a").unwrap();
            s.append(&result("x/y", 0)).unwrap();
            s.append(&result("x/y", 5000)).unwrap();
        }
        {
            let mut s = ResultStore::open(tmp.path(), ResultKind::Stress, "b").unwrap();
            s.append(&result("x/y", 10_000)).unwrap();
            let last = s.last_records().unwrap();
            assert_eq!(last, vec![result("x/y", 5000)]);
        }
        let path = user_file(tmp.path(), ResultKind::Stress, "x/y");
        let text = fs::read_to_string(&path).unwrap();
        let headers: Vec<&str> = text.lines().filter(|l| l.starts_with('#')).collect();
        assert_eq!(headers, vec!["#run a", "#run b"]);
        assert_eq!(read_records(&path).unwrap().len(), 3);
        assert_eq!(list_users(&tmp.path().join("stress")).unwrap(), vec!["x/y"]);
    }

    proptest! {
        #[test]
        fn user_names_round_trip(user in ".{0,20}") {
            let f = encode_user(&user);
            prop_assert!(!f.contains('/') && !f.contains('\\'));
            prop_assert_eq!(decode_user(&f), Some(user));
        }
    }
}
