//! Line protocol exposing a [`Broker`] over TCP, and a client for it.
//!
//! Requests are single lines, `PUB` is followed by the payload line:
//!
//! ```text
//! CREATE <topic> <retention_ms|inf>      -> OK
//! PUB <topic>\n<record line>             -> OK <offset>
//! POLL <topic> <group> <max>             -> BATCH <n> <gap 0|1>, then n x MSG
//! FETCH <topic> <from> <max>             -> BATCH <n> <gap 0|1>, then n x MSG
//! COMMIT <topic> <group> <offset>        -> OK
//! PRUNE <topic> [now_ms]                 -> OK <removed>
//! HEAD <topic>                           -> OK <next offset>
//! COMMITTED <topic> <group>              -> OK <offset>
//! SUB <topic> <group>                    -> OK, then a stream of MSG
//! QUIT
//! ```
//!
//! A message is `MSG <offset>\n<record line>`. Failures answer
//! `ERR <code> <detail>`. A subscribed connection keeps accepting commands,
//! typically `COMMIT`, whose replies interleave with the stream.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::broker::{Broker, BrokerApi, BrokerError, PollBatch, Result, Retention};

const SUB_BATCH: usize = 512;
const SUB_WAIT: Duration = Duration::from_millis(200);

fn protocol(msg: impl Into<String>) -> BrokerError {
    BrokerError::Protocol(msg.into())
}

/// Renders an error as the text after `ERR `.
pub fn encode_error(e: &BrokerError) -> String {
    let detail = match e {
        BrokerError::UnknownTopic(t) => t.clone(),
        BrokerError::ConflictingRetention {
            topic,
            existing,
            requested,
        } => format!("{topic} {existing} {requested}"),
        BrokerError::OffsetAhead {
            topic,
            offset,
            head,
        } => format!("{topic} {offset} {head}"),
        BrokerError::InvalidName(n) => n.clone(),
        BrokerError::InvalidPayload => String::new(),
        BrokerError::Io(e) => e.to_string(),
        BrokerError::Protocol(m) => m.clone(),
    };
    format!("{} {}", e.code(), detail.replace(['\r', '\n'], " "))
}

/// Inverse of [`encode_error`].
pub fn decode_error(text: &str) -> BrokerError {
    let (code, detail) = text.split_once(' ').unwrap_or((text, ""));
    let fields: Vec<&str> = detail.split_whitespace().collect();
    let parsed = match (code, fields.as_slice()) {
        ("UnknownTopic", _) => Some(BrokerError::UnknownTopic(detail.to_string())),
        ("InvalidName", _) => Some(BrokerError::InvalidName(detail.to_string())),
        ("InvalidPayload", _) => Some(BrokerError::InvalidPayload),
        ("Io", _) => Some(BrokerError::Io(io::Error::other(detail.to_string()))),
        ("Protocol", _) => Some(protocol(detail)),
        ("ConflictingRetention", [t, e, r]) => e.parse().ok().zip(r.parse().ok()).map(|(e, r)| {
            BrokerError::ConflictingRetention {
                topic: t.to_string(),
                existing: e,
                requested: r,
            }
        }),
        ("OffsetAhead", [t, o, h]) => {
            o.parse()
                .ok()
                .zip(h.parse().ok())
                .map(|(offset, head)| BrokerError::OffsetAhead {
                    topic: t.to_string(),
                    offset,
                    head,
                })
        }
        _ => None,
    };
    parsed.unwrap_or_else(|| protocol(format!("unrecognized error: {text}")))
}

type SharedWriter = Arc<Mutex<BufWriter<TcpStream>>>;

fn write_locked(w: &SharedWriter, text: &str) -> io::Result<()> {
    let mut w = w.lock().unwrap_or_else(|e| e.into_inner());
    w.write_all(text.as_bytes())?;
    w.flush()
}

fn render_batch(batch: &PollBatch) -> String {
    let mut out = format!("BATCH {} {}\n", batch.records.len(), u8::from(batch.gap));
    for (offset, line) in &batch.records {
        out.push_str(&format!("MSG {offset}\n{line}\n"));
    }
    out
}

fn parse_num<T: std::str::FromStr>(s: Option<&&str>, what: &str) -> Result<T> {
    s.ok_or_else(|| protocol(format!("missing {what}")))?
        .parse()
        .map_err(|_| protocol(format!("bad {what}")))
}

fn arg<'a>(args: &[&'a str], i: usize, what: &str) -> Result<&'a str> {
    args.get(i).copied().ok_or_else(|| protocol(format!("missing {what}")))
}

/// A running front-end. Dropping it without [`ServerHandle::shutdown`]
/// leaves the server running in the background.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<HashMap<u64, TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, closes every connection and waits for the listener.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        for (_, c) in self.conns.lock().unwrap_or_else(|e| e.into_inner()).drain() {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Binds `addr` and serves `broker` on background threads.
pub fn serve(broker: Arc<Broker>, addr: impl ToSocketAddrs) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::default();
    let accept = {
        let (stop, conns) = (stop.clone(), conns.clone());
        thread::Builder::new()
            .name("broker-accept".into())
            .spawn(move || {
                let next_id = AtomicU64::new(0);
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let id = next_id.fetch_add(1, Ordering::Relaxed);
                    if let Ok(c) = stream.try_clone() {
                        conns.lock().unwrap_or_else(|e| e.into_inner()).insert(id, c);
                    }
                    let (broker, conns) = (broker.clone(), conns.clone());
                    let _ = thread::Builder::new()
                        .name(format!("broker-conn-{id}"))
                        .spawn(move || {
                            if let Err(e) = handle_connection(&broker, stream) {
                                log::debug!("connection {id} ended: {e}");
                            }
                            conns.lock().unwrap_or_else(|e| e.into_inner()).remove(&id);
                        });
                }
            })?
    };
    Ok(ServerHandle {
        addr: local,
        stop,
        conns,
        accept: Some(accept),
    })
}

fn handle_connection(broker: &Arc<Broker>, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let writer: SharedWriter = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
    let done = Arc::new(AtomicBool::new(false));
    let mut streamers = Vec::new();
    let mut line = String::new();
    let result = loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break Ok(());
        }
        let request = line.trim_end_matches(['\r', '\n']).to_string();
        let args: Vec<&str> = request.split_whitespace().collect();
        let reply = match args.first().copied() {
            None => continue,
            Some("QUIT") => break Ok(()),
            Some("PUB") => {
                let mut payload = String::new();
                if reader.read_line(&mut payload)? == 0 {
                    break Ok(());
                }
                let payload = payload.trim_end_matches(['\r', '\n']);
                arg(&args, 1, "topic")
                    .and_then(|t| broker.publish(t, payload))
                    .map(|o| format!("OK {o}\n"))
            }
            Some("SUB") => match start_subscription(broker, &args, &writer, &done) {
                Ok(h) => {
                    streamers.push(h);
                    continue;
                }
                Err(e) => Err(e),
            },
            Some(_) => dispatch(broker, &args),
        };
        let text = reply.unwrap_or_else(|e| format!("ERR {}\n", encode_error(&e)));
        if let Err(e) = write_locked(&writer, &text) {
            break Err(e);
        }
    };
    done.store(true, Ordering::SeqCst);
    for h in streamers {
        let _ = h.join();
    }
    let _ = stream.shutdown(Shutdown::Both);
    result
}

fn dispatch(broker: &Broker, args: &[&str]) -> Result<String> {
    match args[0] {
        "CREATE" => {
            let retention: Retention = arg(args, 2, "retention")?
                .parse()
                .map_err(|_| protocol("bad retention"))?;
            broker.create_topic(arg(args, 1, "topic")?, retention)?;
            Ok("OK\n".into())
        }
        "POLL" => {
            let max = parse_num(args.get(3), "max")?;
            let batch = broker.poll(arg(args, 1, "topic")?, arg(args, 2, "group")?, max)?;
            Ok(render_batch(&batch))
        }
        "FETCH" => {
            let from = parse_num(args.get(2), "offset")?;
            let max = parse_num(args.get(3), "max")?;
            Ok(render_batch(&broker.fetch(arg(args, 1, "topic")?, from, max)?))
        }
        "COMMIT" => {
            let offset = parse_num(args.get(3), "offset")?;
            broker.commit(arg(args, 1, "topic")?, arg(args, 2, "group")?, offset)?;
            Ok("OK\n".into())
        }
        "PRUNE" => {
            let now = match args.get(2) {
                Some(_) => parse_num(args.get(2), "time")?,
                None => broker.now_ms(),
            };
            Ok(format!("OK {}\n", broker.prune(arg(args, 1, "topic")?, now)?))
        }
        "HEAD" => Ok(format!("OK {}\n", broker.head(arg(args, 1, "topic")?)?)),
        "COMMITTED" => Ok(format!(
            "OK {}\n",
            broker.committed(arg(args, 1, "topic")?, arg(args, 2, "group")?)?
        )),
        other => Err(protocol(format!("unknown command {other}"))),
    }
}

fn start_subscription(
    broker: &Arc<Broker>,
    args: &[&str],
    writer: &SharedWriter,
    done: &Arc<AtomicBool>,
) -> Result<JoinHandle<()>> {
    let topic = arg(args, 1, "topic")?.to_string();
    let group = arg(args, 2, "group")?.to_string();
    let mut position = broker.committed(&topic, &group)?;
    write_locked(writer, "OK\n")?;
    let (broker, writer, done) = (broker.clone(), writer.clone(), done.clone());
    let handle = thread::Builder::new()
        .name(format!("broker-sub-{topic}"))
        .spawn(move || {
            while !done.load(Ordering::SeqCst) {
                let batch = match broker.fetch(&topic, position, SUB_BATCH) {
                    Ok(b) => b,
                    Err(_) => break,
                };
                let Some(next) = batch.next_offset() else {
                    if broker.wait_for(&topic, position, SUB_WAIT).is_err() {
                        break;
                    }
                    continue;
                };
                let mut text = String::new();
                for (offset, line) in &batch.records {
                    text.push_str(&format!("MSG {offset}\n{line}\n"));
                }
                if write_locked(&writer, &text).is_err() {
                    break;
                }
                position = next;
            }
        })?;
    Ok(handle)
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Conn {
    fn open(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Conn {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    fn send(&mut self, text: &str) -> Result<()> {
        self.writer.write_all(text.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    fn read_line(&mut self) -> Result<String> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(BrokerError::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "broker closed the connection",
            )));
        }
        Ok(line.trim_end_matches(['\r', '\n']).to_string())
    }

    /// Reads a reply line, turning `ERR` into an error and stripping `OK`.
    fn reply(&mut self) -> Result<String> {
        let line = self.read_line()?;
        if let Some(err) = line.strip_prefix("ERR ") {
            return Err(decode_error(err));
        }
        if line == "OK" {
            return Ok(String::new());
        }
        line.strip_prefix("OK ")
            .map(str::to_string)
            .ok_or_else(|| protocol(format!("unexpected reply {line:?}")))
    }

    fn read_message(&mut self) -> Result<(u64, String)> {
        let header = self.read_line()?;
        let offset = header
            .strip_prefix("MSG ")
            .and_then(|o| o.parse().ok())
            .ok_or_else(|| protocol(format!("expected MSG, got {header:?}")))?;
        Ok((offset, self.read_line()?))
    }

    fn batch(&mut self) -> Result<PollBatch> {
        let line = self.read_line()?;
        if let Some(err) = line.strip_prefix("ERR ") {
            return Err(decode_error(err));
        }
        let mut parts = line.split_whitespace();
        let (Some("BATCH"), Some(n), Some(gap)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(protocol(format!("expected BATCH, got {line:?}")));
        };
        let n: usize = n.parse().map_err(|_| protocol("bad batch size"))?;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            records.push(self.read_message()?);
        }
        Ok(PollBatch {
            records,
            gap: gap == "1",
        })
    }
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c.is_control()) {
        Err(BrokerError::InvalidName(s.to_string()))
    } else {
        Ok(())
    }
}

/// [`BrokerApi`] over the socket protocol. One request at a time per
/// client; clone-free sharing goes through an internal lock.
pub struct RemoteBroker {
    addr: String,
    conn: Mutex<Conn>,
}

impl std::fmt::Debug for RemoteBroker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBroker").field("addr", &self.addr).finish()
    }
}

impl RemoteBroker {
    pub fn connect(addr: impl Into<String>) -> Result<Self> {
        let addr = addr.into();
        let conn = Conn::open(&addr)?;
        Ok(RemoteBroker {
            addr,
            conn: Mutex::new(conn),
        })
    }

    pub fn address(&self) -> &str {
        &self.addr
    }

    fn with<T>(&self, f: impl FnOnce(&mut Conn) -> Result<T>) -> Result<T> {
        let mut c = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        f(&mut c)
    }

    fn simple(&self, request: String) -> Result<String> {
        self.with(|c| {
            c.send(&request)?;
            c.reply()
        })
    }

    fn number(&self, request: String) -> Result<u64> {
        let text = self.simple(request)?;
        text.parse()
            .map_err(|_| protocol(format!("expected a number, got {text:?}")))
    }

    /// Opens a dedicated streaming connection.
    pub fn subscribe(&self, topic: &str, group: &str) -> Result<Subscription> {
        check_token(topic)?;
        check_token(group)?;
        let mut conn = Conn::open(&self.addr)?;
        conn.send(&format!("SUB {topic} {group}\n"))?;
        conn.reply()?;
        Ok(Subscription {
            topic: topic.to_string(),
            group: group.to_string(),
            conn,
            pending: Vec::new(),
            header: None,
        })
    }
}

impl BrokerApi for RemoteBroker {
    fn create_topic(&self, name: &str, retention: Retention) -> Result<()> {
        check_token(name)?;
        self.simple(format!("CREATE {name} {retention}\n")).map(|_| ())
    }

    fn publish(&self, topic: &str, payload: &str) -> Result<u64> {
        check_token(topic)?;
        if payload.contains(['\n', '\r']) {
            return Err(BrokerError::InvalidPayload);
        }
        self.number(format!("PUB {topic}\n{payload}\n"))
    }

    fn poll(&self, topic: &str, group: &str, max_records: usize) -> Result<PollBatch> {
        check_token(topic)?;
        check_token(group)?;
        self.with(|c| {
            c.send(&format!("POLL {topic} {group} {max_records}\n"))?;
            c.batch()
        })
    }

    fn fetch(&self, topic: &str, from: u64, max_records: usize) -> Result<PollBatch> {
        check_token(topic)?;
        self.with(|c| {
            c.send(&format!("FETCH {topic} {from} {max_records}\n"))?;
            c.batch()
        })
    }

    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<()> {
        check_token(topic)?;
        check_token(group)?;
        self.simple(format!("COMMIT {topic} {group} {offset}\n"))
            .map(|_| ())
    }

    fn prune(&self, topic: &str, now_ms: u64) -> Result<usize> {
        check_token(topic)?;
        self.number(format!("PRUNE {topic} {now_ms}\n"))
            .map(|n| n as usize)
    }

    fn head(&self, topic: &str) -> Result<u64> {
        check_token(topic)?;
        self.number(format!("HEAD {topic}\n"))
    }

    fn committed(&self, topic: &str, group: &str) -> Result<u64> {
        check_token(topic)?;
        check_token(group)?;
        self.number(format!("COMMITTED {topic} {group}\n"))
    }
}

/// A pushed stream of records starting at the group's committed offset.
pub struct Subscription {
    topic: String,
    group: String,
    conn: Conn,
    /// Partial line carried over a read timeout.
    pending: Vec<u8>,
    /// Offset of a `MSG` whose payload line has not arrived yet.
    header: Option<u64>,
}

impl Subscription {
    /// Next record, or `None` if nothing arrives within `timeout`.
    pub fn next_timeout(&mut self, timeout: Duration) -> Result<Option<(u64, String)>> {
        self.conn
            .reader
            .get_ref()
            .set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        loop {
            match self.conn.reader.read_until(b'\n', &mut self.pending) {
                Ok(0) => {
                    return Err(BrokerError::Io(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "subscription closed",
                    )))
                }
                Ok(_) if self.pending.ends_with(b"\n") => {}
                Ok(_) => continue,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Ok(None)
                }
                Err(e) => return Err(e.into()),
            }
            let raw = std::mem::take(&mut self.pending);
            let line = String::from_utf8(raw).map_err(|_| protocol("non-UTF-8 line"))?;
            let line = line.trim_end_matches(['\r', '\n']);
            if let Some(offset) = self.header.take() {
                return Ok(Some((offset, line.to_string())));
            }
            if let Some(o) = line.strip_prefix("MSG ") {
                self.header = Some(o.parse().map_err(|_| protocol("bad MSG offset"))?);
            } else if let Some(err) = line.strip_prefix("ERR ") {
                return Err(decode_error(err));
            } else if !(line == "OK" || line.starts_with("OK ")) {
                return Err(protocol(format!("unexpected line {line:?}")));
            }
        }
    }

    /// Sends a commit on the subscription connection. The acknowledgement
    /// is consumed by later reads; a failure surfaces there.
    pub fn commit(&mut self, offset: u64) -> Result<()> {
        let req = format!("COMMIT {} {} {offset}\n", self.topic, self.group);
        self.conn.send(&req)
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        let _ = self.conn.send("QUIT\n");
    }
}

/// Background snapshots and retention pruning for a served broker.
pub struct Maintenance {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Maintenance {
    pub fn spawn(broker: Arc<Broker>, every: Duration) -> io::Result<Self> {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::Builder::new()
            .name("broker-maintenance".into())
            .spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    let mut slept = Duration::ZERO;
                    while slept < every && !flag.load(Ordering::SeqCst) {
                        let step = Duration::from_millis(50).min(every - slept);
                        thread::sleep(step);
                        slept += step;
                    }
                    let now = broker.now_ms();
                    for t in broker.topic_names() {
                        if let Err(e) = broker.prune(&t, now) {
                            log::warn!("prune {t}: {e}");
                        }
                    }
                    if let Err(e) = broker.snapshot() {
                        log::warn!("snapshot: {e}");
                    }
                }
            })?;
        Ok(Maintenance {
            stop,
            handle: Some(handle),
        })
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
