//! Newline-delimited upload format and the two transports that carry it.
//!
//! Every line is one `{"e":[...],"x":[...],"y":k}` object. Sessions carry no
//! header, trailer, or any other metadata.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use crate::cloud::{collect, AnonymousRecord, CloudDataset};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Key set of a serialized record.
pub const RECORD_KEYS: [&str; 3] = ["e", "x", "y"];

pub fn encode_record<T: Real>(r: &AnonymousRecord<T>) -> Result<String> {
    Ok(serde_json::to_string(r)?)
}

pub fn decode_record<T: Real>(line: &str) -> Result<AnonymousRecord<T>> {
    serde_json::from_str(line).map_err(|e| Error::Wire(format!("bad record line: {e}")))
}

/// Write one device's uploads as a session.
pub fn write_session<T: Real, W: Write>(mut out: W, records: &[AnonymousRecord<T>]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read records until end of stream. Blank lines are ignored.
pub fn read_session<T: Real, R: BufRead>(input: R) -> Result<Vec<AnonymousRecord<T>>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_record(&line)?);
    }
    Ok(out)
}

/// Check that a serialized session contains only objects with exactly the
/// keys `e`, `x`, `y`. Returns the number of records scanned.
pub fn scan_keys(session: &str) -> Result<usize> {
    let mut n = 0;
    for line in session.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Wire("record is not an object".into()))?;
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        if keys != RECORD_KEYS {
            return Err(Error::Wire(format!("unexpected key set {keys:?}")));
        }
        n += 1;
    }
    Ok(n)
}

/// How uploads travel from devices to the collector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    /// TCP on the given address; port 0 picks a free port.
    Socket(String),
}

impl std::str::FromStr for Transport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inprocess" => Ok(Transport::InProcess),
            _ => match s.strip_prefix("socket:") {
                Some(addr) if !addr.is_empty() => Ok(Transport::Socket(addr.to_string())),
                _ => Err(Error::Config(format!(
                    "transport must be `inprocess` or `socket:ADDR`, got `{s}`"
                ))),
            },
        }
    }
}

/// In-process transport: each session is serialized to bytes and parsed
/// back, so both transports exercise the same wire format.
pub fn transfer_in_process<T: Real>(
    sessions: &[Vec<AnonymousRecord<T>>],
    shuffle_seed: u64,
) -> Result<CloudDataset<T>> {
    let mut received = Vec::with_capacity(sessions.len());
    for s in sessions {
        let mut buf = Vec::new();
        write_session(&mut buf, s)?;
        received.push(read_session(&buf[..])?);
    }
    collect(received, shuffle_seed)
}

/// TCP collector accepting a fixed number of device sessions. Each session
/// is read on its own thread and appended to a shared pool.
pub struct SocketCollector<T> {
    addr: SocketAddr,
    acceptor: JoinHandle<Result<Vec<AnonymousRecord<T>>>>,
}

impl<T: Real> SocketCollector<T> {
    pub fn bind(addr: &str, sessions: usize) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let acceptor = thread::spawn(move || -> Result<Vec<AnonymousRecord<T>>> {
            let pool = Arc::new(Mutex::new(Vec::new()));
            let mut readers = Vec::with_capacity(sessions);
            for _ in 0..sessions {
                let (stream, _) = listener.accept()?;
                let pool = Arc::clone(&pool);
                readers.push(thread::spawn(move || -> Result<()> {
                    let records = read_session::<T, _>(BufReader::new(stream))?;
                    pool.lock().expect("collector pool poisoned").extend(records);
                    Ok(())
                }));
            }
            for r in readers {
                r.join().map_err(|_| Error::Wire("session reader panicked".into()))??;
            }
            let records = std::mem::take(&mut *pool.lock().expect("collector pool poisoned"));
            Ok(records)
        });
        Ok(SocketCollector { addr: local, acceptor })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Wait for every session to finish and build the dataset.
    pub fn finish(self, shuffle_seed: u64) -> Result<CloudDataset<T>> {
        let records = self
            .acceptor
            .join()
            .map_err(|_| Error::Wire("collector thread panicked".into()))??;
        collect(std::iter::once(records), shuffle_seed)
    }
}

/// Send one device's uploads as a single TCP session.
pub fn send_session<T: Real, A: ToSocketAddrs>(addr: A, records: &[AnonymousRecord<T>]) -> Result<()> {
    let stream = TcpStream::connect(addr)?;
    let mut w = std::io::BufWriter::new(stream);
    write_session(&mut w, records)?;
    let stream = w.into_inner().map_err(|e| Error::Wire(e.to_string()))?;
    stream.shutdown(std::net::Shutdown::Write)?;
    Ok(())
}

/// Socket transport: bind, send every session from its own thread, collect.
pub fn transfer_socket<T: Real>(
    addr: &str,
    sessions: &[Vec<AnonymousRecord<T>>],
    shuffle_seed: u64,
) -> Result<CloudDataset<T>> {
    let collector = SocketCollector::<T>::bind(addr, sessions.len())?;
    let target = collector.local_addr();
    thread::scope(|scope| -> Result<()> {
        let senders: Vec<_> = sessions
            .iter()
            .map(|s| scope.spawn(move || send_session(target, s)))
            .collect();
        for h in senders {
            h.join().map_err(|_| Error::Wire("sender panicked".into()))??;
        }
        Ok(())
    })?;
    collector.finish(shuffle_seed)
}

/// Move sessions through `transport` and build the cloud dataset.
pub fn transfer<T: Real>(
    transport: &Transport,
    sessions: &[Vec<AnonymousRecord<T>>],
    shuffle_seed: u64,
) -> Result<CloudDataset<T>> {
    match transport {
        Transport::InProcess => transfer_in_process(sessions, shuffle_seed),
        Transport::Socket(addr) => transfer_socket(addr, sessions, shuffle_seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sessions() -> Vec<Vec<AnonymousRecord<f64>>> {
        (0..4)
            .map(|s| {
                (0..5)
                    .map(|i| AnonymousRecord {
                        e: vec![s as f64 * 0.1 + i as f64 * 1e-3, -0.25],
                        x: vec![i as f64, 1.0 / 3.0],
                        y: (s + i) % 3,
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn line_round_trip() {
        let r = &sessions()[1][2];
        let line = encode_record(r).unwrap();
        assert!(!line.contains('\n'));
        assert_eq!(&decode_record::<f64>(&line).unwrap(), r);
        assert!(decode_record::<f64>(r#"{"e":[1.0],"x":[],"y":0,"id":3}"#).is_err());
    }

    #[test]
    fn key_scan() {
        let mut buf = Vec::new();
        write_session(&mut buf, &sessions()[0]).unwrap();
        assert_eq!(scan_keys(std::str::from_utf8(&buf).unwrap()).unwrap(), 5);
        assert!(scan_keys(r#"{"e":[],"x":[],"y":0,"user":1}"#).is_err());
        assert!(scan_keys(r#"{"e":[],"x":[]}"#).is_err());
    }

    #[test]
    fn transport_parsing() {
        assert_eq!("inprocess".parse::<Transport>().unwrap(), Transport::InProcess);
        assert_eq!(
            "socket:127.0.0.1:0".parse::<Transport>().unwrap(),
            Transport::Socket("127.0.0.1:0".into())
        );
        assert!("socket:".parse::<Transport>().is_err());
        assert!("carrier-pigeon".parse::<Transport>().is_err());
    }

    #[test]
    fn socket_and_in_process_agree() {
        let s = sessions();
        let a = transfer(&Transport::InProcess, &s, 11).unwrap();
        let b = transfer(&Transport::Socket("127.0.0.1:0".into()), &s, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
    }
}
