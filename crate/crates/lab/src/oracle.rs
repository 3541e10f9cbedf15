//! Client for an external answer oracle running as a child process.
//!
//! One JSON request per line on the child's stdin,
//! `{"id":..,"selection":[..],"meta":{..}}`, and one response per line on
//! its stdout, `{"id":..,"correct":true|false}`, in request order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use ldar_core::environ::{AnswerOracle, Instance};
use ldar_core::{Error, Result};
use serde_json::{json, Value};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_IN_FLIGHT: usize = 4;

pub struct SubprocessOracle {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    cache: HashMap<(String, Vec<usize>), bool>,
    timeout: Duration,
    in_flight: usize,
    round_trips: usize,
}

impl SubprocessOracle {
    /// `command` is split with shell quoting rules into program and args.
    pub fn spawn(command: &str) -> Result<Self> {
        Self::with_limits(command, DEFAULT_TIMEOUT, DEFAULT_IN_FLIGHT)
    }

    pub fn with_limits(command: &str, timeout: Duration, in_flight: usize) -> Result<Self> {
        let argv = shlex::split(command).filter(|a| !a.is_empty()).ok_or_else(|| Error::Usage(format!("bad oracle command {command:?}")))?;
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Oracle(format!("cannot start {:?}: {e}", argv[0])))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(SubprocessOracle { child, stdin, lines: rx, cache: HashMap::new(), timeout, in_flight: in_flight.max(1), round_trips: 0 })
    }

    /// Requests actually sent to the child.
    pub fn round_trips(&self) -> usize {
        self.round_trips
    }

    fn dead(&mut self) -> Error {
        match self.child.wait() {
            Ok(status) if !status.success() => Error::Oracle(format!("oracle exited with {status}")),
            Ok(_) => Error::Oracle("oracle closed its output".into()),
            Err(e) => Error::Oracle(format!("oracle wait failed: {e}")),
        }
    }

    fn send(&mut self, inst: &Instance, selection: &[usize]) -> Result<()> {
        let tokens: u64 = selection.iter().map(|&i| u64::from(inst.token_counts[i])).sum();
        let request = json!({
            "id": inst.id,
            "selection": selection,
            "meta": { "n_passages": inst.n(), "tokens": tokens },
        });
        let stdin = self.stdin.as_mut().ok_or_else(|| Error::Oracle("oracle input closed".into()))?;
        let written = writeln!(stdin, "{request}").and_then(|_| stdin.flush());
        if written.is_err() {
            return Err(self.dead());
        }
        self.round_trips += 1;
        Ok(())
    }

    fn receive(&mut self, id: &str) -> Result<bool> {
        let line = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(Error::Protocol(format!("unreadable response: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Oracle(format!("no response for {id} within {:?}", self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => return Err(self.dead()),
        };
        parse_response(&line, id)
    }
}

/// Checks one response line against the id it should answer.
pub fn parse_response(line: &str, id: &str) -> Result<bool> {
    let v: Value = serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed response {line:?}: {e}")))?;
    match v.get("id").and_then(Value::as_str) {
        Some(got) if got == id => {}
        Some(got) => return Err(Error::Protocol(format!("response for {got:?} while waiting for {id:?}"))),
        None => return Err(Error::Protocol(format!("response without string \"id\": {line}"))),
    }
    v.get("correct")
        .and_then(Value::as_bool)
        .ok_or_else(|| Error::Protocol(format!("response without boolean \"correct\": {line}")))
}

impl AnswerOracle for SubprocessOracle {
    fn judge(&mut self, inst: &Instance, selection: &[usize]) -> Result<bool> {
        Ok(self.judge_batch(&[(inst, selection)])?[0])
    }

    /// Sends every uncached query with at most `in_flight` outstanding.
    fn judge_batch(&mut self, queries: &[(&Instance, &[usize])]) -> Result<Vec<bool>> {
        let keys: Vec<(String, Vec<usize>)> = queries
            .iter()
            .map(|(inst, sel)| {
                let mut s = sel.to_vec();
                s.sort_unstable();
                s.dedup();
                (inst.id.clone(), s)
            })
            .collect();
        let mut todo: Vec<usize> = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            if !self.cache.contains_key(k) && !todo.iter().any(|&j| keys[j] == *k) {
                todo.push(i);
            }
        }
        for window in todo.chunks(self.in_flight) {
            for &i in window {
                self.send(queries[i].0, &keys[i].1)?;
            }
            for &i in window {
                let verdict = self.receive(&keys[i].0)?;
                self.cache.insert(keys[i].clone(), verdict);
            }
        }
        Ok(keys.iter().map(|k| self.cache[k]).collect())
    }
}

impl Drop for SubprocessOracle {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_mapping() {
        assert!(parse_response(r#"{"id":"q1","correct":true}"#, "q1").unwrap());
        assert!(!parse_response(r#"{"id":"q1","correct":false}"#, "q1").unwrap());
        assert!(matches!(parse_response(r#"{"id":"q1"}"#, "q1"), Err(Error::Protocol(_))));
        assert!(matches!(parse_response(r#"{"id":"q2","correct":true}"#, "q1"), Err(Error::Protocol(_))));
        assert!(matches!(parse_response("nope", "q1"), Err(Error::Protocol(_))));
    }
}
