//! Out-of-process trainers speaking newline-delimited JSON.
//!
//! One worker process handles one evaluation. The tuner writes a single
//! request line to the worker's stdin and closes it:
//!
//! ```text
//! {"eval_id": 3, "learning_rate": 0.05, "epochs": 10, "seed": 42}
//! ```
//!
//! The worker answers on stdout with one record per epoch followed by a
//! terminal record, then exits:
//!
//! ```text
//! {"eval_id": 3, "epoch": 1, "loss": 2.31, "accuracy": 11.2}
//! {"eval_id": 3, "done": true, "diverged": false}
//! ```
//!
//! Non-finite losses (including the `NaN` / `Infinity` tokens some JSON
//! encoders emit, or `null`) mark the trace as diverged.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{EvalError, EvalTrace, TraceBuilder};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3600);

/// Program and arguments of a worker, plus the wall-clock limit for one
/// evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    DEFAULT_TIMEOUT.as_secs()
}

impl ExternalCommand {
    pub fn new(program: impl Into<String>, args: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            program: program.into(),
            args: args.into_iter().map(Into::into).collect(),
            timeout_secs: default_timeout_secs(),
        }
    }

    /// Splits a shell-style command line (`python3 worker.py --layers 3`).
    pub fn parse(command_line: &str) -> Option<Self> {
        let mut words = shell_split(command_line)?.into_iter();
        let program = words.next()?;
        Some(Self::new(program, words))
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout_secs = timeout.as_secs().max(1);
        self
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

fn shell_split(line: &str) -> Option<Vec<String>> {
    let words = shlex::split(line)?;
    (!words.is_empty()).then_some(words)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub eval_id: u64,
    pub learning_rate: f64,
    pub epochs: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub eval_id: u64,
    pub epoch: u64,
    pub loss: Option<f64>,
    #[serde(default)]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminalRecord {
    pub eval_id: u64,
    pub done: bool,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WorkerRecord {
    Epoch(EpochRecord),
    Terminal(TerminalRecord),
}

/// Parses one stdout line from a worker.
pub fn parse_record(line: &str) -> Result<WorkerRecord, String> {
    let cleaned = replace_non_finite_tokens(line);
    let value: serde_json::Value = serde_json::from_str(&cleaned).map_err(|e| e.to_string())?;
    if value.get("done").is_some() {
        serde_json::from_value(value)
            .map(WorkerRecord::Terminal)
            .map_err(|e| e.to_string())
    } else {
        serde_json::from_value(value)
            .map(WorkerRecord::Epoch)
            .map_err(|e| e.to_string())
    }
}

/// `NaN`, `Infinity` and `-Infinity` are not JSON; read them as `null`.
fn replace_non_finite_tokens(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = line;
    while let Some(ch) = rest.chars().next() {
        if in_string {
            out.push(ch);
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
            rest = &rest[ch.len_utf8()..];
            continue;
        }
        if ch == '"' {
            in_string = true;
        } else if let Some(token) = ["-Infinity", "Infinity", "NaN"]
            .iter()
            .find(|t| rest.starts_with(**t))
        {
            out.push_str("null");
            rest = &rest[token.len()..];
            continue;
        }
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExternalErrorKind {
    #[error("could not start worker: {0}")]
    Spawn(String),
    #[error("i/o error talking to worker: {0}")]
    Io(String),
    #[error("malformed record on line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("worker exited before the terminal record ({status})")]
    PrematureExit { status: String },
    #[error("worker exceeded the {0:?} timeout")]
    Timeout(Duration),
}

/// A failed external evaluation with the epochs received before the failure.
/// The partial trace is always flagged as diverged.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{kind}{}", stderr_suffix(.stderr))]
pub struct ExternalError {
    pub kind: ExternalErrorKind,
    pub partial: Box<EvalTrace>,
    pub stderr: String,
}

fn stderr_suffix(stderr: &str) -> String {
    let tail = stderr.trim();
    if tail.is_empty() {
        String::new()
    } else {
        let start = tail.len().saturating_sub(400);
        let start = (start..tail.len())
            .find(|&i| tail.is_char_boundary(i))
            .unwrap_or(0);
        format!("; worker stderr: {}", &tail[start..])
    }
}

impl From<ExternalError> for EvalError {
    fn from(err: ExternalError) -> Self {
        EvalError {
            message: err.to_string(),
            partial: Some(err.partial),
        }
    }
}

struct Session {
    child: Child,
    lines: mpsc::Receiver<std::io::Result<String>>,
    stderr: mpsc::Receiver<String>,
}

/// How long to wait for stderr to close once a worker has exited or been
/// killed; grandchildren may keep the pipe open.
const STDERR_GRACE: Duration = Duration::from_millis(500);

impl Session {
    fn collect_stderr(&mut self) -> String {
        self.stderr.recv_timeout(STDERR_GRACE).unwrap_or_default()
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start(command: &ExternalCommand, request: &EvalRequest) -> Result<Session, ExternalErrorKind> {
    let mut child = Command::new(&command.program)
        .args(&command.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| ExternalErrorKind::Spawn(format!("{}: {e}", command.program)))?;

    let mut line = serde_json::to_string(request).expect("request serializes");
    line.push('\n');
    let mut stdin = child.stdin.take().expect("stdin is piped");
    // A worker that exits without reading its request shows up as a broken
    // pipe here; its output still decides the outcome.
    let _ = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush());
    drop(stdin);

    let stdout = child.stdout.take().expect("stdout is piped");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let mut stderr_pipe = child.stderr.take().expect("stderr is piped");
    let (err_tx, err_rx) = mpsc::channel();
    thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr_pipe.read_to_string(&mut buf);
        let _ = err_tx.send(buf);
    });
    Ok(Session {
        child,
        lines: rx,
        stderr: err_rx,
    })
}

/// Runs one evaluation in a fresh worker process.
pub fn evaluate_external(
    lr: f64,
    epochs: usize,
    eval_id: u64,
    seed: u64,
    command: &ExternalCommand,
) -> Result<EvalTrace, ExternalError> {
    let request = EvalRequest {
        eval_id,
        learning_rate: lr,
        epochs: epochs as u64,
        seed,
    };
    let mut trace = TraceBuilder::new(lr);
    let fail = |kind, mut trace: TraceBuilder, stderr: String| {
        trace.mark_diverged();
        Err(ExternalError {
            kind,
            partial: Box::new(trace.finish()),
            stderr,
        })
    };

    let mut session = match start(command, &request) {
        Ok(s) => s,
        Err(kind) => return fail(kind, trace, String::new()),
    };
    let deadline = Instant::now() + command.timeout();
    let mut line_no = 0usize;
    let mut next_epoch = 1u64;
    loop {
        let remaining = deadline.saturating_duration_since(Instant::now());
        let line = match session.lines.recv_timeout(remaining) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => {
                session.kill();
                let stderr = session.collect_stderr();
                return fail(ExternalErrorKind::Io(e.to_string()), trace, stderr);
            }
            Err(RecvTimeoutError::Timeout) => {
                session.kill();
                let stderr = session.collect_stderr();
                return fail(ExternalErrorKind::Timeout(command.timeout()), trace, stderr);
            }
            Err(RecvTimeoutError::Disconnected) => {
                let status = session
                    .child
                    .wait()
                    .map(|s| s.to_string())
                    .unwrap_or_else(|e| e.to_string());
                let stderr = session.collect_stderr();
                return fail(ExternalErrorKind::PrematureExit { status }, trace, stderr);
            }
        };
        line_no += 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |detail: String| ExternalErrorKind::Malformed {
            line: line_no,
            detail,
        };
        let record = match parse_record(&line) {
            Ok(r) => r,
            Err(detail) => {
                session.kill();
                let stderr = session.collect_stderr();
                return fail(malformed(detail), trace, stderr);
            }
        };
        let id = match &record {
            WorkerRecord::Epoch(r) => r.eval_id,
            WorkerRecord::Terminal(r) => r.eval_id,
        };
        if id != eval_id {
            session.kill();
            let stderr = session.collect_stderr();
            return fail(
                malformed(format!("eval_id {id} does not match request {eval_id}")),
                trace,
                stderr,
            );
        }
        match record {
            WorkerRecord::Epoch(r) => {
                if r.epoch != next_epoch || r.epoch > epochs as u64 {
                    session.kill();
                    let stderr = session.collect_stderr();
                    let detail = format!("expected epoch {next_epoch} of {epochs}, got {}", r.epoch);
                    return fail(malformed(detail), trace, stderr);
                }
                next_epoch += 1;
                trace.record(r.loss.unwrap_or(f64::NAN), r.accuracy);
            }
            WorkerRecord::Terminal(r) => {
                if !r.done {
                    session.kill();
                    let stderr = session.collect_stderr();
                    return fail(
                        malformed("terminal record with done = false".into()),
                        trace,
                        stderr,
                    );
                }
                if r.diverged {
                    trace.mark_diverged();
                }
                let received = next_epoch - 1;
                if !trace.is_diverged() && received != epochs as u64 {
                    session.kill();
                    let stderr = session.collect_stderr();
                    let detail = format!("{received} of {epochs} epochs before the terminal record");
                    return fail(malformed(detail), trace, stderr);
                }
                finish_worker(&mut session, deadline);
                return Ok(trace.finish());
            }
        }
    }
}

/// Gives the worker until the deadline to exit after its terminal record.
fn finish_worker(session: &mut Session, deadline: Instant) {
    loop {
        match session.child.try_wait() {
            Ok(Some(_)) => break,
            Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(2)),
            _ => {
                session.kill();
                break;
            }
        }
    }
    session.collect_stderr();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_record_kinds() {
        let e = parse_record(r#"{"eval_id": 2, "epoch": 1, "loss": 0.5, "accuracy": null}"#).unwrap();
        assert_eq!(
            e,
            WorkerRecord::Epoch(EpochRecord {
                eval_id: 2,
                epoch: 1,
                loss: Some(0.5),
                accuracy: None
            })
        );
        let t = parse_record(r#"{"eval_id": 2, "done": true, "diverged": false}"#).unwrap();
        assert_eq!(
            t,
            WorkerRecord::Terminal(TerminalRecord {
                eval_id: 2,
                done: true,
                diverged: false
            })
        );
        assert!(parse_record("{not json").is_err());
        assert!(parse_record(r#"{"eval_id": 1, "done": true}"#).is_err());
    }

    #[test]
    fn non_finite_tokens_become_null() {
        for token in ["NaN", "Infinity", "-Infinity"] {
            let line = format!(r#"{{"eval_id": 1, "epoch": 1, "loss": {token}}}"#);
            match parse_record(&line).unwrap() {
                WorkerRecord::Epoch(r) => assert_eq!(r.loss, None),
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(replace_non_finite_tokens(r#"{"a": "NaN"}"#), r#"{"a": "NaN"}"#);
    }

    #[test]
    fn request_wire_format() {
        let r = EvalRequest {
            eval_id: 3,
            learning_rate: 0.05,
            epochs: 10,
            seed: 42,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"eval_id":3,"learning_rate":0.05,"epochs":10,"seed":42}"#
        );
    }

    #[test]
    fn command_line_parsing() {
        let c = ExternalCommand::parse("python3 'my worker.py' --layers 3").unwrap();
        assert_eq!(c.program, "python3");
        assert_eq!(c.args, vec!["my worker.py", "--layers", "3"]);
        assert!(ExternalCommand::parse("   ").is_none());
    }

    #[test]
    fn missing_program_is_a_spawn_error() {
        let cmd = ExternalCommand::new("/nonexistent/worker-binary", Vec::<String>::new());
        let err = evaluate_external(0.1, 3, 1, 0, &cmd).unwrap_err();
        assert!(matches!(err.kind, ExternalErrorKind::Spawn(_)));
        assert!(err.partial.diverged());
    }
}
