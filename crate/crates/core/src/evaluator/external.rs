//! Client for the external pipeline executor.
//!
//! The executor is a child process speaking newline-delimited JSON on its
//! stdin/stdout. The engine sends `{"op":"hello","protocol":1}` first and
//! expects the primitive list back, then one `evaluate` request per line,
//! each answered by exactly one response line carrying the same id.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{EvaluationResult, Evaluator, Status};
use crate::task::{TaskKind, TaskSpec};

pub const PROTOCOL_VERSION: u64 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

/// One entry of a dataset manifest (a JSON array of these).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub path: String,
    pub task: TaskKind,
    pub target_column: String,
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("failed to start executor `{argv}`: {source}")]
    Spawn { argv: String, source: std::io::Error },
    #[error("executor command is empty")]
    EmptyCommand,
    #[error("executor handshake failed: {0}")]
    Handshake(String),
    #[error("executor does not provide primitives: {0}")]
    MissingPrimitives(String),
    #[error("executor connection lost: {0}")]
    Disconnected(String),
}

struct Connection {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Connection {
    fn spawn(argv: &[String]) -> Result<Self, ExecutorError> {
        let (program, args) = argv.split_first().ok_or(ExecutorError::EmptyCommand)?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| ExecutorError::Spawn { argv: argv.join(" "), source })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Connection { child, stdin, lines })
    }

    fn send(&mut self, msg: &Value) -> std::io::Result<()> {
        let mut line = msg.to_string();
        line.push('\n');
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.flush()
    }

    fn recv(&self, timeout: Duration) -> Result<String, RecvTimeoutError> {
        self.lines.recv_timeout(timeout)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

enum Attempt {
    Done(EvaluationResult),
    Lost(String),
}

/// A serial connection to one executor process with a one-retry reconnect
/// policy: if the process dies mid-request it is restarted once and the
/// request resent; a second loss marks the client fatally failed.
pub struct ExecutorClient {
    argv: Vec<String>,
    timeout: Duration,
    seed: u64,
    primitives: Vec<String>,
    conn: Mutex<Option<Connection>>,
    next_id: Mutex<u64>,
    fatal: Mutex<Option<String>>,
}

impl ExecutorClient {
    /// Starts the executor and performs the handshake. When `required` is
    /// nonempty every listed primitive must be offered by the executor.
    pub fn connect(
        argv: Vec<String>,
        required: &[String],
        timeout: Duration,
        seed: u64,
    ) -> Result<Self, ExecutorError> {
        let (conn, primitives) = Self::open(&argv, timeout)?;
        let missing: Vec<&str> = required
            .iter()
            .filter(|r| !primitives.contains(r))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(ExecutorError::MissingPrimitives(missing.join(", ")));
        }
        Ok(ExecutorClient {
            argv,
            timeout,
            seed,
            primitives,
            conn: Mutex::new(Some(conn)),
            next_id: Mutex::new(1),
            fatal: Mutex::new(None),
        })
    }

    fn open(argv: &[String], timeout: Duration) -> Result<(Connection, Vec<String>), ExecutorError> {
        let mut conn = Connection::spawn(argv)?;
        conn.send(&json!({"op": "hello", "protocol": PROTOCOL_VERSION}))
            .map_err(|e| ExecutorError::Handshake(e.to_string()))?;
        let line = conn
            .recv(timeout)
            .map_err(|e| ExecutorError::Handshake(format!("no hello reply: {e}")))?;
        let reply: Value = serde_json::from_str(&line)
            .map_err(|e| ExecutorError::Handshake(format!("malformed hello reply: {e}")))?;
        if reply["op"] != "hello" || reply["protocol"] != PROTOCOL_VERSION {
            return Err(ExecutorError::Handshake(format!("unexpected reply {line}")));
        }
        let primitives = reply["primitives"]
            .as_array()
            .ok_or_else(|| ExecutorError::Handshake("hello reply lacks primitives".into()))?
            .iter()
            .filter_map(|v| v.as_str().map(String::from))
            .collect();
        Ok((conn, primitives))
    }

    pub fn primitives(&self) -> &[String] {
        &self.primitives
    }

    pub fn fatal_error(&self) -> Option<String> {
        self.fatal.lock().expect("fatal lock").clone()
    }

    /// Sends one evaluate request and maps the response into `e`.
    pub fn evaluate(
        &self,
        pipeline: &[String],
        dataset: &DatasetEntry,
        task: TaskSpec,
    ) -> EvaluationResult {
        let started = Instant::now();
        if let Some(msg) = self.fatal_error() {
            return EvaluationResult::error(msg);
        }
        let id = {
            let mut next = self.next_id.lock().expect("id lock");
            let id = *next;
            *next += 1;
            id
        };
        let request = json!({
            "id": id,
            "op": "evaluate",
            "pipeline": pipeline,
            "dataset": dataset.path,
            "target_column": dataset.target_column,
            "task": task.kind_str(),
            "metric": task.metric_str(),
            "seed": self.seed,
        });

        let mut conn = self.conn.lock().expect("connection lock");
        let mut result = None;
        for attempt in 0..2 {
            if conn.is_none() {
                match Self::open(&self.argv, self.timeout) {
                    Ok((c, _)) => *conn = Some(c),
                    Err(e) => {
                        result = Some(Attempt::Lost(e.to_string()));
                        break;
                    }
                }
            }
            let c = conn.as_mut().expect("connected");
            match self.round_trip(c, id, &request) {
                Attempt::Lost(msg) => {
                    *conn = None;
                    result = Some(Attempt::Lost(msg));
                    if attempt == 0 {
                        continue;
                    }
                }
                done => result = Some(done),
            }
            break;
        }
        let mut out = match result.expect("at least one attempt") {
            Attempt::Done(r) => r,
            Attempt::Lost(msg) => {
                let msg = format!("executor failed after retry: {msg}");
                *self.fatal.lock().expect("fatal lock") = Some(msg.clone());
                EvaluationResult::error(msg)
            }
        };
        out.wall_time = started.elapsed();
        out
    }

    fn round_trip(&self, conn: &mut Connection, id: u64, request: &Value) -> Attempt {
        if let Err(e) = conn.send(request) {
            return Attempt::Lost(e.to_string());
        }
        let line = match conn.recv(self.timeout) {
            Ok(line) => line,
            Err(RecvTimeoutError::Timeout) => {
                // A late reply would desynchronize ids; drop the process.
                let _ = conn.child.kill();
                return Attempt::Done(EvaluationResult::error(format!(
                    "timeout after {:.1} s",
                    self.timeout.as_secs_f64()
                )));
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Attempt::Lost("executor closed its output".into())
            }
        };
        Attempt::Done(parse_response(&line, id))
    }
}

fn parse_response(line: &str, id: u64) -> EvaluationResult {
    let Ok(v) = serde_json::from_str::<Value>(line) else {
        return EvaluationResult::error(format!("malformed response line: {line}"));
    };
    if v["id"].as_u64() != Some(id) {
        return EvaluationResult::error(format!("response id mismatch: {line}"));
    }
    match v["status"].as_str() {
        Some("ok") => match v["score"].as_f64() {
            Some(s) if s.is_finite() => EvaluationResult::ok(s),
            _ => EvaluationResult::error(format!("ok response without a finite score: {line}")),
        },
        Some("invalid_pipeline") => EvaluationResult::invalid(),
        Some("error") => EvaluationResult {
            status: Status::ExecutorError(v["message"].as_str().unwrap_or("error").to_string()),
            ..EvaluationResult::error("")
        },
        _ => EvaluationResult::error(format!("unknown status in response: {line}")),
    }
}

/// Sends one request through `client` for `pipeline` on `dataset`.
pub fn evaluate_external(
    client: &ExecutorClient,
    pipeline: &[String],
    dataset: &DatasetEntry,
    task: TaskSpec,
) -> EvaluationResult {
    client.evaluate(pipeline, dataset, task)
}

/// An [`Evaluator`] bound to one dataset of the manifest.
pub struct ExternalEvaluator {
    client: std::sync::Arc<ExecutorClient>,
    dataset: DatasetEntry,
    task: TaskSpec,
}

impl ExternalEvaluator {
    pub fn new(client: std::sync::Arc<ExecutorClient>, dataset: DatasetEntry) -> Self {
        let task = TaskSpec::new(dataset.task);
        ExternalEvaluator { client, dataset, task }
    }
}

impl Evaluator for ExternalEvaluator {
    fn identity(&self) -> String {
        format!("external:{}", self.dataset.path)
    }

    fn evaluate(&self, pipeline: &[String]) -> EvaluationResult {
        self.client.evaluate(pipeline, &self.dataset, self.task)
    }

    fn fatal_error(&self) -> Option<String> {
        self.client.fatal_error()
    }
}
