//! Subprocess adapter for external simulators speaking the line-delimited
//! protocol.
//!
//! Wire protocol (UTF-8, one JSON document per line):
//!
//! - on startup the child emits a handshake
//!   `{"protocol": "bae-model/1", "input_dim": d, "output_dim": m}`;
//! - each request is `{"id": <int>, "k": [<float>...]}`;
//! - each reply is `{"id": <int>, "y": [<float>...]}` or
//!   `{"id": <int>, "error": "<string>"}`.
//!
//! One request is in flight per child process; parallel evaluation comes from
//! a pool of children. A child that times out, dies, or violates the protocol
//! is discarded and replaced lazily.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::{check_input, ForwardModel, ModelRunFailure, ObservationVector, ParameterVector};

pub const PROTOCOL: &str = "bae-model/1";

/// How to launch and talk to an external simulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalModelSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
    /// Maximum number of concurrently running child processes.
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
}

fn default_timeout_s() -> u64 {
    300
}

fn default_pool_size() -> usize {
    1
}

#[derive(Serialize)]
struct Request<'a> {
    id: u64,
    k: &'a [f64],
}

#[derive(Deserialize)]
struct Reply {
    id: u64,
    #[serde(default)]
    y: Option<Vec<f64>>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Deserialize)]
struct Handshake {
    protocol: String,
    input_dim: usize,
    output_dim: usize,
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Worker {
    fn spawn(spec: &ExternalModelSpec) -> Result<(Self, Handshake), ModelRunFailure> {
        let mut child = Command::new(&spec.command)
            .args(&spec.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ModelRunFailure::ProcessDied(format!("spawn failed: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, lines) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        let mut worker = Worker {
            child,
            stdin,
            lines,
        };
        let line = worker.read_line(Duration::from_secs(spec.timeout_s))?;
        let handshake: Handshake = serde_json::from_str(line.trim()).map_err(|e| {
            ModelRunFailure::ProtocolViolation(format!("bad handshake: {e}: {line:?}"))
        })?;
        if handshake.protocol != PROTOCOL {
            return Err(ModelRunFailure::ProtocolViolation(format!(
                "unsupported protocol {:?}",
                handshake.protocol
            )));
        }
        Ok((worker, handshake))
    }

    fn read_line(&mut self, timeout: Duration) -> Result<String, ModelRunFailure> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(ModelRunFailure::ProcessDied(format!("read error: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(ModelRunFailure::Timeout {
                seconds: timeout.as_secs(),
            }),
            Err(RecvTimeoutError::Disconnected) => Err(ModelRunFailure::ProcessDied(
                "stdout closed".to_string(),
            )),
        }
    }

    fn call(
        &mut self,
        id: u64,
        k: &[f64],
        timeout: Duration,
        output_dim: usize,
    ) -> Result<ObservationVector, ModelRunFailure> {
        let request = serde_json::to_string(&Request { id, k }).expect("request serializes");
        self.stdin
            .write_all(request.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush())
            .map_err(|e| ModelRunFailure::ProcessDied(format!("write failed: {e}")))?;
        let line = self.read_line(timeout)?;
        let reply: Reply = serde_json::from_str(line.trim()).map_err(|e| {
            ModelRunFailure::ProtocolViolation(format!("malformed reply: {e}: {line:?}"))
        })?;
        if reply.id != id {
            return Err(ModelRunFailure::ProtocolViolation(format!(
                "reply id {} does not match request id {id}",
                reply.id
            )));
        }
        if let Some(message) = reply.error {
            return Err(ModelRunFailure::SimulatorError(message));
        }
        let y = reply.y.ok_or_else(|| {
            ModelRunFailure::ProtocolViolation("reply carries neither y nor error".to_string())
        })?;
        if y.len() != output_dim {
            return Err(ModelRunFailure::ProtocolViolation(format!(
                "reply length {} does not match output_dim {output_dim}",
                y.len()
            )));
        }
        Ok(ObservationVector::from_vec(y))
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct PoolState {
    idle: VecDeque<Worker>,
    running: usize,
}

/// Forward model backed by a pool of external simulator processes.
pub struct ExternalModel {
    spec: ExternalModelSpec,
    input_dim: usize,
    output_dim: usize,
    pool: Mutex<PoolState>,
    available: Condvar,
    next_id: AtomicU64,
}

impl ExternalModel {
    /// Launch one child eagerly to learn the model dimensions from its
    /// handshake.
    pub fn connect(spec: ExternalModelSpec) -> Result<Self, ModelRunFailure> {
        let (worker, handshake) = Worker::spawn(&spec)?;
        let mut idle = VecDeque::new();
        idle.push_back(worker);
        Ok(ExternalModel {
            spec,
            input_dim: handshake.input_dim,
            output_dim: handshake.output_dim,
            pool: Mutex::new(PoolState { idle, running: 1 }),
            available: Condvar::new(),
            next_id: AtomicU64::new(1),
        })
    }

    fn checkout(&self) -> Result<Worker, ModelRunFailure> {
        let mut state = self.pool.lock().expect("pool lock");
        loop {
            if let Some(worker) = state.idle.pop_front() {
                return Ok(worker);
            }
            if state.running < self.spec.pool_size.max(1) {
                state.running += 1;
                drop(state);
                match Worker::spawn(&self.spec) {
                    Ok((worker, handshake)) => {
                        if handshake.input_dim != self.input_dim
                            || handshake.output_dim != self.output_dim
                        {
                            self.forget_worker();
                            return Err(ModelRunFailure::ProtocolViolation(
                                "handshake dimensions changed between processes".to_string(),
                            ));
                        }
                        return Ok(worker);
                    }
                    Err(e) => {
                        self.forget_worker();
                        return Err(e);
                    }
                }
            }
            state = self.available.wait(state).expect("pool lock");
        }
    }

    fn checkin(&self, worker: Worker) {
        let mut state = self.pool.lock().expect("pool lock");
        state.idle.push_back(worker);
        drop(state);
        self.available.notify_one();
    }

    fn forget_worker(&self) {
        let mut state = self.pool.lock().expect("pool lock");
        state.running -= 1;
        drop(state);
        self.available.notify_one();
    }
}

impl ForwardModel for ExternalModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn evaluate(&self, k: &ParameterVector) -> Result<ObservationVector, ModelRunFailure> {
        check_input(self, k)?;
        let mut worker = self.checkout()?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let timeout = Duration::from_secs(self.spec.timeout_s);
        let result = worker.call(id, k.as_slice(), timeout, self.output_dim);
        match &result {
            // A simulator-reported error leaves the process healthy; protocol
            // or process trouble discards it.
            Ok(_) | Err(ModelRunFailure::SimulatorError(_)) => self.checkin(worker),
            Err(_) => {
                drop(worker);
                self.forget_worker();
            }
        }
        result
    }
}
