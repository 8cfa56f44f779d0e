//! Adapter for environments running in a child process.
//!
//! Requests and replies are single JSON objects on their own `\n`-terminated
//! lines over the child's stdin/stdout:
//!
//! ```text
//! -> {"id": 1, "cmd": "reset", "spec": {...}}
//! <- {"id": 1, "observation": "...", "done": false, "success": false, "score": 0}
//! -> {"id": 2, "cmd": "step", "action": "go to shelf 1"}
//! <- {"id": 2, ...}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{EnvError, Environment, StepResult, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchSpec {
    pub program: String,
    pub args: Vec<String>,
    /// Environment name reported in trajectory metadata.
    pub env_name: String,
    pub timeout: Duration,
}

impl LaunchSpec {
    pub fn new(program: impl Into<String>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
            env_name: "external".to_string(),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn arg(mut self, a: impl Into<String>) -> Self {
        self.args.push(a.into());
        self
    }

    pub fn timeout(mut self, t: Duration) -> Self {
        self.timeout = t;
        self
    }
}

/// One matched request/reply pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolExchange {
    pub request_id: u64,
    pub reply_id: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Reply {
    id: u64,
    observation: String,
    done: bool,
    success: bool,
    score: f64,
}

#[derive(Debug)]
pub struct ExternalEnv {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    env_name: String,
    timeout: Duration,
    next_id: u64,
    done: bool,
    answered_any: bool,
    log: Vec<ProtocolExchange>,
}

/// Spawns the child and wires up the line protocol. The handshake completes
/// with the first successful reply.
pub fn connect_external(launch: &LaunchSpec) -> Result<ExternalEnv, EnvError> {
    let mut child = Command::new(&launch.program)
        .args(&launch.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| EnvError::Handshake(format!("spawning `{}`: {e}", launch.program)))?;
    let stdin = child.stdin.take().expect("stdin is piped");
    let stdout = child.stdout.take().expect("stdout is piped");

    let (tx, rx) = mpsc::channel();
    thread::Builder::new()
        .name("exprag-external-env".into())
        .spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        })?;

    Ok(ExternalEnv {
        child,
        stdin,
        lines: rx,
        env_name: launch.env_name.clone(),
        timeout: launch.timeout,
        next_id: 1,
        done: false,
        answered_any: false,
        log: Vec::new(),
    })
}

impl ExternalEnv {
    pub fn protocol_log(&self) -> &[ProtocolExchange] {
        &self.log
    }

    fn request(&mut self, body: serde_json::Value) -> Result<StepResult, EnvError> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&body).expect("request serializes");
        line.push('\n');
        if let Err(e) = self
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
        {
            return Err(if self.answered_any {
                EnvError::Io(e)
            } else {
                EnvError::Handshake(format!("writing first request: {e}"))
            });
        }

        let raw = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(raw)) => raw,
            Ok(Err(e)) => return Err(EnvError::Io(e)),
            Err(RecvTimeoutError::Timeout) => return Err(EnvError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) if !self.answered_any => {
                return Err(EnvError::Handshake(
                    "child closed stdout before replying".into(),
                ))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(EnvError::Protocol {
                    reason: "child closed stdout".into(),
                    raw: String::new(),
                })
            }
        };
        let reply: Reply = serde_json::from_str(&raw).map_err(|e| EnvError::Protocol {
            reason: e.to_string(),
            raw: raw.clone(),
        })?;
        if reply.id != id {
            return Err(EnvError::Protocol {
                reason: format!("reply id {} does not match request id {id}", reply.id),
                raw,
            });
        }
        self.answered_any = true;
        self.log.push(ProtocolExchange {
            request_id: id,
            reply_id: reply.id,
        });
        Ok(StepResult {
            observation: reply.observation,
            done: reply.done,
            success: reply.success,
            score: reply.score,
        })
    }
}

impl Environment for ExternalEnv {
    fn name(&self) -> &str {
        &self.env_name
    }

    fn reset(&mut self, spec: &TaskSpec) -> Result<String, EnvError> {
        let id = self.next_id;
        let r = self.request(json!({ "id": id, "cmd": "reset", "spec": spec }))?;
        self.done = r.done;
        Ok(r.observation)
    }

    fn step(&mut self, action: &str) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let id = self.next_id;
        let r = self.request(json!({ "id": id, "cmd": "step", "action": action }))?;
        self.done = r.done;
        Ok(r)
    }
}

impl Drop for ExternalEnv {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
