use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use wait_timeout::ChildExt;

use super::protocol::encode;
use super::{Example, FromHarness, HarnessError, HarnessIo, HarnessProgram, LaunchOptions, Prediction, TaskConfig, ToHarness};

/// Where a harness process's standard error goes.
#[derive(Clone, Default)]
pub enum StderrSink {
    #[default]
    Discard,
    File(PathBuf),
    Memory(Arc<Mutex<Vec<u8>>>),
}

/// A harness running as a child process speaking the line protocol.
pub struct SubprocessHarness {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<io::Result<String>>,
    op_timeout: Duration,
    deadline: Option<Instant>,
    stderr_pump: Option<JoinHandle<()>>,
}

fn resolve_program(program: &str, dir: &Path) -> PathBuf {
    let p = Path::new(program);
    if p.is_relative() && p.components().count() > 1 {
        dir.join(p)
    } else {
        p.to_path_buf()
    }
}

impl SubprocessHarness {
    /// Run `entry` with `dir` as working directory.
    pub fn spawn(entry: &[String], dir: &Path, options: LaunchOptions) -> Result<Self, HarnessError> {
        let (program, args) = entry.split_first().ok_or_else(|| HarnessError::Spawn("empty entry".into()))?;
        let mut child = Command::new(resolve_program(program, dir))
            .args(args)
            .current_dir(dir)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(match options.stderr {
                StderrSink::Discard => Stdio::null(),
                _ => Stdio::piped(),
            })
            .spawn()
            .map_err(|e| HarnessError::Spawn(format!("{program}: {e}")))?;

        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let stderr_pump = match (&options.stderr, child.stderr.take()) {
            (StderrSink::File(path), Some(mut err)) => {
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| HarnessError::Spawn(e.to_string()))?;
                }
                let mut file = File::create(path).map_err(|e| HarnessError::Spawn(format!("{}: {e}", path.display())))?;
                Some(thread::spawn(move || {
                    let _ = io::copy(&mut err, &mut file);
                }))
            }
            (StderrSink::Memory(buf), Some(mut err)) => {
                let buf = Arc::clone(buf);
                Some(thread::spawn(move || {
                    let mut chunk = [0u8; 4096];
                    while let Ok(n) = err.read(&mut chunk) {
                        if n == 0 {
                            break;
                        }
                        buf.lock().expect("stderr buffer").extend_from_slice(&chunk[..n]);
                    }
                }))
            }
            _ => None,
        };

        let stdin = child.stdin.take();
        Ok(Self { child, stdin, lines, op_timeout: options.op_timeout, deadline: options.deadline, stderr_pump })
    }

    fn exit_status(&mut self) -> String {
        match self.child.wait_timeout(Duration::from_millis(500)) {
            Ok(Some(status)) => status.to_string(),
            _ => "still running".into(),
        }
    }

    fn send(&mut self, op: &'static str, message: &ToHarness) -> Result<(), HarnessError> {
        let Some(stdin) = self.stdin.as_mut() else {
            return Err(HarnessError::Exited { op, status: "stdin closed".into() });
        };
        let sent = stdin.write_all(encode(message).as_bytes()).and_then(|_| stdin.flush());
        if sent.is_err() {
            let status = self.exit_status();
            return Err(HarnessError::Exited { op, status });
        }
        Ok(())
    }

    fn receive(&mut self, op: &'static str, started: Instant) -> Result<FromHarness, HarnessError> {
        loop {
            let mut until = started + self.op_timeout;
            if let Some(deadline) = self.deadline {
                until = until.min(deadline);
            }
            let wait = until.saturating_duration_since(Instant::now());
            let line = match self.lines.recv_timeout(wait) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(HarnessError::Malformed(format!("unreadable output: {e}"))),
                Err(RecvTimeoutError::Timeout) => return Err(HarnessError::Timeout { op }),
                Err(RecvTimeoutError::Disconnected) => {
                    let status = self.exit_status();
                    return Err(HarnessError::Exited { op, status });
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            return serde_json::from_str(&line).map_err(|e| HarnessError::Malformed(format!("{e}: {line:.200}")));
        }
    }

    fn exchange_until(
        &mut self,
        op: &'static str,
        message: &ToHarness,
        io: &mut dyn HarnessIo,
    ) -> Result<FromHarness, HarnessError> {
        let started = Instant::now();
        self.send(op, message)?;
        loop {
            match self.receive(op, started)? {
                FromHarness::State { payload } => io.state(&payload)?,
                FromHarness::Llm { request_id, messages, max_output_tokens, temperature } => {
                    let response = io.complete(messages, max_output_tokens, temperature)?;
                    self.send(
                        op,
                        &ToHarness::LlmResult {
                            request_id,
                            content: response.content,
                            prompt_tokens: response.prompt_tokens,
                            completion_tokens: response.completion_tokens,
                        },
                    )?;
                }
                FromHarness::Error { message } => return Err(HarnessError::Reported(message)),
                other => return Ok(other),
            }
        }
    }
}

struct NoIo;

impl HarnessIo for NoIo {
    fn complete(&mut self, _: Vec<crate::llm::ChatMessage>, _: u32, _: f64) -> Result<crate::llm::LlmResponse, HarnessError> {
        Err(HarnessError::Lifecycle("model calls are only allowed during predict".into()))
    }

    fn state(&mut self, _: &str) -> Result<(), HarnessError> {
        Ok(())
    }
}

impl HarnessProgram for SubprocessHarness {
    fn init(&mut self, config: &TaskConfig) -> Result<(), HarnessError> {
        match self.exchange_until("init", &ToHarness::Init { task_config: config.clone() }, &mut NoIo)? {
            FromHarness::Ready {} => Ok(()),
            other => Err(HarnessError::Unexpected { expected: "ready", got: other.kind().into() }),
        }
    }

    fn learn(&mut self, example: &Example, io: &mut dyn HarnessIo) -> Result<(), HarnessError> {
        match self.exchange_until("learn", &ToHarness::Learn { example: example.clone() }, io)? {
            FromHarness::Ack {} => Ok(()),
            other => Err(HarnessError::Unexpected { expected: "ack", got: other.kind().into() }),
        }
    }

    fn predict(&mut self, query: &Example, io: &mut dyn HarnessIo) -> Result<Prediction, HarnessError> {
        let message = ToHarness::Predict { query: query.clone(), query_id: query.example_id.clone() };
        match self.exchange_until("predict", &message, io)? {
            FromHarness::Prediction { query_id, label, aux } => Ok(Prediction { example_id: query_id, label, aux }),
            other => Err(HarnessError::Unexpected { expected: "prediction", got: other.kind().into() }),
        }
    }

    fn shutdown(&mut self) -> Result<(), HarnessError> {
        let _ = self.send("shutdown", &ToHarness::Shutdown {});
        self.stdin.take();
        match self.child.wait_timeout(Duration::from_secs(5)) {
            Ok(Some(_)) => Ok(()),
            _ => {
                let _ = self.child.kill();
                let _ = self.child.wait();
                Ok(())
            }
        }
    }
}

impl Drop for SubprocessHarness {
    fn drop(&mut self) {
        self.stdin.take();
        if !matches!(self.child.try_wait(), Ok(Some(_))) {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
        // a grandchild may keep the pipe open; give the pump a bounded grace period
        if let Some(pump) = self.stderr_pump.take() {
            let until = Instant::now() + Duration::from_secs(1);
            while !pump.is_finished() && Instant::now() < until {
                thread::sleep(Duration::from_millis(5));
            }
            if pump.is_finished() {
                let _ = pump.join();
            }
        }
    }
}
