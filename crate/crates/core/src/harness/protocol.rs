//! Line-delimited JSON messages between orchestrator and harness process,
//! and a server that exposes any [`HarnessProgram`] over them.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Example, HarnessError, HarnessIo, HarnessProgram, TaskConfig};
use crate::llm::{ChatMessage, LlmResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ToHarness {
    Init {
        task_config: TaskConfig,
    },
    Learn {
        example: Example,
    },
    Predict {
        query: Example,
        query_id: String,
    },
    LlmResult {
        request_id: String,
        content: String,
        prompt_tokens: u64,
        completion_tokens: u64,
    },
    Shutdown {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FromHarness {
    Ready {},
    Ack {},
    Llm {
        request_id: String,
        messages: Vec<ChatMessage>,
        max_output_tokens: u32,
        #[serde(default)]
        temperature: f64,
    },
    Prediction {
        query_id: String,
        label: String,
        #[serde(default)]
        aux: Option<serde_json::Value>,
    },
    State {
        payload: String,
    },
    Error {
        message: String,
    },
}

impl FromHarness {
    pub fn kind(&self) -> &'static str {
        match self {
            FromHarness::Ready {} => "ready",
            FromHarness::Ack {} => "ack",
            FromHarness::Llm { .. } => "llm",
            FromHarness::Prediction { .. } => "prediction",
            FromHarness::State { .. } => "state",
            FromHarness::Error { .. } => "error",
        }
    }
}

pub(crate) fn encode<T: Serialize>(message: &T) -> String {
    let mut line = serde_json::to_string(message).expect("protocol messages serialize");
    line.push('\n');
    line
}

struct Wire<'a, R, W> {
    input: &'a mut R,
    output: &'a mut W,
    next_request: u64,
}

impl<R: BufRead, W: Write> Wire<'_, R, W> {
    fn send(&mut self, message: &FromHarness) -> Result<(), HarnessError> {
        self.output
            .write_all(encode(message).as_bytes())
            .and_then(|_| self.output.flush())
            .map_err(|e| HarnessError::Failed(e.to_string()))
    }

    fn receive(&mut self) -> Result<Option<ToHarness>, HarnessError> {
        let mut line = String::new();
        loop {
            line.clear();
            let n = self.input.read_line(&mut line).map_err(|e| HarnessError::Failed(e.to_string()))?;
            if n == 0 {
                return Ok(None);
            }
            if !line.trim().is_empty() {
                break;
            }
        }
        serde_json::from_str(line.trim_end()).map(Some).map_err(|e| HarnessError::Malformed(e.to_string()))
    }
}

impl<R: BufRead, W: Write> HarnessIo for Wire<'_, R, W> {
    fn complete(
        &mut self,
        messages: Vec<ChatMessage>,
        max_output_tokens: u32,
        temperature: f64,
    ) -> Result<LlmResponse, HarnessError> {
        self.next_request += 1;
        let request_id = format!("r{}", self.next_request);
        self.send(&FromHarness::Llm { request_id: request_id.clone(), messages, max_output_tokens, temperature })?;
        match self.receive()? {
            Some(ToHarness::LlmResult { request_id: got, content, prompt_tokens, completion_tokens }) if got == request_id => {
                Ok(LlmResponse { content, prompt_tokens, completion_tokens, backend_id: "orchestrator".into() })
            }
            other => Err(HarnessError::Unexpected { expected: "llm_result", got: format!("{other:?}") }),
        }
    }

    fn state(&mut self, payload: &str) -> Result<(), HarnessError> {
        self.send(&FromHarness::State { payload: payload.to_string() })
    }
}

/// Serve `program` over a message stream until `shutdown` or end of input.
/// Failures are reported as `error` messages and end the session.
pub fn serve<R: BufRead, W: Write>(
    program: &mut dyn HarnessProgram,
    input: &mut R,
    output: &mut W,
) -> Result<(), HarnessError> {
    let mut wire = Wire { input, output, next_request: 0 };
    loop {
        let message = match wire.receive() {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(e) => {
                wire.send(&FromHarness::Error { message: e.to_string() })?;
                return Err(e);
            }
        };
        let reply = match message {
            ToHarness::Init { task_config } => program.init(&task_config).map(|_| FromHarness::Ready {}),
            ToHarness::Learn { example } => program.learn(&example, &mut wire).map(|_| FromHarness::Ack {}),
            ToHarness::Predict { query, query_id } => program.predict(&query, &mut wire).map(|p| {
                FromHarness::Prediction { query_id: if p.example_id == query.example_id { query_id } else { p.example_id }, label: p.label, aux: p.aux }
            }),
            ToHarness::Shutdown {} => {
                program.shutdown()?;
                return Ok(());
            }
            ToHarness::LlmResult { .. } => Err(HarnessError::Unexpected { expected: "request", got: "llm_result".into() }),
        };
        match reply {
            Ok(reply) => wire.send(&reply)?,
            Err(e) => {
                wire.send(&FromHarness::Error { message: e.to_string() })?;
                return Err(e);
            }
        }
    }
}
