//! Line protocol for out-of-process evaluator and editor backends.
//!
//! The parent writes one JSON request per line to the child's stdin and reads
//! one JSON response per line from its stdout. Requests:
//!
//! ```text
//! {"kind":"evaluate","sample_id":7,"iteration":0,"part":0,"track":{..},"target":"a b c"}
//! {"kind":"edit","sample_id":7,"iteration":0,"part":1,"track":{..},"mask":[[0.4,0.9]],"target":"a b c"}
//! ```
//!
//! Responses:
//!
//! ```text
//! {"status":"report","report":{"transcript":"a b c","scope":[],"quality":7.5}}
//! {"status":"track","track":{..}}
//! {"status":"error","message":"..."}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use speechfix_core::correction::{AdapterError, CallContext, Editor, EvaluationReport, Evaluator};
use speechfix_core::{SpeechTrack, TextSequence, TimeScope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Request {
    Evaluate {
        sample_id: u64,
        iteration: u32,
        part: u32,
        track: SpeechTrack,
        target: TextSequence,
    },
    Edit {
        sample_id: u64,
        iteration: u32,
        part: u32,
        track: SpeechTrack,
        mask: TimeScope,
        target: TextSequence,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Response {
    Report { report: EvaluationReport },
    Track { track: SpeechTrack },
    Error { message: String },
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// A child process serving requests one at a time.
pub struct ProcessAdapter {
    command: Vec<String>,
    timeout: Duration,
    session: Mutex<Option<Session>>,
}

impl ProcessAdapter {
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self, AdapterError> {
        let adapter = Self {
            command: command.to_vec(),
            timeout,
            session: Mutex::new(None),
        };
        *adapter.session.lock().expect("fresh mutex") = Some(adapter.start()?);
        Ok(adapter)
    }

    fn start(&self) -> Result<Session, AdapterError> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| AdapterError("empty adapter command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| AdapterError(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Session {
            child,
            stdin,
            lines: rx,
        })
    }

    /// Sends one request and waits for its response. A child that times out
    /// or dies is killed and restarted on the next call.
    pub fn call(&self, request: &Request) -> Result<Response, AdapterError> {
        let mut guard = self
            .session
            .lock()
            .map_err(|_| AdapterError("adapter lock poisoned".into()))?;
        if guard.is_none() {
            *guard = Some(self.start()?);
        }
        let session = guard.as_mut().expect("session present");
        let result = exchange(session, request, self.timeout);
        if result.is_err() {
            if let Some(mut s) = guard.take() {
                let _ = s.child.kill();
                let _ = s.child.wait();
            }
        }
        result
    }
}

fn exchange(session: &mut Session, request: &Request, timeout: Duration) -> Result<Response, AdapterError> {
    let mut line = serde_json::to_string(request).expect("request serializes");
    line.push('\n');
    session
        .stdin
        .write_all(line.as_bytes())
        .and_then(|_| session.stdin.flush())
        .map_err(|e| AdapterError(format!("write to adapter failed: {e}")))?;
    let reply = match session.lines.recv_timeout(timeout) {
        Ok(Ok(l)) => l,
        Ok(Err(e)) => return Err(AdapterError(format!("read from adapter failed: {e}"))),
        Err(RecvTimeoutError::Timeout) => {
            return Err(AdapterError(format!("adapter timed out after {timeout:?}")))
        }
        Err(RecvTimeoutError::Disconnected) => {
            return Err(AdapterError("adapter closed its output".into()))
        }
    };
    serde_json::from_str(&reply).map_err(|e| AdapterError(format!("malformed adapter response: {e}")))
}

impl Drop for ProcessAdapter {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.session.lock() {
            if let Some(mut s) = guard.take() {
                drop(s.stdin);
                let _ = s.child.kill();
                let _ = s.child.wait();
            }
        }
    }
}

impl Evaluator for ProcessAdapter {
    fn evaluate(
        &self,
        track: &SpeechTrack,
        target: &TextSequence,
        ctx: CallContext,
    ) -> Result<EvaluationReport, AdapterError> {
        let req = Request::Evaluate {
            sample_id: ctx.sample_id,
            iteration: ctx.iteration,
            part: ctx.part,
            track: track.clone(),
            target: target.clone(),
        };
        match self.call(&req)? {
            Response::Report { report } => Ok(report),
            Response::Error { message } => Err(AdapterError(message)),
            Response::Track { .. } => Err(AdapterError("expected a report, got a track".into())),
        }
    }
}

impl Editor for ProcessAdapter {
    fn edit(
        &self,
        track: &SpeechTrack,
        mask: &TimeScope,
        target: &TextSequence,
        ctx: CallContext,
    ) -> Result<SpeechTrack, AdapterError> {
        let req = Request::Edit {
            sample_id: ctx.sample_id,
            iteration: ctx.iteration,
            part: ctx.part,
            track: track.clone(),
            mask: mask.clone(),
            target: target.clone(),
        };
        match self.call(&req)? {
            Response::Track { track } => Ok(track),
            Response::Error { message } => Err(AdapterError(message)),
            Response::Report { .. } => Err(AdapterError("expected a track, got a report".into())),
        }
    }
}

/// Answers one request with in-process adapters.
pub fn handle<V: Evaluator + ?Sized, E: Editor + ?Sized>(request: Request, evaluator: &V, editor: &E) -> Response {
    let result = match request {
        Request::Evaluate {
            sample_id,
            iteration,
            part,
            track,
            target,
        } => evaluator
            .evaluate(&track, &target, CallContext { sample_id, iteration, part })
            .map(|report| Response::Report { report }),
        Request::Edit {
            sample_id,
            iteration,
            part,
            track,
            mask,
            target,
        } => editor
            .edit(&track, &mask, &target, CallContext { sample_id, iteration, part })
            .map(|track| Response::Track { track }),
    };
    result.unwrap_or_else(|e| Response::Error { message: e.0 })
}

/// Serves requests from `input` until end of stream.
pub fn serve<R, W, V, E>(input: R, mut output: W, evaluator: &V, editor: &E) -> std::io::Result<()>
where
    R: BufRead,
    W: Write,
    V: Evaluator + ?Sized,
    E: Editor + ?Sized,
{
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) => handle(req, evaluator, editor),
            Err(e) => Response::Error {
                message: format!("malformed request: {e}"),
            },
        };
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
