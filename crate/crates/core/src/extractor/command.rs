//! Child-process backends speaking the line protocol over stdin/stdout.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::protocol::{self, FrameRequest, Request, Response};
use super::{ExtractorError, ExtractorSpec, HandshakeInfo, LandmarkBackend};

pub struct CommandBackend {
    spec: ExtractorSpec,
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    stderr: Arc<Mutex<String>>,
    stderr_task: Option<JoinHandle<()>>,
}

impl CommandBackend {
    pub fn spawn(spec: &ExtractorSpec, argv: &[String]) -> Result<Self, ExtractorError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| ExtractorError::SpawnFailure("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ExtractorError::SpawnFailure(format!("{program}: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("stdout piped"));
        let mut err_pipe = child.stderr.take().expect("stderr piped");
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&stderr);
        let stderr_task = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = err_pipe.read_to_string(&mut buf);
            sink.lock().expect("stderr lock").push_str(&buf);
        });
        Ok(CommandBackend {
            spec: spec.clone(),
            child,
            stdin,
            stdout,
            stderr,
            stderr_task: Some(stderr_task),
        })
    }

    fn read_response(&mut self) -> Result<Option<Response>, ExtractorError> {
        let mut line = String::new();
        let n = self
            .stdout
            .read_line(&mut line)
            .map_err(|e| ExtractorError::Protocol(format!("read failed: {e}")))?;
        if n == 0 {
            return Ok(None);
        }
        protocol::decode_response(&line)
            .map(Some)
            .map_err(|e| ExtractorError::Protocol(format!("malformed line {:?}: {e}", line.trim_end())))
    }

    /// Turn an unexpected end of stream into a crash report when the child
    /// died with a failure status.
    fn eof_error(&mut self, context: &str) -> ExtractorError {
        self.stdin.take();
        let deadline = Instant::now() + Duration::from_secs(2);
        let status = loop {
            match self.child.try_wait() {
                Ok(Some(s)) => break Some(s),
                Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(5)),
                _ => break None,
            }
        };
        if let Some(task) = self.stderr_task.take() {
            let _ = task.join();
        }
        let stderr = self.stderr.lock().expect("stderr lock").trim().to_string();
        match status {
            Some(s) if !s.success() => ExtractorError::BackendCrash {
                status: s.to_string(),
                stderr,
            },
            _ => ExtractorError::Protocol(format!("premature end of stream {context}")),
        }
    }

    fn send(stdin: &mut ChildStdin, req: &Request) -> std::io::Result<()> {
        stdin.write_all(protocol::encode(req).as_bytes())
    }
}

impl LandmarkBackend for CommandBackend {
    fn handshake(&mut self) -> Result<HandshakeInfo, ExtractorError> {
        let init = Request::Init {
            backend: self.spec.backend_name.clone(),
            expected_keypoints: self.spec.expected_keypoints,
            channels: self.spec.channels,
            params: self.spec.params.clone(),
            seed: self.spec.seed,
        };
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| ExtractorError::Protocol("session closed".into()))?;
        if Self::send(stdin, &init).and_then(|_| stdin.flush()).is_err() {
            return Err(match self.eof_error("during handshake") {
                ExtractorError::Protocol(m) => ExtractorError::SpawnFailure(m),
                other => other,
            });
        }
        match self.read_response()? {
            Some(Response::Ready {
                backend,
                num_keypoints,
                channels,
                space,
            }) => Ok(HandshakeInfo {
                num_keypoints,
                channels,
                backend,
                space,
            }),
            Some(Response::Error { message }) => Err(ExtractorError::Backend(message)),
            Some(other) => Err(ExtractorError::Protocol(format!("expected ready, got {other:?}"))),
            None => Err(self.eof_error("during handshake")),
        }
    }

    fn run_clip(&mut self, frames: &[FrameRequest]) -> Result<Vec<Response>, ExtractorError> {
        let mut stdin = self
            .stdin
            .take()
            .ok_or_else(|| ExtractorError::Protocol("session closed".into()))?;
        // A separate writer keeps both pipes draining, so a backend that
        // answers before reading everything cannot deadlock us.
        let (stdin, result) = std::thread::scope(|scope| {
            let writer = scope.spawn(move || {
                let mut ok = true;
                for f in frames {
                    if Self::send(&mut stdin, &Request::Frame(f.clone())).is_err() {
                        ok = false;
                        break;
                    }
                }
                ok = ok
                    && Self::send(&mut stdin, &Request::End)
                        .and_then(|_| stdin.flush())
                        .is_ok();
                (stdin, ok)
            });
            let mut responses = Vec::with_capacity(frames.len());
            let result = loop {
                match self.read_response() {
                    Ok(Some(Response::Done)) => break Ok(()),
                    Ok(Some(Response::Error { message })) => break Err(ExtractorError::Backend(message)),
                    Ok(Some(r @ (Response::Landmarks { .. } | Response::NoDetection { .. }))) => responses.push(r),
                    Ok(Some(other)) => break Err(ExtractorError::Protocol(format!("unexpected {other:?}"))),
                    Ok(None) => break Err(ExtractorError::Protocol(String::new())),
                    Err(e) => break Err(e),
                }
            };
            if matches!(&result, Err(e) if !matches!(e, ExtractorError::Protocol(m) if m.is_empty())) {
                // the session is unusable; unblock the writer
                let _ = self.child.kill();
            }
            let (stdin, _) = writer.join().expect("writer thread");
            (stdin, result.map(|_| responses))
        });
        self.stdin = Some(stdin);
        match result {
            Err(ExtractorError::Protocol(m)) if m.is_empty() => Err(self.eof_error("before done")),
            other => other,
        }
    }
}

impl Drop for CommandBackend {
    fn drop(&mut self) {
        self.stdin.take();
        let deadline = Instant::now() + Duration::from_secs(2);
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) | Err(_) => break,
                Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(5)),
                Ok(None) => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    break;
                }
            }
        }
        if let Some(task) = self.stderr_task.take() {
            let _ = task.join();
        }
    }
}
