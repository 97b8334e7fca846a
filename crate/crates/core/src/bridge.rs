//! Client for the external encoder bridge.
//!
//! The bridge is a child process speaking JSON frames over stdin/stdout. Each
//! frame is an object `{"kind", "id", "payload"}` on one line; a frame may also
//! be sent as `#<byte length>\n` followed by that many bytes. After start-up
//! the bridge sends `hello`; the client then issues `encode_request` and
//! `finetune_request` frames and matches replies by `id`. Failures come back
//! as `error` frames carrying `code` and `message`.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::stage2::encoder::{EncodeError, Encoder};
use crate::stage2::head::ClassificationHead;

pub const PROTOCOL_VERSION: u32 = 1;
pub const BRIDGE_DIM: usize = 768;
/// Longest input, in whitespace tokens, sent to the bridge.
pub const MAX_INPUT_TOKENS: usize = 512;
const ENCODE_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BridgeError {
    #[error("encoder bridge not available: {0}")]
    NotAvailable(String),
    #[error("encoder bridge exited unexpectedly")]
    Crashed,
    #[error("encoder bridge did not answer within {0:?}")]
    Timeout(Duration),
    #[error("malformed frame from encoder bridge: {0}")]
    MalformedFrame(String),
    #[error("encoder bridge error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("encoder bridge speaks protocol {got}, expected {expected}")]
    ProtocolVersion { expected: u32, got: u32 },
    #[error("encoder bridge protocol violation: {0}")]
    Protocol(String),
    #[error("encoder bridge io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub kind: String,
    #[serde(default)]
    pub id: u64,
    #[serde(default)]
    pub payload: Value,
}

impl Frame {
    pub fn new(kind: &str, id: u64, payload: Value) -> Self {
        Self { kind: kind.to_string(), id, payload }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    pub command: String,
    pub args: Vec<String>,
    pub request_timeout_ms: u64,
    pub startup_timeout_ms: u64,
    pub expected_dim: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            command: "sdie-encoder-bridge".into(),
            args: Vec::new(),
            request_timeout_ms: 600_000,
            startup_timeout_ms: 60_000,
            expected_dim: BRIDGE_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
    pub dim: usize,
    #[serde(default)]
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRequest {
    pub texts: Vec<String>,
    /// Class names in the fixed four-class order.
    pub labels: Vec<String>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default)]
    pub holdout_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResponse {
    pub handle: String,
    pub head: ClassificationHead,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub epochs_run: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct RemoteError {
    #[serde(default)]
    code: String,
    #[serde(default)]
    message: String,
}

#[derive(Debug, Deserialize)]
struct EncodeResponse {
    vectors: Vec<Vec<f64>>,
}

enum ReadEvent {
    Frame(Frame),
    Malformed(String),
    Eof,
    Io(String),
}

/// Read one frame; `Ok(None)` at end of stream.
pub fn read_frame<R: BufRead>(reader: &mut R) -> Result<Option<Frame>, BridgeError> {
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| BridgeError::Io(e.to_string()))?;
        if n == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            break;
        }
    }
    let trimmed = line.trim_end_matches(['\r', '\n']);
    let body = if let Some(len) = trimmed.strip_prefix('#') {
        let len: usize = len
            .trim()
            .parse()
            .map_err(|_| BridgeError::MalformedFrame(format!("bad length prefix {trimmed:?}")))?;
        let mut buf = vec![0u8; len];
        reader.read_exact(&mut buf).map_err(|_| BridgeError::MalformedFrame("truncated frame".into()))?;
        String::from_utf8(buf).map_err(|_| BridgeError::MalformedFrame("frame is not utf-8".into()))?
    } else {
        trimmed.to_string()
    };
    serde_json::from_str(&body).map(Some).map_err(|e| BridgeError::MalformedFrame(e.to_string()))
}

pub fn write_frame<W: Write + ?Sized>(writer: &mut W, frame: &Frame) -> Result<(), BridgeError> {
    let mut line = serde_json::to_string(frame).map_err(|e| BridgeError::Io(e.to_string()))?;
    line.push('\n');
    writer.write_all(line.as_bytes()).and_then(|_| writer.flush()).map_err(|_| BridgeError::Crashed)
}

/// Keep at most `max` whitespace-separated tokens.
pub fn truncate_tokens(text: &str, max: usize) -> String {
    text.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
}

pub struct BridgeClient {
    child: Option<Child>,
    writer: Box<dyn Write + Send>,
    rx: Receiver<ReadEvent>,
    next_id: u64,
    hello: Hello,
    timeout: Duration,
    broken: Option<BridgeError>,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient").field("hello", &self.hello).field("broken", &self.broken).finish()
    }
}

impl BridgeClient {
    /// Start the bridge process and wait for its `hello`.
    pub fn spawn(config: &BridgeConfig) -> Result<Self, BridgeError> {
        let mut child = Command::new(&config.command)
            .args(&config.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BridgeError::NotAvailable(format!("{}: {e}", config.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match Self::connect(stdout, stdin, config) {
            Ok(mut client) => {
                client.child = Some(child);
                Ok(client)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    /// Connect over arbitrary streams and wait for `hello`.
    pub fn from_streams<R, W>(reader: R, writer: W, config: &BridgeConfig) -> Result<Self, BridgeError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::connect(reader, writer, config)
    }

    fn connect<R, W>(reader: R, writer: W, config: &BridgeConfig) -> Result<Self, BridgeError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let event = match read_frame(&mut reader) {
                    Ok(Some(frame)) => ReadEvent::Frame(frame),
                    Ok(None) => ReadEvent::Eof,
                    Err(BridgeError::MalformedFrame(m)) => ReadEvent::Malformed(m),
                    Err(e) => ReadEvent::Io(e.to_string()),
                };
                let stop = !matches!(event, ReadEvent::Frame(_));
                if tx.send(event).is_err() || stop {
                    return;
                }
            }
        });
        let mut client = Self {
            child: None,
            writer: Box::new(writer),
            rx,
            next_id: 1,
            hello: Hello { protocol_version: 0, dim: 0, model: None },
            timeout: Duration::from_millis(config.request_timeout_ms),
            broken: None,
        };
        let frame = client.recv(Duration::from_millis(config.startup_timeout_ms))?;
        if frame.kind != "hello" {
            return Err(client.fail(BridgeError::Protocol(format!("expected hello, got {}", frame.kind))));
        }
        let hello: Hello = serde_json::from_value(frame.payload)
            .map_err(|e| client.fail(BridgeError::MalformedFrame(format!("hello: {e}"))))?;
        if hello.protocol_version != PROTOCOL_VERSION {
            return Err(client.fail(BridgeError::ProtocolVersion { expected: PROTOCOL_VERSION, got: hello.protocol_version }));
        }
        if hello.dim != config.expected_dim {
            return Err(client.fail(BridgeError::Protocol(format!(
                "bridge dimension {} differs from expected {}",
                hello.dim, config.expected_dim
            ))));
        }
        client.hello = hello;
        Ok(client)
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    pub fn dim(&self) -> usize {
        self.hello.dim
    }

    /// Mark the client unusable, stop the child, and hand the error back.
    fn fail(&mut self, err: BridgeError) -> BridgeError {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
        self.child = None;
        self.broken = Some(err.clone());
        err
    }

    fn recv(&mut self, timeout: Duration) -> Result<Frame, BridgeError> {
        match self.rx.recv_timeout(timeout) {
            Ok(ReadEvent::Frame(f)) => Ok(f),
            Ok(ReadEvent::Malformed(m)) => Err(self.fail(BridgeError::MalformedFrame(m))),
            Ok(ReadEvent::Io(m)) => Err(self.fail(BridgeError::Io(m))),
            Ok(ReadEvent::Eof) | Err(RecvTimeoutError::Disconnected) => Err(self.fail(BridgeError::Crashed)),
            Err(RecvTimeoutError::Timeout) => Err(self.fail(BridgeError::Timeout(timeout))),
        }
    }

    fn send(&mut self, kind: &str, payload: Value) -> Result<u64, BridgeError> {
        if let Some(err) = &self.broken {
            return Err(err.clone());
        }
        let id = self.next_id;
        self.next_id += 1;
        if let Err(e) = write_frame(&mut self.writer, &Frame::new(kind, id, payload)) {
            return Err(self.fail(e));
        }
        Ok(id)
    }

    /// Wait for the reply to `id`, passing `progress` frames to `on_progress`.
    fn await_reply(
        &mut self,
        id: u64,
        expected_kind: &str,
        mut on_progress: impl FnMut(&Frame) -> Result<(), BridgeError>,
    ) -> Result<Value, BridgeError> {
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let frame = match self.recv(left) {
                Err(BridgeError::Timeout(_)) => return Err(BridgeError::Timeout(self.timeout)),
                other => other?,
            };
            if frame.id != id {
                return Err(self.fail(BridgeError::Protocol(format!("reply id {} does not match request {id}", frame.id))));
            }
            match frame.kind.as_str() {
                "progress" => {
                    if let Err(e) = on_progress(&frame) {
                        return Err(self.fail(e));
                    }
                }
                "error" => {
                    let e: RemoteError = serde_json::from_value(frame.payload).unwrap_or(RemoteError {
                        code: "unknown".into(),
                        message: "unparseable error payload".into(),
                    });
                    return Err(BridgeError::Remote { code: e.code, message: e.message });
                }
                k if k == expected_kind => return Ok(frame.payload),
                k => return Err(self.fail(BridgeError::Protocol(format!("unexpected {k} frame")))),
            }
        }
    }

    /// Encode texts with the base encoder, or with a fine-tuned one named by
    /// `handle`. Inputs are truncated to [`MAX_INPUT_TOKENS`].
    pub fn encode(&mut self, texts: &[&str], handle: Option<&str>) -> Result<Vec<Vec<f64>>, BridgeError> {
        let texts: Vec<String> = texts.iter().map(|t| truncate_tokens(t, MAX_INPUT_TOKENS)).collect();
        let payload = serde_json::json!({ "texts": texts, "handle": handle });
        let id = self.send("encode_request", payload)?;
        let reply = self.await_reply(id, "encode_response", |_| {
            Err(BridgeError::Protocol("progress frame during encode".into()))
        })?;
        let resp: EncodeResponse =
            serde_json::from_value(reply).map_err(|e| self.fail(BridgeError::MalformedFrame(e.to_string())))?;
        if resp.vectors.len() != texts.len() {
            return Err(self.fail(BridgeError::Protocol(format!(
                "{} vectors for {} texts",
                resp.vectors.len(),
                texts.len()
            ))));
        }
        if let Some(bad) = resp.vectors.iter().find(|v| v.len() != self.hello.dim) {
            let got = bad.len();
            return Err(self.fail(BridgeError::Protocol(format!("vector width {got}, expected {}", self.hello.dim))));
        }
        Ok(resp.vectors)
    }

    /// Fine-tune the bridge's encoder with a fresh head.
    pub fn finetune(
        &mut self,
        request: &FinetuneRequest,
        mut on_progress: impl FnMut(&Progress),
    ) -> Result<FinetuneResponse, BridgeError> {
        let mut request = request.clone();
        request.texts = request.texts.iter().map(|t| truncate_tokens(t, MAX_INPUT_TOKENS)).collect();
        let payload = serde_json::to_value(&request).map_err(|e| BridgeError::Io(e.to_string()))?;
        let id = self.send("finetune_request", payload)?;
        let mut last_epoch = 0usize;
        let reply = self.await_reply(id, "finetune_response", |frame| {
            let p: Progress = serde_json::from_value(frame.payload.clone())
                .map_err(|e| BridgeError::MalformedFrame(format!("progress: {e}")))?;
            if p.epoch <= last_epoch {
                return Err(BridgeError::Protocol(format!("progress epoch {} after {last_epoch}", p.epoch)));
            }
            last_epoch = p.epoch;
            on_progress(&p);
            Ok(())
        })?;
        let resp: FinetuneResponse =
            serde_json::from_value(reply).map_err(|e| self.fail(BridgeError::MalformedFrame(e.to_string())))?;
        if resp.head.dim != self.hello.dim {
            return Err(self.fail(BridgeError::Protocol(format!("head dimension {}", resp.head.dim))));
        }
        resp.head.validate().map_err(|e| self.fail(BridgeError::Protocol(e.to_string())))?;
        Ok(resp)
    }

    /// Ask the bridge to exit and reap it.
    pub fn shutdown(mut self) -> Result<(), BridgeError> {
        self.close(Duration::from_secs(5))
    }

    fn close(&mut self, grace: Duration) -> Result<(), BridgeError> {
        if self.broken.is_none() {
            let id = self.next_id;
            let _ = write_frame(&mut self.writer, &Frame::new("shutdown", id, Value::Null));
        }
        self.broken.get_or_insert(BridgeError::Protocol("client shut down".into()));
        if let Some(mut child) = self.child.take() {
            let deadline = Instant::now() + grace;
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(20)),
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
        Ok(())
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        let _ = self.close(Duration::from_millis(500));
    }
}

/// [`Encoder`] over a bridge client, optionally bound to a fine-tuned handle.
#[derive(Debug)]
pub struct BridgeEncoder {
    client: Mutex<BridgeClient>,
    handle: Option<String>,
}

impl BridgeEncoder {
    pub fn new(client: BridgeClient) -> Self {
        Self { client: Mutex::new(client), handle: None }
    }

    pub fn with_handle(client: BridgeClient, handle: impl Into<String>) -> Self {
        Self { client: Mutex::new(client), handle: Some(handle.into()) }
    }

    pub fn set_handle(&mut self, handle: Option<String>) {
        self.handle = handle;
    }

    pub fn finetune(&self, request: &FinetuneRequest, on_progress: impl FnMut(&Progress)) -> Result<FinetuneResponse, BridgeError> {
        self.client.lock().expect("bridge lock").finetune(request, on_progress)
    }

    /// Encode against an explicit handle instead of the bound one.
    pub fn encode_with(&self, texts: &[&str], handle: Option<&str>) -> Result<Vec<Vec<f64>>, EncodeError> {
        let mut client = self.client.lock().expect("bridge lock");
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(ENCODE_CHUNK) {
            out.extend(client.encode(chunk, handle)?);
        }
        Ok(out)
    }

    pub fn into_client(self) -> BridgeClient {
        self.client.into_inner().expect("bridge lock")
    }
}

impl Encoder for BridgeEncoder {
    fn dim(&self) -> usize {
        self.client.lock().expect("bridge lock").dim()
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncodeError> {
        Ok(self.encode_batch(&[text])?.remove(0))
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EncodeError> {
        self.encode_with(texts, self.handle.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{pipe, Cursor, PipeReader, PipeWriter};

    fn quick() -> BridgeConfig {
        BridgeConfig { request_timeout_ms: 2_000, startup_timeout_ms: 2_000, expected_dim: 3, ..Default::default() }
    }

    /// In-process bridge: runs `script` on each request frame.
    fn fake<F>(hello: Value, mut script: F) -> (PipeReader, PipeWriter)
    where
        F: FnMut(&Frame, &mut PipeWriter) + Send + 'static,
    {
        let (client_read, mut bridge_write) = pipe().unwrap();
        let (bridge_read, client_write) = pipe().unwrap();
        thread::spawn(move || {
            write_frame(&mut bridge_write, &Frame::new("hello", 0, hello)).unwrap();
            let mut r = BufReader::new(bridge_read);
            while let Ok(Some(frame)) = read_frame(&mut r) {
                if frame.kind == "shutdown" {
                    return;
                }
                script(&frame, &mut bridge_write);
            }
        });
        (client_read, client_write)
    }

    fn hello3() -> Value {
        serde_json::json!({ "protocol_version": 1, "dim": 3 })
    }

    fn echo_lengths(frame: &Frame, w: &mut PipeWriter) {
        let texts: Vec<String> = serde_json::from_value(frame.payload["texts"].clone()).unwrap();
        let vectors: Vec<Vec<f64>> = texts.iter().map(|t| vec![t.split_whitespace().count() as f64, 0.0, 1.0]).collect();
        write_frame(w, &Frame::new("encode_response", frame.id, serde_json::json!({ "vectors": vectors }))).unwrap();
    }

    #[test]
    fn frames_round_trip_in_both_encodings() {
        let f = Frame::new("encode_request", 7, serde_json::json!({"texts": ["a"]}));
        let mut buf = Vec::new();
        write_frame(&mut buf, &f).unwrap();
        let body = serde_json::to_string(&f).unwrap();
        buf.extend(format!("#{}\n{body}\n", body.len()).bytes());
        let mut r = Cursor::new(buf);
        assert_eq!(read_frame(&mut r).unwrap(), Some(f.clone()));
        assert_eq!(read_frame(&mut r).unwrap(), Some(f));
        assert_eq!(read_frame(&mut r).unwrap(), None);
        let mut bad = Cursor::new(b"{not json\n".to_vec());
        assert!(matches!(read_frame(&mut bad), Err(BridgeError::MalformedFrame(_))));
        let mut short = Cursor::new(b"#50\n{}".to_vec());
        assert!(matches!(read_frame(&mut short), Err(BridgeError::MalformedFrame(_))));
    }

    #[test]
    fn truncates_long_inputs() {
        let long = vec!["w"; 600].join(" ");
        assert_eq!(truncate_tokens(&long, MAX_INPUT_TOKENS).split(' ').count(), 512);
        assert_eq!(truncate_tokens("  a   b ", 5), "a b");
    }

    #[test]
    fn encodes_through_fake_bridge() {
        let (r, w) = fake(hello3(), echo_lengths);
        let client = BridgeClient::from_streams(r, w, &quick()).unwrap();
        assert_eq!(client.dim(), 3);
        let enc = BridgeEncoder::new(client);
        let long = vec!["x"; 700].join(" ");
        let v = enc.encode_batch(&["a b", "c", &long]).unwrap();
        assert_eq!(v, vec![vec![2.0, 0.0, 1.0], vec![1.0, 0.0, 1.0], vec![512.0, 0.0, 1.0]]);
        enc.into_client().shutdown().unwrap();
    }

    #[test]
    fn rejects_wrong_protocol_version() {
        let (r, w) = fake(serde_json::json!({ "protocol_version": 2, "dim": 3 }), |_, _| {});
        let err = BridgeClient::from_streams(r, w, &quick()).unwrap_err();
        assert_eq!(err, BridgeError::ProtocolVersion { expected: 1, got: 2 });
    }

    #[test]
    fn rejects_wrong_dimension() {
        let (r, w) = fake(hello3(), |f, w| {
            write_frame(w, &Frame::new("encode_response", f.id, serde_json::json!({ "vectors": [[1.0, 2.0]] }))).unwrap();
        });
        let mut c = BridgeClient::from_streams(r, w, &quick()).unwrap();
        assert!(matches!(c.encode(&["a"], None), Err(BridgeError::Protocol(_))));
        // the client is unusable after a protocol violation
        assert!(c.encode(&["a"], None).is_err());
    }

    #[test]
    fn remote_errors_are_reported() {
        let (r, w) = fake(hello3(), |f, w| {
            let p = serde_json::json!({ "code": "oom", "message": "out of memory" });
            write_frame(w, &Frame::new("error", f.id, p)).unwrap();
        });
        let mut c = BridgeClient::from_streams(r, w, &quick()).unwrap();
        assert_eq!(
            c.encode(&["a"], None),
            Err(BridgeError::Remote { code: "oom".into(), message: "out of memory".into() })
        );
    }

    #[test]
    fn crash_mid_request_is_detected() {
        let (r, w) = fake(hello3(), |_, _| panic!("bridge died"));
        let mut c = BridgeClient::from_streams(r, w, &quick()).unwrap();
        assert_eq!(c.encode(&["a"], None), Err(BridgeError::Crashed));
    }

    #[test]
    fn silent_bridge_times_out() {
        let (r, w) = fake(hello3(), |_, _| {});
        let cfg = BridgeConfig { request_timeout_ms: 100, ..quick() };
        let mut c = BridgeClient::from_streams(r, w, &cfg).unwrap();
        assert!(matches!(c.encode(&["a"], None), Err(BridgeError::Timeout(_))));
    }

    fn finetune_request() -> FinetuneRequest {
        FinetuneRequest {
            texts: vec!["a".into(), "b".into()],
            labels: vec!["LOAC".into(), "LOOP".into()],
            epochs: 3,
            learning_rate: 1e-5,
            batch_size: 16,
            dropout: 0.3,
            seed: 1,
            holdout_fraction: 0.1,
            patience: 5,
        }
    }

    fn finetune_fake(epochs: Vec<usize>) -> (PipeReader, PipeWriter) {
        fake(hello3(), move |f, w| {
            for e in &epochs {
                let p = serde_json::json!({ "epoch": e, "train_loss": 1.0 / *e as f64 });
                write_frame(w, &Frame::new("progress", f.id, p)).unwrap();
            }
            let head = ClassificationHead::new(3, 0.3, 0).unwrap();
            let p = serde_json::json!({ "handle": "ft-1", "head": head, "best_epoch": 2 });
            write_frame(w, &Frame::new("finetune_response", f.id, p)).unwrap();
        })
    }

    #[test]
    fn finetune_reports_progress() {
        let (r, w) = finetune_fake(vec![1, 2, 3]);
        let mut c = BridgeClient::from_streams(r, w, &quick()).unwrap();
        let mut seen = Vec::new();
        let resp = c.finetune(&finetune_request(), |p| seen.push(p.epoch)).unwrap();
        assert_eq!(seen, [1, 2, 3]);
        assert_eq!(resp.handle, "ft-1");
        assert_eq!(resp.head.dim, 3);
    }

    #[test]
    fn finetune_rejects_non_increasing_epochs() {
        let (r, w) = finetune_fake(vec![1, 2, 2]);
        let mut c = BridgeClient::from_streams(r, w, &quick()).unwrap();
        assert!(matches!(c.finetune(&finetune_request(), |_| {}), Err(BridgeError::Protocol(_))));
    }

    #[test]
    fn missing_executable_is_not_available() {
        let cfg = BridgeConfig { command: "/nonexistent/bridge".into(), ..quick() };
        assert!(matches!(BridgeClient::spawn(&cfg), Err(BridgeError::NotAvailable(_))));
    }

    #[test]
    fn process_exiting_before_hello_is_a_crash() {
        let cfg = BridgeConfig { command: "true".into(), ..quick() };
        assert_eq!(BridgeClient::spawn(&cfg).unwrap_err(), BridgeError::Crashed);
    }

    #[test]
    fn garbage_output_is_malformed() {
        let cfg = BridgeConfig { command: "sh".into(), args: vec!["-c".into(), "echo garbage; sleep 5".into()], ..quick() };
        assert!(matches!(BridgeClient::spawn(&cfg), Err(BridgeError::MalformedFrame(_))));
    }

    #[test]
    fn silent_process_times_out_at_startup() {
        let cfg = BridgeConfig { command: "sleep".into(), args: vec!["5".into()], startup_timeout_ms: 100, ..quick() };
        assert!(matches!(BridgeClient::spawn(&cfg), Err(BridgeError::Timeout(_))));
    }
}
