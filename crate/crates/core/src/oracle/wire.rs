//! Newline-delimited JSON protocol shared by external embedding and landmark
//! oracles.
//!
//! Requests carry the image as base64 of row-major little-endian `f32` RGB,
//! clamped to `[0, 1]`:
//!
//! ```text
//! {"op":"embed","width":W,"height":H,"pixels":"..."}
//! {"embedding":[...]}  |  {"error":"msg"}
//! ```
//!
//! Over HTTP the same object is POSTed to `<base>/<op>`; over a subprocess it
//! is written as one line to stdin and one line is read back from stdout.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use super::OracleError;
use crate::image::Image;

/// One request/response exchange with an oracle.
pub trait Transport: Send {
    fn call(&mut self, request: &Value) -> Result<Value, OracleError>;
}

/// Open a transport: `http://`/`https://` endpoints use HTTP POST, anything
/// else is run through `sh -c` and spoken to over stdio.
pub fn connect(endpoint: &str, timeout_secs: f64) -> Result<Box<dyn Transport>, OracleError> {
    if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        Ok(Box::new(HttpTransport::new(endpoint, timeout_secs)))
    } else {
        Ok(Box::new(ProcessTransport::spawn(endpoint, timeout_secs)?))
    }
}

pub fn encode_pixels(img: &Image) -> String {
    let mut bytes = Vec::with_capacity(img.data().len() * 4);
    for &v in img.data() {
        bytes.extend((v.clamp(0.0, 1.0) as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_pixels(width: usize, height: usize, pixels: &str) -> Result<Image, OracleError> {
    let bytes = B64
        .decode(pixels)
        .map_err(|e| OracleError::Malformed(format!("pixels: {e}")))?;
    if bytes.len() != width * height * 3 * 4 {
        return Err(OracleError::Malformed(format!(
            "pixels: {} bytes for {width}x{height}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Ok(Image::new(height, width, data)?)
}

pub fn image_request(op: &str, img: &Image) -> Value {
    json!({
        "op": op,
        "width": img.width(),
        "height": img.height(),
        "pixels": encode_pixels(img),
    })
}

/// Decode an incoming request's image fields.
pub fn request_image(request: &Value) -> Result<Image, OracleError> {
    let dim = |k: &str| {
        request
            .get(k)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| OracleError::Malformed(format!("missing {k}")))
    };
    let pixels = request
        .get("pixels")
        .and_then(Value::as_str)
        .ok_or_else(|| OracleError::Malformed("missing pixels".into()))?;
    decode_pixels(dim("width")?, dim("height")?, pixels)
}

/// Surface `{"error": ...}` replies as [`OracleError::Remote`].
pub fn check_error(reply: &Value) -> Result<(), OracleError> {
    match reply.get("error") {
        Some(Value::String(msg)) => Err(OracleError::Remote(msg.clone())),
        Some(other) => Err(OracleError::Remote(other.to_string())),
        None => Ok(()),
    }
}

pub struct HttpTransport {
    agent: ureq::Agent,
    base: String,
    timeout_secs: f64,
}

impl HttpTransport {
    pub fn new(base: &str, timeout_secs: f64) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            base: base.trim_end_matches('/').to_string(),
            timeout_secs,
        }
    }
}

impl Transport for HttpTransport {
    fn call(&mut self, request: &Value) -> Result<Value, OracleError> {
        let op = request.get("op").and_then(Value::as_str).unwrap_or("embed");
        let url = format!("{}/{op}", self.base);
        let body = request.to_string();
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body.as_str())
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => OracleError::Timeout(self.timeout_secs),
                other => OracleError::Unreachable(format!("{url}: {other}")),
            })?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| OracleError::Malformed(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| OracleError::Malformed(format!("{e}: {text:.200}")))
    }
}

pub struct ProcessTransport {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
    broken: bool,
}

impl ProcessTransport {
    pub fn spawn(command: &str, timeout_secs: f64) -> Result<Self, OracleError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| OracleError::Unreachable(format!("{command}: {e}")))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
            timeout: Duration::from_secs_f64(timeout_secs),
            broken: false,
        })
    }
}

impl Transport for ProcessTransport {
    fn call(&mut self, request: &Value) -> Result<Value, OracleError> {
        if self.broken {
            return Err(OracleError::Unreachable("oracle process stream is out of sync".into()));
        }
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| OracleError::Unreachable("oracle stdin closed".into()))?;
        writeln!(stdin, "{request}")
            .and_then(|_| stdin.flush())
            .map_err(|e| OracleError::Unreachable(e.to_string()))?;
        let line = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(OracleError::Unreachable(e.to_string())),
            Err(RecvTimeoutError::Timeout) => {
                self.broken = true;
                return Err(OracleError::Timeout(self.timeout.as_secs_f64()));
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(OracleError::Unreachable("oracle process exited".into()))
            }
        };
        serde_json::from_str(&line).map_err(|e| OracleError::Malformed(format!("{e}: {line:.200}")))
    }
}

impl Drop for ProcessTransport {
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
    fn pixels_roundtrip_through_f32() {
        let img = Image::from_fn(3, 2, |x, y| [x as f64 * 0.25, y as f64 / 3.0, 1.7]);
        let req = image_request("embed", &img);
        assert_eq!(req["op"], "embed");
        assert_eq!(req["width"], 2);
        let back = request_image(&req).unwrap();
        for (a, b) in img.clamped().data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(back.get(0, 0, 2), 1.0);
    }

    #[test]
    fn bad_pixels_rejected() {
        assert!(decode_pixels(2, 2, "AAAA").is_err());
        assert!(decode_pixels(1, 1, "!!").is_err());
    }

    #[test]
    fn process_transport_echo_and_exit() {
        let mut t = ProcessTransport::spawn("read line; echo '{\"embedding\":[1,0]}'", 5.0).unwrap();
        let v = t.call(&json!({"op": "embed"})).unwrap();
        assert_eq!(v["embedding"][0], 1);
        assert!(t.call(&json!({"op": "embed"})).is_err());
    }

    #[test]
    fn process_transport_times_out() {
        let mut t = ProcessTransport::spawn("sleep 5", 0.2).unwrap();
        assert!(matches!(t.call(&json!({})), Err(OracleError::Timeout(_))));
        assert!(matches!(t.call(&json!({})), Err(OracleError::Unreachable(_))));
    }

    #[test]
    fn http_unreachable() {
        let mut t = HttpTransport::new("http://127.0.0.1:9", 1.0);
        assert!(matches!(
            t.call(&json!({"op": "embed"})),
            Err(OracleError::Unreachable(_) | OracleError::Timeout(_))
        ));
    }
}
