//! Pluggable embedding boundary for vectors that are not precomputed, such
//! as synthetic captions built during pair filtering.
//!
//! Wire format (little-endian throughout):
//!
//! ```text
//! request:  magic "ENCQ", u64 request_id, u32 count,
//!           count x (u32 length + UTF-8 bytes)
//! response: magic "ENCR", u64 request_id, u32 dim, u32 count,
//!           count x dim f32 payload
//! ```
//!
//! A sidecar wrapping any real encoder can implement this in a few dozen
//! lines. Three endpoint kinds exist: `file_stub` resolves texts against an
//! embedding-store file keyed by exact text, `local_process` runs a command
//! per batch speaking the wire format over stdin/stdout, and `http` POSTs
//! the request body to a URL.

use crate::embedding::{EmbeddingError, EmbeddingVector};
use crate::store::{EmbeddingStore, StoreError};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};
use thiserror::Error;

pub const REQUEST_MAGIC: [u8; 4] = *b"ENCQ";
pub const RESPONSE_MAGIC: [u8; 4] = *b"ENCR";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder transport error: {detail}")]
    Transport { detail: String },
    #[error("encoder timed out")]
    Timeout,
    #[error("encoder returned dim {found}, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("file stub has no embedding for text {0:?}")]
    UnknownText(String),
    #[error("malformed encoder response: {detail}")]
    MalformedResponse { detail: String },
    #[error("response id {received} does not match request id {sent}")]
    RequestIdMismatch { sent: u64, received: u64 },
    #[error("texts must be non-empty strings")]
    EmptyText,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    FileStub,
    LocalProcess,
    Http,
}

/// Where and how to reach the encoder. `address` is a store path for
/// `file_stub`, a command line for `local_process`, or an `http://` URL.
/// `model_tag` records the scorer identity for the run; `expected_dim`
/// must match every returned vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderEndpoint {
    pub kind: EndpointKind,
    pub address: String,
    pub model_tag: String,
    pub timeout_ms: u64,
    pub expected_dim: usize,
}

impl EncoderEndpoint {
    pub fn file_stub(address: impl Into<String>, expected_dim: usize) -> Self {
        Self {
            kind: EndpointKind::FileStub,
            address: address.into(),
            model_tag: "file-stub".into(),
            timeout_ms: 5_000,
            expected_dim,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// Anything that can turn texts into unit-normalized embeddings,
/// order-preserving and deterministic for fixed inputs.
pub trait TextEmbedder: Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EncoderError>;
}

/// Store-backed embedding lookup by exact text (or id). Rows are already
/// unit-normalized by the store loader.
impl TextEmbedder for EmbeddingStore {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EncoderError> {
        texts
            .iter()
            .map(|t| {
                if t.is_empty() {
                    return Err(EncoderError::EmptyText);
                }
                self.vector(t)
                    .ok_or_else(|| EncoderError::UnknownText(t.clone()))
            })
            .collect()
    }
}

#[derive(Debug)]
enum Backend {
    Stub(EmbeddingStore),
    Process,
    Http,
}

/// Client over one endpoint. Safe for concurrent use: the stub store is
/// read-only and the process/http transports open per-call.
#[derive(Debug)]
pub struct EncoderClient {
    endpoint: EncoderEndpoint,
    backend: Backend,
    next_request_id: AtomicU64,
}

impl EncoderClient {
    pub fn connect(endpoint: EncoderEndpoint) -> Result<Self, EncoderError> {
        let backend = match endpoint.kind {
            EndpointKind::FileStub => {
                let store = EmbeddingStore::load_with_dim(
                    &endpoint.address,
                    Some(endpoint.expected_dim as u32),
                )?;
                Backend::Stub(store)
            }
            EndpointKind::LocalProcess => Backend::Process,
            EndpointKind::Http => Backend::Http,
        };
        Ok(Self {
            endpoint,
            backend,
            next_request_id: AtomicU64::new(1),
        })
    }

    pub fn endpoint(&self) -> &EncoderEndpoint {
        &self.endpoint
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EncoderError> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(EncoderError::EmptyText);
        }
        let raw = match &self.backend {
            Backend::Stub(store) => {
                let mut rows = Vec::with_capacity(texts.len());
                for t in texts {
                    let row = store
                        .get(t)
                        .ok_or_else(|| EncoderError::UnknownText(t.clone()))?;
                    rows.push(row.to_vec());
                }
                rows
            }
            Backend::Process => {
                let request_id = self.next_request_id.fetch_add(1, Ordering::Relaxed);
                let body = encode_request(request_id, texts);
                let response =
                    process_round_trip(&self.endpoint.address, &body, self.endpoint.timeout())?;
                decode_checked(&response, request_id, texts.len())?
            }
            Backend::Http => {
                let request_id = self.next_request_id.fetch_add(1, Ordering::Relaxed);
                let body = encode_request(request_id, texts);
                let response = http_post(&self.endpoint.address, &body, self.endpoint.timeout())?;
                decode_checked(&response, request_id, texts.len())?
            }
        };
        let mut out = Vec::with_capacity(raw.len());
        for row in raw {
            if row.len() != self.endpoint.expected_dim {
                return Err(EncoderError::DimMismatch {
                    expected: self.endpoint.expected_dim,
                    found: row.len(),
                });
            }
            out.push(EmbeddingVector::new(row)?.normalized()?);
        }
        Ok(out)
    }

    /// Image embeddings keyed by id travel over the same wire.
    pub fn embed_images(&self, image_ids: &[String]) -> Result<Vec<EmbeddingVector>, EncoderError> {
        self.embed_texts(image_ids)
    }
}

impl TextEmbedder for EncoderClient {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EncoderError> {
        EncoderClient::embed_texts(self, texts)
    }
}

pub fn encode_request(request_id: u64, texts: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&REQUEST_MAGIC);
    out.extend_from_slice(&request_id.to_le_bytes());
    out.extend_from_slice(&(texts.len() as u32).to_le_bytes());
    for t in texts {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        out.extend_from_slice(t.as_bytes());
    }
    out
}

pub fn decode_request(bytes: &[u8]) -> Result<(u64, Vec<String>), EncoderError> {
    let mut cursor = Cursor::new(bytes);
    let magic = cursor.take_array::<4>()?;
    if magic != REQUEST_MAGIC {
        return Err(EncoderError::MalformedResponse {
            detail: format!("bad magic {magic:?}"),
        });
    }
    let request_id = u64::from_le_bytes(cursor.take_array::<8>()?);
    let count = u32::from_le_bytes(cursor.take_array::<4>()?);
    let mut texts = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(cursor.take_array::<4>()?) as usize;
        let raw = cursor.take(len)?;
        let text =
            String::from_utf8(raw.to_vec()).map_err(|_| EncoderError::MalformedResponse {
                detail: "request text is not UTF-8".into(),
            })?;
        texts.push(text);
    }
    cursor.expect_end()?;
    Ok((request_id, texts))
}

pub fn encode_response(request_id: u64, dim: u32, rows: &[Vec<f32>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&RESPONSE_MAGIC);
    out.extend_from_slice(&request_id.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    for row in rows {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_response(bytes: &[u8]) -> Result<(u64, u32, Vec<Vec<f32>>), EncoderError> {
    let mut cursor = Cursor::new(bytes);
    let magic = cursor.take_array::<4>()?;
    if magic != RESPONSE_MAGIC {
        return Err(EncoderError::MalformedResponse {
            detail: format!("bad magic {magic:?}"),
        });
    }
    let request_id = u64::from_le_bytes(cursor.take_array::<8>()?);
    let dim = u32::from_le_bytes(cursor.take_array::<4>()?);
    let count = u32::from_le_bytes(cursor.take_array::<4>()?);
    let mut rows = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let raw = cursor.take(dim as usize * 4)?;
        rows.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    cursor.expect_end()?;
    Ok((request_id, dim, rows))
}

fn decode_checked(
    bytes: &[u8],
    sent_request_id: u64,
    expected_count: usize,
) -> Result<Vec<Vec<f32>>, EncoderError> {
    let (request_id, _, rows) = decode_response(bytes)?;
    if request_id != sent_request_id {
        return Err(EncoderError::RequestIdMismatch {
            sent: sent_request_id,
            received: request_id,
        });
    }
    if rows.len() != expected_count {
        return Err(EncoderError::MalformedResponse {
            detail: format!("expected {expected_count} rows, got {}", rows.len()),
        });
    }
    Ok(rows)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        if self.pos + n > self.bytes.len() {
            return Err(EncoderError::MalformedResponse {
                detail: "message truncated".into(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_array<const N: usize>(&mut self) -> Result<[u8; N], EncoderError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn expect_end(&self) -> Result<(), EncoderError> {
        if self.pos != self.bytes.len() {
            return Err(EncoderError::MalformedResponse {
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Run the sidecar command once: request on stdin, response on stdout.
/// The reader thread drains stdout while the request is written, so large
/// batches cannot deadlock on pipe buffers.
fn process_round_trip(
    command_line: &str,
    body: &[u8],
    timeout: Duration,
) -> Result<Vec<u8>, EncoderError> {
    let mut parts = command_line.split_whitespace();
    let program = parts.next().ok_or_else(|| EncoderError::Transport {
        detail: "empty command line".into(),
    })?;
    let mut child = Command::new(program)
        .args(parts)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| EncoderError::Transport {
            detail: format!("spawn {program}: {e}"),
        })?;

    let mut stdout = child.stdout.take().expect("stdout piped");
    let (tx, rx) = std::sync::mpsc::channel();
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let result = stdout.read_to_end(&mut buf).map(|_| buf);
        let _ = tx.send(result);
    });

    let mut stdin = child.stdin.take().expect("stdin piped");
    let write_result = stdin.write_all(body).and_then(|()| stdin.flush());
    drop(stdin);
    if let Err(e) = write_result {
        let _ = child.kill();
        let _ = reader.join();
        return Err(EncoderError::Transport {
            detail: format!("write request: {e}"),
        });
    }

    let output = match rx.recv_timeout(timeout) {
        Ok(Ok(buf)) => buf,
        Ok(Err(e)) => {
            let _ = child.kill();
            let _ = reader.join();
            return Err(EncoderError::Transport {
                detail: format!("read response: {e}"),
            });
        }
        Err(_) => {
            let _ = child.kill();
            let _ = reader.join();
            return Err(EncoderError::Timeout);
        }
    };
    let _ = reader.join();
    let status = child.wait().map_err(|e| EncoderError::Transport {
        detail: e.to_string(),
    })?;
    if !status.success() {
        return Err(EncoderError::Transport {
            detail: format!("encoder exited with {status}"),
        });
    }
    Ok(output)
}

/// Minimal HTTP/1.1 POST of a binary body. Supports exactly what a sidecar
/// needs: status 200 plus a Content-Length body.
fn http_post(address: &str, body: &[u8], timeout: Duration) -> Result<Vec<u8>, EncoderError> {
    let rest = address
        .strip_prefix("http://")
        .ok_or_else(|| EncoderError::Transport {
            detail: format!("unsupported url {address}"),
        })?;
    let (host_port, path) = match rest.find('/') {
        Some(ix) => (&rest[..ix], &rest[ix..]),
        None => (rest, "/"),
    };
    let addr = host_port
        .to_socket_addrs()
        .map_err(|e| EncoderError::Transport {
            detail: format!("resolve {host_port}: {e}"),
        })?
        .next()
        .ok_or_else(|| EncoderError::Transport {
            detail: format!("no address for {host_port}"),
        })?;

    let map_io = |e: std::io::Error| match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => EncoderError::Timeout,
        _ => EncoderError::Transport {
            detail: e.to_string(),
        },
    };

    let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(map_io)?;
    stream.set_read_timeout(Some(timeout)).map_err(map_io)?;
    stream.set_write_timeout(Some(timeout)).map_err(map_io)?;

    let header = format!(
        "POST {path} HTTP/1.1\r\nHost: {host_port}\r\nContent-Type: application/octet-stream\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(header.as_bytes()).map_err(map_io)?;
    stream.write_all(body).map_err(map_io)?;
    stream.flush().map_err(map_io)?;

    let mut raw = Vec::new();
    let deadline = Instant::now() + timeout;
    let mut chunk = [0u8; 4096];
    loop {
        if Instant::now() > deadline {
            return Err(EncoderError::Timeout);
        }
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => raw.extend_from_slice(&chunk[..n]),
            Err(e) => return Err(map_io(e)),
        }
    }

    let split = find_header_end(&raw).ok_or_else(|| EncoderError::MalformedResponse {
        detail: "no header terminator in http response".into(),
    })?;
    let header_text = String::from_utf8_lossy(&raw[..split]);
    let status_line = header_text.lines().next().unwrap_or("");
    if !status_line.contains(" 200") {
        return Err(EncoderError::Transport {
            detail: format!("http status: {status_line}"),
        });
    }
    let content_length = header_text
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())
                .flatten()
        })
        .ok_or_else(|| EncoderError::MalformedResponse {
            detail: "missing content-length".into(),
        })?;
    let body_bytes = &raw[split + 4..];
    if body_bytes.len() < content_length {
        return Err(EncoderError::MalformedResponse {
            detail: format!(
                "body truncated: {} of {content_length} bytes",
                body_bytes.len()
            ),
        });
    }
    Ok(body_bytes[..content_length].to_vec())
}

fn find_header_end(raw: &[u8]) -> Option<usize> {
    raw.windows(4).position(|w| w == b"\r\n\r\n")
}

/// Deterministic stand-in embedding: hash text and dimension index to a
/// reproducible unit vector. Lets the full pipeline run with no model in
/// the loop; identical text always yields an identical vector.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut raw: Vec<f32> = (0..dim)
        .map(|i| {
            let h = crate::hash::hash_with_seed(i as u64, text.as_bytes());
            (crate::hash::unit_f64(h) * 2.0 - 1.0) as f32
        })
        .collect();
    let norm = raw
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for v in raw.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    raw
}
