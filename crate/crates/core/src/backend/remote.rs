//! Remote inference protocol.
//!
//! Frames are a 4-byte big-endian length followed by a UTF-8 JSON document.
//! A distribution request looks like
//!
//! ```json
//! {"context_tokens": [5, 9], "allowed": [1, 2] | null, "query": [7] | null}
//! ```
//!
//! (`"context_text": "..."` may replace `context_tokens`) and is answered by
//! `{"probs": {"1": 0.75, "2": 0.25}, "argmax": 1}`. A tokenization request
//! `{"tokenize": ["isEmpty"]}` is answered by `{"tokenized": [[12]]}`.
//! Failures are answered by `{"error": {"kind": "...", "message": "..."}}`.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendFactory, Distribution, LogitMask, ModelBackend};
use crate::token::{TokenId, Vocabulary};

const MAX_FRAME: usize = 64 << 20;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const IO_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_tokens: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_text: Option<String>,
    pub allowed: Option<Vec<TokenId>>,
    pub query: Option<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeRequest {
    pub tokenize: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Request {
    Tokenize(TokenizeRequest),
    Distribution(DistributionRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionResponse {
    pub probs: BTreeMap<TokenId, f64>,
    pub argmax: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub tokenized: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}

impl ErrorResponse {
    fn from_error(err: &BackendError) -> Self {
        let (kind, len, max) = match err {
            BackendError::ContextTooLong { len, max } => {
                ("context_too_long", Some(*len), Some(*max))
            }
            BackendError::InvalidRequest(_) => ("invalid_request", None, None),
            BackendError::BackendUnavailable(_) => ("unavailable", None, None),
            BackendError::Protocol(_) | BackendError::MalformedSpec(_) => ("internal", None, None),
        };
        Self {
            error: ErrorBody {
                kind: kind.into(),
                message: err.to_string(),
                len,
                max,
            },
        }
    }

    fn into_error(self) -> BackendError {
        let ErrorBody {
            kind,
            message,
            len,
            max,
        } = self.error;
        match (kind.as_str(), len, max) {
            ("context_too_long", Some(len), Some(max)) => BackendError::ContextTooLong { len, max },
            ("invalid_request", ..) => BackendError::InvalidRequest(message),
            ("unavailable", ..) => BackendError::BackendUnavailable(message),
            _ => BackendError::Protocol(format!("{kind}: {message}")),
        }
    }
}

pub fn write_frame<W: Write>(out: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    out.write_all(&len.to_be_bytes())?;
    out.write_all(payload)?;
    out.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(input: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "frame exceeds limit",
        ));
    }
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// Client session. Single owner: one connection, requests in sequence.
#[derive(Debug)]
pub struct RemoteBackend {
    stream: TcpStream,
}

impl RemoteBackend {
    pub fn connect(endpoint: &str) -> Result<Self, BackendError> {
        let unavailable =
            |e: io::Error| BackendError::BackendUnavailable(format!("{endpoint}: {e}"));
        let addrs: Vec<SocketAddr> = endpoint.to_socket_addrs().map_err(unavailable)?.collect();
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no address resolved");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) {
                Ok(stream) => {
                    stream
                        .set_read_timeout(Some(IO_TIMEOUT))
                        .map_err(unavailable)?;
                    stream
                        .set_write_timeout(Some(IO_TIMEOUT))
                        .map_err(unavailable)?;
                    stream.set_nodelay(true).map_err(unavailable)?;
                    return Ok(Self { stream });
                }
                Err(e) => last = e,
            }
        }
        Err(unavailable(last))
    }

    fn exchange<T: for<'de> Deserialize<'de>>(
        &mut self,
        request: &Request,
    ) -> Result<T, BackendError> {
        let payload =
            serde_json::to_vec(request).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let io_err = |e: io::Error| BackendError::BackendUnavailable(e.to_string());
        write_frame(&mut self.stream, &payload).map_err(io_err)?;
        let frame = read_frame(&mut self.stream)
            .map_err(io_err)?
            .ok_or_else(|| BackendError::BackendUnavailable("connection closed".into()))?;
        let value: serde_json::Value =
            serde_json::from_slice(&frame).map_err(|e| BackendError::Protocol(e.to_string()))?;
        if value.get("error").is_some() {
            let err: ErrorResponse =
                serde_json::from_value(value).map_err(|e| BackendError::Protocol(e.to_string()))?;
            return Err(err.into_error());
        }
        serde_json::from_value(value).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

impl ModelBackend for RemoteBackend {
    fn next_distribution(
        &mut self,
        context: &[TokenId],
        allowed: Option<&LogitMask>,
        query: Option<&[TokenId]>,
    ) -> Result<Distribution, BackendError> {
        let request = Request::Distribution(DistributionRequest {
            context_tokens: Some(context.to_vec()),
            context_text: None,
            allowed: allowed.map(|m| m.allowed().to_vec()),
            query: query.map(<[TokenId]>::to_vec),
        });
        let response: DistributionResponse = self.exchange(&request)?;
        if let Some(mask) = allowed {
            if !mask.contains(response.argmax) {
                return Err(BackendError::Protocol(format!(
                    "argmax {} outside the allowed set",
                    response.argmax
                )));
            }
        }
        Ok(Distribution {
            probs: response.probs,
            argmax: response.argmax,
        })
    }

    fn tokenize_upstream(
        &mut self,
        texts: &[String],
    ) -> Result<Option<Vec<Vec<TokenId>>>, BackendError> {
        let request = Request::Tokenize(TokenizeRequest {
            tokenize: texts.to_vec(),
        });
        let response: TokenizeResponse = self.exchange(&request)?;
        if response.tokenized.len() != texts.len() {
            return Err(BackendError::Protocol(
                "tokenize response length mismatch".into(),
            ));
        }
        Ok(Some(response.tokenized))
    }
}

/// Connects a fresh session per completion point.
#[derive(Debug, Clone)]
pub struct RemoteFactory {
    pub endpoint: String,
}

impl BackendFactory for RemoteFactory {
    fn open(&self) -> Result<Box<dyn ModelBackend>, BackendError> {
        Ok(Box::new(RemoteBackend::connect(&self.endpoint)?))
    }
}

/// Serves any backend over the protocol; one session per connection.
pub struct RemoteServer {
    listener: TcpListener,
    factory: Arc<dyn BackendFactory>,
    vocab: Arc<Vocabulary>,
}

impl RemoteServer {
    pub fn bind(
        addr: impl ToSocketAddrs,
        factory: Arc<dyn BackendFactory>,
        vocab: Arc<Vocabulary>,
    ) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            factory,
            vocab,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the listener fails.
    pub fn run(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let factory = Arc::clone(&self.factory);
            let vocab = Arc::clone(&self.vocab);
            thread::spawn(move || {
                let _ = serve_connection(stream, factory.as_ref(), &vocab);
            });
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> io::Result<SocketAddr> {
        let addr = self.local_addr()?;
        thread::spawn(move || self.run());
        Ok(addr)
    }
}

fn serve_connection(
    mut stream: TcpStream,
    factory: &dyn BackendFactory,
    vocab: &Vocabulary,
) -> io::Result<()> {
    let mut session = factory.open();
    while let Some(frame) = read_frame(&mut stream)? {
        let reply = match &mut session {
            Ok(backend) => answer(backend.as_mut(), vocab, &frame),
            Err(e) => serde_json::to_vec(&ErrorResponse::from_error(e)),
        }
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        write_frame(&mut stream, &reply)?;
    }
    Ok(())
}

fn answer(
    backend: &mut dyn ModelBackend,
    vocab: &Vocabulary,
    frame: &[u8],
) -> serde_json::Result<Vec<u8>> {
    let request: Request = match serde_json::from_slice(frame) {
        Ok(r) => r,
        Err(e) => {
            let err = BackendError::InvalidRequest(e.to_string());
            return serde_json::to_vec(&ErrorResponse::from_error(&err));
        }
    };
    let result = match request {
        Request::Tokenize(req) => req
            .tokenize
            .iter()
            .map(|text| {
                vocab
                    .tokenize(text)
                    .map(|seq| seq.tokens)
                    .map_err(|e| BackendError::InvalidRequest(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()
            .and_then(|tokenized| {
                serde_json::to_vec(&TokenizeResponse { tokenized })
                    .map_err(|e| BackendError::Protocol(e.to_string()))
            }),
        Request::Distribution(req) => distribution(backend, vocab, req).and_then(|d| {
            serde_json::to_vec(&DistributionResponse {
                probs: d.probs,
                argmax: d.argmax,
            })
            .map_err(|e| BackendError::Protocol(e.to_string()))
        }),
    };
    match result {
        Ok(bytes) => Ok(bytes),
        Err(e) => serde_json::to_vec(&ErrorResponse::from_error(&e)),
    }
}

fn distribution(
    backend: &mut dyn ModelBackend,
    vocab: &Vocabulary,
    req: DistributionRequest,
) -> Result<Distribution, BackendError> {
    let context = match (req.context_tokens, req.context_text) {
        (Some(tokens), None) => tokens,
        (None, Some(text)) => {
            vocab
                .tokenize(&text)
                .map_err(|e| BackendError::InvalidRequest(e.to_string()))?
                .tokens
        }
        _ => {
            return Err(BackendError::InvalidRequest(
                "exactly one of context_tokens / context_text is required".into(),
            ))
        }
    };
    let mask = req.allowed.map(LogitMask::new);
    backend.next_distribution(&context, mask.as_ref(), req.query.as_deref())
}
