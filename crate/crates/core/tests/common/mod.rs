//! Shared test infrastructure: a scripted single-threaded HTTP stub server
//! and synthetic corpus builders.

#![allow(dead_code)]

use ratatool::corpus::{QuerySet, ToolCorpus};
use ratatool::tooldesc::{Attachment, AttachmentKind, Modality, Query, ToolDescription};
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

/// One scripted HTTP response.
#[derive(Clone)]
pub struct StubResponse {
    pub status: u16,
    pub body: String,
}

impl StubResponse {
    pub fn ok(body: &str) -> StubResponse {
        StubResponse {
            status: 200,
            body: body.to_string(),
        }
    }

    pub fn error(status: u16, body: &str) -> StubResponse {
        StubResponse {
            status,
            body: body.to_string(),
        }
    }
}

/// Minimal blocking HTTP server that replays a fixed response script and
/// records every request body. Each connection serves one request
/// (Connection: close). The background thread exits once the script is
/// exhausted.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<String>>>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(script: Vec<StubResponse>) -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let captured = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            for response in script {
                let (mut stream, _) = match listener.accept() {
                    Ok(pair) => pair,
                    Err(_) => return,
                };
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let body_start = loop {
                    let n = match stream.read(&mut chunk) {
                        Ok(0) | Err(_) => return,
                        Ok(n) => n,
                    };
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(pos) = find_header_end(&buf) {
                        break pos;
                    }
                };
                let headers = String::from_utf8_lossy(&buf[..body_start]).to_string();
                let content_length = headers
                    .lines()
                    .find_map(|l| {
                        let (name, value) = l.split_once(':')?;
                        name.eq_ignore_ascii_case("content-length")
                            .then(|| value.trim().parse::<usize>().ok())?
                    })
                    .unwrap_or(0);
                while buf.len() < body_start + content_length {
                    let n = match stream.read(&mut chunk) {
                        Ok(0) | Err(_) => return,
                        Ok(n) => n,
                    };
                    buf.extend_from_slice(&chunk[..n]);
                }
                let body = String::from_utf8_lossy(&buf[body_start..body_start + content_length])
                    .to_string();
                captured.lock().unwrap().push(format!("{headers}\u{1f}{body}"));
                let reply = format!(
                    "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    response.status,
                    response.body.len(),
                    response.body
                );
                let _ = stream.write_all(reply.as_bytes());
                let _ = stream.flush();
            }
        });
        StubServer {
            url,
            requests,
            handle: Some(handle),
        }
    }

    /// Request bodies only (headers stripped).
    pub fn bodies(&self) -> Vec<String> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .map(|r| r.split('\u{1f}').nth(1).unwrap_or("").to_string())
            .collect()
    }

    /// Raw header blocks, for auth/header assertions.
    pub fn headers(&self) -> Vec<String> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .map(|r| r.split('\u{1f}').next().unwrap_or("").to_string())
            .collect()
    }

    pub fn call_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn join(mut self) {
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        // Unblock the accept loop if the script was not fully consumed.
        if let Some(handle) = self.handle.take() {
            let _ = std::net::TcpStream::connect(self.url.trim_start_matches("http://"));
            let _ = handle.join();
        }
    }
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

const WORDS: &[&str] = &[
    "summarize", "translate", "classify", "detect", "transcribe", "caption",
    "segment", "denoise", "enhance", "extract", "generate", "rank", "parse",
    "align", "cluster", "label", "filter", "convert", "analyze", "predict",
];

fn modality_of(i: usize) -> Modality {
    match i % 3 {
        0 => Modality::Text,
        1 => Modality::Image,
        _ => Modality::Audio,
    }
}

/// `n` tools spread round-robin over the three modalities, each with a
/// distinct deterministic description.
pub fn synthetic_corpus(n: usize) -> ToolCorpus {
    let tools = (0..n)
        .map(|i| {
            let verb = WORDS[i % WORDS.len()];
            let noun = WORDS[(i * 7 + 3) % WORDS.len()];
            ToolDescription {
                tool_id: format!("tool-{i:04}"),
                modality: modality_of(i),
                input: format!("{noun} payload variant {i}"),
                process: format!("{verb} the {noun} using method {i}"),
                output: format!("{verb} result {i}"),
                source: None,
            }
        })
        .collect();
    ToolCorpus {
        corpus_id: "synthetic".into(),
        tools,
    }
}

/// `n` queries cycling over the corpus tools; each query's ground truth is a
/// corpus tool and its attachments match that tool's modality.
pub fn synthetic_queries(corpus: &ToolCorpus, n: usize) -> QuerySet {
    let queries = (0..n)
        .map(|i| {
            let tool = &corpus.tools[i % corpus.tools.len()];
            let attachments = match tool.modality {
                Modality::Text => vec![],
                Modality::Image => vec![Attachment {
                    kind: AttachmentKind::Image,
                    media_type: "image/png".into(),
                    payload_ref: format!("img-{i}.png"),
                }],
                Modality::Audio => vec![Attachment {
                    kind: AttachmentKind::Audio,
                    media_type: "audio/wav".into(),
                    payload_ref: format!("aud-{i}.wav"),
                }],
            };
            Query {
                query_id: format!("query-{i:05}"),
                text: format!("please {} for request {i}", tool.process),
                attachments,
                gt_tool_id: Some(tool.tool_id.clone()),
            }
        })
        .collect();
    QuerySet {
        set_id: "synthetic".into(),
        queries,
    }
}
