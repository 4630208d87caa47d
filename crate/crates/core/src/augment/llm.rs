//! Optional LLM rewrite path. The endpoint receives `{template_id, fill}` and
//! answers `{text}`; every completion is re-validated before it becomes a
//! training record.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{plan_replacements, validate_record, Prompt, ReplacementMode, TrainingRecord};
use crate::error::{Error, Result};
use crate::lexicon::ConceptLexicon;
use crate::textcore::{self, Span};
use crate::world::SceneSpec;
use crate::augment::AlignedPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    CorrectDesc,
    ClosedSet,
    OpenSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub template_id: TemplateId,
    pub fill: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewriteResponse {
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct Endpoint {
    pub url: String,
    pub attempts: usize,
    pub timeout: Duration,
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Endpoint {
            url: url.into(),
            attempts: 3,
            timeout: Duration::from_secs(10),
        }
    }
}

/// Posts a rewrite request and returns the raw completion text. Transport
/// failures are retried up to `endpoint.attempts` times.
pub fn external_llm_rewrite(
    endpoint: &Endpoint,
    template_id: TemplateId,
    fill: &BTreeMap<String, String>,
) -> Result<String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(endpoint.timeout))
        .build()
        .into();
    let body = RewriteRequest {
        template_id,
        fill: fill.clone(),
    };
    let attempts = endpoint.attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(50 * attempt as u64));
        }
        match agent.post(&endpoint.url).send_json(&body) {
            Ok(mut resp) => match resp.body_mut().read_json::<RewriteResponse>() {
                Ok(r) => return Ok(r.text),
                Err(e) => last = format!("malformed response: {e}"),
            },
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::EndpointUnavailable {
        attempts,
        message: last,
    })
}

const PAIR_SEP: &str = " ; ";
const ARROW: &str = " -> ";

/// Encodes `(original, replacement)` pairs for the `replacements` fill key.
pub fn encode_replacements(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(a, b)| format!("{a}{ARROW}{b}"))
        .collect::<Vec<_>>()
        .join(PAIR_SEP)
}

pub fn decode_replacements(text: &str) -> Vec<(String, String)> {
    text.split(PAIR_SEP.trim())
        .filter_map(|p| {
            let (a, b) = p.split_once(ARROW.trim())?;
            Some((a.trim().to_string(), b.trim().to_string()))
        })
        .collect()
}

/// Rewrites a description through the endpoint: targets and replacements
/// are chosen locally, the endpoint produces the text, and the completion is
/// aligned back to the correct response and validated.
pub fn augment_description_llm<R: Rng + ?Sized>(
    endpoint: &Endpoint,
    scene: &SceneSpec,
    prompt: &Prompt,
    lexicon: &ConceptLexicon,
    mode: ReplacementMode,
    k_targets: usize,
    rng: &mut R,
) -> Result<TrainingRecord> {
    let tokens = textcore::words(&prompt.response);
    let plan = plan_replacements(scene, &tokens, lexicon, mode, k_targets, rng)?;
    let replacements: Vec<(String, String)> = plan
        .iter()
        .map(|r| (tokens[r.correct.start..r.correct.end].join(" "), r.words.join(" ")))
        .collect();
    let mut fill = BTreeMap::new();
    fill.insert("text".to_string(), prompt.response.clone());
    fill.insert("replacements".to_string(), encode_replacements(&replacements));
    fill.insert(
        "forbidden".to_string(),
        replacements.iter().map(|(a, _)| a.as_str()).collect::<Vec<_>>().join(", "),
    );
    let template = match mode {
        ReplacementMode::Closed => TemplateId::ClosedSet,
        ReplacementMode::Open => TemplateId::OpenSet,
    };
    let completion = external_llm_rewrite(endpoint, template, &fill)?;
    let spans: Vec<Span> = plan.iter().map(|r| r.correct).collect();
    let requested: Vec<String> = replacements.into_iter().map(|(_, b)| b).collect();
    record_from_completion(scene, prompt, &completion, &spans, &requested, lexicon)
}

/// Aligns a completion against the correct response, given the correct
/// spans that were asked to change, and validates the resulting record.
/// `requested` optionally holds the replacement text asked for at each span;
/// it is only consulted to split replacements with no unchanged text between.
pub fn record_from_completion(
    scene: &SceneSpec,
    prompt: &Prompt,
    completion: &str,
    correct_spans: &[Span],
    requested: &[String],
    lexicon: &ConceptLexicon,
) -> Result<TrainingRecord> {
    let c = textcore::words(&prompt.response);
    let h = textcore::words(completion);
    let reject = |msg: String| Error::CompletionRejected(msg);

    let replaced: Vec<String> = correct_spans
        .iter()
        .map(|s| c[s.start..s.end].join(" "))
        .collect();
    // a replaced concept may only survive where the response kept it
    let kept_counts = |name: &str, toks: &[String], skip: &[Span]| {
        lexicon
            .find_mentions(toks)
            .into_iter()
            .filter(|m| m.2 == name && !skip.iter().any(|s| s.contains(m.0)))
            .count()
    };
    for name in &replaced {
        if kept_counts(name, &h, &[]) > kept_counts(name, &c, correct_spans) {
            return Err(reject(format!("completion contains forbidden word `{name}`")));
        }
    }

    let mut pairs = Vec::with_capacity(correct_spans.len());
    let (mut cp, mut hp) = (0usize, 0usize);
    for (i, span) in correct_spans.iter().enumerate() {
        let before = &c[cp..span.start];
        if h.len() < hp + before.len() || h[hp..hp + before.len()] != *before {
            return Err(reject(format!(
                "completion diverges from the original before replacement {i}"
            )));
        }
        let h_start = hp + before.len();
        let anchor_end = correct_spans.get(i + 1).map_or(c.len(), |n| n.start);
        let anchor = &c[span.end..anchor_end];
        // the replacement ends where the next unchanged segment begins
        let h_end = if anchor.is_empty() {
            if i + 1 == correct_spans.len() {
                h.len()
            } else {
                let want = requested.get(i).map(|t| textcore::words(t)).unwrap_or_default();
                if want.is_empty() || !h[h_start..].starts_with(&want) {
                    return Err(reject("adjacent replacements are ambiguous".into()));
                }
                h_start + want.len()
            }
        } else {
            let tail_fixed = i + 1 == correct_spans.len();
            let found = if tail_fixed {
                (h.len() >= anchor.len() && h[h.len() - anchor.len()..] == *anchor)
                    .then(|| h.len() - anchor.len())
            } else {
                textcore::locate_phrase(&h, anchor, h_start + 1).map(|s| s.start)
            };
            found.ok_or_else(|| reject(format!("cannot align text after replacement {i}")))?
        };
        if h_end <= h_start {
            return Err(reject(format!("replacement {i} is empty")));
        }
        pairs.push(AlignedPair {
            correct_span: *span,
            hallucinated_span: Span { start: h_start, end: h_end },
            correct_text: c[span.start..span.end].join(" "),
            hallucinated_text: h[h_start..h_end].join(" "),
        });
        cp = span.end;
        hp = h_end;
    }
    let record = TrainingRecord {
        id: format!("{}/{}", scene.id, prompt.task),
        task: prompt.task,
        instruction: textcore::normalize(&prompt.instruction),
        correct: c.join(" "),
        hallucinated: h.join(" "),
        pairs,
        scene_id: scene.id.clone(),
    };
    validate_record(&record, scene, lexicon).map_err(|e| reject(e.to_string()))?;
    Ok(record)
}

type Responder = dyn Fn(&RewriteRequest) -> Option<String> + Send + Sync;

/// Minimal HTTP server speaking the endpoint protocol, for tests and local
/// runs without a real model.
pub struct MockEndpoint {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockEndpoint {
    /// Serves completions from `responder`; `None` answers HTTP 500.
    pub fn spawn<F>(addr: &str, responder: F) -> Result<Self>
    where
        F: Fn(&RewriteRequest) -> Option<String> + Send + Sync + 'static,
    {
        let listener = TcpListener::bind(addr).map_err(|e| Error::io(addr, e))?;
        let addr = listener.local_addr().map_err(|e| Error::io("mock endpoint", e))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let responder: Arc<Responder> = Arc::new(responder);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let _ = serve(stream, responder.as_ref());
                }
            }
        });
        Ok(MockEndpoint {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    /// Applies the requested replacements literally, like a perfectly
    /// obedient rewriter.
    pub fn rule_based(addr: &str) -> Result<Self> {
        Self::spawn(addr, |req| Some(rule_based_rewrite(req)))
    }

    pub fn url(&self) -> String {
        format!("http://{}/rewrite", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server thread exits (it never does on its own).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockEndpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Replaces each requested phrase once, left to right.
pub fn rule_based_rewrite(req: &RewriteRequest) -> String {
    let text = req.fill.get("text").cloned().unwrap_or_default();
    let mut tokens = textcore::words(&text);
    let mut cursor = 0;
    let replacements = decode_replacements(req.fill.get("replacements").map_or("", String::as_str));
    for (from, to) in replacements {
        let from_w = textcore::words(&from);
        if let Some(span) = textcore::locate_phrase(&tokens, &from_w, cursor) {
            let to_w = textcore::words(&to);
            cursor = span.start + to_w.len();
            tokens.splice(span.start..span.end, to_w);
        }
    }
    tokens.join(" ")
}

fn serve(stream: TcpStream, responder: &Responder) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut content_length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        if let Some((k, v)) = trimmed.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let reply = serde_json::from_slice::<RewriteRequest>(&body)
        .ok()
        .and_then(|req| responder(&req));
    let (status, payload) = match reply {
        Some(text) => (
            "200 OK",
            serde_json::to_string(&RewriteResponse { text }).unwrap_or_default(),
        ),
        None => ("500 Internal Server Error", "{}".to_string()),
    };
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    stream.flush()
}
