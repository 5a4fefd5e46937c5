//! Frozen relevance scorers: the mean teacher-forced log-likelihood of a
//! question given a passage.
//!
//! The additive constant and the uniform passage prior in the Bayes-rule
//! derivation of this score are never materialized: the teacher
//! distribution is a softmax over candidates, which is shift invariant.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Passage, Question, TokenId};

pub const PROTOCOL_VERSION: u32 = 1;

/// Instruction appended to `title ++ text` when prompting a language model.
pub const INSTRUCTION: &str = "Please write a question based on this passage.";

#[derive(Debug, Error)]
pub enum TeacherError {
    /// Unreachable, timed out, or disconnected. Safe to retry.
    #[error("teacher unavailable: {0}")]
    Unavailable(String),
    #[error("teacher protocol error: {0}")]
    Protocol(String),
    #[error("invalid teacher input: {0}")]
    Input(String),
}

impl TeacherError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TeacherError::Unavailable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceScore {
    pub passage: usize,
    /// Mean token log-probability, natural log.
    pub value: f64,
}

/// Anything that scores candidate passages for a question. Implementations
/// take `&self`: the teacher is never updated.
pub trait RelevanceScorer: Send + Sync {
    /// One mean log-probability per candidate, in candidate order.
    fn score_candidates(&self, question: &Question, candidates: &[&Passage])
        -> Result<Vec<f64>, TeacherError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TeacherConfig {
    Toy {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    External {
        /// `tcp:HOST:PORT` or `exec:PROGRAM ARGS...`.
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        #[serde(default = "default_retries")]
        retries: usize,
    },
}

fn default_alpha() -> f64 {
    1.0
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_in_flight() -> usize {
    4
}
fn default_retries() -> usize {
    2
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig::Toy { alpha: 1.0 }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            TeacherConfig::Toy { alpha } if !(*alpha > 0.0 && alpha.is_finite()) => {
                Err(format!("teacher.alpha must be positive, got {alpha}"))
            }
            TeacherConfig::External { endpoint, max_in_flight, .. } => {
                Endpoint::parse(endpoint)?;
                if *max_in_flight == 0 {
                    return Err("teacher.max_in_flight must be at least 1".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn connect(&self, vocab_size: usize) -> Result<Box<dyn RelevanceScorer>, TeacherError> {
        self.validate().map_err(TeacherError::Input)?;
        Ok(match self {
            TeacherConfig::Toy { alpha } => Box::new(ToyTeacher::new(*alpha, vocab_size)),
            TeacherConfig::External {
                endpoint,
                timeout_ms,
                max_in_flight,
                retries,
            } => Box::new(ExternalTeacher::connect(
                &Endpoint::parse(endpoint).map_err(TeacherError::Input)?,
                Duration::from_millis(*timeout_ms),
                *max_in_flight,
                *retries,
            )?),
        })
    }
}

/// `log[(count(token in passage) + α) / (len(passage) + α·|V|)]`.
///
/// The prefix is accepted for parity with autoregressive teachers; this
/// copy-smoothed unigram model ignores it.
pub fn toy_token_logprob(
    token: TokenId,
    _prefix: &[TokenId],
    passage: &[TokenId],
    alpha: f64,
    vocab_size: usize,
) -> f64 {
    let count = passage.iter().filter(|&&t| t == token).count() as f64;
    ((count + alpha) / (passage.len() as f64 + alpha * vocab_size as f64)).ln()
}

/// Copy-smoothed unigram stand-in for a language-model teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTeacher {
    pub alpha: f64,
    pub vocab_size: usize,
}

impl ToyTeacher {
    pub fn new(alpha: f64, vocab_size: usize) -> Self {
        ToyTeacher { alpha, vocab_size }
    }

    /// Mean over question positions of the token log-probability given the
    /// preceding question tokens and the passage (title then text).
    pub fn relevance_score(&self, question: &[TokenId], passage: &[TokenId]) -> Result<f64, TeacherError> {
        if question.is_empty() {
            return Err(TeacherError::Input("question has no tokens".into()));
        }
        let total: f64 = (0..question.len())
            .map(|t| toy_token_logprob(question[t], &question[..t], passage, self.alpha, self.vocab_size))
            .sum();
        Ok(total / question.len() as f64)
    }
}

impl RelevanceScorer for ToyTeacher {
    fn score_candidates(&self, question: &Question, candidates: &[&Passage]) -> Result<Vec<f64>, TeacherError> {
        if candidates.is_empty() {
            return Err(TeacherError::Input("no candidates to score".into()));
        }
        candidates
            .iter()
            .map(|p| self.relevance_score(&question.tokens, &p.content_tokens()))
            .collect()
    }
}

/// Scores every candidate and pairs each value with its candidate slot.
pub fn score_candidates(
    scorer: &dyn RelevanceScorer,
    question: &Question,
    candidates: &[&Passage],
) -> Result<Vec<RelevanceScore>, TeacherError> {
    let values = scorer.score_candidates(question, candidates)?;
    if values.len() != candidates.len() {
        return Err(TeacherError::Protocol(format!(
            "{} scores for {} candidates",
            values.len(),
            candidates.len()
        )));
    }
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(passage, value)| RelevanceScore { passage, value })
        .collect())
}

/// The prompt a language-model teacher conditions on.
pub fn teacher_prompt(title: &str, text: &str) -> String {
    let body = if title.is_empty() {
        text.to_string()
    } else {
        format!("{title} {text}")
    };
    format!("{body} {INSTRUCTION}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePassage {
    pub id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringRequest {
    pub v: u32,
    pub qid: String,
    pub question: String,
    pub passages: Vec<WirePassage>,
}

impl ScoringRequest {
    pub fn new(question: &Question, candidates: &[&Passage]) -> Self {
        ScoringRequest {
            v: PROTOCOL_VERSION,
            qid: question.id.clone(),
            question: question.text.clone(),
            passages: candidates
                .iter()
                .map(|p| WirePassage {
                    id: p.id.clone(),
                    title: p.title.clone(),
                    text: p.text.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringReply {
    pub v: u32,
    pub qid: String,
    pub scores: Vec<f64>,
}

impl ScoringReply {
    /// Checks version, length, and that every score is a finite log-probability.
    pub fn validate(&self, expected_len: usize) -> Result<(), TeacherError> {
        if self.v != PROTOCOL_VERSION {
            return Err(TeacherError::Protocol(format!("reply version {}", self.v)));
        }
        if self.scores.len() != expected_len {
            return Err(TeacherError::Protocol(format!(
                "qid {:?}: {} scores for {} passages",
                self.qid,
                self.scores.len(),
                expected_len
            )));
        }
        if let Some(s) = self.scores.iter().find(|s| !s.is_finite() || **s > 0.0) {
            return Err(TeacherError::Protocol(format!(
                "qid {:?}: score {s} is not a log-probability",
                self.qid
            )));
        }
        Ok(())
    }
}

/// Parses one reply line. Only the qid is needed to route a malformed reply.
fn parse_reply(line: &str) -> Result<ScoringReply, (Option<String>, String)> {
    serde_json::from_str::<ScoringReply>(line).map_err(|e| {
        let qid = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("qid").and_then(|q| q.as_str()).map(str::to_string));
        (qid, e.to_string())
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Exec(Vec<String>),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self, String> {
        if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.is_empty() {
                return Err("tcp endpoint needs HOST:PORT".into());
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err("exec endpoint needs a program".into());
            }
            Ok(Endpoint::Exec(argv))
        } else {
            Err(format!("unknown teacher endpoint {s:?} (expected tcp: or exec:)"))
        }
    }
}

type Routed = Result<ScoringReply, String>;

#[derive(Default)]
struct Mailbox {
    replies: HashMap<String, Routed>,
    waiting: HashMap<String, usize>,
    closed: Option<String>,
}

struct Shared {
    mailbox: Mutex<Mailbox>,
    arrived: Condvar,
    permits: Mutex<usize>,
    freed: Condvar,
}

/// Client for the newline-delimited JSON teacher protocol.
///
/// Requests go out on one writer; a reader thread routes replies by qid, so
/// replies may arrive in any order. At most `max_in_flight` requests are
/// outstanding at once.
pub struct ExternalTeacher {
    writer: Mutex<Box<dyn Write + Send>>,
    shared: Arc<Shared>,
    timeout: Duration,
    retries: usize,
    child: Option<Mutex<Child>>,
}

impl ExternalTeacher {
    pub fn connect(
        endpoint: &Endpoint,
        timeout: Duration,
        max_in_flight: usize,
        retries: usize,
    ) -> Result<Self, TeacherError> {
        let unavailable = |e: std::io::Error| TeacherError::Unavailable(e.to_string());
        let (writer, reader, child): (Box<dyn Write + Send>, Box<dyn std::io::Read + Send>, _) =
            match endpoint {
                Endpoint::Tcp(addr) => {
                    let stream = TcpStream::connect(addr).map_err(unavailable)?;
                    let read_half = stream.try_clone().map_err(unavailable)?;
                    (Box::new(stream), Box::new(read_half), None)
                }
                Endpoint::Exec(argv) => {
                    let mut child = Command::new(&argv[0])
                        .args(&argv[1..])
                        .stdin(Stdio::piped())
                        .stdout(Stdio::piped())
                        .spawn()
                        .map_err(unavailable)?;
                    let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
                    let stdout = child.stdout.take().expect("piped stdout");
                    (Box::new(stdin), Box::new(stdout), Some(Mutex::new(child)))
                }
            };
        Ok(Self::from_streams(writer, reader, child, timeout, max_in_flight, retries))
    }

    fn from_streams(
        writer: Box<dyn Write + Send>,
        reader: Box<dyn std::io::Read + Send>,
        child: Option<Mutex<Child>>,
        timeout: Duration,
        max_in_flight: usize,
        retries: usize,
    ) -> Self {
        let shared = Arc::new(Shared {
            mailbox: Mutex::new(Mailbox::default()),
            arrived: Condvar::new(),
            permits: Mutex::new(max_in_flight.max(1)),
            freed: Condvar::new(),
        });
        let routing = Arc::clone(&shared);
        thread::spawn(move || route_replies(reader, &routing));
        ExternalTeacher {
            writer: Mutex::new(writer),
            shared,
            timeout,
            retries,
            child,
        }
    }

    fn acquire(&self) {
        let mut permits = self.shared.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.shared.freed.wait(permits).unwrap();
        }
        *permits -= 1;
    }

    fn release(&self) {
        *self.shared.permits.lock().unwrap() += 1;
        self.shared.freed.notify_one();
    }

    fn round_trip(&self, request: &ScoringRequest) -> Result<ScoringReply, TeacherError> {
        let qid = request.qid.clone();
        {
            let mut mb = self.shared.mailbox.lock().unwrap();
            if let Some(reason) = &mb.closed {
                return Err(TeacherError::Unavailable(reason.clone()));
            }
            // A reply left over from an abandoned attempt is discarded.
            mb.replies.remove(&qid);
            *mb.waiting.entry(qid.clone()).or_default() += 1;
        }
        let line = serde_json::to_string(request).expect("request serializes");
        let sent = {
            let mut w = self.writer.lock().unwrap();
            writeln!(w, "{line}").and_then(|_| w.flush())
        };
        let deadline = Instant::now() + self.timeout;
        let mut mb = self.shared.mailbox.lock().unwrap();
        let outcome = match sent {
            Err(e) => Err(TeacherError::Unavailable(e.to_string())),
            Ok(()) => loop {
                if let Some(reply) = mb.replies.remove(&qid) {
                    break reply.map_err(TeacherError::Protocol);
                }
                if let Some(reason) = &mb.closed {
                    break Err(TeacherError::Unavailable(reason.clone()));
                }
                let now = Instant::now();
                if now >= deadline {
                    break Err(TeacherError::Unavailable(format!(
                        "timed out after {:?} waiting for qid {qid:?}",
                        self.timeout
                    )));
                }
                mb = self.shared.arrived.wait_timeout(mb, deadline - now).unwrap().0;
            },
        };
        if let Some(n) = mb.waiting.get_mut(&qid) {
            *n -= 1;
            if *n == 0 {
                mb.waiting.remove(&qid);
            }
        }
        outcome
    }

    /// One batched request per question; retried on transport failures.
    pub fn score(&self, question: &Question, candidates: &[&Passage]) -> Result<Vec<f64>, TeacherError> {
        if candidates.is_empty() {
            return Err(TeacherError::Input("no candidates to score".into()));
        }
        let request = ScoringRequest::new(question, candidates);
        let mut attempt = 0;
        loop {
            self.acquire();
            let result = self.round_trip(&request);
            self.release();
            match result {
                Ok(reply) => {
                    reply.validate(candidates.len())?;
                    return Ok(reply.scores);
                }
                Err(e) if e.is_retryable() && attempt < self.retries => attempt += 1,
                Err(e) => return Err(e),
            }
        }
    }
}

impl RelevanceScorer for ExternalTeacher {
    fn score_candidates(&self, question: &Question, candidates: &[&Passage]) -> Result<Vec<f64>, TeacherError> {
        self.score(question, candidates)
    }
}

impl Drop for ExternalTeacher {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            let mut child = child.lock().unwrap();
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn route_replies(reader: Box<dyn std::io::Read + Send>, shared: &Shared) {
    let (tx, rx) = mpsc::channel::<String>();
    // Lines are forwarded through a channel so a blocked read never holds
    // the mailbox lock.
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            match line {
                Ok(l) => {
                    if tx.send(l).is_err() {
                        return;
                    }
                }
                Err(_) => return,
            }
        }
    });
    for line in rx {
        if line.trim().is_empty() {
            continue;
        }
        let (qid, routed) = match parse_reply(&line) {
            Ok(reply) => (Some(reply.qid.clone()), Ok(reply)),
            Err((qid, msg)) => (qid, Err(format!("malformed reply: {msg}"))),
        };
        let mut mb = shared.mailbox.lock().unwrap();
        match qid {
            Some(q) if mb.waiting.contains_key(&q) => {
                mb.replies.insert(q, routed);
            }
            // Nobody is waiting: a late reply to an abandoned request.
            Some(_) => {}
            None => {
                // Unroutable garbage poisons every waiter; none can be
                // matched reliably any more.
                let msg = routed.err().unwrap_or_default();
                let waiting: Vec<String> = mb.waiting.keys().cloned().collect();
                for q in waiting {
                    mb.replies.insert(q, Err(msg.clone()));
                }
            }
        }
        drop(mb);
        shared.arrived.notify_all();
    }
    let mut mb = shared.mailbox.lock().unwrap();
    mb.closed = Some("teacher closed the connection".into());
    drop(mb);
    shared.arrived.notify_all();
}

/// Serves the wire protocol with any in-process scorer, one request per
/// line. Used for conformance tests and as a local stand-in teacher.
pub fn serve_lines<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    scorer: &dyn Fn(&ScoringRequest) -> Result<Vec<f64>, String>,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<ScoringRequest>(&line) {
            Ok(req) if req.v == PROTOCOL_VERSION => match scorer(&req) {
                Ok(scores) => serde_json::json!({"v": PROTOCOL_VERSION, "qid": req.qid, "scores": scores}),
                Err(e) => serde_json::json!({"v": PROTOCOL_VERSION, "qid": req.qid, "error": e}),
            },
            Ok(req) => serde_json::json!({"v": PROTOCOL_VERSION, "qid": req.qid, "error": "unsupported version"}),
            Err(e) => serde_json::json!({"v": PROTOCOL_VERSION, "error": e.to_string()}),
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}
