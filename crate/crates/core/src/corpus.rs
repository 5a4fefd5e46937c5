//! Passage and question ingestion, vocabulary construction, tokenization and
//! evidence segmentation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token id type. Reserved ids occupy `0..4`.
pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const SEP: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;

const RESERVED: [&str; 4] = ["<unk>", "<sep>", "<bos>", "<eos>"];

/// A trailing window shorter than this is folded into the previous segment.
pub const MIN_TAIL_WORDS: usize = 10;

/// Default evidence window, in words.
pub const DEFAULT_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate id {id:?} (lines {first} and {second})")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("segmentation window must be at least 1")]
    ZeroWindow,
    #[error("vocabulary file {path}: {reason}")]
    BadVocabulary { path: String, reason: String },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// A record-level problem. Ingestion reports these and keeps going.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub reason: String,
}

/// Raw passage as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

/// Raw question as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    pub title_tokens: Vec<TokenId>,
    pub text_tokens: Vec<TokenId>,
}

impl Passage {
    pub fn new(record: PassageRecord, vocab: &Vocabulary) -> Self {
        let title_tokens = tokenize(&record.title, vocab);
        let text_tokens = tokenize(&record.text, vocab);
        Passage {
            id: record.id,
            title: record.title,
            text: record.text,
            title_tokens,
            text_tokens,
        }
    }

    /// Passage-encoder input: `title ++ <sep> ++ text`.
    pub fn encoder_input(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.title_tokens.len() + 1 + self.text_tokens.len());
        out.extend_from_slice(&self.title_tokens);
        out.push(SEP);
        out.extend_from_slice(&self.text_tokens);
        out
    }

    /// Title followed by text, no separator.
    pub fn content_tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.title_tokens.len() + self.text_tokens.len());
        out.extend_from_slice(&self.title_tokens);
        out.extend_from_slice(&self.text_tokens);
        out
    }

    pub fn record(&self) -> PassageRecord {
        PassageRecord {
            id: self.id.clone(),
            title: self.title.clone(),
            text: self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub answers: Option<Vec<String>>,
}

impl Question {
    pub fn new(record: QuestionRecord, vocab: &Vocabulary) -> Self {
        let tokens = tokenize(&record.question, vocab);
        Question {
            id: record.id,
            text: record.question,
            tokens,
            answers: record.answers,
        }
    }
}

/// Token ↔ id map. Ids `0..4` are the reserved markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered list of non-reserved tokens.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED {
            vocab.push(t.to_string());
        }
        for t in tokens {
            vocab.push(t.into());
        }
        vocab
    }

    fn push(&mut self, token: String) {
        if self.ids.contains_key(&token) {
            return;
        }
        self.ids.insert(token.clone(), self.tokens.len() as TokenId);
        self.tokens.push(token);
    }

    /// Counts words across `texts` and keeps those seen at least `min_count`
    /// times, ordered by descending count then lexicographically.
    pub fn from_texts<'a, I>(texts: I, min_count: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for text in texts {
            seen_any = true;
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t)))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Space-joined surface form of `ids`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in id order (reserved markers included).
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(|e| CorpusError::io(path, e))?;
        }
        w.flush().map_err(|e| CorpusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        let mut tokens = Vec::new();
        for line in BufReader::new(file).lines() {
            tokens.push(line.map_err(|e| CorpusError::io(path, e))?);
        }
        let bad = |reason: String| CorpusError::BadVocabulary {
            path: path.display().to_string(),
            reason,
        };
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(bad("missing reserved header".into()));
        }
        let n = tokens.len();
        let vocab = Vocabulary::from_tokens(tokens.into_iter().skip(RESERVED.len()));
        if vocab.len() != n {
            return Err(bad("duplicate token".into()));
        }
        Ok(vocab)
    }
}

/// Lowercases and splits on anything that is not alphanumeric. Punctuation
/// never survives into a word.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    split_words(text)
        .iter()
        .map(|w| vocab.id(w).unwrap_or(UNK))
        .collect()
}

/// Result of reading a newline-delimited JSON file.
#[derive(Debug, Clone)]
pub struct Ingested<T> {
    pub items: Vec<T>,
    pub rejected: Vec<RecordError>,
}

fn read_jsonl<R, T, F>(path: &Path, mut convert: F) -> Result<Ingested<T>, CorpusError>
where
    R: for<'de> Deserialize<'de>,
    F: FnMut(R) -> Result<(String, T), String>,
{
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut items = Vec::new();
    let mut rejected = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: R = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RecordError {
                    line: line_no,
                    reason: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        match convert(record) {
            Ok((id, item)) => {
                if let Some(&first) = seen.get(&id) {
                    return Err(CorpusError::DuplicateId {
                        id,
                        first,
                        second: line_no,
                    });
                }
                seen.insert(id, line_no);
                items.push(item);
            }
            Err(reason) => rejected.push(RecordError {
                line: line_no,
                reason,
            }),
        }
    }
    Ok(Ingested { items, rejected })
}

/// Reads and tokenizes a passage file. Records whose text tokenizes to
/// nothing are rejected; an empty title is allowed.
pub fn ingest_passages(path: &Path, vocab: &Vocabulary) -> Result<Ingested<Passage>, CorpusError> {
    read_jsonl(path, |r: PassageRecord| {
        let p = Passage::new(r, vocab);
        if p.text_tokens.is_empty() {
            return Err(format!("passage {:?} has no tokens", p.id));
        }
        Ok((p.id.clone(), p))
    })
}

pub fn ingest_questions(path: &Path, vocab: &Vocabulary) -> Result<Ingested<Question>, CorpusError> {
    read_jsonl(path, |r: QuestionRecord| {
        let q = Question::new(r, vocab);
        if q.tokens.is_empty() {
            return Err(format!("question {:?} has no tokens", q.id));
        }
        Ok((q.id.clone(), q))
    })
}

/// Reads raw passage records (title and text) without tokenizing.
pub fn read_passage_records(path: &Path) -> Result<Ingested<PassageRecord>, CorpusError> {
    read_jsonl(path, |r: PassageRecord| Ok((r.id.clone(), r)))
}

/// Builds the vocabulary over titles and texts of a passage file.
pub fn build_vocabulary(path: &Path, min_count: usize) -> Result<Vocabulary, CorpusError> {
    let records = read_passage_records(path)?.items;
    if records.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Vocabulary::from_texts(
        records
            .iter()
            .flat_map(|r| [r.title.as_str(), r.text.as_str()]),
        min_count,
    )
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

/// Splits an article into consecutive non-overlapping windows of `window`
/// whitespace-delimited words. Segments get ids `"{article_id}-{k}"`.
pub fn segment_document(
    article_id: &str,
    title: &str,
    text: &str,
    window: usize,
) -> Result<Vec<PassageRecord>, CorpusError> {
    if window == 0 {
        return Err(CorpusError::ZeroWindow);
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut chunks: Vec<&[&str]> = words.chunks(window).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < MIN_TAIL_WORDS) {
        let tail = chunks.pop().unwrap().len();
        let start = (chunks.len() - 1) * window;
        let last = chunks.last_mut().unwrap();
        *last = &words[start..start + last.len() + tail];
    }
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(k, c)| PassageRecord {
            id: format!("{article_id}-{k}"),
            title: title.to_string(),
            text: c.join(" "),
        })
        .collect())
}
