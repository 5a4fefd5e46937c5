//! Okapi BM25 over tokenized passages. Used as the sparse baseline and as
//! the hard-negative miner for candidate ablations.

use std::collections::HashMap;

use crate::corpus::{Passage, TokenId};

pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;

#[derive(Debug, Clone)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    avgdl: f64,
    doc_len: Vec<usize>,
    ids: Vec<String>,
    /// term → (passage, term frequency), passages ascending.
    postings: HashMap<TokenId, Vec<(usize, u32)>>,
}

impl Bm25Index {
    pub fn new(passages: &[Passage]) -> Self {
        Self::with_params(passages, DEFAULT_K1, DEFAULT_B)
    }

    /// Indexes title and text tokens of every passage.
    pub fn with_params(passages: &[Passage], k1: f64, b: f64) -> Self {
        let mut postings: HashMap<TokenId, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            let tokens = p.content_tokens();
            doc_len.push(tokens.len());
            let mut tf: HashMap<TokenId, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((i, c));
            }
        }
        // Integer total keeps avgdl independent of passage order.
        let total: usize = doc_len.iter().sum();
        let avgdl = if passages.is_empty() {
            0.0
        } else {
            total as f64 / passages.len() as f64
        };
        Bm25Index {
            k1,
            b,
            avgdl,
            doc_len,
            ids: passages.iter().map(|p| p.id.clone()).collect(),
            postings,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    /// `ln((N − df + 0.5)/(df + 0.5) + 1)`.
    pub fn idf(&self, term: TokenId) -> f64 {
        let n = self.len() as f64;
        let df = self.postings.get(&term).map_or(0, Vec::len) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Score of every passage for the distinct terms of `query`.
    pub fn scores(&self, query: &[TokenId]) -> Vec<f64> {
        let mut terms: Vec<TokenId> = query.to_vec();
        terms.sort_unstable();
        terms.dedup();
        let mut scores = vec![0.0; self.len()];
        for t in terms {
            let Some(list) = self.postings.get(&t) else {
                continue;
            };
            let idf = self.idf(t);
            for &(doc, tf) in list {
                let tf = f64::from(tf);
                let norm = 1.0 - self.b + self.b * self.doc_len[doc] as f64 / self.avgdl;
                scores[doc] += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        scores
    }

    /// Top `k` passages as `(passage index, score)`, by score then passage id.
    pub fn rank(&self, query: &[TokenId], k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.scores(query).into_iter().enumerate().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
        });
        ranked.truncate(k);
        ranked
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{PassageRecord, Vocabulary};
    use proptest::prelude::*;

    fn corpus(texts: &[(&str, &str)]) -> (Vocabulary, Vec<Passage>) {
        let vocab = Vocabulary::from_texts(texts.iter().map(|t| t.1), 1).unwrap();
        let ps = texts
            .iter()
            .map(|(id, text)| {
                Passage::new(
                    PassageRecord {
                        id: id.to_string(),
                        title: String::new(),
                        text: text.to_string(),
                    },
                    &vocab,
                )
            })
            .collect();
        (vocab, ps)
    }

    #[test]
    fn absent_term_scores_zero() {
        let (_, ps) = corpus(&[("a", "x y"), ("b", "y z")]);
        let idx = Bm25Index::new(&ps);
        assert_eq!(idx.scores(&[999]), vec![0.0, 0.0]);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn hand_computed_score() {
        let (v, ps) = corpus(&[("a", "x"), ("b", "y")]);
        let idx = Bm25Index::new(&ps);
        let s = idx.scores(&[v.id("x").unwrap()]);
        assert!((s[0] - 2f64.ln()).abs() < 1e-12);
        assert!((s[0] - 0.6931).abs() < 1e-4);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn tf_is_monotone() {
        let (v, ps) = corpus(&[("a", "x q r"), ("b", "x x q"), ("c", "r r r")]);
        let idx = Bm25Index::new(&ps);
        let s = idx.scores(&[v.id("x").unwrap()]);
        assert!(s[1] > s[0]);
    }

    #[test]
    fn ties_break_by_id() {
        let (v, ps) = corpus(&[("c", "x"), ("a", "x"), ("b", "y")]);
        let idx = Bm25Index::new(&ps);
        let r = idx.rank(&[v.id("x").unwrap()], 3);
        let ids: Vec<&str> = r.iter().map(|(i, _)| idx.id(*i)).collect();
        assert_eq!(ids, ["a", "c", "b"]);
    }

    proptest! {
        #[test]
        fn order_invariant(seed in 0u64..500) {
            use rand::seq::SliceRandom;
            use rand::Rng;
            let mut rng = crate::util::rng(seed);
            let words = ["a", "b", "c", "d", "e", "f"];
            let texts: Vec<(String, String)> = (0..12)
                .map(|i| {
                    let n = rng.gen_range(1..6);
                    let t: Vec<&str> = (0..n).map(|_| *words.choose(&mut rng).unwrap()).collect();
                    (format!("p{i:02}"), t.join(" "))
                })
                .collect();
            let refs: Vec<(&str, &str)> = texts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let (v, ps) = corpus(&refs);
            let mut shuffled = ps.clone();
            shuffled.shuffle(&mut rng);
            let q: Vec<TokenId> = ["a", "c", "f"].iter().filter_map(|w| v.id(w)).collect();
            let a = Bm25Index::new(&ps);
            let b = Bm25Index::new(&shuffled);
            let ra: Vec<(String, f64)> = a.rank(&q, 12).into_iter().map(|(i, s)| (a.id(i).to_string(), s)).collect();
            let rb: Vec<(String, f64)> = b.rank(&q, 12).into_iter().map(|(i, s)| (b.id(i).to_string(), s)).collect();
            prop_assert_eq!(ra, rb);
        }
    }
}
