//! How the candidate set Z is formed for each training question.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;

use super::TrainError;
use crate::bm25::Bm25Index;
use crate::corpus::{Passage, Question};
use crate::index::EmbeddingIndex;
use crate::util::{self, mix_seed, stable_hash};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateMode {
    /// Top K from the (stale) embedding index.
    TopK,
    /// P gold passages, N BM25 hard negatives, U uniform samples.
    Mix { positives: usize, negatives: usize, uniform: usize },
    /// Union over the batch of each question's P gold and N hard negatives.
    InBatch { positives: usize, negatives: usize },
}

impl CandidateMode {
    pub fn needs_gold(&self) -> bool {
        match *self {
            CandidateMode::TopK => false,
            CandidateMode::Mix { positives, negatives, .. }
            | CandidateMode::InBatch { positives, negatives } => positives + negatives > 0,
        }
    }

    fn needs_bm25(&self) -> bool {
        matches!(
            *self,
            CandidateMode::Mix { negatives: 1.., .. } | CandidateMode::InBatch { negatives: 1.., .. }
        )
    }
}

impl fmt::Display for CandidateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateMode::TopK => write!(f, "topk"),
            CandidateMode::Mix { positives, negatives, uniform } => {
                write!(f, "mix:{positives},{negatives},{uniform}")
            }
            CandidateMode::InBatch { positives, negatives } => write!(f, "inbatch:{positives},{negatives}"),
        }
    }
}

impl FromStr for CandidateMode {
    type Err = String;

    /// `topk`, `mix:P,N,U`, `inbatch` or `inbatch:P,N`.
    fn from_str(s: &str) -> Result<Self, String> {
        let nums = |body: &str, n: usize| -> Result<Vec<usize>, String> {
            let v: Result<Vec<usize>, _> = body.split(',').map(|x| x.trim().parse::<usize>()).collect();
            match v {
                Ok(v) if v.len() == n => Ok(v),
                _ => Err(format!("expected {n} comma-separated counts in {s:?}")),
            }
        };
        match s.split_once(':') {
            None if s == "topk" => Ok(CandidateMode::TopK),
            None if s == "inbatch" => Ok(CandidateMode::InBatch { positives: 1, negatives: 1 }),
            Some(("mix", body)) => {
                let v = nums(body, 3)?;
                if v.iter().sum::<usize>() == 0 {
                    return Err("mix needs at least one candidate".into());
                }
                Ok(CandidateMode::Mix { positives: v[0], negatives: v[1], uniform: v[2] })
            }
            Some(("inbatch", body)) => {
                let v = nums(body, 2)?;
                if v[0] + v[1] == 0 {
                    return Err("inbatch needs at least one candidate per question".into());
                }
                Ok(CandidateMode::InBatch { positives: v[0], negatives: v[1] })
            }
            _ => Err(format!("unknown candidate mode {s:?}")),
        }
    }
}

/// Candidate passages for one question, plus stale index scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Composed {
    pub indices: Vec<usize>,
    pub stale_scores: Vec<f64>,
}

pub struct CandidateComposer {
    mode: CandidateMode,
    k: usize,
    gold: HashMap<String, Vec<usize>>,
    bm25: Option<Bm25Index>,
    num_passages: usize,
    seed: u64,
}

impl CandidateComposer {
    /// `gold` maps question id to gold passage indices; required by modes
    /// that draw positives or hard negatives.
    pub fn new(
        mode: CandidateMode,
        k: usize,
        passages: &[Passage],
        gold: HashMap<String, Vec<usize>>,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if mode.needs_gold() && gold.is_empty() {
            return Err(TrainError::Config(format!(
                "candidate mode {mode} needs gold passage annotations"
            )));
        }
        if mode == CandidateMode::TopK && (k == 0 || k > passages.len()) {
            return Err(TrainError::Config(format!(
                "K={k} must be within 1..={}",
                passages.len()
            )));
        }
        let bm25 = mode.needs_bm25().then(|| Bm25Index::new(passages));
        Ok(CandidateComposer {
            mode,
            k,
            gold,
            bm25,
            num_passages: passages.len(),
            seed,
        })
    }

    pub fn mode(&self) -> CandidateMode {
        self.mode
    }

    fn gold_for(&self, q: &Question) -> Result<&[usize], TrainError> {
        match self.gold.get(&q.id) {
            Some(g) if !g.is_empty() => Ok(g),
            _ => Err(TrainError::Config(format!(
                "question {:?} has no gold passage for mode {}",
                q.id, self.mode
            ))),
        }
    }

    fn hard_negatives(&self, q: &Question, gold: &[usize], n: usize) -> Vec<usize> {
        let Some(bm25) = &self.bm25 else {
            return Vec::new();
        };
        bm25.rank(&q.tokens, n + gold.len())
            .into_iter()
            .map(|(i, _)| i)
            .filter(|i| !gold.contains(i))
            .take(n)
            .collect()
    }

    fn own_passages(&self, q: &Question, positives: usize, negatives: usize) -> Result<Vec<usize>, TrainError> {
        let gold = if positives + negatives > 0 { self.gold_for(q)? } else { &[] };
        let mut out: Vec<usize> = gold.iter().copied().take(positives).collect();
        out.extend(self.hard_negatives(q, gold, negatives));
        Ok(out)
    }

    /// Candidate indices for every question of a batch. `query` embeds a
    /// question with the current question tower.
    pub fn compose_batch<F>(
        &self,
        batch: &[&Question],
        index: &EmbeddingIndex,
        step: u64,
        query: F,
    ) -> Result<Vec<Composed>, TrainError>
    where
        F: Fn(&Question) -> Result<Vec<f64>, TrainError>,
    {
        let stale = |indices: Vec<usize>, q: &[f64]| -> Composed {
            let qf: Vec<f32> = q.iter().map(|&v| v as f32).collect();
            let stale_scores = indices
                .iter()
                .map(|&i| f64::from(crate::index::dot_f32(index.row(i), &qf)))
                .collect();
            Composed { indices, stale_scores }
        };
        match self.mode {
            CandidateMode::TopK => batch
                .iter()
                .map(|q| {
                    let emb = query(q)?;
                    let hits = index.search(&emb, self.k)?;
                    Ok(Composed {
                        indices: hits.hits.iter().map(|h| h.index).collect(),
                        stale_scores: hits.hits.iter().map(|h| h.score).collect(),
                    })
                })
                .collect(),
            CandidateMode::Mix { positives, negatives, uniform } => batch
                .iter()
                .map(|q| {
                    let mut chosen = self.own_passages(q, positives, negatives)?;
                    let exclude: BTreeSet<usize> =
                        chosen.iter().chain(self.gold.get(&q.id).into_iter().flatten()).copied().collect();
                    let pool = self.num_passages - exclude.len();
                    if uniform > pool {
                        return Err(TrainError::Config(format!(
                            "cannot draw {uniform} uniform passages from {pool}"
                        )));
                    }
                    let mut rng = util::rng(mix_seed(&[self.seed, step, stable_hash(q.id.as_bytes())]));
                    // Sample ranks in the complement of `exclude`, then map
                    // each rank to a passage index.
                    let mut ranks = sample(&mut rng, pool, uniform).into_vec();
                    ranks.sort_unstable();
                    let mut excl = exclude.iter().peekable();
                    let mut skipped = 0;
                    let mut picks = Vec::with_capacity(uniform);
                    for r in ranks {
                        loop {
                            let candidate = r + skipped;
                            match excl.peek() {
                                Some(&&e) if e <= candidate => {
                                    skipped += 1;
                                    excl.next();
                                }
                                _ => break,
                            }
                        }
                        picks.push(r + skipped);
                    }
                    chosen.extend(picks);
                    Ok(stale(chosen, &query(q)?))
                })
                .collect(),
            CandidateMode::InBatch { positives, negatives } => {
                let mut union = BTreeSet::new();
                for q in batch {
                    union.extend(self.own_passages(q, positives, negatives)?);
                }
                let shared: Vec<usize> = union.into_iter().collect();
                batch.iter().map(|q| Ok(stale(shared.clone(), &query(q)?))).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{PassageRecord, QuestionRecord, Vocabulary};
    use crate::encoder::{EncoderDims, EncoderParams};

    fn setup(n: usize) -> (Vocabulary, Vec<Passage>, Vec<Question>) {
        let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::from_tokens(words.iter().cloned());
        let ps: Vec<Passage> = (0..n)
            .map(|i| {
                let text = format!("{} {} {}", words[i % 30], words[(i * 7) % 30], words[(i * 11 + 3) % 30]);
                Passage::new(PassageRecord { id: format!("p{i:03}"), title: String::new(), text }, &vocab)
            })
            .collect();
        let qs: Vec<Question> = (0..4)
            .map(|i| {
                Question::new(
                    QuestionRecord { id: format!("q{i}"), question: ps[i * 5].text.clone(), answers: None },
                    &vocab,
                )
            })
            .collect();
        (vocab, ps, qs)
    }

    fn gold() -> HashMap<String, Vec<usize>> {
        (0..4).map(|i| (format!("q{i}"), vec![i * 5])).collect()
    }

    fn index(ps: &[Passage], v: usize) -> EmbeddingIndex {
        let params = EncoderParams::init(EncoderDims { vocab_size: v, d_emb: 4, d_hidden: 4, d_out: 3 }, 1);
        EmbeddingIndex::build(ps, &params, 2).unwrap()
    }

    #[test]
    fn parse_modes() {
        assert_eq!("topk".parse::<CandidateMode>().unwrap(), CandidateMode::TopK);
        assert_eq!(
            "mix:1,1,30".parse::<CandidateMode>().unwrap(),
            CandidateMode::Mix { positives: 1, negatives: 1, uniform: 30 }
        );
        assert_eq!(
            "inbatch".parse::<CandidateMode>().unwrap(),
            CandidateMode::InBatch { positives: 1, negatives: 1 }
        );
        assert!("mix:1,1".parse::<CandidateMode>().is_err());
        assert!("mix:0,0,0".parse::<CandidateMode>().is_err());
        assert!("knn".parse::<CandidateMode>().is_err());
        for s in ["topk", "mix:0,0,32", "inbatch:1,0"] {
            assert_eq!(s.parse::<CandidateMode>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn topk_matches_search() {
        let (v, ps, qs) = setup(40);
        let idx = index(&ps, v.len());
        let c = CandidateComposer::new(CandidateMode::TopK, 32, &ps, HashMap::new(), 0).unwrap();
        let q = vec![0.3, -0.2, 0.9];
        let got = c.compose_batch(&[&qs[0]], &idx, 0, |_| Ok(q.clone())).unwrap();
        assert_eq!(got[0].indices, idx.search(&q, 32).unwrap().indices());
    }

    #[test]
    fn mix_contains_gold_and_samples_without_replacement() {
        let (v, ps, qs) = setup(40);
        let idx = index(&ps, v.len());
        let q = |_: &Question| Ok(vec![0.1, 0.2, 0.3]);
        let c = CandidateComposer::new(
            CandidateMode::Mix { positives: 1, negatives: 0, uniform: 31 },
            32,
            &ps,
            gold(),
            0,
        )
        .unwrap();
        let got = c.compose_batch(&[&qs[1]], &idx, 3, q).unwrap();
        assert!(got[0].indices.contains(&5));
        assert_eq!(got[0].indices.len(), 32);

        let c = CandidateComposer::new(
            CandidateMode::Mix { positives: 0, negatives: 0, uniform: 32 },
            32,
            &ps,
            gold(),
            0,
        )
        .unwrap();
        for step in 0..20 {
            let got = c.compose_batch(&[&qs[0]], &idx, step, q).unwrap();
            let set: BTreeSet<usize> = got[0].indices.iter().copied().collect();
            assert_eq!(set.len(), 32);
            assert!(got[0].indices.iter().all(|&i| i < 40 && i != 0));
        }
    }

    #[test]
    fn mix_hard_negatives_exclude_gold() {
        let (v, ps, qs) = setup(40);
        let idx = index(&ps, v.len());
        let c = CandidateComposer::new(
            CandidateMode::Mix { positives: 1, negatives: 2, uniform: 0 },
            32,
            &ps,
            gold(),
            0,
        )
        .unwrap();
        let got = c.compose_batch(&[&qs[2]], &idx, 0, |_| Ok(vec![0.0; 3])).unwrap();
        assert_eq!(got[0].indices[0], 10);
        assert_eq!(got[0].indices.len(), 3);
        assert!(!got[0].indices[1..].contains(&10));
    }

    #[test]
    fn mix_without_gold_is_an_error() {
        let (_, ps, _) = setup(20);
        let mode = CandidateMode::Mix { positives: 1, negatives: 0, uniform: 3 };
        assert!(CandidateComposer::new(mode, 4, &ps, HashMap::new(), 0).is_err());
    }

    #[test]
    fn inbatch_is_shared_union() {
        let (v, ps, qs) = setup(40);
        let idx = index(&ps, v.len());
        let c = CandidateComposer::new(
            CandidateMode::InBatch { positives: 1, negatives: 1 },
            32,
            &ps,
            gold(),
            0,
        )
        .unwrap();
        let batch: Vec<&Question> = qs.iter().collect();
        let got = c.compose_batch(&batch, &idx, 0, |_| Ok(vec![0.0; 3])).unwrap();
        assert!(got.iter().all(|g| g.indices == got[0].indices));
        for g in [0, 5, 10, 15] {
            assert!(got[0].indices.contains(&g));
        }
        let set: BTreeSet<usize> = got[0].indices.iter().copied().collect();
        assert_eq!(set.len(), got[0].indices.len());
    }
}
