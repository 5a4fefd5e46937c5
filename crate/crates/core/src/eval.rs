//! Retrieval metrics, run and qrel files, and report rendering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{split_words, Passage};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("questions missing from qrels: {0:?}")]
    MissingQrels(Vec<String>),
    #[error("K={k} exceeds ranking length {len} for question {qid:?}")]
    RankingTooShort { qid: String, k: usize, len: usize },
    #[error("cut-offs must be non-empty and ascending: {0:?}")]
    BadCutoffs(Vec<usize>),
    #[error("question {qid:?} has no answers")]
    NoAnswers { qid: String },
    #[error("unknown passage id {0:?}")]
    UnknownPassage(String),
    #[error("question {qid:?} needs graded judgements")]
    NotGraded { qid: String },
    #[error("invalid ranking for {qid:?}: {reason}")]
    BadRanking { qid: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPassage {
    pub pid: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRanking {
    pub qid: String,
    pub ranking: Vec<RankedPassage>,
}

impl QuestionRanking {
    /// Sorts by score descending then pid ascending.
    pub fn new(qid: String, mut ranking: Vec<RankedPassage>) -> Self {
        ranking.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.pid.cmp(&b.pid)));
        QuestionRanking { qid, ranking }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |reason: &str| EvalError::BadRanking {
            qid: self.qid.clone(),
            reason: reason.to_string(),
        };
        let mut seen = HashSet::new();
        for pair in self.ranking.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.score < b.score || (a.score == b.score && a.pid >= b.pid) {
                return Err(bad("not ordered by (score desc, pid asc)"));
            }
        }
        for r in &self.ranking {
            if !r.score.is_finite() {
                return Err(bad("non-finite score"));
            }
            if !seen.insert(&r.pid) {
                return Err(bad("duplicate pid"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub checkpoint_step: Option<u64>,
    pub index_version: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalRun {
    pub questions: Vec<QuestionRanking>,
    pub metadata: RunMetadata,
}

impl RetrievalRun {
    /// Newline-delimited `{"qid", "ranking": [{"pid", "score"}]}`.
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for q in &self.questions {
            let line = serde_json::to_string(q).expect("ranking serializes");
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut questions = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let q: QuestionRanking = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            q.validate()?;
            questions.push(q);
        }
        Ok(RetrievalRun {
            questions,
            metadata: RunMetadata::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Judgement {
    /// Answer strings matched against passage text.
    Answers(Vec<String>),
    /// Passage id → relevance grade.
    Graded(BTreeMap<String, u32>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QrelSet {
    pub judgements: HashMap<String, Judgement>,
}

impl QrelSet {
    /// TSV `qid \t pid \t grade`.
    pub fn load_graded(path: &Path) -> Result<Self, EvalError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut judgements: HashMap<String, Judgement> = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |reason: &str| EvalError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse("expected qid\\tpid\\tgrade"));
            }
            let grade: u32 = fields[2].trim().parse().map_err(|_| parse("grade is not an integer"))?;
            let entry = judgements
                .entry(fields[0].to_string())
                .or_insert_with(|| Judgement::Graded(BTreeMap::new()));
            if let Judgement::Graded(m) = entry {
                m.insert(fields[1].to_string(), grade);
            }
        }
        Ok(QrelSet { judgements })
    }

    pub fn save_graded(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        let mut qids: Vec<&String> = self.judgements.keys().collect();
        qids.sort();
        for qid in qids {
            if let Judgement::Graded(m) = &self.judgements[qid] {
                for (pid, grade) in m {
                    writeln!(w, "{qid}\t{pid}\t{grade}").map_err(io_err(path))?;
                }
            }
        }
        w.flush().map_err(io_err(path))
    }

    /// Answer-string judgements taken from question records.
    pub fn from_answers<'a, I>(questions: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a [String])>,
    {
        QrelSet {
            judgements: questions
                .into_iter()
                .map(|(q, a)| (q.to_string(), Judgement::Answers(a.to_vec())))
                .collect(),
        }
    }

    pub fn get(&self, qid: &str) -> Option<&Judgement> {
        self.judgements.get(qid)
    }

    /// Passage ids with grade > 0, for graded judgements.
    pub fn relevant_ids(&self, qid: &str) -> Vec<&str> {
        match self.judgements.get(qid) {
            Some(Judgement::Graded(m)) => m
                .iter()
                .filter(|(_, &g)| g > 0)
                .map(|(p, _)| p.as_str())
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Lowercased, punctuation stripped, whitespace collapsed, as words.
fn normalize(text: &str) -> Vec<String> {
    split_words(text)
}

/// True iff some answer occurs as a contiguous word sequence in the passage
/// text. Titles are not searched.
pub fn contains_answer(text: &str, answers: &[String]) -> bool {
    let words = normalize(text);
    answers.iter().any(|a| {
        let needle = normalize(a);
        !needle.is_empty() && words.windows(needle.len()).any(|w| w == needle.as_slice())
    })
}

/// Decides whether a retrieved passage counts as a hit for a question.
pub struct HitJudge<'a> {
    qrels: &'a QrelSet,
    passages: HashMap<&'a str, &'a Passage>,
}

impl<'a> HitJudge<'a> {
    pub fn new(qrels: &'a QrelSet, passages: &'a [Passage]) -> Self {
        HitJudge {
            qrels,
            passages: passages.iter().map(|p| (p.id.as_str(), p)).collect(),
        }
    }

    pub fn is_hit(&self, qid: &str, pid: &str) -> Result<bool, EvalError> {
        match self.qrels.get(qid) {
            None => Err(EvalError::MissingQrels(vec![qid.to_string()])),
            Some(Judgement::Graded(m)) => Ok(m.get(pid).is_some_and(|&g| g > 0)),
            Some(Judgement::Answers(a)) => {
                if a.is_empty() {
                    return Err(EvalError::NoAnswers { qid: qid.to_string() });
                }
                let p = self
                    .passages
                    .get(pid)
                    .ok_or_else(|| EvalError::UnknownPassage(pid.to_string()))?;
                Ok(contains_answer(&p.text, a))
            }
        }
    }
}

fn check_cutoffs(ks: &[usize]) -> Result<(), EvalError> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadCutoffs(ks.to_vec()));
    }
    Ok(())
}

fn check_coverage(run: &RetrievalRun, qrels: &QrelSet) -> Result<(), EvalError> {
    let missing: Vec<String> = run
        .questions
        .iter()
        .filter(|q| qrels.get(&q.qid).is_none())
        .map(|q| q.qid.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(EvalError::MissingQrels(missing))
    }
}

/// Fraction of questions with at least one hit in the top K, for each K.
pub fn topk_accuracy(
    run: &RetrievalRun,
    judge: &HitJudge<'_>,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, EvalError> {
    check_cutoffs(ks)?;
    check_coverage(run, judge.qrels)?;
    let max_k = *ks.last().unwrap();
    let mut hits = vec![0usize; ks.len()];
    for q in &run.questions {
        if q.ranking.len() < max_k {
            return Err(EvalError::RankingTooShort {
                qid: q.qid.clone(),
                k: max_k,
                len: q.ranking.len(),
            });
        }
        let mut first = None;
        for (rank, r) in q.ranking.iter().take(max_k).enumerate() {
            if judge.is_hit(&q.qid, &r.pid)? {
                first = Some(rank);
                break;
            }
        }
        if let Some(rank) = first {
            for (slot, &k) in ks.iter().enumerate() {
                if rank < k {
                    hits[slot] += 1;
                }
            }
        }
    }
    let n = run.questions.len().max(1) as f64;
    Ok(ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n)).collect())
}

/// Macro-averaged metric plus the questions left out for having no relevant
/// passages.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedMetric {
    pub value: f64,
    pub evaluated: usize,
    pub excluded: Vec<String>,
}

fn graded<'r>(
    run: &'r RetrievalRun,
    qrels: &'r QrelSet,
) -> Result<Vec<(&'r QuestionRanking, &'r BTreeMap<String, u32>)>, EvalError> {
    check_coverage(run, qrels)?;
    run.questions
        .iter()
        .map(|q| match qrels.get(&q.qid) {
            Some(Judgement::Graded(m)) => Ok((q, m)),
            _ => Err(EvalError::NotGraded { qid: q.qid.clone() }),
        })
        .collect()
}

fn macro_average<F>(run: &RetrievalRun, qrels: &QrelSet, per_question: F) -> Result<GradedMetric, EvalError>
where
    F: Fn(&QuestionRanking, &BTreeMap<String, u32>) -> f64,
{
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut excluded = Vec::new();
    for (q, m) in graded(run, qrels)? {
        if m.values().all(|&g| g == 0) {
            excluded.push(q.qid.clone());
            continue;
        }
        total += per_question(q, m);
        evaluated += 1;
    }
    Ok(GradedMetric {
        value: if evaluated == 0 { 0.0 } else { total / evaluated as f64 },
        evaluated,
        excluded,
    })
}

/// Fraction of relevant ids found in the top `k`.
pub fn recall_at_k(run: &RetrievalRun, qrels: &QrelSet, k: usize) -> Result<GradedMetric, EvalError> {
    macro_average(run, qrels, |q, m| {
        let relevant = m.values().filter(|&&g| g > 0).count() as f64;
        let found = q
            .ranking
            .iter()
            .take(k)
            .filter(|r| m.get(&r.pid).is_some_and(|&g| g > 0))
            .count() as f64;
        found / relevant
    })
}

/// nDCG@k with linear gains and a `log2(rank + 1)` discount.
pub fn ndcg_at_k(run: &RetrievalRun, qrels: &QrelSet, k: usize) -> Result<GradedMetric, EvalError> {
    macro_average(run, qrels, |q, m| {
        let dcg: f64 = q
            .ranking
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, r)| f64::from(m.get(&r.pid).copied().unwrap_or(0)) / (i as f64 + 2.0).log2())
            .sum();
        let mut ideal: Vec<u32> = m.values().copied().filter(|&g| g > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| f64::from(g) / (i as f64 + 2.0).log2())
            .sum();
        dcg / idcg
    })
}

pub fn ndcg_at_10(run: &RetrievalRun, qrels: &QrelSet) -> Result<GradedMetric, EvalError> {
    ndcg_at_k(run, qrels, 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

/// One labelled row of metrics; columns keep insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub metrics: Vec<Metric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub title: String,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl Report {
    pub fn new(title: impl Into<String>) -> Self {
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            title: title.into(),
            rows: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn push_row(&mut self, label: impl Into<String>, metrics: Vec<Metric>) {
        self.rows.push(ReportRow {
            label: label.into(),
            metrics,
        });
    }

    /// `Top-K` columns from an accuracy map.
    pub fn accuracy_metrics(acc: &BTreeMap<usize, f64>) -> Vec<Metric> {
        acc.iter()
            .map(|(k, v)| Metric {
                name: format!("Top-{k}"),
                value: *v,
            })
            .collect()
    }

    /// Plain-text table, values as percentages with one decimal.
    pub fn render_table(&self) -> String {
        let mut columns: Vec<&str> = Vec::new();
        for row in &self.rows {
            for m in &row.metrics {
                if !columns.contains(&m.name.as_str()) {
                    columns.push(&m.name);
                }
            }
        }
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(std::iter::once(self.title.len().min(24)))
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = columns.iter().map(|c| c.len().max(6)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", self.title.chars().take(24).collect::<String>());
        for (c, w) in columns.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<label_w$}", row.label);
            for (c, w) in columns.iter().zip(&widths) {
                match row.metrics.iter().find(|m| m.name == *c) {
                    Some(m) => {
                        let _ = write!(out, "  {:>w$.1}", m.value * 100.0);
                    }
                    None => {
                        let _ = write!(out, "  {:>w$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        for (k, v) in &self.notes {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Table => self.render_table(),
            ReportFormat::Json => {
                let mut s = serde_json::to_string_pretty(self).expect("report serializes");
                s.push('\n');
                s
            }
        }
    }

    pub fn emit(&self, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.render(format)).map_err(io_err(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{PassageRecord, Vocabulary};

    fn ranking(qid: &str, pids: &[&str]) -> QuestionRanking {
        let n = pids.len();
        QuestionRanking::new(
            qid.to_string(),
            pids.iter()
                .enumerate()
                .map(|(i, p)| RankedPassage {
                    pid: p.to_string(),
                    score: (n - i) as f64,
                })
                .collect(),
        )
    }

    fn graded_qrels(entries: &[(&str, &str, u32)]) -> QrelSet {
        let mut q = QrelSet::default();
        for (qid, pid, g) in entries {
            let e = q
                .judgements
                .entry(qid.to_string())
                .or_insert_with(|| Judgement::Graded(BTreeMap::new()));
            if let Judgement::Graded(m) = e {
                m.insert(pid.to_string(), *g);
            }
        }
        q
    }

    #[test]
    fn answer_matching() {
        let text = "The Bowling Hall of Fame is located in Arlington, Texas.";
        assert!(contains_answer(text, &["Arlington".into()]));
        assert!(contains_answer("Arlington,", &["arlington".into()]));
        assert!(!contains_answer("Arlington", &["ton".into()]));
        assert!(contains_answer(text, &["arlington  texas".into()]));
        assert!(!contains_answer(text, &["texas arlington".into()]));
    }

    fn pids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    #[test]
    fn topk_by_hand() {
        let all = pids(100);
        let refs: Vec<&str> = all.iter().map(String::as_str).collect();
        let run = RetrievalRun {
            questions: vec![ranking("a", &refs), ranking("b", &refs)],
            metadata: Default::default(),
        };
        let qrels = graded_qrels(&[("a", "p002", 1), ("b", "p049", 1)]);
        let judge = HitJudge::new(&qrels, &[]);
        let acc = topk_accuracy(&run, &judge, &[20, 100]).unwrap();
        assert_eq!(acc[&20], 0.5);
        assert_eq!(acc[&100], 1.0);
        assert!(topk_accuracy(&run, &judge, &[100, 20]).is_err());
        assert!(matches!(
            topk_accuracy(&run, &judge, &[101]),
            Err(EvalError::RankingTooShort { .. })
        ));
    }

    #[test]
    fn topk_saturation_floor_and_missing() {
        let run = RetrievalRun {
            questions: vec![ranking("a", &["x", "y"]), ranking("b", &["y", "x"])],
            metadata: Default::default(),
        };
        let all = graded_qrels(&[("a", "x", 1), ("b", "y", 1)]);
        let acc = topk_accuracy(&run, &HitJudge::new(&all, &[]), &[1, 2]).unwrap();
        assert!(acc.values().all(|&v| v == 1.0));
        let none = graded_qrels(&[("a", "z", 1), ("b", "z", 1)]);
        let acc = topk_accuracy(&run, &HitJudge::new(&none, &[]), &[1, 2]).unwrap();
        assert!(acc.values().all(|&v| v == 0.0));
        let partial = graded_qrels(&[("a", "x", 1)]);
        let err = topk_accuracy(&run, &HitJudge::new(&partial, &[]), &[1]).unwrap_err();
        assert!(matches!(err, EvalError::MissingQrels(ref ids) if ids == &["b".to_string()]));
    }

    #[test]
    fn topk_with_answer_strings() {
        let vocab = Vocabulary::from_tokens(Vec::<String>::new());
        let ps: Vec<Passage> = [("x", "located in Arlington, Texas"), ("y", "Paris")]
            .iter()
            .map(|(id, t)| {
                Passage::new(
                    PassageRecord {
                        id: id.to_string(),
                        title: "Arlington".into(),
                        text: t.to_string(),
                    },
                    &vocab,
                )
            })
            .collect();
        let answers = vec!["arlington".to_string()];
        let qrels = QrelSet::from_answers([("q", answers.as_slice())]);
        let run = RetrievalRun {
            questions: vec![ranking("q", &["y", "x"])],
            metadata: Default::default(),
        };
        let acc = topk_accuracy(&run, &HitJudge::new(&qrels, &ps), &[1, 2]).unwrap();
        assert_eq!(acc[&1], 0.0);
        assert_eq!(acc[&2], 1.0);
    }

    #[test]
    fn ndcg_and_recall() {
        let run = RetrievalRun {
            questions: vec![ranking("q", &["a", "b", "c"])],
            metadata: Default::default(),
        };
        let top = ndcg_at_10(&run, &graded_qrels(&[("q", "a", 1)])).unwrap();
        assert_eq!(top.value, 1.0);
        let second = ndcg_at_10(&run, &graded_qrels(&[("q", "b", 1)])).unwrap();
        assert!((second.value - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((second.value - 0.6309).abs() < 1e-4);
        let rec = recall_at_k(&run, &graded_qrels(&[("q", "c", 1), ("q", "zz", 1)]), 100).unwrap();
        assert_eq!(rec.value, 0.5);
        let ex = recall_at_k(&run, &graded_qrels(&[("q", "c", 0)]), 100).unwrap();
        assert_eq!(ex.excluded, vec!["q".to_string()]);
        assert_eq!(ex.evaluated, 0);
    }

    #[test]
    fn ndcg_ideal_iff_sorted_grades() {
        let qrels = graded_qrels(&[("q", "a", 1), ("q", "b", 3), ("q", "c", 2)]);
        let ideal = RetrievalRun {
            questions: vec![ranking("q", &["b", "c", "a"])],
            metadata: Default::default(),
        };
        assert!((ndcg_at_10(&ideal, &qrels).unwrap().value - 1.0).abs() < 1e-12);
        let swapped = RetrievalRun {
            questions: vec![ranking("q", &["c", "b", "a"])],
            metadata: Default::default(),
        };
        let v = ndcg_at_10(&swapped, &qrels).unwrap().value;
        assert!(v < 1.0 && v > 0.0);
    }

    #[test]
    fn run_and_qrels_files() {
        let dir = tempfile::tempdir().unwrap();
        let run = RetrievalRun {
            questions: vec![ranking("q1", &["a", "b"]), ranking("q2", &["b", "c"])],
            metadata: Default::default(),
        };
        let p = dir.path().join("run.jsonl");
        run.save(&p).unwrap();
        assert_eq!(RetrievalRun::load(&p).unwrap().questions, run.questions);
        let qrels = graded_qrels(&[("q1", "a", 1), ("q2", "c", 2)]);
        let p = dir.path().join("qrels.tsv");
        qrels.save_graded(&p).unwrap();
        assert_eq!(QrelSet::load_graded(&p).unwrap(), qrels);
    }

    #[test]
    fn unordered_ranking_rejected() {
        let q = QuestionRanking {
            qid: "q".into(),
            ranking: vec![
                RankedPassage { pid: "b".into(), score: 1.0 },
                RankedPassage { pid: "a".into(), score: 1.0 },
            ],
        };
        assert!(q.validate().is_err());
    }

    #[test]
    fn report_rendering() {
        let mut acc = BTreeMap::new();
        acc.insert(20, 0.5);
        acc.insert(100, 0.8);
        let mut r = Report::new("NQ");
        r.push_row("dense", Report::accuracy_metrics(&acc));
        let table = r.render_table();
        let header = table.lines().next().unwrap();
        assert!(header.find("Top-20").unwrap() < header.find("Top-100").unwrap());
        assert!(table.contains("50.0") && table.contains("80.0"));
        let json = r.render(ReportFormat::Json);
        let back: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(json, r.render(ReportFormat::Json));
    }
}
