//! Subcommand implementations behind the `autoretrieve` binary.
//!
//! Each `cmd_*` function takes a resolved [`RunConfig`] (or, for `synth`, an
//! output directory) and writes its artifacts under the run directory along
//! with a JSON manifest of input hashes and seeds.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use autoretrieve::bm25::Bm25Index;
use autoretrieve::corpus::{self, Ingested, Passage, Question, Vocabulary};
use autoretrieve::eval::{
    self, HitJudge, Judgement, QrelSet, QuestionRanking, RankedPassage, Report, ReportFormat, RetrievalRun,
};
use autoretrieve::index::EmbeddingIndex;
use autoretrieve::synth::{self, SynthConfig};
use autoretrieve::trainer::checkpoint::Checkpoint;
use autoretrieve::trainer::{
    self, CandidateMode, DevSet, StepReport, TrainError, TrainObserver, Trainer, TrainerState,
};
use autoretrieve::{EncoderParams, RunConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad or missing input named by `flag`; exit code 2.
    #[error("{flag}: {message}")]
    Usage { flag: String, message: String },
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn usage(flag: &str, message: impl Into<String>) -> CliError {
    CliError::Usage {
        flag: flag.to_string(),
        message: message.into(),
    }
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Runtime(e.into())
}

/// Where each artifact lives inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunLayout { dir: dir.into() }
    }
    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }
    pub fn index(&self) -> PathBuf {
        self.dir.join("index.bin")
    }
    pub fn steps(&self) -> PathBuf {
        self.dir.join("steps.jsonl")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }
    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step-{step:06}.ckpt"))
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.dir.join(format!("{command}.manifest.json"))
    }
}

/// Path flags shared by the config-driven commands. They take precedence
/// over `AUTORETRIEVE_*` variables, which take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct PathOverrides {
    pub run_dir: Option<PathBuf>,
    pub passages: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub train_questions: Option<PathBuf>,
    pub train_qrels: Option<PathBuf>,
    pub dev_questions: Option<PathBuf>,
    pub dev_qrels: Option<PathBuf>,
}

impl PathOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.data;
        let pairs: [(&Option<PathBuf>, &mut Option<PathBuf>); 7] = [
            (&self.passages, &mut d.passages),
            (&self.vocab, &mut d.vocab),
            (&self.index, &mut d.index),
            (&self.train_questions, &mut d.train_questions),
            (&self.train_qrels, &mut d.train_qrels),
            (&self.dev_questions, &mut d.dev_questions),
            (&self.dev_qrels, &mut d.dev_qrels),
        ];
        for (flag, slot) in pairs {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(dir) = &self.run_dir {
            cfg.run_dir = dir.clone();
        }
    }
}

/// Reads `path`, then layers environment and flag overrides on top.
pub fn load_config<F>(path: &Path, overrides: &PathOverrides, env: F) -> Result<RunConfig>
where
    F: Fn(&str) -> Option<String>,
{
    if !path.exists() {
        return Err(usage("--config", format!("{} does not exist", path.display())));
    }
    let mut cfg = RunConfig::load(path).map_err(|e| usage("--config", e))?;
    cfg.apply_env(env);
    overrides.apply(&mut cfg);
    cfg.validate().map_err(|e| usage("--config", e))?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Path to SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Path to SHA-256 of every file written, the manifest excepted.
    pub outputs: BTreeMap<String, String>,
    pub results: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Manifest {
            command: command.to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            results: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(runtime)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn required<'a>(path: Option<&'a Path>, flag: &str, what: &str) -> Result<&'a Path> {
    let path = path.ok_or_else(|| usage(flag, format!("no {what} given")))?;
    if !path.exists() {
        return Err(usage(flag, format!("{what} {} does not exist", path.display())));
    }
    Ok(path)
}

fn warn_rejected<T>(path: &Path, ingested: &Ingested<T>) {
    for r in &ingested.rejected {
        eprintln!("warning: {}:{}: {}", path.display(), r.line, r.reason);
    }
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone)]
pub struct SynthOutputs {
    pub passages: PathBuf,
    pub train_questions: PathBuf,
    pub dev_questions: PathBuf,
    pub train_qrels: PathBuf,
    pub dev_qrels: PathBuf,
    pub manifest: PathBuf,
}

pub fn synth_outputs(out: &Path) -> SynthOutputs {
    SynthOutputs {
        passages: out.join("passages.jsonl"),
        train_questions: out.join("train.jsonl"),
        dev_questions: out.join("dev.jsonl"),
        train_qrels: out.join("train.qrels.tsv"),
        dev_qrels: out.join("dev.qrels.tsv"),
        manifest: out.join("synth.manifest.json"),
    }
}

/// Reads a synthetic-task config from TOML; every key is optional.
pub fn load_synth_config(path: &Path) -> Result<SynthConfig> {
    let text = fs::read_to_string(path).map_err(|e| usage("--config", format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage("--config", format!("{}: {e}", path.display())))
}

pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<SynthOutputs> {
    cfg.validate().map_err(|e| usage("--config", e))?;
    let data = synth::generate(cfg).map_err(|e| usage("--config", e))?;
    create_dir(out)?;
    let paths = synth_outputs(out);
    corpus::write_jsonl(&paths.passages, &data.passages).map_err(runtime)?;
    corpus::write_jsonl(&paths.train_questions, &data.train).map_err(runtime)?;
    corpus::write_jsonl(&paths.dev_questions, &data.dev).map_err(runtime)?;
    data.train_qrels.save_graded(&paths.train_qrels).map_err(runtime)?;
    data.dev_qrels.save_graded(&paths.dev_qrels).map_err(runtime)?;
    let mut manifest = Manifest::new("synth", cfg.seed, serde_json::to_value(cfg).map_err(runtime)?);
    for p in [
        &paths.passages,
        &paths.train_questions,
        &paths.dev_questions,
        &paths.train_qrels,
        &paths.dev_qrels,
    ] {
        manifest.output(p)?;
    }
    manifest.write(&paths.manifest)?;
    Ok(paths)
}

// ---------------------------------------------------------------- vocab and index

fn vocab_path(cfg: &RunConfig) -> PathBuf {
    cfg.data.vocab.clone().unwrap_or_else(|| RunLayout::new(&cfg.run_dir).vocab())
}

fn index_path(cfg: &RunConfig) -> PathBuf {
    cfg.data.index.clone().unwrap_or_else(|| RunLayout::new(&cfg.run_dir).index())
}

pub fn cmd_build_vocab(cfg: &RunConfig) -> Result<PathBuf> {
    let passages = required(cfg.data.passages.as_deref(), "--passages", "passage file")?;
    let vocab = corpus::build_vocabulary(passages, cfg.data.min_count.max(1)).map_err(runtime)?;
    let layout = RunLayout::new(&cfg.run_dir);
    create_dir(&layout.dir)?;
    let out = vocab_path(cfg);
    vocab.save(&out).map_err(runtime)?;
    let mut manifest = Manifest::new("build-vocab", cfg.seed, config_value(cfg)?);
    manifest.input(passages)?;
    manifest.output(&out)?;
    manifest.results.insert("vocab_size".into(), vocab.len().into());
    manifest.write(&layout.manifest("build-vocab"))?;
    Ok(out)
}

fn config_value(cfg: &RunConfig) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(runtime)
}

fn load_vocab(cfg: &RunConfig) -> Result<(PathBuf, Vocabulary)> {
    let path = vocab_path(cfg);
    if !path.exists() {
        return Err(usage(
            "--vocab",
            format!("vocabulary {} does not exist; run build-vocab first", path.display()),
        ));
    }
    let vocab = Vocabulary::load(&path).map_err(runtime)?;
    Ok((path, vocab))
}

fn load_passages(cfg: &RunConfig, vocab: &Vocabulary) -> Result<(PathBuf, Vec<Passage>)> {
    let path = required(cfg.data.passages.as_deref(), "--passages", "passage file")?.to_path_buf();
    let ingested = corpus::ingest_passages(&path, vocab).map_err(runtime)?;
    warn_rejected(&path, &ingested);
    Ok((path, ingested.items))
}

fn load_questions(path: &Path, vocab: &Vocabulary) -> Result<Vec<Question>> {
    let ingested = corpus::ingest_questions(path, vocab).map_err(runtime)?;
    warn_rejected(path, &ingested);
    Ok(ingested.items)
}

fn initial_params(cfg: &RunConfig, vocab: &Vocabulary) -> EncoderParams {
    EncoderParams::init_scaled(cfg.encoder.dims(vocab.len()), cfg.init_seed(), cfg.encoder.init_scale)
}

/// Encodes every passage with the initial (untrained) parameters.
pub fn cmd_build_index(cfg: &RunConfig) -> Result<PathBuf> {
    let (vocab_file, vocab) = load_vocab(cfg)?;
    let (passage_file, passages) = load_passages(cfg, &vocab)?;
    let params = initial_params(cfg, &vocab);
    let index = EmbeddingIndex::build(&passages, &params, cfg.train.num_shards).map_err(runtime)?;
    let layout = RunLayout::new(&cfg.run_dir);
    create_dir(&layout.dir)?;
    let out = index_path(cfg);
    index.save(&out).map_err(runtime)?;
    let mut manifest = Manifest::new("build-index", cfg.seed, config_value(cfg)?);
    manifest.input(&vocab_file)?;
    manifest.input(&passage_file)?;
    manifest.output(&out)?;
    manifest.results.insert("num_shards".into(), index.num_shards().into());
    manifest.results.insert("rows".into(), index.len.into());
    manifest.write(&layout.manifest("build-index"))?;
    Ok(out)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub train_questions_limit: Option<usize>,
    pub resume: Option<PathBuf>,
    /// Candidate mode overriding `train.candidates`.
    pub ablation: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
    pub best_step: Option<u64>,
    pub dev_history: Vec<(u64, f64)>,
}

#[derive(Serialize)]
struct StepLine {
    step: u64,
    loss: f64,
    lr: f64,
    grad_norm: f64,
    index_version: u64,
    ms: u64,
}

impl From<&StepReport> for StepLine {
    fn from(r: &StepReport) -> Self {
        StepLine {
            step: r.step,
            loss: r.loss,
            lr: r.lr,
            grad_norm: r.grad_norm,
            index_version: r.index_version,
            ms: r.ms,
        }
    }
}

/// Keeps lines of `path` whose `step` is at most `last`, so a resumed run
/// appends a contiguous stream.
fn truncate_steps(path: &Path, last: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(runtime)?;
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => continue,
        };
        if value["step"].as_u64().is_some_and(|s| s <= last) {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

struct RunRecorder {
    layout: RunLayout,
    config_json: String,
    steps: BufWriter<fs::File>,
    best: Option<(u64, f64)>,
}

impl RunRecorder {
    fn save(&self, trainer: &Trainer<'_>, history: &[(u64, f64)]) -> Result<PathBuf, TrainError> {
        let path = self.layout.checkpoint(trainer.state.step);
        let ckpt = Checkpoint::from_state(
            &trainer.state,
            self.config_json.clone(),
            trainer.index.snapshot().version,
            history,
        );
        ckpt.save(&path)?;
        Ok(path)
    }
}

impl TrainObserver for RunRecorder {
    fn on_step(&mut self, report: &StepReport) -> Result<(), TrainError> {
        let line = serde_json::to_string(&StepLine::from(report)).expect("step line serializes");
        let io = |e: std::io::Error| TrainError::Config(format!("writing step report: {e}"));
        writeln!(self.steps, "{line}").map_err(io)?;
        self.steps.flush().map_err(io)
    }

    fn on_checkpoint(&mut self, trainer: &Trainer<'_>, history: &[(u64, f64)]) -> Result<(), TrainError> {
        let path = self.save(trainer, history)?;
        if let Some(&(step, value)) = history.last() {
            if step == trainer.state.step && self.best.is_none_or(|(_, b)| value > b) {
                self.best = Some((step, value));
                fs::copy(&path, self.layout.best())
                    .map_err(|e| TrainError::Config(format!("copying best checkpoint: {e}")))?;
            }
        }
        Ok(())
    }
}

/// Maps question ids to the corpus positions of their graded-relevant
/// passages.
fn gold_positions(qrels: &QrelSet, passages: &[Passage]) -> Result<HashMap<String, Vec<usize>>> {
    let pos: HashMap<&str, usize> = passages.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let mut gold = HashMap::new();
    for qid in qrels.judgements.keys() {
        let ids = qrels
            .relevant_ids(qid)
            .into_iter()
            .map(|p| pos.get(p).copied().ok_or_else(|| anyhow!("qrels name unknown passage {p}")))
            .collect::<anyhow::Result<Vec<_>>>()?;
        gold.insert(qid.clone(), ids);
    }
    Ok(gold)
}

/// Dev judgements: graded qrels when configured, answer strings otherwise.
fn dev_qrels(qrels_path: Option<&Path>, questions: &[Question], flag: &str) -> Result<QrelSet> {
    if let Some(path) = qrels_path {
        if !path.exists() {
            return Err(usage(flag, format!("qrels {} does not exist", path.display())));
        }
        return QrelSet::load_graded(path).map_err(runtime);
    }
    if questions.iter().any(|q| q.answers.as_ref().is_none_or(|a| a.is_empty())) {
        return Err(usage(flag, "questions without answers need a qrels file"));
    }
    Ok(QrelSet::from_answers(
        questions.iter().map(|q| (q.id.as_str(), q.answers.as_deref().unwrap_or(&[]))),
    ))
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<TrainSummary> {
    let mut cfg = cfg.clone();
    if let Some(mode) = &args.ablation {
        mode.parse::<CandidateMode>().map_err(|e| usage("--ablation", e.to_string()))?;
        cfg.train.candidates = mode.clone();
    }
    if let Some(limit) = args.train_questions_limit {
        if limit == 0 {
            return Err(usage("--train-questions-limit", "must be positive"));
        }
        cfg.train.train_questions_limit = Some(limit);
    }
    let mode = cfg.train.validate().map_err(|e| usage("--config", e.to_string()))?;
    let layout = RunLayout::new(&cfg.run_dir);
    create_dir(&layout.checkpoints())?;

    let (vocab_file, vocab) = load_vocab(&cfg)?;
    let (passage_file, passages) = load_passages(&cfg, &vocab)?;
    let train_file = required(cfg.data.train_questions.as_deref(), "--train-questions", "training question file")?.to_path_buf();
    let mut questions = load_questions(&train_file, &vocab)?;
    if let Some(limit) = cfg.train.train_questions_limit {
        let keep = trainer::subsample_questions(questions.len(), limit, cfg.seed);
        questions = keep.into_iter().map(|i| questions[i].clone()).collect();
    }

    let mut manifest = Manifest::new("train", cfg.seed, config_value(&cfg)?);
    manifest.input(&vocab_file)?;
    manifest.input(&passage_file)?;
    manifest.input(&train_file)?;
    manifest.results.insert("train_questions".into(), questions.len().into());
    let ids: Vec<&str> = questions.iter().map(|q| q.id.as_str()).collect();
    manifest.results.insert(
        "train_question_ids_sha256".into(),
        format!("{:x}", Sha256::digest(ids.join("\n").as_bytes())).into(),
    );

    let gold = match (&cfg.data.train_qrels, mode.needs_gold()) {
        (Some(path), _) => {
            let path = required(Some(path), "--train-qrels", "training qrels")?;
            manifest.input(path)?;
            gold_positions(&QrelSet::load_graded(path).map_err(runtime)?, &passages)?
        }
        (None, true) => return Err(usage("--train-qrels", format!("candidate mode {mode} needs gold passages"))),
        (None, false) => HashMap::new(),
    };

    let dev_questions = match &cfg.data.dev_questions {
        Some(p) => {
            let p = required(Some(p), "--dev-questions", "dev question file")?;
            manifest.input(p)?;
            load_questions(p, &vocab)?
        }
        None => Vec::new(),
    };
    let dev_judgements = if dev_questions.is_empty() {
        None
    } else {
        if let Some(p) = &cfg.data.dev_qrels {
            manifest.input(p).map_err(|_| usage("--dev-qrels", format!("{} does not exist", p.display())))?;
        }
        Some(dev_qrels(cfg.data.dev_qrels.as_deref(), &dev_questions, "--dev-qrels")?)
    };

    let config_json = cfg.to_json();
    let (state, index, mut history) = match &args.resume {
        Some(path) => {
            if !path.exists() {
                return Err(usage("--resume", format!("{} does not exist", path.display())));
            }
            let ckpt = Checkpoint::load(path).map_err(runtime)?;
            check_dims(&ckpt.params, &vocab, &cfg)?;
            manifest.input(path)?;
            // Exact when the checkpoint step is a refresh boundary; otherwise
            // the rebuilt index is fresher than the one the run had.
            let mut index = EmbeddingIndex::build(&passages, &ckpt.params, cfg.train.num_shards).map_err(runtime)?;
            index.version = ckpt.index_version;
            let mut state = TrainerState::new(ckpt.params, cfg.train.clone(), cfg.seed).map_err(runtime)?;
            state.optimizer = ckpt.optimizer;
            state.step = ckpt.step;
            truncate_steps(&layout.steps(), ckpt.step)?;
            (state, Some(index), ckpt.dev_history)
        }
        None => {
            let index_file = index_path(&cfg);
            if !index_file.exists() {
                return Err(usage(
                    "--index",
                    format!("index {} does not exist; run build-index first", index_file.display()),
                ));
            }
            let index = EmbeddingIndex::load(&index_file).map_err(runtime)?;
            manifest.input(&index_file)?;
            let params = initial_params(&cfg, &vocab);
            check_index(&index, &passages, &params, &index_file)?;
            let state = TrainerState::new(params, cfg.train.clone(), cfg.seed).map_err(runtime)?;
            if layout.steps().exists() {
                fs::remove_file(layout.steps()).map_err(runtime)?;
            }
            (state, Some(index), Vec::new())
        }
    };

    let teacher = cfg.teacher.connect(vocab.len()).map_err(runtime)?;
    let mut trainer = Trainer::new(&passages, state, teacher.as_ref(), gold, index).map_err(runtime)?;
    let steps = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(layout.steps())
        .with_context(|| format!("opening {}", layout.steps().display()))?;
    let mut recorder = RunRecorder {
        layout: layout.clone(),
        config_json,
        steps: BufWriter::new(steps),
        best: history
            .iter()
            .copied()
            .fold(None, |b: Option<(u64, f64)>, (s, v)| match b {
                Some((_, bv)) if bv >= v => b,
                _ => Some((s, v)),
            }),
    };
    if args.resume.is_none() {
        recorder.save(&trainer, &history).map_err(runtime)?;
    }

    let dev = dev_judgements.as_ref().map(|q| DevSet {
        questions: &dev_questions,
        judge: HitJudge::new(q, &passages),
    });
    if let Err(e) = trainer::fit(&mut trainer, &questions, dev.as_ref(), &mut history, &mut recorder) {
        // Persist what was reached so the run can be resumed.
        let saved = recorder.save(&trainer, &history);
        let at = trainer.state.step;
        return Err(match saved {
            Ok(p) => anyhow!("training failed at step {at} (state saved to {}): {e}", p.display()),
            Err(s) => anyhow!("training failed at step {at}: {e}; saving state also failed: {s}"),
        }
        .into());
    }

    let final_step = trainer.state.step;
    let final_checkpoint = layout.checkpoint(final_step);
    if !final_checkpoint.exists() {
        recorder.save(&trainer, &history).map_err(runtime)?;
    }
    let best_step = trainer::best_step(&history);
    manifest.output(&final_checkpoint)?;
    manifest.results.insert("final_step".into(), final_step.into());
    manifest.results.insert("best_step".into(), best_step.into());
    manifest.results.insert(
        "dev_history".into(),
        serde_json::to_value(&history).map_err(runtime)?,
    );
    manifest.write(&layout.manifest("train"))?;
    Ok(TrainSummary {
        final_step,
        final_checkpoint,
        best_step,
        dev_history: history,
    })
}

/// The stored index must come from the same corpus and initial encoder.
fn check_index(index: &EmbeddingIndex, passages: &[Passage], params: &EncoderParams, path: &Path) -> Result<()> {
    let stale = |why: String| {
        usage(
            "--index",
            format!("{} {why}; rerun build-index with this config", path.display()),
        )
    };
    if index.len != passages.len() || index.dim != params.dims.d_out {
        return Err(stale(format!(
            "has {} rows of dim {}, expected {} of dim {}",
            index.len,
            index.dim,
            passages.len(),
            params.dims.d_out
        )));
    }
    let probe = EmbeddingIndex::build(&passages[..1], params, 1).map_err(runtime)?;
    if probe.row(0) != index.row(0) {
        return Err(stale("was built with different encoder parameters".into()));
    }
    Ok(())
}

fn check_dims(params: &EncoderParams, vocab: &Vocabulary, cfg: &RunConfig) -> Result<()> {
    let expected = cfg.encoder.dims(vocab.len());
    if params.dims.vocab_size != vocab.len() {
        return Err(anyhow!(
            "checkpoint has vocabulary size {}, corpus vocabulary has {}",
            params.dims.vocab_size,
            vocab.len()
        )
        .into());
    }
    if params.dims != expected {
        eprintln!(
            "warning: checkpoint dimensions {:?} differ from config {:?}; using the checkpoint's",
            params.dims, expected
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Bm25,
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `data.dev_questions`.
    pub questions: Option<PathBuf>,
    /// Defaults to `data.dev_qrels`, then to the questions' answers.
    pub qrels: Option<PathBuf>,
    /// Defaults to `eval.ks`.
    pub ks: Option<Vec<usize>>,
    pub baseline: Option<Baseline>,
    pub format: ReportFormat,
    /// Report file; printed only when absent.
    pub out: Option<PathBuf>,
}

impl Default for EvalArgs {
    fn default() -> Self {
        EvalArgs {
            checkpoint: None,
            questions: None,
            qrels: None,
            ks: None,
            baseline: None,
            format: ReportFormat::Table,
            out: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: Report,
    /// Top-K accuracy per labelled row.
    pub accuracy: BTreeMap<String, BTreeMap<usize, f64>>,
}

fn bm25_run(passages: &[Passage], questions: &[Question], depth: usize) -> RetrievalRun {
    let index = Bm25Index::new(passages);
    let questions = questions
        .iter()
        .map(|q| {
            let ranking = index
                .rank(&q.tokens, depth)
                .into_iter()
                .map(|(i, score)| RankedPassage {
                    pid: passages[i].id.clone(),
                    score,
                })
                .collect();
            QuestionRanking::new(q.id.clone(), ranking)
        })
        .collect();
    RetrievalRun {
        questions,
        ..Default::default()
    }
}

fn graded_metrics(run: &RetrievalRun, qrels: &QrelSet, depth: usize) -> Result<Vec<eval::Metric>> {
    let graded = qrels.judgements.values().any(|j| matches!(j, Judgement::Graded(_)));
    if !graded {
        return Ok(Vec::new());
    }
    let ndcg = eval::ndcg_at_10(run, qrels).map_err(runtime)?;
    let recall = eval::recall_at_k(run, qrels, depth).map_err(runtime)?;
    Ok(vec![
        eval::Metric {
            name: "nDCG@10".into(),
            value: ndcg.value,
        },
        eval::Metric {
            name: format!("Recall@{depth}"),
            value: recall.value,
        },
    ])
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalOutcome> {
    let ks = args.ks.clone().unwrap_or_else(|| cfg.eval.ks.clone());
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage("--ks", format!("cut-offs must be ascending and positive, got {ks:?}")));
    }
    if args.checkpoint.is_none() && args.baseline.is_none() {
        return Err(usage("--checkpoint", "nothing to evaluate; give a checkpoint or --baseline"));
    }
    let (_, vocab) = load_vocab(cfg)?;
    let (_, passages) = load_passages(cfg, &vocab)?;
    let question_file = args.questions.clone().or_else(|| cfg.data.dev_questions.clone());
    let question_file = required(question_file.as_deref(), "--questions", "question file")?;
    let questions = load_questions(question_file, &vocab)?;
    let qrels_file = args.qrels.clone().or_else(|| cfg.data.dev_qrels.clone());
    let qrels_flag = if args.qrels.is_some() { "--qrels" } else { "--dev-qrels" };
    let qrels = dev_qrels(qrels_file.as_deref(), &questions, qrels_flag)?;
    let judge = HitJudge::new(&qrels, &passages);
    let depth = *ks.last().expect("non-empty");

    let mut report = Report::new("Retrieval");
    let mut accuracy = BTreeMap::new();
    report
        .notes
        .insert("questions".into(), question_file.display().to_string());
    if let Some(path) = &args.checkpoint {
        if !path.exists() {
            return Err(usage("--checkpoint", format!("{} does not exist", path.display())));
        }
        let ckpt = Checkpoint::load(path).map_err(runtime)?;
        check_dims(&ckpt.params, &vocab, cfg)?;
        let mut run = trainer::dense_run(&ckpt.params, &passages, &questions, depth, cfg.train.num_shards)
            .map_err(runtime)?;
        run.metadata.checkpoint_step = Some(ckpt.step);
        let acc = eval::topk_accuracy(&run, &judge, &ks).map_err(runtime)?;
        let mut metrics = Report::accuracy_metrics(&acc);
        metrics.extend(graded_metrics(&run, &qrels, depth.min(passages.len()))?);
        let label = format!("dense@{}", ckpt.step);
        report.push_row(&label, metrics);
        accuracy.insert(label, acc);
    }
    if args.baseline == Some(Baseline::Bm25) {
        let run = bm25_run(&passages, &questions, depth);
        let acc = eval::topk_accuracy(&run, &judge, &ks).map_err(runtime)?;
        let mut metrics = Report::accuracy_metrics(&acc);
        metrics.extend(graded_metrics(&run, &qrels, depth.min(passages.len()))?);
        report.push_row("bm25", metrics);
        accuracy.insert("bm25".into(), acc);
    }
    match &args.out {
        Some(out) => {
            if let Some(parent) = out.parent() {
                create_dir(parent)?;
            }
            report.emit(args.format, out).map_err(runtime)?;
        }
        None => print!("{}", report.render(args.format)),
    }
    Ok(EvalOutcome { report, accuracy })
}

// ---------------------------------------------------------------- ablate

/// The candidate-type comparison: uniform only, positive plus uniform, and
/// retrieved top-K, all with `k` candidates.
pub fn default_ablation_modes(k: usize) -> Vec<String> {
    vec![
        format!("mix:0,0,{k}"),
        format!("mix:1,0,{}", k.saturating_sub(1)),
        "topk".to_string(),
    ]
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: String,
    pub run_dir: PathBuf,
    pub accuracy: BTreeMap<usize, f64>,
}

/// Trains once per candidate mode, each in `run_dir/ablate/<mode>`, and
/// reports final dev accuracy.
pub fn cmd_ablate(cfg: &RunConfig, modes: &[String], format: ReportFormat) -> Result<(Report, Vec<AblationRow>)> {
    if modes.is_empty() {
        return Err(usage("--modes", "no candidate modes given"));
    }
    for m in modes {
        m.parse::<CandidateMode>().map_err(|e| usage("--modes", e.to_string()))?;
    }
    let dev_file = required(cfg.data.dev_questions.as_deref(), "--dev-questions", "dev question file")?.to_path_buf();
    let mut cfg = cfg.clone();
    // Every mode starts from the same initial index.
    let index_file = index_path(&cfg);
    cfg.data.index = Some(index_file);
    cfg.data.vocab = Some(vocab_path(&cfg));
    let root = cfg.run_dir.join("ablate");
    let mut report = Report::new("Candidates");
    let mut rows = Vec::new();
    for mode in modes {
        let mut sub = cfg.clone();
        sub.run_dir = root.join(mode.replace([':', ','], "_"));
        let summary = cmd_train(
            &sub,
            &TrainArgs {
                ablation: Some(mode.clone()),
                ..Default::default()
            },
        )?;
        let outcome = cmd_eval(
            &sub,
            &EvalArgs {
                checkpoint: Some(summary.final_checkpoint.clone()),
                questions: Some(dev_file.clone()),
                format,
                out: Some(sub.run_dir.join("eval.txt")),
                ..Default::default()
            },
        )?;
        let acc = outcome.accuracy.into_values().next().unwrap_or_default();
        report.push_row(mode, Report::accuracy_metrics(&acc));
        rows.push(AblationRow {
            mode: mode.clone(),
            run_dir: sub.run_dir,
            accuracy: acc,
        });
    }
    let out = root.join(match format {
        ReportFormat::Table => "report.txt",
        ReportFormat::Json => "report.json",
    });
    report.emit(format, &out).map_err(runtime)?;
    print!("{}", report.render(format));
    Ok((report, rows))
}
