//! Retriever training by distillation from a frozen question-reconstruction
//! scorer.
//!
//! Every step, for each question in the batch:
//!
//! 1. retrieve K candidates from the stale index with the current question
//!    tower, then re-encode question and candidates with the current
//!    parameters to get fresh scores;
//! 2. form the student distribution `softmax(fresh / τ)` over the K
//!    candidates;
//! 3. score each candidate with the teacher and form the teacher
//!    distribution `softmax(log-likelihood)`;
//! 4. take `KL(teacher ‖ student)`, averaged over the batch, and backpropagate
//!    through the fresh scores into both towers.
//!
//! Retrieval itself is a discrete selection and carries no gradient. The
//! index is rebuilt every `refresh_every` optimizer steps.
//!
//! Read as an autoencoder: the question is encoded, a passage is drawn as the
//! latent, and the frozen teacher decodes it back into the question. Pulling
//! the student toward the teacher raises the expected reconstruction
//! likelihood under the student.

pub mod candidates;
pub mod checkpoint;
pub mod distill;
pub mod optim;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Passage, Question};
use crate::encoder::{self, EncoderError, EncoderParams, GradientBuffer, Mode, Side};
use crate::eval::{self, EvalError, HitJudge, QuestionRanking, RankedPassage, RetrievalRun};
use crate::index::{EmbeddingIndex, IndexError, IndexHandle};
use crate::teacher::{RelevanceScorer, TeacherError};
use crate::util::{self, mix_seed, stable_hash};

pub use candidates::{CandidateComposer, CandidateMode, Composed};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use distill::{entropy, kl_loss_and_grad, student_distribution, teacher_distribution};
pub use optim::{lr_at, AdamState, UpdateOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("numerics: {0}")]
    Numeric(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Optimization and retrieval knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub k: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Index refresh cadence, in optimizer steps.
    pub refresh_every: u64,
    /// Checkpoint and dev-evaluation cadence, in optimizer steps.
    pub checkpoint_every: u64,
    pub num_shards: usize,
    pub dropout: f64,
    /// `topk`, `mix:P,N,U`, or `inbatch:P,N`.
    pub candidates: String,
    pub train_questions_limit: Option<usize>,
    /// Cut-off for dev-set model selection.
    pub selection_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 1.0,
            k: 8,
            batch_size: 16,
            lr: 2e-5,
            warmup_steps: 0,
            total_steps: 1000,
            refresh_every: 500,
            checkpoint_every: 500,
            num_shards: 4,
            dropout: encoder::DEFAULT_DROPOUT,
            candidates: "topk".into(),
            train_questions_limit: None,
            selection_k: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<CandidateMode, TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("train.tau must be positive, got {}", self.tau));
        }
        if self.k == 0 {
            return bad("train.k must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be non-negative, got {}", self.lr));
        }
        if self.warmup_steps > self.total_steps {
            return bad("train.warmup_steps exceeds train.total_steps".into());
        }
        if self.refresh_every == 0 || self.checkpoint_every == 0 {
            return bad("refresh and checkpoint cadences must be at least 1".into());
        }
        if self.num_shards == 0 {
            return bad("train.num_shards must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("train.dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.selection_k == 0 {
            return bad("train.selection_k must be at least 1".into());
        }
        if self.train_questions_limit == Some(0) {
            return bad("train.train_questions_limit must be at least 1".into());
        }
        self.candidates.parse().map_err(TrainError::Config)
    }
}

/// Everything about one question's contribution to a step.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub question_id: String,
    pub indices: Vec<usize>,
    pub stale_scores: Vec<f64>,
    pub fresh_scores: Vec<f64>,
    pub teacher_log_probs: Vec<f64>,
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
    pub loss: f64,
}

/// Per-question dropout seeds, derived from `(seed, step, question id)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutPlan {
    pub seed: u64,
    pub rate: f64,
}

impl DropoutPlan {
    pub fn mode(&self, slot: u64) -> Mode {
        if self.rate > 0.0 {
            Mode::Train {
                seed: mix_seed(&[self.seed, slot]),
                rate: self.rate,
            }
        } else {
            Mode::Eval
        }
    }
}

/// KL loss for one question over fixed candidates, with the gradient of
/// `loss * weight` accumulated into `grads`. Slot 0 of `dropout` is the
/// question; slot `i + 1` is candidate `i`.
#[allow(clippy::too_many_arguments)]
pub fn question_loss_and_grad(
    params: &EncoderParams,
    question: &Question,
    candidates: &[&Passage],
    teacher_log_probs: &[f64],
    tau: f64,
    dropout: DropoutPlan,
    weight: f64,
    grads: &mut GradientBuffer,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>), TrainError> {
    let q_cache = encoder::forward(&question.tokens, Side::Question, params, dropout.mode(0))?;
    let p_caches = candidates
        .iter()
        .enumerate()
        .map(|(i, p)| encoder::forward(&p.encoder_input(), Side::Passage, params, dropout.mode(i as u64 + 1)))
        .collect::<Result<Vec<_>, _>>()?;
    let fresh: Vec<f64> = p_caches
        .iter()
        .map(|c| encoder::score_pair(&q_cache.output, &c.output))
        .collect::<Result<_, _>>()?;
    let student = student_distribution(&fresh, tau)?;
    let teacher = teacher_distribution(teacher_log_probs)?;
    let (loss, d_scores) = kl_loss_and_grad(&teacher, &student, tau)?;

    let d = params.dims.d_out;
    let mut d_question = vec![0.0; d];
    for (cache, &ds) in p_caches.iter().zip(&d_scores) {
        let ds = ds * weight;
        if ds == 0.0 {
            continue;
        }
        for (acc, p) in d_question.iter_mut().zip(cache.output.as_slice()) {
            *acc += ds * p;
        }
        let up: Vec<f64> = q_cache.output.as_slice().iter().map(|q| ds * q).collect();
        encoder::backward(cache, params, &up, grads)?;
    }
    encoder::backward(&q_cache, params, &d_question, grads)?;
    Ok((loss, fresh, student, teacher))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub index_version: u64,
    pub ms: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
}

/// Parameters, optimizer moments, and progress.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: EncoderParams,
    pub optimizer: AdamState,
    /// Completed optimizer steps.
    pub step: u64,
    pub config: TrainConfig,
    pub seed: u64,
}

impl TrainerState {
    pub fn new(params: EncoderParams, config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let optimizer = AdamState::new(&params);
        Ok(TrainerState {
            params,
            optimizer,
            step: 0,
            config,
            seed,
        })
    }
}

/// Deterministic batch order: a seeded shuffle per epoch, read as one
/// continuous stream so any step's batch can be recomputed on resume.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        BatchSampler {
            n,
            batch_size,
            seed,
            cached: None,
        }
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut util::rng(mix_seed(&[self.seed, 0xba7c, epoch])));
            self.cached = Some((epoch, order));
        }
        &self.cached.as_ref().unwrap().1
    }

    /// Question positions for the batch that produces optimizer step `step + 1`.
    pub fn batch(&mut self, step: u64) -> Vec<usize> {
        let start = step * self.batch_size as u64;
        (start..start + self.batch_size as u64)
            .map(|pos| {
                let epoch = pos / self.n as u64;
                let offset = (pos % self.n as u64) as usize;
                self.epoch_order(epoch)[offset]
            })
            .collect()
    }
}

/// `limit` distinct question positions drawn with `seed`, in ascending order.
pub fn subsample_questions(n: usize, limit: usize, seed: u64) -> Vec<usize> {
    if limit >= n {
        return (0..n).collect();
    }
    let mut picked = rand::seq::index::sample(&mut util::rng(mix_seed(&[seed, 0x5ab5])), n, limit).into_vec();
    picked.sort_unstable();
    picked
}

pub struct Trainer<'a> {
    pub passages: &'a [Passage],
    pub state: TrainerState,
    pub index: IndexHandle,
    teacher: &'a dyn RelevanceScorer,
    composer: CandidateComposer,
}

impl<'a> Trainer<'a> {
    /// Builds the initial index from the current passage tower unless one is
    /// supplied.
    pub fn new(
        passages: &'a [Passage],
        state: TrainerState,
        teacher: &'a dyn RelevanceScorer,
        gold: HashMap<String, Vec<usize>>,
        index: Option<EmbeddingIndex>,
    ) -> Result<Self, TrainError> {
        let mode = state.config.validate()?;
        let composer = CandidateComposer::new(mode, state.config.k, passages, gold, state.seed)?;
        let index = match index {
            Some(i) => {
                if i.len != passages.len() || i.dim != state.params.dims.d_out {
                    return Err(TrainError::Config(format!(
                        "index has {} rows of dim {}, corpus has {} passages and encoder dim {}",
                        i.len,
                        i.dim,
                        passages.len(),
                        state.params.dims.d_out
                    )));
                }
                i
            }
            None => EmbeddingIndex::build(passages, &state.params, state.config.num_shards)?,
        };
        Ok(Trainer {
            passages,
            state,
            index: IndexHandle::new(index),
            teacher,
            composer,
        })
    }

    pub fn teacher(&self) -> &dyn RelevanceScorer {
        self.teacher
    }

    fn dropout_for(&self, question: &Question) -> DropoutPlan {
        DropoutPlan {
            seed: mix_seed(&[self.state.seed, self.state.step, stable_hash(question.id.as_bytes())]),
            rate: self.state.config.dropout,
        }
    }

    /// Candidate sets and summed gradients for one batch, without updating.
    pub fn forward_backward(
        &self,
        batch: &[&Question],
        index: &Arc<EmbeddingIndex>,
    ) -> Result<(Vec<CandidateSet>, GradientBuffer), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Config("empty batch".into()));
        }
        let params = &self.state.params;
        let composed = self.composer.compose_batch(batch, index, self.state.step, |q| {
            Ok(encoder::encode(&q.tokens, Side::Question, params, Mode::Eval)?.0)
        })?;
        let weight = 1.0 / batch.len() as f64;
        let tau = self.state.config.tau;
        let per_question: Vec<(CandidateSet, GradientBuffer)> = batch
            .par_iter()
            .zip(composed.into_par_iter())
            .map(|(q, c)| {
                let cands: Vec<&Passage> = c.indices.iter().map(|&i| &self.passages[i]).collect();
                let log_probs = self.teacher.score_candidates(q, &cands)?;
                if log_probs.len() != cands.len() {
                    return Err(TrainError::Teacher(TeacherError::Protocol(format!(
                        "{} teacher scores for {} candidates",
                        log_probs.len(),
                        cands.len()
                    ))));
                }
                let mut grads = params.gradient_buffer();
                let (loss, fresh, student, teacher) = question_loss_and_grad(
                    params,
                    q,
                    &cands,
                    &log_probs,
                    tau,
                    self.dropout_for(q),
                    weight,
                    &mut grads,
                )?;
                Ok((
                    CandidateSet {
                        question_id: q.id.clone(),
                        indices: c.indices,
                        stale_scores: c.stale_scores,
                        fresh_scores: fresh,
                        teacher_log_probs: log_probs,
                        student,
                        teacher,
                        loss,
                    },
                    grads,
                ))
            })
            .collect::<Result<_, TrainError>>()?;
        // Fixed reduction order keeps runs reproducible.
        let mut total = params.gradient_buffer();
        let mut sets = Vec::with_capacity(per_question.len());
        for (set, g) in per_question {
            total.add_assign(&g);
            sets.push(set);
        }
        Ok((sets, total))
    }

    /// One optimizer step on `batch`. A teacher failure aborts the step and
    /// retries it once.
    pub fn train_step(&mut self, batch: &[&Question]) -> Result<StepReport, TrainError> {
        let started = Instant::now();
        let index = self.index.snapshot();
        let (sets, grads) = match self.forward_backward(batch, &index) {
            Err(TrainError::Teacher(_)) => self.forward_backward(batch, &index)?,
            other => other?,
        };
        let loss = sets.iter().map(|s| s.loss).sum::<f64>() / sets.len() as f64;
        let grad_norm = grads.l2_norm();
        let cfg = &self.state.config;
        let lr = lr_at(self.state.step + 1, cfg.warmup_steps, cfg.total_steps, cfg.lr);
        let outcome = self.state.optimizer.update(&mut self.state.params, &grads, lr);
        self.state.step += 1;
        if self.state.step.is_multiple_of(self.state.config.refresh_every) {
            self.index.refresh(self.passages, &self.state.params)?;
        }
        Ok(StepReport {
            step: self.state.step,
            loss,
            lr,
            grad_norm,
            index_version: self.index.snapshot().version,
            ms: started.elapsed().as_millis() as u64,
            skipped: outcome == UpdateOutcome::Skipped,
        })
    }
}

/// Encodes `questions` and ranks passages against a freshly built index.
pub fn dense_run(
    params: &EncoderParams,
    passages: &[Passage],
    questions: &[Question],
    depth: usize,
    num_shards: usize,
) -> Result<RetrievalRun, TrainError> {
    let index = EmbeddingIndex::build(passages, params, num_shards)?;
    let depth = depth.min(passages.len());
    let rankings = questions
        .par_iter()
        .map(|q| {
            let emb = encoder::encode(&q.tokens, Side::Question, params, Mode::Eval)?;
            let hits = index.search(&emb.0, depth)?;
            Ok(QuestionRanking::new(
                q.id.clone(),
                hits.hits
                    .iter()
                    .map(|h| RankedPassage {
                        pid: passages[h.index].id.clone(),
                        score: h.score,
                    })
                    .collect(),
            ))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut run = RetrievalRun {
        questions: rankings,
        ..Default::default()
    };
    run.metadata.index_version = Some(index.version);
    Ok(run)
}

/// Top-K accuracy of `params` on `questions`, always against a fresh index.
pub fn dense_accuracy(
    params: &EncoderParams,
    passages: &[Passage],
    questions: &[Question],
    judge: &HitJudge<'_>,
    ks: &[usize],
    num_shards: usize,
) -> Result<std::collections::BTreeMap<usize, f64>, TrainError> {
    let depth = *ks.last().ok_or_else(|| TrainError::Config("no cut-offs".into()))?;
    let run = dense_run(params, passages, questions, depth, num_shards)?;
    Ok(eval::topk_accuracy(&run, judge, ks)?)
}

/// Receives progress from [`fit`].
pub trait TrainObserver {
    fn on_step(&mut self, _report: &StepReport) -> Result<(), TrainError> {
        Ok(())
    }
    /// Called every `checkpoint_every` steps and at the end, after the dev
    /// metric (if any) has been appended to `dev_history`.
    fn on_checkpoint(&mut self, _trainer: &Trainer<'_>, _dev_history: &[(u64, f64)]) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Dev questions and the judge used for model selection.
pub struct DevSet<'d> {
    pub questions: &'d [Question],
    pub judge: HitJudge<'d>,
}

/// Trains until `total_steps`, evaluating and checkpointing on cadence.
/// `dev_history` carries `(step, top-selection_k accuracy)` and is extended in
/// place, so a resumed run continues its history.
pub fn fit(
    trainer: &mut Trainer<'_>,
    questions: &[Question],
    dev: Option<&DevSet<'_>>,
    dev_history: &mut Vec<(u64, f64)>,
    observer: &mut dyn TrainObserver,
) -> Result<(), TrainError> {
    if questions.is_empty() {
        return Err(TrainError::Config("no training questions".into()));
    }
    let cfg = trainer.state.config.clone();
    let mut sampler = BatchSampler::new(questions.len(), cfg.batch_size, trainer.state.seed);
    while trainer.state.step < cfg.total_steps {
        let batch: Vec<&Question> = sampler
            .batch(trainer.state.step)
            .into_iter()
            .map(|i| &questions[i])
            .collect();
        let report = trainer.train_step(&batch)?;
        observer.on_step(&report)?;
        let step = trainer.state.step;
        if step.is_multiple_of(cfg.checkpoint_every) || step == cfg.total_steps {
            if let Some(dev) = dev {
                let acc = dense_accuracy(
                    &trainer.state.params,
                    trainer.passages,
                    dev.questions,
                    &dev.judge,
                    &[cfg.selection_k.min(trainer.passages.len())],
                    cfg.num_shards,
                )?;
                dev_history.push((step, acc.values().next().copied().unwrap_or(0.0)));
            }
            observer.on_checkpoint(trainer, dev_history)?;
        }
    }
    Ok(())
}

/// Step with the highest dev metric; the earliest wins ties.
pub fn best_step(history: &[(u64, f64)]) -> Option<u64> {
    history
        .iter()
        .fold(None, |best: Option<(u64, f64)>, &(s, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((s, v)),
        })
        .map(|(s, _)| s)
}
