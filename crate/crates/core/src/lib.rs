//! Unsupervised dense-retriever training.
//!
//! A dual encoder is trained without labelled question–passage pairs: for
//! each question it retrieves candidate passages, a frozen teacher scores how
//! well each passage reconstructs the question, and the retriever's
//! distribution over the candidates is pulled toward the teacher's with a KL
//! loss.

pub mod bm25;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod index;
pub mod synth;
pub mod teacher;
pub mod trainer;
pub mod util;

pub use config::RunConfig;
pub use corpus::{Passage, Question, Vocabulary};
pub use encoder::{EncoderDims, EncoderParams, Side};
pub use index::{EmbeddingIndex, IndexHandle};
pub use teacher::{RelevanceScorer, TeacherConfig, ToyTeacher};
pub use trainer::{Trainer, TrainerState};
