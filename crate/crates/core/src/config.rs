//! Run configuration, read from TOML. Unknown keys are rejected and the seed
//! has no default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderDims;
use crate::teacher::TeacherConfig;
use crate::trainer::TrainConfig;

/// Environment variables that may override data paths, keyed by field.
pub const PATH_ENV: &[(&str, &str)] = &[
    ("passages", "AUTORETRIEVE_PASSAGES"),
    ("vocab", "AUTORETRIEVE_VOCAB"),
    ("index", "AUTORETRIEVE_INDEX"),
    ("train_questions", "AUTORETRIEVE_TRAIN_QUESTIONS"),
    ("train_qrels", "AUTORETRIEVE_TRAIN_QRELS"),
    ("dev_questions", "AUTORETRIEVE_DEV_QUESTIONS"),
    ("dev_qrels", "AUTORETRIEVE_DEV_QRELS"),
    ("run_dir", "AUTORETRIEVE_RUN_DIR"),
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub passages: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub train_questions: Option<PathBuf>,
    /// Gold passages for training questions (TSV qrels); needed only by
    /// ablation candidate modes.
    pub train_qrels: Option<PathBuf>,
    pub dev_questions: Option<PathBuf>,
    /// Graded dev judgements; without them, dev answers are string-matched.
    pub dev_qrels: Option<PathBuf>,
    pub min_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_emb: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    /// Parameter-initialization seed; the run seed when absent.
    pub init_seed: Option<u64>,
    /// Half-width of the uniform token-embedding initialization.
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_emb: 64,
            d_hidden: 64,
            d_out: 64,
            init_seed: None,
            init_scale: crate::encoder::DEFAULT_INIT_SCALE,
        }
    }
}

impl EncoderConfig {
    pub fn dims(&self, vocab_size: usize) -> EncoderDims {
        EncoderDims {
            vocab_size,
            d_emb: self.d_emb,
            d_hidden: self.d_hidden,
            d_out: self.d_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 5, 20, 100],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("run")
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        RunConfig {
            seed,
            run_dir: default_run_dir(),
            data: DataConfig {
                min_count: 1,
                ..Default::default()
            },
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            teacher: TeacherConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run_dir);
        for p in self.data_paths_mut().into_iter().flatten() {
            fix(p);
        }
    }

    fn data_paths_mut(&mut self) -> [Option<&mut PathBuf>; 7] {
        let d = &mut self.data;
        [
            d.passages.as_mut(),
            d.vocab.as_mut(),
            d.index.as_mut(),
            d.train_questions.as_mut(),
            d.train_qrels.as_mut(),
            d.dev_questions.as_mut(),
            d.dev_qrels.as_mut(),
        ]
    }

    /// Applies `AUTORETRIEVE_*` path overrides from `lookup`.
    pub fn apply_env<F: Fn(&str) -> Option<String>>(&mut self, lookup: F) {
        for (field, var) in PATH_ENV {
            let Some(value) = lookup(var) else { continue };
            let path = PathBuf::from(value);
            let value = Some(path.clone());
            match *field {
                "passages" => self.data.passages = value,
                "vocab" => self.data.vocab = value,
                "index" => self.data.index = value,
                "train_questions" => self.data.train_questions = value,
                "train_qrels" => self.data.train_qrels = value,
                "dev_questions" => self.data.dev_questions = value,
                "dev_qrels" => self.data.dev_qrels = value,
                "run_dir" => self.run_dir = path,
                _ => unreachable!(),
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        self.teacher.validate()?;
        let e = &self.encoder;
        if e.d_emb == 0 || e.d_hidden == 0 || e.d_out == 0 {
            return Err("encoder dimensions must be positive".into());
        }
        if !(e.init_scale.is_finite() && e.init_scale > 0.0) {
            return Err(format!("encoder.init_scale must be positive, got {}", e.init_scale));
        }
        let ks = &self.eval.ks;
        if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("eval.ks must be ascending and positive, got {ks:?}"));
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        self.encoder.init_seed.unwrap_or(self.seed)
    }

    /// Canonical JSON snapshot stored in checkpoints and manifests.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::from_toml("[train]\nk = 4").unwrap_err();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2").is_err());
        assert!(RunConfig::from_toml("seed = 1\n[train]\nkk = 2").is_err());
    }

    #[test]
    fn full_config() {
        let cfg = RunConfig::from_toml(
            r#"
seed = 7
run_dir = "runs/a"
[data]
passages = "p.jsonl"
min_count = 1
[encoder]
d_emb = 16
d_hidden = 16
d_out = 8
[train]
tau = 0.5
k = 8
batch_size = 16
lr = 0.001
total_steps = 100
refresh_every = 10
candidates = "mix:1,1,6"
[teacher]
kind = "toy"
alpha = 1.0
[eval]
ks = [1, 5]
"#,
        )
        .unwrap();
        assert_eq!(cfg.train.k, 8);
        assert_eq!(cfg.encoder.d_out, 8);
        assert_eq!(cfg.eval.ks, vec![1, 5]);
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("seed = 1\n[train]\ntau = -1.0").is_err());
        assert!(RunConfig::from_toml("seed = 1\n[eval]\nks = [5, 1]").is_err());
        assert!(RunConfig::from_toml("seed = 1\n[teacher]\nkind = \"toy\"\nalpha = 0.0").is_err());
    }

    #[test]
    fn env_overrides_paths() {
        let mut cfg = RunConfig::new(1);
        cfg.apply_env(|k| (k == "AUTORETRIEVE_PASSAGES").then(|| "/tmp/x.jsonl".to_string()));
        assert_eq!(cfg.data.passages, Some(PathBuf::from("/tmp/x.jsonl")));
        assert_eq!(cfg.data.vocab, None);
    }
}
