//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracehide::bench::BenchmarkConfig;
use tracehide::corpus::{SamplingStrategy, SynthParams, TargetedWeighting};
use tracehide::geo::TessellationConfig;
use tracehide::importance::ScoreKind;
use tracehide::nn::TrainConfig;
use tracehide::seed::{self, Stage};
use tracehide::unlearn::{self, Method, UnlearnConfig};
use tracehide::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub tessellation: TessellationConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub unlearn: UnlearnSection,
    #[serde(default)]
    pub request: RequestSection,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Raw point CSV, input of `tokenize`.
    pub raw_csv: Option<PathBuf>,
    /// Tokenized corpus; defaults to `<out_dir>/corpus.jsonl`.
    pub corpus: Option<PathBuf>,
    pub test_fraction: f64,
    /// Teacher checkpoint; defaults to `<out_dir>/teacher.ckpt`.
    pub teacher: Option<PathBuf>,
    /// Model evaluated by `evaluate`; defaults to `<out_dir>/student.ckpt`.
    pub model: Option<PathBuf>,
    /// Directory holding `forget.idx` and `retain.idx`; defaults to `out_dir`.
    pub partition_dir: Option<PathBuf>,
    /// Precomputed score file for tracehiding; computed in-process when absent.
    pub scores: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            raw_csv: None,
            corpus: None,
            test_fraction: 0.2,
            teacher: None,
            model: None,
            partition_dir: None,
            scores: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub num_users: usize,
    pub traj_per_user: usize,
    pub vocab_size: usize,
    pub mean_len: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            num_users: 20,
            traj_per_user: 30,
            vocab_size: 200,
            mean_len: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            clip_norm: d.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnSection {
    pub method: Method,
    pub score_kind: ScoreKind,
    pub c1: f64,
    pub c2: f64,
    pub forget_weight: f64,
    /// Defaults to `ceil(train.epochs / 10)`.
    pub epochs: Option<usize>,
    pub learning_rate: f64,
    pub retain_batch_size: usize,
    pub forget_batch_size: usize,
    pub clip_norm: Option<f64>,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        let d = UnlearnConfig::default();
        Self {
            method: d.method,
            score_kind: d.score_kind,
            c1: d.c1,
            c2: d.c2,
            forget_weight: d.forget_weight,
            epochs: None,
            learning_rate: d.learning_rate,
            retain_batch_size: d.retain_batch_size,
            forget_batch_size: d.forget_batch_size,
            clip_norm: d.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequestSection {
    pub strategy: SamplingStrategy,
    pub fraction: f64,
    pub weighting: TargetedWeighting,
    /// Explicit user ids; overrides sampling when set.
    pub users: Option<Vec<usize>>,
}

impl Default for RequestSection {
    fn default() -> Self {
        Self {
            strategy: SamplingStrategy::Uniform,
            fraction: 0.1,
            weighting: TargetedWeighting::default(),
            users: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub kind: ScoreKind,
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self { kind: ScoreKind::Entropy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub methods: Vec<Method>,
    pub score_kinds: Vec<ScoreKind>,
    pub fractions: Vec<f64>,
    pub strategies: Vec<SamplingStrategy>,
    pub runs: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            score_kinds: vec![ScoreKind::Entropy],
            fractions: vec![0.01, 0.05, 0.10, 0.20],
            strategies: vec![SamplingStrategy::Uniform, SamplingStrategy::Targeted],
            runs: 5,
        }
    }
}

/// Line number (1-based) of byte `offset` in `text`.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    /// Parses a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| line_of(&text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        let d = &mut self.data;
        for p in [
            &mut d.raw_csv,
            &mut d.corpus,
            &mut d.teacher,
            &mut d.model,
            &mut d.partition_dir,
            &mut d.scores,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.data.corpus.clone().unwrap_or_else(|| self.out("corpus.jsonl"))
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.data.teacher.clone().unwrap_or_else(|| self.out("teacher.ckpt"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.data.model.clone().unwrap_or_else(|| self.out("student.ckpt"))
    }

    pub fn partition_dir(&self) -> PathBuf {
        self.data.partition_dir.clone().unwrap_or_else(|| self.out_dir.clone())
    }

    /// Seed of `stage` for the single-pipeline commands (run 0).
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        seed::derive(self.seed, 0, stage)
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            num_users: self.synth.num_users,
            traj_per_user: self.synth.traj_per_user,
            vocab_size: self.synth.vocab_size,
            mean_len: self.synth.mean_len,
            seed: self.stage_seed(Stage::Synth),
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.stage_seed(stage),
            clip_norm: self.train.clip_norm,
        }
    }

    pub fn unlearn_config(&self) -> UnlearnConfig {
        let u = &self.unlearn;
        UnlearnConfig {
            method: u.method,
            score_kind: u.score_kind.clone(),
            c1: u.c1,
            c2: u.c2,
            forget_weight: u.forget_weight,
            epochs: u.epochs.unwrap_or_else(|| unlearn::default_epochs(self.train.epochs)),
            learning_rate: u.learning_rate,
            seed: self.stage_seed(Stage::Unlearn),
            retain_batch_size: u.retain_batch_size,
            forget_batch_size: u.forget_batch_size,
            clip_norm: u.clip_norm,
        }
    }

    pub fn benchmark_config(&self) -> BenchmarkConfig {
        let b = &self.benchmark;
        BenchmarkConfig {
            global_seed: self.seed,
            runs: b.runs,
            methods: b.methods.clone(),
            score_kinds: b.score_kinds.clone(),
            fractions: b.fractions.clone(),
            strategies: b.strategies.clone(),
            weighting: self.request.weighting,
            test_fraction: self.data.test_fraction,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            train: self.train_config(Stage::TeacherTrain),
            unlearn: self.unlearn_config(),
        }
    }
}

/// Fails with a config error when a referenced input is missing.
pub fn require_file(field: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{field} = {} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_uses_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.benchmark.methods.len(), 7);
        assert_eq!(cfg.unlearn_config().epochs, 3);
        assert_eq!(cfg.data.test_fraction, 0.2);
    }

    #[test]
    fn sections_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 9
            [unlearn]
            method = "neggrad_plus"
            score_kind = { unified_trajectory = { alpha = 0.2, beta = 0.3, gamma = 0.5 } }
            [request]
            strategy = "targeted"
            weighting = "entropy"
            [benchmark]
            methods = ["tracehiding", "bad_t"]
            score_kinds = ["entropy", "coverage"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.unlearn.method, Method::NeggradPlus);
        assert_eq!(cfg.request.strategy, SamplingStrategy::Targeted);
        assert_eq!(cfg.request.weighting, TargetedWeighting::Entropy);
        assert_eq!(cfg.benchmark_config().cell_count(), 3 * 4 * 2 * 5);
        assert_eq!(cfg.stage_seed(Stage::Split), 11);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlr = 0.1\n").is_err());
    }

    #[test]
    fn line_numbers() {
        assert_eq!(line_of("a\nb\nc", 4), 3);
    }
}
