//! The (method x score kind x strategy x fraction x run) benchmark matrix.
//!
//! Each run gets its own split and teacher. Within a run, every
//! (strategy, fraction) pair draws one deletion request, retrains once, and
//! evaluates every method against that shared retrain time. Tasks run on a
//! worker pool whose size can be capped with `TRACEHIDE_THREADS`; results are
//! gathered in task order, so the output does not depend on scheduling.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, Partition, SamplingStrategy, TargetedWeighting};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::importance::{self, ImportanceVector, ScoreKind};
use crate::nn::{self, Example, ModelConfig, SequenceClassifier, TrainConfig};
use crate::seed::{self, Stage};
use crate::unlearn::{self, Method, UnlearnConfig, UnlearnInputs};

pub const THREADS_ENV: &str = "TRACEHIDE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub global_seed: u64,
    pub runs: usize,
    pub methods: Vec<Method>,
    /// Score kinds evaluated for tracehiding; other methods ignore them.
    pub score_kinds: Vec<ScoreKind>,
    pub fractions: Vec<f64>,
    pub strategies: Vec<SamplingStrategy>,
    pub weighting: TargetedWeighting,
    pub test_fraction: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub train: TrainConfig,
    /// Template for every unlearning run; its seed is replaced per cell.
    pub unlearn: UnlearnConfig,
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("benchmark needs at least one run".into()));
        }
        if self.methods.is_empty() || self.fractions.is_empty() || self.strategies.is_empty() {
            return Err(Error::Config("methods, fractions and strategies must be non-empty".into()));
        }
        if self.methods.contains(&Method::Tracehiding) && self.score_kinds.is_empty() {
            return Err(Error::Config("tracehiding needs at least one score kind".into()));
        }
        for k in &self.score_kinds {
            k.validate()?;
        }
        self.train.validate()?;
        self.unlearn.validate()
    }

    /// Number of cells the matrix produces.
    pub fn cell_count(&self) -> usize {
        let per_task: usize = self
            .methods
            .iter()
            .map(|m| if *m == Method::Tracehiding { self.score_kinds.len() } else { 1 })
            .sum();
        per_task * self.fractions.len() * self.strategies.len() * self.runs
    }
}

/// Split corpus and trained teacher of one run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub run: u64,
    pub corpus: Corpus,
    pub model_config: ModelConfig,
    pub teacher: SequenceClassifier,
    pub teacher_seconds: f64,
}

pub fn examples<'a>(corpus: &'a Corpus, indices: &[usize]) -> Vec<Example<'a>> {
    indices
        .iter()
        .map(|&i| (corpus.trajectories[i].tokens.as_slice(), corpus.trajectories[i].user))
        .collect()
}

pub fn train_config_for(cfg: &TrainConfig, global: u64, run: u64, stage: Stage) -> TrainConfig {
    TrainConfig {
        seed: seed::derive(global, run, stage),
        ..*cfg
    }
}

/// Splits the base corpus and trains the teacher for `run`.
pub fn prepare_run(base: &Corpus, cfg: &BenchmarkConfig, run: u64) -> Result<RunState> {
    let g = cfg.global_seed;
    let corpus = base
        .clone()
        .split_train_test(cfg.test_fraction, seed::derive(g, run, Stage::Split))?;
    let model_config = ModelConfig {
        vocab_size: corpus.vocab_size,
        num_classes: corpus.num_users,
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        seed: seed::derive(g, run, Stage::TeacherInit),
    };
    let init = nn::init_model(&model_config)?;
    let train = examples(&corpus, corpus.train_indices()?);
    let out = nn::train(&init, &train, &train_config_for(&cfg.train, g, run, Stage::TeacherTrain))?;
    Ok(RunState {
        run,
        corpus,
        model_config,
        teacher: out.model,
        teacher_seconds: out.wall_clock_seconds,
    })
}

/// Test indices split by whether their user was deleted: `(retained, deleted)`.
pub fn split_test(corpus: &Corpus, partition: &Partition) -> Result<(Vec<usize>, Vec<usize>)> {
    let deleted: BTreeSet<usize> = partition.forget.iter().map(|&i| corpus.trajectories[i].user).collect();
    Ok(corpus
        .test_indices()?
        .iter()
        .partition(|&&i| !deleted.contains(&corpus.trajectories[i].user)))
}

/// Metrics of `model` on a partition of `corpus`. Test accuracy is measured
/// on the retained users' test trajectories; the deleted users' test
/// trajectories are the non-members of the membership attack.
pub fn evaluate(model: &SequenceClassifier, corpus: &Corpus, partition: &Partition) -> Result<(eval::AccuracySplits, eval::MiaResult)> {
    let (test_retained, test_deleted) = split_test(corpus, partition)?;
    let forget = examples(corpus, &partition.forget);
    let retain = examples(corpus, &partition.retain);
    let acc = eval::ua_ra_ta(model, &forget, &retain, &examples(corpus, &test_retained))?;
    let mia = eval::mia_auc(model, &forget, &examples(corpus, &test_deleted))?;
    Ok((acc, mia))
}

/// Normalized scores of the forget samples, in partition order.
pub fn forget_scores(scores: &ImportanceVector, partition: &Partition) -> Result<Vec<f64>> {
    partition.forget.iter().map(|&i| scores.norm_of(i)).collect()
}

struct Task {
    run: usize,
    strategy: SamplingStrategy,
    fraction: f64,
}

fn run_task(state: &RunState, scores: &[ImportanceVector], cfg: &BenchmarkConfig, task: &Task) -> Result<Vec<MetricsReport>> {
    let g = cfg.global_seed;
    let run = state.run;
    let corpus = &state.corpus;
    let request = corpus::sample_users(
        corpus,
        task.strategy,
        task.fraction,
        seed::derive(g, run, Stage::Sampling),
        cfg.weighting,
    )?;
    let partition = corpus::partition(corpus, &request.users)?;
    let retain = examples(corpus, &partition.retain);
    let forget = examples(corpus, &partition.forget);

    let retrain_model = ModelConfig {
        seed: seed::derive(g, run, Stage::RetrainInit),
        ..state.model_config
    };
    let retrain_train = train_config_for(&cfg.train, g, run, Stage::RetrainTrain);
    let retrained = unlearn::retrain(&retrain_model, &retain, &retrain_train)?;

    let mut cells = Vec::new();
    for &method in &cfg.methods {
        let kinds: Vec<Option<&ImportanceVector>> = if method == Method::Tracehiding {
            scores.iter().map(Some).collect()
        } else {
            vec![None]
        };
        for sv in kinds {
            let (student, seconds) = if method == Method::Retrain {
                (retrained.student.clone(), retrained.wall_clock_seconds)
            } else {
                let fs = sv.map(|v| forget_scores(v, &partition)).transpose()?;
                let ucfg = UnlearnConfig {
                    method,
                    seed: seed::derive(g, run, Stage::Unlearn),
                    score_kind: sv.map(|v| v.kind.clone()).unwrap_or_else(|| cfg.unlearn.score_kind.clone()),
                    ..cfg.unlearn.clone()
                };
                let inputs = UnlearnInputs {
                    teacher: &state.teacher,
                    retain: &retain,
                    forget: &forget,
                    forget_scores: fs.as_deref(),
                    retrain_model,
                    retrain_train,
                };
                let out = unlearn::run(&inputs, &ucfg)?;
                (out.student, out.wall_clock_seconds)
            };
            let (acc, mia) = evaluate(&student, corpus, &partition)?;
            cells.push(MetricsReport {
                method: method.as_str().into(),
                score_kind: sv.map(|v| v.kind.to_string()).unwrap_or_else(|| "-".into()),
                strategy: task.strategy.as_str().into(),
                fraction: task.fraction,
                seed: run,
                ua: acc.ua,
                ra: acc.ra,
                ta: acc.ta,
                mia_auc: mia.auc,
                mia_gap: mia.gap,
                speedup: Some(eval::speedup(retrained.wall_clock_seconds, seconds)?),
                warning: mia.warning,
            });
        }
    }
    Ok(cells)
}

/// Worker pool sized by `TRACEHIDE_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        if n == 0 {
            return Err(Error::Config(format!("{THREADS_ENV} must be >= 1")));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

/// Runs the full matrix and returns one cell per (run, strategy, fraction,
/// method, score kind), in that nesting order.
pub fn run_benchmark(base: &Corpus, cfg: &BenchmarkConfig) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let pool = thread_pool()?;
    pool.install(|| {
        let states: Vec<RunState> = (0..cfg.runs as u64)
            .into_par_iter()
            .map(|run| prepare_run(base, cfg, run))
            .collect::<Result<_>>()?;
        let scores: Vec<Vec<ImportanceVector>> = states
            .par_iter()
            .map(|s| {
                if cfg.methods.contains(&Method::Tracehiding) {
                    cfg.score_kinds
                        .iter()
                        .map(|k| importance::assign_scores(&s.corpus, k))
                        .collect()
                } else {
                    Ok(Vec::new())
                }
            })
            .collect::<Result<_>>()?;
        let mut tasks = Vec::new();
        for run in 0..cfg.runs {
            for &strategy in &cfg.strategies {
                for &fraction in &cfg.fractions {
                    tasks.push(Task { run, strategy, fraction });
                }
            }
        }
        let cells: Vec<Vec<MetricsReport>> = tasks
            .par_iter()
            .map(|t| run_task(&states[t.run], &scores[t.run], cfg, t))
            .collect::<Result<_>>()?;
        Ok(cells.into_iter().flatten().collect())
    })
}
