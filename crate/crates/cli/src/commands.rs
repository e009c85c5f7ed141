//! One function per subcommand. Each returns the JSON summary printed on
//! stdout; every file it writes goes through an atomic rename.

use std::collections::BTreeSet;

use serde::Serialize;
use serde_json::{json, Value};
use tracehide::bench::{self, examples};
use tracehide::corpus::{self, Corpus, DeletionRequest, Partition};
use tracehide::eval::{self, MetricsReport};
use tracehide::importance::{self, ImportanceVector};
use tracehide::io::{to_jsonl, write_atomic, write_indices};
use tracehide::nn::{self, ModelConfig, SequenceClassifier};
use tracehide::seed::Stage;
use tracehide::unlearn::{self, Method, UnlearnInputs};
use tracehide::{Error, Result};

use crate::config::{require_file, RunConfig};

fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn tokenize(cfg: &RunConfig) -> Result<Value> {
    let raw = cfg
        .data
        .raw_csv
        .clone()
        .ok_or_else(|| Error::Config("data.raw_csv is required for tokenize".into()))?;
    require_file("data.raw_csv", &raw)?;
    let (corpus, dict) = tracehide::geo::tokenize_csv(&raw, &cfg.tessellation)?;
    let out = cfg.out("corpus.jsonl");
    corpus.save(&out)?;
    write_atomic(&cfg.out("dictionary.jsonl"), dict.to_jsonl().as_bytes())?;
    Ok(json!({
        "command": "tokenize",
        "corpus": out,
        "trajectories": corpus.len(),
        "users": corpus.num_users,
        "vocab_size": corpus.vocab_size,
    }))
}

pub fn synth(cfg: &RunConfig) -> Result<Value> {
    let corpus = corpus::synth_corpus(cfg.synth_params())?;
    let out = cfg.out("corpus.jsonl");
    corpus.save(&out)?;
    Ok(json!({
        "command": "synth",
        "corpus": out,
        "trajectories": corpus.len(),
        "users": corpus.num_users,
        "vocab_size": corpus.vocab_size,
    }))
}

/// Loads the corpus and recomputes its seeded train/test split.
fn split_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = cfg.corpus_path();
    require_file("data.corpus", &path)?;
    Corpus::load_tokenized(&path)?.split_train_test(cfg.data.test_fraction, cfg.stage_seed(Stage::Split))
}

fn model_config(cfg: &RunConfig, corpus: &Corpus, stage: Stage) -> ModelConfig {
    ModelConfig {
        vocab_size: corpus.vocab_size,
        num_classes: corpus.num_users,
        embed_dim: cfg.model.embed_dim,
        hidden_dim: cfg.model.hidden_dim,
        seed: cfg.stage_seed(stage),
    }
}

fn load_model(field: &str, path: &std::path::Path, corpus: &Corpus) -> Result<SequenceClassifier> {
    require_file(field, path)?;
    let m = SequenceClassifier::load(path)?;
    if m.config.vocab_size != corpus.vocab_size || m.config.num_classes != corpus.num_users {
        return Err(Error::Config(format!(
            "{} was trained for {} tokens / {} users, corpus has {} / {}",
            path.display(),
            m.config.vocab_size,
            m.config.num_classes,
            corpus.vocab_size,
            corpus.num_users
        )));
    }
    Ok(m)
}

pub fn train(cfg: &RunConfig) -> Result<Value> {
    let corpus = split_corpus(cfg)?;
    let split = corpus.split()?;
    write_indices(&cfg.out("split_train.idx"), &split.train)?;
    write_indices(&cfg.out("split_test.idx"), &split.test)?;
    let init = nn::init_model(&model_config(cfg, &corpus, Stage::TeacherInit))?;
    let train = examples(&corpus, &split.train);
    let out = nn::train(&init, &train, &cfg.train_config(Stage::TeacherTrain))?;
    let path = cfg.teacher_path();
    out.model.save(&path)?;
    let log: Vec<Value> = out
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(epoch, loss)| json!({"epoch": epoch, "loss": loss}))
        .collect();
    write_atomic(&cfg.out("train_log.jsonl"), to_jsonl(&log).as_bytes())?;
    let train_acc = eval::accuracy(&out.model, &train)?;
    let test_acc = eval::accuracy(&out.model, &examples(&corpus, &split.test))?;
    Ok(json!({
        "command": "train",
        "teacher": path,
        "parameters": out.model.num_params(),
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "wall_clock_seconds": out.wall_clock_seconds,
    }))
}

pub fn score(cfg: &RunConfig) -> Result<Value> {
    let corpus = split_corpus(cfg)?;
    let scores = importance::assign_scores(&corpus, &cfg.score.kind)?;
    let path = cfg.out("scores.jsonl");
    scores.save(&path)?;
    Ok(json!({
        "command": "score",
        "scores": path,
        "kind": scores.kind.to_string(),
        "weights": scores.weights,
        "count": scores.indices.len(),
    }))
}

fn deletion_request(cfg: &RunConfig, corpus: &Corpus) -> Result<DeletionRequest> {
    let r = &cfg.request;
    match &r.users {
        Some(users) => {
            let users: BTreeSet<usize> = users.iter().copied().collect();
            if users.len() >= corpus.num_users {
                return Err(Error::OverDeletion {
                    requested: users.len(),
                    total: corpus.num_users,
                });
            }
            Ok(DeletionRequest {
                users,
                fraction: r.fraction,
                strategy: r.strategy,
                seed: cfg.stage_seed(Stage::Sampling),
            })
        }
        None => corpus::sample_users(corpus, r.strategy, r.fraction, cfg.stage_seed(Stage::Sampling), r.weighting),
    }
}

fn scores_for(cfg: &RunConfig, corpus: &Corpus) -> Result<ImportanceVector> {
    match &cfg.data.scores {
        Some(path) => {
            require_file("data.scores", path)?;
            ImportanceVector::load(path)
        }
        None => importance::assign_scores(corpus, &cfg.unlearn.score_kind),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    unlearn: &'a unlearn::UnlearnConfig,
    corpus: std::path::PathBuf,
    teacher: std::path::PathBuf,
    forget: std::path::PathBuf,
    retain: std::path::PathBuf,
    student: std::path::PathBuf,
    request: &'a DeletionRequest,
}

pub fn unlearn(cfg: &RunConfig) -> Result<Value> {
    let corpus = split_corpus(cfg)?;
    let teacher = load_model("data.teacher", &cfg.teacher_path(), &corpus)?;
    let request = deletion_request(cfg, &corpus)?;
    let partition = corpus::partition(&corpus, &request.users)?;
    partition.save(&cfg.out_dir)?;

    let ucfg = cfg.unlearn_config();
    let forget_scores = if ucfg.method == Method::Tracehiding {
        Some(bench::forget_scores(&scores_for(cfg, &corpus)?, &partition)?)
    } else {
        None
    };
    let retain = examples(&corpus, &partition.retain);
    let forget = examples(&corpus, &partition.forget);
    let inputs = UnlearnInputs {
        teacher: &teacher,
        retain: &retain,
        forget: &forget,
        forget_scores: forget_scores.as_deref(),
        retrain_model: model_config(cfg, &corpus, Stage::RetrainInit),
        retrain_train: cfg.train_config(Stage::RetrainTrain),
    };
    let out = unlearn::run(&inputs, &ucfg)?;

    let student = cfg.model_path();
    out.student.save(&student)?;
    write_atomic(&cfg.out("unlearn_log.jsonl"), to_jsonl(&out.per_epoch_losses).as_bytes())?;
    write_json(
        &cfg.out("unlearn_manifest.json"),
        &Manifest {
            unlearn: &ucfg,
            corpus: cfg.corpus_path(),
            teacher: cfg.teacher_path(),
            forget: cfg.out("forget.idx"),
            retain: cfg.out("retain.idx"),
            student: student.clone(),
            request: &request,
        },
    )?;
    Ok(json!({
        "command": "unlearn",
        "method": ucfg.method.as_str(),
        "student": student,
        "users": request.users,
        "forget": partition.forget.len(),
        "retain": partition.retain.len(),
        "epochs": ucfg.epochs,
        "wall_clock_seconds": out.wall_clock_seconds,
    }))
}

pub fn evaluate(cfg: &RunConfig) -> Result<Value> {
    let corpus = split_corpus(cfg)?;
    let model = load_model("data.model", &cfg.model_path(), &corpus)?;
    let dir = cfg.partition_dir();
    require_file("data.partition_dir", &dir.join("forget.idx"))?;
    let partition = Partition::load(&dir)?;
    let mut joined: Vec<usize> = partition.forget.iter().chain(&partition.retain).copied().collect();
    joined.sort_unstable();
    if joined != corpus.train_indices()? {
        return Err(Error::Config(format!(
            "partition in {} does not match the train split of this corpus and seed",
            dir.display()
        )));
    }
    let (acc, mia) = bench::evaluate(&model, &corpus, &partition)?;
    let method = cfg.unlearn.method;
    let report = MetricsReport {
        method: method.as_str().into(),
        score_kind: if method == Method::Tracehiding {
            cfg.unlearn.score_kind.to_string()
        } else {
            "-".into()
        },
        strategy: cfg.request.strategy.as_str().into(),
        fraction: cfg.request.fraction,
        seed: cfg.seed,
        ua: acc.ua,
        ra: acc.ra,
        ta: acc.ta,
        mia_auc: mia.auc,
        mia_gap: mia.gap,
        speedup: None,
        warning: mia.warning.clone(),
    };
    write_json(&cfg.out("metrics.json"), &report)?;
    let roc: Vec<Value> = mia.curve.points.iter().map(|(f, t)| json!({"fpr": f, "tpr": t})).collect();
    write_atomic(&cfg.out("roc.jsonl"), to_jsonl(&roc).as_bytes())?;
    Ok(json!({
        "command": "evaluate",
        "ua": acc.ua,
        "ra": acc.ra,
        "ta": acc.ta,
        "mia_auc": mia.auc,
        "mia_gap": mia.gap,
        "warning": mia.warning,
    }))
}

pub fn benchmark(cfg: &RunConfig) -> Result<Value> {
    let path = cfg.corpus_path();
    require_file("data.corpus", &path)?;
    let corpus = Corpus::load_tokenized(&path)?;
    let bcfg = cfg.benchmark_config();
    let cells = bench::run_benchmark(&corpus, &bcfg)?;
    let report = eval::report(&cells)?;
    write_atomic(&cfg.out("report.txt"), report.table.as_bytes())?;
    write_atomic(&cfg.out("records.jsonl"), report.records.as_bytes())?;
    write_atomic(&cfg.out("cells.jsonl"), to_jsonl(&cells).as_bytes())?;
    write_atomic(&cfg.out("timing.txt"), eval::render_timing(&cells).as_bytes())?;
    Ok(json!({
        "command": "benchmark",
        "cells": cells.len(),
        "groups": report.rows.len(),
        "report": cfg.out("report.txt"),
        "mean_ranks": report.mean_ranks,
    }))
}
