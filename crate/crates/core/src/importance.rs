//! Trajectory- and user-level importance scores, min-max normalization and
//! the unified-weight grid search.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// Guard added to entropy denominators.
pub const EPSILON: f64 = 1e-9;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    TokenFrequencyInverse,
    Coverage,
    Entropy,
    Length,
    UnifiedTrajectory { alpha: f64, beta: f64, gamma: f64 },
    /// Unified trajectory score with weights chosen by [`optimize_unified_weights`].
    UnifiedOptimized,
    UserUniqueness,
    UserEntropy,
    UnifiedUser { eta: f64, lambda: f64 },
}

impl ScoreKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScoreKind::UnifiedTrajectory { alpha, beta, gamma } => check_simplex(&[alpha, beta, gamma]),
            ScoreKind::UnifiedUser { eta, lambda } => check_simplex(&[eta, lambda]),
            _ => Ok(()),
        }
    }

    pub fn is_user_level(&self) -> bool {
        matches!(
            self,
            ScoreKind::UserUniqueness | ScoreKind::UserEntropy | ScoreKind::UnifiedUser { .. }
        )
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreKind::TokenFrequencyInverse => f.write_str("token_frequency_inverse"),
            ScoreKind::Coverage => f.write_str("coverage"),
            ScoreKind::Entropy => f.write_str("entropy"),
            ScoreKind::Length => f.write_str("length"),
            ScoreKind::UnifiedTrajectory { alpha, beta, gamma } => {
                write!(f, "unified_trajectory({alpha},{beta},{gamma})")
            }
            ScoreKind::UnifiedOptimized => f.write_str("unified_optimized"),
            ScoreKind::UserUniqueness => f.write_str("user_uniqueness"),
            ScoreKind::UserEntropy => f.write_str("user_entropy"),
            ScoreKind::UnifiedUser { eta, lambda } => write!(f, "unified_user({eta},{lambda})"),
        }
    }
}

fn check_simplex(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Config(format!("weights {w:?} are not on the simplex")));
    }
    Ok(())
}

/// For every token, the number of train trajectories containing it at least once.
pub fn token_frequency(corpus: &Corpus) -> Result<Vec<usize>> {
    let mut f = vec![0usize; corpus.vocab_size];
    for &i in corpus.train_indices()? {
        let distinct: BTreeSet<u32> = corpus.trajectories[i].tokens.iter().copied().collect();
        for b in distinct {
            f[b as usize] += 1;
        }
    }
    Ok(f)
}

/// Mean of `1/f(b)` over the trajectory's token positions.
pub fn token_frequency_importance(tokens: &[u32], freq: &[usize]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let sum: f64 = tokens.iter().map(|&b| 1.0 / freq[b as usize].max(1) as f64).sum();
    sum / tokens.len() as f64
}

pub fn coverage_importance(tokens: &[u32], vocab_size: usize) -> f64 {
    let distinct: BTreeSet<u32> = tokens.iter().copied().collect();
    distinct.len() as f64 / vocab_size as f64
}

/// Shannon entropy in bits of the consecutive-pair distribution; 0 for
/// trajectories shorter than two tokens.
pub fn bigram_entropy(tokens: &[u32]) -> f64 {
    if tokens.len() < 2 {
        return 0.0;
    }
    // Sorting keeps the summation order, and hence the result, deterministic.
    let mut pairs: Vec<(u32, u32)> = tokens.windows(2).map(|w| (w[0], w[1])).collect();
    pairs.sort_unstable();
    let total = pairs.len() as f64;
    let mut h = 0.0;
    let mut run = 1usize;
    for k in 1..=pairs.len() {
        if k < pairs.len() && pairs[k] == pairs[k - 1] {
            run += 1;
        } else {
            let p = run as f64 / total;
            h -= p * p.log2();
            run = 1;
        }
    }
    // -0.0 for a single bigram type.
    h.max(0.0)
}

pub fn entropy_importance(tokens: &[u32]) -> f64 {
    1.0 / (bigram_entropy(tokens) + EPSILON)
}

pub fn length_importance(tokens: &[u32]) -> f64 {
    tokens.len() as f64
}

/// Min-max scaling to `[0, 1]`; a constant array maps to 0.5 everywhere.
pub fn minmax_normalize(raw: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = minmax_range(raw)?;
    Ok(raw.iter().map(|&x| scale(x, lo, hi)).collect())
}

fn minmax_range(raw: &[f64]) -> Result<(f64, f64)> {
    if raw.is_empty() {
        return Err(Error::Input("cannot normalize an empty score list".into()));
    }
    if let Some(x) = raw.iter().find(|x| !x.is_finite()) {
        return Err(Error::Input(format!("non-finite score {x}")));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

fn scale(x: f64, lo: f64, hi: f64) -> f64 {
    if hi == lo {
        0.5
    } else {
        ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

pub fn unified_trajectory_score(cov: f64, ent: f64, len: f64, alpha: f64, beta: f64, gamma: f64) -> Result<f64> {
    check_simplex(&[alpha, beta, gamma])?;
    Ok(alpha * cov + beta * ent + gamma * len)
}

pub fn unified_user_score(uniq: f64, ent: f64, eta: f64, lambda: f64) -> Result<f64> {
    check_simplex(&[eta, lambda])?;
    Ok(eta * uniq + lambda * ent)
}

fn user_token_sets(corpus: &Corpus) -> Result<Vec<BTreeSet<u32>>> {
    let mut sets = vec![BTreeSet::new(); corpus.num_users];
    for &i in corpus.train_indices()? {
        let t = &corpus.trajectories[i];
        sets[t.user].extend(t.tokens.iter().copied());
    }
    Ok(sets)
}

/// Uniqueness of every user: tokens seen in that user's train trajectories
/// and in no other user's.
pub fn all_user_uniqueness(corpus: &Corpus) -> Result<Vec<usize>> {
    let sets = user_token_sets(corpus)?;
    let mut owners = vec![0usize; corpus.vocab_size];
    for s in &sets {
        for &b in s {
            owners[b as usize] += 1;
        }
    }
    Ok(sets
        .iter()
        .map(|s| s.iter().filter(|&&b| owners[b as usize] == 1).count())
        .collect())
}

pub fn user_uniqueness(corpus: &Corpus, user: usize) -> Result<usize> {
    check_user(corpus, user)?;
    Ok(all_user_uniqueness(corpus)?[user])
}

pub fn all_user_entropy_importance(corpus: &Corpus) -> Result<Vec<f64>> {
    let by_user = corpus.train_by_user()?;
    by_user
        .iter()
        .enumerate()
        .map(|(u, idx)| {
            if idx.is_empty() {
                return Err(Error::Input(format!("user {u} has no train trajectories")));
            }
            let total: f64 = idx.iter().map(|&i| bigram_entropy(&corpus.trajectories[i].tokens)).sum();
            Ok(1.0 / (total + EPSILON))
        })
        .collect()
}

pub fn user_entropy_importance(corpus: &Corpus, user: usize) -> Result<f64> {
    check_user(corpus, user)?;
    Ok(all_user_entropy_importance(corpus)?[user])
}

fn check_user(corpus: &Corpus, user: usize) -> Result<()> {
    if user >= corpus.num_users {
        return Err(Error::Input(format!("user {user} is not in the corpus")));
    }
    Ok(())
}

/// Population moments of a series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentStats {
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

impl MomentStats {
    /// A constant series gets skewness 0 and excess kurtosis -3.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for &x in xs {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        m2 /= n;
        m3 /= n;
        m4 /= n;
        if m2 == 0.0 {
            return Self {
                variance: 0.0,
                skewness: 0.0,
                excess_kurtosis: -3.0,
            };
        }
        Self {
            variance: m2,
            skewness: m3 / m2.powf(1.5),
            excess_kurtosis: m4 / (m2 * m2) - 3.0,
        }
    }

    /// `-V/3 + |S|/3 + K/3`.
    pub fn objective(&self) -> f64 {
        (-self.variance + self.skewness.abs() + self.excess_kurtosis) / 3.0
    }
}

/// Grid search (step 0.01) over `(alpha, beta, gamma)` for the unified score
/// with the smallest moment objective. Rows are `[coverage, entropy, length]`.
///
/// Candidates whose unified series is constant are skipped, and the first
/// strict minimum in `(alpha, beta)` lexicographic order wins. If every
/// candidate is constant the result is `(0, 0, 1)`.
pub fn optimize_unified_weights(rows: &[[f64; 3]]) -> Result<(f64, f64, f64)> {
    if rows.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "weight search needs at least 4 rows, got {}",
            rows.len()
        )));
    }
    let mut best: Option<(f64, (f64, f64, f64))> = None;
    let mut series = vec![0.0; rows.len()];
    for i in 0..=100u32 {
        for j in 0..=(100 - i) {
            let alpha = f64::from(i) / 100.0;
            let beta = f64::from(j) / 100.0;
            let gamma = f64::from(100 - i - j) / 100.0;
            for (s, r) in series.iter_mut().zip(rows) {
                *s = alpha * r[0] + beta * r[1] + gamma * r[2];
            }
            if series.iter().all(|&s| s == series[0]) {
                continue;
            }
            let obj = MomentStats::of(&series).objective();
            let better = match best {
                None => true,
                Some((b, _)) => obj < b - 1e-12 * b.abs().max(1.0),
            };
            if better {
                best = Some((obj, (alpha, beta, gamma)));
            }
        }
    }
    Ok(best.map(|(_, w)| w).unwrap_or((0.0, 0.0, 1.0)))
}

/// Per-train-trajectory scores for one kind, normalized over the train set.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub kind: ScoreKind,
    /// Resolved unified weights, when the kind has them.
    pub weights: Option<Vec<f64>>,
    /// Sorted corpus indices of the train trajectories.
    pub indices: Vec<usize>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScoreHeader {
    kind: ScoreKind,
    weights: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ScoreRecord {
    index: usize,
    raw: f64,
    norm: f64,
}

impl ImportanceVector {
    /// Builds a vector from raw scores, normalizing over all of them.
    pub fn from_raw(kind: ScoreKind, weights: Option<Vec<f64>>, indices: Vec<usize>, raw: Vec<f64>) -> Result<Self> {
        if indices.len() != raw.len() {
            return Err(Error::Shape(format!("{} indices vs {} scores", indices.len(), raw.len())));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("score indices must be strictly increasing".into()));
        }
        let normalized = minmax_normalize(&raw)?;
        Ok(Self {
            kind,
            weights,
            indices,
            raw,
            normalized,
        })
    }

    /// Normalized score of corpus trajectory `index`.
    pub fn norm_of(&self, index: usize) -> Result<f64> {
        self.indices
            .binary_search(&index)
            .map(|k| self.normalized[k])
            .map_err(|_| Error::Config(format!("no importance score for trajectory {index}")))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ScoreHeader {
            kind: self.kind.clone(),
            weights: self.weights.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        out.push_str(&crate::io::to_jsonl(self.indices.iter().zip(&self.raw).zip(&self.normalized).map(
            |((&index, &raw), &norm)| ScoreRecord { index, raw, norm },
        )));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = crate::io::read_lines(path)?;
        let Some(((n, first), rest)) = lines.split_first() else {
            return Err(Error::parse(path, 1, "score file is empty"));
        };
        let header: ScoreHeader = crate::io::parse_json_line(path, *n, first)?;
        let mut indices = Vec::with_capacity(rest.len());
        let mut raw = Vec::with_capacity(rest.len());
        let mut normalized = Vec::with_capacity(rest.len());
        for (n, line) in rest {
            let r: ScoreRecord = crate::io::parse_json_line(path, *n, line)?;
            if !(0.0..=1.0).contains(&r.norm) {
                return Err(Error::parse(path, *n, format!("normalized score {} outside [0,1]", r.norm)));
            }
            indices.push(r.index);
            raw.push(r.raw);
            normalized.push(r.norm);
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::parse(path, 1, "score indices must be strictly increasing"));
        }
        Ok(Self {
            kind: header.kind,
            weights: header.weights,
            indices,
            raw,
            normalized,
        })
    }
}

/// Raw `[coverage, entropy, length]` components, each normalized over train.
pub fn trajectory_component_matrix(corpus: &Corpus) -> Result<Vec<[f64; 3]>> {
    let train = corpus.train_indices()?;
    let toks = |i: usize| corpus.trajectories[i].tokens.as_slice();
    let cov = minmax_normalize(&train.iter().map(|&i| coverage_importance(toks(i), corpus.vocab_size)).collect::<Vec<_>>())?;
    let ent = minmax_normalize(&train.iter().map(|&i| entropy_importance(toks(i))).collect::<Vec<_>>())?;
    let len = minmax_normalize(&train.iter().map(|&i| length_importance(toks(i))).collect::<Vec<_>>())?;
    Ok((0..train.len()).map(|k| [cov[k], ent[k], len[k]]).collect())
}

/// Computes the raw scores of `kind` over the train set and normalizes them.
pub fn assign_scores(corpus: &Corpus, kind: &ScoreKind) -> Result<ImportanceVector> {
    kind.validate()?;
    let train = corpus.train_indices()?.to_vec();
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let toks = |i: usize| corpus.trajectories[i].tokens.as_slice();
    let per_traj = |f: &dyn Fn(&[u32]) -> f64| train.iter().map(|&i| f(toks(i))).collect::<Vec<f64>>();
    let broadcast = |per_user: &[f64]| {
        train
            .iter()
            .map(|&i| per_user[corpus.trajectories[i].user])
            .collect::<Vec<f64>>()
    };
    let mut weights = None;
    let raw = match *kind {
        ScoreKind::TokenFrequencyInverse => {
            let freq = token_frequency(corpus)?;
            per_traj(&|t| token_frequency_importance(t, &freq))
        }
        ScoreKind::Coverage => per_traj(&|t| coverage_importance(t, corpus.vocab_size)),
        ScoreKind::Entropy => per_traj(&entropy_importance),
        ScoreKind::Length => per_traj(&length_importance),
        ScoreKind::UnifiedTrajectory { alpha, beta, gamma } => {
            weights = Some(vec![alpha, beta, gamma]);
            let m = trajectory_component_matrix(corpus)?;
            m.iter().map(|r| alpha * r[0] + beta * r[1] + gamma * r[2]).collect()
        }
        ScoreKind::UnifiedOptimized => {
            let m = trajectory_component_matrix(corpus)?;
            let (alpha, beta, gamma) = optimize_unified_weights(&m)?;
            weights = Some(vec![alpha, beta, gamma]);
            m.iter().map(|r| alpha * r[0] + beta * r[1] + gamma * r[2]).collect()
        }
        ScoreKind::UserUniqueness => {
            let u: Vec<f64> = all_user_uniqueness(corpus)?.into_iter().map(|x| x as f64).collect();
            broadcast(&u)
        }
        ScoreKind::UserEntropy => broadcast(&all_user_entropy_importance(corpus)?),
        ScoreKind::UnifiedUser { eta, lambda } => {
            weights = Some(vec![eta, lambda]);
            let u: Vec<f64> = all_user_uniqueness(corpus)?.into_iter().map(|x| x as f64).collect();
            let u = minmax_normalize(&u)?;
            let e = minmax_normalize(&all_user_entropy_importance(corpus)?)?;
            let combined: Vec<f64> = u.iter().zip(&e).map(|(a, b)| eta * a + lambda * b).collect();
            broadcast(&combined)
        }
    };
    ImportanceVector::from_raw(kind.clone(), weights, train, raw)
}
