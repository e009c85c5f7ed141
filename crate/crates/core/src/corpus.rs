//! Labelled trajectories, train/test split, deletion requests and the
//! forget/retain partition.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance;
use crate::seed;

/// A token sequence with its owning user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user: usize,
    pub tokens: Vec<u32>,
}

impl Trajectory {
    pub fn new(user: usize, tokens: Vec<u32>) -> Self {
        Self { user, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub trajectories: Vec<Trajectory>,
    pub num_users: usize,
    pub vocab_size: usize,
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    num_users: usize,
    vocab_size: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Record {
    Header(Header),
    Trajectory(Trajectory),
}

impl Corpus {
    /// Builds a corpus and checks the trajectory invariants.
    pub fn new(trajectories: Vec<Trajectory>, num_users: usize, vocab_size: usize) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for (i, t) in trajectories.iter().enumerate() {
            if t.tokens.is_empty() {
                return Err(Error::Input(format!("trajectory {i} is empty")));
            }
            if t.user >= num_users {
                return Err(Error::Input(format!("trajectory {i} has user {} >= {num_users}", t.user)));
            }
            if let Some(&tok) = t.tokens.iter().find(|&&b| b as usize >= vocab_size) {
                return Err(Error::Input(format!("trajectory {i} has token {tok} >= {vocab_size}")));
            }
        }
        Ok(Self {
            trajectories,
            num_users,
            vocab_size,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn split(&self) -> Result<&Split> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::Config("corpus has not been split into train/test".into()))
    }

    pub fn train_indices(&self) -> Result<&[usize]> {
        Ok(&self.split()?.train)
    }

    pub fn test_indices(&self) -> Result<&[usize]> {
        Ok(&self.split()?.test)
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&Trajectory> {
        indices.iter().map(|&i| &self.trajectories[i]).collect()
    }

    /// Train trajectories grouped by user, in ascending index order.
    pub fn train_by_user(&self) -> Result<Vec<Vec<usize>>> {
        let mut by_user = vec![Vec::new(); self.num_users];
        for &i in self.train_indices()? {
            by_user[self.trajectories[i].user].push(i);
        }
        Ok(by_user)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header {
            num_users: self.num_users,
            vocab_size: self.vocab_size,
        })
        .expect("header serializes");
        out.push('\n');
        out.push_str(&crate::io::to_jsonl(&self.trajectories));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Loads the line-delimited corpus format. Without a header, user ids are
    /// remapped to `0..k` in ascending order and `vocab_size = 1 + max token`.
    pub fn load_tokenized(path: &Path) -> Result<Self> {
        let lines = crate::io::read_lines(path)?;
        let mut header: Option<Header> = None;
        let mut trajectories = Vec::new();
        for (k, (n, line)) in lines.iter().enumerate() {
            match crate::io::parse_json_line::<Record>(path, *n, line)? {
                Record::Header(h) => {
                    if k != 0 {
                        return Err(Error::parse(path, *n, "header must be the first record"));
                    }
                    header = Some(h);
                }
                Record::Trajectory(t) => {
                    if t.tokens.is_empty() {
                        return Err(Error::parse(path, *n, "trajectory has no tokens"));
                    }
                    if let Some(h) = &header {
                        if t.user >= h.num_users {
                            return Err(Error::parse(
                                path,
                                *n,
                                format!("user {} >= declared num_users {}", t.user, h.num_users),
                            ));
                        }
                        if let Some(b) = t.tokens.iter().find(|&&b| b as usize >= h.vocab_size) {
                            return Err(Error::parse(
                                path,
                                *n,
                                format!("token {b} >= declared vocab_size {}", h.vocab_size),
                            ));
                        }
                    }
                    trajectories.push((*n, t));
                }
            }
        }
        if trajectories.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let (num_users, vocab_size) = match header {
            Some(h) => {
                let seen: BTreeSet<usize> = trajectories.iter().map(|(_, t)| t.user).collect();
                if seen.len() != h.num_users {
                    return Err(Error::parse(
                        path,
                        1,
                        format!("header declares {} users but {} have trajectories", h.num_users, seen.len()),
                    ));
                }
                (h.num_users, h.vocab_size)
            }
            None => {
                let ids: BTreeSet<usize> = trajectories.iter().map(|(_, t)| t.user).collect();
                let remap: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
                for (_, t) in trajectories.iter_mut() {
                    t.user = remap[&t.user];
                }
                let max_tok = trajectories
                    .iter()
                    .flat_map(|(_, t)| t.tokens.iter())
                    .copied()
                    .max()
                    .unwrap_or(0);
                (ids.len(), max_tok as usize + 1)
            }
        };
        Corpus::new(trajectories.into_iter().map(|(_, t)| t).collect(), num_users, vocab_size)
    }

    /// Stratified split: per user, `ceil(test_fraction * n_c)` trajectories go
    /// to test, but every user keeps at least one train trajectory.
    pub fn split_train_test(mut self, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(test_fraction > 0.0 && test_fraction < 0.5) {
            return Err(Error::Config(format!("test_fraction {test_fraction} must be in (0, 0.5)")));
        }
        let mut rng = seed::rng(seed);
        let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); self.num_users];
        for (i, t) in self.trajectories.iter().enumerate() {
            by_user[t.user].push(i);
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (user, mut idx) in by_user.into_iter().enumerate() {
            let n = idx.len();
            if n == 0 {
                return Err(Error::Input(format!("user {user} has no trajectories")));
            }
            if n == 1 {
                log::warn!("user {user} has a single trajectory; keeping it in train");
            }
            let n_test = ceil_count(test_fraction, n).min(n - 1);
            idx.shuffle(&mut rng);
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        self.split = Some(Split { train, test });
        Ok(self)
    }
}

/// `ceil(fraction * n)` with a small tolerance so that products such as
/// `0.07 * 100` do not round up past the intended integer.
fn ceil_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthParams {
    pub num_users: usize,
    pub traj_per_user: usize,
    pub vocab_size: usize,
    pub mean_len: usize,
    pub seed: u64,
}

/// Generates a corpus where each user moves inside a contiguous band of
/// tokens (its home region) following a user-specific transition table.
/// Per-user regularity varies, so users differ in trajectory entropy.
pub fn synth_corpus(p: SynthParams) -> Result<Corpus> {
    if p.num_users == 0 || p.traj_per_user == 0 || p.vocab_size == 0 {
        return Err(Error::Config("synthetic corpus counts must be positive".into()));
    }
    if p.mean_len < 2 {
        return Err(Error::Config("mean_len must be at least 2".into()));
    }
    let mut rng = seed::rng(p.seed);
    let band = (2 * p.vocab_size / p.num_users).clamp(2.min(p.vocab_size), p.vocab_size);
    let stop = 1.0 / p.mean_len as f64;
    let mut trajectories = Vec::with_capacity(p.num_users * p.traj_per_user);
    for user in 0..p.num_users {
        let home = rng.gen_range(0..p.vocab_size);
        let regularity: f64 = rng.gen_range(0.45..0.95);
        // Preferred successor for every band position.
        let next: Vec<usize> = (0..band)
            .map(|k| {
                if band == 1 {
                    return 0;
                }
                let mut j = rng.gen_range(0..band - 1);
                if j >= k {
                    j += 1;
                }
                j
            })
            .collect();
        for _ in 0..p.traj_per_user {
            // Geometric length on {1, 2, ...} with the requested mean, clamped to >= 2.
            let mut len = 1;
            while rng.gen::<f64>() >= stop {
                len += 1;
            }
            let len = len.max(2);
            let mut pos = rng.gen_range(0..band);
            let mut tokens = Vec::with_capacity(len);
            tokens.push(((home + pos) % p.vocab_size) as u32);
            for _ in 1..len {
                pos = if rng.gen::<f64>() < regularity || band == 1 {
                    next[pos]
                } else {
                    let mut j = rng.gen_range(0..band - 1);
                    if j >= pos {
                        j += 1;
                    }
                    j
                };
                tokens.push(((home + pos) % p.vocab_size) as u32);
            }
            trajectories.push(Trajectory::new(user, tokens));
        }
    }
    Corpus::new(trajectories, p.num_users, p.vocab_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Uniform,
    Targeted,
}

impl SamplingStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplingStrategy::Uniform => "uniform",
            SamplingStrategy::Targeted => "targeted",
        }
    }
}

/// How targeted sampling turns aggregated entropy into draw weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetedWeighting {
    /// Weight by the inverse aggregated entropy (low-entropy users first).
    #[default]
    InverseEntropy,
    /// Weight by the aggregated entropy itself.
    Entropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionRequest {
    pub users: BTreeSet<usize>,
    pub fraction: f64,
    pub strategy: SamplingStrategy,
    pub seed: u64,
}

/// Number of users removed for a deletion fraction.
pub fn deletion_count(fraction: f64, num_users: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("deletion fraction {fraction} must be in (0, 1)")));
    }
    let k = ceil_count(fraction, num_users).max(1);
    if k >= num_users {
        return Err(Error::OverDeletion {
            requested: k,
            total: num_users,
        });
    }
    Ok(k)
}

pub fn sample_uniform_users(corpus: &Corpus, fraction: f64, seed: u64) -> Result<DeletionRequest> {
    let k = deletion_count(fraction, corpus.num_users)?;
    let mut rng = seed::rng(seed);
    let users: Vec<usize> = (0..corpus.num_users).collect();
    let picked = users.choose_multiple(&mut rng, k).copied().collect();
    Ok(DeletionRequest {
        users: picked,
        fraction,
        strategy: SamplingStrategy::Uniform,
        seed,
    })
}

/// Per-user draw weights for targeted sampling, from train trajectories.
pub fn targeted_weights(corpus: &Corpus, weighting: TargetedWeighting) -> Result<Vec<f64>> {
    let by_user = corpus.train_by_user()?;
    Ok(by_user
        .iter()
        .map(|idx| {
            let total: f64 = idx
                .iter()
                .map(|&i| importance::bigram_entropy(&corpus.trajectories[i].tokens))
                .sum();
            let w = match weighting {
                TargetedWeighting::InverseEntropy => 1.0 / (total + importance::EPSILON),
                TargetedWeighting::Entropy => total,
            };
            if w.is_finite() {
                w.max(importance::EPSILON)
            } else {
                1.0 / importance::EPSILON
            }
        })
        .collect())
}

/// Draws `k` distinct items without replacement; each draw picks item `i`
/// with probability `weights[i] / sum(remaining weights)`.
pub fn weighted_draw(weights: &[f64], k: usize, rng: &mut seed::Rng) -> Result<Vec<usize>> {
    if k > weights.len() {
        return Err(Error::Config(format!("cannot draw {k} of {} items", weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Numeric("draw weights must be finite and positive".into()));
    }
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = remaining.len() - 1;
        for (pos, &i) in remaining.iter().enumerate() {
            acc += weights[i];
            if u < acc {
                chosen = pos;
                break;
            }
        }
        picked.push(remaining.remove(chosen));
    }
    Ok(picked)
}

pub fn sample_targeted_users(
    corpus: &Corpus,
    fraction: f64,
    seed: u64,
    weighting: TargetedWeighting,
) -> Result<DeletionRequest> {
    let k = deletion_count(fraction, corpus.num_users)?;
    let weights = targeted_weights(corpus, weighting)?;
    let mut rng = seed::rng(seed);
    let users = weighted_draw(&weights, k, &mut rng)?.into_iter().collect();
    Ok(DeletionRequest {
        users,
        fraction,
        strategy: SamplingStrategy::Targeted,
        seed,
    })
}

pub fn sample_users(
    corpus: &Corpus,
    strategy: SamplingStrategy,
    fraction: f64,
    seed: u64,
    weighting: TargetedWeighting,
) -> Result<DeletionRequest> {
    match strategy {
        SamplingStrategy::Uniform => sample_uniform_users(corpus, fraction, seed),
        SamplingStrategy::Targeted => sample_targeted_users(corpus, fraction, seed, weighting),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Train trajectories of requested users.
    pub forget: Vec<usize>,
    /// Remaining train trajectories.
    pub retain: Vec<usize>,
}

impl Partition {
    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::io::write_indices(&dir.join("forget.idx"), &self.forget)?;
        crate::io::write_indices(&dir.join("retain.idx"), &self.retain)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            forget: crate::io::read_indices(&dir.join("forget.idx"))?,
            retain: crate::io::read_indices(&dir.join("retain.idx"))?,
        })
    }
}

pub fn partition(corpus: &Corpus, users: &BTreeSet<usize>) -> Result<Partition> {
    if let Some(u) = users.iter().find(|&&u| u >= corpus.num_users) {
        return Err(Error::Input(format!("requested user {u} is not in the corpus")));
    }
    let (forget, retain) = corpus
        .train_indices()?
        .iter()
        .partition(|&&i| users.contains(&corpus.trajectories[i].user));
    Ok(Partition { forget, retain })
}
