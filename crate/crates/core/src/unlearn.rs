//! Importance-weighted teacher-student unlearning and the baseline methods.
//!
//! Every teacher-student method runs on one engine: each epoch shuffles the
//! retain and forget sets with independent generators, then alternates
//! retain and forget mini-batches (retain first). A batch whose loss
//! coefficients are all zero contributes nothing and does not step the
//! optimizer, so a run whose forget terms vanish follows exactly the same
//! parameter trajectory as a run without a forget set.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ScoreKind;
use crate::nn::{self, Example, ModelConfig, SampleLoss, SequenceClassifier, Sgd, TrainConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tracehiding,
    Retrain,
    Finetune,
    Neggrad,
    NeggradPlus,
    Scrub,
    BadT,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Tracehiding,
        Method::Retrain,
        Method::Finetune,
        Method::Neggrad,
        Method::NeggradPlus,
        Method::Scrub,
        Method::BadT,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Tracehiding => "tracehiding",
            Method::Retrain => "retrain",
            Method::Finetune => "finetune",
            Method::Neggrad => "neggrad",
            Method::NeggradPlus => "neggrad_plus",
            Method::Scrub => "scrub",
            Method::BadT => "bad_t",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown unlearning method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    pub method: Method,
    /// Importance kind for tracehiding.
    pub score_kind: ScoreKind,
    /// Weight of the retain KL term.
    pub c1: f64,
    /// Weight of the retain cross-entropy term.
    pub c2: f64,
    /// Weight of the gradient-ascent term in neggrad and neggrad_plus.
    pub forget_weight: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub retain_batch_size: usize,
    pub forget_batch_size: usize,
    pub clip_norm: Option<f64>,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: Method::Tracehiding,
            score_kind: ScoreKind::Entropy,
            c1: 1.0,
            c2: 1.0,
            forget_weight: 1.0,
            epochs: 3,
            learning_rate: 0.05,
            seed: 0,
            retain_batch_size: 8,
            forget_batch_size: 1,
            clip_norm: Some(5.0),
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 >= 0.0 && self.c2 >= 0.0 && self.c1.is_finite() && self.c2.is_finite()) {
            return Err(Error::Config(format!("c1 = {}, c2 = {} must be >= 0", self.c1, self.c2)));
        }
        if !(self.forget_weight >= 0.0 && self.forget_weight.is_finite()) {
            return Err(Error::Config(format!("forget_weight {} must be >= 0", self.forget_weight)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("unlearning epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if self.retain_batch_size == 0 || self.forget_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be > 0")));
            }
        }
        self.score_kind.validate()
    }
}

/// Unlearning epoch budget derived from the teacher's: `ceil(epochs / 10)`.
pub fn default_epochs(teacher_epochs: usize) -> usize {
    teacher_epochs.div_ceil(10).max(1)
}

/// A frozen teacher and the student that starts as its copy.
#[derive(Debug, Clone)]
pub struct TeacherStudent<'a> {
    pub teacher: &'a SequenceClassifier,
    pub student: SequenceClassifier,
}

impl<'a> TeacherStudent<'a> {
    pub fn new(teacher: &'a SequenceClassifier) -> Self {
        Self {
            teacher,
            student: teacher.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean retain-batch loss; `None` when no retain batch ran.
    pub retain: Option<f64>,
    /// Mean forget-batch loss; `None` when no forget batch ran.
    pub forget: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct UnlearnResult {
    pub student: SequenceClassifier,
    pub wall_clock_seconds: f64,
    pub per_epoch_losses: Vec<EpochLoss>,
}

/// One sample of a stream with its loss coefficients and KL target.
struct Item<'a> {
    tokens: &'a [u32],
    label: usize,
    ce: f64,
    kl: f64,
    target: Option<Vec<f64>>,
}

impl Item<'_> {
    fn is_inert(&self) -> bool {
        self.ce == 0.0 && self.kl == 0.0
    }

    fn loss(&self) -> SampleLoss<'_> {
        SampleLoss {
            tokens: self.tokens,
            label: self.label,
            ce: self.ce,
            kl: self.kl,
            target: self.target.as_deref(),
        }
    }
}

fn items<'a>(
    data: &[Example<'a>],
    ce: impl Fn(usize) -> f64,
    kl: impl Fn(usize) -> f64,
    target: Option<&SequenceClassifier>,
) -> Result<Vec<Item<'a>>> {
    data.iter()
        .enumerate()
        .map(|(i, &(tokens, label))| {
            let kl_i = kl(i);
            let target = match target {
                Some(m) if kl_i != 0.0 => Some(m.target_log_probs(tokens)?),
                _ => None,
            };
            Ok(Item {
                tokens,
                label,
                ce: ce(i),
                kl: kl_i,
                target,
            })
        })
        .collect()
}

fn run_batch(model: &mut SequenceClassifier, opt: &mut Sgd, batch: &[&Item<'_>]) -> Result<f64> {
    if batch.iter().all(|it| it.is_inert()) {
        return Ok(0.0);
    }
    let losses: Vec<SampleLoss<'_>> = batch.iter().map(|it| it.loss()).collect();
    let (loss, mut grad) = nn::loss_and_gradient(model, &losses)?;
    opt.step(model, &mut grad)?;
    Ok(loss)
}

fn alternate(
    mut student: SequenceClassifier,
    retain: &[Item<'_>],
    forget: &[Item<'_>],
    cfg: &UnlearnConfig,
) -> Result<(SequenceClassifier, Vec<EpochLoss>)> {
    let mut opt = Sgd::new(student.num_params(), cfg.learning_rate, cfg.clip_norm);
    let mut rng_retain = seed::rng_stream(cfg.seed, 0);
    let mut rng_forget = seed::rng_stream(cfg.seed, 1);
    let mut r_order: Vec<usize> = (0..retain.len()).collect();
    let mut f_order: Vec<usize> = (0..forget.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        r_order.shuffle(&mut rng_retain);
        f_order.shuffle(&mut rng_forget);
        let r_batches: Vec<&[usize]> = r_order.chunks(cfg.retain_batch_size).collect();
        let f_batches: Vec<&[usize]> = f_order.chunks(cfg.forget_batch_size).collect();
        let (mut r_sum, mut f_sum) = (0.0, 0.0);
        for k in 0..r_batches.len().max(f_batches.len()) {
            if let Some(b) = r_batches.get(k) {
                let batch: Vec<&Item<'_>> = b.iter().map(|&i| &retain[i]).collect();
                r_sum += run_batch(&mut student, &mut opt, &batch)?;
            }
            if let Some(b) = f_batches.get(k) {
                let batch: Vec<&Item<'_>> = b.iter().map(|&i| &forget[i]).collect();
                f_sum += run_batch(&mut student, &mut opt, &batch)?;
            }
        }
        log.push(EpochLoss {
            epoch,
            retain: (!r_batches.is_empty()).then(|| r_sum / r_batches.len() as f64),
            forget: (!f_batches.is_empty()).then(|| f_sum / f_batches.len() as f64),
        });
    }
    Ok((student, log))
}

fn finish(start: Instant, out: (SequenceClassifier, Vec<EpochLoss>)) -> Result<UnlearnResult> {
    let (student, per_epoch_losses) = out;
    if !student.is_finite() {
        return Err(Error::Numeric("student parameters became non-finite".into()));
    }
    Ok(UnlearnResult {
        student,
        wall_clock_seconds: nn::elapsed(start),
        per_epoch_losses,
    })
}

fn require(non_empty: bool, what: &str, method: Method) -> Result<()> {
    if non_empty {
        Ok(())
    } else {
        Err(Error::Config(format!("{method} needs a non-empty {what} set")))
    }
}

/// Forget-sample KL weight `-(e^xi - 1)`.
pub fn forget_weight(xi_norm: f64) -> f64 {
    -(xi_norm.exp() - 1.0)
}

/// Importance-weighted teacher-student unlearning. `xi_norm[i]` is the
/// normalized importance of `forget[i]`.
pub fn tracehiding(
    ts: TeacherStudent<'_>,
    retain: &[Example<'_>],
    forget: &[Example<'_>],
    xi_norm: &[f64],
    cfg: &UnlearnConfig,
) -> Result<UnlearnResult> {
    cfg.validate()?;
    if xi_norm.len() != forget.len() {
        return Err(Error::Config(format!(
            "{} importance scores for {} forget samples",
            xi_norm.len(),
            forget.len()
        )));
    }
    if let Some(x) = xi_norm.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Config(format!("normalized importance {x} outside [0, 1]")));
    }
    let weights: Vec<f64> = xi_norm.iter().map(|&x| forget_weight(x)).collect();
    weighted_distillation(ts, retain, forget, &weights, cfg)
}

/// Constant-weight variant: forget loss is `-KL(student || teacher)`.
pub fn scrub(ts: TeacherStudent<'_>, retain: &[Example<'_>], forget: &[Example<'_>], cfg: &UnlearnConfig) -> Result<UnlearnResult> {
    cfg.validate()?;
    require(!retain.is_empty(), "retain", Method::Scrub)?;
    require(!forget.is_empty(), "forget", Method::Scrub)?;
    weighted_distillation(ts, retain, forget, &vec![-1.0; forget.len()], cfg)
}

fn weighted_distillation(
    ts: TeacherStudent<'_>,
    retain: &[Example<'_>],
    forget: &[Example<'_>],
    kl_weights: &[f64],
    cfg: &UnlearnConfig,
) -> Result<UnlearnResult> {
    let start = Instant::now();
    let r = items(retain, |_| cfg.c2, |_| cfg.c1, Some(ts.teacher))?;
    let f = items(forget, |_| 0.0, |i| kl_weights[i], Some(ts.teacher))?;
    finish(start, alternate(ts.student, &r, &f, cfg)?)
}

pub fn finetune(ts: TeacherStudent<'_>, retain: &[Example<'_>], cfg: &UnlearnConfig) -> Result<UnlearnResult> {
    cfg.validate()?;
    require(!retain.is_empty(), "retain", Method::Finetune)?;
    let start = Instant::now();
    let r = items(retain, |_| 1.0, |_| 0.0, None)?;
    finish(start, alternate(ts.student, &r, &[], cfg)?)
}

pub fn neggrad(ts: TeacherStudent<'_>, forget: &[Example<'_>], cfg: &UnlearnConfig) -> Result<UnlearnResult> {
    cfg.validate()?;
    require(!forget.is_empty(), "forget", Method::Neggrad)?;
    let start = Instant::now();
    let f = items(forget, |_| -cfg.forget_weight, |_| 0.0, None)?;
    finish(start, alternate(ts.student, &[], &f, cfg)?)
}

pub fn neggrad_plus(
    ts: TeacherStudent<'_>,
    retain: &[Example<'_>],
    forget: &[Example<'_>],
    cfg: &UnlearnConfig,
) -> Result<UnlearnResult> {
    cfg.validate()?;
    require(!retain.is_empty(), "retain", Method::NeggradPlus)?;
    require(!forget.is_empty(), "forget", Method::NeggradPlus)?;
    let start = Instant::now();
    let r = items(retain, |_| 1.0, |_| 0.0, None)?;
    let f = items(forget, |_| -cfg.forget_weight, |_| 0.0, None)?;
    finish(start, alternate(ts.student, &r, &f, cfg)?)
}

/// Seed of the randomly initialized teacher used by [`bad_t`].
pub fn incompetent_teacher_seed(cfg: &UnlearnConfig) -> u64 {
    seed::rng_stream(cfg.seed, 2).gen()
}

pub fn bad_t(ts: TeacherStudent<'_>, retain: &[Example<'_>], forget: &[Example<'_>], cfg: &UnlearnConfig) -> Result<UnlearnResult> {
    cfg.validate()?;
    require(!retain.is_empty(), "retain", Method::BadT)?;
    require(!forget.is_empty(), "forget", Method::BadT)?;
    let start = Instant::now();
    let bad_cfg = ModelConfig {
        seed: incompetent_teacher_seed(cfg),
        ..ts.teacher.config
    };
    let bad = nn::init_model(&bad_cfg)?;
    let r = items(retain, |_| 0.0, |_| 1.0, Some(ts.teacher))?;
    let f = items(forget, |_| 0.0, |_| 1.0, Some(&bad))?;
    finish(start, alternate(ts.student, &r, &f, cfg)?)
}

/// Trains a fresh model on the retain set only.
pub fn retrain(init: &ModelConfig, retain: &[Example<'_>], train_cfg: &TrainConfig) -> Result<UnlearnResult> {
    require(!retain.is_empty(), "retain", Method::Retrain)?;
    let start = Instant::now();
    let model = nn::init_model(init)?;
    let out = nn::train(&model, retain, train_cfg)?;
    let per_epoch_losses = out
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(epoch, &l)| EpochLoss {
            epoch,
            retain: Some(l),
            forget: None,
        })
        .collect();
    Ok(UnlearnResult {
        student: out.model,
        wall_clock_seconds: nn::elapsed(start),
        per_epoch_losses,
    })
}

/// Inputs shared by every method.
pub struct UnlearnInputs<'a, 'd> {
    pub teacher: &'a SequenceClassifier,
    pub retain: &'a [Example<'d>],
    pub forget: &'a [Example<'d>],
    /// Normalized importance per forget sample; used by tracehiding.
    pub forget_scores: Option<&'a [f64]>,
    /// Model and training configuration for retraining from scratch.
    pub retrain_model: ModelConfig,
    pub retrain_train: TrainConfig,
}

/// Runs `cfg.method`.
pub fn run(inputs: &UnlearnInputs<'_, '_>, cfg: &UnlearnConfig) -> Result<UnlearnResult> {
    let ts = TeacherStudent::new(inputs.teacher);
    match cfg.method {
        Method::Tracehiding => {
            let scores = inputs
                .forget_scores
                .ok_or_else(|| Error::Config("tracehiding needs importance scores".into()))?;
            tracehiding(ts, inputs.retain, inputs.forget, scores, cfg)
        }
        Method::Retrain => retrain(&inputs.retrain_model, inputs.retain, &inputs.retrain_train),
        Method::Finetune => finetune(ts, inputs.retain, cfg),
        Method::Neggrad => neggrad(ts, inputs.forget, cfg),
        Method::NeggradPlus => neggrad_plus(ts, inputs.retain, inputs.forget, cfg),
        Method::Scrub => scrub(ts, inputs.retain, inputs.forget, cfg),
        Method::BadT => bad_t(ts, inputs.retain, inputs.forget, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;

    struct Fixture {
        teacher: SequenceClassifier,
        retain: Vec<(Vec<u32>, usize)>,
        forget: Vec<(Vec<u32>, usize)>,
    }

    impl Fixture {
        fn new() -> Self {
            let cfg = ModelConfig {
                vocab_size: 16,
                num_classes: 4,
                embed_dim: 6,
                hidden_dim: 8,
                seed: 3,
            };
            let data: Vec<(Vec<u32>, usize)> = (0..40)
                .map(|i| {
                    let c = i % 4;
                    let base = 4 * c as u32;
                    (vec![base, base + 1 + (i as u32 % 3), base + 3, base], c)
                })
                .collect();
            let ex: Vec<Example<'_>> = data.iter().map(|(t, c)| (t.as_slice(), *c)).collect();
            let cfg_t = TrainConfig {
                learning_rate: 0.05,
                epochs: 10,
                batch_size: 8,
                seed: 1,
                clip_norm: Some(5.0),
            };
            let teacher = nn::train(&init_model(&cfg).unwrap(), &ex, &cfg_t).unwrap().model;
            let (forget, retain) = data.into_iter().partition(|(_, c)| *c == 3);
            Self { teacher, retain, forget }
        }

        fn retain(&self) -> Vec<Example<'_>> {
            self.retain.iter().map(|(t, c)| (t.as_slice(), *c)).collect()
        }

        fn forget(&self) -> Vec<Example<'_>> {
            self.forget.iter().map(|(t, c)| (t.as_slice(), *c)).collect()
        }
    }

    fn cfg(method: Method) -> UnlearnConfig {
        UnlearnConfig {
            method,
            epochs: 2,
            retain_batch_size: 8,
            forget_batch_size: 4,
            seed: 17,
            ..UnlearnConfig::default()
        }
    }

    #[test]
    fn weight_constants() {
        assert_eq!(forget_weight(0.0), 0.0);
        assert!((forget_weight(1.0) + 1.718281828459045).abs() < 1e-15);
        assert_eq!(forget_weight(2f64.ln()), -1.0);
    }

    #[test]
    fn zero_importance_matches_retain_only() {
        let fx = Fixture::new();
        let (r, f) = (fx.retain(), fx.forget());
        let c = cfg(Method::Tracehiding);
        let a = tracehiding(TeacherStudent::new(&fx.teacher), &r, &f, &vec![0.0; f.len()], &c).unwrap();
        let b = tracehiding(TeacherStudent::new(&fx.teacher), &r, &[], &[], &c).unwrap();
        assert_eq!(a.student.params, b.student.params);
    }

    #[test]
    fn ln2_importance_matches_scrub() {
        let fx = Fixture::new();
        let (r, f) = (fx.retain(), fx.forget());
        let c = cfg(Method::Tracehiding);
        let a = tracehiding(TeacherStudent::new(&fx.teacher), &r, &f, &vec![2f64.ln(); f.len()], &c).unwrap();
        let b = scrub(TeacherStudent::new(&fx.teacher), &r, &f, &c).unwrap();
        assert_eq!(a.student.params, b.student.params);
    }

    #[test]
    fn teacher_is_never_modified() {
        let fx = Fixture::new();
        let snapshot = fx.teacher.clone();
        let inputs = UnlearnInputs {
            teacher: &fx.teacher,
            retain: &fx.retain(),
            forget: &fx.forget(),
            forget_scores: Some(&[0.3; 10]),
            retrain_model: fx.teacher.config,
            retrain_train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
        };
        for m in Method::ALL {
            let out = run(&inputs, &cfg(m)).unwrap();
            assert!(out.wall_clock_seconds > 0.0, "{m}");
            assert_eq!(fx.teacher, snapshot, "{m}");
        }
    }

    #[test]
    fn finetune_with_zero_lr_is_identity() {
        let fx = Fixture::new();
        let c = UnlearnConfig {
            learning_rate: 0.0,
            ..cfg(Method::Finetune)
        };
        let out = finetune(TeacherStudent::new(&fx.teacher), &fx.retain(), &c).unwrap();
        assert_eq!(out.student, fx.teacher);
    }

    #[test]
    fn neggrad_plus_degenerates_to_finetune() {
        let fx = Fixture::new();
        let c = UnlearnConfig {
            forget_weight: 0.0,
            ..cfg(Method::NeggradPlus)
        };
        let a = neggrad_plus(TeacherStudent::new(&fx.teacher), &fx.retain(), &fx.forget(), &c).unwrap();
        let b = finetune(TeacherStudent::new(&fx.teacher), &fx.retain(), &c).unwrap();
        assert_eq!(a.student.params, b.student.params);
        assert!(matches!(
            neggrad_plus(TeacherStudent::new(&fx.teacher), &fx.retain(), &[], &c),
            Err(Error::Config(_))
        ));
        let logged = &a.per_epoch_losses[0];
        assert!(logged.retain.is_some() && logged.forget.is_some());
    }

    #[test]
    fn neggrad_is_negated_finetune_step() {
        let fx = Fixture::new();
        let f = fx.forget();
        let c = UnlearnConfig {
            epochs: 1,
            forget_batch_size: f.len(),
            retain_batch_size: f.len(),
            clip_norm: None,
            ..cfg(Method::Neggrad)
        };
        let a = neggrad(TeacherStudent::new(&fx.teacher), &f, &c).unwrap();
        // Same batch, plain descent with the learning rate negated.
        let mut b = fx.teacher.clone();
        let batch: Vec<SampleLoss<'_>> = f
            .iter()
            .map(|&(tokens, label)| SampleLoss {
                tokens,
                label,
                ce: 1.0,
                kl: 0.0,
                target: None,
            })
            .collect();
        let (_, mut g) = nn::loss_and_gradient(&b, &batch).unwrap();
        Sgd::new(b.num_params(), -c.learning_rate, None).step(&mut b, &mut g).unwrap();
        for (x, y) in a.student.params.iter().zip(&b.params) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn scores_must_cover_forget_set() {
        let fx = Fixture::new();
        let f = fx.forget();
        let err = tracehiding(TeacherStudent::new(&fx.teacher), &fx.retain(), &f, &[0.5], &cfg(Method::Tracehiding));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn default_budget() {
        assert_eq!(default_epochs(30), 3);
        assert_eq!(default_epochs(31), 4);
        assert_eq!(default_epochs(1), 1);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("sisa".parse::<Method>().is_err());
    }
}
