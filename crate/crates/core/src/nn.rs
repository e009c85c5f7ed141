//! Gated-recurrent sequence classifier with hand-written backpropagation,
//! momentum SGD and a binary checkpoint format.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn log_floor() -> f64 {
    PROB_FLOOR.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_classes: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_embed() -> usize {
    32
}

fn default_hidden() -> usize {
    64
}

impl ModelConfig {
    pub fn new(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            num_classes,
            embed_dim: default_embed(),
            hidden_dim: default_hidden(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.num_classes == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!("model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Reserved padding id; never fed to the recurrence.
    pub fn pad_token(&self) -> usize {
        self.vocab_size
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub embed: usize,
    pub w_z: usize,
    pub b_z: usize,
    pub w_r: usize,
    pub b_r: usize,
    pub w_h: usize,
    pub b_h: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub total: usize,
    e: usize,
    h: usize,
    c: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let (e, h, c) = (cfg.embed_dim, cfg.hidden_dim, cfg.num_classes);
        let gate = h * (e + h);
        let embed = 0;
        let w_z = embed + (cfg.vocab_size + 1) * e;
        let b_z = w_z + gate;
        let w_r = b_z + h;
        let b_r = w_r + gate;
        let w_h = b_r + h;
        let b_h = w_h + gate;
        let w_o = b_h + h;
        let b_o = w_o + c * h;
        let total = b_o + c;
        Self {
            embed,
            w_z,
            b_z,
            w_r,
            b_r,
            w_h,
            b_h,
            w_o,
            b_o,
            total,
            e,
            h,
            c,
        }
    }

    /// `(name, start, end)` for every block, in declaration order.
    pub fn blocks(&self) -> [(&'static str, usize, usize); 9] {
        [
            ("embedding", self.embed, self.w_z),
            ("w_z", self.w_z, self.b_z),
            ("b_z", self.b_z, self.w_r),
            ("w_r", self.w_r, self.b_r),
            ("b_r", self.b_r, self.w_h),
            ("w_h", self.w_h, self.b_h),
            ("b_h", self.b_h, self.w_o),
            ("w_o", self.w_o, self.b_o),
            ("b_o", self.b_o, self.total),
        ]
    }
}

/// Per-class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Input("probabilities must be finite and non-negative".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("probabilities sum to {s}")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `-ln p[y]` with `p[y]` floored at [`PROB_FLOOR`].
pub fn cross_entropy(y: usize, p: &ProbVector) -> Result<f64> {
    let py = *p
        .0
        .get(y)
        .ok_or_else(|| Error::Shape(format!("class {y} outside {} classes", p.len())))?;
    Ok(-py.max(PROB_FLOOR).ln())
}

/// `sum p_i ln(p_i / q_i)` in nats with `q` floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} vs {} classes", p.len(), q.len())));
    }
    let kl: f64 = p
        .0
        .iter()
        .zip(&q.0)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum();
    Ok(kl.max(0.0))
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceClassifier {
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

/// Draws every parameter uniformly from `(-k, k)`, `k = 1/sqrt(fan_in)`.
/// The padding row of the embedding is zero.
pub fn init_model(cfg: &ModelConfig) -> Result<SequenceClassifier> {
    cfg.validate()?;
    let l = cfg.layout();
    let mut rng = seed::rng(cfg.seed);
    let mut params = vec![0.0; l.total];
    let mut fill = |range: std::ops::Range<usize>, fan_in: usize, params: &mut [f64]| {
        let k = 1.0 / (fan_in as f64).sqrt();
        for p in &mut params[range] {
            *p = rng.gen_range(-k..k);
        }
    };
    let pad_row = cfg.pad_token() * l.e;
    fill(l.embed..pad_row, 1, &mut params);
    fill(l.w_z..l.w_o, l.e + l.h, &mut params);
    fill(l.w_o..l.total, l.h, &mut params);
    Ok(SequenceClassifier {
        config: *cfg,
        params,
    })
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Trace {
    /// Hidden states `h_0..h_T`.
    hs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
    rs: Vec<Vec<f64>>,
    cands: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
}

impl SequenceClassifier {
    pub fn layout(&self) -> Layout {
        self.config.layout()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        if let Some(b) = tokens.iter().find(|&&b| b as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {b} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn run(&self, tokens: &[u32]) -> Trace {
        let l = self.layout();
        let (e, h) = (l.e, l.h);
        let p = &self.params;
        let mut trace = Trace {
            hs: Vec::with_capacity(tokens.len() + 1),
            zs: Vec::with_capacity(tokens.len()),
            rs: Vec::with_capacity(tokens.len()),
            cands: Vec::with_capacity(tokens.len()),
            log_probs: Vec::new(),
        };
        trace.hs.push(vec![0.0; h]);
        let mut rh = vec![0.0; h];
        for &tok in tokens {
            let x = &p[l.embed + tok as usize * e..][..e];
            let hp = trace.hs.last().expect("initial state");
            let gate = |w: usize, b: usize, i: usize, hv: &[f64]| {
                let row = &p[w + i * (e + h)..][..e + h];
                p[b + i] + dot(&row[..e], x) + dot(&row[e..], hv)
            };
            let z: Vec<f64> = (0..h).map(|i| sigmoid(gate(l.w_z, l.b_z, i, hp))).collect();
            let r: Vec<f64> = (0..h).map(|i| sigmoid(gate(l.w_r, l.b_r, i, hp))).collect();
            for i in 0..h {
                rh[i] = r[i] * hp[i];
            }
            let cand: Vec<f64> = (0..h).map(|i| gate(l.w_h, l.b_h, i, &rh).tanh()).collect();
            let hn: Vec<f64> = (0..h).map(|i| (1.0 - z[i]) * hp[i] + z[i] * cand[i]).collect();
            trace.zs.push(z);
            trace.rs.push(r);
            trace.cands.push(cand);
            trace.hs.push(hn);
        }
        let hl = trace.hs.last().expect("final state");
        let logits: Vec<f64> = (0..l.c)
            .map(|k| p[l.b_o + k] + dot(&p[l.w_o + k * h..][..h], hl))
            .collect();
        trace.log_probs = log_softmax(&logits);
        trace
    }

    /// Natural-log class probabilities.
    pub fn log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        Ok(self.run(tokens).log_probs)
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ProbVector> {
        let lp = self.log_probs(tokens)?;
        let mut p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let s: f64 = p.iter().sum();
        for x in &mut p {
            *x /= s;
        }
        Ok(ProbVector(p))
    }

    pub fn predict(&self, tokens: &[u32]) -> Result<usize> {
        Ok(argmax(&self.log_probs(tokens)?))
    }

    /// Log-probabilities floored at `ln PROB_FLOOR`, the form used as a
    /// KL target.
    pub fn target_log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut lp = self.log_probs(tokens)?;
        let floor = log_floor();
        for x in &mut lp {
            *x = x.max(floor);
        }
        Ok(lp)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Accumulates `scale * d(loss)/d(params)` into `grad` given the
    /// gradient of the loss with respect to the logits.
    fn backprop(&self, tokens: &[u32], trace: &Trace, dlogits: &[f64], grad: &mut [f64]) {
        let l = self.layout();
        let (e, h) = (l.e, l.h);
        let p = &self.params;
        let t_len = tokens.len();
        let hl = &trace.hs[t_len];
        let mut dh = vec![0.0; h];
        for (k, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[l.b_o + k] += g;
            let row = &p[l.w_o + k * h..][..h];
            let grow = &mut grad[l.w_o + k * h..][..h];
            for i in 0..h {
                grow[i] += g * hl[i];
                dh[i] += g * row[i];
            }
        }
        let mut da_h = vec![0.0; h];
        let mut da_r = vec![0.0; h];
        let mut da_z = vec![0.0; h];
        let mut dx = vec![0.0; e];
        let mut drh = vec![0.0; h];
        let mut dh_prev = vec![0.0; h];
        let mut rh = vec![0.0; h];
        for t in (0..t_len).rev() {
            let tok = tokens[t] as usize;
            let x = &p[l.embed + tok * e..][..e];
            let hp = &trace.hs[t];
            let z = &trace.zs[t];
            let r = &trace.rs[t];
            let cand = &trace.cands[t];
            for i in 0..h {
                let dcand = dh[i] * z[i];
                da_h[i] = dcand * (1.0 - cand[i] * cand[i]);
                da_z[i] = dh[i] * (cand[i] - hp[i]) * z[i] * (1.0 - z[i]);
                dh_prev[i] = dh[i] * (1.0 - z[i]);
                rh[i] = r[i] * hp[i];
            }
            dx.iter_mut().for_each(|v| *v = 0.0);
            drh.iter_mut().for_each(|v| *v = 0.0);
            // Candidate block: input is [x; r*h_prev].
            gate_backward(p, grad, l.w_h, l.b_h, e, h, &da_h, x, &rh, &mut dx, &mut drh);
            for i in 0..h {
                dh_prev[i] += drh[i] * r[i];
                da_r[i] = drh[i] * hp[i] * r[i] * (1.0 - r[i]);
            }
            gate_backward(p, grad, l.w_r, l.b_r, e, h, &da_r, x, hp, &mut dx, &mut dh_prev);
            gate_backward(p, grad, l.w_z, l.b_z, e, h, &da_z, x, hp, &mut dx, &mut dh_prev);
            let gx = &mut grad[l.embed + tok * e..][..e];
            for j in 0..e {
                gx[j] += dx[j];
            }
            std::mem::swap(&mut dh, &mut dh_prev);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::parse(path, 1, m))
    }

    /// Magic, version, length-prefixed JSON config, parameter count, then
    /// little-endian f64 parameters in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::with_capacity(24 + header.len() + self.params.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if cur.len() < n {
                return Err("truncated checkpoint".into());
            }
            let (a, b) = cur.split_at(n);
            cur = b;
            Ok(a)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err("not a model checkpoint".into());
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let hlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let config: ModelConfig = serde_json::from_slice(take(hlen)?).map_err(|e| e.to_string())?;
        config.validate().map_err(|e| e.to_string())?;
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        if n != config.num_params() {
            return Err(format!("expected {} parameters, found {n}", config.num_params()));
        }
        let body = take(n * 8)?;
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if !cur.is_empty() {
            return Err("trailing bytes after parameters".into());
        }
        Ok(Self { config, params })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"THGR";
const CHECKPOINT_VERSION: u32 = 1;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backward through `a = W [x; v] + b` for one gate, accumulating into the
/// weight gradient, `dx` and `dv`.
#[allow(clippy::too_many_arguments)]
fn gate_backward(
    p: &[f64],
    grad: &mut [f64],
    w: usize,
    b: usize,
    e: usize,
    h: usize,
    da: &[f64],
    x: &[f64],
    v: &[f64],
    dx: &mut [f64],
    dv: &mut [f64],
) {
    for i in 0..h {
        let g = da[i];
        if g == 0.0 {
            continue;
        }
        grad[b + i] += g;
        let row = &p[w + i * (e + h)..][..e + h];
        let grow = &mut grad[w + i * (e + h)..][..e + h];
        for j in 0..e {
            grow[j] += g * x[j];
            dx[j] += g * row[j];
        }
        for j in 0..h {
            grow[e + j] += g * v[j];
            dv[j] += g * row[e + j];
        }
    }
}

/// One term of a batch loss: `ce * CE(label, M(x)) + kl * KL(M(x) || target)`.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss<'a> {
    pub tokens: &'a [u32],
    pub label: usize,
    pub ce: f64,
    pub kl: f64,
    /// Floored target log-probabilities; required when `kl != 0`.
    pub target: Option<&'a [f64]>,
}

/// Per-sample loss value and its gradient with respect to the logits.
fn sample_loss(lp: &[f64], s: &SampleLoss<'_>) -> Result<(f64, Vec<f64>)> {
    let c = lp.len();
    if s.label >= c {
        return Err(Error::Shape(format!("label {} outside {c} classes", s.label)));
    }
    let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
    let mut dlogits = vec![0.0; c];
    let mut loss = 0.0;
    if s.ce != 0.0 {
        let floor = -log_floor();
        let ce = -lp[s.label];
        if ce < floor {
            loss += s.ce * ce;
            for k in 0..c {
                dlogits[k] += s.ce * p[k];
            }
            dlogits[s.label] -= s.ce;
        } else {
            loss += s.ce * floor;
        }
    }
    if s.kl != 0.0 {
        let q = s
            .target
            .ok_or_else(|| Error::Config("KL term without a target distribution".into()))?;
        if q.len() != c {
            return Err(Error::Shape(format!("{} target classes vs {c}", q.len())));
        }
        let g: Vec<f64> = lp.iter().zip(q).map(|(a, b)| a - b).collect();
        let kl: f64 = p.iter().zip(&g).map(|(pi, gi)| pi * gi).sum();
        loss += s.kl * kl;
        for k in 0..c {
            dlogits[k] += s.kl * p[k] * (g[k] - kl);
        }
    }
    Ok((loss, dlogits))
}

/// Mean loss over `batch` and its exact gradient.
pub fn loss_and_gradient(model: &SequenceClassifier, batch: &[SampleLoss<'_>]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; model.num_params()];
    let mut total = 0.0;
    for s in batch {
        model.check_tokens(s.tokens)?;
        let trace = model.run(s.tokens);
        let (loss, mut dlogits) = sample_loss(&trace.log_probs, s)?;
        total += loss;
        for d in &mut dlogits {
            *d /= n;
        }
        model.backprop(s.tokens, &trace, &dlogits, &mut grad);
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("batch loss is {loss}")));
    }
    Ok((loss, grad))
}

/// Mean loss over `batch` without gradients.
pub fn batch_loss(model: &SequenceClassifier, batch: &[SampleLoss<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        total += sample_loss(&model.log_probs(s.tokens)?, s)?.0;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("batch loss is {loss}")));
    }
    Ok(loss)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Momentum SGD: `v = mu v + g`, `theta -= lr v`, with optional global-norm
/// clipping of `g`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<f64>,
}

pub const MOMENTUM: f64 = 0.9;

impl Sgd {
    pub fn new(num_params: usize, learning_rate: f64, clip_norm: Option<f64>) -> Self {
        Self {
            learning_rate,
            momentum: MOMENTUM,
            clip_norm,
            velocity: vec![0.0; num_params],
        }
    }

    /// Applies one update and returns the gradient norm after clipping.
    pub fn step(&mut self, model: &mut SequenceClassifier, grad: &mut [f64]) -> Result<f64> {
        if grad.len() != model.params.len() || grad.len() != self.velocity.len() {
            return Err(Error::Shape(format!(
                "gradient of {} vs {} parameters",
                grad.len(),
                model.params.len()
            )));
        }
        let mut norm = l2_norm(grad);
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        if let Some(c) = self.clip_norm {
            if norm > c {
                let s = c / norm;
                grad.iter_mut().for_each(|g| *g *= s);
                norm = l2_norm(grad);
            }
        }
        for ((theta, v), g) in model.params.iter_mut().zip(&mut self.velocity).zip(grad.iter()) {
            *v = self.momentum * *v + g;
            *theta -= self.learning_rate * *v;
        }
        Ok(norm)
    }
}

fn default_clip() -> Option<f64> {
    Some(5.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            clip_norm: default_clip(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be > 0")));
            }
        }
        Ok(())
    }
}

/// A labelled training sample: token sequence and class.
pub type Example<'a> = (&'a [u32], usize);

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SequenceClassifier,
    pub wall_clock_seconds: f64,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Cross-entropy training with seeded shuffling.
pub fn train(model: &SequenceClassifier, data: &[Example<'_>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let start = Instant::now();
    let mut model = model.clone();
    let mut opt = Sgd::new(model.num_params(), cfg.learning_rate, cfg.clip_norm);
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SampleLoss<'_>> = chunk
                .iter()
                .map(|&i| SampleLoss {
                    tokens: data[i].0,
                    label: data[i].1,
                    ce: 1.0,
                    kl: 0.0,
                    target: None,
                })
                .collect();
            let (loss, mut grad) = loss_and_gradient(&model, &batch)?;
            opt.step(&mut model, &mut grad)?;
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok(TrainOutcome {
        model,
        wall_clock_seconds: elapsed(start),
        epoch_losses,
    })
}

/// Seconds since `start`, never exactly zero.
pub(crate) fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64().max(1e-9)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            num_classes: 4,
            embed_dim: 5,
            hidden_dim: 7,
            seed,
        }
    }

    fn pv(p: &[f64]) -> ProbVector {
        ProbVector::new(p.to_vec()).unwrap()
    }

    #[test]
    fn layout_counts() {
        let cfg = small_cfg(0);
        let l = cfg.layout();
        assert_eq!(l.total, 13 * 5 + 3 * (7 * 12 + 7) + 4 * 7 + 4);
        assert_eq!(l.blocks()[8].2, l.total);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_model(&small_cfg(1)).unwrap();
        let b = init_model(&small_cfg(1)).unwrap();
        let c = init_model(&small_cfg(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        let pad = a.config.pad_token() * 5;
        assert!(a.params[pad..pad + 5].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_is_distribution() {
        let m = init_model(&small_cfg(3)).unwrap();
        let p = m.forward(&[1, 2, 3, 11]).unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(m.forward(&[12]), Err(Error::Input(_))));
        assert!(matches!(m.forward(&[]), Err(Error::EmptyTrajectory)));
    }

    #[test]
    fn single_class_is_certain() {
        let mut cfg = small_cfg(4);
        cfg.num_classes = 1;
        let m = init_model(&cfg).unwrap();
        assert_eq!(m.forward(&[0, 5]).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn logit_shift_invariance() {
        let mut m = init_model(&small_cfg(5)).unwrap();
        let before = m.forward(&[2, 4, 6]).unwrap();
        let l = m.layout();
        for k in 0..4 {
            m.params[l.b_o + k] += 3.5;
        }
        let after = m.forward(&[2, 4, 6]).unwrap();
        for (a, b) in before.as_slice().iter().zip(after.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_and_kl_examples() {
        assert!((cross_entropy(0, &pv(&[0.25, 0.75])).unwrap() - 1.3862943611).abs() < 1e-10);
        assert_eq!(cross_entropy(1, &pv(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cross_entropy(0, &pv(&[0.0, 1.0])).unwrap() - 27.631021115928547).abs() < 1e-9);
        let p = pv(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(kl_divergence(&p, &pv(&[0.5, 0.5])), Err(Error::Shape(_))));
    }

    #[test]
    fn ce_gradient_vanishes_at_optimum() {
        let (_, d) = sample_loss(
            &[0.0, -800.0],
            &SampleLoss {
                tokens: &[],
                label: 0,
                ce: 1.0,
                kl: 0.0,
                target: None,
            },
        )
        .unwrap();
        assert!(d.iter().all(|&x| x.abs() < 1e-300));
    }

    #[test]
    fn kl_to_self_is_exactly_zero() {
        let m = init_model(&small_cfg(6)).unwrap();
        let toks = [1u32, 3, 5];
        let target = m.target_log_probs(&toks).unwrap();
        let s = SampleLoss {
            tokens: &toks,
            label: 0,
            ce: 0.0,
            kl: 1.0,
            target: Some(&target),
        };
        let (loss, grad) = loss_and_gradient(&m, &[s]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = init_model(&small_cfg(7)).unwrap();
        let other = init_model(&small_cfg(8)).unwrap();
        let seqs: [&[u32]; 3] = [&[0, 1, 2, 3], &[5, 5, 9], &[11, 2, 7, 4, 1]];
        let targets: Vec<Vec<f64>> = seqs.iter().map(|s| other.target_log_probs(s).unwrap()).collect();
        let batch: Vec<SampleLoss<'_>> = seqs
            .iter()
            .zip(&targets)
            .enumerate()
            .map(|(i, (s, t))| SampleLoss {
                tokens: s,
                label: i % 4,
                ce: 0.7,
                kl: if i == 1 { -1.3 } else { 0.9 },
                target: Some(t),
            })
            .collect();
        let (_, grad) = loss_and_gradient(&m, &batch).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..m.num_params() {
            let mut mp = m.clone();
            mp.params[k] += h;
            let up = batch_loss(&mp, &batch).unwrap();
            mp.params[k] -= 2.0 * h;
            let down = batch_loss(&mp, &batch).unwrap();
            let num = (up - down) / (2.0 * h);
            let rel = (grad[k] - num).abs() / grad[k].abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradient_scales_linearly() {
        let m = init_model(&small_cfg(9)).unwrap();
        let toks = [1u32, 2, 3];
        let mk = |ce| SampleLoss {
            tokens: &toks,
            label: 2,
            ce,
            kl: 0.0,
            target: None,
        };
        let (_, g1) = loss_and_gradient(&m, &[mk(1.0)]).unwrap();
        let (_, g3) = loss_and_gradient(&m, &[mk(3.0)]).unwrap();
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn sgd_zero_gradient_and_determinism() {
        let m = init_model(&small_cfg(10)).unwrap();
        let mut a = m.clone();
        let mut opt = Sgd::new(m.num_params(), 0.1, Some(5.0));
        opt.step(&mut a, &mut vec![0.0; m.num_params()]).unwrap();
        assert_eq!(a, m);

        let g: Vec<f64> = (0..m.num_params()).map(|i| (i as f64).sin()).collect();
        let (mut x, mut y) = (m.clone(), m.clone());
        let (mut ox, mut oy) = (opt.clone(), opt.clone());
        let nx = ox.step(&mut x, &mut g.clone()).unwrap();
        let ny = oy.step(&mut y, &mut g.clone()).unwrap();
        assert_eq!(x, y);
        assert_eq!(nx, ny);
        assert!(nx <= 5.0 + 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_model(&small_cfg(11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = SequenceClassifier::load(&p).unwrap();
        assert_eq!(back.config, m.config);
        assert!(back.params.iter().zip(&m.params).all(|(a, b)| a.to_bits() == b.to_bits()));
        std::fs::write(&p, &m.to_bytes()[..30]).unwrap();
        assert!(matches!(SequenceClassifier::load(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn train_rejects_bad_config() {
        let m = init_model(&small_cfg(12)).unwrap();
        let data: Vec<Example<'_>> = vec![(&[1, 2], 0)];
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&m, &data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn training_fits_a_toy_task() {
        let m = init_model(&small_cfg(13)).unwrap();
        let seqs: Vec<(Vec<u32>, usize)> = (0..40)
            .map(|i| {
                let c = i % 4;
                (vec![(3 * c) as u32, (3 * c + 1) as u32, (3 * c + 2) as u32], c)
            })
            .collect();
        let data: Vec<Example<'_>> = seqs.iter().map(|(s, c)| (s.as_slice(), *c)).collect();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 8,
            seed: 1,
            clip_norm: Some(5.0),
        };
        let out = train(&m, &data, &cfg).unwrap();
        assert!(out.epoch_losses.last().unwrap() < &0.1);
        assert!(out.wall_clock_seconds > 0.0);
        let again = train(&m, &data, &cfg).unwrap();
        assert_eq!(out.model, again.model);
    }
}
