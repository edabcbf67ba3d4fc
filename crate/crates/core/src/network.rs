//! Recurrent policy/value network `(p, v) = f(s)`.
//!
//! The pipeline tokens run through a single-layer GRU whose initial hidden
//! state is a tanh projection of the meta-feature vector. The final hidden
//! state feeds a policy head over the whole action vocabulary (masked to the
//! legal actions before the softmax) and a logistic value head.
//!
//! Training minimizes, per batch,
//! `mean[-sum_a pi_a ln p_a + (v - e)^2] + alpha * |theta|^2`
//! with exact gradients from backpropagation through time. Everything is
//! `f64` so finite-difference checks are meaningful.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::EncodedState;
use crate::metafeatures::META_DIM;

pub const INIT_SCALE: f64 = 0.08;
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub meta: usize,
    pub actions: usize,
}

impl ModelShape {
    pub fn new(vocab: usize, embed: usize, hidden: usize, actions: usize) -> Self {
        ModelShape { vocab, embed, hidden, meta: META_DIM, actions }
    }

    /// Parameter groups in storage (and checkpoint) order.
    pub fn groups(&self) -> Vec<(&'static str, usize)> {
        let (v, d, h, m, a) = (self.vocab, self.embed, self.hidden, self.meta, self.actions);
        vec![
            ("embedding", v * d),
            ("input_update", h * d),
            ("input_reset", h * d),
            ("input_candidate", h * d),
            ("hidden_update", h * h),
            ("hidden_reset", h * h),
            ("hidden_candidate", h * h),
            ("bias_update", h),
            ("bias_reset", h),
            ("bias_candidate", h),
            ("meta_weight", h * m),
            ("meta_bias", h),
            ("policy_weight", a * h),
            ("policy_bias", a),
            ("value_weight", h),
            ("value_bias", 1),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|(_, n)| n).sum()
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut next = |n: usize| {
            let r = offset..offset + n;
            offset += n;
            r
        };
        let (v, d, h, m, a) = (self.vocab, self.embed, self.hidden, self.meta, self.actions);
        Layout {
            emb: next(v * d),
            wz: next(h * d),
            wr: next(h * d),
            wn: next(h * d),
            uz: next(h * h),
            ur: next(h * h),
            un: next(h * h),
            bz: next(h),
            br: next(h),
            bn: next(h),
            mw: next(h * m),
            mb: next(h),
            pw: next(a * h),
            pb: next(a),
            vw: next(h),
            vb: next(1),
        }
    }
}

struct Layout {
    emb: Range<usize>,
    wz: Range<usize>,
    wr: Range<usize>,
    wn: Range<usize>,
    uz: Range<usize>,
    ur: Range<usize>,
    un: Range<usize>,
    bz: Range<usize>,
    br: Range<usize>,
    bn: Range<usize>,
    mw: Range<usize>,
    mb: Range<usize>,
    pw: Range<usize>,
    pb: Range<usize>,
    vw: Range<usize>,
    vb: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("legal mask has {got} entries, model has {expected} actions")]
    MaskShape { expected: usize, got: usize },
    #[error("action {action} out of range for {actions} actions")]
    ActionRange { action: usize, actions: usize },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenRange { token: u32, vocab: usize },
    #[error("training example has no search probability mass")]
    EmptyPolicy,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("gradient is not finite")]
    NonFinite,
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
}

/// Network output: a distribution over the action vocabulary (zero on
/// illegal actions) and the predicted evaluation `v` in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyValue {
    pub p: Vec<f64>,
    pub v: f64,
}

/// One self-play sample: encoded state, its legal actions, the search
/// probabilities over those actions and the episode's final evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub encoded: EncodedState,
    /// Legal action indices, ascending.
    pub legal: Vec<u32>,
    /// Search probabilities aligned with `legal`.
    pub pi: Vec<f64>,
    pub e: f64,
}

impl TrainingExample {
    pub fn dense_pi(&self, actions: usize) -> Vec<f64> {
        let mut out = vec![0.0; actions];
        for (&a, &p) in self.legal.iter().zip(&self.pi) {
            out[a as usize] = p;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    data: Vec<f64>,
}

/// Gradient with the same layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub shape: ModelShape,
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn group(&self, name: &str) -> &[f64] {
        &self.data[group_range(&self.shape, name)]
    }
}

fn group_range(shape: &ModelShape, name: &str) -> Range<usize> {
    let mut offset = 0;
    for (g, n) in shape.groups() {
        if g == name {
            return offset..offset + n;
        }
        offset += n;
    }
    panic!("unknown parameter group {name}")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out = w * x` for a row-major `rows x x.len()` matrix.
fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `out += w^T * y`.
fn matvec_t_acc(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (&yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if yi != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += yi * a;
            }
        }
    }
}

/// `g += y x^T`.
fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (&yi, row) in y.iter().zip(g.chunks_exact_mut(cols)) {
        if yi != 0.0 {
            for (o, b) in row.iter_mut().zip(x) {
                *o += yi * b;
            }
        }
    }
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

struct StepCache {
    token: usize,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

struct Trace {
    h0: Vec<f64>,
    steps: Vec<StepCache>,
    h: Vec<f64>,
    /// Probabilities aligned with the legal list.
    probs: Vec<f64>,
    v: f64,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        ModelParams { shape, data: vec![0.0; shape.param_count()] }
    }

    /// Uniform initialization in `[-0.08, 0.08]` from a seeded stream.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.param_count())
            .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        ModelParams { shape, data }
    }

    pub fn from_data(shape: ModelShape, data: Vec<f64>) -> Result<Self, NetworkError> {
        if data.len() != shape.param_count() {
            return Err(NetworkError::Shape(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NetworkError::NonFinite);
        }
        Ok(ModelParams { shape, data })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn group(&self, name: &str) -> &[f64] {
        &self.data[group_range(&self.shape, name)]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Masked forward pass over the full action vocabulary.
    pub fn forward(&self, s: &EncodedState, legal_mask: &[bool]) -> Result<PolicyValue, NetworkError> {
        if legal_mask.len() != self.shape.actions {
            return Err(NetworkError::MaskShape { expected: self.shape.actions, got: legal_mask.len() });
        }
        let legal: Vec<u32> = legal_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i as u32)
            .collect();
        let (probs, v) = self.forward_legal(s, &legal)?;
        let mut p = vec![0.0; self.shape.actions];
        for (&a, q) in legal.iter().zip(probs) {
            p[a as usize] = q;
        }
        Ok(PolicyValue { p, v })
    }

    /// Forward pass returning probabilities aligned with `legal`.
    pub fn forward_legal(&self, s: &EncodedState, legal: &[u32]) -> Result<(Vec<f64>, f64), NetworkError> {
        self.validate(s, legal)?;
        let t = self.trace(s, legal);
        Ok((t.probs, t.v))
    }

    fn validate(&self, s: &EncodedState, legal: &[u32]) -> Result<(), NetworkError> {
        if let Some(&token) = s.tokens.iter().find(|&&t| t as usize >= self.shape.vocab) {
            return Err(NetworkError::TokenRange { token, vocab: self.shape.vocab });
        }
        if let Some(&a) = legal.iter().find(|&&a| a as usize >= self.shape.actions) {
            return Err(NetworkError::ActionRange { action: a as usize, actions: self.shape.actions });
        }
        Ok(())
    }

    fn trace(&self, s: &EncodedState, legal: &[u32]) -> Trace {
        let ModelShape { embed: d, hidden: h, .. } = self.shape;
        let l = self.shape.layout();
        let w = &self.data;

        let mut h0 = vec![0.0; h];
        matvec(&w[l.mw.clone()], &s.meta, &mut h0);
        for (x, b) in h0.iter_mut().zip(&w[l.mb.clone()]) {
            *x = (*x + b).tanh();
        }

        let len = s.len();
        let mut steps = Vec::with_capacity(len);
        let mut hcur = h0.clone();
        let (mut az, mut ar, mut an) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
        let mut tmp = vec![0.0; h];
        let mut rh = vec![0.0; h];
        for &tok in &s.tokens[..len] {
            let token = tok as usize;
            let x = &w[l.emb.start + token * d..l.emb.start + (token + 1) * d];
            matvec(&w[l.wz.clone()], x, &mut az);
            matvec(&w[l.uz.clone()], &hcur, &mut tmp);
            let z: Vec<f64> = (0..h).map(|i| sigmoid(az[i] + tmp[i] + w[l.bz.start + i])).collect();
            matvec(&w[l.wr.clone()], x, &mut ar);
            matvec(&w[l.ur.clone()], &hcur, &mut tmp);
            let r: Vec<f64> = (0..h).map(|i| sigmoid(ar[i] + tmp[i] + w[l.br.start + i])).collect();
            for i in 0..h {
                rh[i] = r[i] * hcur[i];
            }
            matvec(&w[l.wn.clone()], x, &mut an);
            matvec(&w[l.un.clone()], &rh, &mut tmp);
            let n: Vec<f64> = (0..h).map(|i| (an[i] + tmp[i] + w[l.bn.start + i]).tanh()).collect();
            let hnext: Vec<f64> = (0..h).map(|i| (1.0 - z[i]) * n[i] + z[i] * hcur[i]).collect();
            steps.push(StepCache { token, h_prev: std::mem::replace(&mut hcur, hnext), z, r, n });
        }

        let pw = &w[l.pw.clone()];
        let logits: Vec<f64> = legal
            .iter()
            .map(|&a| {
                let a = a as usize;
                let row = &pw[a * h..(a + 1) * h];
                row.iter().zip(&hcur).map(|(p, x)| p * x).sum::<f64>() + w[l.pb.start + a]
            })
            .collect();
        let probs = if logits.is_empty() {
            Vec::new()
        } else {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        };
        let u: f64 = w[l.vw.clone()].iter().zip(&hcur).map(|(a, b)| a * b).sum::<f64>() + w[l.vb.start];
        Trace { h0, steps, h: hcur, probs, v: sigmoid(u) }
    }

    /// Accumulates `scale * d(loss_example)/d(theta)` into `grad`; returns
    /// the example's unscaled loss (without the regularizer).
    fn backprop(&self, ex: &TrainingExample, scale: f64, grad: &mut [f64]) -> f64 {
        let ModelShape { embed: d, hidden: h, .. } = self.shape;
        let l = self.shape.layout();
        let w = &self.data;
        let t = self.trace(&ex.encoded, &ex.legal);

        // Policy term: only unclamped probabilities contribute.
        let mut ce = 0.0;
        let mut live_mass = 0.0;
        for (&p, &pi) in t.probs.iter().zip(&ex.pi) {
            if p >= LOG_FLOOR {
                live_mass += pi;
            }
            ce -= pi * p.max(LOG_FLOOR).ln();
        }
        let dlogits: Vec<f64> = t
            .probs
            .iter()
            .zip(&ex.pi)
            .map(|(&p, &pi)| scale * (p * live_mass - if p >= LOG_FLOOR { pi } else { 0.0 }))
            .collect();
        let verr = t.v - ex.e;
        let du = scale * 2.0 * verr * t.v * (1.0 - t.v);

        let mut dh = vec![0.0; h];
        for (&a, &g) in ex.legal.iter().zip(&dlogits) {
            let a = a as usize;
            let row = a * h..(a + 1) * h;
            for (o, p) in dh.iter_mut().zip(&w[l.pw.start + row.start..l.pw.start + row.end]) {
                *o += g * p;
            }
            for (o, x) in grad[l.pw.start + row.start..l.pw.start + row.end].iter_mut().zip(&t.h) {
                *o += g * x;
            }
            grad[l.pb.start + a] += g;
        }
        for i in 0..h {
            dh[i] += du * w[l.vw.start + i];
            grad[l.vw.start + i] += du * t.h[i];
        }
        grad[l.vb.start] += du;

        let mut dz = vec![0.0; h];
        let mut dr = vec![0.0; h];
        let mut dan = vec![0.0; h];
        let mut daz = vec![0.0; h];
        let mut dar = vec![0.0; h];
        let mut rh = vec![0.0; h];
        let mut drh = vec![0.0; h];
        let mut dx = vec![0.0; d];
        for st in t.steps.iter().rev() {
            let x = &w[l.emb.start + st.token * d..l.emb.start + (st.token + 1) * d];
            let mut dh_prev = vec![0.0; h];
            for i in 0..h {
                let dn = dh[i] * (1.0 - st.z[i]);
                dz[i] = dh[i] * (st.h_prev[i] - st.n[i]);
                dh_prev[i] = dh[i] * st.z[i];
                dan[i] = dn * (1.0 - st.n[i] * st.n[i]);
                rh[i] = st.r[i] * st.h_prev[i];
            }
            outer_acc(&mut grad[l.wn.clone()], &dan, x);
            add_assign(&mut grad[l.bn.clone()], &dan);
            outer_acc(&mut grad[l.un.clone()], &dan, &rh);
            drh.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&w[l.un.clone()], &dan, &mut drh);
            for i in 0..h {
                dr[i] = drh[i] * st.h_prev[i];
                dh_prev[i] += drh[i] * st.r[i];
                daz[i] = dz[i] * st.z[i] * (1.0 - st.z[i]);
                dar[i] = dr[i] * st.r[i] * (1.0 - st.r[i]);
            }
            outer_acc(&mut grad[l.wz.clone()], &daz, x);
            outer_acc(&mut grad[l.uz.clone()], &daz, &st.h_prev);
            add_assign(&mut grad[l.bz.clone()], &daz);
            outer_acc(&mut grad[l.wr.clone()], &dar, x);
            outer_acc(&mut grad[l.ur.clone()], &dar, &st.h_prev);
            add_assign(&mut grad[l.br.clone()], &dar);
            matvec_t_acc(&w[l.uz.clone()], &daz, &mut dh_prev);
            matvec_t_acc(&w[l.ur.clone()], &dar, &mut dh_prev);

            dx.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&w[l.wn.clone()], &dan, &mut dx);
            matvec_t_acc(&w[l.wz.clone()], &daz, &mut dx);
            matvec_t_acc(&w[l.wr.clone()], &dar, &mut dx);
            add_assign(&mut grad[l.emb.start + st.token * d..l.emb.start + (st.token + 1) * d], &dx);
            dh = dh_prev;
        }

        let da0: Vec<f64> = (0..h).map(|i| dh[i] * (1.0 - t.h0[i] * t.h0[i])).collect();
        outer_acc(&mut grad[l.mw.clone()], &da0, &ex.encoded.meta);
        add_assign(&mut grad[l.mb.clone()], &da0);

        ce + verr * verr
    }

    fn check_batch(&self, batch: &[TrainingExample]) -> Result<(), NetworkError> {
        if batch.is_empty() {
            return Err(NetworkError::EmptyBatch);
        }
        for ex in batch {
            if ex.pi.iter().sum::<f64>() <= 0.0 || ex.pi.len() != ex.legal.len() {
                return Err(NetworkError::EmptyPolicy);
            }
            self.validate(&ex.encoded, &ex.legal)?;
        }
        Ok(())
    }
}

/// Mean cross-entropy plus squared value error over the batch, plus
/// `alpha * |theta|^2`.
pub fn loss(params: &ModelParams, batch: &[TrainingExample], alpha: f64) -> Result<f64, NetworkError> {
    params.check_batch(batch)?;
    let mut total = 0.0;
    for ex in batch {
        let t = params.trace(&ex.encoded, &ex.legal);
        let ce: f64 = t
            .probs
            .iter()
            .zip(&ex.pi)
            .map(|(&p, &pi)| -pi * p.max(LOG_FLOOR).ln())
            .sum();
        total += ce + (t.v - ex.e).powi(2);
    }
    Ok(total / batch.len() as f64 + alpha * params.norm_sq())
}

/// Exact gradient of [`loss`].
pub fn gradient(params: &ModelParams, batch: &[TrainingExample], alpha: f64) -> Result<Gradient, NetworkError> {
    loss_and_gradient(params, batch, alpha).map(|(_, g)| g)
}

pub fn loss_and_gradient(
    params: &ModelParams,
    batch: &[TrainingExample],
    alpha: f64,
) -> Result<(f64, Gradient), NetworkError> {
    params.check_batch(batch)?;
    let mut data: Vec<f64> = params.data.iter().map(|x| 2.0 * alpha * x).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        total += params.backprop(ex, scale, &mut data);
    }
    let value = total * scale + alpha * params.norm_sq();
    Ok((value, Gradient { shape: params.shape, data }))
}

/// `theta - lr * grad`; rejects non-finite gradients.
pub fn sgd_step(params: &ModelParams, grad: &Gradient, lr: f64) -> Result<ModelParams, NetworkError> {
    if grad.shape != params.shape {
        return Err(NetworkError::Shape("gradient shape differs from parameters".into()));
    }
    if grad.data.iter().any(|g| !g.is_finite()) {
        return Err(NetworkError::NonFinite);
    }
    let data = params.data.iter().zip(&grad.data).map(|(p, g)| p - lr * g).collect();
    Ok(ModelParams { shape: params.shape, data })
}
