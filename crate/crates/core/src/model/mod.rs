//! Parameters, the sequence encoder, the step-conditioned cross-attention
//! denoiser, and scoring.

mod encoder;
mod params;

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

pub use encoder::{
    causal_attention, causal_mask, layer_norm, make_encoder, AttentionEncoder, Dropout, RecurrentEncoder,
    SequenceEncoder,
};
pub use params::{Ctx, Init, ParamStore};

use crate::autograd::{Graph, Var};
use crate::config::{EncoderKind, NoiseScaleMode, TrainConfig};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;

pub const ITEM_EMB: &str = "item_emb";
pub const POS_EMB: &str = "pos_emb";
pub const STEP_EMB: &str = "step_emb";
const EMB_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub item_count: usize,
    pub d: usize,
    pub max_len: usize,
    pub steps: usize,
    pub encoder: EncoderKind,
    pub blocks: usize,
    pub heads: usize,
}

impl ModelConfig {
    pub fn from_train(cfg: &TrainConfig, item_count: usize) -> Self {
        Self {
            item_count,
            d: cfg.d,
            max_len: cfg.max_len,
            steps: cfg.steps,
            encoder: cfg.encoder,
            blocks: cfg.blocks,
            heads: cfg.heads,
        }
    }
}

pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    encoder: Box<dyn SequenceEncoder>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            params: self.params.clone(),
            encoder: make_encoder(self.config.encoder, self.config.blocks, self.config.heads),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).field("params", &self.params.numel()).finish()
    }
}

fn declare_all(config: &ModelConfig, encoder: &dyn SequenceEncoder, rng: &mut dyn RngCore) -> ParamStore {
    let d = config.d;
    let mut store = ParamStore::new();
    store.declare(ITEM_EMB, vec![config.item_count + 1, d], Init::Normal(EMB_STD), rng);
    store.declare(POS_EMB, vec![config.max_len, d], Init::Normal(EMB_STD), rng);
    store.declare(STEP_EMB, vec![config.steps + 1, d], Init::Normal(EMB_STD), rng);
    encoder.declare(d, &mut store, rng);
    for w in ["dec.wq", "dec.wk", "dec.wv"] {
        store.declare(w, vec![d, d], Init::Xavier, rng);
    }
    store.get_mut(ITEM_EMB).unwrap().row_mut(PAD).fill(0.0);
    store
}

impl Model {
    pub fn new<R: RngCore>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.item_count == 0 || config.d == 0 || config.max_len == 0 || config.steps == 0 {
            return Err(Error::InvalidArgument("item_count, d, max_len and steps must be positive".into()));
        }
        if config.encoder == EncoderKind::Attention && (config.heads == 0 || !config.d.is_multiple_of(config.heads)) {
            return Err(Error::InvalidArgument(format!("{} heads do not divide d = {}", config.heads, config.d)));
        }
        let encoder = make_encoder(config.encoder, config.blocks, config.heads);
        let params = declare_all(&config, encoder.as_ref(), rng);
        Ok(Self { config, params, encoder })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes
    /// against a fresh declaration.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fresh = Self::new(config, &mut rng)?;
        if fresh.params.names() != params.names() {
            return Err(Error::Checkpoint("parameter names do not match the model config".into()));
        }
        for ((name, a), b) in fresh.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}: {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        Ok(Self { params, ..fresh })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder_kind(&self) -> EncoderKind {
        self.encoder.kind()
    }

    fn check_ids(&self, ids: &[usize], batch: usize) -> Result<()> {
        let l = self.config.max_len;
        if ids.len() != batch * l {
            return Err(Error::DimensionMismatch(ids.len(), batch * l));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i > self.config.item_count) {
            return Err(Error::IndexOutOfRange { index: bad, limit: self.config.item_count });
        }
        Ok(())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.config.steps {
            return Err(Error::StepOutOfRange { t, max: self.config.steps });
        }
        Ok(())
    }

    /// Item plus position embeddings, zeroed at padded rows: `[B·L, d]`.
    pub fn embed(&self, cx: &mut Ctx, ids: &[usize], batch: usize, dropout: Option<&mut Dropout>) -> Var {
        let l = self.config.max_len;
        let items = cx.p(ITEM_EMB);
        let pos = cx.p(POS_EMB);
        let e = cx.g.gather(items, ids);
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..l).collect();
        let p = cx.g.gather(pos, &positions);
        let x = cx.g.add(e, p);
        let keep: Vec<f64> = ids.iter().map(|&i| if i == PAD { 0.0 } else { 1.0 }).collect();
        let x = cx.g.mul_rows_const(x, &keep);
        match dropout {
            Some(d) => d.apply(&mut cx.g, x),
            None => x,
        }
    }

    /// Encoded history `e_s`: `[B, L, d]`. Dropout is active only when given.
    pub fn encode_sequence(
        &self,
        cx: &mut Ctx,
        ids: &[usize],
        batch: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        self.check_ids(ids, batch)?;
        let x = self.embed(cx, ids, batch, dropout.as_deref_mut());
        let valid: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        Ok(self.encoder.encode(cx, x, &valid, batch, self.config.max_len, dropout))
    }

    /// Prepares the cross-attention denoiser over `e_s` for every step.
    pub fn denoiser(&self, cx: &mut Ctx, e_s: Var, ids: &[usize], batch: usize) -> Denoiser {
        let (l, d) = (self.config.max_len, self.config.d);
        let flat = cx.g.reshape(e_s, vec![batch * l, d]);
        let (wq, wk, wv) = (cx.p("dec.wq"), cx.p("dec.wk"), cx.p("dec.wv"));
        let steps = cx.p(STEP_EMB);
        let k = cx.g.matmul(flat, wk, false);
        let v = cx.g.matmul(flat, wv, false);
        let v = cx.g.reshape(v, vec![batch, l, d]);
        let q = cx.g.matmul(steps, wq, false);
        let scores = cx.g.matmul(k, q, true);
        let scores = cx.g.scale(scores, 1.0 / (d as f64).sqrt());
        let valid: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        Denoiser { scores, v, valid, batch, len: l, steps: self.config.steps }
    }

    /// `μ_θ(e_s, t)` for a batch of padded inputs: `[B, L, d]`.
    pub fn denoise_mean(&self, ids: &[usize], batch: usize, t: usize) -> Result<Tensor> {
        self.check_step(t)?;
        let mut cx = Ctx::new(&self.params, false);
        let e_s = self.encode_sequence(&mut cx, ids, batch, None)?;
        let dn = self.denoiser(&mut cx, e_s, ids, batch);
        let mu = dn.mean(&mut cx.g, t)?;
        Ok(cx.g.value(mu).clone())
    }

    /// Encoder output in evaluation mode: `[B, L, d]`.
    pub fn encode(&self, ids: &[usize], batch: usize) -> Result<Tensor> {
        let mut cx = Ctx::new(&self.params, false);
        let e_s = self.encode_sequence(&mut cx, ids, batch, None)?;
        Ok(cx.g.value(e_s).clone())
    }

    /// Looks up `x_0` for each id and diffuses it to step `t`: `[n, d]`.
    pub fn diffuse_targets<R: Rng + ?Sized>(
        &self,
        target_ids: &[usize],
        t: usize,
        schedule: &DiffusionSchedule,
        rng: &mut R,
        identity: bool,
    ) -> Result<Tensor> {
        if let Some(&bad) = target_ids.iter().find(|&&i| i > self.config.item_count) {
            return Err(Error::IndexOutOfRange { index: bad, limit: self.config.item_count });
        }
        let mut g = Graph::new();
        let table = g.constant(self.params.get(ITEM_EMB).unwrap().clone());
        let x0 = g.gather(table, target_ids);
        let xt = diffuse(&mut g, x0, t, schedule, rng, identity)?;
        Ok(g.value(xt).clone())
    }

    /// Full-catalog scores from the deterministic mean at step `t` and the
    /// last position: `[B, item_count]`, column `i` for item `i + 1`.
    pub fn predict_scores(&self, ids: &[usize], batch: usize, t: usize) -> Result<Tensor> {
        Ok(self.score_steps(ids, batch, &[t])?.pop().unwrap())
    }

    /// Scores for every step, indexed by `t` in `0..=T`.
    pub fn score_trajectory(&self, ids: &[usize], batch: usize) -> Result<Vec<Tensor>> {
        let all: Vec<usize> = (0..=self.config.steps).collect();
        self.score_steps(ids, batch, &all)
    }

    fn score_steps(&self, ids: &[usize], batch: usize, steps: &[usize]) -> Result<Vec<Tensor>> {
        for &t in steps {
            self.check_step(t)?;
        }
        let mut cx = Ctx::new(&self.params, false);
        let e_s = self.encode_sequence(&mut cx, ids, batch, None)?;
        let dn = self.denoiser(&mut cx, e_s, ids, batch);
        let table = self.params.get(ITEM_EMB).unwrap();
        let n = self.config.item_count;
        let d = self.config.d;
        let candidates = Tensor::new(vec![n, d], table.data()[d..].to_vec());
        let mut out = Vec::with_capacity(steps.len());
        for &t in steps {
            let mu = dn.last_mean(&mut cx.g, t)?;
            out.push(crate::tensor::matmul_nt(cx.g.value(mu), &candidates));
        }
        Ok(out)
    }
}

/// Cross-attention of the step embedding over `e_s`, shared across steps.
pub struct Denoiser {
    /// `[B·L, T+1]`: key of each position against each step's query.
    scores: Var,
    /// `[B, L, d]`.
    v: Var,
    valid: Vec<bool>,
    batch: usize,
    len: usize,
    steps: usize,
}

impl Denoiser {
    fn step_scores(&self, g: &mut Graph, t: usize) -> Result<Var> {
        if t > self.steps {
            return Err(Error::StepOutOfRange { t, max: self.steps });
        }
        let s = g.slice_cols(self.scores, t, 1);
        Ok(g.reshape(s, vec![self.batch, 1, self.len]))
    }

    /// `μ_θ(e_s, t)` at every position: `[B, L, d]`. Position `j` averages
    /// values at visible positions `≤ j`; positions with none are zero.
    pub fn mean(&self, g: &mut Graph, t: usize) -> Result<Var> {
        let s = self.step_scores(g, t)?;
        let s = g.expand(s, self.len);
        let w = g.masked_softmax(s, causal_mask(&self.valid, self.batch, self.len));
        Ok(g.batch_matmul(w, self.v, false))
    }

    /// `μ_θ(e_s, t)` at the last position only: `[B, d]`.
    pub fn last_mean(&self, g: &mut Graph, t: usize) -> Result<Var> {
        let s = self.step_scores(g, t)?;
        let w = g.masked_softmax(s, self.valid.clone());
        let mu = g.batch_matmul(w, self.v, false);
        let d = g.value(mu).cols();
        Ok(g.reshape(mu, vec![self.batch, d]))
    }
}

/// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`; returns `x0` itself for `t = 0` or `identity`.
pub fn diffuse<R: Rng + ?Sized>(
    g: &mut Graph,
    x0: Var,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
    identity: bool,
) -> Result<Var> {
    let (signal, noise) = schedule.marginal_coefficients(t)?;
    if identity || t == 0 {
        return Ok(x0);
    }
    let shape = g.value(x0).shape().to_vec();
    let mut eps = Tensor::randn(shape, 1.0, rng).into_data();
    eps.iter_mut().for_each(|e| *e *= noise);
    let scaled = g.scale(x0, signal);
    Ok(g.add_const(scaled, &eps))
}

/// `x̂ = μ + s ε` with `s = β̂_t` (direct mode) or `√β̂_t`; `deterministic`
/// or a zero variance returns `mu` itself.
pub fn sample_prediction<R: Rng + ?Sized>(
    g: &mut Graph,
    mu: Var,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
    deterministic: bool,
    mode: NoiseScaleMode,
) -> Result<Var> {
    let var = schedule.sampling_variance(t)?;
    let scale = match mode {
        NoiseScaleMode::Direct => var,
        NoiseScaleMode::Sqrt => var.sqrt(),
    };
    if deterministic || scale == 0.0 {
        return Ok(mu);
    }
    let shape = g.value(mu).shape().to_vec();
    let mut eps = Tensor::randn(shape, 1.0, rng).into_data();
    eps.iter_mut().for_each(|e| *e *= scale);
    Ok(g.add_const(mu, &eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(kind: EncoderKind) -> Model {
        let cfg = ModelConfig { item_count: 9, d: 8, max_len: 5, steps: 3, encoder: kind, blocks: 2, heads: 2 };
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    const IDS: [usize; 10] = [0, 0, 3, 4, 5, 1, 2, 3, 4, 5];

    #[test]
    fn pad_row_starts_at_zero_and_names_are_ordered() {
        let m = tiny(EncoderKind::Attention);
        assert!(m.params().get(ITEM_EMB).unwrap().row(PAD).iter().all(|v| *v == 0.0));
        assert_eq!(&m.params().names()[..3], &[ITEM_EMB, POS_EMB, STEP_EMB]);
        let back = Model::from_params(*m.config(), m.params().clone()).unwrap();
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn causality_is_bitwise_for_both_encoders_and_the_denoiser() {
        for kind in [EncoderKind::Attention, EncoderKind::Recurrent] {
            let m = tiny(kind);
            let base_e = m.encode(&IDS, 2).unwrap();
            let base_mu = m.denoise_mean(&IDS, 2, 2).unwrap();
            for j in 0..4 {
                let mut changed = IDS;
                for p in j + 1..5 {
                    changed[p] = 9;
                    changed[5 + p] = 8;
                }
                let e = m.encode(&changed, 2).unwrap();
                let mu = m.denoise_mean(&changed, 2, 2).unwrap();
                for b in 0..2 {
                    for p in 0..=j {
                        let off = (b * 5 + p) * 8;
                        assert_eq!(&e.data()[off..off + 8], &base_e.data()[off..off + 8], "{kind} e_s b={b} p={p}");
                        assert_eq!(&mu.data()[off..off + 8], &base_mu.data()[off..off + 8], "{kind} mu b={b} p={p}");
                    }
                }
            }
        }
    }

    #[test]
    fn shapes_and_padding() {
        for kind in [EncoderKind::Attention, EncoderKind::Recurrent] {
            let m = tiny(kind);
            let e = m.encode(&IDS, 2).unwrap();
            assert_eq!(e.shape(), &[2, 5, 8]);
            assert!(e.data()[..16].iter().all(|v| *v == 0.0), "padded positions are zero");
        }
    }

    #[test]
    fn single_visible_item_depends_on_that_item_only() {
        let m = tiny(EncoderKind::Attention);
        let a = m.encode(&[0, 0, 0, 0, 7, 0, 0, 0, 0, 7], 2).unwrap();
        assert_eq!(&a.data()[32..40], &a.data()[72..80]);
    }

    #[test]
    fn batch_equivariance_and_duplicated_rows() {
        let m = tiny(EncoderKind::Attention);
        let swapped: Vec<usize> = IDS[5..].iter().chain(&IDS[..5]).copied().collect();
        let a = m.predict_scores(&IDS, 2, 0).unwrap();
        let b = m.predict_scores(&swapped, 2, 0).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
        let dup: Vec<usize> = IDS[..5].iter().chain(&IDS[..5]).copied().collect();
        let c = m.predict_scores(&dup, 2, 0).unwrap();
        assert_eq!(c.row(0), c.row(1));
        assert_eq!(a.shape(), &[2, 9]);
    }

    #[test]
    fn scores_match_last_position_mean() {
        let m = tiny(EncoderKind::Attention);
        let mu = m.denoise_mean(&IDS, 2, 1).unwrap();
        let scores = m.predict_scores(&IDS, 2, 1).unwrap();
        let table = m.params().get(ITEM_EMB).unwrap();
        for b in 0..2 {
            let last = &mu.data()[(b * 5 + 4) * 8..(b * 5 + 5) * 8];
            for i in 1..=9 {
                let want: f64 = last.iter().zip(table.row(i)).map(|(x, y)| x * y).sum();
                assert!((scores.row(b)[i - 1] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_item_scores_zero() {
        let mut m = tiny(EncoderKind::Attention);
        let mu = m.denoise_mean(&IDS, 2, 0).unwrap();
        let last = mu.data()[32..40].to_vec();
        // make item 6 orthogonal to user 0's mean
        let row = m.params_mut().get_mut(ITEM_EMB).unwrap().row_mut(6);
        let norm: f64 = last.iter().map(|v| v * v).sum();
        let proj: f64 = row.iter().zip(&last).map(|(a, b)| a * b).sum::<f64>() / norm;
        for (r, l) in row.iter_mut().zip(&last) {
            *r -= proj * l;
        }
        // item 6 is not in user 0's history, so the mean is unchanged
        let scores = m.predict_scores(&IDS, 2, 0).unwrap();
        assert!(scores.row(0)[5].abs() < 1e-12);
    }

    #[test]
    fn zero_query_key_projections_give_uniform_causal_mean() {
        let mut m = tiny(EncoderKind::Attention);
        for w in ["dec.wq", "dec.wk"] {
            m.params_mut().get_mut(w).unwrap().data_mut().fill(0.0);
        }
        let e = m.encode(&IDS, 2).unwrap();
        let mu = m.denoise_mean(&IDS, 2, 3).unwrap();
        let wv = crate::tensor::matmul(&e.clone().reshape(vec![10, 8]), m.params().get("dec.wv").unwrap());
        for b in 0..2 {
            for j in 0..5 {
                let visible: Vec<usize> = (0..=j).filter(|&p| IDS[b * 5 + p] != PAD).collect();
                for c in 0..8 {
                    let want = if visible.is_empty() {
                        0.0
                    } else {
                        visible.iter().map(|&p| wv.row(b * 5 + p)[c]).sum::<f64>() / visible.len() as f64
                    };
                    assert!((mu.data()[(b * 5 + j) * 8 + c] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn distinct_steps_give_distinct_means() {
        let m = tiny(EncoderKind::Attention);
        let a = m.denoise_mean(&IDS, 2, 0).unwrap();
        let b = m.denoise_mean(&IDS, 2, 3).unwrap();
        assert_ne!(a.data(), b.data());
        assert!(matches!(m.denoise_mean(&IDS, 2, 4), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let m = tiny(EncoderKind::Attention);
        let mut bad = IDS;
        bad[3] = 10;
        assert!(matches!(m.encode(&bad, 2), Err(Error::IndexOutOfRange { index: 10, .. })));
        assert!(matches!(m.encode(&IDS[..9], 2), Err(Error::DimensionMismatch(..))));
    }

    #[test]
    fn diffusion_and_sampling_contracts() {
        let m = tiny(EncoderKind::Attention);
        let sched = DiffusionSchedule::new(3, 0.2, ScheduleShape::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = m.params().get(ITEM_EMB).unwrap();
        let ids = [0, 2, 5];
        let x0: Vec<f64> = ids.iter().flat_map(|&i| table.row(i).to_vec()).collect();
        assert_eq!(m.diffuse_targets(&ids, 3, &sched, &mut rng, true).unwrap().data(), &x0[..]);
        assert_eq!(m.diffuse_targets(&ids, 0, &sched, &mut rng, false).unwrap().data(), &x0[..]);
        assert_ne!(m.diffuse_targets(&ids, 2, &sched, &mut rng, false).unwrap().data(), &x0[..]);

        let mut g = Graph::new();
        let mu = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let det = sample_prediction(&mut g, mu, 3, &sched, &mut rng, true, NoiseScaleMode::Direct).unwrap();
        assert_eq!(g.value(det), g.value(mu));
        // β̂_1 = 0
        let zero = sample_prediction(&mut g, mu, 1, &sched, &mut rng, false, NoiseScaleMode::Direct).unwrap();
        assert_eq!(g.value(zero), g.value(mu));
    }

    #[test]
    fn sampled_prediction_mean_monte_carlo() {
        // mean of μ + β̂ε over n draws lies within 3 standard errors β̂/√n of μ
        let sched = DiffusionSchedule::new(4, 0.3, ScheduleShape::Linear).unwrap();
        let bhat = sched.posterior_variance(3).unwrap();
        let n = 100_000;
        let mut g = Graph::new();
        let mu = g.constant(Tensor::new(vec![1, n], vec![0.7; n]));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = sample_prediction(&mut g, mu, 3, &sched, &mut rng, false, NoiseScaleMode::Direct).unwrap();
        let xs = g.value(x).data();
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() < 3.0 * bhat / (n as f64).sqrt());
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - bhat).abs() < 0.01 * bhat);
    }
}
