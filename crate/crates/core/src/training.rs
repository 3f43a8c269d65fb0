//! Four-term objective, BertAdam-style optimizer, warmup schedule, the
//! training loop and finite-difference gradient verification.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{Dataset, Video, PAD};
use crate::autodiff::{Graph, ParamGrads, ParamId, ParamStore, Var};
use crate::causal::{forward_pair, CausalConfig, PairOutputs};
use crate::error::{Error, Result};
use crate::eval::{accuracy, predict_relations};
use crate::model::{ModelConfig, Vgcm};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const DEFAULT_SEEDS: [u64; 3] = [2023, 2024, 2025];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_v: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 1.0, lambda_r: 4.0, lambda_v: 0.25, lambda_s: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_C", self.lambda_c), ("lambda_R", self.lambda_r), ("lambda_V", self.lambda_v), ("lambda_S", self.lambda_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a finite non-negative number")));
            }
        }
        Ok(())
    }
}

/// Which relation label switches the similarity term on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityGate {
    Causal,
    Noncausal,
}

impl SimilarityGate {
    pub fn is_open(self, relation: u8) -> bool {
        match self {
            SimilarityGate::Causal => relation == 1,
            SimilarityGate::Noncausal => relation == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Videos per optimizer step.
    pub batch_size: usize,
    pub similarity_gate: SimilarityGate,
    pub weights: LossWeights,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Epochs of caption + feature-alignment training before the main run.
    pub warm_start_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 16e-5,
            warmup_epochs: 3,
            seed: DEFAULT_SEEDS[0],
            batch_size: 1,
            similarity_gate: SimilarityGate::Noncausal,
            weights: LossWeights::default(),
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            warm_start_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.max_grad_norm >= 0.0) {
            return Err(Error::Config("weight_decay and max_grad_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Loss terms of one (video, premise) pair as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l_c: Var,
    pub l_r: Var,
    pub l_v: Var,
    pub l_s: Var,
}

/// Unweighted loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub l_v: f64,
    pub l_s: f64,
}

impl LossBreakdown {
    pub fn read<T: Scalar>(g: &Graph<'_, T>, vars: &LossVars) -> Self {
        let f = |v: Var| g.value(v).item().as_f64();
        Self { total: f(vars.total), l_c: f(vars.l_c), l_r: f(vars.l_r), l_v: f(vars.l_v), l_s: f(vars.l_s) }
    }
}

fn caption_targets(tokens: &[u32]) -> Vec<Option<usize>> {
    tokens.iter().map(|&t| (t != PAD).then_some(t as usize)).collect()
}

fn caption_loss<T: Scalar>(model: &Vgcm<T>, g: &mut Graph<'_, T>, o_p: Var, caption: &[u32]) -> Result<Var> {
    if caption.len() != model.config.max_caption_len {
        return Err(Error::Shape(format!(
            "caption target has {} tokens, caption head emits {}",
            caption.len(),
            model.config.max_caption_len
        )));
    }
    let v = model.config.vocab_size;
    // out-of-vocabulary targets cannot be scored
    let targets: Vec<Option<usize>> = caption_targets(caption).into_iter().map(|t| t.filter(|&t| t < v)).collect();
    let logits = model.caption_head(g, o_p);
    Ok(g.cross_entropy(logits, &targets))
}

fn weighted<T: Scalar>(g: &mut Graph<'_, T>, terms: &[(f64, Var)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let t = g.scale(v, T::lit(w));
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t),
        });
    }
    acc.expect("at least one term")
}

/// `λ_C·L_C + λ_R·L_R + λ_V·L_V + λ_S·gate·L_S` for one pair.
pub fn compute_loss<T: Scalar>(
    model: &Vgcm<T>,
    g: &mut Graph<'_, T>,
    pair: &PairOutputs,
    caption: &[u32],
    relation: u8,
    weights: &LossWeights,
    gate: SimilarityGate,
) -> Result<LossVars> {
    let s = &pair.streams;
    let l_c = caption_loss(model, g, s.o_p, caption)?;
    if g.value(pair.logits).shape() != (1, 2) || relation > 1 {
        return Err(Error::Shape(format!("relation logits {:?} with label {relation}", g.value(pair.logits).shape())));
    }
    let l_r = g.cross_entropy(pair.logits, &[Some(relation as usize)]);
    let l_v = g.mse(s.f_p_n, s.f_n);
    let l_s = g.mse(pair.o_refined, s.o_p);
    let gate = if gate.is_open(relation) { 1.0 } else { 0.0 };
    let total = weighted(
        g,
        &[(weights.lambda_c, l_c), (weights.lambda_r, l_r), (weights.lambda_v, l_v), (weights.lambda_s * gate, l_s)],
    );
    Ok(LossVars { total, l_c, l_r, l_v, l_s })
}

/// Loss of one pair on a fresh shared pass.
pub fn pair_loss<T: Scalar>(
    model: &Vgcm<T>,
    g: &mut Graph<'_, T>,
    video: &Video<T>,
    k: usize,
    weights: &LossWeights,
    gate: SimilarityGate,
    mode: &mut Mode<'_>,
) -> Result<LossVars> {
    let mut shared = model.shared_pass(g, video, mode)?;
    let pair = forward_pair(model, g, &mut shared, video, k, mode)?;
    let caption = &video.events[video.num_events() - 1].caption_tokens;
    compute_loss(model, g, &pair, caption, video.sample.relation[k - 1], weights, gate)
}

/// Mean of the per-pair objectives over every premise of one video. The
/// caption and feature-alignment terms do not depend on `k` and are built
/// once. The returned breakdown averages `L_R` and `L_S` over premises.
pub fn sample_loss<T: Scalar>(
    model: &Vgcm<T>,
    g: &mut Graph<'_, T>,
    video: &Video<T>,
    weights: &LossWeights,
    gate: SimilarityGate,
    mode: &mut Mode<'_>,
) -> Result<LossVars> {
    let n = video.num_events();
    let mut shared = model.shared_pass(g, video, mode)?;
    let l_c = caption_loss(model, g, shared.o_p, &video.events[n - 1].caption_tokens)?;
    let l_v = g.mse(shared.f_p_n, shared.f_n);
    let inv = 1.0 / (n - 1) as f64;
    let mut per_k = Vec::with_capacity(2 * (n - 1));
    let mut l_r_terms = Vec::with_capacity(n - 1);
    let mut l_s_terms = Vec::with_capacity(n - 1);
    for k in 1..n {
        let pair = forward_pair(model, g, &mut shared, video, k, mode)?;
        let r = video.sample.relation[k - 1];
        let l_r = g.cross_entropy(pair.logits, &[Some(r as usize)]);
        let l_s = g.mse(pair.o_refined, shared.o_p);
        let gate = if gate.is_open(r) { 1.0 } else { 0.0 };
        per_k.push((weights.lambda_r * inv, l_r));
        per_k.push((weights.lambda_s * gate * inv, l_s));
        l_r_terms.push((inv, l_r));
        l_s_terms.push((inv, l_s));
    }
    let mut terms = vec![(weights.lambda_c, l_c), (weights.lambda_v, l_v)];
    terms.extend(per_k);
    let total = weighted(g, &terms);
    let l_r = weighted(g, &l_r_terms);
    let l_s = weighted(g, &l_s_terms);
    Ok(LossVars { total, l_c, l_r, l_v, l_s })
}

/// Adam with decoupled weight decay and no bias correction. Biases and
/// layer-norm parameters are not decayed.
#[derive(Clone, Debug)]
pub struct BertAdam<T> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    decay: Vec<bool>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> BertAdam<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols())).collect::<Vec<_>>();
        let decay = params
            .iter()
            .map(|(_, name, _)| !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")))
            .collect();
        Self { m: zeros(), v: zeros(), decay, beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let eps = T::lit(self.eps);
        let lr = T::lit(lr);
        let wd = T::lit(self.weight_decay);
        for (i, (p, g)) in params.values_mut().zip(grads.iter()).enumerate() {
            let decay = self.decay[i];
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (j, (x, &gj)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[j] = b1 * m[j] + c1 * gj;
                v[j] = b2 * v[j] + c2 * gj * gj;
                let mut update = m[j] / (v[j].sqrt() + eps);
                if decay {
                    update += wd * *x;
                }
                *x -= lr * update;
            }
        }
    }
}

/// Linear warmup evaluated at step midpoints, constant afterwards.
pub fn learning_rate_at(step: usize, warmup_steps: usize, peak: f64) -> f64 {
    if warmup_steps == 0 {
        return peak;
    }
    peak * ((step as f64 + 0.5) / warmup_steps as f64).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_total: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub l_v: f64,
    pub l_s: f64,
    pub holdout_accuracy: Option<f64>,
}

impl EpochMetrics {
    /// Tab-separated log line; a missing holdout prints as `nan`.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch,
            self.mean_total,
            self.l_c,
            self.l_r,
            self.l_v,
            self.l_s,
            self.holdout_accuracy.unwrap_or(f64::NAN)
        )
    }
}

pub fn metrics_log(metrics: &[EpochMetrics]) -> String {
    metrics.iter().map(|m| m.log_line() + "\n").collect()
}

/// Relation accuracy of `model` on `data`.
pub fn dataset_accuracy<T: Scalar>(model: &Vgcm<T>, data: &Dataset<T>) -> Result<f64> {
    let preds = data.videos.iter().map(|v| predict_relations(model, v)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<u8>> = data.videos.iter().map(|v| v.sample.relation.clone()).collect();
    accuracy(&preds, &gts)
}

struct Trainer<'a, T: Scalar> {
    model: Vgcm<T>,
    cfg: &'a TrainConfig,
    opt: BertAdam<T>,
    grads: ParamGrads<T>,
    order_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<'_, T> {
    /// One pass over `train`; `lr_at` maps the step within the epoch to a rate.
    fn epoch(&mut self, train: &Dataset<T>, weights: &LossWeights, lr_at: impl Fn(usize) -> f64) -> Result<LossBreakdown> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.order_rng);
        let mut sum = LossBreakdown::default();
        let dropout = self.model.config.dropout;
        for (step, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            self.grads.zero();
            for &i in batch {
                let mut g = Graph::new(&self.model.params);
                let mut mode = Mode::Train { dropout, rng: &mut self.dropout_rng };
                let vars = sample_loss(&self.model, &mut g, &train.videos[i], weights, self.cfg.similarity_gate, &mut mode)?;
                let b = LossBreakdown::read(&g, &vars);
                if !b.total.is_finite() {
                    return Err(Error::Range(format!("non-finite loss on {}", train.videos[i].sample.video_id)));
                }
                sum.total += b.total;
                sum.l_c += b.l_c;
                sum.l_r += b.l_r;
                sum.l_v += b.l_v;
                sum.l_s += b.l_s;
                let grads = g.backward(vars.total);
                g.accumulate_param_grads(&grads, &mut self.grads);
            }
            self.grads.scale(T::one() / T::from_usize(batch.len()).unwrap());
            if self.cfg.max_grad_norm > 0.0 {
                let norm = self.grads.sq_norm().as_f64().sqrt();
                if norm > self.cfg.max_grad_norm {
                    self.grads.scale(T::lit(self.cfg.max_grad_norm / norm));
                }
            }
            self.opt.step(&mut self.model.params, &self.grads, lr_at(step));
        }
        let n = train.len() as f64;
        Ok(LossBreakdown { total: sum.total / n, l_c: sum.l_c / n, l_r: sum.l_r / n, l_v: sum.l_v / n, l_s: sum.l_s / n })
    }
}

/// Trains a fresh model. Identical inputs and seed give identical parameters.
pub fn train_model<T: Scalar>(
    train: &Dataset<T>,
    holdout: Option<&Dataset<T>>,
    model_config: &ModelConfig,
    causal: CausalConfig,
    cfg: &TrainConfig,
) -> Result<(Vgcm<T>, Vec<EpochMetrics>)> {
    let model = Vgcm::new(model_config.clone(), causal, cfg.seed)?;
    train_from(model, train, holdout, cfg)
}

/// Continues training `model` under `cfg`.
pub fn train_from<T: Scalar>(
    model: Vgcm<T>,
    train: &Dataset<T>,
    holdout: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<(Vgcm<T>, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let opt = BertAdam::new(&model.params, cfg.weight_decay);
    let grads = model.params.zeros_like();
    let mut t = Trainer {
        model,
        cfg,
        opt,
        grads,
        order_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
        dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
    };
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);

    if cfg.warm_start_epochs > 0 {
        let weights = LossWeights { lambda_r: 0.0, lambda_s: 0.0, ..cfg.weights };
        for e in 0..cfg.warm_start_epochs {
            let b = t.epoch(train, &weights, |_| cfg.learning_rate)?;
            info!("warm start {}: caption {:.4} align {:.4}", e + 1, b.l_c, b.l_v);
        }
        t.opt = BertAdam::new(&t.model.params, cfg.weight_decay);
    }

    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let base = epoch * steps_per_epoch;
        let b = t.epoch(train, &cfg.weights, |s| learning_rate_at(base + s, warmup_steps, cfg.learning_rate))?;
        let holdout_accuracy = holdout.filter(|h| !h.is_empty()).map(|h| dataset_accuracy(&t.model, h)).transpose()?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            mean_total: b.total,
            l_c: b.l_c,
            l_r: b.l_r,
            l_v: b.l_v,
            l_s: b.l_s,
            holdout_accuracy,
        };
        info!("{}", m.log_line());
        metrics.push(m);
    }
    Ok((t.model, metrics))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub epsilon: f64,
    /// Parameter index, flat offset, analytic and numeric derivative of
    /// the worst coordinate.
    pub worst: Option<(ParamId, usize, f64, f64)>,
}

/// Denominator floor so coordinates with vanishing gradients do not blow up
/// the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Fourth-order central differences of the pair loss against the tape gradient on
/// `coordinates` parameter entries: half drawn among entries with a
/// non-zero analytic gradient, half uniformly over all parameters.
pub fn gradient_check(
    model: &Vgcm<f64>,
    video: &Video<f64>,
    k: usize,
    epsilon: f64,
    coordinates: usize,
    seed: u64,
    weights: &LossWeights,
    gate: SimilarityGate,
) -> Result<GradCheck> {
    let eps = if (1e-7..=1e-4).contains(&epsilon) {
        epsilon
    } else {
        let c = epsilon.clamp(1e-7, 1e-4);
        warn!("epsilon {epsilon} outside [1e-7, 1e-4], using {c}");
        c
    };
    // the graph reads parameters from `params`, the model only supplies layout
    let loss_of = |params: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(params);
        let vars = pair_loss(model, &mut g, video, k, weights, gate, &mut Mode::Eval)?;
        Ok(g.value(vars.total).item())
    };

    let mut analytic = model.params.zeros_like();
    {
        let mut g = Graph::new(&model.params);
        let vars = pair_loss(model, &mut g, video, k, weights, gate, &mut Mode::Eval)?;
        let grads = g.backward(vars.total);
        g.accumulate_param_grads(&grads, &mut analytic);
    }

    let mut all = Vec::new();
    let mut nonzero = Vec::new();
    for ((id, _, p), g) in model.params.iter().zip(analytic.iter()) {
        for j in 0..p.len() {
            all.push((id, j));
            if g.as_slice()[j] != 0.0 {
                nonzero.push((id, j));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nonzero.shuffle(&mut rng);
    let mut picked: Vec<_> = nonzero.into_iter().take(coordinates / 2).collect();
    while picked.len() < coordinates.min(all.len()) {
        picked.push(all[rng.random_range(0..all.len())]);
    }

    let mut params = model.params.clone();
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    for &(id, j) in &picked {
        let x = params.get(id).as_slice()[j];
        let mut at = |h: f64| -> Result<f64> {
            params.get_mut(id).as_mut_slice()[j] = x + h;
            loss_of(&params)
        };
        let (up, down) = (at(eps)?, at(-eps)?);
        let (up2, down2) = (at(2.0 * eps)?, at(-2.0 * eps)?);
        params.get_mut(id).as_mut_slice()[j] = x;
        let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * eps);
        let a = analytic.get(id).as_slice()[j];
        let e = rel_error(a, numeric);
        if worst.is_none() || e > max_rel_error {
            max_rel_error = e;
            worst = Some((id, j, a, numeric));
        }
    }
    Ok(GradCheck { max_rel_error, coordinates: picked.len(), epsilon: eps, worst })
}
