//! Corrections applied to the masked-stream output before relation scoring.
//!
//! Masking premise `k` removes more than `k` itself: the effect of `e_{k-1}`
//! that flowed through `e_k` is lost, and the part of `e_{k+1}`'s effect that
//! needed `e_k` stays behind. Front-door compensation estimates the former,
//! counterfactual removal the latter, and [`refine`] folds both back into the
//! masked output through the shared decoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{SharedPass, StreamOutputs, Vgcm};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::annotations::Video;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalConfig {
    pub enable_front_door: bool,
    pub enable_counterfactual: bool,
}

impl Default for CausalConfig {
    fn default() -> Self {
        Self { enable_front_door: true, enable_counterfactual: true }
    }
}

impl CausalConfig {
    pub const NONE: Self = Self { enable_front_door: false, enable_counterfactual: false };
    pub const BOTH: Self = Self { enable_front_door: true, enable_counterfactual: true };

    pub fn any(&self) -> bool {
        self.enable_front_door || self.enable_counterfactual
    }
}

/// Embeddings feeding the corrections for masked premise `k`.
#[derive(Clone, Debug)]
pub struct CorrectionInputs {
    /// `e_{k-1}`; absent for the first premise.
    pub emb_prev: Option<Var>,
    pub emb_k: Var,
    /// `e_{k+1}`, which is the result event when `k = N-1`.
    pub emb_next: Var,
    pub next_is_result: bool,
    /// Existence-only version of `e_k` (no visual content).
    pub emb_k0: Var,
    pub cot_tokens: Vec<u32>,
    /// Cached `P(e_N | e_k)`.
    pub pred_k: Option<Var>,
    /// Cached `P(e_N | e_{k+1})`.
    pub pred_next: Option<Var>,
}

fn check_width<T: Scalar>(g: &Graph<'_, T>, d: usize, vars: &[Var]) -> Result<()> {
    for &v in vars {
        if g.value(v).shape() != (1, d) {
            return Err(Error::Dim(format!("correction input {:?}, expected (1, {d})", g.value(v).shape())));
        }
    }
    Ok(())
}

/// `F_C = P(e_N|e_k) − P(e_N|do(e_k))`, where the interventional term
/// aggregates cross-attention of `e_k` over `e_{k+1}`, self-attention of
/// `e_k` and the pooled chain-of-thought text. Zero for the first premise.
pub fn front_door_compensation<T: Scalar>(
    model: &Vgcm<T>,
    g: &mut Graph<'_, T>,
    inputs: &CorrectionInputs,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let d = model.d_model();
    check_width(g, d, &[inputs.emb_k, inputs.emb_next, inputs.emb_k0])?;
    if inputs.emb_prev.is_none() {
        return Ok(g.input(Matrix::zeros(1, d)));
    }
    let observed = match inputs.pred_k {
        Some(p) => p,
        None => model.pairwise_predict(g, &[inputs.emb_k], mode)?,
    };
    let cross = model.relation_cross().forward(g, inputs.emb_k, inputs.emb_next, inputs.emb_next);
    let this = model.relation_self().forward(g, inputs.emb_k, inputs.emb_k, inputs.emb_k);
    let cot = model.encode_text(g, &inputs.cot_tokens);
    let joined = g.concat_cols(&[cross, this, cot]);
    let intervened = model.do_proj().forward(g, joined);
    Ok(g.sub(observed, intervened))
}

/// `F_R = P(e_N|e_{k+1}) − P(e_N|e_{k+1})·s` with the compatibility gap
/// `s = σ(⟨e_{k+1}, e_k⟩/√d) − σ(⟨e_{k+1}, e_k⁰⟩/√d)`. Zero when `e_{k+1}`
/// is the result event.
pub fn counterfactual_removal<T: Scalar>(
    model: &Vgcm<T>,
    g: &mut Graph<'_, T>,
    inputs: &CorrectionInputs,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let d = model.d_model();
    check_width(g, d, &[inputs.emb_k, inputs.emb_next, inputs.emb_k0])?;
    if inputs.next_is_result {
        return Ok(g.input(Matrix::zeros(1, d)));
    }
    let observed = match inputs.pred_next {
        Some(p) => p,
        None => model.pairwise_predict(g, &[inputs.emb_next], mode)?,
    };
    let gap = compatibility_gap(g, inputs.emb_next, inputs.emb_k, inputs.emb_k0, d);
    let intervened = g.mul_scalar(observed, gap);
    Ok(g.sub(observed, intervened))
}

fn compatibility_gap<T: Scalar>(g: &mut Graph<'_, T>, next: Var, factual: Var, counterfactual: Var, d: usize) -> Var {
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let a = g.matmul_t(next, factual);
    let a = g.scale(a, scale);
    let a = g.sigmoid(a);
    let b = g.matmul_t(next, counterfactual);
    let b = g.scale(b, scale);
    let b = g.sigmoid(b);
    g.sub(a, b)
}

/// `O'_m = O_m − Dec(F_C) + Dec(F_R)`, evaluated as
/// `O_m + (Dec(F_R) − Dec(F_C))` so equal corrections cancel exactly.
/// A disabled or exactly-zero correction contributes nothing: `Dec(0)` is a
/// parameter-only constant, and with zero-initialised biases every layer
/// norm inside it sees a zero-variance input.
pub fn refine<T: Scalar>(
    model: &Vgcm<T>,
    g: &mut Graph<'_, T>,
    o_m: Var,
    f_c: Option<Var>,
    f_r: Option<Var>,
    mode: &mut Mode<'_>,
) -> Var {
    let active = |g: &Graph<'_, T>, f: Option<Var>| f.filter(|&v| g.value(v).as_slice().iter().any(|&x| x != T::zero()));
    let (f_c, f_r) = (active(g, f_c), active(g, f_r));
    if let (Some(c), Some(r)) = (f_c, f_r) {
        if g.value(c) == g.value(r) {
            return o_m;
        }
    }
    let dc = f_c.map(|f| model.decode_single(g, f, mode));
    let dr = f_r.map(|f| model.decode_single(g, f, mode));
    match (dc, dr) {
        (None, None) => o_m,
        (Some(c), None) => g.sub(o_m, c),
        (None, Some(r)) => g.add(o_m, r),
        (Some(c), Some(r)) => {
            let delta = g.sub(r, c);
            g.add(o_m, delta)
        }
    }
}

/// Builds the correction inputs for premise `k` from a shared pass.
pub fn correction_inputs<T: Scalar>(
    model: &Vgcm<T>,
    g: &mut Graph<'_, T>,
    shared: &mut SharedPass,
    video: &Video<T>,
    k: usize,
    mode: &mut Mode<'_>,
) -> Result<CorrectionInputs> {
    let n = shared.num_events();
    if k < 1 || k >= n {
        return Err(Error::Index(format!("premise index {k} not in [1, {}]", n - 1)));
    }
    let cfg = model.causal;
    let emb_k0 = model.encode_existence(g, &video.existence_tokens[k - 1]);
    let next_is_result = k + 1 == n;
    let pred_k = if cfg.enable_front_door && k > 1 { Some(model.pairwise_cached(g, shared, k, mode)?) } else { None };
    let pred_next =
        if cfg.enable_counterfactual && !next_is_result { Some(model.pairwise_cached(g, shared, k + 1, mode)?) } else { None };
    Ok(CorrectionInputs {
        emb_prev: (k > 1).then(|| shared.event_embs[k - 2]),
        emb_k: shared.event_embs[k - 1],
        emb_next: shared.event_embs[k],
        next_is_result,
        emb_k0,
        cot_tokens: video.cot_tokens[k - 1].clone(),
        pred_k,
        pred_next,
    })
}

/// Everything computed for one (video, premise) pair.
#[derive(Clone, Copy, Debug)]
pub struct PairOutputs {
    pub streams: StreamOutputs,
    pub f_c: Option<Var>,
    pub f_r: Option<Var>,
    /// The refined masked output (equal to `streams.o_m` with corrections off).
    pub o_refined: Var,
    pub logits: Var,
}

/// Masked stream, enabled corrections, refinement and relation logits for premise `k`.
pub fn forward_pair<T: Scalar>(
    model: &Vgcm<T>,
    g: &mut Graph<'_, T>,
    shared: &mut SharedPass,
    video: &Video<T>,
    k: usize,
    mode: &mut Mode<'_>,
) -> Result<PairOutputs> {
    let (f_m, o_m) = model.masked_pass(g, shared, k, mode)?;
    let streams = StreamOutputs {
        f_p: shared.f_p,
        f_m,
        o_p: shared.o_p,
        o_m,
        o_n: shared.o_n,
        f_p_n: shared.f_p_n,
        f_n: shared.f_n,
    };
    let cfg = model.causal;
    let (f_c, f_r) = if cfg.any() {
        let inputs = correction_inputs(model, g, shared, video, k, mode)?;
        let f_c = if cfg.enable_front_door { Some(front_door_compensation(model, g, &inputs, mode)?) } else { None };
        let f_r = if cfg.enable_counterfactual { Some(counterfactual_removal(model, g, &inputs, mode)?) } else { None };
        (f_c, f_r)
    } else {
        (None, None)
    };
    let o_refined = refine(model, g, o_m, f_c, f_r, mode);
    let logits = model.relation_head(g, o_refined, shared.o_p, shared.o_n)?;
    Ok(PairOutputs { streams, f_c, f_r, o_refined, logits })
}
