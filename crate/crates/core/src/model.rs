//! The two-stream masking model.
//!
//! Every event is pooled to one token (mean frame feature ⊕ mean caption
//! embedding, projected to `d_model`). The premise tokens plus a learned
//! result-query token go through a transformer encoder and a weight-shared
//! decoder; the query slot of the decoder output is the predicted result
//! representation. The relation head compares the masked and unmasked
//! predictions against the encoded true result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{mask_event, Event, Video, DEFAULT_MAX_LEN, PAD, UNK};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::causal::CausalConfig;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mode, MultiHeadAttention, ParamBuilder, Stack};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub dropout: f64,
    pub feature_dim: usize,
    /// Number of positional slots: premises plus the result query.
    pub max_events: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 4,
            vocab_size: 8192,
            max_caption_len: DEFAULT_MAX_LEN,
            dropout: 0.1,
            feature_dim: 32,
            max_events: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.attention_heads == 0 || self.d_model % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of attention_heads {}",
                self.d_model, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.vocab_size <= UNK as usize || self.max_caption_len == 0 || self.feature_dim == 0 || self.max_events < 2 {
            return Err(Error::Config("vocab_size, max_caption_len, feature_dim and max_events must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub(crate) tokens: ParamId,
    pub(crate) event_proj: Linear,
    pub(crate) query: ParamId,
    pub(crate) positions: ParamId,
    pub(crate) encoder: Stack,
    pub(crate) decoder: Stack,
    pub(crate) caption_positions: ParamId,
    pub(crate) caption_out: Linear,
    pub(crate) relation_cross: MultiHeadAttention,
    pub(crate) relation_self: MultiHeadAttention,
    pub(crate) relation_out: Linear,
    pub(crate) do_proj: Linear,
}

impl Layout {
    fn build<T: Scalar>(cfg: &ModelConfig, b: &mut ParamBuilder<'_, T>) -> Self {
        let d = cfg.d_model;
        let h = cfg.attention_heads;
        Self {
            tokens: b.normal("embed.tokens", cfg.vocab_size, d, 0.5),
            event_proj: Linear::new(b, "embed.event", cfg.feature_dim + d, d),
            query: b.normal("slots.query", 1, d, 0.5),
            positions: b.normal("slots.position", cfg.max_events, d, 0.1),
            encoder: Stack::new(b, "encoder", cfg.encoder_layers, d, h),
            decoder: Stack::new(b, "decoder", cfg.decoder_layers, d, h),
            caption_positions: b.normal("caption.position", cfg.max_caption_len, d, 0.5),
            caption_out: Linear::new(b, "caption.out", d, cfg.vocab_size),
            relation_cross: MultiHeadAttention::new(b, "relation.cross", d, h),
            relation_self: MultiHeadAttention::new(b, "relation.self", d, h),
            relation_out: Linear::new(b, "relation.out", 2 * d + 1, 2),
            do_proj: Linear::new(b, "causal.do", 3 * d, d),
        }
    }
}

/// Model parameters plus the structure that interprets them.
#[derive(Clone, Debug)]
pub struct Vgcm<T> {
    pub config: ModelConfig,
    pub causal: CausalConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Everything computed once per video regardless of which premise is masked.
#[derive(Clone, Debug)]
pub struct SharedPass {
    /// Embeddings of all `N` events (unmasked).
    pub event_embs: Vec<Var>,
    /// Embedding of a masked event (identical for every premise).
    pub mask_emb: Var,
    pub f_p: Var,
    pub o_p: Var,
    pub f_p_n: Var,
    pub f_n: Var,
    pub o_n: Var,
    pairwise: Vec<Option<Var>>,
}

impl SharedPass {
    pub fn num_events(&self) -> usize {
        self.event_embs.len()
    }
}

/// Outputs of both streams for one masked premise.
#[derive(Clone, Copy, Debug)]
pub struct StreamOutputs {
    /// Encoded unmasked sequence: `N-1` premise slots plus the query slot.
    pub f_p: Var,
    /// Encoded masked sequence.
    pub f_m: Var,
    pub o_p: Var,
    pub o_m: Var,
    pub o_n: Var,
    /// Query slot of `f_p`.
    pub f_p_n: Var,
    /// Encoder output of the true result event.
    pub f_n: Var,
}

impl<T: Scalar> Vgcm<T> {
    pub fn new(config: ModelConfig, causal: CausalConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let layout = Layout::build(&config, &mut b);
        Ok(Self { config, causal, params: b.finish(), layout })
    }

    /// Rebuilds a model around loaded parameters; names and shapes must match.
    pub fn from_params(config: ModelConfig, causal: CausalConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config, causal, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Shape(format!("expected {} parameters, found {}", fresh.params.len(), params.len())));
        }
        for ((_, want_name, want), (_, name, got)) in fresh.params.iter().zip(params.iter()) {
            if want_name != name || want.shape() != got.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match {want_name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self { params, ..fresh })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn relation_cross(&self) -> &MultiHeadAttention {
        &self.layout.relation_cross
    }

    pub fn relation_self(&self) -> &MultiHeadAttention {
        &self.layout.relation_self
    }

    pub(crate) fn do_proj(&self) -> &Linear {
        &self.layout.do_proj
    }

    #[cfg(test)]
    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    fn token_ids(&self, tokens: &[u32]) -> Vec<usize> {
        let v = self.config.vocab_size;
        tokens
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| if (t as usize) < v { t as usize } else { UNK as usize })
            .collect()
    }

    /// Mean embedding of the non-PAD tokens (zero row if there are none).
    pub fn encode_text(&self, g: &mut Graph<'_, T>, tokens: &[u32]) -> Var {
        let table = g.param(self.layout.tokens);
        let ids = self.token_ids(tokens);
        g.embed_mean(table, &ids)
    }

    fn project_event(&self, g: &mut Graph<'_, T>, visual: Matrix<T>, tokens: &[u32]) -> Var {
        let vis = g.input(visual);
        let text = self.encode_text(g, tokens);
        let both = g.concat_cols(&[vis, text]);
        self.layout.event_proj.forward(g, both)
    }

    /// One `1 × d_model` token per event: mean-pooled frames and caption
    /// embeddings, concatenated and projected.
    pub fn encode_event(&self, g: &mut Graph<'_, T>, event: &Event<T>) -> Result<Var> {
        if event.video_feature.cols() != self.config.feature_dim {
            return Err(Error::Dim(format!(
                "event feature width {} but model expects {}",
                event.video_feature.cols(),
                self.config.feature_dim
            )));
        }
        Ok(self.project_event(g, event.video_feature.mean_rows(), &event.caption_tokens))
    }

    /// Existence-only event: zero visual token plus the given caption.
    pub fn encode_existence(&self, g: &mut Graph<'_, T>, tokens: &[u32]) -> Var {
        self.project_event(g, Matrix::zeros(1, self.config.feature_dim), tokens)
    }

    /// Appends the result query, adds positions, and runs encoder then
    /// decoder. Returns the encoded and decoded sequences.
    pub fn run_slots(&self, g: &mut Graph<'_, T>, slots: &[Var], mode: &mut Mode<'_>) -> Result<(Var, Var)> {
        let len = slots.len() + 1;
        if len > self.config.max_events {
            return Err(Error::Dim(format!("{len} slots exceed max_events {}", self.config.max_events)));
        }
        let query = g.param(self.layout.query);
        let mut seq = slots.to_vec();
        seq.push(query);
        let x = g.concat_rows(&seq);
        let positions = g.param(self.layout.positions);
        let pos_rows: Vec<Var> = (0..len).map(|i| g.row(positions, i)).collect();
        let pos = g.concat_rows(&pos_rows);
        let x = g.add(x, pos);
        let f = self.layout.encoder.forward(g, x, mode);
        let o = self.layout.decoder.forward(g, f, mode);
        Ok((f, o))
    }

    /// Predicted result representation from one or two events.
    pub fn pairwise_predict(&self, g: &mut Graph<'_, T>, events: &[Var], mode: &mut Mode<'_>) -> Result<Var> {
        let (_, o) = self.run_slots(g, events, mode)?;
        Ok(g.row(o, events.len()))
    }

    /// The shared decoder applied to a single token.
    pub fn decode_single(&self, g: &mut Graph<'_, T>, x: Var, mode: &mut Mode<'_>) -> Var {
        self.layout.decoder.forward(g, x, mode)
    }

    pub fn shared_pass(&self, g: &mut Graph<'_, T>, video: &Video<T>, mode: &mut Mode<'_>) -> Result<SharedPass> {
        let n = video.num_events();
        if n < 2 {
            return Err(Error::Index(format!("video {} has {n} events", video.sample.video_id)));
        }
        let event_embs = video.events.iter().map(|e| self.encode_event(g, e)).collect::<Result<Vec<_>>>()?;
        let masked = mask_event(video, 1)?;
        let mask_emb = self.encode_event(g, &masked.events[0])?;
        let (f_p, o_p_seq) = self.run_slots(g, &event_embs[..n - 1], mode)?;
        let o_p = g.row(o_p_seq, n - 1);
        let f_p_n = g.row(f_p, n - 1);
        let (f_red, o_red) = self.run_slots(g, &event_embs[n - 1..], mode)?;
        let f_n = g.row(f_red, 0);
        let o_n = g.row(o_red, 1);
        let mut pairwise = vec![None; n];
        pairwise[n - 1] = Some(o_n);
        Ok(SharedPass { event_embs, mask_emb, f_p, o_p, f_p_n, f_n, o_n, pairwise })
    }

    /// Masked stream for premise `k` (1-based).
    pub fn masked_pass(&self, g: &mut Graph<'_, T>, shared: &SharedPass, k: usize, mode: &mut Mode<'_>) -> Result<(Var, Var)> {
        let n = shared.num_events();
        if k < 1 || k >= n {
            return Err(Error::Index(format!("premise index {k} not in [1, {}]", n - 1)));
        }
        let mut slots = shared.event_embs[..n - 1].to_vec();
        slots[k - 1] = shared.mask_emb;
        let (f_m, o_seq) = self.run_slots(g, &slots, mode)?;
        let o_m = g.row(o_seq, n - 1);
        Ok((f_m, o_m))
    }

    /// Cached single-event prediction `P(e_N | e_j)` for event `j` (1-based).
    pub fn pairwise_cached(&self, g: &mut Graph<'_, T>, shared: &mut SharedPass, j: usize, mode: &mut Mode<'_>) -> Result<Var> {
        if let Some(v) = shared.pairwise[j - 1] {
            return Ok(v);
        }
        let v = self.pairwise_predict(g, &[shared.event_embs[j - 1]], mode)?;
        shared.pairwise[j - 1] = Some(v);
        Ok(v)
    }

    pub fn forward_streams(&self, g: &mut Graph<'_, T>, video: &Video<T>, k: usize, mode: &mut Mode<'_>) -> Result<StreamOutputs> {
        let n = video.num_events();
        if k < 1 || k >= n {
            return Err(Error::Index(format!("premise index {k} not in [1, {}]", n - 1)));
        }
        let shared = self.shared_pass(g, video, mode)?;
        let (f_m, o_m) = self.masked_pass(g, &shared, k, mode)?;
        Ok(StreamOutputs { f_p: shared.f_p, f_m, o_p: shared.o_p, o_m, o_n: shared.o_n, f_p_n: shared.f_p_n, f_n: shared.f_n })
    }

    /// Two relation logits from the (possibly refined) masked output, the
    /// unmasked output and the result output.
    pub fn relation_head(&self, g: &mut Graph<'_, T>, o_m: Var, o_p: Var, o_n: Var) -> Result<Var> {
        let d = self.config.d_model;
        for v in [o_m, o_p, o_n] {
            if g.value(v).shape() != (1, d) {
                return Err(Error::Dim(format!("relation head input {:?}, expected (1, {d})", g.value(v).shape())));
            }
        }
        let queries = g.concat_rows(&[o_m, o_n]);
        let keys = g.concat_rows(&[o_p, o_n]);
        let cross = self.layout.relation_cross.forward(g, queries, keys, keys);
        let cross = g.mean_rows(cross);
        let this = self.layout.relation_self.forward(g, queries, queries, queries);
        let this = g.mean_rows(this);
        let sim = g.cosine(o_p, o_m);
        let features = g.concat_cols(&[cross, this, sim]);
        Ok(self.layout.relation_out.forward(g, features))
    }

    /// Position-wise caption logits, `max_caption_len × vocab_size`.
    pub fn caption_head(&self, g: &mut Graph<'_, T>, o_p: Var) -> Var {
        let pos = g.param(self.layout.caption_positions);
        let h = g.add_row(pos, o_p);
        self.layout.caption_out.forward(g, h)
    }
}

/// Greedy per-position decoding of caption logits.
pub fn greedy_decode<T: Scalar>(logits: &Matrix<T>) -> Vec<u32> {
    (0..logits.rows()).map(|i| argmax(logits.row(i)) as u32).collect()
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Evaluation-mode helpers returning concrete values.
impl<T: Scalar> Vgcm<T> {
    pub fn eval_streams(&self, video: &Video<T>, k: usize) -> Result<StreamValues<T>> {
        let mut g = Graph::new(&self.params);
        let s = self.forward_streams(&mut g, video, k, &mut Mode::Eval)?;
        let take = |v: Var| g.value(v).clone();
        Ok(StreamValues {
            f_p: take(s.f_p),
            f_m: take(s.f_m),
            o_p: take(s.o_p),
            o_m: take(s.o_m),
            o_n: take(s.o_n),
            f_p_n: take(s.f_p_n),
            f_n: take(s.f_n),
        })
    }

    pub fn eval_encode_event(&self, event: &Event<T>) -> Result<Matrix<T>> {
        let mut g = Graph::new(&self.params);
        let v = self.encode_event(&mut g, event)?;
        Ok(g.value(v).clone())
    }

    pub fn eval_pairwise(&self, embeddings: &[Matrix<T>]) -> Result<Matrix<T>> {
        let mut g = Graph::new(&self.params);
        let vars: Vec<Var> = embeddings.iter().map(|e| g.input(e.clone())).collect();
        let v = self.pairwise_predict(&mut g, &vars, &mut Mode::Eval)?;
        Ok(g.value(v).clone())
    }

    pub fn eval_relation_head(&self, o_m: &Matrix<T>, o_p: &Matrix<T>, o_n: &Matrix<T>) -> Result<Matrix<T>> {
        let mut g = Graph::new(&self.params);
        let (a, b, c) = (g.input(o_m.clone()), g.input(o_p.clone()), g.input(o_n.clone()));
        let v = self.relation_head(&mut g, a, b, c)?;
        Ok(g.value(v).clone())
    }

    pub fn eval_caption_head(&self, o_p: &Matrix<T>) -> Matrix<T> {
        let mut g = Graph::new(&self.params);
        let a = g.input(o_p.clone());
        let v = self.caption_head(&mut g, a);
        g.value(v).clone()
    }
}

/// Concrete values of [`StreamOutputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct StreamValues<T> {
    pub f_p: Matrix<T>,
    pub f_m: Matrix<T>,
    pub o_p: Matrix<T>,
    pub o_m: Matrix<T>,
    pub o_n: Matrix<T>,
    pub f_p_n: Matrix<T>,
    pub f_n: Matrix<T>,
}
