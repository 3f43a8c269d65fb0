//! Tiny models and plain-`f64` reference arithmetic for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotations::{Video, DEFAULT_MAX_LEN, PAD, UNK};
use crate::autodiff::ParamStore;
use crate::causal::CausalConfig;
use crate::model::{ModelConfig, Vgcm};
use crate::nn::{Linear, MultiHeadAttention};
use crate::synth::{generate_dataset, SynthConfig};
use crate::tensor::Matrix;

pub struct Tiny {
    pub model: Vgcm<f64>,
    pub video: Video<f64>,
}

/// A `d`-wide model with every parameter (biases and norms included) jittered,
/// plus one synthetic video of `events` events.
pub fn tiny(d: usize, heads: usize, events: usize, seed: u64) -> Tiny {
    let sc = SynthConfig {
        train_videos: 1,
        test_videos: 1,
        min_events: events,
        max_events: events,
        feature_dim: 3,
        frames_per_event: 2,
        seed,
        ..SynthConfig::default()
    };
    let data = generate_dataset(&sc).unwrap();
    let vocab = data.train.vocabulary(64);
    let video = data.train.to_dataset::<f64>(&vocab, DEFAULT_MAX_LEN).unwrap().videos.remove(0);
    let config = ModelConfig {
        d_model: d,
        attention_heads: heads,
        encoder_layers: 1,
        decoder_layers: 1,
        vocab_size: vocab.len(),
        feature_dim: 3,
        max_events: events + 1,
        ..ModelConfig::default()
    };
    let mut model = Vgcm::new(config, CausalConfig::BOTH, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for m in model.params.values_mut() {
        let data: Vec<f64> = m.as_slice().iter().map(|&x| x + rng.random_range(-0.3..0.3)).collect();
        *m = Matrix::from_vec(m.rows(), m.cols(), data);
    }
    Tiny { model, video }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `-log softmax(logits)[target]`.
pub fn nll(logits: &[f64], target: usize) -> f64 {
    -softmax(logits)[target].ln()
}

pub fn lin(p: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
    let (w, b) = (p.get(l.weight), p.get(l.bias));
    assert_eq!(w.rows(), x.len());
    (0..w.cols()).map(|j| b.get(0, j) + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>()).collect()
}

/// Single-head attention of each query row over `kv`.
pub fn mha(p: &ParamStore<f64>, a: &MultiHeadAttention, queries: &[Vec<f64>], kv: &[Vec<f64>]) -> Vec<Vec<f64>> {
    assert_eq!(a.heads, 1);
    let ks: Vec<Vec<f64>> = kv.iter().map(|x| lin(p, &a.key, x)).collect();
    let vs: Vec<Vec<f64>> = kv.iter().map(|x| lin(p, &a.value, x)).collect();
    queries
        .iter()
        .map(|q| {
            let q = lin(p, &a.query, q);
            let scale = (q.len() as f64).sqrt();
            let w = softmax(&ks.iter().map(|k| dot(&q, k) / scale).collect::<Vec<_>>());
            let mut mixed = vec![0.0; q.len()];
            for (wj, v) in w.iter().zip(&vs) {
                for (m, x) in mixed.iter_mut().zip(v) {
                    *m += wj * x;
                }
            }
            lin(p, &a.output, &mixed)
        })
        .collect()
}

pub fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Mean token embedding over non-PAD ids, out-of-range ids read as UNK.
pub fn text_mean(model: &Vgcm<f64>, tokens: &[u32]) -> Vec<f64> {
    let table = model.params.get(model.layout().tokens);
    let ids: Vec<usize> = tokens
        .iter()
        .filter(|&&t| t != PAD)
        .map(|&t| if (t as usize) < model.config.vocab_size { t as usize } else { UNK as usize })
        .collect();
    let d = table.cols();
    if ids.is_empty() {
        return vec![0.0; d];
    }
    (0..d).map(|j| ids.iter().map(|&i| table.get(i, j)).sum::<f64>() / ids.len() as f64).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{a:?} vs {b:?}");
    }
}
