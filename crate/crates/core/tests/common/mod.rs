#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vgcm::annotations::{Dataset, Split, Vocabulary, DEFAULT_MAX_LEN};
use vgcm::causal::CausalConfig;
use vgcm::model::{ModelConfig, Vgcm};
use vgcm::synth::{generate_dataset, SynthConfig};
use vgcm::{Matrix, Scalar};

pub fn synth_split(seed: u64, videos: usize, min_events: usize, max_events: usize) -> Split {
    let cfg = SynthConfig {
        train_videos: videos,
        test_videos: 1,
        min_events,
        max_events,
        feature_dim: 6,
        frames_per_event: 3,
        seed,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg).unwrap().train
}

pub struct Toy<T> {
    pub model: Vgcm<T>,
    pub data: Dataset<T>,
    pub vocab: Vocabulary,
}

/// Untrained model with jittered parameters over a small synthetic split.
pub fn toy<T: Scalar>(seed: u64, d: usize, heads: usize, videos: usize, causal: CausalConfig) -> Toy<T> {
    let split = synth_split(seed, videos, 4, 7);
    let vocab = split.vocabulary(256);
    let data = split.to_dataset::<T>(&vocab, DEFAULT_MAX_LEN).unwrap();
    let config = ModelConfig {
        d_model: d,
        attention_heads: heads,
        encoder_layers: 1,
        decoder_layers: 1,
        vocab_size: vocab.len(),
        feature_dim: 6,
        max_events: 8,
        ..ModelConfig::default()
    };
    let mut model = Vgcm::<T>::new(config, causal, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(!seed);
    for m in model.params.values_mut() {
        let data = m.as_slice().iter().map(|&x| x + T::lit(rng.random_range(-0.2..0.2))).collect();
        *m = Matrix::from_vec(m.rows(), m.cols(), data);
    }
    Toy { model, data, vocab }
}
