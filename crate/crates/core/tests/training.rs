mod common;

use vgcm::annotations::Dataset;
use vgcm::causal::CausalConfig;
use vgcm::training::{metrics_log, train_model, TrainConfig};
use vgcm::Error;

fn quick() -> TrainConfig {
    TrainConfig { epochs: 2, warmup_epochs: 1, batch_size: 2, ..TrainConfig::default() }
}

#[test]
fn identical_runs_give_identical_parameters() {
    let toy = common::toy::<f32>(4, 8, 2, 6, CausalConfig::default());
    let cfg = quick();
    let (a, ma) = train_model(&toy.data, Some(&toy.data), &toy.model.config, CausalConfig::default(), &cfg).unwrap();
    let (b, mb) = train_model(&toy.data, Some(&toy.data), &toy.model.config, CausalConfig::default(), &cfg).unwrap();
    for ((_, _, x), (_, _, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x, y);
    }
    assert_eq!(metrics_log(&ma), metrics_log(&mb));
    let line = ma[0].log_line();
    assert_eq!(line.split('\t').count(), 7);
    assert!(line.starts_with("1\t"));
}

#[test]
fn seed_changes_the_run() {
    let toy = common::toy::<f32>(5, 8, 2, 4, CausalConfig::default());
    let (a, _) = train_model(&toy.data, None, &toy.model.config, CausalConfig::default(), &quick()).unwrap();
    let other = TrainConfig { seed: 7, ..quick() };
    let (b, _) = train_model(&toy.data, None, &toy.model.config, CausalConfig::default(), &other).unwrap();
    assert!(a.params.iter().zip(b.params.iter()).any(|((_, _, x), (_, _, y))| x != y));
}

#[test]
fn empty_training_set_is_rejected() {
    let toy = common::toy::<f32>(6, 8, 2, 1, CausalConfig::default());
    let empty = Dataset::<f32>::default();
    let err = train_model(&empty, None, &toy.model.config, CausalConfig::default(), &quick()).unwrap_err();
    assert!(matches!(err, Error::Empty(_)));
}

#[test]
fn disabling_corrections_only_moves_the_similarity_term() {
    use vgcm::autodiff::Graph;
    use vgcm::nn::Mode;
    use vgcm::training::{pair_loss, LossBreakdown, LossWeights, SimilarityGate};
    let on = common::toy::<f64>(7, 8, 2, 1, CausalConfig::default());
    let mut off_model = on.model.clone();
    off_model.causal = CausalConfig::NONE;
    let v = &on.data.videos[0];
    for k in 2..v.num_events() - 1 {
        let read = |m| {
            let mut g = Graph::new(&on.model.params);
            let vars = pair_loss(m, &mut g, v, k, &LossWeights::default(), SimilarityGate::Causal, &mut Mode::Eval).unwrap();
            LossBreakdown::read(&g, &vars)
        };
        let (a, b) = (read(&on.model), read(&off_model));
        assert_eq!((a.l_c, a.l_v), (b.l_c, b.l_v));
        assert_ne!(a.l_s, b.l_s);
    }
}
