mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vgcm::annotations::{Video, VideoSample, DEFAULT_MAX_LEN, MASK};
use vgcm::causal::CausalConfig;
use vgcm::eval::{
    accuracy, baseline_diagrams, baseline_relations, build_diagram, diagrams_from_json, diagrams_to_json, perturb_dataset,
    predict_relations, shd, Baseline, CausalDiagram, Perturbation,
};
use vgcm::Error;

fn random_diagram(n: usize, rng: &mut ChaCha8Rng) -> CausalDiagram {
    let mut d = CausalDiagram::new(n);
    for j in 2..=n {
        for i in 1..j {
            d.set(i, j, rng.random_range(0..2));
        }
    }
    d
}

#[test]
fn shd_equals_pairwise_mismatch_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let (a, b) = (random_diagram(n, &mut rng), random_diagram(n, &mut rng));
        let mut brute = 0;
        for i in 1..=n {
            for j in i + 1..=n {
                brute += usize::from(a.get(i, j) != b.get(i, j));
            }
        }
        assert_eq!(shd(&a, &b).unwrap(), brute);
    }
    assert!(matches!(shd(&CausalDiagram::new(3), &CausalDiagram::new(4)), Err(Error::Size(_))));
}

#[test]
fn diagrams_survive_json() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ds: Vec<CausalDiagram> = (2..8).map(|n| random_diagram(n, &mut rng)).collect();
    let ids: Vec<String> = (0..ds.len()).map(|i| format!("v{i}")).collect();
    let back = diagrams_from_json(&diagrams_to_json(&ids, &ds)).unwrap();
    assert_eq!(back.into_iter().map(|(_, d)| d).collect::<Vec<_>>(), ds);
}

fn direct_prefix(s: &VideoSample, j: usize) -> VideoSample {
    VideoSample {
        video_id: s.video_id.clone(),
        duration: s.duration,
        timestamps: s.timestamps[..j].to_vec(),
        sentences: s.sentences[..j].to_vec(),
        relation: vec![0; j - 1],
        cot: vec![],
        existence: if s.existence.is_empty() { vec![] } else { s.existence[..j - 1].to_vec() },
    }
}

#[test]
fn diagram_columns_match_direct_predictions() {
    let mut seen = 0;
    for seed in 0..5 {
        let toy = common::toy::<f32>(100 + seed, 8, 2, 10, CausalConfig::default());
        let split = common::synth_split(100 + seed, 10, 4, 7);
        for (v, frames) in toy.data.videos.iter().zip(&split.features) {
            let n = v.num_events();
            let d = build_diagram(&toy.model, v, &toy.vocab, DEFAULT_MAX_LEN).unwrap();
            assert_eq!(d.column(n), &predict_relations(&toy.model, v).unwrap()[..]);
            for j in 2..n {
                let direct = Video::new(direct_prefix(&v.sample, j), frames, &toy.vocab, DEFAULT_MAX_LEN).unwrap();
                assert_eq!(d.column(j), &predict_relations(&toy.model, &direct).unwrap()[..], "{} j={j}", v.sample.video_id);
            }
            seen += 1;
        }
    }
    assert_eq!(seen, 50);
}

#[test]
fn flip_labels_counts() {
    let split = common::synth_split(8, 100, 4, 6);
    let same = perturb_dataset(&split, Perturbation::FlipLabels { ratio: 0.0 }, 1).unwrap();
    assert_eq!(same, split);
    let flipped = perturb_dataset(&split, Perturbation::FlipLabels { ratio: 0.5 }, 1).unwrap();
    let mut changed = 0;
    for (a, b) in split.samples.iter().zip(&flipped.samples) {
        let diff = a.relation.iter().zip(&b.relation).filter(|(x, y)| x != y).count();
        assert!(diff <= 1);
        changed += diff;
        let mut rest = b.clone();
        rest.relation = a.relation.clone();
        assert_eq!(&rest, a);
    }
    assert_eq!(changed, 50);
    assert_eq!(flipped.features, split.features);
    assert_eq!(perturb_dataset(&split, Perturbation::FlipLabels { ratio: 0.5 }, 1).unwrap(), flipped);
}

#[test]
fn mask_words_hits_exactly_n_tokens() {
    let mut split = common::synth_split(9, 3, 4, 4);
    split.samples[0].sentences[0] = "a b c d e f g h i j k l m".into();
    let masked = perturb_dataset(&split, Perturbation::MaskWords { n: 8 }, 4).unwrap();
    let words: Vec<&str> = masked.samples[0].sentences[0].split_whitespace().collect();
    assert_eq!(words.len(), 13);
    assert_eq!(words.iter().filter(|w| **w == vgcm::eval::MASK_WORD).count(), 8);
    let vocab = split.vocabulary(64);
    assert_eq!(vocab.tokenize(&masked.samples[0].sentences[0], 13).iter().filter(|&&t| t == MASK).count(), 8);
    assert_eq!(masked.features, split.features);
}

#[test]
fn mask_frames_zeroes_n_rows_per_event() {
    let split = common::synth_split(10, 4, 4, 5);
    let masked = perturb_dataset(&split, Perturbation::MaskFrames { n: 2 }, 5).unwrap();
    for (a, b) in split.features.iter().zip(&masked.features) {
        let zeroed = (0..a.rows()).filter(|&i| a.row(i) != b.row(i)).count();
        let all_zero = (0..b.rows()).filter(|&i| b.row(i).iter().all(|&x| x == 0.0)).count();
        assert!(zeroed <= all_zero);
        assert!(all_zero >= 2 * 4);
    }
    assert_eq!(masked.samples, split.samples);
}

proptest! {
    #[test]
    fn guess_all_baselines_complement(seed in 0u64..10_000, videos in 1usize..40) {
        let split = common::synth_split(seed, videos, 4, 9);
        let gts: Vec<Vec<u8>> = split.samples.iter().map(|s| s.relation.clone()).collect();
        let on = accuracy(&baseline_relations(&Baseline::AllCausal, &split.samples), &gts).unwrap();
        let off = accuracy(&baseline_relations(&Baseline::AllNoncausal, &split.samples), &gts).unwrap();
        prop_assert_eq!(on + off, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = baseline_diagrams(&Baseline::AllCausal, &split.samples);
        let empty = baseline_diagrams(&Baseline::AllNoncausal, &split.samples);
        for ((s, a), b) in split.samples.iter().zip(&full).zip(&empty) {
            let gt = random_diagram(s.num_events(), &mut rng);
            let n = s.num_events();
            prop_assert_eq!(shd(a, &gt).unwrap() + shd(b, &gt).unwrap(), n * (n - 1) / 2);
        }
    }

    #[test]
    fn random_baseline_is_seeded(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let split = common::synth_split(1, 5, 4, 6);
        let mode = Baseline::Random { p, seed };
        prop_assert_eq!(baseline_relations(&mode, &split.samples), baseline_relations(&mode, &split.samples));
        let zero = baseline_relations(&Baseline::Random { p: 0.0, seed }, &split.samples);
        prop_assert!(zero.iter().flatten().all(|&x| x == 0));
    }

    #[test]
    fn perturbation_is_deterministic(seed in any::<u64>(), ratio in 0.0f64..=1.0) {
        let split = common::synth_split(2, 10, 4, 6);
        let mode = Perturbation::FlipLabels { ratio };
        prop_assert_eq!(perturb_dataset(&split, mode, seed).unwrap(), perturb_dataset(&split, mode, seed).unwrap());
    }
}
