//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. The training criteria (8 to 11) share 21 full
//! synthetic runs, so expect the whole binary to take roughly half an hour
//! on one core.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vgcm::annotations::{mask_event, Split, Video, VideoSample, DEFAULT_MAX_LEN, MASK};
use vgcm::autodiff::Graph;
use vgcm::causal::{counterfactual_removal, forward_pair, front_door_compensation, refine, CausalConfig, CorrectionInputs};
use vgcm::checkpoint::Checkpoint;
use vgcm::cli::{predict_split, train_run, RunConfig};
use vgcm::eval::{
    accuracy, baseline_diagrams, baseline_relations, build_diagram, perturb_dataset, predict_relations, shd, Baseline,
    CausalDiagram, Perturbation,
};
use vgcm::model::{ModelConfig, Vgcm};
use vgcm::nn::Mode;
use vgcm::synth::{generate_dataset, SynthConfig, SynthDataset};
use vgcm::training::{gradient_check, LossWeights, SimilarityGate, DEFAULT_SEEDS};
use vgcm::Matrix;

struct Tally {
    failed: Vec<usize>,
}

impl Tally {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        println!("[{}] {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

fn masking_semantics() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    let mut ok = true;
    for seed in 0..10 {
        let toy = common::toy::<f32>(seed, 4, 2, 10, CausalConfig::default());
        for v in &toy.data.videos {
            let k = rng.random_range(1..v.num_events());
            let view = mask_event(v, k).unwrap();
            for (i, (m, e)) in view.events.iter().zip(&v.events).enumerate() {
                ok &= if i + 1 == k {
                    m.video_feature.shape() == e.video_feature.shape()
                        && m.video_feature.as_slice().iter().all(|&x| x == 0.0)
                        && m.caption_tokens == vec![MASK; DEFAULT_MAX_LEN]
                } else {
                    m == e
                };
            }
            checked += 1;
        }
    }
    (ok, format!("{checked} samples"))
}

fn weight_sharing() -> (bool, String) {
    let mut ok = true;
    for seed in 0..20 {
        let toy = common::toy::<f32>(1000 + seed, 8, 2, 1, CausalConfig::default());
        let v = &toy.data.videos[0];
        let mut g = Graph::new(&toy.model.params);
        let mut shared = toy.model.shared_pass(&mut g, v, &mut Mode::Eval).unwrap();
        for k in 1..v.num_events() {
            shared.mask_emb = shared.event_embs[k - 1];
            let (_, o_m) = toy.model.masked_pass(&mut g, &shared, k, &mut Mode::Eval).unwrap();
            ok &= g.value(o_m) == g.value(shared.o_p);
        }
    }
    (ok, "20 models, bit-exact O_p == O_m".into())
}

fn gradients() -> (bool, String) {
    let start = Instant::now();
    let data = generate_dataset(&SynthConfig { train_videos: 1, test_videos: 1, ..SynthConfig::default() }).unwrap();
    let vocab = data.train.vocabulary(8192);
    let video = data.train.to_dataset::<f64>(&vocab, DEFAULT_MAX_LEN).unwrap().videos.remove(0);
    let mut worst = 0.0f64;
    let mut coords = usize::MAX;
    for d in [4, 8] {
        let cfg = ModelConfig { d_model: d, attention_heads: 2, vocab_size: vocab.len(), ..ModelConfig::default() };
        let model = Vgcm::<f64>::new(cfg, CausalConfig::BOTH, d as u64).unwrap();
        for k in 1..video.num_events() {
            let gc = gradient_check(&model, &video, k, 1e-4, 200, k as u64, &LossWeights::default(), SimilarityGate::Noncausal)
                .unwrap();
            worst = worst.max(gc.max_rel_error);
            coords = coords.min(gc.coordinates);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (worst < 1e-4 && coords >= 200 && secs < 60.0, format!("max rel error {worst:.2e}, {coords} coordinates per check, {secs:.1}s"))
}

fn correction_identities() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ok = true;
    let trials = 200;
    for t in 0..trials {
        let toy = common::toy::<f64>(t, 4, 2, 1, CausalConfig::default());
        let m = &toy.model;
        let mut g = Graph::new(&m.params);
        let mut rand_row = |g: &mut Graph<'_, f64>| g.input(Matrix::row_vector((0..4).map(|_| rng.random_range(-3.0..3.0)).collect()));
        let (ek, enext, ek0, pk, pnext, om) =
            (rand_row(&mut g), rand_row(&mut g), rand_row(&mut g), rand_row(&mut g), rand_row(&mut g), rand_row(&mut g));
        let base = CorrectionInputs {
            emb_prev: None,
            emb_k: ek,
            emb_next: enext,
            next_is_result: false,
            emb_k0: ek0,
            cot_tokens: toy.data.videos[0].cot_tokens[0].clone(),
            pred_k: Some(pk),
            pred_next: Some(pnext),
        };
        let f_c = front_door_compensation(m, &mut g, &base, &mut Mode::Eval).unwrap();
        ok &= g.value(f_c).as_slice().iter().all(|&x| x == 0.0);
        let last = CorrectionInputs { next_is_result: true, ..base.clone() };
        let f_r = counterfactual_removal(m, &mut g, &last, &mut Mode::Eval).unwrap();
        ok &= g.value(f_r).as_slice().iter().all(|&x| x == 0.0);
        let same = CorrectionInputs { emb_k0: ek, ..base.clone() };
        let f_r = counterfactual_removal(m, &mut g, &same, &mut Mode::Eval).unwrap();
        ok &= g.value(f_r) == g.value(pnext);
        let copy = g.input(g.value(pk).clone());
        let out = refine(m, &mut g, om, Some(pk), Some(copy), &mut Mode::Eval);
        ok &= g.value(out) == g.value(om);
    }
    (ok, format!("{trials} random cases, all exact"))
}

fn random_diagram(n: usize, rng: &mut ChaCha8Rng) -> CausalDiagram {
    let mut d = CausalDiagram::new(n);
    for j in 2..=n {
        for i in 1..j {
            d.set(i, j, rng.random_range(0..2));
        }
    }
    d
}

fn shd_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let (a, b) = (random_diagram(n, &mut rng), random_diagram(n, &mut rng));
        let brute: usize = (1..=n).flat_map(|i| (i + 1..=n).map(move |j| (i, j))).filter(|&(i, j)| a.get(i, j) != b.get(i, j)).count();
        ok &= shd(&a, &b).unwrap() == brute;
    }
    (ok, "1000 random pairs, n <= 6".into())
}

fn baseline_identities(sets: &[(&str, &Split, Vec<CausalDiagram>)]) -> (bool, String) {
    let mut ok = true;
    let mut videos = 0;
    for (_, split, gt) in sets {
        let gts: Vec<Vec<u8>> = split.samples.iter().map(|s| s.relation.clone()).collect();
        let on = accuracy(&baseline_relations(&Baseline::AllCausal, &split.samples), &gts).unwrap();
        let off = accuracy(&baseline_relations(&Baseline::AllNoncausal, &split.samples), &gts).unwrap();
        ok &= on + off == 1.0;
        let full = baseline_diagrams(&Baseline::AllCausal, &split.samples);
        let empty = baseline_diagrams(&Baseline::AllNoncausal, &split.samples);
        for ((a, b), t) in full.iter().zip(&empty).zip(gt) {
            let n = t.n_events();
            ok &= shd(a, t).unwrap() + shd(b, t).unwrap() == n * (n - 1) / 2;
            videos += 1;
        }
    }
    (ok, format!("{} datasets, {videos} videos", sets.len()))
}

fn prefix(s: &VideoSample, j: usize) -> VideoSample {
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

fn diagram_consistency() -> (bool, String) {
    let mut ok = true;
    let mut seen = 0;
    for seed in 0..5 {
        let toy = common::toy::<f32>(200 + seed, 8, 2, 10, CausalConfig::default());
        let split = common::synth_split(200 + seed, 10, 4, 7);
        for (v, frames) in toy.data.videos.iter().zip(&split.features) {
            let n = v.num_events();
            let d = build_diagram(&toy.model, v, &toy.vocab, DEFAULT_MAX_LEN).unwrap();
            ok &= d.column(n) == &predict_relations(&toy.model, v).unwrap()[..];
            for j in 2..n {
                let direct = Video::new(prefix(&v.sample, j), frames, &toy.vocab, DEFAULT_MAX_LEN).unwrap();
                ok &= d.column(j) == &predict_relations(&toy.model, &direct).unwrap()[..];
            }
            seen += 1;
        }
    }
    (ok, format!("{seen} samples"))
}

struct Run {
    accuracy: f64,
    secs: f64,
    ckpt: Checkpoint<f32>,
}

fn train_and_score(train: &Split, test: &Split, seed: u64, causal: CausalConfig) -> Run {
    let mut cfg = RunConfig { causal, ..RunConfig::default() };
    cfg.train.seed = seed;
    let start = Instant::now();
    let (ckpt, _) = train_run(train, None, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (preds, _) = predict_split(&ckpt, test, false).unwrap();
    let gts: Vec<Vec<u8>> = test.samples.iter().map(|s| s.relation.clone()).collect();
    let accuracy = accuracy(&preds, &gts).unwrap();
    Run { accuracy, secs, ckpt }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

/// Mean cosine distance between refined masked outputs and `O_p`, split by label.
fn similarity_division(ckpt: &Checkpoint<f32>, test: &Split) -> (f64, f64) {
    let data = test.to_dataset::<f32>(&ckpt.vocab, ckpt.model.config.max_caption_len).unwrap();
    let mut sums = [(0.0, 0usize); 2];
    for v in &data.videos {
        let mut g = Graph::new(&ckpt.model.params);
        let mut shared = ckpt.model.shared_pass(&mut g, v, &mut Mode::Eval).unwrap();
        for k in 1..v.num_events() {
            let out = forward_pair(&ckpt.model, &mut g, &mut shared, v, k, &mut Mode::Eval).unwrap();
            let a: Vec<f64> = g.value(out.o_refined).as_slice().iter().map(|&x| x as f64).collect();
            let b: Vec<f64> = g.value(shared.o_p).as_slice().iter().map(|&x| x as f64).collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let norm = (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|x| x * x).sum::<f64>()).sqrt();
            let slot = &mut sums[v.sample.relation[k - 1] as usize];
            slot.0 += 1.0 - dot / norm;
            slot.1 += 1;
        }
    }
    (sums[1].0 / sums[1].1 as f64, sums[0].0 / sums[0].1 as f64)
}

fn snapshot(dir: &Path, prefix: &str, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let name = format!("{prefix}{}", p.file_name().unwrap().to_string_lossy());
        if p.is_dir() {
            snapshot(&p, &format!("{name}/"), out);
        } else {
            out.insert(name, fs::read(&p).unwrap());
        }
    }
}

fn determinism() -> (bool, String) {
    let settings = "synth.train_videos = 40\nsynth.test_videos = 10\ntrain.epochs = 2\ntrain.warmup_epochs = 1\n";
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let wd = dir.path().to_str().unwrap().to_owned();
        fs::write(dir.path().join("run.txt"), settings).unwrap();
        let base = ["vgcm", "--workdir", wd.as_str(), "--config", "run.txt"];
        let steps: [&[&str]; 3] = [
            &["synth", "--out", "data"],
            &["train", "--data", "data", "--out", "run"],
            &["eval", "--data", "data", "--checkpoint", "run/model.ckpt", "--out", "report.json"],
        ];
        for step in steps {
            let args: Vec<&str> = base.iter().chain(step.iter()).copied().collect();
            assert_eq!(vgcm::cli::run(args), 0, "{step:?}");
        }
        let mut files = BTreeMap::new();
        snapshot(dir.path(), "", &mut files);
        outputs.push(files);
    }
    let n = outputs[0].len();
    let same = outputs[0] == outputs[1];
    (same && n > 0, format!("synth + train + eval, {n} files byte-identical across two runs"))
}

fn flip_counts(original: &Split, flipped: &Split, ratio: f64) -> bool {
    let want = (ratio * original.len() as f64).floor() as usize;
    let mut changed = 0;
    for (a, b) in original.samples.iter().zip(&flipped.samples) {
        match a.relation.iter().zip(&b.relation).filter(|(x, y)| x != y).count() {
            0 => {}
            1 => changed += 1,
            _ => return false,
        }
    }
    changed == want
}

fn main() {
    let mut tally = Tally { failed: Vec::new() };
    let (p, d) = masking_semantics();
    tally.record(1, "masking semantics", p, d);
    let (p, d) = weight_sharing();
    tally.record(2, "weight-sharing identity", p, d);
    let (p, d) = gradients();
    tally.record(3, "gradient check", p, d);
    let (p, d) = correction_identities();
    tally.record(4, "causal-correction identities", p, d);
    let (p, d) = shd_oracle();
    tally.record(5, "SHD oracle equivalence", p, d);

    let datasets: Vec<SynthDataset> =
        DEFAULT_SEEDS.iter().map(|&seed| generate_dataset(&SynthConfig { seed, ..SynthConfig::default() }).unwrap()).collect();
    let truth: Vec<Vec<CausalDiagram>> =
        datasets.iter().map(|d| d.diagrams().unwrap().into_iter().skip(d.train.len()).collect()).collect();
    let sets: Vec<(&str, &Split, Vec<CausalDiagram>)> =
        datasets.iter().zip(&truth).map(|(d, t)| ("test", &d.test, t.clone())).collect();
    let (p, d) = baseline_identities(&sets);
    tally.record(6, "baseline identities", p, d);
    let (p, d) = diagram_consistency();
    tally.record(7, "diagram consistency", p, d);

    let configs = [
        ("both", CausalConfig::BOTH),
        ("none", CausalConfig::NONE),
        ("front-door", CausalConfig { enable_front_door: true, enable_counterfactual: false }),
        ("counterfactual", CausalConfig { enable_front_door: false, enable_counterfactual: true }),
    ];
    let ratios = [0.2, 0.4, 0.6];
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut flip_acc = vec![Vec::new(); ratios.len()];
    let mut default_secs = 0.0;
    let mut models = Vec::new();
    let mut counts_ok = true;
    let mut guess = (Vec::new(), Vec::new());
    for (&seed, data) in DEFAULT_SEEDS.iter().zip(&datasets) {
        let gts: Vec<Vec<u8>> = data.test.samples.iter().map(|s| s.relation.clone()).collect();
        guess.0.push(accuracy(&baseline_relations(&Baseline::AllCausal, &data.test.samples), &gts).unwrap());
        guess.1.push(accuracy(&baseline_relations(&Baseline::AllNoncausal, &data.test.samples), &gts).unwrap());
        for (name, causal) in configs {
            let run = train_and_score(&data.train, &data.test, seed, causal);
            eprintln!("seed {seed} {name}: accuracy {:.4} in {:.0}s", run.accuracy, run.secs);
            acc.entry(name).or_default().push(run.accuracy);
            if name == "both" {
                default_secs += run.secs;
                models.push(run.ckpt);
            }
        }
        for (i, &ratio) in ratios.iter().enumerate() {
            let flipped = perturb_dataset(&data.train, Perturbation::FlipLabels { ratio }, seed).unwrap();
            counts_ok &= flip_counts(&data.train, &flipped, ratio);
            let run = train_and_score(&flipped, &data.test, seed, CausalConfig::BOTH);
            eprintln!("seed {seed} flip {ratio}: accuracy {:.4} in {:.0}s", run.accuracy, run.secs);
            flip_acc[i].push(run.accuracy);
        }
    }

    let both = &acc["both"];
    let (m, best_guess) = (mean(both), mean(&guess.0).max(mean(&guess.1)));
    tally.record(
        8,
        "synthetic learnability",
        m >= 0.85 && m - best_guess >= 0.15 && default_secs < 1800.0,
        format!(
            "accuracy {m:.4} ({}), guess-all {:.4}/{:.4}, 3 runs in {default_secs:.0}s",
            fmt(both),
            mean(&guess.0),
            mean(&guess.1)
        ),
    );

    let none = &acc["none"];
    let mut ablation_ok = mean(both) > mean(none);
    for single in ["front-door", "counterfactual"] {
        ablation_ok &= acc[single].iter().zip(none).all(|(s, n)| *s >= n - 0.01);
    }
    tally.record(
        9,
        "ablation direction",
        ablation_ok,
        format!(
            "both {:.4}, none {:.4}, front-door {:.4} ({}), counterfactual {:.4} ({}), none per seed {}",
            mean(both),
            mean(none),
            mean(&acc["front-door"]),
            fmt(&acc["front-door"]),
            mean(&acc["counterfactual"]),
            fmt(&acc["counterfactual"]),
            fmt(none)
        ),
    );

    let mut causal_d = Vec::new();
    let mut noncausal_d = Vec::new();
    for (ckpt, data) in models.iter().zip(&datasets) {
        let (c, n) = similarity_division(ckpt, &data.test);
        causal_d.push(c);
        noncausal_d.push(n);
    }
    let (c, n) = (mean(&causal_d), mean(&noncausal_d));
    tally.record(
        10,
        "similarity-division direction",
        c > n,
        format!("cosine distance causal {c:.4} vs non-causal {n:.4} (ratio {:.3})", n / c),
    );

    let mut curve = vec![mean(both)];
    curve.extend(flip_acc.iter().map(|a| mean(a)));
    let monotone = curve.windows(2).all(|w| w[1] <= w[0]);
    tally.record(
        11,
        "robustness direction",
        monotone && counts_ok,
        format!("accuracy at flip ratios 0/0.2/0.4/0.6: {}, flip counts exact: {counts_ok}", fmt(&curve)),
    );

    let (p, d) = determinism();
    tally.record(12, "determinism", p, d);

    if tally.failed.is_empty() {
        println!("acceptance: all 12 criteria pass");
    } else {
        println!("acceptance: failed criteria {:?}", tally.failed);
        std::process::exit(1);
    }
}
