//! Synthetic multi-event videos with planted causal structure.
//!
//! Each event carries a latent vector; frames are a fixed random projection
//! of it plus noise. The result latent is an equal-weight mix of its causal
//! premises. A bridge chain `a → b → result` folds `a` into `b` so `a`
//! reaches the result only through `b`. Illusory events are non-causal but
//! share surface cues with the result: its object word (existence) or, in
//! the slot right before it, its action word (temporal).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotations::{Split, VideoSample};
use crate::error::{Error, Result};
use crate::eval::{diagrams_to_json, CausalDiagram};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub feature_dim: usize,
    pub frames_per_event: usize,
    /// Budget of content words, split evenly between actions and objects.
    pub vocab_size: usize,
    pub causal_rate: f64,
    pub bridge_rate: f64,
    pub illusory_rate: f64,
    pub noise_sigma: f64,
    pub latent_dim: usize,
    /// Offset of direct causes (positive) and all other premises (negative)
    /// along a fixed latent direction.
    pub signature: f64,
    /// Redraw labels until at least this many premises are causal.
    pub min_causal: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_videos: 800,
            test_videos: 200,
            min_events: 5,
            max_events: 5,
            feature_dim: 32,
            frames_per_event: 8,
            vocab_size: 64,
            causal_rate: 0.45,
            bridge_rate: 0.5,
            illusory_rate: 0.5,
            noise_sigma: 0.1,
            latent_dim: 16,
            signature: 2.0,
            min_causal: 0,
            seed: 2023,
        }
    }
}

const ACTIONS: &[&str] = &[
    "opens", "grabs", "lifts", "drops", "pushes", "pulls", "throws", "cuts", "washes", "paints", "fixes", "turns",
    "kicks", "holds", "moves", "cleans", "fills", "breaks", "folds", "stirs", "pours", "shakes", "carries", "wipes",
    "rolls", "spins", "drags", "catches", "hides", "tosses", "sorts", "seals",
];

const OBJECTS: &[&str] = &[
    "ball", "box", "cup", "door", "knife", "towel", "bottle", "chair", "table", "bag", "book", "lamp", "plate", "bowl",
    "rope", "brush", "phone", "key", "pan", "glass", "shoe", "hat", "pen", "sink", "window", "drawer", "basket",
    "ladder", "bucket", "candle", "mirror", "pillow",
];

/// How an illusory premise resembles the result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Illusion {
    Existence,
    Temporal,
}

/// Construction record of one video, for audits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoTruth {
    pub video_id: String,
    /// `(a, b)`, 1-based: `a`'s latent is folded into `b`.
    pub bridge: Option<(usize, usize)>,
    /// Weight of each premise latent in the result latent.
    pub mixing: Vec<f64>,
    pub illusory: Vec<Option<Illusion>>,
    pub diagram: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Split,
    pub test: Split,
    /// Train videos first, then test videos.
    pub truth: Vec<VideoTruth>,
}

impl SynthConfig {
    fn actions(&self) -> usize {
        (self.vocab_size / 2).min(ACTIONS.len())
    }

    fn objects(&self) -> usize {
        (self.vocab_size - self.vocab_size / 2).min(OBJECTS.len())
    }

    /// Rate at which non-bridge premises are drawn causal so the overall
    /// positive rate stays at `causal_rate` for `n` events.
    pub fn compensated_rate(&self, n: usize) -> Result<f64> {
        let (p, br) = (self.causal_rate, self.bridge_rate);
        let free = br * (n as f64 - 3.0) + (1.0 - br) * (n as f64 - 1.0);
        let need = p * (n as f64 - 1.0) - 2.0 * br;
        let q = if free > 0.0 { need / free } else { 0.0 };
        if !(-1e-12..=1.0 + 1e-12).contains(&q) || (free == 0.0 && need.abs() > 1e-12) {
            return Err(Error::Config(format!(
                "causal_rate {p} with bridge_rate {br} is unattainable for {n} events"
            )));
        }
        Ok(q.clamp(0.0, 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_events < 3 || self.max_events < self.min_events {
            return bad(format!("events per video {}..={} needs 3 <= min <= max", self.min_events, self.max_events));
        }
        if self.feature_dim == 0 || self.frames_per_event == 0 || self.latent_dim == 0 {
            return bad("feature_dim, frames_per_event and latent_dim must be positive".into());
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} leaves no room for actions and objects", self.vocab_size));
        }
        for (name, v) in [("causal_rate", self.causal_rate), ("bridge_rate", self.bridge_rate), ("illusory_rate", self.illusory_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} not in [0, 1]"));
            }
        }
        if self.causal_rate >= 1.0 && self.illusory_rate > 0.0 {
            return bad("causal_rate 1 leaves no non-causal events to make illusory".into());
        }
        if !self.signature.is_finite() {
            return bad(format!("signature {} must be finite", self.signature));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        if self.min_causal > self.min_events - 1 {
            return bad(format!("min_causal {} exceeds the premises of a {}-event video", self.min_causal, self.min_events));
        }
        for n in self.min_events..=self.max_events {
            let q = self.compensated_rate(n)?;
            if self.min_causal > 0 && q == 0.0 && self.bridge_rate < 1.0 {
                return bad(format!("min_causal {} cannot be met when premises are never drawn causal", self.min_causal));
            }
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Shared generative parameters: projection and action prototypes.
struct World {
    projection: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
    /// Unit direction carrying the causal signature.
    direction: Vec<f64>,
}

impl World {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
        let projection = (0..cfg.feature_dim)
            .map(|_| normal_vec(&mut rng, cfg.latent_dim).into_iter().map(|x| x * scale).collect())
            .collect();
        let prototypes = (0..cfg.actions()).map(|_| normal_vec(&mut rng, cfg.latent_dim)).collect();
        let mut direction = normal_vec(&mut rng, cfg.latent_dim);
        let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        direction.iter_mut().for_each(|x| *x /= norm);
        Self { projection, prototypes, direction }
    }

    fn action(&self, z: &[f64]) -> usize {
        let score = |p: &Vec<f64>| p.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        let mut best = 0;
        for (i, p) in self.prototypes.iter().enumerate() {
            if score(p) > score(&self.prototypes[best]) {
                best = i;
            }
        }
        best
    }

    fn frame(&self, z: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
        self.projection
            .iter()
            .map(|row| {
                let clean: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
                let noise: f64 = StandardNormal.sample(rng);
                (clean + sigma * noise) as f32
            })
            .collect()
    }
}

fn sentence(action: usize, object: usize) -> String {
    format!("the person {} the {}", ACTIONS[action], OBJECTS[object])
}

fn generate_video(cfg: &SynthConfig, world: &World, index: usize) -> Result<(VideoSample, Matrix<f32>, VideoTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1).wrapping_add(index as u64));
    let n = rng.random_range(cfg.min_events..=cfg.max_events);
    let premises = n - 1;
    let q = cfg.compensated_rate(n)?;

    let bridge = (rng.random::<f64>() < cfg.bridge_rate).then(|| {
        let a = rng.random_range(1..premises);
        (a, a + 1)
    });
    let mut relation = vec![0u8; premises];
    loop {
        for (k, r) in relation.iter_mut().enumerate() {
            let fixed = bridge.is_some_and(|(a, b)| k + 1 == a || k + 1 == b);
            *r = u8::from(fixed || rng.random::<f64>() < q);
        }
        if relation.iter().filter(|&&r| r == 1).count() >= cfg.min_causal {
            break;
        }
    }

    let mut latents: Vec<Vec<f64>> = (0..premises).map(|_| normal_vec(&mut rng, cfg.latent_dim)).collect();
    if let Some((a, b)) = bridge {
        let za = latents[a - 1].clone();
        for (x, y) in latents[b - 1].iter_mut().zip(za) {
            *x = (*x + y) / 2f64.sqrt();
        }
    }
    let direct: Vec<usize> = (1..=premises).filter(|&k| relation[k - 1] == 1 && bridge.map(|(a, _)| a) != Some(k)).collect();
    for (k, z) in latents.iter_mut().enumerate() {
        let sign = if direct.contains(&(k + 1)) { 1.0 } else { -1.0 };
        for (x, u) in z.iter_mut().zip(&world.direction) {
            *x += sign * cfg.signature * u;
        }
    }
    let mut mixing = vec![0.0; premises];
    let result = if direct.is_empty() {
        normal_vec(&mut rng, cfg.latent_dim)
    } else {
        let w = 1.0 / (direct.len() as f64).sqrt();
        let mut z = vec![0.0; cfg.latent_dim];
        for &k in &direct {
            mixing[k - 1] = w;
            for (acc, x) in z.iter_mut().zip(&latents[k - 1]) {
                *acc += w * x;
            }
        }
        z
    };
    latents.push(result);

    let mut actions: Vec<usize> = latents.iter().map(|z| world.action(z)).collect();
    let mut objects: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.objects())).collect();
    let causal: Vec<usize> = (0..premises).filter(|&k| relation[k] == 1).collect();
    if !causal.is_empty() {
        objects[n - 1] = objects[causal[rng.random_range(0..causal.len())]];
    }
    let mut illusory = vec![None; premises];
    for k in 0..premises {
        if relation[k] == 0 && rng.random::<f64>() < cfg.illusory_rate {
            if k + 1 == premises {
                actions[k] = actions[n - 1];
                illusory[k] = Some(Illusion::Temporal);
            } else {
                objects[k] = objects[n - 1];
                illusory[k] = Some(Illusion::Existence);
            }
        }
    }

    let fpe = cfg.frames_per_event;
    let mut data = Vec::with_capacity(n * fpe * cfg.feature_dim);
    for z in &latents {
        for _ in 0..fpe {
            data.extend(world.frame(z, cfg.noise_sigma, &mut rng));
        }
    }
    let frames = Matrix::from_vec(n * fpe, cfg.feature_dim, data);

    let sentences: Vec<String> = (0..n).map(|k| sentence(actions[k], objects[k])).collect();
    let existence = (0..premises).map(|k| format!("There are objects person, {}.", OBJECTS[objects[k]])).collect();
    let cot = (0..premises)
        .map(|k| format!("Because {} therefore {}", sentences[k.saturating_sub(1)], sentences[n - 1]))
        .collect();
    let span = fpe as f64;
    let video_id = format!("synth_{index:05}");
    let sample = VideoSample {
        video_id: video_id.clone(),
        duration: span * n as f64,
        timestamps: (0..n).map(|k| [span * k as f64, span * (k + 1) as f64]).collect(),
        sentences,
        relation: relation.clone(),
        cot,
        existence,
    };

    let mut diagram = CausalDiagram::new(n);
    diagram.set_column(n, &relation);
    if let Some((a, b)) = bridge {
        diagram.set(a, b, 1);
    }
    let truth = VideoTruth { video_id, bridge, mixing, illusory, diagram: diagram.to_rows() };
    Ok((sample, frames, truth))
}

/// Generates both splits. Identical configs give identical output.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let world = World::new(cfg);
    let mut train = Split::default();
    let mut test = Split::default();
    let mut truth = Vec::with_capacity(cfg.train_videos + cfg.test_videos);
    for i in 0..cfg.train_videos + cfg.test_videos {
        let (s, f, t) = generate_video(cfg, &world, i)?;
        let split = if i < cfg.train_videos { &mut train } else { &mut test };
        split.samples.push(s);
        split.features.push(f);
        truth.push(t);
    }
    Ok(SynthDataset { train, test, truth })
}

impl SynthDataset {
    pub fn diagrams(&self) -> Result<Vec<CausalDiagram>> {
        self.truth.iter().map(|t| CausalDiagram::from_rows(&t.diagram)).collect()
    }

    pub fn diagrams_json(&self) -> Result<String> {
        let ids: Vec<String> = self.truth.iter().map(|t| t.video_id.clone()).collect();
        Ok(diagrams_to_json(&ids, &self.diagrams()?))
    }

    /// Writes `train.json`, `test.json`, `features/` and `diagrams.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.train.write(dir, "train")?;
        self.test.write(dir, "test")?;
        let path = dir.join("diagrams.json");
        fs::write(&path, self.diagrams_json()?).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{existence_description, load_features};

    fn small() -> SynthConfig {
        SynthConfig { train_videos: 30, test_videos: 10, ..SynthConfig::default() }
    }

    #[test]
    fn word_lists_survive_the_existence_extractor() {
        for a in ACTIONS {
            assert!(a.ends_with('s') && !a.ends_with("ss"), "{a}");
        }
        for o in OBJECTS {
            assert_eq!(existence_description(&format!("the person grabs the {o}")), format!("There are objects person, {o}."));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.train.features, c.train.features);
    }

    #[test]
    fn samples_validate_and_diagrams_match_relations() {
        let d = generate_dataset(&small()).unwrap();
        for (s, t) in d.train.samples.iter().chain(&d.test.samples).zip(&d.truth) {
            s.validate().unwrap();
            let diag = CausalDiagram::from_rows(&t.diagram).unwrap();
            assert_eq!(diag.column(s.num_events()), s.relation.as_slice());
        }
    }

    #[test]
    fn bridge_source_reaches_result_only_through_bridge() {
        let d = generate_dataset(&SynthConfig { bridge_rate: 1.0, causal_rate: 0.6, ..small() }).unwrap();
        for t in &d.truth {
            let (a, b) = t.bridge.expect("every video has a bridge");
            let n = t.diagram.len();
            assert!(a < b && b < n);
            assert_eq!(t.diagram[a - 1][n - 1], 1);
            assert_eq!(t.diagram[b - 1][n - 1], 1);
            assert_eq!(t.diagram[a - 1][b - 1], 1);
            assert_eq!(t.mixing[a - 1], 0.0);
            assert!(t.mixing[b - 1] > 0.0);
        }
    }

    #[test]
    fn illusory_events_are_noncausal() {
        let d = generate_dataset(&SynthConfig { illusory_rate: 1.0, ..small() }).unwrap();
        for (s, t) in d.train.samples.iter().zip(&d.truth) {
            let n = s.num_events();
            let last_object = s.sentences[n - 1].split_whitespace().last().unwrap();
            for (k, ill) in t.illusory.iter().enumerate() {
                assert_eq!(ill.is_some(), s.relation[k] == 0);
                if *ill == Some(Illusion::Existence) {
                    assert_eq!(s.sentences[k].split_whitespace().last().unwrap(), last_object);
                }
            }
        }
    }

    #[test]
    fn unsatisfiable_configs_are_rejected() {
        let all = SynthConfig { causal_rate: 1.0, illusory_rate: 0.5, ..small() };
        assert!(matches!(generate_dataset(&all), Err(Error::Config(_))));
        let too_many_bridges = SynthConfig { causal_rate: 0.1, bridge_rate: 1.0, ..small() };
        assert!(matches!(generate_dataset(&too_many_bridges), Err(Error::Config(_))));
        assert!(matches!(generate_dataset(&SynthConfig { min_events: 2, ..small() }), Err(Error::Config(_))));
    }

    #[test]
    fn written_features_round_trip() {
        let d = generate_dataset(&SynthConfig { train_videos: 3, test_videos: 1, ..SynthConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        for (s, f) in d.train.samples.iter().zip(&d.train.features) {
            let back = load_features(crate::annotations::feature_path(dir.path(), &s.video_id)).unwrap();
            assert_eq!(back.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                       f.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(Split::load(dir.path(), "test").unwrap(), d.test);
    }
}
