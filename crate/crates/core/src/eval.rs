//! Relation prediction, causal diagrams, metrics, baselines and perturbations.

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::annotations::{frame_owners, Split, Video, VideoSample, Vocabulary};
use crate::autodiff::Graph;
use crate::causal::forward_pair;
use crate::error::{Error, Result};
use crate::model::Vgcm;
use crate::nn::Mode;
use crate::scalar::Scalar;

/// Upper-triangular 0/1 relation matrix over ordered event pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalDiagram {
    n_events: usize,
    edges: Vec<u8>,
}

impl CausalDiagram {
    pub fn new(n_events: usize) -> Self {
        Self { n_events, edges: vec![0; n_events * n_events.saturating_sub(1) / 2] }
    }

    pub fn filled(n_events: usize, value: u8) -> Self {
        let mut d = Self::new(n_events);
        d.edges.fill(value);
        d
    }

    pub fn n_events(&self) -> usize {
        self.n_events
    }

    pub fn num_pairs(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[u8] {
        &self.edges
    }

    // pairs ordered by column: (1,2), (1,3), (2,3), (1,4), ...
    fn slot(&self, i: usize, j: usize) -> usize {
        assert!(1 <= i && i < j && j <= self.n_events, "pair ({i}, {j}) outside diagram of {}", self.n_events);
        (j - 1) * (j - 2) / 2 + (i - 1)
    }

    /// Edge `i → j`, 1-based with `i < j`.
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.edges[self.slot(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: u8) {
        let s = self.slot(i, j);
        self.edges[s] = value;
    }

    /// Edges into event `j` from events `1..j`.
    pub fn column(&self, j: usize) -> &[u8] {
        let start = (j - 1) * (j - 2) / 2;
        &self.edges[start..start + j - 1]
    }

    pub fn set_column(&mut self, j: usize, values: &[u8]) {
        assert_eq!(values.len(), j - 1, "column {j} takes {} values", j - 1);
        let start = (j - 1) * (j - 2) / 2;
        self.edges[start..start + j - 1].copy_from_slice(values);
    }

    /// Full `n × n` matrix, zero on and below the diagonal.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        let n = self.n_events;
        (1..=n).map(|i| (1..=n).map(|j| if i < j { self.get(i, j) } else { 0 }).collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let mut d = Self::new(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Size(format!("row {} has {} entries, expected {n}", i + 1, row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if v > 1 || (j <= i && v != 0) {
                    return Err(Error::Range(format!("entry ({}, {}) = {v} in an upper-triangular 0/1 matrix", i + 1, j + 1)));
                }
                if j > i {
                    d.set(i + 1, j + 1, v);
                }
            }
        }
        Ok(d)
    }

    pub fn to_dot(&self, name: &str) -> String {
        let mut s = format!("digraph \"{}\" {{\n", name.replace('"', "\\\""));
        for i in 1..=self.n_events {
            s.push_str(&format!("  e{i} [label=\"e{i}\"];\n"));
        }
        for j in 2..=self.n_events {
            for i in 1..j {
                if self.get(i, j) == 1 {
                    s.push_str(&format!("  e{i} -> e{j};\n"));
                }
            }
        }
        s.push_str("}\n");
        s
    }
}

/// Relation logits for every premise, in evaluation mode.
pub fn relation_logits<T: Scalar>(model: &Vgcm<T>, video: &Video<T>) -> Result<Vec<[T; 2]>> {
    let n = video.num_events();
    let mut g = Graph::new(&model.params);
    let mut mode = Mode::Eval;
    let mut shared = model.shared_pass(&mut g, video, &mut mode)?;
    (1..n)
        .map(|k| {
            let out = forward_pair(model, &mut g, &mut shared, video, k, &mut mode)?;
            let l = g.value(out.logits);
            Ok([l.get(0, 0), l.get(0, 1)])
        })
        .collect()
}

/// Causal iff the second logit is strictly larger.
pub fn decide<T: Scalar>(logits: [T; 2]) -> u8 {
    u8::from(logits[1] > logits[0])
}

/// One 0/1 decision per premise.
pub fn predict_relations<T: Scalar>(model: &Vgcm<T>, video: &Video<T>) -> Result<Vec<u8>> {
    Ok(relation_logits(model, video)?.into_iter().map(decide).collect())
}

/// Truncates to events `1..j` for each `j` and fills column `j` with the
/// relations predicted against the new last event.
pub fn build_diagram<T: Scalar>(model: &Vgcm<T>, video: &Video<T>, vocab: &Vocabulary, max_len: usize) -> Result<CausalDiagram> {
    let n = video.num_events();
    let mut d = CausalDiagram::new(n);
    for j in 2..=n {
        let column = if j == n {
            predict_relations(model, video)?
        } else {
            predict_relations(model, &video.truncate(j, None, vocab, max_len)?)?
        };
        d.set_column(j, &column);
    }
    Ok(d)
}

/// Ground-truth diagram with only the last column known.
pub fn last_column_diagram(sample: &VideoSample) -> CausalDiagram {
    let n = sample.num_events();
    let mut d = CausalDiagram::new(n);
    d.set_column(n, &sample.relation);
    d
}

/// Number of ordered pairs on which the diagrams disagree.
pub fn shd(pred: &CausalDiagram, gt: &CausalDiagram) -> Result<usize> {
    if pred.n_events != gt.n_events {
        return Err(Error::Size(format!("diagrams over {} and {} events", pred.n_events, gt.n_events)));
    }
    Ok(pred.edges.iter().zip(&gt.edges).filter(|(a, b)| a != b).count())
}

/// Micro-averaged accuracy over every (video, premise) decision.
pub fn accuracy(preds: &[Vec<u8>], gts: &[Vec<u8>]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Size(format!("{} predictions for {} videos", preds.len(), gts.len())));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Size(format!("video {i}: {} predictions for {} relations", p.len(), g.len())));
        }
        correct += p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    if total == 0 {
        return Err(Error::Empty("no relation decisions to score".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    AllCausal,
    AllNoncausal,
    Random { p: f64, seed: u64 },
}

impl Baseline {
    pub fn name(&self) -> String {
        match self {
            Baseline::AllCausal => "all_causal".into(),
            Baseline::AllNoncausal => "all_noncausal".into(),
            Baseline::Random { p, seed } => format!("random(p={p}, seed={seed})"),
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        match self {
            Baseline::Random { seed, .. } => ChaCha8Rng::seed_from_u64(*seed),
            _ => ChaCha8Rng::seed_from_u64(0),
        }
    }

    fn draw(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        match *self {
            Baseline::AllCausal => vec![1; len],
            Baseline::AllNoncausal => vec![0; len],
            Baseline::Random { p, .. } => (0..len).map(|_| u8::from(rng.random::<f64>() < p)).collect(),
        }
    }
}

/// Baseline relation vector for one sample. Random draws come from `rng`.
pub fn baseline_predict(mode: &Baseline, sample: &VideoSample, rng: &mut ChaCha8Rng) -> Vec<u8> {
    mode.draw(sample.num_events() - 1, rng)
}

/// Baseline relations for a whole split from one seeded stream.
pub fn baseline_relations(mode: &Baseline, samples: &[VideoSample]) -> Vec<Vec<u8>> {
    let mut rng = mode.rng();
    samples.iter().map(|s| baseline_predict(mode, s, &mut rng)).collect()
}

/// Baseline diagrams, every column drawn the same way as the relations.
pub fn baseline_diagrams(mode: &Baseline, samples: &[VideoSample]) -> Vec<CausalDiagram> {
    let mut rng = mode.rng();
    samples
        .iter()
        .map(|s| {
            let n = s.num_events();
            let mut d = CausalDiagram::new(n);
            for j in 2..=n {
                d.set_column(j, &mode.draw(j - 1, &mut rng));
            }
            d
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    /// Flip one relation entry in `⌊ratio·|dataset|⌋` videos.
    FlipLabels { ratio: f64 },
    /// Replace `n` caption words per event with the mask token.
    MaskWords { n: usize },
    /// Zero `n` frames per event.
    MaskFrames { n: usize },
}

pub const MASK_WORD: &str = "<mask>";

/// Returns a perturbed copy; the input is left untouched. Counts larger
/// than an event's length are clamped with a warning.
pub fn perturb_dataset(split: &Split, mode: Perturbation, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = split.clone();
    match mode {
        Perturbation::FlipLabels { ratio } => {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::Param(format!("flip ratio {ratio} not in [0, 1]")));
            }
            let count = (ratio * out.len() as f64).floor() as usize;
            let mut chosen = sample_indices(&mut rng, out.len(), count).into_vec();
            chosen.sort_unstable();
            for v in chosen {
                let r = &mut out.samples[v].relation;
                let i = rng.random_range(0..r.len());
                r[i] ^= 1;
            }
        }
        Perturbation::MaskWords { n } => {
            for s in &mut out.samples {
                for sentence in &mut s.sentences {
                    let mut words: Vec<String> = sentence.split_whitespace().map(str::to_owned).collect();
                    let take = clamp_count(n, words.len(), &s.video_id, "words");
                    for i in sample_indices(&mut rng, words.len(), take) {
                        words[i] = MASK_WORD.to_owned();
                    }
                    *sentence = words.join(" ");
                }
            }
        }
        Perturbation::MaskFrames { n } => {
            for (s, f) in out.samples.iter().zip(out.features.iter_mut()) {
                let owners = frame_owners(f.rows(), &s.timestamps, s.duration);
                for e in 0..s.num_events() {
                    let rows: Vec<usize> = (0..owners.len()).filter(|&i| owners[i] == Some(e)).collect();
                    let take = clamp_count(n, rows.len(), &s.video_id, "frames");
                    for i in sample_indices(&mut rng, rows.len(), take) {
                        f.row_mut(rows[i]).fill(0.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn clamp_count(n: usize, len: usize, id: &str, what: &str) -> usize {
    if n > len {
        warn!("{id}: asked to mask {n} {what} of an event with {len}; masking all");
    }
    n.min(len)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoMetrics {
    pub video_id: String,
    pub predicted: Vec<u8>,
    pub relation: Vec<u8>,
    pub correct: usize,
    pub shd: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub ave_shd: f64,
    pub per_video: Vec<VideoMetrics>,
}

impl MetricsReport {
    /// Scores relation vectors and diagrams against the samples. `gt` holds
    /// full ground-truth diagrams when known, otherwise only the last column
    /// is compared.
    pub fn score(
        samples: &[VideoSample],
        preds: &[Vec<u8>],
        diagrams: &[CausalDiagram],
        gt: Option<&[CausalDiagram]>,
    ) -> Result<Self> {
        let gts: Vec<Vec<u8>> = samples.iter().map(|s| s.relation.clone()).collect();
        let acc = accuracy(preds, &gts)?;
        if diagrams.len() != samples.len() {
            return Err(Error::Size(format!("{} diagrams for {} videos", diagrams.len(), samples.len())));
        }
        let mut per_video = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let truth = match gt {
                Some(g) => g.get(i).cloned().ok_or_else(|| Error::Size(format!("no ground truth for {}", s.video_id)))?,
                None => last_column_diagram(s),
            };
            let d = if gt.is_some() {
                diagrams[i].clone()
            } else {
                let mut d = CausalDiagram::new(s.num_events());
                d.set_column(s.num_events(), diagrams[i].column(s.num_events()));
                d
            };
            per_video.push(VideoMetrics {
                video_id: s.video_id.clone(),
                predicted: preds[i].clone(),
                relation: s.relation.clone(),
                correct: preds[i].iter().zip(&s.relation).filter(|(a, b)| a == b).count(),
                shd: shd(&d, &truth)?,
            });
        }
        let ave_shd = per_video.iter().map(|v| v.shd as f64).sum::<f64>() / per_video.len().max(1) as f64;
        Ok(Self { accuracy: acc, ave_shd, per_video })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Diagrams keyed by video id, as upper-triangular row lists.
pub fn diagrams_to_json(ids: &[String], diagrams: &[CausalDiagram]) -> String {
    let map: serde_json::Map<String, serde_json::Value> = ids
        .iter()
        .zip(diagrams)
        .map(|(id, d)| (id.clone(), serde_json::to_value(d.to_rows()).expect("rows serialize")))
        .collect();
    let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("diagrams serialize");
    s.push('\n');
    s
}

pub fn diagrams_from_json(text: &str) -> Result<Vec<(String, CausalDiagram)>> {
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text)?;
    map.into_iter()
        .map(|(id, v)| {
            let rows: Vec<Vec<u8>> = serde_json::from_value(v)?;
            Ok((id, CausalDiagram::from_rows(&rows)?))
        })
        .collect()
}
