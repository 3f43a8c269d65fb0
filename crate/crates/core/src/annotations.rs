//! Annotation files, feature files, tokenization and event masking.
//!
//! Annotation files map `video_id` to an object with `duration`,
//! `timestamps`, `sentences`, `relation` and optional `cot` / `existence`
//! lists. Frame features live in one MECDFEAT file per video and are split
//! into events by timestamp.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const BOS: u32 = 3;
pub const EOS: u32 = 4;
pub const NUM_RESERVED: usize = 5;
const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<mask>", "<bos>", "<eos>"];

pub const DEFAULT_MAX_LEN: usize = 50;
pub const DEFAULT_VOCAB_CAP: usize = 8192;

/// File magic of the frame feature format.
pub const FEATURE_MAGIC: &[u8; 8] = b"MECDFEAT";

/// One annotated video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub duration: f64,
    pub timestamps: Vec<[f64; 2]>,
    pub sentences: Vec<String>,
    /// `relation[k-1]` is 1 when premise `k` causes the last event.
    pub relation: Vec<u8>,
    pub cot: Vec<String>,
    pub existence: Vec<String>,
}

impl VideoSample {
    pub fn num_events(&self) -> usize {
        self.sentences.len()
    }

    /// Checks every structural invariant; returns soft warnings separately.
    pub fn validate(&self) -> Result<Vec<String>> {
        let n = self.sentences.len();
        let id = &self.video_id;
        if n < 2 {
            return Err(Error::Length(format!("{id}: need at least 2 events, found {n}")));
        }
        if self.timestamps.len() != n {
            return Err(Error::Length(format!(
                "{id}: {} timestamps for {n} sentences",
                self.timestamps.len()
            )));
        }
        if self.relation.len() != n - 1 {
            return Err(Error::Length(format!(
                "{id}: relation has length {}, expected {}",
                self.relation.len(),
                n - 1
            )));
        }
        for (name, list) in [("cot", &self.cot), ("existence", &self.existence)] {
            if !list.is_empty() && list.len() != n - 1 {
                return Err(Error::Length(format!(
                    "{id}: {name} has length {}, expected {}",
                    list.len(),
                    n - 1
                )));
            }
        }
        if let Some(r) = self.relation.iter().find(|&&r| r > 1) {
            return Err(Error::Range(format!("{id}: relation entry {r} is not 0 or 1")));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::Range(format!("{id}: duration {} must be positive", self.duration)));
        }
        let mut prev_start = f64::NEG_INFINITY;
        for (i, &[s, e]) in self.timestamps.iter().enumerate() {
            if !(0.0 <= s && s < e && e <= self.duration) {
                return Err(Error::Range(format!(
                    "{id}: event {} spans [{s}, {e}] outside [0, {}]",
                    i + 1,
                    self.duration
                )));
            }
            if s < prev_start {
                return Err(Error::Range(format!("{id}: event {} starts before its predecessor", i + 1)));
            }
            prev_start = s;
        }

        let mut warnings = Vec::new();
        if !(4..=11).contains(&n) {
            warnings.push(format!("{id}: {n} events, outside the usual 4..=11"));
        }
        let positives = self.relation.iter().filter(|&&r| r == 1).count();
        if positives < 2 {
            warnings.push(format!("{id}: only {positives} causal premise events"));
        }
        Ok(warnings)
    }

    /// First `j` events, with `j - 1` premises. The relation vector is not
    /// derivable from the last-event labels, so the caller supplies it
    /// (zeros when unknown). Chain-of-thought texts depend on the result
    /// event and are dropped.
    pub fn truncate(&self, j: usize, relation: Option<Vec<u8>>) -> Result<VideoSample> {
        let n = self.num_events();
        if j < 2 || j > n {
            return Err(Error::Index(format!("truncation length {j} not in [2, {n}]")));
        }
        let relation = relation.unwrap_or_else(|| vec![0; j - 1]);
        if relation.len() != j - 1 {
            return Err(Error::Length(format!("relation length {} for {j} events", relation.len())));
        }
        Ok(VideoSample {
            video_id: self.video_id.clone(),
            duration: self.duration,
            timestamps: self.timestamps[..j].to_vec(),
            sentences: self.sentences[..j].to_vec(),
            relation,
            cot: Vec::new(),
            existence: if self.existence.is_empty() { Vec::new() } else { self.existence[..j - 1].to_vec() },
        })
    }
}

fn schema(id: &str, msg: impl std::fmt::Display) -> Error {
    Error::Schema(format!("{id}: {msg}"))
}

fn field<'a>(obj: &'a Map<String, Value>, id: &str, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| schema(id, format!("missing key \"{key}\"")))
}

fn string_list(value: &Value, id: &str, key: &str) -> Result<Vec<String>> {
    let arr = value.as_array().ok_or_else(|| schema(id, format!("\"{key}\" must be a list")))?;
    arr.iter()
        .map(|v| v.as_str().map(str::to_owned).ok_or_else(|| schema(id, format!("\"{key}\" entries must be strings"))))
        .collect()
}

fn sample_from_value(id: &str, value: &Value) -> Result<VideoSample> {
    let obj = value.as_object().ok_or_else(|| schema(id, "entry must be an object"))?;
    let duration = field(obj, id, "duration")?
        .as_f64()
        .ok_or_else(|| schema(id, "\"duration\" must be a number"))?;
    let timestamps = field(obj, id, "timestamps")?
        .as_array()
        .ok_or_else(|| schema(id, "\"timestamps\" must be a list"))?
        .iter()
        .map(|pair| {
            let p = pair.as_array().filter(|p| p.len() == 2).ok_or_else(|| schema(id, "timestamp must be [start, end]"))?;
            let s = p[0].as_f64().ok_or_else(|| schema(id, "timestamp start must be a number"))?;
            let e = p[1].as_f64().ok_or_else(|| schema(id, "timestamp end must be a number"))?;
            Ok([s, e])
        })
        .collect::<Result<Vec<_>>>()?;
    let sentences = string_list(field(obj, id, "sentences")?, id, "sentences")?;
    let relation = field(obj, id, "relation")?
        .as_array()
        .ok_or_else(|| schema(id, "\"relation\" must be a list"))?
        .iter()
        .map(|r| {
            let r = r.as_u64().ok_or_else(|| schema(id, "relation entries must be 0 or 1"))?;
            u8::try_from(r).map_err(|_| Error::Range(format!("{id}: relation entry {r} is not 0 or 1")))
        })
        .collect::<Result<Vec<_>>>()?;
    let optional = |key: &str| match obj.get(key) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(v) => string_list(v, id, key),
    };
    let sample = VideoSample {
        video_id: id.to_owned(),
        duration,
        timestamps,
        sentences,
        relation,
        cot: optional("cot")?,
        existence: optional("existence")?,
    };
    for w in sample.validate()? {
        warn!("{w}");
    }
    Ok(sample)
}

/// Parses annotation JSON text. Videos keep the file's key order.
pub fn parse_dataset_str(text: &str) -> Result<Vec<VideoSample>> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let map = root.as_object().ok_or_else(|| Error::Schema("top level must be an object".into()))?;
    map.iter().map(|(id, v)| sample_from_value(id, v)).collect()
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<Vec<VideoSample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_str(&text)
}

fn sample_to_value(s: &VideoSample) -> Value {
    let mut obj = Map::new();
    obj.insert("duration".into(), Value::from(s.duration));
    obj.insert(
        "timestamps".into(),
        Value::Array(s.timestamps.iter().map(|&[a, b]| Value::from(vec![a, b])).collect()),
    );
    obj.insert("sentences".into(), Value::from(s.sentences.clone()));
    obj.insert("relation".into(), Value::from(s.relation.iter().map(|&r| r as u64).collect::<Vec<_>>()));
    if !s.cot.is_empty() {
        obj.insert("cot".into(), Value::from(s.cot.clone()));
    }
    if !s.existence.is_empty() {
        obj.insert("existence".into(), Value::from(s.existence.clone()));
    }
    Value::Object(obj)
}

/// Serializes samples in the annotation format; output is byte-stable.
pub fn serialize_dataset(samples: &[VideoSample]) -> String {
    let mut root = Map::new();
    for s in samples {
        root.insert(s.video_id.clone(), sample_to_value(s));
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(root)).expect("json values serialize");
    text.push('\n');
    text
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[VideoSample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serialize_dataset(samples)).map_err(|e| Error::io(path, e))
}

/// Encodes a `T × D` frame matrix in the MECDFEAT layout.
pub fn encode_features(features: &Matrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &x in features.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], origin: &str) -> Result<Matrix<f32>> {
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::Magic(origin.to_owned()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = rows * cols;
    let payload = &bytes[16..];
    let found = payload.len() / 4;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    let data = payload[..expected * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Matrix<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

pub fn write_features(path: impl AsRef<Path>, features: &Matrix<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))
}

/// Splits video frames into events. Frame `i` sits at time `i·duration/T`
/// and goes to the earliest event whose `[start, end)` contains it; frames
/// outside every interval are dropped.
pub fn assign_frames<T: Scalar>(features: &Matrix<T>, timestamps: &[[f64; 2]], duration: f64) -> Vec<Matrix<T>> {
    let cols = features.cols();
    let mut rows: Vec<Vec<T>> = vec![Vec::new(); timestamps.len()];
    for (i, e) in frame_owners(features.rows(), timestamps, duration).into_iter().enumerate() {
        if let Some(e) = e {
            rows[e].extend_from_slice(features.row(i));
        }
    }
    rows.into_iter().map(|data| Matrix::from_vec(data.len() / cols.max(1), cols, data)).collect()
}

/// Owning event (0-based) of each of `t` frames, per [`assign_frames`].
pub fn frame_owners(t: usize, timestamps: &[[f64; 2]], duration: f64) -> Vec<Option<usize>> {
    (0..t)
        .map(|i| {
            let time = i as f64 * duration / t as f64;
            timestamps.iter().position(|&[s, end]| s <= time && time < end)
        })
        .collect()
}

/// One split as stored on disk: annotations plus full-video frame features.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub samples: Vec<VideoSample>,
    pub features: Vec<Matrix<f32>>,
}

impl Split {
    /// Reads `<dir>/<name>.json` and `<dir>/features/<id>.mecdfeat`.
    pub fn load(dir: impl AsRef<Path>, name: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let samples = parse_dataset(dir.join(format!("{name}.json")))?;
        let mut features = Vec::with_capacity(samples.len());
        for s in &samples {
            let f = load_features(feature_path(dir, &s.video_id))?;
            if let Some(w) = features.first().map(Matrix::cols) {
                if f.cols() != w {
                    return Err(Error::Dim(format!("{}: feature width {} differs from {w}", s.video_id, f.cols())));
                }
            }
            features.push(f);
        }
        Ok(Self { samples, features })
    }

    /// Writes the annotation file and one feature file per video.
    pub fn write(&self, dir: impl AsRef<Path>, name: &str) -> Result<()> {
        let dir = dir.as_ref();
        let fdir = dir.join("features");
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        write_dataset(dir.join(format!("{name}.json")), &self.samples)?;
        for (s, f) in self.samples.iter().zip(&self.features) {
            write_features(feature_path(dir, &s.video_id), f)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_dataset<T: Scalar>(&self, vocab: &Vocabulary, max_len: usize) -> Result<Dataset<T>> {
        let videos = self
            .samples
            .iter()
            .zip(&self.features)
            .map(|(s, f)| Video::new(s.clone(), &f.cast::<T>(), vocab, max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { videos })
    }

    /// Vocabulary over every caption and auxiliary text of the split.
    pub fn vocabulary(&self, cap: usize) -> Vocabulary {
        let texts: Vec<String> = self.samples.iter().flat_map(sample_texts).collect();
        Vocabulary::build(texts.iter().map(String::as_str), cap)
    }
}

/// Word-level vocabulary with reserved ids `PAD, UNK, MASK, BOS, EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

fn words_of(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocabulary {
    /// Words ordered by descending frequency, ties broken lexicographically;
    /// total size including reserved ids is capped at `cap`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in words_of(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = cap.saturating_sub(NUM_RESERVED);
        Self::from_words(ranked.into_iter().take(keep).map(|(w, _)| w).collect())
    }

    /// `words[i]` receives id `i + NUM_RESERVED`.
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), (i + NUM_RESERVED) as u32)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len() + NUM_RESERVED
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Reserved names such as `<mask>` map to their reserved ids.
    pub fn id(&self, word: &str) -> u32 {
        if let Some(i) = RESERVED.iter().position(|&r| r == word) {
            return i as u32;
        }
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        let id = id as usize;
        if id < NUM_RESERVED {
            RESERVED[id]
        } else {
            self.words.get(id - NUM_RESERVED).map(String::as_str).unwrap_or(RESERVED[UNK as usize])
        }
    }

    /// Lowercased whitespace tokens, truncated then padded to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = words_of(text).take(max_len).map(|w| self.id(&w)).collect();
        ids.resize(max_len, PAD);
        ids
    }

    /// Greedy-decoded ids back to text, skipping PAD.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().filter(|&&i| i != PAD).map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Self {
        Self::from_words(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_file_string(&text))
    }
}

/// Which auxiliary text to fetch for a premise event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxKind {
    Cot,
    Existence,
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "to", "in", "on", "at", "with", "by", "for", "from", "up", "down",
    "into", "onto", "over", "under", "is", "are", "was", "were", "be", "been", "being", "he", "she", "it", "they",
    "them", "him", "his", "her", "their", "its", "then", "there", "this", "that", "these", "those", "while", "as",
    "out", "off", "some", "very", "again", "also", "who", "which", "what", "when", "where", "not", "no", "we", "you",
    "i", "me", "my", "our", "your", "has", "have", "had", "do", "does", "did", "can", "will", "just", "more", "back",
];

fn is_noun_like(word: &str) -> bool {
    if word.is_empty() || STOP_WORDS.contains(&word) || !word.chars().all(|c| c.is_alphabetic()) {
        return false;
    }
    // crude verb filter: -ing / -ed forms and third-person -s forms
    let verb_like = word.ends_with("ing")
        || word.ends_with("ed")
        || (word.len() > 3 && word.ends_with('s') && !word.ends_with("ss"));
    !verb_like
}

/// Existence-only description of a caption: its noun-like words.
pub fn existence_description(caption: &str) -> String {
    let mut nouns: Vec<String> = Vec::new();
    for w in caption.split_whitespace() {
        let w: String = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        if is_noun_like(&w) && !nouns.contains(&w) {
            nouns.push(w);
        }
    }
    if nouns.is_empty() {
        "There are no objects.".to_owned()
    } else {
        format!("There are objects {}.", nouns.join(", "))
    }
}

/// Auxiliary text for premise `k` (1-based): the annotation when present and
/// non-empty, otherwise a rule-based fallback.
pub fn auxiliary_text(sample: &VideoSample, k: usize, kind: AuxKind) -> Result<String> {
    let n = sample.num_events();
    if k < 1 || k >= n {
        return Err(Error::Index(format!("premise index {k} not in [1, {}]", n - 1)));
    }
    let given = match kind {
        AuxKind::Cot => sample.cot.get(k - 1),
        AuxKind::Existence => sample.existence.get(k - 1),
    };
    if let Some(text) = given.filter(|t| !t.trim().is_empty()) {
        return Ok(text.clone());
    }
    Ok(match kind {
        AuxKind::Existence => existence_description(&sample.sentences[k - 1]),
        AuxKind::Cot => {
            let prev = if k == 1 { &sample.sentences[0] } else { &sample.sentences[k - 2] };
            format!("Because {} therefore {}", prev, sample.sentences[n - 1])
        }
    })
}

/// Every text a vocabulary should cover for one sample.
pub fn sample_texts(sample: &VideoSample) -> Vec<String> {
    let mut texts = sample.sentences.clone();
    for k in 1..sample.num_events() {
        for kind in [AuxKind::Cot, AuxKind::Existence] {
            texts.push(auxiliary_text(sample, k, kind).expect("k in range"));
        }
    }
    texts
}

/// One event: frame features and caption token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Event<T> {
    pub video_feature: Matrix<T>,
    pub caption_tokens: Vec<u32>,
}

impl<T: Scalar> Event<T> {
    /// Zero frames of the given shape and a caption of MASK tokens.
    pub fn masked(frames: usize, width: usize, max_len: usize) -> Self {
        Self { video_feature: Matrix::zeros(frames, width), caption_tokens: vec![MASK; max_len] }
    }
}

/// A video with tokenized captions and per-event frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct Video<T> {
    pub sample: VideoSample,
    pub events: Vec<Event<T>>,
    /// Tokenized existence-only description per premise.
    pub existence_tokens: Vec<Vec<u32>>,
    /// Tokenized chain-of-thought text per premise.
    pub cot_tokens: Vec<Vec<u32>>,
}

impl<T: Scalar> Video<T> {
    /// Builds a video from an annotation, the full-video frame matrix and a vocabulary.
    pub fn new(sample: VideoSample, frames: &Matrix<T>, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        sample.validate()?;
        let per_event = assign_frames(frames, &sample.timestamps, sample.duration);
        let events = per_event
            .into_iter()
            .zip(&sample.sentences)
            .map(|(video_feature, s)| Event { video_feature, caption_tokens: vocab.tokenize(s, max_len) })
            .collect();
        Self::from_events(sample, events, vocab, max_len)
    }

    pub fn from_events(sample: VideoSample, events: Vec<Event<T>>, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let n = sample.num_events();
        if events.len() != n {
            return Err(Error::Length(format!("{} events for {n} sentences", events.len())));
        }
        let aux = |kind| -> Result<Vec<Vec<u32>>> {
            (1..n).map(|k| Ok(vocab.tokenize(&auxiliary_text(&sample, k, kind)?, max_len))).collect()
        };
        let existence_tokens = aux(AuxKind::Existence)?;
        let cot_tokens = aux(AuxKind::Cot)?;
        Ok(Self { sample, events, existence_tokens, cot_tokens })
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.events.first().map(|e| e.video_feature.cols()).unwrap_or(0)
    }

    /// First `j` events as a standalone video (see [`VideoSample::truncate`]).
    pub fn truncate(&self, j: usize, relation: Option<Vec<u8>>, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let sample = self.sample.truncate(j, relation)?;
        Self::from_events(sample, self.events[..j].to_vec(), vocab, max_len)
    }
}

/// A video with premise event `k` masked.
#[derive(Clone, Debug)]
pub struct MaskedView<'a, T> {
    pub base: &'a Video<T>,
    pub masked_index: usize,
    pub events: Vec<Event<T>>,
}

/// Masks premise `k` (1-based): zero frames, caption replaced by MASK ids.
/// The result event can never be masked.
pub fn mask_event<T: Scalar>(video: &Video<T>, k: usize) -> Result<MaskedView<'_, T>> {
    let n = video.num_events();
    if k < 1 || k >= n {
        return Err(Error::Index(format!("cannot mask event {k} of {n}; premises are 1..={}", n - 1)));
    }
    let mut events = video.events.clone();
    let e = &mut events[k - 1];
    *e = Event::masked(e.video_feature.rows(), e.video_feature.cols(), e.caption_tokens.len());
    Ok(MaskedView { base: video, masked_index: k, events })
}

/// A loaded split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset<T> {
    pub videos: Vec<Video<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn samples(&self) -> Vec<VideoSample> {
        self.videos.iter().map(|v| v.sample.clone()).collect()
    }

    /// Loads `<dir>/<split>.json` with features from `<dir>/features/<id>.mecdfeat`.
    pub fn load(dir: impl AsRef<Path>, split: &str, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        Split::load(dir, split)?.to_dataset(vocab, max_len)
    }
}

pub fn feature_path(dir: &Path, video_id: &str) -> std::path::PathBuf {
    dir.join("features").join(format!("{video_id}.mecdfeat"))
}
