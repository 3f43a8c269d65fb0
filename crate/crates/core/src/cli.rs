//! Command-line pipeline: `synth`, `train`, `eval`, `diagram`, `baseline`,
//! `perturb` and `gradcheck`.
//!
//! Settings come from a flat `key = value` file with `model.`, `train.`,
//! `loss.`, `synth.` and `causal.` prefixes. Precedence, lowest first:
//! built-in defaults, `--config`, the `MECD_SEED` environment variable
//! (`train.seed` only), `--set` flags.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::annotations::{Split, Vocabulary};
use crate::causal::CausalConfig;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{
    baseline_diagrams, baseline_relations, build_diagram, diagrams_from_json, diagrams_to_json, perturb_dataset,
    predict_relations, Baseline, CausalDiagram, MetricsReport, Perturbation,
};
use crate::model::{ModelConfig, Vgcm};
use crate::synth::{generate_dataset, SynthConfig};
use crate::training::{gradient_check, metrics_log, train_model, EpochMetrics, TrainConfig};

pub const SEED_ENV: &str = "MECD_SEED";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const DIAGRAMS_FILE: &str = "diagrams.json";

/// Every tunable setting of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub causal: CausalConfig,
}

const SECTIONS: [&str; 5] = ["model", "train", "loss", "synth", "causal"];

/// Maps a public key to its location in the serialized config.
fn locate(key: &str) -> Option<(&'static str, Option<&'static str>, String)> {
    let (section, field) = key.split_once('.')?;
    match section {
        "model" => Some(("model", None, field.to_owned())),
        "train" if field != "weights" => Some(("train", None, field.to_owned())),
        "loss" => Some(("train", Some("weights"), field.to_lowercase())),
        "synth" => Some(("synth", None, field.to_owned())),
        "causal" => Some(("causal", None, format!("enable_{field}"))),
        _ => None,
    }
}

fn public_key(section: &str, field: &str) -> String {
    match section {
        "loss" => format!("loss.lambda_{}", field.trim_start_matches("lambda_").to_uppercase()),
        "causal" => format!("causal.{}", field.trim_start_matches("enable_")),
        _ => format!("{section}.{field}"),
    }
}

fn parse_like(current: &Value, raw: &str) -> Option<Value> {
    match current {
        Value::Bool(_) => match raw.to_ascii_lowercase().as_str() {
            "true" | "on" | "1" | "yes" => Some(Value::Bool(true)),
            "false" | "off" | "0" | "no" => Some(Value::Bool(false)),
            _ => None,
        },
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => raw.parse::<f64>().ok().filter(|x| x.is_finite()).map(Value::from),
        Value::String(_) => Some(Value::String(raw.to_owned())),
        _ => None,
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    fn tree(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!(),
        }
    }

    /// All keys with their current values, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let tree = self.tree();
        let mut out = Vec::new();
        for section in SECTIONS {
            let obj = match section {
                "loss" => &tree["train"]["weights"],
                "train" => &tree["train"],
                s => &tree[s],
            };
            for (field, v) in obj.as_object().expect("section is an object") {
                if section == "train" && field == "weights" {
                    continue;
                }
                out.push((public_key(section, field), render(v)));
            }
        }
        out
    }

    pub fn keys(&self) -> Vec<String> {
        self.entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its text form. Unknown keys and unparsable values
    /// are configuration errors.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key `{key}`"));
        let (section, sub, field) = locate(key).ok_or_else(unknown)?;
        if key.starts_with("loss.") && !field.starts_with("lambda_") {
            return Err(unknown());
        }
        let mut tree = self.tree();
        let mut slot = tree.get_mut(section).ok_or_else(unknown)?;
        if let Some(s) = sub {
            slot = slot.get_mut(s).ok_or_else(unknown)?;
        }
        let target = slot.get_mut(field.as_str()).ok_or_else(unknown)?;
        *target = parse_like(target, raw.trim()).ok_or_else(|| Error::Config(format!("bad value `{raw}` for `{key}`")))?;
        *self = serde_json::from_value(Value::Object(tree)).map_err(|e| Error::Config(format!("{key} = {raw}: {e}")))?;
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }
}

/// Trains on `train` with the vocabulary built from it; the model's vocabulary
/// size and feature width follow the data.
pub fn train_run(train: &Split, holdout: Option<&Split>, cfg: &RunConfig) -> Result<(Checkpoint<f32>, Vec<EpochMetrics>)> {
    if train.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let vocab = train.vocabulary(cfg.model.vocab_size);
    let model_cfg = ModelConfig { vocab_size: vocab.len(), feature_dim: train.features[0].cols(), ..cfg.model.clone() };
    let max_len = model_cfg.max_caption_len;
    let train_ds = train.to_dataset::<f32>(&vocab, max_len)?;
    let holdout_ds = holdout.map(|h| h.to_dataset::<f32>(&vocab, max_len)).transpose()?;
    let (model, metrics) = train_model(&train_ds, holdout_ds.as_ref(), &model_cfg, cfg.causal, &cfg.train)?;
    Ok((Checkpoint::new(model, vocab), metrics))
}

/// Predicted relations and diagrams for a split. Full diagrams are built only
/// when `full` is set; otherwise only the last column is filled.
pub fn predict_split(ckpt: &Checkpoint<f32>, split: &Split, full: bool) -> Result<(Vec<Vec<u8>>, Vec<CausalDiagram>)> {
    let max_len = ckpt.model.config.max_caption_len;
    let data = split.to_dataset::<f32>(&ckpt.vocab, max_len)?;
    let mut preds = Vec::with_capacity(data.len());
    let mut diagrams = Vec::with_capacity(data.len());
    for v in &data.videos {
        let p = predict_relations(&ckpt.model, v)?;
        let d = if full {
            build_diagram(&ckpt.model, v, &ckpt.vocab, max_len)?
        } else {
            let mut d = CausalDiagram::new(v.num_events());
            d.set_column(v.num_events(), &p);
            d
        };
        preds.push(p);
        diagrams.push(d);
    }
    Ok((preds, diagrams))
}

#[derive(Parser, Debug)]
#[command(name = "vgcm", version, about = "Multi-event video causal discovery")]
struct Cli {
    /// Root for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Flat `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set causal.front_door=off`.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint and the per-epoch metrics log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Split scored after every epoch; `none` disables it.
        #[arg(long, default_value = "test")]
        holdout: String,
    },
    /// Score a checkpoint on a split and write the metrics report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write full causal diagrams (DOT and JSON) for every video of a split.
    Diagram {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score a trivial predictor.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: BaselineMode,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Copy a dataset with one split perturbed.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: PerturbMode,
        /// Fraction of videos for `flip-labels`.
        #[arg(long, default_value_t = 0.0)]
        ratio: f64,
        /// Words or frames per event for the masking modes.
        #[arg(long, default_value_t = 0)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Compare analytic and finite-difference gradients in double precision.
    Gradcheck {
        /// Dataset to draw the video from; a small synthetic one otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0)]
        video: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 200)]
        coordinates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineMode {
    AllCausal,
    AllNoncausal,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PerturbMode {
    FlipLabels,
    MaskWords,
    MaskFrames,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

/// Runs the pipeline on `args` (program name first) and returns the exit code:
/// 0 on success, 1 on usage errors, 2 on data or validation errors.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: vgcm [--workdir DIR] [--config FILE] [--set KEY=VALUE]... <COMMAND>\nRun `vgcm --help` for the list of commands.");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn effective_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let path = resolve(&cli.workdir, path);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.set("train.seed", &seed).map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
    }
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("`--set {item}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| {
            Failure::Usage(format!("`--set {item}`: {e}\nvalid keys: {}", cfg.keys().join(", ")))
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Config echo for a file output: `report.json` gets `report.config.txt`.
fn config_beside(out: &Path) -> PathBuf {
    out.with_extension(CONFIG_FILE)
}

fn ground_truth(dir: &Path, split: &Split) -> Result<Option<Vec<CausalDiagram>>> {
    let path = dir.join(DIAGRAMS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let map: std::collections::HashMap<String, CausalDiagram> = diagrams_from_json(&text)?.into_iter().collect();
    split
        .samples
        .iter()
        .map(|s| map.get(&s.video_id).cloned().ok_or_else(|| Error::Size(format!("{}: no diagram for {}", path.display(), s.video_id))))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    let cfg = effective_config(&cli)?;
    let wd = cli.workdir.clone();
    match cli.command {
        Command::Synth { out } => {
            let out = resolve(&wd, &out);
            let data = generate_dataset(&cfg.synth)?;
            create_dir(&out)?;
            data.write(&out)?;
            write(&out.join(CONFIG_FILE), cfg.to_text())?;
            println!("wrote {} train and {} test videos to {}", data.train.len(), data.test.len(), out.display());
        }
        Command::Train { data, out, split, holdout } => {
            let (data, out) = (resolve(&wd, &data), resolve(&wd, &out));
            let train = Split::load(&data, &split)?;
            let holdout = if holdout == "none" { None } else { Some(Split::load(&data, &holdout)?) };
            info!("training on {} videos", train.len());
            let (ckpt, metrics) = train_run(&train, holdout.as_ref(), &cfg)?;
            create_dir(&out)?;
            ckpt.save(out.join(CHECKPOINT_FILE))?;
            write(&out.join(METRICS_FILE), metrics_log(&metrics))?;
            write(&out.join(CONFIG_FILE), cfg.to_text())?;
            if let Some(last) = metrics.last() {
                println!("{}", last.log_line());
            }
        }
        Command::Eval { data, checkpoint, out, split } => {
            let (data, out) = (resolve(&wd, &data), resolve(&wd, &out));
            let ckpt = Checkpoint::<f32>::load(resolve(&wd, &checkpoint))?;
            let samples = Split::load(&data, &split)?;
            let gt = ground_truth(&data, &samples)?;
            let (preds, diagrams) = predict_split(&ckpt, &samples, gt.is_some())?;
            let report = MetricsReport::score(&samples.samples, &preds, &diagrams, gt.as_deref())?;
            write(&out, report.to_json())?;
            write(&config_beside(&out), cfg.to_text())?;
            println!("accuracy {:.6}\tave_shd {:.6}", report.accuracy, report.ave_shd);
        }
        Command::Diagram { data, checkpoint, out, split } => {
            let (data, out) = (resolve(&wd, &data), resolve(&wd, &out));
            let ckpt = Checkpoint::<f32>::load(resolve(&wd, &checkpoint))?;
            let samples = Split::load(&data, &split)?;
            let (_, diagrams) = predict_split(&ckpt, &samples, true)?;
            create_dir(&out)?;
            let ids: Vec<String> = samples.samples.iter().map(|s| s.video_id.clone()).collect();
            for (id, d) in ids.iter().zip(&diagrams) {
                write(&out.join(format!("{id}.dot")), d.to_dot(id))?;
            }
            write(&out.join(DIAGRAMS_FILE), diagrams_to_json(&ids, &diagrams))?;
            write(&out.join(CONFIG_FILE), cfg.to_text())?;
            println!("wrote {} diagrams to {}", diagrams.len(), out.display());
        }
        Command::Baseline { data, out, mode, p, seed, split } => {
            let (data, out) = (resolve(&wd, &data), resolve(&wd, &out));
            let mode = match mode {
                BaselineMode::AllCausal => Baseline::AllCausal,
                BaselineMode::AllNoncausal => Baseline::AllNoncausal,
                BaselineMode::Random if (0.0..=1.0).contains(&p) => Baseline::Random { p, seed },
                BaselineMode::Random => return Err(Failure::Usage(format!("`--p {p}` must lie in [0, 1]"))),
            };
            let samples = Split::load(&data, &split)?;
            let gt = ground_truth(&data, &samples)?;
            let preds = baseline_relations(&mode, &samples.samples);
            let diagrams = baseline_diagrams(&mode, &samples.samples);
            let report = MetricsReport::score(&samples.samples, &preds, &diagrams, gt.as_deref())?;
            write(&out, report.to_json())?;
            write(&config_beside(&out), cfg.to_text())?;
            println!("{}\taccuracy {:.6}\tave_shd {:.6}", mode.name(), report.accuracy, report.ave_shd);
        }
        Command::Perturb { data, out, mode, ratio, n, seed, split } => {
            let (data, out) = (resolve(&wd, &data), resolve(&wd, &out));
            if fs::canonicalize(&data).ok() == fs::canonicalize(&out).ok() && out.exists() {
                return Err(Failure::Usage("`--out` must differ from `--data`".into()));
            }
            let mode = match mode {
                PerturbMode::FlipLabels if (0.0..=1.0).contains(&ratio) => Perturbation::FlipLabels { ratio },
                PerturbMode::FlipLabels => return Err(Failure::Usage(format!("`--ratio {ratio}` must lie in [0, 1]"))),
                PerturbMode::MaskWords => Perturbation::MaskWords { n },
                PerturbMode::MaskFrames => Perturbation::MaskFrames { n },
            };
            create_dir(&out)?;
            for name in ["train", "test"] {
                if name != split && data.join(format!("{name}.json")).exists() {
                    Split::load(&data, name)?.write(&out, name)?;
                }
            }
            let perturbed = perturb_dataset(&Split::load(&data, &split)?, mode, seed)?;
            perturbed.write(&out, &split)?;
            let gt = data.join(DIAGRAMS_FILE);
            if gt.exists() {
                fs::copy(&gt, out.join(DIAGRAMS_FILE)).map_err(|e| Error::io(&gt, e))?;
            }
            write(&out.join(CONFIG_FILE), cfg.to_text())?;
            println!("wrote perturbed `{split}` split to {}", out.display());
        }
        Command::Gradcheck { data, split, video, k, epsilon, coordinates, seed } => {
            let samples = match data {
                Some(d) => Split::load(resolve(&wd, &d), &split)?,
                None => generate_dataset(&SynthConfig { train_videos: video + 1, test_videos: 1, ..cfg.synth.clone() })?.train,
            };
            if video >= samples.len() {
                return Err(Failure::Usage(format!("`--video {video}` out of range for {} videos", samples.len())));
            }
            let one = Split { samples: vec![samples.samples[video].clone()], features: vec![samples.features[video].clone()] };
            let vocab: Vocabulary = one.vocabulary(cfg.model.vocab_size);
            let model_cfg = ModelConfig { vocab_size: vocab.len(), feature_dim: one.features[0].cols(), ..cfg.model.clone() };
            let ds = one.to_dataset::<f64>(&vocab, model_cfg.max_caption_len)?;
            let model = Vgcm::<f64>::new(model_cfg, cfg.causal, cfg.train.seed)?;
            let n = ds.videos[0].num_events();
            if k == 0 || k >= n {
                return Err(Failure::Usage(format!("`--k {k}` must lie in [1, {}]", n - 1)));
            }
            let gc = gradient_check(&model, &ds.videos[0], k, epsilon, coordinates, seed, &cfg.train.weights, cfg.train.similarity_gate)?;
            println!("max_rel_error {:.3e} over {} coordinates (epsilon {:e})", gc.max_rel_error, gc.coordinates, gc.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_reproduces_config() {
        let mut cfg = RunConfig::default();
        cfg.set("loss.lambda_V", "0").unwrap();
        cfg.set("causal.front_door", "off").unwrap();
        cfg.set("train.similarity_gate", "causal").unwrap();
        cfg.set("model.dropout", "0.25").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), "echo").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.weights.lambda_v, 0.0);
        assert!(!back.causal.enable_front_door);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let mut cfg = RunConfig::default();
        for (k, v) in [("model.depth", "3"), ("loss.weights", "1"), ("train.weights", "1"), ("nope", "1"), ("extra.x", "1")] {
            assert!(matches!(cfg.set(k, v), Err(Error::Config(_))), "{k}");
        }
        assert!(cfg.set("train.epochs", "-1").is_err());
        assert!(cfg.set("train.similarity_gate", "sometimes").is_err());
        assert!(cfg.set("causal.counterfactual", "maybe").is_err());
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn entries_cover_every_section() {
        let keys = RunConfig::default().keys();
        for k in ["model.d_model", "train.seed", "loss.lambda_C", "loss.lambda_S", "synth.bridge_rate", "causal.front_door", "causal.counterfactual"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }
}
