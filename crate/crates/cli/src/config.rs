//! Run configuration: `key = value` files with command-line overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use marginlab::data::SyntheticSpec;
use marginlab::losses::{FloorMode, LossVariant};
use marginlab::model::ModelDims;
use marginlab::{MarginConfig, TrainConfig};

use crate::error::CliError;

/// Every config key with its help text. Flags are the kebab-case spelling.
pub const KEYS: &[(&str, &str)] = &[
    (
        "data_dir",
        "dataset directory (features, split and trial files)",
    ),
    (
        "out_dir",
        "output directory for checkpoints, CSVs and the config echo",
    ),
    (
        "checkpoint",
        "checkpoint path [default: <out_dir>/model.ckpt]",
    ),
    ("num_speakers", "synthetic speakers (≥ 2)"),
    ("utts_per_speaker", "utterances per speaker (≥ 2)"),
    ("d_in", "input feature dimension"),
    (
        "within_std",
        "utterance noise std around a speaker centroid",
    ),
    ("between_std", "std of the speaker centroids"),
    ("data_seed", "seed of the data generator"),
    (
        "num_target",
        "target trials to sample from the heldout split",
    ),
    (
        "num_nontarget",
        "non-target trials to sample from the heldout split",
    ),
    ("trial_seed", "seed of the trial sampler"),
    ("hidden", "hidden layer width"),
    ("d_emb", "embedding dimension (≥ 2)"),
    ("bias", "use layer biases (true/false)"),
    ("model_seed", "seed of the parameter initialization"),
    ("loss", "softmax | am | am_reformulated | am_factored | ram"),
    ("m", "additive margin on the cosine scale, in [0, 2]"),
    ("s", "scale applied to the cosine logits (> 0)"),
    ("floor_mode", "RAM floor: literal | zero_floor"),
    ("lr", "learning rate (≥ 0)"),
    ("momentum", "momentum in [0, 1)"),
    ("epochs", "training epochs"),
    ("batch_size", "mini-batch size"),
    ("train_seed", "seed of the shuffling generator"),
    ("shuffle", "reshuffle every epoch (true/false)"),
    (
        "easy_threshold",
        "target posterior at or above which a sample is easy",
    ),
    (
        "hard_threshold",
        "target posterior at or below which a sample is hard",
    ),
    ("grad_eps", "finite-difference step, in [1e-7, 1e-4]"),
    ("delta_min", "loss-probe: smallest Δ"),
    ("delta_max", "loss-probe: largest Δ"),
    ("delta_step", "loss-probe: Δ increment"),
    (
        "probe_variants",
        "loss-probe: comma-separated loss variants",
    ),
    ("probe_m", "loss-probe: comma-separated margins"),
    ("probe_s", "loss-probe: comma-separated scales"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub d_in: usize,
    pub within_std: f64,
    pub between_std: f64,
    pub data_seed: u64,
    pub num_target: usize,
    pub num_nontarget: usize,
    pub trial_seed: u64,
    pub hidden: usize,
    pub d_emb: usize,
    pub bias: bool,
    pub model_seed: u64,
    pub loss: LossVariant,
    pub m: f64,
    pub s: f64,
    pub floor_mode: FloorMode,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_seed: u64,
    pub shuffle: bool,
    pub easy_threshold: f64,
    pub hard_threshold: f64,
    pub grad_eps: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub delta_step: f64,
    pub probe_variants: Vec<LossVariant>,
    pub probe_m: Vec<f64>,
    pub probe_s: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        let dims = ModelDims::default();
        let train = TrainConfig::with_loss(MarginConfig::voxceleb_am());
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            num_speakers: spec.num_speakers,
            utts_per_speaker: spec.utts_per_speaker,
            d_in: spec.d_in,
            within_std: spec.within_std,
            between_std: spec.between_std,
            data_seed: spec.seed,
            num_target: 500,
            num_nontarget: 2000,
            trial_seed: 11,
            hidden: dims.hidden,
            d_emb: dims.d_emb,
            bias: true,
            model_seed: 1,
            loss: train.loss.variant(),
            m: train.loss.m(),
            s: train.loss.s(),
            floor_mode: FloorMode::Literal,
            lr: train.lr,
            momentum: train.momentum,
            epochs: train.epochs,
            batch_size: train.batch_size,
            train_seed: train.seed,
            shuffle: train.shuffle,
            easy_threshold: 0.99,
            hard_threshold: 0.5,
            grad_eps: 1e-5,
            delta_min: -2.0,
            delta_max: 2.0,
            delta_step: 0.05,
            probe_variants: LossVariant::ALL.to_vec(),
            probe_m: vec![0.0, 0.2, 0.35],
            probe_s: vec![1.0, 30.0],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "num_speakers" => self.num_speakers = parse(key, v)?,
            "utts_per_speaker" => self.utts_per_speaker = parse(key, v)?,
            "d_in" => self.d_in = parse(key, v)?,
            "within_std" => self.within_std = parse(key, v)?,
            "between_std" => self.between_std = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "num_target" => self.num_target = parse(key, v)?,
            "num_nontarget" => self.num_nontarget = parse(key, v)?,
            "trial_seed" => self.trial_seed = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "d_emb" => self.d_emb = parse(key, v)?,
            "bias" => self.bias = parse(key, v)?,
            "model_seed" => self.model_seed = parse(key, v)?,
            "loss" => self.loss = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "s" => self.s = parse(key, v)?,
            "floor_mode" => self.floor_mode = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "train_seed" => self.train_seed = parse(key, v)?,
            "shuffle" => self.shuffle = parse(key, v)?,
            "easy_threshold" => self.easy_threshold = parse(key, v)?,
            "hard_threshold" => self.hard_threshold = parse(key, v)?,
            "grad_eps" => self.grad_eps = parse(key, v)?,
            "delta_min" => self.delta_min = parse(key, v)?,
            "delta_max" => self.delta_max = parse(key, v)?,
            "delta_step" => self.delta_step = parse(key, v)?,
            "probe_variants" => self.probe_variants = parse_list(key, v)?,
            "probe_m" => self.probe_m = parse_list(key, v)?,
            "probe_s" => self.probe_s = parse_list(key, v)?,
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of `key`, in the form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> String {
        match key {
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint" => self
                .checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "num_speakers" => self.num_speakers.to_string(),
            "utts_per_speaker" => self.utts_per_speaker.to_string(),
            "d_in" => self.d_in.to_string(),
            "within_std" => self.within_std.to_string(),
            "between_std" => self.between_std.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "num_target" => self.num_target.to_string(),
            "num_nontarget" => self.num_nontarget.to_string(),
            "trial_seed" => self.trial_seed.to_string(),
            "hidden" => self.hidden.to_string(),
            "d_emb" => self.d_emb.to_string(),
            "bias" => self.bias.to_string(),
            "model_seed" => self.model_seed.to_string(),
            "loss" => self.loss.to_string(),
            "m" => self.m.to_string(),
            "s" => self.s.to_string(),
            "floor_mode" => self.floor_mode.name().to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "train_seed" => self.train_seed.to_string(),
            "shuffle" => self.shuffle.to_string(),
            "easy_threshold" => self.easy_threshold.to_string(),
            "hard_threshold" => self.hard_threshold.to_string(),
            "grad_eps" => self.grad_eps.to_string(),
            "delta_min" => self.delta_min.to_string(),
            "delta_max" => self.delta_max.to_string(),
            "delta_step" => self.delta_step.to_string(),
            "probe_variants" => join(&self.probe_variants),
            "probe_m" => join(&self.probe_m),
            "probe_s" => join(&self.probe_s),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("config line {}: expected `key = value`", n + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Config(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Path(format!("reading config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every key, one `key = value` line each, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# effective marginlab configuration\n");
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_speakers: self.num_speakers,
            utts_per_speaker: self.utts_per_speaker,
            d_in: self.d_in,
            within_std: self.within_std,
            between_std: self.between_std,
            seed: self.data_seed,
        }
    }

    pub fn margin(&self) -> Result<MarginConfig, CliError> {
        Ok(MarginConfig::new(self.loss, self.m, self.s)?.with_floor_mode(self.floor_mode))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            loss: self.margin()?,
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.train_seed,
            shuffle: self.shuffle,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_dims(&self, d_in: usize, classes: usize) -> ModelDims {
        ModelDims {
            d_in,
            hidden: self.hidden,
            d_emb: self.d_emb,
            classes,
        }
    }

    /// Δ values of the loss-probe grid, `delta_min + k·delta_step` up to `delta_max`.
    pub fn delta_grid(&self) -> Result<Vec<f64>, CliError> {
        let (lo, hi, step) = (self.delta_min, self.delta_max, self.delta_step);
        if !(lo.is_finite() && hi.is_finite() && step.is_finite()) || step <= 0.0 || lo > hi {
            return Err(CliError::Config(format!(
                "empty Δ grid (delta_min {lo}, delta_max {hi}, delta_step {step})"
            )));
        }
        if lo < -2.0 || hi > 2.0 {
            return Err(CliError::Config(format!(
                "Δ grid [{lo}, {hi}] leaves the cosine range [-2, 2]"
            )));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        // round away accumulated representation noise (0.4 + 2·0.4 → 1.2)
        Ok((0..count)
            .map(|k| ((lo + k as f64 * step) * 1e12).round() / 1e12)
            .collect())
    }
}

/// Kebab-case flag name for a config key.
pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}
