//! Run configuration: a flat `key = value` text format with dotted section
//! prefixes (`model.`, `train.`, `data.`, `eval.`). Unknown keys are
//! rejected, and parse -> serialize -> parse is a fixed point.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::ScoreBackend;
use crate::model::{DifferenceMode, ModelConfig, StreamVariant};
use crate::train::TrainConfig;

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub probe_cam: usize,
    pub gallery_cam: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            probe_cam: 0,
            gallery_cam: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub backend: ScoreBackend,
    pub trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            backend: ScoreBackend::Verification,
            trials: 10,
        }
    }
}

/// Everything a run needs; defaults are the desk-scale configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(2),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.channel_scale" => self.model.channel_scale = parse_num(key, v)?,
            "model.embedding_dim" => self.model.embedding_dim = parse_num(key, v)?,
            "model.num_identities" => self.model.num_identities = parse_num(key, v)?,
            "model.difference_mode" => {
                self.model.difference_mode = match v {
                    "squared" => DifferenceMode::Squared,
                    "plain" => DifferenceMode::Plain,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected squared or plain, got {v:?}"
                        )))
                    }
                }
            }
            "model.dropout" => self.model.dropout = parse_num(key, v)?,
            "model.use_fusion" => self.model.use_fusion = parse_bool(key, v)?,
            "model.use_classnet" => self.model.use_classnet = parse_bool(key, v)?,
            "model.stream_variant" => {
                self.model.stream_variant = match v {
                    "mudeep" => StreamVariant::MuDeep,
                    "inception_a" => StreamVariant::InceptionA,
                    "inception_b" => StreamVariant::InceptionB,
                    "inception_a_plus_b" => StreamVariant::InceptionAPlusB,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: unknown variant {v:?} (mudeep, inception_a, inception_b, inception_a_plus_b)"
                        )))
                    }
                }
            }
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.lr0" => self.train.lr0 = parse_num(key, v)?,
            "train.decay_every" => self.train.decay_every = parse_num(key, v)?,
            "train.decay_factor" => self.train.decay_factor = parse_num(key, v)?,
            "train.neg_pos_ratio" => self.train.neg_pos_ratio = parse_num(key, v)?,
            "train.aug_copies" => self.train.aug_copies = parse_num(key, v)?,
            "train.stage1_iters" => self.train.stage_iters.0 = parse_num(key, v)?,
            "train.stage2_iters" => self.train.stage_iters.1 = parse_num(key, v)?,
            "train.stage3_iters" => self.train.stage_iters.2 = parse_num(key, v)?,
            "train.cls_loss_weight" => self.train.cls_loss_weight = parse_num(key, v)?,
            "train.ver_loss_weight" => self.train.ver_loss_weight = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "data.manifest" => {
                self.data.manifest = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "data.probe_cam" => self.data.probe_cam = parse_num(key, v)?,
            "data.gallery_cam" => self.data.gallery_cam = parse_num(key, v)?,
            "eval.backend" => {
                self.eval.backend = match v {
                    "verification" => ScoreBackend::Verification,
                    "euclidean" => ScoreBackend::Euclidean,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected verification or euclidean, got {v:?}"
                        )))
                    }
                }
            }
            "eval.trials" => self.eval.trials = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Parses the full text format: `key = value` lines, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("config line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "model.channel_scale = {}", self.model.channel_scale);
        let _ = writeln!(w, "model.embedding_dim = {}", self.model.embedding_dim);
        let _ = writeln!(w, "model.num_identities = {}", self.model.num_identities);
        let _ = writeln!(
            w,
            "model.difference_mode = {}",
            match self.model.difference_mode {
                DifferenceMode::Squared => "squared",
                DifferenceMode::Plain => "plain",
            }
        );
        let _ = writeln!(w, "model.dropout = {}", self.model.dropout);
        let _ = writeln!(w, "model.use_fusion = {}", self.model.use_fusion);
        let _ = writeln!(w, "model.use_classnet = {}", self.model.use_classnet);
        let _ = writeln!(
            w,
            "model.stream_variant = {}",
            match self.model.stream_variant {
                StreamVariant::MuDeep => "mudeep",
                StreamVariant::InceptionA => "inception_a",
                StreamVariant::InceptionB => "inception_b",
                StreamVariant::InceptionAPlusB => "inception_a_plus_b",
            }
        );
        let _ = writeln!(w, "train.batch_size = {}", self.train.batch_size);
        let _ = writeln!(w, "train.lr0 = {}", self.train.lr0);
        let _ = writeln!(w, "train.decay_every = {}", self.train.decay_every);
        let _ = writeln!(w, "train.decay_factor = {}", self.train.decay_factor);
        let _ = writeln!(w, "train.neg_pos_ratio = {}", self.train.neg_pos_ratio);
        let _ = writeln!(w, "train.aug_copies = {}", self.train.aug_copies);
        let _ = writeln!(w, "train.stage1_iters = {}", self.train.stage_iters.0);
        let _ = writeln!(w, "train.stage2_iters = {}", self.train.stage_iters.1);
        let _ = writeln!(w, "train.stage3_iters = {}", self.train.stage_iters.2);
        let _ = writeln!(w, "train.cls_loss_weight = {}", self.train.cls_loss_weight);
        let _ = writeln!(w, "train.ver_loss_weight = {}", self.train.ver_loss_weight);
        let _ = writeln!(w, "train.seed = {}", self.train.seed);
        let _ = writeln!(
            w,
            "data.manifest = {}",
            self.data
                .manifest
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let _ = writeln!(w, "data.probe_cam = {}", self.data.probe_cam);
        let _ = writeln!(w, "data.gallery_cam = {}", self.data.gallery_cam);
        let _ = writeln!(
            w,
            "eval.backend = {}",
            match self.eval.backend {
                ScoreBackend::Verification => "verification",
                ScoreBackend::Euclidean => "euclidean",
            }
        );
        let _ = writeln!(w, "eval.trials = {}", self.eval.trials);
        s
    }
}
