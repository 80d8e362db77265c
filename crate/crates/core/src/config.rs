//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decode::{DecodeMode, DecodePolicy, ScoreDomain};
use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::model::ModelConfig;
use crate::train::{OrderPolicy, TrainConfig};

pub const KEYS: [&str; 24] = [
    "grid_h",
    "grid_w",
    "vocab",
    "cond_vocab",
    "cond_len",
    "dim",
    "depth",
    "heads",
    "dropout",
    "img_loss_weight",
    "lr",
    "batch",
    "epochs_random",
    "epochs_finetune",
    "plateau_factor",
    "plateau_patience",
    "lambda",
    "topk",
    "score_domain",
    "policy",
    "seed",
    "data_path",
    "ckpt_path",
    "out_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Random-order stage; `train.epochs` is `epochs_random`.
    pub train: TrainConfig,
    pub epochs_finetune: usize,
    /// Decoding policy; `policy` selects its mode.
    pub decode: DecodePolicy,
    pub seed: u64,
    pub data_path: PathBuf,
    pub ckpt_path: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig {
            epochs: 300,
            policy: OrderPolicy::Random,
            ..TrainConfig::default()
        };
        Self {
            decode: DecodePolicy::ordered(model.vocab),
            model,
            train,
            epochs_finetune: 150,
            seed: 0,
            data_path: PathBuf::from("runs/corpus.oard"),
            ckpt_path: PathBuf::from("runs/model.ckpt"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Validation(format!("line {line}: cannot parse {key} = {value:?}")))
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        let mut topk_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("line {line}: expected key = value")))?;
            let (k, v) = (k.trim(), v.trim());
            let Some(&key) = KEYS.iter().find(|&&x| x == k) else {
                return Err(Error::Validation(format!("line {line}: unknown key {k:?}")));
            };
            if seen.contains(&key) {
                return Err(Error::Validation(format!("line {line}: duplicate key {k:?}")));
            }
            seen.push(key);
            let m = &mut c.model;
            match key {
                "grid_h" => m.grid.rows = parse(k, v, line)?,
                "grid_w" => m.grid.cols = parse(k, v, line)?,
                "vocab" => m.vocab = parse(k, v, line)?,
                "cond_vocab" => m.cond_vocab = parse(k, v, line)?,
                "cond_len" => m.cond_len = parse(k, v, line)?,
                "dim" => m.dim = parse(k, v, line)?,
                "depth" => m.depth = parse(k, v, line)?,
                "heads" => m.heads = parse(k, v, line)?,
                "dropout" => m.dropout = parse(k, v, line)?,
                "img_loss_weight" => m.img_loss_weight = parse(k, v, line)?,
                "lr" => c.train.lr = parse(k, v, line)?,
                "batch" => c.train.batch_size = parse(k, v, line)?,
                "epochs_random" => c.train.epochs = parse(k, v, line)?,
                "epochs_finetune" => c.epochs_finetune = parse(k, v, line)?,
                "plateau_factor" => c.train.plateau_factor = parse(k, v, line)?,
                "plateau_patience" => c.train.plateau_patience = parse(k, v, line)?,
                "lambda" => c.decode.lambda = parse(k, v, line)?,
                "topk" => {
                    c.decode.top_k = parse(k, v, line)?;
                    topk_set = true;
                }
                "score_domain" => c.decode.domain = parse::<ScoreDomain>(k, v, line)?,
                "policy" => c.decode.mode = parse::<DecodeMode>(k, v, line)?,
                "seed" => c.seed = parse(k, v, line)?,
                "data_path" => c.data_path = PathBuf::from(v),
                "ckpt_path" => c.ckpt_path = PathBuf::from(v),
                "out_dir" => c.out_dir = PathBuf::from(v),
                _ => unreachable!("key list and match arms agree"),
            }
        }
        if c.model.heads == 0 || c.model.dim % c.model.heads != 0 {
            return Err(Error::Validation(format!(
                "dim {} is not divisible by heads {}",
                c.model.dim, c.model.heads
            )));
        }
        c.model.head_dim = c.model.dim / c.model.heads;
        if !topk_set {
            c.decode.top_k = (c.model.vocab / 2).max(1);
        }
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        GridShape::new(self.model.grid.rows, self.model.grid.cols)?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.model.img_loss_weight > 0.0) {
            return Err(Error::Validation("img_loss_weight must be > 0".into()));
        }
        self.decode.validate(self.model.vocab)
    }

    /// Applies a new seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Renders every key; parsing the result gives back the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("grid_h", m.grid.rows.to_string());
        kv("grid_w", m.grid.cols.to_string());
        kv("vocab", m.vocab.to_string());
        kv("cond_vocab", m.cond_vocab.to_string());
        kv("cond_len", m.cond_len.to_string());
        kv("dim", m.dim.to_string());
        kv("depth", m.depth.to_string());
        kv("heads", m.heads.to_string());
        kv("dropout", format!("{:?}", m.dropout));
        kv("img_loss_weight", format!("{:?}", m.img_loss_weight));
        kv("lr", format!("{:?}", self.train.lr));
        kv("batch", self.train.batch_size.to_string());
        kv("epochs_random", self.train.epochs.to_string());
        kv("epochs_finetune", self.epochs_finetune.to_string());
        kv("plateau_factor", format!("{:?}", self.train.plateau_factor));
        kv("plateau_patience", self.train.plateau_patience.to_string());
        kv("lambda", format!("{:?}", self.decode.lambda));
        kv("topk", self.decode.top_k.to_string());
        kv("score_domain", self.decode.domain.to_string());
        kv("policy", self.decode.mode.to_string());
        kv("seed", self.seed.to_string());
        kv("data_path", self.data_path.display().to_string());
        kv("ckpt_path", self.ckpt_path.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}
