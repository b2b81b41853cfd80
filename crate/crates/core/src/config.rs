//! Flat `key = value` run configuration covering the task, model and training.

use std::fmt::Display;
use std::str::FromStr;

use crate::attention::LambdaMode;
use crate::data::{TaskKind, TaskSpec};
use crate::error::{PitError, Result};
use crate::model::{PiTConfig, Variant};
use crate::training::{LossKind, Metric, TrainConfig};

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "task.kind",
    "task.n_train",
    "task.n_test",
    "task.resolution",
    "task.output_resolution",
    "task.length_scale",
    "task.variance",
    "task.period",
    "task.kernel_width",
    "task.shift",
    "task.darcy_low",
    "task.darcy_high",
    "task.forcing",
    "task.quad_factor",
    "model.variant",
    "model.coord_features",
    "model.encoding_dim",
    "model.depth",
    "model.heads",
    "model.quantile_in",
    "model.quantile_out",
    "model.mlp_hidden",
    "model.latent_shape",
    "model.lambda_mode",
    "model.decoder_block",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.loss",
    "train.metric",
    "train.beta1",
    "train.beta2",
    "train.eps",
];

/// One seed drives everything: data draws, initialization and shuffling each take
/// their own stream of it.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSpec,
    /// Mesh dimension and channel counts are derived from the task.
    pub model: PiTConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            task: TaskSpec::default(),
            model: PiTConfig::default(),
            train: TrainConfig::default(),
        };
        c.sync();
        c
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn named<T>(v: &str, parse: fn(&str) -> Option<T>, options: &str) -> std::result::Result<T, String> {
    parse(v).ok_or_else(|| format!("unknown value `{v}`, expected one of {options}"))
}

fn shape(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split('x').map(|s| num::<usize>(s.trim())).collect()
}

impl RunConfig {
    /// Copies the seed into the task and derives model geometry from the task.
    pub fn sync(&mut self) {
        self.task.seed = self.seed;
        self.train.seed = self.seed;
        self.model.dim = self.task.kind.dim();
        self.model.input_channels = 1;
        self.model.output_channels = 1;
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.task;
        let m = &mut self.model;
        let r = &mut self.train;
        match key {
            "seed" => self.seed = num(v)?,
            "task.kind" => t.kind = named(v, TaskKind::parse, "smoothing, advection, darcy")?,
            "task.n_train" => t.n_train = num(v)?,
            "task.n_test" => t.n_test = num(v)?,
            "task.resolution" => t.resolution = num(v)?,
            "task.output_resolution" => t.output_resolution = num(v)?,
            "task.length_scale" => t.grf.length_scale = num(v)?,
            "task.variance" => t.grf.variance = num(v)?,
            "task.period" => t.grf.period = num(v)?,
            "task.kernel_width" => t.kernel_width = num(v)?,
            "task.shift" => t.shift = num(v)?,
            "task.darcy_low" => t.darcy_low = num(v)?,
            "task.darcy_high" => t.darcy_high = num(v)?,
            "task.forcing" => t.forcing = num(v)?,
            "task.quad_factor" => t.quad_factor = num(v)?,
            "model.variant" => m.variant = named(v, Variant::parse, "posatt, selfatt_a, selfatt_b, selfposatt")?,
            "model.coord_features" => m.coord_features = num(v)?,
            "model.encoding_dim" => m.encoding_dim = num(v)?,
            "model.depth" => m.depth = num(v)?,
            "model.heads" => m.heads = num(v)?,
            "model.quantile_in" => m.quantile_in = num(v)?,
            "model.quantile_out" => m.quantile_out = num(v)?,
            "model.mlp_hidden" => m.mlp_hidden = num(v)?,
            "model.latent_shape" => m.latent_shape = shape(v)?,
            "model.lambda_mode" => m.lambda_mode = named(v, LambdaMode::parse, "square, tan")?,
            "model.decoder_block" => m.decoder_block = num(v)?,
            "train.epochs" => r.epochs = num(v)?,
            "train.batch_size" => r.batch_size = num(v)?,
            "train.lr" => r.lr = num(v)?,
            "train.loss" => r.loss = named(v, LossKind::parse, "rel_l1_mean, rel_l2_mean")?,
            "train.metric" => r.metric = named(v, Metric::parse, "rel_l1_median, rel_l2_mean")?,
            "train.beta1" => r.beta1 = num(v)?,
            "train.beta2" => r.beta2 = num(v)?,
            "train.eps" => r.eps = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// `(key, value)` for every key in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (t, m, r) = (&self.task, &self.model, &self.train);
        let shape = m
            .latent_shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        let values = [
            self.seed.to_string(),
            t.kind.name().into(),
            t.n_train.to_string(),
            t.n_test.to_string(),
            t.resolution.to_string(),
            t.output_resolution.to_string(),
            t.grf.length_scale.to_string(),
            t.grf.variance.to_string(),
            t.grf.period.to_string(),
            t.kernel_width.to_string(),
            t.shift.to_string(),
            t.darcy_low.to_string(),
            t.darcy_high.to_string(),
            t.forcing.to_string(),
            t.quad_factor.to_string(),
            m.variant.name().into(),
            m.coord_features.to_string(),
            m.encoding_dim.to_string(),
            m.depth.to_string(),
            m.heads.to_string(),
            m.quantile_in.to_string(),
            m.quantile_out.to_string(),
            m.mlp_hidden.to_string(),
            shape,
            m.lambda_mode.name().into(),
            m.decoder_block.to_string(),
            r.epochs.to_string(),
            r.batch_size.to_string(),
            r.lr.to_string(),
            r.loss.name().into(),
            r.metric.name().into(),
            r.beta1.to_string(),
            r.beta2.to_string(),
            r.eps.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not present keep their
    /// defaults. Unknown, duplicate or unparsable keys are errors carrying the
    /// 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last_line = line;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |key: &str, message: String| PitError::ConfigKey {
                line,
                key: key.to_string(),
                message,
            };
            let Some((key, value)) = content.split_once('=') else {
                return Err(err(content, "expected `key = value`".into()));
            };
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(err(key, "missing value".into()));
            }
            if let Some(&k) = KEYS.iter().find(|&&k| k == key) {
                if seen.contains(&k) {
                    return Err(err(key, "duplicate key".into()));
                }
                seen.push(k);
            }
            cfg.set(key, value).map_err(|m| err(key, m))?;
        }
        cfg.sync();
        cfg.validate().map_err(|e| PitError::ConfigKey {
            line: last_line,
            key: "<config>".into(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
