//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::contrastive::DetailCosine;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{LrSchedule, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub tasks: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            query: 15,
            tasks: 600,
            seed: 1,
        }
    }
}

/// Every tunable of a run. `base_classes = 0` means "take the count from the
/// training split".
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub base_classes: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub spatial_width: usize,
    pub channel_reduction: usize,
    pub detail_dim: usize,
    pub eval: EvalConfig,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            train: TrainConfig::default(),
            encoder: m.encoder,
            base_classes: 0,
            proj_hidden: m.proj_hidden,
            proj_dim: m.proj_dim,
            spatial_width: m.spatial_width,
            channel_reduction: m.channel_reduction,
            detail_dim: m.detail_dim,
            eval: EvalConfig::default(),
            deterministic: true,
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true or false")),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|x| parse_num::<usize>(x.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 33] = [
        "lr",
        "momentum",
        "weight_decay",
        "alpha",
        "beta",
        "gamma",
        "epochs",
        "batch_n",
        "seed",
        "lr_schedule",
        "tau",
        "tau_detail",
        "detail_cosine",
        "crop_fraction",
        "flip_prob",
        "jitter_range",
        "input_height",
        "input_width",
        "input_channels",
        "channels",
        "residual",
        "base_classes",
        "proj_hidden",
        "proj_dim",
        "spatial_width",
        "channel_reduction",
        "detail_dim",
        "way",
        "shot",
        "query",
        "tasks",
        "eval_seed",
        "deterministic",
    ];

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "lr" => t.lr = parse_num(v)?,
            "momentum" => t.momentum = parse_num(v)?,
            "weight_decay" => t.weight_decay = parse_num(v)?,
            "alpha" => t.alpha = parse_num(v)?,
            "beta" => t.beta = parse_num(v)?,
            "gamma" => t.gamma = parse_num(v)?,
            "epochs" => t.epochs = parse_num(v)?,
            "batch_n" => t.batch_n = parse_num(v)?,
            "seed" => t.seed = parse_num(v)?,
            "lr_schedule" => {
                t.lr_schedule = LrSchedule::parse(v).ok_or(format!("unknown schedule `{v}`"))?
            }
            "tau" => t.tau = parse_num(v)?,
            "tau_detail" => t.tau_detail = parse_num(v)?,
            "detail_cosine" => {
                t.detail_cosine = DetailCosine::parse(v)
                    .ok_or(format!("`{v}` is not flattened or per_position"))?
            }
            "crop_fraction" => t.augmentation.crop_fraction = parse_num(v)?,
            "flip_prob" => t.augmentation.flip_prob = parse_num(v)?,
            "jitter_range" => t.augmentation.jitter_range = parse_num(v)?,
            "input_height" => self.encoder.input_height = parse_num(v)?,
            "input_width" => self.encoder.input_width = parse_num(v)?,
            "input_channels" => self.encoder.input_channels = parse_num(v)?,
            "channels" => self.encoder.channels_per_block = parse_list(v)?,
            "residual" => self.encoder.residual = parse_bool(v)?,
            "base_classes" => self.base_classes = parse_num(v)?,
            "proj_hidden" => self.proj_hidden = parse_num(v)?,
            "proj_dim" => self.proj_dim = parse_num(v)?,
            "spatial_width" => self.spatial_width = parse_num(v)?,
            "channel_reduction" => self.channel_reduction = parse_num(v)?,
            "detail_dim" => self.detail_dim = parse_num(v)?,
            "way" => self.eval.way = parse_num(v)?,
            "shot" => self.eval.shot = parse_num(v)?,
            "query" => self.eval.query = parse_num(v)?,
            "tasks" => self.eval.tasks = parse_num(v)?,
            "eval_seed" => self.eval.seed = parse_num(v)?,
            "deterministic" => self.deterministic = parse_bool(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "lr" => t.lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "alpha" => t.alpha.to_string(),
            "beta" => t.beta.to_string(),
            "gamma" => t.gamma.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_n" => t.batch_n.to_string(),
            "seed" => t.seed.to_string(),
            "lr_schedule" => t.lr_schedule.name().to_string(),
            "tau" => t.tau.to_string(),
            "tau_detail" => t.tau_detail.to_string(),
            "detail_cosine" => t.detail_cosine.name().to_string(),
            "crop_fraction" => t.augmentation.crop_fraction.to_string(),
            "flip_prob" => t.augmentation.flip_prob.to_string(),
            "jitter_range" => t.augmentation.jitter_range.to_string(),
            "input_height" => self.encoder.input_height.to_string(),
            "input_width" => self.encoder.input_width.to_string(),
            "input_channels" => self.encoder.input_channels.to_string(),
            "channels" => join(&self.encoder.channels_per_block),
            "residual" => self.encoder.residual.to_string(),
            "base_classes" => self.base_classes.to_string(),
            "proj_hidden" => self.proj_hidden.to_string(),
            "proj_dim" => self.proj_dim.to_string(),
            "spatial_width" => self.spatial_width.to_string(),
            "channel_reduction" => self.channel_reduction.to_string(),
            "detail_dim" => self.detail_dim.to_string(),
            "way" => self.eval.way.to_string(),
            "shot" => self.eval.shot.to_string(),
            "query" => self.eval.query.to_string(),
            "tasks" => self.eval.tasks.to_string(),
            "eval_seed" => self.eval.seed.to_string(),
            "deterministic" => self.deterministic.to_string(),
            _ => unreachable!("dump walks KEYS"),
        }
    }

    /// Parses config text on top of the defaults. Keys may appear at most
    /// once; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && Self::KEYS.contains(&key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value)
                .map_err(|m| err(format!("{key}: {m}")))?;
        }
        Ok(cfg)
    }

    /// Fully resolved config; `parse(dump())` reproduces `self`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// Network shape for `classes` training classes (used when
    /// `base_classes` is 0).
    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            num_classes: if self.base_classes == 0 {
                classes
            } else {
                self.base_classes
            },
            proj_hidden: self.proj_hidden,
            proj_dim: self.proj_dim,
            spatial_width: self.spatial_width,
            channel_reduction: self.channel_reduction,
            detail_dim: self.detail_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model_config(self.base_classes.max(2)).validate()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn defaults_carry_the_reference_settings() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.lr, 0.05);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 0.0005);
        assert_eq!(
            (c.train.alpha, c.train.beta, c.train.gamma),
            (1.0, 0.1, 1.0)
        );
        assert_eq!(c.eval.tasks, 600);
        assert_eq!((c.eval.way, c.eval.shot, c.eval.query), (5, 1, 15));
        c.validate().unwrap();
    }

    #[test]
    fn parses_values_and_comments() {
        let c = RunConfig::parse("# run\nlr = 0.1  # faster\n\nchannels=8, 16\nresidual = true\ndetail_cosine = per_position\n").unwrap();
        assert_eq!(c.train.lr, 0.1);
        assert_eq!(c.encoder.channels_per_block, vec![8, 16]);
        assert!(c.encoder.residual);
        assert_eq!(c.train.detail_cosine, DetailCosine::PerPosition);
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [
            ("lr = 0.1\nbogus = 3\n", 2),
            ("\n\nlr 0.1\n", 3),
            ("epochs = -1\n", 1),
            ("residual = yes\n", 1),
            ("lr = 1\nlr = 2\n", 2),
            ("lr_schedule = step\n", 1),
        ] {
            match RunConfig::parse(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn dump_lists_every_key_once() {
        let d = RunConfig::default().dump();
        assert_eq!(d.lines().count(), RunConfig::KEYS.len());
        for k in RunConfig::KEYS {
            assert_eq!(
                d.lines()
                    .filter(|l| l.starts_with(&format!("{k} =")))
                    .count(),
                1
            );
        }
    }

    proptest! {
        #[test]
        fn dump_is_a_fixed_point(
            lr in 1e-6f64..10.0,
            beta in 0.0f64..5.0,
            tau in 1e-3f64..2.0,
            epochs in 0usize..1000,
            seed in any::<u64>(),
            chans in prop::collection::vec(1usize..128, 1..5),
            residual in any::<bool>(),
            per_pos in any::<bool>(),
        ) {
            let mut c = RunConfig::default();
            c.train.lr = lr;
            c.train.beta = beta;
            c.train.tau = tau;
            c.train.epochs = epochs;
            c.train.seed = seed;
            c.encoder.channels_per_block = chans;
            c.encoder.residual = residual;
            if per_pos {
                c.train.detail_cosine = DetailCosine::PerPosition;
            }
            let again = RunConfig::parse(&c.dump()).unwrap();
            prop_assert_eq!(&again, &c);
            prop_assert_eq!(again.dump(), c.dump());
        }
    }
}
