//! Experiment configuration: a flat `key = value` file.
//!
//! Blank lines and `#` comments are ignored. Keys are grouped by prefix
//! (`gen.`, `model.`, `pretrain.`, `meta.`, `eval.`, `ablate.`); every key has a
//! default, and an unknown key is an error. [`ExperimentConfig::render`] emits
//! the canonical form of every key, which is what manifests and checkpoints
//! store.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a task unit is: a category, or one user's sketching style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Category,
    User,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Category => "category",
            Mode::User => "user",
        })
    }
}

/// Which meta-training recipe to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Head-only inner loop, predicted margin, per-coordinate learned rates,
    /// regularized outer loop.
    Ours,
    /// Inner loop over encoder and head, fixed margin, fixed rate, no regularizers.
    MamlFull,
    /// Head-only inner loop, fixed margin, fixed rate, no regularizers.
    Anil,
    /// As `Ours` but with the inner-loop margin held at the fixed value.
    FixedMargin,
}

impl Variant {
    pub fn learns_margin(&self) -> bool {
        matches!(self, Variant::Ours)
    }

    /// Per-coordinate meta-learned inner rates; otherwise one fixed rate.
    pub fn learns_rates(&self) -> bool {
        matches!(self, Variant::Ours | Variant::FixedMargin)
    }

    pub fn uses_regularizers(&self) -> bool {
        matches!(self, Variant::Ours | Variant::FixedMargin)
    }

    /// The inner loop updates the encoder as well as the head.
    pub fn adapts_encoder(&self) -> bool {
        matches!(self, Variant::MamlFull)
    }

    /// Smooth inner hinge for the margin-learning recipes, hard otherwise.
    pub fn smooth_inner_hinge(&self) -> bool {
        matches!(self, Variant::Ours | Variant::FixedMargin)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ours => "ours",
            Variant::MamlFull => "maml-full",
            Variant::Anil => "anil",
            Variant::FixedMargin => "fixed-margin",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Variant::Ours),
            "maml-full" => Ok(Variant::MamlFull),
            "anil" => Ok(Variant::Anil),
            "fixed-margin" => Ok(Variant::FixedMargin),
            _ => Err(Error::Config(format!(
                "expected ours|maml-full|anil|fixed-margin, got {s:?}"
            ))),
        }
    }
}

/// Evaluation methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ours,
    NoAdapt,
    FineTune,
    MamlFull,
    Anil,
    FixedMargin,
}

impl Method {
    /// The meta-training recipe whose checkpoint this method evaluates, or
    /// `None` for methods that start from the pretrained baseline.
    pub fn variant(&self) -> Option<Variant> {
        match self {
            Method::Ours => Some(Variant::Ours),
            Method::MamlFull => Some(Variant::MamlFull),
            Method::Anil => Some(Variant::Anil),
            Method::FixedMargin => Some(Variant::FixedMargin),
            Method::NoAdapt | Method::FineTune => None,
        }
    }

    pub const ALL: [Method; 6] = [
        Method::Ours,
        Method::NoAdapt,
        Method::FineTune,
        Method::MamlFull,
        Method::Anil,
        Method::FixedMargin,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::NoAdapt => "no-adapt",
            Method::FineTune => "fine-tune",
            Method::MamlFull => "maml-full",
            Method::Anil => "anil",
            Method::FixedMargin => "fixed-margin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::parse(s)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameters of the synthetic cross-modal generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub mode: Mode,
    pub categories: usize,
    /// Categories assigned to training (category mode); the rest are unseen.
    pub train_categories: usize,
    pub photos_per_category: usize,
    pub sketches_per_photo: usize,
    pub users: usize,
    /// Users assigned to training (user mode).
    pub train_users: usize,
    pub feature_dim: usize,
    pub semantic_dim: usize,
    /// Standard deviation of isotropic sketch noise.
    pub noise: f64,
    /// Magnitude of each user's low-rank perturbation of the cross-domain map.
    pub style_strength: f64,
    pub style_rank: usize,
    /// 0 gives the identity cross-domain map; larger values rotate further.
    pub domain_gap: f64,
    /// Per-category instance spread, spaced evenly in `[spread_min, spread_max]`.
    pub spread_min: f64,
    pub spread_max: f64,
    /// Rank of the per-category subspace holding instance variation.
    pub subspace_rank: usize,
    pub prototype_scale: f64,
    pub semantic_noise: f64,
    /// Scale of per-category photo clutter: variation along a few
    /// category-specific directions that sketches do not reproduce.
    pub clutter: f64,
    pub clutter_rank: usize,
    /// Photos (with their sketches) per unseen unit reserved for adaptation.
    pub finetune_photos: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Category,
            categories: 25,
            train_categories: 20,
            photos_per_category: 40,
            sketches_per_photo: 1,
            users: 10,
            train_users: 8,
            feature_dim: 32,
            semantic_dim: 300,
            noise: 0.35,
            style_strength: 0.1,
            style_rank: 2,
            domain_gap: 0.3,
            spread_min: 0.5,
            spread_max: 1.5,
            subspace_rank: 4,
            prototype_scale: 1.0,
            semantic_noise: 0.1,
            clutter: 3.0,
            clutter_rank: 1,
            finetune_photos: 10,
        }
    }
}

/// Layer widths. Input, semantic and class counts come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub disc_hidden: usize,
    pub margin_hidden: usize,
    pub semantic_hidden: usize,
    pub style_hidden: usize,
    pub style_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            latent_dim: 128,
            embed_dim: 64,
            disc_hidden: 64,
            margin_hidden: 32,
            semantic_hidden: 128,
            style_hidden: 128,
            style_dim: 64,
        }
    }
}

/// Which outer-loop regularizers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegSwitches {
    pub domain: bool,
    /// Classification head (category mode) or style head (user mode).
    pub discriminative: bool,
    pub semantic: bool,
}

impl Default for RegSwitches {
    fn default() -> Self {
        Self {
            domain: true,
            discriminative: true,
            semantic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub meta_batch: usize,
    pub inner_steps: usize,
    pub outer_lr: f64,
    pub meta_epochs: usize,
    /// Outer steps per meta-training epoch.
    pub steps_per_epoch: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_margin: f64,
    /// Weight of an optional classification loss during pretraining (0 = off).
    pub pretrain_class_weight: f64,
    pub lambda: f64,
    /// Temperature of the smooth inner-loop hinge.
    pub tau: f64,
    pub grl_lambda: f64,
    /// Fixed margin of the outer-loop (validation) triplet loss.
    pub outer_margin: f64,
    /// Margin of the user-style triplet loss.
    pub style_margin: f64,
    /// Initial value of every inner learning rate.
    pub alpha_init: f64,
    /// Fixed margin used wherever a margin cannot or should not be predicted.
    pub fixed_margin: f64,
    pub variant: Variant,
    pub regularizers: RegSwitches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            meta_batch: 8,
            inner_steps: 1,
            outer_lr: 1e-4,
            meta_epochs: 40,
            steps_per_epoch: 10,
            pretrain_epochs: 60,
            pretrain_lr: 1e-4,
            pretrain_batch: 16,
            pretrain_margin: 0.3,
            pretrain_class_weight: 0.0,
            lambda: 0.5,
            tau: 0.05,
            grl_lambda: 1.0,
            outer_margin: 0.3,
            style_margin: 0.2,
            alpha_init: 0.3,
            fixed_margin: 0.3,
            variant: Variant::Ours,
            regularizers: RegSwitches::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub ks: Vec<usize>,
    pub seeds: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Inner steps at test time; 0 means "same as training".
    pub inner_steps: usize,
    /// Write wall-clock adaptation times into reports. Off by default so that
    /// report files are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Ours, Method::NoAdapt, Method::FineTune],
            ks: vec![1, 5, 10],
            seeds: 5,
            finetune_steps: 5,
            finetune_lr: 1e-4,
            inner_steps: 0,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub steps: Vec<usize>,
    pub embed_dims: Vec<usize>,
    /// Meta-training epochs for each retrained ablation variant.
    pub meta_epochs: usize,
    pub regularizer_grid: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            steps: vec![1, 2, 4],
            embed_dims: vec![16, 64, 256],
            meta_epochs: 40,
            regularizer_grid: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render_value(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, bool);

impl ConfigValue for Mode {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "category" => Ok(Mode::Category),
            "user" => Ok(Mode::User),
            _ => Err(format!("expected category|user, got {s:?}")),
        }
    }
    fn render_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Variant {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse::<Variant>().map_err(|e| match e {
            Error::Config(m) => m,
            other => other.to_string(),
        })
    }

    fn render_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("{e} in {p:?}")))
            .collect()
    }
    fn render_value(&self) -> String {
        self.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl ConfigValue for Vec<Method> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| Method::parse(p.trim()).map_err(|e| e.to_string()))
            .collect()
    }
    fn render_value(&self) -> String {
        self.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        /// Every recognized key, in canonical order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Option<Result<(), String>> {
            match key {
                $($key => Some(ConfigValue::parse_value(value).map(|v| cfg$(.$field)+ = v)),)*
                _ => None,
            }
        }

        fn render_keys(cfg: &ExperimentConfig) -> Vec<(&'static str, String)> {
            vec![$(($key, cfg$(.$field)+.render_value())),*]
        }
    };
}

config_keys! {
    "seed" => seed,
    "gen.mode" => generator.mode,
    "gen.categories" => generator.categories,
    "gen.train_categories" => generator.train_categories,
    "gen.photos_per_category" => generator.photos_per_category,
    "gen.sketches_per_photo" => generator.sketches_per_photo,
    "gen.users" => generator.users,
    "gen.train_users" => generator.train_users,
    "gen.feature_dim" => generator.feature_dim,
    "gen.semantic_dim" => generator.semantic_dim,
    "gen.noise" => generator.noise,
    "gen.style_strength" => generator.style_strength,
    "gen.style_rank" => generator.style_rank,
    "gen.domain_gap" => generator.domain_gap,
    "gen.spread_min" => generator.spread_min,
    "gen.spread_max" => generator.spread_max,
    "gen.subspace_rank" => generator.subspace_rank,
    "gen.prototype_scale" => generator.prototype_scale,
    "gen.semantic_noise" => generator.semantic_noise,
    "gen.clutter" => generator.clutter,
    "gen.clutter_rank" => generator.clutter_rank,
    "gen.finetune_photos" => generator.finetune_photos,
    "model.hidden_dim" => model.hidden_dim,
    "model.latent_dim" => model.latent_dim,
    "model.embed_dim" => model.embed_dim,
    "model.disc_hidden" => model.disc_hidden,
    "model.margin_hidden" => model.margin_hidden,
    "model.semantic_hidden" => model.semantic_hidden,
    "model.style_hidden" => model.style_hidden,
    "model.style_dim" => model.style_dim,
    "pretrain.epochs" => train.pretrain_epochs,
    "pretrain.lr" => train.pretrain_lr,
    "pretrain.batch" => train.pretrain_batch,
    "pretrain.margin" => train.pretrain_margin,
    "pretrain.class_weight" => train.pretrain_class_weight,
    "meta.variant" => train.variant,
    "meta.k" => train.k,
    "meta.batch" => train.meta_batch,
    "meta.inner_steps" => train.inner_steps,
    "meta.outer_lr" => train.outer_lr,
    "meta.epochs" => train.meta_epochs,
    "meta.steps_per_epoch" => train.steps_per_epoch,
    "meta.lambda" => train.lambda,
    "meta.tau" => train.tau,
    "meta.grl_lambda" => train.grl_lambda,
    "meta.outer_margin" => train.outer_margin,
    "meta.style_margin" => train.style_margin,
    "meta.alpha_init" => train.alpha_init,
    "meta.fixed_margin" => train.fixed_margin,
    "meta.reg_domain" => train.regularizers.domain,
    "meta.reg_discriminative" => train.regularizers.discriminative,
    "meta.reg_semantic" => train.regularizers.semantic,
    "eval.methods" => eval.methods,
    "eval.k" => eval.ks,
    "eval.seeds" => eval.seeds,
    "eval.finetune_steps" => eval.finetune_steps,
    "eval.finetune_lr" => eval.finetune_lr,
    "eval.inner_steps" => eval.inner_steps,
    "eval.record_timing" => eval.record_timing,
    "ablate.steps" => ablation.steps,
    "ablate.embed_dims" => ablation.embed_dims,
    "ablate.meta_epochs" => ablation.meta_epochs,
    "ablate.regularizer_grid" => ablation.regularizer_grid,
}

impl ExperimentConfig {
    /// Parses `key = value` text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(parse_err(format!("duplicate key {key:?}")));
            }
            match set_key(&mut cfg, key, value) {
                None => return Err(parse_err(format!("unknown key {key:?}"))),
                Some(Err(e)) => return Err(parse_err(format!("bad value for {key}: {e}"))),
                Some(Ok(())) => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Canonical `key = value` text covering every key.
    pub fn render(&self) -> String {
        render_keys(self)
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let g = &self.generator;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if t.meta_batch < 1 {
            return bad("meta.batch must be >= 1");
        }
        if t.k < 2 {
            return bad("meta.k must be >= 2");
        }
        if t.lambda < 0.0 {
            return bad("meta.lambda must be >= 0");
        }
        if t.tau <= 0.0 {
            return bad("meta.tau must be > 0");
        }
        if t.inner_steps < 1 {
            return bad("meta.inner_steps must be >= 1");
        }
        if t.pretrain_batch < 1 {
            return bad("pretrain.batch must be >= 1");
        }
        if g.train_categories > g.categories {
            return bad("gen.train_categories exceeds gen.categories");
        }
        if g.train_users > g.users {
            return bad("gen.train_users exceeds gen.users");
        }
        if g.spread_min > g.spread_max {
            return bad("gen.spread_min exceeds gen.spread_max");
        }
        if self.eval.ks.contains(&0) {
            return bad("eval.k values must be >= 1");
        }
        if self.eval.seeds < 1 {
            return bad("eval.seeds must be >= 1");
        }
        Ok(())
    }

    /// Short stable fingerprint of the canonical rendering (FNV-1a).
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.render().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}
