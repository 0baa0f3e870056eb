//! Model and training configuration.
//!
//! Stored as flat `key = value` UTF-8 text, one key per line; `#` starts a
//! comment. Unknown keys are rejected. [`ModelConfig::to_text`] writes every
//! key in a fixed order, and that text is what checkpoints embed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Default action vocabulary of the synthetic dataset.
pub const DEFAULT_LABELS: [&str; 6] = ["hold", "cut", "pour", "press", "hit", "open"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Bpm,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    Cam,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,

    pub text_dim: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub prompts: usize,
    pub labels: Vec<String>,

    pub beta: f64,
    pub bpm_positions: Vec<usize>,
    pub bpm_shared: bool,
    pub adapter: AdapterKind,

    /// `None` means `1/√dim`.
    pub mu: Option<f64>,
    pub alpha: f64,
    pub tau: f64,
    pub tfg_hidden: usize,
    pub use_pt: bool,
    pub use_tfg: bool,
    pub align_projector: bool,

    pub lambda_tcls: f64,
    pub lambda_cos: f64,
    pub lambda_c: f64,
    pub kmeans_clusters: usize,
    pub kmeans_iters: usize,

    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,

    pub infer_map: MapSource,
    pub blur_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Every accepted key with a one-line description, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("image.side", "input image side in pixels"),
    ("image.patch", "patch side in pixels"),
    ("vit.dim", "image encoder width d"),
    ("vit.depth", "image encoder blocks L"),
    ("vit.heads", "attention heads n"),
    ("vit.mlp_hidden", "feed-forward hidden width"),
    ("text.dim", "text encoder width"),
    ("text.depth", "text encoder blocks"),
    ("text.heads", "text encoder heads"),
    ("text.prompts", "learnable prompt tokens N"),
    ("text.labels", "comma-separated action labels (defines K)"),
    ("bpm.beta", "bottleneck downscaling factor; d_down = max(1, floor(d/beta))"),
    ("bpm.positions", "comma-separated 1-based blocks that receive a bypass (empty = none)"),
    ("bpm.shared", "share one bypass block across all positions"),
    ("bpm.adapter", "bypass variant: bpm | baseline"),
    ("fusion.mu", "pixel-text gate scale (auto = 1/sqrt(d))"),
    ("fusion.alpha", "blend weight of the text-guided branch"),
    ("fusion.tau", "temperature of the text classification logits"),
    ("fusion.pt", "enable pixel-text fusion"),
    ("fusion.tfg", "enable text feature guidance"),
    ("fusion.align_projector", "learn an affine map from the CLS feature into text space"),
    ("tfg.hidden", "hidden width of the head-weight MLP"),
    ("loss.lambda_tcls", "weight of the text classification loss"),
    ("loss.lambda_cos", "weight of the cosine embedding loss"),
    ("loss.lambda_c", "weight of the concentration loss"),
    ("loss.kmeans_clusters", "clusters for exocentric prototype selection"),
    ("loss.kmeans_iters", "k-means iterations"),
    ("optim.lr", "SGD learning rate"),
    ("optim.weight_decay", "L2 weight decay"),
    ("optim.momentum", "SGD momentum"),
    ("optim.batch", "samples per step"),
    ("optim.steps", "training steps"),
    ("seed", "initialization and shuffling seed"),
    ("infer.map", "activation map source: cam | text"),
    ("infer.blur_sigma", "Gaussian blur of the output map in pixels (0 = off)"),
];

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        ModelConfig {
            image_side: 64,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_hidden: 128,
            text_dim: 32,
            text_depth: 1,
            text_heads: 2,
            prompts: 4,
            labels: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
            beta: 22.0,
            bpm_positions: vec![1, 2, 3, 4],
            bpm_shared: false,
            adapter: AdapterKind::Bpm,
            mu: None,
            alpha: 0.8,
            tau: 0.07,
            tfg_hidden: 32,
            use_pt: true,
            use_tfg: true,
            align_projector: false,
            lambda_tcls: 0.07,
            lambda_cos: 1.0,
            lambda_c: 1.0,
            kmeans_clusters: 3,
            kmeans_iters: 10,
            lr: 1e-3,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch: 8,
            steps: 500,
            seed: 0,
            infer_map: MapSource::Cam,
            blur_sigma: 0.0,
        }
    }

    /// ViT-S/14 image encoder and a CLIP-sized text encoder, for accounting only.
    pub fn paper_scale() -> Self {
        ModelConfig {
            image_side: 224,
            patch: 14,
            dim: 384,
            depth: 12,
            heads: 6,
            mlp_hidden: 1536,
            text_dim: 512,
            text_depth: 12,
            text_heads: 8,
            tfg_hidden: 384,
            bpm_positions: (1..=12).collect(),
            ..Self::toy()
        }
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch
    }

    /// Patch tokens per image.
    pub fn hw(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn d_down(&self) -> usize {
        ((self.dim as f64 / self.beta).floor() as usize).max(1)
    }

    pub fn mu(&self) -> f64 {
        self.mu.unwrap_or(1.0 / (self.dim as f64).sqrt())
    }

    /// Words of every label, in label order.
    pub fn label_words(&self) -> impl Iterator<Item = Vec<&str>> {
        self.labels.iter().map(|l| l.split_whitespace().collect())
    }

    pub fn max_label_tokens(&self) -> usize {
        self.label_words().map(|w| w.len()).max().unwrap_or(0)
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        let norm = label.split_whitespace().collect::<Vec<_>>().join(" ");
        self.labels
            .iter()
            .position(|l| *l == norm)
            .ok_or_else(|| Error::Vocabulary {
                label: label.to_string(),
                known: self.labels.clone(),
            })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::config(k, m));
        if self.patch == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch) {
            return bad("image.patch", format!("{} must divide image.side {}", self.patch, self.image_side));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("vit.heads", format!("{} must divide vit.dim {}", self.heads, self.dim));
        }
        if self.depth == 0 {
            return bad("vit.depth", "must be at least 1".into());
        }
        if self.mlp_hidden == 0 {
            return bad("vit.mlp_hidden", "must be positive".into());
        }
        if self.text_dim == 0 || self.text_heads == 0 || !self.text_dim.is_multiple_of(self.text_heads) {
            return bad("text.heads", format!("{} must divide text.dim {}", self.text_heads, self.text_dim));
        }
        if self.labels.len() < 2 {
            return bad("text.labels", "need at least two classes".into());
        }
        for (i, l) in self.labels.iter().enumerate() {
            if l.split_whitespace().next().is_none() {
                return bad("text.labels", format!("label {i} is empty"));
            }
            if self.labels[..i].contains(l) {
                return bad("text.labels", format!("duplicate label {l:?}"));
            }
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return bad("bpm.beta", format!("{} must be >= 1", self.beta));
        }
        if self.bpm_positions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("bpm.positions", "must be strictly increasing".into());
        }
        if let Some(&p) = self.bpm_positions.iter().find(|&&p| p == 0 || p > self.depth) {
            return bad("bpm.positions", format!("block {p} outside [1, {}]", self.depth));
        }
        if let Some(mu) = self.mu {
            if !(mu > 0.0 && mu.is_finite()) {
                return bad("fusion.mu", format!("{mu} must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("fusion.alpha", format!("{} must lie in [0, 1]", self.alpha));
        }
        if !(self.tau > 0.0) {
            return bad("fusion.tau", format!("{} must be > 0", self.tau));
        }
        if self.tfg_hidden == 0 {
            return bad("tfg.hidden", "must be positive".into());
        }
        for (k, v) in [
            ("loss.lambda_tcls", self.lambda_tcls),
            ("loss.lambda_cos", self.lambda_cos),
            ("loss.lambda_c", self.lambda_c),
            ("optim.weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, format!("{v} must be a finite non-negative number"));
            }
        }
        if self.kmeans_clusters == 0 {
            return bad("loss.kmeans_clusters", "must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad("optim.lr", format!("{} must be > 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("optim.momentum", format!("{} must lie in [0, 1)", self.momentum));
        }
        if self.batch == 0 {
            return bad("optim.batch", "must be at least 1".into());
        }
        if !(self.blur_sigma >= 0.0) {
            return bad("infer.blur_sigma", "must be >= 0".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "image.side" => self.image_side = parse(key, v)?,
            "image.patch" => self.patch = parse(key, v)?,
            "vit.dim" => self.dim = parse(key, v)?,
            "vit.depth" => self.depth = parse(key, v)?,
            "vit.heads" => self.heads = parse(key, v)?,
            "vit.mlp_hidden" => self.mlp_hidden = parse(key, v)?,
            "text.dim" => self.text_dim = parse(key, v)?,
            "text.depth" => self.text_depth = parse(key, v)?,
            "text.heads" => self.text_heads = parse(key, v)?,
            "text.prompts" => self.prompts = parse(key, v)?,
            "text.labels" => {
                self.labels = v
                    .split(',')
                    .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
                    .collect()
            }
            "bpm.beta" => self.beta = parse(key, v)?,
            "bpm.positions" => {
                self.bpm_positions = if v.is_empty() || v == "none" {
                    vec![]
                } else {
                    v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?
                }
            }
            "bpm.shared" => self.bpm_shared = parse_bool(key, v)?,
            "bpm.adapter" => {
                self.adapter = match v {
                    "bpm" => AdapterKind::Bpm,
                    "baseline" => AdapterKind::Baseline,
                    _ => return Err(Error::config(key, format!("unknown adapter {v:?} (bpm | baseline)"))),
                }
            }
            "fusion.mu" => self.mu = if v == "auto" { None } else { Some(parse(key, v)?) },
            "fusion.alpha" => self.alpha = parse(key, v)?,
            "fusion.tau" => self.tau = parse(key, v)?,
            "fusion.pt" => self.use_pt = parse_bool(key, v)?,
            "fusion.tfg" => self.use_tfg = parse_bool(key, v)?,
            "fusion.align_projector" => self.align_projector = parse_bool(key, v)?,
            "tfg.hidden" => self.tfg_hidden = parse(key, v)?,
            "loss.lambda_tcls" => self.lambda_tcls = parse(key, v)?,
            "loss.lambda_cos" => self.lambda_cos = parse(key, v)?,
            "loss.lambda_c" => self.lambda_c = parse(key, v)?,
            "loss.kmeans_clusters" => self.kmeans_clusters = parse(key, v)?,
            "loss.kmeans_iters" => self.kmeans_iters = parse(key, v)?,
            "optim.lr" => self.lr = parse(key, v)?,
            "optim.weight_decay" => self.weight_decay = parse(key, v)?,
            "optim.momentum" => self.momentum = parse(key, v)?,
            "optim.batch" => self.batch = parse(key, v)?,
            "optim.steps" => self.steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "infer.map" => {
                self.infer_map = match v {
                    "cam" => MapSource::Cam,
                    "text" => MapSource::Text,
                    _ => return Err(Error::config(key, format!("unknown map source {v:?} (cam | text)"))),
                }
            }
            "infer.blur_sigma" => self.blur_sigma = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses config text over the toy defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self` without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got {line:?}")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let join = |xs: &[usize]| xs.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",");
        Some(match key {
            "image.side" => self.image_side.to_string(),
            "image.patch" => self.patch.to_string(),
            "vit.dim" => self.dim.to_string(),
            "vit.depth" => self.depth.to_string(),
            "vit.heads" => self.heads.to_string(),
            "vit.mlp_hidden" => self.mlp_hidden.to_string(),
            "text.dim" => self.text_dim.to_string(),
            "text.depth" => self.text_depth.to_string(),
            "text.heads" => self.text_heads.to_string(),
            "text.prompts" => self.prompts.to_string(),
            "text.labels" => self.labels.join(","),
            "bpm.beta" => fmt_f64(self.beta),
            "bpm.positions" => join(&self.bpm_positions),
            "bpm.shared" => self.bpm_shared.to_string(),
            "bpm.adapter" => match self.adapter {
                AdapterKind::Bpm => "bpm".into(),
                AdapterKind::Baseline => "baseline".into(),
            },
            "fusion.mu" => self.mu.map_or("auto".into(), fmt_f64),
            "fusion.alpha" => fmt_f64(self.alpha),
            "fusion.tau" => fmt_f64(self.tau),
            "fusion.pt" => self.use_pt.to_string(),
            "fusion.tfg" => self.use_tfg.to_string(),
            "fusion.align_projector" => self.align_projector.to_string(),
            "tfg.hidden" => self.tfg_hidden.to_string(),
            "loss.lambda_tcls" => fmt_f64(self.lambda_tcls),
            "loss.lambda_cos" => fmt_f64(self.lambda_cos),
            "loss.lambda_c" => fmt_f64(self.lambda_c),
            "loss.kmeans_clusters" => self.kmeans_clusters.to_string(),
            "loss.kmeans_iters" => self.kmeans_iters.to_string(),
            "optim.lr" => fmt_f64(self.lr),
            "optim.weight_decay" => fmt_f64(self.weight_decay),
            "optim.momentum" => fmt_f64(self.momentum),
            "optim.batch" => self.batch.to_string(),
            "optim.steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "infer.map" => match self.infer_map {
                MapSource::Cam => "cam".into(),
                MapSource::Text => "text".into(),
            },
            "infer.blur_sigma" => fmt_f64(self.blur_sigma),
            _ => return None,
        })
    }

    /// Canonical text form: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true/false, got {v:?}"))),
    }
}
