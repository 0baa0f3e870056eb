//! Frozen toy image and text encoders.

use std::collections::HashMap;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, TransformerBlock};
use crate::params::{sub_seed, Bound, Init, ParamBuilder, ParamId};
use crate::{Tensor, Var};

/// Splits `C×H×W` into raster-ordered patches, one row of `C·patch²` values each.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(Error::shape(
            "patchify",
            format!("image {s:?} is not C×H×W divisible by patch {patch}"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let row = c * patch * patch;
    let mut out = Vec::with_capacity(gh * gw * row);
    let x = image.data();
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let start = (ch * h + py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&x[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, row], out)
}

/// Consulted after every encoder block with that block's patch states.
/// A returned value is added to the patch states before the next block.
pub trait BlockHook<'t> {
    fn after_block(&mut self, block: usize, patches: Var<'t>) -> Result<Option<Var<'t>>>;
}

pub struct EncoderOutput<'t> {
    /// Full `(hw+1)×d` states after each block.
    pub hidden: Vec<Var<'t>>,
    pub cls: Var<'t>,
    pub patches: Var<'t>,
    /// Final-block CLS-query attention over the patch keys, one `[hw]` map per head.
    pub head_attn: Vec<Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub patch: usize,
    pub dim: usize,
    pub hw: usize,
}

impl VitEncoder {
    pub fn build(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let (d, hw) = (cfg.dim, cfg.hw());
        let patch_embed = Linear::build(b, "vit.patch_embed", 3 * cfg.patch * cfg.patch, d, false, 0.02)?;
        let cls = b.add("vit.cls", &[1, d], Init::Normal(0.5), false)?;
        let pos = b.add("vit.pos", &[hw + 1, d], Init::Normal(0.1), false)?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::build(b, &format!("vit.blocks.{i}"), d, cfg.heads, cfg.mlp_hidden, false))
            .collect::<Result<_>>()?;
        Ok(VitEncoder {
            patch_embed,
            cls,
            pos,
            blocks,
            patch: cfg.patch,
            dim: d,
            hw,
        })
    }

    /// Patchifies an RGB image and applies the frozen patch embedder.
    pub fn embed<'t>(&self, p: &Bound<'t>, image: &Tensor) -> Result<Var<'t>> {
        if image.shape().first() != Some(&3) {
            return Err(Error::shape("vit.embed", format!("expected 3 channels, got {:?}", image.shape())));
        }
        let patches = patchify(image, self.patch)?;
        if patches.shape()[0] != self.hw {
            return Err(Error::shape(
                "vit.embed",
                format!("image {:?} gives {} patches, encoder expects {}", image.shape(), patches.shape()[0], self.hw),
            ));
        }
        let tape = p[self.cls].tape();
        let patches = patches.map(|v| (v - PIXEL_MEAN) / PIXEL_STD);
        self.patch_embed.forward(p, tape.constant(patches))
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        tokens: Var<'t>,
        mut hook: Option<&mut dyn BlockHook<'t>>,
    ) -> Result<EncoderOutput<'t>> {
        if tokens.shape() != [self.hw, self.dim] {
            return Err(Error::shape(
                "vit_forward",
                format!("tokens {:?}, expected [{}, {}]", tokens.shape(), self.hw, self.dim),
            ));
        }
        let mut x = Var::concat(&[p[self.cls], tokens], 0)?.add(p[self.pos])?;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        let mut head_attn = Vec::new();
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, maps) = block.forward(p, x, i == last)?;
            x = out;
            if let Some(h) = hook.as_deref_mut() {
                let patches = x.narrow(0, 1, self.hw)?;
                if let Some(extra) = h.after_block(i + 1, patches)? {
                    x = Var::concat(&[x.narrow(0, 0, 1)?, patches.add(extra)?], 0)?;
                }
            }
            hidden.push(x);
            if i == last {
                head_attn = maps;
            }
        }
        Ok(EncoderOutput {
            hidden,
            cls: x.narrow(0, 0, 1)?.reshape(&[self.dim])?,
            patches: x.narrow(0, 1, self.hw)?,
            head_attn,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PromptTokens {
    pub count: usize,
    pub embeddings: Option<ParamId>,
}

impl PromptTokens {
    pub fn build(b: &mut ParamBuilder, count: usize, text_dim: usize) -> Result<Self> {
        let embeddings = if count > 0 {
            Some(b.add("prompts", &[count, text_dim], Init::Normal(0.02), true)?)
        } else {
            None
        };
        Ok(PromptTokens { count, embeddings })
    }
}

/// Pixel standardisation applied before the patch embedder.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Rows of the frozen token table; label words hash into it with linear probing.
pub const TEXT_VOCAB: usize = 128;

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub labels: Vec<String>,
    pub vocab: HashMap<String, usize>,
    pub table: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub dim: usize,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn build(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let mut vocab: HashMap<String, usize> = HashMap::new();
        for words in cfg.label_words() {
            for w in words {
                if vocab.contains_key(w) {
                    continue;
                }
                if vocab.len() == TEXT_VOCAB {
                    return Err(Error::config("text.labels", format!("more than {TEXT_VOCAB} distinct words")));
                }
                let mut slot = (sub_seed(0, w) % TEXT_VOCAB as u64) as usize;
                while vocab.values().any(|&v| v == slot) {
                    slot = (slot + 1) % TEXT_VOCAB;
                }
                vocab.insert(w.to_string(), slot);
            }
        }
        let dt = cfg.text_dim;
        let max_len = cfg.prompts + cfg.max_label_tokens();
        let table = b.add("text.token_table", &[TEXT_VOCAB, dt], Init::Normal(1.0), false)?;
        let pos = b.add("text.pos", &[max_len, dt], Init::Normal(0.1), false)?;
        let blocks = (0..cfg.text_depth)
            .map(|i| TransformerBlock::build(b, &format!("text.blocks.{i}"), dt, cfg.text_heads, 4 * dt, false))
            .collect::<Result<_>>()?;
        let ln_final = LayerNorm::build(b, "text.ln_final", dt, false)?;
        Ok(TextEncoder {
            labels: cfg.labels.clone(),
            vocab,
            table,
            pos,
            blocks,
            ln_final,
            dim: dt,
            max_len,
        })
    }

    /// Word ids of a known label.
    pub fn tokenize(&self, label: &str) -> Result<Vec<usize>> {
        let words: Vec<&str> = label.split_whitespace().collect();
        let known = self.labels.iter().any(|l| l.split_whitespace().eq(words.iter().copied()));
        if !known {
            return Err(Error::Vocabulary {
                label: label.to_string(),
                known: self.labels.clone(),
            });
        }
        Ok(words.iter().map(|w| self.vocab[*w]).collect())
    }

    /// Final-token state of `concat(prompts, label tokens)`, projected to the image width.
    pub fn encode<'t>(&self, p: &Bound<'t>, prompts: &PromptTokens, projector: &Linear, label: &str) -> Result<Var<'t>> {
        let ids = self.tokenize(label)?;
        let table = p[self.table];
        let mut rows = Vec::with_capacity(prompts.count + ids.len());
        if let Some(e) = prompts.embeddings {
            rows.push(p[e]);
        }
        for &id in &ids {
            rows.push(table.narrow(0, id, 1)?);
        }
        let len = prompts.count + ids.len();
        let mut x = Var::concat(&rows, 0)?.add(p[self.pos].narrow(0, 0, len)?)?;
        for block in &self.blocks {
            x = block.forward(p, x, false)?.0;
        }
        let last = self.ln_final.forward(p, x.narrow(0, len - 1, 1)?)?;
        projector.forward(p, last)?.reshape(&[projector.d_out])
    }
}
