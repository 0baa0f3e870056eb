//! Shared building blocks: affine maps, layer norm, pre-norm transformer blocks.

use crate::error::Result;
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::Var;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights `N(0, 1/d_in)`, bias drawn with `bias_std` (zero when 0).
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        d_out: usize,
        trainable: bool,
        bias_std: f64,
    ) -> Result<Self> {
        Self::build_with(b, name, d_in, d_out, trainable, Init::Normal(1.0 / (d_in as f64).sqrt()), bias_std)
    }

    pub fn build_with(
        b: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        d_out: usize,
        trainable: bool,
        weight: Init,
        bias_std: f64,
    ) -> Result<Self> {
        let bias_init = if bias_std > 0.0 { Init::Normal(bias_std) } else { Init::Zeros };
        Ok(Linear {
            weight: b.add(format!("{name}.weight"), &[d_in, d_out], weight, trainable)?,
            bias: b.add(format!("{name}.bias"), &[d_out], bias_init, trainable)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.affine(p[self.weight], p[self.bias])
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn build(b: &mut ParamBuilder, name: &str, width: usize, trainable: bool) -> Result<Self> {
        Ok(LayerNorm {
            gain: b.add(format!("{name}.gain"), &[width], Init::Ones, trainable)?,
            shift: b.add(format!("{name}.shift"), &[width], Init::Zeros, trainable)?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p[self.gain], p[self.shift])
    }
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn build(b: &mut ParamBuilder, name: &str, dim: usize, heads: usize, hidden: usize, trainable: bool) -> Result<Self> {
        let bias = 0.02;
        Ok(TransformerBlock {
            ln1: LayerNorm::build(b, &format!("{name}.ln1"), dim, trainable)?,
            qkv: Linear::build(b, &format!("{name}.qkv"), dim, 3 * dim, trainable, bias)?,
            proj: Linear::build(b, &format!("{name}.proj"), dim, dim, trainable, bias)?,
            ln2: LayerNorm::build(b, &format!("{name}.ln2"), dim, trainable)?,
            fc1: Linear::build(b, &format!("{name}.fc1"), dim, hidden, trainable, bias)?,
            fc2: Linear::build(b, &format!("{name}.fc2"), hidden, dim, trainable, bias)?,
            dim,
            heads,
        })
    }

    /// Runs the block on `x: T×dim`. With `cls_attn`, also returns per head
    /// the softmax of the first query's logits over keys `1..T`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, cls_attn: bool) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let tokens = x.shape()[0];
        let dh = self.dim / self.heads;
        let qkv = self.qkv.forward(p, self.ln1.forward(p, x)?)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::new();
        for h in 0..self.heads {
            let q = qkv.narrow(1, h * dh, dh)?;
            let k = qkv.narrow(1, self.dim + h * dh, dh)?;
            let v = qkv.narrow(1, 2 * self.dim + h * dh, dh)?;
            let logits = q.matmul(k.t()?)?.scale(scale)?;
            if cls_attn && tokens > 1 {
                let row = logits.narrow(0, 0, 1)?.narrow(1, 1, tokens - 1)?;
                maps.push(row.reshape(&[tokens - 1])?.softmax(0)?);
            }
            outs.push(logits.softmax(1)?.matmul(v)?);
        }
        let attn = self.proj.forward(p, Var::concat(&outs, 1)?)?;
        let x = x.add(attn)?;
        let mlp = self.fc2.forward(p, self.fc1.forward(p, self.ln2.forward(p, x)?)?.gelu()?)?;
        Ok((x.add(mlp)?, maps))
    }
}
