//! Pixel-text gating, text-similarity classification, and text-weighted
//! attention-head guidance.

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamBuilder};
use crate::Var;

/// `F ⊙ (1 + σ(μ·F·t))` with one gate per row.
pub fn pt_fuse<'t>(f: Var<'t>, text: Var<'t>, mu: f64) -> Result<Var<'t>> {
    let (fs, ts) = (f.shape(), text.shape());
    if fs.len() != 2 || ts != [fs[1]] {
        return Err(Error::shape("pt_fuse", format!("features {fs:?}, text {ts:?}")));
    }
    let gate = f.matmul(text.reshape(&[fs[1], 1])?)?.scale(mu)?.sigmoid()?;
    f.mul(gate)?.add(f)
}

/// Maps the CLS feature into text space; identity unless a projector is configured.
#[derive(Debug, Clone)]
pub struct TextAlign {
    pub projector: Option<Linear>,
}

impl TextAlign {
    pub fn build(b: &mut ParamBuilder, dim: usize, learned: bool) -> Result<Self> {
        let projector = if learned {
            Some(Linear::build_with(b, "align", dim, dim, true, Init::Normal(1.0 / (dim as f64).sqrt()), 0.0)?)
        } else {
            None
        };
        Ok(TextAlign { projector })
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, cls: Var<'t>) -> Result<Var<'t>> {
        match &self.projector {
            None => Ok(cls),
            Some(l) => {
                let d = cls.shape()[0];
                l.forward(p, cls.reshape(&[1, d])?)?.reshape(&[l.d_out])
            }
        }
    }
}

/// `cos(align(cls), text_k) / τ` for every class row.
pub fn text_class_logits<'t>(p: &Bound<'t>, cls: Var<'t>, all_text: Var<'t>, align: &TextAlign, tau: f64) -> Result<Var<'t>> {
    let s = all_text.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::shape("text_class_logits", format!("need K ≥ 2 text rows, got {s:?}")));
    }
    let a = align.apply(p, cls)?;
    let sims = (0..s[0])
        .map(|k| a.cosine_similarity(all_text.narrow(0, k, 1)?.reshape(&[s[1]])?)?.reshape(&[1]))
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&sims, 0)?.scale(1.0 / tau)
}

#[derive(Debug, Clone)]
pub struct TfgModule {
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TfgModule {
    /// The output layer starts at zero, so untrained head weights are uniform.
    pub fn build(b: &mut ParamBuilder, dim: usize, hidden: usize, heads: usize) -> Result<Self> {
        Ok(TfgModule {
            fc1: Linear::build(b, "tfg.fc1", dim, hidden, true, 0.0)?,
            fc2: Linear::build_with(b, "tfg.fc2", hidden, heads, true, Init::Zeros, 0.0)?,
            heads,
        })
    }

    /// `softmax(mlp(t))`.
    pub fn head_weights<'t>(&self, p: &Bound<'t>, text: Var<'t>) -> Result<Var<'t>> {
        let d = text.shape()[0];
        let hidden = self.fc1.forward(p, text.reshape(&[1, d])?)?.gelu()?;
        self.fc2.forward(p, hidden)?.reshape(&[self.heads])?.softmax(0)
    }
}

/// One copy of `F` per head, each row scaled by that head's attention.
pub fn head_masked_features<'t>(f: Var<'t>, head_attn: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
    let hw = f.shape()[0];
    head_attn
        .iter()
        .map(|a| {
            if a.shape() != [hw] {
                return Err(Error::shape("head_masked_features", format!("map {:?} for {hw} rows", a.shape())));
            }
            f.mul(a.reshape(&[hw, 1])?)
        })
        .collect()
}

/// `(1/n)·Σ_i h_i·M^i`.
pub fn tfg_fuse<'t>(masked: &[Var<'t>], h: Var<'t>) -> Result<Var<'t>> {
    let n = masked.len();
    if n == 0 || h.shape() != [n] {
        return Err(Error::shape("tfg_fuse", format!("{n} masked maps, weights {:?}", h.shape())));
    }
    let mut acc = masked[0].mul(h.narrow(0, 0, 1)?)?;
    for (i, m) in masked.iter().enumerate().skip(1) {
        acc = acc.add(m.mul(h.narrow(0, i, 1)?)?)?;
    }
    acc.scale(1.0 / n as f64)
}

/// `α·F_t + (1−α)·F_p`; the endpoints return the selected branch unchanged.
pub fn blend<'t>(ft: Var<'t>, fp: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("fusion.alpha", format!("{alpha} must lie in [0, 1]")));
    }
    if ft.shape() != fp.shape() {
        return Err(Error::shape("blend", format!("{:?} vs {:?}", ft.shape(), fp.shape())));
    }
    if alpha == 0.0 {
        return Ok(fp);
    }
    if alpha == 1.0 {
        return Ok(ft);
    }
    ft.scale(alpha)?.add(fp.scale(1.0 - alpha)?)
}
