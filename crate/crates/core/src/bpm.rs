//! Bypass prompt chain: depth tokens injected into frozen encoder blocks
//! through gated bottlenecks.

use std::fmt::Debug;

use crate::config::{AdapterKind, ModelConfig};
use crate::encoders::{patchify, BlockHook};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamBuilder, ParamId, ParamStore};
use crate::{Tape, Tensor, Var};

/// Elementwise `σ(A)⊙R + (1−σ(A))⊙D`.
pub fn bpm_gate<'t>(r: Var<'t>, d: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    if r.shape() != d.shape() || r.shape() != a.shape() {
        return Err(Error::shape(
            "bpm_gate",
            format!("R {:?}, D {:?}, A {:?}", r.shape(), d.shape(), a.shape()),
        ));
    }
    let s = a.sigmoid()?;
    let complement = s.neg()?.add_scalar(1.0)?;
    s.mul(r)?.add(complement.mul(d)?)
}

/// A side branch mapping `(R_i, D_prev) → P_i`, all `hw×d`.
pub trait Bypass: Debug + Send + Sync {
    fn kind(&self) -> &'static str;

    fn forward<'t>(&self, p: &Bound<'t>, r: Var<'t>, d_prev: Var<'t>) -> Result<Var<'t>>;

    /// Mean of the sigmoid gate, for variants that have one.
    fn gate_mean(&self, _store: &ParamStore) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct BpmBlock {
    pub down_r: Linear,
    pub down_d: Linear,
    pub up: Linear,
    pub gate: ParamId,
}

/// Initial scale of the up-projection relative to `1/√d_down`.
const UP_INIT_SCALE: f64 = 0.1;

impl BpmBlock {
    pub fn build(b: &mut ParamBuilder, name: &str, d: usize, d_down: usize, hw: usize) -> Result<Self> {
        let up_std = UP_INIT_SCALE / (d_down as f64).sqrt();
        Ok(BpmBlock {
            down_r: Linear::build(b, &format!("{name}.down_r"), d, d_down, true, 0.0)?,
            down_d: Linear::build(b, &format!("{name}.down_d"), d, d_down, true, 0.0)?,
            up: Linear::build_with(b, &format!("{name}.up"), d_down, d, true, Init::Normal(up_std), 0.0)?,
            gate: b.add(format!("{name}.gate"), &[hw, d_down], Init::Normal(1.0), true)?,
        })
    }

    /// `2·(d·d_down + d_down) + (d_down·d + d) + hw·d_down`.
    pub fn closed_form_params(d: usize, d_down: usize, hw: usize) -> usize {
        2 * (d * d_down + d_down) + (d_down * d + d) + hw * d_down
    }
}

impl Bypass for BpmBlock {
    fn kind(&self) -> &'static str {
        "bpm"
    }

    fn forward<'t>(&self, p: &Bound<'t>, r: Var<'t>, d_prev: Var<'t>) -> Result<Var<'t>> {
        let rm = self.down_r.forward(p, r)?;
        let dm = self.down_d.forward(p, d_prev)?;
        let mid = bpm_gate(rm, dm, p[self.gate])?;
        self.up.forward(p, mid.add(rm)?.add(dm)?)
    }

    fn gate_mean(&self, store: &ParamStore) -> Option<f64> {
        let a = store.value(self.gate);
        Some(a.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).sum::<f64>() / a.len() as f64)
    }
}

/// Ungated bottleneck: `up(gelu(down(R + D)))`.
#[derive(Debug, Clone)]
pub struct BaselineAdapter {
    pub down: Linear,
    pub up: Linear,
}

impl BaselineAdapter {
    pub fn build(b: &mut ParamBuilder, name: &str, d: usize, d_down: usize) -> Result<Self> {
        let up_std = UP_INIT_SCALE / (d_down as f64).sqrt();
        Ok(BaselineAdapter {
            down: Linear::build(b, &format!("{name}.down"), d, d_down, true, 0.0)?,
            up: Linear::build_with(b, &format!("{name}.up"), d_down, d, true, Init::Normal(up_std), 0.0)?,
        })
    }
}

impl Bypass for BaselineAdapter {
    fn kind(&self) -> &'static str {
        "baseline"
    }

    fn forward<'t>(&self, p: &Bound<'t>, r: Var<'t>, d_prev: Var<'t>) -> Result<Var<'t>> {
        self.up.forward(p, self.down.forward(p, r.add(d_prev)?)?.gelu()?)
    }
}

#[derive(Debug)]
pub struct BpmChain {
    pub positions: Vec<usize>,
    pub shared: bool,
    pub blocks: Vec<Box<dyn Bypass>>,
    pub depth_embed: Linear,
    pub patch: usize,
    pub hw: usize,
    pub dim: usize,
}

impl BpmChain {
    /// `None` when no positions are configured.
    pub fn build(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Option<Self>> {
        if cfg.bpm_positions.is_empty() {
            return Ok(None);
        }
        let (d, dd, hw) = (cfg.dim, cfg.d_down(), cfg.hw());
        let depth_embed = Linear::build(b, "bpm.depth_embed", cfg.patch * cfg.patch, d, true, 0.0)?;
        let names: Vec<String> = if cfg.bpm_shared {
            vec!["bpm.shared".into()]
        } else {
            cfg.bpm_positions.iter().map(|p| format!("bpm.block{p}")).collect()
        };
        let mut blocks: Vec<Box<dyn Bypass>> = Vec::with_capacity(names.len());
        for name in &names {
            blocks.push(match cfg.adapter {
                AdapterKind::Bpm => Box::new(BpmBlock::build(b, name, d, dd, hw)?),
                AdapterKind::Baseline => Box::new(BaselineAdapter::build(b, name, d, dd)?),
            });
        }
        Ok(Some(BpmChain {
            positions: cfg.bpm_positions.clone(),
            shared: cfg.bpm_shared,
            blocks,
            depth_embed,
            patch: cfg.patch,
            hw,
            dim: d,
        }))
    }

    /// Checks every variant's output shape on a zero probe.
    pub fn register(&self, store: &ParamStore) -> Result<()> {
        for block in &self.blocks {
            check_adapter(block.as_ref(), store, self.hw, self.dim)?;
        }
        Ok(())
    }

    pub fn block_for(&self, position: usize) -> Option<&dyn Bypass> {
        let slot = self.positions.iter().position(|&p| p == position)?;
        Some(if self.shared { self.blocks[0].as_ref() } else { self.blocks[slot].as_ref() })
    }

    /// `D⁰` for a `1×H×W` depth map.
    pub fn depth_tokens<'t>(&self, p: &Bound<'t>, depth: &Tensor) -> Result<Var<'t>> {
        if depth.shape().first() != Some(&1) {
            return Err(Error::shape("depth_tokens", format!("expected 1×H×W, got {:?}", depth.shape())));
        }
        let patches = patchify(depth, self.patch)?;
        if patches.shape()[0] != self.hw {
            return Err(Error::shape("depth_tokens", format!("depth {:?} gives {} patches", depth.shape(), patches.shape()[0])));
        }
        let tape = p[self.depth_embed.weight].tape();
        self.depth_embed.forward(p, tape.constant(patches))
    }

    /// Depth input for views without depth.
    pub fn zero_tokens<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(Tensor::zeros(vec![self.hw, self.dim]))
    }

    pub fn hook<'a, 't>(&'a self, p: &'a Bound<'t>, d0: Var<'t>) -> ChainHook<'a, 't> {
        ChainHook {
            chain: self,
            params: p,
            d_prev: d0,
        }
    }

    pub fn gate_means(&self, store: &ParamStore) -> Vec<f64> {
        self.blocks.iter().filter_map(|b| b.gate_mean(store)).collect()
    }
}

/// Rejects a variant whose output on zero inputs is not `hw×d`.
pub fn check_adapter(adapter: &dyn Bypass, store: &ParamStore, hw: usize, d: usize) -> Result<()> {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let zero = tape.constant(Tensor::zeros(vec![hw, d]));
    let out = adapter.forward(&p, zero, zero).map_err(|e| Error::Adapter {
        name: adapter.kind().into(),
        detail: e.to_string(),
    })?;
    if out.shape() != [hw, d] {
        return Err(Error::Adapter {
            name: adapter.kind().into(),
            detail: format!("output shape {:?}, expected [{hw}, {d}]", out.shape()),
        });
    }
    Ok(())
}

/// Runs the chain inside one encoder forward.
pub struct ChainHook<'a, 't> {
    chain: &'a BpmChain,
    params: &'a Bound<'t>,
    d_prev: Var<'t>,
}

impl<'t> BlockHook<'t> for ChainHook<'_, 't> {
    fn after_block(&mut self, block: usize, patches: Var<'t>) -> Result<Option<Var<'t>>> {
        let Some(bypass) = self.chain.block_for(block) else {
            return Ok(None);
        };
        let out = bypass.forward(self.params, patches, self.d_prev)?;
        self.d_prev = out;
        Ok(Some(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::VitEncoder;
    use crate::params::init_tensor;
    use crate::GradCheck;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn gate_examples() {
        let tape = Tape::new();
        let r = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let d = tape.constant(t(&[1, 2], &[0.0, 1.0]));
        let half = bpm_gate(r, d, tape.constant(Tensor::zeros(vec![1, 2]))).unwrap().value();
        assert_eq!(half.data(), &[0.5, 0.5]);
        let big = bpm_gate(r, d, tape.constant(Tensor::full(vec![1, 2], 800.0))).unwrap().value();
        assert_eq!(big.data(), r.value().data());
        let small = bpm_gate(r, d, tape.constant(Tensor::full(vec![1, 2], -800.0))).unwrap().value();
        assert_eq!(small.data(), d.value().data());
        assert!(bpm_gate(r, tape.constant(Tensor::zeros(vec![2, 1])), r).is_err());
    }

    #[test]
    fn gate_is_convex() {
        let tape = Tape::new();
        let r = init_tensor(&[6, 3], Init::Normal(1.0), 1);
        let d = init_tensor(&[6, 3], Init::Normal(1.0), 2);
        let a = init_tensor(&[6, 3], Init::Normal(3.0), 3);
        let out = bpm_gate(tape.constant(r.clone()), tape.constant(d.clone()), tape.constant(a))
            .unwrap()
            .value();
        for i in 0..out.len() {
            let (lo, hi) = (r.data()[i].min(d.data()[i]), r.data()[i].max(d.data()[i]));
            assert!(out.data()[i] >= lo - 1e-15 && out.data()[i] <= hi + 1e-15);
        }
    }

    fn one_block(d: usize, dd: usize, hw: usize) -> (ParamStore, BpmBlock) {
        let mut b = ParamBuilder::new(5);
        let block = BpmBlock::build(&mut b, "blk", d, dd, hw).unwrap();
        (b.finish(), block)
    }

    #[test]
    fn hand_evaluated_block() {
        let (mut store, blk) = one_block(2, 1, 1);
        store.set(blk.down_r.weight, t(&[2, 1], &[1.0, 0.0])).unwrap();
        store.set(blk.down_d.weight, t(&[2, 1], &[1.0, 0.0])).unwrap();
        store.set(blk.up.weight, t(&[1, 2], &[1.0, 0.0])).unwrap();
        store.set(blk.gate, Tensor::zeros(vec![1, 1])).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let r = tape.constant(t(&[1, 2], &[2.0, 9.0]));
        let d = tape.constant(t(&[1, 2], &[4.0, 7.0]));
        let out = blk.forward(&p, r, d).unwrap().value();
        assert_eq!(out.data(), &[9.0, 0.0]);
    }

    #[test]
    fn zero_weights_give_zero_bypass() {
        let (mut store, blk) = one_block(4, 2, 3);
        for id in [blk.down_r.weight, blk.down_d.weight, blk.up.weight] {
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let x = tape.constant(init_tensor(&[3, 4], Init::Normal(5.0), 9));
        let out = blk.forward(&p, x, x).unwrap().value();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_count() {
        assert_eq!(BpmBlock::closed_form_params(64, 8, 64), 2128);
        assert_eq!(BpmBlock::closed_form_params(384, 17, 256), 24354);
        let (store, _) = one_block(64, 8, 64);
        assert_eq!(store.count(Some(true)), 2128);
    }

    fn grad_check_variant(kind: AdapterKind) {
        let (d, dd, hw) = (6, 2, 4);
        let mut b = ParamBuilder::new(11);
        let block: Box<dyn Bypass> = match kind {
            AdapterKind::Bpm => Box::new(BpmBlock::build(&mut b, "blk", d, dd, hw).unwrap()),
            AdapterKind::Baseline => Box::new(BaselineAdapter::build(&mut b, "blk", d, dd).unwrap()),
        };
        let store = b.finish();
        for seed in 0..3 {
            let r = init_tensor(&[hw, d], Init::Normal(1.0), 100 + seed);
            let dp = init_tensor(&[hw, d], Init::Normal(1.0), 200 + seed);
            let w = init_tensor(&[hw, d], Init::Normal(1.0), 300 + seed);
            let mut params: Vec<(String, Tensor)> = vec![("R".into(), r), ("D".into(), dp)];
            let ids: Vec<ParamId> = store.trainable_ids().collect();
            params.extend(ids.iter().map(|&id| (store.spec(id).name.clone(), store.value(id).clone())));
            let report = GradCheck::new(1e-5, 1e-6)
                .run(&params, |tape, v| {
                    let mut p = store.bind_frozen(tape);
                    for (k, &id) in ids.iter().enumerate() {
                        p.replace(id, v[k + 2]);
                    }
                    let out = block.forward(&p, v[0], v[1])?;
                    out.mul(tape.constant(w.clone()))?.sum()
                })
                .unwrap();
            assert!(report.passed(), "{kind:?} seed {seed}: {report:?}");
        }
    }

    #[test]
    fn bpm_block_gradcheck() {
        grad_check_variant(AdapterKind::Bpm);
    }

    #[test]
    fn baseline_adapter_gradcheck() {
        grad_check_variant(AdapterKind::Baseline);
    }

    fn small_cfg(positions: Vec<usize>, shared: bool) -> ModelConfig {
        ModelConfig {
            image_side: 16,
            patch: 4,
            dim: 16,
            depth: 3,
            heads: 2,
            mlp_hidden: 32,
            beta: 4.0,
            bpm_positions: positions,
            bpm_shared: shared,
            ..ModelConfig::toy()
        }
    }

    fn build(cfg: &ModelConfig) -> (ParamStore, VitEncoder, Option<BpmChain>) {
        let mut b = ParamBuilder::new(cfg.seed);
        let vit = VitEncoder::build(&mut b, cfg).unwrap();
        let chain = BpmChain::build(&mut b, cfg).unwrap();
        let store = b.finish();
        if let Some(c) = &chain {
            c.register(&store).unwrap();
        }
        (store, vit, chain)
    }

    #[test]
    fn variants_differ_on_random_inputs() {
        let mut cfg = small_cfg(vec![1], false);
        let (s1, _, c1) = build(&cfg);
        cfg.adapter = AdapterKind::Baseline;
        let (s2, _, c2) = build(&cfg);
        let x = init_tensor(&[16, 16], Init::Normal(1.0), 4);
        let run = |s: &ParamStore, c: &BpmChain| {
            let tape = Tape::new();
            let p = s.bind_frozen(&tape);
            let v = tape.constant(x.clone());
            c.blocks[0].forward(&p, v, v).unwrap().value().data().to_vec()
        };
        assert_ne!(run(&s1, c1.as_ref().unwrap()), run(&s2, c2.as_ref().unwrap()));
    }

    #[derive(Debug)]
    struct Squash;
    impl Bypass for Squash {
        fn kind(&self) -> &'static str {
            "squash"
        }
        fn forward<'t>(&self, _: &Bound<'t>, r: Var<'t>, _: Var<'t>) -> Result<Var<'t>> {
            r.sum_over(1)
        }
    }

    #[test]
    fn wrong_shape_variant_rejected() {
        let store = ParamBuilder::new(0).finish();
        let e = check_adapter(&Squash, &store, 4, 3).unwrap_err();
        assert!(matches!(e, Error::Adapter { .. }), "{e}");
    }

    #[test]
    fn empty_chain_is_absent() {
        let (_, _, chain) = build(&small_cfg(vec![], false));
        assert!(chain.is_none());
    }

    #[test]
    fn shared_counts_are_constant_and_independent_grow() {
        let count = |pos: Vec<usize>, shared| {
            let mut b = ParamBuilder::layout_only();
            BpmChain::build(&mut b, &small_cfg(pos, shared)).unwrap();
            b.finish().count(Some(true))
        };
        assert_eq!(count(vec![1, 3], true), count(vec![1, 2, 3], true));
        assert!(count(vec![1, 3], false) < count(vec![1, 2, 3], false));
        let per = BpmBlock::closed_form_params(16, 4, 16);
        assert_eq!(count(vec![1, 2, 3], false) - count(vec![1, 2, 3], true), 2 * per);
    }

    #[test]
    fn shared_gradient_sums_position_contributions() {
        let cfg = small_cfg(vec![1, 2, 3], true);
        let (store, vit, chain) = build(&cfg);
        let chain = chain.unwrap();
        let img = init_tensor(&[3, 16, 16], Init::Normal(0.3), 1);
        let depth = init_tensor(&[1, 16, 16], Init::Normal(0.3), 2);
        let gate = store.id("bpm.shared.gate").unwrap();

        let tape = Tape::new();
        let p = store.bind(&tape);
        let tok = vit.embed(&p, &img).unwrap();
        let d0 = chain.depth_tokens(&p, &depth).unwrap();
        let mut hook = chain.hook(&p, d0);
        let out = vit.forward(&p, tok, Some(&mut hook)).unwrap();
        let loss = out.patches.mul(out.patches).unwrap().sum().unwrap();
        let g_shared = tape.backward(loss).unwrap().wrt(p[gate]);

        // Same forward with one independent copy of the gate per position.
        let tape = Tape::new();
        let mut p = store.bind(&tape);
        let copies: Vec<Var> = (0..3).map(|_| tape.param(store.value(gate).clone())).collect();
        struct PerPosition<'a, 't> {
            chain: &'a BpmChain,
            p: &'a mut Bound<'t>,
            copies: &'a [Var<'t>],
            gate: ParamId,
            d_prev: Var<'t>,
        }
        impl<'t> BlockHook<'t> for PerPosition<'_, 't> {
            fn after_block(&mut self, block: usize, patches: Var<'t>) -> Result<Option<Var<'t>>> {
                self.p.replace(self.gate, self.copies[block - 1]);
                let out = self.chain.block_for(block).unwrap().forward(self.p, patches, self.d_prev)?;
                self.d_prev = out;
                Ok(Some(out))
            }
        }
        let tok = vit.embed(&p, &img).unwrap();
        let d0 = chain.depth_tokens(&p, &depth).unwrap();
        let mut per = PerPosition {
            chain: &chain,
            p: &mut p,
            copies: &copies,
            gate,
            d_prev: d0,
        };
        let out = vit.forward(&store.bind_frozen(&tape), tok, Some(&mut per)).unwrap();
        let loss = out.patches.mul(out.patches).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let summed: Vec<f64> = (0..g_shared.len())
            .map(|i| copies.iter().map(|&c| grads.wrt(c).data()[i]).sum())
            .collect();
        for (a, b) in g_shared.data().iter().zip(&summed) {
            assert!(crate::relative_error(*a, *b) < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn chain_changes_only_configured_blocks() {
        let cfg = small_cfg(vec![2], false);
        let (store, vit, chain) = build(&cfg);
        let chain = chain.unwrap();
        let img = init_tensor(&[3, 16, 16], Init::Normal(0.3), 1);
        let depth = init_tensor(&[1, 16, 16], Init::Normal(0.3), 2);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let tok = vit.embed(&p, &img).unwrap();
        let plain = vit.forward(&p, tok, None).unwrap();
        let d0 = chain.depth_tokens(&p, &depth).unwrap();
        let mut hook = chain.hook(&p, d0);
        let hooked = vit.forward(&p, tok, Some(&mut hook)).unwrap();
        assert_eq!(plain.hidden[0].value().data(), hooked.hidden[0].value().data());
        assert_ne!(plain.hidden[1].value().data(), hooked.hidden[1].value().data());
    }
}
