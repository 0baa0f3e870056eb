use crate::bpm::BpmChain;
use crate::config::ModelConfig;
use crate::encoders::{BlockHook, EncoderOutput, PromptTokens, TextEncoder, VitEncoder};
use crate::error::{Error, Result};
use crate::fusion::{blend, head_masked_features, pt_fuse, text_class_logits, tfg_fuse, TextAlign, TfgModule};
use crate::layers::Linear;
use crate::losses::{
    cam_weighted_mean, cls_loss, concentration_loss, cos_loss, exo_prototype, total_loss, ClassifierHead,
    LossBreakdown, LossParts, LossWeights,
};
use crate::params::{sub_seed, Bound, ParamBuilder, ParamStore};
use crate::{Tape, Tensor, Var};

/// One training example as the optimiser sees it. There is no ground-truth field.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub rgb: &'a Tensor,
    pub depth: &'a Tensor,
    pub exo: &'a [Tensor],
    pub label: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    /// Fixed prototypes, one per batch item, instead of clustering afresh.
    pub prototypes: Option<&'a [Tensor]>,
    /// Base seed for the k-means initialisation.
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// Head weights of every batch item.
    pub head_weights: Vec<Vec<f64>>,
    /// Mean sigmoid gate per bypass block.
    pub gate_means: Vec<f64>,
}

pub struct TrainForward<'t> {
    pub total: Var<'t>,
    pub parts: LossParts<'t>,
    pub breakdown: LossBreakdown,
    pub diagnostics: Diagnostics,
    pub prototypes: Vec<Tensor>,
}

/// Egocentric features along the inference path.
pub(crate) struct EgoPass<'t> {
    pub encoder: EncoderOutput<'t>,
    pub fused: Var<'t>,
    pub head_weights: Var<'t>,
}

#[derive(Debug)]
pub struct BitAlignModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vit: VitEncoder,
    pub text: TextEncoder,
    pub prompts: PromptTokens,
    pub text_proj: Linear,
    pub align: TextAlign,
    pub tfg: TfgModule,
    pub chain: Option<BpmChain>,
    pub head: ClassifierHead,
}

struct Parts {
    vit: VitEncoder,
    text: TextEncoder,
    prompts: PromptTokens,
    text_proj: Linear,
    align: TextAlign,
    tfg: TfgModule,
    chain: Option<BpmChain>,
    head: ClassifierHead,
}

fn assemble(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Parts> {
    Ok(Parts {
        vit: VitEncoder::build(b, cfg)?,
        text: TextEncoder::build(b, cfg)?,
        prompts: PromptTokens::build(b, cfg.prompts, cfg.text_dim)?,
        text_proj: Linear::build(b, "text_proj", cfg.text_dim, cfg.dim, true, 0.0)?,
        align: TextAlign::build(b, cfg.dim, cfg.align_projector)?,
        tfg: TfgModule::build(b, cfg.dim, cfg.tfg_hidden, cfg.heads)?,
        chain: BpmChain::build(b, cfg)?,
        head: ClassifierHead::build(b, cfg.dim, cfg.classes())?,
    })
}

fn run_encoder<'t>(
    model: &BitAlignModel,
    p: &Bound<'t>,
    image: &Tensor,
    depth_tokens: Option<Var<'t>>,
) -> Result<EncoderOutput<'t>> {
    let tokens = model.vit.embed(p, image)?;
    match (&model.chain, depth_tokens) {
        (Some(chain), Some(d0)) => {
            let mut hook = chain.hook(p, d0);
            model.vit.forward(p, tokens, Some(&mut hook as &mut dyn BlockHook<'t>))
        }
        _ => model.vit.forward(p, tokens, None),
    }
}

impl BitAlignModel {
    /// Validates `config` and initialises every parameter from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(config.seed);
        let parts = assemble(&mut b, config)?;
        let store = b.finish();
        if let Some(chain) = &parts.chain {
            chain.register(&store)?;
        }
        Ok(BitAlignModel {
            config: config.clone(),
            store,
            vit: parts.vit,
            text: parts.text,
            prompts: parts.prompts,
            text_proj: parts.text_proj,
            align: parts.align,
            tfg: parts.tfg,
            chain: parts.chain,
            head: parts.head,
        })
    }

    /// Names and shapes of every parameter `config` would create, without allocating them.
    pub fn layout(config: &ModelConfig) -> Result<ParamStore> {
        config.validate()?;
        let mut b = ParamBuilder::layout_only();
        assemble(&mut b, config)?;
        Ok(b.finish())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            tcls: self.config.lambda_tcls,
            cos: self.config.lambda_cos,
            conc: self.config.lambda_c,
        }
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.config.label_index(label)
    }

    pub(crate) fn text_feature<'t>(&self, p: &Bound<'t>, label: usize) -> Result<Var<'t>> {
        self.text.encode(p, &self.prompts, &self.text_proj, &self.config.labels[label])
    }

    /// Text features of every class, `K×d`.
    pub fn text_features<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        let d = self.config.dim;
        let rows = (0..self.config.classes())
            .map(|k| self.text_feature(p, k)?.reshape(&[1, d]))
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&rows, 0)
    }

    pub(crate) fn ego_pass<'t>(&self, p: &Bound<'t>, rgb: &Tensor, depth: &Tensor, text_y: Var<'t>) -> Result<EgoPass<'t>> {
        let d0 = match &self.chain {
            Some(chain) => Some(chain.depth_tokens(p, depth)?),
            None => None,
        };
        let encoder = run_encoder(self, p, rgb, d0)?;
        let fe = encoder.patches;
        let fp = if self.config.use_pt { pt_fuse(fe, text_y, self.config.mu())? } else { fe };
        let head_weights = self.tfg.head_weights(p, text_y)?;
        let fused = if self.config.use_tfg {
            let ft = tfg_fuse(&head_masked_features(fe, &encoder.head_attn)?, head_weights)?;
            blend(ft, fp, self.config.alpha)?
        } else {
            fp
        };
        Ok(EgoPass {
            encoder,
            fused,
            head_weights,
        })
    }

    /// Patch features of an exocentric view; its depth input is all zeros.
    pub fn exo_features<'t>(&self, p: &Bound<'t>, image: &Tensor) -> Result<Var<'t>> {
        let tape = p[self.head.linear.weight].tape();
        let d0 = self.chain.as_ref().map(|c| c.zero_tokens(tape));
        Ok(run_encoder(self, p, image, d0)?.patches)
    }

    /// Batch-mean objective with its breakdown.
    pub fn forward_train<'t>(&self, p: &Bound<'t>, batch: &[TrainItem], opts: &ForwardOptions) -> Result<TrainForward<'t>> {
        if batch.is_empty() {
            return Err(Error::Batch("empty batch".into()));
        }
        if let Some(protos) = opts.prototypes {
            if protos.len() != batch.len() {
                return Err(Error::Batch(format!("{} prototypes for {} samples", protos.len(), batch.len())));
            }
        }
        let cfg = &self.config;
        let g = cfg.grid();
        let text_all = self.text_features(p)?;
        let mut sums: Option<LossParts<'t>> = None;
        let mut diagnostics = Diagnostics::default();
        let mut prototypes = Vec::with_capacity(batch.len());
        for (i, item) in batch.iter().enumerate() {
            if item.exo.is_empty() {
                return Err(Error::Batch(format!("sample {i} has no exocentric images")));
            }
            if item.label >= cfg.classes() {
                return Err(Error::Batch(format!("sample {i}: label {} out of range for {} classes", item.label, cfg.classes())));
            }
            let y = item.label;
            let text_y = text_all.narrow(0, y, 1)?.reshape(&[cfg.dim])?;
            let ego = self.ego_pass(p, item.rgb, item.depth, text_y)?;
            let exo = item
                .exo
                .iter()
                .map(|im| self.exo_features(p, im))
                .collect::<Result<Vec<_>>>()?;

            let cls = cls_loss(p, &self.head, ego.fused, &exo, y)?;
            let tcls = text_class_logits(p, ego.encoder.cls, text_all, &self.align, cfg.tau)?.cross_entropy(y)?;
            let cam = self.head.cam(p, ego.fused, y)?;
            let conc = concentration_loss(cam.reshape(&[g, g])?)?;

            let proto = match opts.prototypes {
                Some(fixed) => fixed[i].clone(),
                None => {
                    let mut cams = Vec::with_capacity(exo.len() * cfg.hw());
                    let mut feats = Vec::with_capacity(exo.len());
                    for e in &exo {
                        cams.extend_from_slice(self.head.cam(p, *e, y)?.value().data());
                        feats.push(e.value());
                    }
                    let refs: Vec<&Tensor> = feats.iter().map(|f| f.as_ref()).collect();
                    let seed = sub_seed(opts.seed, &format!("prototype.{i}"));
                    exo_prototype(&refs, &cams, cfg.kmeans_clusters, cfg.kmeans_iters, seed)?
                }
            };
            let tape = cam.tape();
            let emb = cam_weighted_mean(ego.encoder.patches, cam)?;
            let cos = cos_loss(tape.constant(proto.clone()), emb)?;
            prototypes.push(proto);
            diagnostics.head_weights.push(ego.head_weights.value().data().to_vec());

            sums = Some(match sums {
                None => LossParts { cls, tcls, cos, conc },
                Some(s) => LossParts {
                    cls: s.cls.add(cls)?,
                    tcls: s.tcls.add(tcls)?,
                    cos: s.cos.add(cos)?,
                    conc: s.conc.add(conc)?,
                },
            });
        }
        let s = sums.expect("non-empty batch");
        let inv = 1.0 / batch.len() as f64;
        let parts = LossParts {
            cls: s.cls.scale(inv)?,
            tcls: s.tcls.scale(inv)?,
            cos: s.cos.scale(inv)?,
            conc: s.conc.scale(inv)?,
        };
        let (total, breakdown) = total_loss(&parts, &self.loss_weights())?;
        if let Some(chain) = &self.chain {
            diagnostics.gate_means = chain.gate_means(&self.store);
        }
        Ok(TrainForward {
            total,
            parts,
            breakdown,
            diagnostics,
            prototypes,
        })
    }

    /// Head weights for one label under the current parameters.
    pub fn head_weights(&self, label: usize) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let t = self.text_feature(&p, label)?;
        Ok(self.tfg.head_weights(&p, t)?.value().data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_tensor, Init};

    pub(crate) fn micro() -> ModelConfig {
        ModelConfig {
            image_side: 16,
            patch: 4,
            dim: 8,
            depth: 3,
            heads: 2,
            mlp_hidden: 16,
            text_dim: 8,
            text_heads: 2,
            prompts: 2,
            labels: vec!["hold".into(), "cut".into(), "pour".into()],
            beta: 4.0,
            bpm_positions: vec![1, 3],
            tfg_hidden: 8,
            ..ModelConfig::toy()
        }
    }

    struct Owned {
        rgb: Tensor,
        depth: Tensor,
        exo: Vec<Tensor>,
        label: usize,
    }

    fn sample(side: usize, seed: u64, label: usize) -> Owned {
        let img = |s: u64, c: usize| init_tensor(&[c, side, side], Init::Normal(0.3), s).map(|v| v.abs().min(1.0));
        Owned {
            rgb: img(seed, 3),
            depth: img(seed + 1, 1),
            exo: (0..3).map(|i| img(seed + 2 + i, 3)).collect(),
            label,
        }
    }

    fn item(o: &Owned) -> TrainItem<'_> {
        TrainItem {
            rgb: &o.rgb,
            depth: &o.depth,
            exo: &o.exo,
            label: o.label,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = BitAlignModel::build(&micro()).unwrap();
        let b = BitAlignModel::build(&micro()).unwrap();
        for ((sa, ta), (sb, tb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(sa, sb);
            assert_eq!(ta.data(), tb.data());
        }
        let mut other = micro();
        other.seed = 1;
        let c = BitAlignModel::build(&other).unwrap();
        assert_ne!(a.store.get("bpm.block1.gate").unwrap().data(), c.store.get("bpm.block1.gate").unwrap().data());
    }

    #[test]
    fn layout_matches_built_store() {
        let m = BitAlignModel::build(&micro()).unwrap();
        let l = BitAlignModel::layout(&micro()).unwrap();
        assert_eq!(m.store.specs(), l.specs());
    }

    #[test]
    fn frozen_partition() {
        let m = BitAlignModel::build(&micro()).unwrap();
        for s in m.store.specs() {
            let frozen = s.name.starts_with("vit.") || s.name.starts_with("text.");
            assert_eq!(s.trainable, !frozen, "{}", s.name);
        }
    }

    #[test]
    fn breakdown_recombines_and_heads_normalised() {
        let m = BitAlignModel::build(&micro()).unwrap();
        let data = [sample(16, 1, 0), sample(16, 10, 2)];
        let batch: Vec<TrainItem> = data.iter().map(item).collect();
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let out = m.forward_train(&p, &batch, &ForwardOptions::default()).unwrap();
        let bd = out.breakdown;
        let sum: f64 = bd.contributions(&m.loss_weights()).iter().sum();
        assert!((sum - bd.total).abs() < 1e-12);
        assert_eq!(out.diagnostics.head_weights.len(), 2);
        for h in &out.diagnostics.head_weights {
            assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.diagnostics.gate_means.len(), 2);
        assert_eq!(out.prototypes.len(), 2);
    }

    #[test]
    fn batch_errors() {
        let m = BitAlignModel::build(&micro()).unwrap();
        let s = sample(16, 1, 0);
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let no_exo = TrainItem { exo: &[], ..item(&s) };
        assert!(matches!(m.forward_train(&p, &[no_exo], &ForwardOptions::default()), Err(Error::Batch(_))));
        assert!(matches!(m.forward_train(&p, &[], &ForwardOptions::default()), Err(Error::Batch(_))));
        let bad = TrainItem { label: 7, ..item(&s) };
        assert!(matches!(m.forward_train(&p, &[bad], &ForwardOptions::default()), Err(Error::Batch(_))));
    }

    #[test]
    fn fixed_prototypes_reproduce_clustered_loss() {
        let m = BitAlignModel::build(&micro()).unwrap();
        let s = sample(16, 3, 1);
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let a = m.forward_train(&p, &[item(&s)], &ForwardOptions::default()).unwrap();
        let fixed = a.prototypes.clone();
        let b = m
            .forward_train(&p, &[item(&s)], &ForwardOptions { prototypes: Some(&fixed), seed: 0 })
            .unwrap();
        assert_eq!(a.breakdown, b.breakdown);
    }

    #[test]
    fn cosine_term_ignores_exo_branch_given_prototype() {
        let m = BitAlignModel::build(&micro()).unwrap();
        let s = sample(16, 5, 2);
        let mut other = sample(16, 50, 2);
        other.rgb = s.rgb.clone();
        other.depth = s.depth.clone();
        let run = |o: &Owned, protos: Option<&[Tensor]>| {
            let tape = Tape::new();
            let p = m.store.bind(&tape);
            let out = m
                .forward_train(&p, &[item(o)], &ForwardOptions { prototypes: protos, seed: 0 })
                .unwrap();
            let g = tape.backward(out.parts.cos).unwrap();
            let grads: Vec<Vec<f64>> = p.vars().iter().map(|&v| g.wrt(v).data().to_vec()).collect();
            (out.breakdown, out.prototypes, grads)
        };
        let (bd, protos, ga) = run(&s, None);
        let (bd2, _, gb) = run(&other, Some(&protos));
        assert_eq!(bd.cos, bd2.cos);
        assert_eq!(ga, gb);
        assert_ne!(bd.cls, bd2.cls);
    }
}
