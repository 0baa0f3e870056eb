//! Finite-difference gradient suite over every differentiable component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bpm::{bpm_gate, BaselineAdapter, BpmBlock, Bypass};
use crate::config::ModelConfig;
use crate::diff::GradCheckReport;
use crate::error::{Error, Result};
use crate::fusion::{blend, head_masked_features, pt_fuse, text_class_logits, tfg_fuse, TextAlign, TfgModule};
use crate::layers::TransformerBlock;
use crate::losses::{cam_weighted_mean, cls_loss, concentration_loss, cos_loss, ClassifierHead};
use crate::params::{init_tensor, Bound, Init, ParamBuilder, ParamId, ParamStore};
use crate::pipeline::{BitAlignModel, ForwardOptions, TrainItem};
use crate::{GradCheck, Tape, Tensor, Var};

pub const MODULES: [&str; 6] = ["diffcore", "encoders", "bpm", "fusion", "losses", "pipeline"];

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Central-difference step for raw-input checks.
pub const PRIMITIVE_EPS: f64 = 1e-5;
/// Relative-error denominator floor for primitives: coordinates whose
/// gradient is below it must agree to `PRIMITIVE_TOL·PRIMITIVE_FLOOR`
/// absolutely.
pub const PRIMITIVE_FLOOR: f64 = 1e-4;
/// Tolerance for composite modules and the full objective.
pub const COMPOSITE_TOL: f64 = 1e-4;
/// Relative-error denominator floor for composite checks.
pub const COMPOSITE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub module: &'static str,
    pub case: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    seed: u64,
    out: Vec<CheckResult>,
    module: &'static str,
}

impl Ctx {
    fn rand(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
    }

    fn push(&mut self, case: impl Into<String>, report: GradCheckReport) {
        self.out.push(CheckResult {
            module: self.module,
            case: case.into(),
            report,
        });
    }

    /// Checks a raw-input program after contracting it with fixed weights.
    fn raw<F>(&mut self, case: &str, tol: f64, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
    {
        let named: Vec<(String, Tensor)> = inputs.into_iter().enumerate().map(|(i, t)| (format!("x{i}"), t)).collect();
        let seed = self.seed;
        let floor = if tol < COMPOSITE_TOL { PRIMITIVE_FLOOR } else { COMPOSITE_FLOOR };
        let report = GradCheck::new(PRIMITIVE_EPS, tol).floor(floor).run(&named, |_, v| contract(f(v)?, seed))?;
        self.push(case, report);
        Ok(())
    }

    /// Checks a program over raw `inputs` plus the parameters `ids` of `store`.
    #[allow(clippy::too_many_arguments)]
    fn with_store<F>(
        &mut self,
        case: &str,
        eps: f64,
        tol: f64,
        store: &ParamStore,
        ids: &[ParamId],
        inputs: Vec<(String, Tensor)>,
        f: F,
    ) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape, &Bound<'t>, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let k = inputs.len();
        let mut params = inputs;
        params.extend(ids.iter().map(|&id| (store.spec(id).name.clone(), store.value(id).clone())));
        let report = GradCheck::new(eps, tol).max_coords(24).floor(COMPOSITE_FLOOR).run(&params, |tape, v| {
            let mut p = store.bind_frozen(tape);
            for (j, &id) in ids.iter().enumerate() {
                p.replace(id, v[k + j]);
            }
            f(tape, &p, &v[..k])
        })?;
        self.push(case, report);
        Ok(())
    }
}

/// `Σ y ⊙ W` for random `W` fixed by `seed`, so upstream gradients are generic.
fn contract<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
    y.mul(y.tape().constant(w))?.sum()
}

fn diffcore(c: &mut Ctx) -> Result<()> {
    let (a, b, k) = (c.rng.random_range(2..5), c.rng.random_range(2..6), c.rng.random_range(1..5));
    let x = c.rand(&[a, b], -1.5, 1.5);
    let y = c.rand(&[a, b], -1.5, 1.5);
    let pos = x.map(|v| v.abs() + 0.5);
    let tol = PRIMITIVE_TOL;
    c.raw("add", tol, vec![x.clone(), y.clone()], |v| v[0].add(v[1]))?;
    c.raw("sub", tol, vec![x.clone(), y.clone()], |v| v[0].sub(v[1]))?;
    c.raw("mul", tol, vec![x.clone(), y.clone()], |v| v[0].mul(v[1]))?;
    c.raw("div", tol, vec![x.clone(), pos.clone()], |v| v[0].div(v[1]))?;
    c.raw("scale", tol, vec![x.clone()], |v| v[0].scale(-2.5))?;
    c.raw("add_scalar", tol, vec![x.clone()], |v| v[0].add_scalar(0.3))?;
    c.raw("neg", tol, vec![x.clone()], |v| v[0].neg())?;
    c.raw("sigmoid", tol, vec![x.clone()], |v| v[0].sigmoid())?;
    c.raw("gelu", tol, vec![x.clone()], |v| v[0].gelu())?;
    c.raw("exp", tol, vec![x.clone()], |v| v[0].exp())?;
    c.raw("ln", tol, vec![pos.clone()], |v| v[0].ln())?;
    c.raw("sqrt", tol, vec![pos.clone()], |v| v[0].sqrt())?;
    let off_kink = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    c.raw("relu", tol, vec![off_kink], |v| v[0].relu())?;
    c.raw("softmax", tol, vec![x.clone()], |v| v[0].softmax(1))?;
    c.raw("sum", tol, vec![x.clone()], |v| v[0].sum())?;
    c.raw("sum_over", tol, vec![x.clone()], |v| v[0].sum_over(1))?;
    c.raw("mean_over", tol, vec![x.clone()], |v| v[0].mean_over(0))?;
    c.raw("transpose", tol, vec![x.clone()], |v| v[0].t())?;
    c.raw("reshape", tol, vec![x.clone()], |v| v[0].reshape(&[a * b]))?;
    c.raw("narrow", tol, vec![x.clone()], |v| v[0].narrow(1, 1, b - 1))?;
    c.raw("concat", tol, vec![x.clone(), y.clone()], |v| Var::concat(&[v[0], v[1], v[0]], 1))?;
    let col = c.rand(&[a, 1], -1.5, 1.5);
    c.raw("broadcast", tol, vec![x.clone(), col.clone()], |v| v[0].add(v[1]))?;
    c.raw("broadcast_to", tol, vec![col], |v| v[0].broadcast_to(&[a, b]))?;
    let w = c.rand(&[b, k], -1.0, 1.0);
    let bias = c.rand(&[k], -1.0, 1.0);
    c.raw("matmul", tol, vec![x.clone(), w.clone()], |v| v[0].matmul(v[1]))?;
    c.raw("affine", tol, vec![x.clone(), w, bias], |v| v[0].affine(v[1], v[2]))?;
    let gain = c.rand(&[b], -1.0, 1.0);
    let shift = c.rand(&[b], -1.0, 1.0);
    c.raw("layer_norm", tol, vec![x.clone(), gain, shift], |v| v[0].layer_norm(v[1], v[2]))?;
    let u = c.rand(&[b], -1.5, 1.5);
    let u2 = c.rand(&[b], -1.5, 1.5);
    c.raw("cosine_similarity", tol, vec![u.clone(), u2], |v| v[0].cosine_similarity(v[1]))?;
    let label = c.seed as usize % b;
    c.raw("cross_entropy", tol, vec![u], move |v| v[0].cross_entropy(label))
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    (0..store.len()).map(ParamId).collect()
}

fn micro(seed: u64) -> ModelConfig {
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
        seed,
        ..ModelConfig::toy()
    }
}

fn encoders(c: &mut Ctx) -> Result<()> {
    let mut b = ParamBuilder::new(c.seed);
    let block = TransformerBlock::build(&mut b, "block", 8, 2, 16, true)?;
    let store = b.finish();
    let x = c.rand(&[5, 8], -1.0, 1.0);
    let ids = all_ids(&store);
    let seed = c.seed;
    c.with_store("transformer_block", 1e-5, COMPOSITE_TOL, &store, &ids, vec![("x".into(), x)], |_, p, v| {
        let (out, maps) = block.forward(p, v[0], true)?;
        contract(out, seed)?.add(contract(maps[1], seed + 1)?)
    })?;

    let model = BitAlignModel::build(&micro(c.seed))?;
    let names = ["prompts", "text_proj.weight", "text_proj.bias"];
    let ids: Vec<ParamId> = names.iter().filter_map(|n| model.store.id(n)).collect();
    c.with_store("text_encoder", 1e-5, COMPOSITE_TOL, &model.store, &ids, vec![], |_, p, _| {
        let t = model.text.encode(p, &model.prompts, &model.text_proj, "pour")?;
        contract(t, seed)
    })
}

fn bpm(c: &mut Ctx) -> Result<()> {
    let (hw, d, dd) = (6, 5, 3);
    let r = c.rand(&[hw, dd], -1.0, 1.0);
    let dm = c.rand(&[hw, dd], -1.0, 1.0);
    let a = c.rand(&[hw, dd], -2.0, 2.0);
    c.raw("gate", COMPOSITE_TOL, vec![r, dm, a], |v| bpm_gate(v[0], v[1], v[2]))?;
    let mut b = ParamBuilder::new(c.seed);
    let bpm = BpmBlock::build(&mut b, "bpm", d, dd, hw)?;
    let base = BaselineAdapter::build(&mut b, "base", d, dd)?;
    let store = b.finish();
    let ids = all_ids(&store);
    let inputs = vec![("R".to_string(), c.rand(&[hw, d], -1.0, 1.0)), ("D".to_string(), c.rand(&[hw, d], -1.0, 1.0))];
    let seed = c.seed;
    c.with_store("bpm_block", 1e-5, COMPOSITE_TOL, &store, &ids, inputs.clone(), |_, p, v| {
        contract(bpm.forward(p, v[0], v[1])?, seed)
    })?;
    c.with_store("baseline_adapter", 1e-5, COMPOSITE_TOL, &store, &ids, inputs, |_, p, v| {
        contract(base.forward(p, v[0], v[1])?, seed)
    })
}

fn fusion(c: &mut Ctx) -> Result<()> {
    let (hw, d, heads) = (5, 4, 3);
    let f = c.rand(&[hw, d], -1.0, 1.0);
    let t = c.rand(&[d], -1.0, 1.0);
    let seed = c.seed;
    c.raw("pixel_text", COMPOSITE_TOL, vec![f.clone(), t.clone()], |v| pt_fuse(v[0], v[1], 0.5))?;

    let mut b = ParamBuilder::new(c.seed);
    let align = TextAlign::build(&mut b, d, true)?;
    let tfg = TfgModule::build(&mut b, d, 6, heads)?;
    let mut store = b.finish();
    // move the zero-initialised output layer off its special point
    store.set(tfg.fc2.weight, init_tensor(&[6, heads], Init::Normal(0.5), seed))?;
    let lin = align.projector.clone().expect("learned projector");
    let inputs = vec![("cls".to_string(), c.rand(&[d], -1.0, 1.0)), ("text".to_string(), c.rand(&[4, d], -1.0, 1.0))];
    c.with_store("text_logits", 1e-5, COMPOSITE_TOL, &store, &[lin.weight], inputs, |_, p, v| {
        text_class_logits(p, v[0], v[1], &align, 0.5)?.cross_entropy(1)
    })?;

    let ids = [tfg.fc1.weight, tfg.fc1.bias, tfg.fc2.weight, tfg.fc2.bias];
    let inputs = vec![
        ("F".to_string(), f),
        ("text".to_string(), t),
        ("attn".to_string(), c.rand(&[heads, hw], -1.0, 1.0)),
    ];
    for alpha in [0.0, 0.8, 1.0] {
        c.with_store(&format!("tfg_blend(alpha={alpha})"), 1e-5, COMPOSITE_TOL, &store, &ids, inputs.clone(), |_, p, v| {
            let maps: Vec<Var> = (0..heads)
                .map(|i| v[2].narrow(0, i, 1)?.reshape(&[hw])?.softmax(0))
                .collect::<Result<_>>()?;
            let fp = pt_fuse(v[0], v[1], 0.5)?;
            let h = tfg.head_weights(p, v[1])?;
            let ft = tfg_fuse(&head_masked_features(v[0], &maps)?, h)?;
            contract(blend(ft, fp, alpha)?, seed)
        })?;
    }
    Ok(())
}

fn losses(c: &mut Ctx) -> Result<()> {
    let (hw, d, k) = (6, 4, 3);
    let mut b = ParamBuilder::new(c.seed);
    let head = ClassifierHead::build(&mut b, d, k)?;
    let mut store = b.finish();
    store.set(head.linear.weight, init_tensor(&[d, k], Init::Normal(1.0), c.seed))?;
    let ids = all_ids(&store);
    let y = c.seed as usize % k;
    let inputs = vec![
        ("ego".to_string(), c.rand(&[hw, d], -1.0, 1.0)),
        ("exo0".to_string(), c.rand(&[hw, d], -1.0, 1.0)),
        ("exo1".to_string(), c.rand(&[hw, d], -1.0, 1.0)),
    ];
    c.with_store("cls", 1e-5, COMPOSITE_TOL, &store, &ids, inputs, |_, p, v| {
        cls_loss(p, &head, v[0], &v[1..], y)
    })?;
    let f = c.rand(&[hw, d], -1.0, 1.0);
    let cam = c.rand(&[hw], 0.1, 1.0);
    let proto = c.rand(&[d], -1.0, 1.0);
    c.raw("cosine", COMPOSITE_TOL, vec![f, cam, proto], |v| cos_loss(v[2], cam_weighted_mean(v[0], v[1])?))?;
    let map = c.rand(&[3, 4], 0.1, 1.0);
    c.raw("concentration", COMPOSITE_TOL, vec![map], |v| concentration_loss(v[0]))
}

fn pipeline(c: &mut Ctx) -> Result<()> {
    let cfg = micro(c.seed);
    let mut model = BitAlignModel::build(&cfg)?;
    // train-like point: a non-zero head-MLP output so every branch carries gradient
    let fc2 = model.tfg.fc2.weight;
    let shape = model.store.spec(fc2).shape.clone();
    model.store.set(fc2, init_tensor(&shape, Init::Normal(0.5), c.seed))?;
    let n = cfg.image_side;
    let rgb = c.rand(&[3, n, n], 0.0, 1.0);
    let depth = c.rand(&[1, n, n], 0.0, 1.0);
    let exo: Vec<Tensor> = (0..3).map(|_| c.rand(&[3, n, n], 0.0, 1.0)).collect();
    let label = c.seed as usize % cfg.classes();
    let item = TrainItem {
        rgb: &rgb,
        depth: &depth,
        exo: &exo,
        label,
    };
    let protos = {
        let tape = Tape::new();
        let p = model.store.bind_frozen(&tape);
        model.forward_train(&p, &[item], &ForwardOptions::default())?.prototypes
    };
    let ids: Vec<ParamId> = model.store.trainable_ids().collect();
    let opts = ForwardOptions {
        prototypes: Some(&protos),
        seed: 0,
    };
    c.with_store("total_loss", 1e-5, COMPOSITE_TOL, &model.store, &ids, vec![], |_, p, _| {
        Ok(model.forward_train(p, &[item], &opts)?.total)
    })
}

/// Runs the checks of `module` (all modules when `None`) at one seed.
pub fn gradient_suite(module: Option<&str>, seed: u64) -> Result<Vec<CheckResult>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::config("module", format!("unknown module {m:?} (expected one of {})", MODULES.join(", "))));
        }
    }
    let mut c = Ctx {
        rng: ChaCha8Rng::seed_from_u64(seed),
        seed,
        out: Vec::new(),
        module: "",
    };
    let runs: [(&'static str, fn(&mut Ctx) -> Result<()>); 6] = [
        ("diffcore", diffcore),
        ("encoders", encoders),
        ("bpm", bpm),
        ("fusion", fusion),
        ("losses", losses),
        ("pipeline", pipeline),
    ];
    for (name, run) in runs {
        if module.is_none_or(|m| m == name) {
            c.module = name;
            run(&mut c)?;
        }
    }
    Ok(c.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_passes_at_one_seed() {
        let results = gradient_suite(None, 11).unwrap();
        for m in MODULES {
            assert!(results.iter().any(|r| r.module == m), "{m}");
        }
        for r in &results {
            assert!(r.passed(), "{}::{} {:?}", r.module, r.case, r.report);
        }
    }

    #[test]
    fn unknown_module_is_rejected() {
        assert!(gradient_suite(Some("nope"), 0).is_err());
        let only = gradient_suite(Some("bpm"), 0).unwrap();
        assert!(only.iter().all(|r| r.module == "bpm"));
    }
}
