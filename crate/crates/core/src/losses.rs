//! Training objectives and exocentric prototype extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, ParamBuilder};
use crate::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub tcls: f64,
    pub cos: f64,
    pub conc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tcls: 0.07,
            cos: 1.0,
            conc: 1.0,
        }
    }
}

/// Shared by the egocentric and exocentric branches.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub linear: Linear,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn build(b: &mut ParamBuilder, dim: usize, classes: usize) -> Result<Self> {
        Ok(ClassifierHead {
            linear: Linear::build(b, "head", dim, classes, true, 0.0)?,
            classes,
        })
    }

    pub fn logits<'t>(&self, p: &Bound<'t>, pooled: Var<'t>) -> Result<Var<'t>> {
        let d = pooled.shape()[0];
        self.linear.forward(p, pooled.reshape(&[1, d])?)?.reshape(&[self.classes])
    }

    /// `relu(F · w_y)` over the rows of `F`.
    pub fn cam<'t>(&self, p: &Bound<'t>, f: Var<'t>, y: usize) -> Result<Var<'t>> {
        self.check_label(y)?;
        let hw = f.shape()[0];
        f.matmul(p[self.linear.weight].narrow(1, y, 1)?)?.reshape(&[hw])?.relu()
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.classes {
            return Err(Error::Batch(format!("label {y} out of range for {} classes", self.classes)));
        }
        Ok(())
    }
}

/// Global average pooling over rows.
pub fn gap<'t>(f: Var<'t>) -> Result<Var<'t>> {
    f.mean_over(0)
}

/// Cross-entropy of the pooled egocentric features plus that of the mean exocentric map.
pub fn cls_loss<'t>(p: &Bound<'t>, head: &ClassifierHead, ego: Var<'t>, exo: &[Var<'t>], y: usize) -> Result<Var<'t>> {
    head.check_label(y)?;
    if exo.is_empty() {
        return Err(Error::Batch("classification loss needs exocentric features".into()));
    }
    let ego_term = head.logits(p, gap(ego)?)?.cross_entropy(y)?;
    let mut sum = exo[0];
    for e in &exo[1..] {
        sum = sum.add(*e)?;
    }
    let mean = sum.scale(1.0 / exo.len() as f64)?;
    ego_term.add(head.logits(p, gap(mean)?)?.cross_entropy(y)?)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn weighted_mean(points: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let d = points[0].len();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; d];
    if total > 0.0 {
        for (pt, &w) in points.iter().zip(weights) {
            for (o, v) in out.iter_mut().zip(*pt) {
                *o += w * v;
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
    } else {
        for pt in points {
            for (o, v) in out.iter_mut().zip(*pt) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= points.len() as f64);
    }
    out
}

/// Part prototype from the exocentric views: k-means over every patch vector
/// (farthest-point init from a seeded start), then the centroid of the cluster
/// with the highest mean CAM. With fewer distinct points than clusters the
/// CAM-weighted mean is returned instead.
pub fn exo_prototype(feats: &[&Tensor], cam: &[f64], clusters: usize, iters: usize, seed: u64) -> Result<Tensor> {
    let points: Vec<&[f64]> = feats
        .iter()
        .flat_map(|f| (0..f.shape()[0]).map(move |i| f.row(i)))
        .collect();
    if points.is_empty() || points.len() != cam.len() {
        return Err(Error::shape(
            "exo_prototype",
            format!("{} patch vectors, {} CAM values", points.len(), cam.len()),
        ));
    }
    if cam.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::Degenerate {
            op: "exo_prototype",
            detail: "CAM must be finite and non-negative".into(),
        });
    }
    let n = points.len();
    let k = clusters.max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let (far, &dist) = nearest
            .iter()
            .enumerate()
            .fold((0, &-1.0), |best, cur| if *cur.1 > *best.1 { cur } else { best });
        if dist <= 0.0 {
            return Tensor::new(vec![points[0].len()], weighted_mean(&points, cam));
        }
        centers.push(points[far].to_vec());
        for (m, p) in nearest.iter_mut().zip(&points) {
            *m = m.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                (0..centers.len())
                    .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                    .unwrap()
            })
            .collect()
    };
    let members = |labels: &[usize], c: usize| -> Vec<usize> { (0..n).filter(|&i| labels[i] == c).collect() };
    for _ in 0..iters {
        let labels = assign(&centers);
        for (c, center) in centers.iter_mut().enumerate() {
            let m = members(&labels, c);
            if !m.is_empty() {
                let pts: Vec<&[f64]> = m.iter().map(|&i| points[i]).collect();
                *center = weighted_mean(&pts, &[]);
            }
        }
    }
    let labels = assign(&centers);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for c in 0..k {
        let m = members(&labels, c);
        if m.is_empty() {
            continue;
        }
        let score = m.iter().map(|&i| cam[i]).sum::<f64>() / m.len() as f64;
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, m));
        }
    }
    let (_, m) = best.expect("at least one non-empty cluster");
    let pts: Vec<&[f64]> = m.iter().map(|&i| points[i]).collect();
    Tensor::new(vec![points[0].len()], weighted_mean(&pts, &[]))
}

/// CAM-weighted mean of the rows of `f`, or their plain mean when the CAM is all zero.
pub fn cam_weighted_mean<'t>(f: Var<'t>, cam: Var<'t>) -> Result<Var<'t>> {
    let (hw, d) = (f.shape()[0], f.shape()[1]);
    let total = cam.sum()?;
    if total.item() <= 0.0 {
        return f.mean_over(0);
    }
    cam.reshape(&[1, hw])?.matmul(f)?.reshape(&[d])?.div(total)
}

/// `1 − cos(prototype, embedding)`.
pub fn cos_loss<'t>(prototype: Var<'t>, embedding: Var<'t>) -> Result<Var<'t>> {
    prototype.cosine_similarity(embedding)?.neg()?.add_scalar(1.0)
}

/// Spatial variance of a normalised map about its centroid, with pixel
/// coordinates scaled to `[0, 1]`. Zero for an all-zero map.
pub fn concentration_loss<'t>(map: Var<'t>) -> Result<Var<'t>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::shape("concentration_loss", format!("map must be h×w, got {s:?}")));
    }
    let tape = map.tape();
    let total = map.sum()?;
    if total.item() <= 0.0 {
        return Ok(tape.scalar(0.0));
    }
    let (h, w) = (s[0], s[1]);
    let coord = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let ys = tape.constant(Tensor::from_fn(vec![h, w], |i| coord(i / w, h)));
    let xs = tape.constant(Tensor::from_fn(vec![h, w], |i| coord(i % w, w)));
    let m = map.div(total)?;
    let cy = m.mul(ys)?.sum()?;
    let cx = m.mul(xs)?.sum()?;
    let dy = ys.sub(cy)?;
    let dx = xs.sub(cx)?;
    m.mul(dy.mul(dy)?.add(dx.mul(dx)?)?)?.sum()
}

#[derive(Clone, Copy)]
pub struct LossParts<'t> {
    pub cls: Var<'t>,
    pub tcls: Var<'t>,
    pub cos: Var<'t>,
    pub conc: Var<'t>,
}

/// Scalar values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub tcls: f64,
    pub cos: f64,
    pub conc: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 5] = ["total", "cls", "tcls", "cos", "conc"];

    pub fn values(&self) -> [f64; 5] {
        [self.total, self.cls, self.tcls, self.cos, self.conc]
    }

    /// Each weighted term as it enters the total.
    pub fn contributions(&self, w: &LossWeights) -> [f64; 4] {
        [self.cls, w.tcls * self.tcls, w.cos * self.cos, w.conc * self.conc]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::COLUMNS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6} cls={:.6} tcls={:.6} cos={:.6} conc={:.6}",
            self.total, self.cls, self.tcls, self.cos, self.conc
        )
    }
}

/// `L_cls + λ_tcls·L_tcls + λ_cos·L_cos + λ_c·L_c`.
pub fn total_loss<'t>(parts: &LossParts<'t>, w: &LossWeights) -> Result<(Var<'t>, LossBreakdown)> {
    let mut bd = LossBreakdown {
        total: 0.0,
        cls: parts.cls.item(),
        tcls: parts.tcls.item(),
        cos: parts.cos.item(),
        conc: parts.conc.item(),
    };
    if let Some(term) = bd.first_non_finite() {
        return Err(Error::NonFinite(format!("loss term {term}")));
    }
    let total = parts
        .cls
        .add(parts.tcls.scale(w.tcls)?)?
        .add(parts.cos.scale(w.cos)?)?
        .add(parts.conc.scale(w.conc)?)?;
    bd.total = total.item();
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_tensor, Init, ParamStore};
    use crate::{GradCheck, Tape};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        init_tensor(shape, Init::Normal(1.0), seed)
    }

    fn head(dim: usize, k: usize) -> (ParamStore, ClassifierHead) {
        let mut b = ParamBuilder::new(2);
        let h = ClassifierHead::build(&mut b, dim, k).unwrap();
        (b.finish(), h)
    }

    #[test]
    fn uniform_head_gives_two_ln_k() {
        let (mut store, h) = head(4, 6);
        store.set(h.linear.weight, Tensor::zeros(vec![4, 6])).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let ego = tape.constant(rand(&[5, 4], 1));
        let exo: Vec<Var> = (0..3).map(|i| tape.constant(rand(&[5, 4], 2 + i))).collect();
        let l = cls_loss(&p, &h, ego, &exo, 3).unwrap().item();
        assert!((l - 2.0 * 6f64.ln()).abs() < 1e-12);
        assert!(cls_loss(&p, &h, ego, &exo, 6).is_err());
        assert!(cls_loss(&p, &h, ego, &[], 1).is_err());
    }

    #[test]
    fn cls_loss_gradcheck() {
        let (store, h) = head(4, 3);
        for seed in 0..3 {
            let params = vec![
                ("ego".to_string(), rand(&[5, 4], 10 + seed)),
                ("exo0".to_string(), rand(&[5, 4], 20 + seed)),
                ("exo1".to_string(), rand(&[5, 4], 30 + seed)),
                ("head.weight".to_string(), rand(&[4, 3], 40 + seed)),
            ];
            let report = GradCheck::new(1e-6, 1e-5)
                .run(&params, |tape, v| {
                    let mut p = store.bind_frozen(tape);
                    p.replace(h.linear.weight, v[3]);
                    cls_loss(&p, &h, v[0], &[v[1], v[2]], 2)
                })
                .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn identical_patches_fall_back() {
        let v = t(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let p = exo_prototype(&[&v, &v], &[0.1, 0.5, 0.0, 0.2, 0.3, 0.9], 3, 10, 0).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn prototype_picks_high_cam_blob() {
        // Blob A near (5, 5), blob B near (-5, -5), ten points each.
        let mut data = Vec::new();
        let noise = rand(&[20, 2], 3).map(|v| 0.3 * v);
        for i in 0..20 {
            let c = if i < 10 { 5.0 } else { -5.0 };
            data.push(c + noise.at(&[i, 0]));
            data.push(c + noise.at(&[i, 1]));
        }
        let pts = t(&[20, 2], &data);
        let cam: Vec<f64> = (0..20).map(|i| if i < 10 { 1.0 + i as f64 * 0.1 } else { 0.0 }).collect();
        for seed in 0..5 {
            let p = exo_prototype(&[&pts], &cam, 2, 10, seed).unwrap();
            let brute: Vec<f64> = (0..2).map(|c| (0..10).map(|i| pts.at(&[i, c])).sum::<f64>() / 10.0).collect();
            assert!((p.data()[0] - brute[0]).abs() < 1e-12 && (p.data()[1] - brute[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn prototype_is_convex_and_deterministic() {
        let a = rand(&[8, 3], 1);
        let b = rand(&[8, 3], 2);
        let cam: Vec<f64> = rand(&[16], 3).data().iter().map(|v| v.abs()).collect();
        let p1 = exo_prototype(&[&a, &b], &cam, 3, 10, 7).unwrap();
        let p2 = exo_prototype(&[&a, &b], &cam, 3, 10, 7).unwrap();
        assert_eq!(p1.data(), p2.data());
        for c in 0..3 {
            let col: Vec<f64> = (0..8).flat_map(|i| [a.at(&[i, c]), b.at(&[i, c])]).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(p1.data()[c] >= lo && p1.data()[c] <= hi);
        }
        assert!(exo_prototype(&[&a], &[1.0; 3], 3, 10, 0).is_err());
    }

    #[test]
    fn cos_loss_cases() {
        let tape = Tape::new();
        let c = |d: &[f64]| tape.constant(t(&[2], d));
        assert!(cos_loss(c(&[1.0, 2.0]), c(&[1.0, 2.0])).unwrap().item().abs() < 1e-15);
        assert!((cos_loss(c(&[1.0, 0.0]), c(&[0.0, 3.0])).unwrap().item() - 1.0).abs() < 1e-15);
        assert!((cos_loss(c(&[1.0, 2.0]), c(&[-2.0, -4.0])).unwrap().item() - 2.0).abs() < 1e-15);
        assert!(matches!(cos_loss(c(&[0.0, 0.0]), c(&[1.0, 1.0])), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn cam_weighted_mean_falls_back_on_zero_cam() {
        let tape = Tape::new();
        let f = tape.constant(t(&[2, 2], &[1.0, 3.0, 3.0, 5.0]));
        let m = cam_weighted_mean(f, tape.constant(Tensor::zeros(vec![2]))).unwrap().value();
        assert_eq!(m.data(), &[2.0, 4.0]);
        let m = cam_weighted_mean(f, tape.constant(t(&[2], &[3.0, 1.0]))).unwrap().value();
        assert_eq!(m.data(), &[1.5, 3.5]);
    }

    fn conc(map: Tensor) -> f64 {
        let tape = Tape::new();
        concentration_loss(tape.constant(map)).unwrap().item()
    }

    fn gaussian(side: usize, cy: f64, cx: f64, sigma: f64) -> Tensor {
        Tensor::from_fn(vec![side, side], |i| {
            let (y, x) = ((i / side) as f64, (i % side) as f64);
            (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn concentration_cases() {
        let mut point = Tensor::zeros(vec![4, 4]).into_data();
        point[5] = 2.0;
        assert_eq!(conc(t(&[4, 4], &point)), 0.0);
        assert!((conc(t(&[2, 1], &[1.0, 1.0])) - 0.25).abs() < 1e-15);
        assert_eq!(conc(Tensor::zeros(vec![3, 3])), 0.0);
        let uniform = conc(Tensor::full(vec![12, 12], 1.0));
        for (cy, cx) in [(5.5, 5.5), (3.0, 8.0), (2.0, 2.0)] {
            assert!(conc(gaussian(12, cy, cx, 1.5)) < uniform);
        }
    }

    #[test]
    fn concentration_is_translation_consistent() {
        let mut a = vec![0.0; 100];
        let mut b = vec![0.0; 100];
        for (dy, dx, v) in [(0, 0, 1.0), (0, 1, 2.0), (1, 0, 0.5), (2, 2, 1.5)] {
            a[(2 + dy) * 10 + 1 + dx] = v;
            b[(5 + dy) * 10 + 6 + dx] = v;
        }
        assert!((conc(t(&[10, 10], &a)) - conc(t(&[10, 10], &b))).abs() < 1e-14);
    }

    #[test]
    fn concentration_gradcheck() {
        for seed in 0..3 {
            let params = vec![("map".to_string(), rand(&[5, 4], 80 + seed))];
            let report = GradCheck::new(1e-6, 1e-6)
                .run(&params, |_, v| concentration_loss(v[0].exp()?))
                .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn total_is_linear_in_weights() {
        let tape = Tape::new();
        let parts = LossParts {
            cls: tape.scalar(1.3),
            tcls: tape.scalar(1.7),
            cos: tape.scalar(0.4),
            conc: tape.scalar(0.05),
        };
        let zero = LossWeights { tcls: 0.0, cos: 0.0, conc: 0.0 };
        assert_eq!(total_loss(&parts, &zero).unwrap().1.total, 1.3);
        let w = LossWeights::default();
        let (_, bd) = total_loss(&parts, &w).unwrap();
        assert!((bd.contributions(&w).iter().sum::<f64>() - bd.total).abs() < 1e-12);
        let w2 = LossWeights { conc: 2.0, ..w };
        let (_, bd2) = total_loss(&parts, &w2).unwrap();
        assert_eq!(bd2.contributions(&w2)[3], 2.0 * bd.contributions(&w)[3]);
        assert!((bd2.total - bd.total - 0.05).abs() < 1e-15);
        assert_eq!((w.tcls, w.cos, w.conc), (0.07, 1.0, 1.0));
    }
}
