//! Heatmap agreement metrics, dataset evaluation and per-label head statistics.
//!
//! Conventions: both maps are sum-normalised for KLD and SIM (a zero
//! prediction is treated as uniform), NSS standardises the prediction with the
//! population deviation and averages it over pixels where the ground truth is
//! positive, and predictions are resized to the ground-truth grid bilinearly.

use serde::Serialize;

use crate::data::Sample;
use crate::diff::{self, Scalar};
use crate::error::{Error, Result};
use crate::pipeline::BitAlignModel;

pub const KLD_EPS: f64 = 1e-12;
pub const NSS_MIN_STD: f64 = 1e-8;

fn check_pair<T: Scalar>(op: &'static str, p: &diff::Tensor<T>, g: &diff::Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::shape(op, format!("prediction {:?} vs ground truth {:?}", p.shape(), g.shape())));
    }
    if p.is_empty() {
        return Err(Error::Degenerate { op, detail: "empty map".into() });
    }
    if p.data().iter().chain(g.data()).any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(Error::Degenerate { op, detail: "maps must be finite and nonnegative".into() });
    }
    Ok(())
}

fn normalise_pair<T: Scalar>(op: &'static str, p: &diff::Tensor<T>, g: &diff::Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    check_pair(op, p, g)?;
    let gs = g.sum();
    if gs <= T::zero() {
        return Err(Error::Degenerate { op, detail: "ground truth sums to zero".into() });
    }
    let ps = p.sum();
    let n = T::lit(p.len() as f64);
    let pn = if ps > T::zero() {
        p.data().iter().map(|&v| v / ps).collect()
    } else {
        vec![T::one() / n; p.len()]
    };
    Ok((pn, g.data().iter().map(|&v| v / gs).collect()))
}

/// `Σ G'·ln(G'/(P'+ε))` over sum-normalised maps.
pub fn kld<T: Scalar>(p: &diff::Tensor<T>, g: &diff::Tensor<T>) -> Result<T> {
    let (pn, gn) = normalise_pair("kld", p, g)?;
    let eps = T::lit(KLD_EPS);
    Ok(pn
        .iter()
        .zip(&gn)
        .filter(|(_, &gv)| gv > T::zero())
        .map(|(&pv, &gv)| gv * (gv / (pv + eps)).ln())
        .sum())
}

/// Histogram intersection of the sum-normalised maps.
pub fn sim<T: Scalar>(p: &diff::Tensor<T>, g: &diff::Tensor<T>) -> Result<T> {
    let (pn, gn) = normalise_pair("sim", p, g)?;
    Ok(pn.iter().zip(&gn).map(|(&a, &b)| a.min(b)).sum())
}

pub fn nss<T: Scalar>(p: &diff::Tensor<T>, g: &diff::Tensor<T>) -> Result<T> {
    if p.shape() != g.shape() {
        return Err(Error::shape("nss", format!("prediction {:?} vs ground truth {:?}", p.shape(), g.shape())));
    }
    let positive: Vec<usize> = (0..g.len()).filter(|&i| g.data()[i] > T::zero()).collect();
    if positive.is_empty() {
        return Err(Error::Degenerate { op: "nss", detail: "ground truth has no positive pixels".into() });
    }
    let mean = p.mean();
    let var = p.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::lit(p.len() as f64);
    let std = var.sqrt();
    if std < T::lit(NSS_MIN_STD) {
        return Ok(T::zero());
    }
    let total: T = positive.iter().map(|&i| (p.data()[i] - mean) / std).sum();
    Ok(total / T::lit(positive.len() as f64))
}

/// Bilinear resize of an `H×W` map with half-pixel centres and clamped edges.
pub fn resize_bilinear<T: Scalar>(map: &diff::Tensor<T>, out_h: usize, out_w: usize) -> Result<diff::Tensor<T>> {
    let s = map.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", format!("cannot resize {s:?} to {out_h}×{out_w}")));
    }
    let (h, w) = (s[0], s[1]);
    if (h, w) == (out_h, out_w) {
        return Ok(map.clone());
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, T)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, T::lit(x - i0 as f64))
            })
            .collect()
    };
    let (ys, xs) = (axis(h, out_h), axis(w, out_w));
    let d = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = d[y0 * w + x0] * (T::one() - fx) + d[y0 * w + x1] * fx;
            let bot = d[y1 * w + x0] * (T::one() - fx) + d[y1 * w + x1] * fx;
            out.push(top * (T::one() - fy) + bot * fy);
        }
    }
    diff::Tensor::new(vec![out_h, out_w], out)
}

/// Separable Gaussian blur with a `⌈3σ⌉` radius and clamped edges.
pub fn gaussian_blur<T: Scalar>(map: &diff::Tensor<T>, sigma: f64) -> Result<diff::Tensor<T>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::shape("gaussian_blur", format!("expected H×W, got {s:?}")));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Degenerate { op: "gaussian_blur", detail: format!("sigma {sigma}") });
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<T> = k.iter().map(|&v| T::lit(v / ks)).collect();
    let (h, w) = (s[0] as isize, s[1] as isize);
    let pass = |src: &[T], horizontal: bool| -> Vec<T> {
        let mut dst = vec![T::zero(); src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (j, &kv) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (yy, xx) = if horizontal {
                        (y, (x + o).clamp(0, w - 1))
                    } else {
                        ((y + o).clamp(0, h - 1), x)
                    };
                    acc = acc + kv * src[(yy * w + xx) as usize];
                }
                dst[(y * w + x) as usize] = acc;
            }
        }
        dst
    };
    let once = pass(map.data(), true);
    diff::Tensor::new(s.to_vec(), pass(&once, false))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub id: String,
    pub label: String,
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub count: usize,
    /// Samples without ground truth.
    pub skipped: usize,
    pub mean_kld: f64,
    pub mean_sim: f64,
    pub mean_nss: f64,
    pub samples: Vec<SampleMetrics>,
    pub config: String,
    pub checkpoint_sha256: String,
}

impl MetricsReport {
    pub fn from_samples(samples: Vec<SampleMetrics>, skipped: usize, config: String, checkpoint_sha256: String) -> Self {
        let n = samples.len();
        let mean = |f: fn(&SampleMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                samples.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricsReport {
            count: n,
            skipped,
            mean_kld: mean(|s| s.kld),
            mean_sim: mean(|s| s.sim),
            mean_nss: mean(|s| s.nss),
            samples,
            config,
            checkpoint_sha256,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Metrics of one prediction against its ground truth.
pub fn score(pred: &crate::Tensor, gt: &crate::Tensor) -> Result<(f64, f64, f64)> {
    let gs = gt.shape();
    if gs.len() != 2 {
        return Err(Error::shape("score", format!("ground truth must be H×W, got {gs:?}")));
    }
    let p = resize_bilinear(pred, gs[0], gs[1])?;
    Ok((kld(&p, gt)?, sim(&p, gt)?, nss(&p, gt)?))
}

fn score_sample(model: &BitAlignModel, s: &Sample) -> Result<Option<SampleMetrics>> {
    let Some(gt) = &s.gt else { return Ok(None) };
    let map = model.infer(&s.rgb, &s.depth, &s.word)?;
    let (kld, sim, nss) = score(&map.to_tensor(), gt)?;
    Ok(Some(SampleMetrics {
        id: s.id.clone(),
        label: s.word.clone(),
        kld,
        sim,
        nss,
    }))
}

/// Evaluates every sample with ground truth, using up to `threads` workers.
/// Samples lacking ground truth are counted as skipped.
pub fn evaluate(model: &BitAlignModel, samples: &[Sample], threads: usize) -> Result<MetricsReport> {
    let threads = threads.clamp(1, samples.len().max(1));
    let chunk = samples.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<Option<SampleMetrics>>>> = if threads == 1 {
        vec![samples.iter().map(|s| score_sample(model, s)).collect()]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| score_sample(model, s)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut rows = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for part in results {
        for r in part? {
            match r {
                Some(m) => rows.push(m),
                None => skipped += 1,
            }
        }
    }
    Ok(MetricsReport::from_samples(rows, skipped, model.config.to_text(), model.hash()))
}

/// Mean head-weight vector per label over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats {
    pub labels: Vec<String>,
    /// One row per label, `None` when the label has no samples.
    pub rows: Vec<Option<Vec<f64>>>,
}

impl HeadStats {
    pub fn to_csv(&self) -> String {
        let heads = self.rows.iter().flatten().map(|r| r.len()).next().unwrap_or(0);
        let mut out = String::from("label");
        for i in 0..heads {
            out.push_str(&format!(",head_{i}"));
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.rows) {
            if let Some(row) = row {
                out.push_str(label);
                for v in row {
                    out.push_str(&format!(",{v:.9}"));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Largest per-head spread of weights across labels.
    pub fn max_spread(&self) -> f64 {
        let rows: Vec<&Vec<f64>> = self.rows.iter().flatten().collect();
        let Some(first) = rows.first() else { return 0.0 };
        (0..first.len())
            .map(|h| {
                let col = rows.iter().map(|r| r[h]);
                col.clone().fold(f64::MIN, f64::max) - col.fold(f64::MAX, f64::min)
            })
            .fold(0.0, f64::max)
    }
}

/// Head weights depend only on the label, so each sample contributes the
/// vector of its own label.
pub fn head_stats(model: &BitAlignModel, samples: &[Sample]) -> Result<HeadStats> {
    let k = model.config.classes();
    let per_label = (0..k).map(|y| model.head_weights(y)).collect::<Result<Vec<_>>>()?;
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; k];
    for s in samples {
        let entry = sums[s.label].get_or_insert_with(|| (vec![0.0; per_label[s.label].len()], 0));
        entry.0.iter_mut().zip(&per_label[s.label]).for_each(|(a, b)| *a += b);
        entry.1 += 1;
    }
    Ok(HeadStats {
        labels: model.config.labels.clone(),
        rows: sums
            .into_iter()
            .map(|e| e.map(|(v, n)| v.into_iter().map(|x| x / n as f64).collect()))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn v(data: &[f64]) -> Tensor {
        Tensor::from_f64(vec![data.len()], data).unwrap()
    }

    #[test]
    fn hand_cases() {
        let g = v(&[0.75, 0.25]);
        let p = v(&[0.5, 0.5]);
        let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kld(&p, &g).unwrap() - expect).abs() < 1e-9);
        assert!((kld(&p, &g).unwrap() - 0.13081).abs() < 1e-4);
        assert!((sim(&p, &g).unwrap() - 0.75).abs() < 1e-12);
        let p = Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let g = Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((nss(&p, &g).unwrap() - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let z = v(&[0.0, 0.0]);
        let p = v(&[1.0, 3.0]);
        assert!(kld(&p, &z).is_err());
        assert!(sim(&p, &z).is_err());
        assert!(nss(&p, &z).is_err());
        // zero prediction is uniform
        let g = v(&[1.0, 1.0]);
        assert!(kld(&z, &g).unwrap().abs() < 1e-9);
        assert_eq!(nss(&v(&[2.0, 2.0]), &g).unwrap(), 0.0);
        assert!(kld(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
        assert!(sim(&v(&[-1.0, 2.0]), &g).is_err());
    }

    #[test]
    fn disjoint_support_sim_is_zero() {
        assert_eq!(sim(&v(&[1.0, 0.0]), &v(&[0.0, 2.0])).unwrap(), 0.0);
    }

    #[test]
    fn single_precision_agrees() {
        let g = diff::Tensor::<f32>::from_f64(vec![2], &[0.75, 0.25]).unwrap();
        let p = diff::Tensor::<f32>::from_f64(vec![2], &[0.5, 0.5]).unwrap();
        assert!((kld(&p, &g).unwrap() - 0.130_81).abs() < 1e-4);
    }

    #[test]
    fn resize_identity_and_constant() {
        let m = Tensor::from_fn(vec![3, 5], |i| i as f64);
        assert_eq!(resize_bilinear(&m, 3, 5).unwrap(), m);
        let c = Tensor::full(vec![4, 4], 0.3);
        let r = resize_bilinear(&c, 16, 12).unwrap();
        assert!(r.data().iter().all(|&x| (x - 0.3).abs() < 1e-15));
    }

    #[test]
    fn resize_linear_ramp_preserved_inside() {
        // x-ramp: interior samples of the upsampled map stay on the line
        let m = Tensor::from_fn(vec![2, 4], |i| (i % 4) as f64);
        let r = resize_bilinear(&m, 2, 8).unwrap();
        // output x=3 maps to input 3.5·0.5−0.5 = 1.25
        assert!((r.at(&[0, 3]) - 1.25).abs() < 1e-12);
        assert_eq!(r.at(&[0, 0]), 0.0);
        assert_eq!(r.at(&[0, 7]), 3.0);
    }

    #[test]
    fn blur_preserves_constant_and_mass_center() {
        let c = Tensor::full(vec![6, 6], 2.0);
        let b = gaussian_blur(&c, 1.5).unwrap();
        assert!(b.data().iter().all(|&x| (x - 2.0).abs() < 1e-12));
        let mut d = vec![0.0; 81];
        d[40] = 1.0;
        let b = gaussian_blur(&Tensor::new(vec![9, 9], d).unwrap(), 1.0).unwrap();
        assert!((b.sum() - 1.0).abs() < 1e-12);
        assert_eq!(b.max(), b.at(&[4, 4]));
        assert!(gaussian_blur(&c, 0.0).is_err());
    }

    #[test]
    fn report_means() {
        let rows = vec![
            SampleMetrics { id: "a".into(), label: "cut".into(), kld: 1.0, sim: 0.5, nss: 2.0 },
            SampleMetrics { id: "b".into(), label: "cut".into(), kld: 3.0, sim: 0.25, nss: 0.0 },
        ];
        let r = MetricsReport::from_samples(rows, 1, String::new(), String::new());
        assert_eq!((r.count, r.skipped), (2, 1));
        assert_eq!((r.mean_kld, r.mean_sim, r.mean_nss), (2.0, 0.375, 1.0));
        let back: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back["samples"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn head_stats_csv_header() {
        let h = HeadStats {
            labels: vec!["cut".into(), "hold".into()],
            rows: vec![Some(vec![0.5, 0.5]), Some(vec![0.25, 0.75])],
        };
        let csv = h.to_csv();
        assert!(csv.starts_with("label,head_0,head_1\ncut,"));
        assert!((h.max_spread() - 0.25).abs() < 1e-12);
    }
}
