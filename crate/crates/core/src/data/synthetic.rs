//! Procedural object/part scenes with a class-determined functional part.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pnm::snap;
use super::{write_dataset, Meta, Sample};
use crate::config::DEFAULT_LABELS;
use crate::error::{Error, Result};
use crate::params::sub_seed;
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CueMode {
    /// Part colour and position identify the class; depth is flat.
    Rgb,
    /// Part has body colour and a random position; only depth marks it.
    DepthCritical,
    /// Colour, position and depth all carry the class.
    Both,
}

impl CueMode {
    pub fn name(self) -> &'static str {
        match self {
            CueMode::Rgb => "rgb",
            CueMode::DepthCritical => "depth-critical",
            CueMode::Both => "both",
        }
    }
}

impl std::str::FromStr for CueMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(CueMode::Rgb),
            "depth-critical" => Ok(CueMode::DepthCritical),
            "both" => Ok(CueMode::Both),
            _ => Err(Error::config("mode", format!("expected rgb, depth-critical or both, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Class words; empty means the first `classes` default labels.
    pub labels: Vec<String>,
    pub train: usize,
    pub val: usize,
    pub side: usize,
    pub mode: CueMode,
    /// Body radius range as a fraction of the side.
    pub body_radius: (f64, f64),
    /// Part radius range as a fraction of the side.
    pub part_radius: (f64, f64),
    /// Amplitude of uniform background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 6,
            labels: Vec::new(),
            train: 512,
            val: 128,
            side: 64,
            mode: CueMode::Both,
            body_radius: (0.28, 0.34),
            part_radius: (0.11, 0.14),
            noise: 0.05,
            seed: 0,
        }
    }
}

pub const EXO_VIEWS: usize = 3;
const BODY_DEPTH: f64 = 0.3;
const BACKGROUND_DEPTH: f64 = 0.1;
const SKIN: [f64; 3] = [0.87, 0.67, 0.53];
const CLASS_COLOURS: [[f64; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.1, 0.2, 0.9],
    [0.9, 0.85, 0.1],
    [0.85, 0.1, 0.85],
    [0.1, 0.85, 0.85],
    [0.95, 0.5, 0.05],
    [0.5, 0.1, 0.6],
];

impl SyntheticSpec {
    pub fn labels(&self) -> Vec<String> {
        if self.labels.is_empty() {
            DEFAULT_LABELS.iter().take(self.classes).map(|s| s.to_string()).collect()
        } else {
            self.labels.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::config(k, m));
        if self.classes < 2 {
            return bad("classes", format!("need at least 2, got {}", self.classes));
        }
        if self.classes > CLASS_COLOURS.len() {
            return bad("classes", format!("at most {} supported", CLASS_COLOURS.len()));
        }
        if self.labels.is_empty() && self.classes > DEFAULT_LABELS.len() {
            return bad("labels", format!("{} classes need explicit labels", self.classes));
        }
        if !self.labels.is_empty() {
            if self.labels.len() != self.classes {
                return bad("labels", format!("{} labels for {} classes", self.labels.len(), self.classes));
            }
            let mut sorted = self.labels.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != self.labels.len() || self.labels.iter().any(|l| l.trim().is_empty()) {
                return bad("labels", "labels must be distinct and non-empty".into());
            }
        }
        if self.side < 16 {
            return bad("side", format!("at least 16 pixels, got {}", self.side));
        }
        if self.train == 0 || self.val == 0 {
            return bad("train", "both splits need samples".into());
        }
        let (b0, b1) = self.body_radius;
        let (p0, p1) = self.part_radius;
        if !(0.0 < b0 && b0 <= b1 && b1 <= 0.4) {
            return bad("body_radius", format!("need 0 < lo ≤ hi ≤ 0.4, got ({b0}, {b1})"));
        }
        if !(0.0 < p0 && p0 <= p1 && p1 <= 0.6 * b0) {
            return bad("part_radius", format!("need 0 < lo ≤ hi ≤ 0.6·body_lo, got ({p0}, {p1})"));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return bad("noise", format!("need 0 ≤ noise ≤ 0.2, got {}", self.noise));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Depth of the part for class `k`.
    pub fn part_depth(&self, k: usize) -> f64 {
        match self.mode {
            CueMode::Rgb => BODY_DEPTH,
            _ => 0.5 + 0.45 * k as f64 / (self.classes - 1) as f64,
        }
    }
}

/// Scene geometry in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub body_center: (f64, f64),
    pub body_radius: f64,
    pub part_center: (usize, usize),
    pub part_radius: f64,
}

impl Geometry {
    pub fn in_body(&self, y: usize, x: usize) -> bool {
        dist2((y as f64, x as f64), self.body_center) <= self.body_radius * self.body_radius
    }

    pub fn in_part(&self, y: usize, x: usize) -> bool {
        let c = (self.part_center.0 as f64, self.part_center.1 as f64);
        dist2((y as f64, x as f64), c) <= self.part_radius * self.part_radius
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// A generated sample together with its scene geometry.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub sample: Sample,
    pub geometry: Geometry,
}

fn sample_geometry(spec: &SyntheticSpec, k: usize, rng: &mut ChaCha8Rng) -> Geometry {
    let s = spec.side as f64;
    let mid = (s - 1.0) / 2.0;
    let jitter = 0.06 * s;
    let body_center = (mid + rng.random_range(-jitter..=jitter), mid + rng.random_range(-jitter..=jitter));
    let body_radius = s * rng.random_range(spec.body_radius.0..=spec.body_radius.1);
    let part_radius = s * rng.random_range(spec.part_radius.0..=spec.part_radius.1);
    let theta = match spec.mode {
        CueMode::DepthCritical => rng.random_range(0.0..2.0 * PI),
        _ => 2.0 * PI * k as f64 / spec.classes as f64 + rng.random_range(-0.15..=0.15),
    };
    // keep the rounded part centre at least one pixel inside the body edge
    let reach = (body_radius - part_radius - 1.5) * rng.random_range(0.6..=0.85);
    let cy = (body_center.0 + reach * theta.sin()).round().clamp(0.0, s - 1.0);
    let cx = (body_center.1 + reach * theta.cos()).round().clamp(0.0, s - 1.0);
    Geometry {
        body_center,
        body_radius,
        part_center: (cy as usize, cx as usize),
        part_radius,
    }
}

struct Palette {
    body: [f64; 3],
    part: [f64; 3],
    background: [f64; 3],
    part_depth: f64,
}

fn render_view(
    spec: &SyntheticSpec,
    geo: &Geometry,
    pal: &Palette,
    hand: Option<((f64, f64), f64)>,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    let n = spec.side;
    let mut rgb = vec![0.0; 3 * n * n];
    let mut depth = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let on_hand = hand.is_some_and(|(c, r)| dist2((y as f64, x as f64), c) <= r * r);
            let (colour, d) = if on_hand {
                (SKIN, BODY_DEPTH)
            } else if geo.in_part(y, x) && geo.in_body(y, x) {
                (pal.part, pal.part_depth)
            } else if geo.in_body(y, x) {
                (pal.body, BODY_DEPTH)
            } else {
                let mut c = pal.background;
                for v in c.iter_mut() {
                    *v += rng.random_range(-spec.noise..=spec.noise);
                }
                (c, BACKGROUND_DEPTH + rng.random_range(-0.5 * spec.noise..=0.5 * spec.noise))
            };
            for c in 0..3 {
                rgb[c * n * n + i] = colour[c].clamp(0.0, 1.0);
            }
            depth[i] = d.clamp(0.0, 1.0);
        }
    }
    let rgb = Tensor::new(vec![3, n, n], rgb).expect("sized");
    let depth = Tensor::new(vec![1, n, n], depth).expect("sized");
    (snap(&rgb, 255), snap(&depth, 65535))
}

/// Gaussian with σ = part radius / 2 peaking at 1 on the part centre.
pub fn gt_heatmap(side: usize, geo: &Geometry) -> Tensor {
    let sigma = geo.part_radius / 2.0;
    let (cy, cx) = (geo.part_center.0 as f64, geo.part_center.1 as f64);
    let g = Tensor::from_fn(vec![side, side], |i| {
        let (y, x) = ((i / side) as f64, (i % side) as f64);
        (-dist2((y, x), (cy, cx)) / (2.0 * sigma * sigma)).exp()
    });
    snap(&g, 255)
}

/// Threshold on the stored heatmap that recovers the part disc: the Gaussian
/// equals `e^-2` at one part radius, minus one quantisation step.
pub fn part_threshold() -> f64 {
    ((-2f64).exp() * 255.0 - 1.0) / 255.0
}

/// Deterministic sample `index` of `split`.
pub fn render(spec: &SyntheticSpec, split: &str, index: usize) -> Rendered {
    let id = format!("{split}_{index:05}");
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, &id));
    let k = index % spec.classes;
    let geometry = sample_geometry(spec, k, &mut rng);
    let grey = rng.random_range(0.35..=0.6);
    let mut body = [grey; 3];
    for v in body.iter_mut() {
        *v += rng.random_range(-0.06..=0.06);
    }
    let bg = rng.random_range(0.1..=0.25);
    let palette = Palette {
        body,
        part: match spec.mode {
            CueMode::DepthCritical => body,
            _ => CLASS_COLOURS[k],
        },
        background: [bg, bg * 1.1, bg * 0.9],
        part_depth: spec.part_depth(k),
    };
    let (rgb, depth) = render_view(spec, &geometry, &palette, None, &mut rng);
    let exo = (0..EXO_VIEWS)
        .map(|_| {
            let a = rng.random_range(0.0..2.0 * PI);
            let off = geometry.part_radius * rng.random_range(0.3..=0.8);
            let c = (geometry.part_center.0 as f64 + off * a.sin(), geometry.part_center.1 as f64 + off * a.cos());
            let r = geometry.part_radius * rng.random_range(0.7..=1.0);
            render_view(spec, &geometry, &palette, Some((c, r)), &mut rng).0
        })
        .collect();
    let labels = spec.labels();
    Rendered {
        sample: Sample {
            id,
            rgb,
            depth,
            exo,
            label: k,
            word: labels[k].clone(),
            gt: Some(gt_heatmap(spec.side, &geometry)),
        },
        geometry,
    }
}

/// Both splits in memory.
pub fn generate(spec: &SyntheticSpec) -> Result<(Vec<Rendered>, Vec<Rendered>)> {
    spec.validate()?;
    let train = (0..spec.train).map(|i| render(spec, "train", i)).collect();
    let val = (0..spec.val).map(|i| render(spec, "val", i)).collect();
    Ok((train, val))
}

/// Generates the dataset and writes it under `out`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Meta> {
    let (train, val) = generate(spec)?;
    let meta = Meta {
        format: 1,
        classes: spec.labels(),
        side: spec.side,
        mode: Some(spec.mode.name().to_string()),
        spec: Some(serde_json::to_value(spec)?),
        train: train.iter().map(|r| r.sample.id.clone()).collect(),
        val: val.iter().map(|r| r.sample.id.clone()).collect(),
    };
    let strip = |v: Vec<Rendered>| v.into_iter().map(|r| r.sample).collect::<Vec<_>>();
    write_dataset(out, &meta, &strip(train), &strip(val))?;
    Ok(meta)
}

/// Largest per-class, per-channel gap between mean part RGB and mean
/// non-part body RGB over ego views, each sample weighted equally.
pub fn part_body_rgb_gap(rendered: &[Rendered], classes: usize) -> f64 {
    let mut acc = vec![([0.0; 3], [0.0; 3], 0usize); classes];
    for r in rendered {
        let s = &r.sample;
        let n = s.rgb.shape()[1];
        let (mut part, mut body) = (([0.0; 3], 0usize), ([0.0; 3], 0usize));
        for y in 0..n {
            for x in 0..n {
                if !r.geometry.in_body(y, x) {
                    continue;
                }
                let dst = if r.geometry.in_part(y, x) { &mut part } else { &mut body };
                for c in 0..3 {
                    dst.0[c] += s.rgb.data()[c * n * n + y * n + x];
                }
                dst.1 += 1;
            }
        }
        if part.1 == 0 || body.1 == 0 {
            continue;
        }
        let e = &mut acc[s.label];
        for c in 0..3 {
            e.0[c] += part.0[c] / part.1 as f64;
            e.1[c] += body.0[c] / body.1 as f64;
        }
        e.2 += 1;
    }
    acc.iter()
        .filter(|e| e.2 > 0)
        .flat_map(|e| (0..3).map(move |c| (e.0[c] - e.1[c]).abs() / e.2 as f64))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: CueMode) -> SyntheticSpec {
        SyntheticSpec {
            train: 12,
            val: 6,
            side: 32,
            mode,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn render_is_deterministic() {
        let spec = small(CueMode::Both);
        let a = render(&spec, "train", 3).sample;
        let b = render(&spec, "train", 3).sample;
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.exo, b.exo);
        let c = render(&SyntheticSpec { seed: 1, ..spec }, "train", 3).sample;
        assert_ne!(a.rgb, c.rgb);
    }

    #[test]
    fn gt_peak_is_part_centre() {
        for mode in [CueMode::Rgb, CueMode::DepthCritical, CueMode::Both] {
            let spec = small(mode);
            for i in 0..spec.train {
                let r = render(&spec, "train", i);
                let gt = r.sample.gt.as_ref().unwrap();
                assert_eq!(gt.max(), 1.0);
                let (cy, cx) = r.geometry.part_center;
                assert_eq!(gt.at(&[cy, cx]), 1.0);
                assert_eq!(gt.data().iter().filter(|&&v| v == 1.0).count(), 1);
                assert!(r.geometry.in_body(cy, cx));
            }
        }
    }

    #[test]
    fn part_threshold_recovers_disc() {
        let spec = small(CueMode::Both);
        let r = render(&spec, "val", 1);
        let gt = r.sample.gt.unwrap();
        let n = spec.side;
        for y in 0..n {
            for x in 0..n {
                if r.geometry.in_part(y, x) {
                    assert!(gt.at(&[y, x]) >= part_threshold(), "({y},{x})");
                }
            }
        }
    }

    #[test]
    fn depth_critical_hides_part_in_rgb() {
        let spec = small(CueMode::DepthCritical);
        let (train, _) = generate(&spec).unwrap();
        assert!(part_body_rgb_gap(&train, spec.classes) < 1.0 / 255.0);
        let (train, _) = generate(&small(CueMode::Both)).unwrap();
        assert!(part_body_rgb_gap(&train, spec.classes) > 0.1);
    }

    #[test]
    fn value_ranges_and_labels() {
        let spec = small(CueMode::Both);
        for i in 0..6 {
            let s = render(&spec, "train", i).sample;
            assert_eq!(s.label, i % 6);
            assert_eq!(s.word, DEFAULT_LABELS[i % 6]);
            assert!(s.depth.min() >= 0.0 && s.depth.max() <= 1.0);
            assert!(s.rgb.min() >= 0.0 && s.rgb.max() <= 1.0);
            assert_eq!(s.exo.len(), EXO_VIEWS);
            assert_ne!(s.exo[0], s.rgb);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec { classes: 1, ..Default::default() }.validate().is_err());
        assert!(SyntheticSpec { side: 8, ..Default::default() }.validate().is_err());
        assert!(SyntheticSpec::from_json(r#"{"classes": 3, "mode": "depth-critical"}"#).is_ok());
        assert!(SyntheticSpec::from_json(r#"{"clases": 3}"#).is_err());
        assert!(SyntheticSpec::from_json(r#"{"classes": 2, "labels": ["a", "a"]}"#).is_err());
        assert!("both".parse::<CueMode>().is_ok());
        assert!("depth".parse::<CueMode>().is_err());
    }
}
