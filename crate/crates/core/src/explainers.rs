//! Explanation maps that serve as the "real" side of the attention game.
//!
//! * [`grad_cam`]: channel weights `μ_k` are the spatial means of
//!   `∂ logit_c / ∂A_k`; the map is `relu(Σ_k μ_k A_k)`, normalized.
//! * [`rise`]: random coarse masks, bilinearly upsampled, weighted by the
//!   true-class probability of the masked input.
//! * [`random_explanation`]: a control map with a chosen histogram
//!   intersection against the reference attention.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::VqaSample;
use crate::error::{shape_err, Error, Result};
use crate::maps::GridMap;
use crate::model::{Batch, VqaModel};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExplanationSource {
    GradCam,
    Rise,
    Random,
}

impl fmt::Display for ExplanationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GradCam => "gradcam",
            Self::Rise => "rise",
            Self::Random => "random",
        })
    }
}

/// A normalized explanation grid, always detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationMap {
    pub map: GridMap,
    pub source: ExplanationSource,
    /// Set when the raw weights were all zero and the uniform map was used.
    pub fallback: bool,
}

/// Grad-CAM over an arbitrary differentiable head.
///
/// `activation` is `[n, channels, G, G]`; `head` maps it to logits
/// `[n, classes]` and must treat samples independently. One backward pass
/// of `Σ_n logit[n, classes[n]]` yields every sample's gradient at once.
pub fn grad_cam_with<H>(activation: &Tensor, classes: &[usize], head: H) -> Result<Vec<ExplanationMap>>
where
    H: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let s = activation.shape();
    if s.len() != 4 || s[2] != s[3] || s[0] != classes.len() {
        return Err(shape_err(
            "grad_cam",
            format!("activation {s:?} for {} classes, expected [n, c, G, G]", classes.len()),
        ));
    }
    let (n, channels, side) = (s[0], s[1], s[2]);
    let cells = side * side;
    let mut g = Graph::new();
    let a = g.leaf(activation.clone());
    let logits = head(&mut g, a)?;
    let ls = g.shape(logits).to_vec();
    if ls.len() != 2 || ls[0] != n {
        return Err(shape_err("grad_cam", format!("head produced logits {ls:?}")));
    }
    let mut pick = vec![0.0; n * ls[1]];
    for (i, &c) in classes.iter().enumerate() {
        if c >= ls[1] {
            return Err(Error::OutOfRange {
                what: "class",
                value: c.to_string(),
                valid: format!("0..{}", ls[1]),
            });
        }
        pick[i * ls[1] + c] = 1.0;
    }
    let mask = g.constant(Tensor::new(ls, pick)?);
    let picked = g.mul(logits, mask)?;
    let score = g.sum(picked);
    // a head that never touches the activation has a zero gradient
    let da = if g.requires_grad(score) {
        g.backward(score)?.get_or_zeros(a, s)
    } else {
        Tensor::zeros(s)
    };
    let (av, dv) = (activation.data(), da.data());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut raw = vec![0.0; cells];
        for k in 0..channels {
            let off = (i * channels + k) * cells;
            let mu = dv[off..off + cells].iter().sum::<f64>() / cells as f64;
            for (r, &x) in raw.iter_mut().zip(&av[off..off + cells]) {
                *r += mu * x;
            }
        }
        raw.iter_mut().for_each(|r| *r = r.max(0.0));
        let (map, fallback) = GridMap::normalize(side, raw)?;
        out.push(ExplanationMap {
            map,
            source: ExplanationSource::GradCam,
            fallback,
        });
    }
    Ok(out)
}

/// Grad-CAM for the VQA model given its last conv activation `[n, d, G, G]`
/// and question features `[n, hidden]`, both treated as constants of the model.
pub fn grad_cam_from_features(
    model: &VqaModel,
    activation: &Tensor,
    question: &Tensor,
    classes: &[usize],
) -> Result<Vec<ExplanationMap>> {
    grad_cam_with(activation, classes, |g, a| {
        let b = model.bind(g, |_| false);
        let q = g.constant(question.clone());
        let regions = model.regions(g, a)?;
        let (_, fused) = model.attend(g, &b, regions, q)?;
        model.classify(g, &b, fused)
    })
}

/// Grad-CAM maps for every sample of `batch`, explaining its labelled answer.
pub fn grad_cam_batch(model: &VqaModel, batch: &Batch) -> Result<Vec<ExplanationMap>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, |_| false);
    let images = g.constant(batch.images.clone());
    let activation = model.encode_image(&mut g, &b, images)?;
    let question = model.encode_question(&mut g, &b, &batch.questions)?;
    grad_cam_from_features(model, g.value(activation), g.value(question), &batch.answers)
}

pub fn grad_cam(model: &VqaModel, sample: &VqaSample, class: usize) -> Result<ExplanationMap> {
    let mut batch = Batch::from_samples(&[sample], model.config.image_size)?;
    batch.answers = vec![class];
    Ok(grad_cam_batch(model, &batch)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiseConfig {
    pub n_masks: usize,
    pub keep_prob: f64,
    pub seed: u64,
}

impl Default for RiseConfig {
    fn default() -> Self {
        Self {
            n_masks: 256,
            keep_prob: 0.5,
            seed: 0,
        }
    }
}

impl RiseConfig {
    fn validate(&self) -> Result<()> {
        if self.n_masks == 0 {
            return Err(Error::InvalidArgument("RISE needs at least one mask".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return Err(Error::OutOfRange {
                what: "keep_prob",
                value: self.keep_prob.to_string(),
                valid: "(0, 1)".into(),
            });
        }
        Ok(())
    }
}

/// Soft masks of `image_size²` pixels: a `ceil(G/2)`-sided binary lattice,
/// bilinearly interpolated between lattice-cell centres.
pub fn rise_masks(image_size: usize, grid: usize, cfg: &RiseConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let lattice = grid.div_ceil(2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // interpolation taps depend only on the pixel coordinate
    let taps: Vec<(usize, usize, f64)> = (0..image_size)
        .map(|p| {
            let u = ((p as f64 + 0.5) / image_size as f64 * lattice as f64 - 0.5)
                .clamp(0.0, (lattice - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(lattice - 1);
            (lo, hi, u - lo as f64)
        })
        .collect();
    let mut masks = Vec::with_capacity(cfg.n_masks);
    for _ in 0..cfg.n_masks {
        let coarse: Vec<f64> = (0..lattice * lattice)
            .map(|_| if rng.gen_bool(cfg.keep_prob) { 1.0 } else { 0.0 })
            .collect();
        let at = |r: usize, c: usize| coarse[r * lattice + c];
        let mut m = vec![0.0; image_size * image_size];
        for (y, &(y0, y1, ty)) in taps.iter().enumerate() {
            for (x, &(x0, x1, tx)) in taps.iter().enumerate() {
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                m[y * image_size + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
        masks.push(m);
    }
    Ok(masks)
}

/// Score-weighted mask average, mean-pooled onto the `grid × grid` cells.
pub fn rise_from_scores(
    masks: &[Vec<f64>],
    scores: &[f64],
    image_size: usize,
    grid: usize,
) -> Result<ExplanationMap> {
    if masks.len() != scores.len() || masks.is_empty() {
        return Err(shape_err(
            "rise",
            format!("{} masks with {} scores", masks.len(), scores.len()),
        ));
    }
    if image_size % grid != 0 {
        return Err(shape_err("rise", format!("{image_size} px do not tile a {grid}-cell grid")));
    }
    let mut sal = vec![0.0; image_size * image_size];
    for (m, &s) in masks.iter().zip(scores) {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::NonFinite(format!("RISE score {s}")));
        }
        for (o, &v) in sal.iter_mut().zip(m) {
            *o += s * v;
        }
    }
    let cell = image_size / grid;
    let mut pooled = vec![0.0; grid * grid];
    for y in 0..image_size {
        for x in 0..image_size {
            pooled[(y / cell) * grid + x / cell] += sal[y * image_size + x];
        }
    }
    let (map, fallback) = GridMap::normalize(grid, pooled)?;
    Ok(ExplanationMap {
        map,
        source: ExplanationSource::Rise,
        fallback,
    })
}

/// RISE map for one sample, explaining `class`.
pub fn rise(model: &VqaModel, sample: &VqaSample, class: usize, cfg: &RiseConfig) -> Result<ExplanationMap> {
    let masks = rise_masks(model.config.image_size, model.config.region_grid, cfg)?;
    rise_with_masks(model, sample, class, &masks)
}

/// [`rise`] with a precomputed mask set from [`rise_masks`], shared across samples.
pub fn rise_with_masks(
    model: &VqaModel,
    sample: &VqaSample,
    class: usize,
    masks: &[Vec<f64>],
) -> Result<ExplanationMap> {
    if class >= model.config.answer_classes {
        return Err(Error::OutOfRange {
            what: "class",
            value: class.to_string(),
            valid: format!("0..{}", model.config.answer_classes),
        });
    }
    let size = model.config.image_size;
    let grid = model.config.region_grid;
    let base = Batch::from_samples(&[sample], size)?;
    let plane = size * size;
    let mut scores = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(64) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * plane);
        for m in chunk {
            for ch in 0..3 {
                let src = &base.images.data()[ch * plane..(ch + 1) * plane];
                data.extend(src.iter().zip(m).map(|(p, w)| p * w));
            }
        }
        let batch = Batch {
            images: Tensor::new(vec![chunk.len(), 3, size, size], data)?,
            questions: vec![sample.question.clone(); chunk.len()],
            answers: vec![class; chunk.len()],
            gt_attention: Vec::new(),
        };
        scores.extend(class_probabilities(model, &batch, class)?);
    }
    rise_from_scores(masks, &scores, size, grid)
}

fn class_probabilities(model: &VqaModel, batch: &Batch, class: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, |_| false);
    let out = model.forward(&mut g, &b, batch)?;
    let probs = g.softmax(out.logits)?;
    let classes = model.config.answer_classes;
    Ok(g.value(probs).data().chunks(classes).map(|row| row[class]).collect())
}

/// Histogram intersection `Σ min(p_i, q_i)`.
fn intersection(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a.min(*b)).sum()
}

/// Tolerance on the achieved overlap.
pub const OVERLAP_TOL: f64 = 0.02;

/// A map whose histogram intersection with `gt` is `overlap_target`.
///
/// Random weights are spread over the cells `gt` leaves empty (or, when `gt`
/// covers the grid, concentrated on one of its lightest cells); that map is
/// mixed with `gt` and the mixing weight is bisected until the intersection
/// hits the target.
pub fn random_explanation(gt: &GridMap, overlap_target: f64, seed: u64) -> Result<ExplanationMap> {
    if !(0.0..=1.0).contains(&overlap_target) {
        return Err(Error::OutOfRange {
            what: "overlap target",
            value: overlap_target.to_string(),
            valid: "[0, 1]".into(),
        });
    }
    let wrap = |map: GridMap| ExplanationMap {
        map,
        source: ExplanationSource::Random,
        fallback: false,
    };
    if overlap_target == 1.0 {
        return Ok(wrap(gt.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gt.values();
    let empty: Vec<usize> = (0..g.len()).filter(|&i| g[i] == 0.0).collect();
    let mut r = vec![0.0; g.len()];
    if empty.is_empty() {
        let lightest = g.iter().cloned().fold(f64::INFINITY, f64::min);
        let candidates: Vec<usize> = (0..g.len()).filter(|&i| g[i] == lightest).collect();
        r[candidates[rng.gen_range(0..candidates.len())]] = 1.0;
    } else {
        for &i in &empty {
            r[i] = rng.gen_range(0.05..1.0);
        }
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    let mix = |t: f64| -> Vec<f64> { g.iter().zip(&r).map(|(a, b)| t * a + (1.0 - t) * b).collect() };
    let floor = intersection(g, &r);
    if overlap_target < floor - OVERLAP_TOL {
        return Err(Error::UnattainableOverlap {
            target: overlap_target,
            min: floor,
            max: 1.0,
        });
    }
    // intersection with gt is nondecreasing in the mixing weight
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if intersection(g, &mix(mid)) < overlap_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = if (intersection(g, &mix(lo)) - overlap_target).abs()
        <= (intersection(g, &mix(hi)) - overlap_target).abs()
    {
        lo
    } else {
        hi
    };
    let (map, _) = GridMap::normalize(gt.side(), mix(t))?;
    Ok(wrap(map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::model::VqaModelConfig;

    fn point(side: usize, cell: usize) -> GridMap {
        let mut v = vec![0.0; side * side];
        v[cell] = 1.0;
        GridMap::new(side, v).unwrap()
    }

    #[test]
    fn mean_logit_gives_relu_of_activation() {
        // logit = mean over the single channel's cells, so μ = 1/(G·G)
        let a = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let maps = grad_cam_with(&a, &[0], |g, a| {
            let flat = g.reshape(a, &[1, 4])?;
            let m = g.mean_axis(flat, 1)?;
            g.reshape(m, &[1, 1])
        })
        .unwrap();
        let expect = [1.0 / 4.5, 0.0, 3.0 / 4.5, 0.5 / 4.5];
        for (v, e) in maps[0].map.values().iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!(!maps[0].fallback);
    }

    #[test]
    fn image_blind_head_falls_back_to_uniform() {
        let a = Tensor::full([2, 3, 2, 2], 0.7);
        let maps = grad_cam_with(&a, &[1, 0], |g, _| Ok(g.constant(Tensor::zeros([2, 2])))).unwrap();
        for m in &maps {
            assert!(m.fallback);
            assert_eq!(m.map, GridMap::uniform(2));
        }
    }

    #[test]
    fn grad_cam_rejects_bad_class_and_normalizes() {
        let d = generate(&DatasetSpec {
            n_samples: 6,
            ..DatasetSpec::default()
        })
        .unwrap();
        let model = VqaModel::new(VqaModelConfig::default(), 3).unwrap();
        assert!(grad_cam(&model, &d.samples[0], 99).is_err());
        for s in &d.samples {
            let m = grad_cam(&model, s, s.answer).unwrap();
            assert!((m.map.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batched_grad_cam_matches_per_sample() {
        let d = generate(&DatasetSpec {
            n_samples: 5,
            ..DatasetSpec::default()
        })
        .unwrap();
        let model = VqaModel::new(VqaModelConfig::default(), 5).unwrap();
        let refs: Vec<&VqaSample> = d.samples.iter().collect();
        let batch = Batch::from_samples(&refs, 28).unwrap();
        let maps = grad_cam_batch(&model, &batch).unwrap();
        for (s, m) in d.samples.iter().zip(&maps) {
            let single = grad_cam(&model, s, s.answer).unwrap();
            for (a, b) in m.map.values().iter().zip(single.map.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_mask_is_its_own_pooled_form() {
        let cfg = RiseConfig {
            n_masks: 1,
            keep_prob: 0.5,
            seed: 9,
        };
        let masks = rise_masks(8, 4, &cfg).unwrap();
        let m = rise_from_scores(&masks, &[0.3], 8, 4).unwrap();
        let mut pooled = vec![0.0; 16];
        for y in 0..8 {
            for x in 0..8 {
                pooled[(y / 2) * 4 + x / 2] += masks[0][y * 8 + x];
            }
        }
        let (expect, _) = GridMap::normalize(4, pooled).unwrap();
        for (a, b) in m.map.values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_scores_approach_uniform() {
        let cfg = RiseConfig {
            n_masks: 4096,
            keep_prob: 0.5,
            seed: 1,
        };
        let masks = rise_masks(28, 7, &cfg).unwrap();
        let m = rise_from_scores(&masks, &vec![0.4; masks.len()], 28, 7).unwrap();
        let l1: f64 = m.map.values().iter().map(|v| (v - 1.0 / 49.0).abs()).sum();
        assert!(l1 < 0.05, "L1 from uniform {l1}");
    }

    #[test]
    fn zero_scores_flag_the_fallback() {
        let masks = rise_masks(8, 4, &RiseConfig::default()).unwrap();
        let m = rise_from_scores(&masks, &vec![0.0; masks.len()], 8, 4).unwrap();
        assert!(m.fallback);
    }

    #[test]
    fn rise_validates_its_configuration() {
        for (n, p) in [(0, 0.5), (4, 0.0), (4, 1.0)] {
            let cfg = RiseConfig {
                n_masks: n,
                keep_prob: p,
                seed: 0,
            };
            assert!(rise_masks(8, 4, &cfg).is_err());
        }
    }

    #[test]
    fn full_target_returns_the_reference() {
        let gt = point(3, 4);
        assert_eq!(random_explanation(&gt, 1.0, 0).unwrap().map, gt);
    }

    #[test]
    fn overlap_targets_are_met() {
        let d = generate(&DatasetSpec {
            n_samples: 30,
            ..DatasetSpec::default()
        })
        .unwrap();
        for (i, s) in d.samples.iter().enumerate() {
            for target in [0.07, 0.2, 0.5] {
                let r = random_explanation(&s.gt_attention, target, i as u64).unwrap();
                let ov = intersection(r.map.values(), s.gt_attention.values());
                assert!((ov - target).abs() <= OVERLAP_TOL, "sample {i}: {ov} vs {target}");
            }
        }
    }

    #[test]
    fn unattainable_target_names_the_range() {
        // a uniform reference shares at least 1/K with any map
        let gt = GridMap::uniform(2);
        match random_explanation(&gt, 0.0, 0) {
            Err(Error::UnattainableOverlap { min, max, .. }) => {
                assert!((min - 0.25).abs() < 1e-12);
                assert_eq!(max, 1.0);
            }
            other => panic!("expected an unattainable-overlap error, got {other:?}"),
        }
    }
}
