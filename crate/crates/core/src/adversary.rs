//! Discriminators and adversarial objectives.
//!
//! A discriminator sees two stacked `G×G` channels: the map under test
//! (scaled by `K` so a uniform map reads 1 everywhere) and a conditioning
//! channel, the channel-mean of the region features normalized to unit mean.
//!
//! * [`DiscriminatorKind::Global`] (AAN): two 3×3 convolutions, then a linear
//!   layer and a sigmoid: one probability per map.
//! * [`DiscriminatorKind::Pixel`] (PAAN): two 1×1 convolutions and a sigmoid
//!   per cell: `K` logical discriminators sharing one parameter set.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::maps::GridMap;
use crate::params::{Binding, ParamStore};
use crate::tensor::nn::{conv2d_bias, linear};
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped into `[PROB_FLOOR, 1 − PROB_FLOOR]` inside losses.
pub const PROB_FLOOR: f64 = 1e-7;

/// Hidden channels of either discriminator.
pub const DISC_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DiscriminatorKind {
    Global,
    Pixel,
}

impl fmt::Display for DiscriminatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Global => "global",
            Self::Pixel => "pixel",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub kind: DiscriminatorKind,
    pub grid: usize,
    pub params: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("positive extents")
}

impl Discriminator {
    pub fn new(kind: DiscriminatorKind, grid: usize, seed: u64) -> Result<Self> {
        if grid == 0 {
            return Err(Error::InvalidArgument("grid must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = DISC_CHANNELS;
        let mut p = ParamStore::new();
        match kind {
            DiscriminatorKind::Global => {
                let k = grid * grid;
                p.insert("d.conv1.w", uniform(&mut rng, &[c, 2, 3, 3], (6.0f64 / 18.0).sqrt()));
                p.insert("d.conv1.b", Tensor::zeros([c]));
                p.insert("d.conv2.w", uniform(&mut rng, &[c, c, 3, 3], (6.0 / (9 * c) as f64).sqrt()));
                p.insert("d.conv2.b", Tensor::zeros([c]));
                p.insert("d.out.w", uniform(&mut rng, &[c * k, 1], (6.0 / (c * k + 1) as f64).sqrt()));
                p.insert("d.out.b", Tensor::zeros([1]));
            }
            DiscriminatorKind::Pixel => {
                p.insert("d.conv1.w", uniform(&mut rng, &[c, 2, 1, 1], (6.0f64 / 2.0).sqrt()));
                p.insert("d.conv1.b", Tensor::zeros([c]));
                p.insert("d.out.w", uniform(&mut rng, &[1, c, 1, 1], (6.0 / (c + 1) as f64).sqrt()));
                p.insert("d.out.b", Tensor::zeros([1]));
            }
        }
        Ok(Self { kind, grid, params: p })
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Probabilities for `maps` `[n, K]` under `condition` `[n, K]`:
    /// `[n, 1]` for the global discriminator, `[n, K]` for the pixel one.
    pub fn forward(&self, g: &mut Graph, b: &Binding, maps: Var, condition: Var) -> Result<Var> {
        let k = self.cells();
        let s = g.shape(maps).to_vec();
        if s.len() != 2 || s[1] != k || g.shape(condition) != s.as_slice() {
            return Err(shape_err(
                "discriminator",
                format!("maps {s:?}, condition {:?}, expected [n, {k}]", g.shape(condition)),
            ));
        }
        let n = s[0];
        let scaled = g.scale(maps, k as f64);
        let m4 = g.reshape(scaled, &[n, 1, self.grid, self.grid])?;
        let c4 = g.reshape(condition, &[n, 1, self.grid, self.grid])?;
        let x = g.concat(&[m4, c4], 1)?;
        let logits = match self.kind {
            DiscriminatorKind::Global => {
                let h = conv2d_bias(g, x, b.var("d.conv1.w")?, b.var("d.conv1.b")?, 1)?;
                let h = g.relu(h);
                let h = conv2d_bias(g, h, b.var("d.conv2.w")?, b.var("d.conv2.b")?, 1)?;
                let h = g.relu(h);
                let flat = g.reshape(h, &[n, DISC_CHANNELS * k])?;
                linear(g, flat, b.var("d.out.w")?, b.var("d.out.b")?)?
            }
            DiscriminatorKind::Pixel => {
                let h = conv2d_bias(g, x, b.var("d.conv1.w")?, b.var("d.conv1.b")?, 0)?;
                let h = g.relu(h);
                let out = conv2d_bias(g, h, b.var("d.out.w")?, b.var("d.out.b")?, 0)?;
                g.reshape(out, &[n, k])?
            }
        };
        Ok(g.sigmoid(logits))
    }

    /// Gradient-free scores for a batch of maps.
    pub fn score(&self, maps: &[GridMap], condition: &Tensor) -> Result<Vec<DiscriminatorOutput>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, |_| false);
        let m = g.constant(stack_maps(maps, self.grid)?);
        let c = g.constant(condition.clone());
        let p = self.forward(&mut g, &b, m, c)?;
        let per = g.shape(p)[1];
        Ok(g
            .value(p)
            .data()
            .chunks(per)
            .map(|row| match self.kind {
                DiscriminatorKind::Global => DiscriminatorOutput::Global(row[0]),
                DiscriminatorKind::Pixel => DiscriminatorOutput::Pixel(row.to_vec()),
            })
            .collect())
    }
}

/// Stacks maps of one side into an `[n, K]` tensor.
pub fn stack_maps(maps: &[GridMap], side: usize) -> Result<Tensor> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no maps".into()));
    }
    let mut data = Vec::with_capacity(maps.len() * side * side);
    for m in maps {
        if m.side() != side {
            return Err(shape_err("stack_maps", format!("{}-sided map among {side}-sided", m.side())));
        }
        data.extend_from_slice(m.values());
    }
    Tensor::new(vec![maps.len(), side * side], data)
}

/// Conditioning channel: channel-mean of `[n, d, G, G]` region features,
/// rescaled per sample to unit mean (all-zero features stay zero).
pub fn condition_from_activation(activation: &Tensor) -> Result<Tensor> {
    let s = activation.shape();
    if s.len() != 4 {
        return Err(shape_err("condition", format!("activation {s:?}")));
    }
    let (n, d, k) = (s[0], s[1], s[2] * s[3]);
    let a = activation.data();
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &mut out[i * k..(i + 1) * k];
        for c in 0..d {
            for (o, &v) in row.iter_mut().zip(&a[(i * d + c) * k..(i * d + c + 1) * k]) {
                *o += v / d as f64;
            }
        }
        let mean = row.iter().sum::<f64>() / k as f64;
        if mean.abs() > 1e-12 {
            row.iter_mut().for_each(|v| *v /= mean);
        }
    }
    Tensor::new(vec![n, k], out)
}

/// One discriminator verdict on one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum DiscriminatorOutput {
    Global(f64),
    /// One probability per grid cell.
    Pixel(Vec<f64>),
}

impl DiscriminatorOutput {
    pub fn probabilities(&self) -> &[f64] {
        match self {
            Self::Global(p) => std::slice::from_ref(p),
            Self::Pixel(ps) => ps,
        }
    }
}

/// AAN discriminator on one map.
pub fn discriminate_global(disc: &Discriminator, map: &GridMap, condition: &[f64]) -> Result<f64> {
    if disc.kind != DiscriminatorKind::Global {
        return Err(Error::InvalidArgument("expected a global discriminator".into()));
    }
    let c = Tensor::new(vec![1, condition.len()], condition.to_vec())?;
    match disc.score(std::slice::from_ref(map), &c)?.remove(0) {
        DiscriminatorOutput::Global(p) => Ok(p),
        DiscriminatorOutput::Pixel(_) => unreachable!("global discriminator"),
    }
}

/// PAAN discriminator on one map: a `G×G` grid of probabilities.
pub fn discriminate_pixel(disc: &Discriminator, map: &GridMap, condition: &[f64]) -> Result<Vec<f64>> {
    if disc.kind != DiscriminatorKind::Pixel {
        return Err(Error::InvalidArgument("expected a pixel discriminator".into()));
    }
    let c = Tensor::new(vec![1, condition.len()], condition.to_vec())?;
    Ok(disc.score(std::slice::from_ref(map), &c)?.remove(0).probabilities().to_vec())
}

/// Which generator objective is reported and optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum GeneratorForm {
    /// `−E[log D(fake)]`
    #[default]
    NonSaturating,
    /// `−L^D = E[log D(real)] + E[log(1 − D(fake))]`
    Saturating,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdversarialLossReport {
    pub d_loss: f64,
    pub g_loss: f64,
    pub js_term: f64,
    pub chi2_term: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

fn mean_log(outputs: &[DiscriminatorOutput], f: impl Fn(f64) -> f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for o in outputs {
        for &p in o.probabilities() {
            total += f(clamp_prob(p)).ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no discriminator outputs".into()));
    }
    Ok(total / count as f64)
}

/// BCE minimax losses; expectations run over samples and, for PAAN, cells.
pub fn minimax_losses(
    d_real: &[DiscriminatorOutput],
    d_fake: &[DiscriminatorOutput],
    form: GeneratorForm,
) -> Result<AdversarialLossReport> {
    let real = mean_log(d_real, |p| p)?;
    let fake_neg = mean_log(d_fake, |p| 1.0 - p)?;
    let d_loss = -(real + fake_neg);
    let g_loss = match form {
        GeneratorForm::NonSaturating => -mean_log(d_fake, |p| p)?,
        GeneratorForm::Saturating => -d_loss,
    };
    if !d_loss.is_finite() || !g_loss.is_finite() {
        return Err(Error::NonFinite("minimax losses".into()));
    }
    Ok(AdversarialLossReport {
        d_loss,
        g_loss,
        js_term: 0.0,
        chi2_term: 0.0,
    })
}

fn clamped_log(g: &mut Graph, p: Var) -> Var {
    let c = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    g.log(c)
}

fn clamped_log_complement(g: &mut Graph, p: Var) -> Var {
    let c = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let one_minus = g.neg(c);
    let one_minus = g.add_scalar(one_minus, 1.0);
    g.log(one_minus)
}

/// Discriminator objective `−(E log D(real) + E log(1 − D(fake)))` on the tape.
pub fn d_loss_graph(g: &mut Graph, d_real: Var, d_fake: Var) -> Var {
    let lr = clamped_log(g, d_real);
    let lr = g.mean(lr);
    let lf = clamped_log_complement(g, d_fake);
    let lf = g.mean(lf);
    let s = g.add(lr, lf).expect("scalars conform");
    g.neg(s)
}

/// Generator objective on the tape; `d_real` is only read by the saturating form.
pub fn g_loss_graph(g: &mut Graph, d_real: Var, d_fake: Var, form: GeneratorForm) -> Var {
    match form {
        GeneratorForm::NonSaturating => {
            let l = clamped_log(g, d_fake);
            let m = g.mean(l);
            g.neg(m)
        }
        GeneratorForm::Saturating => {
            let d = d_loss_graph(g, d_real, d_fake);
            g.neg(d)
        }
    }
}

/// `½KL(p‖m) + ½KL(q‖m)` with `m = ½(p+q)`, natural log, `0·log 0 = 0`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl_half = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (kl_half(a, m) + kl_half(b, m))
        })
        .sum()
}

/// `Σ (p_i − q_i)² / max(q_i, 1e-7)`.
pub fn pearson_chi2(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (a - b) / b.max(PROB_FLOOR))
        .sum()
}

/// Floor applied inside logarithms of the on-tape JS divergence.
const LOG_FLOOR: f64 = 1e-30;

/// Batch mean of per-row JS divergences between `[n, K]` maps.
pub fn js_divergence_graph(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let n = g.shape(p)[0] as f64;
    let sum = g.add(p, q)?;
    let m = g.scale(sum, 0.5);
    let m = g.clamp(m, LOG_FLOOR, f64::INFINITY);
    let log_m = g.log(m);
    let mut total = None;
    for x in [p, q] {
        let xc = g.clamp(x, LOG_FLOOR, f64::INFINITY);
        let log_x = g.log(xc);
        let diff = g.sub(log_x, log_m)?;
        let t = g.mul(x, diff)?;
        let t = g.sum(t);
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    Ok(g.scale(total.unwrap(), 0.5 / n))
}

/// Batch mean of per-row `Σ (p − q)² / max(q, 1e-7)` between `[n, K]` maps.
pub fn pearson_chi2_graph(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let n = g.shape(p)[0] as f64;
    let d = g.sub(p, q)?;
    let d2 = g.square(d);
    let qc = g.clamp(q, PROB_FLOOR, f64::INFINITY);
    let r = g.div(d2, qc)?;
    let s = g.sum(r);
    Ok(g.scale(s, 1.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_output_layer(d: &mut Discriminator) {
        for name in ["d.out.w", "d.out.b"] {
            d.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, side: usize) -> GridMap {
        GridMap::normalize(side, (0..side * side).map(|_| rng.gen::<f64>()).collect())
            .unwrap()
            .0
    }

    #[test]
    fn zeroed_output_layers_give_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [DiscriminatorKind::Global, DiscriminatorKind::Pixel] {
            let mut d = Discriminator::new(kind, 3, 1).unwrap();
            zero_output_layer(&mut d);
            let m = random_map(&mut rng, 3);
            let c: Vec<f64> = (0..9).map(|_| rng.gen()).collect();
            let probs = d.score(&[m], &Tensor::new(vec![1, 9], c).unwrap()).unwrap();
            assert!(probs[0].probabilities().iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn outputs_are_open_unit_interval_and_pixel_grid_has_k_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dg = Discriminator::new(DiscriminatorKind::Global, 4, 3).unwrap();
        let dp = Discriminator::new(DiscriminatorKind::Pixel, 4, 3).unwrap();
        for _ in 0..10 {
            let m = random_map(&mut rng, 4);
            let c: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..3.0)).collect();
            let pg = discriminate_global(&dg, &m, &c).unwrap();
            assert!(pg > 0.0 && pg < 1.0);
            let pp = discriminate_pixel(&dp, &m, &c).unwrap();
            assert_eq!(pp.len(), 16);
            assert!(pp.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn pixel_discriminator_is_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Discriminator::new(DiscriminatorKind::Pixel, 4, 5).unwrap();
        let vals: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let cond: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        // shift one column to the right, wrapping
        let shift = |v: &[f64]| -> Vec<f64> {
            (0..16).map(|i| v[(i / 4) * 4 + (i % 4 + 3) % 4]).collect()
        };
        let m = GridMap::normalize(4, vals.clone()).unwrap().0;
        let ms = GridMap::normalize(4, shift(&vals)).unwrap().0;
        let a = discriminate_pixel(&d, &m, &cond).unwrap();
        let b = discriminate_pixel(&d, &ms, &shift(&cond)).unwrap();
        let a_shifted = shift(&a);
        for (x, y) in a_shifted.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn minimax_at_one_half_is_two_ln_two() {
        let half = vec![DiscriminatorOutput::Global(0.5); 3];
        let r = minimax_losses(&half, &half, GeneratorForm::NonSaturating).unwrap();
        assert!((r.d_loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_discriminator_reaches_the_clamp_floor() {
        let real = vec![DiscriminatorOutput::Global(1.0)];
        let fake = vec![DiscriminatorOutput::Global(0.0)];
        let r = minimax_losses(&real, &fake, GeneratorForm::NonSaturating).unwrap();
        let floor = -2.0 * (1.0 - PROB_FLOOR).ln();
        assert!((r.d_loss - floor).abs() < 1e-15);
        assert!(r.d_loss < 1e-6);
    }

    #[test]
    fn identical_cells_match_the_scalar_loss() {
        let (pr, pf) = (0.8, 0.3);
        let global = minimax_losses(
            &[DiscriminatorOutput::Global(pr)],
            &[DiscriminatorOutput::Global(pf)],
            GeneratorForm::NonSaturating,
        )
        .unwrap();
        let pixel = minimax_losses(
            &[DiscriminatorOutput::Pixel(vec![pr; 49])],
            &[DiscriminatorOutput::Pixel(vec![pf; 49])],
            GeneratorForm::NonSaturating,
        )
        .unwrap();
        assert!((global.d_loss - pixel.d_loss).abs() < 1e-14);
        assert!((global.g_loss - pixel.g_loss).abs() < 1e-14);
    }

    #[test]
    fn saturating_form_is_zero_sum() {
        let real = vec![DiscriminatorOutput::Pixel(vec![0.9, 0.2, 0.6])];
        let fake = vec![DiscriminatorOutput::Pixel(vec![0.1, 0.7, 0.4])];
        let r = minimax_losses(&real, &fake, GeneratorForm::Saturating).unwrap();
        assert_eq!(r.g_loss, -r.d_loss);
    }

    #[test]
    fn graph_losses_agree_with_reports() {
        let real = [0.9, 0.2, 0.6, 0.55];
        let fake = [0.1, 0.7, 0.4, 1.0];
        let mut g = Graph::new();
        let r = g.constant(Tensor::new(vec![2, 2], real.to_vec()).unwrap());
        let f = g.constant(Tensor::new(vec![2, 2], fake.to_vec()).unwrap());
        let dl = d_loss_graph(&mut g, r, f);
        let gl = g_loss_graph(&mut g, r, f, GeneratorForm::NonSaturating);
        let rep = minimax_losses(
            &[DiscriminatorOutput::Pixel(real.to_vec())],
            &[DiscriminatorOutput::Pixel(fake.to_vec())],
            GeneratorForm::NonSaturating,
        )
        .unwrap();
        assert!((g.value(dl).item() - rep.d_loss).abs() < 1e-12);
        assert!((g.value(gl).item() - rep.g_loss).abs() < 1e-12);
    }

    #[test]
    fn js_closed_forms() {
        let p = [0.5, 0.5, 0.0, 0.0];
        let q = [0.0, 0.0, 0.25, 0.75];
        assert!((js_divergence(&p, &q) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(js_divergence(&p, &p), 0.0);
        let r = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(js_divergence(&p, &r), js_divergence(&r, &p));
    }

    #[test]
    fn chi2_closed_forms() {
        assert_eq!(pearson_chi2(&[1.0, 0.0], &[0.5, 0.5]), 1.0);
        assert_eq!(pearson_chi2(&[1.0], &[1.0]), 0.0);
        let p = [0.2, 0.3, 0.5];
        assert_eq!(pearson_chi2(&p, &p), 0.0);
    }

    #[test]
    fn graph_divergences_match_plain_versions() {
        let p = [0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.5, 0.0];
        let q = [0.4, 0.3, 0.2, 0.1, 0.0, 0.5, 0.25, 0.25];
        let mut g = Graph::new();
        let pv = g.constant(Tensor::new(vec![2, 4], p.to_vec()).unwrap());
        let qv = g.constant(Tensor::new(vec![2, 4], q.to_vec()).unwrap());
        let js = js_divergence_graph(&mut g, pv, qv).unwrap();
        let chi = pearson_chi2_graph(&mut g, pv, qv).unwrap();
        let js_ref = 0.5 * (js_divergence(&p[..4], &q[..4]) + js_divergence(&p[4..], &q[4..]));
        let chi_ref = 0.5 * (pearson_chi2(&p[..4], &q[..4]) + pearson_chi2(&p[4..], &q[4..]));
        assert!((g.value(js).item() - js_ref).abs() < 1e-14);
        assert!((g.value(chi).item() - chi_ref).abs() < 1e-6 * chi_ref.max(1.0));
    }

    #[test]
    fn small_discriminator_step_lowers_its_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for kind in [DiscriminatorKind::Global, DiscriminatorKind::Pixel] {
            let d = Discriminator::new(kind, 3, 9).unwrap();
            let real = Tensor::new(vec![4, 9], (0..4).flat_map(|_| random_map(&mut rng, 3).into_values()).collect()).unwrap();
            let fake = Tensor::new(vec![4, 9], (0..4).flat_map(|_| random_map(&mut rng, 3).into_values()).collect()).unwrap();
            let cond = Tensor::new(vec![4, 9], (0..36).map(|_| rng.gen()).collect()).unwrap();
            let loss_of = |params: &ParamStore| -> (f64, Vec<(String, Tensor)>) {
                let mut g = Graph::new();
                let b = params.bind(&mut g, |_| true);
                let c = g.constant(cond.clone());
                let r = g.constant(real.clone());
                let f = g.constant(fake.clone());
                let pr = d.forward(&mut g, &b, r, c).unwrap();
                let pf = d.forward(&mut g, &b, f, c).unwrap();
                let l = d_loss_graph(&mut g, pr, pf);
                let grads = g.backward(l).unwrap();
                (g.value(l).item(), b.collect_grads(&g, &grads, |_| true))
            };
            let (before, grads) = loss_of(&d.params);
            let mut params = d.params.clone();
            crate::params::Sgd::new(1e-3, 0.0).step(&mut params, &grads).unwrap();
            let (after, _) = loss_of(&params);
            assert!(after < before, "{kind}: {after} ≥ {before}");
        }
    }
}
