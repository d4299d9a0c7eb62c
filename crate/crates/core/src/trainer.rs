//! Warm start, the attention game, and the ablation drivers built on them.
//!
//! Each adversarial batch takes a cross-entropy step on θ_f ∪ θ_y, extracts
//! explanation maps from the updated model, lets the discriminator descend
//! its loss, then takes a step of `η·L` on the attention block (`att.*`)
//! with its own optimizer, where `L` is the generator objective (or a
//! matching loss) of the chosen variant.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversary::{
    condition_from_activation, d_loss_graph, g_loss_graph, js_divergence_graph, pearson_chi2_graph,
    stack_maps, Discriminator, DiscriminatorKind, GeneratorForm,
};
use crate::data::{Dataset, VqaSample};
use crate::error::{Error, Result};
use crate::explainers::{grad_cam_from_features, random_explanation, rise_masks, rise_with_masks, RiseConfig};
use crate::maps::GridMap;
use crate::matchers::{MatchKind, MatchVariant};
use crate::metrics::{evaluate, LogRow, MetricReport};
use crate::model::{cross_entropy, is_attention_param, is_classifier_param, is_feature_param, Batch, VqaModel, VqaModelConfig};
use crate::params::Sgd;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Mse,
    Mmd,
    Coral,
    Aan,
    Paan,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Self::Baseline,
        Self::Mse,
        Self::Mmd,
        Self::Coral,
        Self::Aan,
        Self::Paan,
    ];

    pub fn discriminator(self) -> Option<DiscriminatorKind> {
        match self {
            Self::Aan => Some(DiscriminatorKind::Global),
            Self::Paan => Some(DiscriminatorKind::Pixel),
            _ => None,
        }
    }

    pub fn matcher(self) -> Option<MatchKind> {
        match self {
            Self::Mse => Some(MatchKind::Mse),
            Self::Mmd => Some(MatchKind::Mmd),
            Self::Coral => Some(MatchKind::Coral),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Mse => "mse",
            Self::Mmd => "mmd",
            Self::Coral => "coral",
            Self::Aan => "aan",
            Self::Paan => "paan",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Where the "real" maps of the game come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Explainer {
    GradCam,
    Rise,
    /// Control maps sharing `overlap` of their mass with the reference attention.
    Random { overlap: f64 },
}

impl fmt::Display for Explainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::GradCam => f.write_str("gradcam"),
            Self::Rise => f.write_str("rise"),
            Self::Random { overlap } => write!(f, "random:{overlap}"),
        }
    }
}

impl FromStr for Explainer {
    type Err = Error;

    /// `gradcam`, `rise`, or `random:<overlap>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcam" => Ok(Self::GradCam),
            "rise" => Ok(Self::Rise),
            _ => {
                let overlap = s
                    .strip_prefix("random:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "unknown explainer {s:?} (gradcam, rise, random:<overlap>)"
                        ))
                    })?;
                Ok(Self::Random { overlap })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the adversarial or matching term.
    pub eta: f64,
    pub variant: Variant,
    pub explainer: Explainer,
    pub warm_epochs: usize,
    pub adv_epochs: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    /// Learning rate of the generator descent on the attention parameters.
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub momentum: f64,
    /// Global gradient-norm clip for the cross-entropy step.
    pub grad_clip: Option<f64>,
    pub d_steps_per_g_step: usize,
    pub lambda_js: f64,
    pub lambda_chi2: f64,
    pub generator_form: GeneratorForm,
    /// Masks per sample when the explainer is RISE.
    pub rise_masks: usize,
    /// Fraction of the dataset used for training; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 10.0,
            variant: Variant::Paan,
            explainer: Explainer::GradCam,
            warm_epochs: 10,
            adv_epochs: 30,
            batch_size: 32,
            lr_main: 0.05,
            lr_gen: 0.0005,
            lr_disc: 0.01,
            momentum: 0.9,
            grad_clip: Some(5.0),
            d_steps_per_g_step: 1,
            lambda_js: 1.0,
            lambda_chi2: 1.0,
            generator_form: GeneratorForm::NonSaturating,
            rise_masks: 256,
            train_fraction: 0.8,
            seed: 1,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "eta",
        "variant",
        "explainer",
        "warm_epochs",
        "adv_epochs",
        "batch_size",
        "lr_main",
        "lr_gen",
        "lr_disc",
        "momentum",
        "grad_clip",
        "d_steps_per_g_step",
        "lambda_js",
        "lambda_chi2",
        "generator_form",
        "rise_masks",
        "train_fraction",
        "seed",
        "fingerprint",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &'static str, value: String, valid: &str| {
            Err(Error::OutOfRange {
                what,
                value,
                valid: valid.into(),
            })
        };
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta", self.eta.to_string(), "[0, ∞)");
        }
        for (what, lr) in [("lr_main", self.lr_main), ("lr_gen", self.lr_gen), ("lr_disc", self.lr_disc)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(what, lr.to_string(), "(0, ∞)");
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", self.momentum.to_string(), "[0, 1)");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", c.to_string(), "(0, ∞) or none");
            }
        }
        if self.d_steps_per_g_step == 0 {
            return bad("d_steps_per_g_step", "0".into(), "≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "0".into(), "≥ 1");
        }
        if self.variant.matcher().is_some_and(|k| k != MatchKind::Mse) && self.batch_size < 2 {
            return bad("batch_size", self.batch_size.to_string(), "≥ 2 for batch statistics");
        }
        for (what, l) in [("lambda_js", self.lambda_js), ("lambda_chi2", self.lambda_chi2)] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(what, l.to_string(), "[0, ∞)");
            }
        }
        if self.rise_masks == 0 {
            return bad("rise_masks", "0".into(), "≥ 1");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction", self.train_fraction.to_string(), "(0, 1)");
        }
        if let Explainer::Random { overlap } = self.explainer {
            if !(0.0..=1.0).contains(&overlap) {
                return bad("overlap", overlap.to_string(), "[0, 1]");
            }
        }
        Ok(())
    }

    /// Sets one field from its `key = value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "eta" => self.eta = parse_num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "explainer" => self.explainer = value.parse()?,
            "warm_epochs" => self.warm_epochs = parse_num(key, value)?,
            "adv_epochs" => self.adv_epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr_main" => self.lr_main = parse_num(key, value)?,
            "lr_gen" => self.lr_gen = parse_num(key, value)?,
            "lr_disc" => self.lr_disc = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "grad_clip" => {
                self.grad_clip = match value {
                    "none" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "d_steps_per_g_step" => self.d_steps_per_g_step = parse_num(key, value)?,
            "lambda_js" => self.lambda_js = parse_num(key, value)?,
            "lambda_chi2" => self.lambda_chi2 = parse_num(key, value)?,
            "generator_form" => {
                self.generator_form = match value {
                    "non-saturating" => GeneratorForm::NonSaturating,
                    "saturating" => GeneratorForm::Saturating,
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "generator_form: {value:?} is neither saturating nor non-saturating"
                        )))
                    }
                }
            }
            "rise_masks" => self.rise_masks = parse_num(key, value)?,
            "train_fraction" => self.train_fraction = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            // derived, accepted so a resolved config file can be fed back in
            "fingerprint" => {}
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// The settings as `(key, value)` pairs, excluding the fingerprint.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("eta", self.eta.to_string()),
            ("variant", self.variant.to_string()),
            ("explainer", self.explainer.to_string()),
            ("warm_epochs", self.warm_epochs.to_string()),
            ("adv_epochs", self.adv_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_main", self.lr_main.to_string()),
            ("lr_gen", self.lr_gen.to_string()),
            ("lr_disc", self.lr_disc.to_string()),
            ("momentum", self.momentum.to_string()),
            (
                "grad_clip",
                self.grad_clip.map_or_else(|| "none".into(), |c| c.to_string()),
            ),
            ("d_steps_per_g_step", self.d_steps_per_g_step.to_string()),
            ("lambda_js", self.lambda_js.to_string()),
            ("lambda_chi2", self.lambda_chi2.to_string()),
            (
                "generator_form",
                match self.generator_form {
                    GeneratorForm::NonSaturating => "non-saturating",
                    GeneratorForm::Saturating => "saturating",
                }
                .into(),
            ),
            ("rise_masks", self.rise_masks.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// CRC-32 of the canonical `key = value` text, as 8 hex digits.
    pub fn fingerprint(&self) -> String {
        let text: String = self
            .entries()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        format!("{:08x}", crc32fast::hash(text.as_bytes()))
    }

    /// Canonical `key = value` lines, fingerprint last.
    pub fn to_kv(&self) -> String {
        let mut out: String = self
            .entries()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        out.push_str(&format!("fingerprint = {}\n", self.fingerprint()));
        out
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Row label: the variant, suffixed by the explainer when it is not Grad-CAM.
    pub fn label(&self) -> String {
        match self.explainer {
            Explainer::GradCam => self.variant.to_string(),
            Explainer::Rise => format!("{}_rise", self.variant),
            Explainer::Random { overlap } => format!("{}_random{overlap}", self.variant),
        }
    }
}

/// Splits `key = value` lines into pairs, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// One epoch of training, scored on the held-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches.
    pub ce_loss: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub js_term: f64,
    pub chi2_term: f64,
    pub match_loss: f64,
    pub metrics: MetricReport,
}

impl EpochRecord {
    fn scored(epoch: usize, metrics: MetricReport) -> Self {
        Self {
            epoch,
            ce_loss: 0.0,
            d_loss: 0.0,
            g_loss: 0.0,
            js_term: 0.0,
            chi2_term: 0.0,
            match_loss: 0.0,
            metrics,
        }
    }
}

/// The outcome of [`train_adversarial`]. Epoch 0 scores the warm-started
/// model; epoch `e ≥ 1` scores the model after `e` adversarial epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub label: String,
    pub fingerprint: String,
    pub epochs: Vec<EpochRecord>,
}

impl RunReport {
    pub fn final_metrics(&self) -> MetricReport {
        self.epochs.last().map(|r| r.metrics).unwrap_or_default()
    }

    pub fn log_rows(&self) -> Vec<LogRow> {
        self.epochs
            .iter()
            .map(|r| LogRow {
                epoch: r.epoch,
                variant: self.label.clone(),
                report: r.metrics,
            })
            .collect()
    }

    pub fn summary(&self) -> String {
        let mut s = format!("run {} (config {})\n", self.label, self.fingerprint);
        s.push_str("epoch  ce       d_loss   g_loss   js       chi2     match    rc       emd      entropy  acc\n");
        for r in &self.epochs {
            let m = &r.metrics;
            s.push_str(&format!(
                "{:<6} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:.4}\n",
                r.epoch,
                r.ce_loss,
                r.d_loss,
                r.g_loss,
                r.js_term,
                r.chi2_term,
                r.match_loss,
                m.rank_correlation,
                m.emd,
                m.entropy,
                m.accuracy
            ));
        }
        s
    }
}

/// The model under training and its optimizer.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: VqaModel,
    pub optimizer: Sgd,
}

impl ModelState {
    pub fn new(model: VqaModel, cfg: &TrainConfig) -> Self {
        Self {
            model,
            optimizer: Sgd::new(cfg.lr_main, cfg.momentum).with_clip(cfg.grad_clip),
        }
    }
}

const EVAL_BATCH: usize = 100;

/// Scores a model's attention against the reference maps of `data`.
pub fn evaluate_model(model: &VqaModel, data: &Dataset) -> Result<MetricReport> {
    let mut maps = Vec::with_capacity(data.len());
    let mut correct = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let refs: Vec<&VqaSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, model.config.image_size)?;
        let (m, preds) = model.predict(&batch)?;
        maps.extend(m);
        correct.extend(preds.iter().zip(&batch.answers).map(|(p, a)| p == a));
    }
    let reference: Vec<GridMap> = data.samples.iter().map(|s| s.gt_attention.clone()).collect();
    Ok(evaluate(&maps, &reference, &correct)?.report)
}

// stream offsets keep the shuffles, discriminator init and control maps independent
const WARM_STREAM: u64 = 1 << 32;
const ADV_STREAM: u64 = 2 << 32;
const DISC_STREAM: u64 = 3 << 32;
const RANDOM_STREAM: u64 = 4 << 32;
const RISE_STREAM: u64 = 5 << 32;

fn shuffled(n: usize, seed: u64, stream: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, stream + epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn batch_of(data: &Dataset, idx: &[usize], image_size: usize) -> Result<Batch> {
    let refs: Vec<&VqaSample> = idx.iter().map(|&i| &data.samples[i]).collect();
    Batch::from_samples(&refs, image_size)
}

fn check_finite(value: f64, term: &str, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            term: term.into(),
            epoch,
            batch,
        })
    }
}

fn check_data(train: &Dataset, val: &Dataset, model: &VqaModel) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and held-out splits must be non-empty".into()));
    }
    if train.grid != model.config.region_grid || train.image_size != model.config.image_size {
        return Err(Error::InvalidArgument(format!(
            "dataset is {}px on a {}-grid, model expects {}px on a {}-grid",
            train.image_size, train.grid, model.config.image_size, model.config.region_grid
        )));
    }
    Ok(())
}

fn apply(opt: &mut Sgd, model: &mut VqaModel, grads: &[(String, Tensor)], term: &str, epoch: usize, batch: usize) -> Result<()> {
    opt.step(&mut model.params, grads)
        .map_err(|e| diverged(e, term, epoch, batch))
}

/// Cross-entropy pretraining of θ_f and θ_y. Returns one record per epoch;
/// on divergence the state is rolled back to the last completed epoch.
pub fn warm_start(state: &mut ModelState, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_data(train, val, &state.model)?;
    let mut records = Vec::with_capacity(cfg.warm_epochs);
    for epoch in 0..cfg.warm_epochs {
        let good = state.clone();
        match warm_epoch(state, train, cfg, epoch) {
            Ok(ce) => {
                let mut r = EpochRecord::scored(epoch, evaluate_model(&state.model, val)?);
                r.ce_loss = ce;
                records.push(r);
            }
            Err(e) => {
                *state = good;
                return Err(e);
            }
        }
    }
    Ok(records)
}

fn warm_epoch(state: &mut ModelState, train: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let order = shuffled(train.len(), cfg.seed, WARM_STREAM, epoch);
    let mut total = 0.0;
    let mut batches = 0;
    for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
        let batch = batch_of(train, idx, state.model.config.image_size)?;
        total += ce_step(state, &batch, epoch, bi)?;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// One cross-entropy descent step on θ_f ∪ θ_y; returns the loss before the step.
fn ce_step(state: &mut ModelState, batch: &Batch, epoch: usize, bi: usize) -> Result<f64> {
    let mut g = Graph::new();
    let b = state.model.bind(&mut g, |n| is_feature_param(n) || is_classifier_param(n));
    let out = state.model.forward(&mut g, &b, batch)?;
    let ce = cross_entropy(&mut g, out.logits, &batch.answers)?;
    let value = g.value(ce).item();
    check_finite(value, "cross-entropy", epoch, bi)?;
    let grads = g.backward(ce)?;
    let grads = b.collect_grads(&g, &grads, |_| true);
    apply(&mut state.optimizer, &mut state.model, &grads, "cross-entropy", epoch, bi)?;
    Ok(value)
}

/// Explanation maps that do not depend on the model being trained, indexed
/// like the training split.
fn fixed_explanations(model: &VqaModel, train: &Dataset, cfg: &TrainConfig) -> Result<Option<Vec<GridMap>>> {
    match cfg.explainer {
        Explainer::GradCam => Ok(None),
        Explainer::Random { overlap } => train
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let seed = crate::derive_seed(cfg.seed, RANDOM_STREAM + i as u64);
                Ok(random_explanation(&s.gt_attention, overlap, seed)?.map)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Explainer::Rise => {
            let rc = RiseConfig {
                n_masks: cfg.rise_masks,
                seed: crate::derive_seed(cfg.seed, RISE_STREAM),
                ..RiseConfig::default()
            };
            let masks = rise_masks(model.config.image_size, model.config.region_grid, &rc)?;
            train
                .samples
                .iter()
                .map(|s| Ok(rise_with_masks(model, s, s.answer, &masks)?.map))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        }
    }
}

#[derive(Default)]
struct Totals {
    ce: f64,
    d: f64,
    g: f64,
    js: f64,
    chi2: f64,
    matched: f64,
    batches: usize,
}

impl Totals {
    fn record(&self, epoch: usize, metrics: MetricReport) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        EpochRecord {
            epoch,
            ce_loss: self.ce / n,
            d_loss: self.d / n,
            g_loss: self.g / n,
            js_term: self.js / n,
            chi2_term: self.chi2 / n,
            match_loss: self.matched / n,
            metrics,
        }
    }
}

/// Runs the adversarial (or matching) phase on a warm-started state.
///
/// On divergence the state is rolled back to the last completed epoch and
/// the error names the offending term and batch.
pub fn train_adversarial(state: &mut ModelState, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    check_data(train, val, &state.model)?;
    let grid = state.model.config.region_grid;
    let mut disc = cfg
        .variant
        .discriminator()
        .map(|kind| Discriminator::new(kind, grid, crate::derive_seed(cfg.seed, DISC_STREAM)))
        .transpose()?;
    let mut disc_opt = Sgd::new(cfg.lr_disc, cfg.momentum);
    let mut generator = Sgd::new(cfg.lr_gen, cfg.momentum);
    let fixed = if cfg.variant == Variant::Baseline || cfg.eta == 0.0 {
        None
    } else {
        fixed_explanations(&state.model, train, cfg)?
    };
    let mut report = RunReport {
        label: cfg.label(),
        fingerprint: cfg.fingerprint(),
        epochs: vec![EpochRecord::scored(0, evaluate_model(&state.model, val)?)],
    };
    for epoch in 1..=cfg.adv_epochs {
        let good = state.clone();
        let ctx = StepContext {
            cfg,
            train,
            fixed: fixed.as_deref(),
            epoch,
        };
        match adversarial_epoch(state, &mut generator, disc.as_mut(), &mut disc_opt, &ctx) {
            Ok(totals) => report
                .epochs
                .push(totals.record(epoch, evaluate_model(&state.model, val)?)),
            Err(e) => {
                *state = good;
                return Err(e);
            }
        }
    }
    Ok(report)
}

struct StepContext<'a> {
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    fixed: Option<&'a [GridMap]>,
    epoch: usize,
}

fn adversarial_epoch(
    state: &mut ModelState,
    generator: &mut Sgd,
    mut disc: Option<&mut Discriminator>,
    disc_opt: &mut Sgd,
    ctx: &StepContext<'_>,
) -> Result<Totals> {
    let cfg = ctx.cfg;
    let order = shuffled(ctx.train.len(), cfg.seed, ADV_STREAM, ctx.epoch);
    let mut totals = Totals::default();
    let active = cfg.variant != Variant::Baseline && cfg.eta > 0.0;
    let batch_stats = cfg.variant.matcher().is_some_and(|k| k != MatchKind::Mse);
    for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
        let batch = batch_of(ctx.train, idx, state.model.config.image_size)?;
        totals.ce += ce_step(state, &batch, ctx.epoch, bi)?;
        totals.batches += 1;
        // a trailing single-sample batch has no batch statistics to match
        if !active || (batch_stats && idx.len() < 2) {
            continue;
        }

        let model = &state.model;
        let mut g = Graph::new();
        let b = model.bind(&mut g, is_attention_param);
        let out = model.forward(&mut g, &b, &batch)?;
        let mu_maps = match ctx.fixed {
            Some(maps) => idx.iter().map(|&i| maps[i].clone()).collect(),
            None => grad_cam_from_features(model, g.value(out.activation), g.value(out.question), &batch.answers)?
                .into_iter()
                .map(|e| e.map)
                .collect::<Vec<_>>(),
        };
        let mu = g.constant(stack_maps(&mu_maps, model.config.region_grid)?);
        let term = match (cfg.variant.matcher(), disc.as_deref_mut()) {
            (Some(kind), _) => {
                let m = MatchVariant::new(kind)
                    .loss_graph(&mut g, out.alpha, mu)?
                    .expect("matching variants produce a loss");
                let v = g.value(m).item();
                check_finite(v, "matching loss", ctx.epoch, bi)?;
                totals.matched += v;
                m
            }
            (None, Some(d)) => {
                let cond = condition_from_activation(g.value(out.activation))?;
                let real = g.value(mu).clone();
                let fake = g.value(out.alpha).clone();
                for _ in 0..cfg.d_steps_per_g_step {
                    let dl = discriminator_step(d, disc_opt, &real, &fake, &cond)
                        .map_err(|e| diverged(e, "discriminator", ctx.epoch, bi))?;
                    check_finite(dl, "discriminator loss", ctx.epoch, bi)?;
                    totals.d += dl / cfg.d_steps_per_g_step as f64;
                }
                generator_term(&mut g, d, out.alpha, mu, cond, cfg, &mut totals, ctx.epoch, bi)?
            }
            (None, None) => unreachable!("adversarial variants own a discriminator"),
        };
        let loss = g.scale(term, cfg.eta);
        let grads = g.backward(loss)?;
        let grads = b.collect_grads(&g, &grads, |_| true);
        apply(generator, &mut state.model, &grads, "generator", ctx.epoch, bi)?;
    }
    Ok(totals)
}

fn diverged(e: Error, term: &str, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged {
            term: format!("{term} gradient"),
            epoch,
            batch,
        },
        e => e,
    }
}

/// One descent step of the discriminator on `(real, fake)`; returns its loss.
pub fn discriminator_step(
    disc: &mut Discriminator,
    opt: &mut Sgd,
    real: &Tensor,
    fake: &Tensor,
    condition: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = disc.params.bind(&mut g, |_| true);
    let c = g.constant(condition.clone());
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let pr = disc.forward(&mut g, &b, r, c)?;
    let pf = disc.forward(&mut g, &b, f, c)?;
    let loss = d_loss_graph(&mut g, pr, pf);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    let grads = b.collect_grads(&g, &grads, |_| true);
    opt.step(&mut disc.params, &grads)?;
    Ok(value)
}

#[allow(clippy::too_many_arguments)]
fn generator_term(
    g: &mut Graph,
    disc: &Discriminator,
    alpha: Var,
    mu: Var,
    condition: Tensor,
    cfg: &TrainConfig,
    totals: &mut Totals,
    epoch: usize,
    batch: usize,
) -> Result<Var> {
    let db = disc.params.bind(g, |_| false);
    let c = g.constant(condition);
    let pf = disc.forward(g, &db, alpha, c)?;
    let pr = disc.forward(g, &db, mu, c)?;
    let mut gl = g_loss_graph(g, pr, pf, cfg.generator_form);
    if disc.kind == DiscriminatorKind::Pixel {
        // one game per cell: sum the per-cell losses
        gl = g.scale(gl, disc.cells() as f64);
    }
    let js = js_divergence_graph(g, alpha, mu)?;
    let sum = g.add(alpha, mu)?;
    let mid = g.scale(sum, 0.5);
    let chi2 = pearson_chi2_graph(g, alpha, mid)?;
    for (term, v, slot) in [
        ("generator loss", gl, &mut totals.g),
        ("JS term", js, &mut totals.js),
        ("chi-square term", chi2, &mut totals.chi2),
    ] {
        let x = g.value(v).item();
        check_finite(x, term, epoch, batch)?;
        *slot += x;
    }
    let js = g.scale(js, cfg.lambda_js);
    let chi2 = g.scale(chi2, cfg.lambda_chi2);
    let t = g.add(gl, js)?;
    g.add(t, chi2)
}

/// A split dataset and a model warm-started on its training part.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub train: Dataset,
    pub val: Dataset,
    pub state: ModelState,
    pub records: Vec<EpochRecord>,
}

/// Splits `data`, builds a model seeded by `cfg.seed` and warm-starts it.
pub fn prepare(data: &Dataset, model_config: VqaModelConfig, cfg: &TrainConfig) -> Result<WarmStart> {
    cfg.validate()?;
    let (train, val) = data.split(cfg.train_fraction);
    let model = VqaModel::new(model_config, cfg.seed)?;
    let mut state = ModelState::new(model, cfg);
    let records = warm_start(&mut state, &train, &val, cfg)?;
    Ok(WarmStart {
        train,
        val,
        state,
        records,
    })
}

/// One row of an η sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub eta: f64,
    pub metrics: MetricReport,
}

/// Trains one run per η from the same warm-started state.
pub fn eta_sweep(warm: &ModelState, train: &Dataset, val: &Dataset, cfg: &TrainConfig, etas: &[f64]) -> Result<Vec<SweepRow>> {
    if etas.is_empty() {
        return Err(Error::InvalidArgument("η sweep needs at least one value".into()));
    }
    etas.iter()
        .map(|&eta| {
            let run_cfg = TrainConfig { eta, ..cfg.clone() };
            let mut state = warm.clone();
            let report = train_adversarial(&mut state, train, val, &run_cfg)?;
            Ok(SweepRow {
                eta,
                metrics: report.final_metrics(),
            })
        })
        .collect()
}

/// The default sweep grid.
pub const SWEEP_ETAS: [f64; 6] = [0.0, 0.1, 0.01, 1.0, 10.0, 100.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::DiscriminatorKind;
    use crate::data::{generate, DatasetSpec};
    use crate::explainers::grad_cam_batch;

    fn tiny_data() -> Dataset {
        generate(&DatasetSpec {
            n_samples: 40,
            seed: 3,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    fn tiny_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            warm_epochs: 1,
            adv_epochs: 1,
            batch_size: 16,
            rise_masks: 8,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn run(cfg: &TrainConfig) -> (ModelState, RunReport) {
        let mut w = prepare(&tiny_data(), VqaModelConfig::default(), cfg).unwrap();
        let report = train_adversarial(&mut w.state, &w.train, &w.val, cfg).unwrap();
        (w.state, report)
    }

    #[test]
    fn kv_text_round_trips_and_fingerprints_track_settings() {
        let cfg = TrainConfig {
            eta: 0.1,
            variant: Variant::Coral,
            explainer: Explainer::Random { overlap: 0.2 },
            grad_clip: None,
            generator_form: GeneratorForm::Saturating,
            seed: 9,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        let other = TrainConfig { eta: 0.2, ..cfg.clone() };
        assert_ne!(other.fingerprint(), cfg.fingerprint());
        assert_eq!(TrainConfig::KEYS.len(), cfg.entries().len() + 1);
    }

    #[test]
    fn config_errors_are_reported() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("etta", "1").is_err());
        assert!(cfg.set("eta", "ten").is_err());
        assert!("gradcam2".parse::<Explainer>().is_err());
        assert!(TrainConfig::from_kv("eta 10").is_err());
        cfg.eta = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::OutOfRange { what: "eta", .. })));
        let cfg = TrainConfig {
            d_steps_per_g_step: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn labels_name_the_explainer() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.label(), "paan");
        cfg.explainer = Explainer::Rise;
        assert_eq!(cfg.label(), "paan_rise");
        cfg.explainer = "random:0.07".parse().unwrap();
        assert_eq!(cfg.label(), "paan_random0.07");
    }

    #[test]
    fn zero_warm_epochs_leave_the_initialization() {
        let cfg = TrainConfig {
            warm_epochs: 0,
            ..tiny_cfg(Variant::Baseline)
        };
        let w = prepare(&tiny_data(), VqaModelConfig::default(), &cfg).unwrap();
        let fresh = VqaModel::new(VqaModelConfig::default(), cfg.seed).unwrap();
        assert!(w.records.is_empty());
        assert_eq!(w.state.model.params.to_bytes(), fresh.params.to_bytes());
    }

    #[test]
    fn zero_eta_matches_the_baseline_bit_for_bit() {
        let (base, base_report) = run(&tiny_cfg(Variant::Baseline));
        for v in [Variant::Aan, Variant::Paan, Variant::Mse, Variant::Coral] {
            let cfg = TrainConfig {
                eta: 0.0,
                ..tiny_cfg(v)
            };
            let (state, report) = run(&cfg);
            assert_eq!(state.model.params.to_bytes(), base.model.params.to_bytes(), "{v}");
            assert_eq!(report.final_metrics(), base_report.final_metrics(), "{v}");
        }
    }

    #[test]
    fn identical_configs_give_identical_runs() {
        let cfg = tiny_cfg(Variant::Paan);
        let (a, ra) = run(&cfg);
        let (b, rb) = run(&cfg);
        assert_eq!(a.model.params.to_bytes(), b.model.params.to_bytes());
        assert_eq!(ra, rb);
        assert_eq!(crate::metrics::format_tsv(&ra.log_rows()), crate::metrics::format_tsv(&rb.log_rows()));
    }

    #[test]
    fn adversarial_step_moves_the_model_off_the_baseline() {
        let (base, _) = run(&tiny_cfg(Variant::Baseline));
        for v in [Variant::Aan, Variant::Paan, Variant::Mmd] {
            let (state, report) = run(&tiny_cfg(v));
            assert_ne!(state.model.params.to_bytes(), base.model.params.to_bytes(), "{v}");
            assert_eq!(report.epochs.len(), 2);
            assert!(report.epochs.iter().enumerate().all(|(i, r)| r.epoch == i));
        }
    }

    #[test]
    fn control_explainers_run() {
        for explainer in [Explainer::Rise, Explainer::Random { overlap: 0.2 }] {
            let cfg = TrainConfig {
                explainer,
                ..tiny_cfg(Variant::Paan)
            };
            let (_, report) = run(&cfg);
            assert!(report.label.starts_with("paan_"));
            assert!(report.epochs[1].g_loss > 0.0);
        }
    }

    #[test]
    fn discriminator_learns_against_a_frozen_generator() {
        let data = tiny_data();
        let cfg = tiny_cfg(Variant::Paan);
        let w = prepare(&data, VqaModelConfig::default(), &cfg).unwrap();
        let refs: Vec<&VqaSample> = w.train.samples.iter().take(16).collect();
        let batch = Batch::from_samples(&refs, 28).unwrap();
        let mut g = Graph::new();
        let b = w.state.model.bind(&mut g, |_| false);
        let out = w.state.model.forward(&mut g, &b, &batch).unwrap();
        let mu: Vec<GridMap> = grad_cam_batch(&w.state.model, &batch)
            .unwrap()
            .into_iter()
            .map(|e| e.map)
            .collect();
        let real = stack_maps(&mu, 7).unwrap();
        let fake = g.value(out.alpha).clone();
        let cond = condition_from_activation(g.value(out.activation)).unwrap();
        for kind in [DiscriminatorKind::Global, DiscriminatorKind::Pixel] {
            let mut d = Discriminator::new(kind, 7, 11).unwrap();
            let mut opt = Sgd::new(cfg.lr_disc, cfg.momentum);
            let first = discriminator_step(&mut d, &mut opt, &real, &fake, &cond).unwrap();
            let mut last = first;
            for _ in 0..49 {
                last = discriminator_step(&mut d, &mut opt, &real, &fake, &cond).unwrap();
            }
            assert!(last < first, "{kind}: {first} -> {last}");
        }
    }

    #[test]
    fn extracted_maps_are_snapshots() {
        let data = tiny_data();
        let cfg = tiny_cfg(Variant::Paan);
        let mut w = prepare(&data, VqaModelConfig::default(), &cfg).unwrap();
        let refs: Vec<&VqaSample> = w.train.samples.iter().take(8).collect();
        let batch = Batch::from_samples(&refs, 28).unwrap();
        let before = grad_cam_batch(&w.state.model, &batch).unwrap();
        let stored: Vec<GridMap> = before.iter().map(|e| e.map.clone()).collect();
        let names: Vec<String> = w
            .state
            .model
            .params
            .names()
            .filter(|n| is_feature_param(n))
            .map(String::from)
            .collect();
        for n in &names {
            let t = w.state.model.params.get_mut(n).unwrap();
            *t = t.map(|v| v * 1.5 + 0.01);
        }
        let after = grad_cam_batch(&w.state.model, &batch).unwrap();
        assert!(before.iter().zip(&stored).all(|(e, m)| e.map == *m));
        assert!(after.iter().zip(&stored).any(|(e, m)| e.map != *m));
    }

    #[test]
    fn divergence_restores_the_last_good_state() {
        let cfg = tiny_cfg(Variant::Paan);
        let mut w = prepare(&tiny_data(), VqaModelConfig::default(), &cfg).unwrap();
        let cfg = TrainConfig {
            lr_main: 1e300,
            grad_clip: None,
            ..cfg
        };
        w.state = ModelState::new(w.state.model, &cfg);
        let start = w.state.model.params.to_bytes();
        let err = train_adversarial(&mut w.state, &w.train, &w.val, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert_eq!(w.state.model.params.to_bytes(), start);
    }

    #[test]
    fn sweep_has_one_row_per_eta_and_zero_is_the_baseline() {
        let cfg = tiny_cfg(Variant::Aan);
        let w = prepare(&tiny_data(), VqaModelConfig::default(), &cfg).unwrap();
        let rows = eta_sweep(&w.state, &w.train, &w.val, &cfg, &[0.0, 1.0]).unwrap();
        assert_eq!(rows.len(), 2);
        let mut base = w.state.clone();
        let b = train_adversarial(&mut base, &w.train, &w.val, &tiny_cfg(Variant::Baseline)).unwrap();
        assert_eq!(rows[0].metrics, b.final_metrics());
        assert!(eta_sweep(&w.state, &w.train, &w.val, &cfg, &[]).is_err());
    }
}
