//! One-stack attention VQA network.
//!
//! Image: three 3×3 convolutions with two 2×2 mean pools give the region grid
//! `A` (`[n, d, G, G]`), whose cells are the region features `g_i`.
//! Question: token embedding and a single LSTM layer give `g_q`.
//! Attention: `α = softmax_k(w_p · tanh(W_i g_i,k + b_i + W_q g_q))`,
//! fused feature `g_f = Σ_k α_k g_i,k + g_q`, then a one-hidden-layer answer
//! classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{VqaSample, ANSWER_CLASSES, VOCAB_SIZE};
use crate::error::{shape_err, Error, Result};
use crate::maps::GridMap;
use crate::params::{Binding, ParamStore};
use crate::tensor::nn::{conv2d_bias, linear, lstm_cell, LstmWeights};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct VqaModelConfig {
    pub image_size: usize,
    /// Side G of the attention grid (K = G·G cells).
    pub region_grid: usize,
    /// Region feature width d; also the LSTM hidden size.
    pub feature_dim: usize,
    pub question_vocab: usize,
    pub answer_classes: usize,
    pub recurrent_hidden: usize,
    pub embed_dim: usize,
    pub attention_dim: usize,
    /// Hidden width of the answer classifier.
    pub classifier_hidden: usize,
    /// Output channels of the first two convolutions.
    pub conv_channels: [usize; 2],
}

impl Default for VqaModelConfig {
    fn default() -> Self {
        Self {
            image_size: 28,
            region_grid: 7,
            feature_dim: 32,
            question_vocab: VOCAB_SIZE,
            answer_classes: ANSWER_CLASSES,
            recurrent_hidden: 32,
            embed_dim: 16,
            attention_dim: 32,
            classifier_hidden: 64,
            conv_channels: [4, 8],
        }
    }
}

impl VqaModelConfig {
    pub fn cells(&self) -> usize {
        self.region_grid * self.region_grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size != 4 * self.region_grid {
            return Err(Error::InvalidArgument(format!(
                "two 2× pools map {} px to {}, not a {}-cell grid",
                self.image_size,
                self.image_size / 4,
                self.region_grid
            )));
        }
        if self.recurrent_hidden != self.feature_dim {
            return Err(Error::InvalidArgument(
                "fusion adds g_q to attended features, so recurrent_hidden must equal feature_dim"
                    .into(),
            ));
        }
        let dims = [
            self.feature_dim,
            self.question_vocab,
            self.answer_classes,
            self.embed_dim,
            self.attention_dim,
            self.classifier_hidden,
            self.conv_channels[0],
            self.conv_channels[1],
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters belonging to θ_f (encoders and attention).
pub fn is_feature_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("q.") || name.starts_with("att.")
}

/// Parameters of the attention block alone.
pub fn is_attention_param(name: &str) -> bool {
    name.starts_with("att.")
}

/// Parameters belonging to θ_y (answer classifier).
pub fn is_classifier_param(name: &str) -> bool {
    name.starts_with("cls.")
}

/// A mini-batch laid out for the network.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[n, 3, H, W]`
    pub images: Tensor,
    pub questions: Vec<Vec<usize>>,
    pub answers: Vec<usize>,
    pub gt_attention: Vec<GridMap>,
}

impl Batch {
    pub fn from_samples(samples: &[&VqaSample], image_size: usize) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let hw = image_size * image_size;
        let mut data = vec![0.0; n * 3 * hw];
        for (i, s) in samples.iter().enumerate() {
            if s.image.len() != hw * 3 {
                return Err(shape_err(
                    "Batch",
                    format!("image has {} values, expected {}", s.image.len(), hw * 3),
                ));
            }
            // HWC → CHW
            for p in 0..hw {
                for c in 0..3 {
                    data[(i * 3 + c) * hw + p] = s.image[p * 3 + c];
                }
            }
        }
        Ok(Self {
            images: Tensor::new(vec![n, 3, image_size, image_size], data)?,
            questions: samples.iter().map(|s| s.question.clone()).collect(),
            answers: samples.iter().map(|s| s.answer).collect(),
            gt_attention: samples.iter().map(|s| s.gt_attention.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

/// Handles into the graph for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Last convolutional activation, `[n, d, G, G]`.
    pub activation: Var,
    /// Region features, `[n, K, d]`.
    pub regions: Var,
    /// `[n, d]`
    pub question: Var,
    /// Attention weights, `[n, K]`.
    pub alpha: Var,
    /// `[n, d]`
    pub fused: Var,
    /// Pre-softmax answer scores, `[n, classes]`.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaModel {
    pub config: VqaModelConfig,
    pub params: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

impl VqaModel {
    pub fn new(config: VqaModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let [c1, c2] = config.conv_channels;
        let d = config.feature_dim;
        let h = config.recurrent_hidden;
        let a = config.attention_dim;
        let e = config.embed_dim;
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let glorot = |i: usize, o: usize| (6.0 / (i + o) as f64).sqrt();

        p.insert("enc.conv1.w", uniform(&mut rng, &[c1, 3, 3, 3], he(27)));
        p.insert("enc.conv1.b", Tensor::zeros([c1]));
        p.insert("enc.conv2.w", uniform(&mut rng, &[c2, c1, 3, 3], he(9 * c1)));
        p.insert("enc.conv2.b", Tensor::zeros([c2]));
        p.insert("enc.conv3.w", uniform(&mut rng, &[d, c2, 3, 3], he(9 * c2)));
        p.insert("enc.conv3.b", Tensor::zeros([d]));

        p.insert("q.embed", uniform(&mut rng, &[config.question_vocab, e], 0.5));
        p.insert("q.lstm.wx", uniform(&mut rng, &[e, 4 * h], glorot(e, h)));
        p.insert("q.lstm.wh", uniform(&mut rng, &[h, 4 * h], glorot(h, h)));
        let mut bias = Tensor::zeros([4 * h]);
        // forget gate starts open
        bias.data_mut()[h..2 * h].fill(1.0);
        p.insert("q.lstm.b", bias);

        p.insert("att.wi", uniform(&mut rng, &[d, a], glorot(d, a)));
        p.insert("att.bi", Tensor::zeros([a]));
        p.insert("att.wq", uniform(&mut rng, &[h, a], glorot(h, a)));
        p.insert("att.wp", uniform(&mut rng, &[a, 1], glorot(a, 1)));

        let c = config.answer_classes;
        let hc = config.classifier_hidden;
        p.insert("cls.w1", uniform(&mut rng, &[d, hc], he(d)));
        p.insert("cls.b1", Tensor::zeros([hc]));
        p.insert("cls.w2", uniform(&mut rng, &[hc, c], glorot(hc, c)));
        p.insert("cls.b2", Tensor::zeros([c]));
        Ok(Self { config, params: p })
    }

    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Binding {
        self.params.bind(g, trainable)
    }

    /// `[n,3,H,W]` → last conv activation `[n,d,G,G]`.
    pub fn encode_image(&self, g: &mut Graph, b: &Binding, images: Var) -> Result<Var> {
        let s = g.shape(images);
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(shape_err(
                "encode_image",
                format!("images {s:?}, expected [n, 3, {size}, {size}]"),
            ));
        }
        let mut x = images;
        for (i, layer) in ["enc.conv1", "enc.conv2", "enc.conv3"].iter().enumerate() {
            let w = b.var(&format!("{layer}.w"))?;
            let bias = b.var(&format!("{layer}.b"))?;
            x = conv2d_bias(g, x, w, bias, 1)?;
            x = g.relu(x);
            if i < 2 {
                x = g.avg_pool2(x)?;
            }
        }
        Ok(x)
    }

    /// `[n,d,G,G]` → `[n,K,d]`.
    pub fn regions(&self, g: &mut Graph, activation: Var) -> Result<Var> {
        let s = g.shape(activation).to_vec();
        let flat = g.reshape(activation, &[s[0], s[1], s[2] * s[3]])?;
        g.transpose(flat)
    }

    /// Final LSTM hidden state for each question, `[n, hidden]`.
    pub fn encode_question(&self, g: &mut Graph, b: &Binding, questions: &[Vec<usize>]) -> Result<Var> {
        if questions.is_empty() {
            return Err(Error::InvalidArgument("no questions".into()));
        }
        for q in questions {
            if q.is_empty() {
                return Err(Error::InvalidArgument("empty question".into()));
            }
            if let Some(&t) = q.iter().find(|&&t| t >= self.config.question_vocab) {
                return Err(Error::OutOfRange {
                    what: "token id",
                    value: t.to_string(),
                    valid: format!("0..{}", self.config.question_vocab),
                });
            }
        }
        let h = self.config.recurrent_hidden;
        let table = b.var("q.embed")?;
        let weights = LstmWeights {
            w_x: b.var("q.lstm.wx")?,
            w_h: b.var("q.lstm.wh")?,
            bias: b.var("q.lstm.b")?,
        };
        // questions of equal length run as one batched recurrence
        let mut lengths: Vec<usize> = questions.iter().map(Vec::len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let mut order = Vec::with_capacity(questions.len());
        let mut parts = Vec::new();
        for len in lengths {
            let members: Vec<usize> = (0..questions.len())
                .filter(|&i| questions[i].len() == len)
                .collect();
            let n = members.len();
            let mut hs = g.constant(Tensor::zeros([n, h]));
            let mut cs = g.constant(Tensor::zeros([n, h]));
            for t in 0..len {
                let ids: Vec<usize> = members.iter().map(|&i| questions[i][t]).collect();
                let x = g.embedding(table, &ids)?;
                (hs, cs) = lstm_cell(g, x, hs, cs, weights)?;
            }
            order.extend(members);
            parts.push(hs);
        }
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            return Ok(stacked);
        }
        let mut inverse = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        // row gather restores the caller's order
        g.embedding(stacked, &inverse)
    }

    /// Returns `(alpha [n,K], fused [n,d])`.
    pub fn attend(&self, g: &mut Graph, b: &Binding, regions: Var, question: Var) -> Result<(Var, Var)> {
        let s = g.shape(regions).to_vec();
        if s.len() != 3 || s[2] != self.config.feature_dim {
            return Err(shape_err("attend", format!("regions {s:?}")));
        }
        let (n, k, d) = (s[0], s[1], s[2]);
        let qs = g.shape(question).to_vec();
        if qs != [n, self.config.recurrent_hidden] {
            return Err(shape_err("attend", format!("question {qs:?} for {n} samples")));
        }
        let a = self.config.attention_dim;
        let flat = g.reshape(regions, &[n * k, d])?;
        let proj_i = linear(g, flat, b.var("att.wi")?, b.var("att.bi")?)?;
        let proj_i = g.reshape(proj_i, &[n, k, a])?;
        let proj_q = g.matmul(question, b.var("att.wq")?)?;
        let proj_q = g.reshape(proj_q, &[n, 1, a])?;
        let hidden = g.add(proj_i, proj_q)?;
        let hidden = g.tanh(hidden);
        let hidden = g.reshape(hidden, &[n * k, a])?;
        let scores = g.matmul(hidden, b.var("att.wp")?)?;
        let scores = g.reshape(scores, &[n, k])?;
        let alpha = g.softmax(scores)?;
        let weights = g.reshape(alpha, &[n, 1, k])?;
        let attended = g.matmul(weights, regions)?;
        let attended = g.reshape(attended, &[n, d])?;
        let fused = g.add(attended, question)?;
        Ok((alpha, fused))
    }

    /// Answer logits `[n, classes]`.
    pub fn classify(&self, g: &mut Graph, b: &Binding, fused: Var) -> Result<Var> {
        let h = linear(g, fused, b.var("cls.w1")?, b.var("cls.b1")?)?;
        let h = g.relu(h);
        linear(g, h, b.var("cls.w2")?, b.var("cls.b2")?)
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, batch: &Batch) -> Result<ForwardOutput> {
        let images = g.constant(batch.images.clone());
        let activation = self.encode_image(g, b, images)?;
        let regions = self.regions(g, activation)?;
        let question = self.encode_question(g, b, &batch.questions)?;
        let (alpha, fused) = self.attend(g, b, regions, question)?;
        let logits = self.classify(g, b, fused)?;
        Ok(ForwardOutput {
            activation,
            regions,
            question,
            alpha,
            fused,
            logits,
        })
    }

    /// Attention maps and predicted classes without recording gradients.
    pub fn predict(&self, batch: &Batch) -> Result<(Vec<GridMap>, Vec<usize>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let out = self.forward(&mut g, &b, batch)?;
        let maps = alpha_maps(&g, out.alpha, self.config.region_grid)?;
        let preds = argmax_rows(g.value(out.logits));
        Ok((maps, preds))
    }
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err(
            "cross_entropy",
            format!("logits {s:?} for {} labels", labels.len()),
        ));
    }
    let classes = s[1];
    let mut onehot = vec![0.0; s[0] * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::OutOfRange {
                what: "class",
                value: y.to_string(),
                valid: format!("0..{classes}"),
            });
        }
        onehot[i * classes + y] = 1.0;
    }
    let logp = g.log_softmax(logits)?;
    let mask = g.constant(Tensor::new(s.clone(), onehot)?);
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / labels.len() as f64))
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = *t.shape().last().unwrap();
    t.data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Splits an `[n, K]` attention tensor into per-sample maps.
pub fn alpha_maps(g: &Graph, alpha: Var, side: usize) -> Result<Vec<GridMap>> {
    let t = g.value(alpha);
    let k = side * side;
    t.data()
        .chunks(k)
        .map(|row| Ok(GridMap::normalize(side, row.to_vec())?.0))
        .collect()
}
