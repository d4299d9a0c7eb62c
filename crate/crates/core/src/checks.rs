//! Finite-difference gradient checks for every differentiable primitive,
//! composite layer and loss.
//!
//! Each check draws `probes` random input sets and reduces the output to a
//! scalar through a random weighting, so no coordinate of the gradient is
//! structurally zero. Inputs of kinked functions are kept away from the kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{
    d_loss_graph, g_loss_graph, js_divergence_graph, pearson_chi2_graph, GeneratorForm,
};
use crate::error::Result;
use crate::matchers::{coral_graph, mmd_graph, mse_graph, DEFAULT_BANDWIDTHS};
use crate::model::cross_entropy;
use crate::tensor::grad_check_many;
use crate::tensor::nn::{conv2d_bias, linear, lstm_cell, LstmWeights};
use crate::tensor::{Graph, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-6;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub probes: usize,
    pub max_rel_error: f64,
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive extents")
}

/// Values in `±[0.05, 2]`, clear of zero.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.05, 2.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Rows of strictly positive entries summing to one.
fn simplex_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(rng, &[rows, cols], 0.1, 1.0);
    for r in t.data_mut().chunks_mut(cols) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// `Σ w ⊙ y` for a random `w` fixed by `seed`.
fn reduce(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(uniform(&mut rng, &shape, -1.5, 1.5));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_many(f, inputs, STEP)
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor, op: fn(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let seed = rng.gen();
    check(
        |g, v| {
            let y = op(g, v[0])?;
            reduce(g, y, seed)
        },
        &[x],
    )
}

fn binary(rng: &mut ChaCha8Rng, a: Tensor, b: Tensor, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let seed = rng.gen();
    check(
        |g, v| {
            let y = op(g, v[0], v[1])?;
            reduce(g, y, seed)
        },
        &[a, b],
    )
}

fn case_add(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (signed(rng, &[3, 4]), signed(rng, &[4]));
    binary(rng, a, b, |g, a, b| g.add(a, b))
}

fn case_sub(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (signed(rng, &[3, 4]), signed(rng, &[3, 4]));
    binary(rng, a, b, |g, a, b| g.sub(a, b))
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (signed(rng, &[2, 3, 4]), signed(rng, &[3, 1]));
    binary(rng, a, b, |g, a, b| g.mul(a, b))
}

fn case_div(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (signed(rng, &[3, 4]), uniform(rng, &[3, 4], 0.5, 2.0));
    binary(rng, a, b, |g, a, b| g.div(a, b))
}

fn case_scale(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[5]);
    unary(rng, x, |g, x| Ok(g.scale(x, -2.5)))
}

fn case_neg(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[5]);
    unary(rng, x, |g, x| Ok(g.neg(x)))
}

fn case_add_scalar(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[5]);
    unary(rng, x, |g, x| Ok(g.add_scalar(x, 0.75)))
}

fn case_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 5]);
    unary(rng, x, |g, x| Ok(g.relu(x)))
}

fn case_tanh(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 5]);
    unary(rng, x, |g, x| Ok(g.tanh(x)))
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 5]);
    unary(rng, x, |g, x| Ok(g.sigmoid(x)))
}

fn case_exp(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 5]);
    unary(rng, x, |g, x| Ok(g.exp(x)))
}

fn case_log(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = uniform(rng, &[3, 5], 0.2, 3.0);
    unary(rng, x, |g, x| Ok(g.log(x)))
}

fn case_square(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 5]);
    unary(rng, x, |g, x| Ok(g.square(x)))
}

fn case_clamp(rng: &mut ChaCha8Rng) -> Result<f64> {
    // both bounds lie where `signed` never draws
    let x = signed(rng, &[4, 5]);
    unary(rng, x, |g, x| Ok(g.clamp(x, -0.01, 2.5)))
}

fn case_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 6]);
    unary(rng, x, |g, x| g.softmax(x))
}

fn case_log_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 6]);
    unary(rng, x, |g, x| g.log_softmax(x))
}

fn case_sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 4]);
    unary(rng, x, |g, x| {
        let s = g.sum(x);
        Ok(g.square(s))
    })
}

fn case_mean(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 4]);
    unary(rng, x, |g, x| {
        let s = g.mean(x);
        Ok(g.square(s))
    })
}

fn case_sum_axis(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[2, 3, 4]);
    unary(rng, x, |g, x| g.sum_axis(x, 1))
}

fn case_mean_axis(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[2, 3, 4]);
    unary(rng, x, |g, x| g.mean_axis(x, 2))
}

fn case_broadcast(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 1]);
    unary(rng, x, |g, x| g.broadcast_to(x, &[2, 3, 4]))
}

fn case_reshape(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 4]);
    unary(rng, x, |g, x| g.reshape(x, &[2, 6]))
}

fn case_transpose(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 4]);
    unary(rng, x, |g, x| g.transpose(x))
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (signed(rng, &[3, 4]), signed(rng, &[4, 2]));
    binary(rng, a, b, |g, a, b| g.matmul(a, b))
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (x, k) = (signed(rng, &[2, 2, 5, 5]), signed(rng, &[3, 2, 3, 3]));
    binary(rng, x, k, |g, x, k| g.conv2d(x, k, 1))
}

fn case_conv2d_valid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (x, k) = (signed(rng, &[1, 2, 4, 5]), signed(rng, &[2, 2, 3, 3]));
    binary(rng, x, k, |g, x, k| g.conv2d(x, k, 0))
}

fn case_avg_pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[2, 2, 4, 6]);
    unary(rng, x, |g, x| g.avg_pool2(x))
}

fn case_embedding(rng: &mut ChaCha8Rng) -> Result<f64> {
    let table = signed(rng, &[5, 3]);
    unary(rng, table, |g, t| g.embedding(t, &[4, 0, 4, 2]))
}

fn case_concat(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (signed(rng, &[2, 3]), signed(rng, &[2, 2]));
    binary(rng, a, b, |g, a, b| g.concat(&[a, b, a], 1))
}

fn case_narrow(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = signed(rng, &[3, 6]);
    unary(rng, x, |g, x| g.narrow(x, 1, 2, 3))
}

fn case_linear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [signed(rng, &[3, 4]), signed(rng, &[4, 2]), signed(rng, &[2])];
    let seed = rng.gen();
    check(
        |g, v| {
            let y = linear(g, v[0], v[1], v[2])?;
            reduce(g, y, seed)
        },
        &xs,
    )
}

fn case_conv2d_bias(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [signed(rng, &[1, 2, 4, 4]), signed(rng, &[3, 2, 3, 3]), signed(rng, &[3])];
    let seed = rng.gen();
    check(
        |g, v| {
            let y = conv2d_bias(g, v[0], v[1], v[2], 1)?;
            reduce(g, y, seed)
        },
        &xs,
    )
}

fn case_lstm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, i, h) = (2, 3, 2);
    let xs = [
        signed(rng, &[n, i]),
        signed(rng, &[n, h]),
        signed(rng, &[n, h]),
        uniform(rng, &[i, 4 * h], -0.8, 0.8),
        uniform(rng, &[h, 4 * h], -0.8, 0.8),
        uniform(rng, &[4 * h], -0.5, 0.5),
    ];
    let seed = rng.gen();
    check(
        |g, v| {
            let w = LstmWeights {
                w_x: v[3],
                w_h: v[4],
                bias: v[5],
            };
            let (h1, c1) = lstm_cell(g, v[0], v[1], v[2], w)?;
            let both = g.concat(&[h1, c1], 1)?;
            reduce(g, both, seed)
        },
        &xs,
    )
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let logits = signed(rng, &[4, 5]);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    check(|g, v| cross_entropy(g, v[0], &labels), &[logits])
}

fn case_d_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, f) = (signed(rng, &[4, 3]), signed(rng, &[4, 3]));
    check(
        |g, v| {
            let pr = g.sigmoid(v[0]);
            let pf = g.sigmoid(v[1]);
            Ok(d_loss_graph(g, pr, pf))
        },
        &[r, f],
    )
}

fn g_loss_case(rng: &mut ChaCha8Rng, form: GeneratorForm) -> Result<f64> {
    let (r, f) = (signed(rng, &[4, 3]), signed(rng, &[4, 3]));
    check(
        |g, v| {
            let pr = g.sigmoid(v[0]);
            let pf = g.sigmoid(v[1]);
            Ok(g_loss_graph(g, pr, pf, form))
        },
        &[r, f],
    )
}

fn case_g_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    g_loss_case(rng, GeneratorForm::NonSaturating)
}

fn case_g_loss_saturating(rng: &mut ChaCha8Rng) -> Result<f64> {
    g_loss_case(rng, GeneratorForm::Saturating)
}

fn divergence_case(rng: &mut ChaCha8Rng, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let (p, q) = (signed(rng, &[3, 6]), signed(rng, &[3, 6]));
    check(
        |g, v| {
            let p = g.softmax(v[0])?;
            let q = g.softmax(v[1])?;
            op(g, p, q)
        },
        &[p, q],
    )
}

fn case_js(rng: &mut ChaCha8Rng) -> Result<f64> {
    divergence_case(rng, js_divergence_graph)
}

fn case_chi2(rng: &mut ChaCha8Rng) -> Result<f64> {
    divergence_case(rng, pearson_chi2_graph)
}

fn case_chi2_midpoint(rng: &mut ChaCha8Rng) -> Result<f64> {
    divergence_case(rng, |g, p, q| {
        let s = g.add(p, q)?;
        let m = g.scale(s, 0.5);
        pearson_chi2_graph(g, p, m)
    })
}

fn case_mse(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, m) = (signed(rng, &[3, 9]), simplex_rows(rng, 3, 9));
    check(
        |g, v| {
            let a = g.softmax(v[0])?;
            mse_graph(g, a, v[1])
        },
        &[a, m],
    )
}

fn case_mmd(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, m) = (signed(rng, &[4, 9]), simplex_rows(rng, 4, 9));
    check(
        |g, v| {
            let a = g.softmax(v[0])?;
            mmd_graph(g, a, v[1], &DEFAULT_BANDWIDTHS)
        },
        &[a, m],
    )
}

fn case_coral(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, m) = (signed(rng, &[5, 4]), simplex_rows(rng, 5, 4));
    check(
        |g, v| {
            let a = g.softmax(v[0])?;
            coral_graph(g, a, v[1])
        },
        &[a, m],
    )
}

const CASES: [(&str, Case); 43] = [
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("div", case_div),
    ("scale", case_scale),
    ("neg", case_neg),
    ("add_scalar", case_add_scalar),
    ("relu", case_relu),
    ("tanh", case_tanh),
    ("sigmoid", case_sigmoid),
    ("exp", case_exp),
    ("log", case_log),
    ("square", case_square),
    ("clamp", case_clamp),
    ("softmax", case_softmax),
    ("log_softmax", case_log_softmax),
    ("sum", case_sum),
    ("mean", case_mean),
    ("sum_axis", case_sum_axis),
    ("mean_axis", case_mean_axis),
    ("broadcast_to", case_broadcast),
    ("reshape", case_reshape),
    ("transpose", case_transpose),
    ("matmul", case_matmul),
    ("conv2d", case_conv2d),
    ("conv2d (no padding)", case_conv2d_valid),
    ("avg_pool2", case_avg_pool),
    ("embedding", case_embedding),
    ("concat", case_concat),
    ("narrow", case_narrow),
    ("linear", case_linear),
    ("conv2d_bias", case_conv2d_bias),
    ("lstm_cell", case_lstm),
    ("cross-entropy", case_cross_entropy),
    ("discriminator loss", case_d_loss),
    ("generator loss", case_g_loss),
    ("generator loss (saturating)", case_g_loss_saturating),
    ("JS divergence", case_js),
    ("Pearson chi-square", case_chi2),
    ("chi-square to the midpoint", case_chi2_midpoint),
    ("MSE", case_mse),
    ("MMD", case_mmd),
    ("CORAL", case_coral),
];

/// Names of every check, in run order.
pub fn check_names() -> impl Iterator<Item = &'static str> {
    CASES.iter().map(|c| c.0)
}

/// Runs every check with `probes` random input sets each.
pub fn gradient_suite(probes: usize, seed: u64) -> Result<Vec<GradCheck>> {
    CASES
        .iter()
        .enumerate()
        .map(|(i, &(name, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, i as u64));
            let mut worst = 0.0f64;
            for _ in 0..probes {
                worst = worst.max(case(&mut rng)?);
            }
            Ok(GradCheck {
                name,
                probes,
                max_rel_error: worst,
            })
        })
        .collect()
}
