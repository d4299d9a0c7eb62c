//! Non-adversarial distribution matching between attention and explanation maps.
//!
//! Every loss has a plain version on [`GridMap`]s and an on-tape version on
//! `[n, K]` batches whose gradient flows into the attention argument.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::maps::GridMap;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_BANDWIDTHS: [f64; 3] = [0.1, 1.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MatchKind {
    Mse,
    Mmd,
    Coral,
    None,
}

impl fmt::Display for MatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Mmd => "mmd",
            Self::Coral => "coral",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchVariant {
    pub kind: MatchKind,
    /// Gaussian kernel bandwidths, used by MMD only.
    pub kernel_bandwidths: Vec<f64>,
}

impl MatchVariant {
    pub fn new(kind: MatchKind) -> Self {
        Self {
            kind,
            kernel_bandwidths: DEFAULT_BANDWIDTHS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == MatchKind::Mmd
            && (self.kernel_bandwidths.is_empty() || self.kernel_bandwidths.iter().any(|&b| !(b > 0.0)))
        {
            return Err(Error::InvalidArgument(
                "MMD needs at least one positive bandwidth".into(),
            ));
        }
        Ok(())
    }

    /// The matching loss between `alpha` and `mu` (`[n, K]`), or `None` for
    /// [`MatchKind::None`].
    pub fn loss_graph(&self, g: &mut Graph, alpha: Var, mu: Var) -> Result<Option<Var>> {
        self.validate()?;
        Ok(match self.kind {
            MatchKind::Mse => Some(mse_graph(g, alpha, mu)?),
            MatchKind::Mmd => Some(mmd_graph(g, alpha, mu, &self.kernel_bandwidths)?),
            MatchKind::Coral => Some(coral_graph(g, alpha, mu)?),
            MatchKind::None => None,
        })
    }
}

fn same_side(a: &GridMap, b: &GridMap) -> Result<()> {
    if a.side() != b.side() {
        return Err(shape_err(
            "match",
            format!("{}-sided map against {}-sided", a.side(), b.side()),
        ));
    }
    Ok(())
}

fn check_batches(alpha: &[GridMap], mu: &[GridMap]) -> Result<()> {
    if alpha.len() < 2 || mu.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch statistics need at least 2 maps per side, got {} and {}",
            alpha.len(),
            mu.len()
        )));
    }
    for m in alpha.iter().chain(mu) {
        same_side(&alpha[0], m)?;
    }
    Ok(())
}

/// Mean over cells of `(α_i − μ_i)²`.
pub fn mse_loss(alpha: &GridMap, mu: &GridMap) -> Result<f64> {
    same_side(alpha, mu)?;
    Ok(mse_values(alpha.values(), mu.values()))
}

/// [`mse_loss`] on raw weight vectors of equal length.
pub fn mse_values(alpha: &[f64], mu: &[f64]) -> f64 {
    alpha.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / alpha.len() as f64
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_kernel(xs: &[GridMap], ys: &[GridMap], bandwidth: f64) -> f64 {
    let mut total = 0.0;
    for x in xs {
        for y in ys {
            total += (-sq_dist(x.values(), y.values()) / (2.0 * bandwidth * bandwidth)).exp();
        }
    }
    total / (xs.len() * ys.len()) as f64
}

/// Squared MMD with Gaussian kernels `exp(−‖x−y‖²/2σ²)`, summed over σ.
pub fn mmd_loss(alpha: &[GridMap], mu: &[GridMap], bandwidths: &[f64]) -> Result<f64> {
    check_batches(alpha, mu)?;
    MatchVariant {
        kind: MatchKind::Mmd,
        kernel_bandwidths: bandwidths.to_vec(),
    }
    .validate()?;
    Ok(bandwidths
        .iter()
        .map(|&s| mean_kernel(alpha, alpha, s) + mean_kernel(mu, mu, s) - 2.0 * mean_kernel(alpha, mu, s))
        .sum())
}

/// Sample covariance (`n − 1` denominator) of row vectors.
fn covariance(rows: &[&[f64]]) -> Vec<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v / n as f64;
        }
    }
    let mut c = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..d {
                c[i * d + j] += di * (r[j] - mean[j]);
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    c
}

/// `‖C(α) − C(μ)‖²_F / (4d²)` with `d = K`.
pub fn coral_loss(alpha: &[GridMap], mu: &[GridMap]) -> Result<f64> {
    check_batches(alpha, mu)?;
    let d = alpha[0].cells() as f64;
    let ca = covariance(&alpha.iter().map(GridMap::values).collect::<Vec<_>>());
    let cm = covariance(&mu.iter().map(GridMap::values).collect::<Vec<_>>());
    Ok(ca.iter().zip(&cm).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (4.0 * d * d))
}

fn batch_shape(g: &Graph, alpha: Var, mu: Var, op: &'static str, min_rows: usize) -> Result<(usize, usize)> {
    let (sa, sm) = (g.shape(alpha), g.shape(mu));
    if sa.len() != 2 || sm.len() != 2 || sa[1] != sm[1] {
        return Err(shape_err(op, format!("alpha {sa:?}, mu {sm:?}")));
    }
    if sa[0] < min_rows || sm[0] < min_rows {
        return Err(Error::InvalidArgument(format!(
            "{op} needs at least {min_rows} maps per side"
        )));
    }
    Ok((sa[0], sa[1]))
}

/// Batch mean of the per-map MSE.
pub fn mse_graph(g: &mut Graph, alpha: Var, mu: Var) -> Result<Var> {
    if g.shape(alpha) != g.shape(mu) {
        return Err(shape_err(
            "mse",
            format!("alpha {:?}, mu {:?}", g.shape(alpha), g.shape(mu)),
        ));
    }
    let d = g.sub(alpha, mu)?;
    let d2 = g.square(d);
    Ok(g.mean(d2))
}

/// `[n, m]` matrix of squared distances between the rows of `x` and `y`.
fn pairwise_sq_dist(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let (n, m) = (g.shape(x)[0], g.shape(y)[0]);
    let xx = g.square(x);
    let xx = g.sum_axis(xx, 1)?;
    let xx = g.reshape(xx, &[n, 1])?;
    let yy = g.square(y);
    let yy = g.sum_axis(yy, 1)?;
    let yy = g.reshape(yy, &[1, m])?;
    let yt = g.transpose(y)?;
    let xy = g.matmul(x, yt)?;
    let xy = g.scale(xy, -2.0);
    let s = g.add(xx, yy)?;
    g.add(s, xy)
}

fn mean_kernel_graph(g: &mut Graph, dist: Var, bandwidth: f64) -> Var {
    let e = g.scale(dist, -1.0 / (2.0 * bandwidth * bandwidth));
    let k = g.exp(e);
    g.mean(k)
}

pub fn mmd_graph(g: &mut Graph, alpha: Var, mu: Var, bandwidths: &[f64]) -> Result<Var> {
    batch_shape(g, alpha, mu, "mmd", 2)?;
    let daa = pairwise_sq_dist(g, alpha, alpha)?;
    let dmm = pairwise_sq_dist(g, mu, mu)?;
    let dam = pairwise_sq_dist(g, alpha, mu)?;
    let mut total: Option<Var> = None;
    for &s in bandwidths {
        let kaa = mean_kernel_graph(g, daa, s);
        let kmm = mean_kernel_graph(g, dmm, s);
        let kam = mean_kernel_graph(g, dam, s);
        let kam = g.scale(kam, -2.0);
        let t = g.add(kaa, kmm)?;
        let t = g.add(t, kam)?;
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("MMD needs at least one bandwidth".into()))
}

fn covariance_graph(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let mean = g.mean_axis(x, 0)?;
    let centered = g.sub(x, mean)?;
    let ct = g.transpose(centered)?;
    let c = g.matmul(ct, centered)?;
    Ok(g.scale(c, 1.0 / (n - 1) as f64))
}

pub fn coral_graph(g: &mut Graph, alpha: Var, mu: Var) -> Result<Var> {
    let (_, d) = batch_shape(g, alpha, mu, "coral", 2)?;
    let ca = covariance_graph(g, alpha)?;
    let cm = covariance_graph(g, mu)?;
    let diff = g.sub(ca, cm)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (4.0 * (d * d) as f64)))
}

/// Stacks equally sized maps into a `[n, K]` tensor.
pub fn maps_tensor(maps: &[GridMap]) -> Result<Tensor> {
    let side = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no maps".into()))?
        .side();
    crate::adversary::stack_maps(maps, side)
}
