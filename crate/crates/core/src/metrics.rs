//! Attention quality metrics and the TSV evaluation log.
//!
//! ```text
//! epoch	variant	rc	emd	entropy	overlap	accuracy
//! 0	paan	0.41	1.2	3.1	0.35	0.62
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::maps::GridMap;

/// Largest grid (in cells) accepted by the exact EMD solver.
pub const EXACT_EMD_MAX_CELLS: usize = 256;

/// Spearman correlation together with the constant-input flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankCorrelation {
    pub rho: f64,
    /// Either input had zero rank variance; `rho` is then reported as 0.
    pub constant_input: bool,
}

/// Ranks starting at 1, ties sharing the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation of two rank vectors; `None` when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Spearman ρ on flattened values with average ranks for ties.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<RankCorrelation> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(shape_err(
            "rank_correlation",
            format!("{} against {} values, need equal lengths ≥ 2", a.len(), b.len()),
        ));
    }
    Ok(match pearson(&average_ranks(a), &average_ranks(b)) {
        Some(rho) => RankCorrelation {
            rho,
            constant_input: false,
        },
        None => RankCorrelation {
            rho: 0.0,
            constant_input: true,
        },
    })
}

/// Euclidean distance between the centres of cells `i` and `j` on a `side`-wide grid.
pub fn cell_distance(side: usize, i: usize, j: usize) -> f64 {
    let (ri, ci) = ((i / side) as f64, (i % side) as f64);
    let (rj, cj) = ((j / side) as f64, (j % side) as f64);
    ((ri - rj).powi(2) + (ci - cj).powi(2)).sqrt()
}

fn check_pair(p: &GridMap, q: &GridMap) -> Result<()> {
    if p.side() != q.side() {
        return Err(shape_err(
            "emd",
            format!("{}-sided map against {}-sided", p.side(), q.side()),
        ));
    }
    Ok(())
}

/// An optimal transport plan with its dual certificate.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportSolution {
    pub cost: f64,
    /// `(from cell, to cell, mass)` for every positive flow.
    pub flows: Vec<(usize, usize, f64)>,
    /// Dual value per supply cell and per demand cell (zero-mass cells omitted).
    pub supply_duals: Vec<(usize, f64)>,
    pub demand_duals: Vec<(usize, f64)>,
}

/// Tolerance of the complementary-slackness certificate.
const CERT_TOL: f64 = 1e-9;
/// Residual mass treated as exhausted.
const MASS_EPS: f64 = 1e-15;

/// Exact 1-Wasserstein distance under the Euclidean cell metric.
pub fn emd(p: &GridMap, q: &GridMap) -> Result<f64> {
    Ok(emd_solve(p, q)?.cost)
}

/// Solves the transportation problem by successive shortest paths with
/// Dijkstra on reduced costs, then checks the final potentials as a dual
/// certificate: `u_i + v_j ≤ c_ij` everywhere, equality on used arcs, and
/// equal primal and dual objectives.
pub fn emd_solve(p: &GridMap, q: &GridMap) -> Result<TransportSolution> {
    check_pair(p, q)?;
    let side = p.side();
    if p.cells() > EXACT_EMD_MAX_CELLS {
        return Err(Error::GridTooLarge {
            cells: p.cells(),
            limit: EXACT_EMD_MAX_CELLS,
        });
    }
    let src: Vec<usize> = (0..p.cells()).filter(|&i| p.values()[i] > 0.0).collect();
    let dst: Vec<usize> = (0..q.cells()).filter(|&j| q.values()[j] > 0.0).collect();
    let (ns, nd) = (src.len(), dst.len());
    let cost: Vec<f64> = src
        .iter()
        .flat_map(|&i| dst.iter().map(move |&j| cell_distance(side, i, j)))
        .collect();
    let mut supply: Vec<f64> = src.iter().map(|&i| p.values()[i]).collect();
    let mut demand: Vec<f64> = dst.iter().map(|&j| q.values()[j]).collect();
    let mut flow = vec![0.0; ns * nd];
    // node v < ns is a source, ns + j a sink
    let mut pot = vec![0.0; ns + nd];
    let nv = ns + nd;
    loop {
        let active: Vec<usize> = (0..ns).filter(|&i| supply[i] > MASS_EPS).collect();
        if active.is_empty() || demand.iter().all(|&d| d <= MASS_EPS) {
            break;
        }
        let mut dist = vec![f64::INFINITY; nv];
        let mut prev = vec![usize::MAX; nv];
        let mut done = vec![false; nv];
        for &i in &active {
            dist[i] = 0.0;
        }
        loop {
            let mut u = usize::MAX;
            for v in 0..nv {
                if !done[v] && dist[v].is_finite() && (u == usize::MAX || dist[v] < dist[u]) {
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < ns {
                for j in 0..nd {
                    let rc = (cost[u * nd + j] + pot[u] - pot[ns + j]).max(0.0);
                    if dist[u] + rc < dist[ns + j] {
                        dist[ns + j] = dist[u] + rc;
                        prev[ns + j] = u;
                    }
                }
            } else {
                let j = u - ns;
                for i in 0..ns {
                    if flow[i * nd + j] > 0.0 {
                        let rc = (-cost[i * nd + j] + pot[u] - pot[i]).max(0.0);
                        if dist[u] + rc < dist[i] {
                            dist[i] = dist[u] + rc;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        let target = (0..nd)
            .filter(|&j| demand[j] > MASS_EPS && dist[ns + j].is_finite())
            .min_by(|&a, &b| dist[ns + a].total_cmp(&dist[ns + b]));
        let Some(tj) = target else {
            return Err(Error::Uncertified(f64::INFINITY));
        };
        let reach = dist[ns + tj];
        for v in 0..nv {
            pot[v] += dist[v].min(reach);
        }
        // walk back to find the bottleneck
        let mut amount = demand[tj];
        let mut v = ns + tj;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= ns {
                amount = amount.min(flow[v * nd + (u - ns)]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);
        let origin = v;
        let mut v = ns + tj;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < ns {
                flow[u * nd + (v - ns)] += amount;
            } else {
                let f = &mut flow[v * nd + (u - ns)];
                *f = if *f - amount <= MASS_EPS { 0.0 } else { *f - amount };
            }
            v = u;
        }
        supply[origin] = if supply[origin] - amount <= MASS_EPS { 0.0 } else { supply[origin] - amount };
        demand[tj] = if demand[tj] - amount <= MASS_EPS { 0.0 } else { demand[tj] - amount };
    }

    let primal: f64 = flow.iter().zip(&cost).map(|(f, c)| f * c).sum();
    let u: Vec<f64> = (0..ns).map(|i| -pot[i]).collect();
    let v: Vec<f64> = (0..nd).map(|j| pot[ns + j]).collect();
    let mut worst = 0.0f64;
    for i in 0..ns {
        for j in 0..nd {
            let slack = cost[i * nd + j] - u[i] - v[j];
            worst = worst.max(-slack);
            if flow[i * nd + j] > 0.0 {
                worst = worst.max(slack.abs());
            }
        }
    }
    let dual: f64 = src.iter().zip(&u).map(|(&i, ui)| p.values()[i] * ui).sum::<f64>()
        + dst.iter().zip(&v).map(|(&j, vj)| q.values()[j] * vj).sum::<f64>();
    worst = worst.max((primal - dual).abs() / primal.abs().max(1.0));
    if worst > CERT_TOL {
        return Err(Error::Uncertified(worst));
    }
    let flows = (0..ns)
        .flat_map(|i| (0..nd).map(move |j| (i, j)))
        .filter(|&(i, j)| flow[i * nd + j] > 0.0)
        .map(|(i, j)| (src[i], dst[j], flow[i * nd + j]))
        .collect();
    Ok(TransportSolution {
        cost: primal,
        flows,
        supply_duals: src.into_iter().zip(u).collect(),
        demand_duals: dst.into_iter().zip(v).collect(),
    })
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Marginal L1 residual at which Sinkhorn iterations stop.
pub const SINKHORN_TOL: f64 = 1e-7;

/// Transport cost `⟨C, P_ε⟩` of the entropic-regularized optimal plan.
///
/// Runs log-domain Sinkhorn with ε-scaling (ε halves from the largest cost
/// down to `epsilon`); `iters` bounds the total number of sweeps.
pub fn sinkhorn_emd(p: &GridMap, q: &GridMap, epsilon: f64, iters: usize) -> Result<f64> {
    check_pair(p, q)?;
    if !(epsilon > 0.0) {
        return Err(Error::OutOfRange {
            what: "epsilon",
            value: epsilon.to_string(),
            valid: "(0, ∞)".into(),
        });
    }
    let side = p.side();
    let src: Vec<usize> = (0..p.cells()).filter(|&i| p.values()[i] > 0.0).collect();
    let dst: Vec<usize> = (0..q.cells()).filter(|&j| q.values()[j] > 0.0).collect();
    let (ns, nd) = (src.len(), dst.len());
    let cost: Vec<f64> = src
        .iter()
        .flat_map(|&i| dst.iter().map(move |&j| cell_distance(side, i, j)))
        .collect();
    let log_a: Vec<f64> = src.iter().map(|&i| p.values()[i].ln()).collect();
    let log_b: Vec<f64> = dst.iter().map(|&j| q.values()[j].ln()).collect();
    let mut f = vec![0.0; ns];
    let mut g = vec![0.0; nd];
    let mut eps = cost.iter().cloned().fold(epsilon, f64::max);
    let mut used = 0;
    let mut residual = f64::INFINITY;
    loop {
        let last_stage = eps <= epsilon;
        loop {
            if used >= iters {
                return Err(Error::SinkhornNotConverged { iters, residual });
            }
            used += 1;
            for i in 0..ns {
                let row = &cost[i * nd..(i + 1) * nd];
                f[i] = eps * log_a[i] - eps * log_sum_exp((0..nd).map(|j| (g[j] - row[j]) / eps));
            }
            for j in 0..nd {
                g[j] = eps * log_b[j] - eps * log_sum_exp((0..ns).map(|i| (f[i] - cost[i * nd + j]) / eps));
            }
            // columns are exact after the g update; measure the row marginals
            residual = (0..ns)
                .map(|i| {
                    let row = &cost[i * nd..(i + 1) * nd];
                    let s: f64 = (0..nd).map(|j| ((f[i] + g[j] - row[j]) / eps).exp()).sum();
                    (s - log_a[i].exp()).abs()
                })
                .sum();
            if !residual.is_finite() {
                return Err(Error::NonFinite("Sinkhorn potentials".into()));
            }
            if residual < SINKHORN_TOL || (!last_stage && residual < 1e-3) {
                break;
            }
        }
        if last_stage {
            break;
        }
        eps = (eps * 0.5).max(epsilon);
    }
    let mut total = 0.0;
    for i in 0..ns {
        for j in 0..nd {
            let c = cost[i * nd + j];
            total += ((f[i] + g[j] - c) / eps).exp() * c;
        }
    }
    Ok(total)
}

/// `−Σ p ln p` with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Histogram intersection `Σ min(p_i, q_i)`.
pub fn overlap(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a.min(*b)).sum()
}

/// Averages over an evaluation split.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rank_correlation: f64,
    pub emd: f64,
    pub entropy: f64,
    pub overlap: f64,
    pub accuracy: f64,
}

/// Per-split aggregate plus the number of samples left out of the RC mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Samples whose reference (or prediction) map is constant.
    pub constant_maps: usize,
}

/// Scores attention maps against reference maps.
///
/// RC averages over samples with a non-constant reference and prediction;
/// the other metrics average over every sample.
pub fn evaluate(attention: &[GridMap], reference: &[GridMap], correct: &[bool]) -> Result<Evaluation> {
    if attention.len() != reference.len() || attention.len() != correct.len() || attention.is_empty() {
        return Err(shape_err(
            "evaluate",
            format!(
                "{} maps, {} references, {} outcomes",
                attention.len(),
                reference.len(),
                correct.len()
            ),
        ));
    }
    let n = attention.len() as f64;
    let (mut rc_sum, mut rc_n, mut constant) = (0.0, 0usize, 0usize);
    let mut out = MetricReport::default();
    for (a, r) in attention.iter().zip(reference) {
        let rc = rank_correlation(a.values(), r.values())?;
        if rc.constant_input {
            constant += 1;
        } else {
            rc_sum += rc.rho;
            rc_n += 1;
        }
        out.emd += emd(a, r)? / n;
        out.entropy += entropy(a.values()) / n;
        out.overlap += overlap(a.values(), r.values()) / n;
    }
    out.rank_correlation = if rc_n > 0 { rc_sum / rc_n as f64 } else { 0.0 };
    out.accuracy = correct.iter().filter(|&&c| c).count() as f64 / n;
    Ok(Evaluation {
        report: out,
        constant_maps: constant,
    })
}

pub const TSV_HEADER: &str = "epoch\tvariant\trc\temd\tentropy\toverlap\taccuracy";

/// One evaluation row of the TSV log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub variant: String,
    pub report: MetricReport,
}

pub fn format_tsv(rows: &[LogRow]) -> String {
    let mut s = String::from(TSV_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.report;
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.variant, m.rank_correlation, m.emd, m.entropy, m.overlap, m.accuracy
        )
        .unwrap();
    }
    s
}

pub fn parse_tsv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim_end() == TSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "expected TSV header {TSV_HEADER:?}, found {:?}",
                other.unwrap_or("")
            )))
        }
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.trim_end().split('\t').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("row {}: {} fields, expected 7", i + 1, f.len())));
            }
            let num = |k: usize| {
                f[k].parse::<f64>()
                    .map_err(|e| Error::Format(format!("row {}: field {k} {:?}: {e}", i + 1, f[k])))
            };
            Ok(LogRow {
                epoch: f[0]
                    .parse()
                    .map_err(|e| Error::Format(format!("row {}: epoch {:?}: {e}", i + 1, f[0])))?,
                variant: f[1].to_string(),
                report: MetricReport {
                    rank_correlation: num(2)?,
                    emd: num(3)?,
                    entropy: num(4)?,
                    overlap: num(5)?,
                    accuracy: num(6)?,
                },
            })
        })
        .collect()
}

pub fn write_tsv(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    std::fs::write(path, format_tsv(rows))?;
    Ok(())
}

pub fn read_tsv(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    parse_tsv(&std::fs::read_to_string(path)?)
}
