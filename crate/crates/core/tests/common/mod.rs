//! Oracles shared by the integration tests.
#![allow(dead_code)]

use attn_tutor::maps::GridMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Spearman ρ from counted ranks in doubled integer units, so every
/// intermediate is exact and only the final division and root round.
pub fn brute_force_spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let doubled_ranks = |v: &[f64]| -> Vec<i64> {
        v.iter()
            .map(|x| {
                let below = v.iter().filter(|y| *y < x).count() as i64;
                let equal = v.iter().filter(|y| *y == x).count() as i64;
                // average of positions below+1 ..= below+equal, times two
                2 * below + equal + 1
            })
            .collect()
    };
    let (ra, rb) = (doubled_ranks(a), doubled_ranks(b));
    let n = a.len() as i64;
    // the doubled mean rank is n + 1
    let centred = |r: &[i64]| r.iter().map(|x| x - (n + 1)).collect::<Vec<_>>();
    let (ca, cb) = (centred(&ra), centred(&rb));
    let cov: i64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    let va: i64 = ca.iter().map(|x| x * x).sum();
    let vb: i64 = cb.iter().map(|x| x * x).sum();
    if va == 0 || vb == 0 {
        return None;
    }
    Some(cov as f64 / ((va * vb) as f64).sqrt())
}

pub fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // half the draws come from five levels so ties are common
    if rng.gen_bool(0.5) {
        (0..n).map(|_| rng.gen_range(0..5) as f64).collect()
    } else {
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }
}

pub fn random_map(rng: &mut ChaCha8Rng, side: usize) -> GridMap {
    let values: Vec<f64> = (0..side * side)
        .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() })
        .collect();
    if values.iter().all(|&v| v == 0.0) {
        return GridMap::uniform(side);
    }
    GridMap::normalize(side, values).unwrap().0
}

pub fn delta(side: usize, cell: usize) -> GridMap {
    let mut v = vec![0.0; side * side];
    v[cell] = 1.0;
    GridMap::new(side, v).unwrap()
}
