#![allow(dead_code)]

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson chi-square p-value of observed counts against expected
/// probabilities. Cells with expected count below 5 are pooled into their
/// neighbour; the probability mass outside `probs` is one extra cell.
pub fn chi_square_p(observed: &[u64], probs: &[f64], overflow: u64) -> f64 {
    let n: u64 = observed.iter().sum::<u64>() + overflow;
    let n = n as f64;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (o, p) in observed.iter().zip(probs) {
        o_acc += *o as f64;
        e_acc += p * n;
        if e_acc >= 5.0 {
            cells.push((o_acc, e_acc));
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    let tail_p = (1.0 - probs.iter().sum::<f64>()).max(0.0);
    o_acc += overflow as f64;
    e_acc += tail_p * n;
    if let Some(last) = cells.last_mut() {
        last.0 += o_acc;
        last.1 += e_acc;
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let df = (cells.len() - 1) as f64;
    1.0 - ChiSquared::new(df).expect("df >= 1").cdf(stat)
}

/// Histogram of small counts; values at or beyond `cap` fall in the overflow.
pub fn histogram(values: impl IntoIterator<Item = u64>, cap: usize) -> (Vec<u64>, u64) {
    let mut bins = vec![0u64; cap];
    let mut over = 0;
    for v in values {
        match bins.get_mut(v as usize) {
            Some(b) => *b += 1,
            None => over += 1,
        }
    }
    (bins, over)
}

/// One-sample Kolmogorov-Smirnov p-value (asymptotic, with the usual
/// small-sample correction).
pub fn ks_p(mut sample: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    kolmogorov_q((sn + 0.12 + 0.11 / sn) * d)
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Random DAG on up to 12 vertices: edges only go from a later position to
/// an earlier one, then positions are relabeled with scattered ids.
#[derive(Debug, Clone)]
pub struct RandomDag {
    pub ids: Vec<u64>,
    pub edges: Vec<(u64, u64)>,
}

pub fn random_dag<R: rand::Rng>(rng: &mut R, max_n: usize) -> RandomDag {
    use rand::seq::SliceRandom;
    let n = rng.random_range(1..=max_n);
    let density: f64 = rng.random_range(0.05..0.7);
    let mut ids: Vec<u64> = rand::seq::index::sample(rng, 1000, n).into_iter().map(|i| i as u64).collect();
    ids.shuffle(rng);
    let mut edges = Vec::new();
    for c in 0..n {
        for p in 0..c {
            if rng.random_bool(density) {
                edges.push((ids[c], ids[p]));
            }
        }
    }
    edges.shuffle(rng);
    RandomDag { ids, edges }
}

/// Reflexive reachability `reach[a][b]`: a >= b in the order, by
/// Floyd-Warshall over positions in `ids`.
pub fn reachability(ids: &[u64], edges: &[(u64, u64)]) -> Vec<Vec<bool>> {
    let n = ids.len();
    let pos = |id: u64| ids.iter().position(|&x| x == id).unwrap();
    let mut r = vec![vec![false; n]; n];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(c, p) in edges {
        r[pos(c)][pos(p)] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if r[i][k] && r[k][j] {
                    r[i][j] = true;
                }
            }
        }
    }
    r
}

/// Longest chain by exhaustive depth-first search over the order.
pub fn brute_height(reach: &[Vec<bool>]) -> usize {
    fn go(v: usize, reach: &[Vec<bool>], memo: &mut [Option<usize>]) -> usize {
        if let Some(h) = memo[v] {
            return h;
        }
        let h = 1 + (0..reach.len())
            .filter(|&u| u != v && reach[v][u])
            .map(|u| go(u, reach, memo))
            .max()
            .unwrap_or(0);
        memo[v] = Some(h);
        h
    }
    let mut memo = vec![None; reach.len()];
    (0..reach.len()).map(|v| go(v, reach, &mut memo)).max().unwrap_or(0)
}

/// Largest antichain by trying every subset.
pub fn brute_width(reach: &[Vec<bool>]) -> usize {
    let n = reach.len();
    let mut best = 0;
    for mask in 0u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let anti = members
            .iter()
            .all(|&a| members.iter().all(|&b| a == b || (!reach[a][b] && !reach[b][a])));
        if anti {
            best = best.max(members.len());
        }
    }
    best
}

/// Edges implied by a longer path.
pub fn brute_redundant(ids: &[u64], edges: &[(u64, u64)]) -> std::collections::BTreeSet<(u64, u64)> {
    edges
        .iter()
        .copied()
        .filter(|&(c, p)| {
            let rest: Vec<(u64, u64)> = edges.iter().copied().filter(|&e| e != (c, p)).collect();
            let r = reachability(ids, &rest);
            let pos = |id: u64| ids.iter().position(|&x| x == id).unwrap();
            r[pos(c)][pos(p)]
        })
        .collect()
}

/// `Σ_n e^{-λ} λ^n / n! · P(X_1 + … + X_n = k)` by explicit convolution;
/// exact for `k ≤ k_max` because every severity is at least 1.
pub fn convolution_oracle(lambda: f64, severity: &[(u64, f64)], k_max: usize) -> Vec<f64> {
    let mut out = vec![0.0; k_max + 1];
    let mut power = vec![0.0; k_max + 1];
    power[0] = 1.0;
    let mut weight = (-lambda).exp();
    for n in 0..=k_max {
        for k in 0..=k_max {
            out[k] += weight * power[k];
        }
        let mut next = vec![0.0; k_max + 1];
        for (k, &p) in power.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for &(v, q) in severity {
                if k + (v as usize) <= k_max {
                    next[k + v as usize] += p * q;
                }
            }
        }
        power = next;
        weight *= lambda / (n as f64 + 1.0);
    }
    out
}
