//! Bradley-Terry aggregation of pairwise judgements.
//!
//! Fits P(i beats j) = exp(lambda_i) / (exp(lambda_i) + exp(lambda_j)) to a
//! matrix of (possibly fractional) win masses with Hunter's MM algorithm
//! under a sum-zero constraint on lambda. "i beats j" here means "item i was
//! judged harder than item j", so larger lambda means harder.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Pseudo-count scale for fractional win masses.
pub const PSEUDOCOUNT_SCALE: u64 = 1_000_000;

/// Non-negative win-mass matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    n: usize,
    /// Row-major; wins[i*n + j] is the mass for "i judged harder than j".
    wins: Vec<f64>,
}

impl WinMatrix {
    pub fn new(n: usize, wins: Vec<f64>) -> Result<Self> {
        if wins.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "win matrix length {} for n = {n}",
                wins.len()
            )));
        }
        for i in 0..n {
            if wins[i * n + i] != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "diagonal entry ({i}, {i}) must be zero"
                )));
            }
        }
        if let Some(w) = wins.iter().find(|w| !(**w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "win masses must be non-negative and finite, got {w}"
            )));
        }
        Ok(Self { n, wins })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            wins: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.wins[i * self.n + j]
    }

    pub fn add(&mut self, i: usize, j: usize, mass: f64) {
        assert!(i != j, "diagonal must stay zero");
        self.wins[i * self.n + j] += mass;
    }

    /// Transposed matrix (every judgement reversed).
    pub fn transposed(&self) -> Self {
        let mut wins = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                wins[j * self.n + i] = self.wins[i * self.n + j];
            }
        }
        Self { n: self.n, wins }
    }

    fn smoothed(&self, eps: f64) -> Self {
        let mut wins = self.wins.clone();
        if eps > 0.0 {
            for i in 0..self.n {
                for j in 0..self.n {
                    if i != j {
                        wins[i * self.n + j] += eps;
                    }
                }
            }
        }
        Self { n: self.n, wins }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BTResult {
    /// Latent difficulty per item, sum-zero constrained; higher = harder.
    pub lambda: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
}

#[derive(Debug, Clone)]
pub struct BtConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Mass added to every ordered pair before fitting; 0 disables.
    pub smoothing: f64,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1000,
            smoothing: 0.0,
        }
    }
}

/// Converts a fractional win probability into integer pseudo-counts:
/// round(p, 6 digits) * 10^6 and its complement. Round-half-even.
pub fn soft_to_pseudocounts(p_first_harder: f64) -> Result<(u64, u64)> {
    if !(0.0..=1.0).contains(&p_first_harder) {
        return Err(Error::InvalidArgument(format!(
            "win probability {p_first_harder} outside [0, 1]"
        )));
    }
    let count_ij = (p_first_harder * PSEUDOCOUNT_SCALE as f64).round_ties_even() as u64;
    Ok((count_ij, PSEUDOCOUNT_SCALE - count_ij))
}

fn undirected_components(w: &WinMatrix) -> Vec<Vec<usize>> {
    let n = w.n();
    let mut comp = vec![usize::MAX; n];
    let mut components = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        comp[start] = id;
        while let Some(i) = stack.pop() {
            members.push(i);
            for j in 0..n {
                if comp[j] == usize::MAX && (w.get(i, j) > 0.0 || w.get(j, i) > 0.0) {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    components
}

/// Items witnessing perfect separation: the MLE exists only when the win
/// digraph is strongly connected. Returns an empty vector when it is;
/// otherwise the items with no win mass against them or for them (or, failing
/// that, the items outside the mutually reachable set of node 0).
fn separation_witnesses(w: &WinMatrix) -> Vec<usize> {
    let n = w.n();
    let reach = |forward: bool| -> Vec<bool> {
        // reachable set from node 0 following win edges (or their reverses)
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let edge = if forward { w.get(i, j) } else { w.get(j, i) };
                if edge > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen
    };
    let fwd = reach(true);
    let bwd = reach(false);
    if fwd.iter().all(|&s| s) && bwd.iter().all(|&s| s) {
        return Vec::new();
    }
    let direct: Vec<usize> = (0..n)
        .filter(|&i| {
            let losses: f64 = (0..n).map(|j| w.get(j, i)).sum();
            let wins: f64 = (0..n).map(|j| w.get(i, j)).sum();
            losses == 0.0 || wins == 0.0
        })
        .collect();
    if !direct.is_empty() {
        direct
    } else {
        (0..n).filter(|&i| !fwd[i] || !bwd[i]).collect()
    }
}

pub fn bt_loglik(w: &WinMatrix, lambda: &[f64]) -> f64 {
    let n = w.n();
    let mut ll = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mass = w.get(i, j);
            if mass > 0.0 {
                let d = lambda[j] - lambda[i];
                // ln P(i beats j) = -ln(1 + exp(lambda_j - lambda_i))
                let lnp = if d > 0.0 {
                    -d - (-d).exp().ln_1p()
                } else {
                    -d.exp().ln_1p()
                };
                ll += mass * lnp;
            }
        }
    }
    ll
}

/// Analytic gradient of the Bradley-Terry log-likelihood at `lambda`.
pub fn bt_loglik_grad(w: &WinMatrix, lambda: &[f64]) -> Result<Vec<f64>> {
    let n = w.n();
    if lambda.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} lambdas for {n} items",
            lambda.len()
        )));
    }
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pair_mass = w.get(i, j) + w.get(j, i);
            if pair_mass > 0.0 {
                let p_ij = crate::sigmoid(lambda[i] - lambda[j]);
                grad[i] += w.get(i, j) - pair_mass * p_ij;
            }
        }
    }
    Ok(grad)
}

/// Maximizes the Bradley-Terry likelihood with MM iterations.
pub fn bt_fit(w: &WinMatrix, config: &BtConfig) -> Result<BTResult> {
    let n = w.n();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "need at least two items to fit".into(),
        ));
    }
    let w = w.smoothed(config.smoothing);

    let components = undirected_components(&w);
    if components.len() > 1 {
        return Err(Error::DisconnectedGraph(components));
    }
    let witnesses = separation_witnesses(&w);
    if !witnesses.is_empty() {
        return Err(Error::PerfectSeparation(witnesses));
    }

    let total_wins: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| w.get(i, j)).sum())
        .collect();

    let mut pi = vec![1.0_f64; n];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..config.max_iter {
        iterations += 1;
        let mut max_change = 0.0_f64;
        let mut new_pi = vec![0.0; n];
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pair_mass = w.get(i, j) + w.get(j, i);
                if pair_mass > 0.0 {
                    denom += pair_mass / (pi[i] + pi[j]);
                }
            }
            new_pi[i] = total_wins[i] / denom;
        }
        // renormalize to geometric mean 1 (sum-zero on the log scale)
        let log_gm = new_pi.iter().map(|p| p.ln()).sum::<f64>() / n as f64;
        let gm = log_gm.exp();
        for i in 0..n {
            new_pi[i] /= gm;
            max_change = max_change.max((new_pi[i].ln() - pi[i].ln()).abs());
        }
        pi = new_pi;
        if max_change < config.tol {
            converged = true;
            break;
        }
    }

    let mut lambda: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    let mean = lambda.iter().sum::<f64>() / n as f64;
    for l in &mut lambda {
        *l -= mean;
    }
    let loglik = bt_loglik(&w, &lambda);
    Ok(BTResult {
        lambda,
        converged,
        iterations,
        loglik,
    })
}

/// Ranks by descending lambda (1 = hardest); exact ties share the average rank.
pub fn ranking(result: &BTResult) -> Vec<f64> {
    let n = result.lambda.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| result.lambda[b].partial_cmp(&result.lambda[a]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos + 1;
        while end < n && result.lambda[order[end]] == result.lambda[order[pos]] {
            end += 1;
        }
        let avg = (pos + 1..=end).map(|r| r as f64).sum::<f64>() / (end - pos) as f64;
        for k in pos..end {
            ranks[order[k]] = avg;
        }
        pos = end;
    }
    ranks
}

/// Aggregates parsed pairwise judgements into a win matrix over `item_ids`.
/// Hard judgements add unit counts; soft judgements add the pseudo-counts of
/// their fractional win mass. Returns the matrix and the number of skipped
/// records (parse failures or unknown items).
pub fn win_matrix_from_judgements(
    records: &[crate::elicit::JudgementRecord],
    item_ids: &[String],
    decision: crate::elicit::DecisionType,
) -> Result<(WinMatrix, usize)> {
    use crate::elicit::{DecisionType, SoftValue};

    let index: std::collections::BTreeMap<&str, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(k, id)| (id.as_str(), k))
        .collect();
    let mut w = WinMatrix::zeros(item_ids.len());
    let mut skipped = 0usize;
    for record in records {
        let pair = match record.item_ids.as_slice() {
            [a, b] => index.get(a.as_str()).zip(index.get(b.as_str())),
            _ => None,
        };
        let Some((&i, &j)) = pair else {
            skipped += 1;
            continue;
        };
        match decision {
            DecisionType::Soft => match &record.soft {
                Some(SoftValue::Pairwise(soft)) => {
                    let (cij, cji) = soft_to_pseudocounts(soft.p_first_harder)?;
                    w.add(i, j, cij as f64);
                    w.add(j, i, cji as f64);
                }
                _ => skipped += 1,
            },
            DecisionType::Hard => match record.parsed {
                Some(v) if v == 1.0 => w.add(i, j, 1.0),
                Some(v) if v == 0.0 => w.add(j, i, 1.0),
                _ => skipped += 1,
            },
        }
    }
    Ok((w, skipped))
}
