//! Rasch marginal maximum likelihood estimation.
//!
//! Item difficulties and the population ability SD are estimated with an EM
//! algorithm. The E-step integrates over the latent ability with a
//! Gauss-Hermite rule (node scaling sqrt(2)*sigma, weight scaling 1/sqrt(pi));
//! the M-step runs a per-item one-dimensional Newton-Raphson on the expected
//! weighted counts and updates sigma from the posterior latent second moment.
//! The ability mean is fixed at 0 for identifiability.

use crate::quadrature::gauss_hermite_rule;
use crate::{sigmoid, Error, Result};
use serde::{Deserialize, Serialize};

/// Sparse weighted binary response matrix over pseudo-persons.
///
/// A user contributing S sessions appears as S pseudo-persons, each with
/// weight 1/S.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedResponseMatrix {
    persons: Vec<String>,
    items: Vec<String>,
    /// (person index, item index, correct in {0,1})
    responses: Vec<(u32, u32, u8)>,
    weights: Vec<f64>,
}

impl WeightedResponseMatrix {
    pub fn new(
        persons: Vec<String>,
        items: Vec<String>,
        responses: Vec<(u32, u32, u8)>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != persons.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} persons",
                weights.len(),
                persons.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "person weights must be strictly positive, got {w}"
            )));
        }
        for &(p, i, x) in &responses {
            if p as usize >= persons.len() || i as usize >= items.len() {
                return Err(Error::InvalidArgument(format!(
                    "response index ({p}, {i}) out of range"
                )));
            }
            if x > 1 {
                return Err(Error::InvalidArgument(format!(
                    "response value must be 0 or 1, got {x}"
                )));
            }
        }
        Ok(Self {
            persons,
            items,
            responses,
            weights,
        })
    }

    pub fn persons(&self) -> &[String] {
        &self.persons
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn responses(&self) -> &[(u32, u32, u8)] {
        &self.responses
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_persons(&self) -> usize {
        self.persons.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Per-person response lists, in stable input order.
    fn by_person(&self) -> Vec<Vec<(usize, u8)>> {
        let mut out = vec![Vec::new(); self.persons.len()];
        for &(p, i, x) in &self.responses {
            out[p as usize].push((i as usize, x));
        }
        out
    }
}

/// Normal latent ability distribution with mean fixed at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbilityDistribution {
    mean: f64,
    sd: f64,
}

impl AbilityDistribution {
    pub fn new(sd: f64) -> Result<Self> {
        if !(sd > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ability sd must be positive, got {sd}"
            )));
        }
        Ok(Self { mean: 0.0, sd })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sd(&self) -> f64 {
        self.sd
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaschFit {
    pub item_ids: Vec<String>,
    /// Item difficulties b_i on the logit scale.
    pub difficulties: Vec<f64>,
    pub ability: AbilityDistribution,
    /// Population expected proportion correct per item.
    pub expected_p: Vec<f64>,
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct RaschConfig {
    pub quadrature_nodes: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Override the default initialization (logit of the weighted observed
    /// proportion incorrect, clipped to [-4, 4]).
    pub init_difficulties: Option<Vec<f64>>,
}

impl Default for RaschConfig {
    fn default() -> Self {
        Self {
            quadrature_nodes: 60,
            tol: 1e-5,
            max_iter: 100,
            init_difficulties: None,
        }
    }
}

const SQRT_PI: f64 = 1.772_453_850_905_516;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// E-step working quantities for one pass over the data at fixed parameters.
struct EStep {
    /// Weighted marginal log-likelihood.
    loglik: f64,
    /// Posterior node weights per person, row-major persons x nodes.
    posterior: Vec<f64>,
}

fn e_step(
    by_person: &[Vec<(usize, u8)>],
    weights: &[f64],
    difficulties: &[f64],
    theta: &[f64],
    prior: &[f64],
) -> EStep {
    let n_nodes = theta.len();
    let n_items = difficulties.len();
    // log P and log (1-P) per item per node
    let mut ln_p = vec![0.0; n_items * n_nodes];
    let mut ln_q = vec![0.0; n_items * n_nodes];
    for i in 0..n_items {
        for q in 0..n_nodes {
            let p = sigmoid(theta[q] - difficulties[i]);
            ln_p[i * n_nodes + q] = p.ln();
            ln_q[i * n_nodes + q] = (1.0 - p).ln();
        }
    }
    let ln_prior: Vec<f64> = prior.iter().map(|a| a.ln()).collect();

    let mut loglik = 0.0;
    let mut posterior = vec![0.0; by_person.len() * n_nodes];
    let mut node_ll = vec![0.0; n_nodes];
    for (p, resp) in by_person.iter().enumerate() {
        node_ll.copy_from_slice(&ln_prior);
        for &(i, x) in resp {
            let row = if x == 1 { &ln_p } else { &ln_q };
            for q in 0..n_nodes {
                node_ll[q] += row[i * n_nodes + q];
            }
        }
        let lse = logsumexp(&node_ll);
        loglik += weights[p] * lse;
        for q in 0..n_nodes {
            posterior[p * n_nodes + q] = (node_ll[q] - lse).exp();
        }
    }
    EStep { loglik, posterior }
}

/// Fits the Rasch model by marginal maximum likelihood.
///
/// Stops when the maximum absolute change across all difficulties and sigma
/// falls below `config.tol`, or after `config.max_iter` EM iterations.
pub fn rasch_em_fit(data: &WeightedResponseMatrix, config: &RaschConfig) -> Result<RaschFit> {
    let n_items = data.n_items();
    let n_persons = data.n_persons();
    if n_persons == 0 || n_items == 0 {
        return Err(Error::InvalidArgument(
            "response matrix has no persons or no items".into(),
        ));
    }
    let by_person = data.by_person();
    if let Some(p) = by_person.iter().position(|r| r.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "person '{}' has no responses",
            data.persons[p]
        )));
    }

    // Reject items with all-correct or all-incorrect weighted responses.
    let mut correct_mass = vec![0.0; n_items];
    let mut total_mass = vec![0.0; n_items];
    for &(p, i, x) in data.responses() {
        let w = data.weights[p as usize];
        total_mass[i as usize] += w;
        correct_mass[i as usize] += w * x as f64;
    }
    let degenerate: Vec<String> = (0..n_items)
        .filter(|&i| {
            total_mass[i] == 0.0 || correct_mass[i] == 0.0 || correct_mass[i] == total_mass[i]
        })
        .map(|i| data.items[i].clone())
        .collect();
    if !degenerate.is_empty() {
        return Err(Error::DegenerateItems(degenerate));
    }

    let (gh_nodes, gh_weights) = gauss_hermite_rule(config.quadrature_nodes)?;
    let prior: Vec<f64> = gh_weights.iter().map(|w| w / SQRT_PI).collect();

    let mut difficulties = match &config.init_difficulties {
        Some(init) => {
            if init.len() != n_items {
                return Err(Error::InvalidArgument(format!(
                    "{} initial difficulties for {} items",
                    init.len(),
                    n_items
                )));
            }
            init.clone()
        }
        None => (0..n_items)
            .map(|i| {
                let p_correct = correct_mass[i] / total_mass[i];
                ((1.0 - p_correct) / p_correct).ln().clamp(-4.0, 4.0)
            })
            .collect(),
    };
    let mut sigma = 1.0_f64;

    let n_nodes = config.quadrature_nodes;
    let mut trace = Vec::with_capacity(config.max_iter);
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_iter {
        iterations += 1;
        let theta: Vec<f64> = gh_nodes.iter().map(|x| SQRT_2 * sigma * x).collect();
        let es = e_step(&by_person, data.weights(), &difficulties, &theta, &prior);
        trace.push(es.loglik);

        // Expected weighted counts per item per node.
        let mut n_iq = vec![0.0; n_items * n_nodes];
        let mut r_iq = vec![0.0; n_items * n_nodes];
        let mut second_moment = 0.0;
        let mut weight_sum = 0.0;
        for (p, resp) in by_person.iter().enumerate() {
            let w = data.weights[p];
            let post = &es.posterior[p * n_nodes..(p + 1) * n_nodes];
            for &(i, x) in resp {
                for q in 0..n_nodes {
                    let m = w * post[q];
                    n_iq[i * n_nodes + q] += m;
                    if x == 1 {
                        r_iq[i * n_nodes + q] += m;
                    }
                }
            }
            for q in 0..n_nodes {
                second_moment += w * post[q] * theta[q] * theta[q];
            }
            weight_sum += w;
        }

        // M-step: per-item Newton-Raphson on the expected complete-data
        // log-likelihood.
        let mut max_change = 0.0_f64;
        for i in 0..n_items {
            let mut b = difficulties[i];
            for _ in 0..25 {
                let mut grad = 0.0;
                let mut hess = 0.0;
                for q in 0..n_nodes {
                    let p = sigmoid(theta[q] - b);
                    grad += n_iq[i * n_nodes + q] * p - r_iq[i * n_nodes + q];
                    hess -= n_iq[i * n_nodes + q] * p * (1.0 - p);
                }
                // d loglik / db = grad, d2 loglik / db2 = hess (negative)
                let step = grad / hess;
                b -= step;
                if step.abs() < 1e-8 {
                    break;
                }
            }
            max_change = max_change.max((b - difficulties[i]).abs());
            difficulties[i] = b;
        }

        let new_sigma = (second_moment / weight_sum).sqrt();
        max_change = max_change.max((new_sigma - sigma).abs());
        sigma = new_sigma;

        if max_change < config.tol {
            converged = true;
            break;
        }
    }

    let ability = AbilityDistribution::new(sigma)?;
    let expected_p = difficulties
        .iter()
        .map(|&b| expected_proportion_correct(b, sigma))
        .collect::<Result<Vec<f64>>>()?;

    Ok(RaschFit {
        item_ids: data.items.clone(),
        difficulties,
        ability,
        expected_p,
        log_likelihood_trace: trace,
        converged,
        iterations,
    })
}

/// Weighted marginal log-likelihood of the data at the given parameters,
/// integrals approximated with the `nodes`-point Gauss-Hermite rule.
pub fn marginal_loglik(
    data: &WeightedResponseMatrix,
    difficulties: &[f64],
    ability: AbilityDistribution,
    nodes: usize,
) -> Result<f64> {
    if difficulties.len() != data.n_items() {
        return Err(Error::InvalidArgument(format!(
            "{} difficulties for {} items",
            difficulties.len(),
            data.n_items()
        )));
    }
    if data.n_persons() == 0 {
        return Ok(0.0);
    }
    let (gh_nodes, gh_weights) = gauss_hermite_rule(nodes)?;
    let prior: Vec<f64> = gh_weights.iter().map(|w| w / SQRT_PI).collect();
    let theta: Vec<f64> = gh_nodes.iter().map(|x| SQRT_2 * ability.sd() * x).collect();
    let es = e_step(&data.by_person(), data.weights(), difficulties, &theta, &prior);
    Ok(es.loglik)
}

/// Analytic gradient of [`marginal_loglik`] with respect to each item
/// difficulty.
pub fn marginal_loglik_grad(
    data: &WeightedResponseMatrix,
    difficulties: &[f64],
    ability: AbilityDistribution,
    nodes: usize,
) -> Result<Vec<f64>> {
    if difficulties.len() != data.n_items() {
        return Err(Error::InvalidArgument(format!(
            "{} difficulties for {} items",
            difficulties.len(),
            data.n_items()
        )));
    }
    let (gh_nodes, gh_weights) = gauss_hermite_rule(nodes)?;
    let prior: Vec<f64> = gh_weights.iter().map(|w| w / SQRT_PI).collect();
    let theta: Vec<f64> = gh_nodes.iter().map(|x| SQRT_2 * ability.sd() * x).collect();
    let by_person = data.by_person();
    let es = e_step(&by_person, data.weights(), difficulties, &theta, &prior);

    let n_nodes = theta.len();
    let mut grad = vec![0.0; difficulties.len()];
    for (p, resp) in by_person.iter().enumerate() {
        let w = data.weights()[p];
        let post = &es.posterior[p * n_nodes..(p + 1) * n_nodes];
        for &(i, x) in resp {
            let mut g = 0.0;
            for q in 0..n_nodes {
                g += post[q] * (sigmoid(theta[q] - difficulties[i]) - x as f64);
            }
            grad[i] += w * g;
        }
    }
    Ok(grad)
}

/// Population expected proportion correct for an item of difficulty `b` under
/// an N(0, sigma^2) ability distribution, evaluated numerically on [-50, 50].
pub fn expected_proportion_correct(b: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if !b.is_finite() {
        return Err(Error::InvalidArgument(format!("b must be finite, got {b}")));
    }
    // Composite Simpson; the integrand decays like the normal density so the
    // truncation error at +-50 is negligible for any practical sigma.
    let n = 20_000usize; // intervals, even
    let a = -50.0_f64;
    let h = 100.0 / n as f64;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let f = |theta: f64| -> f64 {
        sigmoid(theta - b) * norm * (-theta * theta / (2.0 * sigma * sigma)).exp()
    };
    let mut sum = f(a) + f(-a);
    for k in 1..n {
        let coeff = if k % 2 == 1 { 4.0 } else { 2.0 };
        sum += coeff * f(a + k as f64 * h);
    }
    Ok((sum * h / 3.0).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
}
