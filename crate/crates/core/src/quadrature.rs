//! Gauss-Hermite quadrature (physicists' convention).
//!
//! The n-point rule integrates exp(-x^2) * f(x) over (-inf, inf) exactly for
//! polynomials f of degree up to 2n-1. Nodes and weights are computed with
//! the Golub-Welsch algorithm: eigenvalues of the symmetric tridiagonal
//! Jacobi matrix with zero diagonal and off-diagonal sqrt(k/2).

use crate::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};

/// Returns the nodes and weights of the n-point physicists' Gauss-Hermite rule.
///
/// To integrate against a normal density phi(theta; 0, sigma), transform
/// theta_q = sqrt(2) * sigma * x_q and scale weights by 1 / sqrt(pi).
pub fn gauss_hermite_rule(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "quadrature order must be positive".into(),
        ));
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    if n == 1 {
        return Ok((vec![0.0], vec![sqrt_pi]));
    }

    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);

    // weight_q = sqrt(pi) * v0^2, with v the normalized eigenvector.
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|q| {
            let node = eig.eigenvalues[q];
            let v0 = eig.eigenvectors[(0, q)];
            (node, sqrt_pi * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Symmetrize: the rule is exactly symmetric about zero, the eigensolver
    // only approximately so.
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok((nodes, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn one_point_rule_is_degenerate() {
        let (nodes, weights) = gauss_hermite_rule(1).unwrap();
        assert_eq!(nodes, vec![0.0]);
        assert_abs_diff_eq!(weights[0], std::f64::consts::PI.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn two_point_rule_matches_closed_form() {
        // roots of H_2(x) = 4x^2 - 2 are +-1/sqrt(2), weights sqrt(pi)/2
        let (nodes, weights) = gauss_hermite_rule(2).unwrap();
        let r = 1.0 / std::f64::consts::SQRT_2;
        assert_abs_diff_eq!(nodes[0], -r, epsilon = 1e-12);
        assert_abs_diff_eq!(nodes[1], r, epsilon = 1e-12);
        let half_sqrt_pi = std::f64::consts::PI.sqrt() / 2.0;
        assert_abs_diff_eq!(weights[0], half_sqrt_pi, epsilon = 1e-12);
        assert_abs_diff_eq!(weights[1], half_sqrt_pi, epsilon = 1e-12);
    }

    #[test]
    fn sixty_point_rule_integrates_constant() {
        // integral of exp(-x^2) dx = sqrt(pi)
        let (_, weights) = gauss_hermite_rule(60).unwrap();
        let total: f64 = weights.iter().sum();
        assert_abs_diff_eq!(total, std::f64::consts::PI.sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn sixty_point_rule_integrates_even_moments() {
        // integral of x^2 exp(-x^2) dx = sqrt(pi)/2
        let (nodes, weights) = gauss_hermite_rule(60).unwrap();
        let m2: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| w * x * x)
            .sum();
        assert_abs_diff_eq!(m2, std::f64::consts::PI.sqrt() / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_order_rejected() {
        assert!(gauss_hermite_rule(0).is_err());
    }
}
