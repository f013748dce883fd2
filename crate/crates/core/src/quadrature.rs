//! Gauss–Hermite quadrature, used by the verification suites to compute
//! exact (to quadrature accuracy) Gaussian expectations and marginal
//! likelihoods independently of any Monte Carlo path.

/// Orthonormal Hermite value pair `(h_n(z), h_{n-1}(z))`. The recurrence
/// is the orthonormal one, which stays within f64 range for n in the
/// hundreds.
fn hermite_pair(n: usize, z: f64) -> (f64, f64) {
    let mut p1 = std::f64::consts::PI.powf(-0.25);
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j as f64 - 1.0) / j as f64).sqrt() * p3;
    }
    (p1, p2)
}

fn weight_at(n: usize, root: f64) -> f64 {
    let (_, p2) = hermite_pair(n, root);
    let pp = (2.0 * n as f64).sqrt() * p2;
    2.0 / (pp * pp)
}

/// Nodes (ascending) and weights for n-point Gauss–Hermite quadrature in
/// the physicists' convention: `∫ e^{-x²} f(x) dx ≈ Σ wᵢ f(xᵢ)`.
///
/// Roots are bracketed by a sign scan and polished by bisection. Newton
/// with the classical initial guesses mis-converges for n around 200
/// (the guess can land on a root of h_{n-1}, where the Newton step blows
/// up), so the slower bracketed search is used throughout.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let m = n / 2; // strictly positive roots
    let zmax = (2.0 * n as f64 + 1.0).sqrt() + 1.0;
    // Interior root spacing is ~pi/sqrt(2n); scan several times finer.
    let dz = 0.5 / (n as f64).sqrt();

    let mut positive = Vec::with_capacity(m);
    let mut z0 = dz * 0.25; // step past the origin root of odd-n polynomials
    let mut f0 = hermite_pair(n, z0).0;
    let mut z = z0 + dz;
    while positive.len() < m && z <= zmax + dz {
        let f1 = hermite_pair(n, z).0;
        if f1 == 0.0 {
            positive.push(z);
            z0 = z + 0.5 * dz;
            f0 = hermite_pair(n, z0).0;
            z = z0 + dz;
            continue;
        }
        if (f0 > 0.0) != (f1 > 0.0) {
            let (mut a, mut b) = (z0, z);
            let mut fa = f0;
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if mid <= a || mid >= b {
                    break; // interval below resolution
                }
                let fm = hermite_pair(n, mid).0;
                if fm == 0.0 {
                    a = mid;
                    b = mid;
                    break;
                }
                if (fa > 0.0) != (fm > 0.0) {
                    b = mid;
                } else {
                    a = mid;
                    fa = fm;
                }
            }
            positive.push(0.5 * (a + b));
        }
        z0 = z;
        f0 = f1;
        z += dz;
    }
    assert_eq!(positive.len(), m, "missed Hermite roots for n={n}");

    let w_pos: Vec<f64> = positive.iter().map(|&r| weight_at(n, r)).collect();
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in (0..m).rev() {
        nodes.push(-positive[i]);
        weights.push(w_pos[i]);
    }
    if n % 2 == 1 {
        nodes.push(0.0);
        weights.push(weight_at(n, 0.0));
    }
    for i in 0..m {
        nodes.push(positive[i]);
        weights.push(w_pos[i]);
    }
    (nodes, weights)
}

/// `E_{h ~ N(mu, sigma²)}[f(h)]` by n-point Gauss–Hermite quadrature.
pub fn gaussian_expectation(mu: f64, sigma: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        acc += w * f(mu + sqrt2 * sigma * x);
    }
    acc * inv_sqrt_pi
}

/// `log ∫ g(h) N(h | mu, sigma²) dh` where `log_g` supplies `log g(h)`,
/// evaluated with a running max for stability.
pub fn log_gaussian_integral(
    mu: f64,
    sigma: f64,
    n: usize,
    log_g: impl Fn(f64) -> f64,
) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let sqrt2 = std::f64::consts::SQRT_2;
    let terms: Vec<f64> = nodes
        .iter()
        .zip(&weights)
        .map(|(x, w)| w.ln() + log_g(mu + sqrt2 * sigma * x))
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln() - 0.5 * std::f64::consts::PI.ln()
}
