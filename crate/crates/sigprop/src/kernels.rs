//! Bivariate-Gaussian expectation kernels.
//!
//! Everything the covariance and Jacobian-norm recurrences consume lives
//! here: the ReLU covariance map `kappa`, its derivative counterpart
//! `hat_kappa`, and the maps that push a covariance pair through a
//! residual-branch input nonlinearity (`propagate_phi`) or through its
//! derivative (`propagate_phi_prime`).
//!
//! For the erf nonlinearity all maps have closed forms; for tanh they are
//! evaluated by Gauss-Hermite quadrature with an order-doubling convergence
//! check. The quadrature path also accepts erf, which gives an independent
//! route for cross-validating the closed forms.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

/// Tolerance within which correlation/covariance arguments are clamped to
/// their boundary instead of rejected. Long recurrences accumulate drift of
/// this order.
pub const CLAMP_TOL: f64 = 1e-12;

/// Default Gauss-Hermite order; doubled once for the convergence check.
pub const QUAD_ORDER: usize = 64;

/// Relative change allowed between the base and doubled quadrature orders.
pub const QUAD_REL_TOL: f64 = 1e-9;

/// The order-parameter pair (q, p): normalized self- and cross-position dot
/// products at a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovPair {
    q: f64,
    p: f64,
}

impl CovPair {
    /// Builds a valid pair, clamping |p| <= q violations within [`CLAMP_TOL`]
    /// and rejecting anything worse.
    pub fn new(q: f64, p: f64) -> Result<Self> {
        if !q.is_finite() || !p.is_finite() {
            return Err(Error::InvalidCovariance { q, p, reason: "non-finite component" });
        }
        if q <= 0.0 {
            return Err(Error::InvalidCovariance { q, p, reason: "q must be positive" });
        }
        let p = if p.abs() <= q {
            p
        } else if p.abs() <= q * (1.0 + CLAMP_TOL) + CLAMP_TOL {
            q.copysign(p)
        } else {
            return Err(Error::InvalidCovariance { q, p, reason: "|p| exceeds q" });
        };
        Ok(CovPair { q, p })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Inter-position cosine p/q.
    pub fn cosine(&self) -> f64 {
        self.p / self.q
    }
}

/// Residual-branch input map: LayerNorm (RMS form), erf(alpha h) or
/// tanh(alpha h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nonlinearity {
    LayerNorm,
    Erf { alpha: f64 },
    Tanh { alpha: f64 },
}

impl Nonlinearity {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Nonlinearity::LayerNorm => Ok(()),
            Nonlinearity::Erf { alpha } | Nonlinearity::Tanh { alpha } => {
                if alpha > 0.0 && alpha.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidHyper(format!("alpha must be positive, got {alpha}")))
                }
            }
        }
    }

    /// True for the elementwise saturating maps (erf, tanh).
    pub fn is_tanh_like(&self) -> bool {
        !matches!(self, Nonlinearity::LayerNorm)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Nonlinearity::LayerNorm => "layernorm",
            Nonlinearity::Erf { .. } => "erf",
            Nonlinearity::Tanh { .. } => "tanh",
        }
    }

    /// phi(x) for the elementwise variants.
    pub(crate) fn apply(&self, x: f64) -> f64 {
        match *self {
            Nonlinearity::LayerNorm => panic!("LayerNorm is not elementwise"),
            Nonlinearity::Erf { alpha } => libm::erf(alpha * x),
            Nonlinearity::Tanh { alpha } => (alpha * x).tanh(),
        }
    }

    /// phi'(x) for the elementwise variants.
    pub(crate) fn derivative(&self, x: f64) -> f64 {
        match *self {
            Nonlinearity::LayerNorm => panic!("LayerNorm is not elementwise"),
            Nonlinearity::Erf { alpha } => {
                2.0 * alpha / std::f64::consts::PI.sqrt() * (-alpha * alpha * x * x).exp()
            }
            Nonlinearity::Tanh { alpha } => {
                let t = (alpha * x).tanh();
                alpha * (1.0 - t * t)
            }
        }
    }
}

fn clamp_unit(name: &'static str, x: f64) -> Result<f64> {
    if x.abs() <= 1.0 {
        Ok(x)
    } else if x.abs() <= 1.0 + CLAMP_TOL {
        Ok(1.0_f64.copysign(x))
    } else {
        Err(Error::Domain { name, value: x, lo: -1.0, hi: 1.0 })
    }
}

/// ReLU covariance map: E[ReLU(h1) ReLU(h2)] = (q/2) kappa(p/q) for a
/// standardized bivariate Gaussian with correlation rho.
pub fn kappa(rho: f64) -> Result<f64> {
    let rho = clamp_unit("rho", rho)?;
    Ok(((1.0 - rho * rho).sqrt() + rho * (std::f64::consts::PI - rho.acos()))
        / std::f64::consts::PI)
}

/// Heaviside covariance map: E[step(h1) step(h2)] = 1/4 + arcsin(rho)/(2 pi),
/// the positive-orthant probability.
pub fn hat_kappa(rho: f64) -> Result<f64> {
    let rho = clamp_unit("rho", rho)?;
    Ok(0.25 + rho.asin() / (2.0 * std::f64::consts::PI))
}

/// Gauss-Hermite rule for the weight e^{-x^2}; weights sum to sqrt(pi).
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Nodes and weights by Newton iteration on the orthonormal Hermite
    /// recurrence (Golub-Welsch equivalent, no eigen-solver needed).
    pub fn gauss_hermite(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be >= 1");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        let mut z = 0.0_f64;
        for i in 0..n.div_ceil(2) {
            // Stroud & Secrest initial guesses, largest root first.
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..200 {
                // Orthonormal recurrence: p0 = pi^{-1/4},
                // p_{j+1} = x sqrt(2/(j+1)) p_j - sqrt(j/(j+1)) p_{j-1}.
                let mut p1 = std::f64::consts::PI.powf(-0.25);
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let dz = p1 / pp;
                z -= dz;
                if dz.abs() < 1e-15 {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        // Reverse into ascending node order.
        nodes.reverse();
        weights.reverse();
        QuadratureRule { nodes, weights }
    }

    /// Cached rule; construction is idempotent.
    pub fn cached(order: usize) -> Arc<QuadratureRule> {
        static CACHE: RwLock<Option<HashMap<usize, Arc<QuadratureRule>>>> = RwLock::new(None);
        if let Some(map) = CACHE.read().unwrap().as_ref() {
            if let Some(rule) = map.get(&order) {
                return Arc::clone(rule);
            }
        }
        let rule = Arc::new(QuadratureRule::gauss_hermite(order));
        let mut guard = CACHE.write().unwrap();
        let map = guard.get_or_insert_with(HashMap::new);
        Arc::clone(map.entry(order).or_insert(rule))
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// integral of e^{-x^2} f(x) dx.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// E[f(h)] for h ~ N(0, q).
    pub fn gaussian_expectation(&self, q: f64, f: impl Fn(f64) -> f64) -> f64 {
        let s = (2.0 * q).sqrt();
        self.integrate(|x| f(s * x)) / std::f64::consts::PI.sqrt()
    }

    /// E[f(h1, h2)] for (h1, h2) ~ N(0, [[q, p], [p, q]]), via the
    /// lower-triangular square root of the covariance.
    pub fn gaussian_expectation_2d(&self, cov: CovPair, f: impl Fn(f64, f64) -> f64) -> f64 {
        let q = cov.q();
        let p = cov.p();
        let l11 = q.sqrt();
        let l21 = p / l11;
        let l22 = (q - p * p / q).max(0.0).sqrt();
        let s = std::f64::consts::SQRT_2;
        let mut total = 0.0;
        for (&x, &wx) in self.nodes.iter().zip(&self.weights) {
            let h1 = s * l11 * x;
            let h2_base = s * l21 * x;
            let mut inner = 0.0;
            for (&y, &wy) in self.nodes.iter().zip(&self.weights) {
                inner += wy * f(h1, h2_base + s * l22 * y);
            }
            total += wx * inner;
        }
        total / std::f64::consts::PI
    }
}

/// Runs `eval` at the base order and again at double the order; errors if the
/// two disagree beyond [`QUAD_REL_TOL`] relative.
fn converged(eval: impl Fn(&QuadratureRule) -> f64) -> Result<f64> {
    let coarse = eval(&QuadratureRule::cached(QUAD_ORDER));
    let fine = eval(&QuadratureRule::cached(2 * QUAD_ORDER));
    let scale = fine.abs().max(1e-300);
    let rel = (fine - coarse).abs() / scale;
    if rel > QUAD_REL_TOL {
        return Err(Error::QuadratureNoConverge { rel_change: rel, order: 2 * QUAD_ORDER });
    }
    Ok(fine)
}

/// Covariance map through phi, evaluated by quadrature regardless of whether
/// a closed form exists. Serves as the independent oracle for the closed
/// forms and as the production path for tanh.
pub fn propagate_phi_quadrature(cov: CovPair, phi: Nonlinearity) -> Result<CovPair> {
    phi.validate()?;
    if !phi.is_tanh_like() {
        return Err(Error::UnsupportedNonlinearity("LayerNorm has no quadrature form"));
    }
    let q_t = converged(|rule| rule.gaussian_expectation(cov.q(), |h| phi.apply(h).powi(2)))?;
    let p_t = if cov.p() == 0.0 {
        // Odd integrand under independent Gaussians.
        0.0
    } else {
        converged(|rule| rule.gaussian_expectation_2d(cov, |a, b| phi.apply(a) * phi.apply(b)))?
    };
    CovPair::new(q_t, p_t)
}

/// Same as [`propagate_phi_quadrature`] but for the derivative map.
pub fn propagate_phi_prime_quadrature(cov: CovPair, phi: Nonlinearity) -> Result<CovPair> {
    phi.validate()?;
    if !phi.is_tanh_like() {
        return Err(Error::UnsupportedNonlinearity("LayerNorm has no quadrature form"));
    }
    let q_h = converged(|rule| rule.gaussian_expectation(cov.q(), |h| phi.derivative(h).powi(2)))?;
    let p_h = converged(|rule| {
        rule.gaussian_expectation_2d(cov, |a, b| phi.derivative(a) * phi.derivative(b))
    })?;
    CovPair::new(q_h.max(f64::MIN_POSITIVE), p_h)
}

/// Propagates (q, p) through the residual-branch input map, returning
/// (q_tilde, p_tilde).
///
/// LayerNorm rescales to unit norm and preserves the cosine; erf has closed
/// forms; tanh goes through quadrature.
pub fn propagate_phi(cov: CovPair, phi: Nonlinearity) -> Result<CovPair> {
    phi.validate()?;
    match phi {
        Nonlinearity::LayerNorm => CovPair::new(1.0, cov.p() / cov.q()),
        Nonlinearity::Erf { alpha } => {
            let a2 = alpha * alpha;
            let denom = 1.0 + 2.0 * a2 * cov.q();
            let q_t = 2.0 / std::f64::consts::PI * (2.0 * a2 * cov.q() / denom).asin();
            let p_t = 2.0 / std::f64::consts::PI * (2.0 * a2 * cov.p() / denom).asin();
            CovPair::new(q_t, p_t)
        }
        Nonlinearity::Tanh { .. } => propagate_phi_quadrature(cov, phi),
    }
}

/// Propagates (q, p) through the derivative of the input map, returning
/// (q_hat, p_hat). LayerNorm gives (1/q, 1/q).
pub fn propagate_phi_prime(cov: CovPair, phi: Nonlinearity) -> Result<CovPair> {
    phi.validate()?;
    match phi {
        Nonlinearity::LayerNorm => {
            let inv = 1.0 / cov.q();
            CovPair::new(inv, inv)
        }
        Nonlinearity::Erf { alpha } => {
            let a2 = alpha * alpha;
            let q_h = 4.0 * a2 / (std::f64::consts::PI * (1.0 + 4.0 * a2 * cov.q()).sqrt());
            let base = 1.0 + 2.0 * a2 * cov.q();
            let p_h = 4.0 * a2
                / (std::f64::consts::PI
                    * (base * base - 4.0 * a2 * a2 * cov.p() * cov.p()).sqrt());
            CovPair::new(q_h, p_h)
        }
        Nonlinearity::Tanh { .. } => propagate_phi_prime_quadrature(cov, phi),
    }
}

/// Second moment of phi'(h) at variance q — the diagonal of
/// [`propagate_phi_prime`], exposed for the final-normalization factor.
pub fn phi_prime_second_moment(q: f64, phi: Nonlinearity) -> Result<f64> {
    Ok(propagate_phi_prime(CovPair::new(q, 0.0)?, phi)?.q())
}

/// Adaptive Simpson on [a, b] to absolute tolerance `tol`.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let simpson = |lo: f64, hi: f64| {
        let mid = 0.5 * (lo + hi);
        (hi - lo) / 6.0 * (f(lo) + 4.0 * f(mid) + f(hi))
    };
    let whole = simpson(a, b);
    let left = simpson(a, m);
    let right = simpson(m, b);
    let err = left + right - whole;
    if err.abs() <= 15.0 * tol || depth == 0 {
        left + right + err / 15.0
    } else {
        adaptive_simpson(f, a, m, tol / 2.0, depth - 1)
            + adaptive_simpson(f, m, b, tol / 2.0, depth - 1)
    }
}

/// The large-depth slope constant C_alpha = (1/sqrt(2 pi)) * integral of
/// phi'_alpha(h)^2 over the real line. Closed form for erf, adaptive
/// quadrature for tanh. Linear in alpha.
pub fn c_alpha(phi: Nonlinearity) -> Result<f64> {
    phi.validate()?;
    match phi {
        Nonlinearity::LayerNorm => {
            Err(Error::UnsupportedNonlinearity("LayerNorm has no C_alpha"))
        }
        Nonlinearity::Erf { alpha } => Ok(2.0 * alpha / std::f64::consts::PI),
        Nonlinearity::Tanh { alpha } => {
            // phi'(h)^2 = alpha^2 sech^4(alpha h); support is effectively
            // |alpha h| < 25 (sech^4 ~ e^{-100} beyond).
            let half_width = 25.0 / alpha;
            let f = |h: f64| phi.derivative(h).powi(2);
            let integral = adaptive_simpson(&f, -half_width, half_width, 1e-13, 48);
            Ok(integral / (2.0 * std::f64::consts::PI).sqrt())
        }
    }
}
