//! Gaussian cubature: Gauss–Hermite tensor grids and the symmetric
//! fifth-order (UT5) rule, both normalised to the unit Gaussian.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_factor;

/// Maximum number of points a Gauss–Hermite tensor grid may have.
pub const GH_POINT_BUDGET: usize = 250_000;

/// Which rule to build for a given integral dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CubatureSpec {
    /// Gauss–Hermite with the given order per axis.
    GaussHermite(usize),
    Ut5,
}

impl CubatureSpec {
    pub fn build(&self, dim: usize) -> Result<CubatureRule> {
        match *self {
            CubatureSpec::GaussHermite(order) => gauss_hermite(dim, order),
            CubatureSpec::Ut5 => Ok(ut5(dim)),
        }
    }
}

impl fmt::Display for CubatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CubatureSpec::GaussHermite(n) => write!(f, "gh{n}"),
            CubatureSpec::Ut5 => write!(f, "ut5"),
        }
    }
}

impl FromStr for CubatureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "ut5" {
            return Ok(CubatureSpec::Ut5);
        }
        if let Some(n) = lower.strip_prefix("gh") {
            let order: usize = n
                .parse()
                .map_err(|_| Error::Config(format!("bad Gauss–Hermite order in `{s}`")))?;
            if order == 0 {
                return Err(Error::Config("Gauss–Hermite order must be >= 1".into()));
            }
            return Ok(CubatureSpec::GaussHermite(order));
        }
        Err(Error::Config(format!("unknown cubature `{s}` (expected ghN or ut5)")))
    }
}

impl TryFrom<String> for CubatureSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CubatureSpec> for String {
    fn from(c: CubatureSpec) -> String {
        c.to_string()
    }
}

/// Points and weights for `E[g(x)]`, `x ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CubatureRule {
    /// One point per column.
    pub points: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub spec: CubatureSpec,
}

impl CubatureRule {
    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Points mapped through `mean + factor · ξ`.
    pub fn transformed_points(&self, mean: &DVector<f64>, factor: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pts = factor * &self.points;
        for mut c in pts.column_iter_mut() {
            c += mean;
        }
        pts
    }
}

/// One-dimensional probabilists' Gauss–Hermite nodes and weights (weights
/// sum to one).
pub fn gauss_hermite_1d(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1, "Gauss–Hermite order must be >= 1");
    if order == 1 {
        return (vec![0.0], vec![1.0]);
    }
    // Golub–Welsch: eigenvalues of the Jacobi matrix of the He_k recurrence
    let mut jac = DMatrix::<f64>::zeros(order, order);
    for k in 1..order {
        let b = (k as f64).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Newton polish on the normalised polynomial, then weights from
    // w = 1 / (n ψ_{n-1}(x)²), ψ_k = He_k / √(k!).
    let n = order;
    let mut weights = vec![0.0; n];
    for (x, w) in nodes.iter_mut().zip(weights.iter_mut()) {
        for _ in 0..3 {
            let (pn, pn1) = normalised_hermite(n, *x);
            let step = pn / ((n as f64).sqrt() * pn1);
            *x -= step;
            if step.abs() < 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
        let (_, pn1) = normalised_hermite(n, *x);
        *w = 1.0 / (n as f64 * pn1 * pn1);
    }
    // enforce exact symmetry
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
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (nodes, weights)
}

/// `(ψ_n(x), ψ_{n-1}(x))` for the orthonormal probabilists' Hermite basis.
fn normalised_hermite(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..n {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// Tensor-product Gauss–Hermite rule with `order^dim` points.
pub fn gauss_hermite(dim: usize, order: usize) -> Result<CubatureRule> {
    gauss_hermite_with_budget(dim, order, GH_POINT_BUDGET)
}

pub fn gauss_hermite_with_budget(dim: usize, order: usize, budget: usize) -> Result<CubatureRule> {
    if dim == 0 || order == 0 {
        return Err(Error::Dimension(format!(
            "Gauss–Hermite needs dim >= 1 and order >= 1, got dim={dim} order={order}"
        )));
    }
    let points_f = (order as f64).powi(dim as i32);
    if points_f > budget as f64 {
        return Err(Error::CubatureBudget {
            order,
            dim,
            points: points_f,
            budget,
        });
    }
    let count = points_f as usize;
    let (x1, w1) = gauss_hermite_1d(order);
    let mut points = DMatrix::zeros(dim, count);
    let mut weights = vec![1.0; count];
    for idx in 0..count {
        let mut rem = idx;
        for d in 0..dim {
            let i = rem % order;
            rem /= order;
            points[(d, idx)] = x1[i];
            weights[idx] *= w1[i];
        }
    }
    Ok(CubatureRule {
        points,
        weights,
        spec: CubatureSpec::GaussHermite(order),
    })
}

/// Symmetric degree-5 rule with `2 dim² + 1` points.
pub fn ut5(dim: usize) -> CubatureRule {
    assert!(dim >= 1, "UT5 dimension must be >= 1");
    let n = dim as f64;
    let count = 2 * dim * dim + 1;
    let mut points = DMatrix::zeros(dim, count);
    let mut weights = Vec::with_capacity(count);
    weights.push(2.0 / (n + 2.0));
    let mut col = 1;
    let axial = (n + 2.0).sqrt();
    let w_axial = (4.0 - n) / (2.0 * (n + 2.0) * (n + 2.0));
    for i in 0..dim {
        for s in [1.0, -1.0] {
            points[(i, col)] = s * axial;
            weights.push(w_axial);
            col += 1;
        }
    }
    let diag = ((n + 2.0) / 2.0).sqrt();
    let w_diag = 1.0 / ((n + 2.0) * (n + 2.0));
    for i in 0..dim {
        for j in i + 1..dim {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                points[(i, col)] = si * diag;
                points[(j, col)] = sj * diag;
                weights.push(w_diag);
                col += 1;
            }
        }
    }
    debug_assert_eq!(col, count);
    CubatureRule {
        points,
        weights,
        spec: CubatureSpec::Ut5,
    }
}

/// `E[g(f)]` for `f ~ N(mean, cov)`.
pub fn gaussian_expectation<G>(rule: &CubatureRule, g: G, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<DVector<f64>>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let factor = cholesky_factor(cov)?;
    Ok(gaussian_expectation_with_factor(rule, g, mean, &factor))
}

/// As [`gaussian_expectation`] with any square root `factor` of the
/// covariance (`factor · factorᵀ = cov`).
pub fn gaussian_expectation_with_factor<G>(rule: &CubatureRule, g: G, mean: &DVector<f64>, factor: &DMatrix<f64>) -> DVector<f64>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    assert_eq!(mean.len(), rule.dim(), "mean dimension does not match rule");
    let pts = rule.transformed_points(mean, factor);
    let mut acc: Option<DVector<f64>> = None;
    for (j, w) in rule.weights.iter().enumerate() {
        let v = g(&pts.column(j).clone_owned()) * *w;
        acc = Some(match acc {
            Some(a) => a + v,
            None => v,
        });
    }
    acc.expect("rule has at least one point")
}
