//! Truncated formal power series and sequences in an inner-product space.
//!
//! All series here are finite truncations with explicit length bookkeeping.
//! [`cauchy_product`] and [`reciprocal`] implement the coefficient algebra,
//! [`convolve`] extends it to vector-valued sequences, and
//! [`deconv_kernel`] produces the triangular weight pattern
//! `(n, n-1, ..., 1)` whose reciprocal is summable — the mechanism that makes
//! consecutive-iterate differences of the averaged Kaczmarz iteration vanish.
//! [`avek_difference_probe`] runs the corresponding numeric diagnostics on a
//! recorded iterate sequence.

use num_complex::Complex64;

use crate::space::Element;
use crate::{Error, Result};

/// Finite truncation `a_0, a_1, ..., a_m` of a scalar formal power series.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarSeries {
    coeffs: Vec<f64>,
}

impl ScalarSeries {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::InvalidArgument("series needs at least one coefficient".into()));
        }
        if !coeffs.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("scalar series coefficients".into()));
        }
        Ok(ScalarSeries { coeffs })
    }

    /// The Cauchy-product unit `(1, 0, ..., 0)` with `m + 1` coefficients.
    pub fn unit(m: usize) -> Self {
        let mut coeffs = vec![0.0; m + 1];
        coeffs[0] = 1.0;
        ScalarSeries { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient `a_k`, zero beyond the truncation.
    pub fn coeff(&self, k: usize) -> f64 {
        self.coeffs.get(k).copied().unwrap_or(0.0)
    }

    /// Truncation order (highest stored index).
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_invertible(&self) -> bool {
        self.coeffs[0] != 0.0
    }
}

/// Truncated Cauchy product `(a * b)_k = sum_{j=0}^k a_j b_{k-j}` for
/// `k = 0..=m`; coefficients past either truncation count as zero.
pub fn cauchy_product(a: &ScalarSeries, b: &ScalarSeries, m: usize) -> ScalarSeries {
    let mut out = vec![0.0; m + 1];
    for (k, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for j in 0..=k {
            s += a.coeff(j) * b.coeff(k - j);
        }
        *o = s;
    }
    ScalarSeries { coeffs: out }
}

/// Reciprocal series `b` with `a * b = (1, 0, ...)` up to order `m`, via the
/// recursion `b_0 = 1/a_0`, `b_k = -(1/a_0) sum_{j<k} b_j a_{k-j}`.
pub fn reciprocal(a: &ScalarSeries, m: usize) -> Result<ScalarSeries> {
    if !a.is_invertible() {
        return Err(Error::NotInvertible);
    }
    let a0 = a.coeff(0);
    let mut b = vec![0.0; m + 1];
    b[0] = 1.0 / a0;
    for k in 1..=m {
        let mut s = 0.0;
        for j in 0..k {
            s += b[j] * a.coeff(k - j);
        }
        b[k] = -s / a0;
    }
    Ok(ScalarSeries { coeffs: b })
}

/// A sequence `x_0, ..., x_m` of vectors in one common space.
#[derive(Clone, Debug)]
pub struct VectorSequence {
    items: Vec<Element>,
}

impl VectorSequence {
    pub fn new(items: Vec<Element>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("vector sequence needs at least one item".into()));
        }
        for item in &items[1..] {
            if !item.space().compatible(items[0].space()) {
                return Err(Error::SpaceMismatch {
                    expected: items[0].space().tag().to_string(),
                    found: item.space().tag().to_string(),
                    context: "vector sequence".into(),
                });
            }
        }
        Ok(VectorSequence { items })
    }

    pub fn items(&self) -> &[Element] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn term(&self, k: usize) -> Option<&Element> {
        self.items.get(k)
    }
}

/// Truncated convolution `(x * a)_k = sum_{j=0}^k x_j a_{k-j}`, `k = 0..=m`.
pub fn convolve(x: &VectorSequence, a: &ScalarSeries, m: usize) -> Result<VectorSequence> {
    let space = x.items[0].space().clone();
    let mut out = Vec::with_capacity(m + 1);
    for k in 0..=m {
        let mut acc = space.zero();
        for j in 0..=k {
            if let Some(xj) = x.term(j) {
                let c = a.coeff(k - j);
                if c != 0.0 {
                    acc.add_scaled(c, xj)?;
                }
            }
        }
        out.push(acc);
    }
    VectorSequence::new(out)
}

/// The triangular deconvolution kernel `(n, n-1, ..., 1)` of length `n`.
pub fn deconv_kernel(n: usize) -> Result<ScalarSeries> {
    if n == 0 {
        return Err(Error::InvalidArgument("deconvolution kernel needs n >= 1".into()));
    }
    ScalarSeries::new((0..n).map(|j| (n - j) as f64).collect())
}

/// Roots of the kernel polynomial `p(z) = n + (n-1) z + ... + z^{n-1}`,
/// computed by Durand-Kerner with a residual certificate
/// `|p(root)| < 1e-9 * max|coeff|`. Summability of the kernel's reciprocal
/// holds exactly when all moduli exceed 1, which callers assert numerically.
pub fn deconv_kernel_roots(n: usize) -> Result<Vec<Complex64>> {
    let kernel = deconv_kernel(n)?;
    polynomial_roots(kernel.coeffs())
}

/// All complex roots of `c_0 + c_1 z + ... + c_d z^d` (leading coefficient
/// nonzero) by the Durand-Kerner iteration, with a residual check on every
/// root. Degree-0 polynomials have no roots.
pub fn polynomial_roots(coeffs: &[f64]) -> Result<Vec<Complex64>> {
    let d = coeffs.len() - 1;
    if d == 0 {
        return Ok(Vec::new());
    }
    let lead = coeffs[d];
    if lead == 0.0 {
        return Err(Error::InvalidArgument("leading coefficient must be nonzero".into()));
    }
    let monic: Vec<f64> = coeffs.iter().map(|c| c / lead).collect();
    let eval = |z: Complex64| -> Complex64 {
        // Horner on the monic polynomial.
        let mut p = Complex64::new(1.0, 0.0);
        for k in (0..d).rev() {
            p = p * z + monic[k];
        }
        p
    };

    // Seed on a circle comfortably enclosing all roots (Cauchy bound).
    let bound = 1.0 + monic[..d].iter().map(|c| c.abs()).fold(0.0, f64::max);
    let mut roots: Vec<Complex64> = (0..d)
        .map(|j| {
            let angle = std::f64::consts::TAU * (j as f64 + 0.25) / d as f64;
            bound * Complex64::new(angle.cos(), angle.sin())
        })
        .collect();

    for _ in 0..500 {
        let mut largest = 0.0_f64;
        for j in 0..d {
            let mut denom = Complex64::new(1.0, 0.0);
            for m in 0..d {
                if m != j {
                    denom *= roots[j] - roots[m];
                }
            }
            if denom.norm() == 0.0 {
                // Collided seeds; nudge deterministically.
                roots[j] += Complex64::new(1e-8, 1e-8);
                continue;
            }
            let delta = eval(roots[j]) / denom;
            roots[j] -= delta;
            largest = largest.max(delta.norm());
        }
        if largest < 1e-14 * bound {
            break;
        }
    }

    let scale = coeffs.iter().map(|c| c.abs()).fold(0.0, f64::max);
    for root in &roots {
        let residual = eval(*root).norm() * lead.abs();
        if !(residual < 1e-9 * scale) {
            return Err(Error::InvalidArgument(format!(
                "root finder failed residual check: |p(z)| = {residual:.3e}"
            )));
        }
    }
    Ok(roots)
}

/// Diagnostics of the consecutive-difference decay of an iterate sequence.
#[derive(Clone, Debug)]
pub struct DifferenceProbe {
    /// Largest deviation in the telescoping identity
    /// `z_{k+1} - z_k = x_{k+1} - (1/n) sum_{l=k-n+1}^{k} x_l`.
    pub telescoping_deviation: f64,
    /// Mean of `||sum_{j=1}^n j d_{k-n+j}||` over the first n valid indices.
    pub weighted_head: f64,
    /// Same mean over the last n valid indices.
    pub weighted_tail: f64,
    /// Mean of `||d_k||` over the first n differences.
    pub raw_head: f64,
    /// Mean of `||d_k||` over the last n differences.
    pub raw_tail: f64,
}

impl DifferenceProbe {
    /// Both the weighted-sum tail and the raw tail decayed below the given
    /// fraction of their initial levels.
    pub fn decayed_below(&self, fraction: f64) -> bool {
        self.weighted_tail <= fraction * self.weighted_head
            && self.raw_tail <= fraction * self.raw_head
    }
}

/// Probe the differences `d_k = x_{k+1} - x_k` of an iterate sequence:
/// checks the telescoping identity of the window-weighted means to 1e-12
/// accuracy internally (reporting the worst deviation) and summarizes the
/// decay of both `||d_k||` and the triangular weighted sums
/// `||sum_{j=1}^n j d_{k-n+j}||`. Requires more than `2n` iterates.
pub fn avek_difference_probe(iterates: &[Element], n: usize) -> Result<DifferenceProbe> {
    if n == 0 {
        return Err(Error::InvalidArgument("window length n must be positive".into()));
    }
    let m = iterates.len();
    if m <= 2 * n {
        return Err(Error::InvalidArgument(format!(
            "difference probe needs more than 2n = {} iterates, got {m}",
            2 * n
        )));
    }

    // d_k = x_{k+1} - x_k (0-based index k = 0..m-2)
    let mut diffs = Vec::with_capacity(m - 1);
    for w in iterates.windows(2) {
        diffs.push(w[1].sub(&w[0])?);
    }

    // z_k = (1/n) sum_{j=1}^n j x_{k-n+j}, defined for 0-based k >= n-1.
    let z = |k: usize| -> Result<Element> {
        let mut acc = iterates[0].space().zero();
        for j in 1..=n {
            acc.add_scaled(j as f64 / n as f64, &iterates[k + j - n])?;
        }
        Ok(acc)
    };

    let mut telescoping = 0.0_f64;
    for k in (n - 1)..(m - 1) {
        let lhs = z(k + 1)?.sub(&z(k)?)?;
        let mut rhs = iterates[k + 1].clone();
        for l in (k + 1 - n)..=k {
            rhs.add_scaled(-1.0 / n as f64, &iterates[l])?;
        }
        let scale = rhs.norm().max(iterates[k + 1].norm()).max(1.0);
        telescoping = telescoping.max(lhs.sub(&rhs)?.norm() / scale);
    }

    // Weighted sums w_k = ||sum_{j=1}^n j d_{k-n+j}||, 0-based k >= n-1.
    let mut weighted = Vec::new();
    for k in (n - 1)..diffs.len() {
        let mut acc = iterates[0].space().zero();
        for j in 1..=n {
            acc.add_scaled(j as f64, &diffs[k + j - n])?;
        }
        weighted.push(acc.norm());
    }
    let raw: Vec<f64> = diffs.iter().map(|d| d.norm()).collect();

    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let head = |s: &[f64]| mean(&s[..n.min(s.len())]);
    let tail = |s: &[f64]| mean(&s[s.len() - n.min(s.len())..]);

    Ok(DifferenceProbe {
        telescoping_deviation: telescoping,
        weighted_head: head(&weighted),
        weighted_tail: tail(&weighted),
        raw_head: head(&raw),
        raw_tail: tail(&raw),
    })
}
