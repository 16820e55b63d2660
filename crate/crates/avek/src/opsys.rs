//! Block operator systems `F_i(x) = y_i, i = 1..n`.
//!
//! An [`Operator`] maps the common image space `X` into a per-block data
//! space `Y_i` and exposes its linearization and the adjoint of the
//! linearization with respect to the *weighted* inner products declared by
//! the spaces. [`BlockOperatorSystem`] bundles the blocks with their data and
//! noise levels and provides the residual and gradient-direction primitives
//! that every solver is built from, plus power-iteration norm estimation and
//! system rescaling.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::space::{Element, Space, Weighting};
use crate::{Error, Result};

/// A single sub-problem operator `F_i : X -> Y_i`.
///
/// `deriv_apply(at, h)` applies the linearization `F'(at)` to `h`, and
/// `adjoint_deriv_apply(at, w)` its adjoint with respect to the weighted
/// inner products of domain and range. Linear operators ignore `at`.
pub trait Operator: Send + Sync {
    fn domain(&self) -> &Arc<Space>;
    fn range(&self) -> &Arc<Space>;
    fn apply(&self, x: &Element) -> Result<Element>;
    fn deriv_apply(&self, at: &Element, h: &Element) -> Result<Element>;
    fn adjoint_deriv_apply(&self, at: &Element, w: &Element) -> Result<Element>;
    /// Declared linearity; linear blocks satisfy
    /// `apply(x) == deriv_apply(at, x)` for every `at`.
    fn is_linear(&self) -> bool;
    /// Twin used by power-iteration norm estimation. Operators whose
    /// `adjoint_deriv_apply` is only an approximate adjoint (so the
    /// composition is not self-adjoint and power iteration is unreliable)
    /// supply a variant with the exact adjoint here.
    fn norm_estimation_twin(&self) -> Option<Arc<dyn Operator>> {
        None
    }
}

/// An operator block together with its metadata.
#[derive(Clone)]
pub struct OperatorBlock {
    pub op: Arc<dyn Operator>,
    /// Estimate (or user override) of `sup ||F'(x)||` in the declared norms.
    pub norm_bound: f64,
    /// Tangential cone constant; 0 for linear blocks, must stay below 1/2.
    pub eta: f64,
}

impl OperatorBlock {
    pub fn new(op: Arc<dyn Operator>) -> Self {
        OperatorBlock {
            op,
            norm_bound: 0.0,
            eta: 0.0,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&eta) {
            return Err(Error::InvalidArgument(format!(
                "tangential cone constant must lie in [0, 1/2), got {eta}"
            )));
        }
        self.eta = eta;
        Ok(self)
    }

    /// Power-iteration estimate of the operator norm, linearized at zero.
    pub fn estimate_norm(&self, iters: usize, seed: u64) -> Result<f64> {
        let at = self.op.domain().zero();
        estimate_norm(self.op.as_ref(), &at, iters, seed)
    }
}

/// The system `F_i(x) = y_i^δ` with per-block noise levels `δ_i`.
pub struct BlockOperatorSystem {
    image_space: Arc<Space>,
    blocks: Vec<OperatorBlock>,
    data: Vec<Element>,
    noise_levels: Vec<f64>,
}

impl BlockOperatorSystem {
    /// Validates that blocks, data and noise levels are mutually consistent:
    /// equal length `n >= 1`, shared domain, `data[i]` in the range of block
    /// `i`, noise levels finite and nonnegative.
    pub fn new(
        blocks: Vec<OperatorBlock>,
        data: Vec<Element>,
        noise_levels: Vec<f64>,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("system needs at least one block".into()));
        }
        if blocks.len() != data.len() || blocks.len() != noise_levels.len() {
            return Err(Error::InvalidArgument(format!(
                "inconsistent system: {} blocks, {} data vectors, {} noise levels",
                blocks.len(),
                data.len(),
                noise_levels.len()
            )));
        }
        let image_space = Arc::clone(blocks[0].op.domain());
        for (i, block) in blocks.iter().enumerate() {
            if !block.op.domain().compatible(&image_space) {
                return Err(Error::BlockMismatch {
                    block: i,
                    expected: image_space.tag().to_string(),
                    found: block.op.domain().tag().to_string(),
                });
            }
            if !block.op.range().compatible(data[i].space()) {
                return Err(Error::BlockMismatch {
                    block: i,
                    expected: block.op.range().tag().to_string(),
                    found: data[i].space().tag().to_string(),
                });
            }
            if !(noise_levels[i].is_finite() && noise_levels[i] >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "noise level of block {i} must be finite and nonnegative"
                )));
            }
        }
        Ok(BlockOperatorSystem {
            image_space,
            blocks,
            data,
            noise_levels,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn image_space(&self) -> &Arc<Space> {
        &self.image_space
    }

    pub fn block(&self, i: usize) -> &OperatorBlock {
        &self.blocks[i]
    }

    pub fn blocks(&self) -> &[OperatorBlock] {
        &self.blocks
    }

    pub fn data(&self, i: usize) -> &Element {
        &self.data[i]
    }

    pub fn noise_level(&self, i: usize) -> f64 {
        self.noise_levels[i]
    }

    pub fn noise_levels(&self) -> &[f64] {
        &self.noise_levels
    }

    /// True if any block carries a positive noise level.
    pub fn is_noisy(&self) -> bool {
        self.noise_levels.iter().any(|&d| d > 0.0)
    }

    fn check_image(&self, x: &Element, i: usize) -> Result<()> {
        if x.space().compatible(&self.image_space) {
            Ok(())
        } else {
            Err(Error::BlockMismatch {
                block: i,
                expected: format!("{} (dim {})", self.image_space.tag(), self.image_space.dim()),
                found: format!("{} (dim {})", x.space().tag(), x.space().dim()),
            })
        }
    }

    /// `F_i(x) - y_i^δ`, in the data space `Y_i`.
    pub fn residual(&self, i: usize, x: &Element) -> Result<Element> {
        self.check_image(x, i)?;
        let mut r = self.blocks[i].op.apply(x)?;
        r.add_scaled(-1.0, &self.data[i]).map_err(|_| Error::BlockMismatch {
            block: i,
            expected: self.blocks[i].op.range().tag().to_string(),
            found: self.data[i].space().tag().to_string(),
        })?;
        Ok(r)
    }

    /// `F_i'(x)^* (F_i(x) - y_i^δ)`, the gradient direction of block `i`.
    pub fn gradient_step_direction(&self, i: usize, x: &Element) -> Result<Element> {
        let r = self.residual(i, x)?;
        self.blocks[i].op.adjoint_deriv_apply(x, &r)
    }

    /// Squared total residual `sum_i ||F_i(x) - y_i^δ||^2`.
    pub fn total_residual_norm_sq(&self, x: &Element) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.len() {
            total += self.residual(i, x)?.norm_sq();
        }
        Ok(total)
    }

    pub fn total_residual_norm(&self, x: &Element) -> Result<f64> {
        Ok(self.total_residual_norm_sq(x)?.sqrt())
    }

    /// Fill in `norm_bound` for every block by power iteration. Seeds are
    /// derived from `seed` per block, so the result is deterministic.
    pub fn estimate_norm_bounds(&mut self, iters: usize, seed: u64) -> Result<()> {
        for i in 0..self.blocks.len() {
            let est = self.blocks[i].estimate_norm(iters, seed.wrapping_add(i as u64))?;
            self.blocks[i].norm_bound = est;
        }
        Ok(())
    }

    /// Rescale every block and its data by `target / norm_bound`, so all
    /// rescaled blocks have norm close to `target` while the solution set of
    /// the system is unchanged. Noise levels scale along with the data.
    pub fn rescaled(&self, target: f64) -> Result<Self> {
        if !(target.is_finite() && target > 0.0) {
            return Err(Error::InvalidArgument(
                "rescale target must be positive and finite".into(),
            ));
        }
        let mut blocks = Vec::with_capacity(self.len());
        let mut data = Vec::with_capacity(self.len());
        let mut noise = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let nb = self.blocks[i].norm_bound;
            if !(nb.is_finite() && nb > 0.0) {
                return Err(Error::DegenerateBlock(i));
            }
            let factor = target / nb;
            blocks.push(OperatorBlock {
                op: Arc::new(ScaledOperator {
                    inner: Arc::clone(&self.blocks[i].op),
                    factor,
                }),
                norm_bound: target,
                eta: self.blocks[i].eta,
            });
            data.push(self.data[i].scaled(factor));
            noise.push(self.noise_levels[i] * factor);
        }
        BlockOperatorSystem::new(blocks, data, noise)
    }

    /// Replace the data and noise levels, keeping the operators (e.g. to swap
    /// exact data for noisy data).
    pub fn with_data(&self, data: Vec<Element>, noise_levels: Vec<f64>) -> Result<Self> {
        BlockOperatorSystem::new(self.blocks.clone(), data, noise_levels)
    }
}

/// `factor * F`, with data rescaled alongside by [`BlockOperatorSystem::rescaled`].
struct ScaledOperator {
    inner: Arc<dyn Operator>,
    factor: f64,
}

impl Operator for ScaledOperator {
    fn domain(&self) -> &Arc<Space> {
        self.inner.domain()
    }

    fn range(&self) -> &Arc<Space> {
        self.inner.range()
    }

    fn apply(&self, x: &Element) -> Result<Element> {
        Ok(self.inner.apply(x)?.scaled(self.factor))
    }

    fn deriv_apply(&self, at: &Element, h: &Element) -> Result<Element> {
        Ok(self.inner.deriv_apply(at, h)?.scaled(self.factor))
    }

    fn adjoint_deriv_apply(&self, at: &Element, w: &Element) -> Result<Element> {
        Ok(self.inner.adjoint_deriv_apply(at, w)?.scaled(self.factor))
    }

    fn is_linear(&self) -> bool {
        self.inner.is_linear()
    }

    fn norm_estimation_twin(&self) -> Option<Arc<dyn Operator>> {
        self.inner.norm_estimation_twin().map(|twin| {
            Arc::new(ScaledOperator {
                inner: twin,
                factor: self.factor,
            }) as Arc<dyn Operator>
        })
    }
}

/// Dense matrix operator between two (possibly weighted) spaces.
///
/// The adjoint respects the declared inner products: for weights `W_X`, `W_Y`
/// it applies `W_X^{-1} A^T W_Y`. Domain weights must be strictly positive.
pub struct DenseOperator {
    matrix: Vec<f64>, // row-major, rows x cols
    rows: usize,
    cols: usize,
    domain: Arc<Space>,
    range: Arc<Space>,
}

impl DenseOperator {
    pub fn new(matrix: Vec<f64>, domain: Arc<Space>, range: Arc<Space>) -> Result<Self> {
        let rows = range.dim();
        let cols = domain.dim();
        if matrix.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: matrix.len(),
                context: "dense operator matrix".into(),
            });
        }
        if let Weighting::PerSample(w) = domain.weighting() {
            if w.iter().any(|&w| w <= 0.0) {
                return Err(Error::InvalidArgument(
                    "dense operator domain weights must be strictly positive".into(),
                ));
            }
        }
        Ok(DenseOperator {
            matrix,
            rows,
            cols,
            domain,
            range,
        })
    }

    /// Convenience: matrix between plain Euclidean spaces.
    pub fn euclidean(
        matrix: Vec<f64>,
        rows: usize,
        cols: usize,
        domain_tag: crate::SpaceTag,
        range_tag: crate::SpaceTag,
    ) -> Result<Self> {
        Self::new(
            matrix,
            Space::euclidean(domain_tag, cols),
            Space::euclidean(range_tag, rows),
        )
    }

    /// Seeded Gaussian matrix, handy for randomized tests and probes.
    pub fn gaussian(domain: Arc<Space>, range: Arc<Space>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = (0..range.dim() * domain.dim())
            .map(|_| crate::rng::standard_normal(&mut rng))
            .collect();
        Self::new(matrix, domain, range)
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.cols + j]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl Operator for DenseOperator {
    fn domain(&self) -> &Arc<Space> {
        &self.domain
    }

    fn range(&self) -> &Arc<Space> {
        &self.range
    }

    fn apply(&self, x: &Element) -> Result<Element> {
        if !x.space().compatible(&self.domain) {
            return Err(Error::SpaceMismatch {
                expected: self.domain.tag().to_string(),
                found: x.space().tag().to_string(),
                context: "dense operator apply".into(),
            });
        }
        let xv = x.as_slice();
        let out = (0..self.rows)
            .map(|i| {
                let row = &self.matrix[i * self.cols..(i + 1) * self.cols];
                row.iter().zip(xv).map(|(a, b)| a * b).sum()
            })
            .collect();
        self.range.element(out)
    }

    fn deriv_apply(&self, _at: &Element, h: &Element) -> Result<Element> {
        self.apply(h)
    }

    fn adjoint_deriv_apply(&self, _at: &Element, w: &Element) -> Result<Element> {
        if !w.space().compatible(&self.range) {
            return Err(Error::SpaceMismatch {
                expected: self.range.tag().to_string(),
                found: w.space().tag().to_string(),
                context: "dense operator adjoint".into(),
            });
        }
        let wv = w.as_slice();
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let wy = self.range.weight(i) * wv[i];
            if wy == 0.0 {
                continue;
            }
            let row = &self.matrix[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * wy;
            }
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o /= self.domain.weight(j);
        }
        self.domain.element(out)
    }

    fn is_linear(&self) -> bool {
        true
    }
}

/// Power-iteration estimate of `||F'(at)||` in the declared weighted norms.
///
/// Runs `iters` applications of `F'(at)^* F'(at)` from a seeded random start
/// and returns the square root of the final Rayleigh quotient. The estimate
/// is deterministic given the seed, nondecreasing in `iters`, and never
/// exceeds the true norm (up to rounding). A zero operator yields 0.
pub fn estimate_norm(op: &dyn Operator, at: &Element, iters: usize, seed: u64) -> Result<f64> {
    if iters == 0 {
        return Err(Error::InvalidArgument("estimate_norm needs iters >= 1".into()));
    }
    if let Some(twin) = op.norm_estimation_twin() {
        return estimate_norm(twin.as_ref(), at, iters, seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = op.domain().random_normal(&mut rng);
    let vn = v.norm();
    if vn == 0.0 {
        // Zero-dimensional or fully weightless domain.
        return Ok(0.0);
    }
    v.scale(1.0 / vn);
    let mut rayleigh = 0.0;
    for _ in 0..iters {
        let w = op.deriv_apply(at, &v)?;
        rayleigh = w.norm_sq(); // <v, A*A v> with ||v|| = 1
        let mut next = op.adjoint_deriv_apply(at, &w)?;
        let nn = next.norm();
        if nn == 0.0 {
            break;
        }
        next.scale(1.0 / nn);
        v = next;
    }
    Ok(rayleigh.sqrt())
}

/// Maximum relative deviation `|<F h, w> - <h, F* w>| / (||h|| ||w||)` over
/// seeded random probe pairs; certifies the adjoint against the declared
/// inner products.
pub fn adjoint_consistency(
    op: &dyn Operator,
    at: &Element,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..probes {
        let h = op.domain().random_normal(&mut rng);
        let w = op.range().random_normal(&mut rng);
        let lhs = op.deriv_apply(at, &h)?.inner(&w)?;
        let rhs = h.inner(&op.adjoint_deriv_apply(at, &w)?)?;
        let scale = h.norm() * w.norm();
        if scale > 0.0 {
            worst = worst.max((lhs - rhs).abs() / scale);
        }
    }
    Ok(worst)
}

/// Maximum relative linearity defect
/// `||F(a x + b z) - a F(x) - b F(z)|| / (|a| ||F(x)|| + |b| ||F(z)||)`
/// over seeded random probes. Meaningful for declared-linear operators.
pub fn linearity_defect(op: &dyn Operator, probes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..probes {
        let x = op.domain().random_normal(&mut rng);
        let z = op.domain().random_normal(&mut rng);
        let a = 2.0 * crate::rng::standard_normal(&mut rng);
        let b = 2.0 * crate::rng::standard_normal(&mut rng);
        let mut combo = x.scaled(a);
        combo.add_scaled(b, &z)?;
        let lhs = op.apply(&combo)?;
        let fx = op.apply(&x)?;
        let fz = op.apply(&z)?;
        let mut rhs = fx.scaled(a);
        rhs.add_scaled(b, &fz)?;
        let scale = a.abs() * fx.norm() + b.abs() * fz.norm();
        if scale > 0.0 {
            worst = worst.max(lhs.sub(&rhs)?.norm() / scale);
        }
    }
    Ok(worst)
}
