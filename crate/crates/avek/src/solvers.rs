//! Iteration families for block operator systems.
//!
//! Five methods share one driver: [`run`]. The simultaneous Landweber update
//! uses all blocks per step; the row-action (Kaczmarz) update visits one
//! block at a time with a residual-threshold skip rule; the averaged Kaczmarz
//! iteration keeps the last `n` auxiliary iterates and averages them; the
//! incremental aggregated gradient (IAG) method averages the last `n`
//! gradients instead; and the EMR variants replace the fixed step size with
//! the minimizer of a quadratic error surrogate. A cycle is `n` consecutive
//! updates for the cyclic methods and a single update for Landweber-type
//! methods, which makes per-cycle costs comparable across the family.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::opsys::BlockOperatorSystem;
use crate::space::Element;
use crate::{Error, Result};

/// The iteration family to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Landweber,
    Kaczmarz,
    Avek,
    Iag,
    /// Landweber with error-minimizing relaxation; `exponent` is the power
    /// `s` of `M*M` in the minimized quadratic (0 or 1).
    LandweberEmr { exponent: u8 },
    /// Kaczmarz with per-block error-minimizing relaxation.
    KaczmarzEmr { exponent: u8 },
}

impl Method {
    /// Cyclic methods visit one block per update.
    pub fn is_cyclic(&self) -> bool {
        matches!(
            self,
            Method::Kaczmarz | Method::Avek | Method::Iag | Method::KaczmarzEmr { .. }
        )
    }

    /// Updates that make up one cycle (the unit of cost comparison).
    pub fn updates_per_cycle(&self, n: usize) -> usize {
        if self.is_cyclic() {
            n
        } else {
            1
        }
    }

    /// Methods governed by the residual-threshold skip rule.
    pub fn uses_skip_rule(&self) -> bool {
        matches!(self, Method::Kaczmarz | Method::Avek | Method::KaczmarzEmr { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Landweber => "landweber",
            Method::Kaczmarz => "kaczmarz",
            Method::Avek => "avek",
            Method::Iag => "iag",
            Method::LandweberEmr { exponent: 0 } => "landweber-emr0",
            Method::LandweberEmr { .. } => "landweber-emr1",
            Method::KaczmarzEmr { exponent: 0 } => "kaczmarz-emr0",
            Method::KaczmarzEmr { .. } => "kaczmarz-emr1",
        }
    }
}

/// Everything a single run needs besides the system itself.
#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub method: Method,
    /// Constant step size; ignored by the EMR methods.
    pub step_size: f64,
    /// Averaging weights, newest iterate first. Empty means equal weights.
    pub weights: Vec<f64>,
    /// Skip thresholds. Empty means 3.0 for every block; a single entry is
    /// broadcast; otherwise one entry per block.
    pub tau: Vec<f64>,
    pub max_cycles: usize,
    /// Shuffle the block visiting order once per cycle (cyclic methods).
    pub rearrange: bool,
    pub seed: u64,
    /// Initial iterate(s): empty for a zero start, one element, or `n`
    /// elements for the averaged method.
    pub init: Vec<Element>,
    /// Stop early via the discrepancy rules when the data are noisy.
    pub stop_on_discrepancy: bool,
    /// Emit a warning when `step * norm_bound^2 > 1` for some block.
    pub validate_step_size: bool,
    /// Record the full iterate sequence (x_1, x_2, ...) in the outcome.
    pub record_iterates: bool,
    /// Cycles at which to snapshot the iterate.
    pub snapshot_cycles: Vec<usize>,
}

impl SolverConfig {
    pub fn new(method: Method) -> Self {
        SolverConfig {
            method,
            step_size: 1.0,
            weights: Vec::new(),
            tau: Vec::new(),
            max_cycles: 100,
            rearrange: false,
            seed: 0,
            init: Vec::new(),
            stop_on_discrepancy: true,
            validate_step_size: true,
            record_iterates: false,
            snapshot_cycles: Vec::new(),
        }
    }
}

/// Default skip threshold. Any value above 2 is admissible for linear blocks;
/// 3 leaves a comfortable margin.
pub const DEFAULT_TAU: f64 = 3.0;

/// Growth factor of the cycle residual over its initial value at which a run
/// is aborted as divergent. Stable runs in this workload peak below ~20x
/// their initial residual (large-step averaged runs transiently overshoot
/// before settling), while overstepped runs compound by >= 1.6x per cycle,
/// so 1e4 separates the regimes by two orders of magnitude on either side
/// and catches slow geometric divergence within a 20-cycle budget.
pub const DIVERGENCE_FACTOR: f64 = 1e4;

fn resolved_tau(config: &SolverConfig, n: usize) -> Result<Vec<f64>> {
    let tau = match config.tau.len() {
        0 => vec![DEFAULT_TAU; n],
        1 => vec![config.tau[0]; n],
        len if len == n => config.tau.clone(),
        len => {
            return Err(Error::InvalidArgument(format!(
                "tau must have 0, 1 or {n} entries, got {len}"
            )))
        }
    };
    if tau.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidArgument(
            "skip thresholds must be finite and nonnegative".into(),
        ));
    }
    Ok(tau)
}

fn resolved_weights(config: &SolverConfig, n: usize) -> Result<Vec<f64>> {
    if config.weights.is_empty() {
        return Ok(vec![1.0 / n as f64; n]);
    }
    let w = &config.weights;
    if w.len() != n {
        return Err(Error::InvalidArgument(format!(
            "weights must have {n} entries, got {}",
            w.len()
        )));
    }
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "weights must sum to 1 (within 1e-12), got {sum}"
        )));
    }
    Ok(w.clone())
}

/// Update flag of the residual-threshold rule: `true` means the update is
/// performed, `false` means it is skipped. With a zero noise level the update
/// is always performed; the comparison is inclusive (`>=`).
pub fn skip_flag(
    sys: &BlockOperatorSystem,
    i: usize,
    x: &Element,
    tau_i: f64,
) -> Result<bool> {
    let rn = sys.residual(i, x)?.norm();
    Ok(update_active(rn, tau_i, sys.noise_level(i)))
}

#[inline]
fn update_active(residual_norm: f64, tau_i: f64, delta_i: f64) -> bool {
    delta_i <= 0.0 || residual_norm >= tau_i * delta_i
}

/// One simultaneous (Landweber) step `x - (s/n) sum_i F_i'(x)*(F_i(x) - y_i)`.
pub fn landweber_step(sys: &BlockOperatorSystem, x: &Element, s: f64) -> Result<Element> {
    let n = sys.len() as f64;
    let mut out = x.clone();
    for i in 0..sys.len() {
        let g = sys.gradient_step_direction(i, x)?;
        out.add_scaled(-s / n, &g)?;
    }
    Ok(out)
}

/// Zero-based block visited by the 1-based update index `k` in plain cyclic
/// order.
pub fn cyclic_block(k: usize, n: usize) -> usize {
    (k - 1) % n
}

/// One row-action update on block `i`: residual, skip decision, and (when
/// active) the scaled gradient step. Returns the new iterate, the update
/// flag and the block residual norm.
pub fn row_action_update(
    sys: &BlockOperatorSystem,
    i: usize,
    x: &Element,
    s: f64,
    tau_i: f64,
) -> Result<(Element, bool, f64)> {
    let r = sys.residual(i, x)?;
    let rn = r.norm();
    let active = update_active(rn, tau_i, sys.noise_level(i));
    let mut out = x.clone();
    if active {
        let g = sys.block(i).op.adjoint_deriv_apply(x, &r)?;
        out.add_scaled(-s, &g)?;
    }
    Ok((out, active, rn))
}

/// One Kaczmarz step at 1-based update index `k` (cyclic block order).
pub fn kaczmarz_step(
    sys: &BlockOperatorSystem,
    x: &Element,
    k: usize,
    s: f64,
    tau: &[f64],
) -> Result<Element> {
    let i = cyclic_block(k, sys.len());
    Ok(row_action_update(sys, i, x, s, tau[i])?.0)
}

/// Per-update bookkeeping returned by the stateful steppers.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub block: usize,
    pub active: bool,
    pub residual_norm: f64,
    pub step: f64,
}

/// State of the averaged Kaczmarz iteration: the current iterate, the ring
/// of the last `n` auxiliary iterates, and the update flags of the last `n`
/// updates.
///
/// The first `n` updates evaluate at the user-provided iterates `x_1..x_n`
/// and only fill the ring; the first averaged iterate is produced by update
/// `n`. With equal weights the iterate advances via the rolling form
/// `x_{k+1} = x_k + (xi_k - xi_{k-n}) / n`, which agrees with the explicit
/// weighted average to high accuracy (checked in debug builds).
pub struct AvekState {
    n: usize,
    weights: Vec<f64>,
    rolling: bool,
    x: Element,
    pending: VecDeque<Element>,
    ring: VecDeque<Element>,
    flags: VecDeque<bool>,
    updates: usize,
}

impl AvekState {
    /// `inits` are the iterates `x_1..x_n`; `weights` defaults to equal.
    pub fn new(inits: Vec<Element>, weights: Option<Vec<f64>>) -> Result<Self> {
        let n = inits.len();
        if n == 0 {
            return Err(Error::InvalidArgument("averaged state needs n >= 1 initial iterates".into()));
        }
        for e in &inits[1..] {
            if !e.space().compatible(inits[0].space()) {
                return Err(Error::SpaceMismatch {
                    expected: inits[0].space().tag().to_string(),
                    found: e.space().tag().to_string(),
                    context: "averaged iteration initial values".into(),
                });
            }
        }
        let weights = match weights {
            None => vec![1.0 / n as f64; n],
            Some(w) => {
                if w.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "weights must have {n} entries, got {}",
                        w.len()
                    )));
                }
                let sum: f64 = w.iter().sum();
                if w.iter().any(|x| *x < 0.0) || (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(
                        "weights must be nonnegative and sum to 1".into(),
                    ));
                }
                w
            }
        };
        let rolling = n > 1
            && weights
                .iter()
                .all(|w| (w - 1.0 / n as f64).abs() <= 1e-14 / n as f64);
        let mut pending: VecDeque<Element> = inits.into();
        let x = pending.pop_front().expect("n >= 1");
        Ok(AvekState {
            n,
            weights,
            rolling,
            x,
            pending,
            ring: VecDeque::with_capacity(n + 1),
            flags: VecDeque::with_capacity(n + 1),
            updates: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// The iterate the next update will be evaluated at.
    pub fn current(&self) -> &Element {
        &self.x
    }

    pub fn into_current(self) -> Element {
        self.x
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Auxiliary iterates currently in the ring, oldest first.
    pub fn ring(&self) -> impl Iterator<Item = &Element> {
        self.ring.iter()
    }

    /// Update flags of the most recent (up to `n`) updates, oldest first.
    pub fn recent_flags(&self) -> impl Iterator<Item = bool> + '_ {
        self.flags.iter().copied()
    }

    /// The explicit weighted average of the ring. With a full ring this is
    /// the next iterate of the non-rolling formulation.
    pub fn explicit_average(&self) -> Result<Element> {
        let mut acc = self.x.space().zero();
        let len = self.ring.len();
        for (j, xi) in self.ring.iter().enumerate() {
            // ring[j] is the (len - j)-th newest entry; weight index is
            // newest-first.
            acc.add_scaled(self.weights[len - 1 - j], xi)?;
        }
        Ok(acc)
    }

    /// Perform the update for block `block` at the current iterate.
    pub fn step(
        &mut self,
        sys: &BlockOperatorSystem,
        block: usize,
        s: f64,
        tau_i: f64,
    ) -> Result<StepInfo> {
        let r = sys.residual(block, &self.x)?;
        let rn = r.norm();
        let active = update_active(rn, tau_i, sys.noise_level(block));
        let xi = if active {
            let g = sys.block(block).op.adjoint_deriv_apply(&self.x, &r)?;
            let mut xi = self.x.clone();
            xi.add_scaled(-s, &g)?;
            xi
        } else {
            self.x.clone()
        };
        self.ring.push_back(xi);
        self.flags.push_back(active);
        let oldest = if self.ring.len() > self.n {
            self.ring.pop_front()
        } else {
            None
        };
        if self.flags.len() > self.n {
            self.flags.pop_front();
        }
        self.updates += 1;
        let k = self.updates;

        if k < self.n {
            self.x = self.pending.pop_front().expect("pending initial iterates");
        } else if k == self.n || !self.rolling {
            self.x = self.explicit_average()?;
        } else {
            let oldest = oldest.expect("ring was full for k > n");
            let newest = self.ring.back().expect("ring is nonempty");
            let inv_n = 1.0 / self.n as f64;
            let mut next = self.x.clone();
            next.add_scaled(inv_n, newest)?;
            next.add_scaled(-inv_n, &oldest)?;
            #[cfg(debug_assertions)]
            {
                let explicit = self.explicit_average()?;
                let dev = next.sub(&explicit)?.norm();
                let scale = explicit.norm().max(1.0);
                debug_assert!(
                    dev <= 1e-12 * scale,
                    "rolling update deviates from explicit average: {dev:e}"
                );
            }
            self.x = next;
        }
        Ok(StepInfo {
            block,
            active,
            residual_norm: rn,
            step: if active { s } else { 0.0 },
        })
    }
}

/// State of the incremental aggregated gradient method: the iterate plus a
/// ring of the last `n` gradient directions and their rolling sum.
pub struct IagState {
    n: usize,
    x: Element,
    ring: VecDeque<Element>,
    aggregate: Element,
    updates: usize,
}

impl IagState {
    pub fn new(x0: Element, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("aggregated state needs n >= 1".into()));
        }
        let aggregate = x0.space().zero();
        Ok(IagState {
            n,
            x: x0,
            ring: VecDeque::with_capacity(n + 1),
            aggregate,
            updates: 0,
        })
    }

    pub fn current(&self) -> &Element {
        &self.x
    }

    pub fn into_current(self) -> Element {
        self.x
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Recompute the rolling gradient sum from the ring, cancelling any
    /// accumulation drift. The driver calls this once per cycle.
    pub fn refresh_aggregate(&mut self) -> Result<()> {
        let mut acc = self.x.space().zero();
        for g in &self.ring {
            acc.add_scaled(1.0, g)?;
        }
        self.aggregate = acc;
        Ok(())
    }

    pub fn step(&mut self, sys: &BlockOperatorSystem, block: usize, s: f64) -> Result<StepInfo> {
        let r = sys.residual(block, &self.x)?;
        let rn = r.norm();
        let g = sys.block(block).op.adjoint_deriv_apply(&self.x, &r)?;
        if self.ring.len() == self.n {
            let oldest = self.ring.pop_front().expect("ring full");
            self.aggregate.add_scaled(-1.0, &oldest)?;
        }
        self.aggregate.add_scaled(1.0, &g)?;
        self.ring.push_back(g);
        self.updates += 1;
        self.x.add_scaled(-s / self.n as f64, &self.aggregate)?;
        Ok(StepInfo {
            block,
            active: true,
            residual_norm: rn,
            step: s,
        })
    }
}

/// Which operator the EMR quadratic is built from.
#[derive(Clone, Copy, Debug)]
pub enum EmrScope {
    /// The stacked full system (Landweber-EMR).
    FullSystem,
    /// A single block (Kaczmarz-EMR).
    Block(usize),
}

/// Error-minimizing relaxation step size for the direction `M* r`.
///
/// For linear `M` the minimizers of the error quadratic are computable from
/// residuals alone: with `s = 0`, `t* = ||r||^2 / ||M* r||^2`; with `s = 1`,
/// `t* = <r, M M* r> / ||M M* r||^2`. A zero direction has no minimizer and
/// yields [`Error::StationaryPoint`].
pub fn emr_step_size(
    sys: &BlockOperatorSystem,
    x: &Element,
    scope: EmrScope,
    exponent: u8,
) -> Result<f64> {
    if exponent > 1 {
        return Err(Error::InvalidArgument(format!(
            "EMR exponent must be 0 or 1, got {exponent}"
        )));
    }
    match scope {
        EmrScope::Block(i) => {
            require_linear(sys, i)?;
            let r = sys.residual(i, x)?;
            emr_block_t(sys, i, x, &r, exponent)
        }
        EmrScope::FullSystem => {
            for i in 0..sys.len() {
                require_linear(sys, i)?;
            }
            let residuals = (0..sys.len())
                .map(|i| sys.residual(i, x))
                .collect::<Result<Vec<_>>>()?;
            emr_full_t(sys, x, &residuals, exponent)
        }
    }
}

fn require_linear(sys: &BlockOperatorSystem, i: usize) -> Result<()> {
    if sys.block(i).op.is_linear() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "EMR step sizes need linear blocks; block {i} is nonlinear"
        )))
    }
}

fn emr_block_t(
    sys: &BlockOperatorSystem,
    i: usize,
    x: &Element,
    r: &Element,
    exponent: u8,
) -> Result<f64> {
    let op = &sys.block(i).op;
    let d = op.adjoint_deriv_apply(x, r)?;
    if exponent == 0 {
        let den = d.norm_sq();
        if den == 0.0 {
            return Err(Error::StationaryPoint);
        }
        Ok(r.norm_sq() / den)
    } else {
        let w = op.deriv_apply(x, &d)?;
        let den = w.norm_sq();
        if den == 0.0 {
            return Err(Error::StationaryPoint);
        }
        Ok(r.inner(&w)? / den)
    }
}

fn emr_full_t(
    sys: &BlockOperatorSystem,
    x: &Element,
    residuals: &[Element],
    exponent: u8,
) -> Result<f64> {
    let mut d = sys.image_space().zero();
    for (i, r) in residuals.iter().enumerate() {
        let g = sys.block(i).op.adjoint_deriv_apply(x, r)?;
        d.add_scaled(1.0, &g)?;
    }
    if exponent == 0 {
        let den = d.norm_sq();
        if den == 0.0 {
            return Err(Error::StationaryPoint);
        }
        let num: f64 = residuals.iter().map(|r| r.norm_sq()).sum();
        Ok(num / den)
    } else {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, r) in residuals.iter().enumerate() {
            let w = sys.block(i).op.deriv_apply(x, &d)?;
            num += r.inner(&w)?;
            den += w.norm_sq();
        }
        if den == 0.0 {
            return Err(Error::StationaryPoint);
        }
        Ok(num / den)
    }
}

/// One record per iterative update.
#[derive(Clone, Debug)]
pub struct UpdateRecord {
    /// 1-based update index.
    pub k: usize,
    /// Visited block (`None` for simultaneous methods).
    pub block: Option<usize>,
    /// Whether the update was performed (skip rule).
    pub active: bool,
    /// Step size actually used (0 when skipped).
    pub step: f64,
    /// `||F_[k](x_k) - y_[k]||` at the pre-update iterate; simultaneous
    /// methods log the total residual norm.
    pub residual_norm: f64,
    /// `||x_{k+1} - x_k||`.
    pub iterate_diff: f64,
}

/// One record per cycle, evaluated at the end-of-cycle iterate.
#[derive(Clone, Debug)]
pub struct CycleRecord {
    pub cycle: usize,
    /// Total residual norm `||F(x) - y||`.
    pub residual_norm: f64,
    /// `||x - x_true|| / ||x_true||` when a ground truth was supplied.
    pub relative_error: Option<f64>,
    pub mean_step: f64,
    /// Number of skipped updates in this cycle.
    pub skips: usize,
    /// Mean of `||x_{k+1} - x_k||` over the cycle's updates.
    pub mean_iterate_diff: f64,
}

#[derive(Clone, Debug, Default)]
pub struct IterationTrace {
    /// Total residual norm at the initial iterate.
    pub initial_residual: f64,
    pub updates: Vec<UpdateRecord>,
    pub cycles: Vec<CycleRecord>,
}

/// How a run ended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunStatus {
    /// Ran the full cycle budget.
    Completed,
    /// Early stop by the discrepancy rule at update index `k_star`.
    Stopped { k_star: usize },
    /// Aborted by the divergence guard.
    Diverged { cycle: usize, reason: String },
}

pub struct RunOutcome {
    pub final_iterate: Element,
    pub trace: IterationTrace,
    pub status: RunStatus,
    /// `x_1, x_2, ...` when `record_iterates` was set.
    pub iterates: Option<Vec<Element>>,
    /// End-of-cycle snapshots at the requested cycles.
    pub snapshots: Vec<(usize, Element)>,
    pub warnings: Vec<String>,
}

/// Result of scanning a trace for the cyclic stopping index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoppingIndex {
    /// `k* = l*n` for the first cycle `l` in which every update was skipped.
    Stopped(usize),
    NotYetStopped,
}

/// Detect the stopping index of the skip-rule methods from a trace: the
/// first full cycle of `n` updates in which every update was skipped. With
/// exact data updates are never skipped, so this never fires.
pub fn stopping_index(trace: &IterationTrace, n: usize) -> StoppingIndex {
    for (c, chunk) in trace.updates.chunks(n).enumerate() {
        if chunk.len() == n && chunk.iter().all(|u| !u.active) {
            return StoppingIndex::Stopped((c + 1) * n);
        }
    }
    StoppingIndex::NotYetStopped
}

enum Engine {
    Plain(Element),
    Avek(AvekState),
    Iag(IagState),
}

impl Engine {
    fn current(&self) -> &Element {
        match self {
            Engine::Plain(x) => x,
            Engine::Avek(s) => s.current(),
            Engine::Iag(s) => s.current(),
        }
    }

    fn into_current(self) -> Element {
        match self {
            Engine::Plain(x) => x,
            Engine::Avek(s) => s.into_current(),
            Engine::Iag(s) => s.into_current(),
        }
    }
}

struct DriverInfo {
    block: Option<usize>,
    active: bool,
    step: f64,
    residual_norm: f64,
}

fn validate_config(
    sys: &BlockOperatorSystem,
    config: &SolverConfig,
    warnings: &mut Vec<String>,
) -> Result<()> {
    if config.max_cycles == 0 {
        return Err(Error::InvalidArgument("max_cycles must be at least 1".into()));
    }
    if !(config.step_size.is_finite() && config.step_size > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive and finite, got {}",
            config.step_size
        )));
    }
    if let Method::LandweberEmr { exponent } | Method::KaczmarzEmr { exponent } = config.method {
        if exponent > 1 {
            return Err(Error::InvalidArgument(format!(
                "EMR exponent must be 0 or 1, got {exponent}"
            )));
        }
    }
    if !config.weights.is_empty() && config.method != Method::Avek {
        return Err(Error::InvalidArgument(
            "averaging weights only apply to the averaged Kaczmarz method".into(),
        ));
    }
    for e in &config.init {
        if !e.space().compatible(sys.image_space()) {
            return Err(Error::SpaceMismatch {
                expected: sys.image_space().tag().to_string(),
                found: e.space().tag().to_string(),
                context: "initial iterate".into(),
            });
        }
    }
    match (config.method, config.init.len()) {
        (_, 0 | 1) => {}
        (Method::Avek, len) if len == sys.len() => {}
        (method, len) => {
            return Err(Error::InvalidArgument(format!(
                "{} takes 0 or 1 initial iterates, got {len}",
                method.name()
            )));
        }
    }
    let emr = matches!(
        config.method,
        Method::LandweberEmr { .. } | Method::KaczmarzEmr { .. }
    );
    if config.validate_step_size && !emr {
        let worst = sys
            .blocks()
            .iter()
            .enumerate()
            .filter(|(_, b)| b.norm_bound > 0.0)
            .map(|(i, b)| (i, config.step_size * b.norm_bound * b.norm_bound))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, product)) = worst {
            if product > 1.0 + 1e-9 {
                warnings.push(format!(
                    "step size rule violated: s * norm_bound^2 = {product:.3} > 1 (block {i}); \
                     the iteration may still converge but is outside the analyzed regime"
                ));
            }
        }
    }
    Ok(())
}

fn initial_elements(sys: &BlockOperatorSystem, config: &SolverConfig) -> Vec<Element> {
    match config.init.len() {
        0 => vec![sys.image_space().zero()],
        _ => config.init.clone(),
    }
}

/// Run a configured method on a system.
///
/// Executes up to `max_cycles` cycles, logging one update record per update
/// and one cycle record per cycle. Deterministic given `(config, seed)`.
/// Divergence (non-finite iterates, or the cycle residual exceeding
/// [`DIVERGENCE_FACTOR`] times its initial value) aborts the run with the
/// partial trace intact. With noisy data and `stop_on_discrepancy`, the
/// skip-rule methods stop at the first all-skip cycle and the simultaneous
/// methods at the classical discrepancy index.
pub fn run(
    sys: &BlockOperatorSystem,
    config: &SolverConfig,
    ground_truth: Option<&Element>,
) -> Result<RunOutcome> {
    let n = sys.len();
    let mut warnings = Vec::new();
    validate_config(sys, config, &mut warnings)?;
    let tau = resolved_tau(config, n)?;
    if let Some(gt) = ground_truth {
        if !gt.space().compatible(sys.image_space()) {
            return Err(Error::SpaceMismatch {
                expected: sys.image_space().tag().to_string(),
                found: gt.space().tag().to_string(),
                context: "ground truth".into(),
            });
        }
    }

    let inits = initial_elements(sys, config);
    let mut engine = match config.method {
        Method::Avek => {
            let weights = resolved_weights(config, n)?;
            let full_inits = if inits.len() == n {
                inits
            } else {
                vec![inits[0].clone(); n]
            };
            Engine::Avek(AvekState::new(full_inits, Some(weights))?)
        }
        Method::Iag => Engine::Iag(IagState::new(inits[0].clone(), n)?),
        _ => Engine::Plain(inits[0].clone()),
    };

    let initial_residual = sys.total_residual_norm(engine.current())?;
    let mut trace = IterationTrace {
        initial_residual,
        ..Default::default()
    };
    let mut iterates = config.record_iterates.then(|| vec![engine.current().clone()]);
    let mut snapshots = Vec::new();
    let noisy = sys.is_noisy();
    let ups = config.method.updates_per_cycle(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut status = RunStatus::Completed;

    let gt_norm = ground_truth.map(|g| g.norm());

    'cycles: for cycle in 1..=config.max_cycles {
        if config.method.is_cyclic() && config.rearrange {
            order.shuffle(&mut rng);
        }
        if let Engine::Iag(state) = &mut engine {
            state.refresh_aggregate()?;
        }
        let mut active_count = 0usize;
        let mut step_sum = 0.0;
        let mut diff_sum = 0.0;
        for pos in 0..ups {
            let k = (cycle - 1) * ups + pos + 1;
            let before = engine.current().clone();
            let info = drive_update(&mut engine, sys, config, &tau, order[pos])?;
            let after = engine.current();
            if !(info.residual_norm.is_finite() && after.is_finite()) {
                status = RunStatus::Diverged {
                    cycle,
                    reason: "non-finite iterate or residual".into(),
                };
                break 'cycles;
            }
            let diff = after.distance(&before)?;
            trace.updates.push(UpdateRecord {
                k,
                block: info.block,
                active: info.active,
                step: info.step,
                residual_norm: info.residual_norm,
                iterate_diff: diff,
            });
            if let Some(v) = &mut iterates {
                v.push(after.clone());
            }
            if info.active {
                active_count += 1;
            }
            step_sum += info.step;
            diff_sum += diff;
        }

        let x = engine.current();
        let res = sys.total_residual_norm(x)?;
        if !res.is_finite() {
            status = RunStatus::Diverged {
                cycle,
                reason: "non-finite cycle residual".into(),
            };
            break;
        }
        let relative_error = match (ground_truth, gt_norm) {
            (Some(g), Some(gn)) if gn > 0.0 => Some(x.sub(g)?.norm() / gn),
            _ => None,
        };
        trace.cycles.push(CycleRecord {
            cycle,
            residual_norm: res,
            relative_error,
            mean_step: step_sum / ups as f64,
            skips: ups - active_count,
            mean_iterate_diff: diff_sum / ups as f64,
        });
        if config.snapshot_cycles.contains(&cycle) {
            snapshots.push((cycle, x.clone()));
        }
        if initial_residual > 0.0 && res > DIVERGENCE_FACTOR * initial_residual {
            status = RunStatus::Diverged {
                cycle,
                reason: format!(
                    "cycle residual {res:.3e} exceeds {DIVERGENCE_FACTOR:.0e} x initial {initial_residual:.3e}"
                ),
            };
            break;
        }
        if noisy && config.stop_on_discrepancy {
            // An all-skip cycle certifies the residuals only at the visit
            // iterates; the averaged iterate still moves within the cycle.
            // Confirm the thresholds at the current iterate before stopping
            // (a no-op for plain Kaczmarz, whose iterate froze).
            if config.method.uses_skip_rule() && active_count == 0 {
                let mut confirmed = true;
                for i in 0..n {
                    let rn = sys.residual(i, x)?.norm();
                    if rn >= tau[i] * sys.noise_level(i) {
                        confirmed = false;
                        break;
                    }
                }
                if confirmed {
                    status = RunStatus::Stopped { k_star: cycle * n };
                    break;
                }
            }
            if matches!(config.method, Method::Landweber | Method::LandweberEmr { .. }) {
                let threshold_sq: f64 = (0..n)
                    .map(|i| (tau[i] * sys.noise_level(i)).powi(2))
                    .sum();
                if res * res <= threshold_sq {
                    status = RunStatus::Stopped { k_star: cycle };
                    break;
                }
            }
        }
    }

    Ok(RunOutcome {
        final_iterate: engine.into_current(),
        trace,
        status,
        iterates,
        snapshots,
        warnings,
    })
}

fn drive_update(
    engine: &mut Engine,
    sys: &BlockOperatorSystem,
    config: &SolverConfig,
    tau: &[f64],
    block: usize,
) -> Result<DriverInfo> {
    match (engine, config.method) {
        (Engine::Avek(state), Method::Avek) => {
            let info = state.step(sys, block, config.step_size, tau[block])?;
            Ok(DriverInfo {
                block: Some(block),
                active: info.active,
                step: info.step,
                residual_norm: info.residual_norm,
            })
        }
        (Engine::Iag(state), Method::Iag) => {
            let info = state.step(sys, block, config.step_size)?;
            Ok(DriverInfo {
                block: Some(block),
                active: info.active,
                step: info.step,
                residual_norm: info.residual_norm,
            })
        }
        (Engine::Plain(x), Method::Kaczmarz) => {
            let (next, active, rn) = row_action_update(sys, block, x, config.step_size, tau[block])?;
            *x = next;
            Ok(DriverInfo {
                block: Some(block),
                active,
                step: if active { config.step_size } else { 0.0 },
                residual_norm: rn,
            })
        }
        (Engine::Plain(x), Method::KaczmarzEmr { exponent }) => {
            let r = sys.residual(block, x)?;
            let rn = r.norm();
            let active = update_active(rn, tau[block], sys.noise_level(block));
            if !active {
                return Ok(DriverInfo {
                    block: Some(block),
                    active: false,
                    step: 0.0,
                    residual_norm: rn,
                });
            }
            require_linear(sys, block)?;
            match emr_block_t(sys, block, x, &r, exponent) {
                Ok(t) => {
                    let g = sys.block(block).op.adjoint_deriv_apply(x, &r)?;
                    x.add_scaled(-t, &g)?;
                    Ok(DriverInfo {
                        block: Some(block),
                        active: true,
                        step: t,
                        residual_norm: rn,
                    })
                }
                // Zero direction: nothing to minimize along, leave the
                // iterate unchanged.
                Err(Error::StationaryPoint) => Ok(DriverInfo {
                    block: Some(block),
                    active: false,
                    step: 0.0,
                    residual_norm: rn,
                }),
                Err(e) => Err(e),
            }
        }
        (Engine::Plain(x), Method::Landweber) => {
            let n = sys.len() as f64;
            let mut total_sq = 0.0;
            let mut direction = sys.image_space().zero();
            for i in 0..sys.len() {
                let r = sys.residual(i, x)?;
                total_sq += r.norm_sq();
                let g = sys.block(i).op.adjoint_deriv_apply(x, &r)?;
                direction.add_scaled(1.0, &g)?;
            }
            x.add_scaled(-config.step_size / n, &direction)?;
            Ok(DriverInfo {
                block: None,
                active: true,
                step: config.step_size,
                residual_norm: total_sq.sqrt(),
            })
        }
        (Engine::Plain(x), Method::LandweberEmr { exponent }) => {
            for i in 0..sys.len() {
                require_linear(sys, i)?;
            }
            let residuals = (0..sys.len())
                .map(|i| sys.residual(i, x))
                .collect::<Result<Vec<_>>>()?;
            let total_sq: f64 = residuals.iter().map(|r| r.norm_sq()).sum();
            match emr_full_t(sys, x, &residuals, exponent) {
                Ok(t) => {
                    let mut direction = sys.image_space().zero();
                    for (i, r) in residuals.iter().enumerate() {
                        let g = sys.block(i).op.adjoint_deriv_apply(x, r)?;
                        direction.add_scaled(1.0, &g)?;
                    }
                    x.add_scaled(-t, &direction)?;
                    Ok(DriverInfo {
                        block: None,
                        active: true,
                        step: t,
                        residual_norm: total_sq.sqrt(),
                    })
                }
                Err(Error::StationaryPoint) => Ok(DriverInfo {
                    block: None,
                    active: false,
                    step: 0.0,
                    residual_norm: total_sq.sqrt(),
                }),
                Err(e) => Err(e),
            }
        }
        _ => Err(Error::InvalidArgument(
            "engine/method mismatch (internal)".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opsys::{DenseOperator, Operator, OperatorBlock};
    use crate::space::{Space, SpaceTag};
    use crate::selftest::random_linear_system;
    use std::sync::Arc;

    fn scalar_system(ops: &[f64], data: &[f64], noise: &[f64]) -> BlockOperatorSystem {
        let blocks: Vec<_> = ops
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let op = DenseOperator::euclidean(
                    vec![a],
                    1,
                    1,
                    SpaceTag::image(),
                    SpaceTag::data_block(i),
                )
                .unwrap();
                OperatorBlock::new(Arc::new(op))
            })
            .collect();
        let data: Vec<_> = data
            .iter()
            .enumerate()
            .map(|(i, &y)| blocks[i].op.range().element(vec![y]).unwrap())
            .collect();
        BlockOperatorSystem::new(blocks, data, noise.to_vec()).unwrap()
    }

    fn image_of(sys: &BlockOperatorSystem, values: Vec<f64>) -> Element {
        sys.image_space().element(values).unwrap()
    }

    #[test]
    fn skip_flag_below_threshold_skips() {
        // residual norm 0.1, tau * delta = 0.2 -> skip
        let sys = scalar_system(&[1.0], &[0.1], &[0.1]);
        let x = image_of(&sys, vec![0.0]);
        assert!(!skip_flag(&sys, 0, &x, 2.0).unwrap());
    }

    #[test]
    fn skip_flag_exact_data_always_updates() {
        let sys = scalar_system(&[1.0], &[0.0], &[0.0]);
        let x = image_of(&sys, vec![0.0]);
        assert!(skip_flag(&sys, 0, &x, 3.0).unwrap());
    }

    #[test]
    fn skip_flag_threshold_is_inclusive() {
        // residual norm exactly tau * delta -> update (>= is inclusive)
        let sys = scalar_system(&[1.0], &[0.2], &[0.1]);
        let x = image_of(&sys, vec![0.0]);
        assert!(skip_flag(&sys, 0, &x, 2.0).unwrap());
    }

    #[test]
    fn landweber_single_equation_one_step() {
        let sys = scalar_system(&[1.0], &[1.0], &[0.0]);
        let x = image_of(&sys, vec![0.0]);
        let next = landweber_step(&sys, &x, 1.0).unwrap();
        assert_eq!(next.as_slice(), &[1.0]);
    }

    #[test]
    fn landweber_fixed_point_at_solution() {
        let sys = scalar_system(&[2.0, 3.0], &[4.0, 6.0], &[0.0, 0.0]);
        let x = image_of(&sys, vec![2.0]);
        let next = landweber_step(&sys, &x, 0.1).unwrap();
        assert_eq!(next.as_slice(), x.as_slice());
    }

    #[test]
    fn landweber_two_block_hand_trace() {
        // F1(x) = x = 1, F2(x) = x = 3, x = 0, s = 1:
        // x' = 0 - 1/2 ((0-1) + (0-3)) = 2
        let sys = scalar_system(&[1.0, 1.0], &[1.0, 3.0], &[0.0, 0.0]);
        let x = image_of(&sys, vec![0.0]);
        let next = landweber_step(&sys, &x, 1.0).unwrap();
        assert_eq!(next.as_slice(), &[2.0]);
    }

    #[test]
    fn kaczmarz_skipped_update_is_identity() {
        let sys = scalar_system(&[1.0], &[0.1], &[1.0]);
        let x = image_of(&sys, vec![0.0]);
        let next = kaczmarz_step(&sys, &x, 1, 1.0, &[3.0]).unwrap();
        assert_eq!(next.as_slice(), x.as_slice());
    }

    #[test]
    fn kaczmarz_scalar_one_step() {
        let sys = scalar_system(&[1.0], &[1.0], &[0.0]);
        let x = image_of(&sys, vec![0.0]);
        let next = kaczmarz_step(&sys, &x, 1, 1.0, &[3.0]).unwrap();
        assert_eq!(next.as_slice(), &[1.0]);
    }

    #[test]
    fn kaczmarz_orthogonal_rows_solve_in_one_cycle() {
        // Orthogonal rows of equal norm: one cycle with s = 1/||row||^2 is
        // the classical projection method and solves the system exactly.
        let domain = Space::euclidean(SpaceTag::image(), 2);
        let rows = [[3.0, 4.0], [-4.0, 3.0]];
        let x_true = [0.7, -0.3];
        let mut blocks = Vec::new();
        let mut data = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            let range = Space::euclidean(SpaceTag::data_block(i), 1);
            let op = DenseOperator::new(row.to_vec(), Arc::clone(&domain), range).unwrap();
            let y = row[0] * x_true[0] + row[1] * x_true[1];
            data.push(op.range().element(vec![y]).unwrap());
            blocks.push(OperatorBlock::new(Arc::new(op)));
        }
        let sys = BlockOperatorSystem::new(blocks, data, vec![0.0, 0.0]).unwrap();
        let s = 1.0 / 25.0;
        let mut x = sys.image_space().zero();
        for k in 1..=2 {
            x = kaczmarz_step(&sys, &x, k, s, &[3.0, 3.0]).unwrap();
        }
        assert!((x.as_slice()[0] - x_true[0]).abs() < 1e-12);
        assert!((x.as_slice()[1] - x_true[1]).abs() < 1e-12);
    }

    #[test]
    fn avek_two_block_hand_simulation() {
        // F1(x) = x = 1, F2(x) = x = 1, x1 = x2 = 0, s = 1, equal weights:
        // xi1 = 1, xi2 = 1, x3 = (xi1 + xi2)/2 = 1.
        let sys = scalar_system(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]);
        let zero = sys.image_space().zero();
        let mut state = AvekState::new(vec![zero.clone(), zero], None).unwrap();
        state.step(&sys, 0, 1.0, 3.0).unwrap();
        assert_eq!(state.current().as_slice(), &[0.0]); // second provided init
        state.step(&sys, 1, 1.0, 3.0).unwrap();
        assert_eq!(state.current().as_slice(), &[1.0]); // first averaged iterate
        let ring: Vec<f64> = state.ring().map(|xi| xi.as_slice()[0]).collect();
        assert_eq!(ring, vec![1.0, 1.0]);
    }

    #[test]
    fn avek_with_first_unit_weight_equals_kaczmarz() {
        let (sys, _) = random_linear_system(4, 2, 6, 31, 0.0).unwrap();
        let n = sys.len();
        let mut kc = SolverConfig::new(Method::Kaczmarz);
        kc.step_size = 0.08;
        kc.max_cycles = 25;
        kc.record_iterates = true;
        let reference = run(&sys, &kc, None).unwrap().iterates.unwrap();

        let mut av = SolverConfig::new(Method::Avek);
        av.step_size = 0.08;
        av.max_cycles = 25;
        av.record_iterates = true;
        av.weights = {
            let mut w = vec![0.0; n];
            w[0] = 1.0;
            w
        };
        av.init = reference[..n].to_vec();
        let collapsed = run(&sys, &av, None).unwrap().iterates.unwrap();

        assert_eq!(reference.len(), collapsed.len());
        for (a, b) in reference.iter().zip(&collapsed) {
            assert!(a.sub(b).unwrap().norm() <= 1e-14);
        }
    }

    #[test]
    fn single_equation_methods_coincide() {
        let (sys, _) = random_linear_system(1, 3, 3, 77, 0.0).unwrap();
        let mut base = SolverConfig::new(Method::Landweber);
        base.step_size = 0.04;
        base.max_cycles = 40;
        base.record_iterates = true;
        let lw = run(&sys, &base, None).unwrap().iterates.unwrap();
        for method in [Method::Avek, Method::Kaczmarz, Method::Iag] {
            let mut cfg = base.clone();
            cfg.method = method;
            let other = run(&sys, &cfg, None).unwrap().iterates.unwrap();
            for (a, b) in lw.iter().zip(&other) {
                assert!(
                    a.sub(b).unwrap().norm() <= 1e-14,
                    "{} deviates",
                    method.name()
                );
            }
        }
    }

    #[test]
    fn iag_zero_gradients_are_a_fixed_point() {
        let sys = scalar_system(&[2.0], &[4.0], &[0.0]);
        let x = image_of(&sys, vec![2.0]);
        let mut state = IagState::new(x.clone(), 1).unwrap();
        for _ in 0..3 {
            state.step(&sys, 0, 0.3).unwrap();
        }
        assert_eq!(state.current().as_slice(), x.as_slice());
    }

    #[test]
    fn iag_two_block_scalar_matches_hand_simulation() {
        // Hand-rolled two-equation scalar recursion:
        // g_k = a_i (a_i x_k - y_i), x_{k+1} = x_k - (s/2)(g_k + g_{k-1}).
        let a = [2.0, -1.5];
        let y = [1.0, 0.6];
        let s = 0.1;
        let sys = scalar_system(&a, &y, &[0.0, 0.0]);
        let mut state = IagState::new(sys.image_space().zero(), 2).unwrap();

        let mut x = 0.0f64;
        let mut prev_g = 0.0f64;
        for k in 0..5 {
            let i = k % 2;
            state.refresh_aggregate().unwrap();
            state.step(&sys, i, s).unwrap();
            let g = a[i] * (a[i] * x - y[i]);
            x -= s / 2.0 * (g + prev_g);
            prev_g = g;
            let got = state.current().as_slice()[0];
            assert!(
                (got - x).abs() <= 1e-13 * x.abs().max(1.0),
                "step {k}: {got} vs {x}"
            );
        }
    }

    #[test]
    fn emr_scalar_block_minimizer() {
        // M = a: t* = 1/a^2 for both exponents.
        let sys = scalar_system(&[3.0], &[1.0], &[0.0]);
        let x = image_of(&sys, vec![5.0]);
        for exponent in [0, 1] {
            let t = emr_step_size(&sys, &x, EmrScope::Block(0), exponent).unwrap();
            assert!((t - 1.0 / 9.0).abs() <= 1e-14, "exponent {exponent}: {t}");
        }
    }

    #[test]
    fn emr_orthonormal_operator_gives_unit_step() {
        let domain = Space::euclidean(SpaceTag::image(), 2);
        let range = Space::euclidean(SpaceTag::data_block(0), 2);
        let theta = 0.3f64;
        let rot = vec![theta.cos(), -theta.sin(), theta.sin(), theta.cos()];
        let op = DenseOperator::new(rot, domain, range).unwrap();
        let y = op.range().element(vec![0.4, -0.9]).unwrap();
        let block = OperatorBlock::new(Arc::new(op));
        let sys = BlockOperatorSystem::new(vec![block], vec![y], vec![0.0]).unwrap();
        let x = image_of(&sys, vec![1.0, 2.0]);
        for exponent in [0, 1] {
            for scope in [EmrScope::Block(0), EmrScope::FullSystem] {
                let t = emr_step_size(&sys, &x, scope, exponent).unwrap();
                assert!((t - 1.0).abs() <= 1e-12, "t = {t}");
            }
        }
    }

    /// Independent oracle: scan the computable objective on a fine grid and
    /// refine the bracket with a parabola through the three points around
    /// the argmin (exact for quadratics up to rounding).
    fn scan_minimizer(objective: impl Fn(f64) -> f64, hi: f64) -> f64 {
        let m = 2000;
        let ts: Vec<f64> = (0..=m).map(|j| hi * j as f64 / m as f64).collect();
        let vals: Vec<f64> = ts.iter().map(|&t| objective(t)).collect();
        let mut best = 0;
        for j in 1..=m {
            if vals[j] < vals[best] {
                best = j;
            }
        }
        assert!(best > 0 && best < m, "minimum not interior to the scan");
        let (t0, t1, t2) = (ts[best - 1], ts[best], ts[best + 1]);
        let (f0, f1, f2) = (vals[best - 1], vals[best], vals[best + 1]);
        let denom = (t1 - t0) * (f1 - f2) - (t1 - t2) * (f1 - f0);
        t1 - 0.5 * ((t1 - t0).powi(2) * (f1 - f2) - (t1 - t2).powi(2) * (f1 - f0)) / denom
    }

    #[test]
    fn emr_matches_objective_scan() {
        let (sys, _) = random_linear_system(1, 6, 4, 5, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = sys.image_space().random_normal(&mut rng);
        let op = &sys.block(0).op;
        let r = sys.residual(0, &x).unwrap();
        let d = op.adjoint_deriv_apply(&x, &r).unwrap();

        // exponent 0: phi(t) = -2 t ||r||^2 + t^2 ||M* r||^2 (the
        // t-dependent part of ||e - t M* r||^2).
        let t0 = emr_step_size(&sys, &x, EmrScope::Block(0), 0).unwrap();
        let (rn2, dn2) = (r.norm_sq(), d.norm_sq());
        let oracle0 = scan_minimizer(|t| -2.0 * t * rn2 + t * t * dn2, 2.0 * t0);
        assert!((t0 - oracle0).abs() <= 1e-8 * t0, "{t0} vs {oracle0}");

        // exponent 1: psi(t) = ||r - t M M* r||^2, fully computable.
        let t1 = emr_step_size(&sys, &x, EmrScope::Block(0), 1).unwrap();
        let w = op.deriv_apply(&x, &d).unwrap();
        let oracle1 = scan_minimizer(
            |t| {
                let mut e = r.clone();
                e.add_scaled(-t, &w).unwrap();
                e.norm_sq()
            },
            2.0 * t1,
        );
        assert!((t1 - oracle1).abs() <= 1e-8 * t1, "{t1} vs {oracle1}");
    }

    #[test]
    fn emr_zero_direction_is_stationary() {
        let sys = scalar_system(&[0.0], &[1.0], &[0.0]);
        let x = image_of(&sys, vec![0.0]);
        assert!(matches!(
            emr_step_size(&sys, &x, EmrScope::Block(0), 0),
            Err(Error::StationaryPoint)
        ));
    }

    #[test]
    fn stopping_on_first_cycle_when_residuals_below_threshold() {
        // Equal initialization with all residuals below tau*delta: the first
        // cycle skips everything, k* = n.
        let sys = scalar_system(&[1.0, 1.0], &[0.1, 0.05], &[1.0, 1.0]);
        let mut cfg = SolverConfig::new(Method::Avek);
        cfg.max_cycles = 4;
        let out = run(&sys, &cfg, None).unwrap();
        assert_eq!(out.status, RunStatus::Stopped { k_star: 2 });
        assert_eq!(stopping_index(&out.trace, 2), StoppingIndex::Stopped(2));
    }

    #[test]
    fn stopping_never_fires_on_exact_data() {
        let (sys, _) = random_linear_system(3, 2, 4, 9, 0.0).unwrap();
        let mut cfg = SolverConfig::new(Method::Avek);
        cfg.step_size = 0.05;
        cfg.max_cycles = 30;
        let out = run(&sys, &cfg, None).unwrap();
        assert_eq!(out.status, RunStatus::Completed);
        assert_eq!(
            stopping_index(&out.trace, sys.len()),
            StoppingIndex::NotYetStopped
        );
        assert!(out.trace.updates.iter().all(|u| u.active));
    }

    #[test]
    fn stopping_three_block_noisy_system_is_finite_and_certified() {
        let (sys, _) = random_linear_system(3, 2, 5, 63, 0.01).unwrap();
        let max_norm_sq = sys
            .blocks()
            .iter()
            .map(|b| b.norm_bound * b.norm_bound)
            .fold(0.0, f64::max);
        let mut cfg = SolverConfig::new(Method::Avek);
        cfg.step_size = 0.9 / max_norm_sq;
        cfg.max_cycles = 20000;
        cfg.tau = vec![3.0];
        let out = run(&sys, &cfg, None).unwrap();
        let RunStatus::Stopped { k_star } = out.status else {
            panic!("expected a finite stopping index, got {:?}", out.status);
        };
        assert_eq!(k_star % sys.len(), 0);
        // post-stop residuals sit below tau_i * delta_i
        for i in 0..sys.len() {
            let rn = sys.residual(i, &out.final_iterate).unwrap().norm();
            assert!(
                rn < 3.0 * sys.noise_level(i),
                "block {i}: residual {rn} vs {}",
                3.0 * sys.noise_level(i)
            );
        }
    }

    #[test]
    fn landweber_discrepancy_stopping() {
        let (sys, _) = random_linear_system(2, 3, 4, 15, 0.05).unwrap();
        let max_norm_sq = sys
            .blocks()
            .iter()
            .map(|b| b.norm_bound * b.norm_bound)
            .fold(0.0, f64::max);
        let mut cfg = SolverConfig::new(Method::Landweber);
        cfg.step_size = 0.9 / max_norm_sq;
        cfg.max_cycles = 50000;
        let out = run(&sys, &cfg, None).unwrap();
        let RunStatus::Stopped { k_star } = out.status else {
            panic!("expected discrepancy stop, got {:?}", out.status);
        };
        let total = sys.total_residual_norm_sq(&out.final_iterate).unwrap();
        let threshold: f64 = (0..sys.len())
            .map(|i| (3.0 * sys.noise_level(i)).powi(2))
            .sum();
        assert!(total <= threshold, "k* = {k_star}: {total} vs {threshold}");
    }

    #[test]
    fn run_converges_on_consistent_system() {
        // Unit-rescaled blocks, s = 0.9 / norm^2 = 0.9.
        let (sys, x_true) = random_linear_system(5, 4, 10, 42, 0.0).unwrap();
        let sys = sys.rescaled(1.0).unwrap();
        let mut cfg = SolverConfig::new(Method::Avek);
        cfg.step_size = 0.9;
        cfg.max_cycles = 500;
        let out = run(&sys, &cfg, Some(&x_true)).unwrap();
        let rel = out
            .trace
            .cycles
            .last()
            .unwrap()
            .relative_error
            .expect("ground truth supplied");
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn run_is_deterministic_given_seed() {
        let (sys, _) = random_linear_system(4, 3, 6, 27, 0.02).unwrap();
        for rearrange in [false, true] {
            let mut cfg = SolverConfig::new(Method::Avek);
            cfg.step_size = 0.05;
            cfg.max_cycles = 15;
            cfg.rearrange = rearrange;
            cfg.seed = 99;
            cfg.stop_on_discrepancy = false;
            let a = run(&sys, &cfg, None).unwrap();
            let b = run(&sys, &cfg, None).unwrap();
            assert_eq!(a.final_iterate.as_slice(), b.final_iterate.as_slice());
            assert_eq!(a.trace.cycles.len(), b.trace.cycles.len());
            for (ca, cb) in a.trace.cycles.iter().zip(&b.trace.cycles) {
                assert_eq!(ca.residual_norm.to_bits(), cb.residual_norm.to_bits());
            }
            for (ua, ub) in a.trace.updates.iter().zip(&b.trace.updates) {
                assert_eq!(ua.block, ub.block);
                assert_eq!(ua.residual_norm.to_bits(), ub.residual_norm.to_bits());
            }
        }
    }

    #[test]
    fn divergence_guard_fires_on_overstepped_landweber() {
        // Symmetric positive block (identity), s = 4: the error grows by a
        // factor |1 - s| = 3 per cycle and must trip the guard.
        let domain = Space::euclidean(SpaceTag::image(), 2);
        let range = Space::euclidean(SpaceTag::data_block(0), 2);
        let op = DenseOperator::new(vec![1.0, 0.0, 0.0, 1.0], domain, range).unwrap();
        let y = op.range().element(vec![0.0, 0.0]).unwrap();
        let mut block = OperatorBlock::new(Arc::new(op));
        block.norm_bound = 1.0;
        let sys = BlockOperatorSystem::new(vec![block], vec![y], vec![0.0]).unwrap();
        let mut cfg = SolverConfig::new(Method::Landweber);
        cfg.step_size = 4.0;
        cfg.max_cycles = 40;
        cfg.init = vec![sys.image_space().element(vec![1.0, 1.0]).unwrap()];
        let out = run(&sys, &cfg, None).unwrap();
        match out.status {
            RunStatus::Diverged { cycle, .. } => {
                assert!(cycle <= 15, "guard fired late at {cycle}");
                assert!(!out.trace.cycles.is_empty(), "partial trace missing");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(!out.warnings.is_empty(), "step-size warning expected");
    }

    #[test]
    fn config_validation_rejects_bad_input() {
        let (sys, _) = random_linear_system(3, 2, 4, 1, 0.0).unwrap();
        let mut cfg = SolverConfig::new(Method::Avek);
        cfg.weights = vec![0.5, 0.5, 0.5];
        assert!(run(&sys, &cfg, None).is_err());

        let mut cfg = SolverConfig::new(Method::Kaczmarz);
        cfg.tau = vec![-1.0];
        assert!(run(&sys, &cfg, None).is_err());

        let mut cfg = SolverConfig::new(Method::Landweber);
        cfg.step_size = 0.0;
        assert!(run(&sys, &cfg, None).is_err());

        let mut cfg = SolverConfig::new(Method::Kaczmarz);
        cfg.init = vec![sys.image_space().zero(); 3];
        assert!(run(&sys, &cfg, None).is_err());
    }

    #[test]
    fn trace_is_strictly_ordered_and_finite() {
        let (sys, _) = random_linear_system(3, 2, 4, 8, 0.0).unwrap();
        let mut cfg = SolverConfig::new(Method::Kaczmarz);
        cfg.step_size = 0.05;
        cfg.max_cycles = 10;
        let out = run(&sys, &cfg, None).unwrap();
        for (i, u) in out.trace.updates.iter().enumerate() {
            assert_eq!(u.k, i + 1);
            assert!(u.residual_norm.is_finite());
            assert!(u.iterate_diff.is_finite());
        }
    }
}
