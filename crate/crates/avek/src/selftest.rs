//! Deterministic invariant battery over all modules: adjoint certification,
//! solver monotonicity and special-case collapses, series algebra, and noise
//! bookkeeping. The command-line front end exposes this as `selftest`; a
//! fault-injection hook deliberately corrupts one adjoint so the battery's
//! own sensitivity can be demonstrated.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::opsys::{
    adjoint_consistency, linearity_defect, BlockOperatorSystem, DenseOperator, Operator,
    OperatorBlock,
};
use crate::radon::{self, AdjointKind, DetectorGeometry};
use crate::seqconv;
use crate::solvers::{self, AvekState, Method, RunStatus, SolverConfig};
use crate::space::{Element, Space, SpaceTag};
use crate::Result;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    /// Fault injection: scale one Radon adjoint so the adjoint check must
    /// fail while every other check stays green.
    pub corrupt_adjoint: bool,
}

/// A consistent random linear system split into `n_blocks` blocks of
/// `rows_per_block` equations over `R^dim`, together with the generating
/// solution. With `noise > 0`, Gaussian noise of that absolute magnitude is
/// added per block and the noise levels are set accordingly.
pub fn random_linear_system(
    n_blocks: usize,
    rows_per_block: usize,
    dim: usize,
    seed: u64,
    noise: f64,
) -> Result<(BlockOperatorSystem, Element)> {
    let domain = Space::euclidean(SpaceTag::image(), dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_true = domain.random_normal(&mut rng);
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut data = Vec::with_capacity(n_blocks);
    let mut noise_levels = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        let range = Space::euclidean(SpaceTag::data_block(i), rows_per_block);
        let matrix: Vec<f64> = (0..rows_per_block * dim)
            .map(|_| crate::rng::standard_normal(&mut rng))
            .collect();
        let op = DenseOperator::new(matrix, Arc::clone(&domain), Arc::clone(&range))?;
        let mut y = op.apply(&x_true)?;
        if noise > 0.0 {
            let direction = range.random_normal(&mut rng);
            let dn = direction.norm();
            y.add_scaled(noise / dn, &direction)?;
            noise_levels.push(noise);
        } else {
            noise_levels.push(0.0);
        }
        blocks.push(OperatorBlock::new(Arc::new(op)));
        data.push(y);
    }
    let mut sys = BlockOperatorSystem::new(blocks, data, noise_levels)?;
    sys.estimate_norm_bounds(60, seed ^ 0x5eed)?;
    Ok((sys, x_true))
}

struct PerturbedAdjoint {
    inner: Arc<dyn Operator>,
    factor: f64,
}

impl Operator for PerturbedAdjoint {
    fn domain(&self) -> &Arc<Space> {
        self.inner.domain()
    }
    fn range(&self) -> &Arc<Space> {
        self.inner.range()
    }
    fn apply(&self, x: &Element) -> Result<Element> {
        self.inner.apply(x)
    }
    fn deriv_apply(&self, at: &Element, h: &Element) -> Result<Element> {
        self.inner.deriv_apply(at, h)
    }
    fn adjoint_deriv_apply(&self, at: &Element, w: &Element) -> Result<Element> {
        Ok(self.inner.adjoint_deriv_apply(at, w)?.scaled(self.factor))
    }
    fn is_linear(&self) -> bool {
        self.inner.is_linear()
    }
}

fn check(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match body() {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Run the whole battery. Deterministic: repeated runs produce identical
/// reports.
pub fn run_selftest(opts: SelftestOptions) -> Vec<CheckResult> {
    vec![
        check("dense-adjoint-consistency", || {
            let domain = Space::weighted(SpaceTag::image(), vec![0.5, 1.25, 2.0, 0.75, 1.0]);
            let range = Space::weighted(SpaceTag::data_block(0), vec![3.0, 0.0, 0.5, 1.5]);
            let op = DenseOperator::gaussian(domain, range, 41)?;
            let dev = adjoint_consistency(&op, &op.domain().zero(), 100, 17)?;
            Ok((dev <= 1e-10, format!("max rel deviation {dev:.2e}")))
        }),
        check("radon-exact-adjoint", move || {
            let geom = Arc::new(radon::partition_boundary(
                &DetectorGeometry::half_circle(1.0, 8, 16)?,
                2,
            )?);
            let data = radon::Sinogram::zeros(&geom);
            let sys = radon::build_system(&geom, 24, &data, &[0.0, 0.0], AdjointKind::Exact)?;
            let mut worst = 0.0_f64;
            for i in 0..sys.len() {
                let op: Arc<dyn Operator> = if opts.corrupt_adjoint {
                    Arc::new(PerturbedAdjoint {
                        inner: Arc::clone(&sys.block(i).op),
                        factor: 1.005,
                    })
                } else {
                    Arc::clone(&sys.block(i).op)
                };
                let dev = adjoint_consistency(op.as_ref(), &sys.image_space().zero(), 30, 3 + i as u64)?;
                worst = worst.max(dev);
            }
            Ok((worst <= 1e-10, format!("max rel deviation {worst:.2e}")))
        }),
        check("radon-backprojection-pairing", || {
            let geom = Arc::new(DetectorGeometry::half_circle(1.0, 12, 24)?);
            let f = radon::GridImage::from_fn(32, 1.0, |x, y| {
                (-((x - 0.1) * (x - 0.1) + (y - 0.2) * (y - 0.2)) / 0.09).exp()
            })?;
            let g = radon::GridImage::from_fn(32, 1.0, |x, y| {
                (-(x * x + (y - 0.4) * (y - 0.4)) / 0.15).exp()
            })?;
            let mf = radon::forward(&f, &geom, 0)?;
            let mg = radon::forward(&g, &geom, 0)?;
            // pair <M f, M g>_Y against <f, B (M g)>_X
            let y = geom.data_space(0);
            let x = radon::image_space(32, 1.0);
            let lhs = y.element(mf.samples.clone())?.inner(&y.element(mg.samples.clone())?)?;
            let bg = radon::backproject(&mg, &geom, 0, 32)?;
            let rhs = f.to_element(&x)?.inner(&bg.to_element(&x)?)?;
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());
            Ok((rel <= 0.01, format!("pairing defect {rel:.2e}")))
        }),
        check("radon-linearity", || {
            let geom = Arc::new(DetectorGeometry::half_circle(1.0, 6, 12)?);
            let data = radon::Sinogram::zeros(&geom);
            let sys = radon::build_system(&geom, 16, &data, &[0.0], AdjointKind::Exact)?;
            let defect = linearity_defect(sys.block(0).op.as_ref(), 20, 29)?;
            Ok((defect <= 1e-12, format!("max rel defect {defect:.2e}")))
        }),
        check("avek-quasi-monotonicity", || {
            let (sys, x_true) = random_linear_system(4, 3, 8, 101, 0.0)?;
            let max_norm_sq = sys
                .blocks()
                .iter()
                .map(|b| b.norm_bound * b.norm_bound)
                .fold(0.0, f64::max);
            let mut config = SolverConfig::new(Method::Avek);
            config.step_size = 0.9 / max_norm_sq;
            config.max_cycles = 60;
            config.record_iterates = true;
            let outcome = solvers::run(&sys, &config, Some(&x_true))?;
            let iterates = outcome.iterates.expect("recorded");
            let n = sys.len();
            let errs: Vec<f64> = iterates
                .iter()
                .map(|x| x.sub(&x_true).map(|d| d.norm_sq()))
                .collect::<Result<_>>()?;
            let mut worst = f64::NEG_INFINITY;
            for k in n..errs.len() - 1 {
                let window = errs[k - n..k].iter().sum::<f64>() / n as f64;
                worst = worst.max(errs[k] - window);
            }
            Ok((worst <= 1e-12, format!("worst window excess {worst:.2e}")))
        }),
        check("avek-rolling-average-identity", || {
            let (sys, _) = random_linear_system(5, 2, 6, 55, 0.0)?;
            let zero = sys.image_space().zero();
            let mut state = AvekState::new(vec![zero; 5], None)?;
            let mut worst = 0.0_f64;
            for k in 0..40 {
                state.step(&sys, k % 5, 0.05, 0.0)?;
                if state.updates() >= 5 {
                    let explicit = state.explicit_average()?;
                    let dev = state.current().sub(&explicit)?.norm()
                        / explicit.norm().max(1.0);
                    worst = worst.max(dev);
                }
            }
            Ok((worst <= 1e-12, format!("max rolling deviation {worst:.2e}")))
        }),
        check("avek-collapse-to-kaczmarz", || {
            let (sys, _) = random_linear_system(3, 2, 5, 77, 0.0)?;
            let n = sys.len();
            let mut kaczmarz = SolverConfig::new(Method::Kaczmarz);
            kaczmarz.step_size = 0.1;
            kaczmarz.max_cycles = 12;
            kaczmarz.record_iterates = true;
            let reference = solvers::run(&sys, &kaczmarz, None)?;
            let ref_iter = reference.iterates.expect("recorded");

            // Seed the averaged method's initial window with the row-action
            // iterates so the first window coincides.
            let mut avek = SolverConfig::new(Method::Avek);
            avek.step_size = 0.1;
            avek.max_cycles = 12;
            avek.record_iterates = true;
            let mut weights = vec![0.0; n];
            weights[0] = 1.0;
            avek.weights = weights;
            avek.init = ref_iter[..n].to_vec();
            let collapsed = solvers::run(&sys, &avek, None)?;
            let col_iter = collapsed.iterates.expect("recorded");

            let mut worst = 0.0_f64;
            for (a, b) in ref_iter.iter().zip(&col_iter) {
                worst = worst.max(a.sub(b)?.norm());
            }
            Ok((worst <= 1e-14, format!("max trajectory gap {worst:.2e}")))
        }),
        check("single-block-collapse", || {
            let (sys, _) = random_linear_system(1, 4, 4, 13, 0.0)?;
            let mut lw = SolverConfig::new(Method::Landweber);
            lw.step_size = 0.05;
            lw.max_cycles = 30;
            lw.record_iterates = true;
            let mut avek = lw.clone();
            avek.method = Method::Avek;
            let mut iag = lw.clone();
            iag.method = Method::Iag;
            let a = solvers::run(&sys, &lw, None)?.iterates.unwrap();
            let b = solvers::run(&sys, &avek, None)?.iterates.unwrap();
            let c = solvers::run(&sys, &iag, None)?.iterates.unwrap();
            let mut worst = 0.0_f64;
            for k in 0..a.len() {
                worst = worst.max(a[k].sub(&b[k])?.norm());
                worst = worst.max(a[k].sub(&c[k])?.norm());
            }
            Ok((worst <= 1e-14, format!("max trajectory gap {worst:.2e}")))
        }),
        check("series-reciprocal-inverse", || {
            let mut worst = 0.0_f64;
            for n in 2..=5 {
                let a = seqconv::deconv_kernel(n)?;
                let b = seqconv::reciprocal(&a, 150)?;
                let p = seqconv::cauchy_product(&a, &b, 150);
                for k in 0..=150 {
                    let expect = if k == 0 { 1.0 } else { 0.0 };
                    worst = worst.max((p.coeff(k) - expect).abs());
                }
            }
            Ok((worst <= 1e-12, format!("max unit deviation {worst:.2e}")))
        }),
        check("deconv-kernel-roots-outside-disc", || {
            let mut min_modulus = f64::INFINITY;
            for n in 2..=5 {
                for root in seqconv::deconv_kernel_roots(n)? {
                    min_modulus = min_modulus.min(root.norm());
                }
            }
            Ok((
                min_modulus > 1.0 + 1e-9,
                format!("min root modulus {min_modulus:.6}"),
            ))
        }),
        check("noise-exact-level", || {
            let geom = radon::partition_boundary(&DetectorGeometry::half_circle(1.0, 8, 12)?, 2)?;
            let f = radon::make_phantom(&radon::head_phantom(), 24, 1.0)?;
            let g = radon::forward_all(&f, &geom)?;
            let (noisy, _) = radon::add_noise(&g, &geom, 0.05, 3)?;
            let (noisy2, _) = radon::add_noise(&g, &geom, 0.05, 3)?;
            let mut diff = noisy.clone();
            for (d, o) in diff.blocks.iter_mut().zip(&g.blocks) {
                for (a, b) in d.samples.iter_mut().zip(&o.samples) {
                    *a -= b;
                }
            }
            let ratio = diff.norm(&geom) / g.norm(&geom);
            let ok = (ratio - 0.05).abs() <= 1e-12 && noisy == noisy2;
            Ok((ok, format!("achieved ratio {ratio:.15}")))
        }),
        check("stopping-first-cycle-all-skip", || {
            let (sys, x_true) = random_linear_system(2, 2, 3, 21, 0.0)?;
            // Start at the solution with fake positive noise levels: all
            // residuals sit below tau * delta, so the first cycle skips
            // everything and the stopping index is n.
            let data: Vec<Element> = (0..2).map(|i| sys.data(i).clone()).collect();
            let noisy_sys = sys.with_data(data, vec![1.0, 1.0])?;
            let mut config = SolverConfig::new(Method::Avek);
            config.init = vec![x_true.clone()];
            config.max_cycles = 5;
            let outcome = solvers::run(&noisy_sys, &config, None)?;
            let ok = outcome.status == RunStatus::Stopped { k_star: 2 };
            Ok((ok, format!("status {:?}", outcome.status)))
        }),
    ]
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_battery_is_green() {
        let results = run_selftest(SelftestOptions::default());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn corrupted_adjoint_fails_only_that_check() {
        let results = run_selftest(SelftestOptions {
            corrupt_adjoint: true,
        });
        for r in &results {
            if r.name == "radon-exact-adjoint" {
                assert!(!r.passed, "corrupted adjoint slipped through");
            } else {
                assert!(r.passed, "{} should still pass: {}", r.name, r.detail);
            }
        }
    }

    #[test]
    fn battery_is_deterministic() {
        let a = run_selftest(SelftestOptions::default());
        let b = run_selftest(SelftestOptions::default());
        let fmt = |rs: &[CheckResult]| {
            rs.iter()
                .map(|r| format!("{}|{}|{}", r.name, r.passed, r.detail))
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(fmt(&a), fmt(&b));
    }
}
