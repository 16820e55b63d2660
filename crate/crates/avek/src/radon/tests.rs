use super::*;
use crate::opsys;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_of_zero_is_zero() {
    let geom = DetectorGeometry::half_circle(1.0, 8, 16).unwrap();
    let f = GridImage::zeros(32, 1.0).unwrap();
    let g = forward(&f, &geom, 0).unwrap();
    assert!(g.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn forward_radius_zero_row_is_point_sample() {
    // At r = 0 the integrand is constant in the angle, so the circular mean
    // equals the bilinear sample at the detector position.
    let geom = DetectorGeometry::full_circle(1.0, 8, 20).unwrap();
    let f = GridImage::from_fn(64, 1.0, |x, y| {
        (-((x - 0.5) * (x - 0.5) + y * y) / 0.0625).exp()
    })
    .unwrap();
    let g = forward(&f, &geom, 0).unwrap();
    for (row, &k) in geom.block_detectors(0).iter().enumerate() {
        let (zx, zy) = geom.detector_position(k);
        let expect = f.bilinear(zx, zy);
        let got = g.row(row, geom.n_r())[0];
        assert!(
            (got - expect).abs() <= 1e-13 * expect.abs().max(1.0),
            "row {row}: {got} vs {expect}"
        );
    }
}

/// High-resolution trapezoid quadrature of the closed-form circular mean of
/// a Gaussian, independent of the grid/interpolation path.
fn gaussian_circle_mean_oracle(center: (f64, f64), sigma_sq: f64, z: (f64, f64), r: f64) -> f64 {
    let nodes = 200_000;
    let mut sum = 0.0;
    for m in 0..nodes {
        let beta = std::f64::consts::TAU * m as f64 / nodes as f64;
        let px = z.0 + r * beta.cos() - center.0;
        let py = z.1 + r * beta.sin() - center.1;
        sum += (-(px * px + py * py) / sigma_sq).exp();
    }
    sum / nodes as f64
}

#[test]
fn forward_matches_gaussian_closed_form() {
    // Gaussian tucked well inside the disc, so that the closed-form mean
    // (over the full circle) and the disc-supported discrete operator agree.
    let sigma_sq = 0.04; // sigma = 0.2
    let center = (0.3, 0.0);
    let geom = DetectorGeometry::full_circle(1.0, 8, 20).unwrap();
    let f = GridImage::from_fn(128, 1.0, |x, y| {
        (-((x - center.0) * (x - center.0) + (y - center.1) * (y - center.1)) / sigma_sq).exp()
    })
    .unwrap();
    let g = forward(&f, &geom, 0).unwrap();
    let z = geom.detector_position(0); // (1, 0)
    for l in [5usize, 7, 9] {
        let r = geom.radius_at(l);
        let oracle = gaussian_circle_mean_oracle(center, sigma_sq, z, r);
        let got = g.row(0, geom.n_r())[l];
        let rel = (got - oracle).abs() / oracle;
        assert!(rel <= 1e-2, "r = {r}: {got} vs oracle {oracle} (rel {rel:.2e})");
    }
}

#[test]
fn backproject_of_zero_is_zero() {
    let geom = DetectorGeometry::half_circle(1.0, 8, 16).unwrap();
    let g = Sinogram::zeros(&geom);
    let img = backproject(&g.blocks[0], &geom, 0, 32).unwrap();
    assert!(img.samples().iter().all(|&v| v == 0.0));
}

#[test]
fn backproject_of_ones_is_twice_arc_length_in_range() {
    let geom = DetectorGeometry::half_circle(1.0, 8, 16).unwrap();
    let mut g = Sinogram::zeros(&geom);
    for v in &mut g.blocks[0].samples {
        *v = 1.0;
    }
    let img = backproject(&g.blocks[0], &geom, 0, 32).unwrap();
    let expect = 2.0 * geom.block_arc_length(0);
    let positions: Vec<(f64, f64)> = geom
        .block_detectors(0)
        .iter()
        .map(|&k| geom.detector_position(k))
        .collect();
    let mut checked = 0;
    for j2 in 0..=32 {
        for j1 in 0..=32 {
            let (x, y) = img.position(j1, j2);
            if x * x + y * y > geom.radius() * geom.radius() {
                assert_eq!(img.get(j1, j2), 0.0, "({j1},{j2}) outside the disc");
                continue;
            }
            let max_dist = positions
                .iter()
                .map(|&(zx, zy)| ((zx - x).powi(2) + (zy - y).powi(2)).sqrt())
                .fold(0.0, f64::max);
            if max_dist <= 2.0 * geom.radius() {
                let got = img.get(j1, j2);
                assert!(
                    (got - expect).abs() <= 1e-12 * expect,
                    "({j1},{j2}): {got} vs {expect}"
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 400, "too few in-range pixels: {checked}");
}

fn smooth_probe_pair(
    geom: &DetectorGeometry,
    n_x: usize,
) -> (GridImage, SinogramBlock) {
    let f = GridImage::from_fn(n_x, geom.radius(), |x, y| {
        (-((x - 0.1) * (x - 0.1) + (y - 0.2) * (y - 0.2)) / 0.09).exp()
    })
    .unwrap();
    let n_r = geom.n_r();
    let dets = geom.block_detectors(0);
    let mut samples = Vec::with_capacity(dets.len() * (n_r + 1));
    for &k in dets {
        let angle = geom.detector_angle(k);
        for l in 0..=n_r {
            let r = geom.radius_at(l);
            samples.push((-(r - 0.7) * (r - 0.7) / 0.1).exp() * (1.0 + 0.5 * angle.sin()));
        }
    }
    (
        f,
        SinogramBlock {
            detectors: dets.to_vec(),
            samples,
        },
    )
}

fn backproject_pairing_defect(geom: &DetectorGeometry, n_x: usize) -> f64 {
    let (f, g) = smooth_probe_pair(geom, n_x);
    let mf = forward(&f, geom, 0).unwrap();
    let bg = backproject(&g, geom, 0, n_x).unwrap();
    let y = geom.data_space(0);
    let x = image_space(n_x, geom.radius());
    let lhs = y
        .element(mf.samples)
        .unwrap()
        .inner(&y.element(g.samples.clone()).unwrap())
        .unwrap();
    let rhs = x
        .element(f.samples().to_vec())
        .unwrap()
        .inner(&x.element(bg.samples().to_vec()).unwrap())
        .unwrap();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs())
}

#[test]
fn backprojection_is_approximate_adjoint_and_refines() {
    let coarse = DetectorGeometry::half_circle(1.0, 16, 32).unwrap();
    let defect_coarse = backproject_pairing_defect(&coarse, 32);
    assert!(defect_coarse <= 0.01, "coarse pairing defect {defect_coarse:.3e}");

    let fine = DetectorGeometry::half_circle(1.0, 16, 64).unwrap();
    let defect_fine = backproject_pairing_defect(&fine, 64);
    assert!(
        defect_fine < defect_coarse,
        "no refinement improvement: {defect_coarse:.3e} -> {defect_fine:.3e}"
    );
}

#[test]
fn exact_adjoint_dot_product_identity() {
    let geom = Arc::new(
        partition_boundary(&DetectorGeometry::half_circle(1.0, 16, 32).unwrap(), 4).unwrap(),
    );
    let data = Sinogram::zeros(&geom);
    let sys = build_system(&geom, 32, &data, &vec![0.0; 4], AdjointKind::Exact).unwrap();
    for i in 0..sys.len() {
        let at = sys.image_space().zero();
        let dev = opsys::adjoint_consistency(sys.block(i).op.as_ref(), &at, 25, 11 + i as u64)
            .unwrap();
        assert!(dev <= 1e-10, "block {i}: adjoint deviation {dev:.3e}");
    }
}

#[test]
fn exact_adjoint_scatter_footprint() {
    let geom = DetectorGeometry::full_circle(1.0, 4, 8).unwrap();
    let n_x = 32;
    let mut g = Sinogram::zeros(&geom);
    let l = 4; // r = 1.0
    g.blocks[0].samples[l] = 1.0; // detector row 0, radius index l
    let img = exact_adjoint(&g.blocks[0], &geom, 0, n_x).unwrap();
    let nonzero = img.samples().iter().filter(|&&v| v != 0.0).count();
    let n_beta = kernel::node_count(geom.radius_at(l), 2.0 / n_x as f64);
    assert!(nonzero > 0);
    assert!(
        nonzero <= 4 * n_beta,
        "footprint {nonzero} exceeds 4 * {n_beta}"
    );
}

#[test]
fn exact_adjoint_approaches_backprojection_under_refinement() {
    // On a smooth data block the two adjoints discretize the same integral,
    // so their relative gap shrinks when n_x and n_r are refined together.
    let mut gaps = Vec::new();
    for (n_x, n_r) in [(32, 32), (64, 64)] {
        let geom = DetectorGeometry::half_circle(1.0, 16, n_r).unwrap();
        let (_, g) = smooth_probe_pair(&geom, n_x);
        let exact = exact_adjoint(&g, &geom, 0, n_x).unwrap();
        let cont = backproject(&g, &geom, 0, n_x).unwrap();
        let x = image_space(n_x, 1.0);
        let e = x.element(exact.samples().to_vec()).unwrap();
        let c = x.element(cont.samples().to_vec()).unwrap();
        gaps.push(e.sub(&c).unwrap().norm() / c.norm());
    }
    assert!(
        gaps[1] < gaps[0],
        "no refinement improvement: {:.3e} -> {:.3e}",
        gaps[0],
        gaps[1]
    );
}

#[test]
fn partition_examples() {
    let geom = DetectorGeometry::half_circle(1.0, 100, 8).unwrap();
    assert_eq!(geom.detectors().len(), 100);

    let per_det = partition_boundary(&geom, 100).unwrap();
    assert_eq!(per_det.n_blocks(), 100);
    assert!(per_det.partition.iter().all(|k| k.len() == 1));

    let single = partition_boundary(&geom, 1).unwrap();
    assert_eq!(single.n_blocks(), 1);
    assert_eq!(single.block_detectors(0).len(), 100);

    let four = partition_boundary(&geom, 4).unwrap();
    assert_eq!(four.n_blocks(), 4);
    for i in 0..4 {
        assert_eq!(four.block_detectors(i).len(), 25);
        // contiguous
        let k = four.block_detectors(i);
        assert!(k.windows(2).all(|w| w[1] == w[0] + 1));
    }

    assert!(partition_boundary(&geom, 101).is_err());
}

#[test]
fn partition_covers_disjointly() {
    let geom = DetectorGeometry::half_circle(1.0, 10, 8).unwrap();
    let part = partition_boundary(&geom, 3).unwrap();
    let mut all: Vec<usize> = part.partition.iter().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, geom.detectors());
}

#[test]
fn half_circle_layout_is_symmetric() {
    let geom = DetectorGeometry::half_circle(1.0, 100, 200).unwrap();
    assert_eq!(geom.detectors().len(), 100);
    for &k in geom.detectors() {
        let (_, y) = geom.detector_position(k);
        assert!(y > 0.0);
    }
    // first and last detector mirror each other about the vertical axis
    let first = geom.detector_angle(geom.detectors()[0]);
    let last = geom.detector_angle(*geom.detectors().last().unwrap());
    assert!((first + last - std::f64::consts::PI).abs() < 1e-12);
}

#[test]
fn phantom_empty_spec_is_zero() {
    let img = make_phantom(&[], 32, 1.0).unwrap();
    assert!(img.samples().iter().all(|&v| v == 0.0));
}

#[test]
fn phantom_centered_disc() {
    let disc = Ellipse {
        center: (0.0, 0.0),
        axes: (0.5, 0.5),
        angle: 0.0,
        value: 1.0,
    };
    let img = make_phantom(&[disc], 64, 1.0).unwrap();
    assert_eq!(img.get(32, 32), 1.0); // center
    for j2 in 0..=64 {
        for j1 in 0..=64 {
            let (x, y) = img.position(j1, j2);
            if x * x + y * y > 0.25 {
                assert_eq!(img.get(j1, j2), 0.0, "({j1},{j2}) outside disc");
            }
        }
    }
}

#[test]
fn head_phantom_supported_inside_unit_disc() {
    let img = make_phantom(&head_phantom(), 128, 1.0).unwrap();
    let mut max_radius = 0.0_f64;
    let mut any = false;
    for j2 in 0..=128 {
        for j1 in 0..=128 {
            if img.get(j1, j2) != 0.0 {
                any = true;
                let (x, y) = img.position(j1, j2);
                max_radius = max_radius.max((x * x + y * y).sqrt());
            }
        }
    }
    assert!(any);
    assert!(max_radius < 1.0, "support reaches radius {max_radius}");
}

#[test]
fn noise_level_zero_is_identity() {
    let geom = DetectorGeometry::half_circle(1.0, 8, 16).unwrap();
    let f = make_phantom(&head_phantom(), 32, 1.0).unwrap();
    let g = forward_all(&f, &geom).unwrap();
    let (noisy, deltas) = add_noise(&g, &geom, 0.0, 1).unwrap();
    assert_eq!(noisy, g);
    assert!(deltas.iter().all(|&d| d == 0.0));
}

#[test]
fn noise_achieves_exact_relative_level() {
    let geom = partition_boundary(&DetectorGeometry::half_circle(1.0, 16, 24).unwrap(), 4).unwrap();
    let f = make_phantom(&head_phantom(), 48, 1.0).unwrap();
    let g = forward_all(&f, &geom).unwrap();
    let (noisy, deltas) = add_noise(&g, &geom, 0.05, 7).unwrap();

    let mut diff = noisy.clone();
    for (d, o) in diff.blocks.iter_mut().zip(&g.blocks) {
        for (a, b) in d.samples.iter_mut().zip(&o.samples) {
            *a -= b;
        }
    }
    let ratio = diff.norm(&geom) / g.norm(&geom);
    assert!((ratio - 0.05).abs() <= 1e-12, "ratio {ratio}");

    // per-block noise norms are consistent with the global perturbation
    let total: f64 = deltas.iter().map(|d| d * d).sum::<f64>();
    assert!((total.sqrt() - diff.norm(&geom)).abs() <= 1e-12);

    // determinism
    let (noisy2, deltas2) = add_noise(&g, &geom, 0.05, 7).unwrap();
    assert_eq!(noisy, noisy2);
    assert_eq!(deltas, deltas2);
}

#[test]
fn noise_on_zero_data_is_rejected() {
    let geom = DetectorGeometry::half_circle(1.0, 8, 16).unwrap();
    let g = Sinogram::zeros(&geom);
    assert!(add_noise(&g, &geom, 0.05, 1).is_err());
}

#[test]
fn norm_estimates_respect_arc_length_bound() {
    // The continuous operator satisfies ||M_i|| <= sqrt(|arc_i|); the
    // discretization may overshoot only within quadrature tolerance.
    let geom = Arc::new(
        partition_boundary(&DetectorGeometry::half_circle(1.0, 16, 32).unwrap(), 4).unwrap(),
    );
    let data = Sinogram::zeros(&geom);
    let mut sys = build_system(&geom, 48, &data, &vec![0.0; 4], AdjointKind::Exact).unwrap();
    sys.estimate_norm_bounds(40, 3).unwrap();
    for i in 0..sys.len() {
        let bound = geom.block_arc_length(i).sqrt();
        let est = sys.block(i).norm_bound;
        assert!(
            est <= 1.05 * bound,
            "block {i}: estimate {est} vs arc bound {bound}"
        );
        assert!(est > 0.1 * bound, "block {i}: estimate {est} suspiciously small");
    }
}

#[test]
fn forward_and_adjoints_are_linear() {
    let geom = Arc::new(DetectorGeometry::half_circle(1.0, 8, 16).unwrap());
    let data = Sinogram::zeros(&geom);
    for kind in [AdjointKind::Exact, AdjointKind::Continuous] {
        let sys = build_system(&geom, 24, &data, &[0.0], kind).unwrap();
        let op = sys.block(0).op.as_ref();
        assert!(opsys::linearity_defect(op, 20, 5).unwrap() <= 1e-12);

        // adjoint linearity
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let at = sys.image_space().zero();
        for _ in 0..10 {
            let w1 = op.range().random_normal(&mut rng);
            let w2 = op.range().random_normal(&mut rng);
            let a = rng.gen_range(-2.0..2.0);
            let b = rng.gen_range(-2.0..2.0);
            let mut combo = w1.scaled(a);
            combo.add_scaled(b, &w2).unwrap();
            let lhs = op.adjoint_deriv_apply(&at, &combo).unwrap();
            let mut rhs = op.adjoint_deriv_apply(&at, &w1).unwrap().scaled(a);
            rhs.add_scaled(b, &op.adjoint_deriv_apply(&at, &w2).unwrap())
                .unwrap();
            let scale = lhs.norm().max(rhs.norm()).max(1e-30);
            assert!(lhs.sub(&rhs).unwrap().norm() / scale <= 1e-12);
        }
    }
}

#[test]
fn rotating_phantom_shifts_sinogram_columns() {
    let geom = DetectorGeometry::full_circle(1.0, 36, 24).unwrap();
    let shift = std::f64::consts::TAU / 36.0;
    let blob = |cx: f64, cy: f64| {
        move |x: f64, y: f64| (-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / 0.02).exp()
    };
    let c = (0.35, 0.1);
    let rotated = (
        c.0 * shift.cos() - c.1 * shift.sin(),
        c.0 * shift.sin() + c.1 * shift.cos(),
    );
    let f1 = GridImage::from_fn(96, 1.0, blob(c.0, c.1)).unwrap();
    let f2 = GridImage::from_fn(96, 1.0, blob(rotated.0, rotated.1)).unwrap();
    let g1 = forward(&f1, &geom, 0).unwrap();
    let g2 = forward(&f2, &geom, 0).unwrap();

    let n_r = geom.n_r();
    let scale: f64 = g1.samples.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut dev_sq = 0.0;
    for k in 0..36 {
        let prev = (k + 35) % 36;
        for l in 0..=n_r {
            let d = g2.row(k, n_r)[l] - g1.row(prev, n_r)[l];
            dev_sq += d * d;
        }
    }
    let rel = dev_sq.sqrt() / scale;
    assert!(rel <= 1e-3, "cyclic shift deviation {rel:.3e}");
}

#[test]
fn grid_radius_mismatch_rejected() {
    let geom = DetectorGeometry::half_circle(1.0, 8, 16).unwrap();
    let f = GridImage::zeros(16, 2.0).unwrap();
    assert!(forward(&f, &geom, 0).is_err());
}

#[test]
fn system_roundtrip_through_elements() {
    let geom = Arc::new(DetectorGeometry::half_circle(1.0, 8, 16).unwrap());
    let f = make_phantom(&head_phantom(), 24, 1.0).unwrap();
    let g = forward_all(&f, &geom).unwrap();
    let sys = build_system(&geom, 24, &g, &[0.0], AdjointKind::Exact).unwrap();
    // the data elements reproduce the sinogram norm
    let e = g.block_to_element(&geom, 0).unwrap();
    assert!((e.norm() - g.norm(&geom)).abs() <= 1e-12 * g.norm(&geom));
    // residual at the generating image is zero
    let x = f.to_element(sys.image_space()).unwrap();
    assert!(sys.residual(0, &x).unwrap().norm() <= 1e-12 * e.norm());
}
