//! Low-level circular-mean kernels on raw sample buffers.
//!
//! All three kernels exist in a sequential and (behind the `parallel`
//! feature) a rayon version. Parallelism is over independently owned output
//! regions (sinogram cells, grid rows) or, for the transpose scatter, over
//! fixed-size input chunks folded in chunk order — so the parallel results
//! are bit-identical to the sequential ones.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Quadrature nodes of the circle integrals: for each radius index `l`, the
/// offsets `r_l * (cos b_m, sin b_m)` of the (periodic) trapezoidal rule.
/// The node count per circle scales with the arc length over the grid
/// spacing, with a floor of [`MIN_NODES`].
pub struct CircleTable {
    offsets: Vec<Vec<(f64, f64)>>,
}

pub const MIN_NODES: usize = 64;

impl CircleTable {
    pub fn build(radius: f64, n_r: usize, grid_spacing: f64) -> Self {
        let dr = 2.0 * radius / n_r as f64;
        let offsets = (0..=n_r)
            .map(|l| {
                let r = l as f64 * dr;
                let nodes = node_count(r, grid_spacing);
                (0..nodes)
                    .map(|m| {
                        let beta = std::f64::consts::TAU * m as f64 / nodes as f64;
                        (r * beta.cos(), r * beta.sin())
                    })
                    .collect()
            })
            .collect();
        CircleTable { offsets }
    }

    pub fn nodes(&self, l: usize) -> &[(f64, f64)] {
        &self.offsets[l]
    }

    pub fn n_radii(&self) -> usize {
        self.offsets.len()
    }
}

pub fn node_count(r: f64, grid_spacing: f64) -> usize {
    MIN_NODES.max((std::f64::consts::TAU * r / grid_spacing).ceil() as usize)
}

/// The image space discretizes functions on the closed disc of the grid
/// half-width; reads and backprojection outputs outside it are zero. The
/// slack keeps points computed to lie on the boundary circle inside.
#[inline]
pub fn inside_disc(x: f64, y: f64, radius: f64) -> bool {
    x * x + y * y <= radius * radius * (1.0 + 1e-12)
}

/// Bilinear sample of the grid at physical coordinates; points outside the
/// grid or outside the disc contribute 0.
#[inline]
pub fn bilinear(f: &[f64], n_x: usize, radius: f64, inv_dx: f64, x: f64, y: f64) -> f64 {
    if !inside_disc(x, y, radius) {
        return 0.0;
    }
    let u = (x + radius) * inv_dx;
    let v = (y + radius) * inv_dx;
    let nx = n_x as f64;
    if !(u >= 0.0 && v >= 0.0 && u <= nx && v <= nx) {
        return 0.0;
    }
    let i0 = (u as usize).min(n_x - 1);
    let j0 = (v as usize).min(n_x - 1);
    let fu = u - i0 as f64;
    let fv = v - j0 as f64;
    let stride = n_x + 1;
    let base = j0 * stride + i0;
    let top = base + stride;
    (1.0 - fv) * ((1.0 - fu) * f[base] + fu * f[base + 1])
        + fv * ((1.0 - fu) * f[top] + fu * f[top + 1])
}

/// Scatter `value` onto the bilinear stencil around the physical point
/// (transpose of [`bilinear`], including the disc mask).
#[inline]
fn scatter(acc: &mut [f64], n_x: usize, radius: f64, inv_dx: f64, x: f64, y: f64, value: f64) {
    if !inside_disc(x, y, radius) {
        return;
    }
    let u = (x + radius) * inv_dx;
    let v = (y + radius) * inv_dx;
    let nx = n_x as f64;
    if !(u >= 0.0 && v >= 0.0 && u <= nx && v <= nx) {
        return;
    }
    let i0 = (u as usize).min(n_x - 1);
    let j0 = (v as usize).min(n_x - 1);
    let fu = u - i0 as f64;
    let fv = v - j0 as f64;
    let stride = n_x + 1;
    let base = j0 * stride + i0;
    let top = base + stride;
    acc[base] += (1.0 - fu) * (1.0 - fv) * value;
    acc[base + 1] += fu * (1.0 - fv) * value;
    acc[top] += (1.0 - fu) * fv * value;
    acc[top + 1] += fu * fv * value;
}

#[inline]
fn mean_over_circle(
    f: &[f64],
    n_x: usize,
    radius: f64,
    inv_dx: f64,
    z: (f64, f64),
    nodes: &[(f64, f64)],
) -> f64 {
    let mut sum = 0.0;
    for &(ox, oy) in nodes {
        sum += bilinear(f, n_x, radius, inv_dx, z.0 + ox, z.1 + oy);
    }
    sum / nodes.len() as f64
}

/// Forward map: circular means of the grid `f` for every detector in
/// `detectors` and every tabulated radius. `out` is detector-major,
/// `detectors.len() * table.n_radii()` long.
pub fn circular_means_seq(
    f: &[f64],
    n_x: usize,
    radius: f64,
    detectors: &[(f64, f64)],
    table: &CircleTable,
    out: &mut [f64],
) {
    let n_radii = table.n_radii();
    let inv_dx = n_x as f64 / (2.0 * radius);
    for (row, chunk) in out.chunks_mut(n_radii).enumerate() {
        let z = detectors[row];
        for (l, cell) in chunk.iter_mut().enumerate() {
            *cell = mean_over_circle(f, n_x, radius, inv_dx, z, table.nodes(l));
        }
    }
}

#[cfg(feature = "parallel")]
pub fn circular_means_par(
    f: &[f64],
    n_x: usize,
    radius: f64,
    detectors: &[(f64, f64)],
    table: &CircleTable,
    out: &mut [f64],
) {
    let n_radii = table.n_radii();
    let inv_dx = n_x as f64 / (2.0 * radius);
    out.par_chunks_mut(n_radii).enumerate().for_each(|(row, chunk)| {
        let z = detectors[row];
        for (l, cell) in chunk.iter_mut().enumerate() {
            *cell = mean_over_circle(f, n_x, radius, inv_dx, z, table.nodes(l));
        }
    });
}

/// Dispatching forward kernel: parallel when the feature is enabled.
pub fn circular_means(
    f: &[f64],
    n_x: usize,
    radius: f64,
    detectors: &[(f64, f64)],
    table: &CircleTable,
    out: &mut [f64],
) {
    #[cfg(feature = "parallel")]
    circular_means_par(f, n_x, radius, detectors, table, out);
    #[cfg(not(feature = "parallel"))]
    circular_means_seq(f, n_x, radius, detectors, table, out);
}

#[inline]
fn radial_lerp(row: &[f64], n_r: usize, t: f64) -> f64 {
    if t > n_r as f64 {
        return 0.0;
    }
    let l0 = (t as usize).min(n_r - 1);
    let frac = t - l0 as f64;
    row[l0] + frac * (row[l0 + 1] - row[l0])
}

#[inline]
fn backproject_point(
    g: &[f64],
    detectors: &[(f64, f64)],
    n_r: usize,
    inv_dr: f64,
    radius: f64,
    weight: f64,
    x: f64,
    y: f64,
) -> f64 {
    if !inside_disc(x, y, radius) {
        return 0.0;
    }
    let stride = n_r + 1;
    let mut acc = 0.0;
    for (row, &(zx, zy)) in detectors.iter().enumerate() {
        let dist = ((zx - x) * (zx - x) + (zy - y) * (zy - y)).sqrt();
        acc += radial_lerp(&g[row * stride..(row + 1) * stride], n_r, dist * inv_dr);
    }
    weight * acc
}

/// Continuous-adjoint backprojection: for every grid point, sums
/// `2 * g(z, ||z - x||) * ds` over the detectors, interpolating `g`
/// linearly in the radial variable; distances beyond the radial table
/// contribute 0. `out` is a `(n_x+1)^2` grid buffer.
pub fn backproject_seq(
    g: &[f64],
    detectors: &[(f64, f64)],
    n_r: usize,
    radius: f64,
    arc_spacing: f64,
    n_x: usize,
    out: &mut [f64],
) {
    let dx = 2.0 * radius / n_x as f64;
    let inv_dr = n_r as f64 / (2.0 * radius);
    let weight = 2.0 * arc_spacing;
    for (j2, row) in out.chunks_mut(n_x + 1).enumerate() {
        let y = -radius + j2 as f64 * dx;
        for (j1, cell) in row.iter_mut().enumerate() {
            let x = -radius + j1 as f64 * dx;
            *cell = backproject_point(g, detectors, n_r, inv_dr, radius, weight, x, y);
        }
    }
}

#[cfg(feature = "parallel")]
pub fn backproject_par(
    g: &[f64],
    detectors: &[(f64, f64)],
    n_r: usize,
    radius: f64,
    arc_spacing: f64,
    n_x: usize,
    out: &mut [f64],
) {
    let dx = 2.0 * radius / n_x as f64;
    let inv_dr = n_r as f64 / (2.0 * radius);
    let weight = 2.0 * arc_spacing;
    out.par_chunks_mut(n_x + 1).enumerate().for_each(|(j2, row)| {
        let y = -radius + j2 as f64 * dx;
        for (j1, cell) in row.iter_mut().enumerate() {
            let x = -radius + j1 as f64 * dx;
            *cell = backproject_point(g, detectors, n_r, inv_dr, radius, weight, x, y);
        }
    });
}

pub fn backproject(
    g: &[f64],
    detectors: &[(f64, f64)],
    n_r: usize,
    radius: f64,
    arc_spacing: f64,
    n_x: usize,
    out: &mut [f64],
) {
    #[cfg(feature = "parallel")]
    backproject_par(g, detectors, n_r, radius, arc_spacing, n_x, out);
    #[cfg(not(feature = "parallel"))]
    backproject_seq(g, detectors, n_r, radius, arc_spacing, n_x, out);
}

/// Sinogram cells per scatter chunk. Fixed (independent of thread count) so
/// the chunk decomposition, and with it the summation order, never changes.
const SCATTER_CHUNK: usize = 256;

fn scatter_chunk(
    g: &[f64],
    detectors: &[(f64, f64)],
    cell_weights: &[f64],
    table: &CircleTable,
    n_x: usize,
    radius: f64,
    range: std::ops::Range<usize>,
) -> Vec<f64> {
    let n_radii = table.n_radii();
    let inv_dx = n_x as f64 / (2.0 * radius);
    let mut acc = vec![0.0; (n_x + 1) * (n_x + 1)];
    for cell in range {
        let value = g[cell];
        if value == 0.0 {
            continue;
        }
        let row = cell / n_radii;
        let l = cell % n_radii;
        let nodes = table.nodes(l);
        let coeff = value * cell_weights[l] / nodes.len() as f64;
        if coeff == 0.0 {
            continue;
        }
        let z = detectors[row];
        for &(ox, oy) in nodes {
            scatter(&mut acc, n_x, radius, inv_dx, z.0 + ox, z.1 + oy, coeff);
        }
    }
    acc
}

/// Exact transpose of [`circular_means`] under the weighted inner products:
/// every bilinear read becomes a weighted scatter. `cell_weights[l]` must be
/// `w_Y(l) / w_X`, the ratio of the data-space quadrature weight at radius
/// index `l` to the image-space cell weight.
pub fn adjoint_scatter_seq(
    g: &[f64],
    detectors: &[(f64, f64)],
    cell_weights: &[f64],
    table: &CircleTable,
    n_x: usize,
    radius: f64,
    out: &mut [f64],
) {
    out.fill(0.0);
    let cells = g.len();
    let mut start = 0;
    while start < cells {
        let range = start..cells.min(start + SCATTER_CHUNK);
        let part = scatter_chunk(g, detectors, cell_weights, table, n_x, radius, range);
        for (o, p) in out.iter_mut().zip(&part) {
            *o += p;
        }
        start += SCATTER_CHUNK;
    }
}

#[cfg(feature = "parallel")]
pub fn adjoint_scatter_par(
    g: &[f64],
    detectors: &[(f64, f64)],
    cell_weights: &[f64],
    table: &CircleTable,
    n_x: usize,
    radius: f64,
    out: &mut [f64],
) {
    out.fill(0.0);
    let cells = g.len();
    let ranges: Vec<std::ops::Range<usize>> = (0..cells)
        .step_by(SCATTER_CHUNK)
        .map(|s| s..cells.min(s + SCATTER_CHUNK))
        .collect();
    let parts: Vec<Vec<f64>> = ranges
        .into_par_iter()
        .map(|range| scatter_chunk(g, detectors, cell_weights, table, n_x, radius, range))
        .collect();
    // Ordered fold keeps the summation order identical to the sequential path.
    for part in parts {
        for (o, p) in out.iter_mut().zip(&part) {
            *o += p;
        }
    }
}

pub fn adjoint_scatter(
    g: &[f64],
    detectors: &[(f64, f64)],
    cell_weights: &[f64],
    table: &CircleTable,
    n_x: usize,
    radius: f64,
    out: &mut [f64],
) {
    #[cfg(feature = "parallel")]
    adjoint_scatter_par(g, detectors, cell_weights, table, n_x, radius, out);
    #[cfg(not(feature = "parallel"))]
    adjoint_scatter_seq(g, detectors, cell_weights, table, n_x, radius, out);
}
