//! Discrete circular Radon transform on a square grid, with detector
//! geometry, phantoms and noise — the concrete limited-view tomography
//! problem the solvers are exercised on.
//!
//! A function supported in the disc `D(R)` is sampled on the uniform
//! `(N_x+1) x (N_x+1)` grid over `[-R, R]^2` ([`GridImage`]). Detectors sit
//! on the boundary circle and record averages of the function over circles
//! of radii `l * 2R / N_r` ([`Sinogram`]), computed by the periodic
//! trapezoidal rule with bilinear sampling of the grid ([`forward`]). Two
//! adjoints are available: the discretized continuous adjoint
//! ([`backproject`], `(M*g)(x) = 2 \int g(z, |z-x|) ds(z)`), and the exact
//! transpose of the discrete forward map under the weighted discrete inner
//! products ([`exact_adjoint`]).
//!
//! The image space carries the grid cell area as inner-product weight; the
//! data spaces carry the quadrature weights `4 pi r dr ds` per sample, whose
//! density vanishes at `r = 0`.

pub mod kernel;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::opsys::{BlockOperatorSystem, Operator, OperatorBlock};
use crate::space::{Element, Space, SpaceTag};
use crate::{Error, Result};

use kernel::CircleTable;

/// Square sample grid over `[-R, R]^2`; entry `(j1, j2)` sits at
/// `(-R + j1 dx, -R + j2 dx)` with `dx = 2R / n_x`. Stored row-major in
/// `j2` (the y index).
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    n_x: usize,
    radius: f64,
    samples: Vec<f64>,
}

impl GridImage {
    pub fn zeros(n_x: usize, radius: f64) -> Result<Self> {
        if n_x < 2 {
            return Err(Error::InvalidArgument("grid needs n_x >= 2".into()));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidArgument("grid radius must be positive".into()));
        }
        Ok(GridImage {
            n_x,
            radius,
            samples: vec![0.0; (n_x + 1) * (n_x + 1)],
        })
    }

    pub fn from_samples(n_x: usize, radius: f64, samples: Vec<f64>) -> Result<Self> {
        let mut img = Self::zeros(n_x, radius)?;
        if samples.len() != img.samples.len() {
            return Err(Error::DimensionMismatch {
                expected: img.samples.len(),
                found: samples.len(),
                context: "grid image samples".into(),
            });
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("grid image samples".into()));
        }
        img.samples = samples;
        Ok(img)
    }

    /// Sample `f(x, y)` at every grid point.
    pub fn from_fn(n_x: usize, radius: f64, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut img = Self::zeros(n_x, radius)?;
        let dx = img.spacing();
        for j2 in 0..=n_x {
            for j1 in 0..=n_x {
                let x = -radius + j1 as f64 * dx;
                let y = -radius + j2 as f64 * dx;
                img.samples[j2 * (n_x + 1) + j1] = f(x, y);
            }
        }
        if !img.samples.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("grid image samples".into()));
        }
        Ok(img)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.radius / self.n_x as f64
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn get(&self, j1: usize, j2: usize) -> f64 {
        self.samples[j2 * (self.n_x + 1) + j1]
    }

    pub fn position(&self, j1: usize, j2: usize) -> (f64, f64) {
        let dx = self.spacing();
        (-self.radius + j1 as f64 * dx, -self.radius + j2 as f64 * dx)
    }

    /// Bilinear sample at physical coordinates; 0 outside the grid.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let inv_dx = self.n_x as f64 / (2.0 * self.radius);
        kernel::bilinear(&self.samples, self.n_x, self.radius, inv_dx, x, y)
    }

    pub fn to_element(&self, space: &Arc<Space>) -> Result<Element> {
        space.element(self.samples.clone())
    }

    pub fn from_element(n_x: usize, radius: f64, e: &Element) -> Result<Self> {
        Self::from_samples(n_x, radius, e.as_slice().to_vec())
    }
}

/// The image space of a grid: uniform weight `dx^2` (cell area).
pub fn image_space(n_x: usize, radius: f64) -> Arc<Space> {
    let dx = 2.0 * radius / n_x as f64;
    Space::uniform(SpaceTag::image(), (n_x + 1) * (n_x + 1), dx * dx)
}

/// Detector layout on the boundary circle and the radial sampling, plus the
/// partition of the observable detectors into sub-problem blocks.
///
/// Detector `k` (out of `n_phi` equally spaced positions on the full circle)
/// sits at angle `offset + 2 pi k / n_phi`. The observable detectors are a
/// subset of these positions; the partition splits them into disjoint,
/// contiguous index sets covering all of them.
#[derive(Clone, Debug)]
pub struct DetectorGeometry {
    radius: f64,
    n_phi: usize,
    angle_offset: f64,
    n_r: usize,
    detectors: Vec<usize>,
    partition: Vec<Vec<usize>>,
}

impl DetectorGeometry {
    /// All `n_phi` detectors on the full circle, one block.
    pub fn full_circle(radius: f64, n_phi: usize, n_r: usize) -> Result<Self> {
        Self::with_detectors(radius, n_phi, 0.0, n_r, (0..n_phi).collect())
    }

    /// Detectors of the `n_phi`-point layout whose angles fall in
    /// `[arc_start, arc_end)` (angles normalized to `[0, 2 pi)`).
    pub fn arc(
        radius: f64,
        n_phi: usize,
        angle_offset: f64,
        n_r: usize,
        arc_start: f64,
        arc_end: f64,
    ) -> Result<Self> {
        if !(arc_start < arc_end) {
            return Err(Error::InvalidArgument("empty observable arc".into()));
        }
        let detectors: Vec<usize> = (0..n_phi)
            .filter(|&k| {
                let angle = (angle_offset + std::f64::consts::TAU * k as f64 / n_phi as f64)
                    .rem_euclid(std::f64::consts::TAU);
                angle >= arc_start && angle < arc_end
            })
            .collect();
        Self::with_detectors(radius, n_phi, angle_offset, n_r, detectors)
    }

    /// `m` detectors spread evenly over the open upper half circle: the
    /// full-circle layout has `2m` positions, shifted by half a spacing so
    /// exactly `m` of them satisfy `z_2 > 0`, symmetric about the top.
    pub fn half_circle(radius: f64, m: usize, n_r: usize) -> Result<Self> {
        let n_phi = 2 * m;
        let offset = std::f64::consts::PI / n_phi as f64;
        Self::arc(radius, n_phi, offset, n_r, 0.0, std::f64::consts::PI)
    }

    fn with_detectors(
        radius: f64,
        n_phi: usize,
        angle_offset: f64,
        n_r: usize,
        detectors: Vec<usize>,
    ) -> Result<Self> {
        if n_phi == 0 || detectors.is_empty() {
            return Err(Error::InvalidArgument("geometry needs at least one detector".into()));
        }
        if n_r < 1 {
            return Err(Error::InvalidArgument("geometry needs n_r >= 1".into()));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidArgument("geometry radius must be positive".into()));
        }
        let partition = vec![detectors.clone()];
        Ok(DetectorGeometry {
            radius,
            n_phi,
            angle_offset,
            n_r,
            detectors,
            partition,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn n_phi(&self) -> usize {
        self.n_phi
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    /// Observable detector indices (into the full-circle layout).
    pub fn detectors(&self) -> &[usize] {
        &self.detectors
    }

    pub fn n_blocks(&self) -> usize {
        self.partition.len()
    }

    pub fn block_detectors(&self, i: usize) -> &[usize] {
        &self.partition[i]
    }

    pub fn detector_angle(&self, k: usize) -> f64 {
        self.angle_offset + std::f64::consts::TAU * k as f64 / self.n_phi as f64
    }

    pub fn detector_position(&self, k: usize) -> (f64, f64) {
        let a = self.detector_angle(k);
        (self.radius * a.cos(), self.radius * a.sin())
    }

    /// Arc length per detector, `2 pi R / n_phi`.
    pub fn arc_spacing(&self) -> f64 {
        std::f64::consts::TAU * self.radius / self.n_phi as f64
    }

    pub fn radial_spacing(&self) -> f64 {
        2.0 * self.radius / self.n_r as f64
    }

    pub fn radius_at(&self, l: usize) -> f64 {
        l as f64 * self.radial_spacing()
    }

    /// Arc length of detection curve `i`.
    pub fn block_arc_length(&self, i: usize) -> f64 {
        self.partition[i].len() as f64 * self.arc_spacing()
    }

    /// Quadrature weight of radius index `l`: `4 pi r_l c_l dr ds` with
    /// trapezoidal end coefficients. The weight at `r = 0` vanishes with the
    /// measure density.
    pub fn radial_weight(&self, l: usize) -> f64 {
        let trap = if l == 0 || l == self.n_r { 0.5 } else { 1.0 };
        4.0 * std::f64::consts::PI * self.radius_at(l) * trap * self.radial_spacing()
            * self.arc_spacing()
    }

    /// The weighted data space `Y_i` of block `i`.
    pub fn data_space(&self, i: usize) -> Arc<Space> {
        let rows = self.partition[i].len();
        let mut weights = Vec::with_capacity(rows * (self.n_r + 1));
        for _ in 0..rows {
            for l in 0..=self.n_r {
                weights.push(self.radial_weight(l));
            }
        }
        Space::weighted(SpaceTag::data_block(i), weights)
    }

    fn block_positions(&self, i: usize) -> Vec<(f64, f64)> {
        self.partition[i]
            .iter()
            .map(|&k| self.detector_position(k))
            .collect()
    }

    fn circle_table(&self, n_x: usize) -> CircleTable {
        CircleTable::build(self.radius, self.n_r, 2.0 * self.radius / n_x as f64)
    }
}

/// Split the observable detectors into `n` contiguous blocks of (near-)equal
/// size. Errors when `n` exceeds the detector count.
pub fn partition_boundary(geom: &DetectorGeometry, n: usize) -> Result<DetectorGeometry> {
    let count = geom.detectors.len();
    if n == 0 || n > count {
        return Err(Error::InvalidArgument(format!(
            "cannot split {count} detectors into {n} blocks"
        )));
    }
    let mut partition = Vec::with_capacity(n);
    let base = count / n;
    let extra = count % n;
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        partition.push(geom.detectors[start..start + len].to_vec());
        start += len;
    }
    let mut out = geom.clone();
    out.partition = partition;
    Ok(out)
}

/// Per-block measurement data `g_i`, detector-major over `(n_r + 1)` radii.
#[derive(Clone, Debug, PartialEq)]
pub struct SinogramBlock {
    pub detectors: Vec<usize>,
    pub samples: Vec<f64>,
}

impl SinogramBlock {
    pub fn rows(&self) -> usize {
        self.detectors.len()
    }

    pub fn row(&self, d: usize, n_r: usize) -> &[f64] {
        &self.samples[d * (n_r + 1)..(d + 1) * (n_r + 1)]
    }
}

/// All blocks of a measurement, aligned with the geometry's partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub radius: f64,
    pub n_r: usize,
    pub blocks: Vec<SinogramBlock>,
}

impl Sinogram {
    pub fn zeros(geom: &DetectorGeometry) -> Self {
        Sinogram {
            radius: geom.radius(),
            n_r: geom.n_r(),
            blocks: (0..geom.n_blocks())
                .map(|i| SinogramBlock {
                    detectors: geom.block_detectors(i).to_vec(),
                    samples: vec![0.0; geom.block_detectors(i).len() * (geom.n_r() + 1)],
                })
                .collect(),
        }
    }

    pub fn block_norm_sq(&self, geom: &DetectorGeometry, i: usize) -> f64 {
        let stride = self.n_r + 1;
        self.blocks[i]
            .samples
            .iter()
            .enumerate()
            .map(|(idx, v)| geom.radial_weight(idx % stride) * v * v)
            .sum()
    }

    /// Weighted norm over all blocks.
    pub fn norm(&self, geom: &DetectorGeometry) -> f64 {
        (0..self.blocks.len())
            .map(|i| self.block_norm_sq(geom, i))
            .sum::<f64>()
            .sqrt()
    }

    pub fn block_to_element(&self, geom: &DetectorGeometry, i: usize) -> Result<Element> {
        geom.data_space(i).element(self.blocks[i].samples.clone())
    }
}

fn check_grid(geom: &DetectorGeometry, f: &GridImage) -> Result<()> {
    if (f.radius() - geom.radius()).abs() > 1e-12 * geom.radius() {
        return Err(Error::InvalidArgument(format!(
            "grid radius {} does not match geometry radius {}",
            f.radius(),
            geom.radius()
        )));
    }
    Ok(())
}

fn check_block(geom: &DetectorGeometry, g: &SinogramBlock, i: usize) -> Result<()> {
    let expected = geom.block_detectors(i).len() * (geom.n_r() + 1);
    if g.samples.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: g.samples.len(),
            context: format!("sinogram block {i}"),
        });
    }
    Ok(())
}

fn forward_block_with_table(
    f: &GridImage,
    geom: &DetectorGeometry,
    i: usize,
    table: &CircleTable,
) -> SinogramBlock {
    let positions = geom.block_positions(i);
    let mut samples = vec![0.0; positions.len() * (geom.n_r() + 1)];
    kernel::circular_means(
        f.samples(),
        f.n_x(),
        f.radius(),
        &positions,
        table,
        &mut samples,
    );
    SinogramBlock {
        detectors: geom.block_detectors(i).to_vec(),
        samples,
    }
}

/// Circular means of `f` over the circles of block `i`: trapezoidal rule in
/// the angle, bilinear sampling of the grid, out-of-grid reads are 0.
pub fn forward(f: &GridImage, geom: &DetectorGeometry, i: usize) -> Result<SinogramBlock> {
    check_grid(geom, f)?;
    let table = geom.circle_table(f.n_x());
    Ok(forward_block_with_table(f, geom, i, &table))
}

/// Forward map of all blocks (shares one quadrature table).
pub fn forward_all(f: &GridImage, geom: &DetectorGeometry) -> Result<Sinogram> {
    check_grid(geom, f)?;
    let table = geom.circle_table(f.n_x());
    Ok(Sinogram {
        radius: geom.radius(),
        n_r: geom.n_r(),
        blocks: (0..geom.n_blocks())
            .map(|i| forward_block_with_table(f, geom, i, &table))
            .collect(),
    })
}

/// Discretized continuous adjoint of block `i`: quadrature of
/// `2 \int g(z, |z - x|) ds(z)` over the block's detectors with linear
/// radial interpolation of `g`. Not the exact transpose of [`forward`].
pub fn backproject(
    g: &SinogramBlock,
    geom: &DetectorGeometry,
    i: usize,
    n_x: usize,
) -> Result<GridImage> {
    check_block(geom, g, i)?;
    let positions = geom.block_positions(i);
    let mut out = GridImage::zeros(n_x, geom.radius())?;
    kernel::backproject(
        &g.samples,
        &positions,
        geom.n_r(),
        geom.radius(),
        geom.arc_spacing(),
        n_x,
        out.samples_mut(),
    );
    Ok(out)
}

/// Exact transpose of the discrete forward map of block `i` with respect to
/// the weighted discrete inner products: `<M f, g>_Y = <f, M^T g>_X` to
/// machine precision.
pub fn exact_adjoint(
    g: &SinogramBlock,
    geom: &DetectorGeometry,
    i: usize,
    n_x: usize,
) -> Result<GridImage> {
    check_block(geom, g, i)?;
    let table = geom.circle_table(n_x);
    exact_adjoint_with_table(g, geom, i, n_x, &table)
}

fn exact_adjoint_with_table(
    g: &SinogramBlock,
    geom: &DetectorGeometry,
    i: usize,
    n_x: usize,
    table: &CircleTable,
) -> Result<GridImage> {
    let positions = geom.block_positions(i);
    let dx = 2.0 * geom.radius() / n_x as f64;
    let cell_weights: Vec<f64> = (0..=geom.n_r())
        .map(|l| geom.radial_weight(l) / (dx * dx))
        .collect();
    let mut out = GridImage::zeros(n_x, geom.radius())?;
    kernel::adjoint_scatter(
        &g.samples,
        &positions,
        &cell_weights,
        table,
        n_x,
        geom.radius(),
        out.samples_mut(),
    );
    Ok(out)
}

/// Which adjoint a [`RadonBlock`] uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjointKind {
    /// Exact transpose of the discrete forward map (certified by the
    /// dot-product identity).
    Exact,
    /// Discretized continuous adjoint (backprojection).
    Continuous,
}

/// One sub-problem of the tomography system as an [`Operator`], with a
/// cached quadrature table shared across blocks.
#[derive(Clone)]
pub struct RadonBlock {
    geom: Arc<DetectorGeometry>,
    table: Arc<CircleTable>,
    block: usize,
    n_x: usize,
    adjoint: AdjointKind,
    domain: Arc<Space>,
    range: Arc<Space>,
}

impl RadonBlock {
    pub fn block_index(&self) -> usize {
        self.block
    }

    pub fn adjoint_kind(&self) -> AdjointKind {
        self.adjoint
    }
}

impl Operator for RadonBlock {
    fn domain(&self) -> &Arc<Space> {
        &self.domain
    }

    fn range(&self) -> &Arc<Space> {
        &self.range
    }

    fn apply(&self, x: &Element) -> Result<Element> {
        if !x.space().compatible(&self.domain) {
            return Err(Error::BlockMismatch {
                block: self.block,
                expected: self.domain.tag().to_string(),
                found: x.space().tag().to_string(),
            });
        }
        let positions = self.geom.block_positions(self.block);
        let mut samples = vec![0.0; positions.len() * (self.geom.n_r() + 1)];
        kernel::circular_means(
            x.as_slice(),
            self.n_x,
            self.geom.radius(),
            &positions,
            &self.table,
            &mut samples,
        );
        self.range.element(samples)
    }

    fn deriv_apply(&self, _at: &Element, h: &Element) -> Result<Element> {
        self.apply(h)
    }

    fn adjoint_deriv_apply(&self, _at: &Element, w: &Element) -> Result<Element> {
        if !w.space().compatible(&self.range) {
            return Err(Error::BlockMismatch {
                block: self.block,
                expected: self.range.tag().to_string(),
                found: w.space().tag().to_string(),
            });
        }
        let g = SinogramBlock {
            detectors: self.geom.block_detectors(self.block).to_vec(),
            samples: w.as_slice().to_vec(),
        };
        let img = match self.adjoint {
            AdjointKind::Exact => {
                exact_adjoint_with_table(&g, &self.geom, self.block, self.n_x, &self.table)?
            }
            AdjointKind::Continuous => backproject(&g, &self.geom, self.block, self.n_x)?,
        };
        self.domain.element(img.samples().to_vec())
    }

    fn is_linear(&self) -> bool {
        true
    }

    // With the continuous-adjoint backprojection the composition is not
    // self-adjoint, so norms are estimated through the exact transpose.
    fn norm_estimation_twin(&self) -> Option<Arc<dyn Operator>> {
        match self.adjoint {
            AdjointKind::Exact => None,
            AdjointKind::Continuous => {
                let mut twin = self.clone();
                twin.adjoint = AdjointKind::Exact;
                Some(Arc::new(twin))
            }
        }
    }
}

/// Assemble the block operator system for a geometry, grid size, data and
/// per-block noise levels. All blocks share one image space and quadrature
/// table.
pub fn build_system(
    geom: &Arc<DetectorGeometry>,
    n_x: usize,
    data: &Sinogram,
    noise_levels: &[f64],
    adjoint: AdjointKind,
) -> Result<BlockOperatorSystem> {
    if data.blocks.len() != geom.n_blocks() || noise_levels.len() != geom.n_blocks() {
        return Err(Error::InvalidArgument(format!(
            "system needs {} data blocks and noise levels, got {} and {}",
            geom.n_blocks(),
            data.blocks.len(),
            noise_levels.len()
        )));
    }
    let domain = image_space(n_x, geom.radius());
    let table = Arc::new(geom.circle_table(n_x));
    let mut blocks = Vec::with_capacity(geom.n_blocks());
    let mut elements = Vec::with_capacity(geom.n_blocks());
    for i in 0..geom.n_blocks() {
        check_block(geom, &data.blocks[i], i)?;
        let range = geom.data_space(i);
        elements.push(range.element(data.blocks[i].samples.clone())?);
        blocks.push(OperatorBlock::new(Arc::new(RadonBlock {
            geom: Arc::clone(geom),
            table: Arc::clone(&table),
            block: i,
            n_x,
            adjoint,
            domain: Arc::clone(&domain),
            range,
        })));
    }
    BlockOperatorSystem::new(blocks, elements, noise_levels.to_vec())
}

/// Axis-aligned description of one additive phantom component.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    /// Semi-axes before rotation.
    pub axes: (f64, f64),
    /// Rotation angle in radians.
    pub angle: f64,
    /// Value added inside the ellipse.
    pub value: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let u = (c * dx + s * dy) / self.axes.0;
        let v = (-s * dx + c * dy) / self.axes.1;
        u * u + v * v <= 1.0
    }
}

/// Sum of ellipse indicators sampled on the grid; everything outside the
/// disc `D(R)` is clipped to 0.
pub fn make_phantom(ellipses: &[Ellipse], n_x: usize, radius: f64) -> Result<GridImage> {
    GridImage::from_fn(n_x, radius, |x, y| {
        if x * x + y * y >= radius * radius {
            return 0.0;
        }
        ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.value)
            .sum()
    })
}

/// The default head phantom: a skull-like outer shell with interior
/// structures, supported strictly inside the unit disc and shifted slightly
/// toward the upper half plane.
pub fn head_phantom() -> Vec<Ellipse> {
    const SCALE: f64 = 0.8;
    const SHIFT: f64 = 0.1;
    let deg = std::f64::consts::PI / 180.0;
    let raw: [(f64, f64, f64, f64, f64, f64); 10] = [
        // (value, a, b, x0, y0, angle_deg)
        (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
        (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
        (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
        (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
        (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
        (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
        (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
        (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
        (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
    ];
    raw.iter()
        .map(|&(value, a, b, x0, y0, angle)| Ellipse {
            center: (SCALE * x0, SCALE * y0 + SHIFT),
            axes: (SCALE * a, SCALE * b),
            angle: angle * deg,
            value,
        })
        .collect()
}

/// Add seeded Gaussian noise rescaled so the global relative perturbation in
/// the weighted norm is exactly `level`. Returns the noisy sinogram and the
/// per-block noise norms `delta_i = ||g_i^noisy - g_i||`.
pub fn add_noise(
    g: &Sinogram,
    geom: &DetectorGeometry,
    level: f64,
    seed: u64,
) -> Result<(Sinogram, Vec<f64>)> {
    if !(level.is_finite() && level >= 0.0) {
        return Err(Error::InvalidArgument("noise level must be nonnegative".into()));
    }
    if level == 0.0 {
        return Ok((g.clone(), vec![0.0; g.blocks.len()]));
    }
    let g_norm = g.norm(geom);
    if g_norm == 0.0 {
        return Err(Error::InvalidArgument(
            "relative noise is undefined for zero data".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = g.clone();
    for block in &mut noise.blocks {
        for v in &mut block.samples {
            *v = crate::rng::standard_normal(&mut rng);
        }
    }
    let noise_norm = noise.norm(geom);
    if noise_norm == 0.0 {
        return Err(Error::InvalidArgument(
            "degenerate noise draw (all weights zero?)".into(),
        ));
    }
    let factor = level * g_norm / noise_norm;
    let stride = g.n_r + 1;
    let mut noisy = g.clone();
    let mut deltas = Vec::with_capacity(g.blocks.len());
    for (out, nz) in noisy.blocks.iter_mut().zip(&noise.blocks) {
        let mut delta_sq = 0.0;
        for (idx, (o, n)) in out.samples.iter_mut().zip(&nz.samples).enumerate() {
            let perturbation = factor * n;
            *o += perturbation;
            delta_sq += geom.radial_weight(idx % stride) * perturbation * perturbation;
        }
        deltas.push(delta_sq.sqrt());
    }
    Ok((noisy, deltas))
}

#[cfg(test)]
mod tests;
