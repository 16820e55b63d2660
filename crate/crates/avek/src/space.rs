//! Finite-dimensional weighted inner-product spaces and their elements.
//!
//! Every [`Element`] carries a shared handle to its [`Space`], which fixes the
//! dimension and the quadrature weights of the inner product. Arithmetic
//! between elements of different spaces is rejected instead of silently
//! broadcast, so an image-space vector can never be mixed with a data-space
//! vector of the same length.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::{Error, Result};

/// Identifier of a space (the image space, a per-block data space, ...).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SpaceTag(Arc<str>);

impl SpaceTag {
    pub fn new(name: impl AsRef<str>) -> Self {
        SpaceTag(Arc::from(name.as_ref()))
    }

    /// Conventional tag for the unknown (image) space.
    pub fn image() -> Self {
        Self::new("image")
    }

    /// Conventional tag for the data space of sub-problem `i`.
    pub fn data_block(i: usize) -> Self {
        Self::new(format!("data/{i}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SpaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for SpaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Inner-product weights of a space.
#[derive(Clone, Debug)]
pub enum Weighting {
    /// `<a, b> = w * sum_i a_i b_i` (e.g. grid cell area).
    Uniform(f64),
    /// `<a, b> = sum_i w_i a_i b_i` (general quadrature weights, `w_i >= 0`).
    PerSample(Arc<[f64]>),
}

/// A finite-dimensional real inner-product space.
#[derive(Clone, Debug)]
pub struct Space {
    tag: SpaceTag,
    dim: usize,
    weighting: Weighting,
}

impl Space {
    /// Plain Euclidean space (all weights 1).
    pub fn euclidean(tag: SpaceTag, dim: usize) -> Arc<Self> {
        Self::uniform(tag, dim, 1.0)
    }

    /// Uniformly weighted space; `weight` must be positive and finite.
    pub fn uniform(tag: SpaceTag, dim: usize, weight: f64) -> Arc<Self> {
        assert!(
            weight.is_finite() && weight > 0.0,
            "uniform weight must be positive and finite"
        );
        Arc::new(Space {
            tag,
            dim,
            weighting: Weighting::Uniform(weight),
        })
    }

    /// Space with one quadrature weight per sample; weights must be finite
    /// and nonnegative (zero weights are allowed, e.g. at a vanishing
    /// measure density).
    pub fn weighted(tag: SpaceTag, weights: Vec<f64>) -> Arc<Self> {
        assert!(
            weights.iter().all(|w| w.is_finite() && *w >= 0.0),
            "per-sample weights must be finite and nonnegative"
        );
        Arc::new(Space {
            tag,
            dim: weights.len(),
            weighting: Weighting::PerSample(weights.into()),
        })
    }

    pub fn tag(&self) -> &SpaceTag {
        &self.tag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weighting(&self) -> &Weighting {
        &self.weighting
    }

    /// Weight of sample `i`.
    pub fn weight(&self, i: usize) -> f64 {
        match &self.weighting {
            Weighting::Uniform(w) => *w,
            Weighting::PerSample(w) => w[i],
        }
    }

    /// Two spaces are interchangeable when tag and dimension agree.
    pub fn compatible(&self, other: &Space) -> bool {
        self.tag == other.tag && self.dim == other.dim
    }

    /// The zero element of this space.
    pub fn zero(self: &Arc<Self>) -> Element {
        Element {
            space: Arc::clone(self),
            values: vec![0.0; self.dim],
        }
    }

    /// Wrap raw coordinates, checking length and finiteness.
    pub fn element(self: &Arc<Self>, values: Vec<f64>) -> Result<Element> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: values.len(),
                context: format!("element of {}", self.tag),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("element of {}", self.tag)));
        }
        Ok(Element {
            space: Arc::clone(self),
            values,
        })
    }

    /// Element with i.i.d. standard normal coordinates.
    pub fn random_normal<R: Rng + ?Sized>(self: &Arc<Self>, rng: &mut R) -> Element {
        let values = (0..self.dim)
            .map(|_| crate::rng::standard_normal(rng))
            .collect();
        Element {
            space: Arc::clone(self),
            values,
        }
    }
}

/// A vector in a concrete [`Space`]. Construction and the checked operations
/// keep all coordinates finite.
#[derive(Clone, Debug)]
pub struct Element {
    space: Arc<Space>,
    values: Vec<f64>,
}

impl Element {
    pub fn space(&self) -> &Arc<Space> {
        &self.space
    }

    pub fn tag(&self) -> &SpaceTag {
        self.space.tag()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw coordinates. The caller is responsible for
    /// keeping them finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_same_space(&self, other: &Element, context: &str) -> Result<()> {
        if self.space.compatible(&other.space) {
            Ok(())
        } else {
            Err(Error::SpaceMismatch {
                expected: format!("{} (dim {})", self.space.tag(), self.space.dim()),
                found: format!("{} (dim {})", other.space.tag(), other.space.dim()),
                context: context.to_string(),
            })
        }
    }

    /// Weighted inner product; errors if the spaces differ.
    pub fn inner(&self, other: &Element) -> Result<f64> {
        self.check_same_space(other, "inner product")?;
        Ok(match self.space.weighting() {
            Weighting::Uniform(w) => {
                w * self
                    .values
                    .iter()
                    .zip(&other.values)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            }
            Weighting::PerSample(w) => self
                .values
                .iter()
                .zip(&other.values)
                .zip(w.iter())
                .map(|((a, b), w)| w * a * b)
                .sum(),
        })
    }

    pub fn norm_sq(&self) -> f64 {
        match self.space.weighting() {
            Weighting::Uniform(w) => w * self.values.iter().map(|a| a * a).sum::<f64>(),
            Weighting::PerSample(w) => self
                .values
                .iter()
                .zip(w.iter())
                .map(|(a, w)| w * a * a)
                .sum(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * other`, in place.
    pub fn add_scaled(&mut self, alpha: f64, other: &Element) -> Result<()> {
        self.check_same_space(other, "add_scaled")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.values {
            *a *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Element {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn add(&self, other: &Element) -> Result<Element> {
        let mut out = self.clone();
        out.add_scaled(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Element) -> Result<Element> {
        let mut out = self.clone();
        out.add_scaled(-1.0, other)?;
        Ok(out)
    }

    /// `||self - other||` in the space norm.
    pub fn distance(&self, other: &Element) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }
}
