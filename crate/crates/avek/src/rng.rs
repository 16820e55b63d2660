//! Small seeded-randomness helpers shared by tests, probes and noise.

use rand::Rng;

/// Standard normal sample via Box-Muller. Deterministic given the generator
/// state; two uniform draws per sample.
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // 1 - gen() lies in (0, 1], keeping the logarithm finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
