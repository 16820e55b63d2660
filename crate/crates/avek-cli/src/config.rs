//! Experiment configuration: a single TOML file describing geometry,
//! phantom, noise, system preparation and per-method solver settings.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use avek::radon::{self, DetectorGeometry, Ellipse};
use avek::solvers::Method;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Disc radius R.
    pub radius: f64,
    /// Grid intervals per axis (the image is (grid+1) x (grid+1)).
    pub grid: usize,
    /// Radial intervals (radii run to 2R in steps of 2R/radial).
    pub radial: usize,
    /// Detector count on the observable arc.
    pub detectors: usize,
    /// Observable arc: "half" (open upper half circle) or "full".
    pub arc: String,
    /// Number of sub-problem blocks the detectors are split into.
    pub blocks: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            radius: 1.0,
            grid: 200,
            radial: 200,
            detectors: 100,
            arc: "half".into(),
            blocks: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipseConfig {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    /// Rotation angle in degrees.
    pub angle: f64,
    pub value: f64,
}

impl Default for EllipseConfig {
    fn default() -> Self {
        EllipseConfig {
            center: [0.0, 0.0],
            axes: [0.5, 0.5],
            angle: 0.0,
            value: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// "head" for the built-in head phantom, "custom" to use `ellipses`.
    pub preset: String,
    pub ellipses: Vec<EllipseConfig>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            preset: "head".into(),
            ellipses: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Relative noise level in the weighted norm.
    pub level: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            level: 0.05,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Rescale every block (and its data) to the target norm.
    pub rescale: bool,
    pub target_norm: f64,
    /// Power iterations for the norm estimates.
    pub norm_iterations: usize,
    pub norm_seed: u64,
    /// Use the exact discrete transpose instead of the continuous-adjoint
    /// backprojection.
    pub exact_adjoint: bool,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            rescale: true,
            target_norm: 1.0,
            norm_iterations: 50,
            norm_seed: 424_242,
            exact_adjoint: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    /// Step size for exact data.
    pub step: f64,
    /// Step size for noisy data (defaults to `step`).
    pub step_noisy: Option<f64>,
    pub cycles: usize,
    pub seed: u64,
    pub rearrange: bool,
    /// Skip threshold (one value, broadcast to all blocks). 0 disables
    /// skipping entirely.
    pub tau: f64,
    /// Stop early by the discrepancy rules on noisy data.
    pub stop: bool,
    pub snapshot_cycles: Vec<usize>,
    /// Averaging weights (averaged Kaczmarz only; empty = equal).
    pub weights: Vec<f64>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            step: 1.0,
            step_noisy: None,
            cycles: 80,
            seed: 11,
            rearrange: true,
            tau: 3.0,
            stop: false,
            snapshot_cycles: vec![2, 10, 35],
            weights: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub methods: Vec<String>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            methods: vec!["landweber".into(), "kaczmarz".into(), "avek".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub phantom: PhantomConfig,
    pub noise: NoiseConfig,
    pub system: SystemConfig,
    pub output: OutputConfig,
    pub compare: CompareConfig,
    pub methods: BTreeMap<String, MethodConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Per-method defaults matching the reproduction experiments.
    pub fn method_config(&self, method: Method) -> MethodConfig {
        if let Some(cfg) = self.methods.get(method.name()) {
            return cfg.clone();
        }
        let mut cfg = MethodConfig::default();
        match method {
            Method::Landweber => cfg.step = 2.5,
            Method::Kaczmarz => cfg.step = 1.0,
            Method::Avek => {
                cfg.step = 30.0;
                cfg.step_noisy = Some(5.0);
            }
            Method::Iag => {
                cfg.step = 0.08;
                cfg.step_noisy = Some(0.06);
            }
            // EMR methods choose their own per-update steps.
            Method::LandweberEmr { .. } | Method::KaczmarzEmr { .. } => cfg.step = 1.0,
        }
        cfg
    }

    pub fn build_geometry(&self) -> Result<Arc<DetectorGeometry>> {
        let g = &self.geometry;
        let base = match g.arc.as_str() {
            "half" => DetectorGeometry::half_circle(g.radius, g.detectors, g.radial)?,
            "full" => DetectorGeometry::full_circle(g.radius, g.detectors, g.radial)?,
            other => bail!("unknown arc {other:?} (expected \"half\" or \"full\")"),
        };
        Ok(Arc::new(radon::partition_boundary(&base, g.blocks)?))
    }

    pub fn build_phantom_spec(&self) -> Result<Vec<Ellipse>> {
        match self.phantom.preset.as_str() {
            "head" => Ok(radon::head_phantom()),
            "custom" => Ok(self
                .phantom
                .ellipses
                .iter()
                .map(|e| Ellipse {
                    center: (e.center[0], e.center[1]),
                    axes: (e.axes[0], e.axes[1]),
                    angle: e.angle * std::f64::consts::PI / 180.0,
                    value: e.value,
                })
                .collect()),
            other => bail!("unknown phantom preset {other:?}"),
        }
    }
}

/// Parse a method name as used on the command line and in config tables.
pub fn parse_method(name: &str) -> Result<Method> {
    Ok(match name {
        "landweber" => Method::Landweber,
        "kaczmarz" => Method::Kaczmarz,
        "avek" => Method::Avek,
        "iag" => Method::Iag,
        "landweber-emr0" => Method::LandweberEmr { exponent: 0 },
        "landweber-emr1" => Method::LandweberEmr { exponent: 1 },
        "kaczmarz-emr0" => Method::KaczmarzEmr { exponent: 0 },
        "kaczmarz-emr1" => Method::KaczmarzEmr { exponent: 1 },
        other => bail!(
            "unknown method {other:?} (expected landweber, kaczmarz, avek, iag, \
             landweber-emr0/1 or kaczmarz-emr0/1)"
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_idempotent() {
        let mut config = ExperimentConfig::default();
        config.methods.insert("avek".into(), {
            let mut m = MethodConfig::default();
            m.step = 30.0;
            m.step_noisy = Some(5.0);
            m
        });
        let text = config.to_toml().unwrap();
        let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, parsed);
        // serialize(parse(text)) stabilizes after one round
        assert_eq!(text, parsed.to_toml().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[geometry]\nradius = 1.0\nbananas = 3\n";
        assert!(toml::from_str::<ExperimentConfig>(text).is_err());
    }

    #[test]
    fn method_names_roundtrip() {
        for name in [
            "landweber",
            "kaczmarz",
            "avek",
            "iag",
            "landweber-emr0",
            "landweber-emr1",
            "kaczmarz-emr0",
            "kaczmarz-emr1",
        ] {
            assert_eq!(parse_method(name).unwrap().name(), name);
        }
        assert!(parse_method("sor").is_err());
    }
}
