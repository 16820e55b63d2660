//! Implementations of the CLI subcommands: the data pipeline
//! (phantom / forward / noise), solver runs with traces and reconstructions,
//! multi-method comparisons, the invariant battery and the adjoint check.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use avek::opsys::{adjoint_consistency, BlockOperatorSystem};
use avek::radon::{self, AdjointKind, DetectorGeometry, GridImage, Sinogram};
use avek::solvers::{self, Method, RunStatus, SolverConfig};
use avek::space::Element;
use avek::{io, selftest};

use crate::config::{parse_method, ExperimentConfig, MethodConfig};

pub struct Workspace {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Workspace {
    pub fn new(config: ExperimentConfig, out_override: Option<PathBuf>) -> Self {
        let out = out_override.unwrap_or_else(|| PathBuf::from(&config.output.dir));
        Workspace { config, out }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Create the output directory and record the effective configuration
    /// next to the outputs, so every artifact directory is reproducible.
    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating output directory {}", self.out.display()))?;
        std::fs::write(self.path("config.toml"), self.config.to_toml()?)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct BlockManifest {
    index: usize,
    detectors: Vec<usize>,
}

/// Layout manifest written next to each sinogram binary: block order,
/// per-block detector indices, and (for noisy data) the per-block noise
/// norms in the weighted data norm.
#[derive(Serialize, Deserialize)]
struct SinogramManifest {
    layout: String,
    radius: f64,
    radial_samples: usize,
    blocks: Vec<BlockManifest>,
    noise_level: Option<f64>,
    noise_seed: Option<u64>,
    achieved_ratio: Option<f64>,
    deltas: Option<Vec<f64>>,
}

impl SinogramManifest {
    fn new(geom: &DetectorGeometry) -> Self {
        SinogramManifest {
            layout: "(block, detector, radius) row-major".into(),
            radius: geom.radius(),
            radial_samples: geom.n_r() + 1,
            blocks: (0..geom.n_blocks())
                .map(|i| BlockManifest {
                    index: i,
                    detectors: geom.block_detectors(i).to_vec(),
                })
                .collect(),
            noise_level: None,
            noise_seed: None,
            achieved_ratio: None,
            deltas: None,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn cmd_phantom(ws: &Workspace) -> Result<()> {
    ws.ensure_out()?;
    let spec = ws.config.build_phantom_spec()?;
    let g = &ws.config.geometry;
    let phantom = radon::make_phantom(&spec, g.grid, g.radius)?;
    io::write_image(&ws.path("phantom.bin"), &phantom)?;
    io::write_image_pgm(&ws.path("phantom.pgm"), &phantom)?;
    println!(
        "phantom: {} x {} samples, radius {}",
        g.grid + 1,
        g.grid + 1,
        g.radius
    );
    Ok(())
}

pub fn cmd_forward(ws: &Workspace) -> Result<()> {
    ws.ensure_out()?;
    let geom = ws.config.build_geometry()?;
    let phantom = io::read_image(&ws.path("phantom.bin"))
        .context("reading phantom.bin (run `avek phantom` first)")?;
    let sino = radon::forward_all(&phantom, &geom)?;
    io::write_sinogram(&ws.path("sinogram.bin"), &sino)?;
    io::write_sinogram_pgm(&ws.path("sinogram.pgm"), &sino)?;
    write_json(&ws.path("sinogram.json"), &SinogramManifest::new(&geom))?;
    let dets: usize = sino.blocks.iter().map(|b| b.detectors.len()).sum();
    println!(
        "sinogram: {} blocks, {} detectors x {} radii",
        sino.blocks.len(),
        dets,
        sino.n_r + 1
    );
    Ok(())
}

pub fn cmd_noise(ws: &Workspace) -> Result<()> {
    ws.ensure_out()?;
    let geom = ws.config.build_geometry()?;
    let sino = io::read_sinogram(&ws.path("sinogram.bin"))
        .context("reading sinogram.bin (run `avek forward` first)")?;
    let level = ws.config.noise.level;
    let seed = ws.config.noise.seed;
    let (noisy, deltas) = radon::add_noise(&sino, &geom, level, seed)?;
    io::write_sinogram(&ws.path("sinogram_noisy.bin"), &noisy)?;
    io::write_sinogram_pgm(&ws.path("sinogram_noisy.pgm"), &noisy)?;

    let mut diff = noisy.clone();
    for (d, o) in diff.blocks.iter_mut().zip(&sino.blocks) {
        for (a, b) in d.samples.iter_mut().zip(&o.samples) {
            *a -= b;
        }
    }
    let achieved = diff.norm(&geom) / sino.norm(&geom);
    let mut manifest = SinogramManifest::new(&geom);
    manifest.noise_level = Some(level);
    manifest.noise_seed = Some(seed);
    manifest.achieved_ratio = Some(achieved);
    manifest.deltas = Some(deltas);
    write_json(&ws.path("sinogram_noisy.json"), &manifest)?;
    println!("noise: level {level}, achieved relative perturbation {achieved}");
    Ok(())
}

pub struct SolveOptions {
    pub method: Method,
    pub noisy: bool,
    pub step: Option<f64>,
    pub cycles: Option<usize>,
    pub seed: Option<u64>,
    pub exact_adjoint: Option<bool>,
}

struct PreparedSystem {
    sys: BlockOperatorSystem,
    ground_truth: Element,
    n_x: usize,
    radius: f64,
}

fn prepare_system(ws: &Workspace, noisy: bool, exact_adjoint: Option<bool>) -> Result<PreparedSystem> {
    let geom = ws.config.build_geometry()?;
    let phantom = io::read_image(&ws.path("phantom.bin"))
        .context("reading phantom.bin (run `avek phantom` first)")?;
    if phantom.n_x() != ws.config.geometry.grid {
        bail!(
            "phantom.bin grid ({}) does not match the configured grid ({})",
            phantom.n_x(),
            ws.config.geometry.grid
        );
    }
    let (sino, deltas) = if noisy {
        let sino = io::read_sinogram(&ws.path("sinogram_noisy.bin"))
            .context("reading sinogram_noisy.bin (run `avek noise` first)")?;
        let manifest: SinogramManifest =
            serde_json::from_str(&std::fs::read_to_string(ws.path("sinogram_noisy.json"))?)
                .context("reading sinogram_noisy.json")?;
        let deltas = manifest
            .deltas
            .ok_or_else(|| anyhow!("sinogram_noisy.json carries no noise norms"))?;
        (sino, deltas)
    } else {
        let sino = io::read_sinogram(&ws.path("sinogram.bin"))
            .context("reading sinogram.bin (run `avek forward` first)")?;
        let n = sino.blocks.len();
        (sino, vec![0.0; n])
    };
    let adjoint = match exact_adjoint.unwrap_or(ws.config.system.exact_adjoint) {
        true => AdjointKind::Exact,
        false => AdjointKind::Continuous,
    };
    let mut sys = radon::build_system(&geom, phantom.n_x(), &sino, &deltas, adjoint)?;
    sys.estimate_norm_bounds(ws.config.system.norm_iterations, ws.config.system.norm_seed)?;
    if ws.config.system.rescale {
        sys = sys.rescaled(ws.config.system.target_norm)?;
    }
    let ground_truth = phantom.to_element(sys.image_space())?;
    Ok(PreparedSystem {
        sys,
        ground_truth,
        n_x: phantom.n_x(),
        radius: phantom.radius(),
    })
}

fn solver_config(method: Method, mc: &MethodConfig, noisy: bool, opts: &SolveOptions) -> SolverConfig {
    let mut config = SolverConfig::new(method);
    config.step_size = opts.step.unwrap_or(if noisy {
        mc.step_noisy.unwrap_or(mc.step)
    } else {
        mc.step
    });
    config.max_cycles = opts.cycles.unwrap_or(mc.cycles);
    config.seed = opts.seed.unwrap_or(mc.seed);
    config.rearrange = mc.rearrange;
    config.tau = vec![mc.tau];
    config.stop_on_discrepancy = mc.stop;
    config.snapshot_cycles = mc.snapshot_cycles.clone();
    config.weights = mc.weights.clone();
    config
}

#[derive(Serialize)]
struct RunSummary {
    method: String,
    data: String,
    step: f64,
    max_cycles: usize,
    cycles_run: usize,
    seed: u64,
    rearrange: bool,
    tau: f64,
    status: String,
    k_star: Option<usize>,
    diverged_cycle: Option<usize>,
    diverged_reason: Option<String>,
    initial_residual: f64,
    final_residual: Option<f64>,
    final_relative_error: Option<f64>,
    min_relative_error: Option<f64>,
    min_relative_error_cycle: Option<usize>,
    warnings: Vec<String>,
}

fn log10_or_empty(v: Option<f64>) -> String {
    match v {
        Some(x) if x > 0.0 => format!("{}", x.log10()),
        _ => String::new(),
    }
}

fn write_trace_csv(path: &Path, trace: &solvers::IterationTrace) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "cycle,log10_residual,log10_relative_error,mean_step,skips")?;
    for c in &trace.cycles {
        writeln!(
            w,
            "{},{},{},{},{}",
            c.cycle,
            log10_or_empty(Some(c.residual_norm)),
            log10_or_empty(c.relative_error),
            c.mean_step,
            c.skips
        )?;
    }
    w.flush()?;
    Ok(())
}

struct FinishedRun {
    method: Method,
    outcome: solvers::RunOutcome,
    step: f64,
}

fn execute(
    ws: &Workspace,
    prepared: &PreparedSystem,
    method: Method,
    noisy: bool,
    opts: &SolveOptions,
) -> Result<FinishedRun> {
    let mc = ws.config.method_config(method);
    let config = solver_config(method, &mc, noisy, opts);
    let step = config.step_size;
    let outcome = solvers::run(&prepared.sys, &config, Some(&prepared.ground_truth))?;
    Ok(FinishedRun {
        method,
        outcome,
        step,
    })
}

fn write_run_outputs(
    ws: &Workspace,
    prepared: &PreparedSystem,
    run: &FinishedRun,
    noisy: bool,
) -> Result<()> {
    let dir_name = if noisy {
        format!("{}_noisy", run.method.name())
    } else {
        run.method.name().to_string()
    };
    let dir = ws.path(&dir_name);
    std::fs::create_dir_all(&dir)?;

    write_trace_csv(&dir.join("trace.csv"), &run.outcome.trace)?;

    let recon = GridImage::from_element(prepared.n_x, prepared.radius, &run.outcome.final_iterate)?;
    io::write_image(&dir.join("reconstruction.bin"), &recon)?;
    io::write_image_pgm(&dir.join("reconstruction.pgm"), &recon)?;
    for (cycle, snapshot) in &run.outcome.snapshots {
        let img = GridImage::from_element(prepared.n_x, prepared.radius, snapshot)?;
        io::write_image(&dir.join(format!("cycle_{cycle:04}.bin")), &img)?;
        io::write_image_pgm(&dir.join(format!("cycle_{cycle:04}.pgm")), &img)?;
    }

    let trace = &run.outcome.trace;
    let min_err = trace
        .cycles
        .iter()
        .filter_map(|c| c.relative_error.map(|e| (c.cycle, e)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let mc = ws.config.method_config(run.method);
    let summary = RunSummary {
        method: run.method.name().into(),
        data: if noisy { "noisy" } else { "exact" }.into(),
        step: run.step,
        max_cycles: mc.cycles,
        cycles_run: trace.cycles.len(),
        seed: mc.seed,
        rearrange: mc.rearrange,
        tau: mc.tau,
        status: match &run.outcome.status {
            RunStatus::Completed => "completed".into(),
            RunStatus::Stopped { .. } => "stopped".into(),
            RunStatus::Diverged { .. } => "diverged".into(),
        },
        k_star: match &run.outcome.status {
            RunStatus::Stopped { k_star } => Some(*k_star),
            _ => None,
        },
        diverged_cycle: match &run.outcome.status {
            RunStatus::Diverged { cycle, .. } => Some(*cycle),
            _ => None,
        },
        diverged_reason: match &run.outcome.status {
            RunStatus::Diverged { reason, .. } => Some(reason.clone()),
            _ => None,
        },
        initial_residual: trace.initial_residual,
        final_residual: trace.cycles.last().map(|c| c.residual_norm),
        final_relative_error: trace.cycles.last().and_then(|c| c.relative_error),
        min_relative_error: min_err.map(|(_, e)| e),
        min_relative_error_cycle: min_err.map(|(c, _)| c),
        warnings: run.outcome.warnings.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(())
}

/// Returns the process exit code.
pub fn cmd_solve(ws: &Workspace, opts: SolveOptions) -> Result<u8> {
    ws.ensure_out()?;
    let prepared = prepare_system(ws, opts.noisy, opts.exact_adjoint)?;
    let run = execute(ws, &prepared, opts.method, opts.noisy, &opts)?;
    write_run_outputs(ws, &prepared, &run, opts.noisy)?;
    for w in &run.outcome.warnings {
        eprintln!("warning: {w}");
    }
    let code = match &run.outcome.status {
        RunStatus::Diverged { cycle, reason } => {
            eprintln!(
                "{}: diverged in cycle {cycle}: {reason} (partial trace written)",
                opts.method.name()
            );
            2
        }
        RunStatus::Stopped { k_star } => {
            println!("{}: stopped at update {k_star}", opts.method.name());
            0
        }
        RunStatus::Completed => {
            println!(
                "{}: completed {} cycles",
                opts.method.name(),
                run.outcome.trace.cycles.len()
            );
            0
        }
    };
    Ok(code)
}

/// Runs every requested method (in parallel threads), writes per-method
/// outputs plus one aligned CSV, and reports failures without aborting the
/// others. Returns the process exit code.
pub fn cmd_compare(
    ws: &Workspace,
    methods: &[String],
    noisy: bool,
    cycles: Option<usize>,
    exact_adjoint: Option<bool>,
) -> Result<u8> {
    ws.ensure_out()?;
    let names: Vec<String> = if methods.is_empty() {
        ws.config.compare.methods.clone()
    } else {
        methods.to_vec()
    };
    let parsed: Vec<Method> = names
        .iter()
        .map(|n| parse_method(n))
        .collect::<Result<_>>()?;
    let prepared = prepare_system(ws, noisy, exact_adjoint)?;

    let runs: Vec<(Method, Result<FinishedRun>)> = std::thread::scope(|scope| {
        let prepared = &prepared;
        let ws: &Workspace = ws;
        let handles: Vec<_> = parsed
            .iter()
            .map(|&method| {
                scope.spawn(move || {
                    let opts = SolveOptions {
                        method,
                        noisy,
                        step: None,
                        cycles,
                        seed: None,
                        exact_adjoint: None,
                    };
                    (method, execute(ws, prepared, method, noisy, &opts))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    let mut exit = 0u8;
    let mut finished = Vec::new();
    for (method, result) in runs {
        match result {
            Ok(run) => {
                write_run_outputs(ws, &prepared, &run, noisy)?;
                if let RunStatus::Diverged { cycle, reason } = &run.outcome.status {
                    eprintln!("{}: diverged in cycle {cycle}: {reason}", method.name());
                    exit = 2;
                }
                finished.push(run);
            }
            Err(e) => {
                eprintln!("{}: failed: {e}", method.name());
                exit = if exit == 0 { 1 } else { exit };
            }
        }
    }

    // Aligned CSV over the shared cycle axis.
    let csv_name = if noisy { "compare_noisy.csv" } else { "compare.csv" };
    let mut w = std::io::BufWriter::new(std::fs::File::create(ws.path(csv_name))?);
    let mut header = String::from("cycle");
    for run in &finished {
        header.push_str(&format!(
            ",{m}_log10_residual,{m}_log10_relative_error",
            m = run.method.name()
        ));
    }
    writeln!(w, "{header}")?;
    let max_cycles = finished
        .iter()
        .map(|r| r.outcome.trace.cycles.len())
        .max()
        .unwrap_or(0);
    for c in 0..max_cycles {
        let mut line = format!("{}", c + 1);
        for run in &finished {
            match run.outcome.trace.cycles.get(c) {
                Some(rec) => {
                    line.push_str(&format!(
                        ",{},{}",
                        log10_or_empty(Some(rec.residual_norm)),
                        log10_or_empty(rec.relative_error)
                    ));
                }
                None => line.push_str(",,"),
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;

    for run in &finished {
        let last = run.outcome.trace.cycles.last();
        println!(
            "{}: {} cycles, final residual {:?}",
            run.method.name(),
            run.outcome.trace.cycles.len(),
            last.map(|c| c.residual_norm)
        );
    }
    Ok(exit)
}

/// Returns the process exit code (0 all green, 3 any failure).
pub fn cmd_selftest(corrupt_adjoint: bool) -> u8 {
    let results = selftest::run_selftest(selftest::SelftestOptions { corrupt_adjoint });
    let mut code = 0u8;
    for r in &results {
        println!(
            "{} {:40} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.passed {
            code = 3;
        }
    }
    code
}

/// Dot-product certification: exact transpose at 1e-10 over random probe
/// pairs, backprojection pairing within 1%, improving under one refinement
/// step. Returns the process exit code (0 or 3).
pub fn cmd_adjoint_check(grid: usize, detectors: usize, radial: usize, blocks: usize) -> Result<u8> {
    let mut code = 0u8;
    let geom = Arc::new(radon::partition_boundary(
        &DetectorGeometry::half_circle(1.0, detectors, radial)?,
        blocks,
    )?);
    let data = Sinogram::zeros(&geom);
    let sys = radon::build_system(&geom, grid, &data, &vec![0.0; blocks], AdjointKind::Exact)?;
    let probes_per_block = 100usize.div_ceil(blocks);
    let mut worst = 0.0_f64;
    for i in 0..sys.len() {
        let dev = adjoint_consistency(
            sys.block(i).op.as_ref(),
            &sys.image_space().zero(),
            probes_per_block,
            1000 + i as u64,
        )
        .map_err(|e| anyhow!(e.to_string()))?;
        worst = worst.max(dev);
    }
    let exact_ok = worst <= 1e-10;
    println!(
        "{} exact transpose dot-product identity: max relative deviation {worst:.3e}",
        if exact_ok { "PASS" } else { "FAIL" }
    );
    if !exact_ok {
        code = 3;
    }

    let pairing = |n_x: usize, n_r: usize| -> Result<f64> {
        let geom = Arc::new(DetectorGeometry::half_circle(1.0, detectors, n_r)?);
        let f = GridImage::from_fn(n_x, 1.0, |x, y| {
            (-((x - 0.1) * (x - 0.1) + (y - 0.2) * (y - 0.2)) / 0.09).exp()
        })?;
        let g = GridImage::from_fn(n_x, 1.0, |x, y| {
            (-(x * x + (y - 0.4) * (y - 0.4)) / 0.15).exp()
        })?;
        let mf = radon::forward(&f, &geom, 0)?;
        let mg = radon::forward(&g, &geom, 0)?;
        let yspace = geom.data_space(0);
        let xspace = radon::image_space(n_x, 1.0);
        let lhs = yspace
            .element(mf.samples)?
            .inner(&yspace.element(mg.samples.clone())?)?;
        let bg = radon::backproject(&mg, &geom, 0, n_x)?;
        let rhs = f.to_element(&xspace)?.inner(&bg.to_element(&xspace)?)?;
        Ok((lhs - rhs).abs() / lhs.abs().max(rhs.abs()))
    };
    let coarse = pairing(grid, radial)?;
    let fine = pairing(2 * grid, 2 * radial)?;
    let bp_ok = coarse <= 0.01 && fine < coarse;
    println!(
        "{} backprojection pairing: defect {coarse:.3e} at grid {grid}, {fine:.3e} refined",
        if bp_ok { "PASS" } else { "FAIL" }
    );
    if !bp_ok {
        code = 3;
    }
    Ok(code)
}
