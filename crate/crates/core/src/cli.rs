//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{band_report, spectrum_scan, sweep, xz_projection, SweepAxis};
use crate::config::DesignConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::materials::{slab_power_transmission, wavelength_mm};
use crate::network::OpticalStack;
use crate::stl::export_stl;
use crate::training::{retrain_tunable_observed, train_observed, TrainConfig, TrainEvent, TunableAnchor};

#[derive(Debug, Parser)]
#[command(
    name = "bdnn",
    version,
    about = "Design and analyze broadband diffractive optical networks"
)]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "BDNN_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Design file (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Output directory; overrides the design file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model file; defaults to `model.json` in the output directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Random seed; overrides the design file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs; overrides the design file.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from zero initialization; writes model, history, spectrum and layer maps.
    Train(Common),
    /// Scan the model's spectrum.
    Simulate(Common),
    /// Scan the spectrum and report peak, FWHM, Q and efficiency per detector.
    Evaluate(Common),
    /// Band reports with the output plane displaced axially.
    SweepDz(Common),
    /// Band reports for a range of output aperture widths.
    SweepAperture(Common),
    /// Intensity slice through y = 0 over the propagation axis.
    XzMap(Common),
    /// Continue training over several output-plane displacements.
    RetrainTunable(Common),
    /// Binary STL and thickness map for every layer.
    ExportStl(Common),
    /// Power transmission through stacked uniform slabs.
    SlabEfficiency {
        #[arg(long)]
        kappa: f64,
        /// Slab thickness per layer, mm.
        #[arg(long)]
        h: f64,
        /// Frequency, THz.
        #[arg(long, required_unless_present = "wavelength", conflicts_with = "wavelength")]
        freq: Option<f64>,
        /// Free-space wavelength, mm.
        #[arg(long)]
        wavelength: Option<f64>,
        #[arg(long, default_value_t = 1)]
        layers: u32,
    },
}

/// Process exit status for an error: 2 configuration or input, 3 numerical, 4 I/O.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 4,
        Error::Numerical { .. } | Error::NoBand(_) => 3,
        Error::InvalidArgument(_) | Error::OutOfRange { .. } | Error::Parse { .. } | Error::Config { .. } => 2,
    }
}

struct Context {
    cfg: DesignConfig,
    out: PathBuf,
    model: PathBuf,
    config_hash: String,
    config_path: PathBuf,
}

impl Context {
    fn new(c: &Common) -> Result<Self> {
        let bytes = std::fs::read(&c.config).map_err(|e| Error::io(&c.config, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| Error::config("<file>", "not UTF-8"))?;
        let base = c.config.parent().unwrap_or_else(|| Path::new("."));
        let mut cfg = DesignConfig::from_str_in(&text, base)?;
        if let Some(seed) = c.seed {
            cfg.seed = seed;
            cfg.training.seed = seed;
            if let Some(t) = cfg.tunable.as_mut() {
                t.training.seed = seed;
            }
        }
        if let Some(epochs) = c.epochs {
            cfg.training.epochs = epochs;
            if let Some(t) = cfg.tunable.as_mut() {
                t.training.epochs = epochs;
            }
        }
        if let Some(out) = &c.out {
            cfg.output_dir = out.clone();
        }
        let out = match &c.out {
            Some(o) => o.clone(),
            None => cfg.output_dir(),
        };
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let model = c.model.clone().unwrap_or_else(|| out.join("model.json"));
        Ok(Context {
            cfg,
            out,
            model,
            config_hash: hex::encode(Sha256::digest(&bytes)),
            config_path: c.config.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load_model(&self) -> Result<OpticalStack> {
        io::load_model(&self.model)
    }

    fn manifest(&self, command: &str, artifacts: &[PathBuf]) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            config_path: String,
            config_sha256: &'a str,
            seed: u64,
            bdnn_version: &'a str,
            artifacts: Vec<String>,
            effective_config: &'a DesignConfig,
        }
        let m = Manifest {
            command,
            config_path: self.config_path.display().to_string(),
            config_sha256: &self.config_hash,
            seed: self.cfg.seed,
            bdnn_version: env!("CARGO_PKG_VERSION"),
            artifacts: artifacts
                .iter()
                .map(|p| {
                    p.file_name()
                        .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
                })
                .collect(),
            effective_config: &self.cfg,
        };
        let text = toml::to_string(&m).map_err(|e| Error::invalid(format!("manifest: {e}")))?;
        let path = self.path(&format!("manifest-{command}.toml"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // Only fails if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::SlabEfficiency {
            kappa,
            h,
            freq,
            wavelength,
            layers,
        } => {
            let lambda = match (freq, wavelength) {
                (Some(f), _) if f > 0.0 => wavelength_mm(f),
                (None, Some(l)) => l,
                _ => return Err(Error::invalid("frequency must be positive")),
            };
            let t = slab_power_transmission(kappa, h, lambda, layers)?;
            println!("{t:.4}");
            Ok(())
        }
        Command::Train(c) => cmd_train(&Context::new(&c)?),
        Command::Simulate(c) => cmd_simulate(&Context::new(&c)?, false),
        Command::Evaluate(c) => cmd_simulate(&Context::new(&c)?, true),
        Command::SweepDz(c) => cmd_sweep(&Context::new(&c)?, SweepAxis::OutputShift),
        Command::SweepAperture(c) => cmd_sweep(&Context::new(&c)?, SweepAxis::ApertureWidth),
        Command::XzMap(c) => cmd_xz(&Context::new(&c)?),
        Command::RetrainTunable(c) => cmd_retrain(&Context::new(&c)?),
        Command::ExportStl(c) => cmd_export(&Context::new(&c)?),
    }
}

/// Runs `optimize` while streaming history rows to `path`; rows written so far
/// are flushed even when training fails.
fn with_history<F>(path: &Path, optimize: F) -> Result<OpticalStack>
where
    F: FnOnce(&mut dyn FnMut(&TrainEvent)) -> Result<OpticalStack>,
{
    let mut writer = io::HistoryWriter::create(path)?;
    let mut write_err: Option<csv::Error> = None;
    let result = optimize(&mut |ev| {
        if let TrainEvent::Update { row, .. } = ev {
            if write_err.is_none() {
                write_err = writer.write(row).err();
            }
        }
    });
    writer.flush().map_err(|e| Error::io(path, e))?;
    if let Some(e) = write_err {
        return Err(Error::io(path, std::io::Error::other(e.to_string())));
    }
    result
}

fn write_layers(ctx: &Context, stack: &OpticalStack, out: &mut Vec<PathBuf>) -> Result<()> {
    for (k, layer) in stack.layers.iter().enumerate() {
        let p = ctx.path(&format!("layer_{k}_thickness.csv"));
        io::save_thickness_map(&p, &layer.thickness_map(true))?;
        out.push(p);
    }
    Ok(())
}

fn cmd_train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let stack = cfg.build_stack()?;
    let table = cfg.material_table()?;
    let history = ctx.path("history.csv");
    let trained = with_history(&history, |obs| {
        train_observed(&stack, &cfg.loss, &cfg.training, &table, obs).map(|o| o.stack)
    })?;
    let model = ctx.path("model.json");
    io::save_model(&model, &trained)?;
    let spectrum = spectrum_scan(&trained, &table, &cfg.analysis.frequencies()?, 0.0)?;
    let spectrum_path = ctx.path("spectrum.csv");
    io::save_spectrum_csv(&spectrum_path, &spectrum)?;
    let mut artifacts = vec![model.clone(), history, spectrum_path];
    write_layers(ctx, &trained, &mut artifacts)?;
    for d in 0..spectrum.detector_count() {
        match band_report(&spectrum, d) {
            Ok(r) => println!(
                "detector {d}: peak {:.2} GHz, Q {:.2}, efficiency {:.2}%",
                r.peak * 1e3,
                r.q_factor,
                r.eta_peak * 100.0
            ),
            Err(e) => println!("detector {d}: {e}"),
        }
    }
    println!("model written to {}", model.display());
    ctx.manifest("train", &artifacts)
}

fn cmd_simulate(ctx: &Context, report: bool) -> Result<()> {
    let stack = ctx.load_model()?;
    let table = ctx.cfg.material_table()?;
    let spectrum = spectrum_scan(&stack, &table, &ctx.cfg.analysis.frequencies()?, 0.0)?;
    let spectrum_path = ctx.path("spectrum.csv");
    io::save_spectrum_csv(&spectrum_path, &spectrum)?;
    let mut artifacts = vec![spectrum_path];
    if report {
        let path = ctx.path("report.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        let wrap = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
        w.write_record(["detector", "peak_thz", "fwhm_thz", "q_factor", "eta_peak"])
            .map_err(wrap)?;
        for d in 0..spectrum.detector_count() {
            let r = band_report(&spectrum, d)?;
            println!(
                "detector {d}: peak {:.2} GHz ({:.2}), efficiency {:.2}%",
                r.peak * 1e3,
                r.q_factor,
                r.eta_peak * 100.0
            );
            w.serialize((d, r.peak, r.fwhm, r.q_factor, r.eta_peak)).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        artifacts.push(path);
    }
    ctx.manifest(if report { "evaluate" } else { "simulate" }, &artifacts)
}

fn cmd_sweep(ctx: &Context, axis: SweepAxis) -> Result<()> {
    let stack = ctx.load_model()?;
    let table = ctx.cfg.material_table()?;
    let a = &ctx.cfg.analysis;
    let (values, name) = match axis {
        SweepAxis::OutputShift => (&a.sweep_dz, "sweep-dz"),
        SweepAxis::ApertureWidth => (&a.sweep_widths, "sweep-aperture"),
    };
    let rows = sweep(&stack, &table, axis, values, &a.frequencies()?, a.detector)?;
    let path = ctx.path(&format!("{}.csv", name.replace('-', "_")));
    io::save_sweep_csv(&path, &rows)?;
    for r in &rows {
        println!(
            "{:>8.3}: peak {:.2} GHz, Q {:.2}, relative efficiency {:.3}",
            r.value,
            r.report.peak * 1e3,
            r.report.q_factor,
            r.eta_relative
        );
    }
    ctx.manifest(name, &[path])
}

fn cmd_xz(ctx: &Context) -> Result<()> {
    let stack = ctx.load_model()?;
    let table = ctx.cfg.material_table()?;
    let z = ctx.cfg.xz_planes(&stack)?;
    let map = xz_projection(&stack, &table, ctx.cfg.analysis.xz_frequency, &z)?;
    let path = ctx.path("xz_map.txt");
    io::save_xz_map(&path, &map)?;
    ctx.manifest("xz-map", &[path])
}

fn cmd_retrain(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let tun = cfg
        .tunable
        .as_ref()
        .ok_or_else(|| Error::config("tunable", "section required for retrain-tunable"))?;
    let stack = ctx.load_model()?;
    let table = cfg.material_table()?;
    let freqs = cfg.analysis.frequencies()?;
    let before = sweep(&stack, &table, SweepAxis::OutputShift, &tun.dz, &freqs, tun.detector)?;
    let before_path = ctx.path("sweep_dz_before.csv");
    io::save_sweep_csv(&before_path, &before)?;
    let anchors: Vec<TunableAnchor> = before
        .iter()
        .map(|r| TunableAnchor {
            dz: r.value,
            center: r.report.peak,
        })
        .collect();
    let target_q = tun
        .target_q
        .unwrap_or_else(|| before.iter().map(|r| r.report.q_factor).sum::<f64>() / before.len() as f64);
    let template = tun.template(target_q);
    let train_cfg: &TrainConfig = &tun.training;
    let history = ctx.path("history_tunable.csv");
    let retrained = with_history(&history, |obs| {
        retrain_tunable_observed(&stack, &anchors, &template, train_cfg, &table, obs).map(|o| o.stack)
    })?;
    let model = ctx.path("model_tunable.json");
    io::save_model(&model, &retrained)?;
    let after = sweep(
        &retrained,
        &table,
        SweepAxis::OutputShift,
        &tun.dz,
        &freqs,
        tun.detector,
    )?;
    let after_path = ctx.path("sweep_dz_after.csv");
    io::save_sweep_csv(&after_path, &after)?;
    let spread = |rows: &[crate::analysis::SweepRow]| {
        let q = rows.iter().map(|r| r.report.q_factor);
        q.clone().fold(f64::NEG_INFINITY, f64::max) - q.fold(f64::INFINITY, f64::min)
    };
    println!("Q spread before {:.3}, after {:.3}", spread(&before), spread(&after));
    ctx.manifest("retrain-tunable", &[before_path, history, model, after_path])
}

fn cmd_export(ctx: &Context) -> Result<()> {
    let stack = ctx.load_model()?;
    let mut artifacts = Vec::new();
    for (k, layer) in stack.layers.iter().enumerate() {
        let map = layer.thickness_map(true);
        let bytes = export_stl(&map, layer.feature_pitch, layer.params.h_base)?;
        let path = ctx.path(&format!("layer_{k}.stl"));
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        artifacts.push(path);
    }
    write_layers(ctx, &stack, &mut artifacts)?;
    ctx.manifest("export-stl", &artifacts)
}
