//! File formats: thickness maps, CSV tables and model files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::analysis::{Spectrum, SweepRow, XzMap};
use crate::error::{Error, Result};
use crate::fields::{PlaneGrid, Region};
use crate::network::{DetectorSlab, DiffractiveLayer, OpticalStack, Parametrization, PropagationSettings};
use crate::training::HistoryRow;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}

/// Writes a matrix as comma-separated rows with 6 decimal places (mm).
pub fn write_thickness_map<W: Write>(mut w: W, map: &Array2<f64>) -> std::io::Result<()> {
    for row in map.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()
}

pub fn read_thickness_map<R: BufRead>(r: R) -> Result<Array2<f64>> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (k, line) in r.lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                let c = c.trim();
                c.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        message: format!("`{c}` is not a finite number"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(n) if n != row.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {n} values, found {}", row.len()),
                })
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or(Error::Parse {
        line: 0,
        message: "empty thickness map".into(),
    })?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("shape tracked"))
}

pub fn save_thickness_map(path: &Path, map: &Array2<f64>) -> Result<()> {
    write_thickness_map(create(path)?, map).map_err(|e| Error::io(path, e))
}

pub fn load_thickness_map(path: &Path) -> Result<Array2<f64>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_thickness_map(BufReader::new(f))
}

/// `frequency_thz,detector_0,detector_1,...`
pub fn write_spectrum_csv<W: Write>(w: W, spectrum: &Spectrum) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["frequency_thz".to_string()];
    header.extend((0..spectrum.detector_count()).map(|d| format!("detector_{d}")));
    out.write_record(&header)?;
    for (i, f) in spectrum.frequencies.iter().enumerate() {
        let mut rec = vec![f.to_string()];
        rec.extend(spectrum.efficiency.iter().map(|e| e[i].to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_spectrum_csv(path: &Path, spectrum: &Spectrum) -> Result<()> {
    write_spectrum_csv(create(path)?, spectrum).map_err(|e| csv_err(path, e))
}

/// `value,peak_thz,q_factor,eta_peak,eta_relative`
pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["value", "peak_thz", "q_factor", "eta_peak", "eta_relative"])?;
    for r in rows {
        out.serialize((
            r.value,
            r.report.peak,
            r.report.q_factor,
            r.report.eta_peak,
            r.eta_relative,
        ))?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_sweep_csv(create(path)?, rows).map_err(|e| csv_err(path, e))
}

/// Streams training history rows as `epoch,iteration,detector,loss_p,loss_q,loss_total`.
pub struct HistoryWriter<W: Write> {
    out: csv::Writer<W>,
}

impl HistoryWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(HistoryWriter::new(create(path)?))
    }
}

impl<W: Write> HistoryWriter<W> {
    pub fn new(w: W) -> Self {
        HistoryWriter {
            out: csv::WriterBuilder::new().has_headers(true).from_writer(w),
        }
    }

    pub fn write(&mut self, row: &HistoryRow) -> csv::Result<()> {
        self.out.serialize(row)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Plain-text matrix, one row per z plane, after a one-line axis header.
pub fn write_xz_map<W: Write>(mut w: W, map: &XzMap) -> std::io::Result<()> {
    let (x0, x1) = (
        map.x.first().copied().unwrap_or(0.0),
        map.x.last().copied().unwrap_or(0.0),
    );
    let z: Vec<String> = map.z.iter().map(|v| v.to_string()).collect();
    writeln!(
        w,
        "# frequency_thz={} rows=z_mm columns=x_mm x_first={x0} x_last={x1} nx={} z={}",
        map.frequency,
        map.x.len(),
        z.join(",")
    )?;
    for row in map.intensity.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()
}

pub fn save_xz_map(path: &Path, map: &XzMap) -> Result<()> {
    write_xz_map(create(path)?, map).map_err(|e| Error::io(path, e))
}

const MODEL_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRecord {
    samples_x: usize,
    samples_y: usize,
    pitch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    features_x: usize,
    features_y: usize,
    feature_pitch: f64,
    z_position: f64,
    active_region: Region,
    params: Parametrization,
    /// Row-major `[[fy, fx]]`.
    latent: Vec<f64>,
}

/// On-disk form of a trained stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRecord {
    format: u32,
    grid: GridRecord,
    oversampling: usize,
    input_aperture: Region,
    layers: Vec<LayerRecord>,
    output_apertures: Vec<Region>,
    output_z: f64,
    detector_slab: Option<DetectorSlab>,
    detectors: Vec<Region>,
    propagation: PropagationSettings,
    quantize: bool,
}

impl From<&OpticalStack> for ModelRecord {
    fn from(s: &OpticalStack) -> Self {
        ModelRecord {
            format: MODEL_FORMAT,
            grid: GridRecord {
                samples_x: s.grid.samples_x(),
                samples_y: s.grid.samples_y(),
                pitch: s.grid.pitch(),
            },
            oversampling: s.oversampling,
            input_aperture: s.input_aperture,
            layers: s
                .layers
                .iter()
                .map(|l| LayerRecord {
                    features_x: l.features_x,
                    features_y: l.features_y,
                    feature_pitch: l.feature_pitch,
                    z_position: l.z_position,
                    active_region: l.active_region,
                    params: l.params,
                    latent: l.latent.iter().copied().collect(),
                })
                .collect(),
            output_apertures: s.output_apertures.clone(),
            output_z: s.output_z,
            detector_slab: s.detector_slab,
            detectors: s.detectors.clone(),
            propagation: s.propagation,
            quantize: s.quantize,
        }
    }
}

impl TryFrom<ModelRecord> for OpticalStack {
    type Error = Error;

    fn try_from(m: ModelRecord) -> Result<Self> {
        if m.format != MODEL_FORMAT {
            return Err(Error::invalid(format!("unsupported model format {}", m.format)));
        }
        let grid = PlaneGrid::new(m.grid.samples_x, m.grid.samples_y, m.grid.pitch)?;
        let layers = m
            .layers
            .into_iter()
            .map(|l| {
                let mut layer = DiffractiveLayer::new(
                    l.features_x,
                    l.features_y,
                    l.feature_pitch,
                    l.params,
                    l.active_region,
                    l.z_position,
                )?;
                layer.latent = Array2::from_shape_vec((l.features_y, l.features_x), l.latent)
                    .map_err(|_| Error::invalid("latent count does not match the feature grid"))?;
                Ok(layer)
            })
            .collect::<Result<Vec<_>>>()?;
        let stack = OpticalStack {
            grid,
            oversampling: m.oversampling,
            input_aperture: m.input_aperture,
            layers,
            output_apertures: m.output_apertures,
            output_z: m.output_z,
            detector_slab: m.detector_slab,
            detectors: m.detectors,
            propagation: m.propagation,
            quantize: m.quantize,
        };
        stack.validate()?;
        Ok(stack)
    }
}

/// Serializes a stack (geometry plus latent variables) as pretty-printed JSON.
pub fn model_to_string(stack: &OpticalStack) -> String {
    serde_json::to_string_pretty(&ModelRecord::from(stack)).expect("model record serializes")
}

pub fn model_from_str(s: &str) -> Result<OpticalStack> {
    let record: ModelRecord = serde_json::from_str(s).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    OpticalStack::try_from(record)
}

pub fn save_model(path: &Path, stack: &OpticalStack) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(model_to_string(stack).as_bytes())
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<OpticalStack> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    model_from_str(&s)
}
