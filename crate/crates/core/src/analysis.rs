//! Spectral characterization of a designed stack.

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::materials::{wavelength_mm, DispersionTable};
use crate::network::{OpticalStack, Simulator};

/// Input-normalized detector power versus frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    /// `efficiency[d][i]` is η of detector `d` at `frequencies[i]`.
    pub efficiency: Vec<Vec<f64>>,
}

impl Spectrum {
    pub fn new(frequencies: Vec<f64>, efficiency: Vec<Vec<f64>>) -> Result<Self> {
        if frequencies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("spectrum frequencies must be strictly increasing"));
        }
        if efficiency.iter().any(|e| e.len() != frequencies.len()) {
            return Err(Error::invalid("every detector needs one value per frequency"));
        }
        Ok(Spectrum {
            frequencies,
            efficiency,
        })
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn detector_count(&self) -> usize {
        self.efficiency.len()
    }

    pub fn detector(&self, index: usize) -> Result<&[f64]> {
        self.efficiency
            .get(index)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("detector {index} out of range ({})", self.efficiency.len())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub peak: f64,
    pub fwhm: f64,
    pub q_factor: f64,
    pub eta_peak: f64,
}

/// Frequencies from `f_min` to `f_max` in increments of `step`, both ends included.
pub fn scan_frequencies(f_min: f64, f_max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && f_max >= f_min) {
        return Err(Error::invalid("scan needs step > 0 and f_max >= f_min"));
    }
    let n = ((f_max - f_min) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| f_min + i as f64 * step).collect())
}

/// Efficiency spectrum of `stack` with the output plane displaced by `dz`.
pub fn spectrum_scan(stack: &OpticalStack, table: &DispersionTable, frequencies: &[f64], dz: f64) -> Result<Spectrum> {
    let stack = if dz == 0.0 {
        stack.clone()
    } else {
        stack.with_output_shift(dz)?
    };
    let sim = Simulator::new(&stack)?;
    scan_with(&sim, &stack, table, frequencies)
}

fn scan_with(sim: &Simulator, stack: &OpticalStack, table: &DispersionTable, frequencies: &[f64]) -> Result<Spectrum> {
    for &f in frequencies {
        table.index_at(f)?;
    }
    let maps = sim.thickness_maps(stack, stack.quantize)?;
    let readouts = frequencies
        .par_iter()
        .map(|&f| sim.forward(f, table, &maps).map(|t| t.readout))
        .collect::<Result<Vec<_>>>()?;
    let efficiency = (0..sim.detector_count())
        .map(|d| readouts.iter().map(|r| r.i_out[d] / r.i_in).collect())
        .collect();
    Spectrum::new(frequencies.to_vec(), efficiency)
}

/// Peak, FWHM and Q of the strongest passband seen by one detector.
pub fn band_report(spectrum: &Spectrum, detector: usize) -> Result<BandReport> {
    let y = spectrum.detector(detector)?;
    let f = &spectrum.frequencies;
    if y.len() < 3 {
        return Err(Error::NoBand("need at least 3 spectrum points".into()));
    }
    let i = y
        .iter()
        .enumerate()
        .fold(0, |best, (k, &v)| if v > y[best] { k } else { best });
    if i == 0 || i == y.len() - 1 {
        return Err(Error::NoBand(format!("maximum at the scan boundary ({} THz)", f[i])));
    }
    if !(y[i] > 0.0) {
        return Err(Error::NoBand("spectrum is zero".into()));
    }
    let (peak, top) = parabola_vertex((f[i - 1], y[i - 1]), (f[i], y[i]), (f[i + 1], y[i + 1]));
    let half = 0.5 * top;

    let left = (0..i)
        .rev()
        .find(|&k| y[k] < half)
        .map(|k| crossing((f[k], y[k]), (f[k + 1], y[k + 1]), half))
        .ok_or_else(|| Error::NoBand("half maximum not crossed below the peak".into()))?;
    let right = (i + 1..y.len())
        .find(|&k| y[k] < half)
        .map(|k| crossing((f[k - 1], y[k - 1]), (f[k], y[k]), half))
        .ok_or_else(|| Error::NoBand("half maximum not crossed above the peak".into()))?;
    let fwhm = right - left;
    Ok(BandReport {
        peak,
        fwhm,
        q_factor: peak / fwhm,
        eta_peak: y[i],
    })
}

// Vertex of the parabola through three points; falls back to the middle sample
// when the points are collinear.
fn parabola_vertex(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> (f64, f64) {
    let (x0, y0) = a;
    let (x1, y1) = b;
    let (x2, y2) = c;
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let curv = (d12 - d01) / (x2 - x0);
    if !(curv < 0.0) {
        return b;
    }
    // y = y1 + d (x - x1) + curv (x - x1)^2 around x1
    let slope = d01 + curv * (x1 - x0);
    let dx = -slope / (2.0 * curv);
    let dx = dx.clamp(x0 - x1, x2 - x1);
    (x1 + dx, y1 + slope * dx + curv * dx * dx)
}

fn crossing(a: (f64, f64), b: (f64, f64), level: f64) -> f64 {
    a.0 + (level - a.1) * (b.0 - a.0) / (b.1 - a.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Axial displacement of the output aperture and detector, mm.
    OutputShift,
    /// Side length of every output aperture opening and detector, mm.
    ApertureWidth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub report: BandReport,
    pub eta_relative: f64,
}

/// Band report of one detector for each displaced or resized variant of `stack`.
/// Peak efficiencies are normalized to the unperturbed entry (`Δz = 0`, or the
/// stack's own aperture width), or to the first row when that value is absent.
pub fn sweep(
    stack: &OpticalStack,
    table: &DispersionTable,
    axis: SweepAxis,
    values: &[f64],
    frequencies: &[f64],
    detector: usize,
) -> Result<Vec<SweepRow>> {
    let nominal = match axis {
        SweepAxis::OutputShift => 0.0,
        SweepAxis::ApertureWidth => stack
            .detectors
            .get(detector)
            .map(|r| r.width_x)
            .ok_or_else(|| Error::invalid(format!("detector {detector} out of range")))?,
    };
    let reports = values
        .iter()
        .map(|&v| {
            let spectrum = match axis {
                SweepAxis::OutputShift => spectrum_scan(stack, table, frequencies, v)?,
                SweepAxis::ApertureWidth => spectrum_scan(&stack.with_output_width(v)?, table, frequencies, 0.0)?,
            };
            band_report(&spectrum, detector)
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = values.iter().position(|&v| (v - nominal).abs() < 1e-12).unwrap_or(0);
    let eta_ref = reports.get(reference).map_or(1.0, |r| r.eta_peak);
    Ok(values
        .iter()
        .zip(reports)
        .map(|(&value, report)| SweepRow {
            value,
            report,
            eta_relative: report.eta_peak / eta_ref,
        })
        .collect())
}

/// Intensity over an `(x, z)` slice through `y = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct XzMap {
    pub frequency: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    /// `intensity[[iz, ix]]`.
    pub intensity: Array2<f64>,
}

/// Propagates the forward field to each requested plane and records the `y = 0` row.
/// Planes past the output aperture are inside the detector slab when one is present.
pub fn xz_projection(stack: &OpticalStack, table: &DispersionTable, frequency: f64, z: &[f64]) -> Result<XzMap> {
    let sim = Simulator::new(stack)?;
    let maps = sim.thickness_maps(stack, stack.quantize)?;
    let trace = sim.forward(frequency, table, &maps)?;
    let z_end = stack.output_z + stack.detector_slab.map_or(f64::INFINITY, |s| s.thickness);
    if let Some(&bad) = z.iter().find(|&&v| !(v >= 0.0 && v <= z_end)) {
        return Err(Error::invalid(format!("plane z = {bad} mm outside [0, {z_end}] mm")));
    }
    // (plane position, field leaving it, medium index downstream)
    let mut planes: Vec<(f64, &Array2<Complex64>, f64)> = Vec::new();
    let input = sim.input_field();
    planes.push((0.0, &input, 1.0));
    for (layer, field) in stack.layers.iter().zip(&trace.modulated) {
        planes.push((layer.z_position, field, 1.0));
    }
    let slab_index = stack.detector_slab.map_or(1.0, |s| s.index);
    planes.push((stack.output_z, &trace.output_plane, slab_index));

    let grid = stack.grid;
    let row = grid.center_row();
    let lambda = wavelength_mm(frequency);
    let rows = z
        .par_iter()
        .map(|&zq| -> Result<Vec<f64>> {
            let (z0, field, index) = planes
                .iter()
                .rev()
                .find(|p| p.0 <= zq)
                .copied()
                .expect("input plane at z = 0");
            let d = zq - z0;
            let u = if d == 0.0 {
                field.row(row).to_owned()
            } else {
                let spec = stack.propagation.spec(d, index)?;
                let tf = sim.propagator().transfer(&spec, lambda)?;
                sim.propagator().apply(field, &tf, false).row(row).to_owned()
            };
            Ok(u.iter().map(|v| v.norm_sqr()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut intensity = Array2::zeros((z.len(), grid.samples_x()));
    for (iz, r) in rows.iter().enumerate() {
        for (ix, &v) in r.iter().enumerate() {
            intensity[[iz, ix]] = v;
        }
    }
    Ok(XzMap {
        frequency,
        x: (0..grid.samples_x()).map(|ix| grid.x(ix)).collect(),
        z: z.to_vec(),
        intensity,
    })
}
