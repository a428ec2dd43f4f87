//! Passband objectives: flat-top power term plus an out-of-band Q-factor term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::DetectorReadout;

/// Unit box: 1 for `|x| <= 1/2`, else 0.
pub fn rect(x: f64) -> f64 {
    if x.abs() <= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Gaussian band with FWHM `center / q`: returns `(sigma, guard_width = 6·sigma)`.
pub fn band_profile(center: f64, target_q: f64) -> Result<(f64, f64)> {
    if !(center > 0.0 && center.is_finite()) {
        return Err(Error::invalid(format!("band center must be positive, got {center}")));
    }
    if !(target_q > 0.0) {
        return Err(Error::invalid(format!("target Q must be positive, got {target_q}")));
    }
    let fwhm = center / target_q;
    let sigma = (fwhm * fwhm / (8.0 * std::f64::consts::LN_2)).sqrt();
    Ok((sigma, 6.0 * sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSpec {
    /// Band center in THz.
    pub center: f64,
    /// Flat-top pass width in THz.
    #[serde(default = "default_pass_width")]
    pub pass_width: f64,
    #[serde(default)]
    pub target_q: Option<f64>,
    #[serde(default)]
    pub detector: usize,
}

fn default_pass_width() -> f64 {
    0.005
}

impl BandSpec {
    pub fn new(center: f64, detector: usize) -> Self {
        BandSpec {
            center,
            pass_width: default_pass_width(),
            target_q: None,
            detector,
        }
    }

    pub fn with_target_q(mut self, q: f64) -> Self {
        self.target_q = Some(q);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.center > 0.0) {
            return Err(Error::invalid("band center must be positive"));
        }
        if !(self.pass_width > 0.0) {
            return Err(Error::invalid("pass width must be positive"));
        }
        if let Some(g) = self.guard_width()? {
            if !(g > self.pass_width) {
                return Err(Error::invalid(format!(
                    "guard width {g} THz must exceed the pass width {} THz",
                    self.pass_width
                )));
            }
        }
        Ok(())
    }

    /// Width of the window outside which output power is penalized, if a Q target is set.
    pub fn guard_width(&self) -> Result<Option<f64>> {
        self.target_q
            .map(|q| band_profile(self.center, q).map(|(_, g)| g))
            .transpose()
    }

    pub fn in_pass(&self, frequency: f64) -> f64 {
        rect((frequency - self.center) / self.pass_width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "FlatBand", into = "FlatBand")]
pub struct WeightedBand {
    pub band: BandSpec,
    pub alpha: f64,
    pub beta: f64,
}

// On disk a weighted band is one flat table; `flatten` would lose unknown-key checks.
#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatBand {
    center: f64,
    #[serde(default = "default_pass_width")]
    pass_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_q: Option<f64>,
    #[serde(default)]
    detector: usize,
    #[serde(default = "one")]
    alpha: f64,
    #[serde(default)]
    beta: f64,
}

impl From<FlatBand> for WeightedBand {
    fn from(f: FlatBand) -> Self {
        WeightedBand {
            band: BandSpec {
                center: f.center,
                pass_width: f.pass_width,
                target_q: f.target_q,
                detector: f.detector,
            },
            alpha: f.alpha,
            beta: f.beta,
        }
    }
}

impl From<WeightedBand> for FlatBand {
    fn from(w: WeightedBand) -> Self {
        FlatBand {
            center: w.band.center,
            pass_width: w.band.pass_width,
            target_q: w.band.target_q,
            detector: w.band.detector,
            alpha: w.alpha,
            beta: w.beta,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub bands: Vec<WeightedBand>,
}

/// Per-frequency coefficients of one band: `L = pass·(I_in - I_out) + stop·I_out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BandCoefficients {
    pub pass: f64,
    pub stop: f64,
}

impl LossSpec {
    pub fn single(band: BandSpec, alpha: f64, beta: f64) -> Self {
        LossSpec {
            bands: vec![WeightedBand { band, alpha, beta }],
        }
    }

    pub fn validate(&self, detector_count: usize) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::invalid("loss needs at least one band"));
        }
        for (k, wb) in self.bands.iter().enumerate() {
            wb.band.validate()?;
            if !(wb.alpha >= 0.0 && wb.beta >= 0.0 && wb.alpha + wb.beta > 0.0) {
                return Err(Error::invalid(format!(
                    "band {k}: weights must be non-negative with alpha + beta > 0"
                )));
            }
            if wb.beta > 0.0 && wb.band.target_q.is_none() {
                return Err(Error::invalid(format!("band {k}: beta > 0 requires target_q")));
            }
            if wb.band.detector >= detector_count {
                return Err(Error::invalid(format!(
                    "band {k}: detector {} out of range ({detector_count} detectors)",
                    wb.band.detector
                )));
            }
        }
        Ok(())
    }

    /// Distinct detectors referenced by the bands, ascending.
    pub fn detectors(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.bands.iter().map(|b| b.band.detector).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    /// Bands restricted to one detector.
    pub fn for_detector(&self, detector: usize) -> LossSpec {
        LossSpec {
            bands: self
                .bands
                .iter()
                .filter(|b| b.band.detector == detector)
                .copied()
                .collect(),
        }
    }

    pub(crate) fn coefficients(&self, frequency: f64) -> Vec<BandCoefficients> {
        self.bands
            .iter()
            .map(|wb| {
                let pass = wb.alpha * wb.band.in_pass(frequency);
                let stop = if wb.beta == 0.0 {
                    0.0
                } else {
                    let guard = wb.band.guard_width().ok().flatten().unwrap_or(f64::INFINITY);
                    wb.beta * (1.0 - rect((frequency - wb.band.center) / guard))
                };
                BandCoefficients { pass, stop }
            })
            .collect()
    }

    /// True when no band contributes at this frequency.
    pub(crate) fn is_inert(&self, frequency: f64) -> bool {
        self.coefficients(frequency)
            .iter()
            .all(|c| c.pass == 0.0 && c.stop == 0.0)
    }

    /// `∂L/∂I_out[k]` at `frequency` for each of `detector_count` detectors.
    pub(crate) fn output_weights(&self, frequency: f64, detector_count: usize) -> Vec<f64> {
        let mut w = vec![0.0; detector_count];
        for (wb, c) in self.bands.iter().zip(self.coefficients(frequency)) {
            w[wb.band.detector] += c.stop - c.pass;
        }
        w
    }
}

/// Loss of one band over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BandLoss {
    pub band: usize,
    pub detector: usize,
    /// Unweighted power term.
    pub loss_p: f64,
    /// Unweighted out-of-band term.
    pub loss_q: f64,
    /// `alpha·loss_p + beta·loss_q`.
    pub total: f64,
}

/// Evaluates every band of `spec` over a batch of readouts.
pub fn loss_eval(readouts: &[DetectorReadout], spec: &LossSpec) -> Result<Vec<BandLoss>> {
    let mut out = Vec::with_capacity(spec.bands.len());
    for (k, wb) in spec.bands.iter().enumerate() {
        let d = wb.band.detector;
        let guard = if wb.beta == 0.0 { None } else { wb.band.guard_width()? };
        let mut loss = BandLoss {
            band: k,
            detector: d,
            ..Default::default()
        };
        for r in readouts {
            let i_out = *r.i_out.get(d).ok_or_else(|| {
                Error::invalid(format!(
                    "band {k}: detector {d} out of range ({} detectors)",
                    r.i_out.len()
                ))
            })?;
            loss.loss_p += wb.band.in_pass(r.frequency) * (r.i_in - i_out);
            if let Some(g) = guard {
                loss.loss_q += (1.0 - rect((r.frequency - wb.band.center) / g)) * i_out;
            }
        }
        loss.total = wb.alpha * loss.loss_p + wb.beta * loss.loss_q;
        out.push(loss);
    }
    Ok(out)
}
