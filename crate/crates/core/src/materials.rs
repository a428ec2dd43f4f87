//! Dispersive material data and the complex transmittance of a thickness-modulated neuron.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use num_complex::Complex64;
use serde::Deserialize;

use crate::error::{Error, Result};

/// Speed of light in mm·THz, so that `wavelength_mm = C_MM_THZ / frequency_thz`.
pub const C_MM_THZ: f64 = 0.299_792_458;

/// Refractive index of the surrounding air.
pub const N_AIR: f64 = 1.0;

const SYNTHETIC_CSV: &str = include_str!("../data/synthetic_dispersion.csv");

pub fn wavelength_mm(frequency_thz: f64) -> f64 {
    C_MM_THZ / frequency_thz
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct DispersionRow {
    #[serde(rename = "frequency_thz")]
    pub frequency: f64,
    pub n: f64,
    pub kappa: f64,
}

/// Complex refractive index `n + j·kappa` sampled over frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionTable {
    rows: Vec<DispersionRow>,
}

impl DispersionTable {
    pub fn new(rows: Vec<DispersionRow>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::invalid("dispersion table needs at least 2 rows"));
        }
        for (i, r) in rows.iter().enumerate() {
            if !(r.frequency.is_finite() && r.n.is_finite() && r.kappa.is_finite()) {
                return Err(Error::invalid(format!("row {i}: non-finite value")));
            }
            if r.n < 1.0 {
                return Err(Error::invalid(format!("row {i}: n = {} < 1", r.n)));
            }
            if r.kappa < 0.0 {
                return Err(Error::invalid(format!("row {i}: kappa = {} < 0", r.kappa)));
            }
            if i > 0 && r.frequency <= rows[i - 1].frequency {
                return Err(Error::invalid(format!(
                    "row {i}: frequencies must be strictly increasing"
                )));
            }
        }
        Ok(DispersionTable { rows })
    }

    /// Reads `frequency_thz,n,kappa` CSV. Lines starting with `#` are comments.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| csv_error(&e))?
            .iter()
            .map(str::to_owned)
            .collect::<Vec<_>>();
        if headers != ["frequency_thz", "n", "kappa"] {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `frequency_thz,n,kappa`, got `{}`", headers.join(",")),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<DispersionRow>() {
            rows.push(rec.map_err(|e| csv_error(&e))?);
        }
        DispersionTable::new(rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        DispersionTable::from_csv_reader(file)
    }

    /// Bundled synthetic stand-in (n = 1.72, kappa rising linearly with frequency).
    /// Not measured data.
    pub fn synthetic() -> Self {
        DispersionTable::from_csv_reader(SYNTHETIC_CSV.as_bytes()).expect("bundled dispersion table is valid")
    }

    pub fn rows(&self) -> &[DispersionRow] {
        &self.rows
    }

    pub fn min_frequency(&self) -> f64 {
        self.rows[0].frequency
    }

    pub fn max_frequency(&self) -> f64 {
        self.rows[self.rows.len() - 1].frequency
    }

    /// Linearly interpolated `(n, kappa)` at `frequency`; no extrapolation.
    pub fn index_at(&self, frequency: f64) -> Result<(f64, f64)> {
        let (lo, hi) = (self.min_frequency(), self.max_frequency());
        if !(frequency >= lo && frequency <= hi) {
            return Err(Error::OutOfRange {
                frequency,
                min: lo,
                max: hi,
            });
        }
        let k = self.rows.partition_point(|r| r.frequency < frequency);
        if k < self.rows.len() && self.rows[k].frequency == frequency {
            return Ok((self.rows[k].n, self.rows[k].kappa));
        }
        let (a, b) = (&self.rows[k - 1], &self.rows[k]);
        let t = (frequency - a.frequency) / (b.frequency - a.frequency);
        Ok((a.n + t * (b.n - a.n), a.kappa + t * (b.kappa - a.kappa)))
    }
}

fn csv_error(e: &csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Amplitude and phase imparted by one neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transmittance {
    pub amplitude: f64,
    pub phase: f64,
}

impl Transmittance {
    pub fn to_complex(self) -> Complex64 {
        Complex64::from_polar(self.amplitude, self.phase)
    }
}

/// Propagation constant of a material slab relative to air: the transmittance of
/// thickness `h` is `exp(j·h·beta)` with `beta = 2π(n - n_air + jκ)/λ`.
pub(crate) fn thickness_phasor_rate(n: f64, kappa: f64, wavelength: f64) -> Complex64 {
    Complex64::new(n - N_AIR, kappa) * (2.0 * PI / wavelength)
}

pub fn neuron_transmittance(h_mm: f64, frequency: f64, table: &DispersionTable) -> Result<Transmittance> {
    if !(h_mm >= 0.0) {
        return Err(Error::invalid(format!("thickness must be non-negative, got {h_mm}")));
    }
    let (n, kappa) = table.index_at(frequency)?;
    let lambda = wavelength_mm(frequency);
    Ok(Transmittance {
        amplitude: (-2.0 * PI * kappa * h_mm / lambda).exp(),
        phase: (n - N_AIR) * 2.0 * PI * h_mm / lambda,
    })
}

/// Intensity transmission of `n_layers` uniform absorbing slabs, ignoring reflections.
pub fn slab_power_transmission(kappa: f64, h_mm: f64, wavelength_mm: f64, n_layers: u32) -> Result<f64> {
    if !(wavelength_mm > 0.0) {
        return Err(Error::invalid(format!(
            "wavelength must be positive, got {wavelength_mm}"
        )));
    }
    if !(kappa >= 0.0) || !(h_mm >= 0.0) {
        return Err(Error::invalid("kappa and thickness must be non-negative"));
    }
    if n_layers == 0 {
        return Err(Error::invalid("need at least one layer"));
    }
    let single = (-4.0 * PI * kappa * h_mm / wavelength_mm).exp();
    Ok(single.powi(n_layers as i32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_row(k0: f64, k1: f64) -> DispersionTable {
        DispersionTable::new(vec![
            DispersionRow {
                frequency: 0.2,
                n: 1.7,
                kappa: k0,
            },
            DispersionRow {
                frequency: 0.4,
                n: 1.7,
                kappa: k1,
            },
        ])
        .unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let t = two_row(0.02, 0.04);
        assert_eq!(t.index_at(0.2).unwrap(), (1.7, 0.02));
        assert_eq!(t.index_at(0.4).unwrap(), (1.7, 0.04));
        let (n, k) = t.index_at(0.3).unwrap();
        assert!((n - 1.7).abs() < 1e-15 && (k - 0.03).abs() < 1e-15);
        assert!(matches!(t.index_at(0.1), Err(Error::OutOfRange { .. })));
        assert!(t.index_at(0.41).is_err());
    }

    #[test]
    fn table_validation() {
        assert!(DispersionTable::new(vec![DispersionRow {
            frequency: 0.2,
            n: 1.7,
            kappa: 0.0
        }])
        .is_err());
        let bad_n = vec![
            DispersionRow {
                frequency: 0.2,
                n: 0.9,
                kappa: 0.0,
            },
            DispersionRow {
                frequency: 0.3,
                n: 1.7,
                kappa: 0.0,
            },
        ];
        assert!(DispersionTable::new(bad_n).is_err());
        let unsorted = vec![
            DispersionRow {
                frequency: 0.3,
                n: 1.7,
                kappa: 0.0,
            },
            DispersionRow {
                frequency: 0.2,
                n: 1.7,
                kappa: 0.0,
            },
        ];
        assert!(DispersionTable::new(unsorted).is_err());
    }

    #[test]
    fn csv_parsing() {
        let t = DispersionTable::from_csv_reader("frequency_thz,n,kappa\n0.25,1.7,0.01\n1.0,1.7,0.06\n".as_bytes())
            .unwrap();
        assert_eq!(t.rows().len(), 2);
        let err = DispersionTable::from_csv_reader("f,n,k\n0.25,1.7,0.01\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let err = DispersionTable::from_csv_reader("frequency_thz,n,kappa\n0.25,1.7,0.01\n0.5,abc,0.02\n".as_bytes())
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn synthetic_table_shape() {
        let t = DispersionTable::synthetic();
        assert_eq!(t.min_frequency(), 0.25);
        assert_eq!(t.max_frequency(), 1.0);
        let (n, k) = t.index_at(0.625).unwrap();
        assert_eq!(n, 1.72);
        assert!((k - 0.035).abs() < 1e-6);
    }

    #[test]
    fn transmittance_examples() {
        let t = two_row(0.05, 0.05);
        let tr = neuron_transmittance(0.0, 0.3, &t).unwrap();
        assert_eq!((tr.amplitude, tr.phase), (1.0, 0.0));
        assert!(neuron_transmittance(-0.1, 0.3, &t).is_err());

        // kappa = 0.05, h = 1 mm at 350 GHz (lambda ~ 0.857 mm)
        let t = DispersionTable::new(vec![
            DispersionRow {
                frequency: 0.3,
                n: 1.7,
                kappa: 0.05,
            },
            DispersionRow {
                frequency: 0.4,
                n: 1.7,
                kappa: 0.05,
            },
        ])
        .unwrap();
        let tr = neuron_transmittance(1.0, 0.35, &t).unwrap();
        // happens to sit near ln 2
        #[allow(clippy::approx_constant)]
        let expected = 0.6931;
        assert!((tr.amplitude - expected).abs() < 3e-4, "{}", tr.amplitude);

        // n = 1.7, h = 1.5 mm, lambda = 1 mm -> 0.7 * 2π * 1.5
        let f = C_MM_THZ / 1.0;
        let t = DispersionTable::new(vec![
            DispersionRow {
                frequency: 0.25,
                n: 1.7,
                kappa: 0.0,
            },
            DispersionRow {
                frequency: 0.35,
                n: 1.7,
                kappa: 0.0,
            },
        ])
        .unwrap();
        let tr = neuron_transmittance(1.5, f, &t).unwrap();
        assert!((tr.phase - 6.597_344_572_538_566).abs() < 1e-12);
    }

    #[test]
    fn slab_examples() {
        assert_eq!(slab_power_transmission(0.0, 3.0, 0.5, 5).unwrap(), 1.0);
        let v = slab_power_transmission(0.02933, 1.0, 0.857, 3).unwrap();
        assert!((v - 0.2752).abs() < 5e-4, "{v}");
        let one = slab_power_transmission(0.03, 1.2, 0.8, 1).unwrap();
        let two = slab_power_transmission(0.03, 1.2, 0.8, 2).unwrap();
        assert!((two - one * one).abs() < 1e-15);
        assert!(slab_power_transmission(0.03, 1.0, 0.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn transmittance_properties(h in 0.0f64..3.0, f in 0.25f64..1.0) {
            let table = DispersionTable::synthetic();
            let t1 = neuron_transmittance(h, f, &table).unwrap();
            let t2 = neuron_transmittance(2.0 * h, f, &table).unwrap();
            prop_assert!((t2.phase - 2.0 * t1.phase).abs() <= 1e-12 * t1.phase.abs().max(1e-300));
            prop_assert!(t1.amplitude > 0.0 && t1.amplitude <= 1.0);
            prop_assert!(t2.amplitude <= t1.amplitude);
            let (_, kappa) = table.index_at(f).unwrap();
            let slab = slab_power_transmission(kappa, h, wavelength_mm(f), 1).unwrap();
            prop_assert!((t1.amplitude - slab.sqrt()).abs() <= 1e-12 * t1.amplitude);
        }
    }
}
