//! Scalar diffraction between parallel planes.
//!
//! Two spectral-domain routes are provided. [`TransferMethod::AngularSpectrum`]
//! multiplies the zero-padded spectrum by the analytic plane-wave transfer
//! function. [`TransferMethod::SampledKernel`] multiplies it by the DFT of the
//! sampled Rayleigh-Sommerfeld secondary-wave kernel on a grid padded to at
//! least twice the field, which evaluates the discrete secondary-wave sum as a
//! linear (wrap-free) convolution. [`propagate_direct_sum`] is the brute-force
//! evaluation of that same sum and exists to validate both routes.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ComplexField, PlaneGrid, Region};
use crate::materials::wavelength_mm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvanescentPolicy {
    #[default]
    ZeroOut,
    KeepDecaying,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMethod {
    #[default]
    AngularSpectrum,
    SampledKernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationSpec {
    pub distance: f64,
    pub medium_index: f64,
    pub evanescent_policy: EvanescentPolicy,
    pub method: TransferMethod,
    /// Zero-padding factor per axis; the transform grid is `padding` times the field grid.
    pub padding: usize,
}

impl PropagationSpec {
    pub fn new(distance: f64, medium_index: f64) -> Result<Self> {
        let spec = PropagationSpec {
            distance,
            medium_index,
            evanescent_policy: EvanescentPolicy::ZeroOut,
            method: TransferMethod::AngularSpectrum,
            padding: 2,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn air(distance: f64) -> Result<Self> {
        PropagationSpec::new(distance, 1.0)
    }

    pub fn with_policy(mut self, policy: EvanescentPolicy) -> Self {
        self.evanescent_policy = policy;
        self
    }

    pub fn with_method(mut self, method: TransferMethod) -> Self {
        self.method = method;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance.is_finite() && self.distance > 0.0) {
            return Err(Error::invalid(format!(
                "propagation distance must be positive, got {}",
                self.distance
            )));
        }
        if !(self.medium_index.is_finite() && self.medium_index >= 1.0) {
            return Err(Error::invalid(format!(
                "medium index must be >= 1, got {}",
                self.medium_index
            )));
        }
        if self.padding == 0 {
            return Err(Error::invalid("padding factor must be >= 1"));
        }
        if self.method == TransferMethod::SampledKernel && self.padding < 2 {
            return Err(Error::invalid(
                "sampled-kernel propagation needs padding >= 2 for a linear convolution",
            ));
        }
        Ok(())
    }
}

/// Rayleigh-Sommerfeld secondary-wave kernel, in mm⁻².
pub fn rs_kernel(dx: f64, dy: f64, dz: f64, wavelength: f64) -> Result<Complex64> {
    if !(dz > 0.0) {
        return Err(Error::invalid(format!("kernel needs dz > 0, got {dz}")));
    }
    if !(wavelength > 0.0) {
        return Err(Error::invalid(format!("wavelength must be positive, got {wavelength}")));
    }
    Ok(rs_kernel_unchecked(dx, dy, dz, wavelength))
}

#[inline]
fn rs_kernel_unchecked(dx: f64, dy: f64, dz: f64, wavelength: f64) -> Complex64 {
    let r2 = dx * dx + dy * dy + dz * dz;
    let r = r2.sqrt();
    // 1/(jλ) = -j/λ
    let radial = Complex64::new(1.0 / (2.0 * PI * r), -1.0 / wavelength);
    radial * (dz / r2) * Complex64::from_polar(1.0, 2.0 * PI * r / wavelength)
}

/// Emitted when the grid pitch exceeds half the in-medium wavelength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingWarning {
    pub pitch: f64,
    pub wavelength_in_medium: f64,
}

impl std::fmt::Display for SamplingWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "pitch {:.4} mm exceeds half the in-medium wavelength {:.4} mm",
            self.pitch, self.wavelength_in_medium
        )
    }
}

pub(crate) fn sampling_warning(pitch: f64, wavelength: f64, medium_index: f64) -> Option<SamplingWarning> {
    let inner = wavelength / medium_index;
    (pitch > inner / 2.0).then_some(SamplingWarning {
        pitch,
        wavelength_in_medium: inner,
    })
}

#[derive(Debug, Clone)]
pub struct Propagated {
    pub field: ComplexField,
    pub warning: Option<SamplingWarning>,
}

/// Transfer function on the padded spectral grid, stored transposed: `[[kx, ky]]`.
#[derive(Debug, Clone)]
pub struct TransferFunction {
    values: Array2<Complex64>,
}

impl TransferFunction {
    /// Values indexed `[[kx, ky]]` in FFT order.
    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }
}

/// Cached FFT plans for one field grid and padding factor. Immutable once built,
/// so a single instance may be shared by any number of worker threads.
#[derive(Clone)]
pub struct Propagator {
    grid: PlaneGrid,
    pad_x: usize,
    pad_y: usize,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Propagator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Propagator")
            .field("grid", &self.grid)
            .field("pad_x", &self.pad_x)
            .field("pad_y", &self.pad_y)
            .finish()
    }
}

impl Propagator {
    pub fn new(grid: PlaneGrid, padding: usize) -> Result<Self> {
        if padding == 0 {
            return Err(Error::invalid("padding factor must be >= 1"));
        }
        let pad_x = grid.samples_x() * padding;
        let pad_y = grid.samples_y() * padding;
        let mut planner = FftPlanner::new();
        Ok(Propagator {
            grid,
            pad_x,
            pad_y,
            fwd_x: planner.plan_fft_forward(pad_x),
            inv_x: planner.plan_fft_inverse(pad_x),
            fwd_y: planner.plan_fft_forward(pad_y),
            inv_y: planner.plan_fft_inverse(pad_y),
        })
    }

    pub fn grid(&self) -> &PlaneGrid {
        &self.grid
    }

    pub fn padding(&self) -> usize {
        self.pad_x / self.grid.samples_x()
    }

    fn check(&self, spec: &PropagationSpec) -> Result<()> {
        spec.validate()?;
        if spec.padding != self.padding() {
            return Err(Error::invalid(format!(
                "propagator built for padding {}, spec asks for {}",
                self.padding(),
                spec.padding
            )));
        }
        Ok(())
    }

    /// Transfer function of `spec` at the given vacuum wavelength.
    pub fn transfer(&self, spec: &PropagationSpec, wavelength: f64) -> Result<TransferFunction> {
        self.check(spec)?;
        if !(wavelength > 0.0) {
            return Err(Error::invalid(format!("wavelength must be positive, got {wavelength}")));
        }
        let values = match spec.method {
            TransferMethod::AngularSpectrum => self.analytic_transfer(spec, wavelength),
            TransferMethod::SampledKernel => self.kernel_transfer(spec, wavelength),
        };
        Ok(TransferFunction { values })
    }

    fn analytic_transfer(&self, spec: &PropagationSpec, wavelength: f64) -> Array2<Complex64> {
        let p = self.grid.pitch();
        let fx = fft_frequencies(self.pad_x, p);
        let fy = fft_frequencies(self.pad_y, p);
        let k2 = (spec.medium_index / wavelength).powi(2);
        let d = spec.distance;
        Array2::from_shape_fn((self.pad_x, self.pad_y), |(kx, ky)| {
            let arg = k2 - fx[kx] * fx[kx] - fy[ky] * fy[ky];
            if arg >= 0.0 {
                Complex64::from_polar(1.0, 2.0 * PI * d * arg.sqrt())
            } else {
                match spec.evanescent_policy {
                    EvanescentPolicy::ZeroOut => Complex64::new(0.0, 0.0),
                    EvanescentPolicy::KeepDecaying => Complex64::new((-2.0 * PI * d * (-arg).sqrt()).exp(), 0.0),
                }
            }
        })
    }

    fn kernel_transfer(&self, spec: &PropagationSpec, wavelength: f64) -> Array2<Complex64> {
        let p = self.grid.pitch();
        let (nx, ny) = (self.grid.samples_x() as isize, self.grid.samples_y() as isize);
        let lambda = wavelength / spec.medium_index;
        let mut kernel = Array2::<Complex64>::zeros((self.pad_y, self.pad_x));
        for my in -(ny - 1)..ny {
            let ry = my.rem_euclid(self.pad_y as isize) as usize;
            for mx in -(nx - 1)..nx {
                let rx = mx.rem_euclid(self.pad_x as isize) as usize;
                kernel[[ry, rx]] = rs_kernel_unchecked(mx as f64 * p, my as f64 * p, spec.distance, lambda) * (p * p);
            }
        }
        self.forward_transform(kernel)
    }

    /// Rows then transpose then rows: returns the spectrum in `[[kx, ky]]` layout.
    fn forward_transform(&self, mut a: Array2<Complex64>) -> Array2<Complex64> {
        fft_rows(&*self.fwd_x, &mut a);
        let mut t = transpose(&a);
        fft_rows(&*self.fwd_y, &mut t);
        t
    }

    /// Applies the operator (or its adjoint when `adjoint`) to a field sampled on the grid.
    pub fn apply(&self, values: &Array2<Complex64>, tf: &TransferFunction, adjoint: bool) -> Array2<Complex64> {
        let (ny, nx) = self.grid.shape();
        debug_assert_eq!(values.dim(), (ny, nx));
        let mut a = Array2::<Complex64>::zeros((self.pad_y, self.pad_x));
        a.slice_mut(s![..ny, ..nx]).assign(values);
        let mut spec = self.forward_transform(a);
        if adjoint {
            spec.zip_mut_with(&tf.values, |s, h| *s *= h.conj());
        } else {
            spec.zip_mut_with(&tf.values, |s, h| *s *= h);
        }
        fft_rows(&*self.inv_y, &mut spec);
        let mut back = transpose(&spec);
        fft_rows(&*self.inv_x, &mut back);
        let scale = 1.0 / (self.pad_x * self.pad_y) as f64;
        back.slice(s![..ny, ..nx]).mapv(|v| v * scale)
    }

    pub fn propagate(&self, field: &ComplexField, spec: &PropagationSpec) -> Result<Propagated> {
        if field.grid() != &self.grid {
            return Err(Error::invalid("field grid does not match propagator grid"));
        }
        let lambda = wavelength_mm(field.frequency());
        let tf = self.transfer(spec, lambda)?;
        let out = self.apply(field.values(), &tf, false);
        let warning = sampling_warning(self.grid.pitch(), lambda, spec.medium_index);
        if let Some(w) = &warning {
            log::warn!("{w}");
        }
        Ok(Propagated {
            field: ComplexField::from_parts(self.grid, out, field.frequency()),
            warning,
        })
    }
}

pub(crate) fn fft_frequencies(n: usize, pitch: f64) -> Vec<f64> {
    let span = n as f64 * pitch;
    (0..n)
        .map(|k| {
            let k = if k < n.div_ceil(2) {
                k as isize
            } else {
                k as isize - n as isize
            };
            k as f64 / span
        })
        .collect()
}

fn fft_rows(fft: &dyn Fft<f64>, a: &mut Array2<Complex64>) {
    let buf = a.as_slice_mut().expect("standard layout");
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(buf, &mut scratch);
}

fn transpose(a: &Array2<Complex64>) -> Array2<Complex64> {
    const BLOCK: usize = 32;
    let (rows, cols) = a.dim();
    let src = a.as_slice().expect("standard layout");
    let mut out = vec![Complex64::new(0.0, 0.0); rows * cols];
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    Array2::from_shape_vec((cols, rows), out).expect("shape")
}

/// Propagates `field` by `spec` on its own grid.
pub fn propagate(field: &ComplexField, spec: &PropagationSpec) -> Result<Propagated> {
    spec.validate()?;
    Propagator::new(*field.grid(), spec.padding)?.propagate(field, spec)
}

/// Brute-force secondary-wave summation over every source/observation sample pair.
/// Quadratic in the sample count; intended for grids of at most a few thousand samples.
pub fn propagate_direct_sum(field: &ComplexField, spec: &PropagationSpec) -> Result<ComplexField> {
    spec.validate()?;
    let grid = *field.grid();
    let lambda = wavelength_mm(field.frequency()) / spec.medium_index;
    let p2 = grid.pitch() * grid.pitch();
    let src = field.values();
    let (ny, nx) = grid.shape();
    let out = Array2::from_shape_fn((ny, nx), |(iy, ix)| {
        let (x, y) = (grid.x(ix), grid.y(iy));
        let mut acc = Complex64::new(0.0, 0.0);
        for ((ky, kx), u) in src.indexed_iter() {
            if u.re == 0.0 && u.im == 0.0 {
                continue;
            }
            acc += u * rs_kernel_unchecked(x - grid.x(kx), y - grid.y(ky), spec.distance, lambda);
        }
        acc * p2
    });
    Ok(ComplexField::from_parts(grid, out, field.frequency()))
}

/// Zeroes the field outside `region`.
pub fn apply_aperture(field: &ComplexField, region: &Region) -> Result<ComplexField> {
    field.grid().check_region(region)?;
    let mask = field.grid().mask(region);
    let mut out = field.clone();
    out.values_mut().zip_mut_with(&mask, |v, &m| {
        if !m {
            *v = Complex64::new(0.0, 0.0);
        }
    });
    Ok(out)
}
