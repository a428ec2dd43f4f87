//! Uniform sampling grids, complex scalar fields and power integration.
//!
//! Grids are centered on the optical axis: sample `i` of an `n`-sample axis
//! sits at `(i - (n - 1) / 2) * pitch`. Fields are stored row-major as
//! `values[[iy, ix]]`.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative slack applied to region bounds so that sample centers that land
/// exactly on a boundary are classified consistently.
const EDGE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneGrid {
    samples_x: usize,
    samples_y: usize,
    pitch: f64,
}

impl PlaneGrid {
    pub fn new(samples_x: usize, samples_y: usize, pitch: f64) -> Result<Self> {
        if !(pitch.is_finite() && pitch > 0.0) {
            return Err(Error::invalid(format!("grid pitch must be positive, got {pitch}")));
        }
        if samples_x < 2 || samples_y < 2 {
            return Err(Error::invalid(format!(
                "grid needs at least 2 samples per side, got {samples_x}x{samples_y}"
            )));
        }
        Ok(PlaneGrid {
            samples_x,
            samples_y,
            pitch,
        })
    }

    pub fn samples_x(&self) -> usize {
        self.samples_x
    }

    pub fn samples_y(&self) -> usize {
        self.samples_y
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    /// Array shape `(rows, cols)` = `(samples_y, samples_x)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.samples_y, self.samples_x)
    }

    pub fn extent_x(&self) -> f64 {
        self.samples_x as f64 * self.pitch
    }

    pub fn extent_y(&self) -> f64 {
        self.samples_y as f64 * self.pitch
    }

    pub fn x(&self, ix: usize) -> f64 {
        (ix as f64 - (self.samples_x as f64 - 1.0) / 2.0) * self.pitch
    }

    pub fn y(&self, iy: usize) -> f64 {
        (iy as f64 - (self.samples_y as f64 - 1.0) / 2.0) * self.pitch
    }

    /// Index of the sample row closest to `y = 0` (the upper one for even counts).
    pub fn center_row(&self) -> usize {
        self.samples_y / 2
    }

    pub fn contains(&self, region: &Region) -> bool {
        let tol = EDGE_SLACK * self.pitch;
        let (x0, x1) = region.x_bounds();
        let (y0, y1) = region.y_bounds();
        x0 >= -self.extent_x() / 2.0 - tol
            && x1 <= self.extent_x() / 2.0 + tol
            && y0 >= -self.extent_y() / 2.0 - tol
            && y1 <= self.extent_y() / 2.0 + tol
    }

    pub(crate) fn check_region(&self, region: &Region) -> Result<()> {
        if self.contains(region) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "region {region:?} exceeds the {:.4} x {:.4} mm grid",
                self.extent_x(),
                self.extent_y()
            )))
        }
    }

    /// Half-open index ranges `(ix0..ix1, iy0..iy1)` of sample centers inside `region`.
    pub fn index_ranges(&self, region: &Region) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let tol = EDGE_SLACK * self.pitch;
        let axis = |n: usize, (lo, hi): (f64, f64), coord: &dyn Fn(usize) -> f64| {
            let start = (0..n).find(|&i| coord(i) >= lo - tol).unwrap_or(n);
            let end = (start..n).find(|&i| coord(i) >= hi - tol).unwrap_or(n);
            start..end
        };
        (
            axis(self.samples_x, region.x_bounds(), &|i| self.x(i)),
            axis(self.samples_y, region.y_bounds(), &|i| self.y(i)),
        )
    }

    /// Binary membership mask of `region`, shaped like the grid.
    pub fn mask(&self, region: &Region) -> Array2<bool> {
        let (xs, ys) = self.index_ranges(region);
        Array2::from_shape_fn(self.shape(), |(iy, ix)| xs.contains(&ix) && ys.contains(&iy))
    }
}

/// Builds a square grid of `ceil(extent / pitch)` samples per side.
pub fn make_grid(extent_mm: f64, pitch_mm: f64) -> Result<PlaneGrid> {
    if !(extent_mm.is_finite() && extent_mm > 0.0) {
        return Err(Error::invalid(format!("extent must be positive, got {extent_mm}")));
    }
    if !(pitch_mm.is_finite() && pitch_mm > 0.0) {
        return Err(Error::invalid(format!("pitch must be positive, got {pitch_mm}")));
    }
    let n = (extent_mm / pitch_mm - EDGE_SLACK).ceil() as usize;
    PlaneGrid::new(n, n, pitch_mm)
}

/// Axis-aligned rectangle in the transverse plane, in mm.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Region {
    pub center: (f64, f64),
    pub width_x: f64,
    pub width_y: f64,
}

impl Region {
    pub fn new(center: (f64, f64), width_x: f64, width_y: f64) -> Result<Self> {
        if !(width_x.is_finite() && width_x > 0.0 && width_y.is_finite() && width_y > 0.0) {
            return Err(Error::invalid(format!(
                "region widths must be positive, got {width_x} x {width_y}"
            )));
        }
        if !(center.0.is_finite() && center.1.is_finite()) {
            return Err(Error::invalid("region center must be finite"));
        }
        Ok(Region {
            center,
            width_x,
            width_y,
        })
    }

    pub fn square(center: (f64, f64), width: f64) -> Result<Self> {
        Region::new(center, width, width)
    }

    pub fn centered(width: f64) -> Result<Self> {
        Region::new((0.0, 0.0), width, width)
    }

    pub fn x_bounds(&self) -> (f64, f64) {
        (self.center.0 - self.width_x / 2.0, self.center.0 + self.width_x / 2.0)
    }

    pub fn y_bounds(&self) -> (f64, f64) {
        (self.center.1 - self.width_y / 2.0, self.center.1 + self.width_y / 2.0)
    }

    /// Same center, new widths.
    pub fn resized(&self, width_x: f64, width_y: f64) -> Result<Self> {
        Region::new(self.center, width_x, width_y)
    }
}

/// Sampled complex scalar field at a single frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    grid: PlaneGrid,
    values: Array2<Complex64>,
    frequency: f64,
}

impl ComplexField {
    pub fn new(grid: PlaneGrid, values: Array2<Complex64>, frequency: f64) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::invalid(format!(
                "field shape {:?} does not match grid {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        if values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::invalid("field contains non-finite values"));
        }
        Ok(ComplexField {
            grid,
            values,
            frequency,
        })
    }

    /// Wraps values already known to be finite and correctly shaped.
    pub(crate) fn from_parts(grid: PlaneGrid, values: Array2<Complex64>, frequency: f64) -> Self {
        debug_assert_eq!(values.dim(), grid.shape());
        ComplexField {
            grid,
            values,
            frequency,
        }
    }

    pub fn zeros(grid: PlaneGrid, frequency: f64) -> Self {
        ComplexField::from_parts(grid, Array2::zeros(grid.shape()), frequency)
    }

    /// Unit-amplitude, zero-phase plane wave over the whole grid.
    pub fn plane_wave(grid: PlaneGrid, frequency: f64) -> Self {
        ComplexField::from_parts(
            grid,
            Array2::from_elem(grid.shape(), Complex64::new(1.0, 0.0)),
            frequency,
        )
    }

    pub fn grid(&self) -> &PlaneGrid {
        &self.grid
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<Complex64> {
        self.values
    }

    pub fn frequency(&self) -> f64 {
        self.frequency
    }

    /// Total power over the whole grid.
    pub fn total_power(&self) -> f64 {
        let p2 = self.grid.pitch * self.grid.pitch;
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * p2
    }

    pub fn intensity(&self) -> Array2<f64> {
        self.values.mapv(|v| v.norm_sqr())
    }
}

/// Sum of `|u|^2 * pitch^2` over the samples whose centers fall inside `region`.
pub fn integrate_power(field: &ComplexField, region: &Region) -> Result<f64> {
    field.grid.check_region(region)?;
    Ok(region_power(&field.grid, &field.values, region))
}

pub(crate) fn region_power(grid: &PlaneGrid, values: &Array2<Complex64>, region: &Region) -> f64 {
    let (xs, ys) = grid.index_ranges(region);
    let mut acc = 0.0;
    for iy in ys {
        for ix in xs.clone() {
            acc += values[[iy, ix]].norm_sqr();
        }
    }
    acc * grid.pitch * grid.pitch
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field_from(grid: PlaneGrid, f: impl Fn(usize, usize) -> Complex64) -> ComplexField {
        ComplexField::new(grid, Array2::from_shape_fn(grid.shape(), |(r, c)| f(r, c)), 0.35).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = make_grid(50.0, 0.125).unwrap();
        assert_eq!((g.samples_x(), g.samples_y()), (400, 400));
        assert!(make_grid(0.125, 0.125).is_err());
        let g = make_grid(1.0, 0.5).unwrap();
        assert_eq!((g.samples_x(), g.samples_y()), (2, 2));
        assert!(make_grid(-1.0, 0.5).is_err());
        assert!(make_grid(1.0, 0.0).is_err());
    }

    #[test]
    fn grid_is_centered() {
        let g = make_grid(1.0, 0.25).unwrap();
        assert_eq!(g.x(0), -0.375);
        assert_eq!(g.x(3), 0.375);
        assert_eq!(g.extent_x(), 1.0);
    }

    #[test]
    fn constant_field_power_counts_samples() {
        let g = make_grid(4.0, 0.5).unwrap();
        let u = ComplexField::plane_wave(g, 0.3);
        // 2 mm square centered on the axis covers 4x4 samples.
        let r = Region::centered(2.0).unwrap();
        let p = integrate_power(&u, &r).unwrap();
        assert!((p - 16.0 * 0.25).abs() < 1e-12);
        let z = ComplexField::zeros(g, 0.3);
        assert_eq!(integrate_power(&z, &r).unwrap(), 0.0);
    }

    #[test]
    fn region_outside_grid_rejected() {
        let g = make_grid(4.0, 0.5).unwrap();
        let u = ComplexField::plane_wave(g, 0.3);
        let r = Region::square((3.0, 0.0), 1.0).unwrap();
        assert!(matches!(integrate_power(&u, &r), Err(Error::InvalidArgument(_))));
        assert!(Region::centered(0.0).is_err());
    }

    #[test]
    fn non_finite_values_rejected() {
        let g = make_grid(1.0, 0.5).unwrap();
        let mut v = Array2::zeros(g.shape());
        v[[0, 0]] = Complex64::new(f64::NAN, 0.0);
        assert!(ComplexField::new(g, v, 0.3).is_err());
    }

    #[test]
    fn adjacent_regions_partition_grid() {
        let g = make_grid(4.0, 0.5).unwrap();
        let u = field_from(g, |r, c| Complex64::new((r * 8 + c) as f64, 1.0));
        let whole = integrate_power(&u, &Region::centered(4.0).unwrap()).unwrap();
        let left = Region::new((-1.0, 0.0), 2.0, 4.0).unwrap();
        let right = Region::new((1.0, 0.0), 2.0, 4.0).unwrap();
        let sum = integrate_power(&u, &left).unwrap() + integrate_power(&u, &right).unwrap();
        assert!((whole - sum).abs() <= 1e-12 * whole);
        assert!((whole - u.total_power()).abs() <= 1e-12 * whole);
    }

    proptest! {
        #[test]
        fn power_invariants(
            vals in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 64),
            theta in -10.0f64..10.0,
            split in 1usize..8,
        ) {
            let g = make_grid(4.0, 0.5).unwrap();
            let u = field_from(g, |r, c| { let (a, b) = vals[r * 8 + c]; Complex64::new(a, b) });
            let whole = Region::centered(4.0).unwrap();
            let p = integrate_power(&u, &whole).unwrap();
            prop_assert!(p >= 0.0);

            let rot = Complex64::from_polar(1.0, theta);
            let mut v = u.clone();
            v.values_mut().mapv_inplace(|z| z * rot);
            let pr = integrate_power(&v, &whole).unwrap();
            prop_assert!((pr - p).abs() <= 1e-12 * p.max(1e-300));

            let mut w = u.clone();
            w.values_mut().mapv_inplace(|z| z * 2.0);
            prop_assert!((integrate_power(&w, &whole).unwrap() - 4.0 * p).abs() <= 1e-12 * p.max(1e-300));

            // additivity across a vertical cut at a sample boundary
            let cut = -2.0 + split as f64 * 0.5;
            let a = Region::new(((-2.0 + cut) / 2.0, 0.0), cut + 2.0, 4.0).unwrap();
            let b = Region::new(((cut + 2.0) / 2.0, 0.0), 2.0 - cut, 4.0).unwrap();
            let s = integrate_power(&u, &a).unwrap() + integrate_power(&u, &b).unwrap();
            prop_assert!((s - p).abs() <= 1e-12 * p.max(1e-300));
        }
    }
}
