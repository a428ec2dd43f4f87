//! Diffractive layers, stack geometry and the single-frequency forward pass.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{region_power, ComplexField, PlaneGrid, Region};
use crate::materials::{thickness_phasor_rate, wavelength_mm, DispersionTable};
use crate::propagation::{
    sampling_warning, EvanescentPolicy, PropagationSpec, Propagator, TransferFunction, TransferMethod,
};

/// Constants mapping a latent variable to a printed thickness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Parametrization {
    pub h_max: f64,
    pub h_base: f64,
    pub levels: u32,
}

impl Default for Parametrization {
    fn default() -> Self {
        Parametrization {
            h_max: 1.0,
            h_base: 0.5,
            levels: 16,
        }
    }
}

impl Parametrization {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_max.is_finite() && self.h_max > 0.0) {
            return Err(Error::invalid(format!("h_max must be positive, got {}", self.h_max)));
        }
        if !(self.h_base.is_finite() && self.h_base >= 0.0) {
            return Err(Error::invalid(format!(
                "h_base must be non-negative, got {}",
                self.h_base
            )));
        }
        if self.levels < 2 {
            return Err(Error::invalid("quantization needs at least 2 levels"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.h_max / self.levels as f64
    }

    pub fn thickness(&self, latent: f64, quantize: bool) -> f64 {
        latent_to_thickness(latent, self.h_max, self.h_base, self.levels, quantize)
    }

    /// `d h / d latent`, with the quantizer treated as identity.
    pub fn thickness_slope(&self, latent: f64) -> f64 {
        latent.cos() * self.h_max / 2.0
    }
}

/// Snaps a modulation depth to the nearest multiple of `h_max / levels`
/// (ties upward), clamped to `[0, h_max]`.
pub fn quantize_depth(h_m: f64, h_max: f64, levels: u32) -> f64 {
    let step = h_max / levels as f64;
    ((h_m / step + 0.5).floor() * step).clamp(0.0, h_max)
}

/// Printed thickness of a feature: `h_m = (sin(h_p) + 1)·h_max/2`, optionally quantized,
/// plus the constant base.
pub fn latent_to_thickness(h_p: f64, h_max: f64, h_base: f64, levels: u32, quantize: bool) -> f64 {
    let h_m = (h_p.sin() + 1.0) * h_max / 2.0;
    let h_m = if quantize {
        quantize_depth(h_m, h_max, levels)
    } else {
        h_m
    };
    h_m + h_base
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffractiveLayer {
    pub features_x: usize,
    pub features_y: usize,
    pub feature_pitch: f64,
    /// Latent variables indexed `[[fy, fx]]`.
    pub latent: Array2<f64>,
    pub params: Parametrization,
    pub active_region: Region,
    pub z_position: f64,
}

impl DiffractiveLayer {
    /// A layer with all latent variables at zero.
    pub fn new(
        features_x: usize,
        features_y: usize,
        feature_pitch: f64,
        params: Parametrization,
        active_region: Region,
        z_position: f64,
    ) -> Result<Self> {
        if features_x == 0 || features_y == 0 {
            return Err(Error::invalid("layer needs at least one feature per side"));
        }
        if !(feature_pitch.is_finite() && feature_pitch > 0.0) {
            return Err(Error::invalid("feature pitch must be positive"));
        }
        params.validate()?;
        Ok(DiffractiveLayer {
            features_x,
            features_y,
            feature_pitch,
            latent: Array2::zeros((features_y, features_x)),
            params,
            active_region,
            z_position,
        })
    }

    pub fn extent_x(&self) -> f64 {
        self.features_x as f64 * self.feature_pitch
    }

    pub fn extent_y(&self) -> f64 {
        self.features_y as f64 * self.feature_pitch
    }

    pub fn feature_center(&self, fx: usize, fy: usize) -> (f64, f64) {
        let p = self.feature_pitch;
        (
            (fx as f64 - (self.features_x as f64 - 1.0) / 2.0) * p,
            (fy as f64 - (self.features_y as f64 - 1.0) / 2.0) * p,
        )
    }

    /// Which features are trainable, indexed `[[fy, fx]]`.
    pub fn active_mask(&self) -> Array2<bool> {
        let slack = 1e-9 * self.feature_pitch;
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo - slack && v < hi - slack;
        Array2::from_shape_fn((self.features_y, self.features_x), |(fy, fx)| {
            let (cx, cy) = self.feature_center(fx, fy);
            inside(cx, self.active_region.x_bounds()) && inside(cy, self.active_region.y_bounds())
        })
    }

    /// Per-feature printed thickness; features outside the active region sit at `h_base`.
    pub fn thickness_map(&self, quantize: bool) -> Array2<f64> {
        let active = self.active_mask();
        Array2::from_shape_fn((self.features_y, self.features_x), |(fy, fx)| {
            if active[[fy, fx]] {
                self.params.thickness(self.latent[[fy, fx]], quantize)
            } else {
                self.params.h_base
            }
        })
    }

    /// Sample-grid placement of this layer: offsets of the feature block inside `grid`.
    pub(crate) fn placement(&self, grid: &PlaneGrid, oversampling: usize) -> Result<(usize, usize)> {
        if oversampling == 0 {
            return Err(Error::invalid("oversampling must be >= 1"));
        }
        let expect = self.feature_pitch / oversampling as f64;
        if (grid.pitch() - expect).abs() > 1e-9 * expect {
            return Err(Error::invalid(format!(
                "grid pitch {} mm does not equal feature pitch / oversampling = {} mm",
                grid.pitch(),
                expect
            )));
        }
        let (need_x, need_y) = (self.features_x * oversampling, self.features_y * oversampling);
        if need_x > grid.samples_x() || need_y > grid.samples_y() {
            return Err(Error::invalid(format!(
                "{}x{} features at oversampling {} exceed the {}x{} sample grid",
                self.features_x,
                self.features_y,
                oversampling,
                grid.samples_x(),
                grid.samples_y()
            )));
        }
        if !(grid.samples_x() - need_x).is_multiple_of(2) || !(grid.samples_y() - need_y).is_multiple_of(2) {
            return Err(Error::invalid(
                "layer cannot be centered on the sample grid (odd margin)",
            ));
        }
        Ok(((grid.samples_x() - need_x) / 2, (grid.samples_y() - need_y) / 2))
    }
}

/// Replicates each feature's thickness over its `oversampling x oversampling` block of
/// `grid`. Samples outside the layer's active region are at `h_base`.
pub fn upsample_features(
    layer: &DiffractiveLayer,
    grid: &PlaneGrid,
    oversampling: usize,
    quantize: bool,
) -> Result<Array2<f64>> {
    let (ox, oy) = layer.placement(grid, oversampling)?;
    let features = layer.thickness_map(quantize);
    let mut map = Array2::from_elem(grid.shape(), layer.params.h_base);
    for ((fy, fx), &h) in features.indexed_iter() {
        for sy in 0..oversampling {
            for sx in 0..oversampling {
                map[[oy + fy * oversampling + sy, ox + fx * oversampling + sx]] = h;
            }
        }
    }
    Ok(map)
}

/// How free-space and slab propagation steps are evaluated inside a stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationSettings {
    #[serde(default)]
    pub method: TransferMethod,
    #[serde(default)]
    pub evanescent_policy: EvanescentPolicy,
    #[serde(default = "default_padding")]
    pub padding: usize,
}

fn default_padding() -> usize {
    2
}

impl Default for PropagationSettings {
    fn default() -> Self {
        PropagationSettings {
            method: TransferMethod::AngularSpectrum,
            evanescent_policy: EvanescentPolicy::ZeroOut,
            padding: 2,
        }
    }
}

impl PropagationSettings {
    pub fn spec(&self, distance: f64, medium_index: f64) -> Result<PropagationSpec> {
        let spec = PropagationSpec {
            distance,
            medium_index,
            evanescent_policy: self.evanescent_policy,
            method: self.method,
            padding: self.padding,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Homogeneous slab between the output aperture and the detector plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSlab {
    pub index: f64,
    pub thickness: f64,
}

impl Default for DetectorSlab {
    fn default() -> Self {
        DetectorSlab {
            index: 3.4,
            thickness: 5.0,
        }
    }
}

/// The whole optical system. The input aperture sits at `z = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalStack {
    pub grid: PlaneGrid,
    pub oversampling: usize,
    pub input_aperture: Region,
    pub layers: Vec<DiffractiveLayer>,
    /// Openings of the output aperture plate; everything else at that plane is blocked.
    pub output_apertures: Vec<Region>,
    pub output_z: f64,
    pub detector_slab: Option<DetectorSlab>,
    /// Detector active areas at the end of the slab (or at the output plane without one).
    pub detectors: Vec<Region>,
    pub propagation: PropagationSettings,
    /// Whether the forward model uses quantized thickness.
    pub quantize: bool,
}

impl OpticalStack {
    pub fn validate(&self) -> Result<()> {
        for r in std::iter::once(&self.input_aperture)
            .chain(&self.output_apertures)
            .chain(&self.detectors)
        {
            self.grid.check_region(r)?;
        }
        if self.output_apertures.is_empty() {
            return Err(Error::invalid("stack needs at least one output aperture opening"));
        }
        if self.detectors.is_empty() {
            return Err(Error::invalid("stack needs at least one detector"));
        }
        let mut z = 0.0;
        for (i, layer) in self.layers.iter().enumerate() {
            if !(layer.z_position > z) {
                return Err(Error::invalid(format!(
                    "layer {i} at z = {} mm is not beyond the previous plane at {z} mm",
                    layer.z_position
                )));
            }
            z = layer.z_position;
            layer.placement(&self.grid, self.oversampling)?;
        }
        if !(self.output_z > z) {
            return Err(Error::invalid(format!(
                "output plane at z = {} mm is not beyond the last layer at {z} mm",
                self.output_z
            )));
        }
        if let Some(slab) = &self.detector_slab {
            if !(slab.thickness > 0.0 && slab.index >= 1.0) {
                return Err(Error::invalid("detector slab needs positive thickness and index >= 1"));
            }
        }
        self.propagation.spec(1.0, 1.0)?;
        Ok(())
    }

    pub fn last_layer_z(&self) -> f64 {
        self.layers.last().map_or(0.0, |l| l.z_position)
    }

    /// Copy with the output aperture (and detector slab) displaced axially by `dz`.
    pub fn with_output_shift(&self, dz: f64) -> Result<OpticalStack> {
        let mut s = self.clone();
        s.output_z += dz;
        if !(s.output_z > s.last_layer_z()) {
            return Err(Error::invalid(format!(
                "displacement {dz} mm moves the output plane onto or before the last layer"
            )));
        }
        Ok(s)
    }

    /// Copy with every aperture opening and detector resized to `width` about its center.
    pub fn with_output_width(&self, width: f64) -> Result<OpticalStack> {
        let mut s = self.clone();
        for r in s.output_apertures.iter_mut().chain(s.detectors.iter_mut()) {
            *r = r.resized(width, width)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn latent_count(&self) -> usize {
        self.layers.iter().map(|l| l.latent.len()).sum()
    }

    pub fn latents(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.latent.iter().copied()).collect()
    }

    pub fn set_latents(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.latent_count());
        let mut it = values.iter();
        for layer in &mut self.layers {
            for v in layer.latent.iter_mut() {
                *v = *it.next().expect("length checked");
            }
        }
    }
}

/// Detector-integrated output power at one frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorReadout {
    pub frequency: f64,
    pub i_in: f64,
    pub i_out: Vec<f64>,
}

pub fn stack_efficiency(readout: &DetectorReadout, detector_index: usize) -> Result<f64> {
    if !(readout.i_in > 0.0) {
        return Err(Error::invalid("input power must be positive"));
    }
    let out = readout.i_out.get(detector_index).ok_or_else(|| {
        Error::invalid(format!(
            "detector {detector_index} out of range ({} detectors)",
            readout.i_out.len()
        ))
    })?;
    Ok(out / readout.i_in)
}

/// Runs one frequency through `stack`. Returns the field just after the output
/// aperture plate and the detector readout.
pub fn forward_single_frequency(
    stack: &OpticalStack,
    frequency: f64,
    table: &DispersionTable,
) -> Result<(ComplexField, DetectorReadout)> {
    let sim = Simulator::new(stack)?;
    let maps = sim.thickness_maps(stack, stack.quantize)?;
    let trace = sim.forward(frequency, table, &maps)?;
    let field = ComplexField::from_parts(stack.grid, trace.output_plane.clone(), frequency);
    Ok((field, trace.readout))
}

/// One free-space or slab hop of the forward chain.
#[derive(Debug, Clone, Copy)]
struct Hop {
    distance: f64,
    medium_index: f64,
}

/// Precomputed per-stack machinery shared by forward and adjoint passes.
#[derive(Debug)]
pub struct Simulator {
    propagator: Propagator,
    settings: PropagationSettings,
    grid: PlaneGrid,
    input_mask: Array2<bool>,
    output_mask: Array2<bool>,
    detectors: Vec<Region>,
    input_aperture: Region,
    /// Hops: input->layer1, layer1->layer2, ..., last->output, then the slab if any.
    hops: Vec<Hop>,
    has_slab: bool,
    oversampling: usize,
    placements: Vec<(usize, usize)>,
}

/// Forward intermediates kept for the adjoint sweep.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub frequency: f64,
    pub readout: DetectorReadout,
    /// Field after the output aperture plate.
    pub output_plane: Array2<Complex64>,
    /// Field on the detector plane.
    pub detector_plane: Array2<Complex64>,
    /// Field leaving each layer (after modulation).
    pub(crate) modulated: Vec<Array2<Complex64>>,
    pub(crate) transmittance: Vec<Array2<Complex64>>,
    pub(crate) rate: Complex64,
    pub(crate) transfers: Vec<TransferFunction>,
}

impl Simulator {
    pub fn new(stack: &OpticalStack) -> Result<Self> {
        stack.validate()?;
        let grid = stack.grid;
        let propagator = Propagator::new(grid, stack.propagation.padding)?;
        let mut hops = Vec::new();
        let mut z = 0.0;
        for layer in &stack.layers {
            hops.push(Hop {
                distance: layer.z_position - z,
                medium_index: 1.0,
            });
            z = layer.z_position;
        }
        hops.push(Hop {
            distance: stack.output_z - z,
            medium_index: 1.0,
        });
        if let Some(slab) = stack.detector_slab {
            hops.push(Hop {
                distance: slab.thickness,
                medium_index: slab.index,
            });
        }
        let output_mask = stack
            .output_apertures
            .iter()
            .map(|r| grid.mask(r))
            .reduce(|mut a, b| {
                a.zip_mut_with(&b, |x, &y| *x |= y);
                a
            })
            .expect("at least one opening");
        let placements = stack
            .layers
            .iter()
            .map(|l| l.placement(&grid, stack.oversampling))
            .collect::<Result<Vec<_>>>()?;
        Ok(Simulator {
            propagator,
            settings: stack.propagation,
            grid,
            input_mask: grid.mask(&stack.input_aperture),
            output_mask,
            detectors: stack.detectors.clone(),
            input_aperture: stack.input_aperture,
            hops,
            has_slab: stack.detector_slab.is_some(),
            oversampling: stack.oversampling,
            placements,
        })
    }

    pub fn grid(&self) -> &PlaneGrid {
        &self.grid
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    pub fn settings(&self) -> &PropagationSettings {
        &self.settings
    }

    pub fn detector_count(&self) -> usize {
        self.detectors.len()
    }

    /// Sample-grid thickness maps for every layer.
    pub fn thickness_maps(&self, stack: &OpticalStack, quantize: bool) -> Result<Vec<Array2<f64>>> {
        stack
            .layers
            .iter()
            .map(|l| upsample_features(l, &self.grid, self.oversampling, quantize))
            .collect()
    }

    /// Unit-amplitude plane wave restricted to the input aperture.
    pub fn input_field(&self) -> Array2<Complex64> {
        self.input_mask.mapv(|m| {
            if m {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
    }

    pub fn input_power(&self) -> f64 {
        region_power(&self.grid, &self.input_field(), &self.input_aperture)
    }

    fn transfers(&self, wavelength: f64) -> Result<Vec<TransferFunction>> {
        let mut out: Vec<TransferFunction> = Vec::with_capacity(self.hops.len());
        for (i, hop) in self.hops.iter().enumerate() {
            // Equal spacings share one transfer function.
            let reuse = self.hops[..i]
                .iter()
                .position(|h| h.distance == hop.distance && h.medium_index == hop.medium_index);
            let tf = match reuse {
                Some(j) => out[j].clone(),
                None => {
                    let spec = self.settings.spec(hop.distance, hop.medium_index)?;
                    self.propagator.transfer(&spec, wavelength)?
                }
            };
            out.push(tf);
        }
        Ok(out)
    }

    /// Forward pass for `frequency` with the given per-layer sample thickness maps.
    pub fn forward(&self, frequency: f64, table: &DispersionTable, maps: &[Array2<f64>]) -> Result<ForwardTrace> {
        assert_eq!(maps.len() + 1 + usize::from(self.has_slab), self.hops.len());
        let (n, kappa) = table.index_at(frequency)?;
        let lambda = wavelength_mm(frequency);
        if let Some(w) = sampling_warning(self.grid.pitch(), lambda, 1.0) {
            log::debug!("{frequency} THz: {w}");
        }
        let rate = thickness_phasor_rate(n, kappa, lambda);
        let transfers = self.transfers(lambda)?;

        let mut u = self.input_field();
        let i_in = region_power(&self.grid, &u, &self.input_aperture);
        let mut modulated = Vec::with_capacity(maps.len());
        let mut transmittance = Vec::with_capacity(maps.len());
        for (l, map) in maps.iter().enumerate() {
            let v = self.propagator.apply(&u, &transfers[l], false);
            let t = map.mapv(|h| (Complex64::i() * rate * h).exp());
            let mut w = v;
            w.zip_mut_with(&t, |a, b| *a *= b);
            check_finite(&w, l, frequency)?;
            transmittance.push(t);
            modulated.push(w.clone());
            u = w;
        }
        let mut out = self.propagator.apply(&u, &transfers[maps.len()], false);
        out.zip_mut_with(&self.output_mask, |v, &m| {
            if !m {
                *v = Complex64::new(0.0, 0.0);
            }
        });
        let detector_plane = if self.has_slab {
            self.propagator.apply(&out, &transfers[maps.len() + 1], false)
        } else {
            out.clone()
        };
        check_finite(&detector_plane, maps.len(), frequency)?;
        let i_out = self
            .detectors
            .iter()
            .map(|r| region_power(&self.grid, &detector_plane, r))
            .collect();
        Ok(ForwardTrace {
            frequency,
            readout: DetectorReadout { frequency, i_in, i_out },
            output_plane: out,
            detector_plane,
            modulated,
            transmittance,
            rate,
            transfers,
        })
    }

    /// Gradient of `Σ_k weights[k] · I_out[k]` with respect to each layer's sample
    /// thickness map, by reverse traversal of the forward chain.
    pub fn thickness_gradient(&self, trace: &ForwardTrace, weights: &[f64]) -> Result<Vec<Array2<f64>>> {
        assert_eq!(weights.len(), self.detectors.len());
        let p2 = self.grid.pitch() * self.grid.pitch();
        let layers = trace.modulated.len();
        let mut g = Array2::<Complex64>::zeros(self.grid.shape());
        for (r, &w) in self.detectors.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let (xs, ys) = self.grid.index_ranges(r);
            for iy in ys {
                for ix in xs.clone() {
                    g[[iy, ix]] += trace.detector_plane[[iy, ix]] * (2.0 * w * p2);
                }
            }
        }
        if self.has_slab {
            g = self.propagator.apply(&g, &trace.transfers[layers + 1], true);
        }
        g.zip_mut_with(&self.output_mask, |v, &m| {
            if !m {
                *v = Complex64::new(0.0, 0.0);
            }
        });
        let mut grads = vec![Array2::<f64>::zeros(self.grid.shape()); layers];
        for l in (0..layers).rev() {
            // g is the sensitivity of the field leaving layer l.
            g = self.propagator.apply(&g, &trace.transfers[l + 1], true);
            let jr = Complex64::i() * trace.rate;
            let u = &trace.modulated[l];
            let grad = &mut grads[l];
            ndarray::Zip::from(grad).and(&g).and(u).for_each(|d, gv, uv| {
                *d = (gv.conj() * uv * jr).re;
            });
            check_finite_real(&grads[l], l, trace.frequency)?;
            if l > 0 {
                let t = &trace.transmittance[l];
                g.zip_mut_with(t, |a, b| *a *= b.conj());
            }
        }
        Ok(grads)
    }

    /// Reduces a sample-grid thickness gradient to the layer's latent variables.
    pub fn latent_gradient(
        &self,
        layer: &DiffractiveLayer,
        layer_index: usize,
        sample_grad: &Array2<f64>,
    ) -> Array2<f64> {
        let (ox, oy) = self.placements[layer_index];
        let os = self.oversampling;
        let active = layer.active_mask();
        Array2::from_shape_fn((layer.features_y, layer.features_x), |(fy, fx)| {
            if !active[[fy, fx]] {
                return 0.0;
            }
            let mut acc = 0.0;
            for sy in 0..os {
                for sx in 0..os {
                    acc += sample_grad[[oy + fy * os + sy, ox + fx * os + sx]];
                }
            }
            acc * layer.params.thickness_slope(layer.latent[[fy, fx]])
        })
    }
}

fn check_finite(a: &Array2<Complex64>, layer: usize, frequency: f64) -> Result<()> {
    if a.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            layer,
            frequency,
            what: "non-finite field".into(),
        })
    }
}

fn check_finite_real(a: &Array2<f64>, layer: usize, frequency: f64) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            layer,
            frequency,
            what: "non-finite gradient".into(),
        })
    }
}
