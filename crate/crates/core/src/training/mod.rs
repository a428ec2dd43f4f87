//! Loss, adjoint gradients and the frequency-batched training loop.

mod adam;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{band_profile, loss_eval, rect, BandLoss, BandSpec, LossSpec, WeightedBand};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::materials::DispersionTable;
use crate::network::{OpticalStack, Simulator};

/// How quantization enters the differentiated forward model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThicknessMode {
    /// Unquantized thickness in both passes.
    Continuous,
    /// Quantized thickness forward; the quantizer is identity in the backward pass.
    StraightThrough,
}

impl ThicknessMode {
    fn quantize(self) -> bool {
        matches!(self, ThicknessMode::StraightThrough)
    }
}

/// Loss and latent gradient over one batch.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub bands: Vec<BandLoss>,
    pub loss_p: f64,
    pub loss_q: f64,
    pub total: f64,
    /// `∂L/∂h_p` per layer, indexed `[[fy, fx]]`.
    pub latent_grads: Vec<Array2<f64>>,
}

impl Evaluation {
    pub fn flat_gradient(&self) -> Vec<f64> {
        self.latent_grads.iter().flat_map(|g| g.iter().copied()).collect()
    }
}

/// One geometry the loss is evaluated on, with its objective.
pub(crate) struct Variant {
    sim: Simulator,
    spec: LossSpec,
}

impl Variant {
    pub(crate) fn new(stack: &OpticalStack, spec: LossSpec) -> Result<Self> {
        let sim = Simulator::new(stack)?;
        spec.validate(sim.detector_count())?;
        Ok(Variant { sim, spec })
    }
}

struct FrequencyContribution {
    bands: Vec<BandLoss>,
    sample_grads: Vec<Array2<f64>>,
}

fn evaluate_variants(
    stack: &OpticalStack,
    variants: &[Variant],
    batch: &[f64],
    table: &DispersionTable,
    mode: ThicknessMode,
    detector: Option<usize>,
) -> Result<Evaluation> {
    let first = variants.first().ok_or_else(|| Error::invalid("no loss variants"))?;
    let maps = first.sim.thickness_maps(stack, mode.quantize())?;
    let layers = stack.layers.len();
    let shape = first.sim.grid().shape();

    let mut band_losses: Vec<BandLoss> = Vec::new();
    let mut sample_grads = vec![Array2::<f64>::zeros(shape); layers];
    for variant in variants {
        let spec = match detector {
            Some(d) => variant.spec.for_detector(d),
            None => variant.spec.clone(),
        };
        if spec.bands.is_empty() {
            continue;
        }
        let count = variant.sim.detector_count();
        let contributions: Vec<Option<FrequencyContribution>> = batch
            .par_iter()
            .map(|&f| -> Result<Option<FrequencyContribution>> {
                if spec.is_inert(f) {
                    return Ok(None);
                }
                let trace = variant.sim.forward(f, table, &maps)?;
                let bands = loss_eval(std::slice::from_ref(&trace.readout), &spec)?;
                let weights = spec.output_weights(f, count);
                let sample_grads = variant.sim.thickness_gradient(&trace, &weights)?;
                Ok(Some(FrequencyContribution { bands, sample_grads }))
            })
            .collect::<Result<_>>()?;
        // Fixed, index-ordered reduction keeps results independent of worker count.
        let mut local: Vec<BandLoss> = spec
            .bands
            .iter()
            .enumerate()
            .map(|(k, wb)| BandLoss {
                band: k,
                detector: wb.band.detector,
                ..Default::default()
            })
            .collect();
        for c in contributions.into_iter().flatten() {
            for (acc, b) in local.iter_mut().zip(&c.bands) {
                acc.loss_p += b.loss_p;
                acc.loss_q += b.loss_q;
                acc.total += b.total;
            }
            for (acc, g) in sample_grads.iter_mut().zip(&c.sample_grads) {
                *acc += g;
            }
        }
        band_losses.extend(local);
    }
    let latent_grads = stack
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| first.sim.latent_gradient(layer, l, &sample_grads[l]))
        .collect();
    Ok(Evaluation {
        loss_p: band_losses.iter().map(|b| b.loss_p).sum(),
        loss_q: band_losses.iter().map(|b| b.loss_q).sum(),
        total: band_losses.iter().map(|b| b.total).sum(),
        bands: band_losses,
        latent_grads,
    })
}

/// Loss of `spec` over `batch` and its exact gradient with respect to every latent
/// variable, computed by the adjoint method.
pub fn gradient(
    stack: &OpticalStack,
    spec: &LossSpec,
    batch: &[f64],
    table: &DispersionTable,
    mode: ThicknessMode,
) -> Result<Evaluation> {
    let variant = Variant::new(stack, spec.clone())?;
    evaluate_variants(stack, std::slice::from_ref(&variant), batch, table, mode, None)
}

/// Early stop when the epoch loss fails to improve by `min_relative_improvement`
/// for `patience` consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plateau {
    pub patience: usize,
    pub min_relative_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub f_min: f64,
    pub f_max: f64,
    /// Number of uniformly spaced training frequencies (endpoints included).
    pub frequencies: usize,
    pub batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Set from the design-level seed rather than read from the training section.
    #[serde(skip)]
    pub seed: u64,
    pub quantize_during_training: bool,
    pub straight_through: bool,
    pub plateau: Option<Plateau>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            f_min: 0.25,
            f_max: 1.0,
            frequencies: 7500,
            batch: 20,
            epochs: 200,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            seed: 0,
            quantize_during_training: true,
            straight_through: true,
            plateau: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_min > 0.0 && self.f_min < self.f_max) {
            return Err(Error::invalid("need 0 < f_min < f_max"));
        }
        if self.frequencies < 2 {
            return Err(Error::invalid("need at least 2 training frequencies"));
        }
        if self.batch == 0 || self.batch > self.frequencies {
            return Err(Error::invalid("batch size must be in 1..=frequencies"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return Err(Error::invalid("Adam moments need beta in [0, 1) and epsilon > 0"));
        }
        if self.quantize_during_training && !self.straight_through {
            return Err(Error::invalid(
                "quantized training without the straight-through estimator has zero gradient almost everywhere",
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn mode(&self) -> ThicknessMode {
        if self.quantize_during_training {
            ThicknessMode::StraightThrough
        } else {
            ThicknessMode::Continuous
        }
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.frequencies / self.batch
    }
}

/// `M` uniformly spaced frequencies from `f_min` to `f_max` inclusive.
pub fn training_frequencies(cfg: &TrainConfig) -> Vec<f64> {
    uniform_frequencies(cfg.f_min, cfg.f_max, cfg.frequencies)
}

pub fn uniform_frequencies(f_min: f64, f_max: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![f_min];
    }
    let step = (f_max - f_min) / (count - 1) as f64;
    (0..count).map(|i| f_min + i as f64 * step).collect()
}

/// Splits a shuffled index order into `⌊M/B⌋` batches; when `B` does not divide `M`
/// the remainder is spread one extra index per batch so every index is used once.
pub fn epoch_batches(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let count = order.len() / batch;
    if count == 0 {
        return Vec::new();
    }
    let extra = order.len() - count * batch;
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for k in 0..count {
        let len = batch + usize::from(k < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub iteration: usize,
    pub detector: usize,
    pub loss_p: f64,
    pub loss_q: f64,
    pub loss_total: f64,
}

/// Progress notifications from the training loop.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    /// One parameter update, with the batch it was computed on.
    Update {
        row: &'a HistoryRow,
        batch: &'a [f64],
    },
    EpochEnd {
        epoch: usize,
        loss: f64,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stack: OpticalStack,
    pub history: Vec<HistoryRow>,
    pub updates: usize,
    pub epochs_run: usize,
}

/// Trains from all-zero latent variables.
pub fn train(
    stack: &OpticalStack,
    spec: &LossSpec,
    cfg: &TrainConfig,
    table: &DispersionTable,
) -> Result<TrainOutcome> {
    train_observed(stack, spec, cfg, table, &mut |_| {})
}

pub fn train_observed(
    stack: &OpticalStack,
    spec: &LossSpec,
    cfg: &TrainConfig,
    table: &DispersionTable,
    observer: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    let mut start = stack.clone();
    for layer in &mut start.layers {
        layer.latent.fill(0.0);
    }
    let variants = vec![Variant::new(&start, spec.clone())?];
    optimize(start, &variants, cfg, table, observer)
}

/// An axial output-plane displacement paired with the band center wanted there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunableAnchor {
    pub dz: f64,
    pub center: f64,
}

/// Continues training from `stack` on the sum of single-band losses, one per anchor,
/// each evaluated with the output plane displaced by the anchor's `dz` and the
/// template band re-centered on the anchor's frequency.
pub fn retrain_tunable(
    stack: &OpticalStack,
    anchors: &[TunableAnchor],
    template: &LossSpec,
    cfg: &TrainConfig,
    table: &DispersionTable,
) -> Result<TrainOutcome> {
    retrain_tunable_observed(stack, anchors, template, cfg, table, &mut |_| {})
}

pub fn retrain_tunable_observed(
    stack: &OpticalStack,
    anchors: &[TunableAnchor],
    template: &LossSpec,
    cfg: &TrainConfig,
    table: &DispersionTable,
    observer: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    if anchors.is_empty() {
        return Err(Error::invalid("tunable retraining needs at least one anchor"));
    }
    if template.bands.len() != 1 {
        return Err(Error::invalid("tunable retraining needs a single-band template"));
    }
    let variants = anchors
        .iter()
        .map(|a| {
            let shifted = stack.with_output_shift(a.dz)?;
            let mut spec = template.clone();
            spec.bands[0].band.center = a.center;
            Variant::new(&shifted, spec)
        })
        .collect::<Result<Vec<_>>>()?;
    optimize(stack.clone(), &variants, cfg, table, observer)
}

fn optimize(
    mut stack: OpticalStack,
    variants: &[Variant],
    cfg: &TrainConfig,
    table: &DispersionTable,
    observer: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let freqs = training_frequencies(cfg);
    for f in [freqs[0], freqs[freqs.len() - 1]] {
        table.index_at(f)?;
    }
    let mut detectors: Vec<usize> = variants.iter().flat_map(|v| v.spec.detectors()).collect();
    detectors.sort_unstable();
    detectors.dedup();

    let adam = cfg.adam();
    let mode = cfg.mode();
    let mut state = AdamState::new(stack.latent_count());
    let mut params = stack.latents();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut updates = 0;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..freqs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (iteration, idx) in epoch_batches(&order, cfg.batch).iter().enumerate() {
            let batch: Vec<f64> = idx.iter().map(|&i| freqs[i]).collect();
            let mut schedule = detectors.clone();
            schedule.shuffle(&mut rng);
            for &d in &schedule {
                let eval = evaluate_variants(&stack, variants, &batch, table, mode, Some(d))?;
                let grads = eval.flat_gradient();
                adam_step(&mut state, &mut params, &grads, &adam);
                stack.set_latents(&params);
                updates += 1;
                epoch_loss += eval.total;
                let row = HistoryRow {
                    epoch,
                    iteration,
                    detector: d,
                    loss_p: eval.loss_p,
                    loss_q: eval.loss_q,
                    loss_total: eval.total,
                };
                observer(&TrainEvent::Update {
                    row: &row,
                    batch: &batch,
                });
                history.push(row);
            }
        }
        epochs_run = epoch + 1;
        observer(&TrainEvent::EpochEnd {
            epoch,
            loss: epoch_loss,
        });
        log::info!("epoch {epoch}: loss {epoch_loss:.6e}");
        if let Some(p) = cfg.plateau {
            if epoch_loss < best * (1.0 - p.min_relative_improvement) {
                best = epoch_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= p.patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        stack,
        history,
        updates,
        epochs_run,
    })
}
