//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. The desk-scale training runs make this the
//! slowest target in the workspace (several minutes on one core).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bdnn::analysis::{band_report, spectrum_scan, sweep, BandReport, Spectrum, SweepAxis};
use bdnn::config::DesignConfig;
use bdnn::fields::{make_grid, ComplexField, PlaneGrid, Region};
use bdnn::io::model_to_string;
use bdnn::materials::{slab_power_transmission, DispersionTable, C_MM_THZ};
use bdnn::network::{
    latent_to_thickness, DetectorSlab, DiffractiveLayer, OpticalStack, Parametrization, PropagationSettings,
};
use bdnn::propagation::{
    propagate, propagate_direct_sum, EvanescentPolicy, PropagationSpec, Propagator, TransferMethod,
};
use bdnn::stl::{bounding_box, encode, heightfield_mesh, is_watertight, mesh_volume, parse_stl};
use bdnn::training::{
    gradient, retrain_tunable, train, train_observed, BandSpec, LossSpec, ThicknessMode, TrainEvent, TunableAnchor,
};

type Check = Result<String, String>;
type CheckFn = fn() -> Check;

fn config(name: &str) -> DesignConfig {
    let path: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    DesignConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn rel_l2(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Desk {
    cfg: DesignConfig,
    table: DispersionTable,
    stack: OpticalStack,
    freqs: Vec<f64>,
    report: BandReport,
}

// The single-band desk filter is shared by several checks.
fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let cfg = config("desk_filter_350.toml");
        let table = cfg.material_table().unwrap();
        let stack = train(&cfg.build_stack().unwrap(), &cfg.loss, &cfg.training, &table)
            .unwrap()
            .stack;
        let freqs = cfg.analysis.frequencies().unwrap();
        let report = band_report(&spectrum_scan(&stack, &table, &freqs, 0.0).unwrap(), 0).unwrap();
        Desk {
            cfg,
            table,
            stack,
            freqs,
            report,
        }
    })
}

fn propagator_matches_direct_sum() -> Check {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [16usize, 32] {
        let grid = PlaneGrid::new(n, n, 0.25).unwrap();
        for lambda in [0.5, 1.0, 2.0] {
            let mut u = ComplexField::zeros(grid, C_MM_THZ / lambda);
            u.values_mut()
                .mapv_inplace(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            for d in [1.0, 3.0, 10.0] {
                let spec = PropagationSpec::air(d)
                    .unwrap()
                    .with_method(TransferMethod::SampledKernel)
                    .with_padding(2);
                let fast = propagate(&u, &spec).unwrap().field;
                let slow = propagate_direct_sum(&u, &spec).unwrap();
                worst = worst.max(rel_l2(fast.values(), slow.values()));
            }
        }
    }
    ensure(
        worst <= 1e-6,
        format!("max relative L2 error {worst:.2e} over 36 cases (limit 1e-6)"),
    )
}

fn transfer_is_unitary_and_composes() -> Check {
    let pitch = 0.125;
    let lambda = 0.8;
    let grid = make_grid(4.0, pitch).unwrap();
    let n = grid.samples_x();
    let mut modulus_err = 0.0f64;
    for padding in [1usize, 2] {
        let prop = Propagator::new(grid, padding).unwrap();
        let tf = prop
            .transfer(&PropagationSpec::air(7.0).unwrap().with_padding(padding), lambda)
            .unwrap();
        let m = n * padding;
        let freq = |k: usize| {
            let k = if k < m.div_ceil(2) {
                k as f64
            } else {
                k as f64 - m as f64
            };
            k / (m as f64 * pitch)
        };
        for ((a, b), h) in tf.values().indexed_iter() {
            if freq(a).powi(2) + freq(b).powi(2) <= lambda.powi(-2) {
                modulus_err = modulus_err.max((h.norm() - 1.0).abs());
            }
        }
    }
    let prop = Propagator::new(grid, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = Array2::from_shape_fn((n, n), |_| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let mut compose_err = 0.0f64;
    for policy in [EvanescentPolicy::ZeroOut, EvanescentPolicy::KeepDecaying] {
        let full = prop
            .transfer(
                &PropagationSpec::air(6.0).unwrap().with_padding(1).with_policy(policy),
                lambda,
            )
            .unwrap();
        let half = prop
            .transfer(
                &PropagationSpec::air(3.0).unwrap().with_padding(1).with_policy(policy),
                lambda,
            )
            .unwrap();
        let once = prop.apply(&u, &full, false);
        let twice = prop.apply(&prop.apply(&u, &half, false), &half, false);
        compose_err = compose_err.max(rel_l2(&twice, &once));
    }
    ensure(
        modulus_err <= 1e-12 && compose_err <= 1e-9,
        format!("in-band |H| deviation {modulus_err:.1e} (limit 1e-12), half-step composition error {compose_err:.1e} (limit 1e-9)"),
    )
}

fn toy_stack() -> OpticalStack {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layers = [3.0, 6.0]
        .iter()
        .map(|&z| {
            let mut l = DiffractiveLayer::new(8, 8, 0.5, Parametrization::default(), Region::centered(3.0).unwrap(), z)
                .unwrap();
            l.latent.mapv_inplace(|_| rng.random_range(-3.0..3.0));
            l
        })
        .collect();
    OpticalStack {
        grid: PlaneGrid::new(20, 20, 0.25).unwrap(),
        oversampling: 2,
        input_aperture: Region::centered(3.0).unwrap(),
        layers,
        output_apertures: vec![Region::square((0.5, 0.0), 1.0).unwrap()],
        output_z: 10.0,
        detector_slab: Some(DetectorSlab {
            index: 3.4,
            thickness: 2.0,
        }),
        detectors: vec![Region::square((0.5, 0.0), 1.0).unwrap()],
        propagation: PropagationSettings {
            method: TransferMethod::SampledKernel,
            ..Default::default()
        },
        quantize: false,
    }
}

fn adjoint_matches_finite_differences() -> Check {
    let table = DispersionTable::synthetic();
    let stack = toy_stack();
    let spec = LossSpec::single(
        BandSpec {
            pass_width: 0.05,
            ..BandSpec::new(0.45, 0).with_target_q(5.0)
        },
        1.0,
        10.0,
    );
    let batch = [0.35, 0.45, 0.55];
    let loss = |s: &OpticalStack| {
        gradient(s, &spec, &batch, &table, ThicknessMode::Continuous)
            .unwrap()
            .total
    };
    let g = gradient(&stack, &spec, &batch, &table, ThicknessMode::Continuous)
        .unwrap()
        .flat_gradient();
    let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let base = stack.latents();
    let step = 1e-5;
    let mut worst = 0.0f64;
    for (i, gi) in g.iter().enumerate() {
        let mut s = stack.clone();
        let mut p = base.clone();
        p[i] = base[i] + step;
        s.set_latents(&p);
        let up = loss(&s);
        p[i] = base[i] - step;
        s.set_latents(&p);
        let fd = (up - loss(&s)) / (2.0 * step);
        worst = worst.max((fd - gi).abs() / scale);
    }
    ensure(
        scale > 0.0 && worst <= 1e-5,
        format!(
            "max |adjoint - central difference| / max|gradient| = {worst:.2e} over {} latents (limit 1e-5)",
            g.len()
        ),
    )
}

fn parametrization_properties() -> Check {
    let p = Parametrization::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let step = p.step();
    let mut failures = Vec::new();
    for _ in 0..100_000 {
        let hp: f64 = rng.random_range(-50.0..50.0);
        for quantize in [false, true] {
            let h = latent_to_thickness(hp, p.h_max, p.h_base, p.levels, quantize);
            if !(h >= p.h_base && h <= p.h_base + p.h_max) {
                failures.push(format!("h({hp}) = {h} out of bounds"));
            }
            let shifted = latent_to_thickness(hp + std::f64::consts::TAU, p.h_max, p.h_base, p.levels, quantize);
            let periodic = if quantize {
                shifted == h
            } else {
                (shifted - h).abs() <= 1e-12
            };
            if !periodic {
                failures.push(format!("h({hp}) not 2π-periodic"));
            }
        }
        let hq = latent_to_thickness(hp, p.h_max, p.h_base, p.levels, true);
        let depth = hq - p.h_base;
        let level = depth / step;
        if (level - level.round()).abs() > 1e-9 || bdnn::network::quantize_depth(depth, p.h_max, p.levels) != depth {
            failures.push(format!("quantized depth {depth} not a fixed point"));
        }
    }
    ensure(
        failures.is_empty(),
        match failures.first() {
            None => "1e5 latents: bounds, 2π periodicity and quantizer idempotence hold".into(),
            Some(f) => format!("{} violations, first: {f}", failures.len()),
        },
    )
}

fn slab_transmission() -> Check {
    let t = slab_power_transmission(0.02933, 1.0, 0.857, 3).unwrap();
    ensure(
        (t - 0.2752).abs() <= 5e-4,
        format!("T = {t:.4} (expected 0.2752 ± 0.0005)"),
    )
}

fn single_band_filter() -> Check {
    let d = desk();
    let r = d.report;
    let off_ghz = (r.peak - 0.35) * 1e3;
    ensure(
        off_ghz.abs() <= 10.0 && r.eta_peak >= 0.10,
        format!(
            "peak {:.2} GHz ({off_ghz:+.2} GHz), Q {:.2}, efficiency {:.1}%",
            r.peak * 1e3,
            r.q_factor,
            r.eta_peak * 100.0
        ),
    )
}

fn q_target_raises_q() -> Check {
    let base = desk().report;
    let cfg = config("desk_filter_350_q10.toml");
    let table = cfg.material_table().unwrap();
    let stack = train(&cfg.build_stack().unwrap(), &cfg.loss, &cfg.training, &table)
        .unwrap()
        .stack;
    let r = band_report(
        &spectrum_scan(&stack, &table, &cfg.analysis.frequencies().unwrap(), 0.0).unwrap(),
        0,
    )
    .unwrap();
    ensure(
        r.q_factor > base.q_factor && r.eta_peak < base.eta_peak,
        format!(
            "Q {:.2} -> {:.2}, efficiency {:.2}% -> {:.2}%",
            base.q_factor,
            r.q_factor,
            base.eta_peak * 100.0,
            r.eta_peak * 100.0
        ),
    )
}

fn q_spread(rows: &[bdnn::analysis::SweepRow]) -> f64 {
    let q = rows.iter().map(|r| r.report.q_factor);
    q.clone().fold(f64::NEG_INFINITY, f64::max) - q.fold(f64::INFINITY, f64::min)
}

fn tunable_output_plane() -> Check {
    let d = desk();
    let tun = d.cfg.tunable.as_ref().expect("desk filter has a tunable section");
    let before = sweep(&d.stack, &d.table, SweepAxis::OutputShift, &tun.dz, &d.freqs, 0).unwrap();
    let peaks: Vec<f64> = before.iter().map(|r| r.report.peak).collect();
    let monotone = peaks.windows(2).all(|w| w[1] > w[0]);
    let anchors: Vec<TunableAnchor> = before
        .iter()
        .map(|r| TunableAnchor {
            dz: r.value,
            center: r.report.peak,
        })
        .collect();
    let target_q = before.iter().map(|r| r.report.q_factor).sum::<f64>() / before.len() as f64;
    let retrained = retrain_tunable(&d.stack, &anchors, &tun.template(target_q), &tun.training, &d.table)
        .unwrap()
        .stack;
    let after = sweep(&retrained, &d.table, SweepAxis::OutputShift, &tun.dz, &d.freqs, 0).unwrap();
    let (s0, s1) = (q_spread(&before), q_spread(&after));
    let reduction = 1.0 - s1 / s0;
    let peaks_ghz: Vec<String> = peaks.iter().map(|p| format!("{:.1}", p * 1e3)).collect();
    ensure(
        monotone && reduction >= 0.25,
        format!(
            "peaks over dz [{}] GHz, Q spread {s0:.3} -> {s1:.3} ({:.0}% reduction, need 25%)",
            peaks_ghz.join(", "),
            reduction * 100.0
        ),
    )
}

fn per_detector_updates() -> Check {
    let mut cfg = config("desk_demux_4.toml");
    cfg.training.frequencies = 101;
    cfg.training.epochs = 1;
    let table = cfg.material_table().unwrap();
    let stack = cfg.build_stack().unwrap();
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut seen: Vec<f64> = Vec::new();
    let mut current: Vec<f64> = Vec::new();
    train_observed(&stack, &cfg.loss, &cfg.training, &table, &mut |ev| {
        if let TrainEvent::Update { row, batch } = ev {
            if *batch != current.as_slice() {
                current = batch.to_vec();
                seen.extend_from_slice(batch);
                batches.push(Vec::new());
            }
            batches.last_mut().unwrap().push(row.detector);
        }
    })
    .unwrap();
    let every_batch_four = batches.iter().all(|b| {
        let mut s = b.clone();
        s.sort_unstable();
        s == [0, 1, 2, 3]
    });
    seen.sort_by(f64::total_cmp);
    let expected =
        bdnn::training::uniform_frequencies(cfg.training.f_min, cfg.training.f_max, cfg.training.frequencies);
    ensure(
        every_batch_four && seen == expected,
        format!(
            "{} batches, each with one update per detector: {every_batch_four}; {} of {} frequencies seen exactly once",
            batches.len(),
            seen.len(),
            expected.len()
        ),
    )
}

fn gaussian_q_recovery() -> Check {
    let center = 0.35;
    let freqs: Vec<f64> = (0..=300).map(|k| 0.2 + 1e-3 * k as f64).collect();
    let mut worst = 0.0f64;
    for sigma_ghz in [5.0, 10.0, 20.0] {
        let sigma = sigma_ghz * 1e-3;
        let eta: Vec<f64> = freqs
            .iter()
            .map(|f| 0.3 * (-(f - center).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        let r = band_report(&Spectrum::new(freqs.clone(), vec![eta]).unwrap(), 0).unwrap();
        let exact = center / (sigma * (8.0 * std::f64::consts::LN_2).sqrt());
        worst = worst.max((r.q_factor / exact - 1.0).abs());
    }
    ensure(
        worst <= 0.01,
        format!("max relative Q error {:.3}% (limit 1%)", worst * 100.0),
    )
}

fn stl_export() -> Check {
    let d = desk();
    let mut notes = Vec::new();
    let mut ok = true;
    for (k, layer) in d.stack.layers.iter().enumerate() {
        let map = layer.thickness_map(true);
        let pitch = layer.feature_pitch;
        let mesh = heightfield_mesh(&map, pitch, layer.params.h_base).unwrap();
        let (lo, hi) = bounding_box(&mesh);
        let hmax = map.iter().fold(0.0f64, |m, &h| m.max(h));
        let (ny, nx) = map.dim();
        let extent_ok = lo == [0.0, 0.0, 0.0]
            && (hi[0] - nx as f64 * pitch).abs() < 1e-12
            && (hi[1] - ny as f64 * pitch).abs() < 1e-12
            && hi[2] == hmax;
        let expected = map.sum() * pitch * pitch;
        let volume_err = (mesh_volume(&mesh) - expected).abs() / expected;
        let bytes = encode(&mesh);
        let parsed = parse_stl(&bytes).map(|t| t.len() == mesh.len() && bytes.len() == 84 + 50 * mesh.len());
        let layer_ok = is_watertight(&mesh) && extent_ok && volume_err <= 1e-9 && parsed.unwrap_or(false);
        ok &= layer_ok;
        notes.push(format!(
            "layer {k}: {} triangles, volume error {volume_err:.1e}",
            mesh.len()
        ));
    }
    ensure(ok, notes.join("; "))
}

fn seeded_runs_reproduce() -> Check {
    let d = desk();
    let again = train(&d.cfg.build_stack().unwrap(), &d.cfg.loss, &d.cfg.training, &d.table)
        .unwrap()
        .stack;
    let (a, b) = (model_to_string(&d.stack), model_to_string(&again));
    ensure(
        a == b,
        format!(
            "two runs with seed {}: model files {}",
            d.cfg.seed,
            if a == b { "identical" } else { "differ" }
        ),
    )
}

fn main() -> ExitCode {
    let checks: [(&str, CheckFn); 12] = [
        ("propagator vs direct summation", propagator_matches_direct_sum),
        (
            "transfer function modulus and composition",
            transfer_is_unitary_and_composes,
        ),
        (
            "adjoint gradient vs finite differences",
            adjoint_matches_finite_differences,
        ),
        ("thickness parametrization", parametrization_properties),
        ("absorbing slab transmission", slab_transmission),
        ("single-band 350 GHz filter", single_band_filter),
        ("Q-targeted training", q_target_raises_q),
        ("tunable output plane retraining", tunable_output_plane),
        ("per-detector update schedule", per_detector_updates),
        ("Q extraction on Gaussian spectra", gaussian_q_recovery),
        ("STL export", stl_export),
        ("seeded reproducibility", seeded_runs_reproduce),
    ];
    // `cargo test --test acceptance -- 1 5` runs a subset
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut run = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        run += 1;
        let start = std::time::Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2}: PASS  {name}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2}: FAIL  {name}: {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("{} of {run} criteria passed", run - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
