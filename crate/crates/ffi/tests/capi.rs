use std::ffi::{c_char, CStr, CString};
use std::ptr;

use bdnn_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { bdnn_last_error_message(buf.as_mut_ptr(), buf.len()) };
    if n == 0 {
        return String::new();
    }
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

const MODEL: &str = r#"
seed = 3
[geometry]
features = 8
oversampling = 2
guard = 1.0
input_aperture = 4.0
layer_z = [5.0, 10.0]
output_z = 20.0
output_apertures = [{ center = [0.0, 0.0], width = 1.0 }]
detectors = [{ center = [0.0, 0.0], width = 1.0 }]
[propagation]
method = "sampled-kernel"
[[loss.bands]]
center = 0.5
"#;

fn model_json() -> CString {
    let cfg = bdnn::config::DesignConfig::from_str_in(MODEL, std::path::Path::new(".")).unwrap();
    CString::new(bdnn::io::model_to_string(&cfg.build_stack().unwrap())).unwrap()
}

#[test]
fn slab_transmission_and_status_codes() {
    let mut t = 0.0;
    let s = unsafe { bdnn_slab_power_transmission(0.02933, 1.0, 0.857, 3, &mut t) };
    assert_eq!(s, BdnnStatus::Ok);
    assert!((t - 0.2752).abs() < 5e-4);
    assert_eq!(last_error(), "");

    let s = unsafe { bdnn_slab_power_transmission(0.02933, 1.0, -1.0, 3, &mut t) };
    assert_eq!(s, BdnnStatus::InvalidArgument);
    assert!(last_error().contains("wavelength"), "{}", last_error());

    let s = unsafe { bdnn_slab_power_transmission(0.0, 1.0, 1.0, 1, ptr::null_mut()) };
    assert_eq!(s, BdnnStatus::NullPointer);
    assert_eq!(last_error(), "out is null");
}

#[test]
fn error_message_truncates_and_reports_length() {
    unsafe { bdnn_slab_power_transmission(0.0, 1.0, 1.0, 1, ptr::null_mut()) };
    let mut small = [0 as c_char; 4];
    let n = unsafe { bdnn_last_error_message(small.as_mut_ptr(), small.len()) };
    assert_eq!(n, "out is null".len());
    assert_eq!(unsafe { CStr::from_ptr(small.as_ptr()) }.to_str().unwrap(), "out");
    assert_eq!(unsafe { bdnn_last_error_message(ptr::null_mut(), 0) }, n);
}

#[test]
fn model_efficiency_matches_scan() {
    let mut table = ptr::null_mut();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(bdnn_table_synthetic(&mut table), BdnnStatus::Ok);
        assert_eq!(bdnn_model_from_json(model_json().as_ptr(), &mut model), BdnnStatus::Ok);
        let mut n = 0usize;
        assert_eq!(bdnn_model_detector_count(model, &mut n), BdnnStatus::Ok);
        assert_eq!(n, 1);

        let freqs = [0.4, 0.5, 0.6];
        let mut eta = [0.0; 3];
        assert_eq!(
            bdnn_spectrum_scan(model, table, freqs.as_ptr(), 3, 0.0, 0, eta.as_mut_ptr()),
            BdnnStatus::Ok
        );
        for (f, e) in freqs.iter().zip(eta) {
            let mut single = 0.0;
            assert_eq!(bdnn_efficiency(model, table, *f, 0, &mut single), BdnnStatus::Ok);
            assert!((single - e).abs() < 1e-12 && e > 0.0 && e < 1.0);
        }

        let mut x = 0.0;
        assert_eq!(
            bdnn_efficiency(model, table, 0.5, 7, &mut x),
            BdnnStatus::InvalidArgument
        );
        assert_eq!(bdnn_efficiency(model, table, 50.0, 0, &mut x), BdnnStatus::OutOfRange);
        assert_eq!(
            bdnn_efficiency(ptr::null(), table, 0.5, 0, &mut x),
            BdnnStatus::NullPointer
        );

        bdnn_model_free(model);
        bdnn_table_free(table);
        bdnn_model_free(ptr::null_mut());
    }
}

#[test]
fn load_failures() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.json").unwrap();
    assert_eq!(unsafe { bdnn_model_load(missing.as_ptr(), &mut model) }, BdnnStatus::Io);
    assert!(model.is_null());
    let junk = CString::new("{\"format\": 1").unwrap();
    assert_ne!(
        unsafe { bdnn_model_from_json(junk.as_ptr(), &mut model) },
        BdnnStatus::Ok
    );
    assert!(!last_error().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("table.csv");
    std::fs::write(&csv, "frequency_thz,n,kappa\n0.2,1.7,0.01\n0.6,1.7,0.03\n").unwrap();
    let path = CString::new(csv.to_str().unwrap()).unwrap();
    let mut table = ptr::null_mut();
    assert_eq!(unsafe { bdnn_table_load(path.as_ptr(), &mut table) }, BdnnStatus::Ok);
    unsafe { bdnn_table_free(table) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/bdnn.h")).unwrap();
    for name in [
        "bdnn_version",
        "bdnn_last_error_message",
        "bdnn_slab_power_transmission",
        "bdnn_table_load",
        "bdnn_model_load",
        "bdnn_efficiency",
        "bdnn_spectrum_scan",
        "BDNN_STATUS_NULL_POINTER",
        "typedef struct BdnnModel BdnnModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let v = unsafe { CStr::from_ptr(bdnn_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_against_static_library() {
    let exe = std::env::current_exe().unwrap();
    // test binaries and the library's own artifacts share target/<profile>/deps
    let lib = exe.parent().unwrap().join("libbdnn_ffi.a");
    if !lib.is_file() || std::process::Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let manifest = env!("CARGO_MANIFEST_DIR");
    let status = std::process::Command::new("cc")
        .arg(format!("{manifest}/tests/c/smoke.c"))
        .arg(format!("-I{manifest}/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        format!("{} 0.2752", env!("CARGO_PKG_VERSION"))
    );
}
