mod common;

use half::f16;
use jlcm::{load_calibration, load_container, save_calibration, save_container, CalibrationSet, Error, StorageDtype};

#[test]
fn f32_container_file_roundtrips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.jlcm");
    let mut rng = common::rng(1);
    let model = common::random_model(&mut rng, &[7, 5, 3]);
    save_container(&model, &path, StorageDtype::F32).unwrap();
    let back = load_container(&path).unwrap();
    assert_eq!(back.layers, model.layers);
    assert_eq!(back.dtype_stored, StorageDtype::F32);
}

#[test]
fn f16_container_stores_rounded_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net16.jlcm");
    let mut rng = common::rng(2);
    let model = common::random_model(&mut rng, &[4, 6, 2]);
    save_container(&model, &path, StorageDtype::F16).unwrap();
    let back = load_container(&path).unwrap();
    assert_eq!(back.dtype_stored, StorageDtype::F16);
    for (a, b) in model.layers.iter().zip(&back.layers) {
        for (&x, &y) in a.weights.as_slice().iter().zip(b.weights.as_slice()) {
            assert_eq!(f16::from_f32(x).to_f32(), y);
        }
    }
}

#[test]
fn calibration_file_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calib.jcal");
    let mut rng = common::rng(3);
    let calib = CalibrationSet::new(common::gauss(&mut rng, 9, 4, 1.0)).unwrap();
    save_calibration(&calib, &path).unwrap();
    assert_eq!(load_calibration(&path).unwrap().inputs, calib.inputs);
}

#[test]
fn missing_and_foreign_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_container(dir.path().join("absent")), Err(Error::Io(_))));
    let calib_path = dir.path().join("c.jcal");
    let calib = CalibrationSet::new(jlcm::Matrix::zeros(2, 2)).unwrap();
    save_calibration(&calib, &calib_path).unwrap();
    assert!(matches!(load_container(&calib_path), Err(Error::BadMagic { .. })));
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.jlcm");
    let mut rng = common::rng(4);
    save_container(&common::random_model(&mut rng, &[3, 3, 2]), &path, StorageDtype::F32).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [3, 10, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(load_container(&path).is_err(), "cut at {cut}");
    }
}

#[test]
fn capture_points_line_up() {
    let mut rng = common::rng(5);
    let model = common::random_model(&mut rng, &[4, 6, 5, 2]);
    let x = common::gauss(&mut rng, 3, 4, 1.0);
    for l in 1..3 {
        let pre = model.forward(&x, l, jlcm::Capture::PreLayerInput).unwrap();
        let prev_out = model.forward(&x, l - 1, jlcm::Capture::Output).unwrap();
        assert_eq!(pre, prev_out);
    }
    assert_eq!(model.predict(&x).unwrap(), model.forward(&x, 2, jlcm::Capture::Output).unwrap());
}
