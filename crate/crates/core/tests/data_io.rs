mod common;

use std::fs;
use std::path::Path;

use caai_core::data::{
    generate_synthetic, load_dataset, read_depth, read_gray, read_rgb, synthesize, write_gray, write_gray16, write_rgb,
    DatasetLayout, SyntheticSpec,
};
use caai_core::{Config, Error, Tensor};
use common::{max_abs_diff, uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn png_round_trips_within_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rgb = uniform(&[1, 3, 7, 9], 0.0, 1.0, &mut rng);
    write_rgb(&dir.path().join("a.png"), &rgb).unwrap();
    let back: Tensor<f64> = read_rgb(&dir.path().join("a.png")).unwrap();
    assert_eq!(back.shape(), rgb.shape());
    assert!(max_abs_diff(back.data(), rgb.data()) <= 0.5 / 255.0 + 1e-12);

    let gray = uniform(&[1, 1, 5, 4], 0.0, 1.0, &mut rng);
    write_gray(&dir.path().join("g.png"), &gray).unwrap();
    let back: Tensor<f64> = read_gray(&dir.path().join("g.png")).unwrap();
    assert!(max_abs_diff(back.data(), gray.data()) <= 0.5 / 255.0 + 1e-12);

    // Already normalised depth survives the 16-bit path.
    let mut depth = uniform(&[1, 1, 6, 6], 0.0, 1.0, &mut rng);
    depth.data_mut()[0] = 0.0;
    depth.data_mut()[1] = 1.0;
    write_gray16(&dir.path().join("d.png"), &depth).unwrap();
    let back: Tensor<f64> = read_depth(&dir.path().join("d.png")).unwrap();
    assert!(max_abs_diff(back.data(), depth.data()) <= 0.5 / 65535.0 + 1e-12);
}

#[test]
fn constant_depth_becomes_half() {
    let dir = tempfile::tempdir().unwrap();
    write_gray(&dir.path().join("c.png"), &Tensor::<f64>::full([1, 1, 3, 3], 0.3)).unwrap();
    let d: Tensor<f64> = read_depth(&dir.path().join("c.png")).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.5));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn generation_is_byte_identical_and_matches_the_raster() {
    let spec = SyntheticSpec {
        size: 24,
        shapes: 2,
        ..SyntheticSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let stems = generate_synthetic(&spec, 5, 77, a.path()).unwrap();
    assert_eq!(generate_synthetic(&spec, 5, 77, b.path()).unwrap(), stems);
    for sub in ["RGB", "depth", "GT"] {
        assert_eq!(dir_bytes(&a.path().join(sub)), dir_bytes(&b.path().join(sub)));
    }
    for (i, stem) in stems.iter().enumerate() {
        let scene = synthesize(&spec, 77, i as u64);
        let gt: Tensor<f64> = read_gray(&a.path().join("GT").join(format!("{stem}.png"))).unwrap();
        assert_eq!(gt, scene.gt);
    }
}

#[test]
fn salient_shape_is_nearer() {
    let spec = SyntheticSpec::default();
    for i in 0..20 {
        let s = synthesize(&spec, 3, i);
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for (&d, &g) in s.depth.data().iter().zip(s.gt.data()) {
            if g > 0.5 {
                fg += d;
                nf += 1.0;
            } else {
                bg += d;
                nb += 1.0;
            }
        }
        assert!(nf > 0.0 && nb > 0.0);
        assert!(fg / nf < bg / nb, "sample {i}");
    }
}

#[test]
fn dataset_loading_resizes_and_binarises() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        size: 40,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, 3, 1, dir.path()).unwrap();
    let samples = load_dataset::<f32>(&DatasetLayout::new(dir.path()), 16, true).unwrap();
    assert_eq!(samples.len(), 3);
    for s in &samples {
        assert_eq!(s.rgb.shape(), &[1, 3, 16, 16]);
        assert_eq!(s.depth.shape(), &[1, 1, 16, 16]);
        let gt = s.gt.as_ref().unwrap();
        assert!(gt.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn missing_counterpart_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&SyntheticSpec::default(), 2, 0, dir.path()).unwrap();
    fs::remove_file(dir.path().join("depth/synth_0001.png")).unwrap();
    let err = load_dataset::<f32>(&DatasetLayout::new(dir.path()), 16, false).unwrap_err();
    assert!(err.is_validation(), "{err}");
    let empty = tempfile::tempdir().unwrap();
    fs::create_dir_all(empty.path().join("RGB")).unwrap();
    assert!(matches!(
        load_dataset::<f32>(&DatasetLayout::new(empty.path()), 16, false),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn config_text_round_trips_and_rejects_unknown_keys() {
    let cfg =
        Config::parse(&fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.conf")).unwrap())
            .unwrap();
    assert_eq!(cfg, Config::desk());
    assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    assert!(Config::parse("momentum = 0.9\nsteps = 3\n")
        .unwrap_err()
        .is_validation());
    let spec_text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/synthetic.spec")).unwrap();
    assert_eq!(SyntheticSpec::parse(&spec_text).unwrap(), SyntheticSpec::default());
}
