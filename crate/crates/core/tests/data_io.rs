use proptest::prelude::*;
use tvseg::data::netpbm::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_image, write_label,
};
use tvseg::data::{load_dataset, save_dataset, Dataset, DatasetConfig};
use tvseg::net::{read_checkpoint, write_checkpoint, FinalActivation, NetSpec, Network};
use tvseg::{Error, Field3, LabelMap, Shape};

#[test]
fn dataset_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        train: 3,
        test: 2,
        size: 32,
        seed: 4,
    };
    let ds = Dataset::generate(cfg).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.config, cfg);
    for (a, b) in ds
        .train
        .iter()
        .chain(&ds.test)
        .zip(back.train.iter().chain(&back.test))
    {
        assert_eq!(a.label, b.label);
        assert!(a.image.max_abs_diff(&b.image) <= 1.0 / 510.0 + 1e-12);
    }
}

#[test]
fn dataset_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    let ds = Dataset::generate(DatasetConfig {
        train: 1,
        test: 1,
        size: 32,
        seed: 0,
    })
    .unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    write_label(
        &dir.path().join("labels/0001.pgm"),
        &LabelMap::filled(32, 32, 7),
    )
    .unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Manifest(_))));
    std::fs::write(dir.path().join("images/0000.ppm"), b"P6\n32 32\n255\n\x00").unwrap();
    assert!(matches!(
        read_image(&dir.path().join("images/0000.ppm")),
        Err(Error::TruncatedPayload { .. })
    ));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let mut spec = NetSpec {
        widths: vec![4, 8],
        activation: FinalActivation::Regularized,
        ..NetSpec::default()
    };
    spec.reg.lambda = 0.3;
    let net = Network::build(spec, 12).unwrap();
    write_checkpoint(&net, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, net);
    assert_eq!(back.lambda(), 0.3);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(read_checkpoint(&path).is_err());
    assert!(matches!(
        read_checkpoint(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

proptest! {
    #[test]
    fn labels_round_trip_exactly(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let labels: Vec<u8> = (0..h * w).map(|k| ((seed >> (k % 60)) & 3) as u8).collect();
        let l = LabelMap::new(h, w, labels).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&l), std::path::Path::new("x")).unwrap(), l);
    }

    #[test]
    fn images_round_trip_to_quantization(
        (h, w, v) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0.0f64..=1.0, 3 * h * w)))
    ) {
        let img = Field3::from_vec(Shape::new(3, h, w).unwrap(), v).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap(), std::path::Path::new("x")).unwrap();
        prop_assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-12);
        // a second pass is exact
        let again = decode_ppm(&encode_ppm(&back).unwrap(), std::path::Path::new("x")).unwrap();
        prop_assert_eq!(again, back);
    }
}
