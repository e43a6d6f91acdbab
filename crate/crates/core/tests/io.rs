use nakul::config::Config;
use nakul::dataset::{format_trial, parse_trial, read_dataset, write_dataset};
use nakul::tensor::rng::Streams;
use nakul::training::{generate_synthetic, SyntheticSpec};
use nakul::{Error, Tensor};
use proptest::prelude::*;

fn key_of(e: Error) -> String {
    match e {
        Error::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn empty_config_is_the_default() {
    let c = Config::parse("# nothing here\n\n").unwrap();
    assert_eq!(c, Config::default());
    assert_eq!((c.data.classes, c.data.channels, c.data.length, c.data.rate), (4, 8, 1000, 250.0));
    assert_eq!((c.model.channels, c.model.length, c.model.classes), (8, 1000, 4));
    assert_eq!(c.model.d_model, 128);
    assert_eq!(c.train.epochs, 200);
}

#[test]
fn keys_land_in_their_sections() {
    let c = Config::parse(
        "seed = 9\nmodel.d_model = 32   # narrower\nmodel.kernel_sizes = 3, 7\n\
         data.channels = 6\ndata.class_bands = 5,9;12;18;30\ntrain.lr = 2e-3\ntrain.augment = false\n\
         model.fusion_weights = 1,0,0\npaths.data = /tmp/x\n",
    )
    .unwrap();
    assert_eq!(c.train.seed, 9);
    assert_eq!(c.model.d_model, 32);
    assert_eq!(c.model.kernel_sizes, vec![3, 7]);
    assert_eq!((c.data.channels, c.model.channels), (6, 6));
    assert_eq!(c.data.band_centers, vec![vec![5.0, 9.0], vec![12.0], vec![18.0], vec![30.0]]);
    // the default active-channel sets follow the channel count
    assert!(c.data.active_channels.iter().flatten().all(|&ch| ch < 6));
    assert_eq!(c.train.lr, 2e-3);
    assert!(!c.train.augment);
    assert_eq!(c.model.fusion_weights, Some([1.0, 0.0, 0.0]));
    assert_eq!(c.paths.data.as_deref(), Some(std::path::Path::new("/tmp/x")));
}

#[test]
fn errors_name_the_key() {
    assert_eq!(key_of(Config::parse("model.nope = 1").unwrap_err()), "model.nope");
    assert_eq!(key_of(Config::parse("model.d_model = big").unwrap_err()), "model.d_model");
    assert_eq!(key_of(Config::parse("model.band_centers = 4,200").unwrap_err()), "model.band_centers");
    assert_eq!(key_of(Config::parse("data.class_bands = 6;11;20;125").unwrap_err()), "data.class_bands");
    assert_eq!(key_of(Config::parse("data.rate = 60").unwrap_err()), "data.class_bands");
    assert_eq!(key_of(Config::parse("model.heads = 3").unwrap_err()), "model.heads");
    assert_eq!(key_of(Config::parse("train.warmup_fraction = 0").unwrap_err()), "train.warmup_fraction");
    assert_eq!(key_of(Config::parse("seed = 1\nseed = 2").unwrap_err()), "seed");
    assert_eq!(key_of(Config::parse("just words").unwrap_err()), "line 1");
    assert_eq!(key_of(Config::parse("model.fusion_weights = 0.5,0.5").unwrap_err()), "model.fusion_weights");
}

#[test]
fn manifest_round_trips_through_the_parser() {
    let c = Config::parse("seed = 4\ndata.classes = 3\ndata.noise_sigma = 0.1\n").unwrap();
    let back = Config::parse(&c.data_manifest()).unwrap();
    assert_eq!(back.data, c.data);
    assert_eq!(back.train.seed, 4);
}

#[test]
fn trial_text_layout() {
    let x = Tensor::new([2, 3], vec![0.5, -1.0, 2.25, 0.0, 1e-7, 3.0]).unwrap();
    let text = format_trial(&x, 250.0, 2);
    assert_eq!(
        text,
        "# channels=2 samples=3 rate=250 label=2\n0.5,-1,2.25\n0,0.0000001,3\n"
    );
    let (y, rate, label) = parse_trial(&text, "t").unwrap();
    assert_eq!((y, rate, label), (x, 250.0, 2));
}

#[test]
fn malformed_trials_are_rejected() {
    for bad in [
        "",
        "channels=1 samples=1 rate=1 label=0\n1\n",
        "# channels=1 samples=2 rate=1 label=0\n1\n",
        "# channels=2 samples=1 rate=1 label=0\n1\n",
        "# channels=1 samples=1 rate=1\n1\n",
        "# channels=1 samples=1 rate=1 label=0 extra=2\n1\n",
        "# channels=1 samples=1 rate=1 label=0\nx\n",
        "# channels=1 samples=1 rate=1 label=0\nNaN\n",
    ] {
        assert!(matches!(parse_trial(bad, "t"), Err(Error::Format { .. })), "{bad:?}");
    }
}

proptest! {
    #[test]
    fn trial_round_trip_is_exact(seed in any::<u64>(), c in 1usize..4, t in 1usize..20) {
        let x = Tensor::randn([c, t], 1e3, &mut Streams::new(seed).stream("x"));
        let (y, _, _) = parse_trial(&format_trial(&x, 128.5, 1), "t").unwrap();
        prop_assert_eq!(y, x);
    }
}

#[test]
fn dataset_directory_round_trip() {
    let spec = SyntheticSpec {
        trials_per_class: 3,
        length: 64,
        ..SyntheticSpec::default()
    };
    let d = generate_synthetic(&spec, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &d, Some("seed = 1\n")).unwrap();
    let listing = std::fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert!(listing.starts_with("filename,label\ntrial_00000.csv,0\ntrial_00001.csv,1\n"));
    assert_eq!(read_dataset(dir.path()).unwrap(), d);
}

#[test]
fn inconsistent_datasets_are_rejected() {
    let spec = SyntheticSpec {
        trials_per_class: 1,
        length: 16,
        ..SyntheticSpec::default()
    };
    let d = generate_synthetic(&spec, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &d, None).unwrap();
    let labels = dir.path().join("labels.csv");
    let good = std::fs::read_to_string(&labels).unwrap();
    std::fs::write(&labels, good.replace("trial_00001.csv,1", "trial_00001.csv,3")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
    std::fs::write(&labels, &good).unwrap();
    let short = Tensor::zeros([8, 8]);
    std::fs::write(dir.path().join("trial_00002.csv"), format_trial(&short, 250.0, 2)).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Shape(_))));
}
