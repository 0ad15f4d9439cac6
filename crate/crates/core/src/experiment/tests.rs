use super::*;

const SMALL: &str = r#"
seed = 5
output_dir = "OUT"
replicates = 2
schemes = ["tc", "td", "hv", "nnv"]

[dataset]
task = "segmentation"
height = 16
width = 16
classes = 3
train_count = 6
test_count = 3

[application]
kind = "nonewnet2d"
base_channels = 2

[denoiser]
kind = "redcnn"
base_channels = 2

[train_noise]
kind = "gaussian"
sigma = 70.0

[[test_noise]]
kind = "gaussian"
sigma = 70.0

[[test_noise]]
kind = "gaussian"
sigma = 0.0

[train]
epochs = 1
"#;

fn small(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn toml_round_trip_is_a_fixed_point() {
    let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    let text = cfg.to_toml();
    let again = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(text, again.to_toml());
    assert_eq!(cfg.application.depth, 3);
    assert_eq!(cfg.train.learning_rate, 1e-3);
    assert_eq!(cfg.teacher, Teacher::Clean);
}

#[test]
fn round_trip_keeps_overrides_and_denoiser_settings() {
    let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    cfg.denoiser_train = Some(TrainSettings {
        epochs: 3,
        learning_rate: 1e-4,
        checkpoint_every: 1,
        validation_fraction: 0.0,
        resample_noise: false,
    });
    cfg.checkpoints.insert(
        "hv".into(),
        CheckpointOverride {
            application: "a".into(),
            denoiser: Some("b".into()),
        },
    );
    let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(again.denoiser_settings().epochs, 3);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = |edit: &dyn Fn(&mut ExperimentConfig)| {
        let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        edit(&mut cfg);
        assert!(matches!(cfg.validate(), Err(Error::Config(_) | Error::InvalidComposition { .. } | Error::InvalidSpec(_))));
    };
    bad(&|c| c.schemes.clear());
    bad(&|c| c.test_noise.clear());
    bad(&|c| c.replicates = 0);
    bad(&|c| c.seed = u64::MAX);
    bad(&|c| c.application.kind = NetworkKind::Ccnn);
    bad(&|c| c.denoiser.kind = NetworkKind::Ccnn);
    bad(&|c| c.train.epochs = 0);
    bad(&|c| c.test_noise[0].sigma = -1.0);
    bad(&|c| {
        c.checkpoints.insert(
            "tc".into(),
            CheckpointOverride {
                application: "a".into(),
                denoiser: Some("b".into()),
            },
        );
    });
    bad(&|c| {
        c.checkpoints.insert(
            "xx".into(),
            CheckpointOverride {
                application: "a".into(),
                denoiser: None,
            },
        );
    });
    assert!(matches!(ExperimentConfig::from_toml("seed = 1"), Err(Error::Config(_))));
}

#[test]
fn noise_tags() {
    assert_eq!(NoiseConfig::gaussian(70.0).tag(), "gaussian_s70");
    assert_eq!(NoiseConfig::gaussian(0.0).tag(), "gaussian_s0");
    let p = NoiseConfig {
        kind: NoiseKind::Poisson,
        mu: 0.0,
        sigma: 0.0,
        poisson_scale: 0.1,
    };
    assert_eq!(p.tag(), "poisson_k0.1");
}

#[test]
fn replicates_draw_distinct_streams() {
    let exp = Experiment::new(ExperimentConfig::from_toml(SMALL).unwrap()).unwrap();
    assert_ne!(exp.replicate_seed(0), exp.replicate_seed(1));
    let a = exp.dataset(0).unwrap();
    let b = exp.dataset(1).unwrap();
    assert_ne!(a.train[0].image, b.train[0].image);
    assert_eq!(a.train[0].image, exp.dataset(0).unwrap().train[0].image);
    assert_ne!(exp.train_noise(0).seed, exp.test_noise(0, &exp.config.test_noise[0]).seed);
}

#[test]
fn stages_cover_dependencies() {
    let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    cfg.schemes = vec![SchemeKind::Hv];
    assert_eq!(Experiment::new(cfg.clone()).unwrap().stages(), vec![SchemeKind::Tc, SchemeKind::Hv]);
    cfg.schemes = vec![SchemeKind::Nnv];
    cfg.teacher = Teacher::Dirty;
    assert_eq!(Experiment::new(cfg).unwrap().stages(), vec![SchemeKind::Td, SchemeKind::Nnv]);
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ea = Experiment::new(small(a.path())).unwrap();
    let cmp = ea.run().unwrap();
    assert_eq!(cmp.rows.len(), 2 * 2 * 4);
    for r in 0..2 {
        for s in SchemeKind::ALL {
            assert!(ea.replicate_dir(r).join(s.name()).join("loss.csv").exists());
        }
        assert!(ea.replicate_dir(r).join("metrics/nnv_gaussian_s70_summary.csv").exists());
        assert!(ea.checkpoint_dir(r, SchemeKind::Hv, "denoiser").join("best/manifest.json").exists());
    }
    let csv = fs::read_to_string(a.path().join("compare.csv")).unwrap();
    assert!(csv.starts_with("test_noise,replicate,scheme,mean_dice_mean,mean_dice_sd"));
    assert_eq!(csv.lines().count(), 1 + cmp.rows.len());

    Experiment::new(small(b.path())).unwrap().run().unwrap();
    assert_eq!(csv, fs::read_to_string(b.path().join("compare.csv")).unwrap());
    assert_eq!(cmp.primary("gaussian_s70", SchemeKind::Tc).len(), 2);
    assert!(cmp.median_primary("gaussian_s70", SchemeKind::Nnv).is_some());
}

#[test]
fn clean_test_noise_matches_direct_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.replicates = 1;
    cfg.schemes = vec![SchemeKind::Tc, SchemeKind::Hv];
    let exp = Experiment::new(cfg).unwrap();
    let cmp = exp.run().unwrap();
    assert_eq!(cmp.rows.len(), 4);
    let ds = exp.dataset(0).unwrap();
    let (app, _) = exp.components(0, SchemeKind::Tc).unwrap();
    let direct = evaluate_scheme("x", &app, None, &ds.test, &NoiseSpec::clean()).unwrap();
    assert_eq!(cmp.primary("gaussian_s0", SchemeKind::Tc), vec![direct.primary().unwrap()]);
}

#[test]
fn overrides_redirect_components() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.replicates = 1;
    cfg.schemes = vec![SchemeKind::Tc];
    let exp = Experiment::new(cfg.clone()).unwrap();
    exp.run().unwrap();
    let tc = exp.checkpoint_dir(0, SchemeKind::Tc, "application");
    cfg.schemes = vec![SchemeKind::Td];
    cfg.checkpoints.insert(
        "td".into(),
        CheckpointOverride {
            application: tc.clone(),
            denoiser: None,
        },
    );
    let over = Experiment::new(cfg).unwrap();
    assert!(over.stages().is_empty());
    let (app, _) = over.components(0, SchemeKind::Td).unwrap();
    assert_eq!(app.checksum(), Experiment::load_best(&tc).unwrap().checksum());
    assert!(matches!(
        over.denoised_spectrum(0, SchemeKind::Td, &NoiseConfig::gaussian(0.0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn denoised_spectrum_averages_test_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.replicates = 1;
    cfg.schemes = vec![SchemeKind::Hv];
    let exp = Experiment::new(cfg).unwrap();
    exp.train_replicate(0).unwrap();
    let s = exp.denoised_spectrum(0, SchemeKind::Hv, &NoiseConfig::gaussian(70.0)).unwrap();
    assert_eq!(s.blocks, 3 * 4);
    assert!(s.values.iter().all(|v| v.is_finite() && *v >= 0.0));
}

mod round_trip {
    use super::*;
    use proptest::prelude::*;

    fn noise() -> impl Strategy<Value = NoiseConfig> {
        prop_oneof![
            (0.0..300.0f64, -20.0..20.0f64).prop_map(|(sigma, mu)| NoiseConfig {
                mu,
                ..NoiseConfig::gaussian(sigma)
            }),
            (0.01..2.0f64).prop_map(|k| NoiseConfig {
                kind: NoiseKind::Poisson,
                mu: 0.0,
                sigma: 0.0,
                poisson_scale: k,
            }),
        ]
    }

    fn settings() -> impl Strategy<Value = TrainSettings> {
        (1..500usize, 1e-6..1e-1f64, 0..10usize, 0.0..0.9f64, any::<bool>()).prop_map(|(epochs, learning_rate, checkpoint_every, validation_fraction, resample_noise)| {
            TrainSettings {
                epochs,
                learning_rate,
                checkpoint_every,
                validation_fraction,
                resample_noise,
            }
        })
    }

    prop_compose! {
        fn config()(
            seed in 0..=i64::MAX as u64,
            replicates in 1..6usize,
            schemes in proptest::sample::subsequence(SchemeKind::ALL.to_vec(), 1..=4),
            seg in any::<bool>(),
            scale in 1..4usize,
            classes in 2..6usize,
            counts in (1..300usize, 1..100usize),
            widths in (1..33usize, 1..33usize),
            mcd in any::<bool>(),
            dirty in any::<bool>(),
            train_noise in noise(),
            test_noise in proptest::collection::vec(noise(), 1..4),
            train in settings(),
            den in proptest::option::of(settings()),
        ) -> ExperimentConfig {
            ExperimentConfig {
                seed,
                output_dir: PathBuf::from(format!("runs/{seed}")),
                replicates,
                schemes,
                teacher: if dirty { Teacher::Dirty } else { Teacher::Clean },
                dataset: DatasetConfig {
                    task: if seg { Task::Segmentation } else { Task::Classification },
                    height: 32 * scale,
                    width: 32 * scale,
                    classes: if seg { classes } else { 3 },
                    train_count: counts.0,
                    test_count: counts.1,
                },
                application: NetworkConfig {
                    kind: if seg { NetworkKind::NoNewNet2d } else { NetworkKind::Ccnn },
                    base_channels: widths.0,
                    depth: 3,
                    input_residual: true,
                },
                denoiser: NetworkConfig {
                    kind: if mcd { NetworkKind::McDnCnn } else { NetworkKind::RedCnn },
                    base_channels: widths.1,
                    depth: 3,
                    input_residual: !mcd,
                },
                train_noise,
                test_noise,
                train,
                denoiser_train: den,
                checkpoints: BTreeMap::new(),
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn parse_serialize_parse_is_a_fixed_point(cfg in config()) {
            let text = cfg.to_toml();
            let parsed = ExperimentConfig::from_toml(&text).unwrap();
            prop_assert_eq!(&parsed, &cfg);
            prop_assert_eq!(parsed.to_toml(), text);
        }
    }
}
