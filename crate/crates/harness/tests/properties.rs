use dipp_core::align::GeneratorWeighting;
use dipp_core::diffusion::{Condition, Denoiser, GaussianMixture, MixtureComponent, SIGMA_DATA};
use dipp_core::generator::OneStepGenerator;
use dipp_core::nn::LrSchedule;
use dipp_core::rewards::RewardSpec;
use dipp_harness::checkpoint::{Checkpoint, ModelKind};
use dipp_harness::config::{ExperimentConfig, Stage};
use dipp_harness::metrics::{read_metrics_csv, write_metrics_csv, MetricRecord};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1.0..1.0f64, Just(0.0), 1e-300..1e-290f64]
}

fn mixture() -> impl Strategy<Value = GaussianMixture> {
    (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(dim, n_cond, n_comp)| {
        prop::collection::vec(
            prop::collection::vec(
                (0.1..5.0f64, prop::collection::vec(-5.0..5.0f64, dim), 0.01..2.0f64),
                n_comp,
            ),
            n_cond,
        )
        .prop_map(move |conds| {
            let conditions = conds
                .into_iter()
                .map(|comps| {
                    comps
                        .into_iter()
                        .map(|(weight, mean, variance)| MixtureComponent { weight, mean, variance })
                        .collect()
                })
                .collect();
            GaussianMixture::new(dim, conditions).unwrap()
        })
    })
}

prop_compose! {
    fn config()(
        mix in mixture(),
        seed in 0..=i64::MAX as u64,
        hidden in prop::collection::vec(1usize..128, 1..4),
        steps in 1usize..100_000,
        lr in 1e-6..1e-1f64,
        alpha_rew in 0.0..100.0f64,
        alpha_cfg in 0.0..10.0f64,
        wgen in any::<bool>(),
        linear in any::<bool>(),
        scale in 0.01..5.0f64,
    ) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.reward = RewardSpec::Quadratic {
            targets: mix.conditions.iter().map(|k| k[0].mean.clone()).collect(),
            scale,
        };
        cfg.mixture = mix;
        cfg.seed = seed;
        cfg.network.hidden = hidden;
        cfg.align.steps = steps;
        cfg.align.lr = lr;
        cfg.align.alpha_rew = alpha_rew;
        cfg.distill.alpha_cfg = alpha_cfg;
        cfg.align.weighting = if wgen { GeneratorWeighting::WGen } else { GeneratorWeighting::Constant };
        cfg.reference.lr_schedule = if linear { LrSchedule::Linear } else { LrSchedule::Constant };
        cfg
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(cfg in config()) {
        let text = cfg.to_toml_string().unwrap();
        let parsed = ExperimentConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(&parsed, &cfg);
        prop_assert_eq!(parsed.stage_hash(Stage::Align), cfg.stage_hash(Stage::Align));
    }

    #[test]
    fn log_ratio_reward_round_trips(mix in mixture(), weight in 0.1..5.0f64) {
        let mut cfg = ExperimentConfig::default();
        cfg.reward = RewardSpec::cfg_log_ratio(mix, weight);
        let parsed = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(parsed, cfg);
    }

    #[test]
    fn metrics_round_trip(values in prop::collection::vec(
        (prop::option::of(finite()), prop::option::of(finite()), prop::option::of(finite())), 1..20)
    ) {
        let records: Vec<MetricRecord> = values
            .into_iter()
            .enumerate()
            .map(|(i, (a, b, c))| MetricRecord {
                step: 3 * i as u64,
                ta_loss: a,
                mean_reward: b,
                energy_distance: c,
                ..MetricRecord::default()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&records, &path).unwrap();
        prop_assert_eq!(read_metrics_csv(&path).unwrap(), records);
    }

    #[test]
    fn checkpoint_round_trip_bitwise(seed in any::<u64>(), hidden in prop::collection::vec(1usize..24, 1..3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Denoiser::new(2, 3, &hidden, SIGMA_DATA, &mut rng).unwrap();
        let g = OneStepGenerator::from_reference(&d, 2.5).unwrap();
        let ck = Checkpoint::from_generator(ModelKind::Generator, &g, seed, [9; 32]);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(&back, &ck);
        let g2 = back.to_generator().unwrap();
        let z = g.sample_latent(16, &mut rng);
        let conds: Vec<_> = (0..16).map(|i| Condition::Label(i % 3)).collect();
        let a = g.generate(&z, &conds).unwrap();
        let b = g2.generate(&z, &conds).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
