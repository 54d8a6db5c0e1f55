use super::*;
use crate::data::{synth_fundus, synth_vessel_tree, SyntheticTreeParams};
use crate::networks::Graph;

fn tiny_denoiser_cfg(t_steps: usize) -> DenoiserConfig {
    DenoiserConfig {
        in_channels: 1,
        out_channels: 1,
        base_channels: 4,
        down_factor: 4,
        num_down: 1,
        num_up: 2,
        vit_heads: 2,
        vit_depth: 1,
        mlp_ratio: 2,
        time_dim: 8,
        t_steps,
        groups: 2,
    }
}

/// Two-mode constant images: every pixel is -0.5 or +0.5.
fn two_mode_batch(n: usize, stream: &mut Stream) -> Vec<Tensor<f32>> {
    (0..n)
        .map(|_| {
            let v = if stream.uniform() < 0.5 { -0.5 } else { 0.5 };
            Tensor::full(&[1, 8, 8], v)
        })
        .collect()
}

fn synthetic_pairs(n: usize, seed: u64) -> Vec<ImagePair> {
    let params = SyntheticTreeParams::for_resolution(32).with_seed(seed);
    let mut stream = Stream::derive(seed, &[1]);
    (0..n)
        .map(|i| {
            let s = stream.int_in(0, u64::MAX - 1);
            let p = params.clone().with_seed(s);
            let vessel = synth_vessel_tree(&p).unwrap();
            let fundus = synth_fundus(&vessel, s).unwrap();
            ImagePair {
                fundus,
                vessel,
                id: format!("t{i}"),
            }
        })
        .collect()
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    // minimize sum((x - c)^2); the optimum is x = c
    let target = [0.3f32, -1.2, 2.0, 0.7];
    let mut store = ParamStore::new();
    let x0 = Tensor::new(vec![4], vec![5.0, -4.0, 0.0, 9.0]).unwrap();
    let xid = store.add("x", x0);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let mut opt = Adam::new(&store, &cfg);
    let c = Tensor::new(vec![4], target.to_vec()).unwrap();
    for _ in 0..1000 {
        let mut g = Graph::<f32>::new(&store, true);
        let x = g.param(xid);
        let cid = g.input(&c);
        let d = g.tape.sub(x, cid).unwrap();
        let sq = g.tape.square(d);
        let loss = g.tape.sum_all(sq);
        g.tape.backward(loss).unwrap();
        let grads = g.param_grads();
        drop(g);
        opt.update(&mut store, &grads);
    }
    for (got, want) in store.get(xid).data().iter().zip(&target) {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = tiny_denoiser_cfg(10);
    let mut store = ParamStore::new();
    let net = Denoiser::build(&cfg, 3, &mut store).unwrap();
    let before: Vec<Vec<f32>> = store.ids().map(|id| store.get(id).data().to_vec()).collect();
    let train = TrainConfig {
        learning_rate: 1e-30, // effectively zero while staying valid
        ..TrainConfig::default()
    };
    let proc = DiffusionProcess::new(
        NoiseSchedule::default_linear(10).unwrap(),
        1,
        0,
        8,
        8,
    )
    .unwrap();
    let mut opt = Adam::new(&store, &train);
    opt.set_learning_rate(0.0);
    let mut rng = Stream::derive(4, &[0]);
    let x0 = Tensor::<f32>::randn(&[2, 1, 8, 8], &mut rng);
    train_step(&net, &proc, &mut store, &mut opt, &x0, None, &mut rng, 1.0).unwrap();
    let after: Vec<Vec<f32>> = store.ids().map(|id| store.get(id).data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn loss_trajectory_is_seed_deterministic() {
    let run = || -> Vec<f64> {
        let cfg = tiny_denoiser_cfg(20);
        let mut store = ParamStore::new();
        let net = Denoiser::build(&cfg, 5, &mut store).unwrap();
        let train = TrainConfig::default();
        let proc = DiffusionProcess::new(
            NoiseSchedule::default_linear(20).unwrap(),
            1,
            0,
            8,
            8,
        )
        .unwrap();
        let mut opt = Adam::new(&store, &train);
        let mut rng = Stream::derive(77, &[0]);
        let mut data_rng = Stream::derive(78, &[0]);
        let data = two_mode_batch(16, &mut data_rng);
        let refs: Vec<&Tensor<f32>> = data.iter().take(4).collect();
        let x0 = stack_batch(&refs).unwrap();
        (0..10)
            .map(|_| {
                train_step(&net, &proc, &mut store, &mut opt, &x0, None, &mut rng, 1.0).unwrap()
            })
            .collect()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "same seed must give the same loss trajectory");
}

#[test]
fn toy_loss_halves_within_200_steps() {
    let cfg = tiny_denoiser_cfg(50);
    let mut store = ParamStore::new();
    let net = Denoiser::build(&cfg, 6, &mut store).unwrap();
    let train = TrainConfig {
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let proc = DiffusionProcess::new(
        NoiseSchedule::default_cosine(50).unwrap(),
        1,
        0,
        8,
        8,
    )
    .unwrap();
    let mut opt = Adam::new(&store, &train);
    let mut rng = Stream::derive(9, &[0]);
    let mut data_rng = Stream::derive(10, &[0]);
    let data = two_mode_batch(32, &mut data_rng);
    let mut early = 0.0;
    let mut late = 0.0;
    for step in 0..200 {
        let refs: Vec<&Tensor<f32>> = (0..8)
            .map(|_| &data[rng.int_in(0, 31) as usize])
            .collect();
        let x0 = stack_batch(&refs).unwrap();
        let loss =
            train_step(&net, &proc, &mut store, &mut opt, &x0, None, &mut rng, 1.0).unwrap();
        if step < 20 {
            early += loss / 20.0;
        }
        if step >= 180 {
            late += loss / 20.0;
        }
    }
    assert!(
        late <= 0.5 * early,
        "loss did not halve: early {early} vs late {late}"
    );
}

#[test]
fn fit_epochs_zero_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synthetic_pairs(4, 11);
    let cfg = DenoiserConfig {
        base_channels: 8,
        groups: 4,
        vit_depth: 1,
        ..DenoiserConfig::desk(1, 1, 10)
    };
    let train = TrainConfig {
        epochs: 0,
        seed: 21,
        ..TrainConfig::default()
    };
    let summary = fit_diffusion(DiffusionFit {
        stage: DiffusionStage::Vessel,
        pairs: &pairs,
        denoiser_cfg: &cfg,
        schedule: NoiseSchedule::default_linear(10).unwrap(),
        train: &train,
        out_dir: dir.path(),
        config_text: String::new(),
        resume: None,
    })
    .unwrap();
    let ckpt = Checkpoint::load(&summary.last_checkpoint).unwrap();
    assert_eq!(ckpt.epoch, 0);
    // parameters equal a fresh seeded build
    let mut store = ParamStore::new();
    Denoiser::build(&cfg, train.seed, &mut store).unwrap();
    for ((name, saved), (want_name, want)) in ckpt.params.iter().zip(store.iter()) {
        assert_eq!(name, want_name);
        assert_eq!(saved.data(), want.data());
    }
}

#[test]
fn interrupted_and_resumed_run_matches_uninterrupted() {
    let pairs = synthetic_pairs(8, 13);
    let cfg = tiny_denoiser_cfg(10);
    let schedule = NoiseSchedule::default_linear(10).unwrap();
    // vessel maps here are 32x32; the tiny config downscales once by 4
    let base_train = TrainConfig {
        batch_size: 4,
        epochs: 4,
        seed: 33,
        ..TrainConfig::default()
    };

    let dir_full = tempfile::tempdir().unwrap();
    let full = fit_diffusion(DiffusionFit {
        stage: DiffusionStage::Vessel,
        pairs: &pairs,
        denoiser_cfg: &cfg,
        schedule: schedule.clone(),
        train: &base_train,
        out_dir: dir_full.path(),
        config_text: String::new(),
        resume: None,
    })
    .unwrap();

    let dir_half = tempfile::tempdir().unwrap();
    let interrupted = TrainConfig {
        epochs: 2,
        ..base_train.clone()
    };
    fit_diffusion(DiffusionFit {
        stage: DiffusionStage::Vessel,
        pairs: &pairs,
        denoiser_cfg: &cfg,
        schedule: schedule.clone(),
        train: &interrupted,
        out_dir: dir_half.path(),
        config_text: String::new(),
        resume: None,
    })
    .unwrap();
    let mid = Checkpoint::load(&dir_half.path().join("last.ckpt")).unwrap();
    assert_eq!(mid.epoch, 2);
    fit_diffusion(DiffusionFit {
        stage: DiffusionStage::Vessel,
        pairs: &pairs,
        denoiser_cfg: &cfg,
        schedule,
        train: &base_train,
        out_dir: dir_half.path(),
        config_text: String::new(),
        resume: Some(mid),
    })
    .unwrap();

    let a = Checkpoint::load(&full.last_checkpoint).unwrap();
    let b = Checkpoint::load(&dir_half.path().join("last.ckpt")).unwrap();
    assert_eq!(a.epoch, b.epoch);
    for ((na, ta), (nb, tb)) in a.params.iter().zip(&b.params) {
        assert_eq!(na, nb);
        let same = ta
            .data()
            .iter()
            .zip(tb.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "parameter {na} diverged after resume");
    }
    assert_eq!(a.rtt, b.rtt);
}

#[test]
fn rtt_disabled_reproduces_vanilla_trajectory() {
    let pairs = synthetic_pairs(6, 17);
    let cfg = tiny_denoiser_cfg(10);
    let schedule = NoiseSchedule::default_linear(10).unwrap();
    let run = |rtt: bool, dir: &Path| -> Vec<(String, Tensor<f32>)> {
        let train = TrainConfig {
            batch_size: 3,
            epochs: 1, // epoch 1 never repeats, so rtt on/off must agree
            seed: 5,
            rtt_enabled: rtt,
            ..TrainConfig::default()
        };
        let s = fit_diffusion(DiffusionFit {
            stage: DiffusionStage::Vessel,
            pairs: &pairs,
            denoiser_cfg: &cfg,
            schedule: schedule.clone(),
            train: &train,
            out_dir: dir,
            config_text: String::new(),
            resume: None,
        })
        .unwrap();
        Checkpoint::load(&s.last_checkpoint).unwrap().params
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = run(true, d1.path());
    let b = run(false, d2.path());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        let same = ta
            .data()
            .iter()
            .zip(tb.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "parameter {na} differs between rtt on/off");
    }
}

#[test]
fn incompatible_stage_and_config_rejected() {
    let pairs = synthetic_pairs(2, 19);
    let cfg = tiny_denoiser_cfg(10); // 1-in/1-out: wrong for the fundus stage
    let dir = tempfile::tempdir().unwrap();
    let train = TrainConfig::default();
    let err = fit_diffusion(DiffusionFit {
        stage: DiffusionStage::Fundus,
        pairs: &pairs,
        denoiser_cfg: &cfg,
        schedule: NoiseSchedule::default_linear(10).unwrap(),
        train: &train,
        out_dir: dir.path(),
        config_text: String::new(),
        resume: None,
    })
    .unwrap_err();
    assert!(err.to_string().contains("incompatible"));
}

#[test]
fn loss_log_format_is_machine_readable() {
    let pairs = synthetic_pairs(4, 23);
    let cfg = tiny_denoiser_cfg(10);
    let dir = tempfile::tempdir().unwrap();
    let train = TrainConfig {
        batch_size: 2,
        epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let summary = fit_diffusion(DiffusionFit {
        stage: DiffusionStage::Vessel,
        pairs: &pairs,
        denoiser_cfg: &cfg,
        schedule: NoiseSchedule::default_linear(10).unwrap(),
        train: &train,
        out_dir: dir.path(),
        config_text: String::new(),
        resume: None,
    })
    .unwrap();
    let log = std::fs::read_to_string(&summary.loss_log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4); // 2 epochs x 2 batches
    for line in lines {
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields.len(), 5, "line '{line}' must have 5 fields");
        fields[0].parse::<usize>().unwrap();
        fields[1].parse::<usize>().unwrap();
        fields[2].parse::<f64>().unwrap();
        let reps = fields[3].parse::<usize>().unwrap();
        assert!(reps <= 5);
        fields[4].parse::<u64>().unwrap();
    }
}

#[test]
fn seg_training_reduces_bce() {
    let pairs = synthetic_pairs(16, 29);
    let dir = tempfile::tempdir().unwrap();
    let seg_cfg = SegUnetConfig {
        in_channels: 3,
        base_channels: 8,
        groups: 4,
    };
    let train = TrainConfig {
        batch_size: 4,
        epochs: 3,
        learning_rate: 2e-3,
        seed: 31,
        ..TrainConfig::default()
    };
    let summary = fit_seg(SegFit {
        pairs: &pairs,
        seg_cfg: &seg_cfg,
        train: &train,
        out_dir: dir.path(),
        config_text: String::new(),
        resume: None,
    })
    .unwrap();
    assert!(
        summary.final_epoch_avg < 0.6,
        "segmentation loss stayed high: {}",
        summary.final_epoch_avg
    );
    assert!(summary.best_epoch_avg <= summary.final_epoch_avg + 1e-9);
}

#[test]
fn sr_training_runs_and_improves_over_epochs() {
    let pairs = synthetic_pairs(8, 37);
    let images: Vec<Tensor<f32>> = pairs.iter().map(|p| p.vessel.clone()).collect();
    let dir = tempfile::tempdir().unwrap();
    let rrdb_cfg = RrdbConfig {
        in_channels: 1,
        out_channels: 1,
        features: 8,
        growth: 4,
        num_blocks: 1,
        scale: 2,
        residual_scale: 0.2,
    };
    let disc_cfg = DiscriminatorConfig {
        in_channels: 1,
        base_channels: 4,
        vit_heads: 2,
        vit_depth: 1,
    };
    let train = TrainConfig {
        batch_size: 4,
        epochs: 2,
        learning_rate: 1e-3,
        seed: 41,
        ..TrainConfig::default()
    };
    let summary = fit_sr(SrFit {
        mode: SrMode::Binary,
        images: &images,
        rrdb_cfg: &rrdb_cfg,
        disc_cfg: &disc_cfg,
        weights: SrLossWeights::default(),
        ssim: SsimConfig::default(),
        train: &train,
        out_dir: dir.path(),
        config_text: String::new(),
        resume: None,
    })
    .unwrap();
    assert!(summary.final_epoch_avg.is_finite());
    // reload the trained generator and check it still upscales
    let ckpt = Checkpoint::load(&summary.last_checkpoint).unwrap();
    let (gen, _disc, store) = rrdb_from_checkpoint(&ckpt, &rrdb_cfg, &disc_cfg).unwrap();
    let up = gen.upscale(&store, &images[0]).unwrap();
    assert_eq!(up.shape(), &[1, 64, 64]);
}

#[test]
fn disc_training_separates_real_from_inverted() {
    let real = synthetic_pairs(12, 43);
    // fakes: vessel maps that do not match their fundus at all
    let fake: Vec<ImagePair> = real
        .iter()
        .map(|p| ImagePair {
            fundus: p.fundus.clone(),
            vessel: p.vessel.map(|v| 1.0 - v),
            id: format!("fake-{}", p.id),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let disc_cfg = DiscriminatorConfig::desk_pair();
    let train = TrainConfig {
        batch_size: 4,
        epochs: 6,
        learning_rate: 1e-3,
        seed: 47,
        ..TrainConfig::default()
    };
    let summary = fit_disc(DiscFit {
        real: &real,
        fake: &fake,
        disc_cfg: &disc_cfg,
        train: &train,
        out_dir: dir.path(),
        config_text: String::new(),
        resume: None,
    })
    .unwrap();
    let ckpt = Checkpoint::load(&summary.last_checkpoint).unwrap();
    let (disc, store) = discriminator_from_checkpoint(&ckpt, &disc_cfg).unwrap();
    let mut real_mean = 0.0;
    let mut fake_mean = 0.0;
    for (r, f) in real.iter().zip(&fake) {
        real_mean += disc.discriminate(&store, &r.fundus, &r.vessel).unwrap() / real.len() as f32;
        fake_mean += disc.discriminate(&store, &f.fundus, &f.vessel).unwrap() / fake.len() as f32;
    }
    assert!(
        real_mean > fake_mean,
        "discriminator failed to separate: real {real_mean} vs fake {fake_mean}"
    );
}
