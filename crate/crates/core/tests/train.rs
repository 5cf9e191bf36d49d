use mrt::model::ModelConfig;
use mrt::pack::{Role, TaskKind};
use mrt::synth::{gen_dataset, gen_design, GenParams};
use mrt::train::{
    example_gradient, interpolate, make_training_example, random_grouping, random_targets, velocity_target, Checkpoint, TaskMix, TaskSampler, TrainConfig,
    Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_params() -> GenParams {
    GenParams { canvas_min: 16, canvas_max: 24, align: 2, ..GenParams::default() }.with_layers(2, 5)
}

fn tiny_model() -> ModelConfig {
    ModelConfig { depth: 1, dim: 16, heads: 2, mlp_ratio: 2, latent_channels: 16, vocab: 64, max_caption_tokens: 8, time_freq_dim: 8, ..ModelConfig::default() }
}

fn tiny_train() -> TrainConfig {
    TrainConfig { patch: 2, batch_size: 2, steps: 4, lr: 1e-3, ..TrainConfig::default() }
}

#[test]
fn interpolation_endpoints() {
    let z0 = [0.25f32, -1.0, 3.0];
    let eps = [1.0f32, 0.5, -2.0];
    assert_eq!(interpolate(&z0, &eps, 0.0).unwrap(), z0.to_vec());
    assert_eq!(interpolate(&z0, &eps, 1.0).unwrap(), eps.to_vec());
    assert_eq!(velocity_target(&z0, &eps).unwrap(), vec![-0.75, -1.5, 5.0]);
    assert!(interpolate(&z0, &eps[..2], 0.5).is_err());
}

#[test]
fn task_frequencies_match_the_mix() {
    let sampler = TaskSampler::new(TaskMix::default(), 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 20_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let kind = sampler.sample(&mut rng);
        counts[TaskKind::ALL.iter().position(|&k| k == kind).unwrap()] += 1;
    }
    for (kind, &c) in TaskKind::ALL.iter().zip(&counts) {
        let p = sampler.probability(*kind);
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{kind:?}: {c} vs {}", n as f64 * p);
    }
    assert!((TaskKind::ALL.iter().map(|&k| sampler.probability(k)).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn invalid_mixes_are_rejected() {
    assert!(TaskSampler::new(TaskMix { t2l: 0.5, i2l: 0.5, l2l: 0.5 }, 0.5).is_err());
    assert!(TaskSampler::new(TaskMix::default(), 1.5).is_err());
    assert!(TrainConfig { grouping_prob: -0.1, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn addition_targets_are_nonempty_proper_subsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let k = 1 + i % 9;
        let a = random_targets(k, &mut rng);
        assert!(!a.is_empty());
        assert!(a.iter().all(|&j| (1..=k).contains(&j)));
        if k >= 2 {
            assert!(a.len() < k);
        }
    }
}

#[test]
fn grouping_merges_one_contiguous_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..50 {
        let d = gen_design(seed, &small_params()).unwrap();
        let g = random_grouping(&d, &mut rng).unwrap();
        g.validate().unwrap();
        assert!(g.k() < d.k());
    }
}

#[test]
fn examples_noise_only_noised_rows() {
    let data = gen_dataset(1, 6, &small_params()).unwrap();
    let cfg = tiny_train();
    let sampler = cfg.sampler().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for d in data.iter().cycle().take(60) {
        let ex = make_training_example(d, &sampler, &cfg, &mut rng).unwrap();
        assert!((0.0..1.0).contains(&ex.t));
        for (i, m) in ex.seq.meta.iter().enumerate() {
            let tok = ex.seq.token(i);
            let clean = ex.clean.row(i);
            if m.role == Role::Noised {
                // z_t - (1 - t) z0 = t eps and target = z0 - eps.
                for ((&zt, &z0), &v) in tok.iter().zip(clean.iter()).zip(ex.target.row(i).iter()) {
                    let eps = z0 - v;
                    assert!((zt - ((1.0 - ex.t) * z0 + ex.t * eps)).abs() < 1e-5);
                }
            } else {
                assert_eq!(tok, clean.as_slice().unwrap());
                assert!(ex.target.row(i).iter().all(|&v| v == 0.0));
            }
        }
        if ex.task == TaskKind::T2l {
            assert!(ex.seq.meta.iter().all(|m| m.role == Role::Noised));
        }
    }
}

#[test]
fn loss_at_init_is_the_target_second_moment() {
    // A fresh model has a zero output head, so the loss is mean(target^2).
    let data = gen_dataset(2, 3, &small_params()).unwrap();
    let cfg = tiny_train();
    let trainer = Trainer::new(tiny_model(), cfg.clone()).unwrap();
    let sampler = cfg.sampler().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in &data {
        let ex = make_training_example(d, &sampler, &cfg, &mut rng).unwrap();
        let (loss, _) = example_gradient(&trainer.model, &ex).unwrap();
        let noised: Vec<usize> = (0..ex.seq.len()).filter(|&i| ex.seq.meta[i].role == Role::Noised).collect();
        let expect: f64 = noised.iter().flat_map(|&i| ex.target.row(i).to_vec()).map(|v| (v as f64).powi(2)).sum::<f64>()
            / (noised.len() * ex.seq.channels) as f64;
        assert!((loss as f64 - expect).abs() < 1e-4 * expect.max(1.0), "{loss} vs {expect}");
    }
}

#[test]
fn training_lowers_the_loss() {
    let data = gen_dataset(3, 4, &small_params()).unwrap();
    let cfg = TrainConfig { steps: 60, batch_size: 4, ..tiny_train() };
    let mut tr = Trainer::new(tiny_model(), cfg).unwrap();
    tr.run(&data).unwrap();
    let first: f32 = tr.log[..20].iter().map(|r| r.loss).sum::<f32>() / 20.0;
    let n = tr.log.len();
    let last: f32 = tr.log[n - 20..].iter().map(|r| r.loss).sum::<f32>() / 20.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn checkpoint_round_trip_and_bit_exact_resume() {
    let data = gen_dataset(4, 4, &small_params()).unwrap();
    let mut straight = Trainer::new(tiny_model(), TrainConfig { steps: 6, ..tiny_train() }).unwrap();
    straight.run(&data).unwrap();

    let mut first = Trainer::new(tiny_model(), TrainConfig { steps: 3, ..tiny_train() }).unwrap();
    first.run(&data).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(ckpt, first.checkpoint());
    assert_eq!(ckpt.to_bytes().unwrap(), bytes);

    let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
    resumed.config.steps = 6;
    resumed.run(&data).unwrap();
    assert_eq!(resumed.model.params, straight.model.params);
    assert_eq!(resumed.checkpoint().to_bytes().unwrap(), straight.checkpoint().to_bytes().unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    straight.checkpoint().save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), straight.checkpoint());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let tr = Trainer::new(tiny_model(), tiny_train()).unwrap();
    let bytes = tr.checkpoint().to_bytes().unwrap();
    let origin = std::path::Path::new("mem");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], origin).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra, origin).is_err());
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic, origin).is_err());
}

#[test]
fn mismatched_channels_are_a_config_error() {
    let err = Trainer::new(tiny_model(), TrainConfig { patch: 4, ..tiny_train() }).err().unwrap();
    assert!(matches!(err, mrt::Error::Config(_)));
}

#[test]
fn parallel_and_sequential_steps_agree() {
    use mrt::exec::{set_mode, Exec};
    let data = gen_dataset(5, 4, &small_params()).unwrap();
    let run = |mode| {
        set_mode(mode);
        let mut tr = Trainer::new(tiny_model(), TrainConfig { steps: 3, batch_size: 3, ..tiny_train() }).unwrap();
        tr.run(&data).unwrap();
        tr.model.params
    };
    let a = run(Exec::Sequential);
    let b = run(Exec::Parallel);
    set_mode(Exec::Parallel);
    assert_eq!(a, b);
}
