use utilgen_core::classifier::{train, Architecture, ClassifierState, TrainConfig};
use utilgen_core::data::{load_dataset, make_synthetic_task, save_dataset, SplitSizes, TaskSpec};
use utilgen_core::diffusion::{initial_tokens, train_denoiser, DenoiserArch, DenoiserTrainConfig, NoiseSchedule};
use utilgen_core::mlco::{generate_dataset, score_samples};
use utilgen_core::todv::WeightNetParams;

fn head_mean(v: &[f64]) -> f64 {
    v[..100].iter().sum::<f64>() / 100.0
}

fn tail_mean(v: &[f64]) -> f64 {
    v[v.len() - 100..].iter().sum::<f64>() / 100.0
}

#[test]
fn denoiser_samples_are_learnable_and_survive_a_file_round_trip() {
    let spec = TaskSpec::ring(4, 2, 3.0, 0.5, 0.0);
    let b = make_synthetic_task(&spec, SplitSizes { train: 400, validation: 40, test: 400 }, 3).unwrap();
    let sched = NoiseSchedule::default();
    let arch = DenoiserArch::default();
    let tokens = initial_tokens(&b.real_train, arch.cond_dim, 1).unwrap();
    let cfg = DenoiserTrainConfig { steps: 1500, ..Default::default() };
    let (state, log) = train_denoiser(&b.real_train, &tokens, &sched, &arch, &cfg).unwrap();
    assert!(tail_mean(&log.step_losses) < head_mean(&log.step_losses));

    let synth = generate_dataset(&state, &tokens, 4, 100, 2.0, 10, &sched, 9).unwrap();
    assert_eq!(synth.len(), 400);
    assert!(synth.samples.iter().all(|s| s.features.iter().all(|v| v.is_finite())));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.txt");
    save_dataset(&synth, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), synth);

    let init = ClassifierState::new(Architecture { hidden: 32 }, 2, 4, 0);
    let (cls, _) = train(&init, &synth, &TrainConfig { epochs: 30, batch_size: 64, lr: 0.05, ..Default::default() }).unwrap();
    let acc = cls.evaluate(&b.test).unwrap();
    assert!(acc > 0.8, "synthetic-only accuracy {acc}");

    // A zeroed weight net scores every sample at the sigmoid midpoint.
    let scores = score_samples(&WeightNetParams::zeros(6), &cls, &synth).unwrap();
    assert!(scores.iter().all(|s| (s - 0.5).abs() < 1e-12));
}
