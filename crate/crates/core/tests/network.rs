use candle_core::{DType, Device, Tensor};
use rem_diffusion::net::{
    load_checkpoint, read_checkpoint_manifest, save_checkpoint, CheckpointManifest, Denoiser, DenoiserConfig, NetError,
};
use rem_diffusion::schedule::{DiffusionSchedule, ScheduleParams};
use rem_diffusion::trainer::{batch_loss, draw_iteration, AdamW, AdamWParams, Batch};

fn input(b: usize, h: usize, w: usize, seed: f32) -> Tensor {
    let v: Vec<f32> = (0..b * 2 * h * w).map(|i| (i as f32 * 0.37 + seed).sin()).collect();
    Tensor::from_vec(v, (b, 2, h, w), &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

#[test]
fn output_has_one_channel_at_input_resolution() {
    for (h, w) in [(16, 16), (32, 48), (64, 64)] {
        let net = Denoiser::new(DenoiserConfig::tiny(h, w), 0).unwrap();
        let out = net.forward(&input(2, h, w, 0.0), &[1.0, 900.0], None).unwrap();
        assert_eq!(out.dims(), &[2, 1, h, w]);
    }
}

#[test]
fn fresh_head_predicts_zero_noise() {
    let net = Denoiser::new(DenoiserConfig::tiny(16, 16), 3).unwrap();
    let out = net.forward(&input(1, 16, 16, 1.0), &[500.0], None).unwrap();
    assert!(flat(&out).iter().all(|&v| v == 0.0));
}

#[test]
fn indivisible_sizes_are_rejected() {
    for (h, w) in [(63, 64), (64, 40), (8, 8)] {
        assert!(matches!(
            Denoiser::new(DenoiserConfig::tiny(h, w), 0),
            Err(NetError::InvalidConfig(_))
        ));
    }
}

#[test]
fn env_features_change_the_output() {
    let cfg = DenoiserConfig::tiny(16, 16).with_env_dim(3);
    let net = Denoiser::new(cfg, 1).unwrap();
    // push the zero head off zero so the trunk shows through
    let head = net.params().vars().filter(|(n, _)| n.starts_with("out.")).map(|(_, v)| v.clone()).collect::<Vec<_>>();
    for v in head {
        v.set(&(v.as_tensor().ones_like().unwrap() * 0.1).unwrap()).unwrap();
    }
    let x = input(1, 16, 16, 2.0);
    let e1 = Tensor::new(&[[0.0f32, 0.0, 0.0]], &Device::Cpu).unwrap();
    let e2 = Tensor::new(&[[1.0f32, -2.0, 0.5]], &Device::Cpu).unwrap();
    let a = flat(&net.forward(&x, &[10.0], Some(&e1)).unwrap());
    let b = flat(&net.forward(&x, &[10.0], Some(&e2)).unwrap());
    assert_ne!(a, b);
    assert!(net.forward(&x, &[10.0], None).is_err());
}

#[test]
fn every_parameter_receives_gradient_after_one_step() {
    let (h, w) = (16, 16);
    let net = Denoiser::new(DenoiserConfig::tiny(h, w), 4).unwrap();
    let schedule = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let x0: Vec<f32> = (0..2 * h * w).map(|i| ((i % 17) as f32 / 8.0) - 1.0).collect();
    let heat: Vec<f32> = (0..2 * h * w).map(|i| if i % 37 == 0 { 1.0 } else { -1.0 }).collect();
    let batch = Batch {
        ids: vec!["a".into(), "b".into()],
        x0: Tensor::from_vec(x0, (2, 1, h, w), &Device::Cpu).unwrap(),
        heat: Tensor::from_vec(heat, (2, 1, h, w), &Device::Cpu).unwrap(),
        env: None,
    };
    let draws = draw_iteration(0, 0, 2, 2, h * w, 1000);
    let mut opt = AdamW::new(AdamWParams::default());
    // the zero-initialized head blocks gradients to the trunk until it moves
    let loss = batch_loss(&net, &batch, &draws.steps, &draws.eps, &schedule).unwrap();
    opt.step(net.params(), &loss.backward().unwrap(), 1e-3, 1.0).unwrap();
    let loss = batch_loss(&net, &batch, &draws.steps, &draws.eps, &schedule).unwrap();
    let grads = loss.backward().unwrap();
    for (name, var) in net.params().vars() {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name} has no gradient"));
        let norm = g.to_dtype(DType::F64).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(norm > 0.0, "{name} gradient is zero");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = DenoiserConfig::tiny(16, 16);
    let net = Denoiser::new(cfg.clone(), 9).unwrap();
    for (_, v) in net.params().vars() {
        let t = v.as_tensor();
        v.set(&(t + 0.125).unwrap()).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = CheckpointManifest::new(cfg, ScheduleParams::default(), 5.0, 9);
    let id = save_checkpoint(dir.path(), &net, &manifest).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.id, id);
    assert_eq!(back.manifest, manifest);
    for (name, v) in net.params().vars() {
        let w = back.model.params().get(name).unwrap();
        assert_eq!(flat(v.as_tensor()), flat(w.as_tensor()), "{name}");
    }
    let x = input(1, 16, 16, 0.5);
    assert_eq!(
        flat(&net.forward(&x, &[77.0], None).unwrap()),
        flat(&back.model.forward(&x, &[77.0], None).unwrap())
    );
}

#[test]
fn manifest_mismatch_lists_every_field() {
    let manifest = CheckpointManifest::new(DenoiserConfig::tiny(32, 32), ScheduleParams::default(), 5.0, 0);
    assert!(manifest.check_compatible(32, 32, 0).is_ok());
    let msg = manifest.check_compatible(64, 32, 2).unwrap_err().to_string();
    assert!(msg.contains("H: checkpoint 32 != data 64"), "{msg}");
    assert!(msg.contains("P: checkpoint 0 != data 2"), "{msg}");
    assert!(!msg.contains("W:"), "{msg}");

    let dir = tempfile::tempdir().unwrap();
    let net = Denoiser::new(DenoiserConfig::tiny(32, 32), 0).unwrap();
    save_checkpoint(dir.path(), &net, &manifest).unwrap();
    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"H\": 32", "\"H\": 48", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(read_checkpoint_manifest(dir.path()), Err(NetError::Incompatible(_))));
}
