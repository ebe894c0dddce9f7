use hqsnet::gradcheck::{grad_check, GradCheckConfig};
use hqsnet::hqs::{HqsPipeline, Mode, PipelineSpec};
use hqsnet::imaging::{simulate_capture, NoiseParams, Psf, Rng};
use hqsnet::tensor::ImageTensor;
use hqsnet::toy::{generate_dataset, ToyClassifier, ToyParams};
use hqsnet::train::{Example, Objective, System, Trainable};

fn scene(size: usize, channels: usize, seed: u64) -> ImageTensor {
    let mut rng = Rng::new(seed);
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.uniform_range(0.0, 0.8), rng.uniform_range(0.0, 0.8), rng.uniform_range(0.0, 6.28)))
        .collect();
    ImageTensor::from_fn(size, size, channels, |i, j, k| {
        let v: f64 = waves
            .iter()
            .map(|&(u, v, p)| (u * i as f64 + v * j as f64 + p + k as f64).sin())
            .sum();
        (0.5 + 0.1 * v).clamp(0.05, 0.95)
    })
}

fn system(mode: Mode, channels: usize, seed: u64) -> (System, Example) {
    let (noise, psf) = match mode {
        Mode::Denoise => (NoiseParams::new(0.01, 0.01).unwrap(), None),
        Mode::Deblur => (NoiseParams::new(0.0, 0.01).unwrap(), Some(Psf::gaussian(5, 1.0, "test").unwrap())),
    };
    let pipeline = HqsPipeline::initialize(&PipelineSpec::default_for(mode), psf.clone(), noise, seed).unwrap();
    let clean = scene(16, channels, seed);
    let degraded = simulate_capture(&clean, psf.as_ref(), &noise, &mut Rng::new(seed + 1)).unwrap();
    let sys = System::new(pipeline, None, &[Trainable::Lowlevel]).unwrap();
    (sys, Example { degraded, clean: Some(clean), label: None })
}

fn check(sys: &System, ex: &Example, objective: Objective) -> hqsnet::gradcheck::GradCheckReport {
    let report = grad_check(
        sys,
        |s: &System, tape: &mut hqsnet::tape::Tape| {
            let (l, p, _) = s.record(tape, ex, objective)?;
            Ok((l, p))
        },
        &GradCheckConfig::default(),
        None,
    )
    .unwrap();
    println!("{report}");
    report
}

#[test]
fn denoise_pipeline_gradients() {
    let (sys, ex) = system(Mode::Denoise, 1, 3);
    assert!(check(&sys, &ex, Objective::Reconstruction).passed);
}

#[test]
fn deblur_pipeline_gradients() {
    let (sys, ex) = system(Mode::Deblur, 3, 4);
    assert!(check(&sys, &ex, Objective::Reconstruction).passed);
}

#[test]
fn joint_pipeline_classifier_gradients() {
    let data = generate_dataset(&ToyParams { classes: 4, samples: 4, size: 16, ..ToyParams::default() }, 9).unwrap();
    let noise = NoiseParams::new(0.01, 0.01).unwrap();
    let pipeline = HqsPipeline::initialize(&PipelineSpec::default_for(Mode::Denoise), None, noise, 5).unwrap();
    let clf = ToyClassifier::new(4, 16, 1, 6).unwrap();
    let degraded = simulate_capture(&data.images[1], None, &noise, &mut Rng::new(2)).unwrap();
    let ex = Example { degraded, clean: None, label: Some(data.labels[1]) };
    let sys = System::new(pipeline, Some(clf), &[Trainable::Lowlevel, Trainable::Classifier]).unwrap();
    assert!(check(&sys, &ex, Objective::Classification).passed);
}

#[test]
fn corrupted_adjoint_is_caught_and_named() {
    let (sys, ex) = system(Mode::Denoise, 1, 3);
    let report = grad_check(
        &sys,
        |s: &System, tape: &mut hqsnet::tape::Tape| {
            let (l, p, _) = s.record(tape, &ex, Objective::Reconstruction)?;
            Ok((l, p))
        },
        &GradCheckConfig::default(),
        Some(("pixel_affine", 1.01)),
    )
    .unwrap();
    assert!(!report.passed);
    let failed: Vec<&str> = report.failures().map(|a| a.name.as_str()).collect();
    assert!(failed.iter().any(|n| n.contains("prox")), "{failed:?}");
    assert!(report.to_string().contains("FAIL"));
}

#[test]
fn dead_relu_regions_pass_with_zero_gradients() {
    let noise = NoiseParams::new(0.0, 0.01).unwrap();
    let mut pipeline = HqsPipeline::initialize(&PipelineSpec::default_for(Mode::Denoise), None, noise, 1).unwrap();
    for layer in pipeline.stages[0].prox.layers_mut() {
        layer.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let sys = System::new(pipeline, None, &[Trainable::Lowlevel]).unwrap();
    let ex = Example {
        degraded: ImageTensor::zeros(16, 16, 1),
        clean: Some(ImageTensor::zeros(16, 16, 1)),
        label: None,
    };
    assert!(check(&sys, &ex, Objective::Reconstruction).passed);
}

#[test]
fn identity_prox_filter_and_weight_gradients() {
    use hqsnet::hqs::{FilterBank, HqsStage, ProxNet};
    let noise = NoiseParams::new(0.0, 0.01).unwrap();
    let psf = Psf::gaussian(5, 1.0, "test").unwrap();
    let mut rng = Rng::new(21);
    let bank = ImageTensor::from_fn(5, 5, 6, |_, _, _| rng.uniform_range(-0.2, 0.5));
    let stage = HqsStage::new(0.7, 1.3, FilterBank::new(bank).unwrap(), ProxNet::identity(6), false).unwrap();
    let pipeline = HqsPipeline::new(vec![stage], Mode::Deblur, Some(psf), noise).unwrap();
    let y = scene(16, 1, 8);
    let target = scene(16, 1, 9);
    let report = grad_check(
        &pipeline,
        |p: &HqsPipeline, tape: &mut hqsnet::tape::Tape| {
            let yv = tape.constant(y.clone());
            let (out, params) = p.record(tape, yv, true)?;
            let t = tape.constant(target.clone());
            Ok((tape.mse(out, t)?, params))
        },
        &GradCheckConfig { tolerance: 1e-6, ..GradCheckConfig::default() },
        None,
    )
    .unwrap();
    println!("{report}");
    assert!(report.passed);
}

#[test]
fn joint_gradients_reach_both_parts() {
    let data = generate_dataset(&ToyParams { classes: 4, samples: 4, size: 16, ..ToyParams::default() }, 2).unwrap();
    let noise = NoiseParams::new(0.01, 0.01).unwrap();
    let pipeline = HqsPipeline::initialize(&PipelineSpec::default_for(Mode::Denoise), None, noise, 5).unwrap();
    let clf = ToyClassifier::new(4, 16, 1, 6).unwrap();
    let sys = System::new(pipeline, Some(clf), &[Trainable::Lowlevel, Trainable::Classifier]).unwrap();
    let ex = Example { degraded: data.images[0].clone(), clean: None, label: Some(data.labels[0]) };
    let (_, grads, _) = sys.loss_and_grads(&ex, Objective::Classification).unwrap();
    assert!(grads.max_abs_with_prefix("lowlevel.") > 0.0);
    assert!(grads.max_abs_with_prefix("classifier.") > 0.0);
    assert!(grads.is_finite());
}
