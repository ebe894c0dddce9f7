use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use hqsnet::gradcheck::{grad_check, GradCheckConfig};
use hqsnet::hqs::HqsPipeline;
use hqsnet::imaging::{fit_noise_curve, simulate_batch, simulate_capture, Psf, Rng};
use hqsnet::io::{self, Checkpoint, LABELS_FILE, PARAMS_FILE};
use hqsnet::tape::Tape;
use hqsnet::toy::{accuracy, generate_dataset, Split, ToyClassifier, ToyParams};
use hqsnet::train::{mean_psnr, train, Example, History, Objective, System, Trainable};
use hqsnet::Mode;

use crate::data::{self, Provenance, PROVENANCE_FILE};
use crate::{
    Baseline, CalibrateArgs, DatagenArgs, EvalArgs, FinetuneArgs, GradcheckArgs, InferArgs, PretrainArgs, PsfArgs,
    SimulateArgs, SplitArg, TrainableArg, UsageError,
};

#[derive(Debug, thiserror::Error)]
#[error("gradient check failed")]
pub struct GradcheckFailed;

pub fn datagen(a: &DatagenArgs) -> Result<()> {
    let mut params: ToyParams = match &a.params {
        Some(p) => io::read_json(p)?,
        None => ToyParams::default(),
    };
    if let Some(k) = a.classes {
        params.classes = k;
    }
    if let Some(n) = a.n {
        params.samples = n;
    }
    if let Some(s) = a.size {
        params.size = s;
    }
    if let Some(s) = a.split {
        params.split = match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        };
    }
    let data = generate_dataset(&params, a.seed)?;
    io::export_dataset(&a.out, &data)?;
    println!(
        "wrote {} images ({} classes, {}x{}) to {}",
        data.len(),
        params.classes,
        params.size,
        params.size,
        a.out.display()
    );
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let noise = io::load_noise(&a.noise)?;
    let psf = data::load_psf_arg(&a.psf)?;
    let set = if a.input.is_dir() {
        data::read_image_dir(&a.input)?
    } else {
        let name = a
            .input
            .file_name()
            .ok_or_else(|| UsageError(format!("{} is not a file", a.input.display())))?
            .to_string_lossy()
            .into_owned();
        data::ImageSet {
            names: vec![name],
            images: vec![io::read_image(&a.input)?],
            labels: None,
            params: None,
        }
    };
    let degraded = simulate_batch(&set.images, psf.as_ref(), &noise, a.seed)?;
    let names: Vec<String> = set
        .names
        .iter()
        .map(|n| Path::new(n).with_extension("pfm").to_string_lossy().into_owned())
        .collect();
    fs::create_dir_all(&a.out)?;
    for (n, y) in names.iter().zip(&degraded) {
        io::write_pfm(&a.out.join(n), y)?;
    }
    if let Some(labels) = &set.labels {
        let mut csv = String::from("filename,label\n");
        for (n, l) in names.iter().zip(labels) {
            writeln!(csv, "{n},{l}")?;
        }
        io::write_atomic(&a.out.join(LABELS_FILE), csv.as_bytes())?;
    }
    if a.input.is_dir() && a.input.join(PARAMS_FILE).exists() {
        io::write_atomic(&a.out.join(PARAMS_FILE), &fs::read(a.input.join(PARAMS_FILE))?)?;
    }
    let source = if a.input.is_dir() {
        a.input.as_path()
    } else {
        a.input.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
    };
    let provenance = Provenance {
        source: fs::canonicalize(source)?.to_string_lossy().into_owned(),
        noise,
        psf: (a.psf != "none").then(|| a.psf.clone()),
        seed: a.seed,
        files: names,
    };
    io::write_json(&a.out.join(PROVENANCE_FILE), &provenance)?;
    println!("simulated {} captures into {}", degraded.len(), a.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct TruthRow {
    filename: String,
    level: f64,
}

#[derive(Serialize)]
struct CalibrationReport {
    alpha: f64,
    sigma: f64,
    slope: f64,
    intercept: f64,
    residual: f64,
    negative_slope: bool,
    /// `(mean, variance)` per patch.
    samples: Vec<(f64, f64)>,
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let truth = io::read_csv_rows(&a.truth, |r: TruthRow| (r.filename, r.level))?;
    if truth.is_empty() {
        bail!("{} lists no patches", a.truth.display());
    }
    let patches = truth
        .iter()
        .map(|(f, level)| Ok((*level, io::read_image(&a.patches.join(f))?)))
        .collect::<hqsnet::Result<Vec<_>>>()?;
    let curve = fit_noise_curve(&patches)?;
    let report = CalibrationReport {
        alpha: curve.fitted.alpha,
        sigma: curve.fitted.sigma,
        slope: curve.slope,
        intercept: curve.intercept,
        residual: curve.residual,
        negative_slope: curve.negative_slope,
        samples: curve.samples.clone(),
    };
    io::save_noise(&a.out, &curve.fitted)?;
    io::write_json(&a.out.with_extension("report.json"), &report)?;
    println!("{:<10} {:>14}", "quantity", "value");
    for (k, v) in [
        ("alpha", report.alpha),
        ("sigma", report.sigma),
        ("slope", report.slope),
        ("intercept", report.intercept),
        ("residual", report.residual),
    ] {
        println!("{k:<10} {v:>14.6e}");
    }
    if report.negative_slope {
        println!("note: regression slope was negative; alpha set to 0");
    }
    Ok(())
}

fn write_history(path: Option<&Path>, h: &History) -> Result<()> {
    if let Some(p) = path {
        io::write_atomic(p, h.to_csv().as_bytes())?;
    }
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let (cfg, psf) = data::load_config(&a.config)?;
    let set = data::read_image_dir(&a.data)?;
    set.check_uniform_shape()?;
    let examples = data::degraded_examples(&set, &cfg, psf.as_ref(), true)?;
    let pipeline = HqsPipeline::initialize(&cfg.pipeline_spec(), psf.clone(), cfg.noise, cfg.seed)?;
    let mut system = System::new(pipeline, None, &[Trainable::Lowlevel])?;
    let initial = system.pipeline.clone();
    let mut opts = cfg.options();
    opts.objective = Objective::Reconstruction;
    let history = train(&mut system, &examples, &opts)?;

    let mut rows = vec![psnr_row("train", &examples, &initial, &system.pipeline)?];
    if let Some(v) = &a.val {
        let vset = data::read_image_dir(v)?;
        let mut vcfg = cfg.clone();
        vcfg.seed = cfg.seed.wrapping_add(1);
        let vex = data::degraded_examples(&vset, &vcfg, psf.as_ref(), true)?;
        rows.push(psnr_row("val", &vex, &initial, &system.pipeline)?);
    }
    println!("{:<6} {:>7} {:>11} {:>13} {:>13}", "set", "images", "input_psnr", "initial_psnr", "trained_psnr");
    for r in &rows {
        println!("{:<6} {:>7} {:>11.3} {:>13.3} {:>13.3}", r.0, r.1, r.2, r.3, r.4);
    }
    write_history(a.history.as_deref(), &history)?;
    io::save_checkpoint(&a.out, &Checkpoint::new(Some(system.pipeline), None))?;
    Ok(())
}

fn psnr_row(
    name: &'static str,
    ex: &[Example],
    initial: &HqsPipeline,
    trained: &HqsPipeline,
) -> Result<(&'static str, usize, f64, f64, f64)> {
    let y: Vec<_> = ex.iter().map(|e| e.degraded.clone()).collect();
    let x: Vec<_> = ex.iter().filter_map(|e| e.clean.clone()).collect();
    Ok((
        name,
        y.len(),
        mean_psnr(None, &y, &x)?,
        mean_psnr(Some(initial), &y, &x)?,
        mean_psnr(Some(trained), &y, &x)?,
    ))
}

fn load_pipeline(arg: &str) -> Result<HqsPipeline> {
    if arg == "identity" {
        return Ok(HqsPipeline::identity());
    }
    io::load_checkpoint(Path::new(arg))?
        .pipeline
        .ok_or_else(|| anyhow!("{arg} holds no pipeline"))
}

fn load_classifier(path: &Path) -> Result<ToyClassifier> {
    io::load_checkpoint(path)?
        .classifier
        .ok_or_else(|| anyhow!("{} holds no classifier", path.display()))
}

pub fn finetune(a: &FinetuneArgs) -> Result<()> {
    let (cfg, psf) = data::load_config(&a.config)?;
    let set = data::read_image_dir(&a.data)?;
    let (h, w, c) = set.check_uniform_shape()?;
    if h != w {
        bail!("classifier needs square images, got {h}x{w}");
    }
    set.labels()?;
    let pipeline = load_pipeline(&a.model)?;
    let classifier = match &a.classifier {
        Some(p) => load_classifier(p)?,
        None => ToyClassifier::new(set.classes()?, h, c, cfg.seed)?,
    };
    let trainable: Vec<Trainable> = match &a.trainable {
        Some(t) => t
            .iter()
            .map(|t| match t {
                TrainableArg::Lowlevel => Trainable::Lowlevel,
                TrainableArg::Classifier => Trainable::Classifier,
            })
            .collect(),
        None => cfg.trainable.clone(),
    };
    let examples = data::degraded_examples(&set, &cfg, psf.as_ref(), true)?;
    let mut system = System::new(pipeline, Some(classifier), &trainable)?;
    let mut opts = cfg.options();
    opts.objective = cfg.objective.unwrap_or(Objective::Classification);
    let history = train(&mut system, &examples, &opts)?;
    let last = history.steps.last().map_or(f64::NAN, |s| s.loss);
    println!("trained {} steps; final minibatch loss {last:.6}", history.steps.len());
    write_history(a.history.as_deref(), &history)?;
    io::save_checkpoint(&a.out, &Checkpoint::new(Some(system.pipeline), system.classifier))?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = a.model.as_deref().map(io::load_checkpoint).transpose()?;
    let classifier = match (&a.classifier, &model) {
        (Some(p), _) => load_classifier(p)?,
        (None, Some(m)) => m
            .classifier
            .clone()
            .ok_or_else(|| UsageError("--model holds no classifier; pass --classifier".into()))?,
        (None, None) => return Err(UsageError("eval needs --classifier or --model".into()).into()),
    };
    let (pipeline, method) = match a.baseline {
        Baseline::Identity => (Some(HqsPipeline::identity()), "identity".to_string()),
        Baseline::None => match (&model, &a.model) {
            (Some(m), Some(p)) => (
                m.pipeline.clone(),
                p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
            ),
            _ => (None, "input".to_string()),
        },
    };
    let set = data::read_image_dir(&a.data)?;
    let top1 = accuracy(&classifier, &set.images, set.labels()?, pipeline.as_ref())?;
    let psnr = match data::clean_dir_for(&a.data, a.clean.as_deref())? {
        Some(dir) => {
            let clean = data::read_image_dir(&dir)?;
            let stems = |names: &[String]| -> Vec<String> {
                names.iter().map(|n| Path::new(n).with_extension("").to_string_lossy().into_owned()).collect()
            };
            if stems(&clean.names) != stems(&set.names) {
                bail!("clean set {} does not match {}", dir.display(), a.data.display());
            }
            Some(mean_psnr(pipeline.as_ref(), &set.images, &clean.images)?)
        }
        None => None,
    };
    let psnr_text = psnr.map_or(String::new(), |p| p.to_string());
    let csv = format!("method,images,top1,psnr\n{method},{},{top1},{psnr_text}\n", set.images.len());
    io::write_atomic(&a.out, csv.as_bytes())?;
    println!("{:<12} {:>7} {:>8} {:>9}", "method", "images", "top1", "psnr");
    println!(
        "{:<12} {:>7} {:>8.4} {:>9}",
        method,
        set.images.len(),
        top1,
        psnr.map_or("n/a".into(), |p| format!("{p:.3}"))
    );
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let (cfg, psf) = data::load_config(&a.config)?;
    let pipeline = HqsPipeline::initialize(&cfg.pipeline_spec(), psf.clone(), cfg.noise, cfg.seed)?;
    let classes = 4;
    let toy = ToyParams {
        classes,
        samples: classes,
        size: a.size,
        ..ToyParams::default()
    };
    let data = generate_dataset(&toy, cfg.seed)?;
    let (clean, label) = (data.images[1].clone(), data.labels[1]);
    let degraded = simulate_capture(&clean, psf.as_ref(), &cfg.noise, &mut Rng::new(cfg.seed))?;
    let objective = cfg.objective();
    let classifier = match objective {
        Objective::Classification => Some(ToyClassifier::new(classes, a.size, 1, cfg.seed)?),
        Objective::Reconstruction => None,
    };
    let system = System::new(pipeline, classifier, &cfg.trainable)?;
    let example = Example {
        degraded,
        clean: Some(clean),
        label: Some(label),
    };
    let config = GradCheckConfig {
        tolerance: a.tol,
        samples_per_array: a.samples,
        seed: cfg.seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check(
        &system,
        |s: &System, tape: &mut Tape| {
            let (l, p, _) = s.record(tape, &example, objective)?;
            Ok((l, p))
        },
        &config,
        None,
    )?;
    println!("{report}");
    if report.passed {
        Ok(())
    } else {
        Err(GradcheckFailed.into())
    }
}

pub fn infer(a: &InferArgs, mode: Mode) -> Result<()> {
    let pipeline = io::load_checkpoint(&a.model)?
        .pipeline
        .ok_or_else(|| anyhow!("{} holds no pipeline", a.model.display()))?;
    if pipeline.mode != mode && !pipeline.stages.is_empty() {
        bail!("{} is a {:?} model", a.model.display(), pipeline.mode);
    }
    let y = io::read_image(&a.input)?;
    let x = pipeline.run(&y).with_context(|| format!("reconstructing {}", a.input.display()))?;
    io::write_image(&a.out, &x.clamp01())?;
    Ok(())
}

pub fn psf(a: &PsfArgs) -> Result<()> {
    let label = a.out.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned());
    io::save_psf(&a.out, &Psf::gaussian(a.size, a.std, label)?)?;
    Ok(())
}
