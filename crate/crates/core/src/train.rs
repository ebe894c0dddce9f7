//! Minibatch RMSProp training of the reconstruction unit and classifier.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hqs::{HqsPipeline, Mode, PipelineSpec};
use crate::imaging::{NoiseParams, Rng};
use crate::loss;
use crate::optim::{RmsProp, RmsPropConfig};
use crate::params::{ParamGrads, Parameterized};
use crate::tape::{Tape, Var};
use crate::tensor::ImageTensor;
use crate::toy::ToyClassifier;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainable {
    Lowlevel,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Mean squared error against the clean image.
    Reconstruction,
    /// Softmax cross-entropy of the classifier on the reconstruction.
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub count: usize,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxConfig {
    pub layers: usize,
    pub channels: usize,
}

fn default_version() -> u32 {
    CONFIG_FORMAT_VERSION
}

/// JSON training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub mode: Mode,
    pub stages: usize,
    pub filters: FilterConfig,
    pub prox: ProxConfig,
    /// Defaults to false for denoising and true for deblurring.
    #[serde(default)]
    pub merge_colors: Option<bool>,
    pub noise: NoiseParams,
    #[serde(default)]
    pub psf_path: Option<String>,
    #[serde(default)]
    pub optimizer: RmsPropConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub trainable: Vec<Trainable>,
    /// Stops after this many optimizer steps instead of after `epochs`.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Defaults to classification when the classifier is trainable.
    #[serde(default)]
    pub objective: Option<Objective>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return invalid(format!(
                "unsupported config format_version {} (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            ));
        }
        self.noise.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if self.epochs == 0 && self.steps.is_none() {
            return invalid("epochs must be positive when steps is not given");
        }
        if self.filters.size % 2 == 0 {
            return invalid("filter size must be odd");
        }
        if self.prox.layers == 0 {
            return invalid("prox network needs at least one layer");
        }
        if self.mode == Mode::Deblur && self.psf_path.is_none() {
            return invalid("deblur mode needs psf_path");
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        self.objective.unwrap_or(if self.trainable.contains(&Trainable::Classifier) {
            Objective::Classification
        } else {
            Objective::Reconstruction
        })
    }

    pub fn pipeline_spec(&self) -> PipelineSpec {
        PipelineSpec {
            mode: self.mode,
            stages: self.stages,
            filter_count: self.filters.count,
            filter_size: self.filters.size,
            prox_layers: self.prox.layers,
            prox_channels: self.prox.channels,
            merge_colors: self.merge_colors.unwrap_or(self.mode == Mode::Deblur),
        }
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            optimizer: self.optimizer,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            steps: self.steps,
            objective: self.objective(),
        }
    }
}

/// The subset of [`TrainConfig`] the optimization loop needs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub optimizer: RmsPropConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub steps: Option<usize>,
    pub objective: Objective,
}

/// One training item: the degraded capture plus whatever targets exist.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub degraded: ImageTensor,
    pub clean: Option<ImageTensor>,
    pub label: Option<usize>,
}

/// Reconstruction unit followed by an optional classifier, with flags
/// choosing which part exposes its parameters for training.
#[derive(Clone, Debug, PartialEq)]
pub struct System {
    pub pipeline: HqsPipeline,
    pub classifier: Option<ToyClassifier>,
    pub train_lowlevel: bool,
    pub train_classifier: bool,
}

impl System {
    pub fn new(pipeline: HqsPipeline, classifier: Option<ToyClassifier>, trainable: &[Trainable]) -> Result<Self> {
        let train_classifier = trainable.contains(&Trainable::Classifier);
        if train_classifier && classifier.is_none() {
            return invalid("classifier marked trainable but none was given");
        }
        Ok(Self {
            pipeline,
            classifier,
            train_lowlevel: trainable.contains(&Trainable::Lowlevel),
            train_classifier,
        })
    }

    /// Records one example; returns the loss node, the trainable parameter
    /// leaves in [`Parameterized`] order, and the reconstruction node.
    pub fn record(&self, tape: &mut Tape, example: &Example, objective: Objective) -> Result<(Var, Vec<Var>, Var)> {
        let y = tape.constant(example.degraded.clone());
        let (out, pipe_params) = self.pipeline.record(tape, y, self.train_lowlevel)?;
        let mut params = Vec::new();
        if self.train_lowlevel {
            params.extend(pipe_params);
        }
        let loss = match objective {
            Objective::Reconstruction => {
                let clean = example
                    .clean
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("reconstruction objective needs clean images".into()))?;
                let target = tape.constant(clean.clone());
                tape.mse(out, target)?
            }
            Objective::Classification => {
                let clf = self
                    .classifier
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("classification objective needs a classifier".into()))?;
                let label = example
                    .label
                    .ok_or_else(|| Error::InvalidArgument("classification objective needs labels".into()))?;
                let (logits, clf_params) = clf.record(tape, out, self.train_classifier)?;
                if self.train_classifier {
                    params.extend(clf_params);
                }
                tape.softmax_ce(logits, label)?
            }
        };
        Ok((loss, params, out))
    }

    /// Loss, gradients and (when a clean image exists) output PSNR for one example.
    pub fn loss_and_grads(&self, example: &Example, objective: Objective) -> Result<(f64, ParamGrads, Option<f64>)> {
        let mut tape = Tape::new();
        let (loss, params, out) = self.record(&mut tape, example, objective)?;
        let value = tape.scalar(loss);
        let psnr = match &example.clean {
            Some(c) => Some(loss::psnr(tape.real(out), c)?),
            None => None,
        };
        let grads = tape.backward(loss)?;
        let sizes: Vec<usize> = self.params().iter().map(|p| p.len()).collect();
        let grads = ParamGrads {
            names: self.param_names(),
            grads: params
                .iter()
                .zip(sizes)
                .map(|(v, n)| grads.real(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]))
                .collect(),
        };
        Ok((value, grads, psnr))
    }
}

impl Parameterized for System {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.train_lowlevel {
            names.extend(self.pipeline.param_names().into_iter().map(|n| format!("lowlevel.{n}")));
        }
        if self.train_classifier {
            if let Some(c) = &self.classifier {
                names.extend(c.param_names().into_iter().map(|n| format!("classifier.{n}")));
            }
        }
        names
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        if self.train_lowlevel {
            out.extend(self.pipeline.params());
        }
        if self.train_classifier {
            if let Some(c) = &self.classifier {
                out.extend(c.params());
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if self.train_lowlevel {
            out.extend(self.pipeline.params_mut());
        }
        if self.train_classifier {
            if let Some(c) = &mut self.classifier {
                out.extend(c.params_mut());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean minibatch loss before the update.
    pub loss: f64,
    pub psnr: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
}

impl History {
    /// CSV with columns `step,loss,psnr,lr`; `psnr` is empty when not applicable.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,psnr,lr\n");
        for r in &self.steps {
            let psnr = r.psnr.map(|p| p.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, psnr, r.lr));
        }
        s
    }
}

/// Gradient sum of one minibatch, accumulated in index order.
fn batch_gradients(
    system: &System,
    examples: &[Example],
    batch: &[usize],
    objective: Objective,
) -> Result<(f64, ParamGrads, Option<f64>)> {
    let parts: Vec<(f64, ParamGrads, Option<f64>)> = batch
        .par_iter()
        .map(|&i| system.loss_and_grads(&examples[i], objective))
        .collect::<Result<_>>()?;
    let mut total = ParamGrads::zeros_like(system);
    let mut loss_sum = 0.0;
    let mut psnrs = Vec::new();
    for (l, g, p) in &parts {
        loss_sum += l;
        total.accumulate(g)?;
        psnrs.extend(p.iter().copied());
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    let psnr = (!psnrs.is_empty()).then(|| loss::mean_finite(&psnrs));
    Ok((loss_sum / n, total, psnr))
}

/// Runs minibatch RMSProp. Batches are drawn from a per-epoch shuffle keyed
/// by the seed; gradients within a batch are summed in index order, so the
/// parameter trajectory is reproducible bit for bit.
pub fn train(system: &mut System, examples: &[Example], options: &TrainOptions) -> Result<History> {
    if examples.is_empty() {
        return invalid("training set is empty");
    }
    if options.batch_size == 0 {
        return invalid("batch_size must be positive");
    }
    if system.params().is_empty() {
        return invalid("nothing to train: no parameter group is marked trainable");
    }
    let mut opt = RmsProp::new(options.optimizer, system)?;
    let total_steps = options
        .steps
        .unwrap_or(options.epochs * examples.len().div_ceil(options.batch_size));
    let rng = Rng::keyed(options.seed, 0x7368_7566);
    let mut history = History::default();
    let mut step = 0;
    let mut epoch = 0;
    while step < total_steps {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        rng.derive(epoch as u64).shuffle(&mut order);
        for batch in order.chunks(options.batch_size) {
            if step >= total_steps {
                break;
            }
            let (loss, grads, psnr) = batch_gradients(system, examples, batch, options.objective)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged at step {step} (epoch {epoch}): loss {loss}"
                )));
            }
            history.steps.push(StepRecord {
                step,
                epoch,
                loss,
                psnr,
                lr: opt.lr(),
            });
            opt.step(system, &grads)?;
            step += 1;
        }
        opt.end_epoch();
        epoch += 1;
        log::debug!("epoch {epoch} done after {step} steps");
    }
    Ok(history)
}

/// Mean loss of `system` over `examples` under `objective`, without training.
pub fn mean_loss(system: &System, examples: &[Example], objective: Objective) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|e| {
            let mut tape = Tape::new();
            let (l, _, _) = system.record(&mut tape, e, objective)?;
            Ok(tape.scalar(l))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Mean PSNR (exact matches excluded) of `pipeline` outputs, or of the inputs when `None`.
pub fn mean_psnr(pipeline: Option<&HqsPipeline>, inputs: &[ImageTensor], clean: &[ImageTensor]) -> Result<f64> {
    if inputs.len() != clean.len() {
        return invalid("input and reference counts differ");
    }
    let values: Vec<f64> = inputs
        .par_iter()
        .zip(clean)
        .map(|(y, x)| {
            let out = match pipeline {
                Some(p) => p.run(y)?,
                None => y.clone(),
            };
            loss::psnr(&out, x)
        })
        .collect::<Result<_>>()?;
    Ok(loss::mean_finite(&values))
}
