//! Directory and config loading shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hqsnet::imaging::{simulate_batch, NoiseParams, Psf};
use hqsnet::io::{self, LABELS_FILE};
use hqsnet::tensor::ImageTensor;
use hqsnet::toy::ToyParams;
use hqsnet::train::{Example, TrainConfig};

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Written beside `simulate` outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub noise: NoiseParams,
    pub psf: Option<String>,
    pub seed: u64,
    /// Output files in simulation order; file `i` used random stream `i`.
    pub files: Vec<String>,
}

/// Images of a directory with optional labels.
pub struct ImageSet {
    pub names: Vec<String>,
    pub images: Vec<ImageTensor>,
    pub labels: Option<Vec<usize>>,
    pub params: Option<ToyParams>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pfm" | "png")
    )
}

/// Reads a directory: the files listed in `labels.csv` if present, otherwise
/// every `.pfm`/`.png` file in name order.
pub fn read_image_dir(dir: &Path) -> Result<ImageSet> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let labels_path = dir.join(LABELS_FILE);
    let (names, labels) = if labels_path.exists() {
        let entries = io::read_labels(&labels_path)?;
        let (n, l): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        (n, Some(l))
    } else {
        let mut n: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .filter_map(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        n.sort();
        (n, None)
    };
    if names.is_empty() {
        bail!("no images found in {}", dir.display());
    }
    let images = names
        .iter()
        .map(|n| io::read_image(&dir.join(n)))
        .collect::<hqsnet::Result<Vec<_>>>()?;
    let params_path = dir.join(io::PARAMS_FILE);
    let params = if params_path.exists() {
        #[derive(Deserialize)]
        struct Meta {
            params: ToyParams,
        }
        Some(io::read_json::<Meta>(&params_path)?.params)
    } else {
        None
    };
    Ok(ImageSet {
        names,
        images,
        labels,
        params,
    })
}

impl ImageSet {
    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| anyhow::anyhow!("dataset has no {LABELS_FILE}"))
    }

    pub fn classes(&self) -> Result<usize> {
        match &self.params {
            Some(p) => Ok(p.classes),
            None => Ok(self.labels()?.iter().max().map_or(0, |m| m + 1)),
        }
    }

    pub fn check_uniform_shape(&self) -> Result<(usize, usize, usize)> {
        let shape = self.images[0].shape();
        if let Some(i) = self.images.iter().position(|x| x.shape() != shape) {
            bail!("{} has shape {:?}, expected {shape:?}", self.names[i], self.images[i].shape());
        }
        Ok(shape)
    }
}

/// `none` or a PFM path.
pub fn load_psf_arg(arg: &str) -> Result<Option<Psf>> {
    if arg == "none" {
        return Ok(None);
    }
    let (psf, _) = io::load_psf(Path::new(arg))?;
    Ok(Some(psf))
}

/// Loads and validates a training config; `psf_path` is resolved against the config's directory.
pub fn load_config(path: &Path) -> Result<(TrainConfig, Option<Psf>)> {
    let cfg: TrainConfig = io::read_json(path)?;
    cfg.validate()?;
    let psf = match &cfg.psf_path {
        Some(p) => {
            let full = path.parent().unwrap_or(Path::new(".")).join(p);
            Some(io::load_psf(&full).with_context(|| format!("loading PSF for {}", path.display()))?.0)
        }
        None => None,
    };
    Ok((cfg, psf))
}

/// Degrades every clean image with the config's noise and PSF.
pub fn degraded_examples(set: &ImageSet, cfg: &TrainConfig, psf: Option<&Psf>, with_clean: bool) -> Result<Vec<Example>> {
    let degraded = simulate_batch(&set.images, psf, &cfg.noise, cfg.seed)?;
    Ok(degraded
        .into_iter()
        .enumerate()
        .map(|(i, y)| Example {
            degraded: y,
            clean: with_clean.then(|| set.images[i].clone()),
            label: set.labels.as_ref().map(|l| l[i]),
        })
        .collect())
}

/// The clean counterpart of a degraded directory: `explicit`, or the source recorded by `simulate`.
pub fn clean_dir_for(data: &Path, explicit: Option<&Path>) -> Result<Option<PathBuf>> {
    if let Some(p) = explicit {
        return Ok(Some(p.to_path_buf()));
    }
    let prov = data.join(PROVENANCE_FILE);
    if !prov.exists() {
        return Ok(None);
    }
    let p: Provenance = io::read_json(&prov)?;
    let src = PathBuf::from(&p.source);
    Ok(src.is_dir().then_some(src))
}
