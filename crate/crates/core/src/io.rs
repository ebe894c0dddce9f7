//! File formats: PFM images and PSFs, 16-bit PNG export, JSON documents,
//! toy-dataset directories. Every writer goes through a temp file and a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::conv::Kernel;
use crate::error::{Error, Result};
use crate::hqs::HqsPipeline;
use crate::imaging::{NoiseParams, NoiseTable, Psf};
use crate::tensor::ImageTensor;
use crate::toy::{ToyClassifier, ToyDataset, ToyParams};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Relative deviation from unit sum above which PSF renormalization is reported.
pub const RENORMALIZE_WARN: f64 = 1e-6;

fn parse_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}: {msg}", path.display()))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp = PathBuf::from(dir);
    tmp.push(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Encodes a 1- or 3-channel image as little-endian PFM (rows stored bottom to top).
pub fn encode_pfm(img: &ImageTensor) -> Result<Vec<u8>> {
    let (h, w, c) = img.shape();
    let magic = match c {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::InvalidArgument(format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * c * 4);
    for i in (0..h).rev() {
        for j in 0..w {
            for k in 0..c {
                out.extend_from_slice(&(img.get(i, j, k) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok().filter(|s| !s.is_empty())
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<ImageTensor> {
    let mut pos = 0;
    let c = match next_token(bytes, &mut pos) {
        Some("Pf") => 1,
        Some("PF") => 3,
        other => return Err(parse_err(path, format!("bad PFM magic {other:?}"))),
    };
    let mut num = |what: &str| -> Result<&str> {
        next_token(bytes, &mut pos).ok_or_else(|| parse_err(path, format!("missing {what}")))
    };
    let w: usize = num("width")?.parse().map_err(|e| parse_err(path, e))?;
    let h: usize = num("height")?.parse().map_err(|e| parse_err(path, e))?;
    let scale: f64 = num("scale")?.parse().map_err(|e| parse_err(path, e))?;
    if w == 0 || h == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(parse_err(path, "invalid PFM header"));
    }
    pos += 1;
    let need = w * h * c * 4;
    if bytes.len() < pos + need {
        return Err(parse_err(path, format!("truncated PFM data: need {need} bytes")));
    }
    let little = scale < 0.0;
    let mut img = ImageTensor::zeros(h, w, c);
    let mut off = pos;
    for i in (0..h).rev() {
        for j in 0..w {
            for k in 0..c {
                let b: [u8; 4] = bytes[off..off + 4].try_into().expect("4 bytes");
                let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
                img.set(i, j, k, v as f64);
                off += 4;
            }
        }
    }
    img.ensure_finite("PFM data").map_err(|e| parse_err(path, e))?;
    Ok(img)
}

pub fn write_pfm(path: &Path, img: &ImageTensor) -> Result<()> {
    write_atomic(path, &encode_pfm(img)?)
}

pub fn read_pfm(path: &Path) -> Result<ImageTensor> {
    decode_pfm(&fs::read(path)?, path)
}

/// Reads a PSF from a single-channel PFM and normalizes it to unit sum.
/// The flag reports whether the stored sum was off by more than [`RENORMALIZE_WARN`].
pub fn load_psf(path: &Path) -> Result<(Psf, bool)> {
    let img = read_pfm(path)?;
    if img.channels() != 1 {
        return Err(parse_err(path, "PSF file must be single-channel (Pf)"));
    }
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let kernel = Kernel::new(img.height(), img.width(), img.into_data())?;
    let (psf, sum) = Psf::normalized(kernel, label).map_err(|e| parse_err(path, e))?;
    let renormalized = (sum - 1.0).abs() > RENORMALIZE_WARN;
    if renormalized {
        log::warn!("{}: PSF summed to {sum}; renormalized to 1", path.display());
    }
    Ok((psf, renormalized))
}

pub fn save_psf(path: &Path, psf: &Psf) -> Result<()> {
    let k = psf.kernel();
    write_pfm(path, &ImageTensor::new(k.height(), k.width(), 1, k.data().to_vec())?)
}

/// Exports a 16-bit linear PNG: values are clamped to [0, 1], then rounded.
pub fn write_png16(path: &Path, img: &ImageTensor) -> Result<()> {
    use image::{ImageBuffer, Luma, Rgb};
    let (h, w, c) = img.shape();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let mut bytes = Vec::new();
    let cursor = &mut std::io::Cursor::new(&mut bytes);
    let res = match c {
        1 => ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
            Luma([q(img.get(y as usize, x as usize, 0))])
        })
        .write_to(cursor, image::ImageFormat::Png),
        3 => ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
            let (i, j) = (y as usize, x as usize);
            Rgb([q(img.get(i, j, 0)), q(img.get(i, j, 1)), q(img.get(i, j, 2))])
        })
        .write_to(cursor, image::ImageFormat::Png),
        _ => return Err(Error::InvalidArgument(format!("PNG export supports 1 or 3 channels, not {c}"))),
    };
    res.map_err(|e| Error::InvalidArgument(format!("PNG encoding failed: {e}")))?;
    write_atomic(path, &bytes)
}

/// Reads a grayscale or RGB PNG (8 or 16 bit) into [0, 1].
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let dynimg = image::open(path).map_err(|e| parse_err(path, e))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    if dynimg.color().has_color() {
        let rgb = dynimg.to_rgb16();
        Ok(ImageTensor::from_fn(h, w, 3, |i, j, k| rgb.get_pixel(j as u32, i as u32)[k] as f64 / 65535.0))
    } else {
        let l = dynimg.to_luma16();
        Ok(ImageTensor::from_fn(h, w, 1, |i, j, _| l.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0))
    }
}

/// Reads `.pfm` or `.png` by extension.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pfm") => read_pfm(path),
        Some("png") => read_png(path),
        _ => Err(parse_err(path, "unsupported image extension (expected .pfm or .png)")),
    }
}

/// Writes `.pfm` or 16-bit `.png` by extension.
pub fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pfm") => write_pfm(path, img),
        Some("png") => write_png16(path, img),
        _ => Err(parse_err(path, "unsupported image extension (expected .pfm or .png)")),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e))
}

pub fn load_noise(path: &Path) -> Result<NoiseParams> {
    let n: NoiseParams = read_json(path)?;
    n.validate().map_err(|e| parse_err(path, e))?;
    Ok(n)
}

pub fn save_noise(path: &Path, noise: &NoiseParams) -> Result<()> {
    write_json(path, noise)
}

pub fn load_noise_table(path: &Path) -> Result<NoiseTable> {
    let t: NoiseTable = read_json(path)?;
    for l in &t.levels {
        l.params().validate().map_err(|e| parse_err(path, e))?;
    }
    Ok(t)
}

/// Model checkpoint: a reconstruction unit, a classifier, or both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(default)]
    pub pipeline: Option<HqsPipeline>,
    #[serde(default)]
    pub classifier: Option<ToyClassifier>,
}

impl Checkpoint {
    pub fn new(pipeline: Option<HqsPipeline>, classifier: Option<ToyClassifier>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            pipeline,
            classifier,
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_json(path, ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c: Checkpoint = read_json(path)?;
    if c.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(parse_err(
            path,
            format!("unsupported checkpoint format_version {}", c.format_version),
        ));
    }
    if let Some(p) = &c.pipeline {
        for s in &p.stages {
            if s.filters.as_tensor().data().iter().any(|v| !v.is_finite()) {
                return Err(parse_err(path, "non-finite filter value"));
            }
        }
    }
    Ok(c)
}

pub const LABELS_FILE: &str = "labels.csv";
pub const PARAMS_FILE: &str = "params.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetMeta {
    params: ToyParams,
    seed: u64,
}

/// Writes `img_00000.pfm ...`, `labels.csv` (filename,label) and `params.json`.
pub fn export_dataset(dir: &Path, data: &ToyDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("filename,label\n");
    for (i, (img, label)) in data.images.iter().zip(&data.labels).enumerate() {
        let name = format!("img_{i:05}.pfm");
        write_pfm(&dir.join(&name), img)?;
        csv.push_str(&format!("{name},{label}\n"));
    }
    write_json(
        &dir.join(PARAMS_FILE),
        &DatasetMeta {
            params: data.params.clone(),
            seed: data.seed,
        },
    )?;
    write_atomic(&dir.join(LABELS_FILE), csv.as_bytes())
}

#[derive(Deserialize)]
struct LabelRow {
    filename: String,
    label: usize,
}

/// Parses a `filename,label` CSV with a header row.
pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    read_csv_rows(path, |r: LabelRow| (r.filename, r.label))
}

/// Deserializes every row of a headed CSV file.
pub fn read_csv_rows<R: DeserializeOwned, T>(path: &Path, f: impl Fn(R) -> T) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| parse_err(path, e))?;
    reader
        .deserialize()
        .map(|row| row.map(&f).map_err(|e| parse_err(path, e)))
        .collect()
}

/// Loads a dataset directory written by [`export_dataset`] (or any directory
/// of images with a `labels.csv`). Returns the file names alongside.
pub fn import_dataset(dir: &Path) -> Result<(ToyDataset, Vec<String>)> {
    let meta: DatasetMeta = read_json(&dir.join(PARAMS_FILE))?;
    let entries = read_labels(&dir.join(LABELS_FILE))?;
    let mut images = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    let mut names = Vec::with_capacity(entries.len());
    for (name, label) in entries {
        if label >= meta.params.classes {
            return Err(parse_err(&dir.join(LABELS_FILE), format!("label {label} out of range")));
        }
        images.push(read_image(&dir.join(&name))?);
        labels.push(label);
        names.push(name);
    }
    Ok((
        ToyDataset {
            params: meta.params,
            seed: meta.seed,
            images,
            labels,
        },
        names,
    ))
}
