//! IDX binary files and dataset directories.
//!
//! Image files start with the big-endian magic `0x00000803` followed by
//! `n`, `h`, `w` as big-endian `u32` and `n*h*w` unsigned bytes. Grayscale
//! pixels are scaled by 1/255 and replicated to three channels. Colour
//! datasets use the four-dimensional variant `0x00000804` with extents
//! `n`, `c`, `h`, `w` and `c` equal to 1 or 3. Label files use
//! `0x00000801`, a count `n` and `n` bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{DatasetSpec, DomainShift, Domain, Example, ShiftedShapes};
use crate::autodiff::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const COLOR_IMAGES_MAGIC: u32 = 0x0000_0804;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const SOURCE_IMAGES: &str = "source_images.idx";
pub const SOURCE_LABELS: &str = "source_labels.idx";
pub const TARGET_IMAGES: &str = "target_images.idx";
pub const TARGET_LABELS: &str = "target_labels.idx";
pub const META_FILE: &str = "meta.txt";

/// Dataset files in a fixed order (used for checksums).
pub const DATASET_FILES: [&str; 4] = [SOURCE_IMAGES, SOURCE_LABELS, TARGET_IMAGES, TARGET_LABELS];

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated file: need {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} trailing bytes after declared data")]
    Trailing { extra: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("unsupported image layout: {0}")]
    Layout(String),
    #[error("metadata: {0}")]
    Meta(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IdxError + '_ {
    move |source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_len(bytes: &[u8], expected: usize) -> Result<(), IdxError> {
    match bytes.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(IdxError::Truncated {
            expected,
            actual: bytes.len(),
        }),
        std::cmp::Ordering::Greater => Err(IdxError::Trailing {
            extra: bytes.len() - expected,
        }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

/// Decodes an image file into `3 x h x w` tensors.
pub fn parse_images(bytes: &[u8]) -> Result<Vec<Tensor>, IdxError> {
    let magic = read_u32(bytes, 0)?;
    let (n, c, h, w, header) = match magic {
        IMAGES_MAGIC => (read_u32(bytes, 4)?, 1, read_u32(bytes, 8)?, read_u32(bytes, 12)?, 16),
        COLOR_IMAGES_MAGIC => (
            read_u32(bytes, 4)?,
            read_u32(bytes, 8)?,
            read_u32(bytes, 12)?,
            read_u32(bytes, 16)?,
            20,
        ),
        found => {
            return Err(IdxError::BadMagic {
                found,
                expected: IMAGES_MAGIC,
            })
        }
    };
    let (n, c, h, w) = (n as usize, c as usize, h as usize, w as usize);
    if c != 1 && c != 3 {
        return Err(IdxError::Layout(format!("{c} channels")));
    }
    if h == 0 || w == 0 {
        return Err(IdxError::Layout(format!("{h}x{w} images")));
    }
    let per_image = c * h * w;
    check_len(bytes, header + n * per_image)?;
    let plane = h * w;
    Ok(bytes[header..]
        .chunks_exact(per_image)
        .map(|px| {
            let mut data = Vec::with_capacity(3 * plane);
            for ch in 0..3 {
                let src = if c == 1 { &px[..plane] } else { &px[ch * plane..(ch + 1) * plane] };
                data.extend(src.iter().map(|&b| f64::from(b) / 255.0));
            }
            Tensor::from_parts(vec![3, h, w], data)
        })
        .collect())
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    check_len(bytes, 8 + n)?;
    Ok(bytes[8..].to_vec())
}

/// Encodes `c x h x w` images (all the same shape) with values in `[0, 1]`.
/// Single-channel images use the three-dimensional layout.
pub fn encode_images(images: &[Tensor]) -> Result<Vec<u8>, IdxError> {
    let shape = match images.first() {
        Some(img) => img.shape().to_vec(),
        None => vec![1, 1, 1],
    };
    if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
        return Err(IdxError::Layout(format!("image shape {shape:?}")));
    }
    let mut out = Vec::with_capacity(20 + images.len() * shape.iter().product::<usize>());
    let n = images.len() as u32;
    if shape[0] == 1 {
        out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        for d in [n, shape[1] as u32, shape[2] as u32] {
            out.extend_from_slice(&d.to_be_bytes());
        }
    } else {
        out.extend_from_slice(&COLOR_IMAGES_MAGIC.to_be_bytes());
        for d in [n, 3, shape[1] as u32, shape[2] as u32] {
            out.extend_from_slice(&d.to_be_bytes());
        }
    }
    for img in images {
        if img.shape() != &shape[..] {
            return Err(IdxError::Layout(format!("mixed shapes {:?} and {shape:?}", img.shape())));
        }
        out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn read_images(path: &Path) -> Result<Vec<Tensor>, IdxError> {
    parse_images(&fs::read(path).map_err(io_err(path))?)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    parse_labels(&fs::read(path).map_err(io_err(path))?)
}

/// Loads a labeled image set.
pub fn load_idx(images_path: &Path, labels_path: &Path, domain: Domain) -> Result<Vec<Example>, IdxError> {
    let images = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    Ok(images
        .into_iter()
        .zip(labels)
        .map(|(image, label)| Example {
            image,
            label: Some(label as usize),
            domain,
            rot_label: None,
        })
        .collect())
}

fn labels_of(examples: &[Example]) -> Result<Vec<u8>, IdxError> {
    examples
        .iter()
        .map(|e| {
            e.label
                .and_then(|l| u8::try_from(l).ok())
                .ok_or_else(|| IdxError::Layout("example without a byte-sized label".into()))
        })
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IdxError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes the four IDX files plus `meta.txt` into `dir`. Target labels
/// come from `target_eval`.
pub fn save_dataset(dir: &Path, data: &ShiftedShapes, spec: &DatasetSpec) -> Result<(), IdxError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let src_images: Vec<Tensor> = data.source.iter().map(|e| e.image.clone()).collect();
    let tgt_images: Vec<Tensor> = data.target_eval.iter().map(|e| e.image.clone()).collect();
    write(&dir.join(SOURCE_IMAGES), &encode_images(&src_images)?)?;
    write(&dir.join(SOURCE_LABELS), &encode_labels(&labels_of(&data.source)?))?;
    write(&dir.join(TARGET_IMAGES), &encode_images(&tgt_images)?)?;
    write(&dir.join(TARGET_LABELS), &encode_labels(&labels_of(&data.target_eval)?))?;
    write(&dir.join(META_FILE), format_meta(spec).as_bytes())
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(ShiftedShapes, DatasetSpec), IdxError> {
    let meta_path = dir.join(META_FILE);
    let meta = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let spec = parse_meta(&meta)?;
    let source = load_idx(&dir.join(SOURCE_IMAGES), &dir.join(SOURCE_LABELS), Domain::Source)?;
    let target_eval = load_idx(&dir.join(TARGET_IMAGES), &dir.join(TARGET_LABELS), Domain::Target)?;
    if source.len() != spec.n_source || target_eval.len() != spec.n_target {
        return Err(IdxError::Meta(format!(
            "metadata declares {}/{} examples, files hold {}/{}",
            spec.n_source,
            spec.n_target,
            source.len(),
            target_eval.len()
        )));
    }
    let target = target_eval
        .iter()
        .map(|e| Example {
            label: None,
            ..e.clone()
        })
        .collect();
    Ok((
        ShiftedShapes {
            source,
            target,
            target_eval,
        },
        spec,
    ))
}

pub fn format_meta(spec: &DatasetSpec) -> String {
    let s = &spec.domain_shift;
    format!(
        "seed={}\nclasses={}\nn_source={}\nn_target={}\nimage_size={}\nbackground_hue_shift={}\nnoise_sigma={}\ntexture_id={}\n",
        spec.seed,
        spec.n_classes,
        spec.n_source,
        spec.n_target,
        spec.image_size,
        s.background_hue_shift,
        s.noise_sigma,
        s.texture_id
    )
}

pub fn parse_meta(text: &str) -> Result<DatasetSpec, IdxError> {
    let mut kv = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| IdxError::Meta(format!("not a key=value line: {line:?}")))?;
        kv.insert(k.trim(), v.trim());
    }
    fn get<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<T, IdxError> {
        let raw = kv.get(key).ok_or_else(|| IdxError::Meta(format!("missing key {key}")))?;
        raw.parse()
            .map_err(|_| IdxError::Meta(format!("bad value for {key}: {raw:?}")))
    }
    Ok(DatasetSpec {
        n_source: get(&kv, "n_source")?,
        n_target: get(&kv, "n_target")?,
        n_classes: get(&kv, "classes")?,
        image_size: get(&kv, "image_size")?,
        domain_shift: DomainShift {
            background_hue_shift: get(&kv, "background_hue_shift")?,
            noise_sigma: get(&kv, "noise_sigma")?,
            texture_id: get(&kv, "texture_id")?,
        },
        seed: get(&kv, "seed")?,
    })
}
