//! Multi-head CNN: shared encoder, main classifier head, rotation head.
//!
//! ```text
//! image -> [conv k x k / relu / maxpool 2] x L -> flatten -> dense / relu -> features
//! features -> dense -> main logits (K)
//! features -> dense -> pretext logits (4)
//! ```
//!
//! Parameters live in one flat list tagged with the part of the network
//! that owns them. To run a forward pass, [`MultiHeadNet::bind`] copies
//! them onto a [`Tape`] as leaves.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::NUM_ROTATIONS;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SSDA1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("expected {expected} input, got shape {got:?}")]
    InputShape { expected: String, got: Vec<usize> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of each conv block.
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub padding: usize,
    pub pool: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            conv_channels: vec![16, 32],
            kernel_size: 3,
            padding: 0,
            pool: 2,
            feature_dim: 64,
            n_classes: 5,
        }
    }
}

impl ArchSpec {
    pub fn with_classes(n_classes: usize, image_size: usize) -> Self {
        Self {
            n_classes,
            image_size,
            ..Self::default()
        }
    }

    /// Spatial extent after each conv block, or an error when the image
    /// collapses.
    fn spatial_sizes(&self) -> Result<Vec<usize>, NetError> {
        let mut s = self.image_size;
        let mut out = Vec::new();
        for (i, _) in self.conv_channels.iter().enumerate() {
            let conv = (s + 2 * self.padding)
                .checked_sub(self.kernel_size)
                .map(|v| v + 1)
                .filter(|&v| v >= self.pool)
                .ok_or_else(|| NetError::InvalidArch(format!("image collapses at conv block {i} (size {s})")))?;
            s = conv / self.pool;
            out.push(s);
        }
        Ok(out)
    }

    pub fn flat_dim(&self) -> Result<usize, NetError> {
        let sizes = self.spatial_sizes()?;
        let (c, s) = match (self.conv_channels.last(), sizes.last()) {
            (Some(&c), Some(&s)) => (c, s),
            _ => (self.in_channels, self.image_size),
        };
        Ok(c * s * s)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidArch(m.to_string()));
        if self.in_channels == 0 || self.feature_dim == 0 || self.kernel_size == 0 || self.pool == 0 {
            return bad("zero-sized layer");
        }
        if self.conv_channels.iter().any(|&c| c == 0) {
            return bad("conv block with zero channels");
        }
        if self.n_classes < 2 {
            return bad("need at least two classes");
        }
        self.flat_dim().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Main,
    Pretext,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Tape handles for every parameter, in [`MultiHeadNet::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadNet {
    arch: ArchSpec,
    params: Vec<Param>,
}

impl MultiHeadNet {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(seed: u64, arch: ArchSpec) -> Result<Self, NetError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut he = |shape: &[usize], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        let mut push = |name: String, group, value| params.push(Param { name, group, value });

        let k = arch.kernel_size;
        let mut c_in = arch.in_channels;
        for (i, &c_out) in arch.conv_channels.iter().enumerate() {
            push(format!("encoder.conv{i}.weight"), ParamGroup::Encoder, he(&[c_out, c_in, k, k], c_in * k * k));
            push(format!("encoder.conv{i}.bias"), ParamGroup::Encoder, Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        let flat = arch.flat_dim()?;
        let f = arch.feature_dim;
        push("encoder.fc.weight".into(), ParamGroup::Encoder, he(&[flat, f], flat));
        push("encoder.fc.bias".into(), ParamGroup::Encoder, Tensor::zeros(&[f]));
        push("main.weight".into(), ParamGroup::Main, he(&[f, arch.n_classes], f));
        push("main.bias".into(), ParamGroup::Main, Tensor::zeros(&[arch.n_classes]));
        push("pretext.weight".into(), ParamGroup::Pretext, he(&[f, NUM_ROTATIONS], f));
        push("pretext.bias".into(), ParamGroup::Pretext, Tensor::zeros(&[NUM_ROTATIONS]));
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    fn index_of(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
    }

    /// Records every parameter on `tape`; with `trainable` they become
    /// gradient-collecting leaves, otherwise constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }

    /// Encoder forward: `n x C x H x W` images to `n x feature_dim` features.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var, NetError> {
        let a = &self.arch;
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != a.in_channels || shape[2] != a.image_size || shape[3] != a.image_size {
            return Err(NetError::InputShape {
                expected: format!("n x {} x {} x {}", a.in_channels, a.image_size, a.image_size),
                got: shape,
            });
        }
        let n = shape[0];
        let var = |name: &str| bound.vars[self.index_of(name)];
        let mut h = images;
        for i in 0..a.conv_channels.len() {
            h = tape.conv2d(h, var(&format!("encoder.conv{i}.weight")), 1, a.padding)?;
            h = tape.add_channel_bias(h, var(&format!("encoder.conv{i}.bias")))?;
            h = tape.relu(h)?;
            h = tape.max_pool2d(h, a.pool)?;
        }
        let flat = tape.reshape(h, &[n, a.flat_dim()?])?;
        let z = tape.matmul(flat, var("encoder.fc.weight"))?;
        let z = tape.add_row_bias(z, var("encoder.fc.bias"))?;
        Ok(tape.relu(z)?)
    }

    fn head(&self, tape: &mut Tape, bound: &Bound, features: Var, prefix: &str) -> Result<Var, NetError> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[1] != self.arch.feature_dim {
            return Err(NetError::InputShape {
                expected: format!("n x {}", self.arch.feature_dim),
                got: shape.to_vec(),
            });
        }
        let w = bound.vars[self.index_of(&format!("{prefix}.weight"))];
        let b = bound.vars[self.index_of(&format!("{prefix}.bias"))];
        let z = tape.matmul(features, w)?;
        Ok(tape.add_row_bias(z, b)?)
    }

    /// Class logits, `n x K`.
    pub fn main_logits(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var, NetError> {
        self.head(tape, bound, features, "main")
    }

    /// Rotation logits, `n x 4`.
    pub fn pretext_logits(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var, NetError> {
        self.head(tape, bound, features, "pretext")
    }

    /// Encoder features for a set of images, without recording gradients.
    pub fn features(&self, images: &[&Tensor]) -> Result<Tensor, NetError> {
        let mut rows = Vec::with_capacity(images.len() * self.arch.feature_dim);
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let x = tape.constant(stack_images(chunk)?);
            let f = self.encode(&mut tape, &bound, x)?;
            rows.extend_from_slice(tape.value(f).data());
        }
        Ok(Tensor::new(vec![images.len(), self.arch.feature_dim], rows)?)
    }

    // ----- checkpoints -------------------------------------------------

    /// `SSDA1`, then per parameter: name length (u32 LE), name bytes,
    /// rank (u32 LE), extents (u64 LE each), values (f64 LE).
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), NetError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut bytes = Vec::new();
        self.write_checkpoint(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Rebuilds a network from checkpoint bytes. The architecture is
    /// inferred from parameter shapes; `image_size` disambiguates padding.
    pub fn from_checkpoint<R: Read>(r: R, image_size: usize) -> Result<Self, NetError> {
        let named = read_checkpoint(r)?;
        let arch = infer_arch(&named, image_size)?;
        let template = Self::init(0, arch.clone())?;
        if named.len() != template.params.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                named.len()
            )));
        }
        let mut params = template.params;
        for (p, (name, value)) in params.iter_mut().zip(named) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(NetError::Checkpoint(format!(
                    "parameter {name} {:?} does not fit slot {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(Self { arch, params })
    }

    pub fn load(path: &Path, image_size: usize) -> Result<Self, NetError> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint(&bytes[..], image_size)
    }
}

const EVAL_CHUNK: usize = 200;

/// Stacks equally shaped `C x H x W` images into `n x C x H x W`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = images.first().ok_or(TensorError::InvalidShape(vec![0]))?;
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "stack_images",
                lhs: first.shape().to_vec(),
                rhs: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// Parses checkpoint bytes into `(name, tensor)` pairs.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, NetError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let truncated = || NetError::Checkpoint("truncated file".into());
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(NetError::Checkpoint("missing SSDA1 header".into()));
    }
    let mut at = CHECKPOINT_MAGIC.len();
    let mut take = |n: usize| -> Result<&[u8], NetError> {
        let s = bytes.get(at..at + n).ok_or_else(truncated)?;
        at += n;
        Ok(s)
    };
    let mut out = Vec::new();
    loop {
        let head = match take(4) {
            Ok(h) => u32::from_le_bytes(h.try_into().unwrap()) as usize,
            Err(_) => break,
        };
        let name = String::from_utf8(take(head)?.to_vec()).map_err(|_| NetError::Checkpoint("non-UTF-8 name".into()))?;
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(8 * n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if at != bytes.len() {
        return Err(truncated());
    }
    Ok(out)
}

fn infer_arch(named: &[(String, Tensor)], image_size: usize) -> Result<ArchSpec, NetError> {
    let shape_of = |name: &str| {
        named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape().to_vec())
            .ok_or_else(|| NetError::Checkpoint(format!("missing parameter {name}")))
    };
    let mut conv_channels = Vec::new();
    let (mut in_channels, mut kernel_size) = (0, 0);
    while let Ok(s) = shape_of(&format!("encoder.conv{}.weight", conv_channels.len())) {
        if s.len() != 4 {
            return Err(NetError::Checkpoint(format!("conv weight of rank {}", s.len())));
        }
        if conv_channels.is_empty() {
            in_channels = s[1];
            kernel_size = s[2];
        }
        conv_channels.push(s[0]);
    }
    if conv_channels.is_empty() {
        return Err(NetError::Checkpoint("no conv layers".into()));
    }
    let fc = shape_of("encoder.fc.weight")?;
    let main = shape_of("main.weight")?;
    if fc.len() != 2 || main.len() != 2 {
        return Err(NetError::Checkpoint("dense weights must be 2-D".into()));
    }
    for padding in 0..=kernel_size / 2 {
        let arch = ArchSpec {
            in_channels,
            image_size,
            conv_channels: conv_channels.clone(),
            kernel_size,
            padding,
            pool: 2,
            feature_dim: fc[1],
            n_classes: main[1],
        };
        if arch.flat_dim().ok() == Some(fc[0]) {
            return Ok(arch);
        }
    }
    Err(NetError::Checkpoint(format!(
        "no padding reproduces flattened size {} for {image_size}px images",
        fc[0]
    )))
}
