use rand::Rng;

use super::{DataError, Domain, Example};
use crate::autodiff::Tensor;

pub const NUM_ROTATIONS: usize = 4;

/// Rotates an `H x W` or `C x H x W` image counter-clockwise by
/// `quarter_turns * 90` degrees. Pure index permutation, every channel
/// moved the same way.
pub fn rotate_image(image: &Tensor, quarter_turns: u8) -> Result<Tensor, DataError> {
    if quarter_turns as usize >= NUM_ROTATIONS {
        return Err(DataError::RotationOutOfRange(quarter_turns));
    }
    let shape = image.shape();
    let (h, w) = match shape.len() {
        2 => (shape[0], shape[1]),
        3 => (shape[1], shape[2]),
        _ => return Err(DataError::ImageShape(shape.to_vec())),
    };
    if h != w {
        return Err(DataError::NotSquare { h, w });
    }
    if quarter_turns == 0 {
        return Ok(image.clone());
    }
    let n = h;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for (plane_in, plane_out) in src.chunks_exact(n * n).zip(out.chunks_exact_mut(n * n)) {
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = match quarter_turns {
                    1 => (j, n - 1 - i),
                    2 => (n - 1 - i, n - 1 - j),
                    _ => (n - 1 - j, i),
                };
                plane_out[i * n + j] = plane_in[si * n + sj];
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Originals and their rotated partners; `rotated[i]` is
/// `rotate_image(originals[i], rotated[i].rot_label)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentedBatch {
    pub originals: Vec<Example>,
    pub rotated: Vec<Example>,
}

/// One uniformly drawn rotation per target example.
pub fn augment_batch<R: Rng + ?Sized>(batch: &[Example], rng: &mut R) -> Result<AugmentedBatch, DataError> {
    if let Some(index) = batch.iter().position(|e| e.domain != Domain::Target) {
        return Err(DataError::WrongDomain {
            index,
            expected: Domain::Target,
        });
    }
    let mut rotated = Vec::with_capacity(batch.len());
    for ex in batch {
        let turns = rng.gen_range(0..NUM_ROTATIONS as u8);
        rotated.push(Example {
            image: rotate_image(&ex.image, turns)?,
            label: ex.label,
            domain: ex.domain,
            rot_label: Some(turns),
        });
    }
    Ok(AugmentedBatch {
        originals: batch.to_vec(),
        rotated,
    })
}
