use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::{DataError, Result, Sample};

/// Training crop with a binary label for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `[1, patch...]`
    pub image: Tensor<f32>,
    /// `[1, patch...]` with values in {0, 1}.
    pub label: Tensor<f32>,
    /// Offset of the crop inside the volume.
    pub origin: Vec<usize>,
    /// Voxel the crop was drawn around, in volume coordinates.
    pub center: Vec<usize>,
    pub foreground_center: bool,
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = i % shape[a];
        i /= shape[a];
    }
    idx
}

/// Draws `count` crops of `patch_size`. Each crop is centered on a voxel of
/// `class_id` with probability `pos_ratio`, otherwise on a voxel of any other
/// label. Centers whose crop fits without clamping are preferred; when none
/// exist the crop is shifted back inside the volume.
pub fn sample_patches(
    sample: &Sample,
    patch_size: &[usize],
    count: usize,
    pos_ratio: f64,
    class_id: u8,
    seed: u64,
) -> Result<Vec<Patch>> {
    let vol = sample.spatial_shape().to_vec();
    if patch_size.len() != vol.len() || patch_size.iter().zip(&vol).any(|(p, v)| p > v || *p == 0) {
        return Err(DataError::PatchTooLarge {
            patch: patch_size.to_vec(),
            volume: vol,
        });
    }
    if !(0.0..=1.0).contains(&pos_ratio) {
        return Err(DataError::InvalidConfig(format!("pos_ratio {pos_ratio} outside [0, 1]")));
    }

    let fits = |idx: &[usize]| {
        idx.iter()
            .zip(patch_size)
            .zip(&vol)
            .all(|((&c, &p), &v)| c >= p / 2 && c - p / 2 + p <= v)
    };
    let mut fg = (Vec::new(), Vec::new());
    let mut bg = (Vec::new(), Vec::new());
    for (i, &l) in sample.labels.iter().enumerate() {
        let pool = if l == class_id { &mut fg } else { &mut bg };
        if fits(&unravel(i, &vol)) {
            pool.0.push(i);
        } else {
            pool.1.push(i);
        }
    }
    let pick = |pool: &(Vec<usize>, Vec<usize>)| {
        if pool.0.is_empty() {
            pool.1.clone()
        } else {
            pool.0.clone()
        }
    };
    let (fg, bg) = (pick(&fg), pick(&bg));
    if pos_ratio > 0.0 && fg.is_empty() {
        return Err(DataError::NoForeground {
            sample_id: sample.sample_id,
            class_id,
        });
    }
    if pos_ratio < 1.0 && bg.is_empty() {
        return Err(DataError::NoBackground {
            sample_id: sample.sample_id,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pshape = vec![1];
    pshape.extend_from_slice(patch_size);
    let n_patch: usize = patch_size.iter().product();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let positive = rng.gen_bool(pos_ratio);
        let pool = if positive { &fg } else { &bg };
        let flat = pool[rng.gen_range(0..pool.len())];
        let center = unravel(flat, &vol);
        let origin: Vec<usize> = center
            .iter()
            .zip(patch_size)
            .zip(&vol)
            .map(|((&c, &p), &v)| c.saturating_sub(p / 2).min(v - p))
            .collect();

        let mut image = Vec::with_capacity(n_patch);
        let mut label = Vec::with_capacity(n_patch);
        for j in 0..n_patch {
            let local = unravel(j, patch_size);
            let mut src = 0;
            for a in 0..vol.len() {
                src = src * vol[a] + origin[a] + local[a];
            }
            image.push(sample.image.data()[src]);
            label.push(if sample.labels[src] == class_id { 1.0 } else { 0.0 });
        }
        out.push(Patch {
            image: Tensor::new(&pshape, image)?,
            label: Tensor::new(&pshape, label)?,
            origin,
            center,
            foreground_center: positive,
        });
    }
    Ok(out)
}
