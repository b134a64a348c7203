//! Synthetic two-organ phantoms standing in for abdominal CT volumes.
//!
//! Each phantom contains one large bright ellipse/ellipsoid (class 1,
//! "liver-like") and one small dimmer one (class 2, "spleen-like") on a flat
//! background with additive Gaussian noise. Node datasets keep only their own
//! organ's annotation; voxels of the other organ become background.

mod io;
mod patches;

pub use io::{export_dataset, import_dataset, DatasetBundle, MANIFEST_FILE};
pub use patches::{sample_patches, Patch};

use std::collections::BTreeSet;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const SPLEEN: u8 = 2;

/// Label class carried by a task name.
pub fn class_for_task(task: &str) -> Option<u8> {
    match task {
        "liver" => Some(LIVER),
        "spleen" => Some(SPLEEN),
        _ => None,
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error("could not place disjoint organs in sample {sample_id} after {attempts} attempts")]
    Placement { sample_id: u64, attempts: usize },
    #[error("volume is constant, cannot min-max normalize")]
    DegenerateRange,
    #[error("patch size {patch:?} exceeds volume size {volume:?}")]
    PatchTooLarge { patch: Vec<usize>, volume: Vec<usize> },
    #[error("sample {sample_id} has no voxel of class {class_id} to center a patch on")]
    NoForeground { sample_id: u64, class_id: u8 },
    #[error("sample {sample_id} has no background voxel to center a patch on")]
    NoBackground { sample_id: u64 },
    #[error("dataset manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Shape and intensity of one synthetic organ. Axis lengths are full
/// diameters as fractions of the image extent along that axis.
#[derive(Clone, Debug, PartialEq)]
pub struct OrganSpec {
    pub class_id: u8,
    pub intensity: f64,
    pub axis_fraction: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    /// Spatial extent, 2 or 3 axes (`[H, W]` or `[D, H, W]`).
    pub size: Vec<usize>,
    pub organs: Vec<OrganSpec>,
    pub background: f64,
    pub noise_sigma: f64,
    /// Minimum voxel distance to the border and between organs.
    pub margin: usize,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: vec![64, 64],
            organs: vec![
                OrganSpec {
                    class_id: LIVER,
                    intensity: 0.7,
                    axis_fraction: (0.25, 0.40),
                },
                OrganSpec {
                    class_id: SPLEEN,
                    intensity: 0.5,
                    axis_fraction: (0.08, 0.15),
                },
            ],
            background: 0.2,
            noise_sigma: 0.03,
            margin: 1,
            max_attempts: 200,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Small 3-D volume for smoke tests.
    pub fn smoke_3d() -> Self {
        Self {
            size: vec![8, 16, 16],
            ..Self::default()
        }
    }

    pub fn spatial_dims(&self) -> usize {
        self.size.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if !(2..=3).contains(&self.size.len()) || self.size.contains(&0) {
            return bad(format!("size must have 2 or 3 positive axes, got {:?}", self.size));
        }
        if self.noise_sigma < 0.0 {
            return bad("noise sigma must be non-negative".into());
        }
        let mut classes = BTreeSet::new();
        for o in &self.organs {
            if o.class_id == BACKGROUND || !classes.insert(o.class_id) {
                return bad(format!("organ class ids must be unique and non-zero ({})", o.class_id));
            }
            let (lo, hi) = o.axis_fraction;
            if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                return bad(format!("axis fraction range {lo}..{hi} invalid"));
            }
            if (o.intensity - self.background).abs() < 3.0 * self.noise_sigma {
                return bad(format!(
                    "class {} intensity {} within 3 sigma of background",
                    o.class_id, o.intensity
                ));
            }
        }
        Ok(())
    }
}

/// Image volume with its (possibly incomplete) label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    /// `[1, spatial...]`, values in [0, 1].
    pub image: Tensor<f32>,
    /// One class id per voxel, row-major over the spatial axes.
    pub labels: Vec<u8>,
    pub annotated_classes: BTreeSet<u8>,
}

impl Sample {
    pub fn spatial_shape(&self) -> &[usize] {
        &self.image.shape()[1..]
    }

    pub fn count_class(&self, class_id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class_id).count()
    }

    /// `1` where the label equals `class_id`, else `0`.
    pub fn binary_mask(&self, class_id: u8) -> Vec<u8> {
        self.labels.iter().map(|&l| u8::from(l == class_id)).collect()
    }
}

/// Training and validation samples of one node, annotated for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeDataset {
    pub task: String,
    pub class_id: u8,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
}

fn sample_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id);
    rng
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    angle: f64,
}

impl Ellipsoid {
    /// Membership of voxel center `(z, y, x)`; rotation acts in the y–x plane.
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let (dz, dy, dx) = (z - self.center[0], y - self.center[1], x - self.center[2]);
        let (s, c) = self.angle.sin_cos();
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        (dz / self.semi[0]).powi(2) + (u / self.semi[1]).powi(2) + (v / self.semi[2]).powi(2) <= 1.0
    }

    fn grown(&self, by: f64) -> Self {
        Self {
            center: self.center,
            semi: self.semi.map(|s| s + by),
            angle: self.angle,
        }
    }
}

fn dims3(size: &[usize]) -> [usize; 3] {
    if size.len() == 2 {
        [1, size[0], size[1]]
    } else {
        [size[0], size[1], size[2]]
    }
}

fn rasterize(e: &Ellipsoid, dims: [usize; 3]) -> Vec<bool> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                out.push(e.contains(z as f64, y as f64, x as f64));
            }
        }
    }
    out
}

fn place(rng: &mut ChaCha8Rng, organ: &OrganSpec, dims: [usize; 3], margin: f64, flat: bool) -> Option<Ellipsoid> {
    let mut semi = [0.0; 3];
    for a in 0..3 {
        if flat && a == 0 {
            // unit-depth axis: the ellipse always covers the single slice
            semi[a] = 1.0;
            continue;
        }
        let frac = rng.gen_range(organ.axis_fraction.0..=organ.axis_fraction.1);
        semi[a] = (frac * dims[a] as f64 / 2.0).max(0.75);
    }
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let reach = semi[1].max(semi[2]);
    let mut center = [0.0; 3];
    for a in 0..3 {
        let r = if a == 0 { semi[0] } else { reach };
        if flat && a == 0 {
            center[a] = 0.0;
            continue;
        }
        let lo = r + margin;
        let hi = dims[a] as f64 - 1.0 - r - margin;
        if lo > hi {
            return None;
        }
        center[a] = rng.gen_range(lo..=hi);
    }
    Some(Ellipsoid { center, semi, angle })
}

/// Deterministic phantom for `(config.seed, sample_id)` with every organ
/// annotated.
pub fn generate_sample(config: &PhantomConfig, sample_id: u64) -> Result<Sample> {
    config.validate()?;
    let mut rng = sample_rng(config.seed, sample_id);
    let dims = dims3(&config.size);
    let flat = config.size.len() == 2;
    let n: usize = dims.iter().product();
    let margin = config.margin as f64;

    let mut labels = vec![BACKGROUND; n];
    let mut attempts = 0;
    'retry: loop {
        if attempts >= config.max_attempts {
            return Err(DataError::Placement {
                sample_id,
                attempts,
            });
        }
        attempts += 1;
        labels.fill(BACKGROUND);
        let mut keep_out = vec![false; n];
        for organ in &config.organs {
            let Some(e) = place(&mut rng, organ, dims, margin, flat) else {
                continue 'retry;
            };
            let inside = rasterize(&e, dims);
            let count = inside.iter().filter(|&&v| v).count();
            if count == 0 || inside.iter().zip(&keep_out).any(|(&a, &b)| a && b) {
                continue 'retry;
            }
            for (i, &v) in inside.iter().enumerate() {
                if v {
                    labels[i] = organ.class_id;
                }
            }
            let halo = rasterize(&e.grown(margin), dims);
            keep_out.iter_mut().zip(halo).for_each(|(k, h)| *k |= h);
        }
        break;
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let level = |l: u8| {
        config
            .organs
            .iter()
            .find(|o| o.class_id == l)
            .map_or(config.background, |o| o.intensity)
    };
    let data: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let eps = if config.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (level(l) + eps).clamp(0.0, 1.0) as f32
        })
        .collect();
    let mut shape = vec![1];
    shape.extend_from_slice(&config.size);
    Ok(Sample {
        sample_id,
        image: Tensor::new(&shape, data)?,
        labels,
        annotated_classes: config.organs.iter().map(|o| o.class_id).collect(),
    })
}

/// Drops every annotation outside `keep`; those voxels become background.
pub fn mask_annotations(sample: &Sample, keep: &BTreeSet<u8>) -> Sample {
    let labels = sample
        .labels
        .iter()
        .map(|&l| if keep.contains(&l) { l } else { BACKGROUND })
        .collect();
    Sample {
        sample_id: sample.sample_id,
        image: sample.image.clone(),
        labels,
        annotated_classes: keep
            .iter()
            .copied()
            .filter(|&c| c != BACKGROUND)
            .collect(),
    }
}

/// Min-max rescaling to [0, 1].
pub fn normalize_intensity(volume: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (lo, hi) = volume
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Err(DataError::DegenerateRange);
    }
    let range = hi - lo;
    let data = volume.data().iter().map(|&v| (v - lo) / range).collect();
    Ok(Tensor::new(volume.shape(), data)?)
}

/// Generates `ids`, keeps only `class_id` annotated, and splits the first
/// `floor(train_fraction · n)` ids into training and the rest into validation.
pub fn generate_node_dataset(
    config: &PhantomConfig,
    task: &str,
    class_id: u8,
    ids: Range<u64>,
    train_fraction: f64,
) -> Result<NodeDataset> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(DataError::InvalidConfig(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let keep = BTreeSet::from([class_id]);
    let samples = ids
        .map(|id| generate_sample(config, id).map(|s| mask_annotations(&s, &keep)))
        .collect::<Result<Vec<_>>>()?;
    let n_train = (samples.len() as f64 * train_fraction + 1e-9).floor() as usize;
    let mut train = samples;
    let validation = train.split_off(n_train);
    Ok(NodeDataset {
        task: task.to_string(),
        class_id,
        train,
        validation,
    })
}

/// Fully annotated held-out samples.
pub fn generate_test_set(config: &PhantomConfig, ids: Range<u64>) -> Result<Vec<Sample>> {
    ids.map(|id| generate_sample(config, id)).collect()
}
