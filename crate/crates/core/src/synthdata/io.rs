//! On-disk dataset cache.
//!
//! Layout of a cache directory:
//!
//! ```text
//! manifest.json
//! images/<split>-<task>-<sample_id>.f32   raw little-endian f32, C order
//! labels/<split>-<task>-<sample_id>.u8    one byte per voxel
//! ```
//!
//! The manifest records the format version and, per sample, its id, split
//! (`train`, `validation` or `test`), node task (empty for test samples),
//! image shape, annotated classes and the two file paths.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::{DataError, NodeDataset, Result, Sample};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "segviz-dataset";
const VERSION: u32 = 1;

/// Every sample of one experiment: per-node datasets plus the shared test set.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub nodes: Vec<NodeDataset>,
    pub test: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    nodes: Vec<NodeEntry>,
    samples: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
struct NodeEntry {
    task: String,
    class_id: u8,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    sample_id: u64,
    split: String,
    task: String,
    shape: Vec<usize>,
    annotated_classes: Vec<u8>,
    image: String,
    labels: String,
}

fn write_sample(dir: &Path, split: &str, task: &str, s: &Sample) -> Result<SampleEntry> {
    let stem = format!("{split}-{task}-{}", s.sample_id);
    let image = format!("images/{stem}.f32");
    let labels = format!("labels/{stem}.u8");
    let bytes: Vec<u8> = s.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(&image), bytes)?;
    fs::write(dir.join(&labels), &s.labels)?;
    Ok(SampleEntry {
        sample_id: s.sample_id,
        split: split.to_string(),
        task: task.to_string(),
        shape: s.image.shape().to_vec(),
        annotated_classes: s.annotated_classes.iter().copied().collect(),
        image,
        labels,
    })
}

fn read_sample(dir: &Path, e: &SampleEntry) -> Result<Sample> {
    let bytes = fs::read(dir.join(&e.image))?;
    let numel: usize = e.shape.iter().product();
    if bytes.len() != numel * 4 {
        return Err(DataError::Manifest(format!(
            "{} holds {} bytes, shape {:?} needs {}",
            e.image,
            bytes.len(),
            e.shape,
            numel * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let labels = fs::read(dir.join(&e.labels))?;
    if labels.len() != numel {
        return Err(DataError::Manifest(format!(
            "{} holds {} labels, expected {numel}",
            e.labels,
            labels.len()
        )));
    }
    Ok(Sample {
        sample_id: e.sample_id,
        image: Tensor::new(&e.shape, data)?,
        labels,
        annotated_classes: e.annotated_classes.iter().copied().collect::<BTreeSet<_>>(),
    })
}

pub fn export_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut samples = Vec::new();
    for node in &bundle.nodes {
        for s in &node.train {
            samples.push(write_sample(dir, "train", &node.task, s)?);
        }
        for s in &node.validation {
            samples.push(write_sample(dir, "validation", &node.task, s)?);
        }
    }
    for s in &bundle.test {
        samples.push(write_sample(dir, "test", "", s)?);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        nodes: bundle
            .nodes
            .iter()
            .map(|n| NodeEntry {
                task: n.task.clone(),
                class_id: n.class_id,
            })
            .collect(),
        samples,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<DatasetBundle> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(DataError::Manifest(format!(
            "unsupported format {} v{}",
            m.format, m.version
        )));
    }
    let mut nodes: Vec<NodeDataset> = m
        .nodes
        .into_iter()
        .map(|n| NodeDataset {
            task: n.task,
            class_id: n.class_id,
            train: Vec::new(),
            validation: Vec::new(),
        })
        .collect();
    let mut test = Vec::new();
    for e in &m.samples {
        let s = read_sample(dir, e)?;
        if e.split == "test" {
            test.push(s);
            continue;
        }
        let node = nodes
            .iter_mut()
            .find(|n| n.task == e.task)
            .ok_or_else(|| DataError::Manifest(format!("sample {} names unknown node {:?}", e.sample_id, e.task)))?;
        match e.split.as_str() {
            "train" => node.train.push(s),
            "validation" => node.validation.push(s),
            other => return Err(DataError::Manifest(format!("unknown split {other:?}"))),
        }
    }
    Ok(DatasetBundle { nodes, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_node_dataset, generate_test_set, PhantomConfig, LIVER, SPLEEN};

    #[test]
    fn round_trip() {
        let cfg = PhantomConfig {
            size: vec![16, 16],
            ..PhantomConfig::default()
        };
        let bundle = DatasetBundle {
            nodes: vec![
                generate_node_dataset(&cfg, "liver", LIVER, 0..5, 0.8).unwrap(),
                generate_node_dataset(&cfg, "spleen", SPLEEN, 5..10, 0.8).unwrap(),
            ],
            test: generate_test_set(&cfg, 100..103).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&bundle, dir.path()).unwrap();
        assert_eq!(import_dataset(dir.path()).unwrap(), bundle);

        fs::write(dir.path().join("labels/test--100.u8"), [0u8; 3]).unwrap();
        assert!(matches!(import_dataset(dir.path()), Err(DataError::Manifest(_))));
    }
}
