//! Model persistence: a single-line JSON header followed by a raw
//! little-endian f64 blob holding all parameters in canonical order
//! (per LSTM layer w_f,b_f,w_i,b_i,w_c,b_c,w_o,b_o; then fc_w, fc_b,
//! out_w, out_b; adapters store m,b or m1,b1,m2,b2). Matrices are
//! row-major and act on row vectors (`y = x·W + b`). Round-trips are
//! byte-identical.
//!
//! Classifier checkpoints also carry the source-side preprocessing
//! statistics so later domains reuse them without access to source data.

use crate::dataio::{ChannelStats, PreprocessCfg};
use crate::error::{Error, Result};
use crate::model::{AdapterKind, AdapterParams, ClassifierParams, LstmLayerParams, Stage};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

const FORMAT: &str = "driftbench-checkpoint-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum CheckpointKind {
    Classifier,
    Adapter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    kind: CheckpointKind,
    input_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fc_units: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adapter_kind: Option<AdapterKind>,
    seed: u64,
    stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    preprocess: Option<ChannelStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    smooth_len: Option<usize>,
    param_count: usize,
}

fn write_file(path: &Path, header: &Header, tensors: &[&Tensor]) -> Result<()> {
    let mut bytes = serde_json::to_string(header)?.into_bytes();
    bytes.push(b'\n');
    for t in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<(Header, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Parse {
        file: path.display().to_string(),
        line: 1,
        msg: "missing header line".into(),
    })?;
    let header: Header = serde_json::from_slice(&bytes[..newline])?;
    if header.format != FORMAT {
        return Err(Error::Parse {
            file: path.display().to_string(),
            line: 1,
            msg: format!("unknown checkpoint format '{}'", header.format),
        });
    }
    let blob = &bytes[newline + 1..];
    if blob.len() != header.param_count * 8 {
        return Err(Error::Parse {
            file: path.display().to_string(),
            line: 2,
            msg: format!(
                "parameter blob holds {} bytes, header promises {}",
                blob.len(),
                header.param_count * 8
            ),
        });
    }
    let values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

fn fill_params(tensors: Vec<&mut Tensor>, values: &[f64]) -> Result<()> {
    let mut offset = 0;
    for t in tensors {
        let n = t.numel();
        t.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    if offset != values.len() {
        return Err(Error::Contract("checkpoint blob length mismatch".into()));
    }
    Ok(())
}

/// Everything a classifier checkpoint restores.
#[derive(Debug, Clone)]
pub struct ClassifierCheckpoint {
    pub classifier: ClassifierParams,
    pub seed: u64,
    pub stats: Option<ChannelStats>,
    pub prep: Option<PreprocessCfg>,
}

pub fn save_classifier(
    path: &Path,
    classifier: &ClassifierParams,
    seed: u64,
    stats: Option<&ChannelStats>,
    prep: Option<&PreprocessCfg>,
) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        kind: CheckpointKind::Classifier,
        input_size: classifier.input_size,
        n_classes: Some(classifier.n_classes),
        hidden_sizes: Some(classifier.hidden_sizes()),
        fc_units: Some(classifier.fc_units),
        adapter_kind: None,
        seed,
        stage: classifier.stage,
        preprocess: stats.cloned(),
        smooth_len: prep.map(|p| p.smooth_len),
        param_count: classifier.param_count(),
    };
    write_file(path, &header, &classifier.param_tensors())
}

pub fn load_classifier(path: &Path) -> Result<ClassifierCheckpoint> {
    let (header, values) = read_file(path)?;
    if header.kind != CheckpointKind::Classifier {
        return Err(Error::Contract(format!(
            "{} is not a classifier checkpoint",
            path.display()
        )));
    }
    let hidden_sizes = header
        .hidden_sizes
        .clone()
        .ok_or_else(|| Error::Contract("classifier checkpoint lacks hidden sizes".into()))?;
    let n_classes = header
        .n_classes
        .ok_or_else(|| Error::Contract("classifier checkpoint lacks class count".into()))?;
    let fc_units = header
        .fc_units
        .ok_or_else(|| Error::Contract("classifier checkpoint lacks fc size".into()))?;
    if hidden_sizes.is_empty() {
        return Err(Error::Contract("classifier checkpoint lists no layers".into()));
    }

    let layers: Vec<LstmLayerParams> = hidden_sizes
        .iter()
        .enumerate()
        .map(|(l, &hid)| {
            let inp = if l == 0 {
                header.input_size
            } else {
                hidden_sizes[l - 1]
            };
            LstmLayerParams::zeros(inp, hid)
        })
        .collect();
    let top = *hidden_sizes.last().unwrap();
    let mut classifier = ClassifierParams {
        layers,
        fc_w: Tensor::zeros(vec![top, fc_units]),
        fc_b: Tensor::zeros(vec![fc_units]),
        out_w: Tensor::zeros(vec![fc_units, n_classes]),
        out_b: Tensor::zeros(vec![n_classes]),
        input_size: header.input_size,
        fc_units,
        n_classes,
        stage: header.stage,
    };
    if classifier.param_count() != header.param_count {
        return Err(Error::Contract(format!(
            "architecture implies {} parameters, header promises {}",
            classifier.param_count(),
            header.param_count
        )));
    }
    fill_params(classifier.param_tensors_mut(), &values)?;
    Ok(ClassifierCheckpoint {
        classifier,
        seed: header.seed,
        stats: header.preprocess,
        prep: header.smooth_len.map(|smooth_len| PreprocessCfg { smooth_len }),
    })
}

pub fn save_adapter(path: &Path, adapter: &AdapterParams, seed: u64) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        kind: CheckpointKind::Adapter,
        input_size: adapter.input_size(),
        n_classes: None,
        hidden_sizes: None,
        fc_units: None,
        adapter_kind: Some(adapter.kind()),
        seed,
        stage: Stage::SourceTrained,
        preprocess: None,
        smooth_len: None,
        param_count: adapter.param_count(),
    };
    write_file(path, &header, &adapter.param_tensors())
}

pub fn load_adapter(path: &Path) -> Result<(AdapterParams, u64)> {
    let (header, values) = read_file(path)?;
    if header.kind != CheckpointKind::Adapter {
        return Err(Error::Contract(format!(
            "{} is not an adapter checkpoint",
            path.display()
        )));
    }
    let kind = header
        .adapter_kind
        .ok_or_else(|| Error::Contract("adapter checkpoint lacks its kind".into()))?;
    let mut adapter = AdapterParams::identity(kind, header.input_size);
    if adapter.param_count() != header.param_count {
        return Err(Error::Contract(format!(
            "adapter implies {} parameters, header promises {}",
            adapter.param_count(),
            header.param_count
        )));
    }
    fill_params(adapter.param_tensors_mut(), &values)?;
    Ok((adapter, header.seed))
}
