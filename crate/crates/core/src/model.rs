//! Branchy DNN model descriptions.
//!
//! A model is a table of layers plus `M` exit branches. Each exit is an
//! ordered chain of layer names; trunk layers shared between exits are
//! referenced by name. Exit `i` (1-based) is the `i`-th smallest sub-model.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("reading {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file")]
    Parse(#[from] serde_json::Error),
    #[error("invalid field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("exit {exit} references unknown layer `{layer}`")]
    DanglingLayer { exit: usize, layer: String },
    #[error("exit {exit} out of range 1..={num_exits}")]
    ExitOutOfRange { exit: usize, num_exits: usize },
    #[error("layer interval {start}..{end} out of range for exit {exit} with {len} layers")]
    IntervalOutOfRange {
        exit: usize,
        start: usize,
        end: usize,
        len: usize,
    },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ModelError {
    ModelError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "conv")]
    Convolution,
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "pool")]
    Pooling,
    #[serde(rename = "lrn")]
    LocalResponseNormalization,
    #[serde(rename = "dropout")]
    Dropout,
    #[serde(rename = "fc")]
    FullyConnected,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Convolution,
        LayerKind::Relu,
        LayerKind::Pooling,
        LayerKind::LocalResponseNormalization,
        LayerKind::Dropout,
        LayerKind::FullyConnected,
    ];

    /// Short name used in model files, predictor files and CSV.
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Convolution => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Pooling => "pool",
            LayerKind::LocalResponseNormalization => "lrn",
            LayerKind::Dropout => "dropout",
            LayerKind::FullyConnected => "fc",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown layer kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvParams {
    pub input_feature_maps: u32,
    pub filter_size: u32,
    pub stride: u32,
    pub num_filters: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub input_bytes: u64,
    /// Bytes crossing the wire when the partition falls right after this layer.
    pub output_bytes: u64,
    pub param_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvParams>,
}

impl LayerSpec {
    fn validate(&self) -> Result<(), ModelError> {
        let field = |f: &str| format!("layers[{}].{f}", self.name);
        if self.name.is_empty() {
            return Err(invalid("layers[].name", "must not be empty"));
        }
        match (self.kind, &self.conv) {
            (LayerKind::Convolution, None) => {
                return Err(invalid(field("conv"), "required for conv layers"));
            }
            (LayerKind::Convolution, Some(c)) => {
                for (name, v) in [
                    ("input_feature_maps", c.input_feature_maps),
                    ("filter_size", c.filter_size),
                    ("stride", c.stride),
                    ("num_filters", c.num_filters),
                ] {
                    if v == 0 {
                        return Err(invalid(field(&format!("conv.{name}")), "must be >= 1"));
                    }
                }
            }
            (kind, Some(_)) => {
                return Err(invalid(
                    field("conv"),
                    format!("only allowed on conv layers, not `{kind}`"),
                ));
            }
            (_, None) => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitBranch {
    /// 1-based; larger means a larger, more accurate sub-model.
    pub index: usize,
    pub layers: Vec<String>,
    pub accuracy: f64,
}

/// On-disk shape of a model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    comment: Option<String>,
    input_bytes: u64,
    layers: Vec<LayerSpec>,
    exits: Vec<ExitBranch>,
}

/// A validated branchy model. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchyModel {
    name: String,
    comment: Option<String>,
    input_bytes: u64,
    layers: Vec<LayerSpec>,
    exits: Vec<ExitBranch>,
    // chains[i - 1][j] indexes into `layers`
    chains: Vec<Vec<usize>>,
}

impl BranchyModel {
    /// Validates and builds a model. Exits may be given in any order; they
    /// are stored sorted by index.
    pub fn new(
        name: impl Into<String>,
        input_bytes: u64,
        layers: Vec<LayerSpec>,
        mut exits: Vec<ExitBranch>,
    ) -> Result<Self, ModelError> {
        let name = name.into();

        let mut by_name = HashMap::with_capacity(layers.len());
        for (pos, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if by_name.insert(layer.name.as_str(), pos).is_some() {
                return Err(invalid(
                    "layers[].name",
                    format!("duplicate layer name `{}`", layer.name),
                ));
            }
        }

        if exits.is_empty() {
            return Err(invalid("exits", "at least one exit is required"));
        }
        exits.sort_by_key(|e| e.index);
        for (expected, exit) in (1..).zip(&exits) {
            if exit.index != expected {
                return Err(invalid(
                    "exits[].index",
                    format!("exit indices must be exactly 1..={}, found {}", exits.len(), exit.index),
                ));
            }
        }

        let mut chains = Vec::with_capacity(exits.len());
        let mut prev_len = 0;
        for exit in &exits {
            if exit.layers.is_empty() {
                return Err(invalid(format!("exits[{}].layers", exit.index), "must not be empty"));
            }
            if !(0.0..=1.0).contains(&exit.accuracy) {
                return Err(invalid(
                    format!("exits[{}].accuracy", exit.index),
                    format!("{} is not in [0, 1]", exit.accuracy),
                ));
            }
            if exit.layers.len() <= prev_len {
                return Err(invalid(
                    format!("exits[{}].layers", exit.index),
                    format!(
                        "layer count {} must exceed the previous exit's {}",
                        exit.layers.len(),
                        prev_len
                    ),
                ));
            }
            prev_len = exit.layers.len();

            let mut seen = HashSet::new();
            let mut chain = Vec::with_capacity(exit.layers.len());
            for layer in &exit.layers {
                let pos = *by_name.get(layer.as_str()).ok_or_else(|| ModelError::DanglingLayer {
                    exit: exit.index,
                    layer: layer.clone(),
                })?;
                if !seen.insert(pos) {
                    return Err(invalid(
                        format!("exits[{}].layers", exit.index),
                        format!("layer `{layer}` appears twice"),
                    ));
                }
                chain.push(pos);
            }
            let first = &layers[chain[0]];
            if first.input_bytes != input_bytes {
                return Err(invalid(
                    format!("exits[{}].layers", exit.index),
                    format!(
                        "first layer `{}` takes {} bytes but the model input is {} bytes",
                        first.name, first.input_bytes, input_bytes
                    ),
                ));
            }
            chains.push(chain);
        }

        Ok(BranchyModel {
            name,
            comment: None,
            input_bytes,
            layers,
            exits,
            chains,
        })
    }

    pub fn with_comment(mut self, comment: impl Into<String>) -> Self {
        self.comment = Some(comment.into());
        self
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text)?;
        let model = BranchyModel::new(file.name, file.input_bytes, file.layers, file.exits)?;
        Ok(BranchyModel {
            comment: file.comment,
            ..model
        })
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            name: self.name.clone(),
            comment: self.comment.clone(),
            input_bytes: self.input_bytes,
            layers: self.layers.clone(),
            exits: self.exits.clone(),
        };
        // Plain data with string keys: serialization cannot fail.
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn comment(&self) -> Option<&str> {
        self.comment.as_deref()
    }

    /// Raw input payload size in bytes.
    pub fn input_bytes(&self) -> u64 {
        self.input_bytes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    pub fn exits(&self) -> &[ExitBranch] {
        &self.exits
    }

    pub fn exit(&self, exit: usize) -> Result<&ExitBranch, ModelError> {
        self.check_exit(exit)?;
        Ok(&self.exits[exit - 1])
    }

    /// Number of layers `N_i` of exit `exit`.
    pub fn chain_len(&self, exit: usize) -> Result<usize, ModelError> {
        self.check_exit(exit)?;
        Ok(self.chains[exit - 1].len())
    }

    /// Layers of exit `exit` in execution order.
    pub fn chain(&self, exit: usize) -> Result<impl ExactSizeIterator<Item = &LayerSpec> + '_, ModelError> {
        self.check_exit(exit)?;
        Ok(self.chains[exit - 1].iter().map(move |&pos| &self.layers[pos]))
    }

    /// Sum of `param_bytes` over chain positions `positions` (0-based,
    /// half-open) of exit `exit`. An empty interval yields 0.
    pub fn submodel_bytes(&self, exit: usize, positions: Range<usize>) -> Result<u64, ModelError> {
        let len = self.chain_len(exit)?;
        if positions.start > positions.end || positions.end > len {
            return Err(ModelError::IntervalOutOfRange {
                exit,
                start: positions.start,
                end: positions.end,
                len,
            });
        }
        Ok(self.chains[exit - 1][positions]
            .iter()
            .map(|&pos| self.layers[pos].param_bytes)
            .sum())
    }

    /// Non-fatal issues, currently only accuracy decreasing with exit index.
    pub fn warnings(&self) -> Vec<String> {
        self.exits
            .windows(2)
            .filter(|w| w[1].accuracy < w[0].accuracy)
            .map(|w| {
                format!(
                    "exit {} accuracy {} is lower than exit {} accuracy {}",
                    w[1].index, w[1].accuracy, w[0].index, w[0].accuracy
                )
            })
            .collect()
    }

    fn check_exit(&self, exit: usize) -> Result<(), ModelError> {
        if exit == 0 || exit > self.exits.len() {
            return Err(ModelError::ExitOutOfRange {
                exit,
                num_exits: self.exits.len(),
            });
        }
        Ok(())
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BranchyModel, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_owned(),
        source,
    })?;
    let model = BranchyModel::from_json(&text)?;
    for warning in model.warnings() {
        log::warn!("{}: {warning}", path.display());
    }
    Ok(model)
}

pub fn save_model(model: &BranchyModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let mut text = model.to_json();
    text.push('\n');
    fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.to_owned(),
        source,
    })
}
