//! Per-layer-kind linear latency regressions.
//!
//! Every layer kind (plus model loading) has one linear model per side,
//! `y = w · x + b`, with `x` drawn from the kind's independent variables and
//! `y` in milliseconds. Sizes are in bytes throughout.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayerKind, LayerSpec};
use crate::regression;

/// What a regression predicts: one layer kind, or model loading time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CostKind {
    Layer(LayerKind),
    ModelLoading,
}

impl CostKind {
    pub const ALL: [CostKind; 7] = [
        CostKind::Layer(LayerKind::Convolution),
        CostKind::Layer(LayerKind::Relu),
        CostKind::Layer(LayerKind::Pooling),
        CostKind::Layer(LayerKind::LocalResponseNormalization),
        CostKind::Layer(LayerKind::Dropout),
        CostKind::Layer(LayerKind::FullyConnected),
        CostKind::ModelLoading,
    ];

    /// Number of independent variables.
    pub fn arity(self) -> usize {
        match self {
            CostKind::Layer(LayerKind::Convolution)
            | CostKind::Layer(LayerKind::Pooling)
            | CostKind::Layer(LayerKind::FullyConnected) => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CostKind::Layer(kind) => kind.as_str(),
            CostKind::ModelLoading => "loading",
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CostKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "loading" {
            return Ok(CostKind::ModelLoading);
        }
        s.parse().map(CostKind::Layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Device,
    Edge,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Device => "device",
            Side::Edge => "edge",
        })
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "device" => Ok(Side::Device),
            "edge" => Ok(Side::Edge),
            _ => Err(format!("unknown side `{s}` (expected device or edge)")),
        }
    }
}

/// One or two non-negative regressors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    values: [f64; 2],
    len: usize,
}

impl FeatureVector {
    pub fn one(x: f64) -> Self {
        FeatureVector {
            values: [x, 0.0],
            len: 1,
        }
    }

    pub fn two(x1: f64, x2: f64) -> Self {
        FeatureVector {
            values: [x1, x2],
            len: 2,
        }
    }

    pub fn from_slice(values: &[f64]) -> Option<Self> {
        match *values {
            [x] => Some(Self::one(x)),
            [x1, x2] => Some(Self::two(x1, x2)),
            _ => None,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = *self;
        for v in &mut out.values[..out.len] {
            *v *= factor;
        }
        out
    }
}

/// Independent variables of a layer.
///
/// Convolution uses `[input feature maps, (filter/stride)^2 * filters]` with
/// real division; pooling and fully-connected use `[input bytes, output
/// bytes]`; the elementwise kinds use `[input bytes]`.
pub fn extract_features(layer: &LayerSpec) -> FeatureVector {
    match layer.kind {
        LayerKind::Convolution => {
            let c = layer.conv.expect("validated conv layers always carry conv params");
            let ratio = c.filter_size as f64 / c.stride as f64;
            FeatureVector::two(c.input_feature_maps as f64, ratio * ratio * c.num_filters as f64)
        }
        LayerKind::Relu | LayerKind::LocalResponseNormalization | LayerKind::Dropout => {
            FeatureVector::one(layer.input_bytes as f64)
        }
        LayerKind::Pooling | LayerKind::FullyConnected => {
            FeatureVector::two(layer.input_bytes as f64, layer.output_bytes as f64)
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PredictError {
    #[error("feature arity {got} does not match model arity {expected}")]
    Arity { expected: usize, got: usize },
}

/// `y = Σ wᵢ·xᵢ + b`, output in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    #[serde(rename = "w")]
    pub weights: Vec<f64>,
    #[serde(rename = "b")]
    pub intercept: f64,
}

impl RegressionModel {
    pub fn new(weights: Vec<f64>, intercept: f64) -> Self {
        RegressionModel { weights, intercept }
    }

    pub fn arity(&self) -> usize {
        self.weights.len()
    }

    /// Unclamped linear value.
    pub fn raw(&self, x: &FeatureVector) -> Result<f64, PredictError> {
        if x.len() != self.weights.len() {
            return Err(PredictError::Arity {
                expected: self.weights.len(),
                got: x.len(),
            });
        }
        let dot: f64 = self.weights.iter().zip(x.as_slice()).map(|(w, x)| w * x).sum();
        Ok(dot + self.intercept)
    }
}

/// Predicted latency in ms, clamped at zero after summation.
pub fn predict(model: &RegressionModel, x: &FeatureVector) -> Result<f64, PredictError> {
    model.raw(x).map(|r| r.max(0.0))
}

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("{kind}: need at least {needed} samples, got {got}")]
    Underdetermined { kind: CostKind, needed: usize, got: usize },
    #[error("{kind}: features are collinear, the system has no unique solution")]
    Collinear { kind: CostKind },
    #[error("{kind}: sample {index} has {got} features, expected {expected}")]
    Arity {
        kind: CostKind,
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("{kind}: sample {index} is not finite")]
    NonFinite { kind: CostKind, index: usize },
}

/// Ordinary least squares fit of `kind`'s regression to `(features, ms)` samples.
pub fn fit(kind: CostKind, samples: &[(FeatureVector, f64)]) -> Result<RegressionModel, FitError> {
    let arity = kind.arity();
    if samples.len() < arity + 1 {
        return Err(FitError::Underdetermined {
            kind,
            needed: arity + 1,
            got: samples.len(),
        });
    }
    for (index, (x, y)) in samples.iter().enumerate() {
        if x.len() != arity {
            return Err(FitError::Arity {
                kind,
                index,
                expected: arity,
                got: x.len(),
            });
        }
        if !y.is_finite() || x.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(FitError::NonFinite { kind, index });
        }
    }
    let xs: Vec<&[f64]> = samples.iter().map(|(x, _)| x.as_slice()).collect();
    let ys: Vec<f64> = samples.iter().map(|(_, y)| *y).collect();
    let (weights, intercept) = regression::least_squares(&xs, &ys).ok_or(FitError::Collinear { kind })?;
    Ok(RegressionModel { weights, intercept })
}

/// The seven regressions of one side.
#[derive(Debug, Clone, PartialEq)]
pub struct SideModels {
    models: BTreeMap<CostKind, RegressionModel>,
}

impl SideModels {
    pub fn get(&self, kind: CostKind) -> &RegressionModel {
        // construction guarantees full coverage
        &self.models[&kind]
    }

    pub fn set(&mut self, kind: CostKind, model: RegressionModel) -> Result<(), PredictorError> {
        if model.arity() != kind.arity() {
            return Err(PredictorError::Arity {
                side: None,
                kind,
                expected: kind.arity(),
                got: model.arity(),
            });
        }
        self.models.insert(kind, model);
        Ok(())
    }

    pub fn from_models(
        side: Side,
        models: impl IntoIterator<Item = (CostKind, RegressionModel)>,
    ) -> Result<Self, PredictorError> {
        let models: BTreeMap<_, _> = models.into_iter().collect();
        for kind in CostKind::ALL {
            let m = models.get(&kind).ok_or(PredictorError::Missing { side, kind })?;
            if m.arity() != kind.arity() {
                return Err(PredictorError::Arity {
                    side: Some(side),
                    kind,
                    expected: kind.arity(),
                    got: m.arity(),
                });
            }
        }
        Ok(SideModels { models })
    }

    pub fn iter(&self) -> impl Iterator<Item = (CostKind, &RegressionModel)> {
        self.models.iter().map(|(k, m)| (*k, m))
    }
}

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("reading {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed predictor file")]
    Parse(#[from] serde_json::Error),
    #[error("{side} predictors are missing the `{kind}` regression")]
    Missing { side: Side, kind: CostKind },
    #[error("unknown regression `{name}` in {side} predictors")]
    Unknown { side: Side, name: String },
    #[error("`{kind}` regression{} has {got} weights, expected {expected}", side.map(|s| format!(" ({s})")).unwrap_or_default())]
    Arity {
        side: Option<Side>,
        kind: CostKind,
        expected: usize,
        got: usize,
    },
}

/// Device and edge regressions: 14 in total.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSet {
    pub device: SideModels,
    pub edge: SideModels,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictorFile {
    device: BTreeMap<String, RegressionModel>,
    edge: BTreeMap<String, RegressionModel>,
}

impl PredictorSet {
    pub fn side(&self, side: Side) -> &SideModels {
        match side {
            Side::Device => &self.device,
            Side::Edge => &self.edge,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut SideModels {
        match side {
            Side::Device => &mut self.device,
            Side::Edge => &mut self.edge,
        }
    }

    /// Latency of `layer` on `side` in ms.
    pub fn predict_layer(&self, layer: &LayerSpec, side: Side) -> f64 {
        let model = self.side(side).get(CostKind::Layer(layer.kind));
        predict(model, &extract_features(layer)).expect("arity checked at construction")
    }

    /// Load time for a sub-model of `model_bytes` on `side`, in ms.
    pub fn predict_loading(&self, model_bytes: u64, side: Side) -> f64 {
        let model = self.side(side).get(CostKind::ModelLoading);
        predict(model, &FeatureVector::one(model_bytes as f64)).expect("arity checked at construction")
    }

    pub fn from_json(text: &str) -> Result<Self, PredictorError> {
        let file: PredictorFile = serde_json::from_str(text)?;
        let side = |side: Side, map: BTreeMap<String, RegressionModel>| {
            let models = map
                .into_iter()
                .map(|(name, m)| {
                    name.parse::<CostKind>()
                        .map(|k| (k, m))
                        .map_err(|_| PredictorError::Unknown { side, name })
                })
                .collect::<Result<Vec<_>, _>>()?;
            SideModels::from_models(side, models)
        };
        Ok(PredictorSet {
            device: side(Side::Device, file.device)?,
            edge: side(Side::Edge, file.edge)?,
        })
    }

    pub fn to_json(&self) -> String {
        let side = |s: &SideModels| s.iter().map(|(k, m)| (k.as_str().to_string(), m.clone())).collect();
        let file = PredictorFile {
            device: side(&self.device),
            edge: side(&self.edge),
        };
        serde_json::to_string_pretty(&file).expect("predictors serialize")
    }
}

pub fn load_predictors(path: impl AsRef<Path>) -> Result<PredictorSet, PredictorError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| PredictorError::Io {
        path: path.to_owned(),
        source,
    })?;
    PredictorSet::from_json(&text)
}

pub fn save_predictors(set: &PredictorSet, path: impl AsRef<Path>) -> Result<(), PredictorError> {
    let path = path.as_ref();
    let mut text = set.to_json();
    text.push('\n');
    fs::write(path, text).map_err(|source| PredictorError::Io {
        path: path.to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvParams;

    fn relu(input_bytes: u64) -> LayerSpec {
        LayerSpec {
            name: "relu".into(),
            kind: LayerKind::Relu,
            input_bytes,
            output_bytes: input_bytes,
            param_bytes: 0,
            conv: None,
        }
    }

    fn uniform_side(side: Side, w: f64, b: f64) -> SideModels {
        SideModels::from_models(
            side,
            CostKind::ALL.map(|k| (k, RegressionModel::new(vec![w; k.arity()], b))),
        )
        .unwrap()
    }

    #[test]
    fn features_follow_layer_kind() {
        assert_eq!(extract_features(&relu(4096)).as_slice(), &[4096.0]);

        let conv = LayerSpec {
            name: "conv1".into(),
            kind: LayerKind::Convolution,
            input_bytes: 0,
            output_bytes: 0,
            param_bytes: 0,
            conv: Some(ConvParams {
                input_feature_maps: 3,
                filter_size: 11,
                stride: 4,
                num_filters: 96,
            }),
        };
        // (11/4)^2 * 96 = 7.5625 * 96
        assert_eq!(extract_features(&conv).as_slice(), &[3.0, 726.0]);

        let pool = LayerSpec {
            kind: LayerKind::Pooling,
            input_bytes: 1000,
            output_bytes: 250,
            ..relu(0)
        };
        assert_eq!(extract_features(&pool).as_slice(), &[1000.0, 250.0]);
    }

    #[test]
    fn conv_ratio_uses_real_division() {
        let conv = LayerSpec {
            name: "c".into(),
            kind: LayerKind::Convolution,
            input_bytes: 0,
            output_bytes: 0,
            param_bytes: 0,
            conv: Some(ConvParams {
                input_feature_maps: 8,
                filter_size: 1,
                stride: 2,
                num_filters: 16,
            }),
        };
        assert_eq!(extract_features(&conv).as_slice(), &[8.0, 4.0]);
    }

    #[test]
    fn prediction_clamps_after_summation() {
        let fc = RegressionModel::new(vec![1.07e-4, -1.83e-4], 0.164);
        let x = FeatureVector::two(0.0, 10_000.0);
        assert!(fc.raw(&x).unwrap() < 0.0);
        assert_eq!(predict(&fc, &x).unwrap(), 0.0);

        let m = RegressionModel::new(vec![3.0], -2.0);
        assert_eq!(predict(&m, &FeatureVector::one(0.0)).unwrap(), 0.0);
        let m = RegressionModel::new(vec![3.0], 2.0);
        assert_eq!(predict(&m, &FeatureVector::one(0.0)).unwrap(), 2.0);
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let m = RegressionModel::new(vec![1.0], 0.0);
        assert_eq!(
            predict(&m, &FeatureVector::two(1.0, 2.0)),
            Err(PredictError::Arity { expected: 1, got: 2 })
        );
    }

    #[test]
    fn zero_size_layer_predicts_intercept() {
        let set = PredictorSet {
            device: uniform_side(Side::Device, 1.0, 0.25),
            edge: uniform_side(Side::Edge, 1.0, -0.25),
        };
        assert_eq!(set.predict_layer(&relu(0), Side::Device), 0.25);
        assert_eq!(set.predict_layer(&relu(0), Side::Edge), 0.0);
    }

    #[test]
    fn fit_exact_line() {
        let samples: Vec<_> = (0..4)
            .map(|x| (FeatureVector::one(x as f64), 2.0 * x as f64 + 1.0))
            .collect();
        let m = fit(CostKind::Layer(LayerKind::Relu), &samples).unwrap();
        assert!((m.weights[0] - 2.0).abs() < 1e-9);
        assert!((m.intercept - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fit_rejects_too_few_samples() {
        let kind = CostKind::Layer(LayerKind::Pooling);
        let err = fit(kind, &[(FeatureVector::two(1.0, 2.0), 3.0)]).unwrap_err();
        assert_eq!(
            err,
            FitError::Underdetermined {
                kind,
                needed: 3,
                got: 1
            }
        );
    }

    #[test]
    fn fit_rejects_collinear_features() {
        let kind = CostKind::Layer(LayerKind::FullyConnected);
        let samples: Vec<_> = (1..10)
            .map(|i| {
                let x = i as f64;
                (FeatureVector::two(x, 2.0 * x), x + 1.0)
            })
            .collect();
        assert_eq!(fit(kind, &samples), Err(FitError::Collinear { kind }));
    }

    #[test]
    fn missing_kind_is_named() {
        let mut file: serde_json::Value = serde_json::from_str(
            &PredictorSet {
                device: uniform_side(Side::Device, 1.0, 0.0),
                edge: uniform_side(Side::Edge, 1.0, 0.0),
            }
            .to_json(),
        )
        .unwrap();
        file["edge"].as_object_mut().unwrap().remove("pool");
        let err = PredictorSet::from_json(&file.to_string()).unwrap_err();
        assert!(matches!(
            err,
            PredictorError::Missing {
                side: Side::Edge,
                kind: CostKind::Layer(LayerKind::Pooling)
            }
        ));
        assert!(err.to_string().contains("pool"));
    }

    #[test]
    fn wrong_arity_in_file_is_rejected() {
        let mut file: serde_json::Value = serde_json::from_str(
            &PredictorSet {
                device: uniform_side(Side::Device, 1.0, 0.0),
                edge: uniform_side(Side::Edge, 1.0, 0.0),
            }
            .to_json(),
        )
        .unwrap();
        file["device"]["relu"]["w"] = serde_json::json!([1.0, 2.0]);
        assert!(matches!(
            PredictorSet::from_json(&file.to_string()),
            Err(PredictorError::Arity { .. })
        ));
    }

    #[test]
    fn cost_kind_names_round_trip() {
        for k in CostKind::ALL {
            assert_eq!(k.as_str().parse::<CostKind>().unwrap(), k);
        }
        assert!("softmax".parse::<CostKind>().is_err());
    }
}
