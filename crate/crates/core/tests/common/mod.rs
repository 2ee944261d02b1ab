#![allow(dead_code)]

use std::path::PathBuf;

use edgent_core::model::{load_model, BranchyModel, ConvParams, ExitBranch, LayerKind, LayerSpec};
use edgent_core::predictor::{
    load_predictors, CostKind, FeatureVector, PredictorSet, RegressionModel, Side, SideModels,
};
use edgent_core::profiler::MeasurementRow;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

pub fn bundled_model() -> BranchyModel {
    load_model(data_path("branchy_alexnet.json")).expect("bundled model loads")
}

pub fn paper_predictors() -> PredictorSet {
    load_predictors(data_path("paper_predictors.json")).expect("bundled predictors load")
}

fn random_layer(rng: &mut ChaCha8Rng, name: String, input_bytes: u64, coarse: bool) -> LayerSpec {
    let kind = LayerKind::ALL[rng.gen_range(0..LayerKind::ALL.len())];
    let size = |rng: &mut ChaCha8Rng| {
        if coarse {
            rng.gen_range(1..=8u64) * 1000
        } else {
            rng.gen_range(0..=400_000u64)
        }
    };
    let conv = (kind == LayerKind::Convolution).then(|| ConvParams {
        input_feature_maps: rng.gen_range(1..=256),
        filter_size: rng.gen_range(1..=11),
        stride: rng.gen_range(1..=4),
        num_filters: rng.gen_range(1..=384),
    });
    LayerSpec {
        name,
        kind,
        input_bytes,
        output_bytes: size(rng),
        param_bytes: size(rng),
        conv,
    }
}

fn random_side(rng: &mut ChaCha8Rng, side: Side, coarse: bool) -> SideModels {
    let models = CostKind::ALL.into_iter().map(|kind| {
        let mut coef = |scale: f64| {
            if coarse {
                rng.gen_range(0..=3) as f64 * scale
            } else {
                rng.gen_range(-0.2..1.0) * scale
            }
        };
        let weights = (0..kind.arity()).map(|_| coef(1e-4)).collect();
        let intercept = coef(10.0);
        (kind, RegressionModel::new(weights, intercept))
    });
    SideModels::from_models(side, models).unwrap()
}

/// A random valid branchy model (M <= 6, N_i <= 30) and predictor set.
/// `coarse` draws values from small grids so equal latencies are common.
pub fn random_instance(seed: u64, coarse: bool) -> (BranchyModel, PredictorSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=6usize);
    let mut lengths: Vec<usize> = rand::seq::index::sample(&mut rng, 30, m)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    lengths.sort_unstable();

    let input_bytes = if coarse { 8000 } else { rng.gen_range(1..=200_000) };
    let trunk_len = lengths[m - 1];
    let mut layers = Vec::new();
    let mut prev = input_bytes;
    for j in 0..trunk_len {
        let l = random_layer(&mut rng, format!("t{j}"), prev, coarse);
        prev = l.output_bytes;
        layers.push(l);
    }
    let mut exits = Vec::new();
    let mut accuracy = 0.0;
    for (i, &n) in lengths.iter().enumerate() {
        // the last exit is the whole trunk; others branch off it
        let shared = if i == m - 1 { n } else { rng.gen_range(1..=n) };
        let mut chain: Vec<String> = (0..shared).map(|j| format!("t{j}")).collect();
        let mut prev = layers[shared - 1].output_bytes;
        for j in shared..n {
            let l = random_layer(&mut rng, format!("b{i}_{j}"), prev, coarse);
            prev = l.output_bytes;
            chain.push(l.name.clone());
            layers.push(l);
        }
        accuracy += rng.gen_range(0.0..0.15);
        exits.push(ExitBranch {
            index: i + 1,
            layers: chain,
            accuracy: f64::min(accuracy, 1.0),
        });
    }
    let model = BranchyModel::new(format!("random_{seed}"), input_bytes, layers, exits).unwrap();
    let predictors = PredictorSet {
        device: random_side(&mut rng, Side::Device, coarse),
        edge: random_side(&mut rng, Side::Edge, coarse),
    };
    (model, predictors)
}

// Feature ranges chosen so every term moves latency by a comparable amount.
pub fn feature_ranges(kind: CostKind) -> Vec<(f64, f64)> {
    match kind {
        CostKind::Layer(LayerKind::Convolution) => vec![(1.0, 1e4), (1.0, 5e3)],
        CostKind::Layer(LayerKind::Relu) => vec![(0.0, 5e4)],
        CostKind::Layer(LayerKind::Pooling) => vec![(0.0, 4e4), (0.0, 1.5e5)],
        CostKind::Layer(LayerKind::LocalResponseNormalization) => vec![(0.0, 1e4)],
        CostKind::Layer(LayerKind::Dropout) => vec![(0.0, 5e3)],
        CostKind::Layer(LayerKind::FullyConnected) => vec![(1e3, 5e3), (0.0, 1e3)],
        CostKind::ModelLoading => vec![(0.0, 5e6)],
    }
}

/// Rows drawn from the device-side table, latency scaled by `1 + N(0, noise)`.
pub fn synthetic_rows(n: usize, noise: f64, seed: u64) -> Vec<MeasurementRow> {
    let truth = paper_predictors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut rows = Vec::new();
    for kind in CostKind::ALL {
        let model = truth.device.get(kind);
        for _ in 0..n {
            let x: Vec<f64> = feature_ranges(kind)
                .into_iter()
                .map(|(lo, hi)| rng.gen_range(lo..=hi))
                .collect();
            let features = FeatureVector::from_slice(&x).unwrap();
            let clean = model.raw(&features).unwrap();
            assert!(clean > 0.0);
            let factor = if noise == 0.0 {
                1.0
            } else {
                1.0 + normal.sample(&mut rng)
            };
            rows.push(MeasurementRow {
                kind,
                features,
                latency_ms: clean * factor,
            });
        }
    }
    rows
}

/// Device-side coefficients of `fitted` off from the table by more than `tol`.
pub fn max_relative_error(tol: f64, fitted: &PredictorSet) -> Vec<String> {
    let truth = paper_predictors();
    let mut bad = Vec::new();
    for kind in CostKind::ALL {
        let t = truth.device.get(kind);
        let f = fitted.device.get(kind);
        for (i, (a, b)) in f
            .weights
            .iter()
            .chain([&f.intercept])
            .zip(t.weights.iter().chain([&t.intercept]))
            .enumerate()
        {
            let rel = (a - b).abs() / b.abs();
            if rel > tol {
                bad.push(format!("{kind}[{i}]: {a} vs {b} ({rel:.2e})"));
            }
        }
    }
    bad
}
