mod common;

use common::{bundled_model, data_path, paper_predictors};
use edgent_core::kernels::{Network, Tensor};
use edgent_core::model::{LayerKind, LayerSpec};
use edgent_core::planner::{self, EvalOptions, PlanRequest};
use edgent_core::predictor::{load_predictors, save_predictors, CostKind, Side};
use edgent_core::simulator::{
    compare_methods, linear_grid, simulate_edge_only, sweep, ScenarioConfig, SweepAxis, SweepSpec, INFEASIBLE_ACCURACY,
};

const EXIT_LENGTHS: [usize; 5] = [12, 16, 19, 20, 22];

// Coefficients typed in from the published table, independent of the data file.
fn table(kind: &str, side: Side) -> (&'static [f64], f64) {
    match (kind, side) {
        ("conv", Side::Device) => (&[6.03e-5, 1.24e-4], 1.89e-1),
        ("relu", Side::Device) => (&[5.6e-6], 5.69e-2),
        ("pool", Side::Device) => (&[1.63e-5, 4.07e-6], 2.11e-1),
        ("lrn", Side::Device) => (&[6.59e-5], 7.80e-2),
        ("dropout", Side::Device) => (&[5.23e-6], 4.64e-3),
        ("fc", Side::Device) => (&[1.07e-4, -1.83e-4], 0.164),
        ("loading", Side::Device) => (&[1.33e-6], 2.182),
        ("conv", Side::Edge) => (&[6.13e-3, 2.67e-2], -9.909),
        ("relu", Side::Edge) => (&[1.5e-5], 4.88e-1),
        ("pool", Side::Edge) => (&[1.33e-4, 3.31e-5], 1.657),
        ("lrn", Side::Edge) => (&[5.19e-4], 5.89e-1),
        ("dropout", Side::Edge) => (&[2.34e-6], 0.0525),
        ("fc", Side::Edge) => (&[9.18e-4, 3.99e-3], 1.169),
        ("loading", Side::Edge) => (&[4.49e-6], 842.136),
        _ => unreachable!(),
    }
}

fn hand_latency(layer: &LayerSpec, side: Side) -> f64 {
    let x: Vec<f64> = match layer.kind {
        LayerKind::Convolution => {
            let c = layer.conv.unwrap();
            let ratio = c.filter_size as f64 / c.stride as f64;
            vec![c.input_feature_maps as f64, ratio * ratio * c.num_filters as f64]
        }
        LayerKind::Pooling | LayerKind::FullyConnected => {
            vec![layer.input_bytes as f64, layer.output_bytes as f64]
        }
        _ => vec![layer.input_bytes as f64],
    };
    let (w, b) = table(layer.kind.as_str(), side);
    (w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() + b).max(0.0)
}

#[test]
fn bundled_model_shape() {
    let m = bundled_model();
    assert_eq!(m.num_exits(), 5);
    for (i, &n) in EXIT_LENGTHS.iter().enumerate() {
        assert_eq!(m.chain_len(i + 1).unwrap(), n);
    }
    assert!(m.comment().unwrap().contains("estimates"));
    assert!(m.warnings().is_empty());
}

#[test]
fn bundled_model_runs_through_reference_kernels() {
    let m = bundled_model();
    let net = Network::build(&m).unwrap();
    assert_eq!(net.input_dims(), &[3, 32, 32]);
    for exit in 1..=5 {
        let n = net.chain_len(exit).unwrap();
        assert_eq!(net.dims_at(exit, n).unwrap(), &[10]);
        // every intermediate tensor matches the declared output bytes
        for (pos, layer) in m.chain(exit).unwrap().enumerate() {
            let elems: usize = net.dims_at(exit, pos + 1).unwrap().iter().product();
            assert_eq!(4 * elems as u64, layer.output_bytes, "{}", layer.name);
        }
    }
}

#[test]
fn full_submodel_bytes_is_independent_sum() {
    let m = bundled_model();
    let text = std::fs::read_to_string(data_path("branchy_alexnet.json")).unwrap();
    let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
    let params = |name: &str| {
        raw["layers"]
            .as_array()
            .unwrap()
            .iter()
            .find(|l| l["name"] == name)
            .unwrap()["param_bytes"]
            .as_u64()
            .unwrap()
    };
    let expected: u64 = raw["exits"][4]["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| params(n.as_str().unwrap()))
        .sum();
    assert_eq!(m.submodel_bytes(5, 0..22).unwrap(), expected);
    assert_eq!(m.submodel_bytes(5, 3..3).unwrap(), 0);
    for cut in 0..=22 {
        assert_eq!(
            m.submodel_bytes(5, 0..cut).unwrap() + m.submodel_bytes(5, cut..22).unwrap(),
            expected
        );
    }
}

#[test]
fn table_values() {
    let p = paper_predictors();
    let relu = LayerSpec {
        name: "relu".into(),
        kind: LayerKind::Relu,
        input_bytes: 1_000_000,
        output_bytes: 1_000_000,
        param_bytes: 0,
        conv: None,
    };
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    assert!(rel(p.predict_layer(&relu, Side::Device), 5.6569) < 1e-9);
    assert!(rel(p.predict_layer(&relu, Side::Edge), 15.488) < 1e-9);
    assert!(rel(p.predict_loading(0, Side::Edge), 842.136) < 1e-9);
    assert_eq!(p.edge.get(CostKind::ModelLoading).intercept, 842.136);
}

#[test]
fn every_table_coefficient_survives_round_trip() {
    let p = paper_predictors();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    save_predictors(&p, &path).unwrap();
    let back = load_predictors(&path).unwrap();
    assert_eq!(back, p);
    for side in [Side::Device, Side::Edge] {
        for kind in CostKind::ALL {
            let (w, b) = table(kind.as_str(), side);
            let m = back.side(side).get(kind);
            assert_eq!(m.weights, w, "{side} {kind}");
            assert_eq!(m.intercept, b, "{side} {kind}");
        }
    }
}

#[test]
fn planner_matches_hand_formula_on_bundled_model() {
    let m = bundled_model();
    let p = paper_predictors();
    let opts = EvalOptions::default();
    for bw in [50e3, 400e3, 1.5e6] {
        for exit in 1..=5 {
            let chain: Vec<_> = m.chain(exit).unwrap().cloned().collect();
            let n = chain.len();
            for cut in 0..=n {
                let mut expected: f64 = chain[cut..].iter().map(|l| hand_latency(l, Side::Device)).sum();
                if cut > 0 {
                    expected += 8.0 * m.input_bytes() as f64 / bw * 1000.0;
                    expected += chain[..cut].iter().map(|l| hand_latency(l, Side::Edge)).sum::<f64>();
                    if cut < n {
                        expected += 8.0 * chain[cut - 1].output_bytes as f64 / bw * 1000.0;
                    }
                }
                let got = planner::evaluate(&m, &p, exit, cut, bw, &opts).unwrap();
                assert!(
                    (got.predicted_latency_ms - expected).abs() <= 1e-9 * expected.max(1.0),
                    "exit {exit} p {cut}: {} vs {expected}",
                    got.predicted_latency_ms
                );
                assert!((got.breakdown.total() - got.predicted_latency_ms).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn oracle_agrees_on_bundled_bandwidth_grid() {
    let m = bundled_model();
    let p = paper_predictors();
    for kbps in linear_grid(50.0, 1500.0, 30).unwrap() {
        for budget in [1.0, 16.0, 100.0, 1000.0] {
            for opts in [
                EvalOptions::default(),
                EvalOptions {
                    include_loading: true,
                    ..Default::default()
                },
            ] {
                let req = PlanRequest::new(&m, &p, kbps * 1e3, budget, opts).unwrap();
                let a = planner::plan(&req);
                let b = planner::brute_force_plan(&req);
                assert_eq!(a.is_feasible(), b.is_feasible());
                if let (Some(x), Some(y)) = (a.selected(), b.selected()) {
                    assert_eq!((x.exit, x.partition), (y.exit, y.partition));
                }
            }
        }
    }
}

fn exits_non_decreasing(rows: &[edgent_core::simulator::SweepRow]) -> bool {
    let idx: Vec<usize> = rows.iter().map(|r| r.exit.unwrap_or(0)).collect();
    idx.windows(2).all(|w| w[0] <= w[1])
}

#[test]
fn sweeps_are_monotone() {
    let m = bundled_model();
    let p = paper_predictors();
    for options in [
        EvalOptions::default(),
        EvalOptions {
            include_loading: true,
            ..Default::default()
        },
    ] {
        let bw = sweep(
            &m,
            &p,
            &SweepSpec {
                axis: SweepAxis::Bandwidth,
                grid: linear_grid(50.0, 1500.0, 30).unwrap(),
                fixed: 1000.0,
                options,
            },
        )
        .unwrap();
        assert_eq!(bw.len(), 30);
        assert!(exits_non_decreasing(&bw));
        let budget = sweep(
            &m,
            &p,
            &SweepSpec {
                axis: SweepAxis::Budget,
                grid: linear_grid(100.0, 1000.0, 10).unwrap(),
                fixed: 500.0,
                options,
            },
        )
        .unwrap();
        assert!(exits_non_decreasing(&budget));
        for r in bw.iter().chain(&budget) {
            assert_eq!(r.accuracy >= 0.0, r.feasible);
        }
    }
}

#[test]
fn fine_budget_sweep_is_monotone_and_starts_infeasible() {
    let m = bundled_model();
    let p = paper_predictors();
    let rows = sweep(
        &m,
        &p,
        &SweepSpec {
            axis: SweepAxis::Budget,
            grid: linear_grid(1.0, 40.0, 79).unwrap(),
            fixed: 500.0,
            options: EvalOptions::default(),
        },
    )
    .unwrap();
    assert!(!rows[0].feasible);
    assert_eq!(rows[0].accuracy, INFEASIBLE_ACCURACY);
    assert!(rows.last().unwrap().feasible);
    assert!(exits_non_decreasing(&rows));
}

#[test]
fn compare_dominance_at_400_kbps() {
    let m = bundled_model();
    let p = paper_predictors();
    let budgets = linear_grid(1.0, 1500.0, 300).unwrap();
    let rows = compare_methods(&m, &p, &budgets, 400e3, &EvalOptions::default()).unwrap();
    for r in &rows {
        assert!(r.edgent >= r.device_only && r.edgent >= r.edge_only && r.edgent >= r.partition_only);
    }
    let first = &rows[0];
    assert_eq!(
        [first.device_only, first.edge_only, first.partition_only, first.edgent],
        [INFEASIBLE_ACCURACY; 4]
    );
    let last = rows.last().unwrap();
    assert_eq!(last.edgent, 0.78);
}

// Found by scanning budgets at 400 kbps: exit 1 runs on the device within
// this budget while no partition of exit 5 does.
const JOINT_ONLY_BUDGET_MS: f64 = 16.0;

#[test]
fn joint_search_beats_partition_only_at_intermediate_budget() {
    let m = bundled_model();
    let p = paper_predictors();
    let opts = EvalOptions::default();
    let budgets = linear_grid(0.5, 100.0, 200).unwrap();
    let rows = compare_methods(&m, &p, &budgets, 400e3, &opts).unwrap();
    assert!(rows
        .iter()
        .any(|r| r.edgent >= 0.0 && r.partition_only == INFEASIBLE_ACCURACY));

    let row = &compare_methods(&m, &p, &[JOINT_ONLY_BUDGET_MS], 400e3, &opts).unwrap()[0];
    assert!(row.edgent > 0.0);
    assert_eq!(row.partition_only, INFEASIBLE_ACCURACY);
}

#[test]
fn edge_only_endpoints() {
    // input size solved from (1 Mbps, 123 ms) and (50 kbps, 2317 ms)
    let bytes: f64 = (2317.0 - 123.0) / (8.0 / 50e3 - 8.0 / 1e6) / 1000.0;
    assert!((bytes - 14_434.2).abs() < 0.1, "{bytes}");
    for input_bytes in [bytes.round() as u64, 14_419] {
        let at = |bw: f64| {
            simulate_edge_only(&ScenarioConfig {
                server_compute_ms: 10.0,
                input_bytes,
                bandwidth_bps: bw,
                jitter: None,
            })
            .unwrap()
        };
        let fast = at(1e6);
        let slow = at(50e3);
        assert!((fast - 123.0).abs() / 123.0 < 0.05, "{fast}");
        assert!((slow - 2317.0).abs() / 2317.0 < 0.02, "{slow}");
    }
    let fast = simulate_edge_only(&ScenarioConfig {
        server_compute_ms: 10.0,
        input_bytes: 14_419,
        bandwidth_bps: 1e6,
        jitter: None,
    })
    .unwrap();
    assert!((fast - 125.352).abs() < 1e-9);
}

#[test]
fn bundled_predictions_are_finite() {
    let m = bundled_model();
    let p = paper_predictors();
    for layer in m.layers() {
        for side in [Side::Device, Side::Edge] {
            let v = p.predict_layer(layer, side);
            assert!(v.is_finite() && v >= 0.0);
        }
    }
    // a real forward pass to catch shape drift in the data file
    let net = Network::build(&m).unwrap();
    let (class, conf) = net.infer(1, Tensor::random(vec![3, 32, 32], 7)).unwrap();
    assert!(class < 10 && conf > 0.0 && conf <= 1.0);
}
