//! Joint exit-point / partition-point search.
//!
//! Partition convention: `p` is the number of layers executed on the edge.
//! The edge runs chain positions `1..=p`, the device runs `p+1..=N`.
//! `p = 0` is device-only (no transfer at all), `p = N` is edge-only (input
//! upload plus edge compute; the returned result is free unless
//! `count_result_transfer` is set).
//!
//! Latency of exit `i` at partition `p`:
//!
//! ```text
//! A(i, p) = [p > 0] T(input) + Σ_{j<=p} ES_j + [0 < p < N] T(D_p) + Σ_{j>p} ED_j
//!           (+ [p > 0 && count_result_transfer] T(D_N))
//!           (+ loading of both segments when enabled)
//! T(bytes) = 8 * bytes / bandwidth_bps * 1000   [ms]
//! ```
//!
//! The search walks exits from the largest down and returns the first whose
//! best partition meets the budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BranchyModel, ModelError};
use crate::predictor::{PredictorSet, Side};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("partition {partition} out of range 0..={len} for exit {exit}")]
    PartitionOutOfRange { exit: usize, partition: usize, len: usize },
    #[error("inconsistent segment timings: {0}")]
    Timings(String),
}

/// Transfer time in ms of `bytes` over a `bandwidth_bps` bit/s link.
pub fn transfer_ms(bytes: u64, bandwidth_bps: f64) -> f64 {
    8.0 * bytes as f64 / bandwidth_bps * 1000.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalOptions {
    /// Charge sub-model loading on both sides.
    pub include_loading: bool,
    /// Charge the return of the final output whenever the edge participates.
    pub count_result_transfer: bool,
    /// Replaces the model's input payload size.
    pub input_bytes: Option<u64>,
}

/// Network conditions for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub bandwidth_bps: f64,
    pub input_bytes: u64,
    pub count_result_transfer: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub edge_compute_ms: f64,
    pub device_compute_ms: f64,
    pub input_transfer_ms: f64,
    pub intermediate_transfer_ms: f64,
    pub result_transfer_ms: f64,
    pub loading_ms: f64,
}

impl Breakdown {
    /// Sum of all components, always in this order.
    pub fn total(&self) -> f64 {
        self.input_transfer_ms
            + self.edge_compute_ms
            + self.intermediate_transfer_ms
            + self.device_compute_ms
            + self.result_transfer_ms
            + self.loading_ms
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Breakdown {
        Breakdown {
            edge_compute_ms: f(self.edge_compute_ms),
            device_compute_ms: f(self.device_compute_ms),
            input_transfer_ms: f(self.input_transfer_ms),
            intermediate_transfer_ms: f(self.intermediate_transfer_ms),
            result_transfer_ms: f(self.result_transfer_ms),
            loading_ms: f(self.loading_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    /// 1-based exit index.
    pub exit: usize,
    /// Number of edge-executed layers.
    pub partition: usize,
    pub predicted_latency_ms: f64,
    pub accuracy: f64,
    pub breakdown: Breakdown,
}

/// Per-layer predictions of one exit chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTimings {
    exit: usize,
    accuracy: f64,
    device_ms: Vec<f64>,
    edge_ms: Vec<f64>,
    output_bytes: Vec<u64>,
    // indexed by partition, 0..=N
    loading_ms: Vec<f64>,
}

impl SegmentTimings {
    pub fn new(
        exit: usize,
        accuracy: f64,
        device_ms: Vec<f64>,
        edge_ms: Vec<f64>,
        output_bytes: Vec<u64>,
    ) -> Result<Self, PlanError> {
        let n = device_ms.len();
        if n == 0 || edge_ms.len() != n || output_bytes.len() != n {
            return Err(PlanError::Timings(format!(
                "need equal non-empty lengths, got device {}, edge {}, outputs {}",
                n,
                edge_ms.len(),
                output_bytes.len()
            )));
        }
        if device_ms.iter().chain(&edge_ms).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(PlanError::Timings("latencies must be finite and >= 0".into()));
        }
        Ok(SegmentTimings {
            exit,
            accuracy,
            device_ms,
            edge_ms,
            output_bytes,
            loading_ms: vec![0.0; n + 1],
        })
    }

    /// Predicts `ED_j`, `ES_j` for every layer of `exit`; with
    /// `include_loading`, also the load time of both segments at every split.
    pub fn from_model(
        model: &BranchyModel,
        predictors: &PredictorSet,
        exit: usize,
        include_loading: bool,
    ) -> Result<Self, PlanError> {
        let layers: Vec<_> = model.chain(exit)?.collect();
        let device_ms = layers
            .iter()
            .map(|l| predictors.predict_layer(l, Side::Device))
            .collect();
        let edge_ms = layers.iter().map(|l| predictors.predict_layer(l, Side::Edge)).collect();
        let output_bytes = layers.iter().map(|l| l.output_bytes).collect();
        let accuracy = model.exit(exit)?.accuracy;
        let mut timings = SegmentTimings::new(exit, accuracy, device_ms, edge_ms, output_bytes)?;
        if include_loading {
            let n = layers.len();
            timings.loading_ms = (0..=n)
                .map(|p| {
                    let edge = (p > 0)
                        .then(|| model.submodel_bytes(exit, 0..p))
                        .transpose()?
                        .map_or(0.0, |b| predictors.predict_loading(b, Side::Edge));
                    let device = (p < n)
                        .then(|| model.submodel_bytes(exit, p..n))
                        .transpose()?
                        .map_or(0.0, |b| predictors.predict_loading(b, Side::Device));
                    Ok::<_, ModelError>(edge + device)
                })
                .collect::<Result<_, _>>()?;
        }
        Ok(timings)
    }

    pub fn exit(&self) -> usize {
        self.exit
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    pub fn len(&self) -> usize {
        self.device_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.device_ms.is_empty()
    }

    pub fn device_ms(&self) -> &[f64] {
        &self.device_ms
    }

    pub fn edge_ms(&self) -> &[f64] {
        &self.edge_ms
    }

    pub fn output_bytes(&self) -> &[u64] {
        &self.output_bytes
    }

    /// Latency breakdown at `partition`.
    pub fn breakdown(&self, partition: usize, link: &Link) -> Result<Breakdown, PlanError> {
        let n = self.len();
        if partition > n {
            return Err(PlanError::PartitionOutOfRange {
                exit: self.exit,
                partition,
                len: n,
            });
        }
        // an empty f64 sum is -0.0
        let edge_compute_ms = self.edge_ms[..partition].iter().sum::<f64>() + 0.0;
        let device_compute_ms = self.device_ms[partition..].iter().sum::<f64>() + 0.0;
        let uses_edge = partition > 0;
        Ok(Breakdown {
            edge_compute_ms,
            device_compute_ms,
            input_transfer_ms: if uses_edge {
                transfer_ms(link.input_bytes, link.bandwidth_bps)
            } else {
                0.0
            },
            intermediate_transfer_ms: if uses_edge && partition < n {
                transfer_ms(self.output_bytes[partition - 1], link.bandwidth_bps)
            } else {
                0.0
            },
            result_transfer_ms: if uses_edge && link.count_result_transfer {
                transfer_ms(self.output_bytes[n - 1], link.bandwidth_bps)
            } else {
                0.0
            },
            loading_ms: self.loading_ms[partition],
        })
    }

    pub fn evaluate(&self, partition: usize, link: &Link) -> Result<PartitionPlan, PlanError> {
        let breakdown = self.breakdown(partition, link)?;
        Ok(PartitionPlan {
            exit: self.exit,
            partition,
            predicted_latency_ms: breakdown.total(),
            accuracy: self.accuracy,
            breakdown,
        })
    }

    /// Minimum-latency partition; ties go to the smaller partition.
    pub fn best_partition(&self, link: &Link) -> PartitionPlan {
        (0..=self.len())
            .map(|p| self.evaluate(p, link).expect("partition in range"))
            .reduce(|best, cand| {
                if cand.predicted_latency_ms < best.predicted_latency_ms {
                    cand
                } else {
                    best
                }
            })
            .expect("at least partition 0")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanOutcome {
    Feasible(PartitionPlan),
    /// Nothing met the budget; carries the lowest-latency plan seen.
    Infeasible {
        best: PartitionPlan,
    },
}

impl PlanOutcome {
    pub fn is_feasible(&self) -> bool {
        matches!(self, PlanOutcome::Feasible(_))
    }

    pub fn selected(&self) -> Option<&PartitionPlan> {
        match self {
            PlanOutcome::Feasible(p) => Some(p),
            PlanOutcome::Infeasible { .. } => None,
        }
    }

    /// The selected plan, or the diagnostic plan when infeasible.
    pub fn plan(&self) -> &PartitionPlan {
        match self {
            PlanOutcome::Feasible(p) | PlanOutcome::Infeasible { best: p } => p,
        }
    }

    pub fn report(&self) -> PlanReport {
        let p = self.plan();
        PlanReport {
            exit: p.exit,
            partition: p.partition,
            predicted_latency_ms: p.predicted_latency_ms,
            accuracy: p.accuracy,
            feasible: self.is_feasible(),
            breakdown: p.breakdown,
        }
    }
}

/// Serialized form of a [`PlanOutcome`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub exit: usize,
    pub partition: usize,
    pub predicted_latency_ms: f64,
    pub accuracy: f64,
    pub feasible: bool,
    pub breakdown: Breakdown,
}

#[derive(Debug, Clone, Copy)]
pub struct PlanRequest<'a> {
    pub model: &'a BranchyModel,
    pub predictors: &'a PredictorSet,
    pub bandwidth_bps: f64,
    pub latency_budget_ms: f64,
    pub options: EvalOptions,
}

impl<'a> PlanRequest<'a> {
    pub fn new(
        model: &'a BranchyModel,
        predictors: &'a PredictorSet,
        bandwidth_bps: f64,
        latency_budget_ms: f64,
        options: EvalOptions,
    ) -> Result<Self, PlanError> {
        validate_bandwidth(bandwidth_bps)?;
        if !(latency_budget_ms > 0.0) {
            return Err(PlanError::InvalidRequest(format!(
                "latency budget must be > 0 ms, got {latency_budget_ms}"
            )));
        }
        Ok(PlanRequest {
            model,
            predictors,
            bandwidth_bps,
            latency_budget_ms,
            options,
        })
    }

    pub fn link(&self) -> Link {
        link_for(self.model, self.bandwidth_bps, &self.options)
    }

    /// Segment timings of every exit, exit 1 first.
    pub fn exit_timings(&self) -> Vec<SegmentTimings> {
        (1..=self.model.num_exits())
            .map(|i| {
                SegmentTimings::from_model(self.model, self.predictors, i, self.options.include_loading)
                    .expect("exit index in range")
            })
            .collect()
    }
}

fn validate_bandwidth(bandwidth_bps: f64) -> Result<(), PlanError> {
    if bandwidth_bps > 0.0 {
        Ok(())
    } else {
        Err(PlanError::InvalidRequest(format!(
            "bandwidth must be > 0 bit/s, got {bandwidth_bps}"
        )))
    }
}

fn link_for(model: &BranchyModel, bandwidth_bps: f64, options: &EvalOptions) -> Link {
    Link {
        bandwidth_bps,
        input_bytes: options.input_bytes.unwrap_or(model.input_bytes()),
        count_result_transfer: options.count_result_transfer,
    }
}

/// Latency of exit `exit` split at `partition`.
pub fn evaluate(
    model: &BranchyModel,
    predictors: &PredictorSet,
    exit: usize,
    partition: usize,
    bandwidth_bps: f64,
    options: &EvalOptions,
) -> Result<PartitionPlan, PlanError> {
    validate_bandwidth(bandwidth_bps)?;
    let timings = SegmentTimings::from_model(model, predictors, exit, options.include_loading)?;
    timings.evaluate(partition, &link_for(model, bandwidth_bps, options))
}

/// Best partition of exit `exit`; ties go to the smaller partition.
pub fn best_partition(
    model: &BranchyModel,
    predictors: &PredictorSet,
    exit: usize,
    bandwidth_bps: f64,
    options: &EvalOptions,
) -> Result<PartitionPlan, PlanError> {
    validate_bandwidth(bandwidth_bps)?;
    let timings = SegmentTimings::from_model(model, predictors, exit, options.include_loading)?;
    Ok(timings.best_partition(&link_for(model, bandwidth_bps, options)))
}

/// Largest exit whose best partition meets the budget.
pub fn plan(request: &PlanRequest<'_>) -> PlanOutcome {
    search(&request.exit_timings(), &request.link(), request.latency_budget_ms)
}

/// Exhaustive enumeration of every `(exit, partition)` pair.
pub fn brute_force_plan(request: &PlanRequest<'_>) -> PlanOutcome {
    brute_force_search(&request.exit_timings(), &request.link(), request.latency_budget_ms)
}

/// The search over precomputed timings; `exits` is ordered by exit index.
pub fn search(exits: &[SegmentTimings], link: &Link, budget_ms: f64) -> PlanOutcome {
    let mut best_seen: Option<PartitionPlan> = None;
    for timings in exits.iter().rev() {
        let best = timings.best_partition(link);
        if best.predicted_latency_ms <= budget_ms {
            return PlanOutcome::Feasible(best);
        }
        if best_seen
            .as_ref()
            .is_none_or(|b| best.predicted_latency_ms < b.predicted_latency_ms)
        {
            best_seen = Some(best);
        }
    }
    PlanOutcome::Infeasible {
        best: best_seen.expect("models have at least one exit"),
    }
}

pub fn brute_force_search(exits: &[SegmentTimings], link: &Link, budget_ms: f64) -> PlanOutcome {
    let all: Vec<PartitionPlan> = exits
        .iter()
        .flat_map(|t| (0..=t.len()).map(move |p| t.evaluate(p, link).expect("in range")))
        .collect();

    let feasible = all
        .iter()
        .filter(|c| c.predicted_latency_ms <= budget_ms)
        .min_by(|a, b| {
            b.exit
                .cmp(&a.exit)
                .then(a.predicted_latency_ms.total_cmp(&b.predicted_latency_ms))
                .then(a.partition.cmp(&b.partition))
        });
    if let Some(p) = feasible {
        return PlanOutcome::Feasible(p.clone());
    }
    let best = all
        .iter()
        .min_by(|a, b| {
            a.predicted_latency_ms
                .total_cmp(&b.predicted_latency_ms)
                .then(b.exit.cmp(&a.exit))
                .then(a.partition.cmp(&b.partition))
        })
        .expect("at least one candidate")
        .clone();
    PlanOutcome::Infeasible { best }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MBPS: f64 = 1e6;

    fn toy() -> SegmentTimings {
        SegmentTimings::new(
            1,
            0.8,
            vec![10.0, 20.0, 30.0],
            vec![1.0, 2.0, 3.0],
            vec![4000, 1000, 500],
        )
        .unwrap()
    }

    fn link(bandwidth_bps: f64) -> Link {
        Link {
            bandwidth_bps,
            input_bytes: 8000,
            count_result_transfer: false,
        }
    }

    /// Independent transcription of the latency formula for the toy chain.
    fn oracle(t: &SegmentTimings, p: usize, l: &Link) -> f64 {
        let n = t.len();
        let tx = |b: u64| b as f64 * 8.0 * 1000.0 / l.bandwidth_bps;
        let mut total = 0.0;
        for j in 0..n {
            total += if j < p { t.edge_ms()[j] } else { t.device_ms()[j] };
        }
        if p > 0 {
            total += tx(l.input_bytes);
        }
        if p > 0 && p < n {
            total += tx(t.output_bytes()[p - 1]);
        }
        total
    }

    #[test]
    fn toy_chain_at_one_mbps() {
        let t = toy();
        let l = link(MBPS);
        let expected = [60.0, 147.0, 105.0, 70.0];
        for (p, want) in expected.into_iter().enumerate() {
            let got = t.evaluate(p, &l).unwrap().predicted_latency_ms;
            assert!((got - want).abs() < 1e-9, "p={p}: {got} vs {want}");
            assert!((got - oracle(&t, p, &l)).abs() < 1e-9);
        }
        let best = t.best_partition(&l);
        assert_eq!((best.partition, best.predicted_latency_ms), (0, 60.0));
    }

    #[test]
    fn toy_chain_at_ten_mbps_prefers_edge() {
        let t = toy();
        let l = link(10.0 * MBPS);
        let candidates: Vec<f64> = (0..=3).map(|p| oracle(&t, p, &l)).collect();
        let best = t.best_partition(&l);
        assert_eq!(best.partition, 3);
        assert!((best.predicted_latency_ms - 12.4).abs() < 1e-9);
        assert!(candidates.iter().all(|&c| c >= best.predicted_latency_ms - 1e-12));
    }

    #[test]
    fn unbounded_bandwidth_leaves_edge_compute() {
        let got = toy().evaluate(3, &link(1e15)).unwrap().predicted_latency_ms;
        assert!((got - 6.0).abs() < 1e-6);
    }

    #[test]
    fn zero_device_compute_device_only_is_free() {
        let t = SegmentTimings::new(1, 0.5, vec![0.0; 4], vec![0.0; 4], vec![10; 4]).unwrap();
        let l = link(MBPS);
        assert_eq!(t.evaluate(0, &l).unwrap().predicted_latency_ms, 0.0);
        assert_eq!(t.best_partition(&l).partition, 0);
    }

    #[test]
    fn result_transfer_flag() {
        let mut l = link(MBPS);
        l.count_result_transfer = true;
        let t = toy();
        let b = t.breakdown(3, &l).unwrap();
        assert!((b.result_transfer_ms - 4.0).abs() < 1e-12);
        assert_eq!(t.breakdown(0, &l).unwrap().result_transfer_ms, 0.0);
    }

    #[test]
    fn partition_out_of_range() {
        assert!(matches!(
            toy().evaluate(4, &link(MBPS)),
            Err(PlanError::PartitionOutOfRange {
                partition: 4,
                len: 3,
                ..
            })
        ));
    }

    fn two_exits() -> Vec<SegmentTimings> {
        // exit 1: best 40 ms device-only; exit 2: best 120 ms device-only
        vec![
            SegmentTimings::new(1, 0.6, vec![15.0, 25.0], vec![500.0, 500.0], vec![10, 10]).unwrap(),
            SegmentTimings::new(
                2,
                0.9,
                vec![30.0, 40.0, 50.0],
                vec![500.0, 500.0, 500.0],
                vec![10, 10, 10],
            )
            .unwrap(),
        ]
    }

    #[test]
    fn budget_selects_largest_feasible_exit() {
        let exits = two_exits();
        let l = link(MBPS);
        assert_eq!(exits[0].best_partition(&l).predicted_latency_ms, 40.0);
        assert_eq!(exits[1].best_partition(&l).predicted_latency_ms, 120.0);

        let got = search(&exits, &l, 100.0);
        assert_eq!(got.selected().map(|p| (p.exit, p.partition)), Some((1, 0)));
        assert_eq!(got, brute_force_search(&exits, &l, 100.0));

        let got = search(&exits, &l, 1000.0);
        assert_eq!(got.selected().map(|p| p.exit), Some(2));
        assert_eq!(got, brute_force_search(&exits, &l, 1000.0));
    }

    #[test]
    fn tiny_budget_is_infeasible_with_diagnostics() {
        let exits = two_exits();
        let l = link(MBPS);
        let got = search(&exits, &l, 1.0);
        match &got {
            PlanOutcome::Infeasible { best } => {
                assert_eq!((best.exit, best.partition), (1, 0));
                assert_eq!(best.predicted_latency_ms, 40.0);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(got, brute_force_search(&exits, &l, 1.0));
        assert!(!got.report().feasible);
    }

    #[test]
    fn brute_force_agrees_on_toy_chain() {
        let exits = vec![toy()];
        for bw in [0.5 * MBPS, MBPS, 10.0 * MBPS] {
            for budget in [1.0, 61.0, 100.0, 1000.0] {
                assert_eq!(
                    search(&exits, &link(bw), budget),
                    brute_force_search(&exits, &link(bw), budget)
                );
            }
        }
    }

    fn arb_exits() -> impl Strategy<Value = Vec<SegmentTimings>> {
        (1usize..=6).prop_flat_map(|m| {
            prop::collection::vec(
                (
                    prop::collection::vec(0.0f64..50.0, 1..=5),
                    prop::collection::vec(0.0f64..50.0, 30),
                    prop::collection::vec(1u64..200_000, 30),
                    0.0f64..1.0,
                ),
                m,
            )
            .prop_map(|raw| {
                let mut len = 0;
                raw.into_iter()
                    .enumerate()
                    .map(|(i, (dev, edge, out, acc))| {
                        len += dev.len();
                        let dev: Vec<f64> = dev.iter().cycle().take(len).copied().collect();
                        SegmentTimings::new(i + 1, acc, dev, edge[..len].to_vec(), out[..len].to_vec()).unwrap()
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn search_matches_brute_force(
            exits in arb_exits(),
            bw in 1e4f64..1e8,
            budget in 0.1f64..500.0,
            input in 0u64..100_000,
        ) {
            let l = Link { bandwidth_bps: bw, input_bytes: input, count_result_transfer: false };
            let a = search(&exits, &l, budget);
            let b = brute_force_search(&exits, &l, budget);
            prop_assert_eq!(a.is_feasible(), b.is_feasible());
            prop_assert_eq!((a.plan().exit, a.plan().partition), (b.plan().exit, b.plan().partition));
        }

        #[test]
        fn breakdown_sums_to_latency(exits in arb_exits(), bw in 1e4f64..1e8, flag: bool) {
            let l = Link { bandwidth_bps: bw, input_bytes: 5000, count_result_transfer: flag };
            for t in &exits {
                for p in 0..=t.len() {
                    let plan = t.evaluate(p, &l).unwrap();
                    prop_assert!((plan.breakdown.total() - plan.predicted_latency_ms).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn selected_exit_monotone_in_bandwidth_and_budget(
            exits in arb_exits(),
            bw in 1e4f64..1e7,
            budget in 1.0f64..300.0,
        ) {
            let sel = |bw: f64, budget: f64| {
                let l = Link { bandwidth_bps: bw, input_bytes: 20_000, count_result_transfer: false };
                search(&exits, &l, budget).selected().map_or(0, |p| p.exit)
            };
            prop_assert!(sel(bw, budget) <= sel(bw * 2.0, budget));
            prop_assert!(sel(bw, budget) <= sel(bw, budget * 2.0));
        }
    }
}
