//! Offline profiling: time reference kernels over a ladder of sizes, write
//! the measurements as CSV, and fit a [`PredictorSet`] from such a CSV.

use std::collections::BTreeMap;
use std::fs::File;
use std::hint::black_box;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{KernelError, LayerOp, Tensor};
use crate::model::{ConvParams, LayerKind, LayerSpec};
use crate::predictor::{self, CostKind, FeatureVector, FitError, PredictorSet, Side, SideModels};

pub const MIN_REPETITIONS: usize = 3;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("invalid benchmark case: {0}")]
    InvalidCase(String),
    #[error("{kind} case ran below timer resolution (median 0 ns); enlarge it")]
    TimerResolution { kind: CostKind },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("measurement csv")]
    Csv(#[from] csv::Error),
    #[error("measurement csv row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("measurements are missing kinds: {}", names(.0))]
    MissingKinds(Vec<CostKind>),
    #[error("fits failed: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Fit(Vec<FitError>),
}

fn names(kinds: &[CostKind]) -> String {
    kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
}

/// Kind-specific workload geometry. Spatial maps are square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseShape {
    Conv {
        maps: usize,
        side: usize,
        filter: usize,
        stride: usize,
        filters: usize,
    },
    /// relu, lrn and dropout
    Elementwise {
        channels: usize,
        side: usize,
    },
    Pool {
        channels: usize,
        side: usize,
        out_side: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Model loading: a parameter blob of this many bytes.
    Blob {
        bytes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    #[serde(with = "cost_kind_str")]
    pub kind: CostKind,
    pub shape: CaseShape,
    pub repetitions: usize,
    pub warmup_runs: usize,
}

mod cost_kind_str {
    use super::CostKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &CostKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(k.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CostKind, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl BenchmarkCase {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.repetitions < MIN_REPETITIONS {
            return Err(ProfileError::InvalidCase(format!(
                "repetitions {} < {MIN_REPETITIONS}",
                self.repetitions
            )));
        }
        let dims: &[usize] = match (self.kind, &self.shape) {
            (
                CostKind::Layer(LayerKind::Convolution),
                CaseShape::Conv {
                    maps,
                    side,
                    filter,
                    stride,
                    filters,
                },
            ) => &[*maps, *side, *filter, *stride, *filters],
            (
                CostKind::Layer(LayerKind::Relu | LayerKind::LocalResponseNormalization | LayerKind::Dropout),
                CaseShape::Elementwise { channels, side },
            ) => &[*channels, *side],
            (
                CostKind::Layer(LayerKind::Pooling),
                CaseShape::Pool {
                    channels,
                    side,
                    out_side,
                },
            ) => {
                if out_side > side {
                    return Err(ProfileError::InvalidCase("pool output larger than input".into()));
                }
                &[*channels, *side, *out_side]
            }
            (CostKind::Layer(LayerKind::FullyConnected), CaseShape::Dense { inputs, outputs }) => &[*inputs, *outputs],
            (CostKind::ModelLoading, CaseShape::Blob { bytes }) => &[*bytes / 4],
            (kind, shape) => {
                return Err(ProfileError::InvalidCase(format!(
                    "shape {shape:?} does not fit kind {kind}"
                )));
            }
        };
        if dims.contains(&0) {
            return Err(ProfileError::InvalidCase(format!(
                "{} case has a zero-sized dimension",
                self.kind
            )));
        }
        Ok(())
    }

    /// The equivalent layer and its input dims, or `None` for model loading.
    pub fn layer(&self) -> Option<(LayerSpec, Vec<usize>)> {
        let spec = |kind, input: usize, output: usize, conv| LayerSpec {
            name: format!("bench_{kind}"),
            kind,
            input_bytes: 4 * input as u64,
            output_bytes: 4 * output as u64,
            param_bytes: 0,
            conv,
        };
        match (self.kind, self.shape) {
            (
                CostKind::Layer(kind),
                CaseShape::Conv {
                    maps,
                    side,
                    filter,
                    stride,
                    filters,
                },
            ) => {
                let out_side = (side - 1) / stride + 1;
                let conv = ConvParams {
                    input_feature_maps: maps as u32,
                    filter_size: filter as u32,
                    stride: stride as u32,
                    num_filters: filters as u32,
                };
                Some((
                    spec(kind, maps * side * side, filters * out_side * out_side, Some(conv)),
                    vec![maps, side, side],
                ))
            }
            (CostKind::Layer(kind), CaseShape::Elementwise { channels, side }) => {
                let n = channels * side * side;
                Some((spec(kind, n, n, None), vec![channels, side, side]))
            }
            (
                CostKind::Layer(kind),
                CaseShape::Pool {
                    channels,
                    side,
                    out_side,
                },
            ) => Some((
                spec(kind, channels * side * side, channels * out_side * out_side, None),
                vec![channels, side, side],
            )),
            (CostKind::Layer(kind), CaseShape::Dense { inputs, outputs }) => {
                Some((spec(kind, inputs, outputs, None), vec![inputs]))
            }
            _ => None,
        }
    }

    pub fn features(&self) -> FeatureVector {
        match self.layer() {
            Some((layer, _)) => predictor::extract_features(&layer),
            None => match self.shape {
                CaseShape::Blob { bytes } => FeatureVector::one(bytes as f64),
                _ => unreachable!("validated"),
            },
        }
    }
}

/// One profiled data point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementRow {
    pub kind: CostKind,
    pub features: FeatureVector,
    /// Median over repetitions.
    pub latency_ms: f64,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    kind: String,
    x1: f64,
    x2: Option<f64>,
    latency_ms: f64,
}

const CSV_HEADER: [&str; 4] = ["kind", "x1", "x2", "latency_ms"];

/// Runs the kernel a case describes. Model loading decodes `input` as a
/// little-endian `f32` blob.
pub fn run_kernel(case: &BenchmarkCase, input: &Tensor) -> Result<Tensor, ProfileError> {
    case.validate()?;
    match case.layer() {
        Some((layer, _)) => Ok(LayerOp::build(&layer, input.dims())?.run(input)?),
        None => {
            let bytes: Vec<u8> = input.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let decoded = decode_blob(&bytes);
            Ok(Tensor::new(vec![decoded.len()], decoded)?)
        }
    }
}

fn decode_blob(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    }
}

/// Times a case; returns the row and the raw per-repetition samples in ms.
pub fn benchmark_with_samples(case: &BenchmarkCase, seed: u64) -> Result<(MeasurementRow, Vec<f64>), ProfileError> {
    case.validate()?;
    let mut samples = Vec::with_capacity(case.repetitions);
    match case.layer() {
        Some((layer, dims)) => {
            let op = LayerOp::build(&layer, &dims)?;
            let input = Tensor::random(dims, seed);
            for _ in 0..case.warmup_runs {
                black_box(op.run(&input)?);
            }
            for _ in 0..case.repetitions {
                let start = Instant::now();
                let out = op.run(black_box(&input))?;
                samples.push(start.elapsed().as_secs_f64() * 1000.0);
                black_box(out);
            }
        }
        None => {
            let CaseShape::Blob { bytes } = case.shape else {
                unreachable!("validated");
            };
            let blob: Vec<u8> = Tensor::random(vec![bytes / 4], seed)
                .data()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            for _ in 0..case.warmup_runs {
                black_box(decode_blob(&blob));
            }
            for _ in 0..case.repetitions {
                let start = Instant::now();
                let out = decode_blob(black_box(&blob));
                samples.push(start.elapsed().as_secs_f64() * 1000.0);
                black_box(out);
            }
        }
    }
    let latency_ms = median(&mut samples.clone());
    if !(latency_ms > 0.0) {
        return Err(ProfileError::TimerResolution { kind: case.kind });
    }
    Ok((
        MeasurementRow {
            kind: case.kind,
            features: case.features(),
            latency_ms,
        },
        samples,
    ))
}

pub fn benchmark(case: &BenchmarkCase, seed: u64) -> Result<MeasurementRow, ProfileError> {
    benchmark_with_samples(case, seed).map(|(row, _)| row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteSize {
    Default,
    Small,
}

/// Eight cases per kind on a geometric size ladder. The two regressors of
/// two-feature kinds vary independently so every fit is well posed.
pub fn default_suite(size: SuiteSize) -> Vec<BenchmarkCase> {
    let (reps, warmup, scale) = match size {
        SuiteSize::Default => (15, 2, 2),
        SuiteSize::Small => (5, 1, 1),
    };
    let case = |kind, shape| BenchmarkCase {
        kind,
        shape,
        repetitions: reps,
        warmup_runs: warmup,
    };
    let mut cases = Vec::new();

    let conv_maps = [2, 4, 8, 16, 3, 6, 12, 24];
    let conv_filters = [4, 8, 16, 32, 32, 16, 8, 4];
    for i in 0..8 {
        cases.push(case(
            CostKind::Layer(LayerKind::Convolution),
            CaseShape::Conv {
                maps: conv_maps[i],
                side: 8 * scale,
                filter: if i % 2 == 0 { 3 } else { 5 },
                stride: if i % 3 == 2 { 2 } else { 1 },
                filters: conv_filters[i],
            },
        ));
    }

    for kind in [
        LayerKind::Relu,
        LayerKind::LocalResponseNormalization,
        LayerKind::Dropout,
    ] {
        for i in 0..8 {
            let side = (8.0 * 2f64.sqrt().powi(i)).round() as usize;
            cases.push(case(
                CostKind::Layer(kind),
                CaseShape::Elementwise {
                    channels: 8 * scale,
                    side,
                },
            ));
        }
    }

    for i in 0..8 {
        let side = (8 * scale) << (i / 2);
        cases.push(case(
            CostKind::Layer(LayerKind::Pooling),
            CaseShape::Pool {
                channels: 4 * scale,
                side,
                out_side: if i % 2 == 0 { side / 2 } else { side / 4 },
            },
        ));
    }

    let fc_inputs = [64, 128, 256, 512, 128, 256, 512, 1024];
    let fc_outputs = [16, 64, 32, 128, 128, 16, 64, 32];
    for i in 0..8 {
        cases.push(case(
            CostKind::Layer(LayerKind::FullyConnected),
            CaseShape::Dense {
                inputs: fc_inputs[i] * scale,
                outputs: fc_outputs[i] * scale,
            },
        ));
    }

    for i in 0..8 {
        cases.push(case(
            CostKind::ModelLoading,
            CaseShape::Blob {
                bytes: ((16 << 10) * scale) << i,
            },
        ));
    }
    cases
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileOptions {
    pub seed: u64,
    /// Multiplies every measured latency, to emulate a slower device.
    pub slowdown: f64,
    /// Pin the calling thread to its current CPU while profiling.
    pub pin_cpu: bool,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            seed: 0,
            slowdown: 1.0,
            pin_cpu: false,
        }
    }
}

#[cfg(target_os = "linux")]
fn pin_to_current_cpu() -> bool {
    // SAFETY: cpu_set_t is plain data; sched_* only read/write the set we own.
    unsafe {
        let cpu = libc::sched_getcpu();
        if cpu < 0 {
            return false;
        }
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu as usize, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

#[cfg(not(target_os = "linux"))]
fn pin_to_current_cpu() -> bool {
    false
}

/// Benchmarks every case in order and writes the CSV to `out`.
pub fn profile_suite(
    plan: &[BenchmarkCase],
    out: &Path,
    options: &ProfileOptions,
) -> Result<Vec<MeasurementRow>, ProfileError> {
    if !(options.slowdown > 0.0) {
        return Err(ProfileError::InvalidCase("slowdown must be > 0".into()));
    }
    if options.pin_cpu && !pin_to_current_cpu() {
        log::warn!("could not pin profiling thread to a CPU");
    }
    let mut rows = Vec::with_capacity(plan.len());
    for (i, case) in plan.iter().enumerate() {
        let mut row = benchmark(case, options.seed.wrapping_add(i as u64))?;
        row.latency_ms *= options.slowdown;
        log::debug!("{} {:?} -> {:.4} ms", row.kind, row.features.as_slice(), row.latency_ms);
        rows.push(row);
    }
    let file = File::create(out).map_err(|source| ProfileError::Io {
        path: out.to_owned(),
        source,
    })?;
    write_measurements(file, &rows)?;
    Ok(rows)
}

pub fn write_measurements<W: io::Write>(writer: W, rows: &[MeasurementRow]) -> Result<(), ProfileError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        let x = row.features.as_slice();
        w.serialize(CsvRow {
            kind: row.kind.as_str().to_string(),
            x1: x[0],
            x2: x.get(1).copied(),
            latency_ms: row.latency_ms,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_measurements<R: io::Read>(reader: R) -> Result<Vec<MeasurementRow>, ProfileError> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(ProfileError::BadRow {
            row: 0,
            reason: format!("header must be {}", CSV_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<CsvRow>().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let kind: CostKind = rec
            .kind
            .parse()
            .map_err(|reason| ProfileError::BadRow { row, reason })?;
        let features = match (kind.arity(), rec.x2) {
            (1, None) => FeatureVector::one(rec.x1),
            (2, Some(x2)) => FeatureVector::two(rec.x1, x2),
            (arity, _) => {
                return Err(ProfileError::BadRow {
                    row,
                    reason: format!("{kind} takes {arity} feature(s)"),
                });
            }
        };
        if !(rec.latency_ms > 0.0) || features.as_slice().iter().any(|v| !(*v >= 0.0)) {
            return Err(ProfileError::BadRow {
                row,
                reason: "latency must be > 0 and features >= 0".into(),
            });
        }
        rows.push(MeasurementRow {
            kind,
            features,
            latency_ms: rec.latency_ms,
        });
    }
    Ok(rows)
}

/// Fits all seven regressions of one side from measurements.
pub fn fit_side(rows: &[MeasurementRow], side: Side) -> Result<SideModels, ProfileError> {
    let mut by_kind: BTreeMap<CostKind, Vec<(FeatureVector, f64)>> = BTreeMap::new();
    for r in rows {
        by_kind.entry(r.kind).or_default().push((r.features, r.latency_ms));
    }
    let missing: Vec<CostKind> = CostKind::ALL.into_iter().filter(|k| !by_kind.contains_key(k)).collect();
    if !missing.is_empty() {
        return Err(ProfileError::MissingKinds(missing));
    }
    let mut fitted = Vec::new();
    let mut failures = Vec::new();
    for (kind, samples) in &by_kind {
        match predictor::fit(*kind, samples) {
            Ok(m) => fitted.push((*kind, m)),
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        return Err(ProfileError::Fit(failures));
    }
    Ok(SideModels::from_models(side, fitted).expect("all kinds fitted with matching arity"))
}

/// Fits `side` from the CSV at `measurements`. With `existing`, only that
/// side is replaced; without, both sides get the fitted models.
pub fn fit_from_csv(
    measurements: &Path,
    side: Side,
    existing: Option<&PredictorSet>,
) -> Result<PredictorSet, ProfileError> {
    let file = File::open(measurements).map_err(|source| ProfileError::Io {
        path: measurements.to_owned(),
        source,
    })?;
    let models = fit_side(&read_measurements(file)?, side)?;
    Ok(match existing {
        Some(set) => {
            let mut set = set.clone();
            *set.side_mut(side) = models;
            set
        }
        None => PredictorSet {
            device: models.clone(),
            edge: models,
        },
    })
}
