//! The device agent: estimates bandwidth, plans, and drives one session.

use std::io::{BufReader, Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::{Duration, Instant};

use edgent_core::kernels::Tensor;
use edgent_core::model::BranchyModel;
use edgent_core::planner::{self, EvalOptions, PlanReport, PlanRequest};
use edgent_core::predictor::{PredictorSet, Side};
use serde::Serialize;

use crate::engine::{classify, Engine};
use crate::shaper::ShapedWriter;
use crate::wire::{read_message, write_message, Hello, Message, Mode, Timing, WireError};
use crate::NetError;

pub const DEFAULT_PROBE_BYTES: usize = 256 << 10;

const READ_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone)]
pub struct DeviceConfig {
    /// Edge address; only needed when the plan or the probe uses the edge.
    pub connect: Option<String>,
    pub model: Arc<BranchyModel>,
    pub predictors: Arc<PredictorSet>,
    pub mode: Mode,
    pub budget_ms: f64,
    /// Known uplink bandwidth, used when not probing.
    pub bandwidth_bps: Option<f64>,
    pub probe: bool,
    pub probe_bytes: usize,
    pub force_exit: Option<usize>,
    pub force_partition: Option<usize>,
    /// Caps outgoing throughput.
    pub shape_bps: Option<f64>,
    pub options: EvalOptions,
    /// Seeds the synthetic input when none is given.
    pub seed: u64,
}

impl DeviceConfig {
    pub fn new(model: Arc<BranchyModel>, predictors: Arc<PredictorSet>, mode: Mode, budget_ms: f64) -> Self {
        DeviceConfig {
            connect: None,
            model,
            predictors,
            mode,
            budget_ms,
            bandwidth_bps: None,
            probe: false,
            probe_bytes: DEFAULT_PROBE_BYTES,
            force_exit: None,
            force_partition: None,
            shape_bps: None,
            options: EvalOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthSource {
    Probe,
    Configured,
    Shaper,
    /// Device-only execution forced without any bandwidth information.
    Unused,
}

/// Wall-clock phases seen by the device, in ms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub probe_ms: Option<f64>,
    pub plan_ms: f64,
    /// Writing HELLO and INPUT.
    pub upload_ms: f64,
    /// From the end of the upload to the edge's output arriving.
    pub wait_ms: f64,
    pub device_compute_ms: f64,
    /// From the first byte sent (or local start) to the final result.
    pub end_to_end_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeTiming {
    pub input_receive_ms: f64,
    pub edge_compute_ms: f64,
    pub output_send_ms: f64,
}

impl From<Timing> for EdgeTiming {
    fn from(t: Timing) -> Self {
        EdgeTiming {
            input_receive_ms: t.input_receive_ms,
            edge_compute_ms: t.edge_compute_ms,
            output_send_ms: t.output_send_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceReport {
    /// What the optimizer chose under the budget.
    pub planned: PlanReport,
    /// What was executed; differs from `planned` only when forced.
    pub executed: PlanReport,
    pub bandwidth_bps: f64,
    pub bandwidth_source: BandwidthSource,
    pub class: usize,
    pub confidence: f32,
    pub connected: bool,
    pub phases: PhaseTimings,
    pub edge: Option<EdgeTiming>,
}

/// A device agent with its local execution engine built once.
pub struct Device {
    pub config: DeviceConfig,
    engine: Engine,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: ShapedWriter<TcpStream>,
}

impl Connection {
    fn open(addr: &str, shape_bps: Option<f64>) -> Result<Connection, NetError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(READ_TIMEOUT))?;
        Ok(Connection {
            reader: BufReader::new(stream.try_clone()?),
            writer: ShapedWriter::new(stream, shape_bps),
        })
    }

    fn recv(&mut self) -> Result<Message, WireError> {
        read_message(&mut self.reader)
    }
}

fn remote_error(msg: Message, expected: &str) -> NetError {
    match msg {
        Message::Error { code, message } => NetError::Remote { code, message },
        other => NetError::Protocol(format!("expected {expected}, got {}", other.name())),
    }
}

impl Device {
    pub fn new(config: DeviceConfig) -> Result<Device, NetError> {
        for (name, v) in [("shaping rate", config.shape_bps), ("bandwidth", config.bandwidth_bps)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(NetError::Config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        let engine = Engine::new(&config.model, &config.predictors, config.mode)?;
        Ok(Device { config, engine })
    }

    fn connect(&self) -> Result<Connection, NetError> {
        let addr = self
            .config
            .connect
            .as_deref()
            .ok_or_else(|| NetError::Config("plan uses the edge but no edge address was given".into()))?;
        Connection::open(addr, self.config.shape_bps)
    }

    /// Sends a probe blob and times it until the edge acknowledges.
    fn probe(&self, conn: &mut Connection) -> Result<(f64, f64), NetError> {
        let bytes = self.config.probe_bytes.max(1);
        let blob = vec![0u8; bytes];
        let start = Instant::now();
        write_message(&mut conn.writer, &Message::Probe(blob))?;
        match conn.recv()? {
            Message::Probe(_) => {}
            other => return Err(remote_error(other, "PROBE acknowledgement")),
        }
        let secs = start.elapsed().as_secs_f64();
        Ok((8.0 * bytes as f64 / secs, secs * 1000.0))
    }

    /// Plans and runs one inference on `input`, or on a seeded synthetic
    /// input when `None`.
    pub fn run(&self, input: Option<Tensor>) -> Result<DeviceReport, NetError> {
        let cfg = &self.config;
        let mut phases = PhaseTimings::default();
        let mut conn = None;

        let (bandwidth_bps, source) = if cfg.probe {
            let mut c = self.connect()?;
            let (bps, ms) = self.probe(&mut c)?;
            phases.probe_ms = Some(ms);
            conn = Some(c);
            (bps, BandwidthSource::Probe)
        } else if let Some(bps) = cfg.bandwidth_bps {
            (bps, BandwidthSource::Configured)
        } else if let Some(bps) = cfg.shape_bps {
            (bps, BandwidthSource::Shaper)
        } else if cfg.force_partition == Some(0) {
            (f64::INFINITY, BandwidthSource::Unused)
        } else {
            return Err(NetError::Config(
                "no bandwidth estimate: probe the edge or give a bandwidth or shaping rate".into(),
            ));
        };

        let plan_start = Instant::now();
        let model = &*cfg.model;
        let predictors = &*cfg.predictors;
        let request = PlanRequest::new(model, predictors, bandwidth_bps, cfg.budget_ms, cfg.options)?;
        let outcome = planner::plan(&request);
        let planned = outcome.report();
        let forced = cfg.force_exit.is_some() || cfg.force_partition.is_some();
        let exit = match (cfg.force_exit, outcome.selected()) {
            (Some(e), _) => e,
            (None, Some(p)) => p.exit,
            (None, None) if forced => model.num_exits(),
            (None, None) => {
                return Err(NetError::Infeasible {
                    budget_ms: cfg.budget_ms,
                    best: Box::new(planned),
                });
            }
        };
        let partition = match cfg.force_partition {
            Some(p) => p,
            None => planner::best_partition(model, predictors, exit, bandwidth_bps, &cfg.options)?.partition,
        };
        let executed_plan = planner::evaluate(model, predictors, exit, partition, bandwidth_bps, &cfg.options)?;
        let executed = PlanReport {
            feasible: executed_plan.predicted_latency_ms <= cfg.budget_ms,
            exit: executed_plan.exit,
            partition: executed_plan.partition,
            predicted_latency_ms: executed_plan.predicted_latency_ms,
            accuracy: executed_plan.accuracy,
            breakdown: executed_plan.breakdown,
        };
        phases.plan_ms = ms_since(plan_start);
        let n = model.chain_len(exit)?;

        let input = match input {
            Some(t) => self.engine.conform(exit, 0, t).map_err(NetError::Protocol)?,
            None => self.engine.synthetic_input(cfg.seed),
        };

        let mut report = DeviceReport {
            planned,
            executed,
            bandwidth_bps,
            bandwidth_source: source,
            class: 0,
            confidence: 0.0,
            connected: false,
            phases,
            edge: None,
        };

        if partition == 0 {
            let start = Instant::now();
            let out = self.engine.run(exit, 0..n, input, Side::Device)?;
            (report.class, report.confidence) = classify(&out);
            report.phases.device_compute_ms = ms_since(start);
            report.phases.end_to_end_ms = report.phases.device_compute_ms;
            return Ok(report);
        }

        let mut conn = match conn {
            Some(c) => c,
            None => self.connect()?,
        };
        report.connected = true;
        let lost =
            |phase: &'static str, start: Instant, phases: &PhaseTimings, source: WireError| NetError::ConnectionLost {
                phase,
                elapsed_ms: ms_since(start),
                partial: Box::new(*phases),
                source,
            };

        let start = Instant::now();
        let hello = Message::Hello(Hello {
            model: model.name().to_string(),
            exit: exit as u32,
            partition: partition as u32,
            mode: cfg.mode,
        });
        write_message(&mut conn.writer, &hello)
            .and_then(|_| write_message(&mut conn.writer, &Message::Input(input)))
            .map_err(|e| lost("upload", start, &report.phases, e.into()))?;
        report.phases.upload_ms = ms_since(start);

        let wait_start = Instant::now();
        let reply = conn
            .recv()
            .map_err(|e| lost("await edge output", start, &report.phases, e))?;
        report.phases.wait_ms = ms_since(wait_start);

        match reply {
            Message::Result { class, confidence } if partition == n => {
                report.class = class as usize;
                report.confidence = confidence;
            }
            Message::Intermediate { layer, tensor } if partition < n => {
                if layer as usize != partition {
                    return Err(NetError::Protocol(format!(
                        "edge stopped after layer {layer}, plan says {partition}"
                    )));
                }
                let tensor = self
                    .engine
                    .conform(exit, partition, tensor)
                    .map_err(NetError::Protocol)?;
                let compute_start = Instant::now();
                let out = self.engine.run(exit, partition..n, tensor, Side::Device)?;
                (report.class, report.confidence) = classify(&out);
                report.phases.device_compute_ms = ms_since(compute_start);
            }
            other => {
                let expected = if partition == n { "RESULT" } else { "INTERMEDIATE" };
                return Err(remote_error(other, expected));
            }
        }
        report.phases.end_to_end_ms = ms_since(start);

        match conn.recv() {
            Ok(Message::Timing(t)) => report.edge = Some(t.into()),
            Ok(other) => return Err(remote_error(other, "TIMING")),
            Err(e) => log::warn!("no timing report from edge: {e}"),
        }
        // close our half so the edge thread ends
        let _ = conn.writer.flush();
        let _ = conn.writer.get_ref().shutdown(std::net::Shutdown::Write);
        let mut rest = Vec::new();
        let _ = conn.reader.read_to_end(&mut rest);
        Ok(report)
    }
}

/// Builds a [`Device`] and runs one inference.
pub fn run_device(config: DeviceConfig, input: Option<Tensor>) -> Result<DeviceReport, NetError> {
    Device::new(config)?.run(input)
}
