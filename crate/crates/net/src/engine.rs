//! Segment execution shared by both agents.

use std::ops::Range;
use std::thread;
use std::time::Duration;

use edgent_core::kernels::{self, Network, Tensor};
use edgent_core::model::BranchyModel;
use edgent_core::planner::SegmentTimings;
use edgent_core::predictor::{PredictorSet, Side};

use crate::wire::Mode;
use crate::NetError;

pub(crate) enum Engine {
    Kernels(Network),
    Delay {
        timings: Vec<SegmentTimings>,
        input_bytes: u64,
    },
}

fn flat_len(bytes: u64) -> usize {
    (bytes.div_ceil(4) as usize).max(1)
}

impl Engine {
    pub fn new(model: &BranchyModel, predictors: &PredictorSet, mode: Mode) -> Result<Engine, NetError> {
        Ok(match mode {
            Mode::Kernels => Engine::Kernels(Network::build(model)?),
            Mode::Delay => Engine::Delay {
                timings: (1..=model.num_exits())
                    .map(|i| SegmentTimings::from_model(model, predictors, i, false))
                    .collect::<Result<_, _>>()?,
                input_bytes: model.input_bytes(),
            },
        })
    }

    pub fn chain_len(&self, exit: usize) -> Option<usize> {
        match self {
            Engine::Kernels(net) => net.chain_len(exit),
            Engine::Delay { timings, .. } => exit.checked_sub(1).and_then(|i| timings.get(i)).map(|t| t.len()),
        }
    }

    /// Dims of the tensor entering `position` of `exit`.
    fn dims_at(&self, exit: usize, position: usize) -> Vec<usize> {
        match self {
            Engine::Kernels(net) => net.dims_at(exit, position).expect("checked range").to_vec(),
            Engine::Delay { timings, input_bytes } => {
                let bytes = match position {
                    0 => *input_bytes,
                    p => timings[exit - 1].output_bytes()[p - 1],
                };
                vec![flat_len(bytes)]
            }
        }
    }

    /// A seeded synthetic input for the model.
    pub fn synthetic_input(&self, seed: u64) -> Tensor {
        match self {
            Engine::Kernels(net) => Tensor::random(net.input_dims().to_vec(), seed),
            Engine::Delay { .. } => Tensor::zeros(self.dims_at(1, 0)),
        }
    }

    /// Reshapes `t` to what `position` of `exit` expects, if the element
    /// counts agree.
    pub fn conform(&self, exit: usize, position: usize, t: Tensor) -> Result<Tensor, String> {
        let want = self.dims_at(exit, position);
        if t.dims() == want {
            return Ok(t);
        }
        let elems: usize = want.iter().product();
        if t.len() != elems {
            return Err(format!(
                "exit {exit} position {position} expects {elems} elements {want:?}, got {:?}",
                t.dims()
            ));
        }
        let (_, data) = t.into_parts();
        Ok(Tensor::new(want, data).expect("element count checked"))
    }

    /// Runs chain positions `range` (0-based, half-open) of `exit` as `side`.
    pub fn run(&self, exit: usize, range: Range<usize>, input: Tensor, side: Side) -> Result<Tensor, NetError> {
        match self {
            Engine::Kernels(net) => Ok(net.run(exit, range, input)?),
            Engine::Delay { timings, .. } => {
                let t = &timings[exit - 1];
                let per_layer = match side {
                    Side::Device => t.device_ms(),
                    Side::Edge => t.edge_ms(),
                };
                let ms: f64 = per_layer[range.clone()].iter().sum();
                thread::sleep(Duration::from_secs_f64(ms / 1000.0));
                if range.is_empty() {
                    Ok(input)
                } else {
                    Ok(Tensor::zeros(self.dims_at(exit, range.end)))
                }
            }
        }
    }
}

pub(crate) fn classify(t: &Tensor) -> (usize, f32) {
    kernels::classify(t.data())
}
