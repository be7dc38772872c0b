//! MAC counting, communication volumes, and the discrete timeline model.

mod timeline;

pub use timeline::{simulate_timeline, EventKind, Timeline, TimelineEvent};

use crate::error::{config_err, Result};
use crate::model::{context_source, LayerDescriptor, LayerKind};
use crate::tensor::Region;

/// Bytes per activation element on the wire.
pub const ELEM_BYTES: u64 = 4;

/// Multiply-accumulates to produce `region` of the layer's output for a
/// batch of `samples`. `region` lives at the layer's output resolution.
pub fn macs_of_layer(d: &LayerDescriptor, region: &Region, samples: usize) -> u64 {
    let out_px = region.pixels() as u64 * samples as u64;
    let (c_in, c_out, k) = (d.in_channels as u64, d.out_channels as u64, d.kernel as u64);
    match d.kind {
        LayerKind::Conv | LayerKind::DownConv => out_px * c_out * c_in * k * k,
        LayerKind::Linear => out_px * c_in * c_out,
        // Scores and weighted sum: 2 * m * s * d.
        LayerKind::SelfAttn => {
            let keys = (region.full_h * region.full_w) as u64;
            2 * out_px * keys * c_out
        }
        LayerKind::CrossAttn => {
            let keys = d.params.first().map_or(0, |p| p.n()) as u64;
            2 * out_px * keys * c_out
        }
        _ => 0,
    }
}

/// Full-image MACs of the whole graph; `out_hw[l]` is layer `l`'s output size.
pub fn total_macs(graph: &[LayerDescriptor], out_hw: &[(usize, usize)], samples: usize) -> u64 {
    graph
        .iter()
        .zip(out_hw)
        .map(|(d, &(h, w))| macs_of_layer(d, &Region::full(h, w), samples))
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostParams {
    /// MACs per simulated microsecond.
    pub compute_rate: f64,
    /// Bytes per microsecond on each device's receive link.
    pub link_bandwidth: f64,
    /// Fixed cost per transfer, microseconds.
    pub link_latency: f64,
    /// Share of compute throughput lost while a transfer is in flight.
    pub comm_uses_compute_fraction: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            compute_rate: 1000.0,
            link_bandwidth: 100.0,
            link_latency: 5.0,
            comm_uses_compute_fraction: 0.15,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.compute_rate > 0.0) || !(self.link_bandwidth > 0.0) {
            return Err(config_err!("compute_rate and link_bandwidth must be positive"));
        }
        if !(self.link_latency >= 0.0) || !self.link_latency.is_finite() {
            return Err(config_err!("link_latency must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.comm_uses_compute_fraction) {
            return Err(config_err!("comm_uses_compute_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Link occupancy of a transfer; empty transfers are free.
    pub fn transfer_time(&self, bytes: u64) -> f64 {
        if bytes == 0 {
            0.0
        } else {
            bytes as f64 / self.link_bandwidth + self.link_latency
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    AllGather,
    Halo,
    StatReduce,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::AllGather => "all_gather",
            Primitive::Halo => "halo",
            Primitive::StatReduce => "stat_reduce",
        }
    }
}

/// Identity of one collective: every participating device posts it once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CommTag {
    pub step: usize,
    pub layer: usize,
    pub primitive: Primitive,
}

/// One logical operation in a device's program.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceOp {
    Compute { step: usize, layer: usize, macs: u64 },
    Post { tag: CommTag, bytes_sent: u64, bytes_received: u64 },
    /// Block until this device has received everything for `tag`.
    Wait { step: usize, layer: usize, tag: CommTag },
}

impl TraceOp {
    pub fn step(&self) -> usize {
        match *self {
            TraceOp::Compute { step, .. } | TraceOp::Wait { step, .. } => step,
            TraceOp::Post { tag, .. } => tag.step,
        }
    }
}

/// Per-device programs in issue order. Only logical operations are
/// recorded, so a trace never depends on thread timing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub devices: Vec<Vec<TraceOp>>,
}

impl Trace {
    pub fn new(devices: usize) -> Self {
        Self { devices: vec![Vec::new(); devices] }
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn extend(&mut self, other: Trace) {
        if self.devices.len() < other.devices.len() {
            self.devices.resize(other.devices.len(), Vec::new());
        }
        for (dst, src) in self.devices.iter_mut().zip(other.devices) {
            dst.extend(src);
        }
    }

    /// MACs issued by each device, optionally restricted to one step.
    pub fn macs_per_device(&self, step: Option<usize>) -> Vec<u64> {
        self.devices
            .iter()
            .map(|ops| {
                ops.iter()
                    .filter_map(|op| match *op {
                        TraceOp::Compute { step: s, macs, .. } if step.map_or(true, |t| t == s) => Some(macs),
                        _ => None,
                    })
                    .sum()
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommVolume {
    pub all_gather: u64,
    pub halo: u64,
    pub stat_reduce: u64,
    pub sent: u64,
}

impl CommVolume {
    /// Bytes received, summed over devices and primitives.
    pub fn total(&self) -> u64 {
        self.all_gather + self.halo + self.stat_reduce
    }
}

pub fn comm_volume_report(trace: &Trace) -> CommVolume {
    let mut v = CommVolume::default();
    for op in trace.devices.iter().flatten() {
        if let TraceOp::Post { tag, bytes_sent, bytes_received } = *op {
            v.sent += bytes_sent;
            match tag.primitive {
                Primitive::AllGather => v.all_gather += bytes_received,
                Primitive::Halo => v.halo += bytes_received,
                Primitive::StatReduce => v.stat_reduce += bytes_received,
            }
        }
    }
    v
}

/// Per-device ring AllReduce receive volume: `2 (N-1)/N` of the tensor.
pub fn all_reduce_bytes(tensor_bytes: u64, n: usize) -> u64 {
    if n <= 1 {
        return 0;
    }
    2 * (n as u64 - 1) * tensor_bytes / n as u64
}

/// Per-device AllGather receive volume: `(N-1)/N` of the assembled tensor.
pub fn all_gather_bytes(tensor_bytes: u64, n: usize) -> u64 {
    if n <= 1 {
        return 0;
    }
    (n as u64 - 1) * tensor_bytes / n as u64
}

fn elems(shape: &[usize; 4]) -> u64 {
    shape.iter().product::<usize>() as u64
}

/// Per-device, per-step bytes for synchronous tensor parallelism: one
/// AllReduce of the full output activation after every conv, linear and
/// attention layer.
pub fn tp_volume_estimate(graph: &[LayerDescriptor], out_shapes: &[[usize; 4]], n: usize) -> u64 {
    graph
        .iter()
        .zip(out_shapes)
        .filter(|(d, _)| {
            matches!(
                d.kind,
                LayerKind::Conv | LayerKind::DownConv | LayerKind::Linear | LayerKind::SelfAttn | LayerKind::CrossAttn
            )
        })
        .map(|(_, s)| all_reduce_bytes(elems(s) * ELEM_BYTES, n))
        .sum()
}

/// Per-device, per-step bytes for patch parallelism: an AllGather of the
/// context input of every layer that needs one, plus the per-row GroupNorm
/// partial sums of the other devices.
pub fn pp_volume_estimate(graph: &[LayerDescriptor], in_shapes: &[[usize; 4]], n: usize) -> u64 {
    graph
        .iter()
        .zip(in_shapes)
        .map(|(d, s)| {
            if d.kind.needs_spatial_context() {
                let src = &in_shapes[context_source(graph, d.id)];
                all_gather_bytes(elems(src) * ELEM_BYTES, n)
            } else if d.kind == LayerKind::GroupNorm {
                let [samples, _, h, _] = *s;
                all_gather_bytes((samples * d.groups * h * 16) as u64, n)
            } else {
                0
            }
        })
        .sum()
}
