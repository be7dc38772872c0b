use std::sync::Arc;

use super::collective::assemble_rows;
use super::fabric::{Fabric, Payload};
use super::partition::PatchSpec;
use super::GnScheme;
use crate::cost::{macs_of_layer, CommTag, Primitive, TraceOp, ELEM_BYTES};
use crate::error::{shape_err, Error, Result};
use crate::model::{context_source, LayerDescriptor, LayerKind, Model, StepContext};
use crate::tensor::{group_stats, group_sums, scatter_region, upsample_nearest2x, GnStats, GnSums, Region, Tensor};

/// Additive correction of stale global statistics:
/// `global_{t+1} + (local_t - local_{t+1})`, per group and independently for
/// the mean and the mean square. Groups whose corrected variance would be
/// negative use the fresh local statistics instead.
pub fn corrected_gn_stats(fresh_local: &GnStats, prev_local: &GnStats, prev_global: &GnStats) -> Result<GnStats> {
    if !fresh_local.same_layout(prev_local) || !fresh_local.same_layout(prev_global) {
        return Err(shape_err!(
            "GN stats layouts differ: {}x{}, {}x{}, {}x{}",
            fresh_local.samples,
            fresh_local.groups,
            prev_local.samples,
            prev_local.groups,
            prev_global.samples,
            prev_global.groups
        ));
    }
    // Written so both degenerate cases are exact: no fresh change returns the
    // stale global, and global == local returns the fresh local.
    let correct = |g: f64, p: f64, f: f64| if f == p { g } else { (g - p) + f };
    let mut out = prev_global.clone();
    for i in 0..out.mean.len() {
        let mean = correct(prev_global.mean[i], prev_local.mean[i], fresh_local.mean[i]);
        let mean_sq = correct(prev_global.mean_sq[i], prev_local.mean_sq[i], fresh_local.mean_sq[i]);
        if mean_sq - mean * mean < 0.0 {
            out.mean[i] = fresh_local.mean[i];
            out.mean_sq[i] = fresh_local.mean_sq[i];
        } else {
            out.mean[i] = mean;
            out.mean_sq[i] = mean_sq;
        }
    }
    Ok(out)
}

/// Full-shape input activation of a context layer, from the last step that refreshed it.
#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub full: Tensor,
    /// Runtime step that produced it.
    pub step: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ActivationCache {
    entries: Vec<Option<CacheEntry>>,
}

impl ActivationCache {
    fn new(layers: usize) -> Self {
        Self { entries: vec![None; layers] }
    }

    pub fn get(&self, layer: usize) -> Option<&CacheEntry> {
        self.entries.get(layer).and_then(|e| e.as_ref())
    }

    /// Tags never move backwards; `expected` pins the shape.
    fn store(&mut self, layer: usize, full: Tensor, step: usize, expected: [usize; 4]) -> Result<()> {
        if full.dims() != expected {
            return Err(shape_err!(
                "cache for layer {layer} expects {:?}, got {:?}",
                expected,
                full.dims()
            ));
        }
        if let Some(old) = &self.entries[layer] {
            if step < old.step {
                return Err(Error::Contract(format!(
                    "cache for layer {layer} refreshed out of order ({} then {step})",
                    old.step
                )));
            }
        }
        self.entries[layer] = Some(CacheEntry { full, step });
        Ok(())
    }

    /// Replace a layer's cache regardless of tags (zero-staleness experiments).
    pub fn force(&mut self, layer: usize, full: Tensor, step: usize) {
        self.entries[layer] = Some(CacheEntry { full, step });
    }
}

#[derive(Clone, Debug)]
pub struct GnCacheEntry {
    /// This device's statistics from the last step.
    pub local: GnStats,
    /// Global statistics of the step `global_step`.
    pub global: GnStats,
    pub local_step: usize,
    pub global_step: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GnStatCache {
    entries: Vec<Option<GnCacheEntry>>,
}

impl GnStatCache {
    fn new(layers: usize) -> Self {
        Self { entries: vec![None; layers] }
    }

    pub fn get(&self, layer: usize) -> Option<&GnCacheEntry> {
        self.entries.get(layer).and_then(|e| e.as_ref())
    }
}

/// What a layer needs from peers before it can finish.
#[derive(Clone, Debug)]
pub(crate) struct Need {
    pub tag: CommTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum StepKind {
    Sync,
    Displaced,
}

/// Everything shared (read-only) by the devices during one step.
pub(crate) struct StepEnv<'a> {
    pub model: &'a Model,
    pub ctx: &'a StepContext,
    pub fabric: &'a Fabric,
    pub x: &'a Tensor,
    pub step: usize,
    pub kind: StepKind,
    pub gn: GnScheme,
    pub in_shapes: &'a [[usize; 4]],
}

pub struct DeviceCtx {
    pub device: usize,
    pub patch: PatchSpec,
    pub acts: ActivationCache,
    pub gn: GnStatCache,
    pending_acts: Vec<Option<CommTag>>,
    pending_gn: Vec<Option<CommTag>>,
    pub(crate) trace: Vec<TraceOp>,
    x_band: Option<Tensor>,
    outs: Vec<Option<Tensor>>,
    own_sums: Option<GnSums>,
}

impl DeviceCtx {
    pub fn new(patch: PatchSpec, layers: usize) -> Self {
        Self {
            device: patch.device,
            patch,
            acts: ActivationCache::new(layers),
            gn: GnStatCache::new(layers),
            pending_acts: vec![None; layers],
            pending_gn: vec![None; layers],
            trace: Vec::new(),
            x_band: None,
            outs: vec![None; layers],
            own_sums: None,
        }
    }

    fn n(&self) -> usize {
        self.patch.devices
    }

    /// Drop in-flight refreshes and load exact context for the coming step:
    /// `x` and `outs` are its full model input and layer outputs.
    pub fn force_fresh_context(&mut self, fabric: &Fabric, model: &Model, x: &Tensor, outs: &[Tensor], step: usize) -> Result<()> {
        let srcs: Vec<usize> = (0..self.n()).collect();
        for tag in self.pending_acts.iter_mut().chain(self.pending_gn.iter_mut()).filter_map(Option::take) {
            fabric
                .try_recv(tag, self.device, &srcs)
                .ok_or_else(|| Error::Contract(format!("{tag:?} still in flight")))?;
        }
        let graph = model.layer_graph();
        let input = |j: usize| if j == 0 { x } else { &outs[j - 1] };
        for d in graph {
            if d.kind.needs_spatial_context() {
                let src = context_source(graph, d.id);
                self.acts.force(d.id, input(src).clone(), step);
            } else if d.kind == LayerKind::GroupNorm {
                let full = input(d.id);
                let r = self.patch.region(d.level);
                let band = full.slice_rows(r.row_start, r.row_end)?;
                self.gn.entries[d.id] = Some(GnCacheEntry {
                    local: group_stats(&band, d.groups, None)?,
                    global: group_stats(full, d.groups, None)?,
                    local_step: step,
                    global_step: step,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn start_step(&mut self, env: &StepEnv) -> Result<()> {
        let r = self.patch.region(0);
        self.x_band = Some(env.x.slice_rows(r.row_start, r.row_end)?);
        self.outs.iter_mut().for_each(|o| *o = None);
        Ok(())
    }

    /// This device's band of layer `id`'s input.
    fn input_band(&self, id: usize) -> Result<&Tensor> {
        let t = if id == 0 { self.x_band.as_ref() } else { self.outs[id - 1].as_ref() };
        t.ok_or_else(|| Error::Contract(format!("input of layer {id} not computed")))
    }

    fn band_output(&self, id: usize) -> Result<&Tensor> {
        self.outs[id]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("output of layer {id} not computed")))
    }

    pub(crate) fn output(&mut self, last: usize) -> Result<Tensor> {
        self.outs[last]
            .take()
            .ok_or_else(|| Error::Contract("final layer not computed".into()))
    }

    fn record_compute(&mut self, env: &StepEnv, d: &LayerDescriptor) {
        let out = self.patch.region(d.out_level);
        let macs = macs_of_layer(d, out, env.x.n());
        self.trace.push(TraceOp::Compute { step: env.step, layer: d.id, macs });
    }

    fn post(&mut self, env: &StepEnv, tag: CommTag, payload: Payload, own_bytes: u64, full_bytes: u64) -> Result<()> {
        let n = self.n() as u64;
        self.trace.push(TraceOp::Post {
            tag,
            bytes_sent: own_bytes * (n - 1),
            bytes_received: full_bytes - own_bytes,
        });
        env.fabric.broadcast(tag, self.device, payload)
    }

    fn wait(&mut self, env: &StepEnv, layer: usize, tag: CommTag) {
        self.trace.push(TraceOp::Wait { step: env.step, layer, tag });
    }

    /// First half of a layer: local work and posts. Returns the collective
    /// the device must complete before [`DeviceCtx::finish_layer`].
    pub(crate) fn begin_layer(&mut self, env: &StepEnv, id: usize) -> Result<Option<Need>> {
        let d = env.model.layer(id);
        if d.kind.needs_spatial_context() {
            self.begin_context(env, d)
        } else if d.kind == LayerKind::GroupNorm {
            self.begin_group_norm(env, d)
        } else {
            let input = self.input_band(id)?;
            let skip = match d.skip_source {
                Some(s) => Some(self.band_output(s)?),
                None => None,
            };
            let y = env.model.apply_local(d, input, skip, env.ctx)?;
            self.outs[id] = Some(y);
            self.record_compute(env, d);
            Ok(None)
        }
    }

    /// Second half of a layer, given the payloads of its collective (source order).
    pub(crate) fn finish_layer(&mut self, env: &StepEnv, id: usize, got: Option<Vec<Arc<Payload>>>) -> Result<()> {
        let Some(got) = got else {
            return Ok(());
        };
        let d = env.model.layer(id);
        if d.kind.needs_spatial_context() {
            let src = context_source(env.model.layer_graph(), id);
            let full = assemble_rows(&got)?;
            self.acts.store(id, full.clone(), env.step, env.in_shapes[src])?;
            self.compute_context(env, d, &full)
        } else if d.kind == LayerKind::GroupNorm {
            let parts: Vec<GnSums> = got.iter().map(|p| p.sums().cloned()).collect::<Result<_>>()?;
            let global = GnSums::reduce(&parts)?.finish();
            let own = self.own_sums.take().expect("begin_group_norm stored local sums");
            let local = own.finish();
            self.gn.entries[id] = Some(GnCacheEntry {
                local,
                global: global.clone(),
                local_step: env.step,
                global_step: env.step,
            });
            self.apply_group_norm(env, d, &global)
        } else {
            Err(Error::Contract(format!("layer {id} has no collective to finish")))
        }
    }

    fn context_band(&self, env: &StepEnv, id: usize) -> Result<(usize, Tensor, Region)> {
        let graph = env.model.layer_graph();
        let src = context_source(graph, id);
        let band = self.input_band(src)?.clone();
        let region = *self.patch.region(graph[src].level);
        Ok((src, band, region))
    }

    fn begin_context(&mut self, env: &StepEnv, d: &LayerDescriptor) -> Result<Option<Need>> {
        let id = d.id;
        let (src, band, region) = self.context_band(env, id)?;
        let full_shape = env.in_shapes[src];
        let full_bytes = full_shape.iter().product::<usize>() as u64 * ELEM_BYTES;
        let own_bytes = band.byte_len();
        let tag = CommTag { step: env.step, layer: id, primitive: Primitive::AllGather };
        match env.kind {
            StepKind::Sync => {
                self.post(env, tag, Payload::Activation(band), own_bytes, full_bytes)?;
                self.wait(env, id, tag);
                Ok(Some(Need { tag }))
            }
            StepKind::Displaced => {
                if let Some(prev) = self.pending_acts[id].take() {
                    self.wait(env, id, prev);
                    let parts = env.fabric.try_recv(prev, self.device, &(0..self.n()).collect::<Vec<_>>()).ok_or_else(|| {
                        Error::Contract(format!("gather {prev:?} for layer {id} never completed"))
                    })?;
                    self.acts.store(id, assemble_rows(&parts)?, prev.step, full_shape)?;
                }
                let stale = self
                    .acts
                    .get(id)
                    .ok_or_else(|| {
                        Error::Contract(format!(
                            "displaced step needs a cached activation for layer {id} ({})",
                            d.kind.name()
                        ))
                    })?
                    .full
                    .clone();
                let full = scatter_region(&stale, &band, &region)?;
                self.post(env, tag, Payload::Activation(band), own_bytes, full_bytes)?;
                self.pending_acts[id] = Some(tag);
                self.compute_context(env, d, &full)?;
                Ok(None)
            }
        }
    }

    fn compute_context(&mut self, env: &StepEnv, d: &LayerDescriptor, gathered: &Tensor) -> Result<()> {
        let src = context_source(env.model.layer_graph(), d.id);
        let full = if src != d.id { upsample_nearest2x(gathered) } else { gathered.clone() };
        let region = *self.patch.region(d.level);
        let y = match d.kind {
            LayerKind::SelfAttn => env.model.self_attention(d, &full, &region)?,
            _ => env.model.conv_band(d, &full, &region)?,
        };
        self.outs[d.id] = Some(y);
        self.record_compute(env, d);
        Ok(())
    }

    fn local_sums(&self, d: &LayerDescriptor) -> Result<GnSums> {
        let mut sums = group_sums(self.input_band(d.id)?, d.groups, None)?;
        sums.row_start = self.patch.region(d.level).row_start;
        Ok(sums)
    }

    fn begin_group_norm(&mut self, env: &StepEnv, d: &LayerDescriptor) -> Result<Option<Need>> {
        let id = d.id;
        let own = self.local_sums(d)?;
        let shape = env.in_shapes[id];
        let full_bytes = (shape[0] * d.groups * shape[2] * 16) as u64;
        let tag = CommTag { step: env.step, layer: id, primitive: Primitive::StatReduce };
        let sync = env.kind == StepKind::Sync || env.gn == GnScheme::Sync;
        if sync {
            let own_bytes = own.byte_len();
            self.own_sums = Some(own.clone());
            self.post(env, tag, Payload::Sums(own), own_bytes, full_bytes)?;
            self.wait(env, id, tag);
            return Ok(Some(Need { tag }));
        }
        let fresh = own.finish();
        if env.gn == GnScheme::Separate {
            self.apply_group_norm(env, d, &fresh)?;
            return Ok(None);
        }
        if let Some(prev) = self.pending_gn[id].take() {
            self.wait(env, id, prev);
            let parts = env
                .fabric
                .try_recv(prev, self.device, &(0..self.n()).collect::<Vec<_>>())
                .ok_or_else(|| Error::Contract(format!("stat reduce {prev:?} for layer {id} never completed")))?;
            let parts: Vec<GnSums> = parts.iter().map(|p| p.sums().cloned()).collect::<Result<_>>()?;
            let entry = self.gn.entries[id].as_mut().ok_or_else(|| {
                Error::Contract(format!("stat cache for layer {id} missing"))
            })?;
            entry.global = GnSums::reduce(&parts)?.finish();
            entry.global_step = prev.step;
        }
        let entry = self.gn.entries[id].as_mut().ok_or_else(|| {
            Error::Contract(format!("displaced step needs cached GN stats for layer {id}"))
        })?;
        if entry.local_step != entry.global_step {
            return Err(Error::Contract(format!(
                "GN cache for layer {id} mixes steps {} and {}",
                entry.local_step, entry.global_step
            )));
        }
        let stats = match env.gn {
            GnScheme::Corrected => corrected_gn_stats(&fresh, &entry.local, &entry.global)?,
            _ => entry.global.clone(),
        };
        entry.local = fresh;
        entry.local_step = env.step;
        let own_bytes = own.byte_len();
        self.post(env, tag, Payload::Sums(own), own_bytes, full_bytes)?;
        self.pending_gn[id] = Some(tag);
        self.apply_group_norm(env, d, &stats)?;
        Ok(None)
    }

    fn apply_group_norm(&mut self, env: &StepEnv, d: &LayerDescriptor, stats: &GnStats) -> Result<()> {
        let y = env.model.apply_group_norm(d, self.input_band(d.id)?, stats)?;
        self.outs[d.id] = Some(y);
        self.record_compute(env, d);
        Ok(())
    }
}
