//! `N` simulated devices executing the layer graph on row bands.
//!
//! Every cross-device read goes through tagged collectives on a [`Fabric`],
//! and each device assembles what it receives in device order. Real threads,
//! the round-robin scheduler, and the jittered stress scheduler therefore
//! produce bit-identical results.

pub mod collective;
mod device;
mod fabric;
mod partition;

use std::thread;
use std::time::Duration;

pub use collective::{collective_all_gather, halo_exchange, Gathered, PendingGather};
pub use device::{corrected_gn_stats, ActivationCache, CacheEntry, DeviceCtx, GnCacheEntry, GnStatCache};
pub use fabric::{Fabric, Payload};
pub use partition::{partition_rows, PatchSpec};

use device::{Need, StepEnv, StepKind};

use crate::cost::{
    comm_volume_report, macs_of_layer, simulate_timeline, total_macs, CommVolume, CostParams, Timeline, Trace,
    TraceOp,
};
use crate::error::{config_err, Error, Result};
use crate::model::{Condition, Model, StepContext};
use crate::rng::{mix64, SplitMix64};
use crate::sampler::{gaussian_noise, input_similarity_report, sample_from, NoiseSchedule, SamplerPlan, SimilarityReport};
use crate::tensor::{psnr_with_reference_range, Region, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Reference,
    NaivePatch,
    SyncPP,
    /// `1 + warmup` synchronous steps, then displaced steps.
    Displaced { warmup: usize },
}

impl RunMode {
    pub fn parse(name: &str, warmup: usize) -> Result<Self> {
        Ok(match name {
            "reference" => RunMode::Reference,
            "naive" => RunMode::NaivePatch,
            "sync-pp" => RunMode::SyncPP,
            "displaced" => RunMode::Displaced { warmup },
            other => return Err(config_err!("unknown mode '{other}' (reference|naive|sync-pp|displaced)")),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            RunMode::Reference => "reference",
            RunMode::NaivePatch => "naive",
            RunMode::SyncPP => "sync-pp",
            RunMode::Displaced { .. } => "displaced",
        }
    }

    pub fn warmup(&self) -> usize {
        match self {
            RunMode::Displaced { warmup } => *warmup,
            _ => 0,
        }
    }
}

/// GroupNorm statistics used during displaced steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GnScheme {
    /// Stale global stats corrected by the fresh-minus-stale local delta.
    Corrected,
    /// Stale global stats as is.
    Stale,
    /// Fresh local stats of the device's own band; no communication.
    Separate,
    /// A blocking reduction of fresh stats.
    Sync,
}

impl GnScheme {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "corrected" => GnScheme::Corrected,
            "stale" => GnScheme::Stale,
            "separate" => GnScheme::Separate,
            "sync" => GnScheme::Sync,
            other => return Err(config_err!("unknown GN scheme '{other}' (corrected|stale|separate|sync)")),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            GnScheme::Corrected => "corrected",
            GnScheme::Stale => "stale",
            GnScheme::Separate => "separate",
            GnScheme::Sync => "sync",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheduler {
    /// One OS thread per device.
    Threads,
    /// Single thread, devices advanced in lockstep layer by layer.
    Sequential,
    /// Threads with seeded random yields and sleeps between operations.
    Stress { seed: u64 },
}

impl Scheduler {
    pub fn parse(name: &str, stress_seed: u64) -> Result<Self> {
        Ok(match name {
            "threads" => Scheduler::Threads,
            "sequential" => Scheduler::Sequential,
            "stress" => Scheduler::Stress { seed: stress_seed },
            other => return Err(config_err!("unknown scheduler '{other}' (threads|sequential|stress)")),
        })
    }
}

/// Per-step execution state for patch-parallel modes.
pub struct PatchRuntime<'m> {
    model: &'m Model,
    devices: Vec<DeviceCtx>,
    fabric: Fabric,
    scheduler: Scheduler,
    gn: GnScheme,
    dims: [usize; 4],
    in_shapes: Vec<[usize; 4]>,
    step: usize,
}

impl<'m> PatchRuntime<'m> {
    pub fn new(model: &'m Model, devices: usize, dims: [usize; 4], gn: GnScheme, scheduler: Scheduler) -> Result<Self> {
        let cfg = model.config();
        let [n, c, h, w] = dims;
        if c != cfg.in_channels || n == 0 {
            return Err(config_err!("input {:?} does not match {} model channels", dims, cfg.in_channels));
        }
        cfg.check_image(h, w)?;
        let specs = PatchSpec::all(devices, h, w, cfg.levels)?;
        let layers = model.layer_graph().len();
        Ok(Self {
            model,
            devices: specs.into_iter().map(|p| DeviceCtx::new(p, layers)).collect(),
            fabric: Fabric::new(devices),
            scheduler,
            gn,
            dims,
            in_shapes: model.input_shapes(n, h, w),
            step: 0,
        })
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn device(&self, i: usize) -> &DeviceCtx {
        &self.devices[i]
    }

    pub fn device_mut(&mut self, i: usize) -> &mut DeviceCtx {
        &mut self.devices[i]
    }

    pub fn steps_run(&self) -> usize {
        self.step
    }

    pub fn trace(&self) -> Trace {
        Trace { devices: self.devices.iter().map(|d| d.trace.clone()).collect() }
    }

    /// Synchronous patch parallelism: every context layer and GN layer waits
    /// for fresh data from all devices. Leaves all caches fresh.
    pub fn step_sync(&mut self, x: &Tensor, ctx: &StepContext) -> Result<Tensor> {
        self.run_step(x, ctx, StepKind::Sync)
    }

    /// Displaced step: stale context from the caches, asynchronous refresh.
    pub fn step_displaced(&mut self, x: &Tensor, ctx: &StepContext) -> Result<Tensor> {
        self.run_step(x, ctx, StepKind::Displaced)
    }

    fn run_step(&mut self, x: &Tensor, ctx: &StepContext, kind: StepKind) -> Result<Tensor> {
        if x.dims() != self.dims {
            return Err(crate::error::shape_err!("step input {:?}, runtime built for {:?}", x.dims(), self.dims));
        }
        let env = StepEnv {
            model: self.model,
            ctx,
            fabric: &self.fabric,
            x,
            step: self.step,
            kind,
            gn: self.gn,
            in_shapes: &self.in_shapes,
        };
        self.fabric.activate_all();
        let bands = match self.scheduler {
            Scheduler::Sequential => run_sequential(&mut self.devices, &env)?,
            Scheduler::Threads => run_threaded(&mut self.devices, &env, None)?,
            Scheduler::Stress { seed } => run_threaded(&mut self.devices, &env, Some(seed))?,
        };
        self.step += 1;
        Tensor::concat_rows(&bands)
    }

    /// Replace every device's caches with the exact context of the coming
    /// step, so the next displaced step sees zero staleness.
    pub fn force_fresh_context(&mut self, x: &Tensor, ctx: &StepContext) -> Result<()> {
        let outs = self.model.forward_traced(x, ctx)?;
        for dev in self.devices.iter_mut() {
            dev.force_fresh_context(&self.fabric, self.model, x, &outs, self.step)?;
        }
        Ok(())
    }

    /// Independent patches with no interaction: rows on even steps, columns
    /// on odd ones. Each device runs the full model on its patch alone.
    pub fn step_naive(&mut self, x: &Tensor, ctx: &StepContext, columns: bool) -> Result<Tensor> {
        let n = self.devices.len();
        let [samples, _, h, w] = x.dims();
        let (ph, pw) = if columns { (h, w / n) } else { (h / n, w) };
        if (columns && w % n != 0) || (!columns && h % n != 0) {
            return Err(config_err!("{h}x{w} cannot be cut into {n} naive patches"));
        }
        self.model.config().check_image(ph, pw)?;
        let patches: Vec<Tensor> = (0..n)
            .map(|i| if columns { x.slice_cols(i * pw, (i + 1) * pw) } else { x.slice_rows(i * ph, (i + 1) * ph) })
            .collect::<Result<_>>()?;
        let model = self.model;
        let outs: Vec<Result<Tensor>> = match self.scheduler {
            Scheduler::Sequential => patches.iter().map(|p| model.forward_with_context(p, ctx)).collect(),
            _ => thread::scope(|s| {
                let hs: Vec<_> = patches.iter().map(|p| s.spawn(move || model.forward_with_context(p, ctx))).collect();
                hs.into_iter().map(|h| h.join().expect("naive worker panicked")).collect()
            }),
        };
        let outs: Vec<Tensor> = outs.into_iter().collect::<Result<_>>()?;
        let out_shapes = model.output_shapes(samples, ph, pw);
        for dev in self.devices.iter_mut() {
            for (d, s) in model.layer_graph().iter().zip(&out_shapes) {
                let macs = macs_of_layer(d, &Region::full(s[2], s[3]), samples);
                dev.trace.push(TraceOp::Compute { step: self.step, layer: d.id, macs });
            }
        }
        self.step += 1;
        if columns {
            Tensor::concat_cols(&outs)
        } else {
            Tensor::concat_rows(&outs)
        }
    }
}

fn all_devices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn run_sequential(devices: &mut [DeviceCtx], env: &StepEnv) -> Result<Vec<Tensor>> {
    let layers = env.model.layer_graph().len();
    let srcs = all_devices(devices.len());
    for dev in devices.iter_mut() {
        dev.start_step(env)?;
    }
    for id in 0..layers {
        let mut needs = Vec::with_capacity(devices.len());
        for dev in devices.iter_mut() {
            needs.push(dev.begin_layer(env, id)?);
        }
        for (dev, need) in devices.iter_mut().zip(needs) {
            let got = match need {
                Some(Need { tag }) => Some(env.fabric.try_recv(tag, dev.device, &srcs).ok_or_else(|| {
                    Error::Deadlock(format!("device {} waits on {tag:?}, which can no longer arrive", dev.device))
                })?),
                None => None,
            };
            dev.finish_layer(env, id, got)?;
        }
    }
    devices.iter_mut().map(|d| d.output(layers - 1)).collect()
}

fn jitter(rng: &mut Option<SplitMix64>) {
    if let Some(rng) = rng {
        let r = rng.next_u64();
        match r % 8 {
            0 => thread::yield_now(),
            1 => thread::sleep(Duration::from_micros((r >> 32) % 40)),
            _ => {}
        }
    }
}

fn run_device(dev: &mut DeviceCtx, env: &StepEnv, stress: Option<u64>) -> Result<Tensor> {
    let layers = env.model.layer_graph().len();
    let mut rng = stress.map(|seed| SplitMix64::new(mix64(seed ^ ((env.step as u64) << 20) ^ dev.device as u64)));
    dev.start_step(env)?;
    for id in 0..layers {
        jitter(&mut rng);
        if let Some(Need { tag }) = dev.begin_layer(env, id)? {
            jitter(&mut rng);
            let (got, _) = env.fabric.recv_all(tag, dev.device)?;
            dev.finish_layer(env, id, Some(got))?;
        }
    }
    dev.output(layers - 1)
}

fn run_threaded(devices: &mut [DeviceCtx], env: &StepEnv, stress: Option<u64>) -> Result<Vec<Tensor>> {
    let results: Vec<Result<Tensor>> = thread::scope(|s| {
        let handles: Vec<_> = devices
            .iter_mut()
            .map(|dev| {
                s.spawn(move || {
                    let id = dev.device;
                    let r = run_device(dev, env, stress);
                    if let Err(e) = &r {
                        env.fabric.fail(id, e.to_string());
                    }
                    env.fabric.retire(id);
                    r
                })
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(i, h)| h.join().unwrap_or_else(|_| Err(Error::Worker { device: i, reason: "panicked".into() })))
            .collect()
    });
    if let Some((root, _)) = env.fabric.failure() {
        let mut results = results;
        if let Err(e) = results.swap_remove(root) {
            return Err(e);
        }
        return Err(Error::Worker { device: root, reason: "failed".into() });
    }
    results.into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    Reference,
    Naive,
    Sync,
    Displaced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunConfig {
    pub mode: RunMode,
    pub devices: usize,
    pub gn: GnScheme,
    pub scheduler: Scheduler,
}

impl RunConfig {
    pub fn new(mode: RunMode, devices: usize) -> Self {
        Self { mode, devices, gn: GnScheme::Corrected, scheduler: Scheduler::Threads }
    }
}

pub struct SamplingJob<'a> {
    pub model: &'a Model,
    pub cond: &'a Condition,
    pub plan: &'a SamplerPlan,
    pub schedule: &'a NoiseSchedule,
    pub dims: [usize; 4],
    pub noise_seed: u64,
    pub run: RunConfig,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub x0: Tensor,
    /// Model inputs per step.
    pub inputs: Vec<Tensor>,
    pub step_modes: Vec<StepMode>,
    pub trace: Trace,
    pub devices: usize,
}

/// Drive the sampler with the chosen execution mode.
pub fn run_sampling(job: &SamplingJob) -> Result<RunOutput> {
    let x_init = gaussian_noise(job.dims, job.noise_seed);
    run_sampling_from(job, x_init)
}

pub fn run_sampling_from(job: &SamplingJob, x_init: Tensor) -> Result<RunOutput> {
    let model = job.model;
    let mut modes = Vec::with_capacity(job.plan.num_steps());
    if job.run.devices == 0 {
        return Err(config_err!("device count must be positive"));
    }
    match job.run.mode {
        RunMode::Reference => {
            let mut trace = Trace::new(1);
            let out_shapes = model.output_shapes(job.dims[0], job.dims[2], job.dims[3]);
            let out = sample_from(
                |x, t, k| {
                    let ctx = model.step_context(t, job.cond)?;
                    for (d, s) in model.layer_graph().iter().zip(&out_shapes) {
                        let macs = macs_of_layer(d, &Region::full(s[2], s[3]), s[0]);
                        trace.devices[0].push(TraceOp::Compute { step: k, layer: d.id, macs });
                    }
                    modes.push(StepMode::Reference);
                    model.forward_with_context(x, &ctx)
                },
                job.plan,
                job.schedule,
                x_init,
            )?;
            Ok(RunOutput { x0: out.x0, inputs: out.inputs, step_modes: modes, trace, devices: 1 })
        }
        mode => {
            let mut rt = PatchRuntime::new(model, job.run.devices, job.dims, job.run.gn, job.run.scheduler)?;
            let sync_steps = match mode {
                RunMode::Displaced { warmup } => 1 + warmup,
                _ => usize::MAX,
            };
            let out = sample_from(
                |x, t, k| {
                    let ctx = model.step_context(t, job.cond)?;
                    match mode {
                        RunMode::NaivePatch => {
                            modes.push(StepMode::Naive);
                            rt.step_naive(x, &ctx, k % 2 == 1)
                        }
                        _ if k < sync_steps => {
                            modes.push(StepMode::Sync);
                            rt.step_sync(x, &ctx)
                        }
                        _ => {
                            modes.push(StepMode::Displaced);
                            rt.step_displaced(x, &ctx)
                        }
                    }
                },
                job.plan,
                job.schedule,
                x_init,
            )?;
            Ok(RunOutput {
                x0: out.x0,
                inputs: out.inputs,
                step_modes: modes,
                trace: rt.trace(),
                devices: job.run.devices,
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunMetrics {
    /// PSNR against the reference image, peak = reference range. `None`
    /// without a reference.
    pub psnr_db: Option<f64>,
    pub similarity: SimilarityReport,
    pub comm: CommVolume,
    /// Full-image model MACs summed over all steps.
    pub total_macs: u64,
    pub macs_per_device: Vec<u64>,
    pub timeline: Timeline,
}

impl RunOutput {
    pub fn metrics(&self, model: &Model, reference: Option<&Tensor>, cost: &CostParams) -> Result<RunMetrics> {
        let [n, _, h, w] = self.x0.dims();
        let hw: Vec<_> = model.output_shapes(n, h, w).iter().map(|s| (s[2], s[3])).collect();
        let per_step = total_macs(model.layer_graph(), &hw, n);
        let psnr_db = match reference {
            Some(r) => Some(psnr_with_reference_range(&self.x0, r)?.0),
            None => None,
        };
        Ok(RunMetrics {
            psnr_db,
            similarity: input_similarity_report(&self.inputs)?,
            comm: comm_volume_report(&self.trace),
            total_macs: per_step * self.step_modes.len() as u64,
            macs_per_device: self.trace.macs_per_device(None),
            timeline: simulate_timeline(&self.trace, cost)?,
        })
    }
}
