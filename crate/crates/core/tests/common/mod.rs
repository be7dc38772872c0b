#![allow(dead_code)]

use std::sync::OnceLock;

use dpp_core::model::{Condition, Model, ModelConfig};
use dpp_core::runtime::{run_sampling, GnScheme, RunConfig, RunMode, RunOutput, SamplingJob, Scheduler};
use dpp_core::sampler::{NoiseSchedule, SamplerPlan};

pub const MODEL_SEED: u64 = 42;
pub const NOISE_SEED: u64 = 1;
pub const COND_SEED: u64 = 7;

pub fn model() -> &'static Model {
    static M: OnceLock<Model> = OnceLock::new();
    M.get_or_init(|| Model::build(ModelConfig::default(), MODEL_SEED).unwrap())
}

pub fn cond() -> Condition {
    Condition::from_seed(model().config().cond_dim, COND_SEED)
}

#[derive(Clone, Copy, Debug)]
pub struct Run {
    pub mode: RunMode,
    pub devices: usize,
    pub steps: usize,
    pub size: usize,
    pub gn: GnScheme,
    pub scheduler: Scheduler,
}

impl Run {
    pub fn new(mode: RunMode, devices: usize, steps: usize, size: usize) -> Self {
        Self { mode, devices, steps, size, gn: GnScheme::Corrected, scheduler: Scheduler::Threads }
    }

    pub fn gn(self, gn: GnScheme) -> Self {
        Self { gn, ..self }
    }

    pub fn scheduler(self, scheduler: Scheduler) -> Self {
        Self { scheduler, ..self }
    }

    pub fn exec(&self) -> RunOutput {
        let schedule = NoiseSchedule::default();
        let plan = SamplerPlan::uniform(self.steps, &schedule).unwrap();
        let cond = cond();
        let job = SamplingJob {
            model: model(),
            cond: &cond,
            plan: &plan,
            schedule: &schedule,
            dims: [1, 4, self.size, self.size],
            noise_seed: NOISE_SEED,
            run: RunConfig { mode: self.mode, devices: self.devices, gn: self.gn, scheduler: self.scheduler },
        };
        run_sampling(&job).unwrap()
    }
}
