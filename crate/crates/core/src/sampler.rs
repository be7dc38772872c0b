//! Linear noise schedule and the deterministic DDIM (eta = 0) sampling loop.

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(config_err!("schedule needs at least one step"));
        }
        for b in [beta_start, beta_end] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("beta {b} outside [0, 1)"));
            }
        }
        let betas: Vec<f64> = (0..total_steps)
            .map(|t| {
                if total_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (total_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(total_steps);
        let mut prod = 1f64;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(Self { total_steps, beta_start, beta_end, betas, alpha_bar })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar[t]`; `None` is the clean endpoint with `alpha_bar = 1`.
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bar[t])
    }
}

/// Timesteps visited by the sampler, strictly decreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerPlan {
    pub timesteps: Vec<usize>,
}

impl SamplerPlan {
    /// Uniform stride `T / num_steps` over `[0, T)`; after the last timestep
    /// the sampler jumps to the clean state.
    pub fn uniform(num_steps: usize, schedule: &NoiseSchedule) -> Result<Self> {
        if num_steps == 0 || num_steps > schedule.total_steps {
            return Err(config_err!(
                "step count {num_steps} must lie in [1, {}]",
                schedule.total_steps
            ));
        }
        let stride = schedule.total_steps / num_steps;
        Ok(Self { timesteps: (0..num_steps).rev().map(|i| i * stride).collect() })
    }

    pub fn num_steps(&self) -> usize {
        self.timesteps.len()
    }

    /// Target timestep after step `k`; `None` after the last one.
    pub fn next_timestep(&self, k: usize) -> Option<usize> {
        self.timesteps.get(k + 1).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub x: Tensor,
    /// `None` once the state is the final clean sample.
    pub t: Option<usize>,
}

pub fn ddim_step(
    schedule: &NoiseSchedule,
    state: &LatentState,
    eps: &Tensor,
    t_next: Option<usize>,
) -> Result<LatentState> {
    if eps.dims() != state.x.dims() {
        return Err(shape_err!(
            "noise prediction {:?} for state {:?}",
            eps.dims(),
            state.x.dims()
        ));
    }
    let t = state.t.ok_or_else(|| config_err!("cannot step past the clean state"))?;
    if let Some(tn) = t_next {
        if tn >= t {
            return Err(config_err!("timestep must decrease: {t} -> {tn}"));
        }
    }
    let ab = schedule.alpha_bar(Some(t));
    let ab_next = schedule.alpha_bar(t_next);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (na, nb) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
    let data = state
        .x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| {
            let (x, e) = (x as f64, e as f64);
            let x0 = (x - sb * e) / sa;
            (na * x0 + nb * e) as f32
        })
        .collect();
    let x = Tensor::new(state.x.dims(), data).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite("ddim_step"),
        other => other,
    })?;
    Ok(LatentState { x, t: t_next })
}

/// Seeded standard-normal tensor (Box–Muller over splitmix64).
pub fn gaussian_noise(dims: [usize; 4], seed: u64) -> Tensor {
    let count = dims.iter().product();
    let data = SplitMix64::new(seed).gaussians(count).into_iter().map(|v| v as f32).collect();
    Tensor::from_parts(dims, data)
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub x0: Tensor,
    /// Model inputs `x_{t_1}, ..., x_{t_K}` in visiting order.
    pub inputs: Vec<Tensor>,
}

/// Run the plan from seeded noise. `executor(x, t, step_index)` returns the
/// noise prediction; it must finish before the next update is applied.
pub fn sample<F>(
    mut executor: F,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
    dims: [usize; 4],
    noise_seed: u64,
) -> Result<SampleOutput>
where
    F: FnMut(&Tensor, usize, usize) -> Result<Tensor>,
{
    sample_from(&mut executor, plan, schedule, gaussian_noise(dims, noise_seed))
}

pub fn sample_from<F>(
    mut executor: F,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
    x_init: Tensor,
) -> Result<SampleOutput>
where
    F: FnMut(&Tensor, usize, usize) -> Result<Tensor>,
{
    let mut state = LatentState { x: x_init, t: plan.timesteps.first().copied() };
    let mut inputs = Vec::with_capacity(plan.num_steps());
    for (k, &t) in plan.timesteps.iter().enumerate() {
        let eps = executor(&state.x, t, k)?;
        inputs.push(state.x.clone());
        state = ddim_step(schedule, &state, &eps, plan.next_timestep(k))?;
    }
    Ok(SampleOutput { x0: state.x, inputs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    /// Mean |x_k - x_{k+1}| for each consecutive pair.
    pub per_step: Vec<f64>,
    pub mean_diff: f64,
    /// Max minus min over every state in the trajectory.
    pub range: f64,
}

impl SimilarityReport {
    pub fn ratio(&self) -> f64 {
        if self.range > 0.0 {
            self.mean_diff / self.range
        } else {
            0.0
        }
    }
}

pub fn input_similarity_report(trajectory: &[Tensor]) -> Result<SimilarityReport> {
    let mut per_step = Vec::with_capacity(trajectory.len().saturating_sub(1));
    for pair in trajectory.windows(2) {
        per_step.push(crate::tensor::mean_abs_diff(&pair[0], &pair[1])?);
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for x in trajectory {
        let (a, b) = x.min_max();
        lo = lo.min(a);
        hi = hi.max(b);
    }
    let range = if trajectory.is_empty() { 0.0 } else { (hi - lo) as f64 };
    let mean_diff = if per_step.is_empty() {
        0.0
    } else {
        per_step.iter().sum::<f64>() / per_step.len() as f64
    };
    Ok(SimilarityReport { per_step, mean_diff, range })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor {
        Tensor::full([1, 1, 1, 1], v)
    }

    #[test]
    fn zero_betas_keep_alpha_bar_one() {
        let s = NoiseSchedule::new(10, 0.0, 0.0).unwrap();
        assert!((0..10).all(|t| s.alpha_bar(Some(t)) == 1.0));
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::new(1, 0.3, 0.9).unwrap();
        assert_eq!(s.alpha_bar(Some(0)), 0.7);
    }

    #[test]
    fn default_schedule_end() {
        let s = NoiseSchedule::default();
        let direct: f64 = (0..1000).map(|t| 1.0 - (1e-4 + (2e-2 - 1e-4) * t as f64 / 999.0)).product();
        assert!((s.alpha_bar(Some(999)) - direct).abs() < 1e-15);
        assert!(direct < 1e-4);
        assert!((1..1000).all(|t| s.alpha_bar(Some(t)) < s.alpha_bar(Some(t - 1))));
        assert!(s.alpha_bar(Some(0)) > 0.0 && s.alpha_bar(Some(0)) <= 1.0);
    }

    #[test]
    fn invalid_schedules() {
        assert!(NoiseSchedule::new(0, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::new(10, -0.1, 2e-2).is_err());
        assert!(NoiseSchedule::new(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn uniform_plan() {
        let s = NoiseSchedule::default();
        let p = SamplerPlan::uniform(50, &s).unwrap();
        assert_eq!(p.timesteps.len(), 50);
        assert_eq!(p.timesteps[0], 980);
        assert_eq!(*p.timesteps.last().unwrap(), 0);
        assert!(p.timesteps.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(SamplerPlan::uniform(10, &s).unwrap().timesteps[..2], [900, 800]);
        assert!(SamplerPlan::uniform(0, &s).is_err());
        assert!(SamplerPlan::uniform(1001, &s).is_err());
    }

    #[test]
    fn zero_eps_is_pure_rescale() {
        let s = NoiseSchedule::default();
        let x = Tensor::from_fn([1, 2, 2, 2], |[_, c, y, x]| c as f32 - y as f32 * 0.5 + x as f32);
        let st = LatentState { x: x.clone(), t: Some(500) };
        let out = ddim_step(&s, &st, &Tensor::zeros(x.dims()), Some(200)).unwrap();
        let k = (s.alpha_bar(Some(200)) / s.alpha_bar(Some(500))).sqrt();
        for (a, b) in out.x.data().iter().zip(x.data()) {
            assert!((*a as f64 - k * *b as f64).abs() <= 1e-6 * (1.0 + b.abs() as f64));
        }
        assert_eq!(out.t, Some(200));
    }

    #[test]
    fn equal_alpha_bars_leave_state_unchanged() {
        let s = NoiseSchedule::new(10, 0.0, 0.0).unwrap();
        let st = LatentState { x: scalar(0.7), t: Some(5) };
        assert_eq!(ddim_step(&s, &st, &scalar(0.3), Some(2)).unwrap().x, scalar(0.7));
    }

    #[test]
    fn scalar_hand_oracle() {
        // Two-step schedule with alpha_bar = [0.81, 0.25]: betas 0.19, 1 - 0.25/0.81.
        let mut s = NoiseSchedule::new(2, 0.19, 0.19).unwrap();
        s.alpha_bar = vec![0.81, 0.25];
        let st = LatentState { x: scalar(1.0), t: Some(1) };
        let out = ddim_step(&s, &st, &scalar(0.5), Some(0)).unwrap();
        // x0 = (1 - sqrt(.75) * .5) / .5 = 1.1339746; x = .9 * x0 + sqrt(.19) * .5.
        let want = 0.9 * 1.133_974_596_215_561 + 0.217_944_947_177_033_7;
        assert!((out.x.data()[0] as f64 - want).abs() < 1e-6);
        assert!((out.x.data()[0] - 1.238_522_1).abs() < 1e-6);
    }

    #[test]
    fn timestep_must_decrease() {
        let s = NoiseSchedule::default();
        let st = LatentState { x: scalar(1.0), t: Some(10) };
        assert!(ddim_step(&s, &st, &scalar(0.0), Some(10)).is_err());
        assert!(ddim_step(&s, &st, &scalar(0.0), Some(11)).is_err());
        assert!(ddim_step(&s, &st, &Tensor::zeros([1, 1, 1, 2]), Some(5)).is_err());
        let done = LatentState { x: scalar(1.0), t: None };
        assert!(ddim_step(&s, &done, &scalar(0.0), None).is_err());
    }

    #[test]
    fn zero_executor_collapses_to_rescale() {
        let s = NoiseSchedule::default();
        let plan = SamplerPlan::uniform(10, &s).unwrap();
        let dims = [1, 2, 3, 3];
        let out = sample(|x, _, _| Ok(Tensor::zeros(x.dims())), &plan, &s, dims, 9).unwrap();
        let k = 1.0 / s.alpha_bar(Some(plan.timesteps[0])).sqrt();
        let noise = gaussian_noise(dims, 9);
        for (a, b) in out.x0.data().iter().zip(noise.data()) {
            assert!((*a as f64 - k * *b as f64).abs() <= 1e-5 * (1.0 + (k * *b as f64).abs()));
        }
        assert_eq!(out.inputs.len(), 10);
        assert_eq!(out.inputs[0], noise);
    }

    #[test]
    fn two_step_manual_unroll() {
        let s = NoiseSchedule::default();
        let plan = SamplerPlan { timesteps: vec![700, 300] };
        let dims = [1, 1, 2, 2];
        let out = sample(|x, _, _| Ok(Tensor::full(x.dims(), 0.25)), &plan, &s, dims, 4).unwrap();
        let noise = gaussian_noise(dims, 4);
        let step = |x: f64, t: usize, tn: Option<usize>| {
            let (a, b) = (s.alpha_bar(Some(t)), s.alpha_bar(tn));
            let x0 = (x - (1.0 - a).sqrt() * 0.25) / a.sqrt();
            b.sqrt() * x0 + (1.0 - b).sqrt() * 0.25
        };
        for (o, n) in out.x0.data().iter().zip(noise.data()) {
            let mid = step(*n as f64, 700, Some(300)) as f32 as f64;
            let want = step(mid, 300, None);
            assert!((*o as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = NoiseSchedule::default();
        let plan = SamplerPlan::uniform(5, &s).unwrap();
        let f = |x: &Tensor, t: usize, _: usize| Ok(x.map(|v| v * 0.5 + t as f32 * 1e-4));
        let a = sample(f, &plan, &s, [1, 2, 4, 4], 11).unwrap();
        let b = sample(f, &plan, &s, [1, 2, 4, 4], 11).unwrap();
        assert_eq!(a.x0, b.x0);
        assert_eq!(a.inputs, b.inputs);
    }

    #[test]
    fn executor_shape_mismatch() {
        let s = NoiseSchedule::default();
        let plan = SamplerPlan::uniform(2, &s).unwrap();
        assert!(sample(|_, _, _| Ok(Tensor::zeros([1, 1, 1, 1])), &plan, &s, [1, 1, 2, 2], 0).is_err());
    }

    #[test]
    fn similarity_report() {
        let a = Tensor::full([1, 1, 2, 2], 1.0);
        let r = input_similarity_report(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(r.mean_diff, 0.0);
        let b = a.map(|v| v + 0.5);
        let r = input_similarity_report(&[a, b]).unwrap();
        assert_eq!(r.per_step, vec![0.5]);
        assert_eq!(r.range, 0.5);
        assert_eq!(r.ratio(), 1.0);
    }
}
