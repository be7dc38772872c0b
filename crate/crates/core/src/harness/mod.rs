//! Experiment configuration, execution, and artifact emission.

pub mod cli;
pub mod io;
pub mod trace;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cost::CostParams;
use crate::error::{config_err, Result};
use crate::model::{Condition, Model, ModelConfig};
use crate::runtime::{run_sampling, GnScheme, RunConfig, RunMetrics, RunMode, RunOutput, SamplingJob, Scheduler};
use crate::sampler::{NoiseSchedule, SamplerPlan};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum CondSource {
    Zeros,
    Seed(u64),
    /// TNSR file holding `cond_dim` values.
    File(PathBuf),
}

impl CondSource {
    /// `zeros`, `seed:N`, or a path.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "zeros" {
            return Ok(CondSource::Zeros);
        }
        if let Some(n) = s.strip_prefix("seed:") {
            return Ok(CondSource::Seed(parse_num(n, "cond seed")?));
        }
        Ok(CondSource::File(PathBuf::from(s)))
    }

    pub fn describe(&self) -> String {
        match self {
            CondSource::Zeros => "zeros".into(),
            CondSource::Seed(s) => format!("seed:{s}"),
            CondSource::File(p) => p.display().to_string(),
        }
    }

    pub fn load(&self, dim: usize) -> Result<Condition> {
        match self {
            CondSource::Zeros => Ok(Condition::zeros(dim)),
            CondSource::Seed(s) => Ok(Condition::from_seed(dim, *s)),
            CondSource::File(p) => {
                let t = io::read_tnsr(p)?;
                if t.len() != dim {
                    return Err(config_err!("condition file has {} values, model expects {dim}", t.len()));
                }
                Ok(Condition(t.into_data()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, clap::ValueEnum)]
pub enum Emit {
    Image,
    Tensor,
    Trace,
    Metrics,
}

impl Emit {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "image" => Emit::Image,
            "tensor" => Emit::Tensor,
            "trace" => Emit::Trace,
            "metrics" => Emit::Metrics,
            other => return Err(config_err!("unknown artifact '{other}' (image|tensor|trace|metrics)")),
        })
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, what: &str) -> Result<T> {
    v.trim().parse().map_err(|_| config_err!("invalid {what} '{v}'"))
}

pub fn parse_size(v: &str) -> Result<(usize, usize)> {
    let (h, w) = v.split_once(['x', 'X']).ok_or_else(|| config_err!("size '{v}' is not HxW"))?;
    Ok((parse_num(h, "height")?, parse_num(w, "width")?))
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| config_err!("line {}: expected key = value", i + 1))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_cost_profile(text: &str) -> Result<CostParams> {
    let mut p = CostParams::default();
    for (k, v) in parse_key_values(text)? {
        let slot = match k.as_str() {
            "compute-rate" => &mut p.compute_rate,
            "link-bandwidth" => &mut p.link_bandwidth,
            "link-latency" => &mut p.link_latency,
            "comm-uses-compute-fraction" => &mut p.comm_uses_compute_fraction,
            other => return Err(config_err!("unknown cost parameter '{other}'")),
        };
        *slot = parse_num(&v, &k)?;
    }
    p.validate()?;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: RunMode,
    pub devices: usize,
    pub height: usize,
    pub width: usize,
    pub model_seed: u64,
    pub noise_seed: u64,
    pub steps: usize,
    /// Displaced mode only.
    pub warmup: usize,
    pub cond: CondSource,
    pub out: PathBuf,
    pub cost: CostParams,
    pub gn: GnScheme,
    pub scheduler: Scheduler,
    pub compare_against: Option<PathBuf>,
    pub emit: Vec<Emit>,
    /// Load weights instead of initializing from `model_seed`.
    pub weights: Option<PathBuf>,
    pub dump_weights: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Displaced { warmup: 4 },
            devices: 4,
            height: 48,
            width: 48,
            model_seed: 42,
            noise_seed: 1,
            steps: 50,
            warmup: 4,
            cond: CondSource::Seed(7),
            out: PathBuf::from("out"),
            cost: CostParams::default(),
            gn: GnScheme::Corrected,
            scheduler: Scheduler::Threads,
            compare_against: None,
            emit: vec![Emit::Image, Emit::Tensor, Emit::Metrics],
            weights: None,
            dump_weights: None,
            model: ModelConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn run_mode(&self) -> RunMode {
        match self.mode {
            RunMode::Displaced { .. } => RunMode::Displaced { warmup: self.warmup },
            m => m,
        }
    }

    /// Apply one `key = value` setting; keys mirror the CLI flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('_', "-");
        match key.as_str() {
            "mode" => self.mode = RunMode::parse(value, self.warmup)?,
            "devices" => self.devices = parse_num(value, "device count")?,
            "steps" => self.steps = parse_num(value, "step count")?,
            "warmup" => self.warmup = parse_num(value, "warm-up")?,
            "size" => (self.height, self.width) = parse_size(value)?,
            "model-seed" => self.model_seed = parse_num(value, "model seed")?,
            "noise-seed" => self.noise_seed = parse_num(value, "noise seed")?,
            "cond" => self.cond = CondSource::parse(value)?,
            "out" => self.out = PathBuf::from(value),
            "compare-against" => self.compare_against = Some(PathBuf::from(value)),
            "cost-profile" => {
                let text = fs::read_to_string(value).map_err(|e| config_err!("cost profile {value}: {e}"))?;
                self.cost = parse_cost_profile(&text)?
            }
            "gn" => self.gn = GnScheme::parse(value)?,
            "scheduler" => {
                let seed = match self.scheduler {
                    Scheduler::Stress { seed } => seed,
                    _ => 0,
                };
                self.scheduler = Scheduler::parse(value, seed)?
            }
            "stress-seed" => self.scheduler = Scheduler::Stress { seed: parse_num(value, "stress seed")? },
            "emit" => {
                self.emit = value.split(',').map(|s| Emit::parse(s.trim())).collect::<Result<_>>()?;
                self.emit.sort();
                self.emit.dedup();
            }
            "weights" => self.weights = Some(PathBuf::from(value)),
            "dump-weights" => self.dump_weights = Some(PathBuf::from(value)),
            other => return Err(config_err!("unknown setting '{other}'")),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| config_err!("config {}: {e}", path.display()))?;
        for (k, v) in parse_key_values(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Sizes must split into `devices` bands along both axes at every level.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cost.validate()?;
        if self.devices == 0 {
            return Err(config_err!("device count must be positive"));
        }
        let m = self.devices * self.model.spatial_multiple();
        if self.height % m != 0 || self.width % m != 0 || self.height == 0 || self.width == 0 {
            return Err(config_err!(
                "size {}x{} with {} devices: height and width must be divisible by {m} \
                 (devices * 2^(levels-1), levels={})",
                self.height,
                self.width,
                self.devices,
                self.model.levels
            ));
        }
        if self.steps == 0 {
            return Err(config_err!("step count must be positive"));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 4] {
        [1, self.model.in_channels, self.height, self.width]
    }

    pub fn build_model(&self) -> Result<Model> {
        match &self.weights {
            Some(p) => io::load_weights(p, self.model.clone()),
            None => Model::build(self.model.clone(), self.model_seed),
        }
    }

    /// Same model, noise, condition, and plan, run as the single-device oracle.
    pub fn reference_config(&self) -> Self {
        Self { mode: RunMode::Reference, devices: 1, ..self.clone() }
    }

    fn reference_key(&self) -> String {
        format!(
            "{}x{} steps={} model={} weights={:?} noise={} cond={}",
            self.height,
            self.width,
            self.steps,
            self.model_seed,
            self.weights,
            self.noise_seed,
            self.cond.describe()
        )
    }
}

pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub output: RunOutput,
    pub metrics: RunMetrics,
    /// Value range used to normalize image previews.
    pub image_range: (f32, f32),
}

pub fn run_experiment(cfg: &ExperimentConfig, model: &Model, reference: Option<&Tensor>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let schedule = NoiseSchedule::default();
    let plan = SamplerPlan::uniform(cfg.steps, &schedule)?;
    let cond = cfg.cond.load(cfg.model.cond_dim)?;
    if let Some(r) = reference {
        if r.dims() != cfg.dims() {
            return Err(config_err!("reference {:?} does not match run {:?}", r.dims(), cfg.dims()));
        }
    }
    let run = RunConfig { mode: cfg.run_mode(), devices: cfg.devices, gn: cfg.gn, scheduler: cfg.scheduler };
    let job = SamplingJob {
        model,
        cond: &cond,
        plan: &plan,
        schedule: &schedule,
        dims: cfg.dims(),
        noise_seed: cfg.noise_seed,
        run,
    };
    let output = run_sampling(&job)?;
    let metrics = output.metrics(model, reference, &cfg.cost)?;
    let image_range = reference.unwrap_or(&output.x0).min_max();
    Ok(ExperimentResult { config: cfg.clone(), output, metrics, image_range })
}

fn join_u64(xs: &[u64]) -> String {
    xs.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

/// `metric,value` rows for one run.
pub fn metrics_csv(r: &ExperimentResult) -> String {
    let c = &r.config;
    let m = &r.metrics;
    let mut rows: Vec<(&str, String)> = vec![
        ("mode", c.mode.name().into()),
        ("devices", c.devices.to_string()),
        ("steps", c.steps.to_string()),
        ("warmup", c.run_mode().warmup().to_string()),
        ("gn", c.gn.name().into()),
        ("height", c.height.to_string()),
        ("width", c.width.to_string()),
        ("model_seed", c.model_seed.to_string()),
        ("noise_seed", c.noise_seed.to_string()),
        ("cond", c.cond.describe()),
    ];
    if let Some(p) = m.psnr_db {
        rows.push(("psnr_db", p.to_string()));
    }
    rows.extend([
        ("image_range_min", r.image_range.0.to_string()),
        ("image_range_max", r.image_range.1.to_string()),
        ("total_macs", m.total_macs.to_string()),
        ("per_device_macs", join_u64(&m.macs_per_device)),
        ("comm_bytes", m.comm.total().to_string()),
        ("comm_all_gather_bytes", m.comm.all_gather.to_string()),
        ("comm_halo_bytes", m.comm.halo.to_string()),
        ("comm_stat_reduce_bytes", m.comm.stat_reduce.to_string()),
        ("comm_sent_bytes", m.comm.sent.to_string()),
        ("stall_us", m.timeline.stall_time().to_string()),
        ("makespan_us", m.timeline.makespan.to_string()),
        ("similarity_ratio", m.similarity.ratio().to_string()),
        ("similarity_mean_diff", m.similarity.mean_diff.to_string()),
        ("similarity_range", m.similarity.range.to_string()),
        ("compute_rate", c.cost.compute_rate.to_string()),
        ("link_bandwidth", c.cost.link_bandwidth.to_string()),
        ("link_latency", c.cost.link_latency.to_string()),
        ("comm_uses_compute_fraction", c.cost.comm_uses_compute_fraction.to_string()),
    ]);
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        writeln!(out, "{k},{v}").expect("write to String");
    }
    out
}

/// Write the requested artifacts into `cfg.out`.
pub fn write_artifacts(r: &ExperimentResult) -> Result<()> {
    let dir = &r.config.out;
    fs::create_dir_all(dir)?;
    for e in &r.config.emit {
        match e {
            Emit::Tensor => {
                io::write_tnsr(&dir.join("x0.tnsr"), &r.output.x0)?;
                io::write_tnsr(&dir.join("inputs.tnsr"), &Tensor::concat_batch(&r.output.inputs)?)?;
            }
            Emit::Image => io::write_pgm(&dir.join("x0.pgm"), &r.output.x0, r.image_range)?,
            Emit::Trace => {
                fs::write(dir.join("trace.txt"), trace::format_timeline(&r.metrics.timeline))?;
                fs::write(dir.join("trace_summary.txt"), trace::summary_table(&r.metrics.timeline))?;
            }
            Emit::Metrics => fs::write(dir.join("metrics.csv"), metrics_csv(r))?,
        }
    }
    Ok(())
}

pub const MATRIX_HEADER: &str = "mode,N,steps,warmup,psnr_db_vs_reference,total_macs,per_device_macs,comm_bytes,stall_us,makespan_us,similarity_ratio";

pub fn matrix_row(r: &ExperimentResult) -> String {
    let m = &r.metrics;
    let psnr = m.psnr_db.map_or_else(|| "nan".to_string(), |p| p.to_string());
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.config.mode.name(),
        r.config.devices,
        r.config.steps,
        r.config.run_mode().warmup(),
        psnr,
        m.total_macs,
        join_u64(&m.macs_per_device),
        m.comm.total(),
        m.timeline.stall_time(),
        m.timeline.makespan,
        m.similarity.ratio()
    )
}

/// One CSV row per experiment, each compared against a reference run with
/// the same model, size, steps, noise, and condition.
pub fn run_matrix(configs: &[ExperimentConfig]) -> Result<String> {
    let mut references: HashMap<String, Tensor> = HashMap::new();
    let mut out = String::from(MATRIX_HEADER);
    out.push('\n');
    for cfg in configs {
        cfg.validate()?;
        let model = cfg.build_model()?;
        let key = cfg.reference_key();
        if !references.contains_key(&key) {
            let r = run_experiment(&cfg.reference_config(), &model, None)?;
            references.insert(key.clone(), r.output.x0);
        }
        let result = run_experiment(cfg, &model, Some(&references[&key]))?;
        out.push_str(&matrix_row(&result));
        out.push('\n');
    }
    Ok(out)
}

/// One experiment per non-empty line: whitespace-separated `key=value`
/// overrides on top of `base`.
pub fn parse_matrix(text: &str, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut cfg = base.clone();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| config_err!("matrix line {}: '{tok}' is not key=value", i + 1))?;
            cfg.set(k, v)?;
        }
        out.push(cfg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_strip_comments() {
        let kv = parse_key_values("# c\nmode = naive\n model_seed=3 # x\n\n").unwrap();
        assert_eq!(kv, vec![("mode".into(), "naive".into()), ("model-seed".into(), "3".into())]);
        assert!(parse_key_values("oops").is_err());
    }

    #[test]
    fn settings_apply() {
        let mut c = ExperimentConfig::default();
        c.set("mode", "sync-pp").unwrap();
        c.set("size", "96x48").unwrap();
        c.set("emit", "trace,image,trace").unwrap();
        c.set("stress_seed", "9").unwrap();
        assert_eq!(c.mode, RunMode::SyncPP);
        assert_eq!((c.height, c.width), (96, 48));
        assert_eq!(c.emit, vec![Emit::Image, Emit::Trace]);
        assert_eq!(c.scheduler, Scheduler::Stress { seed: 9 });
        assert!(c.set("bogus", "1").unwrap_err().is_config());
        assert!(c.set("devices", "two").unwrap_err().is_config());
    }

    #[test]
    fn warmup_follows_mode() {
        let mut c = ExperimentConfig::default();
        c.set("warmup", "2").unwrap();
        c.set("mode", "displaced").unwrap();
        assert_eq!(c.run_mode(), RunMode::Displaced { warmup: 2 });
        c.set("warmup", "0").unwrap();
        assert_eq!(c.run_mode(), RunMode::Displaced { warmup: 0 });
    }

    #[test]
    fn divisibility_is_validated() {
        let mut c = ExperimentConfig { devices: 3, height: 64, width: 64, ..Default::default() };
        assert!(c.validate().unwrap_err().is_config());
        c.devices = 4;
        assert!(c.validate().is_ok());
        c.devices = 8;
        c.height = 48;
        c.width = 48;
        assert!(c.validate().is_err());
        c.height = 96;
        c.width = 96;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn cost_profile_parsing() {
        let p = parse_cost_profile("link_bandwidth = 250\ncomm_uses_compute_fraction=0\n").unwrap();
        assert_eq!(p.link_bandwidth, 250.0);
        assert_eq!(p.comm_uses_compute_fraction, 0.0);
        assert_eq!(p.compute_rate, CostParams::default().compute_rate);
        assert!(parse_cost_profile("link_bandwidth = -1").is_err());
        assert!(parse_cost_profile("speed = 1").is_err());
    }

    #[test]
    fn cond_sources() {
        assert_eq!(CondSource::parse("zeros").unwrap(), CondSource::Zeros);
        assert_eq!(CondSource::parse("seed:5").unwrap(), CondSource::Seed(5));
        assert!(CondSource::parse("seed:x").is_err());
        assert_eq!(CondSource::Seed(5).load(3).unwrap(), Condition::from_seed(3, 5));
    }

    #[test]
    fn empty_matrix_is_header_only() {
        assert_eq!(run_matrix(&[]).unwrap(), format!("{MATRIX_HEADER}\n"));
        assert!(parse_matrix("\n# nothing\n", &ExperimentConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn reference_row_against_itself() {
        let cfg = ExperimentConfig { mode: RunMode::Reference, devices: 1, height: 16, width: 16, steps: 2, ..Default::default() };
        let csv = run_matrix(&[cfg]).unwrap();
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0], "reference");
        assert_eq!(row[4], "inf");
        assert_eq!(row[7], "0");
    }
}
