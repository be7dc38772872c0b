use std::collections::HashMap;

use super::{CommTag, CostParams, Trace, TraceOp};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    Compute,
    CommPost,
    CommComplete,
    Stall,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Compute => "compute",
            EventKind::CommPost => "comm_post",
            EventKind::CommComplete => "comm_complete",
            EventKind::Stall => "stall",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "compute" => EventKind::Compute,
            "comm_post" => EventKind::CommPost,
            "comm_complete" => EventKind::CommComplete,
            "stall" => EventKind::Stall,
            _ => return None,
        })
    }
}

/// Times are simulated microseconds. `bytes` is sent bytes for a post and
/// received bytes for a completion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimelineEvent {
    pub device: usize,
    pub kind: EventKind,
    pub layer: usize,
    pub step: usize,
    pub start: f64,
    pub end: f64,
    pub bytes: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timeline {
    pub events: Vec<TimelineEvent>,
    pub device_end: Vec<f64>,
    pub makespan: f64,
}

impl Timeline {
    pub fn stall_time(&self) -> f64 {
        self.stall_time_where(|_| true)
    }

    pub fn stall_time_where(&self, mut keep_step: impl FnMut(usize) -> bool) -> f64 {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Stall && keep_step(e.step))
            .fold(0.0, |acc, e| acc + (e.end - e.start))
    }

    pub fn stall_count(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Stall).count()
    }
}

#[derive(Clone, Copy, Debug)]
enum State {
    Ready,
    Computing { step: usize, layer: usize, macs: u64, remaining: f64, start: f64 },
    Waiting { step: usize, layer: usize, tag: CommTag, since: f64 },
    Barrier,
    Done,
}

#[derive(Clone, Copy, Debug)]
struct Transfer {
    device: usize,
    start: f64,
    end: f64,
}

struct Sim<'a> {
    trace: &'a Trace,
    params: &'a CostParams,
    now: f64,
    step: usize,
    pc: Vec<usize>,
    state: Vec<State>,
    device_end: Vec<f64>,
    link_free: Vec<f64>,
    posted: HashMap<CommTag, Vec<Option<u64>>>,
    arrival: HashMap<(CommTag, usize), f64>,
    in_flight: Vec<Transfer>,
    events: Vec<TimelineEvent>,
}

/// Discrete-event run of the per-device programs.
///
/// Devices compute serially at `compute_rate`, slowed by
/// `1 / (1 - comm_uses_compute_fraction)` while a transfer into the device
/// is in flight. A collective's transfers start once every device has
/// posted; each device's receive link carries one transfer at a time. A
/// wait that is not yet satisfied records a `Stall`. Steps end with a
/// barrier; transfers keep running across it.
pub fn simulate_timeline(trace: &Trace, params: &CostParams) -> Result<Timeline> {
    params.validate()?;
    let n = trace.device_count();
    for (i, ops) in trace.devices.iter().enumerate() {
        if ops.windows(2).any(|w| w[1].step() < w[0].step()) {
            return Err(Error::Trace(format!("device {i} program goes back in step order")));
        }
    }
    let first_step = trace.devices.iter().filter_map(|ops| ops.first()).map(|op| op.step()).min();
    let mut sim = Sim {
        trace,
        params,
        now: 0.0,
        step: first_step.unwrap_or(0),
        pc: vec![0; n],
        state: vec![State::Ready; n],
        device_end: vec![0.0; n],
        link_free: vec![0.0; n],
        posted: HashMap::new(),
        arrival: HashMap::new(),
        in_flight: Vec::new(),
        events: Vec::new(),
    };
    loop {
        sim.settle()?;
        if sim.state.iter().all(|s| matches!(s, State::Done)) {
            break;
        }
        sim.advance()?;
    }
    let makespan = sim.device_end.iter().copied().fold(0.0, f64::max);
    Ok(Timeline { events: sim.events, device_end: sim.device_end, makespan })
}

impl Sim<'_> {
    fn rate(&self, device: usize) -> f64 {
        let busy = self
            .in_flight
            .iter()
            .any(|t| t.device == device && t.start <= self.now && self.now < t.end);
        if busy {
            self.params.compute_rate * (1.0 - self.params.comm_uses_compute_fraction)
        } else {
            self.params.compute_rate
        }
    }

    /// Run every instantaneous op that can run at `now`, releasing step
    /// barriers as they fill.
    fn settle(&mut self) -> Result<()> {
        loop {
            let mut progressed = false;
            for i in 0..self.state.len() {
                progressed |= self.run_device(i)?;
            }
            if progressed {
                continue;
            }
            let parked = self.state.iter().any(|s| matches!(s, State::Barrier));
            let all_parked = self.state.iter().all(|s| matches!(s, State::Barrier | State::Done));
            if parked && all_parked {
                self.step = (0..self.state.len())
                    .filter(|&i| matches!(self.state[i], State::Barrier))
                    .map(|i| self.trace.devices[i][self.pc[i]].step())
                    .min()
                    .expect("a parked device");
                for s in self.state.iter_mut() {
                    if matches!(s, State::Barrier) {
                        *s = State::Ready;
                    }
                }
                continue;
            }
            return Ok(());
        }
    }

    fn run_device(&mut self, i: usize) -> Result<bool> {
        let mut progressed = false;
        loop {
            match self.state[i] {
                State::Ready => {}
                State::Waiting { step, layer, tag, since } => match self.arrival.get(&(tag, i)) {
                    Some(&end) if end <= self.now => {
                        if self.now > since {
                            self.push(i, EventKind::Stall, layer, step, since, self.now, 0, 0);
                        }
                        self.device_end[i] = self.now;
                        self.state[i] = State::Ready;
                        progressed = true;
                        continue;
                    }
                    _ => return Ok(progressed),
                },
                _ => return Ok(progressed),
            }
            let ops = &self.trace.devices[i];
            let Some(&op) = ops.get(self.pc[i]) else {
                self.state[i] = State::Done;
                return Ok(true);
            };
            if op.step() > self.step {
                self.state[i] = State::Barrier;
                return Ok(true);
            }
            self.pc[i] += 1;
            progressed = true;
            match op {
                TraceOp::Compute { step, layer, macs } => {
                    if macs == 0 {
                        self.push(i, EventKind::Compute, layer, step, self.now, self.now, 0, 0);
                        self.device_end[i] = self.now;
                    } else {
                        self.state[i] = State::Computing {
                            step,
                            layer,
                            macs,
                            remaining: macs as f64,
                            start: self.now,
                        };
                    }
                }
                TraceOp::Post { tag, bytes_sent, bytes_received } => {
                    self.push(i, EventKind::CommPost, tag.layer, tag.step, self.now, self.now, 0, bytes_sent);
                    self.device_end[i] = self.now;
                    self.post(i, tag, bytes_received)?;
                }
                TraceOp::Wait { step, layer, tag } => {
                    self.state[i] = State::Waiting { step, layer, tag, since: self.now };
                }
            }
        }
    }

    fn post(&mut self, device: usize, tag: CommTag, bytes_received: u64) -> Result<()> {
        let n = self.state.len();
        let slots = self.posted.entry(tag).or_insert_with(|| vec![None; n]);
        if slots[device].replace(bytes_received).is_some() {
            return Err(Error::Trace(format!("device {device} posted {tag:?} twice")));
        }
        if slots.iter().any(|s| s.is_none()) {
            return Ok(());
        }
        let received: Vec<u64> = slots.iter().map(|s| s.unwrap()).collect();
        self.posted.remove(&tag);
        for (r, bytes) in received.into_iter().enumerate() {
            let dur = self.params.transfer_time(bytes);
            let (start, end) = if dur == 0.0 {
                (self.now, self.now)
            } else {
                let start = self.link_free[r].max(self.now);
                self.link_free[r] = start + dur;
                (start, start + dur)
            };
            self.arrival.insert((tag, r), end);
            self.push(r, EventKind::CommComplete, tag.layer, tag.step, start, end, 0, bytes);
            if end > self.now {
                self.in_flight.push(Transfer { device: r, start, end });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, device: usize, kind: EventKind, layer: usize, step: usize, start: f64, end: f64, macs: u64, bytes: u64) {
        self.events.push(TimelineEvent { device, kind, layer, step, start, end, bytes, macs });
    }

    fn advance(&mut self) -> Result<()> {
        let mut next = f64::INFINITY;
        for i in 0..self.state.len() {
            if let State::Computing { remaining, .. } = self.state[i] {
                next = next.min(self.now + remaining / self.rate(i));
            }
        }
        for t in &self.in_flight {
            if t.start > self.now {
                next = next.min(t.start);
            } else {
                next = next.min(t.end);
            }
        }
        if !next.is_finite() {
            let stuck: Vec<String> = (0..self.state.len())
                .filter(|&i| !matches!(self.state[i], State::Done))
                .map(|i| format!("device {i}: {:?}", self.state[i]))
                .collect();
            return Err(Error::Trace(format!("no progress possible; {}", stuck.join("; "))));
        }
        let dt = next - self.now;
        let rates: Vec<f64> = (0..self.state.len()).map(|i| self.rate(i)).collect();
        self.now = next;
        for i in 0..self.state.len() {
            if let State::Computing { step, layer, macs, remaining, start } = self.state[i] {
                let left = remaining - rates[i] * dt;
                if left <= 1e-9 * macs as f64 {
                    self.push(i, EventKind::Compute, layer, step, start, self.now, macs, 0);
                    self.device_end[i] = self.now;
                    self.state[i] = State::Ready;
                } else {
                    self.state[i] = State::Computing { step, layer, macs, remaining: left, start };
                }
            }
        }
        let now = self.now;
        self.in_flight.retain(|t| t.end > now);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{CostParams, Primitive};
    use super::*;

    fn tag(step: usize, layer: usize) -> CommTag {
        CommTag { step, layer, primitive: Primitive::AllGather }
    }

    fn params(fraction: f64) -> CostParams {
        CostParams {
            compute_rate: 10.0,
            link_bandwidth: 1.0,
            link_latency: 0.0,
            comm_uses_compute_fraction: fraction,
        }
    }

    #[test]
    fn compute_only_makespan() {
        let mut t = Trace::new(2);
        for (i, ops) in t.devices.iter_mut().enumerate() {
            ops.push(TraceOp::Compute { step: 0, layer: 0, macs: 100 });
            ops.push(TraceOp::Compute { step: 0, layer: 1, macs: 50 * (i as u64 + 1) });
        }
        let tl = simulate_timeline(&t, &params(0.15)).unwrap();
        assert_eq!(tl.device_end, vec![15.0, 20.0]);
        assert_eq!(tl.makespan, 20.0);
        assert_eq!(tl.stall_time(), 0.0);
    }

    #[test]
    fn sync_wait_stalls_for_transfer() {
        let mut t = Trace::new(2);
        for ops in t.devices.iter_mut() {
            ops.push(TraceOp::Post { tag: tag(0, 0), bytes_sent: 5, bytes_received: 5 });
            ops.push(TraceOp::Wait { step: 0, layer: 0, tag: tag(0, 0) });
            ops.push(TraceOp::Compute { step: 0, layer: 0, macs: 10 });
        }
        let tl = simulate_timeline(&t, &params(0.15)).unwrap();
        assert_eq!(tl.makespan, 6.0);
        assert_eq!(tl.stall_time(), 10.0);
    }

    #[test]
    fn async_transfer_hidden_but_stretches_compute() {
        let mut t = Trace::new(1);
        t.devices[0] = vec![
            TraceOp::Post { tag: tag(0, 0), bytes_sent: 4, bytes_received: 4 },
            TraceOp::Compute { step: 0, layer: 1, macs: 100 },
            TraceOp::Wait { step: 1, layer: 0, tag: tag(0, 0) },
            TraceOp::Compute { step: 1, layer: 0, macs: 10 },
        ];
        let tl = simulate_timeline(&t, &params(0.5)).unwrap();
        // 4 us at half rate covers 20 MACs, the remaining 80 take 8 us.
        let compute: Vec<_> = tl.events.iter().filter(|e| e.kind == EventKind::Compute).collect();
        assert_eq!((compute[0].start, compute[0].end), (0.0, 12.0));
        assert_eq!(tl.stall_count(), 0);
        assert_eq!(tl.makespan, 13.0);
    }

    #[test]
    fn link_serializes_transfers() {
        let mut t = Trace::new(1);
        t.devices[0] = vec![
            TraceOp::Post { tag: tag(0, 0), bytes_sent: 3, bytes_received: 3 },
            TraceOp::Post { tag: tag(0, 1), bytes_sent: 3, bytes_received: 3 },
            TraceOp::Wait { step: 0, layer: 1, tag: tag(0, 1) },
        ];
        let tl = simulate_timeline(&t, &params(0.0)).unwrap();
        assert_eq!(tl.makespan, 6.0);
        let done: Vec<_> = tl.events.iter().filter(|e| e.kind == EventKind::CommComplete).map(|e| (e.start, e.end)).collect();
        assert_eq!(done, vec![(0.0, 3.0), (3.0, 6.0)]);
    }

    #[test]
    fn barrier_aligns_steps() {
        let mut t = Trace::new(2);
        t.devices[0] = vec![
            TraceOp::Compute { step: 0, layer: 0, macs: 10 },
            TraceOp::Compute { step: 1, layer: 0, macs: 10 },
        ];
        t.devices[1] = vec![
            TraceOp::Compute { step: 0, layer: 0, macs: 30 },
            TraceOp::Compute { step: 1, layer: 0, macs: 10 },
        ];
        let tl = simulate_timeline(&t, &params(0.0)).unwrap();
        assert_eq!(tl.device_end, vec![4.0, 4.0]);
    }

    #[test]
    fn unmatched_wait_is_reported() {
        let mut t = Trace::new(2);
        t.devices[0] = vec![
            TraceOp::Post { tag: tag(0, 0), bytes_sent: 1, bytes_received: 1 },
            TraceOp::Wait { step: 0, layer: 0, tag: tag(0, 0) },
        ];
        t.devices[1] = vec![
            TraceOp::Post { tag: tag(0, 1), bytes_sent: 1, bytes_received: 1 },
            TraceOp::Wait { step: 0, layer: 1, tag: tag(0, 1) },
        ];
        assert!(matches!(simulate_timeline(&t, &params(0.0)), Err(Error::Trace(_))));
        let mut back = Trace::new(1);
        back.devices[0] = vec![
            TraceOp::Compute { step: 1, layer: 0, macs: 1 },
            TraceOp::Compute { step: 0, layer: 0, macs: 1 },
        ];
        assert!(simulate_timeline(&back, &params(0.0)).is_err());
    }

    #[test]
    fn infinite_bandwidth_hides_everything() {
        let mut t = Trace::new(2);
        for ops in t.devices.iter_mut() {
            ops.push(TraceOp::Post { tag: tag(0, 0), bytes_sent: 100, bytes_received: 100 });
            ops.push(TraceOp::Compute { step: 0, layer: 0, macs: 100 });
            ops.push(TraceOp::Wait { step: 1, layer: 0, tag: tag(0, 0) });
        }
        let p = CostParams { link_bandwidth: f64::INFINITY, ..params(0.5) };
        let tl = simulate_timeline(&t, &p).unwrap();
        assert_eq!(tl.makespan, 10.0);
    }
}
