//! Line-delimited timeline records: `device= kind= layer= step= start= end= bytes= macs=`.

use std::fmt::Write;

use crate::cost::{EventKind, Timeline, TimelineEvent};
use crate::error::{Error, Result};

pub fn format_event(e: &TimelineEvent) -> String {
    format!(
        "device={} kind={} layer={} step={} start={} end={} bytes={} macs={}",
        e.device,
        e.kind.name(),
        e.layer,
        e.step,
        e.start,
        e.end,
        e.bytes,
        e.macs
    )
}

pub fn format_timeline(t: &Timeline) -> String {
    let mut out = String::new();
    for e in &t.events {
        out.push_str(&format_event(e));
        out.push('\n');
    }
    out
}

pub fn parse_event(line: &str) -> Result<TimelineEvent> {
    let bad = |what: &str| Error::Trace(format!("{what} in trace line '{line}'"));
    let mut fields = [None::<&str>; 8];
    const KEYS: [&str; 8] = ["device", "kind", "layer", "step", "start", "end", "bytes", "macs"];
    for tok in line.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| bad("malformed field"))?;
        let i = KEYS.iter().position(|&x| x == k).ok_or_else(|| bad("unknown key"))?;
        if fields[i].replace(v).is_some() {
            return Err(bad("duplicate key"));
        }
    }
    let get = |i: usize| fields[i].ok_or_else(|| bad(&format!("missing {}", KEYS[i])));
    let int = |i: usize| get(i)?.parse::<u64>().map_err(|_| bad(KEYS[i]));
    let real = |i: usize| get(i)?.parse::<f64>().map_err(|_| bad(KEYS[i]));
    Ok(TimelineEvent {
        device: int(0)? as usize,
        kind: EventKind::parse(get(1)?).ok_or_else(|| bad("unknown kind"))?,
        layer: int(2)? as usize,
        step: int(3)? as usize,
        start: real(4)?,
        end: real(5)?,
        bytes: int(6)?,
        macs: int(7)?,
    })
}

/// Rebuild a timeline from records. Device ends and makespan are recomputed
/// from the device's own events; transfers still landing afterwards do not count.
pub fn parse_timeline(text: &str) -> Result<Timeline> {
    let events: Vec<TimelineEvent> =
        text.lines().filter(|l| !l.trim().is_empty()).map(parse_event).collect::<Result<_>>()?;
    let devices = events.iter().map(|e| e.device + 1).max().unwrap_or(0);
    let mut device_end = vec![0f64; devices];
    for e in events.iter().filter(|e| e.kind != EventKind::CommComplete) {
        device_end[e.device] = device_end[e.device].max(e.end);
    }
    let makespan = device_end.iter().copied().fold(0.0, f64::max);
    Ok(Timeline { events, device_end, makespan })
}

/// Per-device busy, stall, and traffic totals.
pub fn summary_table(t: &Timeline) -> String {
    let mut out = String::from("device  compute_us  stall_us  recv_bytes  macs  end_us\n");
    for (d, end) in t.device_end.iter().enumerate() {
        let (mut compute, mut stall, mut bytes, mut macs) = (0.0, 0.0, 0u64, 0u64);
        for e in t.events.iter().filter(|e| e.device == d) {
            match e.kind {
                EventKind::Compute => {
                    compute += e.end - e.start;
                    macs += e.macs;
                }
                EventKind::Stall => stall += e.end - e.start,
                EventKind::CommComplete => bytes += e.bytes,
                EventKind::CommPost => {}
            }
        }
        writeln!(out, "{d}  {compute:.3}  {stall:.3}  {bytes}  {macs}  {end:.3}").expect("write to String");
    }
    writeln!(out, "makespan_us {:.3}", t.makespan).expect("write to String");
    out
}
