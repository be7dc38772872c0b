//! Tagged mailboxes connecting the simulated devices.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use crate::cost::CommTag;
use crate::error::{Error, Result};
use crate::tensor::{GnSums, Tensor};

#[derive(Debug)]
pub enum Payload {
    Activation(Tensor),
    Sums(GnSums),
}

impl Payload {
    pub fn activation(&self) -> Result<&Tensor> {
        match self {
            Payload::Activation(t) => Ok(t),
            Payload::Sums(_) => Err(Error::Contract("expected an activation payload".into())),
        }
    }

    pub fn sums(&self) -> Result<&GnSums> {
        match self {
            Payload::Sums(s) => Ok(s),
            Payload::Activation(_) => Err(Error::Contract("expected a statistics payload".into())),
        }
    }
}

#[derive(Default)]
struct Inner {
    /// Per (tag, destination): one slot per source device.
    slots: HashMap<(CommTag, usize), Vec<Option<Arc<Payload>>>>,
    /// What each blocked device is waiting for.
    waiting: Vec<Option<(CommTag, Vec<usize>)>>,
    /// Devices still running their program in the current phase.
    active: usize,
    failed: Option<(usize, String)>,
    deadlock: Option<String>,
}

impl Inner {
    fn ready(&self, tag: CommTag, dst: usize, srcs: &[usize]) -> bool {
        self.slots
            .get(&(tag, dst))
            .is_some_and(|s| srcs.iter().all(|&i| s[i].is_some()))
    }

    fn take(&mut self, tag: CommTag, dst: usize, srcs: &[usize]) -> Vec<Arc<Payload>> {
        let key = (tag, dst);
        let slots = self.slots.get_mut(&key).expect("checked ready");
        let out = srcs.iter().map(|&i| slots[i].take().expect("checked ready")).collect();
        if slots.iter().all(|s| s.is_none()) {
            self.slots.remove(&key);
        }
        out
    }
}

/// Point-to-point tagged delivery between `n` devices. Receivers name the
/// sources they need; results come back in the order given, so assembly never
/// depends on arrival order.
///
/// Deadlock detection is logical: when every still-active device is blocked
/// and none of their waits can be satisfied, all of them fail.
pub struct Fabric {
    n: usize,
    inner: Mutex<Inner>,
    cv: Condvar,
}

impl Fabric {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            inner: Mutex::new(Inner { waiting: vec![None; n], active: n, ..Default::default() }),
            cv: Condvar::new(),
        }
    }

    pub fn devices(&self) -> usize {
        self.n
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn send(&self, tag: CommTag, src: usize, dst: usize, payload: Arc<Payload>) -> Result<()> {
        let mut g = self.lock();
        let slots = g.slots.entry((tag, dst)).or_insert_with(|| vec![None; self.n]);
        if slots[src].is_some() {
            return Err(Error::Contract(format!("device {src} sent {tag:?} to {dst} twice")));
        }
        slots[src] = Some(payload);
        drop(g);
        self.cv.notify_all();
        Ok(())
    }

    /// Deliver one payload to every device, the sender included.
    pub fn broadcast(&self, tag: CommTag, src: usize, payload: Payload) -> Result<()> {
        let payload = Arc::new(payload);
        for dst in 0..self.n {
            self.send(tag, src, dst, Arc::clone(&payload))?;
        }
        Ok(())
    }

    /// Non-blocking receive from `srcs`; `None` if anything is missing.
    pub fn try_recv(&self, tag: CommTag, dst: usize, srcs: &[usize]) -> Option<Vec<Arc<Payload>>> {
        let mut g = self.lock();
        g.ready(tag, dst, srcs).then(|| g.take(tag, dst, srcs))
    }

    /// Blocking receive. Returns the payloads and whether the caller had to wait.
    pub fn recv(&self, tag: CommTag, dst: usize, srcs: &[usize]) -> Result<(Vec<Arc<Payload>>, bool)> {
        let mut g = self.lock();
        let mut blocked = false;
        loop {
            if g.ready(tag, dst, srcs) {
                g.waiting[dst] = None;
                return Ok((g.take(tag, dst, srcs), blocked));
            }
            if let Some((device, reason)) = g.failed.clone() {
                g.waiting[dst] = None;
                return Err(Error::Worker { device, reason });
            }
            if let Some(msg) = g.deadlock.clone() {
                g.waiting[dst] = None;
                return Err(Error::Deadlock(msg));
            }
            g.waiting[dst] = Some((tag, srcs.to_vec()));
            let blocked_now = g.waiting.iter().flatten().count();
            let any_ready = g
                .waiting
                .iter()
                .enumerate()
                .any(|(d, w)| w.as_ref().is_some_and(|(t, s)| g.ready(*t, d, s)));
            if blocked_now >= g.active && !any_ready {
                let desc: Vec<String> = g
                    .waiting
                    .iter()
                    .enumerate()
                    .filter_map(|(d, w)| w.as_ref().map(|(t, _)| format!("device {d} waits on {t:?}")))
                    .collect();
                g.deadlock = Some(format!("all active devices blocked: {}", desc.join(", ")));
                self.cv.notify_all();
                continue;
            }
            blocked = true;
            g = self.cv.wait(g).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn recv_all(&self, tag: CommTag, dst: usize) -> Result<(Vec<Arc<Payload>>, bool)> {
        let srcs: Vec<usize> = (0..self.n).collect();
        self.recv(tag, dst, &srcs)
    }

    /// Start a phase in which all `n` devices run.
    pub fn activate_all(&self) {
        let mut g = self.lock();
        g.active = self.n;
        g.deadlock = None;
        g.waiting.iter_mut().for_each(|w| *w = None);
    }

    /// The device has finished its program for this phase.
    pub fn retire(&self, device: usize) {
        let mut g = self.lock();
        g.active = g.active.saturating_sub(1);
        g.waiting[device] = None;
        drop(g);
        self.cv.notify_all();
    }

    /// Record a worker failure; blocked peers wake up with an error.
    pub fn fail(&self, device: usize, reason: String) {
        let mut g = self.lock();
        if g.failed.is_none() {
            g.failed = Some((device, reason));
        }
        drop(g);
        self.cv.notify_all();
    }

    pub fn failure(&self) -> Option<(usize, String)> {
        self.lock().failed.clone()
    }

    /// Undelivered (tag, destination) entries.
    pub fn outstanding(&self) -> usize {
        self.lock().slots.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::Primitive;
    use std::thread;

    fn tag(layer: usize) -> CommTag {
        CommTag { step: 0, layer, primitive: Primitive::AllGather }
    }

    fn scalar(v: f32) -> Payload {
        Payload::Activation(Tensor::full([1, 1, 1, 1], v))
    }

    #[test]
    fn ordered_by_source_not_arrival() {
        let f = Fabric::new(3);
        f.broadcast(tag(0), 2, scalar(2.0)).unwrap();
        f.broadcast(tag(0), 0, scalar(0.0)).unwrap();
        assert!(f.try_recv(tag(0), 1, &[0, 1, 2]).is_none());
        f.broadcast(tag(0), 1, scalar(1.0)).unwrap();
        let got = f.try_recv(tag(0), 1, &[0, 1, 2]).unwrap();
        let vals: Vec<f32> = got.iter().map(|p| p.activation().unwrap().data()[0]).collect();
        assert_eq!(vals, vec![0.0, 1.0, 2.0]);
        assert_eq!(f.outstanding(), 2);
    }

    #[test]
    fn duplicate_send_rejected() {
        let f = Fabric::new(2);
        f.broadcast(tag(0), 0, scalar(0.0)).unwrap();
        assert!(f.broadcast(tag(0), 0, scalar(0.0)).is_err());
    }

    #[test]
    fn threads_rendezvous() {
        let f = Fabric::new(4);
        thread::scope(|s| {
            for d in 0..4 {
                let f = &f;
                s.spawn(move || {
                    f.broadcast(tag(7), d, scalar(d as f32)).unwrap();
                    let (got, _) = f.recv_all(tag(7), d).unwrap();
                    assert_eq!(got.len(), 4);
                    f.retire(d);
                });
            }
        });
        assert_eq!(f.outstanding(), 0);
    }

    #[test]
    fn mismatched_tags_deadlock() {
        let f = Fabric::new(2);
        let results: Vec<_> = thread::scope(|s| {
            let hs: Vec<_> = (0..2)
                .map(|d| {
                    let f = &f;
                    s.spawn(move || {
                        f.broadcast(tag(d), d, scalar(0.0)).unwrap();
                        let r = f.recv_all(tag(d), d);
                        f.retire(d);
                        r
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(results.iter().all(|r| matches!(r, Err(Error::Deadlock(_)))));
    }

    #[test]
    fn failure_wakes_waiters() {
        let f = Fabric::new(2);
        let r = thread::scope(|s| {
            let waiter = s.spawn(|| f.recv_all(tag(0), 0));
            s.spawn(|| f.fail(1, "boom".into()));
            waiter.join().unwrap()
        });
        assert!(matches!(r, Err(Error::Worker { device: 1, .. })));
    }
}
