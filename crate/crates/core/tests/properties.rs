use proptest::prelude::*;

use dpp_core::cost::{simulate_timeline, CommTag, CostParams, EventKind, Primitive, Trace, TraceOp};
use dpp_core::harness::io::{decode_tnsr, encode_tnsr};
use dpp_core::runtime::{corrected_gn_stats, partition_rows};
use dpp_core::tensor::{conv2d, conv2d_region, group_sums, GnSums};
use dpp_core::{Region, Tensor};

fn tensor(dims: [usize; 4], vals: &[f32]) -> Tensor {
    let mut i = 0;
    Tensor::from_fn(dims, |_| {
        i += 1;
        vals[(i - 1) % vals.len()]
    })
}

fn dims_and_values() -> impl Strategy<Value = ([usize; 4], Vec<f32>)> {
    (1usize..3, 1usize..4, 1usize..7, 1usize..6)
        .prop_flat_map(|(n, c, h, w)| (Just([n, c, h, w]), prop::collection::vec(-100f32..100.0, n * c * h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tnsr_roundtrip_is_bit_exact(bits in prop::collection::vec(any::<u32>().prop_filter("finite", |b| f32::from_bits(*b).is_finite()), 1..40)) {
        let x = Tensor::new([1, 1, 1, bits.len()], bits.iter().map(|b| f32::from_bits(*b)).collect()).unwrap();
        let mut buf = Vec::new();
        encode_tnsr(&x, &mut buf);
        let (y, used) = decode_tnsr(&buf).unwrap();
        prop_assert_eq!(used, buf.len());
        let got: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);
    }

    #[test]
    fn partition_covers_rows_once(n in 1usize..9, per in 1usize..6, w in 1usize..4) {
        let bands = partition_rows(n * per, w, n).unwrap();
        let mut next = 0;
        for b in &bands {
            prop_assert_eq!(b.row_start, next);
            prop_assert_eq!(b.rows(), per);
            next = b.row_end;
        }
        prop_assert_eq!(next, n * per);
    }

    #[test]
    fn band_stats_reduce_to_global_bitwise((dims, vals) in dims_and_values(), cuts in prop::collection::vec(0usize..100, 0..4)) {
        let dims = [dims[0], 4, dims[2], dims[3]];
        let x = tensor(dims, &vals);
        let h = dims[2];
        let mut bounds: Vec<usize> = cuts.iter().map(|c| c % (h + 1)).collect();
        bounds.extend([0, h]);
        bounds.sort();
        bounds.dedup();
        let parts: Vec<GnSums> = bounds
            .windows(2)
            .map(|r| group_sums(&x, 2, Some(&Region::new(r[0], r[1], h, dims[3]).unwrap())).unwrap())
            .collect();
        let global = group_sums(&x, 2, None).unwrap().finish();
        prop_assert_eq!(GnSums::reduce(&parts).unwrap().finish(), global);
    }

    #[test]
    fn conv_band_rows_equal_full_conv_rows((dims, vals) in dims_and_values(), a in 0usize..7, b in 0usize..7) {
        let x = tensor(dims, &vals);
        let c = dims[1];
        let wt = tensor([2, c, 3, 3], &[0.5, -0.25, 0.125, 1.0, -1.0]);
        let full = conv2d(&x, &wt, &[0.1, -0.1], 1, 1).unwrap();
        let r0 = a % dims[2];
        let r1 = r0 + 1 + b % (dims[2] - r0);
        let region = Region::new(r0, r1, dims[2], dims[3]).unwrap();
        let band = conv2d_region(&x, &region, &wt, &[0.1, -0.1], 1, 1).unwrap();
        prop_assert_eq!(band, full.slice_rows(r0, r1).unwrap());
    }

    #[test]
    fn gn_correction_degenerates_exactly((dims, vals) in dims_and_values(), seed in any::<u16>()) {
        let dims = [dims[0], 4, dims[2], dims[3]];
        let x = tensor(dims, &vals);
        let shifted = x.map(|v| v * 0.9 + seed as f32 * 1e-3);
        let f = group_sums(&x, 2, None).unwrap().finish();
        let p = group_sums(&shifted, 2, None).unwrap().finish();
        let g = group_sums(&shifted.map(|v| v - 1.5), 2, None).unwrap().finish();
        // No local change: the stale global passes through.
        prop_assert_eq!(corrected_gn_stats(&p, &p, &g).unwrap(), g.clone());
        // Device owns everything: the fresh stats are exact.
        prop_assert_eq!(corrected_gn_stats(&f, &p, &p).unwrap(), f.clone());
        let c = corrected_gn_stats(&f, &p, &g).unwrap();
        for i in 0..c.mean.len() {
            prop_assert!(c.variance(i) >= -1e-9);
        }
    }
}

#[derive(Clone, Debug)]
struct LayerPlan {
    macs: Vec<u64>,
    comm: Option<(Vec<u64>, bool)>,
}

fn trace_strategy() -> impl Strategy<Value = (usize, Vec<Vec<LayerPlan>>)> {
    (1usize..4).prop_flat_map(|n| {
        let layer = (
            prop::collection::vec(0u64..5000, n),
            prop::option::of((prop::collection::vec(0u64..3000, n), any::<bool>())),
        )
            .prop_map(|(macs, comm)| LayerPlan { macs, comm });
        (Just(n), prop::collection::vec(prop::collection::vec(layer, 1..6), 1..4))
    })
}

/// Sync comms wait right after posting; async ones are waited on by the same
/// layer of the next step, like displaced gathers.
fn build_trace(n: usize, steps: &[Vec<LayerPlan>]) -> Trace {
    let mut t = Trace::new(n);
    let mut deferred: Vec<Option<CommTag>> = vec![None; 8];
    for (k, layers) in steps.iter().enumerate() {
        for (l, plan) in layers.iter().enumerate() {
            let prev = deferred[l].take();
            for d in 0..n {
                let ops = &mut t.devices[d];
                if let Some(tag) = prev {
                    ops.push(TraceOp::Wait { step: k, layer: l, tag });
                }
                let tag = CommTag { step: k, layer: l, primitive: Primitive::AllGather };
                match &plan.comm {
                    Some((bytes, sync)) => {
                        ops.push(TraceOp::Post { tag, bytes_sent: bytes[d], bytes_received: bytes[d] });
                        if *sync {
                            ops.push(TraceOp::Wait { step: k, layer: l, tag });
                        }
                    }
                    None => {}
                }
                ops.push(TraceOp::Compute { step: k, layer: l, macs: plan.macs[d] });
            }
            if let Some((_, false)) = plan.comm {
                deferred[l] = Some(CommTag { step: k, layer: l, primitive: Primitive::AllGather });
            }
        }
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn timeline_invariants((n, steps) in trace_strategy(), bw in 1f64..500.0, frac in 0f64..0.9) {
        let trace = build_trace(n, &steps);
        let p = CostParams { link_bandwidth: bw, comm_uses_compute_fraction: frac, ..CostParams::default() };
        let tl = simulate_timeline(&trace, &p).unwrap();
        for d in 0..n {
            let computes: Vec<_> = tl.events.iter().filter(|e| e.device == d && e.kind == EventKind::Compute).collect();
            for pair in computes.windows(2) {
                prop_assert!(pair[0].end <= pair[1].start + 1e-9);
            }
            for c in &computes {
                // Never faster than the nominal rate, never slower than the stretched one.
                let nominal = c.macs as f64 / p.compute_rate;
                prop_assert!(c.end - c.start >= nominal - 1e-6);
                prop_assert!(c.end - c.start <= nominal / (1.0 - frac) + 1e-6);
            }
            prop_assert!(tl.device_end[d] <= tl.makespan);
        }
        prop_assert!(tl.events.iter().all(|e| e.end >= e.start));
        let max_end = tl.device_end.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(tl.makespan, max_end);
        let total_bytes: u64 = tl.events.iter().filter(|e| e.kind == EventKind::CommComplete).map(|e| e.bytes).sum();
        let posted: u64 = trace.devices.iter().flatten().map(|op| match op {
            TraceOp::Post { bytes_received, .. } => *bytes_received,
            _ => 0,
        }).sum();
        prop_assert_eq!(total_bytes, posted);
    }

    #[test]
    fn free_links_hide_deferred_comms((n, mut steps) in trace_strategy()) {
        // Synchronous collectives legitimately wait for the slowest poster;
        // only deferred ones can be fully hidden.
        for plan in steps.iter_mut().flatten() {
            if let Some((_, sync)) = plan.comm.as_mut() {
                *sync = false;
            }
        }
        let trace = build_trace(n, &steps);
        let p = CostParams { link_bandwidth: f64::INFINITY, link_latency: 0.0, comm_uses_compute_fraction: 0.0, ..CostParams::default() };
        let tl = simulate_timeline(&trace, &p).unwrap();
        prop_assert_eq!(tl.stall_time(), 0.0);
        // Only the step barrier remains: each step lasts as long as its slowest device.
        let want: f64 = steps.iter().map(|layers| {
            (0..n).map(|d| layers.iter().map(|l| l.macs[d]).sum::<u64>() as f64 / p.compute_rate).fold(0.0, f64::max)
        }).sum();
        prop_assert!((tl.makespan - want).abs() <= 1e-6 * want.max(1.0));
    }
}
