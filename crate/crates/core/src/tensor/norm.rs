use super::{Region, Tensor};
use crate::error::{shape_err, Error, Result};

/// Per-(sample, group) sums over a band of rows, kept resolved per row. The
/// payload of a statistics reduction: bands concatenate, and `finish` folds
/// rows top to bottom, so any row partition reproduces the whole-map sums
/// bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct GnSums {
    pub samples: usize,
    pub groups: usize,
    pub row_start: usize,
    pub rows: usize,
    /// Indexed `(sample * groups + group) * rows + row`.
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
    /// Elements contributing to each (sample, group, row) entry.
    pub count_per_row: u64,
}

impl GnSums {
    /// Append the band directly below `self`.
    pub fn combine(&self, other: &GnSums) -> Result<GnSums> {
        if self.samples != other.samples
            || self.groups != other.groups
            || self.count_per_row != other.count_per_row
        {
            return Err(shape_err!(
                "cannot combine stats over {}x{} with {}x{}",
                self.samples,
                self.groups,
                other.samples,
                other.groups
            ));
        }
        if other.row_start != self.row_start + self.rows {
            return Err(shape_err!(
                "stat bands not contiguous: rows [{}, {}) then [{}, ..)",
                self.row_start,
                self.row_start + self.rows,
                other.row_start
            ));
        }
        let rows = self.rows + other.rows;
        let entries = self.samples * self.groups;
        let mut sum = Vec::with_capacity(entries * rows);
        let mut sum_sq = Vec::with_capacity(entries * rows);
        for e in 0..entries {
            sum.extend_from_slice(&self.sum[e * self.rows..(e + 1) * self.rows]);
            sum.extend_from_slice(&other.sum[e * other.rows..(e + 1) * other.rows]);
            sum_sq.extend_from_slice(&self.sum_sq[e * self.rows..(e + 1) * self.rows]);
            sum_sq.extend_from_slice(&other.sum_sq[e * other.rows..(e + 1) * other.rows]);
        }
        Ok(GnSums {
            samples: self.samples,
            groups: self.groups,
            row_start: self.row_start,
            rows,
            sum,
            sum_sq,
            count_per_row: self.count_per_row,
        })
    }

    /// Combine bands given top to bottom.
    pub fn reduce(parts: &[GnSums]) -> Result<GnSums> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| shape_err!("reduction over zero partial stats"))?;
        rest.iter().try_fold(first.clone(), |acc, p| acc.combine(p))
    }

    pub fn finish(&self) -> GnStats {
        let c = (self.count_per_row * self.rows as u64).max(1) as f64;
        let fold = |v: &[f64]| -> Vec<f64> {
            v.chunks(self.rows.max(1)).map(|rows| rows.iter().fold(0.0, |a, b| a + b) / c).collect()
        };
        GnStats {
            samples: self.samples,
            groups: self.groups,
            mean: fold(&self.sum),
            mean_sq: fold(&self.sum_sq),
        }
    }

    /// Bytes on the wire: an `f64` sum and sum of squares per entry and row.
    pub fn byte_len(&self) -> u64 {
        (self.samples * self.groups * self.rows * 16) as u64
    }
}

/// Per-(sample, group) first and second moments, indexed `sample * groups + group`.
#[derive(Clone, Debug, PartialEq)]
pub struct GnStats {
    pub samples: usize,
    pub groups: usize,
    pub mean: Vec<f64>,
    pub mean_sq: Vec<f64>,
}

impl GnStats {
    pub fn group_count(&self) -> usize {
        self.groups
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.mean_sq[i] - self.mean[i] * self.mean[i]
    }

    pub fn same_layout(&self, other: &GnStats) -> bool {
        self.samples == other.samples && self.groups == other.groups
    }
}

fn stat_rows(x: &Tensor, region: Option<&Region>) -> Result<(usize, usize)> {
    match region {
        Some(r) => {
            r.check_parent(x)?;
            Ok((r.row_start, r.row_end))
        }
        None => Ok((0, x.h())),
    }
}

pub fn group_sums(x: &Tensor, groups: usize, region: Option<&Region>) -> Result<GnSums> {
    let [n, c, h, w] = x.dims();
    if groups == 0 || c % groups != 0 {
        return Err(shape_err!("{c} channels not divisible into {groups} groups"));
    }
    let (r0, r1) = stat_rows(x, region)?;
    let per_group = c / groups;
    let d = x.data();
    let rows = r1 - r0;
    let mut sum = Vec::with_capacity(n * groups * rows);
    let mut sum_sq = Vec::with_capacity(n * groups * rows);
    for ni in 0..n {
        for g in 0..groups {
            for y in r0..r1 {
                let (mut s, mut sq) = (0f64, 0f64);
                for ci in g * per_group..(g + 1) * per_group {
                    let start = ((ni * c + ci) * h + y) * w;
                    for &v in &d[start..start + w] {
                        let v = v as f64;
                        s += v;
                        sq += v * v;
                    }
                }
                sum.push(s);
                sum_sq.push(sq);
            }
        }
    }
    Ok(GnSums {
        samples: n,
        groups,
        row_start: r0,
        rows,
        sum,
        sum_sq,
        count_per_row: (per_group * w) as u64,
    })
}

/// Exact group statistics over the region (or the whole map).
pub fn group_stats(x: &Tensor, groups: usize, region: Option<&Region>) -> Result<GnStats> {
    Ok(group_sums(x, groups, region)?.finish())
}

/// Normalize with the given statistics and apply the per-channel affine.
/// With a region, only that band is normalized and returned.
pub fn group_norm_apply(
    x: &Tensor,
    region: Option<&Region>,
    stats: &GnStats,
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
) -> Result<Tensor> {
    let [n, c, h, w] = x.dims();
    let groups = stats.groups;
    if stats.samples != n || groups == 0 || c % groups != 0 {
        return Err(shape_err!(
            "stats for {}x{} do not fit a tensor of {n} samples and {c} channels",
            stats.samples,
            groups
        ));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!("affine params of length {}/{} for {c} channels", gamma.len(), beta.len()));
    }
    let (r0, r1) = stat_rows(x, region)?;
    let per_group = c / groups;
    let mut inv_std = Vec::with_capacity(n * groups);
    for i in 0..n * groups {
        let mut var = stats.variance(i);
        if var < 0.0 {
            // Round-off on a (near-)constant group; anything beyond that is the
            // caller's job to replace before we get here.
            let tol = 64.0 * f64::EPSILON * stats.mean_sq[i].abs();
            if -var > tol {
                return Err(Error::Contract(format!(
                    "negative variance {var:e} in group {} reached group_norm_apply",
                    i % groups
                )));
            }
            var = 0.0;
        }
        inv_std.push(1.0 / (var + eps).sqrt());
    }
    let d = x.data();
    let rows = r1 - r0;
    let mut out = Vec::with_capacity(n * c * rows * w);
    for ni in 0..n {
        for ci in 0..c {
            let gi = ni * groups + ci / per_group;
            let (mean, scale) = (stats.mean[gi], inv_std[gi]);
            let (g, b) = (gamma[ci] as f64, beta[ci] as f64);
            let plane = &d[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            out.extend(
                plane[r0 * w..r1 * w]
                    .iter()
                    .map(|&v| (((v as f64) - mean) * scale * g + b) as f32),
            );
        }
    }
    Tensor::from_parts([n, c, rows, w], out).checked("group_norm_apply")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn constant_tensor_stats() {
        let x = Tensor::full([2, 4, 3, 3], 1.5);
        let s = group_stats(&x, 2, None).unwrap();
        assert!(s.mean.iter().all(|&m| m == 1.5));
        assert!(s.mean_sq.iter().all(|&m| m == 2.25));
    }

    #[test]
    fn full_region_matches_no_region() {
        let mut rng = SplitMix64::new(3);
        let x = Tensor::from_fn([1, 4, 6, 5], |_| rng.next_symmetric(2.0) as f32);
        assert_eq!(
            group_stats(&x, 4, Some(&Region::full(6, 5))).unwrap(),
            group_stats(&x, 4, None).unwrap()
        );
    }

    #[test]
    fn ramp_sixteen_two_groups() {
        let x = Tensor::new([1, 4, 2, 2], (1..=16).map(|v| v as f32).collect()).unwrap();
        let s = group_stats(&x, 2, None).unwrap();
        assert_eq!(s.mean, vec![4.5, 12.5]);
        // Direct summation: (1^2+..+8^2)/8 and (9^2+..+16^2)/8.
        let sq0: f64 = (1..=8).map(|v| (v * v) as f64).sum::<f64>() / 8.0;
        let sq1: f64 = (9..=16).map(|v| (v * v) as f64).sum::<f64>() / 8.0;
        assert_eq!(s.mean_sq, vec![sq0, sq1]);
        assert_eq!(s.mean_sq, vec![25.5, 161.5]);
    }

    #[test]
    fn indivisible_groups_rejected() {
        let x = Tensor::zeros([1, 6, 2, 2]);
        assert!(group_stats(&x, 4, None).is_err());
    }

    #[test]
    fn band_sums_combine_to_full() {
        let mut rng = SplitMix64::new(4);
        let x = Tensor::from_fn([2, 4, 8, 3], |_| rng.next_symmetric(1.0) as f32);
        let parts: Vec<_> = (0..4)
            .map(|i| group_sums(&x, 2, Some(&Region::new(2 * i, 2 * i + 2, 8, 3).unwrap())).unwrap())
            .collect();
        let reduced = GnSums::reduce(&parts).unwrap();
        assert_eq!(reduced, group_sums(&x, 2, None).unwrap());
        assert_eq!(reduced.finish(), group_stats(&x, 2, None).unwrap());
        assert!(GnSums::reduce(&[parts[1].clone(), parts[0].clone()]).is_err());
        assert_eq!(parts[0].byte_len(), 2 * 2 * 2 * 16);
    }

    #[test]
    fn normalized_output_is_standardized() {
        let mut rng = SplitMix64::new(5);
        let x = Tensor::from_fn([1, 8, 4, 4], |_| (rng.next_symmetric(3.0) + 1.0) as f32);
        let stats = group_stats(&x, 4, None).unwrap();
        let y = group_norm_apply(&x, None, &stats, &[1.0; 8], &[0.0; 8], 1e-5).unwrap();
        let ys = group_stats(&y, 4, None).unwrap();
        for i in 0..4 {
            assert!(ys.mean[i].abs() < 1e-4);
            assert!((ys.variance(i) - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = SplitMix64::new(6);
        let x = Tensor::from_fn([1, 4, 3, 3], |_| rng.next_symmetric(1.0) as f32);
        let stats = group_stats(&x, 2, None).unwrap();
        let beta = [0.5, -0.5, 1.0, 2.0];
        let y = group_norm_apply(&x, None, &stats, &[0.0; 4], &beta, 1e-5).unwrap();
        for c in 0..4 {
            assert!(y.slice_channels(c, c + 1).unwrap().data().iter().all(|&v| v == beta[c]));
        }
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = SplitMix64::new(7);
        let x = Tensor::from_fn([1, 8, 4, 4], |_| rng.next_symmetric(1.0) as f32);
        let gamma: Vec<f32> = (0..8).map(|i| 0.5 + i as f32 * 0.1).collect();
        let beta: Vec<f32> = (0..8).map(|i| i as f32 * -0.05).collect();
        let eps = 1e-5;
        let stats = group_stats(&x, 4, None).unwrap();
        let y = group_norm_apply(&x, None, &stats, &gamma, &beta, eps).unwrap();
        for g in 0..4 {
            // Two-pass oracle over the group's 2 channels.
            let vals: Vec<f64> = (2 * g..2 * g + 2)
                .flat_map(|c| x.slice_channels(c, c + 1).unwrap().into_data())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for c in 2 * g..2 * g + 2 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        let want = (x.at(0, c, yy, xx) as f64 - mean) / (var + eps).sqrt()
                            * gamma[c] as f64
                            + beta[c] as f64;
                        assert!((y.at(0, c, yy, xx) as f64 - want).abs() <= 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn region_application_returns_band() {
        let mut rng = SplitMix64::new(8);
        let x = Tensor::from_fn([1, 4, 6, 2], |_| rng.next_symmetric(1.0) as f32);
        let stats = group_stats(&x, 2, None).unwrap();
        let full = group_norm_apply(&x, None, &stats, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        let region = Region::new(2, 4, 6, 2).unwrap();
        let band = group_norm_apply(&x, Some(&region), &stats, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert_eq!(band, full.slice_rows(2, 4).unwrap());
    }

    #[test]
    fn negative_variance_is_rejected() {
        let x = Tensor::zeros([1, 2, 2, 2]);
        let stats = GnStats { samples: 1, groups: 1, mean: vec![1.0], mean_sq: vec![0.5] };
        let err = group_norm_apply(&x, None, &stats, &[1.0; 2], &[0.0; 2], 1e-5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
