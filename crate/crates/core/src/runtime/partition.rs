use crate::error::{config_err, Result};
use crate::tensor::Region;

/// `n` equal contiguous row bands of an `h x w` map, in device order.
pub fn partition_rows(h: usize, w: usize, n: usize) -> Result<Vec<Region>> {
    if n == 0 {
        return Err(config_err!("device count must be positive"));
    }
    if h == 0 || h % n != 0 {
        return Err(config_err!("{h} rows cannot be split evenly across {n} devices"));
    }
    let rows = h / n;
    (0..n).map(|i| Region::new(i * rows, (i + 1) * rows, h, w)).collect()
}

/// A device's band at every resolution level of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSpec {
    pub device: usize,
    pub devices: usize,
    levels: Vec<Region>,
}

impl PatchSpec {
    /// Bands for all devices. Rows must split into `n` bands that stay
    /// integral and even down to the deepest level.
    pub fn all(devices: usize, h: usize, w: usize, levels: usize) -> Result<Vec<PatchSpec>> {
        let levels = levels.max(1);
        let m = 1usize << (levels - 1);
        if devices == 0 {
            return Err(config_err!("device count must be positive"));
        }
        if h % (devices * m) != 0 || w % m != 0 {
            return Err(config_err!(
                "image {h}x{w} with {devices} devices: rows must be divisible by {} and columns by {m} \
                 (devices * 2^(levels-1) with levels={levels})",
                devices * m
            ));
        }
        let mut per_level = Vec::with_capacity(levels);
        for l in 0..levels {
            per_level.push(partition_rows(h >> l, w >> l, devices)?);
        }
        Ok((0..devices)
            .map(|i| PatchSpec {
                device: i,
                devices,
                levels: per_level.iter().map(|bands| bands[i]).collect(),
            })
            .collect())
    }

    pub fn region(&self, level: usize) -> &Region {
        &self.levels[level]
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_rows_two_devices() {
        let r = partition_rows(8, 3, 2).unwrap();
        assert_eq!((r[0].row_start, r[0].row_end), (0, 4));
        assert_eq!((r[1].row_start, r[1].row_end), (4, 8));
    }

    #[test]
    fn single_device_is_full() {
        let r = partition_rows(5, 5, 1).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].is_full());
    }

    #[test]
    fn indivisible_rows() {
        assert!(partition_rows(7, 4, 2).is_err());
        assert!(partition_rows(8, 4, 0).is_err());
    }

    #[test]
    fn levels_partition_exactly() {
        let specs = PatchSpec::all(4, 48, 48, 3).unwrap();
        for l in 0..3 {
            let h = 48 >> l;
            let mut next = 0;
            for s in &specs {
                let r = s.region(l);
                assert_eq!(r.row_start, next);
                assert_eq!((r.full_h, r.full_w), (h, h));
                next = r.row_end;
            }
            assert_eq!(next, h);
        }
        assert_eq!(specs[1].region(2).row_start * 4, specs[1].region(0).row_start);
    }

    #[test]
    fn deep_levels_must_divide() {
        // 6-row bands would become 1.5 rows at the deepest level.
        let err = PatchSpec::all(8, 48, 48, 3).unwrap_err();
        assert!(err.is_config());
        assert!(PatchSpec::all(8, 96, 96, 3).is_ok());
        assert!(PatchSpec::all(3, 64, 64, 3).is_err());
    }
}
