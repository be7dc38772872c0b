use std::ops::Range;

use super::{Region, Tensor};
use crate::error::{shape_err, Result};

fn output_extent(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if size + 2 * pad < k {
        return Err(shape_err!("kernel {k} larger than padded extent {}", size + 2 * pad));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

/// Output rows produced by a band of input rows: every output row whose
/// anchor `o * stride` lies inside `[row_start, row_end)`.
pub fn conv_output_rows(region: &Region, stride: usize, out_h: usize) -> Range<usize> {
    let start = region.row_start.div_ceil(stride).min(out_h);
    let end = region.row_end.div_ceil(stride).min(out_h);
    start..end
}

fn check_conv(x: &Tensor, weight: &Tensor, bias: &[f32], stride: usize) -> Result<()> {
    let [c_out, c_in, kh, kw] = weight.dims();
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err!("conv kernel must be square and odd, got {kh}x{kw}"));
    }
    if x.c() != c_in {
        return Err(shape_err!(
            "conv input has {} channels, weight expects {c_in}",
            x.c()
        ));
    }
    if bias.len() != c_out {
        return Err(shape_err!("conv bias length {} for {c_out} outputs", bias.len()));
    }
    if stride != 1 && stride != 2 {
        return Err(shape_err!("conv stride must be 1 or 2, got {stride}"));
    }
    Ok(())
}

/// Zero-padded 2-D cross-correlation.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &[f32], stride: usize, pad: usize) -> Result<Tensor> {
    check_conv(x, weight, bias, stride)?;
    let out_h = output_extent(x.h(), weight.h(), stride, pad)?;
    conv_rows(x, weight, bias, stride, pad, 0..out_h)
}

/// The output rows of `conv2d(x_full, ..)` that belong to `region`, reading
/// halo rows outside the region from `x_full`.
pub fn conv2d_region(
    x_full: &Tensor,
    region: &Region,
    weight: &Tensor,
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    check_conv(x_full, weight, bias, stride)?;
    region.check_parent(x_full)?;
    let out_h = output_extent(x_full.h(), weight.h(), stride, pad)?;
    conv_rows(x_full, weight, bias, stride, pad, conv_output_rows(region, stride, out_h))
}

fn conv_rows(
    x: &Tensor,
    weight: &Tensor,
    bias: &[f32],
    stride: usize,
    pad: usize,
    rows: Range<usize>,
) -> Result<Tensor> {
    let [n, c_in, h, w] = x.dims();
    let [c_out, _, k, _] = weight.dims();
    let out_w = output_extent(w, k, stride, pad)?;
    let out_rows = rows.len();
    let xd = x.data();
    let wd = weight.data();
    let mut out = Vec::with_capacity(n * c_out * out_rows * out_w);
    let mut acc = vec![0f64; out_w];

    // Valid output-column span for each kernel column.
    let col_span: Vec<(usize, usize)> = (0..k)
        .map(|kx| {
            let lo = pad.saturating_sub(kx).div_ceil(stride);
            let lo = lo.min(out_w);
            // ox * stride + kx - pad < w
            let hi = if w + pad > kx {
                ((w + pad - kx - 1) / stride + 1).min(out_w)
            } else {
                0
            };
            (lo, hi.max(lo))
        })
        .collect();

    for ni in 0..n {
        for co in 0..c_out {
            for oy in rows.clone() {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for ci in 0..c_in {
                    let plane = &xd[(ni * c_in + ci) * h * w..(ni * c_in + ci + 1) * h * w];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for kx in 0..k {
                            let wv = wd[((co * c_in + ci) * k + ky) * k + kx] as f64;
                            let (lo, hi) = col_span[kx];
                            if lo == hi {
                                continue;
                            }
                            if stride == 1 {
                                let src = &row[lo + kx - pad..hi + kx - pad];
                                for (a, &v) in acc[lo..hi].iter_mut().zip(src) {
                                    *a += wv * v as f64;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - pad;
                                    acc[ox] += wv * row[ix] as f64;
                                }
                            }
                        }
                    }
                }
                let b = bias[co] as f64;
                out.extend(acc.iter().map(|&a| (a + b) as f32));
            }
        }
    }
    Tensor::from_parts([n, c_out, out_rows, out_w], out).checked("conv2d")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Direct nested-loop oracle, independent of the span bookkeeping above.
    fn conv_oracle(x: &Tensor, wt: &Tensor, bias: &[f32], stride: usize, pad: usize) -> Tensor {
        let [n, c_in, h, w] = x.dims();
        let [c_out, _, k, _] = wt.dims();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Tensor::from_fn([n, c_out, oh, ow], |[ni, co, oy, ox]| {
            let mut s = 0f64;
            for ci in 0..c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            s += wt.at(co, ci, ky, kx) as f64 * x.at(ni, ci, iy as usize, ix as usize) as f64;
                        }
                    }
                }
            }
            (s + bias[co] as f64) as f32
        })
    }

    fn random(dims: [usize; 4], seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(dims, |_| rng.next_symmetric(1.0) as f32)
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = Tensor::full([1, 1, 3, 3], 1.0);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let wt = Tensor::new([1, 1, 3, 3], k).unwrap();
        assert_eq!(conv2d(&x, &wt, &[0.0], 1, 1).unwrap(), x);
    }

    #[test]
    fn zero_weight_gives_bias() {
        let x = random([2, 3, 5, 5], 1);
        let wt = Tensor::zeros([4, 3, 3, 3]);
        let out = conv2d(&x, &wt, &[0.5, -1.0, 2.0, 0.0], 1, 1).unwrap();
        for co in 0..4 {
            for v in out.slice_channels(co, co + 1).unwrap().data() {
                assert_eq!(*v, [0.5, -1.0, 2.0, 0.0][co]);
            }
        }
    }

    #[test]
    fn ramp_with_box_kernel() {
        let x = Tensor::new([1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let wt = Tensor::full([1, 1, 3, 3], 1.0);
        let out = conv2d(&x, &wt, &[0.0], 1, 1).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 45.0);
        // Frozen from the nested-loop oracle.
        let expected = [
            10.0, 18.0, 24.0, 18.0, 27.0, 45.0, 54.0, 39.0, 51.0, 81.0, 90.0, 63.0, 42.0, 66.0,
            72.0, 50.0,
        ];
        assert_eq!(out.data(), &expected);
        assert_eq!(out, conv_oracle(&x, &wt, &[0.0], 1, 1));
    }

    #[test]
    fn matches_oracle_on_random_inputs() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 0, 1), (2, 2, 5)] {
            let x = random([2, 3, 8, 6], 7 + k as u64);
            let wt = random([4, 3, k, k], 11);
            let bias = [0.1, -0.2, 0.3, 0.0];
            let got = conv2d(&x, &wt, &bias, stride, pad).unwrap();
            let want = conv_oracle(&x, &wt, &bias, stride, pad);
            assert_eq!(got.dims(), want.dims());
            assert!(got.max_abs_diff(&want) <= 1e-6, "stride {stride} pad {pad} k {k}");
        }
    }

    #[test]
    fn region_whole_image_equals_full() {
        let x = random([1, 2, 6, 5], 3);
        let wt = random([3, 2, 3, 3], 4);
        let full = conv2d(&x, &wt, &[0.0; 3], 1, 1).unwrap();
        let region = Region::full(6, 5);
        assert_eq!(conv2d_region(&x, &region, &wt, &[0.0; 3], 1, 1).unwrap(), full);
    }

    #[test]
    fn two_bands_compose_to_full() {
        let x = random([1, 2, 4, 4], 5);
        let wt = random([2, 2, 3, 3], 6);
        let full = conv2d(&x, &wt, &[0.2, 0.1], 1, 1).unwrap();
        let top = conv2d_region(&x, &Region::new(0, 2, 4, 4).unwrap(), &wt, &[0.2, 0.1], 1, 1).unwrap();
        let bottom = conv2d_region(&x, &Region::new(2, 4, 4, 4).unwrap(), &wt, &[0.2, 0.1], 1, 1).unwrap();
        let joined = Tensor::concat_rows(&[top, bottom]).unwrap();
        assert!(joined.max_abs_diff(&full) <= 1e-5);
        assert_eq!(joined, full);
    }

    #[test]
    fn stride_two_band_maps_to_half_rows() {
        let x = random([1, 1, 8, 8], 8);
        let wt = random([1, 1, 3, 3], 9);
        let full = conv2d(&x, &wt, &[0.0], 2, 1).unwrap();
        let band = conv2d_region(&x, &Region::new(4, 8, 8, 8).unwrap(), &wt, &[0.0], 2, 1).unwrap();
        assert_eq!(band.dims(), [1, 1, 2, 4]);
        assert_eq!(band, full.slice_rows(2, 4).unwrap());
    }

    #[test]
    fn shape_errors() {
        let x = random([1, 2, 4, 4], 1);
        assert!(conv2d(&x, &Tensor::zeros([1, 3, 3, 3]), &[0.0], 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 2, 2]), &[0.0], 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 3, 3]), &[0.0, 1.0], 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 3, 3]), &[0.0], 3, 1).is_err());
        let region = Region::new(0, 2, 5, 4).unwrap();
        assert!(conv2d_region(&x, &region, &Tensor::zeros([1, 2, 3, 3]), &[0.0], 1, 1).is_err());
    }
}
