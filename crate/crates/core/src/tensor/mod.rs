//! Dense NCHW tensors and the deterministic kernels the simulator is built on.
//!
//! Every reduction accumulates in `f64` in row-major loop order and rounds to
//! `f32` once at the end, so repeated calls are bit-identical. Region variants
//! of the kernels compute a contiguous band of output rows from a full-shape
//! input and produce exactly the same bits as the corresponding rows of the
//! full kernel.

mod conv;
mod metrics;
mod norm;
mod tokens;

pub use conv::{conv2d, conv2d_region, conv_output_rows};
pub use metrics::{mean_abs_diff, psnr, psnr_with_reference_range};
pub use norm::{group_norm_apply, group_stats, group_sums, GnStats, GnSums};
pub use tokens::{attention, linear, Tokens};

use crate::error::{shape_err, Error, Result};

/// Dense 4-D array `(n, c, h, w)` of `f32`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(shape_err!(
                "data length {} does not match dims {:?} ({} elements)",
                data.len(),
                dims,
                len
            ));
        }
        let t = Self { dims, data };
        t.check_finite()?;
        Ok(t)
    }

    /// Construct without the finiteness scan; callers guarantee the length.
    pub(crate) fn from_parts(dims: [usize; 4], data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        Self { dims, data }
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: [usize; 4], value: f32) -> Self {
        Self::from_parts(dims, vec![value; dims.iter().product()])
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([ni, ci, y, x]));
                    }
                }
            }
        }
        Self::from_parts(dims, data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Size of the payload in bytes when shipped between devices.
    pub fn byte_len(&self) -> u64 {
        self.data.len() as u64 * 4
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.dims;
        ((n * cc + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("tensor"))
        }
    }

    pub(crate) fn checked(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Rows `[start, end)` of every `(n, c)` plane.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims;
        if start > end || end > h {
            return Err(shape_err!("row slice [{start}, {end}) outside height {h}"));
        }
        let rows = end - start;
        let mut data = Vec::with_capacity(n * c * rows * w);
        for plane in self.data.chunks_exact(h * w) {
            data.extend_from_slice(&plane[start * w..end * w]);
        }
        Ok(Tensor::from_parts([n, c, rows, w], data))
    }

    /// Columns `[start, end)` of every row.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims;
        if start > end || end > w {
            return Err(shape_err!("column slice [{start}, {end}) outside width {w}"));
        }
        let cols = end - start;
        let mut data = Vec::with_capacity(n * c * h * cols);
        for row in self.data.chunks_exact(w) {
            data.extend_from_slice(&row[start..end]);
        }
        Ok(Tensor::from_parts([n, c, h, cols], data))
    }

    /// Channels `[start, end)`.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims;
        if start > end || end > c {
            return Err(shape_err!("channel slice [{start}, {end}) outside {c} channels"));
        }
        let mut data = Vec::with_capacity(n * (end - start) * h * w);
        for sample in self.data.chunks_exact(c * h * w) {
            data.extend_from_slice(&sample[start * h * w..end * h * w]);
        }
        Ok(Tensor::from_parts([n, end - start, h, w], data))
    }

    /// Stack along the row axis; all parts must agree on `(n, c, w)`.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let [n, c, _, w] = first.dims;
        let mut h = 0;
        for p in parts {
            if p.n() != n || p.c() != c || p.w() != w {
                return Err(shape_err!(
                    "row concat of {:?} with {:?}",
                    first.dims,
                    p.dims
                ));
            }
            h += p.h();
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for p in parts {
                let sz = p.h() * w;
                data.extend_from_slice(&p.data[plane * sz..(plane + 1) * sz]);
            }
        }
        Ok(Tensor::from_parts([n, c, h, w], data))
    }

    /// Stack along the column axis; all parts must agree on `(n, c, h)`.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let [n, c, h, _] = first.dims;
        let mut w = 0;
        for p in parts {
            if p.n() != n || p.c() != c || p.h() != h {
                return Err(shape_err!(
                    "column concat of {:?} with {:?}",
                    first.dims,
                    p.dims
                ));
            }
            w += p.w();
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for row in 0..n * c * h {
            for p in parts {
                let pw = p.w();
                data.extend_from_slice(&p.data[row * pw..(row + 1) * pw]);
            }
        }
        Ok(Tensor::from_parts([n, c, h, w], data))
    }

    /// Stack along the batch axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.c() != c || p.h() != h || p.w() != w {
                return Err(shape_err!("batch concat of {:?} with {:?}", first.dims, p.dims));
            }
            n += p.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts([n, c, h, w], data))
    }

    pub fn sample(&self, index: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims;
        if index >= n {
            return Err(shape_err!("sample {index} of batch {n}"));
        }
        let sz = c * h * w;
        Ok(Tensor::from_parts(
            [1, c, h, w],
            self.data[index * sz..(index + 1) * sz].to_vec(),
        ))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// A contiguous band of rows `[row_start, row_end)` inside a parent map of
/// `full_h x full_w` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Region {
    pub row_start: usize,
    pub row_end: usize,
    pub full_h: usize,
    pub full_w: usize,
}

impl Region {
    pub fn new(row_start: usize, row_end: usize, full_h: usize, full_w: usize) -> Result<Self> {
        if row_start >= row_end || row_end > full_h {
            return Err(shape_err!(
                "invalid region rows [{row_start}, {row_end}) for height {full_h}"
            ));
        }
        Ok(Self { row_start, row_end, full_h, full_w })
    }

    pub fn full(full_h: usize, full_w: usize) -> Self {
        Self { row_start: 0, row_end: full_h, full_h, full_w }
    }

    /// A zero-row band. Only meaningful for accounting (e.g. MAC counts).
    pub fn empty(full_h: usize, full_w: usize) -> Self {
        Self { row_start: 0, row_end: 0, full_h, full_w }
    }

    pub fn rows(&self) -> usize {
        self.row_end - self.row_start
    }

    pub fn pixels(&self) -> usize {
        self.rows() * self.full_w
    }

    pub fn is_full(&self) -> bool {
        self.row_start == 0 && self.row_end == self.full_h
    }

    /// The same band at half resolution (after a stride-2 downsample).
    pub fn halved(&self) -> Result<Self> {
        if self.row_start % 2 != 0 || self.row_end % 2 != 0 || self.full_w % 2 != 0 {
            return Err(shape_err!("region {:?} does not halve evenly", self));
        }
        Ok(Self {
            row_start: self.row_start / 2,
            row_end: self.row_end / 2,
            full_h: self.full_h / 2,
            full_w: self.full_w / 2,
        })
    }

    /// The same band at double resolution (after a 2x upsample).
    pub fn doubled(&self) -> Self {
        Self {
            row_start: self.row_start * 2,
            row_end: self.row_end * 2,
            full_h: self.full_h * 2,
            full_w: self.full_w * 2,
        }
    }

    pub(crate) fn check_parent(&self, x: &Tensor) -> Result<()> {
        if x.h() != self.full_h || x.w() != self.full_w {
            return Err(shape_err!(
                "region over {}x{} applied to a {}x{} map",
                self.full_h,
                self.full_w,
                x.h(),
                x.w()
            ));
        }
        Ok(())
    }
}

/// Copy of `stale_full` with the region's rows replaced by `fresh`.
pub fn scatter_region(stale_full: &Tensor, fresh: &Tensor, region: &Region) -> Result<Tensor> {
    region.check_parent(stale_full)?;
    let [n, c, h, w] = stale_full.dims();
    if fresh.dims() != [n, c, region.rows(), w] {
        return Err(shape_err!(
            "scatter of {:?} into rows [{}, {}) of {:?}",
            fresh.dims(),
            region.row_start,
            region.row_end,
            stale_full.dims()
        ));
    }
    let mut out = stale_full.clone();
    let band = region.rows() * w;
    let data = out.data_mut();
    for (plane, src) in fresh.data().chunks_exact(band).enumerate() {
        let dst = plane * h * w + region.row_start * w;
        data[dst..dst + band].copy_from_slice(src);
    }
    Ok(out)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| {
        let v = v as f64;
        (v / (1.0 + (-v).exp())) as f32
    })
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(shape_err!("add of {:?} and {:?}", x.dims(), y.dims()));
    }
    let data = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
    Tensor::from_parts(x.dims(), data).checked("add")
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias(x: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let [n, c, h, w] = x.dims();
    if bias.len() != c {
        return Err(shape_err!("channel bias of length {} for {c} channels", bias.len()));
    }
    let mut out = x.clone();
    for (plane, chunk) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let b = bias[plane % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    let _ = n;
    out.checked("add_channel_bias")
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (h * 2, w * 2);
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..oh {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for x in 0..ow {
                data.push(row[x / 2]);
            }
        }
    }
    Tensor::from_parts([n, c, oh, ow], data)
}
