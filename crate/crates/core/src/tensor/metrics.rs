use super::Tensor;
use crate::error::{shape_err, Result};

fn same_dims(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("comparing {:?} with {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    same_dims(a, b)?;
    let mut se = 0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = *x as f64 - *y as f64;
        se += d * d;
    }
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = se / a.len() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR with the peak taken as the reference's dynamic range (max - min).
/// Returns `(psnr_db, peak)`.
pub fn psnr_with_reference_range(test: &Tensor, reference: &Tensor) -> Result<(f64, f64)> {
    let (lo, hi) = reference.min_max();
    let peak = (hi - lo) as f64;
    Ok((psnr(test, reference, peak)?, peak))
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_dims(a, b)?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum();
    Ok(total / a.len().max(1) as f64)
}
