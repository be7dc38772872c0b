use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Row-major `rows x features` matrix, one row per spatial token.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokens {
    rows: usize,
    features: usize,
    data: Vec<f32>,
}

impl Tokens {
    pub fn new(rows: usize, features: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * features {
            return Err(shape_err!(
                "token data length {} for {rows}x{features}",
                data.len()
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tokens"));
        }
        Ok(Self { rows, features, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.features..(i + 1) * self.features]
    }

    /// Pixels of sample `n` as tokens (row-major over `h x w`), channels as features.
    pub fn from_tensor(x: &Tensor, n: usize) -> Self {
        let [_, c, h, w] = x.dims();
        let hw = h * w;
        let base = n * c * hw;
        let d = x.data();
        let mut data = Vec::with_capacity(hw * c);
        for p in 0..hw {
            for ci in 0..c {
                data.push(d[base + ci * hw + p]);
            }
        }
        Self { rows: hw, features: c, data }
    }

    /// Selected channel range of sample `n` as tokens.
    pub fn from_tensor_channels(x: &Tensor, n: usize, channels: std::ops::Range<usize>) -> Self {
        let [_, c, h, w] = x.dims();
        let hw = h * w;
        let base = n * c * hw;
        let d = x.data();
        let mut data = Vec::with_capacity(hw * channels.len());
        for p in 0..hw {
            for ci in channels.clone() {
                data.push(d[base + ci * hw + p]);
            }
        }
        Self { rows: hw, features: channels.len(), data }
    }

    /// Inverse of [`Tokens::from_tensor`] for a batch of token matrices.
    pub fn into_tensor(samples: &[Tokens], h: usize, w: usize) -> Result<Tensor> {
        let first = samples.first().ok_or_else(|| shape_err!("no token samples"))?;
        let c = first.features;
        let hw = h * w;
        let mut data = vec![0f32; samples.len() * c * hw];
        for (n, t) in samples.iter().enumerate() {
            if t.rows != hw || t.features != c {
                return Err(shape_err!(
                    "tokens {}x{} do not fill a {h}x{w}x{c} map",
                    t.rows,
                    t.features
                ));
            }
            for p in 0..hw {
                for ci in 0..c {
                    data[(n * c + ci) * hw + p] = t.data[p * c + ci];
                }
            }
        }
        Ok(Tensor::from_parts([samples.len(), c, h, w], data))
    }

    pub fn select_rows(&self, rows: std::ops::Range<usize>) -> Tokens {
        Tokens {
            rows: rows.len(),
            features: self.features,
            data: self.data[rows.start * self.features..rows.end * self.features].to_vec(),
        }
    }
}

/// Affine map per token: `y = x W^T + b` with `weight` shaped `(out, in, 1, 1)`.
pub fn linear(x: &Tokens, weight: &Tensor, bias: &[f32]) -> Result<Tokens> {
    let [out_f, in_f, kh, kw] = weight.dims();
    if kh != 1 || kw != 1 {
        return Err(shape_err!("linear weight must be (out, in, 1, 1), got {:?}", weight.dims()));
    }
    if x.features != in_f {
        return Err(shape_err!("linear input has {} features, weight expects {in_f}", x.features));
    }
    if bias.len() != out_f {
        return Err(shape_err!("linear bias length {} for {out_f} outputs", bias.len()));
    }
    let wd = weight.data();
    let mut data = Vec::with_capacity(x.rows * out_f);
    for r in 0..x.rows {
        let row = x.row(r);
        for o in 0..out_f {
            let wrow = &wd[o * in_f..(o + 1) * in_f];
            let mut acc = 0f64;
            for (a, b) in row.iter().zip(wrow) {
                acc += *a as f64 * *b as f64;
            }
            data.push((acc + bias[o] as f64) as f32);
        }
    }
    Tokens::new(x.rows, out_f, data)
}

/// `softmax(q k^T * scale) v`, each output row depending only on its query row.
pub fn attention(q: &Tokens, k: &Tokens, v: &Tokens, scale: f64) -> Result<Tokens> {
    if q.features != k.features {
        return Err(shape_err!(
            "query features {} differ from key features {}",
            q.features,
            k.features
        ));
    }
    if k.rows != v.rows {
        return Err(shape_err!("{} keys but {} values", k.rows, v.rows));
    }
    if k.rows == 0 {
        return Err(shape_err!("attention over zero keys"));
    }
    let dv = v.features;
    let mut scores = vec![0f64; k.rows];
    let mut acc = vec![0f64; dv];
    let mut data = Vec::with_capacity(q.rows * dv);
    for i in 0..q.rows {
        let qi = q.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let mut dot = 0f64;
            for (a, b) in qi.iter().zip(k.row(j)) {
                dot += *a as f64 * *b as f64;
            }
            *s = dot * scale;
            max = max.max(*s);
        }
        let mut denom = 0f64;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, s) in scores.iter().enumerate() {
            for (a, b) in acc.iter_mut().zip(v.row(j)) {
                *a += s * *b as f64;
            }
        }
        data.extend(acc.iter().map(|a| (a / denom) as f32));
    }
    Tokens::new(q.rows, dv, data)
}
