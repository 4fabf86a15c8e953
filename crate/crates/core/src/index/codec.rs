//! Per-dimension 2-bit residual quantizer.
//!
//! Cut points sit at the 25th/50th/75th percentiles of a residual sample
//! and each of the four buckets is reconstructed by the mean of the sample
//! values that fell into it. A value `x` lands in bucket `#{cuts <= x}`.

use crate::error::{Error, Result};

pub const BUCKETS: usize = 4;
pub const CUTS: usize = BUCKETS - 1;
pub const RESIDUAL_BITS: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCodec {
    cuts: Vec<[f32; CUTS]>,
    representatives: Vec<[f32; BUCKETS]>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn bucket_of(cuts: &[f32; CUTS], x: f64) -> usize {
    cuts.iter().filter(|&&c| c as f64 <= x).count()
}

impl ResidualCodec {
    pub fn new(cuts: Vec<[f32; CUTS]>, representatives: Vec<[f32; BUCKETS]>) -> Result<Self> {
        if cuts.len() != representatives.len() {
            return Err(Error::dim(cuts.len(), representatives.len()));
        }
        for (d, (c, r)) in cuts.iter().zip(&representatives).enumerate() {
            if c.iter().chain(r.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("codec dimension {d}")));
            }
            if c.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Format(format!(
                    "codec dimension {d}: cut points decrease"
                )));
            }
        }
        Ok(ResidualCodec {
            cuts,
            representatives,
        })
    }

    pub fn dim(&self) -> usize {
        self.cuts.len()
    }

    pub fn cuts(&self) -> &[[f32; CUTS]] {
        &self.cuts
    }

    pub fn representatives(&self) -> &[[f32; BUCKETS]] {
        &self.representatives
    }

    /// Bucket index per dimension.
    pub fn encode(&self, residual: &[f64]) -> Result<Vec<u8>> {
        if residual.len() != self.dim() {
            return Err(Error::dim(self.dim(), residual.len()));
        }
        Ok(residual
            .iter()
            .zip(&self.cuts)
            .map(|(&x, c)| bucket_of(c, x) as u8)
            .collect())
    }

    pub fn decode_into(&self, code: &[u8], out: &mut [f64]) {
        for ((o, &b), reps) in out.iter_mut().zip(code).zip(&self.representatives) {
            *o = reps[b as usize] as f64;
        }
    }
}

/// Fits cut points and representatives per dimension from a residual sample.
pub fn fit_codec(residuals: &[&[f64]], dim: usize) -> Result<ResidualCodec> {
    if residuals.is_empty() {
        return Err(Error::EmptyInput("residual sample is empty".into()));
    }
    if let Some(bad) = residuals.iter().find(|r| r.len() != dim) {
        return Err(Error::dim(dim, bad.len()));
    }
    let mut cuts = Vec::with_capacity(dim);
    let mut reps = Vec::with_capacity(dim);
    let mut column = Vec::with_capacity(residuals.len());
    for d in 0..dim {
        column.clear();
        column.extend(residuals.iter().map(|r| r[d]));
        column.sort_by(f64::total_cmp);
        let c = [0.25, 0.5, 0.75].map(|q| quantile(&column, q) as f32);

        let mut sums = [0.0f64; BUCKETS];
        let mut counts = [0usize; BUCKETS];
        for &x in &column {
            let b = bucket_of(&c, x);
            sums[b] += x;
            counts[b] += 1;
        }
        let mut r = [0.0f32; BUCKETS];
        for b in 0..BUCKETS {
            r[b] = if counts[b] > 0 {
                (sums[b] / counts[b] as f64) as f32
            } else {
                match b {
                    0 => c[0],
                    3 => c[2],
                    _ => ((c[b - 1] as f64 + c[b] as f64) / 2.0) as f32,
                }
            };
        }
        cuts.push(c);
        reps.push(r);
    }
    ResidualCodec::new(cuts, reps)
}
