//! Sentence-level pooling and the interlingua distance losses.
//!
//! The joint objective is `L = L_XX + L_YY + L_XY + L_YX + d`, where `d`
//! measures how far apart the pooled encoder representations of the two sides
//! of a parallel batch are. The default `corr` distance is one minus the
//! per-dimension Pearson correlation averaged over dimensions; `max`, `l1`
//! and `l2` variants are kept for comparison (the norm-based ones collapse
//! representations and are retained to reproduce that failure mode).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tape, Tensor};

/// Per-sentence vectors pooled from encoder output: row i of `h` corresponds
/// to sentence i of the originating batch.
#[derive(Clone)]
pub struct PooledRepresentation {
    pub h: Tensor,
    pub language: String,
    pub batch_id: u64,
}

/// Masked mean over time: [B,T,D] -> [B,D]. Differentiable.
pub fn pool_representation(
    tape: &Tape,
    enc_out: &Tensor,
    mask: &Mask,
    language: &str,
    batch_id: u64,
) -> Result<PooledRepresentation> {
    let h = tape.masked_mean_time(enc_out, mask)?;
    Ok(PooledRepresentation {
        h,
        language: language.to_string(),
        batch_id,
    })
}

const VAR_EPS: f64 = 1e-8;

fn check_paired(hx: &Tensor, hy: &Tensor) -> Result<(usize, usize)> {
    let (sx, sy) = (hx.shape(), hy.shape());
    if sx.len() != 2 || sy.len() != 2 || sx != sy {
        return Err(Error::BatchMismatch(format!(
            "pooled shapes {:?} vs {:?}",
            sx, sy
        )));
    }
    Ok((sx[0], sx[1]))
}

/// Per-dimension Pearson correlation over the batch, averaged over the D
/// dimensions. Dimensions with (near-)zero variance on either side contribute
/// zero correlation and receive no gradient. Fused forward/backward so the
/// value is exact — no epsilon enters the denominator of live dimensions.
pub fn correlation_coefficient(tape: &Tape, hx: &Tensor, hy: &Tensor) -> Result<Tensor> {
    let (b, d) = check_paired(hx, hy)?;
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let stats = move |xv: &[f64], yv: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        // Column means and centered second moments per dimension.
        let mut mx = vec![0.0; d];
        let mut my = vec![0.0; d];
        for i in 0..b {
            for j in 0..d {
                mx[j] += xv[i * d + j];
                my[j] += yv[i * d + j];
            }
        }
        for j in 0..d {
            mx[j] /= b as f64;
            my[j] /= b as f64;
        }
        let mut sxx = vec![0.0; d];
        let mut syy = vec![0.0; d];
        let mut sxy = vec![0.0; d];
        for i in 0..b {
            for j in 0..d {
                let xc = xv[i * d + j] - mx[j];
                let yc = yv[i * d + j] - my[j];
                sxx[j] += xc * xc;
                syy[j] += yc * yc;
                sxy[j] += xc * yc;
            }
        }
        (mx, my, sxx, syy, sxy)
    };

    let (xv, yv) = (hx.to_vec(), hy.to_vec());
    let (_, _, sxx, syy, sxy) = stats(&xv, &yv);
    let mut c = 0.0;
    for j in 0..d {
        if sxx[j] > VAR_EPS && syy[j] > VAR_EPS {
            c += sxy[j] / (sxx[j] * syy[j]).sqrt();
        }
    }
    c /= d as f64;

    Ok(tape.record(
        &[hx, hy],
        vec![1],
        vec![c],
        Box::new(move |g, inputs| {
            let (hx, hy) = (&inputs[0], &inputs[1]);
            let (xv, yv) = (hx.to_vec(), hy.to_vec());
            let (mx, my, sxx, syy, sxy) = stats(&xv, &yv);
            let b = xv.len() / mx.len();
            let d = mx.len();
            let mut gx = vec![0.0; xv.len()];
            let mut gy = vec![0.0; yv.len()];
            let scale = g[0] / d as f64;
            for j in 0..d {
                if sxx[j] <= VAR_EPS || syy[j] <= VAR_EPS {
                    continue;
                }
                let denom = (sxx[j] * syy[j]).sqrt();
                for i in 0..b {
                    let xc = xv[i * d + j] - mx[j];
                    let yc = yv[i * d + j] - my[j];
                    // d r_j / d x_ij; the batch-mean correction term vanishes
                    // because the centered columns sum to zero.
                    gx[i * d + j] += scale * (yc - xc * (sxy[j] / sxx[j])) / denom;
                    gy[i * d + j] += scale * (xc - yc * (sxy[j] / syy[j])) / denom;
                }
            }
            hx.accumulate_grad(&gx);
            hy.accumulate_grad(&gy);
        }),
    ))
}

/// `d = 1 − c(h(X), h(Y))`, in [0, 2]. Differentiable w.r.t. both inputs.
pub fn correlation_distance(tape: &Tape, hx: &Tensor, hy: &Tensor) -> Result<Tensor> {
    let c = correlation_coefficient(tape, hx, hy)?;
    let one = Tensor::new(vec![1], vec![1.0]);
    tape.add(&tape.scale(&c, -1.0)?, &one)
}

/// Max over dimensions of the batch-mean absolute difference.
pub fn max_distance(tape: &Tape, hx: &Tensor, hy: &Tensor) -> Result<Tensor> {
    check_paired(hx, hy)?;
    let diff = tape.abs(&tape.sub(hx, hy)?)?;
    let per_dim = tape.mean_axis(&diff, 0)?;
    tape.max_axis(&per_dim, 0)
}

/// Batch-mean L1 norm of `Hx − Hy`.
pub fn l1_distance(tape: &Tape, hx: &Tensor, hy: &Tensor) -> Result<Tensor> {
    let (_, d) = check_paired(hx, hy)?;
    let diff = tape.abs(&tape.sub(hx, hy)?)?;
    tape.scale(&tape.mean_all(&diff)?, d as f64)
}

/// Batch-mean L2 norm of `Hx − Hy`.
pub fn l2_distance(tape: &Tape, hx: &Tensor, hy: &Tensor) -> Result<Tensor> {
    let (_, d) = check_paired(hx, hy)?;
    let diff = tape.sub(hx, hy)?;
    let sq = tape.mul(&diff, &diff)?;
    let row_sums = tape.scale(&tape.mean_axis(&sq, 1)?, d as f64)?;
    tape.mean_all(&tape.sqrt(&row_sums)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceKind {
    Corr,
    Max,
    L1,
    L2,
    None,
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corr" => Ok(DistanceKind::Corr),
            "max" => Ok(DistanceKind::Max),
            "l1" => Ok(DistanceKind::L1),
            "l2" => Ok(DistanceKind::L2),
            "none" => Ok(DistanceKind::None),
            other => Err(Error::UnknownDistanceKind(other.to_string())),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DistanceKind::Corr => "corr",
            DistanceKind::Max => "max",
            DistanceKind::L1 => "l1",
            DistanceKind::L2 => "l2",
            DistanceKind::None => "none",
        };
        f.write_str(s)
    }
}

pub fn distance(tape: &Tape, kind: DistanceKind, hx: &Tensor, hy: &Tensor) -> Result<Tensor> {
    match kind {
        DistanceKind::Corr => correlation_distance(tape, hx, hy),
        DistanceKind::Max => max_distance(tape, hx, hy),
        DistanceKind::L1 => l1_distance(tape, hx, hy),
        DistanceKind::L2 => l2_distance(tape, hx, hy),
        DistanceKind::None => Ok(Tensor::new(vec![1], vec![0.0])),
    }
}

/// The five terms of the joint loss with their weights and weighted total.
#[derive(Clone)]
pub struct LossBreakdown {
    pub l_xx: Tensor,
    pub l_yy: Tensor,
    pub l_xy: Tensor,
    pub l_yx: Tensor,
    pub d: Tensor,
    pub weights: [f64; 5],
    pub total: Tensor,
}

/// Combine the four translation losses with the interlingua distance.
/// Weights default to all ones (the unweighted sum of the objective).
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    tape: &Tape,
    l_xx: &Tensor,
    l_yy: &Tensor,
    l_xy: &Tensor,
    l_yx: &Tensor,
    hx: &Tensor,
    hy: &Tensor,
    kind: DistanceKind,
    weights: [f64; 5],
) -> Result<LossBreakdown> {
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Config("loss weights must be nonnegative".into()));
    }
    let d = distance(tape, kind, hx, hy)?;
    let terms = [l_xx, l_yy, l_xy, l_yx, &d];
    let mut total = tape.scale(terms[0], weights[0])?;
    for (t, &w) in terms.iter().zip(&weights).skip(1) {
        total = tape.add(&total, &tape.scale(t, w)?)?;
    }
    Ok(LossBreakdown {
        l_xx: l_xx.clone(),
        l_yy: l_yy.clone(),
        l_xy: l_xy.clone(),
        l_yx: l_yx.clone(),
        d,
        weights,
        total,
    })
}
