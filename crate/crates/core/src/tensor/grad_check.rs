//! Finite-difference verification of backward rules.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Compare the tape gradient of a scalar-valued function against central
/// differences at every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, tol, &coords)
}

/// Same as [`grad_check`] but probing at most `max_coords` coordinates,
/// sampled with `seed`. Keeps large-model checks affordable.
pub fn grad_check_sampled<F>(
    f: F,
    x: &Tensor,
    h: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let mut coords: Vec<usize> = (0..x.numel()).collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
    }
    grad_check_coords(f, x, h, tol, &coords)
}

fn grad_check_coords<F>(f: F, x: &Tensor, h: f64, tol: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let was_rg = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();
    let tape = Tape::new();
    let loss = f(&tape, x)?;
    tape.backward(&loss)?;
    let g_ad = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    tape.clear();
    x.zero_grad();
    x.set_requires_grad(false);

    let base = x.to_vec();
    let mut max_rel_err: f64 = 0.0;
    for &i in coords {
        let mut probe = base.clone();
        probe[i] = base[i] + h;
        x.set_values(&probe);
        let fp = eval_scalar(&f, x)?;
        probe[i] = base[i] - h;
        x.set_values(&probe);
        let fm = eval_scalar(&f, x)?;
        let g_fd = (fp - fm) / (2.0 * h);
        let denom = g_ad[i].abs().max(g_fd.abs()).max(1e-8);
        max_rel_err = max_rel_err.max((g_ad[i] - g_fd).abs() / denom);
    }
    x.set_values(&base);
    x.set_requires_grad(was_rg);
    Ok(GradCheckReport {
        max_rel_err,
        tol,
        checked: coords.len(),
        pass: max_rel_err < tol,
    })
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let y = f(&tape, x)?;
    tape.clear();
    Ok(y.item())
}
