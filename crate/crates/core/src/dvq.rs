//! Decomposed vector quantization bottleneck.
//!
//! The D-dimensional pooled representation is split into `n` chunks of
//! `D/n` dimensions. Each chunk is snapped to its nearest codeword from a
//! per-chunk table of `K` rows, giving `K^n` representable vectors. Training
//! uses the straight-through estimator plus the usual codebook and
//! commitment auxiliary losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{detach, IdMatrix, Tape, Tensor};

#[derive(Clone)]
pub struct CodebookSet {
    pub n: usize,
    pub k: usize,
    pub sub_dim: usize,
    pub tables: Vec<Tensor>,
    pub commitment_weight: f64,
}

/// Uniform init in [-1/K, 1/K], seeded.
pub fn codebook_init(n: usize, k: usize, d: usize, seed: u64) -> Result<CodebookSet> {
    if n == 0 || d % n != 0 {
        return Err(Error::IndivisibleDim { n, dim: d });
    }
    if k < 2 {
        return Err(Error::Config(format!("codebook size {} too small", k)));
    }
    let sub_dim = d / n;
    let bound = 1.0 / k as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables = (0..n)
        .map(|_| {
            let vals: Vec<f64> = (0..k * sub_dim).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::param(vec![k, sub_dim], vals)
        })
        .collect();
    Ok(CodebookSet {
        n,
        k,
        sub_dim,
        tables,
        commitment_weight: 0.25,
    })
}

impl CodebookSet {
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.tables
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("table{}", i), t.clone()))
            .collect()
    }
}

/// Nearest codeword per chunk (squared Euclidean, lowest index on ties).
/// Returns the [B, n] index matrix and the non-differentiable zq [B, D].
pub fn quantize_decomposed(cb: &CodebookSet, z: &Tensor) -> Result<(IdMatrix, Tensor)> {
    let shape = z.shape();
    let d = cb.n * cb.sub_dim;
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::ShapeMismatch(format!(
            "quantizer input {:?} vs expected [B, {}]",
            shape, d
        )));
    }
    let b = shape[0];
    let zv = z.to_vec();
    let mut indices = vec![0u32; b * cb.n];
    let mut zq = vec![0.0; b * d];
    for bi in 0..b {
        for t in 0..cb.n {
            let chunk = &zv[bi * d + t * cb.sub_dim..bi * d + (t + 1) * cb.sub_dim];
            let table = cb.tables[t].values();
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for r in 0..cb.k {
                let row = &table[r * cb.sub_dim..(r + 1) * cb.sub_dim];
                let dist: f64 = chunk
                    .iter()
                    .zip(row)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = r;
                }
            }
            indices[bi * cb.n + t] = best as u32;
            let row = &table[best * cb.sub_dim..(best + 1) * cb.sub_dim];
            zq[bi * d + t * cb.sub_dim..bi * d + (t + 1) * cb.sub_dim].copy_from_slice(row);
        }
    }
    Ok((IdMatrix::new(b, cb.n, indices), Tensor::new(vec![b, d], zq)))
}

/// Auxiliary losses of the quantizer.
#[derive(Clone)]
pub struct DvqAux {
    /// ‖stopgrad(z) − zq‖² — pulls codewords toward encoder outputs.
    pub codebook: Tensor,
    /// β·‖z − stopgrad(zq)‖² — pulls encoder outputs toward codewords.
    pub commitment: Tensor,
}

/// Straight-through quantization: the forward value is zq, but gradients
/// pass to `z` unchanged. Codebook tables learn only through the auxiliary
/// codebook loss.
pub fn dvq_forward(tape: &Tape, cb: &CodebookSet, z: &Tensor) -> Result<(Tensor, IdMatrix, DvqAux)> {
    let (indices, _) = quantize_decomposed(cb, z)?;
    let b = z.shape()[0];

    // Rebuild zq differentiably w.r.t. the tables from the chosen indices.
    let mut parts = Vec::with_capacity(cb.n);
    for t in 0..cb.n {
        let col: Vec<u32> = (0..b).map(|bi| indices.data[bi * cb.n + t]).collect();
        let ids = IdMatrix::new(b, 1, col);
        let looked = tape.embedding_lookup(&cb.tables[t], &ids)?; // [B,1,sub]
        parts.push(tape.reshape(&looked, vec![b, cb.sub_dim])?);
    }
    let part_refs: Vec<&Tensor> = parts.iter().collect();
    let zq = tape.concat(&part_refs, 1)?;

    // zq_st = z + detach(zq − z): forward equals zq, gradient is identity in z.
    let gap = detach(&tape.sub(&zq, z)?);
    let zq_st = tape.add(z, &gap)?;

    let code_diff = tape.sub(&detach(z), &zq)?;
    let codebook = tape.sum_all(&tape.mul(&code_diff, &code_diff)?)?;
    let commit_diff = tape.sub(z, &detach(&zq))?;
    let commitment = tape.scale(
        &tape.sum_all(&tape.mul(&commit_diff, &commit_diff)?)?,
        cb.commitment_weight,
    )?;

    Ok((zq_st, indices, DvqAux { codebook, commitment }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes() {
        let cb = codebook_init(1, 2, 4, 0).unwrap();
        assert_eq!(cb.tables.len(), 1);
        assert_eq!(cb.tables[0].shape(), vec![2, 4]);
        let cb = codebook_init(2, 4, 8, 0).unwrap();
        assert_eq!(cb.tables.len(), 2);
        assert_eq!(cb.sub_dim, 4);
        assert!(matches!(
            codebook_init(3, 4, 8, 0),
            Err(Error::IndivisibleDim { .. })
        ));
        // Values stay inside the init bound.
        for t in &cb.tables {
            assert!(t.to_vec().iter().all(|v| v.abs() <= 0.25));
        }
    }

    #[test]
    fn representable_count_is_k_pow_n() {
        use std::collections::BTreeSet;
        let cb = codebook_init(2, 4, 8, 1).unwrap();
        // Enumerate all index combinations; each yields a distinct vector.
        let mut seen = BTreeSet::new();
        for a in 0..cb.k {
            for b in 0..cb.k {
                let mut v = cb.tables[0].to_vec()[a * 4..(a + 1) * 4].to_vec();
                v.extend_from_slice(&cb.tables[1].to_vec()[b * 4..(b + 1) * 4]);
                seen.insert(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            }
        }
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn quantize_exact_codeword_is_identity() {
        let cb = codebook_init(2, 3, 4, 2).unwrap();
        // Take codeword row 2 of each table as input.
        let mut row = cb.tables[0].to_vec()[2 * 2..3 * 2].to_vec();
        row.extend_from_slice(&cb.tables[1].to_vec()[2 * 2..3 * 2]);
        let z = Tensor::new(vec![1, 4], row.clone());
        let (idx, zq) = quantize_decomposed(&cb, &z).unwrap();
        assert_eq!(idx.data, vec![2, 2]);
        assert_eq!(zq.to_vec(), row);
    }

    #[test]
    fn quantize_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let cb = codebook_init(2, 5, 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let z = Tensor::new(vec![4, 6], vals.clone());
        let (idx, _) = quantize_decomposed(&cb, &z).unwrap();
        for bi in 0..4 {
            for t in 0..2 {
                let chunk = &vals[bi * 6 + t * 3..bi * 6 + (t + 1) * 3];
                let table = cb.tables[t].to_vec();
                let mut dists: Vec<f64> = (0..5)
                    .map(|r| {
                        chunk
                            .iter()
                            .zip(&table[r * 3..(r + 1) * 3])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum()
                    })
                    .collect();
                let chosen = idx.data[bi * 2 + t] as usize;
                let best = dists
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(dists[chosen], best);
                // Lowest-index tie-break: no earlier row achieves the min.
                dists.truncate(chosen);
                assert!(dists.iter().all(|&d| d > best));
            }
        }
    }

    #[test]
    fn quantize_nearest_hand_case() {
        let cb = CodebookSet {
            n: 1,
            k: 2,
            sub_dim: 2,
            tables: vec![Tensor::param(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0])],
            commitment_weight: 0.25,
        };
        let z = Tensor::new(vec![1, 2], vec![0.9, 0.8]);
        let (idx, zq) = quantize_decomposed(&cb, &z).unwrap();
        assert_eq!(idx.data, vec![1]);
        assert_eq!(zq.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn quantize_tie_break_lowest_index() {
        let cb = CodebookSet {
            n: 1,
            k: 2,
            sub_dim: 1,
            tables: vec![Tensor::param(vec![2, 1], vec![0.0, 1.0])],
            commitment_weight: 0.25,
        };
        // 0.5 is equidistant from both rows.
        let z = Tensor::new(vec![1, 1], vec![0.5]);
        let (idx, _) = quantize_decomposed(&cb, &z).unwrap();
        assert_eq!(idx.data, vec![0]);
    }

    #[test]
    fn quantize_shape_mismatch() {
        let cb = codebook_init(2, 3, 4, 0).unwrap();
        let z = Tensor::new(vec![1, 6], vec![0.0; 6]);
        assert!(matches!(
            quantize_decomposed(&cb, &z),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn forward_on_codewords_has_zero_aux() {
        let cb = codebook_init(2, 3, 4, 4).unwrap();
        let mut row = cb.tables[0].to_vec()[..2].to_vec();
        row.extend_from_slice(&cb.tables[1].to_vec()[..2]);
        let z = Tensor::param(vec![1, 4], row.clone());
        let tape = Tape::new();
        let (zq_st, _, aux) = dvq_forward(&tape, &cb, &z).unwrap();
        assert_eq!(zq_st.to_vec(), row);
        assert_eq!(aux.codebook.item(), 0.0);
        assert_eq!(aux.commitment.item(), 0.0);
    }

    #[test]
    fn straight_through_gradient_is_identity() {
        // d sum(w ⊙ zq_st) / dz must equal w, exactly as if zq_st were z.
        let cb = codebook_init(2, 3, 4, 5).unwrap();
        let z = Tensor::param(vec![2, 4], vec![0.1, -0.2, 0.3, 0.0, -0.1, 0.2, 0.05, -0.3]);
        let w = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let tape = Tape::new();
        let (zq_st, _, _) = dvq_forward(&tape, &cb, &z).unwrap();
        let loss = tape.sum_all(&tape.mul(&zq_st, &w).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(z.grad().unwrap(), w.to_vec());
    }

    #[test]
    fn codebook_loss_updates_tables_not_encoder() {
        let cb = codebook_init(1, 4, 3, 6).unwrap();
        let z = Tensor::param(vec![2, 3], vec![0.3, -0.1, 0.2, -0.2, 0.1, 0.0]);
        let tape = Tape::new();
        let (_, _, aux) = dvq_forward(&tape, &cb, &z).unwrap();
        tape.backward(&aux.codebook).unwrap();
        assert!(cb.tables[0].grad().is_some());
        assert!(z.grad().is_none() || z.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn commitment_loss_updates_encoder_not_tables() {
        let cb = codebook_init(1, 4, 3, 6).unwrap();
        let z = Tensor::param(vec![2, 3], vec![0.3, -0.1, 0.2, -0.2, 0.1, 0.0]);
        let tape = Tape::new();
        let (_, _, aux) = dvq_forward(&tape, &cb, &z).unwrap();
        tape.backward(&aux.commitment).unwrap();
        let zg = z.grad().unwrap();
        assert!(zg.iter().any(|&g| g != 0.0));
        let tg = cb.tables[0].grad();
        assert!(tg.is_none() || tg.unwrap().iter().all(|&g| g == 0.0));
        // β scaling: grad = 2β(z − zq).
        let (_, zq) = quantize_decomposed(&cb, &z).unwrap();
        for ((g, zv), qv) in zg.iter().zip(z.to_vec()).zip(zq.to_vec()) {
            assert!((g - 2.0 * 0.25 * (zv - qv)).abs() < 1e-12);
        }
    }
}
