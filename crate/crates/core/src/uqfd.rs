//! Uncertainty-weighted, query-masked feature distillation from the teacher's
//! finest encoder map into the student's.

use crate::error::{Error, Result};
use crate::numerics::{bernoulli_entropy, min_max_scale, Tape, Tensor, Var};

/// `W_q = (1 − minmax(H(top-1 score)))^β′` per query.
pub fn query_uncertainty_weights(probs: &Tensor, beta_prime: f64) -> Result<Vec<f64>> {
    if !(beta_prime > 0.0) {
        return Err(Error::Config(format!("exponent {beta_prime} must be positive")));
    }
    let top: Vec<f64> = (0..probs.rows())
        .map(|i| probs.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let e = bernoulli_entropy(&top)?;
    Ok(min_max_scale(&e)?.into_iter().map(|v| (1.0 - v).powf(beta_prime)).collect())
}

/// Mask of query `q` over the `h·w` positions: min-max scaled cosine between
/// each teacher feature row and the query, or all ones when the cosines are
/// constant.
pub fn query_mask(teacher_map: &Tensor, query: &[f64]) -> Result<Vec<f64>> {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let raw: Vec<f64> = (0..teacher_map.rows())
        .map(|i| {
            let r = teacher_map.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || qn == 0.0 {
                0.0
            } else {
                r.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (n * qn)
            }
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![1.0; raw.len()]);
    }
    Ok(min_max_scale(&raw)?)
}

/// Per-position weight `Σ_j W_j·M_j²` shared by every channel.
pub fn pixel_weights(teacher_map: &Tensor, teacher_queries: &Tensor, w_q: &[f64]) -> Result<Vec<f64>> {
    if w_q.len() != teacher_queries.rows() {
        return Err(Error::Mismatch(format!(
            "{} query weights for {} queries",
            w_q.len(),
            teacher_queries.rows()
        )));
    }
    if teacher_queries.cols() != teacher_map.cols() {
        return Err(Error::Mismatch(format!(
            "query width {} vs map width {}",
            teacher_queries.cols(),
            teacher_map.cols()
        )));
    }
    let mut acc = vec![0.0; teacher_map.rows()];
    for (j, &w) in w_q.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let m = query_mask(teacher_map, teacher_queries.row(j))?;
        for (a, v) in acc.iter_mut().zip(m) {
            *a += w * v * v;
        }
    }
    Ok(acc)
}

/// `(1/(n_q·H·W·C))·Σ_j W_j·‖M_j ⊙ (F_T − F_S)‖²`. Only `student_map`
/// carries gradient.
pub fn distill_loss(
    tape: &mut Tape,
    teacher_map: &Tensor,
    student_map: Var,
    teacher_queries: &Tensor,
    w_q: &[f64],
) -> Result<Var> {
    if tape.shape(student_map) != teacher_map.shape() {
        return Err(Error::Mismatch(format!(
            "student map {:?} vs teacher map {:?}",
            tape.shape(student_map),
            teacher_map.shape()
        )));
    }
    let px = pixel_weights(teacher_map, teacher_queries, w_q)?;
    let n = px.len();
    let denom = (w_q.len().max(1) * teacher_map.len()) as f64;
    let t = tape.constant(teacher_map.clone());
    let d = tape.sub(t, student_map)?;
    let sq = tape.mul(d, d)?;
    let pw = tape.constant(Tensor::new(vec![n, 1], px)?);
    let weighted = tape.mul(sq, pw)?;
    let s = tape.sum(weighted)?;
    Ok(tape.scale(s, 1.0 / denom)?)
}
