//! Training losses: region-weighted velocity loss, BCE + soft Dice mask
//! loss, and their weighted sum.

use diffcore::{lit, Float, Graph, Tensor, Var};

use crate::error::{Error, Result};

pub const BCE_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

/// `sum_i w_i |v_pred_i - v_star_i|^2 / sum_i w_i` with `w_i = 1 + alpha M_i`.
/// `v_pred: [B, L, C]`, `v_star: [B, L, C]`, `m_bin: [B, L, 1]`; the squared
/// error of a token sums over channels. Normalization runs over the whole batch.
pub fn region_weighted_edit_loss<T: Float>(
    g: &mut Graph<T>,
    v_pred: Var,
    v_star: &Tensor<T>,
    m_bin: &Tensor<T>,
    alpha: f64,
) -> Result<Var> {
    let ps = g.shape(v_pred).to_vec();
    if ps != v_star.shape() || ps.len() != 3 || m_bin.shape() != [ps[0], ps[1], 1] {
        return Err(Error::Length(format!(
            "edit loss: v_pred {ps:?}, v_star {:?}, mask {:?}",
            v_star.shape(),
            m_bin.shape()
        )));
    }
    let w: Vec<T> = m_bin.data().iter().map(|&m| T::one() + lit::<T>(alpha) * m).collect();
    let wsum = w.iter().fold(T::zero(), |a, &b| a + b);
    let vs = g.input(v_star.clone());
    let d = g.sub(v_pred, vs)?;
    let sq = g.mul(d, d)?;
    let per_tok = g.sum_axis(sq, 2, true)?;
    let wv = g.input(Tensor::new(m_bin.shape().to_vec(), w)?);
    let weighted = g.mul(per_tok, wv)?;
    let num = g.sum_all(weighted);
    Ok(g.scale(num, T::one() / wsum))
}

/// Per-sample soft Dice averaged over the batch. `probs: [B, N]`, `m: [B, N]`.
pub fn dice_score<T: Float>(g: &mut Graph<T>, probs: Var, m: &Tensor<T>) -> Result<Var> {
    let ps = g.shape(probs).to_vec();
    if ps != m.shape() || ps.len() != 2 {
        return Err(Error::Length(format!("dice: probs {ps:?} vs mask {:?}", m.shape())));
    }
    let (b, n) = (ps[0], ps[1]);
    let eps = lit::<T>(DICE_SMOOTH);
    let mv = g.input(m.clone());
    let pm = g.mul(probs, mv)?;
    let inter = g.sum_axis(pm, 1, false)?;
    let num = g.scale(inter, lit(2.0));
    let num = g.add_scalar(num, eps);
    let sp = g.sum_axis(probs, 1, false)?;
    let sm: Vec<T> = (0..b).map(|i| m.data()[i * n..(i + 1) * n].iter().fold(eps, |a, &v| a + v)).collect();
    let smv = g.input(Tensor::new(vec![b], sm)?);
    let den = g.add(sp, smv)?;
    let dice = g.div(num, den)?;
    Ok(g.mean_all(dice))
}

/// Mean clamped BCE plus `lambda_dice * (1 - Dice)`.
pub fn mask_loss<T: Float>(g: &mut Graph<T>, probs: Var, m: &Tensor<T>, lambda_dice: f64) -> Result<Var> {
    let bce = bce_loss(g, probs, m)?;
    if lambda_dice == 0.0 {
        return Ok(bce);
    }
    let dice = dice_score(g, probs, m)?;
    let one_minus = g.scale(dice, lit(-1.0));
    let one_minus = g.add_scalar(one_minus, T::one());
    let term = g.scale(one_minus, lit(lambda_dice));
    Ok(g.add(bce, term)?)
}

pub fn bce_loss<T: Float>(g: &mut Graph<T>, probs: Var, m: &Tensor<T>) -> Result<Var> {
    if g.shape(probs) != m.shape() {
        return Err(Error::Length(format!("bce: probs {:?} vs mask {:?}", g.shape(probs), m.shape())));
    }
    let p = g.clamp(probs, lit(BCE_CLAMP), lit(1.0 - BCE_CLAMP));
    let lp = g.ln(p);
    let q = g.scale(p, lit(-1.0));
    let q = g.add_scalar(q, T::one());
    let lq = g.ln(q);
    let mv = g.input(m.clone());
    let inv = g.input(Tensor::new(m.shape().to_vec(), m.data().iter().map(|&v| T::one() - v).collect())?);
    let a = g.mul(mv, lp)?;
    let b = g.mul(inv, lq)?;
    let s = g.add(a, b)?;
    let mean = g.mean_all(s);
    Ok(g.scale(mean, lit(-1.0)))
}

/// `edit + lambda_mask * mask`; a missing mask term contributes nothing.
pub fn total_loss<T: Float>(g: &mut Graph<T>, edit: Var, mask: Option<Var>, lambda_mask: f64) -> Result<Var> {
    match mask {
        Some(m) if lambda_mask != 0.0 => {
            let wm = g.scale(m, lit(lambda_mask));
            Ok(g.add(edit, wm)?)
        }
        _ => Ok(edit),
    }
}
