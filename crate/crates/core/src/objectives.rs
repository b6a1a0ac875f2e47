//! Soft-Dice + binary cross-entropy segmentation loss.
//!
//! Every function here works on one sample's flattened map. Batches average the
//! per-sample loss, which keeps the Dice ratio defined per image.

use hetfuse_tensor::{kernels, Element};

use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-6;

fn check_lengths(pred: usize, target: usize) -> Result<()> {
    if pred != target {
        return Err(Error::ShapeMismatch { what: "loss prediction vs target".into(), expected: vec![target], found: vec![pred] });
    }
    if pred == 0 {
        return Err(Error::InvalidArgument("loss over an empty map".into()));
    }
    Ok(())
}

/// Loss value together with its gradient with respect to the probabilities.
pub fn dice_bce_loss_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths(pred.len(), target.len())?;
    let n = pred.len() as f64;
    let (mut inter, mut sum) = (0.0, 0.0);
    let mut bce = 0.0;
    for (&p, &g) in pred.iter().zip(target) {
        inter += p * g;
        sum += p + g;
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        bce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
    }
    let den = sum + DICE_EPS;
    let num = 2.0 * inter + DICE_EPS;
    let loss = 1.0 - num / den + bce / n;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &g)| {
            let d_dice = -(2.0 * g * den - num) / (den * den);
            let d_bce = if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP { (-g / p + (1.0 - g) / (1.0 - p)) / n } else { 0.0 };
            d_dice + d_bce
        })
        .collect();
    Ok((loss, grad))
}

pub fn dice_bce_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    dice_bce_loss_grad(pred, target).map(|(l, _)| l)
}

/// Mean of the per-sample losses.
pub fn dice_bce_loss_batch(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch { what: "loss batch".into(), expected: vec![targets.len()], found: vec![preds.len()] });
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(targets) {
        total += dice_bce_loss(p, g)?;
    }
    Ok(total / preds.len() as f64)
}

/// Same loss evaluated on logits `z` with `p = σ(z)`, returning the gradient
/// with respect to `z`. The cross-entropy term uses the log-sum-exp form and
/// is unclamped, so it only differs from [`dice_bce_loss`] where `p` saturates.
pub fn dice_bce_from_logits<T: Element>(logits: &[T], target: &[T]) -> Result<(f64, Vec<T>)> {
    check_lengths(logits.len(), target.len())?;
    let n = logits.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|&z| kernels::sigmoid(z.as_f64())).collect();
    let (mut inter, mut sum, mut bce) = (0.0, 0.0, 0.0);
    for ((&z, &p), &g) in logits.iter().zip(&probs).zip(target) {
        let (z, g) = (z.as_f64(), g.as_f64());
        inter += p * g;
        sum += p + g;
        // −[g ln σ(z) + (1−g) ln(1−σ(z))] = max(z,0) − g·z + ln(1 + e^−|z|)
        bce += z.max(0.0) - g * z + (-z.abs()).exp().ln_1p();
    }
    let den = sum + DICE_EPS;
    let num = 2.0 * inter + DICE_EPS;
    let loss = 1.0 - num / den + bce / n;
    let grad = probs
        .iter()
        .zip(target)
        .map(|(&p, &g)| {
            let g = g.as_f64();
            let d_dice = -(2.0 * g * den - num) / (den * den) * p * (1.0 - p);
            T::of(d_dice + (p - g) / n)
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the loss formula.
    fn oracle(p: &[f64], g: &[f64]) -> f64 {
        let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let sp: f64 = p.iter().sum();
        let sg: f64 = g.iter().sum();
        let dice = 1.0 - (2.0 * inter + 1e-5) / (sp + sg + 1e-5);
        let bce: f64 = p
            .iter()
            .zip(g)
            .map(|(&a, &b)| {
                let a = a.max(1e-6).min(1.0 - 1e-6);
                -(b * a.ln() + (1.0 - b) * (1.0 - a).ln())
            })
            .sum::<f64>()
            / p.len() as f64;
        dice + bce
    }

    #[test]
    fn near_perfect_prediction() {
        let g = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let p: Vec<f64> = g.iter().map(|&v| if v > 0.5 { 1.0 - 1e-6 } else { 1e-6 }).collect();
        assert!(dice_bce_loss(&p, &g).unwrap() < 0.01);
    }

    #[test]
    fn half_prediction_closed_form() {
        let p = [0.5; 4];
        let g = [1.0, 1.0, 0.0, 0.0];
        let dice = 1.0 - (2.0 * 1.0 + 1e-5) / (2.0 + 2.0 + 1e-5);
        let want = dice + std::f64::consts::LN_2;
        assert!((dice_bce_loss(&p, &g).unwrap() - want).abs() < 1e-12);
        assert!((dice - 0.5).abs() < 1e-5);
    }

    #[test]
    fn matches_formula_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p: Vec<f64> = (0..16).map(|_| rng.random_range(0.001..0.999)).collect();
            let g: Vec<f64> = (0..16).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
            assert!((dice_bce_loss(&p, &g).unwrap() - oracle(&p, &g)).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let p: Vec<f64> = (0..16).map(|_| rng.random_range(0.05..0.95)).collect();
            let g: Vec<f64> = (0..16).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            let (_, grad) = dice_bce_loss_grad(&p, &g).unwrap();
            let h = 1e-6;
            for i in 0..16 {
                let mut a = p.clone();
                let mut b = p.clone();
                a[i] += h;
                b[i] -= h;
                let fd = (oracle(&a, &g) - oracle(&b, &g)) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
                assert!(rel < 1e-4, "component {i}: analytic {} vs fd {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn logit_variant_agrees_with_chain_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z: Vec<f32> = (0..16).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let g: Vec<f32> = (0..16).map(|_| f32::from(u8::from(rng.random_bool(0.5)))).collect();
        let p: Vec<f64> = z.iter().map(|&v| 1.0 / (1.0 + (-f64::from(v)).exp())).collect();
        let g64: Vec<f64> = g.iter().map(|&v| f64::from(v)).collect();
        let (l_p, grad_p) = dice_bce_loss_grad(&p, &g64).unwrap();
        let (l_z, grad_z) = dice_bce_from_logits(&z, &g).unwrap();
        assert!((l_p - l_z).abs() < 1e-9);
        for i in 0..16 {
            let chain = grad_p[i] * p[i] * (1.0 - p[i]);
            assert!((chain - f64::from(grad_z[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(matches!(dice_bce_loss(&[0.5; 3], &[1.0; 4]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn batch_is_mean_of_samples() {
        let a = vec![0.2, 0.7, 0.4, 0.9];
        let b = vec![0.6, 0.1, 0.3, 0.5];
        let ga = vec![0.0, 1.0, 0.0, 1.0];
        let gb = vec![1.0, 0.0, 0.0, 0.0];
        let want = (oracle(&a, &ga) + oracle(&b, &gb)) / 2.0;
        let got = dice_bce_loss_batch(&[a, b], &[ga, gb]).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}
