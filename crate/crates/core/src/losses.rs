//! Loss terms of the adaption objective, recorded on a [`Tape`].
//!
//! Discriminator outputs are logit maps. Binary cross-entropy is evaluated
//! per logit pixel with a stable log-sigmoid, averaged over the pixels of
//! each map, and the per-map values are summed with a `1/(2·maps)` factor.
//! Label 1 means "produced from a source patch", label 0 "from a target patch".

use serde::{Deserialize, Serialize};

use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the discriminator's own loss.
    pub lambda_disc: f64,
    /// Weight of the adversarial term in the generator loss.
    pub lambda_adv: f64,
    /// Weight of the ranking terms in the generator loss.
    pub lambda_rank: f64,
    /// Ranking margin.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_disc: 0.001,
            lambda_adv: 0.001,
            lambda_rank: 0.001,
            epsilon: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_disc", self.lambda_disc),
            ("lambda_adv", self.lambda_adv),
            ("lambda_rank", self.lambda_rank),
            ("epsilon", self.epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CodaError::config(format!("weights.{name}"), format!("must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `(1/2N) Σ_i ‖pred_i − gt_i‖²` over a batch of `N` maps.
pub fn density_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let n = tape.value(pred).batch();
    let diff = tape.sub(pred, gt).map_err(|_| {
        CodaError::shape(
            "density_loss",
            format!("pred {:?} vs gt {:?}", tape.value(pred).shape(), tape.value(gt).shape()),
        )
    })?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / (2.0 * n as f64)))
}

/// Sum over maps of the pixel-mean of `log σ(sign · logit)`.
fn summed_map_log_likelihood(tape: &mut Tape, logits: &[Var], sign: f64) -> (Var, usize) {
    let mut maps = 0;
    let mut terms = Vec::with_capacity(logits.len());
    for &l in logits {
        maps += tape.value(l).batch();
        let signed = if sign == 1.0 { l } else { tape.scale(l, sign) };
        let ll = tape.log_sigmoid(signed);
        let per_map = tape.mean_per_item(ll);
        terms.push(tape.sum(per_map));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t).expect("scalars");
    }
    (total, maps)
}

/// Cross-entropy of the discriminator over source maps (label 1) and target
/// maps (label 0). Each list entry may hold a batch of maps; both sides must
/// carry the same number of maps.
pub fn discriminator_loss(tape: &mut Tape, logits_src: &[Var], logits_tgt: &[Var]) -> Result<Var> {
    if logits_src.is_empty() || logits_tgt.is_empty() {
        return Err(CodaError::invalid("discriminator_loss", "empty logit list"));
    }
    let (src, n_src) = summed_map_log_likelihood(tape, logits_src, 1.0);
    let (tgt, n_tgt) = summed_map_log_likelihood(tape, logits_tgt, -1.0);
    if n_src != n_tgt {
        return Err(CodaError::shape(
            "discriminator_loss",
            format!("{n_src} source maps vs {n_tgt} target maps"),
        ));
    }
    let both = tape.add(src, tgt)?;
    Ok(tape.scale(both, -1.0 / (2.0 * n_src as f64)))
}

/// `−(1/2M) Σ_maps mean log σ(logit)`: small when the discriminator takes
/// target maps for source ones.
pub fn adversarial_loss(tape: &mut Tape, logits_tgt: &[Var]) -> Result<Var> {
    if logits_tgt.is_empty() {
        return Err(CodaError::invalid("adversarial_loss", "empty logit list"));
    }
    let (ll, maps) = summed_map_log_likelihood(tape, logits_tgt, 1.0);
    Ok(tape.scale(ll, -1.0 / (2.0 * maps as f64)))
}

/// `Σ_{i>j} max(0, n_j − n_i + ε)` for counts ordered smallest patch first.
pub fn ranking_loss(tape: &mut Tape, counts: &[Var], epsilon: f64) -> Result<Var> {
    for &c in counts {
        if tape.value(c).len() != 1 {
            return Err(CodaError::shape("ranking_loss", "counts must be scalars"));
        }
    }
    let mut total = tape.constant(DenseGrid::scalar(0.0));
    for i in 0..counts.len() {
        for j in 0..i {
            let diff = tape.sub(counts[j], counts[i])?;
            let shifted = if epsilon != 0.0 { tape.add_scalar(diff, epsilon) } else { diff };
            let hinge = tape.relu(shifted);
            total = tape.add(total, hinge)?;
        }
    }
    Ok(total)
}

/// Integral of a single density map, optionally weighted by a mask given at
/// the density resolution.
pub fn predicted_count(tape: &mut Tape, density: Var, mask: Option<&DenseGrid>) -> Result<Var> {
    match mask {
        None => Ok(tape.sum(density)),
        Some(m) => {
            let shape = tape.value(density).shape();
            if m.shape() != shape {
                return Err(CodaError::shape(
                    "predicted_count",
                    format!("mask {:?} vs density {:?}", m.shape(), shape),
                ));
            }
            let mv = tape.constant(m.clone());
            let masked = tape.mul(density, mv)?;
            Ok(tape.sum(masked))
        }
    }
}

/// One count per batch item of `density`.
pub fn predicted_counts(tape: &mut Tape, density: Var) -> Result<Vec<Var>> {
    let per_item = tape.sum_per_item(density);
    (0..tape.value(density).batch())
        .map(|i| tape.select_item(per_item, i))
        .collect()
}

/// Components of the generator objective for one step.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub density: Var,
    pub adversarial: Var,
    pub rank_source: Var,
    pub rank_target: Var,
}

/// `L_dens + λ_adv·L_adv + λ_rank·(L_rank(src) + L_rank(tgt))`.
pub fn combined_generator_loss(tape: &mut Tape, terms: GeneratorTerms, weights: &LossWeights) -> Result<Var> {
    let adv = tape.scale(terms.adversarial, weights.lambda_adv);
    let ranks = tape.add(terms.rank_source, terms.rank_target)?;
    let ranks = tape.scale(ranks, weights.lambda_rank);
    let total = tape.add(terms.density, adv)?;
    tape.add(total, ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn scalar(t: &mut Tape, v: f64) -> Var {
        t.variable(DenseGrid::scalar(v))
    }

    #[test]
    fn density_loss_examples() {
        let mut t = Tape::new();
        let a = t.constant(DenseGrid::from_2d(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = density_loss(&mut t, a, a).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);

        let p = t.constant(DenseGrid::from_2d(1, 2, vec![3.0, 1.0]).unwrap());
        let g = t.constant(DenseGrid::from_2d(1, 2, vec![1.0, 1.0]).unwrap());
        let l = density_loss(&mut t, p, g).unwrap();
        assert_eq!(t.scalar_value(l), 2.0);

        // squared norms 4 and 16
        let p = t.constant(DenseGrid::new([2, 1, 1, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap());
        let g = t.constant(DenseGrid::zeros([2, 1, 1, 2]));
        let l = density_loss(&mut t, p, g).unwrap();
        assert_eq!(t.scalar_value(l), 5.0);
    }

    #[test]
    fn density_loss_shape_mismatch() {
        let mut t = Tape::new();
        let p = t.constant(DenseGrid::zeros([1, 1, 2, 2]));
        let g = t.constant(DenseGrid::zeros([1, 1, 2, 3]));
        assert!(matches!(density_loss(&mut t, p, g), Err(CodaError::Shape { .. })));
    }

    #[test]
    fn discriminator_loss_at_zero_logits() {
        let mut t = Tape::new();
        let s = t.constant(DenseGrid::zeros([1, 1, 2, 2]));
        let g = t.constant(DenseGrid::zeros([1, 1, 2, 2]));
        let l = discriminator_loss(&mut t, &[s], &[g]).unwrap();
        assert!((t.scalar_value(l) - LN_2).abs() < 1e-15);
    }

    #[test]
    fn discriminator_loss_perfect_and_swapped() {
        let mut t = Tape::new();
        let pos = t.constant(DenseGrid::filled([1, 1, 2, 2], 60.0));
        let neg = t.constant(DenseGrid::filled([1, 1, 2, 2], -60.0));
        let good = discriminator_loss(&mut t, &[pos], &[neg]).unwrap();
        assert!(t.scalar_value(good) < 1e-20);
        let bad = discriminator_loss(&mut t, &[neg], &[pos]).unwrap();
        assert!(t.scalar_value(bad) > t.scalar_value(good));
        assert!((t.scalar_value(bad) - 60.0).abs() < 1e-9);
    }

    #[test]
    fn discriminator_loss_rejects_empty_and_unbalanced() {
        let mut t = Tape::new();
        let a = t.constant(DenseGrid::zeros([2, 1, 1, 1]));
        let b = t.constant(DenseGrid::zeros([1, 1, 1, 1]));
        assert!(discriminator_loss(&mut t, &[], &[a]).is_err());
        assert!(discriminator_loss(&mut t, &[a], &[b]).is_err());
        assert!(adversarial_loss(&mut t, &[]).is_err());
    }

    #[test]
    fn adversarial_loss_value_and_gradient() {
        let mut t = Tape::new();
        let x = t.variable(DenseGrid::zeros([1, 1, 2, 2]));
        let l = adversarial_loss(&mut t, &[x]).unwrap();
        assert!((t.scalar_value(l) - 0.5 * LN_2).abs() < 1e-15);
        let g = t.backward(l).unwrap().get(x);
        let expected = -(1.0 / 2.0) * 0.5 / 4.0;
        assert!(g.data().iter().all(|&v| (v - expected).abs() < 1e-15));

        let fooled = t.constant(DenseGrid::filled([1, 1, 2, 2], 50.0));
        let l = adversarial_loss(&mut t, &[fooled]).unwrap();
        assert!(t.scalar_value(l) < 1e-20);
    }

    #[test]
    fn losses_stay_finite_for_extreme_logits() {
        let mut t = Tape::new();
        let big = t.variable(DenseGrid::from_2d(1, 2, vec![1e4, -1e4]).unwrap());
        let d = discriminator_loss(&mut t, &[big], &[big]).unwrap();
        let a = adversarial_loss(&mut t, &[big]).unwrap();
        assert!(t.scalar_value(d).is_finite() && t.scalar_value(a).is_finite());
        let sum = t.add(d, a).unwrap();
        assert!(t.backward(sum).unwrap().get(big).all_finite());
    }

    #[test]
    fn ranking_loss_examples() {
        let mut t = Tape::new();
        let cs: Vec<Var> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| scalar(&mut t, v)).collect();
        let l = ranking_loss(&mut t, &cs, 0.0).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);

        let cs: Vec<Var> = [5.0, 3.0].iter().map(|&v| scalar(&mut t, v)).collect();
        let l = ranking_loss(&mut t, &cs, 0.0).unwrap();
        assert_eq!(t.scalar_value(l), 2.0);

        let cs: Vec<Var> = [3.0, 1.0, 2.0].iter().map(|&v| scalar(&mut t, v)).collect();
        let l = ranking_loss(&mut t, &cs, 0.0).unwrap();
        assert_eq!(t.scalar_value(l), 3.0);

        let one = [scalar(&mut t, 7.0)];
        let l = ranking_loss(&mut t, &one, 0.0).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);
    }

    #[test]
    fn ranking_loss_subgradient_is_zero_at_hinge() {
        let mut t = Tape::new();
        let a = scalar(&mut t, 2.0);
        let b = scalar(&mut t, 2.0);
        let l = ranking_loss(&mut t, &[a, b], 0.0).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).data(), &[0.0]);
        assert_eq!(g.get(b).data(), &[0.0]);
    }

    #[test]
    fn predicted_count_examples() {
        let mut t = Tape::new();
        let z = t.constant(DenseGrid::zeros([1, 1, 3, 3]));
        let c = predicted_count(&mut t, z, None).unwrap();
        assert_eq!(t.scalar_value(c), 0.0);

        let d = t.constant(DenseGrid::from_2d(1, 2, vec![7.0, 0.25]).unwrap());
        let c = predicted_count(&mut t, d, None).unwrap();
        assert_eq!(t.scalar_value(c), 7.25);

        let u = t.constant(DenseGrid::filled([1, 1, 4, 4], 1.0));
        let mut mask = DenseGrid::zeros([1, 1, 4, 4]);
        for i in [0, 1, 5, 10, 15] {
            mask.data_mut()[i] = 1.0;
        }
        let c = predicted_count(&mut t, u, Some(&mask)).unwrap();
        assert_eq!(t.scalar_value(c), 5.0);

        let wrong = DenseGrid::zeros([1, 1, 2, 2]);
        assert!(predicted_count(&mut t, u, Some(&wrong)).is_err());
    }

    #[test]
    fn combined_loss_examples() {
        let mut t = Tape::new();
        let terms = GeneratorTerms {
            density: scalar(&mut t, 5.0),
            adversarial: scalar(&mut t, 0.3466),
            rank_source: scalar(&mut t, 3.0),
            rank_target: scalar(&mut t, 0.0),
        };
        let none = LossWeights {
            lambda_disc: 0.0,
            lambda_adv: 0.0,
            lambda_rank: 0.0,
            epsilon: 0.0,
        };
        let l = combined_generator_loss(&mut t, terms, &none).unwrap();
        assert_eq!(t.scalar_value(l), 5.0);
        let l = combined_generator_loss(&mut t, terms, &LossWeights::default()).unwrap();
        assert!((t.scalar_value(l) - 5.0033466).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            lambda_adv: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
