//! Loss terms on tape logits and their weighted combination.
//!
//! Every term is a batch mean. Log-probabilities are clamped from below at
//! `ln(1e-12)` so saturated predictions stay finite.

use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var, LOG_EPS};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("logits must be n x K, got {0:?}")]
    LogitShape(Vec<usize>),
    #[error("{labels} labels for {rows} logit rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("label {label} at position {index} outside 0..{classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("paired logits differ in shape: {0:?} vs {1:?}")]
    PairShape(Vec<usize>, Vec<usize>),
    #[error("loss weight {name} = {value} must be finite and non-negative")]
    BadWeight { name: &'static str, value: f64 },
    #[error("probability table: {0}")]
    Table(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_c: f64,
    pub lambda_e: f64,
}

impl LossWeights {
    pub const ZERO: Self = Self {
        lambda_p: 0.0,
        lambda_c: 0.0,
        lambda_e: 0.0,
    };

    pub fn new(lambda_p: f64, lambda_c: f64, lambda_e: f64) -> Result<Self, LossError> {
        let w = Self {
            lambda_p,
            lambda_c,
            lambda_e,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("lambda_p", self.lambda_p),
            ("lambda_c", self.lambda_c),
            ("lambda_e", self.lambda_e),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::BadWeight { name, value });
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 0.6,
            lambda_c: 0.2,
            lambda_e: 0.1,
        }
    }
}

/// Scalar loss vars before weighting.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub main: Var,
    pub pretext: Var,
    pub consistency: Var,
    pub entropy: Var,
}

/// Values of the four terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_main: f64,
    pub l_pretext: f64,
    pub l_consistency: f64,
    pub l_entropy: f64,
    pub l_total: f64,
}

fn rows_cols(tape: &Tape, logits: Var) -> Result<(usize, usize), LossError> {
    match *tape.shape(logits) {
        [0, _] => Err(LossError::EmptyBatch),
        [n, k] => Ok((n, k)),
        ref s => Err(LossError::LogitShape(s.to_vec())),
    }
}

fn clamped_log_probs(tape: &mut Tape, logits: Var) -> Result<Var, LossError> {
    let ls = tape.log_softmax(logits)?;
    Ok(tape.clamp_min(ls, LOG_EPS.ln())?)
}

/// Mean of `-log softmax(logits)[label]` over the rows.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, LossError> {
    let (n, k) = rows_cols(tape, logits)?;
    if labels.len() != n {
        return Err(LossError::LabelCount {
            labels: labels.len(),
            rows: n,
        });
    }
    let mut pick = vec![0.0; n * k];
    for (index, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(LossError::LabelOutOfRange {
                index,
                label,
                classes: k,
            });
        }
        pick[index * k + label] = -1.0 / n as f64;
    }
    let lp = clamped_log_probs(tape, logits)?;
    let pick = tape.constant(Tensor::new(vec![n, k], pick)?);
    let picked = tape.mul(lp, pick)?;
    Ok(tape.sum(picked)?)
}

/// Classification loss on labeled source logits.
pub fn main_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, LossError> {
    cross_entropy(tape, logits, labels)
}

/// Rotation-prediction loss; `logits` come from the rotated images.
pub fn pretext_loss(tape: &mut Tape, logits: Var, rot_labels: &[u8]) -> Result<Var, LossError> {
    let labels: Vec<usize> = rot_labels.iter().map(|&r| r as usize).collect();
    cross_entropy(tape, logits, &labels)
}

/// Mean `KL(p_orig || p_rot)` where `p_orig` is treated as a constant, so
/// gradient reaches the network only through `logits_rot`.
pub fn consistency_loss(tape: &mut Tape, logits_orig: Var, logits_rot: Var) -> Result<Var, LossError> {
    let (n, _) = rows_cols(tape, logits_orig)?;
    if tape.shape(logits_orig) != tape.shape(logits_rot) {
        return Err(LossError::PairShape(
            tape.shape(logits_orig).to_vec(),
            tape.shape(logits_rot).to_vec(),
        ));
    }
    let orig = tape.stop_gradient(logits_orig);
    let ls_orig = tape.log_softmax(orig)?;
    let p_orig = tape.exp(ls_orig)?;
    let lp_orig = tape.clamp_min(ls_orig, LOG_EPS.ln())?;
    let lp_rot = clamped_log_probs(tape, logits_rot)?;
    let diff = tape.sub(lp_orig, lp_rot)?;
    let terms = tape.mul(p_orig, diff)?;
    let total = tape.sum(terms)?;
    Ok(tape.scale(total, 1.0 / n as f64)?)
}

/// Mean Shannon entropy of `softmax(logits)` per row.
pub fn entropy_loss(tape: &mut Tape, logits: Var) -> Result<Var, LossError> {
    let (n, _) = rows_cols(tape, logits)?;
    let ls = tape.log_softmax(logits)?;
    let p = tape.exp(ls)?;
    let lp = tape.clamp_min(ls, LOG_EPS.ln())?;
    let plogp = tape.mul(p, lp)?;
    let total = tape.sum(plogp)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

/// `main + lambda_p * pretext + lambda_c * consistency + lambda_e * entropy`.
///
/// Terms with a zero weight are left off the tape, so they contribute
/// neither value nor gradient.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, weights: &LossWeights) -> Result<(Var, LossBreakdown), LossError> {
    weights.validate()?;
    for v in [parts.main, parts.pretext, parts.consistency, parts.entropy] {
        if !tape.value(v).is_scalar() || tape.value(v).rank() > 1 {
            return Err(TensorError::NotScalar(tape.shape(v).to_vec()).into());
        }
    }
    let mut total = parts.main;
    for (var, w) in [
        (parts.pretext, weights.lambda_p),
        (parts.consistency, weights.lambda_c),
        (parts.entropy, weights.lambda_e),
    ] {
        if w != 0.0 {
            let term = tape.scale(var, w)?;
            total = tape.add(total, term)?;
        }
    }
    let breakdown = LossBreakdown {
        l_main: tape.item(parts.main),
        l_pretext: tape.item(parts.pretext),
        l_consistency: tape.item(parts.consistency),
        l_entropy: tape.item(parts.entropy),
        l_total: tape.item(total),
    };
    Ok((total, breakdown))
}

// ----- mutual-information oracle -----------------------------------------

const TABLE_TOL: f64 = 1e-12;
const MAX_ALPHABET: usize = 8;

fn check_table(name: &str, rows: &[Vec<f64>], row_sums: bool) -> Result<usize, LossError> {
    let bad = |m: String| Err(LossError::Table(format!("{name}: {m}")));
    if rows.is_empty() || rows.len() > MAX_ALPHABET {
        return bad(format!("{} rows, need 1..={MAX_ALPHABET}", rows.len()));
    }
    let cols = rows[0].len();
    if cols == 0 || cols > MAX_ALPHABET || rows.iter().any(|r| r.len() != cols) {
        return bad("ragged or oversized columns".into());
    }
    if rows.iter().flatten().any(|&p| !p.is_finite() || p < 0.0) {
        return bad("negative or non-finite entry".into());
    }
    if row_sums {
        if let Some(i) = rows.iter().position(|r| (r.iter().sum::<f64>() - 1.0).abs() > TABLE_TOL) {
            return bad(format!("row {i} does not sum to 1"));
        }
    } else if (rows.iter().flatten().sum::<f64>() - 1.0).abs() > TABLE_TOL {
        return bad("entries do not sum to 1".into());
    }
    Ok(cols)
}

fn xlogy_ratio(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// Both sides of the negative mutual-information decomposition for an
/// augmentation `x -> x_aug` and a predictor `p(y | x)`, assuming `y` is
/// independent of `x_aug` given `x`.
///
/// `joint[x][x_aug]` is `p(x, x_aug)`; `cond[x][y]` is `p(y | x)`.
/// Returns `(-I(x_aug; y), E[KL(p(y|x) || p(y|x_aug))] - E[KL(p(y|x) || p(y))])`,
/// each computed by direct marginalization.
pub fn mi_decomposition_oracle(joint: &[Vec<f64>], cond: &[Vec<f64>]) -> Result<(f64, f64), LossError> {
    let n_aug = check_table("joint", joint, false)?;
    let n_y = check_table("cond", cond, true)?;
    if cond.len() != joint.len() {
        return Err(LossError::Table(format!(
            "joint has {} x values, cond has {}",
            joint.len(),
            cond.len()
        )));
    }
    let n_x = joint.len();
    let p_x: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let p_aug: Vec<f64> = (0..n_aug).map(|a| (0..n_x).map(|x| joint[x][a]).sum()).collect();
    let p_y: Vec<f64> = (0..n_y).map(|y| (0..n_x).map(|x| p_x[x] * cond[x][y]).sum()).collect();
    // p(x_aug, y) and p(y | x_aug), marginalizing over x.
    let p_aug_y: Vec<Vec<f64>> = (0..n_aug)
        .map(|a| (0..n_y).map(|y| (0..n_x).map(|x| joint[x][a] * cond[x][y]).sum()).collect())
        .collect();

    let mut mi = 0.0;
    for a in 0..n_aug {
        for y in 0..n_y {
            let pj = p_aug_y[a][y];
            if pj > 0.0 {
                mi += pj * (pj / (p_aug[a] * p_y[y])).ln();
            }
        }
    }

    let kl = |p: &[f64], q: &dyn Fn(usize) -> f64| -> f64 { (0..p.len()).map(|y| xlogy_ratio(p[y], q(y))).sum() };
    let mut e_kl_aug = 0.0;
    for x in 0..n_x {
        for a in 0..n_aug {
            if joint[x][a] > 0.0 {
                e_kl_aug += joint[x][a] * kl(&cond[x], &|y| p_aug_y[a][y] / p_aug[a]);
            }
        }
    }
    let e_kl_marg: f64 = (0..n_x)
        .filter(|&x| p_x[x] > 0.0)
        .map(|x| p_x[x] * kl(&cond[x], &|y| p_y[y]))
        .sum();
    Ok((-mi, e_kl_aug - e_kl_marg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits(tape: &mut Tape, rows: &[&[f64]], grad: bool) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap(), grad)
    }

    // Direct oracle: -log(e^{z_y} / sum e^{z_j}) in plain arithmetic.
    fn ce_direct(z: &[f64], y: usize) -> f64 {
        -(z[y].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln()
    }

    #[test]
    fn main_loss_examples() {
        let mut t = Tape::new();
        let z = logits(&mut t, &[&[1000.0, 0.0, 0.0], &[0.0, 1000.0, 0.0]], false);
        let l = main_loss(&mut t, z, &[0, 1]).unwrap();
        assert!(t.item(l) < 1e-9);

        let z = logits(&mut t, &[&[0.3; 4], &[0.3; 4]], false);
        let l = main_loss(&mut t, z, &[0, 3]).unwrap();
        assert!((t.item(l) - 4f64.ln()).abs() < 1e-15);

        let z = logits(&mut t, &[&[1.0, 2.0, 3.0]], false);
        let l = main_loss(&mut t, z, &[2]).unwrap();
        assert!((t.item(l) - ce_direct(&[1.0, 2.0, 3.0], 2)).abs() < 1e-14);
        assert!((t.item(l) - 0.407_605_964_444_380).abs() < 1e-12);
    }

    #[test]
    fn pretext_loss_examples() {
        let mut t = Tape::new();
        let z = logits(&mut t, &[&[0.0, 0.0, 0.0, 10.0]], false);
        let l = pretext_loss(&mut t, z, &[3]).unwrap();
        let want = (1.0 + 3.0 * (-10f64).exp()).ln();
        assert!((t.item(l) - want).abs() < 1e-15);
        assert!((t.item(l) - 1.3619e-4).abs() < 1e-8);

        let z = logits(&mut t, &[&[0.0, 50.0, 0.0, 0.0]], false);
        let l = pretext_loss(&mut t, z, &[1]).unwrap();
        assert!(t.item(l) < 1e-9);
    }

    #[test]
    fn label_errors() {
        let mut t = Tape::new();
        let z = logits(&mut t, &[&[0.0, 1.0]], false);
        assert_eq!(
            main_loss(&mut t, z, &[2]),
            Err(LossError::LabelOutOfRange {
                index: 0,
                label: 2,
                classes: 2
            })
        );
        assert!(matches!(main_loss(&mut t, z, &[0, 1]), Err(LossError::LabelCount { .. })));
        let z4 = logits(&mut t, &[&[0.0; 4]], false);
        assert!(matches!(pretext_loss(&mut t, z4, &[4]), Err(LossError::LabelOutOfRange { .. })));
        let flat = t.constant(Tensor::from_slice(&[1.0, 2.0]));
        assert!(matches!(entropy_loss(&mut t, flat), Err(LossError::LogitShape(_))));
    }

    #[test]
    fn consistency_examples() {
        let mut t = Tape::new();
        let a = logits(&mut t, &[&[0.2, -1.0, 3.0], &[1.0, 1.0, 0.0]], false);
        let b = logits(&mut t, &[&[0.2, -1.0, 3.0], &[1.0, 1.0, 0.0]], false);
        let l = consistency_loss(&mut t, a, b).unwrap();
        assert!(t.item(l).abs() < 1e-15);

        // p = [0.5, 0.5], q = [0.25, 0.75].
        let p = logits(&mut t, &[&[0.0, 0.0]], false);
        let q = logits(&mut t, &[&[0.0, 3f64.ln()]], false);
        let l = consistency_loss(&mut t, p, q).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((t.item(l) - want).abs() < 1e-15);
        assert!((t.item(l) - 0.143_841_036_225_890).abs() < 1e-12);

        let wide = logits(&mut t, &[&[0.0, 0.0, 0.0]], false);
        assert!(matches!(consistency_loss(&mut t, p, wide), Err(LossError::PairShape(..))));
    }

    #[test]
    fn consistency_gradient_flows_only_through_rotated_branch() {
        let mut t = Tape::new();
        let orig = logits(&mut t, &[&[0.5, -0.2, 1.0], &[2.0, 0.0, -1.0]], true);
        let rot = logits(&mut t, &[&[0.1, 0.4, -0.3], &[0.0, 0.0, 0.5]], true);
        let l = consistency_loss(&mut t, orig, rot).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad_or_zeros(orig).data().iter().all(|&g| g == 0.0));
        assert!(t.grad_or_zeros(rot).data().iter().any(|&g| g != 0.0));

        // Swapping the arguments moves the gradient to the other branch.
        t.zero_grads();
        let l = consistency_loss(&mut t, rot, orig).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad_or_zeros(rot).data().iter().all(|&g| g == 0.0));
        assert!(t.grad_or_zeros(orig).data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        let fixed = Tensor::from_rows(&[&[0.5, -0.2, 1.0], &[2.0, 0.0, -1.0]]).unwrap();
        let x = Tensor::from_rows(&[&[0.1, 0.4, -0.3], &[0.0, 0.0, 0.5]]).unwrap();
        let err = finite_diff_check(
            |t: &mut Tape, v| -> Result<Var, LossError> {
                let o = t.constant(fixed.clone());
                consistency_loss(t, o, v)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn entropy_examples() {
        let mut t = Tape::new();
        let z = logits(&mut t, &[&[800.0, 0.0, 0.0]], false);
        let l = entropy_loss(&mut t, z).unwrap();
        assert!(t.item(l).abs() < 1e-12);

        let z = logits(&mut t, &[&[1.5; 5]], false);
        let l = entropy_loss(&mut t, z).unwrap();
        assert!((t.item(l) - 5f64.ln()).abs() < 1e-14);

        let z = logits(&mut t, &[&[0.0, (1.0f64 / 9.0).ln()]], false);
        let l = entropy_loss(&mut t, z).unwrap();
        let want = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((t.item(l) - want).abs() < 1e-15);
        assert!((t.item(l) - 0.325_082_973_391_448).abs() < 1e-12);
    }

    #[test]
    fn entropy_and_cross_entropy_gradients() {
        let x = Tensor::from_rows(&[&[0.3, -0.7, 1.2, 0.0], &[-1.0, 0.5, 0.5, 2.0]]).unwrap();
        let e = finite_diff_check(|t: &mut Tape, v| entropy_loss(t, v), &x, 1e-6).unwrap();
        assert!(e < 1e-7, "{e}");
        let c = finite_diff_check(|t: &mut Tape, v| main_loss(t, v, &[2, 0]), &x, 1e-6).unwrap();
        assert!(c < 1e-7, "{c}");
    }

    fn random_logits(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> Tensor {
        Tensor::new(vec![n, k], (0..n * k).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn losses_respect_their_ranges(seed in 0u64..1000, n in 1usize..6, k in 2usize..7, scale in 0.1f64..60.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new();
            let a = t.constant(random_logits(&mut rng, n, k, scale));
            let b = t.constant(random_logits(&mut rng, n, k, scale));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let ce = main_loss(&mut t, a, &labels).unwrap();
            let kl = consistency_loss(&mut t, a, b).unwrap();
            let h = entropy_loss(&mut t, a).unwrap();
            prop_assert!(t.item(ce) >= 0.0);
            prop_assert!(t.item(kl) >= -1e-12);
            prop_assert!(t.item(h) >= -1e-12 && t.item(h) <= (k as f64).ln() + 1e-12);
        }
    }

    fn parts(t: &mut Tape) -> LossParts {
        let mut s = |v| t.leaf(Tensor::scalar(v), true);
        LossParts {
            main: s(0.8),
            pretext: s(1.3),
            consistency: s(0.07),
            entropy: s(0.9),
        }
    }

    #[test]
    fn total_with_zero_weights_is_main() {
        let mut t = Tape::new();
        let p = parts(&mut t);
        let (total, b) = total_loss(&mut t, &p, &LossWeights::ZERO).unwrap();
        assert_eq!(t.item(total).to_bits(), t.item(p.main).to_bits());
        assert_eq!(b.l_total.to_bits(), b.l_main.to_bits());
        t.backward(total).unwrap();
        assert!(t.grad(p.pretext).is_none());
    }

    #[test]
    fn total_is_weighted_sum_and_linear_in_weights() {
        let mut t = Tape::new();
        let p = parts(&mut t);
        let w = LossWeights::default();
        assert_eq!((w.lambda_p, w.lambda_c, w.lambda_e), (0.6, 0.2, 0.1));
        let (total, b) = total_loss(&mut t, &p, &w).unwrap();
        let want = b.l_main + 0.6 * b.l_pretext + 0.2 * b.l_consistency + 0.1 * b.l_entropy;
        assert!((b.l_total - want).abs() < 1e-12);
        t.backward(total).unwrap();
        assert_eq!(t.grad(p.entropy).unwrap().item(), 0.1);

        let w2 = LossWeights { lambda_c: 0.4, ..w };
        let (_, b2) = total_loss(&mut t, &p, &w2).unwrap();
        let rest = b.l_main + 0.6 * b.l_pretext + 0.1 * b.l_entropy;
        assert!(((b2.l_total - rest) - 2.0 * (b.l_total - rest)).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(matches!(LossWeights::new(0.6, -0.1, 0.1), Err(LossError::BadWeight { name: "lambda_c", .. })));
        assert!(LossWeights::new(0.0, f64::NAN, 0.0).is_err());
        let mut t = Tape::new();
        let p = parts(&mut t);
        let w = LossWeights {
            lambda_e: -1.0,
            ..LossWeights::ZERO
        };
        assert!(total_loss(&mut t, &p, &w).is_err());
    }

    // ----- MI oracle ------------------------------------------------------

    fn random_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize, joint: bool) -> Vec<Vec<f64>> {
        let mut t: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(0.01..1.0)).collect()).collect();
        if joint {
            let s: f64 = t.iter().flatten().sum();
            t.iter_mut().flatten().for_each(|v| *v /= s);
        } else {
            for r in &mut t {
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|v| *v /= s);
            }
        }
        t
    }

    #[test]
    fn identical_conditionals_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let joint = random_table(&mut rng, 4, 3, true);
        let row = vec![0.2, 0.5, 0.3];
        let cond = vec![row; 4];
        let (lhs, rhs) = mi_decomposition_oracle(&joint, &cond).unwrap();
        assert!(lhs.abs() < 1e-15 && rhs.abs() < 1e-15);
    }

    #[test]
    fn identity_augmentation_deterministic_labels() {
        // x uniform over 4 values, x_aug = x, y = x % 3.
        let joint: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 0.25 } else { 0.0 }).collect()).collect();
        let cond: Vec<Vec<f64>> = (0..4).map(|i| (0..3).map(|y| if i % 3 == y { 1.0 } else { 0.0 }).collect()).collect();
        let (lhs, rhs) = mi_decomposition_oracle(&joint, &cond).unwrap();
        // p(y) = [0.5, 0.25, 0.25]
        let h_y = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((lhs + h_y).abs() < 1e-12);
        assert!((rhs - lhs).abs() < 1e-12);
    }

    #[test]
    fn decomposition_holds_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let joint = random_table(&mut rng, 4, 4, true);
            let cond = random_table(&mut rng, 4, 4, false);
            let (lhs, rhs) = mi_decomposition_oracle(&joint, &cond).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} {rhs}");
            assert!(lhs <= 1e-15);
        }
    }

    #[test]
    fn uniform_prior_turns_marginal_kl_into_entropy_offset() {
        // A doubly stochastic p(y|x) with uniform p(x) gives uniform p(y),
        // so E[KL(p(y|x) || p(y))] = ln K - E[H(p(y|x))].
        let base = [0.55, 0.25, 0.15, 0.05];
        let k = base.len();
        let cond: Vec<Vec<f64>> = (0..k).map(|s| (0..k).map(|y| base[(y + s) % k]).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut joint = random_table(&mut rng, k, 3, false);
        joint.iter_mut().flatten().for_each(|v| *v /= k as f64);
        let (lhs, rhs) = mi_decomposition_oracle(&joint, &cond).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);

        let p_aug: Vec<f64> = (0..3).map(|a| joint.iter().map(|r| r[a]).sum()).collect();
        let mut e_kl_aug = 0.0;
        for (x, row) in joint.iter().enumerate() {
            for (a, &pj) in row.iter().enumerate() {
                let q: Vec<f64> = (0..k).map(|y| (0..k).map(|x2| joint[x2][a] * cond[x2][y]).sum::<f64>() / p_aug[a]).collect();
                e_kl_aug += pj * (0..k).map(|y| cond[x][y] * (cond[x][y] / q[y]).ln()).sum::<f64>();
            }
        }
        let h: f64 = -base.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((rhs - (e_kl_aug + h - (k as f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_bad_tables() {
        let ok = vec![vec![0.5, 0.5]];
        assert!(mi_decomposition_oracle(&[vec![0.5, 0.4]], &ok).is_err());
        assert!(mi_decomposition_oracle(&[vec![0.5, 0.5]], &[vec![0.6, 0.6]]).is_err());
        assert!(mi_decomposition_oracle(&[vec![1.0 / 9.0; 9]], &ok).is_err());
        assert!(mi_decomposition_oracle(&[vec![0.5], vec![0.5]], &ok).is_err());
    }
}
