use super::tensor::Scalar;
use super::NnError;

/// Per-row softmax cross-entropy results. `losses[i]` is zero for masked-out rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy<T> {
    pub classes: usize,
    pub losses: Vec<T>,
    pub probs: Vec<T>,
    targets: Vec<usize>,
    mask: Vec<bool>,
}

/// Softmax cross-entropy over `rows x classes` logits with integer targets.
///
/// Losses are returned unreduced so callers can rank them (hard negative mining) and pick which
/// ones enter the objective.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    classes: usize,
    targets: &[usize],
    mask: &[bool],
) -> Result<CrossEntropy<T>, NnError> {
    if classes == 0 || logits.len() != targets.len() * classes || mask.len() != targets.len() {
        return Err(NnError::Shape(format!(
            "cross entropy: {} logits, {classes} classes, {} targets, {} mask entries",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(NnError::Shape(format!("target class {t} out of range")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite("softmax_cross_entropy"));
    }
    let mut losses = Vec::with_capacity(targets.len());
    let mut probs = Vec::with_capacity(logits.len());
    for ((row, &t), &m) in logits.chunks_exact(classes).zip(targets).zip(mask) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        losses.push(if m { log_z - row[t] } else { T::zero() });
    }
    Ok(CrossEntropy {
        classes,
        losses,
        probs,
        targets: targets.to_vec(),
        mask: mask.to_vec(),
    })
}

impl<T: Scalar> CrossEntropy<T> {
    /// Gradient of `sum_i weights[i] * losses[i]` with respect to the logits.
    pub fn backward(&self, weights: &[T]) -> Vec<T> {
        assert_eq!(weights.len(), self.losses.len(), "one weight per row");
        let mut grad = vec![T::zero(); self.probs.len()];
        for (i, (&w, &m)) in weights.iter().zip(&self.mask).enumerate() {
            if !m || w == T::zero() {
                continue;
            }
            let row = i * self.classes;
            for c in 0..self.classes {
                let onehot = if c == self.targets[i] { T::one() } else { T::zero() };
                grad[row + c] = w * (self.probs[row + c] - onehot);
            }
        }
        grad
    }
}

/// `0.5 x^2` for `|x| < 1`, otherwise `|x| - 0.5`.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::of(0.5) * x * x
    } else {
        a - T::of(0.5)
    }
}

pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}
