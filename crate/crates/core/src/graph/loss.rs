use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Real;

impl<T: Real> Graph<'_, T> {
    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`,
    /// evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        if target.len() != self.numel(logits) {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} targets for logits {:?}", target.len(), self.shape(logits)),
            ));
        }
        let n = T::lit(target.len() as f64);
        let mut total = T::ZERO;
        for (&z, &t) in self.value(logits).iter().zip(target) {
            total += bce_logit(z, t);
        }
        let target = target.to_vec();
        self.push("bce_with_logits", vec![1], vec![total / n], &[logits], move |c, s| {
            let g = c.grad[0] / n;
            let vz = c.value(logits);
            if let Some(gz) = s.get(logits) {
                for ((d, &z), &t) in gz.iter_mut().zip(vz).zip(&target) {
                    *d += g * (super::elementwise::sigmoid(z) - t);
                }
            }
        })
    }
}

/// `-(t ln p + (1-t) ln(1-p))` with `p = sigmoid(z)`.
pub(crate) fn bce_logit<T: Real>(z: T, t: T) -> T {
    z.max(T::ZERO) - z * t + (-z.abs()).exp().ln_1p()
}

/// Cross-entropy of probabilities, with `0 ln 0 = 0`.
#[cfg(test)]
fn bce_prob(p: f64, t: f64) -> f64 {
    let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * y.ln() };
    -(xlogy(t, p) + xlogy(1.0 - t, 1.0 - p))
}
