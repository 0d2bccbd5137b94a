//! Small numeric helpers shared by the loss and backbone code.

/// Probabilities are clamped here before taking logs; keeps 200-frame
/// alignment products finite.
pub(crate) const PROB_FLOOR: f64 = 1e-12;

/// log(exp(a) + exp(b)) without overflow; handles -inf operands.
pub(crate) fn log_sum_exp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax(row: &[f64], out: &mut [f64]) {
    debug_assert_eq!(row.len(), out.len());
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Clamped natural log of a probability.
pub(crate) fn log_prob(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}
