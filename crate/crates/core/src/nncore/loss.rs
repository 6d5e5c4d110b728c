use super::array::{Float, NdArray};
use crate::error::{Error, Result};

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax<T: Float>(logits: &NdArray<T>) -> Result<NdArray<T>> {
    if logits.ndim() != 2 {
        return Err(Error::shape("log_softmax", format!("expected N x K, got {:?}", logits.shape())));
    }
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter() {
            s += (*v - m).exp();
        }
        let lse = m + s.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of log-softmax(logits) at the true class.
///
/// Labels follow the fire = 0 / no-fire = 1 convention. Returns the loss and
/// its gradient with respect to the logits, `(softmax - onehot) / N`.
pub fn log_softmax_nll<T: Float>(logits: &NdArray<T>, labels: &[u8]) -> Result<(T, NdArray<T>)> {
    if logits.ndim() != 2 || logits.shape()[1] != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(
            "log_softmax_nll",
            format!("logits {:?} with {} labels (need N x 2)", logits.shape(), labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|l| **l > 1) {
        return Err(Error::InvalidLabel(*bad));
    }
    let logp = log_softmax(logits)?;
    let n = T::of(labels.len() as f64);
    let mut loss = T::zero();
    let mut grad = NdArray::zeros(logits.shape());
    for (i, &label) in labels.iter().enumerate() {
        let row = logp.item(i);
        loss -= row[label as usize];
        for c in 0..2 {
            let onehot = if c == label as usize { T::one() } else { T::zero() };
            grad.data_mut()[i * 2 + c] = (row[c].exp() - onehot) / n;
        }
    }
    Ok((loss / n, grad))
}

/// NLL on already-normalized log-probabilities (no gradient), used for
/// validation losses.
pub fn nll<T: Float>(logp: &NdArray<T>, labels: &[u8]) -> Result<T> {
    if logp.shape()[0] != labels.len() {
        return Err(Error::shape("nll", "label count differs from batch size"));
    }
    let mut loss = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label > 1 {
            return Err(Error::InvalidLabel(label));
        }
        loss -= logp.item(i)[label as usize];
    }
    Ok(loss / T::of(labels.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits() {
        let logits = NdArray::<f64>::zeros(&[1, 2]);
        let (loss, _) = log_softmax_nll(&logits, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let logits = NdArray::<f32>::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let (loss, grad) = log_softmax_nll(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(grad.all_finite());
    }

    #[test]
    fn invalid_label() {
        let logits = NdArray::<f32>::zeros(&[1, 2]);
        assert!(matches!(log_softmax_nll(&logits, &[2]), Err(Error::InvalidLabel(2))));
    }

    #[test]
    fn rows_exponentiate_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = NdArray::<f32>::from_fn(&[50, 2], |_| rng.random_range(-30.0..30.0));
        let lp = log_softmax(&logits).unwrap();
        for i in 0..50 {
            let s: f64 = lp.item(i).iter().map(|v| (*v as f64).exp()).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = NdArray::<f64>::from_fn(&[6, 2], |_| rng.random_range(-3.0..3.0));
        let labels: Vec<u8> = (0..6).map(|i| (i % 2) as u8).collect();
        let (_, g) = log_softmax_nll(&logits, &labels).unwrap();
        let h = 1e-4;
        for i in 0..logits.len() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (log_softmax_nll(&p, &labels).unwrap().0 - log_softmax_nll(&m, &labels).unwrap().0) / (2.0 * h);
            assert!((g.data()[i] - num).abs() < 1e-6);
        }
    }
}
