//! Training objectives. Each returns the mean loss and its gradient with
//! respect to the logits it was given.

use crate::error::{Error, Result};
use crate::model::Scalar;
use crate::sampler::IGNORE;

#[derive(Debug, Clone, PartialEq)]
pub struct Loss<T> {
    pub value: T,
    pub grad: Vec<T>,
}

fn check_finite<T: Scalar>(xs: &[T], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with logits over the `valid` positions.
pub fn mspp_loss<T: Scalar>(logits: &[T], labels: &[u32], valid: &[bool]) -> Result<Loss<T>> {
    if logits.len() != labels.len() || logits.len() != valid.len() {
        return Err(Error::Shape(format!(
            "mspp loss: {} logits, {} labels, {} mask entries",
            logits.len(),
            labels.len(),
            valid.len()
        )));
    }
    check_finite(logits, "candidate logits")?;
    let n = valid.iter().filter(|&&v| v).count();
    let mut grad = vec![T::zero(); logits.len()];
    if n == 0 {
        return Ok(Loss { value: T::zero(), grad });
    }
    let mut total = 0.0;
    for i in (0..logits.len()).filter(|&i| valid[i]) {
        let y = match labels[i] {
            0 => 0.0,
            1 => 1.0,
            other => return Err(Error::Invalid(format!("candidate label {other} is not binary"))),
        };
        let x = logits[i].as_f64();
        // -[y ln σ(x) + (1-y) ln(1-σ(x))] = softplus(x) - x·y
        total += softplus(x) - x * y;
        grad[i] = T::from_f64_lossy((sigmoid(x) - y) / n as f64);
    }
    Ok(Loss {
        value: T::from_f64_lossy(total / n as f64),
        grad,
    })
}

/// Fraction of valid candidates whose thresholded prediction (logit > 0)
/// matches the label; `None` when nothing is valid.
pub fn binary_accuracy<T: Scalar>(logits: &[T], labels: &[u32], valid: &[bool]) -> Option<f64> {
    let mut n = 0usize;
    let mut hit = 0usize;
    for i in (0..logits.len()).filter(|&i| valid[i]) {
        n += 1;
        hit += usize::from((logits[i] > T::zero()) == (labels[i] == 1));
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Mean softmax cross-entropy over rows of `num_classes` logits whose
/// target is not [`IGNORE`].
pub fn cross_entropy<T: Scalar>(logits: &[T], num_classes: usize, targets: &[u32]) -> Result<Loss<T>> {
    if num_classes == 0 || logits.len() != targets.len() * num_classes {
        return Err(Error::Shape(format!(
            "cross entropy: {} logits for {} targets of {num_classes} classes",
            logits.len(),
            targets.len()
        )));
    }
    let n = targets.iter().filter(|&&t| t != IGNORE).count();
    let mut grad = vec![T::zero(); logits.len()];
    if n == 0 {
        return Ok(Loss { value: T::zero(), grad });
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        let t = t as usize;
        if t >= num_classes {
            return Err(Error::IdOutOfRange {
                id: t as u32,
                size: num_classes,
            });
        }
        let row = &logits[r * num_classes..(r + 1) * num_classes];
        check_finite(row, "logits")?;
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t].as_f64();
        for (c, v) in row.iter().enumerate() {
            let p = (v.as_f64() - lse).exp();
            let y = if c == t { 1.0 } else { 0.0 };
            grad[r * num_classes + c] = T::from_f64_lossy((p - y) / n as f64);
        }
    }
    Ok(Loss {
        value: T::from_f64_lossy(total / n as f64),
        grad,
    })
}

/// Masked-language-model loss: mean cross-entropy at labelled positions.
pub fn mlm_loss<T: Scalar>(token_logits: &[T], vocab_size: usize, mlm_labels: &[u32]) -> Result<Loss<T>> {
    cross_entropy(token_logits, vocab_size, mlm_labels)
}

/// Unit-weighted sum of the two pre-training objectives.
pub fn pretrain_loss(mlm: f64, mspp: f64) -> f64 {
    mlm + mspp
}

/// Arg-max class of each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &[T], num_classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(num_classes)
        .map(|row| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
