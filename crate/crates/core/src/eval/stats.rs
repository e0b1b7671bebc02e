use super::EvalError;

/// Macro-averaged F1 over the labels that occur in `gold` or `pred`.
/// A label with no true positives scores 0.
pub fn macro_f1(gold: &[usize], pred: &[usize]) -> f64 {
    assert_eq!(gold.len(), pred.len(), "gold/prediction length mismatch");
    let n = gold.iter().chain(pred).copied().max().map_or(0, |m| m + 1);
    let (mut tp, mut fp, mut fn_) = (vec![0u64; n], vec![0u64; n], vec![0u64; n]);
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..n {
        if tp[c] + fp[c] + fn_[c] == 0 {
            continue;
        }
        present += 1;
        sum += 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64;
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard error of the mean with the `n - 1` sample deviation.
pub fn sem(values: &[f64]) -> Result<f64, EvalError> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::TooFewRepeats(n));
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    Ok((var / n as f64).sqrt())
}

/// Marginal performance improvement in percent:
/// `100 * (f1_model - f1_base) / (1 - f1_base)`, positive when the model
/// beats the baseline.
pub fn delta_mp(f1_base: f64, f1_model: f64) -> Result<f64, EvalError> {
    if !(f1_base < 1.0) || !f1_base.is_finite() || !f1_model.is_finite() {
        return Err(EvalError::DeltaMpUndefined(f1_base));
    }
    Ok(100.0 * (f1_model - f1_base) / (1.0 - f1_base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_worst() {
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1]), 1.0);
        assert_eq!(macro_f1(&[0, 0], &[1, 1]), 0.0);
    }

    #[test]
    fn hand_computed_macro_f1() {
        // class 0: tp 1 fp 1 fn 1 -> 0.5; class 1: tp 1 fp 1 fn 0 -> 2/3;
        // class 2: tp 0 fp 0 fn 1 -> 0
        let f = macro_f1(&[0, 0, 1, 2], &[0, 1, 1, 0]);
        assert!((f - (0.5 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sem_closed_form() {
        let v = [0.8, 0.82, 0.79, 0.85];
        let m = 0.815;
        let var = ((0.8f64 - m).powi(2)
            + (0.82f64 - m).powi(2)
            + (0.79f64 - m).powi(2)
            + (0.85f64 - m).powi(2))
            / 3.0;
        assert!((sem(&v).unwrap() - (var / 4.0).sqrt()).abs() < 1e-15);
        assert!(matches!(sem(&[1.0]), Err(EvalError::TooFewRepeats(1))));
        assert_eq!(sem(&[0.5, 0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn delta_mp_examples() {
        assert_eq!(delta_mp(0.7, 0.7).unwrap(), 0.0);
        assert!((delta_mp(0.5, 0.75).unwrap() - 50.0).abs() < 1e-12);
        assert!(delta_mp(0.8, 0.7).unwrap() < 0.0);
        assert!(delta_mp(1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn delta_mp_monotone(base in 0.0f64..0.99, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(delta_mp(base, lo).unwrap() <= delta_mp(base, hi).unwrap());
            prop_assert_eq!(delta_mp(base, base).unwrap(), 0.0);
        }

        #[test]
        fn macro_f1_in_unit_interval(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..50)) {
            let (g, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let f = macro_f1(&g, &p);
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
