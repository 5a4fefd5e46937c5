//! Student and teacher distributions over retrieved candidates and the KL
//! objective between them.

use super::TrainError;
use crate::util::softmax;

/// `softmax(scores / τ)` over the K retrieved candidates only; mass outside
/// the top K is treated as negligible.
pub fn student_distribution(fresh_scores: &[f64], tau: f64) -> Result<Vec<f64>, TrainError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(TrainError::Config(format!("temperature must be positive, got {tau}")));
    }
    if fresh_scores.is_empty() {
        return Err(TrainError::Numeric("empty score vector".into()));
    }
    if let Some(s) = fresh_scores.iter().find(|s| !s.is_finite()) {
        return Err(TrainError::Numeric(format!("non-finite retriever score {s}")));
    }
    let scaled: Vec<f64> = fresh_scores.iter().map(|s| s / tau).collect();
    Ok(softmax(&scaled))
}

/// Softmax over mean log-probabilities; no temperature.
pub fn teacher_distribution(log_probs: &[f64]) -> Result<Vec<f64>, TrainError> {
    if log_probs.is_empty() {
        return Err(TrainError::Numeric("empty teacher score vector".into()));
    }
    if let Some(s) = log_probs.iter().find(|s| !s.is_finite()) {
        return Err(TrainError::Numeric(format!("non-finite teacher score {s}")));
    }
    Ok(softmax(log_probs))
}

/// `KL(teacher ‖ student)` and its gradient with respect to the fresh scores,
/// `(student − teacher) / τ`.
pub fn kl_loss_and_grad(teacher: &[f64], student: &[f64], tau: f64) -> Result<(f64, Vec<f64>), TrainError> {
    if teacher.len() != student.len() {
        return Err(TrainError::Numeric(format!(
            "distribution lengths differ: {} vs {}",
            teacher.len(),
            student.len()
        )));
    }
    let mut loss = 0.0;
    for (&t, &s) in teacher.iter().zip(student) {
        if t == 0.0 {
            continue;
        }
        if s == 0.0 {
            return Err(TrainError::Numeric("student assigns zero mass where teacher does not".into()));
        }
        loss += t * (t.ln() - s.ln());
    }
    let grad = student.iter().zip(teacher).map(|(s, t)| (s - t) / tau).collect();
    Ok((loss, grad))
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn student_fixtures() {
        let u = student_distribution(&[0.3; 5], 0.7).unwrap();
        assert!(u.iter().all(|p| (p - 0.2).abs() < 1e-15));
        let s = student_distribution(&[1.0, 0.0], 1.0).unwrap();
        assert!((s[0] - 0.7311).abs() < 1e-4 && (s[1] - 0.2689).abs() < 1e-4);
        let s = student_distribution(&[1.0, 0.0], 0.5).unwrap();
        assert!((s[0] - 0.8808).abs() < 1e-4 && (s[1] - 0.1192).abs() < 1e-4);
        assert!(student_distribution(&[f64::NAN], 1.0).is_err());
        assert!(student_distribution(&[1.0], 0.0).is_err());
    }

    #[test]
    fn student_is_stable_for_large_scores() {
        let s = student_distribution(&[1000.0, 999.0], 1.0).unwrap();
        assert!((s[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn teacher_fixtures() {
        let t = teacher_distribution(&[-1.0; 3]).unwrap();
        assert!(t.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let a = teacher_distribution(&[-0.2, -1.4, -3.0]).unwrap();
        let b = teacher_distribution(&[4.8, 3.6, 2.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let t = teacher_distribution(&[0.5f64.ln(), 0.25f64.ln()]).unwrap();
        assert!((t[0] - 0.6667).abs() < 1e-4 && (t[1] - 0.3333).abs() < 1e-4);
        assert!(teacher_distribution(&[f64::INFINITY]).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn kl_fixtures() {
        let p = [0.2, 0.5, 0.3];
        let (l, g) = kl_loss_and_grad(&p, &p, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, _) = kl_loss_and_grad(&[1.0, 0.0], &[0.5, 0.5], 1.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.6931).abs() < 1e-4);
        assert!(kl_loss_and_grad(&[0.5, 0.5], &[1.0, 0.0], 1.0).is_err());
    }

    /// Finite differences of `KL(t ‖ softmax(s/τ))` in the scores.
    #[test]
    fn kl_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::util::rng(17);
        for _ in 0..10 {
            let tau = rng.gen_range(0.3..3.0);
            let scores: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let logits: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..0.0)).collect();
            // Oracle written directly from the definitions.
            let loss_at = |s: &[f64]| {
                let z: f64 = s.iter().map(|x| (x / tau).exp()).sum();
                let tz: f64 = logits.iter().map(|x| x.exp()).sum();
                (0..8)
                    .map(|i| {
                        let t = logits[i].exp() / tz;
                        let q = (s[i] / tau).exp() / z;
                        t * (t / q).ln()
                    })
                    .sum::<f64>()
            };
            let student = student_distribution(&scores, tau).unwrap();
            let teacher = teacher_distribution(&logits).unwrap();
            let (loss, grad) = kl_loss_and_grad(&teacher, &student, tau).unwrap();
            assert!((loss - loss_at(&scores)).abs() < 1e-12);
            let h = 1e-5;
            for i in 0..8 {
                let mut up = scores.clone();
                up[i] += h;
                let mut down = scores.clone();
                down[i] -= h;
                let fd = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
                let err = (fd - grad[i]).abs();
                assert!(err < 1e-9 || err / fd.abs().max(grad[i].abs()) < 1e-5, "{i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let s = [2.0, 0.5, -1.0, 0.1];
        let cold = entropy(&student_distribution(&s, 1.0).unwrap());
        let hot = entropy(&student_distribution(&s, 10.0).unwrap());
        assert!(hot > cold);
        assert!(hot < 4f64.ln());
    }
}
