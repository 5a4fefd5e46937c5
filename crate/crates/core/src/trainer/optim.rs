use crate::encoder::{EncoderParams, GradientBuffer, TowerPair};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Linear warmup from 0 to `peak`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, warmup_steps: u64, total_steps: u64, peak: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps) as f64;
    peak * (total_steps - step) as f64 / span
}

/// First and second moments plus the count of applied updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: TowerPair,
    pub v: TowerPair,
    pub t: u64,
    pub skipped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// The gradient had a non-finite entry; nothing was changed.
    Skipped,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        AdamState {
            m: TowerPair::zeros(&params.dims),
            v: TowerPair::zeros(&params.dims),
            t: 0,
            skipped: 0,
        }
    }

    /// Bias-corrected Adam step.
    pub fn update(&mut self, params: &mut EncoderParams, grads: &GradientBuffer, lr: f64) -> UpdateOutcome {
        if !grads.all_finite() {
            self.skipped += 1;
            return UpdateOutcome::Skipped;
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powf(self.t as f64);
        let c2 = 1.0 - BETA2.powf(self.t as f64);
        let tensors = params
            .towers
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        params.generation += 1;
        UpdateOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;

    fn dims() -> EncoderDims {
        EncoderDims {
            vocab_size: 3,
            d_emb: 2,
            d_hidden: 2,
            d_out: 1,
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 1000, 2e-5), 0.0);
        assert_eq!(lr_at(100, 100, 1000, 2e-5), 2e-5);
        assert!((lr_at(550, 100, 1000, 2e-5) - 1e-5).abs() < 1e-18);
        assert_eq!(lr_at(1000, 100, 1000, 2e-5), 0.0);
        assert_eq!(lr_at(5000, 100, 1000, 2e-5), 0.0);
        assert_eq!(lr_at(0, 0, 10, 1.0), 1.0);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = EncoderParams::init(dims(), 1);
        let before = p.towers.clone();
        let mut opt = AdamState::new(&p);
        let zero = p.gradient_buffer();
        opt.update(&mut p, &zero, 0.1);
        assert_eq!(p.towers, before);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = EncoderParams::init(dims(), 1);
        let mut opt = AdamState::new(&p);
        opt.m.fill(0.5);
        opt.v.fill(0.25);
        let zero = p.gradient_buffer();
        opt.update(&mut p, &zero, 0.1);
        assert!(opt.m.question.b2.iter().all(|&x| (x - 0.45).abs() < 1e-15));
        assert!(opt.v.question.b2.iter().all(|&x| (x - 0.24975).abs() < 1e-15));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = EncoderParams::zeros(dims());
        let mut opt = AdamState::new(&p);
        let mut g = p.gradient_buffer();
        g.question.b2[0] = 3.0;
        g.passage.b2[0] = -0.002;
        opt.update(&mut p, &g, 0.01);
        assert!((p.towers.question.b2[0] + 0.01).abs() < 1e-9);
        assert!((p.towers.passage.b2[0] - 0.01).abs() < 1e-7);
        let before = p.towers.question.b2[0];
        opt.update(&mut p, &g, 0.01);
        let second = (p.towers.question.b2[0] - before).abs();
        assert!(second <= 0.01 + 1e-12);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = EncoderParams::init(dims(), 2);
        let before = p.clone();
        let mut opt = AdamState::new(&p);
        let mut g = p.gradient_buffer();
        g.passage.w1[0] = f64::NAN;
        assert_eq!(opt.update(&mut p, &g, 0.1), UpdateOutcome::Skipped);
        assert_eq!(p, before);
        assert_eq!(opt.skipped, 1);
        assert_eq!(opt.t, 0);
    }
}
