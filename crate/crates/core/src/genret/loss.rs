//! In-batch contrastive loss against fixed target embeddings.

use super::tensor::Scalar;

/// Mean negative log-probability of each output's own target among all the
/// batch targets, at temperature `tau`.
pub fn nce_loss<T: Scalar, A: AsRef<[T]>, B: AsRef<[T]>>(outputs: &[A], targets: &[B], tau: f64) -> f64 {
    nce(outputs, targets, tau, false).0
}

/// Loss and its gradient with respect to every output row. Targets get no
/// gradient.
pub fn nce_loss_grad<T: Scalar, A: AsRef<[T]>, B: AsRef<[T]>>(outputs: &[A], targets: &[B], tau: f64) -> (f64, Vec<Vec<f64>>) {
    nce(outputs, targets, tau, true)
}

fn nce<T: Scalar, A: AsRef<[T]>, B: AsRef<[T]>>(outputs: &[A], targets: &[B], tau: f64, want_grad: bool) -> (f64, Vec<Vec<f64>>) {
    assert_eq!(outputs.len(), targets.len(), "one target per output");
    assert!(!outputs.is_empty(), "empty batch");
    let b = outputs.len();
    let mut loss = 0.0;
    let mut grads = Vec::new();
    for (i, t) in outputs.iter().enumerate() {
        let t = t.as_ref();
        let logits: Vec<f64> = targets
            .iter()
            .map(|o| t.iter().zip(o.as_ref()).map(|(&x, &y)| x.f64() * y.f64()).sum::<f64>() / tau)
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
        loss -= logits[i] - m - z.ln();
        if want_grad {
            let mut g = vec![0.0; t.len()];
            for (j, o) in targets.iter().enumerate() {
                let p = (logits[j] - m).exp() / z;
                let w = (p - if i == j { 1.0 } else { 0.0 }) / (tau * b as f64);
                for (gk, &ok) in g.iter_mut().zip(o.as_ref()) {
                    *gk += w * ok.f64();
                }
            }
            grads.push(g);
        }
    }
    (loss / b as f64, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn single_sample_is_zero() {
        assert_eq!(nce_loss(&[vec![0.6f64, 0.8]], &[vec![1.0f64, 0.0]], 0.05), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_b() {
        let outputs = vec![vec![0.0f64; 4]; 32];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let targets: Vec<Vec<f64>> = (0..32).map(|_| unit(&mut rng, 4)).collect();
        let l = nce_loss(&outputs, &targets, 0.05);
        assert!((l - 32f64.ln()).abs() < 1e-6, "{l}");
        assert!((l - 3.4657).abs() < 1e-4);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let outputs: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 6)).collect();
        let targets: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 6)).collect();
        let (_, g) = nce_loss_grad(&outputs, &targets, 0.05);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..4 {
            for k in 0..6 {
                let mut p = outputs.clone();
                p[i][k] += h;
                let mut m = outputs.clone();
                m[i][k] -= h;
                let fd = (nce_loss(&p, &targets, 0.05) - nce_loss(&m, &targets, 0.05)) / (2.0 * h);
                worst = worst.max((fd - g[i][k]).abs() / fd.abs().max(g[i][k].abs()).max(1e-8));
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn small_loss_means_top1_correct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let targets: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut rng, 8)).collect();
            let outputs: Vec<Vec<f64>> = targets
                .iter()
                .map(|t| {
                    let noise = unit(&mut rng, 8);
                    let mix: Vec<f64> = t.iter().zip(&noise).map(|(a, b)| a + 0.3 * b).collect();
                    let n = mix.iter().map(|x| x * x).sum::<f64>().sqrt();
                    mix.into_iter().map(|x| x / n).collect()
                })
                .collect();
            let l = nce_loss(&outputs, &targets, 0.05);
            assert!(l >= 0.0);
            if l < 0.01 {
                for (i, o) in outputs.iter().enumerate() {
                    let scores: Vec<f64> = targets.iter().map(|t| t.iter().zip(o).map(|(a, b)| a * b).sum()).collect();
                    let best = (0..5).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
                    assert_eq!(best, i);
                }
            }
        }
    }
}
