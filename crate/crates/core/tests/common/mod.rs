//! Helpers shared by integration tests.
#![allow(dead_code)]

use levfed::vae::{Datum, Likelihood, Vae, VaeConfig, VaeParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Owned inputs for a VAE minibatch.
pub struct OwnedBatch {
    pub xs: Vec<Vec<f64>>,
    pub cs: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
}

impl OwnedBatch {
    pub fn random(vae: &Vae, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let cfg = vae.config();
        let xs = (0..n)
            .map(|_| {
                (0..cfg.input_dim)
                    .map(|_| match cfg.likelihood {
                        Likelihood::Bernoulli => f64::from(u8::from(rng.random::<f64>() < 0.3)),
                        Likelihood::Gaussian => rng.sample::<f64, _>(StandardNormal),
                    })
                    .collect()
            })
            .collect();
        let cs = (0..n)
            .map(|_| {
                (0..cfg.confounder_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let noise = (0..n)
            .map(|_| {
                (0..cfg.latent_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Self { xs, cs, noise }
    }

    pub fn data(&self) -> Vec<Datum<'_>> {
        (0..self.xs.len())
            .map(|i| Datum {
                x: &self.xs[i],
                c: &self.cs[i],
                noise: &self.noise[i],
            })
            .collect()
    }
}

pub fn small_vae(likelihood: Likelihood, lambda: f64) -> Vae {
    let assignment: Vec<usize> = (0..12).map(|i| i / 4).collect();
    Vae::new(VaeConfig::from_assignment(&assignment, 5, 6, 3, 3, lambda, likelihood).unwrap()).unwrap()
}

/// Central-difference check of `loss_and_grad` on `per_layer` random
/// coordinates of every layer (weights and biases sampled separately).
/// Returns the worst relative error.
pub fn worst_fd_error(vae: &Vae, p: &VaeParams, batch: &[Datum], lambda: f64, per_layer: usize, seed: u64) -> f64 {
    let h = 1e-4;
    let (_, grad) = vae.loss_and_grad(p, batch, lambda).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (_, layer) in vae.layout().layers() {
        for (start, len) in [(layer.w, layer.input * layer.output), (layer.b, layer.output)] {
            for _ in 0..per_layer {
                let idx = start + rng.random_range(0..len);
                let mut plus = p.clone();
                plus.values[idx] += h;
                let mut minus = p.clone();
                minus.values[idx] -= h;
                let fp = vae.loss(&plus, batch, lambda).unwrap().total;
                let fm = vae.loss(&minus, batch, lambda).unwrap().total;
                let fd = (fp - fm) / (2.0 * h);
                let an = grad.values[idx];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    worst
}
