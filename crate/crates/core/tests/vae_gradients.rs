mod common;

use common::{small_vae, worst_fd_error, OwnedBatch};
use levfed::vae::Likelihood;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradient_matches_central_differences() {
    for likelihood in [Likelihood::Bernoulli, Likelihood::Gaussian] {
        for lambda in [0.0, 1.0, 5.0] {
            let vae = small_vae(likelihood, lambda);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let p = vae.init(&mut rng);
            let batch = OwnedBatch::random(&vae, 6, &mut rng);
            let worst = worst_fd_error(&vae, &p, &batch.data(), lambda, 20, 5);
            assert!(
                worst <= 1e-4,
                "{likelihood:?} λ={lambda}: worst relative error {worst:e}"
            );
        }
    }
}

#[test]
fn total_gradient_is_weighted_sum_of_terms() {
    let vae = small_vae(Likelihood::Bernoulli, 2.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = vae.init(&mut rng);
    let batch = OwnedBatch::random(&vae, 5, &mut rng);
    let data = batch.data();
    let (_, total) = vae.loss_and_grad(&p, &data, 2.5).unwrap();
    let [prior, marg, recon] = vae.term_grads(&p, &data).unwrap();
    for i in 0..total.len() {
        let combined = prior.values[i] + 2.5 * marg.values[i] + 3.5 * recon.values[i];
        assert!((combined - total.values[i]).abs() <= 1e-12 * (1.0 + total.values[i].abs()));
    }
}

#[test]
fn batch_order_does_not_change_loss() {
    let vae = small_vae(Likelihood::Gaussian, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = vae.init(&mut rng);
    let batch = OwnedBatch::random(&vae, 7, &mut rng);
    let data = batch.data();
    let mut reversed = data.clone();
    reversed.reverse();
    let a = vae.loss(&p, &data, 1.0).unwrap().total;
    let b = vae.loss(&p, &reversed, 1.0).unwrap().total;
    assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
}
