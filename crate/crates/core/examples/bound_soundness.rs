//! Boxes from interval propagation contain every perturbed embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ibp_fewshot::interval::propagate_prefix;
use ibp_fewshot::tensor::{Network, Tensor};

fn main() -> ibp_fewshot::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = Network::conv([1, 8, 8], 4, 2, Some(5), 2, &mut rng)?;
    let x = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    for eps in [0.0, 0.01, 0.05, 0.1] {
        let r = propagate_prefix(&net, &x, eps)?;
        let mut outside = 0;
        for _ in 0..500 {
            let d = x.data().iter().map(|v| v + rng.random_range(-eps..=eps)).collect();
            let xp = Tensor::new(x.shape().to_vec(), d)?;
            if !r.bounds.contains(&net.embed(&xp)?, 1e-9) {
                outside += 1;
            }
        }
        println!("eps {eps:<5} mean width {:.5}  perturbations outside {outside}/500", r.bounds.mean_width());
    }
    Ok(())
}
