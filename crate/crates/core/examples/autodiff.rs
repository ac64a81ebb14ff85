//! Reverse-mode gradients of a small classifier, checked against a central
//! difference on one weight.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ibp_fewshot::learners::cross_entropy_on;
use ibp_fewshot::tensor::{Network, Tape, Tensor};

fn loss(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let p = net.bind_constant(&mut tape);
    let xv = tape.constant(x.clone());
    let logits = net.forward_on(&mut tape, &p, xv).unwrap();
    let ce = cross_entropy_on(&mut tape, logits, labels).unwrap();
    tape.value(ce).item().unwrap()
}

fn main() -> ibp_fewshot::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Network::mlp(4, &[8], 3, 1, &mut rng)?;
    let x = Tensor::new(vec![2, 4], vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.8, 1.1, -0.6])?;
    let labels = [0, 2];

    let mut tape = Tape::new();
    let p = net.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let logits = net.forward_on(&mut tape, &p, xv)?;
    let ce = cross_entropy_on(&mut tape, logits, &labels)?;
    println!("loss {:.6} over {} tape nodes", tape.value(ce).item()?, tape.len());
    let grads = tape.gradients(ce, &p)?;

    let h = 1e-5;
    let nudged = |delta: f64| {
        let mut params = net.params().to_vec();
        let mut d = params[0].data().to_vec();
        d[0] += delta;
        params[0] = Tensor::new(params[0].shape().to_vec(), d).unwrap();
        net.with_params(params).unwrap()
    };
    let numeric = (loss(&nudged(h), &x, &labels) - loss(&nudged(-h), &x, &labels)) / (2.0 * h);
    println!("dL/dW[0] autodiff {:.9}  finite difference {:.9}", grads[0].data()[0], numeric);
    Ok(())
}
