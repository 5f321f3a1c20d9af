//! Reverse-mode gradients of a small softmax regression, checked against a
//! central difference.

use higfa::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(x: &Tensor, w: &Tensor, onehot: &Tensor) -> Result<f64, Box<dyn std::error::Error>> {
    let tape = Tape::new();
    let l = tape
        .constant(x.clone())
        .matmul(tape.var(w.clone()))?
        .log_softmax()?
        .mul(tape.constant(onehot.clone()))?
        .sum()?
        .scale(-1.0)?;
    let v = l.value().item().unwrap_or(f64::NAN);
    Ok(v)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 3], 0.5, &mut rng);
    let onehot = Tensor::new(
        &[5, 3],
        vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 0., 0., 0., 1., 0.],
    )?;

    let tape = Tape::new();
    let wv = tape.var(w.clone());
    let l = tape
        .constant(x.clone())
        .matmul(wv)?
        .log_softmax()?
        .mul(tape.constant(onehot.clone()))?
        .sum()?
        .scale(-1.0)?;
    let grads = tape.backward(l)?;
    let g = grads.get(wv).expect("w is tracked");

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let mut up = w.clone();
        up.data_mut()[i] += h;
        let mut dn = w.clone();
        dn.data_mut()[i] -= h;
        let fd = (loss(&x, &up, &onehot)? - loss(&x, &dn, &onehot)?) / (2.0 * h);
        worst = worst.max((g.data()[i] - fd).abs());
    }
    println!("loss {:.6}", l.value().item().unwrap_or(f64::NAN));
    println!("dL/dW {:?}", g.shape());
    println!("max |autodiff - finite difference| = {worst:.2e}");
    Ok(())
}
