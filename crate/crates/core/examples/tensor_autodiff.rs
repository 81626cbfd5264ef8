//! Fit a tiny two-layer regression with the tape and Adam, then check the
//! tape's gradient of the same loss against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sharp::tensor::{grad_check, AdamConfig, AdamState, Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Tensor = Tensor::randn(&[64, 4], 1.0, &mut rng);
    let true_w: Tensor = Tensor::randn(&[4, 1], 1.0, &mut rng);
    let y = x.matmul(&true_w)?;

    let mut params: Vec<Tensor> = vec![Tensor::randn(&[4, 8], 0.5, &mut rng), Tensor::randn(&[8, 1], 0.5, &mut rng)];
    let mut adam = AdamState::new(AdamConfig::with_lr(1e-2), &params);
    for step in 0..=300 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let w1 = tape.param(params[0].clone());
        let w2 = tape.param(params[1].clone());
        let h = tape.matmul(xv, w1)?;
        let h = tape.silu(h);
        let pred = tape.matmul(h, w2)?;
        let loss = tape.mse(pred, yv)?;
        if step % 100 == 0 {
            println!("step {step:>3}  mse {:.5}", tape.value(loss).item());
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = [w1, w2].iter().map(|&v| grads.get_or_zeros(v, tape.value(v))).collect();
        adam.step(&mut params, &g)?;
    }

    let x64: Tensor<f64> = x.cast();
    let report = grad_check(
        |t, v| {
            let xv = t.constant(x64.clone());
            let h = t.matmul(xv, v[0])?;
            let h = t.silu(h);
            let p = t.matmul(h, v[1])?;
            Ok(t.sum_squares(p))
        },
        &[params[0].cast(), params[1].cast()],
        1e-4,
    )?;
    println!(
        "gradient check: {} entries, max relative error {:.2e}",
        report.checked, report.max_rel_error
    );
    Ok(())
}
