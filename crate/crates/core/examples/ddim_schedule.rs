//! Linear-β schedule, forward noising and a 30-step DDIM pass driven by the
//! true noise, which lands back on the clean signal.

use higfa::diffusion::{ddim_step, DiffusionState, NoiseSchedule};
use higfa::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = NoiseSchedule::reference();
    println!("T = {}, {} inference steps", s.train_steps(), s.inference_steps());
    println!("first mapped timesteps {:?}", &s.step_map()[..5]);
    println!("ᾱ at t=0 {:.6}, t=999 {:.6}", s.alpha_bars()[0], s.alpha_bars()[999]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = Tensor::randn(&[1, 256], 1.0, &mut rng);
    let eps = Tensor::randn(&[1, 256], 1.0, &mut rng);
    let t0 = s.step_map()[0];
    let mut state = DiffusionState::new(s.q_sample(&x0, t0, &eps)?);
    while !state.is_done(&s) {
        state = ddim_step(&state, &eps, &s)?;
    }
    println!("max |x̂0 - x0| after DDIM = {:.2e}", state.x_t.max_abs_diff(&x0));
    Ok(())
}
