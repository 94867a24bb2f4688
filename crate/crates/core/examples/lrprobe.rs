use simcount_core::losses::counting_loss;
use simcount_core::model::{collect_gradients, forward, prepare_task, ModelConfig, ModelParams};
use simcount_core::synthetic::{category_spec, generate_task};
use simcount_core::tensor::Tape;

fn main() {
    let task = generate_task(&category_spec(2), (8, 14), (32, 32), 2, None).unwrap();
    let cfg = ModelConfig::bmnet();
    let params = ModelParams::init(&cfg).unwrap();
    let inputs = prepare_task(&task, 3, &cfg).unwrap();
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let out = forward(&mut tape, &binding, &cfg, &inputs).unwrap();
    let d = tape.data(out.density);
    println!("density: min {:.5} max {:.5} mass {:.4}", d.iter().cloned().fold(f64::INFINITY, f64::min), d.iter().cloned().fold(f64::NEG_INFINITY, f64::max), d.iter().sum::<f64>());
    let gt = tape.constant(vec![inputs.h, inputs.w], inputs.gt_density.clone()).unwrap();
    let loss = counting_loss(&mut tape, out.density, gt).unwrap();
    println!("loss {:.5}", tape.data(loss)[0]);
    tape.backward(loss).unwrap();
    let grads = collect_gradients(&tape, &binding);
    for (p, g) in params.iter().zip(&grads) {
        let norm: f64 = g.as_ref().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).unwrap_or(-1.0);
        println!("{:32} grad_norm {norm:.6}", p.name);
    }
}
