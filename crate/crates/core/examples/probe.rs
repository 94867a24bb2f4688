// Scratch calibration probe (not part of the test suite).

use simcount_core::model::ModelConfig;
use simcount_core::synthetic::{category_spec, generate_task};
use simcount_core::trainer::{train, AlphaMode, TrainConfig};
use std::time::Instant;

fn main() {
    let task = generate_task(&category_spec(2), (8, 12), (64, 64), 42, None).unwrap();
    println!("task count = {}", task.gt_count());

    for lr in [3e-3, 1e-2, 3e-2] {
        let cfg = ModelConfig::bmnet();
        let tcfg = TrainConfig {
            lr,
            weight_decay: 1e-4,
            epochs: 500,
            batch_size: 1,
            seed: 7,
            alpha: AlphaMode::Auto,
            n_exemplars: 3,
            decay_all_params: false,
        };
        let start = Instant::now();
        let result = train(&cfg, std::slice::from_ref(&task), &tcfg).unwrap();
        let elapsed = start.elapsed();
        let first = result.history.first().unwrap().counting_loss;
        let last = result.history.last().unwrap().counting_loss;
        println!(
            "lr {lr}: init {first:.6} final {last:.6} ratio {:.1}x in {elapsed:?}",
            first / last,
        );
    }
}
