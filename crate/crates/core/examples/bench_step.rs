use hmdc_core::condense::CondenseState;
use hmdc_core::config::{CondenseConfig, ModelSpecConfig};
use hmdc_core::data::{load_dataset, DatasetSpec, Split};
use std::time::Instant;

fn main() {
    let spec = DatasetSpec::for_name("mnist").unwrap();
    let col = load_dataset(&spec, Split::Train, std::path::Path::new("assets")).unwrap();
    let mut cfg = CondenseConfig::for_dataset("mnist");
    cfg.ipc = 10;
    cfg.batch_size = 64;
    cfg.model1 = ModelSpecConfig::Convnet { width: 24, depth: 3 };
    cfg.model2 = ModelSpecConfig::Tinyvit { patch: 7, dim: 32, depth: 4, heads: 4 };
    let mut state: CondenseState<f32> = CondenseState::new(cfg, col).unwrap();
    // warmup
    state.image_update_step(0).unwrap();
    let t = Instant::now();
    let n = 10;
    for i in 0..n {
        state.image_update_step(i % 10).unwrap();
    }
    println!("image_update_step: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);
    let batch = state.sample_full_batch().unwrap();
    let t = Instant::now();
    for _ in 0..5 {
        state.model_update_step(&batch).unwrap();
    }
    println!("model_update_step: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / 5.0);
    let t = Instant::now();
    for _ in 0..5 {
        state.alignment_update_step(&batch).unwrap();
    }
    println!("alignment_update_step: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / 5.0);
}
