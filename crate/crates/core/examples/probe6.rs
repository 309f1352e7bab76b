use hmdc_core::condense::run_condensation;
use hmdc_core::config::{CondenseConfig, ModelSpecConfig};
use hmdc_core::data::{load_dataset, DatasetSpec, Split};
use hmdc_core::eval::{evaluate_synthetic, random_baseline, EvalConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(5);
    let inner: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(60);

    let spec = DatasetSpec::for_name("mnist").unwrap();
    let train = load_dataset(&spec, Split::Train, std::path::Path::new("assets")).unwrap();
    let test = load_dataset(&spec, Split::Test, std::path::Path::new("assets")).unwrap();

    let mut cfg = CondenseConfig::for_dataset("mnist");
    cfg.ipc = 10;
    cfg.iterations = iters;
    cfg.inner_loops = inner;
    cfg.batch_size = 64;
    cfg.seed = 0;
    cfg.model1 = ModelSpecConfig::Convnet { width: 24, depth: 3 };
    cfg.model2 = ModelSpecConfig::Tinyvit { patch: 7, dim: 32, depth: 4, heads: 4 };

    let t = Instant::now();
    let (state, _) = run_condensation(cfg, train.clone(), |_| Ok(())).unwrap();
    println!("condensation {iters}x{inner}: {:.0}s", t.elapsed().as_secs_f64());

    for arch in [
        ModelSpecConfig::Convnet { width: 24, depth: 3 },
        ModelSpecConfig::Tinyvit { patch: 7, dim: 32, depth: 4, heads: 4 },
    ] {
        let mut ecfg = EvalConfig::for_model(arch.clone());
        ecfg.epochs = epochs;
        ecfg.seeds = vec![0];
        let t = Instant::now();
        let hmdc = evaluate_synthetic(&state.synthetic, &test, &ecfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let (base, _) = random_baseline(&train, &test, 10, &ecfg, &mut rng).unwrap();
        println!(
            "{}: hmdc {:.4} vs baseline {:.4} (delta {:+.4}) [{:.0}s]",
            hmdc.arch,
            hmdc.mean,
            base.mean,
            hmdc.mean - base.mean,
            t.elapsed().as_secs_f64()
        );
    }
}
