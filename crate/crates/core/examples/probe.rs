use hmdc_core::condense::run_condensation;
use hmdc_core::config::{CondenseConfig, ModelSpecConfig};
use hmdc_core::data::{load_dataset, DatasetSpec, Split};
use std::time::Instant;

fn acceptance_cfg(gbm: bool, md: bool) -> CondenseConfig {
    let mut cfg = CondenseConfig::for_dataset("mnist");
    cfg.ipc = 1;
    cfg.iterations = 1;
    cfg.inner_loops = 20;
    cfg.batch_size = 64;
    cfg.enable_gbm = gbm;
    cfg.enable_md = md;
    cfg.seed = 0;
    cfg.model1 = ModelSpecConfig::Convnet { width: 24, depth: 3 };
    cfg.model2 = ModelSpecConfig::Tinyvit { patch: 7, dim: 32, depth: 4, heads: 4 };
    cfg
}

fn main() {
    let spec = DatasetSpec::for_name("mnist").unwrap();
    let col = load_dataset(&spec, Split::Train, std::path::Path::new("assets")).unwrap();

    for gbm in [false, true] {
        let t = Instant::now();
        let (_, records) = run_condensation(acceptance_cfg(gbm, true), col.clone(), |_| Ok(())).unwrap();
        let recs: Vec<_> = records.iter().filter(|r| r.step % 10 == 0).collect();
        println!("gbm={gbm}: {} records, {:.0}s", recs.len(), t.elapsed().as_secs_f64());
        for r in &recs {
            let (g1, g2, g3) = if gbm {
                (r.g1_max * r.s1, r.g2_max * r.s2, r.g3_max * r.s3)
            } else {
                (r.g1_max, r.g2_max, r.g3_max)
            };
            let mx = g1.max(g2).max(g3);
            let mn = g1.min(g2).min(g3);
            println!(
                "  step {:>3}: g=({:.2e}, {:.2e}, {:.2e}) ratio {:.1}",
                r.step, g1, g2, g3, if mn > 0.0 { mx / mn } else { f64::INFINITY }
            );
        }
    }
}
