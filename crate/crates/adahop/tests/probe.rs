//! Temporary measurement probe; deleted before finishing.

use adahop::analysis::{sweep_pairs, SweepConfig};
use adahop::hadamard::HadamardConfig;
use adahop::strategy::{EngineConfig, Level};

#[test]
#[ignore]
fn probe_sweep_configs() {
    for count in [2usize, 3] {
        for seeds in [
            vec![1u64, 2, 3, 4, 5],
            vec![6, 7, 8, 9, 10],
            vec![11, 12, 13, 14, 15],
            vec![16, 17, 18, 19, 20],
        ] {
            let cfg = SweepConfig {
                dims: (256, 256, 256),
                seeds: seeds.clone(),
                target_kurtosis: Some(225.95),
                outlier_count: count,
                outlier_scale: 1.0,
                level: Level::Lv1,
                engine: EngineConfig {
                    hadamard: HadamardConfig::new(32).unwrap(),
                    ..EngineConfig::default()
                },
            };
            let results = sweep_pairs(&cfg).unwrap();
            print!("count {count} seeds {:?}: ", seeds);
            for r in &results {
                let oe_ok = r.per_seed.iter().all(|s| s.oe < s.iht);
                print!("{}:{:.1}%({}) ", r.pair, r.improvement_iht, if oe_ok { "y" } else { "n" });
            }
            println!();
        }
    }
}
