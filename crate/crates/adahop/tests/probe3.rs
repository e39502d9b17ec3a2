//! Temporary toy-trainer probe; deleted before finishing.

use std::collections::BTreeMap;

use adahop::analysis::track_stability;
use adahop::pattern::{calibrate, DetectionConfig};
use adahop::toytrain::{record_streams, train_all, Backend, ToyModelConfig};

#[test]
#[ignore]
fn probe_train_gaps() {
    for seed in 1u64..=5 {
        let cfg = ToyModelConfig { seed, ..ToyModelConfig::default() };
        let report = train_all(&cfg).unwrap();
        print!("seed {seed}: ");
        for g in &report.gaps {
            print!(
                "{}: final {:?} gap {:?}  ",
                g.backend,
                g.final_loss.map(|f| format!("{f:.4}")),
                g.gap.map(|f| format!("{f:.4}")),
            );
        }
        println!();
        let gap = |b: Backend| {
            report
                .gaps
                .iter()
                .find(|g| g.backend == b)
                .and_then(|g| g.gap)
                .unwrap_or(f64::INFINITY)
        };
        let (naive, iht, lv1, lv2) = (
            gap(Backend::NaiveMxfp4),
            gap(Backend::UniformIht),
            gap(Backend::AdaHopLv1),
            gap(Backend::AdaHopLv2),
        );
        println!(
            "  ordering lv1<=iht<=naive: {}  lv1/naive: {:.3}  lv2/naive: {:.3}",
            lv1 <= iht && iht <= naive,
            lv1 / naive,
            lv2 / naive
        );
        for plan in &report.plans {
            let pairs: Vec<String> = plan
                .assignments
                .iter()
                .map(|a| format!("{}.{}={}→{:?}", a.layer, a.path, a.pair, a.strategy))
                .collect();
            println!("  plan {:?}: {}", plan.level, pairs.join(" "));
        }
    }
}

#[test]
#[ignore]
fn probe_stream_stability() {
    for seed in 1u64..=5 {
        let cfg = ToyModelConfig { seed, steps_train: 40, ..ToyModelConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        record_streams(&cfg, dir.path()).unwrap();

        // group files by tensor id
        let mut streams: BTreeMap<String, Vec<adahop::DenseMatrix>> = BTreeMap::new();
        let mut names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for path in names {
            let name = path.file_name().unwrap().to_str().unwrap().to_string();
            let id = name.split("_step").next().unwrap().to_string();
            streams.entry(id).or_default().push(adahop::io::read_matrix(&path).unwrap());
        }

        let det = DetectionConfig::default();
        let report = track_stability(&streams, &det).unwrap();
        print!("seed {seed}: ");
        for t in &report.tensors {
            let tail: BTreeMap<String, Vec<adahop::DenseMatrix>> = BTreeMap::new();
            drop(tail);
            let after10: Vec<_> = t.per_step[10..].to_vec();
            let modal_tail = adahop::pattern::majority_vote(&after10);
            let stab_tail =
                after10.iter().filter(|&&p| p == modal_tail).count() as f64 / after10.len() as f64;
            print!("{}={}:{:.2} ", t.tensor_id, t.modal, stab_tail);
        }
        println!();
        // window agreement 0..30 vs 10..40
        for (id, stream) in &streams {
            let w1 = calibrate(id, &stream[0..30], &det).unwrap().final_pattern;
            let w2 = calibrate(id, &stream[10..40], &det).unwrap().final_pattern;
            if w1 != w2 {
                println!("  WINDOW MISMATCH {id}: {w1} vs {w2}");
            }
        }
    }
}
