//! Stage-3 ablation arms branched from one stage-2 model.
//!
//! `cargo run --release -p bevworld-core --example ablation -- [seed] [arms=a,b] [key=value ...]`

use std::time::Instant;

use bevworld_core::metrics_eval::Roi;
use bevworld_core::model::WorldModel;
use bevworld_core::scene_synth::generate_dataset;
use bevworld_core::trainer::{evaluate, split_samples, RunConfig, Trainer, Variant};

fn main() -> bevworld_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut run = RunConfig::ci();
    if let Some(s) = args.get(1) {
        run.seed = s.parse().expect("seed");
    }
    let mut arms = Variant::ALL.to_vec();
    for kv in args.iter().skip(2) {
        let (k, v) = kv.split_once('=').expect("key=value");
        if k == "arms" {
            arms = Variant::ALL.into_iter().filter(|a| v.split(',').any(|n| n == a.name())).collect();
        } else {
            run.apply(k, v)?;
        }
    }
    run.validate()?;
    let t0 = Instant::now();
    let ds = generate_dataset(&run.scene, run.data_seed, run.sequences, run.model.extent)?;
    let model = WorldModel::new(&run.model, run.scene.dt_seconds, run.seed)?;
    let split = split_samples(&ds, &model, &run)?;
    let roi = Roi::scaled(run.model.extent);
    let digest = run.digest();
    let mut base = Trainer::new(model, run);
    base.train_stage(1, &split.train, &mut |_| {})?;
    base.train_stage(2, &split.train, &mut |_| {})?;
    println!("stages 1-2 in {:.1?}", t0.elapsed());
    for v in arms {
        let start = Instant::now();
        let mut t = base.clone();
        v.apply(&mut t);
        let before = evaluate(&t.model, 3, &split.eval, &roi, &digest)?.chamfer;
        t.train_stage(3, &split.train, &mut |_| {})?;
        let after = evaluate(&t.model, 3, &split.eval, &roi, &digest)?.chamfer;
        println!(
            "{:<12} start 3s {:.4}  end {:?}  ({:.1?})",
            v.name(),
            before[3],
            after.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>(),
            start.elapsed()
        );
    }
    Ok(())
}
