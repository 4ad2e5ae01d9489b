//! Full three-stage run on synthetic data with per-phase timing.
//!
//! `cargo run --release -p bevworld-core --example desk_run -- [ci|desk] [seed] [key=value ...]`

use std::time::Instant;

use bevworld_core::metrics_eval::Roi;
use bevworld_core::scene_synth::generate_dataset;
use bevworld_core::model::WorldModel;
use bevworld_core::trainer::{evaluate, split_samples, LogRow, Phase, RunConfig, Trainer, ANSWER_TOKENS};

fn main() -> bevworld_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut run = RunConfig::preset(args.get(1).map_or("ci", String::as_str))?;
    if let Some(s) = args.get(2) {
        run.seed = s.parse().expect("seed");
    }
    let mut last_stage = 3u8;
    for kv in args.iter().skip(3) {
        let (k, v) = kv.split_once('=').expect("key=value");
        if k == "stages" {
            last_stage = v.parse().expect("stage count");
        } else {
            run.apply(k, v)?;
        }
    }
    run.validate()?;
    let t0 = Instant::now();
    let ds = generate_dataset(&run.scene, run.data_seed, run.sequences, run.model.extent)?;
    let model = WorldModel::new(&run.model, run.scene.dt_seconds, run.seed)?;
    let split = split_samples(&ds, &model, &run)?;
    println!("data: {} train / {} eval samples in {:.1?}", split.train.len(), split.eval.len(), t0.elapsed());
    let roi = Roi::scaled(run.model.extent);
    let digest = run.digest();
    let mut t = Trainer::new(model, run);
    for stage in 1..=last_stage {
        if stage == 3 {
            let r = evaluate(&t.model, 3, &split.eval, &roi, &digest)?;
            println!("stage-3 start CD {:?}", r.chamfer);
        }
        for &phase in Phase::of_stage(stage) {
            let start = Instant::now();
            t.begin_phase(phase);
            let every = (t.run.steps[phase.index()] / 5).max(1);
            t.continue_phase(&split.train, &mut |r: &LogRow| {
                if r.step % every == 0 {
                    println!("  {}", r.csv());
                }
            })?;
            println!("phase {} done in {:.1?}", phase.name(), start.elapsed());
        }
        t.completed_stage = stage;
        let start = Instant::now();
        let r = evaluate(&t.model, stage, &split.eval, &roi, &digest)?;
        println!("after stage {stage} ({:.1?} eval):\n{}", start.elapsed(), r.to_table());
        if stage == 2 && std::env::var_os("PER_TEMPLATE").is_some() {
            per_template(&t, "eval", &split.eval)?;
            per_template(&t, "train", &split.train[..split.train.len().min(48)])?;
        }
    }
    println!("total {:.1?}", t0.elapsed());
    Ok(())
}

/// Exact-answer accuracy per question template, with a few misses shown.
fn per_template(t: &Trainer, label: &str, set: &[bevworld_core::model::Sample]) -> bevworld_core::Result<()> {
    let mut tally = std::collections::BTreeMap::<u8, (usize, usize)>::new();
    for s in set {
        for qa in &s.qa {
            let a = t.model.answer(&s.frames[0], &qa.instruction, ANSWER_TOKENS)?;
            let e = tally.entry(qa.template.code()).or_default();
            e.0 += usize::from(a == qa.answer);
            e.1 += 1;
            if a != qa.answer && e.1 < 6 {
                println!("    [{}] {} -> {a:?} want {:?}", qa.template.code(), qa.instruction, qa.answer);
            }
        }
    }
    println!("{label} per template {tally:?}");
    Ok(())
}
