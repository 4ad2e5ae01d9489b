//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Contract criteria (1-5, 9) abort the run when they fail. Criteria that
//! measure training outcomes (6-8, 10) report honestly but only abort under
//! `ACCEPTANCE_STRICT=1`, since their targets depend on model scale.

use std::time::{Duration, Instant};

use bevworld_core::autograd::{rel_err, Graph};
use bevworld_core::geometry_opt::{cosine_loss, gram_loss, gram_matrices, gram_values, GramPooling, EXTRACTOR_PREFIX};
use bevworld_core::language_core::language_loss;
use bevworld_core::metrics_eval::{chamfer, rouge_l, Roi};
use bevworld_core::model::{Sample, WorldModel};
use bevworld_core::render::{composite, composite_depths, depth_from_sdf, PointCloud};
use bevworld_core::scene_synth::generate_dataset;
use bevworld_core::trainer::{evaluate, split_samples, RunConfig, Split, Trainer, Variant};
use bevworld_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [7, 8, 9];

struct Outcome {
    id: u8,
    pass: bool,
    contract: bool,
    detail: String,
}

fn report(id: u8, contract: bool, pass: bool, detail: String, took: Duration) -> Outcome {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2}: {tag}  {detail}  [{took:.1?}]");
    Outcome { id, pass, contract, detail }
}

// ---- 1: gradients against central differences -----------------------------

fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let o = p[i];
            p[i] = o + h;
            let up = f(&p);
            p[i] = o - h;
            let down = f(&p);
            p[i] = o;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, scale.max(1e-8))).fold(0.0, f64::max)
}

/// Scalar loss of a single leaf and its analytic gradient.
fn leaf_grad(x: &Tensor, build: &dyn Fn(&mut Graph, bevworld_core::autograd::Var) -> bevworld_core::autograd::Var) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let l = build(&mut g, v);
    let grads = g.backward(l);
    let d = grads.get(v).map_or_else(|| vec![0.0; x.numel()], |t| t.data().to_vec());
    (g.value(l).item(), d)
}

fn leaf_value(shape: &[usize], data: &[f64], build: &dyn Fn(&mut Graph, bevworld_core::autograd::Var) -> bevworld_core::autograd::Var) -> f64 {
    let mut g = Graph::new();
    let v = g.leaf(Tensor::from_vec(shape, data.to_vec()));
    let l = build(&mut g, v);
    g.value(l).item()
}

fn gradient_check(rng: &mut ChaCha8Rng) -> (bool, String) {
    let instances = 25;
    let mut worst = [0.0f64; 4];

    // Expected depth through the compositing op, oracle is the plain value path.
    for _ in 0..instances {
        let n = rng.gen_range(4..16);
        let mut s = Vec::with_capacity(n);
        let mut cur = rng.gen_range(0.5..1.5);
        for _ in 0..n {
            s.push(cur);
            cur -= rng.gen_range(0.05..0.4);
        }
        let depths: Vec<f64> = (1..=n).map(|i| i as f64 * 0.7 + rng.gen_range(0.0..0.3)).collect();
        let tau: f64 = rng.gen_range(2.0..8.0);
        let rc = std::rc::Rc::new(depths.clone());
        let mut g = Graph::new();
        let sv = g.leaf(Tensor::from_vec(&[n, 1], s.clone()));
        let lt = g.leaf(Tensor::from_vec(&[1], vec![tau.ln()]));
        let d = composite_depths(&mut g, sv, lt, rc, n);
        let grads = g.backward(d);
        let mut analytic = grads.get(sv).unwrap().data().to_vec();
        analytic.push(grads.get(lt).unwrap().data()[0]);
        let mut x = s.clone();
        x.push(tau.ln());
        let numeric = fd(|x| depth_from_sdf(&x[..n], &depths, x[n].exp()).0, &x);
        worst[0] = worst[0].max(vec_rel_err(&analytic, &numeric));
    }

    for _ in 0..instances {
        let (n, c) = (rng.gen_range(2..8), rng.gen_range(2..6));
        let pred = Tensor::randn(&[n, c], 1.0, rng);
        let target = Tensor::randn(&[n, c], 1.0, rng);
        let build = |g: &mut Graph, v| cosine_loss(g, v, &target);
        let (_, analytic) = leaf_grad(&pred, &build);
        let numeric = fd(|x| leaf_value(&[n, c], x, &build), pred.data());
        worst[1] = worst[1].max(vec_rel_err(&analytic, &numeric));
    }

    for _ in 0..instances {
        let (w, h, z, c) = (rng.gen_range(2..4), rng.gen_range(2..4), rng.gen_range(1..3), rng.gen_range(2..4));
        let pool = GramPooling::new(w, h, z);
        let pred = Tensor::randn(&[w * h * z, c], 1.0, rng);
        let target = gram_values(&Tensor::randn(&[w * h * z, c], 1.0, rng), &pool);
        let build = |g: &mut Graph, v| {
            let m = gram_matrices(g, v, &pool);
            gram_loss(g, m, &target)
        };
        let (_, analytic) = leaf_grad(&pred, &build);
        let numeric = fd(|x| leaf_value(&[w * h * z, c], x, &build), pred.data());
        worst[2] = worst[2].max(vec_rel_err(&analytic, &numeric));
    }

    for _ in 0..instances {
        let (rows, vocab) = (rng.gen_range(2..8), rng.gen_range(3..12));
        let logits = Tensor::randn(&[rows, vocab], 2.0, rng);
        let mut targets: Vec<Option<usize>> =
            (0..rows).map(|_| rng.gen_bool(0.7).then(|| rng.gen_range(0..vocab))).collect();
        targets[0] = Some(rng.gen_range(0..vocab));
        let build = |g: &mut Graph, v| language_loss(g, v, &targets).unwrap();
        let (_, analytic) = leaf_grad(&logits, &build);
        let numeric = fd(|x| leaf_value(&[rows, vocab], x, &build), logits.data());
        worst[3] = worst[3].max(vec_rel_err(&analytic, &numeric));
    }

    let pass = worst.iter().all(|&e| e < 1e-4);
    (
        pass,
        format!(
            "max rel err over {instances} instances: depth {:.1e}, cos {:.1e}, gram {:.1e}, lang {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---- 2: compositing ----------------------------------------------------------

fn naive_composite(alpha: &[f64], depths: &[f64]) -> (f64, Vec<f64>) {
    let w: Vec<f64> = (0..alpha.len())
        .map(|i| alpha[..i].iter().fold(1.0, |t, a| t * (1.0 - a)) * alpha[i])
        .collect();
    let d = w.iter().zip(depths).fold(0.0, |acc, (wi, di)| acc + wi * di);
    (d, w)
}

fn compositing_check(rng: &mut ChaCha8Rng) -> (bool, String) {
    let (mut bad_bounds, mut mismatches, mut compared) = (0, 0, 0);
    for k in 0..10_000 {
        let n = if k % 2 == 0 { rng.gen_range(1..=32) } else { rng.gen_range(33..=128) };
        let alpha: Vec<f64> = (0..n)
            .map(|_| match rng.gen_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen::<f64>(),
            })
            .collect();
        let depths: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.25).collect();
        let (d, w) = composite(&alpha, &depths);
        if w.iter().any(|&x| x < 0.0) || w.iter().sum::<f64>() > 1.0 + 1e-12 {
            bad_bounds += 1;
        }
        if n <= 32 {
            compared += 1;
            let (nd, nw) = naive_composite(&alpha, &depths);
            if nd != d || nw != w {
                mismatches += 1;
            }
        }
    }
    (
        bad_bounds == 0 && mismatches == 0,
        format!("10000 sequences: {bad_bounds} bound violations, {mismatches}/{compared} oracle mismatches"),
    )
}

// ---- 3: Chamfer -----------------------------------------------------------------

fn brute_chamfer(p: &[[f64; 3]], q: &[[f64; 3]]) -> f64 {
    let directed = |a: &[[f64; 3]], b: &[[f64; 3]]| {
        a.iter()
            .map(|x| {
                b.iter()
                    .map(|y| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / a.len() as f64
    };
    directed(p, q) + directed(q, p)
}

fn random_cloud(rng: &mut ChaCha8Rng) -> PointCloud {
    let n = rng.gen_range(1..=500);
    let spread = [0.01, 1.0, 30.0, 200.0][rng.gen_range(0..4)];
    let centre: [f64; 3] = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-3.0..3.0)];
    PointCloud {
        points: (0..n)
            .map(|_| std::array::from_fn(|k| centre[k] + rng.gen_range(-spread..spread)))
            .collect(),
    }
}

fn chamfer_check(rng: &mut ChaCha8Rng) -> (bool, String) {
    let (mut worst, mut self_nonzero, mut asym) = (0.0f64, 0, 0);
    for _ in 0..200 {
        let (p, q) = (random_cloud(rng), random_cloud(rng));
        let fast = chamfer(&p, &q).unwrap();
        worst = worst.max((fast - brute_chamfer(&p.points, &q.points)).abs());
        if chamfer(&p, &p).unwrap() != 0.0 {
            self_nonzero += 1;
        }
        if chamfer(&q, &p).unwrap() != fast {
            asym += 1;
        }
    }
    (
        worst <= 1e-9 && self_nonzero == 0 && asym == 0,
        format!("200 pairs: max |fast - brute| {worst:.1e}, CD(P,P)!=0 x{self_nonzero}, asymmetric x{asym}"),
    )
}

// ---- 4: causality and identity at init -------------------------------------

fn causality_identity_check(model: &WorldModel, samples: &[Sample], rng: &mut ChaCha8Rng) -> (bool, String) {
    let store = &model.store;
    let mut moved = 0;
    let mut worst_identity = 0.0f64;
    for s in samples.iter().take(6) {
        let qa = &s.qa[0];
        let (text, _) = bevworld_core::language_core::build_text(&model.vocab, &qa.instruction, Some(&qa.answer));
        let logits_for = |q: Option<&Tensor>| {
            let mut g = Graph::new();
            let enc = model.encode(&mut g, &s.frames[0].pixels);
            let built = model.queries.build(&mut g, store, enc.rows, model.cfg.compressed_w(), &s.motions).unwrap();
            let qv = match q {
                Some(t) => g.constant(t.clone()),
                None => built.projected,
            };
            let shape = g.value(built.projected).shape().to_vec();
            let out = model.lm.forward(&mut g, store, enc.tokens, &text, Some(qv)).unwrap();
            (g.value(out.logits).clone(), shape)
        };
        let (base, qshape) = logits_for(None);
        for _ in 0..4 {
            let q = Tensor::randn(&qshape, 5.0, rng);
            if logits_for(Some(&q)).0 != base {
                moved += 1;
            }
        }
        let mut g = Graph::new();
        let out = model.joint_forward(&mut g, &s.frames[0], &s.motions, qa).unwrap();
        let current = g.value(out.grids[0]).clone();
        for &f in &out.grids[1..] {
            worst_identity = worst_identity.max(g.value(f).max_abs_diff(&current));
        }
    }
    (
        moved == 0 && worst_identity < 1e-10,
        format!("text logits moved by query perturbation x{moved}; future-vs-current BEV max dev {worst_identity:.1e}"),
    )
}

// ---- 5: frozen extractor ----------------------------------------------------------

fn extractor_snapshot(t: &Trainer) -> Vec<Tensor> {
    t.model
        .store
        .iter()
        .filter(|(_, e)| e.name.starts_with(EXTRACTOR_PREFIX))
        .map(|(_, e)| e.value.clone())
        .collect()
}

fn frozen_extractor_check(base: &Trainer, split: &Split) -> (bool, String) {
    let mut t = base.clone();
    let epoch = split.train.len().div_ceil(t.run.batch);
    t.run.steps[4] = epoch;
    let before = extractor_snapshot(&t);
    let mut worst = 0.0f64;
    let mut steps = 0;
    t.train_stage(3, &split.train, &mut |row| {
        worst = worst.max(row.extractor_grad);
        steps += 1;
    })
    .unwrap();
    let unchanged = before == extractor_snapshot(&t);
    (
        worst == 0.0 && unchanged && steps == epoch,
        format!("{steps} stage-3 steps (one epoch): max extractor grad norm {worst:e}, weights unchanged {unchanged}"),
    )
}

// ---- 6-9: training runs ---------------------------------------------------------

struct SeedRun {
    base: Trainer,
    split: Split,
    stage12: Duration,
    /// 3 s CD per variant at stage-3 end, in `Variant::ALL` order.
    end: Vec<f64>,
    full_start: f64,
    full_wall: Duration,
    lambdas: Vec<Vec<f64>>,
}

fn run_seed(seed: u64) -> SeedRun {
    let mut run = RunConfig::ci();
    run.seed = seed;
    run.data_seed = 7;
    run.sequences = 200;
    let ds = generate_dataset(&run.scene, run.data_seed, run.sequences, run.model.extent).unwrap();
    let model = WorldModel::new(&run.model, run.scene.dt_seconds, run.seed).unwrap();
    let split = split_samples(&ds, &model, &run).unwrap();
    let roi = Roi::scaled(run.model.extent);
    let digest = run.digest();
    let t0 = Instant::now();
    let mut base = Trainer::new(model, run);
    base.train_stage(1, &split.train, &mut |_| {}).unwrap();
    base.train_stage(2, &split.train, &mut |_| {}).unwrap();
    let stage12 = t0.elapsed();
    let mut end = Vec::new();
    let (mut full_start, mut full_wall, mut lambdas) = (f64::NAN, Duration::ZERO, Vec::new());
    for v in Variant::ALL {
        let mut t = base.clone();
        v.apply(&mut t);
        let start = Instant::now();
        if v == Variant::Full {
            full_start = evaluate(&t.model, 3, &split.eval, &roi, &digest).unwrap().chamfer[3];
        }
        let mut rows = Vec::new();
        t.train_stage(3, &split.train, &mut |r| rows.push(r.lambda.clone())).unwrap();
        let cd = evaluate(&t.model, 3, &split.eval, &roi, &digest).unwrap().chamfer[3];
        if v == Variant::Full {
            full_wall = start.elapsed();
            lambdas = rows;
        }
        println!("  seed {seed} {:<12} 3s CD {cd:.4}", v.name());
        end.push(cd);
    }
    SeedRun { base, split, stage12, end, full_start, full_wall, lambdas }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() {
    // Test harness flags (e.g. --nocapture, filters) are accepted and ignored.
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    let t = Instant::now();
    let (pass, detail) = gradient_check(&mut rng);
    let took = t.elapsed();
    out.push(report(1, true, pass && took < Duration::from_secs(60), detail, took));

    let t = Instant::now();
    let (pass, detail) = compositing_check(&mut rng);
    out.push(report(2, true, pass, detail, t.elapsed()));

    let t = Instant::now();
    let (pass, detail) = chamfer_check(&mut rng);
    let took = t.elapsed();
    out.push(report(3, true, pass && took < Duration::from_secs(30), detail, took));

    let t = Instant::now();
    let mut run = RunConfig::ci();
    run.sequences = 4;
    let ds = generate_dataset(&run.scene, 7, run.sequences, run.model.extent).unwrap();
    let fresh = WorldModel::new(&run.model, run.scene.dt_seconds, run.seed).unwrap();
    let samples = bevworld_core::model::prepare_samples(&ds, &fresh, 0..run.sequences).unwrap();
    let (pass, detail) = causality_identity_check(&fresh, &samples, &mut rng);
    out.push(report(4, true, pass, detail, t.elapsed()));

    println!("training seeds {SEEDS:?} on the ci preset (200 sequences, data seed 7)");
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();

    let t = Instant::now();
    let (pass, detail) = frozen_extractor_check(&runs[0].base, &runs[0].split);
    out.push(report(5, true, pass, detail, t.elapsed()));

    let arm = |v: Variant| median(runs.iter().map(|r| r.end[Variant::ALL.iter().position(|&a| a == v).unwrap()]).collect());
    let full = arm(Variant::Full);
    let start = median(runs.iter().map(|r| r.full_start).collect());
    let wall = runs.iter().map(|r| r.stage12 + r.full_wall).max().unwrap();
    let drop = 1.0 - full / start;
    out.push(report(
        6,
        false,
        drop >= 0.4 && wall < Duration::from_secs(1800),
        format!("median 3s CD {start:.4} -> {full:.4} (drop {:.1}%), slowest stage 1-3 run {wall:.1?}", drop * 100.0),
        wall,
    ));

    let (ro, rc) = (arm(Variant::RenderOnly), arm(Variant::RenderCos));
    out.push(report(
        7,
        false,
        ro > rc && ro > full,
        format!("median 3s CD render-only {ro:.4}, render+cos {rc:.4}, render+cos+gram {full:.4}"),
        Duration::ZERO,
    ));

    let (nl, ne) = (arm(Variant::NoLink), arm(Variant::NoEgoModulation));
    out.push(report(
        8,
        false,
        nl >= 1.3 * full && ne > full,
        format!("median 3s CD no-link {nl:.4} ({:.2}x full), no-em {ne:.4}, full {full:.4}", nl / full),
        Duration::ZERO,
    ));

    let expected = [1.0, 1.5, 2.0, 2.5];
    let logged: usize = runs.iter().map(|r| r.lambdas.len()).sum();
    let exact = logged > 0 && runs.iter().flat_map(|r| &r.lambdas).all(|l| l.as_slice() == expected);
    out.push(report(
        9,
        true,
        exact,
        format!("{logged} logged stage-3 rows, weights {:?}", runs[0].lambdas.first()),
        Duration::ZERO,
    ));

    let t = Instant::now();
    let r0 = &runs[0];
    let rep = evaluate(&r0.base.model, 2, &r0.split.eval, &Roi::scaled(r0.base.run.model.extent), "").unwrap();
    let rouge_cases = [
        ("the car is ahead", "the car is ahead", 1.0),
        ("", "two cars", 0.0),
        ("a b c d", "a c", 2.0 / 3.0),
        ("left right", "ahead behind", 0.0),
        ("one car ahead", "car ahead", 0.8),
    ];
    let rouge_ok = rouge_cases.iter().all(|&(c, r, want)| rouge_l(c, r) == want);
    out.push(report(
        10,
        false,
        rep.answer_accuracy >= 0.9 && rouge_ok,
        format!(
            "held-out exact accuracy {:.3} over {} questions, ROUGE-L unit cases {}",
            rep.answer_accuracy,
            rep.questions,
            if rouge_ok { "exact" } else { "MISMATCH" }
        ),
        t.elapsed(),
    ));

    let passed = out.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass", out.len());
    let blocking: Vec<&Outcome> = out.iter().filter(|o| !o.pass && (o.contract || strict)).collect();
    for o in &blocking {
        eprintln!("criterion {} failed: {}", o.id, o.detail);
    }
    if !rouge_ok || !blocking.is_empty() {
        std::process::exit(1);
    }
}
