//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass substrings as arguments to run a subset.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use mme_core::diagnostics::gradient_suite;
use mme_core::diff::gradcheck::DEFAULT_TOLERANCE;
use mme_core::diff::loss::cross_entropy;
use mme_core::diff::{load_checkpoint, save_checkpoint};
use mme_core::experts::*;
use mme_core::gate::{argmax, Gate, GateConfig, ImitationConfig};
use mme_core::mesh::{Mesh, Task};
use mme_core::metrics::{average_precision, edge_accuracy, ndcg_single};
use mme_core::moe::*;
use mme_core::rng::chacha;
use mme_core::sac::{SacAgent, SacConfig};
use mme_core::synth::{generate_classification_set, generate_segmentation_set};
use mme_core::walk::{extract_walks, walk_length, Walk};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- routing

const ROUTING_EPOCHS: usize = 30;
const ROUTING_SEEDS: [u64; 3] = [0, 1, 2];

fn routing_gate_config() -> GateConfig {
    GateConfig::new(3, 3).with_width(16, 4, 32)
}

fn routing_trainer(seed: u64) -> TrainerConfig {
    TrainerConfig { batch_size: 8, gate_lr: 3e-4, seed, ..TrainerConfig::default() }
}

struct RoutingRun {
    /// First epoch (1-based) at which the routing criterion held.
    first_epoch: Option<usize>,
    accuracy: f64,
    specialty_rates: Vec<f64>,
    ensemble_accuracy: f64,
    elapsed: Duration,
}

fn routing_criterion(ev: &Evaluation, test: &[&Mesh]) -> (bool, f64, Vec<f64>) {
    let acc = ev.metric("accuracy").unwrap_or(0.0);
    let rates = selection_rates(test, &ev.chosen, 3, 3);
    let diag: Vec<f64> = (0..3).map(|k| rates[k][k]).collect();
    (acc >= 0.95 && diag.iter().all(|&r| r >= 0.9), acc, diag)
}

/// Three oracles, each perfect on one class, on the 60-mesh set. With
/// `stop_early` training ends as soon as the criterion holds.
fn routing_run(seed: u64, pretrained: bool, stop_early: bool) -> mme_core::Result<RoutingRun> {
    let start = Instant::now();
    let ds = generate_classification_set(3, 20, seed)?;
    let train = ds.train_meshes();
    let test = ds.test_meshes();
    let experts = build_experts(&["oracle:0", "oracle:1", "oracle:2"], 3, DEFAULT_HIDDEN, seed)?;
    let gate = if pretrained {
        let imitation = ImitationConfig { epochs: 25, lr: 2e-3, batch_size: 8, walks: 8, seed };
        init_gate_from_experts(&routing_gate_config(), &experts, &train, &imitation, seed)?.0
    } else {
        Gate::new(routing_gate_config(), seed)?
    };
    let mut system = MoeSystem::new(gate, experts, Task::Classification)?;
    let mut agent = SacAgent::new(3, SacConfig::default(), seed)?;
    let mut first_epoch = None;
    train_run(&mut system, &train, &mut agent, &routing_trainer(seed), ROUTING_EPOCHS, |epoch, s| {
        let ev = evaluate(s, &test, 32, seed)?;
        let (ok, _, _) = routing_criterion(&ev, &test);
        if ok && first_epoch.is_none() {
            first_epoch = Some(epoch + 1);
        }
        Ok(ok && stop_early)
    })?;
    let ev = evaluate(&system, &test, 32, seed)?;
    let (_, accuracy, specialty_rates) = routing_criterion(&ev, &test);
    let ensemble_accuracy = evaluate_ensemble(&system, &test, seed)?.metric("accuracy").unwrap_or(0.0);
    Ok(RoutingRun { first_epoch, accuracy, specialty_rates, ensemble_accuracy, elapsed: start.elapsed() })
}

fn oracle_alone_accuracy() -> Vec<f64> {
    let tri = |i: usize| {
        Mesh::new(format!("mc{i}"), vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]])
            .unwrap()
            .with_class(i % 3)
    };
    let meshes: Vec<Mesh> = (0..30_000).map(tri).collect();
    (0..3)
        .map(|k| {
            let oracle = ScriptedOracle::new(3, k, 1.0, OffSpecialty::RandomOneHot, 7 + k as u64).unwrap();
            let hits = meshes
                .iter()
                .filter(|m| argmax(&oracle.predict(m).unwrap()) == m.class_label.unwrap())
                .count();
            hits as f64 / meshes.len() as f64
        })
        .collect()
}

fn check_routing(main: &RoutingRun) -> Outcome {
    let alone = oracle_alone_accuracy();
    let alone_ok = alone.iter().all(|a| (a - 5.0 / 9.0).abs() <= 0.05);
    let ok = alone_ok
        && main.accuracy >= 0.95
        && main.specialty_rates.iter().all(|&r| r >= 0.9)
        && main.elapsed < Duration::from_secs(600);
    outcome(
        ok,
        format!(
            "oracles alone {:.3?}; after {ROUTING_EPOCHS} epochs accuracy {:.3}, specialty selection {:.2?}, {}",
            alone,
            main.accuracy,
            main.specialty_rates,
            secs(main.elapsed)
        ),
    )
}

fn check_ensemble(main: &RoutingRun) -> Outcome {
    outcome(
        main.ensemble_accuracy < main.accuracy,
        format!("ensemble {:.3} vs MoE {:.3}", main.ensemble_accuracy, main.accuracy),
    )
}

fn check_pretraining(main: &RoutingRun) -> mme_core::Result<Outcome> {
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for &seed in &ROUTING_SEEDS {
        let pre = if seed == 0 { main.first_epoch } else { routing_run(seed, true, true)?.first_epoch };
        let rand = routing_run(seed, false, true)?.first_epoch;
        let (p, r) = (pre.unwrap_or(usize::MAX), rand.unwrap_or(usize::MAX));
        if p < r {
            wins += 1;
        }
        rows.push(format!("seed {seed}: pretrained {pre:?} random {rand:?}"));
    }
    Ok(outcome(wins >= 2, format!("{} ({wins}/3 wins, {})", rows.join(", "), secs(start.elapsed()))))
}

// ---------------------------------------------------------------- losses

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
        let v: Vec<f64> = v.into_iter().map(|x| x + 1e-3).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn batch() -> impl Strategy<Value = Vec<Vec<Vec<f64>>>> {
    (1usize..6, 2usize..5, 2usize..6).prop_flat_map(|(b, j, c)| {
        prop::collection::vec(prop::collection::vec(distribution(c), j), b)
    })
}

fn check_loss_identities() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(PropConfig { cases: 512, failure_persistence: None, ..PropConfig::default() });
    let kinds = [Similarity::Kld, Similarity::Cosine, Similarity::Mse];
    let mut failures = Vec::new();

    if let Err(e) = runner.run(&(-1e6f64..1e6, 0.0f64..1e6), |(l_sim, l_div)| {
        prop_assert_eq!(joint_loss(l_sim, l_div, 0.0).to_bits(), l_div.to_bits());
        Ok(())
    }) {
        failures.push(format!("lambda=0: {e}"));
    }
    if let Err(e) = runner.run(&(batch(), 2usize..5), |(preds, j)| {
        let agreed: Vec<Vec<Vec<f64>>> = preds.iter().map(|m| vec![m[0].clone(); j]).collect();
        for kind in kinds {
            prop_assert_eq!(similarity_loss(&agreed, kind).unwrap(), 0.0);
        }
        Ok(())
    }) {
        failures.push(format!("agreement: {e}"));
    }
    if let Err(e) = runner.run(&batch(), |preds| {
        for kind in kinds {
            prop_assert!(similarity_loss(&preds, kind).unwrap() >= 0.0);
        }
        Ok(())
    }) {
        failures.push(format!("nonnegative: {e}"));
    }
    if let Err(e) = runner.run(&(batch(), any::<u64>()), |(preds, pick)| {
        let mut rng = chacha(pick);
        let j = preds[0].len();
        let c = preds[0][0].len();
        let chosen: Vec<usize> = preds.iter().map(|_| rng.gen_range(0..j)).collect();
        let targets: Vec<usize> = preds.iter().map(|_| rng.gen_range(0..c)).collect();
        let weights: Vec<Vec<f64>> = chosen
            .iter()
            .map(|&k| (0..j).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
            .collect();
        let expected = preds
            .iter()
            .zip(&chosen)
            .zip(&targets)
            .map(|((m, &k), &t)| cross_entropy(&m[k], t).unwrap())
            .sum::<f64>()
            / preds.len() as f64;
        prop_assert_eq!(diversity_loss(&weights, &preds, &targets).unwrap(), expected);
        Ok(())
    }) {
        failures.push(format!("one-hot diversity: {e}"));
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(30),
        if failures.is_empty() {
            format!("4 properties x 512 cases, {}", secs(elapsed))
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- gradients

fn check_gradients() -> mme_core::Result<Outcome> {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checks = 0;
    let mut failed = Vec::new();
    for seed in 0..8 {
        for r in gradient_suite(seed)? {
            checks += 1;
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, r.name.clone());
            }
            if !r.passed {
                failed.push(format!("{} (seed {seed})", r.name));
            }
        }
    }
    let elapsed = start.elapsed();
    Ok(outcome(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{checks} checks at tolerance {DEFAULT_TOLERANCE:e}, worst {:.2e} ({}), failed {failed:?}, {}",
            worst.0,
            worst.1,
            secs(elapsed)
        ),
    ))
}

// ---------------------------------------------------------------- walks

fn two_tetrahedra() -> Mesh {
    let mut v = vec![[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    v.extend(v.clone().iter().map(|p| [p[0] + 4.0, p[1], p[2]]));
    let f = [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    let faces = f.iter().chain(f.iter().map(|t| [t[0] + 4, t[1] + 4, t[2] + 4]).collect::<Vec<_>>().iter()).copied().collect();
    Mesh::new("two_tets", v, faces).unwrap()
}

fn walk_violation(mesh: &Mesh, w: &Walk) -> Option<String> {
    let expected = walk_length(mesh.vertices.len()).ok()?;
    if w.len() != expected {
        return Some(format!("length {} != {expected}", w.len()));
    }
    let mut seen = HashSet::new();
    for (i, &v) in w.vertex_indices.iter().enumerate() {
        if !seen.insert(v) {
            return Some(format!("vertex {v} repeated"));
        }
        if w.coordinates[i] != mesh.vertices[v] {
            return Some(format!("coordinates of position {i} do not match vertex {v}"));
        }
        if i == 0 {
            continue;
        }
        let prev = w.vertex_indices[i - 1];
        let stuck = mesh.adjacency[prev].iter().all(|n| w.vertex_indices[..i].contains(n));
        if w.jump_flags[i] && !stuck {
            return Some(format!("jump at {i} with unvisited neighbors"));
        }
        if !w.jump_flags[i] && !mesh.adjacency[prev].contains(&v) {
            return Some(format!("step {prev}->{v} is not an edge"));
        }
    }
    None
}

fn check_walks() -> mme_core::Result<Outcome> {
    let start = Instant::now();
    let mut meshes: Vec<Mesh> = generate_classification_set(10, 4, 3)?.meshes;
    meshes.extend(generate_segmentation_set(4, 3)?.meshes);
    meshes.push(two_tetrahedra());
    let per_mesh = 10_000 / meshes.len() + 1;
    let mut total = 0;
    let mut jumps = 0;
    let mut problems = Vec::new();
    for (i, mesh) in meshes.iter().enumerate() {
        let a = extract_walks(mesh, per_mesh, 100 + i as u64)?;
        let b = extract_walks(mesh, per_mesh, 100 + i as u64)?;
        if a != b {
            problems.push(format!("{}: not deterministic", mesh.id));
        }
        for w in &a {
            total += 1;
            jumps += w.jump_flags.iter().filter(|j| **j).count();
            if let Some(p) = walk_violation(mesh, w) {
                problems.push(format!("{}: {p}", mesh.id));
            }
        }
    }
    Ok(outcome(
        problems.is_empty() && total >= 10_000,
        format!(
            "{total} walks over {} meshes ({jumps} jumps), {} violations{}, {}",
            meshes.len(),
            problems.len(),
            problems.first().map(|p| format!(" e.g. {p}")).unwrap_or_default(),
            secs(start.elapsed())
        ),
    ))
}

// ---------------------------------------------------------------- metrics

fn brute_ap(relevance: &[bool], total_relevant: usize, cutoff: usize) -> f64 {
    let list = &relevance[..relevance.len().min(cutoff)];
    let denom = total_relevant.min(cutoff);
    if denom == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 1..=list.len() {
        if list[k - 1] {
            let rel_at_k = list[..k].iter().filter(|r| **r).count();
            sum += rel_at_k as f64 / k as f64;
        }
    }
    sum / denom as f64
}

fn dcg(gains: &[f64]) -> f64 {
    gains.iter().enumerate().map(|(i, g)| g * std::f64::consts::LN_2 / ((i + 2) as f64).ln()).sum()
}

fn brute_ndcg(relevance: &[bool], total_relevant: usize, cutoff: usize) -> f64 {
    let gains: Vec<f64> = relevance.iter().take(cutoff).map(|&r| if r { 1.0 } else { 0.0 }).collect();
    let mut ideal = vec![1.0; total_relevant];
    ideal.resize(total_relevant.max(gains.len()), 0.0);
    ideal.truncate(cutoff);
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(&gains) / idcg
    }
}

fn brute_edge_accuracy(pred: &[usize], truth: &[usize], lengths: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| lengths[a].total_cmp(&lengths[b]));
    let total: f64 = order.iter().map(|&i| lengths[i]).sum();
    let right: f64 = order.iter().filter(|&&i| pred[i] == truth[i]).map(|&i| lengths[i]).sum();
    right / total
}

fn check_metrics() -> Outcome {
    let mut rng = chacha(2024);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..60);
        let relevance: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let hits = relevance.iter().filter(|r| **r).count();
        let total = hits + rng.gen_range(0..5);
        let cutoff = if rng.gen_bool(0.3) { rng.gen_range(1..=n) } else { 1000 };
        worst = worst.max((average_precision(&relevance, total, cutoff) - brute_ap(&relevance, total, cutoff)).abs());
        worst = worst.max((ndcg_single(&relevance, total, cutoff) - brute_ndcg(&relevance, total, cutoff)).abs());
        let e = rng.gen_range(1..80);
        let truth: Vec<usize> = (0..e).map(|_| rng.gen_range(0..4)).collect();
        let pred: Vec<usize> = truth.iter().map(|&t| if rng.gen_bool(0.6) { t } else { rng.gen_range(0..4) }).collect();
        let lengths: Vec<f64> = (0..e).map(|_| rng.gen_range(0.01..3.0)).collect();
        let ours = edge_accuracy(&pred, &truth, &lengths).unwrap();
        worst = worst.max((ours - brute_edge_accuracy(&pred, &truth, &lengths)).abs());
    }
    let ap = average_precision(&[true, false, true], 2, 1000);
    let nd = ndcg_single(&[true, false, true], 2, 1000);
    let ea = edge_accuracy(&[0, 1, 2], &[0, 0, 2], &[2.0, 1.0, 1.0]).unwrap();
    let worked = ap == (1.0 + 2.0 / 3.0) / 2.0 && nd == 1.5 / (1.0 + 1.0 / 3f64.log2()) && ea == 0.75;
    outcome(
        worst <= 1e-12 && worked,
        format!("max deviation {worst:.1e} over 100 instances; AP {ap:.4}, NDCG {nd:.4}, edge accuracy {ea}"),
    )
}

// ---------------------------------------------------------------- sac

fn check_sac() -> mme_core::Result<Outcome> {
    let start = Instant::now();
    let state = [1.0];
    let mut finals = Vec::new();
    for seed in 0..3 {
        let mut agent = SacAgent::new(1, SacConfig::default(), seed)?;
        let mut lambda = agent.agent_step(&state, 0.0, true)?;
        for _ in 0..2000 {
            let reward = -(lambda - 0.3f64).powi(2);
            lambda = agent.agent_step(&state, reward, true)?;
        }
        finals.push(agent.greedy_lambda(&state)?);
    }
    let elapsed = start.elapsed();
    Ok(outcome(
        finals.iter().all(|l| (l - 0.3).abs() <= 0.1) && elapsed < Duration::from_secs(60),
        format!("greedy lambda after 2000 iterations {:.3?}, {}", finals, secs(elapsed)),
    ))
}

// ---------------------------------------------------------------- lambda

const STATIC_LAMBDAS: [f64; 4] = [-1.0, 0.0, 0.1, 1.0];

/// Face MLP and walk RNN, briefly pre-trained, fine-tuned jointly with the
/// gate on a five-class set. Returns correct predictions on an independent
/// 100-mesh test set.
fn lambda_run(seed: u64, lambda: Option<f64>) -> mme_core::Result<usize> {
    let ds = generate_classification_set(5, 20, seed)?;
    let train = ds.train_meshes();
    let held_out = generate_classification_set(5, 20, seed + 1000)?;
    let test: Vec<&Mesh> = held_out.meshes.iter().collect();
    let mut experts = build_experts(&["face_mlp", "walk_rnn"], 5, DEFAULT_HIDDEN, seed)?;
    for e in experts.iter_mut() {
        pretrain_expert(e, &train, &SupervisedConfig { epochs: 5, lr: 1e-2, batch_size: 8, seed })?;
    }
    let gate = Gate::new(GateConfig::new(2, 5).with_width(16, 4, 32), seed)?;
    let mut system = MoeSystem::new(gate, experts, Task::Classification)?;
    let config = TrainerConfig {
        batch_size: 8,
        gate_lr: 3e-4,
        expert_lr: 1e-3,
        similarity: Similarity::Mse,
        seed,
        ..TrainerConfig::default()
    };
    match lambda {
        Some(l) => train_run(&mut system, &train, &mut StaticLambda(l), &config, 6, |_, _| Ok(false))?,
        None => {
            let mut agent = SacAgent::new(2, SacConfig { batch_size: 8, ..SacConfig::default() }, seed)?;
            train_run(&mut system, &train, &mut agent, &config, 6, |_, _| Ok(false))?
        }
    };
    let ev = evaluate(&system, &test, 32, seed)?;
    Ok((ev.metric("accuracy").unwrap_or(0.0) * test.len() as f64).round() as usize)
}

fn check_dynamic_lambda() -> mme_core::Result<Outcome> {
    let start = Instant::now();
    let seeds = [0u64, 1, 2];
    let mut static_correct = [0usize; 4];
    let mut dynamic_correct = 0;
    for &seed in &seeds {
        for (i, &l) in STATIC_LAMBDAS.iter().enumerate() {
            static_correct[i] += lambda_run(seed, Some(l))?;
        }
        dynamic_correct += lambda_run(seed, None)?;
    }
    let n = (seeds.len() * 100) as f64;
    let statics: Vec<f64> = static_correct.iter().map(|&c| 100.0 * c as f64 / n).collect();
    let dynamic = 100.0 * dynamic_correct as f64 / n;
    let best = statics.iter().cloned().fold(f64::MIN, f64::max);
    Ok(outcome(
        dynamic >= best - 1.0 - 1e-9,
        format!(
            "mean test accuracy: dynamic {dynamic:.2}%, static {} (best {best:.2}%), {}",
            STATIC_LAMBDAS
                .iter()
                .zip(&statics)
                .map(|(l, a)| format!("{l}: {a:.2}%"))
                .collect::<Vec<_>>()
                .join(", "),
            secs(start.elapsed())
        ),
    ))
}

// ---------------------------------------------------------------- checkpoint

fn checkpoint_system(seed: u64) -> mme_core::Result<MoeSystem> {
    let experts = build_experts(&["face_mlp", "walk_rnn", "oracle:1"], 3, 8, 5)?;
    let mut cfg = GateConfig::new(3, 3).with_width(8, 2, 16);
    cfg.encoder_layers = 2;
    cfg.decoder_layers = 2;
    MoeSystem::new(Gate::new(cfg, seed)?, experts, Task::Classification)
}

fn check_checkpoint() -> mme_core::Result<Outcome> {
    let ds = generate_classification_set(3, 6, 9)?;
    let mut trained = checkpoint_system(1)?;
    let config = TrainerConfig { batch_size: 4, walks_train: 4, seed: 3, ..TrainerConfig::default() };
    train_run(&mut trained, &ds.train_meshes(), &mut StaticLambda(0.5), &config, 2, |_, _| Ok(false))?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("system.ckpt");
    save_checkpoint(&trained.to_params()?, &path)?;
    let mut restored = checkpoint_system(2)?;
    restored.load_params(&load_checkpoint(&path)?)?;
    let test = ds.test_meshes();
    let a = evaluate(&trained, &test, 8, 4)?;
    let b = evaluate(&restored, &test, 8, 4)?;
    let bits = |e: &Evaluation| -> Vec<u64> { e.outputs.iter().flat_map(|m| m.data.iter().map(|x| x.to_bits())).collect() };
    let same = bits(&a) == bits(&b) && a.chosen == b.chosen && restored.to_params()? == trained.to_params()?;
    Ok(outcome(same, format!("{} tensors, {} meshes compared bit for bit", trained.to_params()?.len(), test.len())))
}

// ---------------------------------------------------------------- driver

fn report(name: &str, result: mme_core::Result<Outcome>) -> bool {
    match result {
        Ok(o) => {
            println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
            o.passed
        }
        Err(e) => {
            println!("FAIL {name}: error {e}");
            false
        }
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut all = true;

    if wanted("loss identities") {
        all &= report("loss identities", Ok(check_loss_identities()));
    }
    if wanted("gradient suite") {
        all &= report("gradient suite", check_gradients());
    }
    if wanted("walk contract") {
        all &= report("walk contract", check_walks());
    }
    if wanted("metric oracles") {
        all &= report("metric oracles", Ok(check_metrics()));
    }
    if wanted("checkpoint round-trip") {
        all &= report("checkpoint round-trip", check_checkpoint());
    }
    if wanted("sac sanity") {
        all &= report("sac sanity", check_sac());
    }
    let routing_names = ["oracle routing", "ensemble vs moe", "pre-training ablation"];
    if routing_names.iter().any(|n| wanted(n)) {
        match routing_run(0, true, false) {
            Ok(main) => {
                if wanted(routing_names[0]) {
                    all &= report(routing_names[0], Ok(check_routing(&main)));
                }
                if wanted(routing_names[1]) {
                    all &= report(routing_names[1], Ok(check_ensemble(&main)));
                }
                if wanted(routing_names[2]) {
                    all &= report(routing_names[2], check_pretraining(&main));
                }
            }
            Err(e) => {
                for n in routing_names.iter().filter(|n| wanted(n)) {
                    println!("FAIL {n}: error {e}");
                }
                all = false;
            }
        }
    }
    if wanted("dynamic vs static lambda") {
        all &= report("dynamic vs static lambda", check_dynamic_lambda());
    }
    if !all {
        std::process::exit(1);
    }
}
