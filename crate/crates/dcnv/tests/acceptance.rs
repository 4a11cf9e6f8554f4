//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the lines are always printed.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dcnv::io;
use dcnv::trainer::{self, EpochReport, TrainConfig, TrainOutcome};
use dcnv_core::agent::{select_action, Agent, AgentConfig, SelectMode};
use dcnv_core::encoders::{parse_stopwords, Vocabulary, DEFAULT_STOPWORDS};
use dcnv_core::episode::{Episode, EpisodeRecord, Split};
use dcnv_core::metrics::{aggregate, score_episode};
use dcnv_core::rollout::{episode_gradients, ExecMode, RolloutConfig};
use dcnv_core::sim::{Action, AgentPose, NavGraph, NavNode, GRID_CELLS};
use dcnv_core::world::{generate_world, WorldSpec};
use dcnv_core::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---- 1: gradients of a full rollout against central differences ----

fn criterion_1() -> Outcome {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..3u64 {
        let w = generate_world(&WorldSpec {
            seed,
            rooms_x: 2,
            rooms_y: 2,
            n_object_tags: 6,
            feature_dim: 8,
            train_episodes: 4,
            val_seen_episodes: 0,
            val_unseen_episodes: 1,
            ..WorldSpec::default()
        })
        .unwrap();
        let vocab = Vocabulary::new(w.embeddings.clone(), parse_stopwords(DEFAULT_STOPWORDS)).unwrap();
        let cfg = AgentConfig {
            instr_hidden: 4,
            policy_hidden: 3,
            bottleneck_dim: 3,
            attention_dim: 3,
            n_filters: 2,
            scratch_embeddings: true,
            ..AgentConfig::full(vocab.dim(), w.spec.feature_dim, vocab.len())
        };
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let agent = Agent::new(cfg, &mut store, &mut init).unwrap();
        // Zero-initialised biases put ReLUs exactly on their kink at the first
        // step, where the two one-sided derivatives differ. Check at a generic point.
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v += init.gen_range(-0.05..0.05);
            }
        }
        let ep = w.episodes.iter().find(|e| e.path.len() > 2).unwrap_or(&w.episodes[0]);
        let rcfg = RolloutConfig {
            mode: ExecMode::Teacher,
            ..RolloutConfig::train(40)
        };
        // The same dropout masks on every evaluation.
        let run = |s: &ParamStore| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            episode_gradients(&agent, s, &vocab, &w.graph, ep, &rcfg, &mut rng).unwrap()
        };
        let base = run(&store);
        let mut probe = store.clone();
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                probe.get_mut(id).data_mut()[k] = orig + H;
                let up = run(&probe).loss;
                probe.get_mut(id).data_mut()[k] = orig - H;
                let down = run(&probe).loss;
                probe.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * H);
                let analytic = base.gradients.get(id).map_or(0.0, |g| g.data()[k]);
                let diff = (numeric - analytic).abs();
                // Below this both sides are rounding noise.
                if diff > 1e-9 {
                    worst = worst.max(diff / numeric.abs().max(analytic.abs()));
                }
                checked += 1;
            }
        }
    }
    outcome(
        worst < TOL,
        format!("max relative error {worst:.2e} over {checked} scalars, 3 seeds (tol {TOL:.0e})"),
    )
}

// ---- 2: dynamic convolution equals explicit attention scores ----

fn criterion_2() -> Outcome {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.gen_range(1..=8);
        let c = rng.gen_range(1..=40);
        let f: Vec<f64> = (0..m * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let i: Vec<f64> = (0..GRID_CELLS * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut g = Graph::new(&store);
        let fv = g.constant(Tensor::matrix(m, c, f.clone()).unwrap());
        let iv = g.constant(Tensor::matrix(GRID_CELLS, c, i.clone()).unwrap());
        let cfg = AgentConfig::desk(4, 4, 1);
        let mut s = ParamStore::new();
        let agent = Agent::new(cfg, &mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let d = agent.dynamic_convolve(&mut g, fv, iv).unwrap();
        let scale = (c as f64).sqrt();
        for a in 0..m {
            for j in 0..GRID_CELLS {
                let mut score = 0.0;
                for k in 0..c {
                    score += f[a * c + k] * i[j * c + k];
                }
                worst = worst.max((score / scale - g.value(d).get2(a, j)).abs());
            }
        }
    }
    outcome(worst < 1e-12, format!("max abs diff {worst:.2e} over 100 instances (tol 1e-12)"))
}

// ---- 3: oracle completeness ----

fn criterion_3() -> Outcome {
    let mut total = 0;
    let mut failures = Vec::new();
    for seed in 0..5 {
        let w = generate_world(&WorldSpec {
            seed,
            train_episodes: 24,
            val_seen_episodes: 8,
            val_unseen_episodes: 8,
            ..WorldSpec::default()
        })
        .unwrap();
        let mut scores = Vec::new();
        for ep in &w.episodes {
            let rec = w.graph.run_oracle_rollout(ep).unwrap();
            if rec.end_count() != 1 || rec.actions.last() != Some(&Action::End) {
                failures.push(format!("{seed}/{}", ep.id));
            }
            scores.push(score_episode(&w.graph, &rec, ep.goal()).unwrap());
        }
        let agg = aggregate(&scores).unwrap();
        if agg.sr != 1.0 || agg.osr != 1.0 {
            failures.push(format!("seed {seed}: SR {} OSR {}", agg.sr, agg.osr));
        }
        total += scores.len();
    }
    outcome(
        failures.is_empty() && total == 200,
        format!("{total} episodes over 5 worlds, SR = OSR = 1, one end each; problems: {failures:?}"),
    )
}

// ---- 4: hand-computed metrics ----

fn hand_graph(points: &[[f64; 3]], edges: &[(usize, usize)]) -> NavGraph {
    let nodes = points
        .iter()
        .enumerate()
        .map(|(i, p)| NavNode {
            id: format!("v{i}"),
            pos: *p,
            features: None,
        })
        .collect();
    NavGraph::from_indices(nodes, edges).unwrap()
}

fn line_graph(n: usize, spacing: f64) -> NavGraph {
    let pts: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * spacing, 0.0, 0.0]).collect();
    let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
    hand_graph(&pts, &edges)
}

fn walk(nodes: &[usize]) -> EpisodeRecord {
    let ep = Episode {
        id: "hand".into(),
        path_id: 0,
        path: vec![nodes[0]],
        start_heading: 0,
        instruction: String::new(),
        split: Split::ValSeen,
    };
    let mut r = EpisodeRecord::new(&ep);
    for &n in &nodes[1..] {
        r.actions.push(Action::Forward);
        r.poses.push(AgentPose::new(n, 0, 0));
    }
    r.actions.push(Action::End);
    r.poses.push(*r.poses.last().unwrap());
    r
}

fn criterion_4() -> Outcome {
    let triangle = hand_graph(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [3.0, 4.0, 0.0]], &[(0, 1), (1, 2), (0, 2)]);
    // (name, graph, visited nodes, goal, NE, SR, OSR, SPL)
    let cases: Vec<(&str, NavGraph, Vec<usize>, usize, f64, bool, bool, f64)> = vec![
        ("backtrack", line_graph(4, 1.0), vec![0, 1, 2, 3, 2], 2, 0.0, true, true, 0.5),
        ("start is goal", line_graph(2, 1.0), vec![0, 1, 0], 0, 0.0, true, true, 1.0),
        ("never moves", line_graph(2, 10.0), vec![0], 1, 10.0, false, false, 0.0),
        ("detour", triangle, vec![0, 1, 2], 2, 0.0, true, true, 5.0 / 7.0),
        ("overshoot", line_graph(4, 2.5), vec![0, 1, 2, 3], 1, 5.0, false, true, 0.0),
    ];
    let mut bad = Vec::new();
    for (name, g, nodes, goal, ne, sr, osr, spl) in &cases {
        let s = score_episode(g, &walk(nodes), *goal).unwrap();
        let ok = (s.ne_m - ne).abs() < 1e-12
            && s.success == *sr
            && s.oracle_success == *osr
            && (s.spl - spl).abs() < 1e-12;
        if !ok {
            bad.push(format!("{name}: got NE {} SR {} OSR {} SPL {}", s.ne_m, s.success, s.oracle_success, s.spl));
        }
    }
    let mut violations = 0;
    let mut splits = 0;
    for runs in [desk_runs().full.as_ref(), desk_runs().baseline.as_ref()].into_iter().flatten() {
        for r in &runs.report.epochs {
            for s in [&r.val_seen, &r.val_unseen] {
                splits += 1;
                if !(s.spl <= s.sr && s.sr <= s.osr) {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        bad.is_empty() && violations == 0,
        format!("5 hand graphs {:?}; SPL <= SR <= OSR on {splits} evaluated splits, {violations} violations", bad),
    )
}

// ---- 5 and 6: desk-scale training ----

struct DeskRuns {
    full: Option<TrainOutcome>,
    baseline: Option<TrainOutcome>,
    full_secs: f64,
    error: Option<String>,
}

static DESK: std::sync::OnceLock<DeskRuns> = std::sync::OnceLock::new();

fn desk_runs() -> &'static DeskRuns {
    DESK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let world = generate_world(&WorldSpec::default()).unwrap();
        io::save_world_dir(&world, dir.path()).unwrap();
        let data = io::load_bundle(dir.path(), None).unwrap();
        let full_cfg = TrainConfig::default();
        let base_cfg = TrainConfig {
            dynamic_filters: false,
            attention: false,
            ..full_cfg.clone()
        };
        let log = |name: &'static str| move |r: &EpochReport| {
            eprintln!("  [{name}] epoch {} seen {:.3} unseen {:.3}", r.epoch, r.val_seen.sr, r.val_unseen.sr)
        };
        let started = Instant::now();
        let full = trainer::train(&full_cfg, 0, &data, log("full"));
        let full_secs = started.elapsed().as_secs_f64();
        let baseline = trainer::train(&base_cfg, 0, &data, log("static+last"));
        let error = match (&full, &baseline) {
            (Err(e), _) | (_, Err(e)) => Some(e.to_string()),
            _ => None,
        };
        DeskRuns {
            full: full.ok(),
            baseline: baseline.ok(),
            full_secs,
            error,
        }
    })
}

fn criterion_5() -> Outcome {
    let runs = desk_runs();
    let Some(full) = &runs.full else {
        return outcome(false, format!("training failed: {:?}", runs.error));
    };
    let b = full.report.best();
    let pass = b.val_seen.sr >= 0.9 && b.val_unseen.sr >= 0.6 && runs.full_secs < 15.0 * 60.0;
    outcome(
        pass,
        format!(
            "best epoch {} of {}: val_seen SR {:.3} (need 0.9), val_unseen SR {:.3} (need 0.6), {:.0}s (need < 900s)",
            full.report.best_epoch,
            full.report.epochs.len(),
            b.val_seen.sr,
            b.val_unseen.sr,
            runs.full_secs
        ),
    )
}

fn criterion_6() -> Outcome {
    let runs = desk_runs();
    let (Some(full), Some(base)) = (&runs.full, &runs.baseline) else {
        return outcome(false, format!("training failed: {:?}", runs.error));
    };
    let (f, s) = (full.report.best().val_seen.sr, base.report.best().val_seen.sr);
    outcome(f > s, format!("val_seen SR dynamic+attention {f:.3} vs static+last_state {s:.3}"))
}

// ---- CLI helpers for 7 and 8 ----

fn dcnv(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_dcnv"))
        .args(args)
        .env_remove("DCNV_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("dcnv {args:?} failed: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn criterion_7() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    let out = dir.path().join("sweep");
    dcnv(&["gen-world", "--seed", "0", "--out", p(&w)])?;
    dcnv(&["sweep-filters", "--seed", "0", "--world", p(&w), "--out", p(&out), "--epochs", "1"])?;
    let csv = std::fs::read_to_string(out.join("sweep.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    let header_ok = lines.first() == Some(&"M,split,NE,SR,OSR,SPL");
    let rows = lines.len().saturating_sub(1);
    let numeric = lines
        .iter()
        .skip(1)
        .all(|l| l.split(',').skip(2).all(|x| x.parse::<f64>().is_ok_and(f64::is_finite)));
    let json: Value = serde_json::from_slice(&std::fs::read(out.join("sweep.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut audit = Vec::new();
    for r in json["rows"].as_array().into_iter().flatten() {
        audit.push(format!("M={}:{}/{}", r["n_filters"], r["param_count"], r["expected_param_count"]));
    }
    let audit_ok = json["param_audit_ok"] == Value::Bool(true);
    Ok(outcome(
        header_ok && rows == 10 && numeric && audit_ok,
        format!("{rows} data rows, header ok {header_ok}, numeric {numeric}, audit {audit_ok} [{}]", audit.join(" ")),
    ))
}

fn file_hashes(dir: &Path, names: &[&str]) -> Result<Vec<String>, String> {
    names
        .iter()
        .map(|n| std::fs::read(dir.join(n)).map(|b| io::sha256_hex(&b)).map_err(|e| format!("{n}: {e}")))
        .collect()
}

fn criterion_8() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 3, "world": {"rooms_x": 3, "rooms_y": 2, "train_episodes": 12, "val_seen_episodes": 6, "val_unseen_episodes": 6},
            "train": {"max_epochs": 2, "batch_size": 4, "instr_hidden": 16, "policy_hidden": 16, "bottleneck_dim": 16, "attention_dim": 16}}"#,
    )
    .unwrap();
    let world_files = ["world.json", "embeddings.txt", "episodes_train.json", "episodes_val_seen.json", "episodes_val_unseen.json"];

    let m1 = dcnv(&["gen-world", "--config", p(&cfg), "--out", p(&d.join("w1"))])?;
    let resolved = d.join("w1").join("config.resolved.json");
    let m2 = dcnv(&["gen-world", "--config", p(&resolved), "--out", p(&d.join("w2"))])?;
    let world_same = m1 == m2 && file_hashes(&d.join("w1"), &world_files)? == file_hashes(&d.join("w2"), &world_files)?;

    dcnv(&["train", "--config", p(&resolved), "--world", p(&d.join("w1")), "--out", p(&d.join("t1"))])?;
    let train_resolved = d.join("t1").join("config.resolved.json");
    dcnv(&["train", "--config", p(&train_resolved), "--out", p(&d.join("t2"))])?;
    let train_files = ["report.json", "checkpoint.bin"];
    let train_same = file_hashes(&d.join("t1"), &train_files)? == file_hashes(&d.join("t2"), &train_files)?;

    let ckpt = d.join("t1").join("checkpoint.bin");
    dcnv(&["eval", "--checkpoint", p(&ckpt), "--split", "val_unseen", "--out", p(&d.join("e1"))])?;
    let eval_resolved = d.join("e1").join("config.resolved.json");
    dcnv(&["eval", "--config", p(&eval_resolved), "--split", "val_unseen", "--out", p(&d.join("e2"))])?;
    let eval_files = ["trajectories_val_unseen.jsonl", "summary_val_unseen.json"];
    let eval_same = file_hashes(&d.join("e1"), &eval_files)? == file_hashes(&d.join("e2"), &eval_files)?;

    Ok(outcome(
        world_same && train_same && eval_same,
        format!("byte-identical reruns: gen-world {world_same}, train {train_same}, eval {eval_same}"),
    ))
}

// ---- 9: sampling frequencies ----

fn criterion_9() -> Outcome {
    const DRAWS: usize = 100_000;
    let target = [0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
    let mut counts = [0usize; 6];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..DRAWS {
        counts[select_action(&target, SelectMode::Sample, &mut rng).index()] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|c| *c as f64 / DRAWS as f64).collect();
    let worst = freq.iter().zip(target).map(|(f, t)| (f - t).abs()).fold(0.0, f64::max);
    outcome(worst <= 0.01, format!("frequencies {freq:?}, max deviation {worst:.4} (tol 0.01)"))
}

fn main() {
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "gradient soundness", Box::new(criterion_1)),
        (2, "dot-product attention equivalence", Box::new(criterion_2)),
        (3, "oracle completeness", Box::new(criterion_3)),
        (9, "sampling correctness", Box::new(criterion_9)),
        (7, "filter sweep protocol", Box::new(|| criterion_7().unwrap_or_else(|e| outcome(false, e)))),
        (8, "determinism", Box::new(|| criterion_8().unwrap_or_else(|e| outcome(false, e)))),
        (5, "desk-scale learning", Box::new(criterion_5)),
        (6, "ablation direction", Box::new(criterion_6)),
        (4, "metric oracle", Box::new(criterion_4)),
    ];
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    for (n, name, f) in criteria {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("criterion {n} ({name}): {} ({secs:.1}s) {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o, secs));
    }
    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (n, name, o, _) in &results {
        println!("  criterion {n}: {} - {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
