//! Encoder and decoder properties on small generated worlds.

mod common;

use dcnv_core::agent::{select_action, EpisodeContext, SelectMode};
use dcnv_core::encoders::{coord_features, GridCache};
use dcnv_core::rollout::{episode_gradients, rollout, ExecMode, RolloutConfig};
use dcnv_core::sim::{Action, AgentPose, GRID_CELLS};
use dcnv_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::rngs::mock::StepRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn no_rng() -> Option<&'static mut ChaCha8Rng> {
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grid_rolls_with_heading(seed in 0u64..8, node in 0usize..17, heading in 0u8..12, elev in -1i8..=1) {
        let w = common::tiny_world(seed);
        let v = common::vocab(&w);
        let (agent, store) = common::agent(common::tiny_config(&w, &v), seed);
        let node = node % w.graph.len();
        let c = agent.config.bottleneck_dim;
        let mut g = Graph::new(&store);
        let mut cache = GridCache::new();
        let pose = AgentPose::new(node, heading, elev);
        let right = AgentPose::new(node, (heading + 1) % 12, elev);
        let a = agent.visual.build_feature_grid(&mut g, &w.graph, &pose, &mut cache).unwrap();
        let b = agent.visual.build_feature_grid(&mut g, &w.graph, &right, &mut cache).unwrap();
        let (a, b) = (g.value(a).clone(), g.value(b).clone());
        prop_assert_eq!(a.shape(), [GRID_CELLS, c + 3]);
        for cell in 0..GRID_CELLS {
            let shifted = (cell + 3) % GRID_CELLS;
            prop_assert_eq!(&b.row(cell)[..c], &a.row(shifted)[..c]);
        }
        let mass = |t: &Tensor| -> f64 {
            (0..GRID_CELLS).map(|r| t.row(r)[..c].iter().map(|x| x.abs()).sum::<f64>()).sum()
        };
        prop_assert!((mass(&a) - mass(&b)).abs() < 1e-9);
        for cell in 0..GRID_CELLS {
            let coords = &a.row(cell)[c..];
            prop_assert!((coords[0].powi(2) + coords[1].powi(2) - 1.0).abs() < 1e-12);
            prop_assert!(coords[2].abs() <= (60f64).to_radians().sin() + 1e-12);
        }
    }

    #[test]
    fn attention_is_convex_and_filters_unit_norm(seed in any::<u64>()) {
        let w = common::tiny_world(seed % 4);
        let v = common::vocab(&w);
        let (agent, store) = common::agent(common::tiny_config(&w, &v), seed);
        let mut g = Graph::new(&store);
        let ctx = agent.begin_episode(&mut g, &v, &w.episodes[0].instruction).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h: Vec<f64> = (0..agent.config.policy_hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = g.constant(Tensor::vector(h).unwrap());
        let (s, alpha) = agent.attend(&mut g, &ctx, h).unwrap();
        let alpha = g.value(alpha.unwrap()).data().to_vec();
        prop_assert!(alpha.iter().all(|a| *a >= 0.0));
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let x = g.value(ctx.encoding.x).clone();
        for (j, sj) in g.value(s).data().iter().enumerate() {
            let col: Vec<f64> = (0..x.shape()[0]).map(|i| x.get2(i, j)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*sj >= lo - 1e-12 && *sj <= hi + 1e-12);
        }
        let f = agent.generate_filters(&mut g, s, no_rng()).unwrap();
        for r in 0..agent.config.n_filters {
            let n: f64 = g.value(f).row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn policy_output_is_a_distribution(seed in any::<u64>()) {
        let w = common::tiny_world(seed % 4);
        let v = common::vocab(&w);
        let (agent, store) = common::agent(common::tiny_config(&w, &v), seed);
        let ep = &w.episodes[(seed % w.episodes.len() as u64) as usize];
        let mut g = Graph::new(&store);
        let mut ctx = agent.begin_episode(&mut g, &v, &ep.instruction).unwrap();
        let state = agent.initial_state(&mut g);
        let out = agent.step(&mut g, &mut ctx, &state, &w.graph, &ep.start_pose(), no_rng()).unwrap();
        let p = g.value(out.probs).data();
        prop_assert_eq!(p.len(), 6);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x > 0.0));
        let again = agent.step(&mut g, &mut ctx, &state, &w.graph, &ep.start_pose(), no_rng()).unwrap();
        prop_assert_eq!(g.value(out.probs), g.value(again.probs));
    }
}

#[test]
fn empty_and_uniform_attention_cases() {
    let w = common::tiny_world(0);
    let v = common::vocab(&w);
    let (agent, store) = common::agent(common::tiny_config(&w, &v), 0);
    let mut g = Graph::new(&store);
    let ctx = agent.begin_episode(&mut g, &v, "sofa chair lamp").unwrap();
    // Zero hidden state and zero query bias give a zero query, hence uniform weights.
    let h = g.constant(Tensor::zeros(&[agent.config.policy_hidden]));
    let (_, alpha) = agent.attend(&mut g, &ctx, h).unwrap();
    for a in g.value(alpha.unwrap()).data() {
        assert!((a - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn filters_depend_on_instruction_content() {
    let w = common::tiny_world(1);
    let v = common::vocab(&w);
    let (agent, store) = common::agent(common::tiny_config(&w, &v), 1);
    let mut g = Graph::new(&store);
    let bank = |g: &mut Graph<'_>, text: &str| {
        let ctx = agent.begin_episode(g, &v, text).unwrap();
        let h = g.constant(Tensor::zeros(&[agent.config.policy_hidden]));
        let (s, _) = agent.attend(g, &ctx, h).unwrap();
        let f = agent.generate_filters(g, s, no_rng()).unwrap();
        g.value(f).clone()
    };
    let a = bank(&mut g, &format!("walk into the {} room", w.tag_words[0]));
    let b = bank(&mut g, &format!("walk into the {} room", w.tag_words[1]));
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6, "filter banks identical for different tags");
}

#[test]
fn selector_filter_reads_one_channel() {
    let w = common::tiny_world(2);
    let v = common::vocab(&w);
    let (agent, store) = common::agent(common::tiny_config(&w, &v), 2);
    let c2 = agent.config.filter_channels();
    let mut g = Graph::new(&store);
    let mut cache = GridCache::new();
    let grid = agent
        .visual
        .build_feature_grid(&mut g, &w.graph, &AgentPose::new(0, 3, 0), &mut cache)
        .unwrap();
    let j = c2 - 2;
    let mut sel = vec![0.0; c2];
    sel[j] = 1.0;
    let f = g.constant(Tensor::matrix(1, c2, sel).unwrap());
    let d = agent.dynamic_convolve(&mut g, f, grid).unwrap();
    for cell in 0..GRID_CELLS {
        let want = g.value(grid).get2(cell, j) / (c2 as f64).sqrt();
        assert!((g.value(d).get2(0, cell) - want).abs() <= 1e-15 * want.abs().max(1.0));
    }
    let zeros = g.constant(Tensor::zeros(&[GRID_CELLS, c2]));
    let d0 = agent.dynamic_convolve(&mut g, f, zeros).unwrap();
    assert!(g.value(d0).data().iter().all(|x| *x == 0.0));
}

#[test]
fn seeded_dropout_reproduces_probabilities() {
    let w = common::tiny_world(3);
    let v = common::vocab(&w);
    let (agent, store) = common::agent(common::tiny_config(&w, &v), 3);
    let ep = &w.episodes[0];
    let run = |seed: u64| {
        let mut g = Graph::new(&store);
        let mut ctx = agent.begin_episode(&mut g, &v, &ep.instruction).unwrap();
        let state = agent.initial_state(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = agent
            .step(&mut g, &mut ctx, &state, &w.graph, &ep.start_pose(), Some(&mut rng))
            .unwrap();
        g.value(out.probs).data().to_vec()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

#[test]
fn sampling_matches_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let p = [0.2, 0.1, 0.05, 0.05, 0.4, 0.2];
    let mut counts = [0usize; 6];
    let n = 100_000;
    for _ in 0..n {
        counts[select_action(&p, SelectMode::Sample, &mut rng).index()] += 1;
    }
    for (c, want) in counts.iter().zip(p) {
        assert!((*c as f64 / n as f64 - want).abs() < 0.01);
    }
}

#[test]
fn coords_for_straight_ahead_and_behind() {
    let c = coord_features(&AgentPose::new(0, 0, 0), false);
    assert_eq!(c.row(1), [0.0, 1.0, 0.0]);
    let behind = c.row(18 + 1);
    assert!(behind[0].abs() < 1e-12 && (behind[1] + 1.0).abs() < 1e-12 && behind[2] == 0.0);
}

#[test]
fn single_node_forced_end_loss() {
    let w = common::tiny_world(4);
    let v = common::vocab(&w);
    let (agent, store) = common::agent(common::tiny_config(&w, &v), 4);
    let mut ep = w.episodes[0].clone();
    ep.path.truncate(1);
    let cfg = RolloutConfig {
        mode: ExecMode::Teacher,
        max_steps: 10,
        supervise: true,
        dropout: false,
    };
    let mut g = Graph::new(&store);
    let out = rollout(&agent, &mut g, &v, &w.graph, &ep, &cfg, &mut StepRng::new(0, 0)).unwrap();
    assert_eq!(out.record.actions, [Action::End]);
    let p_end = g.value(out.probs[0]).data()[Action::End.index()];
    assert!((g.value(out.loss.unwrap()).item() + p_end.ln()).abs() < 1e-12);
}

#[test]
fn teacher_forcing_stays_on_path_and_sums_step_losses() {
    let w = common::tiny_world(5);
    let v = common::vocab(&w);
    let (agent, store) = common::agent(common::tiny_config(&w, &v), 5);
    let cfg = RolloutConfig {
        mode: ExecMode::Teacher,
        max_steps: 200,
        supervise: true,
        dropout: false,
    };
    for ep in &w.episodes {
        let mut g = Graph::new(&store);
        let out = rollout(&agent, &mut g, &v, &w.graph, ep, &cfg, &mut StepRng::new(0, 0)).unwrap();
        let oracle = w.graph.run_oracle_rollout(ep).unwrap();
        assert_eq!(out.record.actions, oracle.actions);
        assert_eq!(out.record.labels, out.record.actions);
        let mut manual = 0.0;
        for (p, y) in out.probs.iter().zip(&out.record.labels) {
            manual += -g.value(*p).data()[y.index()].ln();
        }
        let total = g.value(out.loss.unwrap()).item();
        assert!((total - manual).abs() < 1e-9);
        let summed: f64 = out.record.step_losses.iter().sum();
        assert!((total - summed).abs() < 1e-9);
        assert!(out.record.step_losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    }
}

#[test]
fn sampled_rollouts_truncate_and_relabel() {
    let w = common::tiny_world(6);
    let v = common::vocab(&w);
    let (agent, store) = common::agent(common::tiny_config(&w, &v), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = RolloutConfig::train(6);
    for ep in &w.episodes {
        let r = episode_gradients(&agent, &store, &v, &w.graph, ep, &cfg, &mut rng).unwrap();
        let rec = &r.record;
        assert!(rec.actions.len() <= 6);
        assert_eq!(rec.truncated, rec.actions.last() != Some(&Action::End));
        assert_eq!(rec.labels.len(), rec.actions.len());
        assert_eq!(rec.poses.len(), rec.actions.len() + 1);
        assert!(r.gradients.is_finite());
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let w = common::tiny_world(7);
    let v = common::vocab(&w);
    let mut cfg = common::tiny_config(&w, &v);
    cfg.scratch_embeddings = true;
    let (agent, store) = common::agent(cfg, 7);
    let rcfg = RolloutConfig {
        mode: ExecMode::Teacher,
        ..RolloutConfig::train(80)
    };
    let mut total = dcnv_core::Gradients::new(store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for ep in &w.episodes {
        total.merge(&episode_gradients(&agent, &store, &v, &w.graph, ep, &rcfg, &mut rng).unwrap().gradients);
    }
    for id in store.ids() {
        let g = total.get(id).unwrap_or_else(|| panic!("no gradient for {}", store.entry(id).name));
        assert!(g.data().iter().any(|x| *x != 0.0), "{} has zero gradient", store.entry(id).name);
    }
}

#[test]
fn context_keys_absent_without_attention() {
    let w = common::tiny_world(0);
    let v = common::vocab(&w);
    let mut cfg = common::tiny_config(&w, &v);
    cfg.attention = false;
    let (agent, store) = common::agent(cfg, 0);
    let mut g = Graph::new(&store);
    let ctx: EpisodeContext = agent.begin_episode(&mut g, &v, "sofa room then stop").unwrap();
    assert!(ctx.keys.is_none());
    let h = g.constant(Tensor::zeros(&[agent.config.policy_hidden]));
    let (s, alpha) = agent.attend(&mut g, &ctx, h).unwrap();
    assert!(alpha.is_none());
    let last = g.value(ctx.encoding.x).shape()[0] - 1;
    assert_eq!(g.value(s).data(), g.value(ctx.encoding.x).row(last));
}
