#![allow(dead_code)]

use dcnv_core::agent::{Agent, AgentConfig};
use dcnv_core::encoders::{parse_stopwords, Vocabulary, DEFAULT_STOPWORDS};
use dcnv_core::world::{generate_world, World, WorldSpec};
use dcnv_core::{Gradients, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_world(seed: u64) -> World {
    generate_world(&WorldSpec {
        seed,
        rooms_x: 3,
        rooms_y: 2,
        n_object_tags: 8,
        feature_dim: 10,
        train_episodes: 12,
        val_seen_episodes: 3,
        val_unseen_episodes: 3,
        ..WorldSpec::default()
    })
    .unwrap()
}

pub fn vocab(world: &World) -> Vocabulary {
    Vocabulary::new(world.embeddings.clone(), parse_stopwords(DEFAULT_STOPWORDS)).unwrap()
}

pub fn tiny_config(world: &World, vocab: &Vocabulary) -> AgentConfig {
    AgentConfig {
        instr_hidden: 5,
        policy_hidden: 4,
        bottleneck_dim: 3,
        attention_dim: 3,
        n_filters: 2,
        ..AgentConfig::full(vocab.dim(), world.spec.feature_dim, vocab.len())
    }
}

pub fn agent(cfg: AgentConfig, seed: u64) -> (Agent, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Agent::new(cfg, &mut store, &mut rng).unwrap();
    (a, store)
}

/// Largest relative error between `grads` and central differences of `loss`,
/// ignoring pairs whose absolute difference is below `abs_floor`.
pub fn finite_difference_error(
    store: &ParamStore,
    grads: &Gradients,
    h: f64,
    abs_floor: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig - h;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let diff = (numeric - analytic).abs();
            if diff > abs_floor {
                worst = worst.max(diff / numeric.abs().max(analytic.abs()));
            }
        }
    }
    worst
}
