#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use dcnv::config::RunConfig;
use dcnv::io::{self, Bundle};
use dcnv::trainer::TrainConfig;
use dcnv_core::world::generate_world;

/// Small world and model that train in well under a second per epoch.
pub fn tiny_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = Some(5);
    c.world.rooms_x = 3;
    c.world.rooms_y = 2;
    c.world.n_object_tags = 8;
    c.world.feature_dim = 10;
    c.world.train_episodes = 12;
    c.world.val_seen_episodes = 4;
    c.world.val_unseen_episodes = 4;
    c.train = tiny_train_config();
    c
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_epochs: 2,
        instr_hidden: 6,
        policy_hidden: 6,
        bottleneck_dim: 5,
        attention_dim: 4,
        n_filters: 2,
        max_episode_steps: 30,
        threads: 1,
        ..TrainConfig::default()
    }
}

pub fn tiny_bundle(dir: &Path) -> Bundle {
    let cfg = tiny_run_config();
    let w = generate_world(&cfg.world.spec(cfg.seed.unwrap())).unwrap();
    io::save_world_dir(&w, dir).unwrap();
    io::load_bundle(dir, None).unwrap()
}

pub fn dcnv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcnv"))
        .args(args)
        .env_remove("DCNV_SEED")
        .output()
        .unwrap()
}

pub fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "command failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

pub fn write_config(path: &Path, cfg: &RunConfig) {
    std::fs::write(path, cfg.to_json()).unwrap();
}
