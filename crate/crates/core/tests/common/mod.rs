#![allow(dead_code)]

use std::path::Path;

use mixscene::config::{Backbone, Config};
use mixscene::datasets::{generate_multimnist, load_dataset, Dataset, SceneLayout};
use mixscene::digits::DigitSet;

/// A model small enough to train for hundreds of steps in a test.
pub fn small_config() -> Config {
    let mut c = Config::default();
    let m = &mut c.model;
    m.image_height = 32;
    m.image_width = 32;
    m.grid_h = 2;
    m.grid_w = 2;
    m.what_dim = 4;
    m.num_clusters = 3;
    m.glimpse_h = 8;
    m.glimpse_w = 8;
    m.anchor_h = 16.0;
    m.anchor_w = 16.0;
    m.backbone = Backbone::Compact;
    m.feature_channels = 8;
    m.compact_channels = 4;
    m.head_channels = 8;
    m.head_layers = 1;
    m.encoder_hidden = vec![16];
    m.decoder_input = 16;
    m.decoder_channels = vec![8, 8, 4];
    for s in &mut c.schedules {
        s.end_step = 200;
    }
    let t = &mut c.train;
    t.batch_size = 4;
    t.learning_rate = 1e-3;
    t.total_steps = 20;
    t.log_every = 5;
    t.checkpoint_every = 10;
    t.eval_every = 10;
    t.seed = 11;
    c
}

pub fn make_dataset(dir: &Path, n: usize, seed: u64, image_size: usize, split: &str) -> Dataset {
    let digits = DigitSet::synthetic(60, 5);
    let layout = SceneLayout {
        image_size,
        max_objects: 2,
    };
    generate_multimnist(&digits, n, seed, dir, split, &layout).unwrap();
    load_dataset(dir).unwrap()
}
