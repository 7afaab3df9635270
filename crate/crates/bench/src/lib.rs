//! Shared inputs for the criterion benches.

use markerprompt_core::scene::{generate_scene, SceneConfig};
use markerprompt_core::trainer::{Model, TrainConfig};
use markerprompt_core::Scene;

/// Default-size scene and a freshly initialized full model.
pub fn fixture() -> (Scene, Model<f32>) {
    let scene = generate_scene(&SceneConfig::default(), 42).expect("default config is valid");
    let model = Model::init(&TrainConfig::default(), scene.width(), scene.height(), 1)
        .expect("default config is valid");
    (scene, model)
}
