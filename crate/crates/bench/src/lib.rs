//! Fixed inputs shared by the benchmarks.

use mmw_slam::pipeline::{simulate_position, synthetic_measurements, PipelineConfig};
use mmw_slam::simulate::OutlierModel;
use mmw_slam::{diagonal_covariance, BrsrpMap, Measurement, Scene, UeState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Power map of trajectory point `index` in the bundled scene.
pub fn scene_map(index: usize) -> BrsrpMap {
    let scene = Scene::default_indoor(2024);
    simulate_position(&scene, index, &PipelineConfig::default(), 2024)
        .expect("bundled scene simulates")
        .map
}

/// Noisy measurements of one point and the true UE state there.
pub fn snapshot(index: usize) -> (Scene, Vec<Measurement>, UeState) {
    let scene = Scene::default_indoor(2024);
    let r = diagonal_covariance(0.3, 3.0, 3.0);
    let z = synthetic_measurements(&scene, &r, &OutlierModel::none(), 2024).expect("bundled scene simulates");
    let truth = scene.ue_state(index);
    (scene, z[index].clone(), truth)
}

/// Two random `(aod, aoa)` sets of the given sizes, in radians.
pub fn angle_sets(n_est: usize, n_truth: usize, seed: u64) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = |n: usize| -> Vec<(f64, f64)> {
        (0..n).map(|_| (rng.random_range(-1.5..1.5), rng.random_range(-3.1..3.1))).collect()
    };
    (set(n_est), set(n_truth))
}
