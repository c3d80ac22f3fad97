//! Seeded inputs for the benchmarks.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewsel_core::selector::EmbeddingSeq;
use viewsel_core::CameraPose;

/// `n` cameras scattered in a 6 x 6 x 2 m room with random headings.
pub fn random_poses(n: usize, seed: u64) -> Vec<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = Vector3::new(rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0), rng.gen_range(0.0..2.0));
            let r = Rotation3::from_euler_angles(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-PI..PI),
            );
            CameraPose::new(p, *r.matrix()).expect("rotation is orthonormal")
        })
        .collect()
}

pub fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

pub fn random_seq(id: &str, tokens: usize, d: usize, seed: u64) -> EmbeddingSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingSeq::new(id, Array2::from_shape_simple_fn((tokens, d), || rng.gen_range(-1.0..1.0)))
}
