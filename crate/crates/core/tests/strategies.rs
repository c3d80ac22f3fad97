use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewsel_core::scene::{embed_synthetic, synth_scene, SceneManifest, SynthSpec, ViewRecord};
use viewsel_core::selector::{score_views, EmbeddingSeq, SelectorConfig, SelectorParams};
use viewsel_core::strategy::{select_cdviews, select_retrieval, select_uniform, Strategy, StrategyError};
use viewsel_core::{view_distance, CameraPose, NmsConfig};

fn manifest_with(poses: Vec<CameraPose>) -> SceneManifest {
    SceneManifest {
        scene_id: "s".into(),
        views: poses
            .into_iter()
            .enumerate()
            .map(|(i, pose)| ViewRecord {
                view_id: format!("{i:03}"),
                frame_index: 3 * i as u64 + 1,
                image_path: None,
                pose,
            })
            .collect(),
        base_dir: None,
    }
}

fn small_config() -> SelectorConfig {
    SelectorConfig {
        d_in: 12,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 2,
        seed: 5,
    }
}

fn random_seq(rng: &mut ChaCha8Rng, id: &str, tokens: usize, d: usize) -> EmbeddingSeq {
    EmbeddingSeq::new(id, Array2::from_shape_fn((tokens, d), |_| rng.gen_range(-1.0..1.0)))
}

#[test]
fn retrieval_matches_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..300 {
        let n = rng.gen_range(1..30);
        let scene = manifest_with(vec![CameraPose::identity(); n]);
        // coarse scores so ties are common
        let scores: HashMap<String, f64> = scene
            .views
            .iter()
            .map(|v| (v.view_id.clone(), (rng.gen_range(0..5) as f64) / 4.0))
            .collect();
        let k = rng.gen_range(1..=n);
        let got = select_retrieval(&scene, "q", k, &scores).unwrap();

        let mut all: Vec<(f64, u64, String)> = scene
            .views
            .iter()
            .map(|v| (scores[&v.view_id], v.frame_index, v.view_id.clone()))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<String> = all.iter().take(k).map(|t| t.2.clone()).collect();
        assert_eq!(got.view_ids, want, "trial {trial}");
        let mut fed = want.clone();
        fed.sort_by_key(|id| scene.views[scene.view_index(id).unwrap()].frame_index);
        assert_eq!(got.feed_order, fed);
    }
}

#[test]
fn uniform_is_a_subset_without_duplicates() {
    let scene = manifest_with(vec![CameraPose::identity(); 17]);
    for seed in 0..200 {
        let r = select_uniform(&scene, "q", 6, seed).unwrap();
        let mut ids = r.view_ids.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        assert!(r.scores.is_none());
        assert_eq!(r.strategy, Strategy::Uniform);
    }
}

#[test]
fn shared_pose_collapses_to_one_view() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = small_config();
    let params = SelectorParams::init(cfg);
    let scene = manifest_with(vec![CameraPose::identity(); 12]);
    let q = random_seq(&mut rng, "q", 3, cfg.d_in);
    let views: Vec<EmbeddingSeq> = (0..12).map(|i| random_seq(&mut rng, &i.to_string(), 2, cfg.d_in)).collect();
    for k in [1, 5, 12] {
        let r = select_cdviews(&scene, "q", &q, &views, &params, &NmsConfig::new(0.5, k), k).unwrap();
        assert_eq!(r.view_ids.len(), 1);
    }
}

#[test]
fn zero_threshold_is_top_k_by_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = small_config();
    let params = SelectorParams::init(cfg);
    let scene = manifest_with(vec![CameraPose::identity(); 20]);
    let q = random_seq(&mut rng, "q", 3, cfg.d_in);
    let views: Vec<EmbeddingSeq> = (0..20).map(|i| random_seq(&mut rng, &i.to_string(), 2, cfg.d_in)).collect();
    let r = select_cdviews(&scene, "q", &q, &views, &params, &NmsConfig::new(0.0, 9), 9).unwrap();
    let scores = score_views(&q, &views, &params).unwrap().scores;
    let mut order: Vec<usize> = (0..20).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let want: Vec<String> = order[..9].iter().map(|&i| format!("{i:03}")).collect();
    assert_eq!(r.view_ids, want);
    assert_eq!(r.scores.unwrap(), order[..9].iter().map(|&i| scores[i]).collect::<Vec<_>>());
}

#[test]
fn selected_views_respect_the_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = small_config();
    let params = SelectorParams::init(cfg);
    for trial in 0..40 {
        let poses: Vec<CameraPose> = (0..15)
            .map(|_| {
                let yaw = rng.gen_range(0.0..1.0f64);
                let r = Matrix3::new(yaw.cos(), -yaw.sin(), 0.0, yaw.sin(), yaw.cos(), 0.0, 0.0, 0.0, 1.0);
                CameraPose::new(Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), 0.0), r).unwrap()
            })
            .collect();
        let scene = manifest_with(poses.clone());
        let q = random_seq(&mut rng, "q", 2, cfg.d_in);
        let views: Vec<EmbeddingSeq> = (0..15).map(|i| random_seq(&mut rng, &i.to_string(), 2, cfg.d_in)).collect();
        let t = 0.5;
        let r = select_cdviews(&scene, "q", &q, &views, &params, &NmsConfig::new(t, 9), 9).unwrap();
        let idx: Vec<usize> = r.view_ids.iter().map(|id| scene.view_index(id).unwrap()).collect();
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                let d = view_distance(&poses[idx[a]], &poses[idx[b]], Default::default());
                assert!(d > t, "trial {trial}: {d}");
            }
        }
        let again = select_cdviews(&scene, "q", &q, &views, &params, &NmsConfig::new(t, 9), 9).unwrap();
        assert_eq!(again, r);
    }
}

#[test]
fn planted_answer_view_is_selected() {
    // Projection-only scorer: a view whose tokens equal the question's has
    // cosine exactly 1, above every other view.
    let scene = synth_scene(&SynthSpec::new("plant", 12)).unwrap();
    let store = embed_synthetic(&scene, 24, 3, 4, 1.0);
    let cfg = SelectorConfig {
        d_in: 24,
        d_model: 16,
        n_heads: 2,
        d_ff: 16,
        n_layers: 0,
        seed: 1,
    };
    let params = SelectorParams::init(cfg);
    let qa = &scene.qa[0];
    let q = store.question_seq(&qa.qa.question_id).unwrap();
    let mut views = store.scene_views(&scene.manifest).unwrap();
    let planted = scene.answer_view_indices(qa)[0];
    views[planted] = EmbeddingSeq::new("planted", q.tokens.mapv(|x| 3.0 * x));
    let r = select_cdviews(&scene.manifest, &qa.qa.question_id, &q, &views, &params, &NmsConfig::new(0.5, 9), 9)
        .unwrap();
    assert_eq!(r.view_ids[0], scene.manifest.views[planted].view_id);
    assert!(r.scores.unwrap()[0] > 1.0 - 1e-9);
}

#[test]
fn request_consistency_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = small_config();
    let params = SelectorParams::init(cfg);
    let scene = manifest_with(vec![CameraPose::identity(); 4]);
    let q = random_seq(&mut rng, "q", 2, cfg.d_in);
    let views: Vec<EmbeddingSeq> = (0..4).map(|i| random_seq(&mut rng, &i.to_string(), 2, cfg.d_in)).collect();
    assert!(matches!(
        select_cdviews(&scene, "q", &q, &views, &params, &NmsConfig::new(0.5, 9), 5),
        Err(StrategyError::InconsistentK { .. })
    ));
    assert!(matches!(
        select_cdviews(&scene, "q", &q, &views[..3], &params, &NmsConfig::new(0.5, 3), 3),
        Err(StrategyError::ViewCountMismatch { .. })
    ));
    assert!(matches!(select_uniform(&scene, "q", 0, 1), Err(StrategyError::ZeroK)));
}
