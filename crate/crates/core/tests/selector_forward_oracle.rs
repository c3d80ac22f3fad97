//! Second, loop-based forward pass written against the public parameter
//! fields, used as an oracle for `score_views`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewsel_core::selector::layers::{Attention, FeedForward, LayerNorm, Linear};
use viewsel_core::selector::{score_views, EmbeddingSeq, SelectorConfig, SelectorParams};

type Mat = Vec<Vec<f64>>;

fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn linear(x: &Mat, l: &Linear) -> Mat {
    let (d_in, d_out) = l.weight.dim();
    x.iter()
        .map(|row| {
            (0..d_out)
                .map(|j| {
                    let mut acc = l.bias.as_ref().map_or(0.0, |b| b[j]);
                    for (i, x) in row.iter().enumerate().take(d_in) {
                        acc += x * l.weight[(i, j)];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, n: &LayerNorm) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * n.gamma[j] + n.beta[j])
                .collect()
        })
        .collect()
}

fn attention(xq: &Mat, xkv: &Mat, a: &Attention) -> Mat {
    let q = linear(xq, &a.query);
    let k = linear(xkv, &a.key);
    let v = linear(xkv, &a.value);
    let d = q[0].len();
    let dh = d / a.n_heads;
    let mut concat = vec![vec![0.0; d]; xq.len()];
    for h in 0..a.n_heads {
        for i in 0..xq.len() {
            let logits: Vec<f64> = (0..xkv.len())
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..dh {
                concat[i][h * dh + c] = (0..xkv.len()).map(|j| exps[j] / z * v[j][h * dh + c]).sum();
            }
        }
    }
    linear(&concat, &a.output)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn feed_forward(x: &Mat, f: &FeedForward) -> Mat {
    let h: Mat = linear(x, &f.up)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(&h, &f.down)
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn mean_pool(x: &Mat) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x[0].len()).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

fn naive_scores(params: &SelectorParams, question: &Array2<f64>, views: &[Array2<f64>]) -> Vec<f64> {
    let mut q = linear(&to_mat(question), &params.projection);
    let mut memories = Vec::new();
    for l in &params.question_layers {
        memories.push(q.clone());
        let x1 = add(&q, &attention(&layer_norm(&q, &l.norm_attn), &layer_norm(&q, &l.norm_attn), &l.self_attn));
        q = add(&x1, &feed_forward(&layer_norm(&x1, &l.norm_ff), &l.ff));
    }
    let qp = mean_pool(&q);
    views
        .iter()
        .map(|v| {
            let mut x = linear(&to_mat(v), &params.projection);
            for (l, mem) in params.visual_layers.iter().zip(&memories) {
                let n1 = layer_norm(&x, &l.norm_self);
                let x1 = add(&x, &attention(&n1, &n1, &l.self_attn));
                let x2 = add(&x1, &attention(&layer_norm(&x1, &l.norm_cross), mem, &l.cross_attn));
                x = add(&x2, &feed_forward(&layer_norm(&x2, &l.norm_ff), &l.ff));
            }
            let vp = mean_pool(&x);
            let dot: f64 = qp.iter().zip(&vp).map(|(a, b)| a * b).sum();
            let nq = qp.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = vp.iter().map(|a| a * a).sum::<f64>().sqrt();
            dot / (nq * nv)
        })
        .collect()
}

fn random(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0))
}

#[test]
fn forward_matches_loop_oracle_seed_42() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let config = SelectorConfig {
        d_in: 12,
        d_model: 16,
        n_heads: 4,
        d_ff: 24,
        n_layers: 2,
        seed: 42,
    };
    let mut params = SelectorParams::init(config);
    for (_, t) in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let question = random(5, 12, &mut rng);
    let views: Vec<Array2<f64>> = (0..6).map(|i| random(1 + i % 4, 12, &mut rng)).collect();
    let expected = naive_scores(&params, &question, &views);

    let seqs: Vec<EmbeddingSeq> = views
        .iter()
        .enumerate()
        .map(|(i, v)| EmbeddingSeq::new(format!("v{i}"), v.clone()))
        .collect();
    let got = score_views(&EmbeddingSeq::new("q", question), &seqs, &params).unwrap();
    for (a, b) in got.scores.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = SelectorParams::init(SelectorConfig {
        d_in: 8,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_layers: 2,
        seed: 5,
    });
    let q = EmbeddingSeq::new("q", random(3, 8, &mut rng));
    let views: Vec<EmbeddingSeq> = (0..5).map(|i| EmbeddingSeq::new(format!("v{i}"), random(3, 8, &mut rng))).collect();
    let base = score_views(&q, &views, &params).unwrap().scores;
    let perm = [3, 0, 4, 2, 1];
    let permuted: Vec<EmbeddingSeq> = perm.iter().map(|&i| views[i].clone()).collect();
    let scores = score_views(&q, &permuted, &params).unwrap().scores;
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(scores[k], base[i]);
    }
}
