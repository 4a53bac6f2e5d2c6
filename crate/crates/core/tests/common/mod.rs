//! Naive reference implementations shared by the integration tests.

#![allow(dead_code)]

use lcr_ser::data::{Catalog, Instance, RecEvent, SearchEvent, Window};
use lcr_ser::head::aggregate_target_aware;
use lcr_ser::model::{Aggregation, Model, ModelConfig};
use lcr_ser::nn::{
    feed_forward, finite_diff_grad_check, multi_head_attention, AttentionWeights, FeedForwardWeights, GradCheckOptions, Mask,
    ParamStore, Tape, Tensor2, Var,
};
use lcr_ser::objectives::{bce_loss, instance_loss, tcl_loss, Distance, TrainHyperparams};
use lcr_ser::rl::{advantages, grpo_loss_on, kl_estimate, PolicySnapshot, RewardMetric, RlSample, RolloutConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const CASES: usize = 100;
pub const TENSOR_TOL: f64 = 1e-6;
pub const SCALAR_TOL: f64 = 1e-9;

pub type Mat = Vec<Vec<f64>>;

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect()
}

pub fn tensor(m: &Mat) -> Tensor2 {
    Tensor2::from_rows(m).unwrap()
}

pub fn rows_of(t: &Tensor2) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn naive_attention(q: &Mat, k: &Mat, v: &Mat, allowed: &dyn Fn(usize, usize) -> bool, w: &[Mat; 4], heads: usize) -> Mat {
    let (qp, kp, vp) = (matmul(q, &w[0]), matmul(k, &w[1]), matmul(v, &w[2]));
    let d = q[0].len();
    let dh = d / heads;
    let mut joined = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let mut scores = Vec::new();
            for j in 0..k.len() {
                if allowed(i, j) {
                    let s: f64 = cols.clone().map(|c| qp[i][c] * kp[j][c]).sum();
                    scores.push((j, s / (dh as f64).sqrt()));
                }
            }
            let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
            for &(j, s) in &scores {
                let p = (s - max).exp() / z;
                for c in cols.clone() {
                    joined[i][c] += p * vp[j][c];
                }
            }
        }
    }
    matmul(&joined, &w[3])
}

pub fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn naive_ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    let mut out = Vec::new();
    for row in x {
        let hidden: Vec<f64> = (0..b1.len())
            .map(|j| naive_gelu(b1[j] + row.iter().enumerate().map(|(i, v)| v * w1[i][j]).sum::<f64>()))
            .collect();
        out.push(
            (0..b2.len())
                .map(|j| b2[j] + hidden.iter().enumerate().map(|(i, v)| v * w2[i][j]).sum::<f64>())
                .collect(),
        );
    }
    out
}

pub fn naive_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn naive_cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

pub fn naive_ndcg(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

fn report(name: &str, worst: f64, tol: f64) -> Result<f64, String> {
    if worst <= tol {
        Ok(worst)
    } else {
        Err(format!("{name}: max error {worst:e} exceeds {tol:e}"))
    }
}

pub fn check_attention(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let heads = [1, 2, 4][case % 3];
        let d = heads * rng.gen_range(1..4);
        let nq = rng.gen_range(1..6);
        let nk = rng.gen_range(1..6);
        let q = random_mat(&mut rng, nq, d);
        let k = random_mat(&mut rng, nk, d);
        let v = random_mat(&mut rng, nk, d);
        let w = [0; 4].map(|_| random_mat(&mut rng, d, d));
        let weights = AttentionWeights {
            wq: tensor(&w[0]),
            wk: tensor(&w[1]),
            wv: tensor(&w[2]),
            wo: tensor(&w[3]),
            heads,
        };
        let causal = case % 2 == 0 && nq == nk;
        let allowed = move |i: usize, j: usize| !causal || j <= i;
        let mask = Mask::from_fn(nq, nk, allowed);
        let got = multi_head_attention(&tensor(&q), &tensor(&k), &tensor(&v), Some(&mask), &weights).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(&rows_of(&got), &naive_attention(&q, &k, &v, &allowed, &w, heads)));
    }
    report("attention", worst, TENSOR_TOL)
}

pub fn check_ffn(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (n, d, hidden) = (rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..9));
        let x = random_mat(&mut rng, n, d);
        let w1 = random_mat(&mut rng, d, hidden);
        let b1 = random_mat(&mut rng, 1, hidden);
        let w2 = random_mat(&mut rng, hidden, d);
        let b2 = random_mat(&mut rng, 1, d);
        let weights = FeedForwardWeights {
            w1: tensor(&w1),
            b1: tensor(&b1),
            w2: tensor(&w2),
            b2: tensor(&b2),
        };
        let got = feed_forward(&tensor(&x), &weights).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(&rows_of(&got), &naive_ffn(&x, &w1, &b1[0], &w2, &b2[0])));
    }
    report("feed-forward", worst, TENSOR_TOL)
}

pub fn check_query_mean(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalog = Catalog {
        users: 1,
        items: 5,
        words: 30,
    };
    let mut config = ModelConfig::new(catalog, Window { max_search: 2, max_rec: 2 }, 6);
    config.init_std = 0.5;
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let model = Model::new(config.clone(), seed ^ case as u64).map_err(|e| e.to_string())?;
        let words: Vec<u32> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..30)).collect();
        let table = model.store.value(model.params.word);
        let mut expect = vec![0.0; 6];
        for &w in &words {
            for (e, x) in expect.iter_mut().zip(table.row(w as usize)) {
                *e += x / words.len() as f64;
            }
        }
        let mut tape = Tape::new();
        let got = lcr_ser::encoder::embed_query(&mut tape, &model, &words).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(&rows_of(tape.value(got)), &vec![expect]));
    }
    report("query mean", worst, TENSOR_TOL)
}

pub fn check_target_aggregation(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (c, n, d) = (rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..7));
        let e = random_mat(&mut rng, c, d);
        let h = random_mat(&mut rng, n, d);
        let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        valid[rng.gen_range(0..n)] = true;
        let mut expect = Vec::new();
        for q in &e {
            let scores: Vec<f64> = h
                .iter()
                .map(|row| q.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().zip(&valid).filter(|p| *p.1).map(|p| *p.0).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().zip(&valid).filter(|p| *p.1).map(|p| (p.0 - max).exp()).sum();
            let mut out = vec![0.0; d];
            for (j, row) in h.iter().enumerate() {
                if valid[j] {
                    let a = (scores[j] - max).exp() / z;
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += a * x;
                    }
                }
            }
            expect.push(out);
        }
        let mut tape = Tape::new();
        let qv = tape.constant(tensor(&e));
        let hv = tape.constant(tensor(&h));
        let got = aggregate_target_aware(&mut tape, qv, hv, hv, &valid).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(&rows_of(tape.value(got)), &expect));
    }
    report("target-aware aggregation", worst, TENSOR_TOL)
}

pub fn check_bce(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let batch: Vec<(f64, f64)> = (0..rng.gen_range(1..20))
            .map(|_| (rng.gen_range(0.001..0.999), f64::from(rng.gen_range(0..2u8))))
            .collect();
        let mut expect = 0.0;
        for &(p, y) in &batch {
            expect -= if y == 1.0 { p.ln() } else { (1.0 - p).ln() };
        }
        expect /= batch.len() as f64;
        let got = bce_loss(&batch).map_err(|e| e.to_string())?;
        worst = worst.max((got - expect).abs());
    }
    report("bce", worst, SCALAR_TOL)
}

pub fn check_tcl(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let d = rng.gen_range(1..8);
        let v = random_mat(&mut rng, 5, d);
        let margin = rng.gen_range(0.0..1.0);
        let (distance, dist): (Distance, fn(&[f64], &[f64]) -> f64) = if case % 2 == 0 {
            (Distance::Euclidean, naive_euclidean)
        } else {
            (Distance::Cosine, naive_cosine_distance)
        };
        let hinge = |h: &[f64], plain: &[f64]| {
            let x = dist(&v[0], h) - dist(&v[0], plain) + margin;
            if x > 0.0 {
                x
            } else {
                0.0
            }
        };
        let expect = hinge(&v[1], &v[3]) + hinge(&v[2], &v[4]);
        let got = tcl_loss(&v[0], &v[1], &v[2], &v[3], &v[4], margin, distance).total;
        worst = worst.max((got - expect).abs());
    }
    report("tcl", worst, SCALAR_TOL)
}

pub fn check_advantages(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let rewards: Vec<f64> = (0..rng.gen_range(2..9)).map(|_| rng.gen_range(0.0..1.0)).collect();
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let mut var = 0.0;
        for r in &rewards {
            var += (r - mean) * (r - mean);
        }
        let std = (var / n).sqrt();
        let got = advantages(&rewards);
        for (a, r) in got.iter().zip(&rewards) {
            worst = worst.max((a - (r - mean) / std).abs());
        }
    }
    report("advantages", worst, SCALAR_TOL)
}

pub fn check_kl(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let p_ref: f64 = rng.gen_range(0.01..0.99);
        let p_cur: f64 = rng.gen_range(0.01..0.99);
        let r = p_ref / p_cur;
        worst = worst.max((kl_estimate(p_ref, p_cur) - (r - r.ln() - 1.0)).abs());
    }
    report("kl", worst, SCALAR_TOL)
}

pub fn oracle_suite(seed: u64) -> Vec<(&'static str, Result<f64, String>)> {
    vec![
        ("attention", check_attention(seed)),
        ("feed-forward", check_ffn(seed)),
        ("query mean", check_query_mean(seed)),
        ("target-aware aggregation", check_target_aggregation(seed)),
        ("bce", check_bce(seed)),
        ("tcl", check_tcl(seed)),
        ("advantages", check_advantages(seed)),
        ("kl", check_kl(seed)),
    ]
}

pub const GRAD_TOL: f64 = 1e-4;

fn grad_config(aggregation: Aggregation, layer_norm: bool) -> ModelConfig {
    let mut c = ModelConfig::new(
        Catalog {
            users: 2,
            items: 12,
            words: 6,
        },
        Window {
            max_search: 3,
            max_rec: 3,
        },
        8,
    );
    c.steps = 2;
    c.aggregation = aggregation;
    c.layer_norm = layer_norm;
    c.init_std = 0.3;
    c
}

pub fn grad_instance() -> Instance {
    let search = (0..3)
        .map(|i| SearchEvent {
            timestamp: 10 * i,
            query: vec![1 + i as u32, 5],
            clicked: if i == 1 { vec![] } else { vec![2 + i as u32] },
        })
        .collect();
    let rec = (0..3)
        .map(|i| RecEvent {
            timestamp: 10 * i + 5,
            item: 7 + i as u32,
        })
        .collect();
    Instance {
        user: 1,
        search,
        rec,
        target: 4,
        timestamp: 100,
        label: 1.0,
    }
}

fn max_relative_error(model: Model, loss: impl Fn(&mut Tape, &Model) -> lcr_ser::Result<Var>) -> f64 {
    let Model { config, mut store, .. } = model;
    let f = |tape: &mut Tape, s: &ParamStore| -> lcr_ser::Result<Var> {
        let m = Model::from_store(config.clone(), s.clone())?;
        loss(tape, &m)
    };
    let opts = GradCheckOptions {
        max_entries_per_param: None,
        ..GradCheckOptions::default()
    };
    finite_diff_grad_check(f, &mut store, opts).unwrap().max_relative_error
}

/// Worst relative finite-difference error of the training loss under three
/// model configurations.
pub fn training_loss_grad_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (agg, ln, distance) in [
        (Aggregation::TargetAware, false, Distance::Euclidean),
        (Aggregation::TargetAwareProjected, true, Distance::Cosine),
        (Aggregation::Mean, false, Distance::Euclidean),
    ] {
        let model = Model::new(grad_config(agg, ln), 3).unwrap();
        let hp = TrainHyperparams {
            lambda_tcl: 0.5,
            distance,
            ..TrainHyperparams::default()
        };
        let inst = grad_instance();
        let err = max_relative_error(model, |tape, m| Ok(instance_loss(tape, m, &inst, &[0, 11], &hp)?.objective));
        out.push((format!("{}/ln={ln}/{}", agg.name(), distance.name()), err));
    }
    out
}

pub fn grpo_grad_error() -> f64 {
    let model = Model::new(grad_config(Aggregation::TargetAware, false), 5).unwrap();
    let cfg = RolloutConfig {
        trajectories: 4,
        gamma: 0.5,
        reward: RewardMetric::Ndcg(5),
        pool_size: 6,
        ..RolloutConfig::default()
    };
    let snapshot = PolicySnapshot::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sample = RlSample::prepare(&snapshot, &grad_instance(), &[0, 1, 3, 6, 11], &cfg, &mut rng).unwrap();
    max_relative_error(model, |tape, m| Ok(grpo_loss_on(tape, m, &sample, 0.3, None)?.0.expect("kept trajectories")))
}
