#![allow(dead_code, clippy::needless_range_loop)]

//! Test-only oracles. Nothing here calls the crate's forward or backward
//! code; losses are recomputed from the public parameter fields.

use rand::Rng as _;
use rand_distr::StandardNormal;
use tacle::linear::{Activation, AffineLayer, DenseMatrix, FeatureMap, GradScope, HeadSet, InputSpace, Model};
use tacle::rng::Rng;

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, random_vec(rng, rows * cols, scale)).unwrap()
}

/// Model with random parameters; `classes_per_head` gives the head sizes.
pub fn random_model(rng: &mut Rng, dim: usize, classes_per_head: &[usize], affine: Option<Activation>) -> Model {
    let feature = match affine {
        None => FeatureMap::Identity { dim },
        Some(activation) => FeatureMap::Affine(AffineLayer {
            weights: random_matrix(rng, dim, dim, 0.6),
            bias: random_vec(rng, dim, 0.3),
            activation,
            trainable: true,
        }),
    };
    let mut model = Model::new(feature);
    let mut next = 0;
    for &n in classes_per_head {
        let h = model.add_head((next..next + n).collect());
        next += n;
        model.heads[h].weights = random_matrix(rng, n, dim, 0.7);
        model.heads[h].bias = random_vec(rng, n, 0.3);
    }
    model
}

pub fn oracle_features(model: &Model, x: &[f64]) -> Vec<f64> {
    match &model.feature {
        FeatureMap::Identity { .. } => x.to_vec(),
        FeatureMap::Affine(l) => (0..l.weights.rows())
            .map(|r| {
                let mut v = l.bias[r];
                for c in 0..l.weights.cols() {
                    v += l.weights.get(r, c) * x[c];
                }
                match l.activation {
                    Activation::Identity => v,
                    Activation::Tanh => v.tanh(),
                }
            })
            .collect(),
    }
}

/// Logits of the heads in `heads`, from a feature vector.
pub fn oracle_logits(model: &Model, f: &[f64], heads: HeadSet) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, h) in model.heads.iter().enumerate() {
        if matches!(heads, HeadSet::Only(j) if j != i) {
            continue;
        }
        for r in 0..h.classes.len() {
            let mut v = h.bias[r];
            for c in 0..f.len() {
                v += h.weights.get(r, c) * f[c];
            }
            out.push(v);
        }
    }
    out
}

pub fn oracle_probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `log Σ exp(z) − z[target]`.
pub fn oracle_ce(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// One weighted term: input, target, weight.
pub type Term = (Vec<f64>, usize, f64);

/// `(1/n) Σ w · CE` over `terms` with the given input space.
pub fn oracle_mean_loss(model: &Model, terms: &[Term], scope: GradScope) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    terms
        .iter()
        .map(|(x, y, w)| {
            let f = match scope.input {
                InputSpace::Raw => oracle_features(model, x),
                InputSpace::Feature => x.clone(),
            };
            w * oracle_ce(&oracle_logits(model, &f, scope.heads), *y)
        })
        .sum::<f64>()
        / terms.len() as f64
}

pub fn param_count(model: &mut Model, scope: GradScope) -> usize {
    let mut n = 0;
    model.visit_params_mut(scope, |p| n += p.len());
    n
}

pub fn nudge(model: &mut Model, scope: GradScope, index: usize, delta: f64) {
    let mut offset = 0;
    model.visit_params_mut(scope, |p| {
        if index >= offset && index < offset + p.len() {
            p[index - offset] += delta;
        }
        offset += p.len();
    });
}

/// Central differences of `loss` with respect to every parameter in scope.
pub fn finite_difference(model: &Model, scope: GradScope, h: f64, loss: impl Fn(&Model) -> f64) -> Vec<f64> {
    let mut m = model.clone();
    let n = param_count(&mut m, scope);
    (0..n)
        .map(|j| {
            nudge(&mut m, scope, j, h);
            let up = loss(&m);
            nudge(&mut m, scope, j, -2.0 * h);
            let down = loss(&m);
            nudge(&mut m, scope, j, h);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst violation of `|a − n| ≤ max(rel · max(|a|, |n|), abs_floor)`;
/// returns the largest ratio of error to allowance (≤ 1 passes).
pub fn worst_gradient_ratio(analytic: &[f64], numeric: &[f64], rel: f64, abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient layouts differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let allowance = (rel * a.abs().max(n.abs())).max(abs_floor);
            (a - n).abs() / allowance
        })
        .fold(0.0, f64::max)
}

/// Spearman rank correlation (no ties expected).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
