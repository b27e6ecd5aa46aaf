#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use psm_core::simulate::ScenarioConfig;
use psm_core::GlmFamily;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random weighted GLM instance with owned data.
pub struct Instance {
    pub family: GlmFamily,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w: Vec<f64>,
}

/// `n x p` standard normal design, moderate coefficients, nonnegative weights
/// with roughly one row in ten zeroed.
pub fn random_instance(seed: u64, family: GlmFamily, n: usize, p: usize) -> Instance {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal));
    let beta = DVector::from_fn(p, |_, _| r.random_range(-0.6..0.6));
    let eta = &x * &beta;
    let y = DVector::from_fn(n, |i, _| match family {
        GlmFamily::Logistic => {
            let mu = 1.0 / (1.0 + (-eta[i] - 0.2).exp());
            if r.random::<f64>() < mu {
                1.0
            } else {
                0.0
            }
        }
        GlmFamily::Gaussian { .. } => eta[i] + 0.3 + 0.5 * r.sample::<f64, _>(StandardNormal),
    });
    let w = (0..n)
        .map(|_| {
            if r.random::<f64>() < 0.1 {
                0.0
            } else {
                r.random_range(0.0..2.0)
            }
        })
        .collect();
    Instance { family, x, y, w }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn oracle_loss(family: GlmFamily, y: f64, eta: f64) -> f64 {
    match family {
        GlmFamily::Logistic => softplus(eta) - y * eta,
        GlmFamily::Gaussian { .. } => 0.5 * eta * eta - y * eta,
    }
}

fn oracle_mean(family: GlmFamily, eta: f64) -> f64 {
    match family {
        GlmFamily::Logistic => 1.0 / (1.0 + (-eta).exp()),
        GlmFamily::Gaussian { .. } => eta,
    }
}

/// Accelerated proximal gradient (FISTA with function-value restart) on
/// `(1/W) sum w_i loss(y_i, b0 + x_i'beta) + lambda ||beta||_1`.
/// Runs until the scaled gradient mapping is below `1e-11` in max norm.
pub fn fista_oracle(inst: &Instance, lambda: f64) -> (f64, DVector<f64>) {
    let (n, p) = inst.x.shape();
    let total: f64 = inst.w.iter().sum();
    let curv = match inst.family {
        GlmFamily::Logistic => 0.25,
        GlmFamily::Gaussian { .. } => 1.0,
    };
    // Largest eigenvalue of the weighted Gram matrix of [1, X], by power iteration.
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { inst.x[(i, j - 1)] });
    let weighted = DMatrix::from_fn(n, p + 1, |i, j| design[(i, j)] * inst.w[i] / total);
    let gram = design.transpose() * weighted;
    let mut u = DVector::from_element(p + 1, 1.0);
    let mut top = 0.0;
    for _ in 0..500 {
        let next = &gram * &u;
        top = next.norm();
        u = next / top;
    }
    let lip = curv * top * 1.01;
    let step = 1.0 / lip;

    let objective = |v: &DVector<f64>| -> f64 {
        let eta = &inst.x * v.rows(1, p) + DVector::from_element(n, v[0]);
        let loss: f64 = (0..n)
            .map(|i| inst.w[i] * oracle_loss(inst.family, inst.y[i], eta[i]))
            .sum::<f64>()
            / total;
        loss + lambda * v.rows(1, p).iter().map(|b| b.abs()).sum::<f64>()
    };
    let gradient = |v: &DVector<f64>| -> DVector<f64> {
        let eta = &inst.x * v.rows(1, p) + DVector::from_element(n, v[0]);
        let r = DVector::from_fn(n, |i, _| {
            inst.w[i] * (oracle_mean(inst.family, eta[i]) - inst.y[i]) / total
        });
        let mut g = DVector::zeros(p + 1);
        g[0] = r.sum();
        g.rows_mut(1, p).copy_from(&(inst.x.transpose() * &r));
        g
    };
    let prox = |v: DVector<f64>| -> DVector<f64> {
        let mut out = v;
        for j in 1..=p {
            let a = out[j];
            out[j] = a.signum() * (a.abs() - step * lambda).max(0.0);
        }
        out
    };

    let mut x = DVector::zeros(p + 1);
    let mut fx = objective(&x);
    let mut yv = x.clone();
    let mut t = 1.0f64;
    for _ in 0..2_000_000usize {
        let xn = prox(&yv - gradient(&yv) * step);
        let fxn = objective(&xn);
        if fxn > fx && t > 1.0 {
            yv = x.clone();
            t = 1.0;
            continue;
        }
        let tn = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        yv = &xn + (&xn - &x) * ((t - 1.0) / tn);
        x = xn;
        fx = fxn;
        t = tn;
        let mapped = prox(&x - gradient(&x) * step);
        if (&x - mapped).amax() * lip < 1e-11 {
            break;
        }
    }
    (x[0], x.rows(1, p).into_owned())
}

/// Small scenario for quick end-to-end runs.
pub fn small_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n0: 300,
        n_k: 200,
        n_sources: 3,
        p: 30,
        seed,
        ..Default::default()
    }
}

/// Smallest total of squared column distances over all column orders.
pub fn brute_force_alignment(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let c = est.ncols();
    let mut best = (Vec::new(), f64::INFINITY);
    let mut perm: Vec<usize> = (0..c).collect();
    permute_all(&mut perm, 0, &mut |pm| {
        let d: f64 = (0..c)
            .map(|k| (est.column(pm[k]) - truth.column(k)).norm_squared())
            .sum();
        if d < best.1 {
            best = (pm.to_vec(), d);
        }
    });
    best
}

fn permute_all(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute_all(v, k + 1, f);
        v.swap(k, i);
    }
}
