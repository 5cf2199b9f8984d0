#![allow(dead_code)]

use std::path::PathBuf;

use fieldcraft::likelihood::{Dataset, NoiseModel};
use fieldcraft::model::{ForwardPass, GenerativeModel, LatentVector};
use fieldcraft::{rng, Config};

/// Row-major Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
            .unwrap();
        for j in 0..n {
            m.swap(col * n + j, pivot * n + j);
            inv.swap(col * n + j, pivot * n + j);
        }
        let p = m[col * n + col];
        assert!(p.abs() > 1e-300, "singular matrix");
        for j in 0..n {
            m[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for row in 0..n {
            if row != col {
                let f = m[row * n + col];
                for j in 0..n {
                    m[row * n + j] -= f * m[col * n + j];
                    inv[row * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    inv
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues and row-major eigenvectors stored as columns.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// `V f(Λ) V†` of a symmetric matrix.
pub fn symmetric_function(a: &[f64], n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let (vals, vecs) = jacobi_eigen(a, n);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| vecs[i * n + k] * f(vals[k]) * vecs[j * n + k]).sum();
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let x = a[i * k + l];
            for j in 0..m {
                out[i * m + j] += x * b[l * m + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn relative_frobenius(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let reference: f64 = b.iter().map(|y| y * y).sum();
    (diff / reference).sqrt()
}

/// Posterior covariance `(1 + R† N^-1 R)^-1` of a linear problem with a
/// standardized prior, `r` row-major `rows x cols`.
pub fn posterior_covariance(r: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    precision_inverse(&posterior_precision(r, rows, cols, sigma), cols)
}

pub fn posterior_precision(r: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let mut p = matmul(&transpose(r, rows, cols), r, cols, rows, cols);
    for (i, x) in p.iter_mut().enumerate() {
        *x /= sigma * sigma;
        if i / cols == i % cols {
            *x += 1.0;
        }
    }
    p
}

fn precision_inverse(p: &[f64], n: usize) -> Vec<f64> {
    inverse(p, n)
}

/// Dense matrix of an affine model map `x -> d'(x)`, built from forward
/// passes at the origin and at every unit vector.
pub fn dense_response(model: &GenerativeModel<f64>) -> Vec<f64> {
    let layout = model.layout();
    let dim = model.latent_dim();
    let rows = model.data_dim();
    let base = model.forward(&LatentVector::zeros(layout)).unwrap().d_prime;
    let mut r = vec![0.0; rows * dim];
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let d = model
            .forward(&LatentVector::from_flat(layout, &e).unwrap())
            .unwrap()
            .d_prime;
        for i in 0..rows {
            r[i * dim + j] = d[i] - base[i];
        }
    }
    r
}

pub fn workspace_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub struct Simulation {
    pub config: Config,
    pub model: GenerativeModel<f64>,
    pub truth: LatentVector<f64>,
    pub pass: ForwardPass<f64>,
    pub data: Dataset<f64>,
}

/// Ground truth and noisy data drawn from a configuration, following the
/// stream layout of `fieldcraft simulate`.
pub fn simulate(config_rel: &str, seed: u64) -> Simulation {
    let config = Config::load(&workspace_path(config_rel)).unwrap();
    let model: GenerativeModel<f64> = config.model().unwrap();
    let truth = model.sample_latent(seed, rng::stream_id(9, 0, 0));
    let pass = model.forward(&truth).unwrap();
    let sigma = config.noise().unwrap().sigma_for(&pass.d_prime).unwrap();
    let mut r = rng::stream(seed, rng::stream_id(9, 1, 0));
    let n: Vec<f64> = rng::standard_normal_vec(&mut r, pass.d_prime.len());
    let d = pass.d_prime.iter().zip(&n).map(|(a, b)| a + sigma * b).collect();
    let data = Dataset::new(d, NoiseModel::white(sigma, n.len()).unwrap()).unwrap();
    Simulation {
        config,
        model,
        truth,
        pass,
        data,
    }
}
