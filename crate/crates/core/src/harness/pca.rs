//! Two-component PCA by power iteration with deflation.

use crate::error::{DivaError, Result};
use crate::tensor::Tensor;

const ITERATIONS: usize = 200;
const TOLERANCE: f64 = 1e-7;

/// Fitted components, their eigenvalues and the projected data.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub projected: Tensor,
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn matvec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| m[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Largest-magnitude coordinate made positive (first one on ties).
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn power_iteration(cov: &[f64], d: usize, start: Vec<f64>) -> (Vec<f64>, f64) {
    let mut v = start;
    normalize(&mut v);
    for _ in 0..ITERATIONS {
        let mut next = matvec(cov, d, &v);
        if normalize(&mut next) == 0.0 {
            return (v, 0.0);
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < TOLERANCE {
            break;
        }
    }
    let lambda = v.iter().zip(matvec(cov, d, &v)).map(|(a, b)| a * b).sum();
    (v, lambda)
}

/// Unit vector orthogonal to `u` built from the first usable basis vector.
fn orthogonal_to(u: &[f64]) -> Vec<f64> {
    for k in 0..u.len() {
        let mut e: Vec<f64> = (0..u.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
        let dot = u[k];
        e.iter_mut().zip(u).for_each(|(x, ui)| *x -= dot * ui);
        if normalize(&mut e) > 1e-6 {
            return e;
        }
    }
    unreachable!("dimension at least two")
}

/// Fits the top two principal components of the rows of `x` (`[n, d]`).
pub fn pca2_fit(x: &Tensor) -> Result<Pca2> {
    let (n, d) = match x.shape() {
        [n, d] => (*n, *d),
        s => {
            return Err(DivaError::InvalidArgument(format!(
                "PCA expects an [n, d] matrix, got {s:?}"
            )))
        }
    };
    if n < 2 || d < 2 {
        return Err(DivaError::InvalidArgument(format!(
            "PCA needs n >= 2 and d >= 2, got [{n}, {d}]"
        )));
    }
    let data = x.data();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(&data[r * d..(r + 1) * d]) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = (0..n * d).map(|k| data[k] as f64 - mean[k % d]).collect();
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = &centered[r * d..(r + 1) * d];
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(trace > 0.0) {
        return Err(DivaError::Numerical("rank-0 data: all rows are identical".into()));
    }
    let start: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * (i % 7) as f64).collect();
    let (mut v1, l1) = power_iteration(&cov, d, start);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut v2, mut l2) = power_iteration(&deflated, d, orthogonal_to(&v1));
    // Re-orthogonalise against round-off, and fall back when the residual
    // spectrum is numerically zero.
    let dot: f64 = v1.iter().zip(&v2).map(|(a, b)| a * b).sum();
    v2.iter_mut().zip(&v1).for_each(|(x, u)| *x -= dot * u);
    if normalize(&mut v2) < 1e-6 || l2 <= trace * 1e-12 {
        v2 = orthogonal_to(&v1);
        l2 = v2.iter().zip(matvec(&cov, d, &v2)).map(|(a, b)| a * b).sum::<f64>().max(0.0);
    }
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    let mut projected = Vec::with_capacity(n * 2);
    for r in 0..n {
        let row = &centered[r * d..(r + 1) * d];
        for v in [&v1, &v2] {
            projected.push(row.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() as f32);
        }
    }
    Ok(Pca2 {
        mean,
        components: [v1, v2],
        eigenvalues: [l1, l2],
        projected: Tensor::new(vec![n, 2], projected)?,
    })
}

/// Projection of the rows of `x` onto their top two principal components.
pub fn pca2(x: &Tensor) -> Result<Tensor> {
    Ok(pca2_fit(x)?.projected)
}
