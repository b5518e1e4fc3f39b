use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::model::ParamStore;
use crate::numerics::Tensor;

pub const PCA_TOLERANCE: f64 = 1e-10;
const MAX_ITERS: usize = 100_000;
const POLISH_ITERS: usize = 1_000;

/// Two-component projection of a block's key vectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaProjection {
    pub block_index: usize,
    /// `t × 2` coordinates, one row per slot.
    pub coords: Vec<[f64; 2]>,
    /// Unit principal directions.
    pub components: [Vec<f64>; 2],
    /// Variance along each component over total variance.
    pub explained_variance_ratio: [f64; 2],
}

/// Top eigenpair of symmetric `c` (`d × d`, row-major) by power iteration.
fn power_iteration(c: &[f64], d: usize, start: &[f64]) -> (f64, Vec<f64>) {
    let mut v = start.to_vec();
    normalize(&mut v);
    // past the tolerance, keep going a little while the iterate still moves
    let mut polish = 0;
    for _ in 0..MAX_ITERS {
        let mut w = mat_vec(c, d, &v);
        if normalize(&mut w) == 0.0 {
            return (0.0, v);
        }
        let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta == 0.0 {
            break;
        }
        if delta < PCA_TOLERANCE {
            polish += 1;
            if polish > POLISH_ITERS {
                break;
            }
        }
    }
    let cv = mat_vec(c, d, &v);
    (dot(&v, &cv), v)
}

fn mat_vec(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| dot(&c[i * d..(i + 1) * d], v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flips `v` so its largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let mut idx = 0;
    for i in 0..v.len() {
        if v[i].abs() > v[idx].abs() {
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Centers the rows of `x` (`t × d`) and projects them onto the top two
/// principal directions, found by power iteration with deflation.
pub fn pca_2d(x: &Tensor) -> Result<PcaProjection> {
    let (t, d) = x.dims2();
    if t < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 rows, got {t}")));
    }
    if d < 2 {
        return Err(Error::Config(format!("PCA to 2-D needs at least 2 columns, got {d}")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..t {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / t as f64;
        }
    }
    let centered: Vec<Vec<f64>> = (0..t)
        .map(|r| x.row(r).iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j] / (t - 1) as f64;
            }
        }
    }
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let start = Tensor::uniform(&[d], 1.0, &mut rng).into_data();
    let (l1, mut v1) = power_iteration(&cov, d, &start);
    fix_sign(&mut v1);
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    // start orthogonal to the first direction
    let mut start2 = Tensor::uniform(&[d], 1.0, &mut rng).into_data();
    let proj = dot(&start2, &v1);
    start2.iter_mut().zip(&v1).for_each(|(s, v)| *s -= proj * v);
    let (l2, mut v2) = power_iteration(&cov, d, &start2);
    let proj = dot(&v2, &v1);
    v2.iter_mut().zip(&v1).for_each(|(s, v)| *s -= proj * v);
    normalize(&mut v2);
    fix_sign(&mut v2);

    let ratio = |l: f64| if total > 0.0 { (l / total).clamp(0.0, 1.0) } else { 0.0 };
    Ok(PcaProjection {
        block_index: 0,
        coords: centered.iter().map(|r| [dot(r, &v1), dot(r, &v2)]).collect(),
        explained_variance_ratio: [ratio(l1), ratio(l2.max(0.0))],
        components: [v1, v2],
    })
}

/// PCA of the key matrix of one block of `bank`.
pub fn export_memory_pca(store: &ParamStore, bank: &MemoryBank, block_index: usize) -> Result<PcaProjection> {
    let keys = bank.block_keys(store, block_index)?;
    let mut p = pca_2d(keys)?;
    p.block_index = block_index;
    Ok(p)
}

pub const PCA_HEADER: &str = "slot_index,x,y,block_index";

pub fn pca_csv(p: &PcaProjection) -> String {
    let mut s = String::from(PCA_HEADER);
    s.push('\n');
    for (i, [x, y]) in p.coords.iter().enumerate() {
        s.push_str(&format!("{i},{x:?},{y:?},{}\n", p.block_index));
    }
    s
}
