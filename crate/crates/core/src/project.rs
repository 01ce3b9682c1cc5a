//! Exact t-SNE projection of sample embeddings to 2-D, plus a static SVG
//! scatter plot and a coordinate TSV for inspection.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// Input-affinity multiplier during the first `exaggeration_iters`.
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    /// Iteration at which momentum switches to its final value.
    pub momentum_switch_iter: usize,
    pub seed: u64,
    /// Entropy tolerance for the per-point sigma bisection.
    pub sigma_tolerance: f64,
    pub sigma_max_steps: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 5.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 100,
            learning_rate: 200.0,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch_iter: 250,
            seed: 0,
            sigma_tolerance: 1e-5,
            sigma_max_steps: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// One (x, y) row per input point.
    pub coordinates: Vec<[f64; 2]>,
    /// KL divergence of the final layout against the plain affinities.
    pub final_kl: f64,
    /// KL right after early exaggeration ends.
    pub kl_post_exaggeration: f64,
}

fn squared_distances(data: &[Vec<f64>]) -> Vec<f64> {
    let n = data.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for (a, b) in data[i].iter().zip(&data[j]) {
                let diff = a - b;
                acc += diff * diff;
            }
            d[i * n + j] = acc;
            d[j * n + i] = acc;
        }
    }
    d
}

/// Conditional affinities p_{j|i} with per-point precision found by
/// bisection so that each row's entropy hits log(perplexity).
fn conditional_affinities(dists: &[f64], n: usize, cfg: &TsneConfig) -> Vec<f64> {
    let target = cfg.perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        for _ in 0..cfg.sigma_max_steps {
            let mut sum = 0.0;
            for j in 0..n {
                if i == j {
                    p[i * n + j] = 0.0;
                    continue;
                }
                let v = (-beta * dists[i * n + j]).exp();
                p[i * n + j] = v;
                sum += v;
            }
            let mut entropy = 0.0;
            if sum > 0.0 {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let q = p[i * n + j] / sum;
                    p[i * n + j] = q;
                    if q > 1e-300 {
                        entropy -= q * q.ln();
                    }
                }
            }
            let gap = entropy - target;
            if gap.abs() < cfg.sigma_tolerance {
                break;
            }
            if gap > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_finite() {
                    (beta + beta_max) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                beta_max = beta;
                beta = if beta_min.is_finite() {
                    (beta + beta_min) / 2.0
                } else {
                    beta / 2.0
                };
            }
        }
    }
    p
}

/// Symmetrized joint affinities with the usual floor.
fn joint_affinities(cond: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    for i in 0..n {
        p[i * n + i] = 1e-12;
    }
    p
}

/// Student-t kernel over the 2-D layout; returns (q, sum) with q holding the
/// unnormalized kernel values.
fn student_t_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut q = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            q[i * n + j] = v;
            q[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (q, sum)
}

fn kl_divergence(p: &[f64], q_raw: &[f64], q_sum: f64, n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[i * n + j];
            let qij = (q_raw[i * n + j] / q_sum).max(1e-12);
            kl += pij * (pij / qij).ln();
        }
    }
    kl
}

/// Exact O(n²) t-SNE with the configured gradient schedule.
pub fn tsne(data: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = data.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "t-SNE needs at least 3 points, got {n}"
        )));
    }
    if cfg.perplexity >= n as f64 {
        return Err(Error::Config(format!(
            "perplexity {} must be below the point count {n}",
            cfg.perplexity
        )));
    }
    if cfg.perplexity <= 0.0 || cfg.iterations < 1 {
        return Err(Error::Config("perplexity and iterations must be positive".into()));
    }
    let dim = data.first().map_or(0, |r| r.len());
    if data.iter().any(|r| r.len() != dim) {
        return Err(Error::Dimension("embedding lengths differ".into()));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input to t-SNE".into()));
    }

    let dists = squared_distances(data);
    let cond = conditional_affinities(&dists, n, cfg);
    let p = joint_affinities(&cond, n);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            [
                1e-4 * gaussian(&mut rng),
                1e-4 * gaussian(&mut rng),
            ]
        })
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut kl_post_exaggeration = f64::INFINITY;

    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < cfg.momentum_switch_iter {
            cfg.momentum_initial
        } else {
            cfg.momentum_final
        };
        let (q_raw, q_sum) = student_t_kernel(&y);
        let mut grad = vec![[0.0f64; 2]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pij = exaggeration * p[i * n + j];
                let qij = (q_raw[i * n + j] / q_sum).max(1e-12);
                let mult = 4.0 * (pij - qij) * q_raw[i * n + j];
                grad[i][0] += mult * (y[i][0] - y[j][0]);
                grad[i][1] += mult * (y[i][1] - y[j][1]);
            }
        }
        for i in 0..n {
            for k in 0..2 {
                velocity[i][k] = momentum * velocity[i][k] - cfg.learning_rate * grad[i][k];
                y[i][k] += velocity[i][k];
                if !y[i][k].is_finite() {
                    return Err(Error::Numeric(format!(
                        "t-SNE layout diverged at iteration {iter}"
                    )));
                }
            }
        }
        if iter + 1 == cfg.exaggeration_iters {
            let (q2, s2) = student_t_kernel(&y);
            kl_post_exaggeration = kl_divergence(&p, &q2, s2, n);
        }
    }

    let (q_raw, q_sum) = student_t_kernel(&y);
    let final_kl = kl_divergence(&p, &q_raw, q_sum, n);
    if !final_kl.is_finite() {
        return Err(Error::Numeric("non-finite KL divergence".into()));
    }
    Ok(TsneResult {
        coordinates: y,
        final_kl,
        kl_post_exaggeration,
    })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Entropy of each affinity row, for checking the perplexity calibration.
pub fn affinity_row_entropies(data: &[Vec<f64>], cfg: &TsneConfig) -> Result<Vec<f64>> {
    let n = data.len();
    if n < 3 || cfg.perplexity >= n as f64 {
        return Err(Error::Config("need at least 3 points and perplexity < n".into()));
    }
    let dists = squared_distances(data);
    let cond = conditional_affinities(&dists, n, cfg);
    Ok((0..n)
        .map(|i| {
            let mut h = 0.0;
            for j in 0..n {
                let q = cond[i * n + j];
                if q > 1e-300 {
                    h -= q * q.ln();
                }
            }
            h
        })
        .collect())
}

/// Mean silhouette of the 2-D layout against integer labels.
pub fn silhouette(coords: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if coords.len() != labels.len() || coords.is_empty() {
        return Err(Error::Dimension("coordinates and labels must align".into()));
    }
    let n = coords.len();
    let dist = |a: usize, b: usize| -> f64 {
        let dx = coords[a][0] - coords[b][0];
        let dy = coords[a][1] - coords[b][1];
        (dx * dx + dy * dy).sqrt()
    };
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut same = Vec::new();
        let mut other_means = Vec::new();
        for &c in &classes {
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c && j != i).collect();
            if members.is_empty() {
                continue;
            }
            let mean = members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64;
            if c == labels[i] {
                same.push(mean);
            } else {
                other_means.push(mean);
            }
        }
        let a = same.first().copied().unwrap_or(0.0);
        let b = other_means.iter().copied().fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let s = if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
            total += s;
        }
    }
    Ok(total / n as f64)
}

/// Format a coordinate at nine significant digits.
fn format_coord(v: f64) -> String {
    format!("{v:.8e}")
}

/// Write the coordinate TSV: `sample_id<TAB>x<TAB>y<TAB>label`.
pub fn write_coordinates_tsv(
    path: &Path,
    ids: &[String],
    coords: &[[f64; 2]],
    labels: &[usize],
) -> Result<()> {
    if ids.len() != coords.len() || ids.len() != labels.len() {
        return Err(Error::Dimension("ids, coordinates, labels must align".into()));
    }
    let mut out = String::from("sample_id\tx\ty\tlabel\n");
    for ((id, c), l) in ids.iter().zip(coords).zip(labels) {
        let _ = writeln!(out, "{id}\t{}\t{}\t{l}", format_coord(c[0]), format_coord(c[1]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Scatter plot: blue circles for label 0, orange squares for label 1.
pub fn emit_plot(path: &Path, coords: &[[f64; 2]], labels: &[usize]) -> Result<()> {
    if coords.is_empty() {
        return Err(Error::EmptyInput("no points to plot".into()));
    }
    if coords.len() != labels.len() {
        return Err(Error::Dimension("coordinates and labels must align".into()));
    }
    let (width, height, pad) = (640.0, 480.0, 40.0);
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in coords {
        min_x = min_x.min(c[0]);
        max_x = max_x.max(c[0]);
        min_y = min_y.min(c[1]);
        max_y = max_y.max(c[1]);
    }
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);
    let sx = |x: f64| pad + (x - min_x) / span_x * (width - 2.0 * pad);
    let sy = |y: f64| height - pad - (y - min_y) / span_y * (height - 2.0 * pad);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"12\">label 0: blue circle, label 1: orange square</text>"
    );
    for (c, &l) in coords.iter().zip(labels) {
        let (x, y) = (sx(c[0]), sy(c[1]));
        if l == 0 {
            let _ = writeln!(
                svg,
                "  <circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"#1f77b4\" fill-opacity=\"0.8\"/>"
            );
        } else {
            let _ = writeln!(
                svg,
                "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"8\" height=\"8\" fill=\"#ff7f0e\" fill-opacity=\"0.8\"/>",
                x - 4.0,
                y - 4.0
            );
        }
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}
