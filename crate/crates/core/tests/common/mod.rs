//! Shared test support: central finite-difference gradient checking and
//! random fixture builders.
//!
//! Compiled into each test target separately, so any one target may use
//! only part of it.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use setpool::aggregate::{Sample, SequenceRecord};
use setpool::numerics::{ParamStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_RELATIVE_TOLERANCE: f64 = 1e-4;

/// Relative disagreement with a floor so near-zero gradients compare on an
/// absolute scale.
pub fn fd_mismatch(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-2);
    (analytic - numeric).abs() / scale
}

/// Check every parameter gradient of a scalar loss against central finite
/// differences in f64. `build_loss` must be a pure function of the store.
///
/// Returns (scalars checked, worst mismatch); panics on the first scalar
/// exceeding the tolerance.
pub fn check_gradients(
    store: &mut ParamStore<f64>,
    context: &str,
    build_loss: &dyn Fn(&mut Tape<f64>, &mut ParamStore<f64>) -> Var,
) -> (usize, f64) {
    // Analytic pass.
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, store);
    tape.backward(loss, store).expect("backward");
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(name, _, grad)| (name.to_string(), grad.data().to_vec()))
        .collect();

    let eval = |store: &mut ParamStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, store);
        tape.value(loss).item()
    };

    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, grads) in &analytic {
        for i in 0..grads.len() {
            let original = store.value(name).unwrap().data()[i];

            let bump = |store: &mut ParamStore<f64>, v: f64| {
                let mut t = store.value(name).unwrap().clone();
                t.data_mut()[i] = v;
                store.set_value(name, t).unwrap();
            };
            bump(store, original + FD_STEP);
            let plus = eval(store);
            bump(store, original - FD_STEP);
            let minus = eval(store);
            bump(store, original);

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let mismatch = fd_mismatch(grads[i], numeric);
            assert!(
                mismatch < FD_RELATIVE_TOLERANCE,
                "{context}: parameter {name}[{i}] analytic {} vs numeric {numeric} (mismatch {mismatch:.3e})",
                grads[i]
            );
            worst = worst.max(mismatch);
            checked += 1;
        }
    }
    store.zero_grads();
    (checked, worst)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn random_sample(n_records: usize, dim: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sample {
        id: format!("s{seed}"),
        records: (0..n_records)
            .map(|_| SequenceRecord {
                embedding: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                abundance: rng.random_range(0.1..10.0),
            })
            .collect(),
        label: None,
    }
}

/// Deterministic record-order permutation of a sample.
pub fn permuted_sample(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    for i in (1..out.records.len()).rev() {
        let j = rng.random_range(0..=i);
        out.records.swap(i, j);
    }
    out
}
