//! Fully connected classifier head: one hidden layer with ReLU, softmax
//! output, mean cross-entropy loss, Adam updates. With `joint_training` the
//! aggregation strategy runs inside the training graph, so its parameters
//! learn together with the head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, Sample, Strategy};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Init, ParamStore, Real, Tape, Tensor, Var};
use crate::setattn::SetTransformerConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FcnnConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train transformer aggregation parameters end to end with the head.
    pub joint_training: bool,
}

impl Default for FcnnConfig {
    fn default() -> Self {
        FcnnConfig {
            hidden_dim: 128,
            epochs: 10,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            joint_training: true,
        }
    }
}

impl FcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.hidden_dim < 1 {
            return Err(Error::Config("hidden_dim must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss trace of one training run: full-set loss before training and after
/// every epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Head forward pass on the tape: `softmax(relu(x·W1 + b1)·W2 + b2)` without
/// the softmax (logits are returned; the loss applies its own log-sum-exp).
pub fn head_logits<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    x: Var,
    input_dim: usize,
    hidden_dim: usize,
    n_classes: usize,
) -> Result<Var> {
    let w1 = tape.param(store, "head.l1.w", &[input_dim, hidden_dim], Init::UniformFanIn(input_dim))?;
    let b1 = tape.param(store, "head.l1.b", &[hidden_dim], Init::Zeros)?;
    let w2 = tape.param(store, "head.l2.w", &[hidden_dim, n_classes], Init::UniformFanIn(hidden_dim))?;
    let b2 = tape.param(store, "head.l2.b", &[n_classes], Init::Zeros)?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h)?;
    let logits = tape.matmul(h, w2)?;
    tape.add_row(logits, b2)
}

/// How batches enter the graph: re-aggregated every time (joint) or frozen
/// rows computed once.
enum BatchSource<'a, R: Real> {
    Joint {
        samples: &'a [Sample],
        strategy: Strategy,
        st_cfg: &'a SetTransformerConfig,
        budget: usize,
    },
    Frozen(Vec<Tensor<R>>),
}

impl<R: Real> BatchSource<'_, R> {
    fn batch_var(
        &self,
        tape: &mut Tape<R>,
        store: &mut ParamStore<R>,
        indices: &[usize],
    ) -> Result<Var> {
        match self {
            BatchSource::Joint {
                samples,
                strategy,
                st_cfg,
                budget,
            } => {
                let rows = indices
                    .iter()
                    .map(|&i| {
                        aggregate::aggregate_on(tape, store, &samples[i], *strategy, st_cfg, *budget)
                    })
                    .collect::<Result<Vec<Var>>>()?;
                tape.vstack(&rows)
            }
            BatchSource::Frozen(rows) => {
                let parts: Vec<&Tensor<R>> = indices.iter().map(|&i| &rows[i]).collect();
                let stacked = Tensor::vstack(&parts)?;
                tape.input(stacked)
            }
        }
    }
}

/// Result of `train`: the store holds head (and possibly aggregation)
/// parameters; the log tracks full-set loss per epoch.
pub struct FcnnTrainOutcome<R: Real> {
    pub store: ParamStore<R>,
    pub log: TrainLog,
    pub input_dim: usize,
    pub n_classes: usize,
}

/// Train the classifier on labeled samples with the given aggregation
/// strategy. Deterministic for a fixed config seed.
pub fn train<R: Real>(
    samples: &[Sample],
    strategy: Strategy,
    st_cfg: &SetTransformerConfig,
    budget: usize,
    cfg: &FcnnConfig,
) -> Result<FcnnTrainOutcome<R>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("no training samples".into()));
    }
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::Degenerate(format!("sample {} is unlabeled", s.id)))
        })
        .collect::<Result<Vec<usize>>>()?;
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Degenerate(format!(
            "training labels contain {} distinct class(es); need at least 2",
            distinct.len()
        )));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let data_dim = samples[0].dim();
    let input_dim = strategy.output_dim(data_dim, st_cfg);

    let mut store = ParamStore::<R>::new(cfg.seed);

    // Transformer strategies re-aggregate inside the graph when training
    // jointly; everything else is embedded once up front.
    let joint = cfg.joint_training && strategy.is_transformer();
    let source: BatchSource<R> = if joint {
        BatchSource::Joint {
            samples,
            strategy,
            st_cfg,
            budget,
        }
    } else {
        let rows = samples
            .iter()
            .map(|s| {
                let e = aggregate::aggregate(s, strategy, st_cfg, &mut store, budget)?;
                Tensor::from_f64s(vec![1, e.values.len()], &e.values)
            })
            .collect::<Result<Vec<Tensor<R>>>>()?;
        BatchSource::Frozen(rows)
    };

    let full: Vec<usize> = (0..samples.len()).collect();
    let eval_loss = |store: &mut ParamStore<R>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = source.batch_var(&mut tape, store, &full)?;
        let logits = head_logits(&mut tape, store, x, input_dim, cfg.hidden_dim, n_classes)?;
        let loss = tape.cross_entropy_mean(logits, &labels)?;
        Ok(tape.value(loss).item().to_f64())
    };

    let initial_loss = eval_loss(&mut store)?;
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999, 1e-8);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ (epoch as u64 + 1)));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = source.batch_var(&mut tape, &mut store, batch)?;
            let logits = head_logits(&mut tape, &mut store, x, input_dim, cfg.hidden_dim, n_classes)?;
            let loss = tape.cross_entropy_mean(logits, &batch_labels)?;
            tape.backward(loss, &mut store)?;
            opt.step(&mut store);
            store.zero_grads();
        }
        epoch_losses.push(eval_loss(&mut store)?);
    }

    Ok(FcnnTrainOutcome {
        store,
        log: TrainLog {
            initial_loss,
            epoch_losses,
        },
        input_dim,
        n_classes,
    })
}

/// Class probabilities for one already-aggregated embedding row.
pub fn predict_embedding<R: Real>(
    store: &mut ParamStore<R>,
    embedding: &[f64],
    hidden_dim: usize,
    n_classes: usize,
) -> Result<(usize, Vec<f64>)> {
    let input_dim = embedding.len();
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_f64s(vec![1, input_dim], embedding)?)?;
    let logits = head_logits(&mut tape, store, x, input_dim, hidden_dim, n_classes)?;
    let probs = tape.softmax_rows(logits)?;
    let p = tape.value(probs).to_f64_vec();
    Ok((argmax(&p), p))
}

/// Index of the largest value, lower index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::SequenceRecord;
    use rand::Rng;

    fn blob_samples(n_per_class: usize, seed: u64) -> Vec<Sample> {
        // Two well-separated 2-D Gaussian-ish blobs, one record per sample,
        // so the average strategy passes the point straight through.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        for class in 0..2usize {
            let center = if class == 0 { [-2.0, -2.0] } else { [2.0, 2.0] };
            for i in 0..n_per_class {
                let x = center[0] + rng.random_range(-0.8..0.8);
                let y = center[1] + rng.random_range(-0.8..0.8);
                samples.push(Sample {
                    id: format!("c{class}s{i}"),
                    records: vec![SequenceRecord {
                        embedding: vec![x, y],
                        abundance: 1.0,
                    }],
                    label: Some(class),
                });
            }
        }
        samples
    }

    fn train_cfg(seed: u64) -> FcnnConfig {
        FcnnConfig {
            hidden_dim: 16,
            epochs: 10,
            lr: 1e-2,
            batch_size: 16,
            seed,
            joint_training: true,
        }
    }

    fn st_cfg() -> SetTransformerConfig {
        SetTransformerConfig {
            input_dim: 2,
            model_dim: 8,
            heads: 2,
            inducing_points: 2,
            pma_seeds: 1,
            encoder_blocks: 1,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn separable_blobs_reach_95_percent_train_accuracy() {
        let samples = blob_samples(100, 7);
        let cfg = train_cfg(3);
        let out =
            train::<f64>(&samples, Strategy::Average, &st_cfg(), 8, &cfg).unwrap();
        let mut store = out.store;
        let correct = samples
            .iter()
            .filter(|s| {
                let (label, _) = predict_embedding(
                    &mut store,
                    &s.records[0].embedding,
                    cfg.hidden_dim,
                    out.n_classes,
                )
                .unwrap();
                label == s.label.unwrap()
            })
            .count();
        let acc = correct as f64 / samples.len() as f64;
        assert!(acc >= 0.95, "training accuracy {acc}");
    }

    #[test]
    fn loss_drops_after_first_epoch() {
        let samples = blob_samples(40, 9);
        let out =
            train::<f64>(&samples, Strategy::Average, &st_cfg(), 8, &train_cfg(4)).unwrap();
        assert!(
            out.log.epoch_losses[0] < out.log.initial_loss,
            "epoch-1 loss {} vs initial {}",
            out.log.epoch_losses[0],
            out.log.initial_loss
        );
        assert!(out.log.epoch_losses.last().unwrap() < &out.log.initial_loss);
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_parameters() {
        let samples = blob_samples(20, 11);
        let a = train::<f64>(&samples, Strategy::WeightedSetTransformer, &st_cfg(), 8, &train_cfg(5))
            .unwrap();
        let b = train::<f64>(&samples, Strategy::WeightedSetTransformer, &st_cfg(), 8, &train_cfg(5))
            .unwrap();
        assert_eq!(a.store.export(), b.store.export());
        let c = train::<f64>(&samples, Strategy::WeightedSetTransformer, &st_cfg(), 8, &train_cfg(6))
            .unwrap();
        assert_ne!(a.store.export(), c.store.export());
    }

    #[test]
    fn single_class_labels_are_rejected() {
        let mut samples = blob_samples(10, 13);
        for s in samples.iter_mut() {
            s.label = Some(1);
        }
        let r = train::<f64>(&samples, Strategy::Average, &st_cfg(), 8, &train_cfg(0));
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn tied_logits_pick_class_zero() {
        // Zero weights give zero logits everywhere: probs are uniform and
        // the argmax tie-break chooses the lower class index.
        let mut store = ParamStore::<f64>::new(0);
        store.get_or_init("head.l1.w", &[2, 4], Init::Zeros).unwrap();
        store.get_or_init("head.l1.b", &[4], Init::Zeros).unwrap();
        store.get_or_init("head.l2.w", &[4, 2], Init::Zeros).unwrap();
        store.get_or_init("head.l2.b", &[2], Init::Zeros).unwrap();
        let (label, probs) = predict_embedding(&mut store, &[0.3, -0.4], 4, 2).unwrap();
        assert_eq!(label, 0);
        assert_eq!(probs, vec![0.5, 0.5]);
    }

    #[test]
    fn probabilities_are_normalized_and_shift_invariant() {
        let samples = blob_samples(15, 17);
        let cfg = train_cfg(8);
        let out = train::<f64>(&samples, Strategy::Average, &st_cfg(), 8, &cfg).unwrap();
        let mut store = out.store;
        let (_, probs) =
            predict_embedding(&mut store, &[0.1, 0.9], cfg.hidden_dim, out.n_classes).unwrap();
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&p| p >= 0.0));

        // Adding a constant to all logits must not change the prediction:
        // shift the output biases uniformly and compare.
        let (before, _) =
            predict_embedding(&mut store, &[0.1, 0.9], cfg.hidden_dim, out.n_classes).unwrap();
        let mut b2 = store.value("head.l2.b").unwrap().clone();
        for v in b2.data_mut() {
            *v += 10.0;
        }
        store.set_value("head.l2.b", b2).unwrap();
        let (after, probs2) =
            predict_embedding(&mut store, &[0.1, 0.9], cfg.hidden_dim, out.n_classes).unwrap();
        assert_eq!(before, after);
        assert!((probs2.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
