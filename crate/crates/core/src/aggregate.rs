//! The four sample-level aggregation strategies, each mapping one sample's
//! unordered set of (embedding, abundance) records to a fixed-size vector.
//!
//! Averaging strategies are plain f64 arithmetic. The transformer strategies
//! run on a [`Tape`] so they can also be embedded into a larger training
//! graph (see `classify`); the standalone entry points here wrap a scratch
//! tape around the same code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};
use crate::setattn::{self, SetTransformerConfig};

/// One element of a sample's set: a sequence embedding and its abundance.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub embedding: Vec<f64>,
    pub abundance: f64,
}

/// An unordered collection of sequence records with an optional binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub records: Vec<SequenceRecord>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.embedding.len())
    }

    /// Records as an N×dim matrix in record order.
    pub fn embedding_matrix<R: Real>(&self) -> Result<Tensor<R>> {
        if self.is_empty() {
            return Err(Error::EmptyInput(format!("sample {} has no records", self.id)));
        }
        let dim = self.dim();
        let mut data = Vec::with_capacity(self.len() * dim);
        for r in &self.records {
            if r.embedding.len() != dim {
                return Err(Error::Schema(format!(
                    "sample {}: embedding lengths differ ({} vs {dim})",
                    self.id,
                    r.embedding.len()
                )));
            }
            data.extend(r.embedding.iter().map(|&v| R::from_f64(v)));
        }
        Tensor::matrix(self.len(), dim, data)
    }
}

/// Normalized abundance weights: nonnegative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceWeights(Vec<f64>);

impl AbundanceWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Which aggregation produced a sample embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Average,
    WeightedAverage,
    SetTransformer,
    WeightedSetTransformer,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Average,
        Strategy::WeightedAverage,
        Strategy::SetTransformer,
        Strategy::WeightedSetTransformer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Average => "average",
            Strategy::WeightedAverage => "weighted-average",
            Strategy::SetTransformer => "set-transformer",
            Strategy::WeightedSetTransformer => "weighted-set-transformer",
        }
    }

    /// Human-readable label used in report tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            Strategy::Average => "Average",
            Strategy::WeightedAverage => "Weighted Average",
            Strategy::SetTransformer => "Set Transformer",
            Strategy::WeightedSetTransformer => "Weighted Set Transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "average" => Ok(Strategy::Average),
            "weighted-average" => Ok(Strategy::WeightedAverage),
            "set-transformer" => Ok(Strategy::SetTransformer),
            "weighted-set-transformer" => Ok(Strategy::WeightedSetTransformer),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}; expected one of average, weighted-average, set-transformer, weighted-set-transformer"
            ))),
        }
    }

    /// Whether the strategy has trainable parameters.
    pub fn is_transformer(&self) -> bool {
        matches!(self, Strategy::SetTransformer | Strategy::WeightedSetTransformer)
    }

    /// Length of the embedding this strategy emits.
    pub fn output_dim(&self, input_dim: usize, cfg: &SetTransformerConfig) -> usize {
        match self {
            Strategy::Average | Strategy::WeightedAverage => input_dim,
            Strategy::SetTransformer => cfg.pooled_dim(),
            Strategy::WeightedSetTransformer => cfg.model_dim,
        }
    }
}

/// Fixed-size embedding of a whole sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEmbedding {
    pub strategy: Strategy,
    pub values: Vec<f64>,
}

impl SampleEmbedding {
    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite sample embedding".into()))
        }
    }
}

/// `alpha_i = a_i / sum_j a_j`.
pub fn normalize_abundance(sample: &Sample) -> Result<AbundanceWeights> {
    if sample.is_empty() {
        return Err(Error::EmptyInput(format!("sample {} has no records", sample.id)));
    }
    let total: f64 = sample.records.iter().map(|r| r.abundance).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(format!(
            "sample {}: total abundance {total} is not positive",
            sample.id
        )));
    }
    Ok(AbundanceWeights(
        sample.records.iter().map(|r| r.abundance / total).collect(),
    ))
}

/// Weighted sum of the record embeddings. Both averaging strategies go
/// through this kernel so that equal abundances reproduce the plain mean
/// bit for bit.
fn weighted_sum(sample: &Sample, weights: &[f64]) -> Vec<f64> {
    let dim = sample.dim();
    let mut out = vec![0.0; dim];
    for (rec, &w) in sample.records.iter().zip(weights) {
        for (o, &e) in out.iter_mut().zip(rec.embedding.iter()) {
            *o += w * e;
        }
    }
    out
}

/// Mean of the record embeddings, ignoring abundance.
pub fn average_pool(sample: &Sample) -> Result<SampleEmbedding> {
    if sample.is_empty() {
        return Err(Error::EmptyInput(format!("sample {} has no records", sample.id)));
    }
    let w = 1.0 / sample.len() as f64;
    let values = weighted_sum(sample, &vec![w; sample.len()]);
    Ok(SampleEmbedding {
        strategy: Strategy::Average,
        values,
    })
}

/// Abundance-convex combination of the record embeddings.
pub fn weighted_average_pool(sample: &Sample) -> Result<SampleEmbedding> {
    let alpha = normalize_abundance(sample)?;
    let values = weighted_sum(sample, alpha.as_slice());
    Ok(SampleEmbedding {
        strategy: Strategy::WeightedAverage,
        values,
    })
}

/// Integer copy counts per record: largest-remainder apportionment of
/// `budget·alpha_i` with at least one copy each (lower index wins ties).
pub fn apportion_counts(alpha: &AbundanceWeights, budget: usize) -> Result<Vec<usize>> {
    let n = alpha.len();
    if budget < n {
        return Err(Error::Budget(format!(
            "budget {budget} is smaller than the record count {n}"
        )));
    }
    let quotas: Vec<f64> = alpha.as_slice().iter().map(|&a| a * budget as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|&q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut leftover = budget.saturating_sub(assigned);
    // Distribute the remainder by largest fractional part, lower index first.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let fi = quotas[i] - quotas[i].floor();
        let fj = quotas[j] - quotas[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    let mut next = 0;
    while leftover > 0 {
        counts[order[next % n]] += 1;
        next += 1;
        leftover -= 1;
    }
    // Lift empty records to one copy, paying from the largest count.
    while let Some(zero) = counts.iter().position(|&c| c == 0) {
        let (donor, _) = counts
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.cmp(b).then(j.cmp(i)))
            .expect("nonempty");
        if counts[donor] <= 1 {
            return Err(Error::Budget(format!(
                "budget {budget} cannot give every record a copy"
            )));
        }
        counts[donor] -= 1;
        counts[zero] += 1;
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), budget);
    Ok(counts)
}

/// Expand a sample to `budget` embedding rows, repeating each record in
/// proportion to its abundance.
///
/// Records are processed in a canonical order (abundance descending, then
/// embedding), so the expanded multiset never depends on input record
/// order: summing abundances in input order would shift the weight quotas
/// by rounding ulps and flip copy counts between near-tied remainders.
pub fn repetition_expand<R: Real>(sample: &Sample, budget: usize) -> Result<Tensor<R>> {
    if sample.is_empty() {
        return Err(Error::EmptyInput(format!("sample {} has no records", sample.id)));
    }
    let mut order: Vec<usize> = (0..sample.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&sample.records[i], &sample.records[j]);
        b.abundance
            .partial_cmp(&a.abundance)
            .unwrap()
            .then_with(|| a.embedding.partial_cmp(&b.embedding).unwrap())
    });
    let canonical = Sample {
        id: sample.id.clone(),
        records: order.iter().map(|&i| sample.records[i].clone()).collect(),
        label: sample.label,
    };
    let alpha = normalize_abundance(&canonical)?;
    let counts = apportion_counts(&alpha, budget)?;
    let dim = canonical.dim();
    let mut data = Vec::with_capacity(budget * dim);
    for (rec, &c) in canonical.records.iter().zip(counts.iter()) {
        for _ in 0..c {
            data.extend(rec.embedding.iter().map(|&v| R::from_f64(v)));
        }
    }
    Tensor::matrix(budget, dim, data)
}

/// Set-transformer strategy recorded on an existing tape: expand by
/// abundance, encode, pool. Returns a `1×(k·d)` row.
pub fn set_transformer_pool_on<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    sample: &Sample,
    cfg: &SetTransformerConfig,
    budget: usize,
) -> Result<Var> {
    let expanded = repetition_expand::<R>(sample, budget)?;
    let xv = tape.input(expanded)?;
    let encoded = setattn::encode_set_on(tape, store, "st", xv, cfg)?;
    setattn::pool_set_on(tape, store, "st", encoded, cfg)
}

/// Weighted-set-transformer strategy recorded on an existing tape: encode
/// the unique records once, then take the abundance-weighted sum of the
/// per-element outputs. Returns a `1×d` row.
pub fn weighted_set_transformer_pool_on<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    sample: &Sample,
    cfg: &SetTransformerConfig,
) -> Result<Var> {
    let alpha = normalize_abundance(sample)?;
    let x = sample.embedding_matrix::<R>()?;
    let xv = tape.input(x)?;
    let encoded = setattn::encode_set_on(tape, store, "st", xv, cfg)?;
    let weights = Tensor::<R>::from_f64s(vec![1, alpha.len()], alpha.as_slice())?;
    let wv = tape.input(weights)?;
    tape.matmul(wv, encoded)
}

/// Standalone set-transformer aggregation of one sample.
pub fn set_transformer_pool<R: Real>(
    sample: &Sample,
    cfg: &SetTransformerConfig,
    store: &mut ParamStore<R>,
    budget: usize,
) -> Result<SampleEmbedding> {
    let mut tape = Tape::new();
    let out = set_transformer_pool_on(&mut tape, store, sample, cfg, budget)?;
    let emb = SampleEmbedding {
        strategy: Strategy::SetTransformer,
        values: tape.value(out).to_f64_vec(),
    };
    emb.check_finite()?;
    Ok(emb)
}

/// Standalone weighted-set-transformer aggregation of one sample.
pub fn weighted_set_transformer_pool<R: Real>(
    sample: &Sample,
    cfg: &SetTransformerConfig,
    store: &mut ParamStore<R>,
) -> Result<SampleEmbedding> {
    let mut tape = Tape::new();
    let out = weighted_set_transformer_pool_on(&mut tape, store, sample, cfg)?;
    let emb = SampleEmbedding {
        strategy: Strategy::WeightedSetTransformer,
        values: tape.value(out).to_f64_vec(),
    };
    emb.check_finite()?;
    Ok(emb)
}

/// Aggregate one sample with the given strategy.
pub fn aggregate<R: Real>(
    sample: &Sample,
    strategy: Strategy,
    cfg: &SetTransformerConfig,
    store: &mut ParamStore<R>,
    budget: usize,
) -> Result<SampleEmbedding> {
    match strategy {
        Strategy::Average => average_pool(sample),
        Strategy::WeightedAverage => weighted_average_pool(sample),
        Strategy::SetTransformer => set_transformer_pool(sample, cfg, store, budget),
        Strategy::WeightedSetTransformer => weighted_set_transformer_pool(sample, cfg, store),
    }
}

/// Aggregate one sample as a tape node, so gradients can flow through the
/// transformer strategies. Averaging strategies enter as constants.
pub fn aggregate_on<R: Real>(
    tape: &mut Tape<R>,
    store: &mut ParamStore<R>,
    sample: &Sample,
    strategy: Strategy,
    cfg: &SetTransformerConfig,
    budget: usize,
) -> Result<Var> {
    match strategy {
        Strategy::Average => {
            let e = average_pool(sample)?;
            let t = Tensor::from_f64s(vec![1, e.values.len()], &e.values)?;
            tape.input(t)
        }
        Strategy::WeightedAverage => {
            let e = weighted_average_pool(sample)?;
            let t = Tensor::from_f64s(vec![1, e.values.len()], &e.values)?;
            tape.input(t)
        }
        Strategy::SetTransformer => set_transformer_pool_on(tape, store, sample, cfg, budget),
        Strategy::WeightedSetTransformer => {
            weighted_set_transformer_pool_on(tape, store, sample, cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_from(embeddings: &[&[f64]], abundances: &[f64]) -> Sample {
        Sample {
            id: "s".into(),
            records: embeddings
                .iter()
                .zip(abundances)
                .map(|(e, &a)| SequenceRecord {
                    embedding: e.to_vec(),
                    abundance: a,
                })
                .collect(),
            label: None,
        }
    }

    fn random_sample(n: usize, dim: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|_| SequenceRecord {
                embedding: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                abundance: rng.random_range(0.1..10.0),
            })
            .collect();
        Sample {
            id: format!("r{seed}"),
            records,
            label: None,
        }
    }

    fn tiny_cfg() -> SetTransformerConfig {
        SetTransformerConfig {
            input_dim: 4,
            model_dim: 8,
            heads: 2,
            inducing_points: 3,
            pma_seeds: 1,
            encoder_blocks: 1,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn normalize_uniform() {
        let s = sample_from(&[&[0.0], &[0.0], &[0.0], &[0.0]], &[1.0, 1.0, 1.0, 1.0]);
        let w = normalize_abundance(&s).unwrap();
        assert_eq!(w.as_slice(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn normalize_three_to_one() {
        let s = sample_from(&[&[0.0], &[0.0]], &[3.0, 1.0]);
        let w = normalize_abundance(&s).unwrap();
        assert_eq!(w.as_slice(), &[0.75, 0.25]);
    }

    #[test]
    fn normalize_single_record() {
        let s = sample_from(&[&[0.0]], &[7.0]);
        let w = normalize_abundance(&s).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
    }

    #[test]
    fn normalize_rejects_zero_total() {
        let s = sample_from(&[&[0.0]], &[0.0]);
        assert!(matches!(normalize_abundance(&s), Err(Error::Degenerate(_))));
    }

    #[test]
    fn average_of_identical_embeddings_is_that_embedding() {
        let e = [0.5, -1.25, 2.0];
        let s = sample_from(&[&e, &e, &e, &e], &[1.0, 2.0, 3.0, 4.0]);
        let out = average_pool(&s).unwrap();
        assert_eq!(out.values, e.to_vec());
    }

    #[test]
    fn average_two_unit_vectors() {
        let s = sample_from(&[&[1.0, 0.0], &[0.0, 1.0]], &[5.0, 1.0]);
        let out = average_pool(&s).unwrap();
        assert_eq!(out.values, vec![0.5, 0.5]);
    }

    #[test]
    fn average_matches_mean_oracle() {
        let s = random_sample(5, 7, 33);
        let got = average_pool(&s).unwrap();
        // Elementwise mean oracle written as scaled accumulation in the same
        // index order.
        let w = 1.0 / 5.0;
        for d in 0..7 {
            let mut want = 0.0;
            for r in &s.records {
                want += w * r.embedding[d];
            }
            assert_eq!(got.values[d], want);
        }
    }

    #[test]
    fn weighted_average_equal_abundances_reduces_to_average() {
        for n in [2usize, 3, 5, 8] {
            let mut s = random_sample(n, 6, 100 + n as u64);
            for r in s.records.iter_mut() {
                r.abundance = 3.0;
            }
            let avg = average_pool(&s).unwrap();
            let wavg = weighted_average_pool(&s).unwrap();
            assert_eq!(avg.values, wavg.values, "n = {n}");
        }
    }

    #[test]
    fn weighted_average_formula_case() {
        let s = sample_from(&[&[1.0, 0.0], &[0.0, 1.0]], &[3.0, 1.0]);
        let out = weighted_average_pool(&s).unwrap();
        assert_eq!(out.values, vec![0.75, 0.25]);
    }

    #[test]
    fn weighted_average_dominant_abundance_limit() {
        let s = sample_from(&[&[1.0, -2.0, 0.5], &[0.0, 1.0, 3.0]], &[1e9, 1.0]);
        let out = weighted_average_pool(&s).unwrap();
        for (o, e) in out.values.iter().zip([1.0, -2.0, 0.5]) {
            assert!((o - e).abs() < 1e-8);
        }
    }

    #[test]
    fn apportion_uniform() {
        let s = sample_from(&[&[0.0], &[0.0]], &[1.0, 1.0]);
        let alpha = normalize_abundance(&s).unwrap();
        assert_eq!(apportion_counts(&alpha, 4).unwrap(), vec![2, 2]);
    }

    #[test]
    fn apportion_three_to_one() {
        let s = sample_from(&[&[0.0], &[0.0]], &[3.0, 1.0]);
        let alpha = normalize_abundance(&s).unwrap();
        assert_eq!(apportion_counts(&alpha, 4).unwrap(), vec![3, 1]);
    }

    #[test]
    fn apportion_matches_oracle() {
        // Independent oracle: assign floor(q_i), then hand out the rest one
        // at a time to the largest remainder, preferring lower indices.
        let s = sample_from(
            &[&[0.0], &[0.0], &[0.0], &[0.0]],
            &[5.0, 2.0, 2.0, 1.0],
        );
        let alpha = normalize_abundance(&s).unwrap();
        let budget = 7usize;
        let quotas: Vec<f64> = alpha.as_slice().iter().map(|a| a * budget as f64).collect();
        let mut oracle: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let rest = budget - oracle.iter().sum::<usize>();
        let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
        by_remainder.sort_by(|&i, &j| {
            let fi = quotas[i] - quotas[i].floor();
            let fj = quotas[j] - quotas[j].floor();
            fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
        });
        for t in 0..rest {
            oracle[by_remainder[t]] += 1;
        }
        let got = apportion_counts(&alpha, budget).unwrap();
        assert_eq!(got.iter().sum::<usize>(), budget);
        assert_eq!(got, oracle);
    }

    #[test]
    fn apportion_rejects_small_budget() {
        let s = random_sample(5, 2, 1);
        let alpha = normalize_abundance(&s).unwrap();
        assert!(matches!(apportion_counts(&alpha, 4), Err(Error::Budget(_))));
    }

    #[test]
    fn apportion_guarantees_one_copy_each() {
        // One record with tiny abundance still gets a copy.
        let s = sample_from(&[&[0.0], &[0.0], &[0.0]], &[1000.0, 1000.0, 0.001]);
        let alpha = normalize_abundance(&s).unwrap();
        let counts = apportion_counts(&alpha, 8).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 8);
        assert!(counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn repetition_expand_integer_proportions() {
        let s = sample_from(&[&[1.0, 0.0], &[0.0, 1.0]], &[3.0, 1.0]);
        let x = repetition_expand::<f64>(&s, 4).unwrap();
        assert_eq!(x.shape(), &[4, 2]);
        assert_eq!(x.row_slice(0), &[1.0, 0.0]);
        assert_eq!(x.row_slice(2), &[1.0, 0.0]);
        assert_eq!(x.row_slice(3), &[0.0, 1.0]);
    }

    #[test]
    fn set_transformer_pool_invariant_to_record_order() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new(40);
        let s = random_sample(5, 4, 50);
        let mut reversed = s.clone();
        reversed.records.reverse();
        let a = set_transformer_pool(&s, &cfg, &mut store, 10).unwrap();
        let b = set_transformer_pool(&reversed, &cfg, &mut store, 10).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn set_transformer_pool_duplication_matches_unexpanded() {
        // Equal abundances with budget 2N duplicate every record once;
        // attention renormalizes, so pooling the unexpanded set agrees.
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new(41);
        let mut s = random_sample(4, 4, 51);
        for r in s.records.iter_mut() {
            r.abundance = 2.0;
        }
        let expanded = set_transformer_pool(&s, &cfg, &mut store, 8).unwrap();
        let unexpanded = set_transformer_pool(&s, &cfg, &mut store, 4).unwrap();
        for (x, y) in expanded.values.iter().zip(unexpanded.values.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn set_transformer_pool_output_length() {
        let cfg = SetTransformerConfig {
            pma_seeds: 2,
            ..tiny_cfg()
        };
        let mut store = ParamStore::<f64>::new(42);
        let s = random_sample(3, 4, 52);
        let out = set_transformer_pool(&s, &cfg, &mut store, 6).unwrap();
        assert_eq!(out.values.len(), 16);
        assert_eq!(
            super::Strategy::SetTransformer.output_dim(4, &cfg),
            out.values.len()
        );
    }

    #[test]
    fn weighted_set_transformer_singleton_ignores_abundance_value() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new(43);
        let mut s = random_sample(1, 4, 53);
        s.records[0].abundance = 0.25;
        let a = weighted_set_transformer_pool(&s, &cfg, &mut store).unwrap();
        s.records[0].abundance = 400.0;
        let b = weighted_set_transformer_pool(&s, &cfg, &mut store).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn weighted_set_transformer_equal_abundances_is_mean_of_outputs() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new(44);
        let mut s = random_sample(4, 4, 54);
        for r in s.records.iter_mut() {
            r.abundance = 5.0;
        }
        let got = weighted_set_transformer_pool(&s, &cfg, &mut store).unwrap();
        let x = s.embedding_matrix::<f64>().unwrap();
        let encoded = setattn::encode_set(&x, &cfg, &mut store).unwrap();
        let rows = encoded.rows();
        for d in 0..cfg.model_dim {
            let mean: f64 = (0..rows)
                .map(|r| 0.25 * encoded.matrix().row_slice(r)[d])
                .sum();
            assert!((got.values[d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_set_transformer_composes_with_weighted_average_oracle() {
        // z must equal weighted_average_pool applied to the encoder output
        // rows, exactly in f64.
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new(45);
        let s = random_sample(6, 4, 55);
        let got = weighted_set_transformer_pool(&s, &cfg, &mut store).unwrap();

        let x = s.embedding_matrix::<f64>().unwrap();
        let encoded = setattn::encode_set(&x, &cfg, &mut store).unwrap();
        let rows_as_sample = Sample {
            id: "rows".into(),
            records: (0..encoded.rows())
                .map(|r| SequenceRecord {
                    embedding: encoded.matrix().row_slice(r).to_vec(),
                    abundance: s.records[r].abundance,
                })
                .collect(),
            label: None,
        };
        let oracle = weighted_average_pool(&rows_as_sample).unwrap();
        assert_eq!(got.values, oracle.values);
    }

    proptest! {
        #[test]
        fn abundance_scaling_leaves_strategies_unchanged(
            seed in 0u64..500,
            scale in prop::sample::select(vec![0.5f64, 2.0, 4.0, 0.25, 8.0])
        ) {
            // Power-of-two scalings are exact in f64, so the scale-freeness
            // of alpha is bitwise.
            let s = random_sample(4, 3, seed);
            let mut scaled = s.clone();
            for r in scaled.records.iter_mut() {
                r.abundance *= scale;
            }
            let a = weighted_average_pool(&s).unwrap();
            let b = weighted_average_pool(&scaled).unwrap();
            prop_assert_eq!(a.values, b.values);
            let wa = normalize_abundance(&s).unwrap();
            let wb = normalize_abundance(&scaled).unwrap();
            prop_assert_eq!(wa.as_slice(), wb.as_slice());
        }

        #[test]
        fn apportionment_sums_to_budget_with_min_one(
            seed in 0u64..500,
            n in 2usize..9,
            extra in 0usize..40
        ) {
            let s = random_sample(n, 2, seed);
            let alpha = normalize_abundance(&s).unwrap();
            let budget = n + extra;
            let counts = apportion_counts(&alpha, budget).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), budget);
            prop_assert!(counts.iter().all(|&c| c >= 1));
        }

        #[test]
        fn weights_always_normalized(seed in 0u64..500, n in 1usize..12) {
            let s = random_sample(n, 2, seed);
            let w = normalize_abundance(&s).unwrap();
            let total: f64 = w.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(w.as_slice().iter().all(|&x| x >= 0.0));
        }
    }
}
