//! Downstream classifiers over aggregated sample embeddings: a fully
//! connected network trained end to end (optionally jointly with the
//! transformer aggregation), and a class-balanced random forest on frozen
//! embeddings.
//!
//! For the transformer strategies the forest consumes embeddings from
//! aggregation parameters that were first trained jointly with an FCNN head;
//! the averaging strategies have no trainable aggregation, so their
//! embeddings go to the forest directly.

pub mod fcnn;
pub mod forest;

use serde::{Deserialize, Serialize};

pub use fcnn::{FcnnConfig, TrainLog};
pub use forest::{Forest, ForestConfig, TreeNode};

use crate::aggregate::{self, Sample, Strategy};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real};
use crate::setattn::SetTransformerConfig;

/// Which classifier to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Fcnn,
    Forest,
}

impl ClassifierKind {
    pub fn name(&self) -> &'static str {
        match self {
            ClassifierKind::Fcnn => "fcnn",
            ClassifierKind::Forest => "forest",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            ClassifierKind::Fcnn => "FCNN",
            ClassifierKind::Forest => "Random Forest",
        }
    }

    pub fn parse(s: &str) -> Result<ClassifierKind> {
        match s {
            "fcnn" => Ok(ClassifierKind::Fcnn),
            "forest" => Ok(ClassifierKind::Forest),
            other => Err(Error::Config(format!(
                "unknown classifier {other:?}; expected fcnn or forest"
            ))),
        }
    }
}

/// Named parameter tensors as portable rows.
pub type ParamRows = Vec<(String, Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum TrainedKind {
    Fcnn { config: FcnnConfig, log: TrainLog },
    Forest { forest: Forest, pretrain_log: Option<TrainLog> },
}

/// A trained classifier together with everything inference needs to
/// reproduce training-time aggregation: the strategy, its configuration and
/// parameters, and the expansion budget.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainedModel {
    /// Container format version.
    pub version: u32,
    pub strategy: Strategy,
    pub set_transformer: SetTransformerConfig,
    pub budget: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    /// Aggregation and head parameters (`st.*`, `head.*`) as f64 rows.
    pub params: ParamRows,
    pub kind: TrainedKind,
}

pub const MODEL_VERSION: u32 = 1;

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Schema(format!("model serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<TrainedModel> {
        let model: TrainedModel = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("model deserialization failed: {e}")))?;
        if model.version != MODEL_VERSION {
            return Err(Error::Schema(format!(
                "model container version {} unsupported (expected {MODEL_VERSION})",
                model.version
            )));
        }
        Ok(model)
    }

    /// Rebuild a parameter store at the requested precision.
    pub fn param_store<R: Real>(&self) -> Result<ParamStore<R>> {
        let mut store = ParamStore::new(0);
        store.import(&self.params)?;
        Ok(store)
    }
}

/// Aggregate every sample with shared parameters.
pub fn embed_all<R: Real>(
    samples: &[Sample],
    strategy: Strategy,
    st_cfg: &SetTransformerConfig,
    store: &mut ParamStore<R>,
    budget: usize,
) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| Ok(aggregate::aggregate(s, strategy, st_cfg, store, budget)?.values))
        .collect()
}

/// Train the configured classifier on labeled samples.
pub fn train_model<R: Real>(
    samples: &[Sample],
    strategy: Strategy,
    classifier: ClassifierKind,
    st_cfg: &SetTransformerConfig,
    budget: usize,
    fcnn_cfg: &FcnnConfig,
    forest_cfg: &ForestConfig,
) -> Result<TrainedModel> {
    st_cfg.validate()?;
    match classifier {
        ClassifierKind::Fcnn => {
            let out = fcnn::train::<R>(samples, strategy, st_cfg, budget, fcnn_cfg)?;
            Ok(TrainedModel {
                version: MODEL_VERSION,
                strategy,
                set_transformer: st_cfg.clone(),
                budget,
                input_dim: out.input_dim,
                n_classes: out.n_classes,
                params: out.store.export(),
                kind: TrainedKind::Fcnn {
                    config: fcnn_cfg.clone(),
                    log: out.log,
                },
            })
        }
        ClassifierKind::Forest => {
            let labels: Vec<usize> = samples
                .iter()
                .map(|s| {
                    s.label
                        .ok_or_else(|| Error::Degenerate(format!("sample {} is unlabeled", s.id)))
                })
                .collect::<Result<Vec<usize>>>()?;
            // Transformer aggregation params learn through a joint FCNN
            // pretraining pass, then freeze for the forest.
            let (mut store, pretrain_log) = if strategy.is_transformer() {
                let out = fcnn::train::<R>(samples, strategy, st_cfg, budget, fcnn_cfg)?;
                (out.store, Some(out.log))
            } else {
                (ParamStore::<R>::new(fcnn_cfg.seed), None)
            };
            let embeddings = embed_all(samples, strategy, st_cfg, &mut store, budget)?;
            let forest = forest::train(&embeddings, &labels, forest_cfg)?;
            let input_dim = strategy.output_dim(samples[0].dim(), st_cfg);
            Ok(TrainedModel {
                version: MODEL_VERSION,
                strategy,
                set_transformer: st_cfg.clone(),
                budget,
                input_dim,
                n_classes: forest.n_classes,
                params: store.export(),
                kind: TrainedKind::Forest {
                    forest,
                    pretrain_log,
                },
            })
        }
    }
}

/// Predict one sample with a trained model, reproducing training-time
/// aggregation through the stored parameters.
pub fn predict_sample<R: Real>(
    model: &TrainedModel,
    store: &mut ParamStore<R>,
    sample: &Sample,
) -> Result<(usize, Vec<f64>)> {
    let embedding = aggregate::aggregate(
        sample,
        model.strategy,
        &model.set_transformer,
        store,
        model.budget,
    )?;
    predict_embedding::<R>(model, store, &embedding.values)
}

/// Predict from an already-aggregated embedding.
pub fn predict_embedding<R: Real>(
    model: &TrainedModel,
    store: &mut ParamStore<R>,
    embedding: &[f64],
) -> Result<(usize, Vec<f64>)> {
    if embedding.len() != model.input_dim {
        return Err(Error::Dimension(format!(
            "embedding has {} values, model expects {}",
            embedding.len(),
            model.input_dim
        )));
    }
    match &model.kind {
        TrainedKind::Fcnn { config, .. } => {
            fcnn::predict_embedding(store, embedding, config.hidden_dim, model.n_classes)
        }
        TrainedKind::Forest { forest, .. } => forest::predict(forest, embedding),
    }
}
