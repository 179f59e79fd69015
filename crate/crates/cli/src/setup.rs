//! Shared experiment setup: generate the source set, pretrain, extract
//! prototypes, seal the source data, and materialize the stream.

use gold_core::config::ExperimentConfig;
use gold_core::error::Result;
use gold_core::model::{
    build_prototypes, classification_accuracy, pretrain_source, Backbone, ClassifierHead,
    PrototypeBank,
};
use gold_core::stream::{make_source, make_stream, StreamBatch};

pub struct Experiment {
    pub backbone: Backbone,
    pub head: ClassifierHead,
    pub protos: PrototypeBank,
    pub stream: Vec<StreamBatch>,
    pub source_accuracy: f64,
}

/// Build everything the engine needs. The source dataset is sealed before
/// this returns, so nothing downstream can touch it.
pub fn prepare(cfg: &ExperimentConfig, quiet: bool) -> Result<Experiment> {
    let source_cfg = cfg.source_config();
    let dataset = make_source(&source_cfg)?;
    let (mut backbone, head) = pretrain_source(&dataset, &cfg.pretrain_config())?;
    backbone.affine_trainable = cfg.affine_trainable;
    let source_accuracy =
        classification_accuracy(&backbone, &head, dataset.inputs()?, dataset.labels()?)?;
    let protos = build_prototypes(&backbone, &dataset)?;
    dataset.seal();
    if !quiet {
        eprintln!("source accuracy {:.4} over {} samples", source_accuracy, dataset.len());
    }
    let stream = make_stream(&cfg.stream_config()?, &source_cfg)?;
    Ok(Experiment { backbone, head, protos, stream, source_accuracy })
}
