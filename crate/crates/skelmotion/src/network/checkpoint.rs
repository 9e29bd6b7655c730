//! Checkpoints: the full parameter set, batch-norm running statistics, the
//! architecture config, and the 2D corpus statistics needed at inference.

use std::path::Path;

use ndarray::Array1;

use super::{ModelGraph, NetworkConfig};
use crate::error::{Error, Result};
use crate::preprocess::CorpusStats2d;
use crate::tensorfile::TensorFile;

#[derive(Debug, Clone, Default)]
pub struct CheckpointExtras {
    pub stats: Option<CorpusStats2d>,
    pub iteration: u64,
}

fn running_stat_entries(graph: &ModelGraph) -> Vec<(String, Array1<f64>, Array1<f64>)> {
    let blocks = [
        ("eq.expand", &graph.eq.expand),
        ("eq.branch_k5", &graph.eq.branch_k5),
        ("eq.branch_k3", &graph.eq.branch_k3),
        ("eq.branch_k1", &graph.eq.branch_k1),
        ("es.expand", &graph.es.expand),
        ("es.seq_k5", &graph.es.seq_k5),
        ("es.seq_k3", &graph.es.seq_k3),
        ("es.seq_k1", &graph.es.seq_k1),
    ];
    blocks
        .into_iter()
        .map(|(name, b)| (name.to_string(), b.running_mean.clone(), b.running_var.clone()))
        .collect()
}

pub fn save_checkpoint(graph: &ModelGraph, path: &Path, extras: &CheckpointExtras) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "checkpoint",
        "config": graph.config,
        "stats": extras.stats,
        "iteration": extras.iteration,
    });
    let mut tf = TensorFile::new(meta);
    for id in graph.store.ids() {
        tf.insert(graph.store.name(id).to_string(), graph.store.value(id).clone());
    }
    for (name, mean, var) in running_stat_entries(graph) {
        tf.insert(format!("{name}.bn_running_mean"), mean.into_dyn());
        tf.insert(format!("{name}.bn_running_var"), var.into_dyn());
    }
    tf.write(path)
}

/// Rebuilds a model from a checkpoint. When `expect_config` is given, the
/// stored config must match exactly; loading otherwise refuses.
pub fn load_checkpoint(
    path: &Path,
    expect_config: Option<&NetworkConfig>,
) -> Result<(ModelGraph, CheckpointExtras)> {
    let tf = TensorFile::read(path)?;
    if tf.meta["kind"] != "checkpoint" {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let config: NetworkConfig = serde_json::from_value(tf.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
    if let Some(expect) = expect_config {
        if *expect != config {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint was built with {config:?}, caller expects {expect:?}"
            )));
        }
    }
    let stats: Option<CorpusStats2d> = serde_json::from_value(tf.meta["stats"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad stats block: {e}")))?;
    let iteration = tf.meta["iteration"].as_u64().unwrap_or(0);

    let mut graph = ModelGraph::new(config, 0)?;
    for id in graph.store.ids().collect::<Vec<_>>() {
        let name = graph.store.name(id).to_string();
        let stored = tf.get(&name)?;
        if stored.shape() != graph.store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                stored.shape(),
                graph.store.value(id).shape()
            )));
        }
        graph.store.set_value(id, stored.clone());
    }
    let block_names: Vec<String> =
        running_stat_entries(&graph).into_iter().map(|(n, _, _)| n).collect();
    for name in block_names {
        let mean = tf.get(&format!("{name}.bn_running_mean"))?.clone();
        let var = tf.get(&format!("{name}.bn_running_var"))?.clone();
        let block = match name.as_str() {
            "eq.expand" => &mut graph.eq.expand,
            "eq.branch_k5" => &mut graph.eq.branch_k5,
            "eq.branch_k3" => &mut graph.eq.branch_k3,
            "eq.branch_k1" => &mut graph.eq.branch_k1,
            "es.expand" => &mut graph.es.expand,
            "es.seq_k5" => &mut graph.es.seq_k5,
            "es.seq_k3" => &mut graph.es.seq_k3,
            "es.seq_k1" => &mut graph.es.seq_k1,
            other => return Err(Error::Checkpoint(format!("unknown block '{other}'"))),
        };
        block.running_mean = mean
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        block.running_var = var
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok((graph, CheckpointExtras { stats, iteration }))
}
