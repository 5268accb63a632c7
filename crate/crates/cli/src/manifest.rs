//! Run manifest: the resolved experiment, every input and produced artifact
//! with a content digest, and the class weights actually used.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use pcl_core::balance::ClassWeights;
use pcl_core::models::ModelSpec;
use pcl_core::train::{ExperimentSpec, RunOutcome};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub created_utc: String,
    pub config_path: Option<String>,
    pub experiment: ExperimentSpec,
    pub model: ModelSpec,
    pub class_weights: Vec<ClassWeights>,
    pub train_size: usize,
    pub val_size: usize,
    pub augment_selected: Vec<String>,
    pub augment_skipped: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<FileDigest> {
    let bytes = std::fs::read(path)
        .map_err(|e| anyhow::anyhow!("cannot digest {}: {e}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(digest),
    })
}

impl RunManifest {
    pub fn for_run(
        outcome: &RunOutcome,
        config_path: Option<&Path>,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> anyhow::Result<Self> {
        let digest_all = |paths: &[&Path]| -> anyhow::Result<Vec<FileDigest>> {
            paths.iter().map(|p| sha256_file(p)).collect()
        };
        Ok(RunManifest {
            created_utc: chrono::Utc::now().to_rfc3339(),
            config_path: config_path.map(|p| p.display().to_string()),
            experiment: outcome.spec.clone(),
            model: outcome.model_spec.clone(),
            class_weights: outcome.class_weights.clone(),
            train_size: outcome.train_size,
            val_size: outcome.val_size,
            augment_selected: outcome.augment_selected.clone(),
            augment_skipped: outcome.augment_skipped.len(),
            best_epoch: outcome.log.best_epoch,
            best_metric: outcome.log.best_metric,
            inputs: digest_all(inputs)?,
            outputs: digest_all(outputs)?,
        })
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)
            .map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))
    }
}
