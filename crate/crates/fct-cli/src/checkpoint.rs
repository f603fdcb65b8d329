//! JSON model checkpoints.
//!
//! Parameters are serialized as f64 with round-trip-exact formatting, so a
//! reloaded model produces bit-identical outputs. Each file carries a kind
//! tag so loading a checkpoint into the wrong slot fails with a clear
//! message instead of a shape error deep inside a forward pass.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use fct_core::models::{EmbedderNet, TransformationNet};
use fct_core::training::SideInfoModel;
use fct_core::{Error, Result};

use crate::io::{atomic_write, read_text};

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    model: T,
}

fn save_envelope<T: Serialize>(path: &Path, kind: &str, model: &T) -> Result<()> {
    let envelope = Envelope { kind: kind.to_string(), model };
    let text = serde_json::to_string_pretty(&envelope)
        .map_err(|e| Error::Data(format!("cannot serialize {kind}: {e}")))?;
    atomic_write(path, text.as_bytes())
}

fn load_envelope<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = read_text(path)?;
    let envelope: Envelope<serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{} is not a checkpoint: {e}", path.display())))?;
    if envelope.kind != kind {
        return Err(Error::Data(format!(
            "{} holds a {} checkpoint, expected {kind}",
            path.display(),
            envelope.kind
        )));
    }
    serde_json::from_value(envelope.model)
        .map_err(|e| Error::Data(format!("{} payload is invalid: {e}", path.display())))
}

pub fn save_embedder(path: &Path, net: &EmbedderNet) -> Result<()> {
    save_envelope(path, "embedder", net)
}

pub fn load_embedder(path: &Path) -> Result<EmbedderNet> {
    load_envelope(path, "embedder")
}

pub fn save_side_info(path: &Path, model: &SideInfoModel) -> Result<()> {
    save_envelope(path, "side_info", model)
}

pub fn load_side_info(path: &Path) -> Result<SideInfoModel> {
    load_envelope(path, "side_info")
}

/// A transformation plus the version hop it was trained for.
#[derive(Serialize, Deserialize)]
pub struct TransformCheckpoint {
    pub from_version: u32,
    pub to_version: u32,
    pub net: TransformationNet,
    /// Side-information transformation for non-terminal hops.
    pub side_net: Option<TransformationNet>,
}

pub fn save_transform(path: &Path, ckpt: &TransformCheckpoint) -> Result<()> {
    save_envelope(path, "transformation", ckpt)
}

pub fn load_transform(path: &Path) -> Result<TransformCheckpoint> {
    load_envelope(path, "transformation")
}

#[cfg(test)]
mod tests {
    use super::*;
    use fct_core::models::{build_embedder, build_transformation};
    use fct_core::numerics::rng::{fill_gaussian, rng_from_seed};
    use fct_core::numerics::Matrix;

    #[test]
    fn embedder_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.json");
        let net = build_embedder(6, 12, 1, 4, 3, 9).unwrap();
        save_embedder(&path, &net).unwrap();
        let loaded = load_embedder(&path).unwrap();
        let mut probe = Matrix::zeros(5, 6);
        fill_gaussian(&mut rng_from_seed(1), probe.data_mut(), 1.0);
        assert_eq!(
            net.embed(&probe).unwrap().data(),
            loaded.embed(&probe).unwrap().data()
        );
        assert_eq!(
            net.infer_logits(&probe).unwrap().data(),
            loaded.infer_logits(&probe).unwrap().data()
        );
    }

    #[test]
    fn transform_checkpoint_keeps_versions_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let net = build_transformation(4, 2, 4, 0.0625, true, 5).unwrap();
        let ckpt = TransformCheckpoint { from_version: 1, to_version: 2, net, side_net: None };
        save_transform(&path, &ckpt).unwrap();
        let loaded = load_transform(&path).unwrap();
        assert_eq!((loaded.from_version, loaded.to_version), (1, 2));
        assert!(loaded.side_net.is_none());
        let mut old = Matrix::zeros(3, 4);
        let mut side = Matrix::zeros(3, 2);
        fill_gaussian(&mut rng_from_seed(2), old.data_mut(), 1.0);
        fill_gaussian(&mut rng_from_seed(3), side.data_mut(), 1.0);
        assert_eq!(
            ckpt.net.forward_infer(&old, &side).unwrap().data(),
            loaded.net.forward_infer(&old, &side).unwrap().data()
        );
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.json");
        let net = build_embedder(6, 12, 1, 4, 3, 9).unwrap();
        save_embedder(&path, &net).unwrap();
        let err = load_side_info(&path).unwrap_err().to_string();
        assert!(err.contains("embedder"), "{err}");
    }
}
