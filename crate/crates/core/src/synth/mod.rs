//! Synthetic speckled scenes with exact labels, a label corruptor and the
//! reference-network evaluation protocol.

mod corrupt;
mod dataset;
mod protocol;
mod refnet;
mod scene;

pub use corrupt::{corrupt_label, CorruptionSpec};
pub use dataset::{annotate_manifest, gen_dataset, DatasetSpec, SynthDataset, COARSE_MANIFEST, GT_MANIFEST};
pub use protocol::{
    eam_ablation, eval_protocol, predict_all, score_predictions, AblationReport, LabelSet, ProtocolReport, ProtocolRow,
};
pub use refnet::{train_refnet, RefNet, RefNetConfig};
pub use scene::{gen_scene, SceneSpec};
