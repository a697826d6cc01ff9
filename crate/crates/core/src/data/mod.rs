//! Boxes, images, datasets, the synthetic scene generator and domain shifts.

mod color;
pub mod experiment;
pub mod io;
pub mod scene;
pub mod shift;
pub mod store;
pub mod types;

pub use experiment::{build_experiment, dataset_fingerprint, AccessAudit, AuditCounts, Channel, ExperimentData, LabelSidecar, SidecarProbe, SplitView};
pub use io::{load_dataset, load_sidecar, save_dataset, save_dataset_with_sidecar};
pub use scene::{generate_scene, render_scene, SceneSpec, ShiftKind};
pub use shift::apply_domain_shift;
pub use types::{box_iou, quantize, AnnotatedImage, Annotation, BoundingBox, ClassLabel, Dataset, Detection, DomainTag, Split};
pub use store::{load_experiment, load_manifest, save_experiment, Manifest, SplitEntry, SPLIT_NAMES};
