//! Train/test splits for one adaptation experiment, plus the label-access audit.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{render_scene, SceneSpec, ShiftKind};
use super::shift::apply_domain_shift;
use super::types::{AnnotatedImage, Annotation, Dataset, DomainTag, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

/// Data channels tracked by the access audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    SourceTrain,
    TargetTrainImages,
    /// Target-train labels read by a learner (only the oracle baseline may do this).
    TargetTrainLabels,
    /// Target-train labels read for pseudo-label quality analysis.
    TargetTrainLabelsAnalysis,
    SourceTest,
    TargetTest,
    UnseenTest,
}

impl Channel {
    pub const ALL: [Channel; 7] = [
        Channel::SourceTrain,
        Channel::TargetTrainImages,
        Channel::TargetTrainLabels,
        Channel::TargetTrainLabelsAnalysis,
        Channel::SourceTest,
        Channel::TargetTest,
        Channel::UnseenTest,
    ];

    fn slot(self) -> usize {
        Channel::ALL.iter().position(|&c| c == self).unwrap()
    }
}

#[derive(Debug, Default)]
pub struct AccessAudit {
    counts: [AtomicUsize; 7],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditCounts(pub [usize; 7]);

impl AuditCounts {
    pub fn get(&self, ch: Channel) -> usize {
        self.0[ch.slot()]
    }

    pub fn since(&self, earlier: &AuditCounts) -> AuditCounts {
        AuditCounts(std::array::from_fn(|i| self.0[i] - earlier.0[i]))
    }
}

impl AccessAudit {
    pub fn record(&self, ch: Channel) {
        self.counts[ch.slot()].fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, ch: Channel) -> usize {
        self.counts[ch.slot()].load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> AuditCounts {
        AuditCounts(std::array::from_fn(|i| self.counts[i].load(Ordering::Relaxed)))
    }
}

/// Read-only view of one split that records every item fetch in the audit.
#[derive(Clone, Copy)]
pub struct SplitView<'a> {
    dataset: &'a Dataset,
    channel: Channel,
    audit: &'a AccessAudit,
}

impl<'a> SplitView<'a> {
    pub fn new(dataset: &'a Dataset, channel: Channel, audit: &'a AccessAudit) -> Self {
        Self { dataset, channel, audit }
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn get(&self, i: usize) -> &'a AnnotatedImage {
        self.audit.record(self.channel);
        &self.dataset.items[i]
    }

    pub fn domain(&self) -> DomainTag {
        self.dataset.domain
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    /// Fingerprint of the underlying split. Hashing does not count as an access.
    pub fn fingerprint(&self) -> String {
        dataset_fingerprint(self.dataset)
    }
}

/// Target-train labels, kept apart from the images handed to learners.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSidecar {
    pub labels: Vec<Vec<Annotation>>,
}

/// Analysis-only accessor to the sidecar; reads land on the analysis channel.
#[derive(Clone, Copy)]
pub struct SidecarProbe<'a> {
    sidecar: &'a LabelSidecar,
    audit: &'a AccessAudit,
}

impl<'a> SidecarProbe<'a> {
    pub fn new(sidecar: &'a LabelSidecar, audit: &'a AccessAudit) -> Self {
        Self { sidecar, audit }
    }

    pub fn labels(&self, index: usize) -> &'a [Annotation] {
        self.audit.record(Channel::TargetTrainLabelsAnalysis);
        &self.sidecar.labels[index]
    }
}

#[derive(Debug)]
pub struct ExperimentData {
    pub spec: SceneSpec,
    pub source_train: Dataset,
    /// Target training images with annotations removed.
    pub target_train: Dataset,
    pub target_sidecar: LabelSidecar,
    pub source_test: Dataset,
    pub target_test: Dataset,
    /// Test split of a third domain never seen during training.
    pub unseen_test: Option<Dataset>,
    pub unseen_shift: Option<(ShiftKind, f64)>,
    pub audit: AccessAudit,
}

impl ExperimentData {
    pub fn source_train_view(&self) -> SplitView<'_> {
        SplitView::new(&self.source_train, Channel::SourceTrain, &self.audit)
    }

    pub fn target_train_view(&self) -> SplitView<'_> {
        SplitView::new(&self.target_train, Channel::TargetTrainImages, &self.audit)
    }

    pub fn target_test_view(&self) -> SplitView<'_> {
        SplitView::new(&self.target_test, Channel::TargetTest, &self.audit)
    }

    pub fn source_test_view(&self) -> SplitView<'_> {
        SplitView::new(&self.source_test, Channel::SourceTest, &self.audit)
    }

    pub fn unseen_test_view(&self) -> Option<SplitView<'_>> {
        self.unseen_test.as_ref().map(|d| SplitView::new(d, Channel::UnseenTest, &self.audit))
    }

    pub fn sidecar_probe(&self) -> SidecarProbe<'_> {
        SidecarProbe::new(&self.target_sidecar, &self.audit)
    }

    /// Target-train images joined with their labels, for the oracle baseline. Every label
    /// read is recorded on [`Channel::TargetTrainLabels`].
    pub fn labeled_target_train(&self) -> Dataset {
        let mut ds = self.target_train.clone();
        for (item, labels) in ds.items.iter_mut().zip(&self.target_sidecar.labels) {
            self.audit.record(Channel::TargetTrainLabels);
            item.annotations = labels.clone();
        }
        ds
    }
}

/// SHA-256 over pixel data, annotations and depth of every item.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update([u8::from(ds.domain), matches!(ds.split, Split::Test) as u8]);
    for item in &ds.items {
        h.update((item.width as u64).to_le_bytes());
        h.update((item.height as u64).to_le_bytes());
        for v in &item.pixels {
            h.update(v.to_le_bytes());
        }
        for a in &item.annotations {
            for v in [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2] {
                h.update(v.to_le_bytes());
            }
            h.update((a.label.0 as u64).to_le_bytes());
        }
        if let Some(d) = &item.depth {
            for v in d {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SplitId {
    SourceTrain = 1,
    TargetTrain = 2,
    SourceTest = 3,
    TargetTest = 4,
    UnseenTest = 5,
}

fn split_spec(spec: &SceneSpec, id: SplitId) -> SceneSpec {
    SceneSpec {
        seed: derive_seed(spec.seed, stream::SPLIT, id as u64),
        ..spec.clone()
    }
}

fn clean_split(spec: &SceneSpec, id: SplitId, n: usize, split: Split) -> Result<Dataset> {
    let s = split_spec(spec, id);
    let items = (0..n as u64).map(|i| render_scene(&s, i).map(|(img, _)| img)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { items, split, domain: DomainTag::Source })
}

fn shifted_split(spec: &SceneSpec, id: SplitId, n: usize, split: Split, kind: ShiftKind, severity: f64) -> Result<Dataset> {
    let s = split_spec(spec, id);
    let items = (0..n as u64)
        .map(|i| {
            let (img, _) = render_scene(&s, i)?;
            apply_domain_shift(&img, kind, severity, derive_seed(s.seed, stream::SHIFT, i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { items, split, domain: DomainTag::Target })
}

/// Builds source-train, target-train (+ label sidecar), source-test and target-test splits, and
/// optionally a test split of an unseen third domain. Each split draws from its own seed.
pub fn build_experiment(
    spec: &SceneSpec,
    n_source: usize,
    n_target: usize,
    n_test: usize,
    unseen: Option<(ShiftKind, f64)>,
) -> Result<ExperimentData> {
    spec.validate()?;
    if n_source == 0 || n_target == 0 || n_test == 0 {
        return Err(Error::InvalidSpec("split sizes must be at least 1".into()));
    }
    if let Some((kind, _)) = unseen {
        if kind == spec.shift_kind {
            return Err(Error::DomainCollision(format!(
                "unseen domain uses the training target shift {kind:?}"
            )));
        }
    }
    let source_train = clean_split(spec, SplitId::SourceTrain, n_source, Split::Train)?;
    let mut target_train = shifted_split(spec, SplitId::TargetTrain, n_target, Split::Train, spec.shift_kind, spec.shift_severity)?;
    let labels = target_train.split_off_labels();
    let source_test = clean_split(spec, SplitId::SourceTest, n_test, Split::Test)?;
    let target_test = shifted_split(spec, SplitId::TargetTest, n_test, Split::Test, spec.shift_kind, spec.shift_severity)?;
    let unseen_test = unseen
        .map(|(kind, sev)| shifted_split(spec, SplitId::UnseenTest, n_test, Split::Test, kind, sev))
        .transpose()?;
    Ok(ExperimentData {
        spec: spec.clone(),
        source_train,
        target_train,
        target_sidecar: LabelSidecar { labels },
        source_test,
        target_test,
        unseen_test,
        unseen_shift: unseen,
        audit: AccessAudit::default(),
    })
}
