//! Baselines, ablation variants and the λ_dis sweep, run under one seed and one set of splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::report::{evaluate_detector, EvalResult};
use crate::data::{AuditCounts, Channel, ExperimentData, SplitView};
use crate::detector::checkpoint::Archive;
use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::training::{adapt, headline_model, supervised_archive, supervised_train, IterationMetrics, NoObserver, Recipe, SupervisedState, TrainConfig, TrainData, TrainerState};

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Supervised training on source labels only, for the same total iteration budget.
    SourceOnly,
    /// Supervised training on target-train images with their sidecar labels.
    Oracle,
    FullAt,
    NoDis,
    NoWsAug,
    NoMutual,
    LambdaDis(f64),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::SourceOnly => "source_only".into(),
            Variant::Oracle => "oracle".into(),
            Variant::FullAt => "full_at".into(),
            Variant::NoDis => "no_dis".into(),
            Variant::NoWsAug => "no_ws_aug".into(),
            Variant::NoMutual => "no_mutual".into(),
            Variant::LambdaDis(l) => format!("lambda_dis={l}"),
        }
    }

    /// Training config of an adaptation variant, `None` for the supervised baselines.
    pub fn train_config(&self, base: &TrainConfig) -> Option<TrainConfig> {
        let mut t = TrainConfig { disable_dis: false, disable_ws_aug: false, disable_mutual: false, ..base.clone() };
        match *self {
            Variant::SourceOnly | Variant::Oracle => return None,
            Variant::FullAt => {}
            Variant::NoDis => t.disable_dis = true,
            Variant::NoWsAug => t.disable_ws_aug = true,
            Variant::NoMutual => t.disable_mutual = true,
            Variant::LambdaDis(l) => t.lambda_dis = l,
        }
        if !t.adversary_active() {
            t.disable_dis = true;
            t.lambda_dis = 0.0;
        }
        Some(t)
    }
}

/// The variant grid: the six named rows followed by the λ_dis sweep.
pub fn default_grid(sweep: &[f64]) -> Vec<Variant> {
    let mut v = vec![Variant::SourceOnly, Variant::Oracle, Variant::FullAt, Variant::NoDis, Variant::NoWsAug, Variant::NoMutual];
    v.extend(sweep.iter().map(|&l| Variant::LambdaDis(l)));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowOutcome {
    /// Absent for the supervised baselines and for runs without a teacher.
    pub teacher: Option<EvalResult>,
    pub student: EvalResult,
    /// Teacher mAP, or student mAP for rows without a teacher.
    pub headline_map: f64,
    /// Mean pseudo-label FP ratio over the final 20% of iterations that logged one.
    pub tail_fp_ratio: Option<f64>,
    /// Data accesses made while training this row.
    pub audit: AuditCounts,
    /// Name of an earlier row with an identical effective config whose result was reused.
    pub reused_from: Option<String>,
    #[serde(skip)]
    pub log: Vec<IterationMetrics>,
    /// Final weights of the row.
    #[serde(skip)]
    pub archive: Option<Archive>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub name: String,
    pub outcome: std::result::Result<RowOutcome, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub target_test_fingerprint: String,
    pub pretrained_map: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&RowOutcome> {
        self.rows.iter().find(|r| r.name == name).and_then(|r| r.outcome.as_ref().ok())
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("seed {}  target-test {}  pretrained mAP {:.4}\n", self.seed, &self.target_test_fingerprint[..12], self.pretrained_map);
        let _ = writeln!(s, "{:<18} {:>10} {:>10} {:>10} {:>9} {:>12}", "variant", "teacher", "student", "headline", "tail_fp", "tgt_labels");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for r in &self.rows {
            match &r.outcome {
                Ok(o) => {
                    let _ = writeln!(
                        s,
                        "{:<18} {:>10} {:>10} {:>10.4} {:>9} {:>12}",
                        r.name,
                        fmt(o.teacher.as_ref().map(EvalResult::map_or_zero)),
                        fmt(Some(o.student.map_or_zero())),
                        o.headline_map,
                        fmt(o.tail_fp_ratio),
                        o.audit.get(Channel::TargetTrainLabels)
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{:<18} failed: {e}", r.name);
                }
            }
        }
        s
    }
}

/// Mean FP ratio over the last 20% of the log, counting only iterations that logged one.
pub fn tail_fp_ratio(log: &[IterationMetrics]) -> Option<f64> {
    let tail = &log[log.len() - log.len() / 5..];
    let v: Vec<f64> = tail.iter().filter_map(|m| m.fp_ratio).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn run_row(recipe: &Recipe, data: &ExperimentData, pretrained: &SupervisedState, variant: Variant) -> Result<RowOutcome> {
    let before = data.audit.snapshot();
    let test = data.target_test_view();
    let budget = recipe.train.burn_in_iterations + recipe.train.adapt_iterations;
    let supervised = |state: &mut SupervisedState, view: &SplitView<'_>, phase: u64| -> Result<RowOutcome> {
        let log = supervised_train(recipe, state, view, budget, phase, Some(&test), &mut NoObserver)?;
        let audit = data.audit.snapshot().since(&before);
        let student = evaluate_detector(&state.params, &recipe.head, &test)?;
        Ok(RowOutcome {
            teacher: None,
            headline_map: student.map_or_zero(),
            student,
            tail_fp_ratio: None,
            audit,
            reused_from: None,
            log,
            archive: Some(supervised_archive(state)),
        })
    };
    match variant {
        Variant::SourceOnly => supervised(&mut pretrained.clone(), &data.source_train_view(), stream::PRETRAIN),
        Variant::Oracle => {
            let labeled = data.labeled_target_train();
            let view = SplitView::new(&labeled, Channel::TargetTrainImages, &data.audit);
            supervised(&mut SupervisedState::init(recipe)?, &view, stream::ORACLE)
        }
        _ => {
            let train = variant.train_config(&recipe.train).expect("adaptation variant");
            let r = Recipe { train, ..recipe.clone() };
            let mut state = TrainerState::from_pretrained(&r, pretrained);
            let td = TrainData { source: data.source_train_view(), target: data.target_train_view(), sidecar: Some(data.sidecar_probe()), eval: Some(test) };
            let log = adapt(&r, &mut state, &td, None, &mut NoObserver)?;
            let audit = data.audit.snapshot().since(&before);
            if audit.get(Channel::TargetTrainLabels) != 0 {
                return Err(Error::InvalidConfig(format!("{} read target-train labels", variant.name())));
            }
            let student = evaluate_detector(&state.student, &r.head, &test)?;
            let teacher = if r.train.disable_mutual { None } else { Some(evaluate_detector(&state.teacher, &r.head, &test)?) };
            let headline = evaluate_detector(headline_model(&r, &state), &r.head, &test)?.map_or_zero();
            Ok(RowOutcome {
                teacher,
                student,
                headline_map: headline,
                tail_fp_ratio: tail_fp_ratio(&log),
                audit,
                reused_from: None,
                log,
                archive: Some(state.to_archive()),
            })
        }
    }
}

/// Runs every variant from the same pretrained weights and splits. A failing row is recorded
/// and the remaining rows still run. Rows whose effective config repeats an earlier row reuse
/// its result.
pub fn run_ablations(recipe: &Recipe, data: &ExperimentData, pretrained: &SupervisedState, grid: &[Variant]) -> Result<AblationReport> {
    recipe.validate()?;
    let test = data.target_test_view();
    let pretrained_map = evaluate_detector(&pretrained.params, &recipe.head, &test)?.map_or_zero();
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    let mut rows: Vec<AblationRow> = Vec::new();
    for &variant in grid {
        let name = variant.name();
        let key = match variant.train_config(&recipe.train) {
            Some(t) => serde_json::to_string(&t)?,
            None => name.clone(),
        };
        let outcome = if let Some(prev) = seen.get(&key) {
            let earlier = rows.iter().find(|r| &r.name == prev).expect("recorded row");
            earlier.outcome.clone().map(|o| RowOutcome { reused_from: Some(prev.clone()), audit: AuditCounts::default(), ..o })
        } else {
            info!("ablation row {name}");
            let out = run_row(recipe, data, pretrained, variant).map_err(|e| {
                warn!("ablation row {name} failed: {e}");
                e.to_string()
            });
            seen.insert(key, name.clone());
            out
        };
        rows.push(AblationRow { variant, name, outcome });
    }
    Ok(AblationReport { seed: recipe.train.seed, target_test_fingerprint: test.fingerprint(), pretrained_map, rows })
}

/// Adapts to the unlabeled target domain and scores the result on the held-out unseen domain,
/// which training never touches.
pub fn domain_generalization_eval(recipe: &Recipe, data: &ExperimentData, pretrained: &SupervisedState) -> Result<(EvalResult, DetectorParams)> {
    let unseen = data.unseen_test_view().ok_or_else(|| Error::DomainCollision("experiment has no unseen domain".into()))?;
    if data.unseen_shift.map(|(k, _)| k) == Some(data.spec.shift_kind) {
        return Err(Error::DomainCollision("unseen domain equals the adaptation target".into()));
    }
    let before = data.audit.snapshot();
    let mut state = TrainerState::from_pretrained(recipe, pretrained);
    let td = TrainData { source: data.source_train_view(), target: data.target_train_view(), sidecar: None, eval: None };
    adapt(recipe, &mut state, &td, None, &mut NoObserver)?;
    let reads = data.audit.snapshot().since(&before).get(Channel::UnseenTest);
    assert_eq!(reads, 0, "unseen domain was sampled during training");
    let model = headline_model(recipe, &state).clone();
    Ok((evaluate_detector(&model, &recipe.head, &unseen)?, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_experiment, SceneSpec, ShiftKind};
    use crate::detector::ArchConfig;
    use crate::training::pretrain;

    fn micro(unseen: Option<(ShiftKind, f64)>) -> (Recipe, ExperimentData) {
        let spec = SceneSpec { image_size: 32, objects_per_image: (1, 2), object_scale: (8.0, 16.0), seed: 5, ..Default::default() };
        let data = build_experiment(&spec, 8, 8, 4, unseen).unwrap();
        let mut r = Recipe { arch: ArchConfig::micro(), ..Default::default() };
        r.train.batch_source = 2;
        r.train.batch_target = 2;
        r.train.burn_in_iterations = 2;
        r.train.adapt_iterations = 4;
        r.train.eval_every = 2;
        r.train.confidence_threshold = 0.3;
        (r, data)
    }

    #[test]
    fn grid_rows_and_access_contract() {
        let (r, data) = micro(None);
        let (pre, _) = pretrain(&r, &data.source_train_view(), &mut NoObserver).unwrap();
        let report = run_ablations(&r, &data, &pre, &default_grid(&[0.0, 0.05, 0.1])).unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["source_only", "oracle", "full_at", "no_dis", "no_ws_aug", "no_mutual", "lambda_dis=0", "lambda_dis=0.05", "lambda_dis=0.1"]);
        assert!(report.rows.iter().all(|r| r.outcome.is_ok()));

        let src = report.row("source_only").unwrap();
        assert_eq!(src.audit.get(Channel::TargetTrainImages), 0);
        assert_eq!(src.audit.get(Channel::TargetTrainLabels), 0);
        assert_eq!(src.audit.get(Channel::TargetTrainLabelsAnalysis), 0);
        let oracle = report.row("oracle").unwrap();
        assert_eq!(oracle.audit.get(Channel::TargetTrainLabels), data.target_train.len());
        assert_eq!(oracle.audit.get(Channel::SourceTrain), 0);
        for name in ["full_at", "no_dis", "no_ws_aug", "no_mutual", "lambda_dis=0.05"] {
            let row = report.row(name).unwrap();
            assert_eq!(row.audit.get(Channel::TargetTrainLabels), 0, "{name}");
            assert!(row.audit.get(Channel::TargetTrainImages) > 0, "{name}");
            assert_eq!(row.log.len(), 4);
        }

        let zero = report.row("lambda_dis=0").unwrap();
        let no_dis = report.row("no_dis").unwrap();
        assert_eq!(zero.reused_from.as_deref(), Some("no_dis"));
        assert_eq!((&zero.teacher, &zero.student, &zero.log), (&no_dis.teacher, &no_dis.student, &no_dis.log));
        assert_eq!(report.row("lambda_dis=0.1").unwrap().reused_from.as_deref(), Some("full_at"));
        assert!(report.row("no_mutual").unwrap().teacher.is_none());
        assert!(report.to_table().contains("lambda_dis=0.05"));
        let fp = report.row("source_only").unwrap().student.split_fingerprint.clone();
        assert_eq!(fp.as_deref(), Some(report.target_test_fingerprint.as_str()));
    }

    #[test]
    fn unseen_domain_is_isolated() {
        let (r, data) = micro(Some((ShiftKind::Palette, 1.0)));
        let (pre, _) = pretrain(&r, &data.source_train_view(), &mut NoObserver).unwrap();
        let (result, _) = domain_generalization_eval(&r, &data, &pre).unwrap();
        assert_eq!(result.per_class.len(), r.arch.num_classes);
        assert_eq!(result.num_images, 4);
        assert_eq!(data.audit.count(Channel::UnseenTest), 4);

        let (r, data) = micro(None);
        assert!(matches!(domain_generalization_eval(&r, &data, &pre), Err(Error::DomainCollision(_))));
    }
}
