use atlab_core::data::Channel;
use atlab_core::eval::{domain_generalization_eval, run_ablations, Variant};
use atlab_core::experiment::ExperimentConfig;
use atlab_core::training::{pretrain, NoObserver};
use atlab_core::Error;

const MICRO: &str = r#"
schema_version = 1

[scene]
image_size = 32
objects_per_image = [1, 2]
object_scale = [8.0, 16.0]
seed = 6

[splits]
n_source = 8
n_target = 8
n_test = 4
unseen_kind = "palette"

[arch]
image_size = 32
num_classes = 3
encoder_channels = [2, 3, 4, 4]
rpn_hidden = 4
anchor_scales = [8.0, 16.0]
roi_pool = 2
roi_hidden = 4
discriminator_hidden = 3

[train]
burn_in_iterations = 4
adapt_iterations = 4
batch_source = 2
batch_target = 2
confidence_threshold = 0.3
eval_every = 2
seed = 6
"#;

#[test]
fn only_the_oracle_reads_target_labels() {
    let cfg = ExperimentConfig::from_toml(MICRO).unwrap();
    let data = cfg.build_data().unwrap();
    let r = cfg.recipe();
    let (pre, _) = pretrain(&r, &data.source_train_view(), &mut NoObserver).unwrap();
    let grid = [Variant::SourceOnly, Variant::Oracle, Variant::FullAt, Variant::NoMutual];
    let report = run_ablations(&r, &data, &pre, &grid).unwrap();
    for row in &report.rows {
        let o = row.outcome.as_ref().unwrap();
        let labels = o.audit.get(Channel::TargetTrainLabels);
        assert_eq!(labels > 0, row.variant == Variant::Oracle, "{}: {labels} label reads", row.name);
        assert_eq!(o.audit.get(Channel::UnseenTest), 0);
        assert!((0.0..=1.0).contains(&o.headline_map));
    }
    let no_mutual = report.row("no_mutual").unwrap();
    assert_eq!(no_mutual.headline_map, no_mutual.student.map_or_zero());
    assert!(report.to_table().contains("oracle"));
}

#[test]
fn unseen_domain_is_read_only_at_evaluation() {
    let cfg = ExperimentConfig::from_toml(MICRO).unwrap();
    let data = cfg.build_data().unwrap();
    let r = cfg.recipe();
    let (pre, _) = pretrain(&r, &data.source_train_view(), &mut NoObserver).unwrap();
    let before = data.audit.snapshot();
    let (result, _) = domain_generalization_eval(&r, &data, &pre).unwrap();
    assert!((0.0..=1.0).contains(&result.map_or_zero()));
    assert!(data.audit.snapshot().since(&before).get(Channel::UnseenTest) > 0);

    let mut same = cfg.clone();
    same.splits.unseen_kind = None;
    let plain = same.build_data().unwrap();
    assert!(matches!(domain_generalization_eval(&r, &plain, &pre), Err(Error::DomainCollision(_))));
}
