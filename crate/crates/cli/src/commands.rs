//! One function per verb.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use atlab_core::data::{load_experiment, load_manifest, save_experiment, Dataset, ExperimentData, SplitView, SPLIT_NAMES};
use atlab_core::data::Channel;
use atlab_core::detector::checkpoint::Archive;
use atlab_core::eval::curves::{block_means, eval_curves, loss_curves, metrics_log_line};
use atlab_core::eval::{evaluate_detector, parse_metrics_log, run_ablations, svg_line_plot, AblationReport, EvalResult, Variant};
use atlab_core::experiment::ExperimentConfig;
use atlab_core::training::{
    adapt, model_from_archive, pretrain, supervised_archive, supervised_from_archive, IterationMetrics, RunObserver, SupervisedState, TrainData,
    TrainerState,
};
use atlab_core::{Error, Result};
use log::{info, warn};

use crate::workdir::{slug, write_atomic, ExperimentDir};
use crate::{Cli, Command, Which};

pub fn run(cli: &Cli) -> Result<()> {
    let dir = ExperimentDir::new(&cli.out);
    match &cli.command {
        Command::GenData => gen_data(cli, &dir),
        Command::Pretrain => cmd_pretrain(cli, &dir),
        Command::Adapt { init, resume, stop_at } => cmd_adapt(cli, &dir, init.as_deref(), resume.as_deref(), *stop_at),
        Command::Eval { checkpoint, split, which } => cmd_eval(cli, &dir, checkpoint.as_deref(), split, *which),
        Command::Ablate => cmd_ablate(cli, &dir),
        Command::Curves { log } => cmd_curves(cli, &dir, log.as_deref()),
    }
}

fn already_exists(path: &Path) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::AlreadyExists, format!("{} exists; pass --force to overwrite", path.display())))
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Effective config for a command that consumes existing outputs. Writes the snapshot when
/// the directory has none yet.
fn config_for(cli: &Cli, dir: &ExperimentDir) -> Result<ExperimentConfig> {
    let (cfg, fresh) = dir.resolve_config(cli.config.as_deref(), cli.seed, false)?;
    if fresh && !cli.dry_run {
        dir.write_snapshot(&cfg)?;
    }
    Ok(cfg)
}

fn load_data(dir: &ExperimentDir) -> Result<ExperimentData> {
    load_experiment(&dir.datasets())
}

fn gen_data(cli: &Cli, dir: &ExperimentDir) -> Result<()> {
    if is_nonempty_dir(&dir.datasets()) && !cli.force {
        return Err(already_exists(&dir.datasets()));
    }
    let (cfg, _) = dir.resolve_config(cli.config.as_deref(), cli.seed, cli.force)?;
    let s = &cfg.splits;
    if cli.dry_run {
        println!(
            "would generate {} source / {} target / {} test images ({:?} shift, severity {}) into {}",
            s.n_source,
            s.n_target,
            s.n_test,
            cfg.scene.shift_kind,
            cfg.scene.shift_severity,
            dir.datasets().display()
        );
        return Ok(());
    }
    if cli.force {
        dir.clear_outputs()?;
    }
    dir.write_snapshot(&cfg)?;
    let data = cfg.build_data()?;
    let manifest = save_experiment(&data, &dir.datasets())?;
    for (name, e) in &manifest.splits {
        println!("{name:<14} {:>5} images  {}", e.count, e.fingerprint);
    }
    Ok(())
}

/// Writes metrics lines, wall times and periodic checkpoints.
struct FileObserver<'a> {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    dir: &'a ExperimentDir,
}

impl<'a> FileObserver<'a> {
    fn new(dir: &'a ExperimentDir, metrics: &Path, append: bool) -> Result<Self> {
        let open = |p: &Path| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(p)?))
        };
        let timing = BufWriter::new(OpenOptions::new().create(true).append(true).open(dir.timing_log())?);
        Ok(Self { metrics: open(metrics)?, timing, dir })
    }
}

impl RunObserver for FileObserver<'_> {
    fn on_iteration(&mut self, m: &IterationMetrics, elapsed: Duration) -> Result<()> {
        writeln!(self.metrics, "{}", metrics_log_line(m))?;
        self.metrics.flush()?;
        let phase = serde_json::to_value(m.phase)?;
        writeln!(self.timing, "{} {} {:.3}", phase.as_str().unwrap_or("?"), m.iteration, elapsed.as_secs_f64() * 1e3)?;
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainerState) -> Result<()> {
        state.to_archive().save(&self.dir.adapt_checkpoint(state.iteration))
    }
}

fn cmd_pretrain(cli: &Cli, dir: &ExperimentDir) -> Result<()> {
    let cfg = config_for(cli, dir)?;
    load_manifest(&dir.datasets())?;
    let ckpt = dir.pretrain_checkpoint();
    if ckpt.exists() && !cli.force {
        return Err(already_exists(&ckpt));
    }
    if cli.dry_run {
        println!("would run {} burn-in iterations and write {}", cfg.train.burn_in_iterations, ckpt.display());
        return Ok(());
    }
    let data = load_data(dir)?;
    let recipe = cfg.recipe();
    let mut obs = FileObserver::new(dir, &dir.pretrain_log(), false)?;
    let (state, log) = pretrain(&recipe, &data.source_train_view(), &mut obs)?;
    supervised_archive(&state).save(&ckpt)?;
    if let Some(last) = log.last() {
        info!("burn-in done: final L_sup {:.4}", last.l_sup);
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

/// Keeps the first `n` lines of a metrics log, which must exist.
fn truncate_log(path: &Path, n: u64) -> Result<()> {
    let lines: Vec<String> = if path.exists() { BufReader::new(File::open(path)?).lines().collect::<std::io::Result<_>>()? } else { Vec::new() };
    if (lines.len() as u64) < n {
        return Err(Error::Checkpoint(format!("{} has {} lines, checkpoint is at iteration {n}", path.display(), lines.len())));
    }
    let kept: String = lines.iter().take(n as usize).map(|l| format!("{l}\n")).collect();
    write_atomic(path, kept.as_bytes())
}

fn cmd_adapt(cli: &Cli, dir: &ExperimentDir, init: Option<&Path>, resume: Option<&Path>, stop_at: Option<u64>) -> Result<()> {
    let cfg = config_for(cli, dir)?;
    let recipe = cfg.recipe();
    let fingerprint = recipe.arch.fingerprint();
    load_manifest(&dir.datasets())?;
    let mut state = match resume {
        Some(p) => TrainerState::from_archive(&recipe, &Archive::load_checked(p, &fingerprint)?)?,
        None => {
            let p = init.map_or_else(|| dir.pretrain_checkpoint(), Path::to_path_buf);
            let pre: SupervisedState = supervised_from_archive(&recipe, &Archive::load_checked(&p, &fingerprint)?)?;
            if dir.metrics_log().exists() && !cli.force {
                return Err(already_exists(&dir.metrics_log()));
            }
            TrainerState::from_pretrained(&recipe, &pre)
        }
    };
    let end = stop_at.map_or(cfg.train.adapt_iterations, |s| s.min(cfg.train.adapt_iterations));
    if cli.dry_run {
        println!(
            "would adapt from iteration {} to {end} (dis {}, ws_aug {}, mutual {})",
            state.iteration,
            cfg.train.adversary_active(),
            !cfg.train.disable_ws_aug,
            !cfg.train.disable_mutual
        );
        return Ok(());
    }
    if resume.is_some() {
        truncate_log(&dir.metrics_log(), state.iteration)?;
    }
    let data = load_data(dir)?;
    let td = TrainData {
        source: data.source_train_view(),
        target: data.target_train_view(),
        sidecar: Some(data.sidecar_probe()),
        eval: Some(data.target_test_view()),
    };
    let mut obs = FileObserver::new(dir, &dir.metrics_log(), resume.is_some())?;
    adapt(&recipe, &mut state, &td, stop_at, &mut obs)?;
    drop(obs);
    let path = if state.iteration >= cfg.train.adapt_iterations { dir.final_checkpoint() } else { dir.adapt_checkpoint(state.iteration) };
    state.to_archive().save(&path)?;
    if data.audit.count(Channel::TargetTrainLabels) != 0 {
        return Err(Error::InvalidConfig("adaptation read target-train labels".into()));
    }
    println!("wrote {} at iteration {}", path.display(), state.iteration);
    Ok(())
}

fn split_dataset(data: &ExperimentData, name: &str) -> Result<(Dataset, Channel)> {
    Ok(match name {
        "source_train" => (data.source_train.clone(), Channel::SourceTrain),
        "target_train" => (data.labeled_target_train(), Channel::TargetTrainImages),
        "source_test" => (data.source_test.clone(), Channel::SourceTest),
        "target_test" => (data.target_test.clone(), Channel::TargetTest),
        "unseen_test" => (data.unseen_test.clone().ok_or_else(|| Error::UnknownSplit(name.into()))?, Channel::UnseenTest),
        _ => return Err(Error::UnknownSplit(name.into())),
    })
}

fn print_eval(title: &str, r: &EvalResult) {
    println!("{title}: mAP {}", r.map.map_or("undefined".into(), |m| format!("{m:.4}")));
    for (c, m) in r.per_class.iter().enumerate() {
        println!("  class {c}: AP {}  gt {}  det {}  tp {}", m.ap.map_or("-".into(), |a| format!("{a:.4}")), m.num_gt, m.num_detections, m.true_positives);
    }
}

fn cmd_eval(cli: &Cli, dir: &ExperimentDir, checkpoint: Option<&Path>, split: &str, which: Which) -> Result<()> {
    if !SPLIT_NAMES.contains(&split) {
        return Err(Error::UnknownSplit(split.into()));
    }
    let cfg = config_for(cli, dir)?;
    let recipe = cfg.recipe();
    let ckpt = checkpoint.map_or_else(|| dir.final_checkpoint(), Path::to_path_buf);
    let archive = Archive::load_checked(&ckpt, &recipe.arch.fingerprint())?;
    let model = model_from_archive(&recipe, &archive, which == Which::Teacher)?;
    if cli.dry_run {
        println!("would evaluate the {which:?} of {} on {split}", ckpt.display());
        return Ok(());
    }
    let data = load_data(dir)?;
    let (ds, channel) = split_dataset(&data, split)?;
    let view = SplitView::new(&ds, channel, &data.audit);
    let result = evaluate_detector(&model, &recipe.head, &view)?;
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let which_name = format!("{which:?}").to_lowercase();
    let out = dir.reports().join(format!("eval_{stem}_{split}_{which_name}.json"));
    let report = serde_json::json!({ "checkpoint": ckpt, "split": split, "which": which_name, "result": result });
    write_atomic(&out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    print_eval(&format!("{split} ({which_name})"), &result);
    println!("wrote {}", out.display());
    Ok(())
}

fn load_or_pretrain(cli: &Cli, dir: &ExperimentDir, cfg: &ExperimentConfig, data: &ExperimentData) -> Result<SupervisedState> {
    let recipe = cfg.recipe();
    let ckpt = dir.pretrain_checkpoint();
    if ckpt.exists() && !cli.force {
        return supervised_from_archive(&recipe, &Archive::load_checked(&ckpt, &recipe.arch.fingerprint())?);
    }
    info!("no pretrained checkpoint; running burn-in");
    let mut obs = FileObserver::new(dir, &dir.pretrain_log(), false)?;
    let (state, _) = pretrain(&recipe, &data.source_train_view(), &mut obs)?;
    supervised_archive(&state).save(&ckpt)?;
    Ok(state)
}

fn headline_series(log: &[IterationMetrics], cadence: u64) -> Vec<(f64, f64)> {
    let c = eval_curves(log, cadence);
    let teacher = c.points("teacher_map");
    if teacher.is_empty() {
        c.points("student_map")
    } else {
        teacher
    }
}

fn cmd_ablate(cli: &Cli, dir: &ExperimentDir) -> Result<()> {
    let cfg = config_for(cli, dir)?;
    let grid = cfg.ablation.grid();
    load_manifest(&dir.datasets())?;
    if cli.dry_run {
        let names: Vec<String> = grid.iter().map(Variant::name).collect();
        println!("would run rows: {}", names.join(", "));
        return Ok(());
    }
    let data = load_data(dir)?;
    let pre = load_or_pretrain(cli, dir, &cfg, &data)?;
    let report = run_ablations(&cfg.recipe(), &data, &pre, &grid)?;
    write_ablation_outputs(dir, &cfg, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn write_ablation_outputs(dir: &ExperimentDir, cfg: &ExperimentConfig, report: &AblationReport) -> Result<()> {
    let cadence = cfg.train.eval_every;
    write_atomic(&dir.reports().join("ablation.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    write_atomic(&dir.reports().join("ablation.txt"), report.to_table().as_bytes())?;
    let mut map_series = Vec::new();
    let mut fp_series = Vec::new();
    let mut sweep_series = Vec::new();
    for row in &report.rows {
        let Ok(o) = &row.outcome else { continue };
        let s = slug(&row.name);
        if o.reused_from.is_none() {
            let log: String = o.log.iter().map(|m| metrics_log_line(m) + "\n").collect();
            write_atomic(&dir.reports().join("ablation").join(format!("{s}.metrics.log")), log.as_bytes())?;
            if let Some(a) = &o.archive {
                a.save(&dir.checkpoints().join("ablation").join(format!("{s}.ckpt")))?;
            }
        }
        write_atomic(&dir.curves().join(format!("{s}_loss.csv")), loss_curves(&o.log).to_csv().as_bytes())?;
        write_atomic(&dir.curves().join(format!("{s}_eval.csv")), eval_curves(&o.log, cadence).to_csv().as_bytes())?;
        let headline = headline_series(&o.log, cadence);
        if matches!(row.variant, Variant::LambdaDis(_)) {
            sweep_series.push((row.name.clone(), headline));
        } else {
            map_series.push((row.name.clone(), headline));
            let fp = loss_curves(&o.log).points("fp_ratio");
            if !fp.is_empty() {
                fp_series.push((row.name.clone(), block_means(&fp, cadence.max(1) as usize)));
            }
        }
    }
    let plots = [
        ("ablation_map.svg", "Target-test mAP", "mAP", &map_series),
        ("ablation_fp_ratio.svg", "Pseudo-label FP ratio (block means)", "FP ratio", &fp_series),
        ("lambda_sweep_map.svg", "λ_dis sweep: target-test mAP", "mAP", &sweep_series),
    ];
    for (file, title, y, series) in plots {
        write_atomic(&dir.curves().join(file), svg_line_plot(title, "iteration", y, series).as_bytes())?;
    }
    let failed: Vec<&str> = report.rows.iter().filter(|r| r.outcome.is_err()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        warn!("failed rows: {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_curves(cli: &Cli, dir: &ExperimentDir, log: Option<&Path>) -> Result<()> {
    let cfg = config_for(cli, dir)?;
    let path: PathBuf = log.map_or_else(|| dir.metrics_log(), Path::to_path_buf);
    let entries = parse_metrics_log(&fs::read_to_string(&path)?, &path)?;
    if cli.dry_run {
        println!("would write curves for {} iterations of {}", entries.len(), path.display());
        return Ok(());
    }
    let loss = loss_curves(&entries);
    let eval = eval_curves(&entries, cfg.train.eval_every);
    let out = dir.curves();
    write_atomic(&out.join("loss.csv"), loss.to_csv().as_bytes())?;
    write_atomic(&out.join("eval.csv"), eval.to_csv().as_bytes())?;
    let named = |c: &atlab_core::eval::Curves, names: &[&str]| names.iter().map(|n| (n.to_string(), c.points(n))).collect::<Vec<_>>();
    write_atomic(&out.join("loss.svg"), svg_line_plot("Losses", "iteration", "loss", &named(&loss, &["l_sup", "l_unsup", "l_dis", "total"])).as_bytes())?;
    write_atomic(&out.join("map.svg"), svg_line_plot("Target-test mAP", "iteration", "mAP", &named(&eval, &["teacher_map", "student_map"])).as_bytes())?;
    let fp = block_means(&loss.points("fp_ratio"), cfg.train.eval_every.max(1) as usize);
    write_atomic(&out.join("fp_ratio.svg"), svg_line_plot("Pseudo-label FP ratio", "iteration", "FP ratio", &[("fp_ratio".to_string(), fp)]).as_bytes())?;
    println!("wrote curves for {} iterations to {}", entries.len(), out.display());
    Ok(())
}
