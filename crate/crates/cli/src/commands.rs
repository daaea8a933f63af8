use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lion_core::gradcheck::{run_gradcheck, CaseStatus};
use lion_core::harness::{pretrain_backbone, run_protocol, verify_proposition1, Pretrained, Prop1Config, Protocol};
use lion_core::lion::{param_count_report, Classifier, TuneMode};
use lion_core::persist::{
    pretrained_from_checkpoint, pretrained_to_checkpoint, read_records, render_complexity, render_table, trace_to_csv,
    tuned_from_checkpoint, tuned_to_checkpoint, write_atomic, write_records, Checkpoint, RunConfig, RunRecord,
};
use lion_core::robust_opt::{self, TrainingLog};
use lion_core::Error;

use crate::error::CliError;

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const RUNS_FILE: &str = "runs.csv";

/// Worked sizes for the complexity table: ViT-B token width, a 64-wide
/// bottleneck, 12 blocks, 50 prompt tokens, rank-16 prompt blocks, 10 classes.
const COMPLEXITY_SIZES: (u64, u64, u64, u64, u64, u64) = (768, 64, 12, 50, 16, 10);

fn prepare(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(Error::from)?;
    cfg.save(&cfg.out.join(format!("{command}.cfg")))?;
    Ok(cfg.out.clone())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn tuned_file(protocol: Protocol) -> String {
    format!("tuned-{}.ckpt", protocol.name())
}

fn load_pretrained(out: &Path) -> Result<Pretrained, CliError> {
    let path = out.join(BACKBONE_FILE);
    let ck = Checkpoint::load(&path).map_err(CliError::missing(&path))?;
    pretrained_from_checkpoint(&ck).map_err(CliError::missing(&path))
}

pub fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let out = prepare(cfg, "pretrain")?;
    let task = cfg.task_spec().build()?;
    let mut pre = pretrain_backbone(&task.source_train, &cfg.pretrain_config(), cfg.seed).map_err(|e| match e {
        Error::Setup(msg) => CliError::Check(msg),
        other => other.into(),
    })?;
    let probe = Classifier::new(pre.backbone.clone(), pre.head.clone(), TuneMode::Head)?;
    pre.test_accuracy = Some(robust_opt::accuracy(&probe, &task.source_test)?);
    pretrained_to_checkpoint(&pre)?.save(&out.join(BACKBONE_FILE))?;

    let mut text = String::new();
    let dims: Vec<String> = std::iter::once(pre.backbone.input_dim())
        .chain(pre.backbone.layers.iter().map(|l| l.output_dim()))
        .map(|d| d.to_string())
        .collect();
    writeln!(text, "task            {}", task_label(cfg)).unwrap();
    writeln!(
        text,
        "backbone        {} ({} params)",
        dims.join("-"),
        pre.backbone.param_count()
    )
    .unwrap();
    writeln!(text, "train_accuracy  {}", pre.train_accuracy).unwrap();
    writeln!(text, "test_accuracy   {}", pre.test_accuracy.unwrap_or(f64::NAN)).unwrap();
    print!("{text}");
    write_text(&out.join("pretrain.txt"), &text)
}

fn task_label(cfg: &RunConfig) -> String {
    cfg.task_spec().label()
}

fn trace_table(log: &TrainingLog) -> String {
    let mut s = format!(
        "{:>5} {:>10} {:>8} {:>8} {:>8} {:>8}\n",
        "epoch", "loss", "acc", "crucial", "alpha1", "alpha2"
    );
    for e in &log.epochs {
        let diag = |k: &str| {
            e.diagnostics
                .iter()
                .find(|(n, _)| *n == k)
                .map_or_else(|| "-".to_string(), |(_, v)| format!("{v:.4}"))
        };
        writeln!(
            s,
            "{:>5} {:>10.5} {:>8.4} {:>8.4} {:>8} {:>8}",
            e.epoch,
            e.loss,
            e.accuracy,
            e.crucial_fraction,
            diag("alpha1"),
            diag("alpha2")
        )
        .unwrap();
    }
    s
}

pub fn tune(cfg: &RunConfig) -> Result<(), CliError> {
    let out = prepare(cfg, "tune")?;
    let pre = load_pretrained(&out)?;
    let task = cfg.task_spec().build()?;
    let run = run_protocol(
        cfg.protocol,
        &pre,
        &task.target_train,
        &task.target_test,
        &cfg.protocol_config(),
    )?;
    let name = cfg.protocol.name();
    tuned_to_checkpoint(cfg.protocol, &run.model)?.save(&out.join(tuned_file(cfg.protocol)))?;
    write_text(&out.join(format!("trace-{name}.csv")), &trace_to_csv(&run.log)?)?;

    let label = task_label(cfg);
    let record = RunRecord {
        run_id: format!("{name}-{label}-s{}", cfg.seed),
        protocol: name.to_string(),
        dataset: label.clone(),
        seed: cfg.seed,
        accuracy: run.result.accuracy,
        trainable_params: run.result.trainable_params,
        epochs: run.result.epochs,
        wall_time_s: run.result.wall_time,
    };
    let runs_path = out.join(RUNS_FILE);
    let mut records = if runs_path.exists() {
        read_records(&runs_path)?
    } else {
        Vec::new()
    };
    records.retain(|r| r.run_id != record.run_id);
    records.push(record);
    write_records(&runs_path, &records)?;
    write_text(&out.join("runs.txt"), &render_table(&records))?;

    let mut text = String::new();
    writeln!(text, "protocol          {name}").unwrap();
    writeln!(text, "task              {label}").unwrap();
    writeln!(text, "accuracy          {}", run.result.accuracy).unwrap();
    writeln!(text, "trainable_params  {}", run.result.trainable_params).unwrap();
    writeln!(text, "epochs            {}", run.result.epochs).unwrap();
    writeln!(text, "wall_time_s       {:.2}", run.result.wall_time).unwrap();
    print!("{text}");
    text.push('\n');
    text.push_str(&trace_table(&run.log));
    write_text(&out.join(format!("tune-{name}.txt")), &text)
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let out = prepare(cfg, "eval")?;
    let path = out.join(tuned_file(cfg.protocol));
    let ck = Checkpoint::load(&path).map_err(CliError::missing(&path))?;
    let (protocol, model) = tuned_from_checkpoint(&ck).map_err(CliError::missing(&path))?;
    if protocol != cfg.protocol {
        return Err(CliError::Missing {
            path,
            source: Error::Format(format!("holds a {protocol} model, expected {}", cfg.protocol)),
        });
    }
    let task = cfg.task_spec().build()?;
    let accuracy = model.accuracy(&task.target_test)?;
    let mut text = String::new();
    writeln!(text, "protocol          {protocol}").unwrap();
    writeln!(text, "task              {}", task_label(cfg)).unwrap();
    writeln!(text, "accuracy          {accuracy}").unwrap();
    writeln!(text, "trainable_params  {}", model.trainable_count()).unwrap();
    print!("{text}");
    write_text(&out.join(format!("eval-{}.txt", protocol.name())), &text)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let out = prepare(cfg, "gradcheck")?;
    let report = run_gradcheck(&cfg.gradcheck_config())?;
    let table = report.to_string();
    print!("{table}");
    write_text(&out.join("gradcheck.txt"), &table)?;
    let mut csv = String::from("case,state_dim,input_dim,fd_rel,unroll_rel,status\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
    for c in &report.cases {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            c.index,
            c.state_dim,
            c.input_dim,
            opt(c.fd_error),
            opt(c.unrolled_error),
            c.status.label()
        )
        .unwrap();
    }
    write_text(&out.join("gradcheck.csv"), &csv)?;
    if report.passed() {
        return Ok(());
    }
    let failed = report.cases.iter().filter(|c| c.status != CaseStatus::Pass).count();
    let worst = report.worst().expect("a failing case exists");
    let detail = match worst.status {
        CaseStatus::Nonconverged { iterations, residual } => {
            format!("residual {residual:.3e} after {iterations} iterations")
        }
        _ => format!(
            "fd_rel {}, unroll_rel {}",
            worst.fd_error.map_or_else(|| "-".into(), |v| format!("{v:.3e}")),
            worst.unrolled_error.map_or_else(|| "-".into(), |v| format!("{v:.3e}"))
        ),
    };
    Err(CliError::Check(format!(
        "{failed} of {} cases failed; worst is case {} ({}: {detail})",
        report.cases.len(),
        worst.index,
        worst.status.label(),
    )))
}

pub fn prop1(cfg: &RunConfig) -> Result<(), CliError> {
    let out = prepare(cfg, "prop1")?;
    let rep = verify_proposition1(&Prop1Config {
        seed: cfg.seed,
        ..Prop1Config::default()
    })?;
    let restarts: Vec<String> = rep.output_side_losses.iter().map(|l| format!("{l:.4}")).collect();
    let mut text = String::new();
    writeln!(text, "pretrain_loss       {:.3e}", rep.pretrain_loss).unwrap();
    writeln!(text, "closed_form_loss    {:.3e}", rep.closed_form_loss).unwrap();
    writeln!(text, "input_side_loss     {:.3e}", rep.input_side_loss).unwrap();
    writeln!(
        text,
        "output_side_loss    {:.4} (min of {})",
        rep.output_side_loss,
        restarts.join(", ")
    )
    .unwrap();
    writeln!(text, "control_loss        {:.3e}", rep.control_loss).unwrap();
    writeln!(text, "verdict             {}", rep.verdict()).unwrap();
    print!("{text}");
    write_text(&out.join("prop1.txt"), &text)?;
    let mut csv = String::from("metric,value\n");
    for (k, v) in [
        ("pretrain_loss", rep.pretrain_loss),
        ("closed_form_loss", rep.closed_form_loss),
        ("input_side_loss", rep.input_side_loss),
        ("output_side_loss", rep.output_side_loss),
        ("control_loss", rep.control_loss),
    ] {
        writeln!(csv, "{k},{v:?}").unwrap();
    }
    writeln!(csv, "confirmed,{}", rep.confirmed()).unwrap();
    write_text(&out.join("prop1.csv"), &csv)?;
    if rep.confirmed() {
        Ok(())
    } else {
        Err(CliError::Check(rep.verdict().to_string()))
    }
}

pub fn report(cfg: &RunConfig, paths: &[PathBuf]) -> Result<(), CliError> {
    let mut records = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join(RUNS_FILE) } else { p.clone() };
        records.extend(read_records(&file).map_err(CliError::missing(&file))?);
    }
    let out = prepare(cfg, "report")?;
    let (d, d_tilde, layers, prompts, m, classes) = COMPLEXITY_SIZES;
    let mut text = render_table(&records);
    text.push('\n');
    text.push_str(&render_complexity(&param_count_report(
        d, d_tilde, layers, prompts, m, classes,
    )));
    print!("{text}");
    write_text(&out.join("report.txt"), &text)?;
    write_records(&out.join("report.csv"), &records)?;
    Ok(())
}
