use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use disentangle_core::data_io::{read_shard, read_text_bank, write_shard, write_text_bank};
use disentangle_core::evaluation::{histogram_csv, segment_projected, similarity_csv};
use disentangle_core::projectors::{init_projectors, project_text};
use disentangle_core::trainer::Trainer;
use disentangle_core::{
    evaluate_mlr, generate_synthetic, load_checkpoint, mfi_statistic, save_checkpoint,
    DatasetManifest, DenseArray, Error, LossConfig, NormMode, SegmentOptions, SyntheticSpec,
    TrainConfig,
};
use serde_json::json;

use crate::args::{AnalyzeMfiArgs, Command, EvalMlrArgs, GenSyntheticArgs, SegmentArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad flag values or combinations; exit code 1.
    Usage(String),
    /// Unreadable, malformed or mismatched inputs; exit code 2.
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// `path` with `suffix` appended to its file name.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// A file beside `path` named `<stem><suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn create_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Runs one subcommand. `resolved` is the rendered config saved beside the
/// outputs.
pub fn run(command: Command, resolved: &str) -> CliResult {
    match command {
        Command::GenSynthetic(a) => gen_synthetic(a, resolved),
        Command::Train(a) => train(a, resolved),
        Command::EvalMlr(a) => eval_mlr(a, resolved),
        Command::Segment(a) => segment(a, resolved),
        Command::AnalyzeMfi(a) => analyze_mfi(a, resolved),
    }
}

fn gen_synthetic(a: GenSyntheticArgs, resolved: &str) -> CliResult {
    let spec = SyntheticSpec {
        n_classes: a.classes,
        d: a.dim,
        grid: a.grid,
        rho: a.rho.unwrap_or_default(),
        target_similarity: if a.rho.is_some() {
            None
        } else {
            Some(a.target_similarity)
        },
        samples: a.samples,
        test_samples: a.test_samples,
        noise_sigma: a.noise,
        text_noise: a.text_noise,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    spec.validate().map_err(usage)?;
    spec.effective_rho().map_err(usage)?;
    let data = generate_synthetic(&spec)?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("gen-synthetic.config"), resolved)?;
    write_shard(&data.train, a.out.join("train.dcf"))?;
    write_shard(&data.test, a.out.join("test.dcf"))?;
    write_text_bank(&data.bank, a.out.join("text_bank.dtb"))?;
    for (split, shard) in [("train", "train.dcf"), ("test", "test.dcf")] {
        DatasetManifest::new(
            "synthetic",
            data.bank.class_names.clone(),
            spec.d,
            split,
            vec![PathBuf::from(shard)],
            data.bank.prompt_templates.clone(),
        )
        .save(a.out.join(format!("{split}.json")))?;
    }
    let summary = json!({
        "spec": spec,
        "rho": data.rho,
        "mean_similarity": data.mean_similarity,
        "class_names": data.bank.class_names,
        "train_planted": data.train_planted,
        "test_planted": data.test_planted,
    });
    fs::write(
        a.out.join("synthetic.json"),
        serde_json::to_string_pretty(&summary).map_err(Error::from)?,
    )?;
    println!(
        "wrote {} train / {} test records, {} classes, rho {:.4}, raw similarity {:.4} to {}",
        data.train.len(),
        data.test.len(),
        spec.n_classes,
        data.rho,
        data.mean_similarity,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, resolved: &str) -> CliResult {
    let config = TrainConfig {
        lr0: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        loss: LossConfig {
            lambda: a.lambda,
            alpha: a.alpha,
            gamma_pos: a.gamma_pos,
            gamma_neg: a.gamma_neg,
            delta: a.delta,
            gram_axis: a.gram_axis.into(),
            bn_before_gram: a.bn_before_gram,
        },
        logit_scale: a.logit_scale,
        shuffle: a.shuffle,
        pooling_order: a.pooling.into(),
        momentum: a.momentum,
        hidden: a.hidden,
        d_prime: a.d_prime,
    };
    config.validate().map_err(usage)?;

    let manifest = DatasetManifest::load(&a.manifest)?;
    let bank = manifest.load_text_bank(&a.text_bank)?;
    let records = manifest.load_records()?;
    let init = init_projectors(bank.dim(), config.hidden, config.d_prime, config.seed)?;
    let mut trainer = Trainer::new(&records, &bank, &config, init)?;

    let epochs_logged = |t: &Trainer| t.log().epochs().count();
    let mut seen = epochs_logged(&trainer);
    let mut last = None;
    while let Some(step) = trainer.step()? {
        last = Some(step);
        if epochs_logged(&trainer) > seen {
            seen = epochs_logged(&trainer);
            let stat = trainer.log().final_mfi_statistic().unwrap_or(f64::NAN);
            println!(
                "epoch {:>3}/{}  lr {:.3e}  asl {:.5}  mfi {:.5}  total {:.5}  mfi_stat {:.4}",
                step.epoch, config.epochs, step.lr, step.asl, step.mfi, step.total, stat
            );
        }
    }

    create_parent(&a.out_checkpoint)?;
    save_checkpoint(trainer.params(), &a.out_checkpoint)?;
    fs::write(with_suffix(&a.out_checkpoint, ".config"), resolved)?;
    let log_path = a
        .log
        .unwrap_or_else(|| with_suffix(&a.out_checkpoint, ".log.jsonl"));
    create_parent(&log_path)?;
    let mut out = BufWriter::new(File::create(&log_path)?);
    trainer.log().write_jsonl(&mut out)?;
    out.flush()?;

    let log = trainer.log();
    println!(
        "{} steps; mfi_stat {:.4} -> {:.4}; final loss {}; checkpoint {}",
        trainer.steps_done(),
        log.initial_mfi_statistic().unwrap_or(f64::NAN),
        log.final_mfi_statistic().unwrap_or(f64::NAN),
        last.map(|s| format!("{:.5}", s.total))
            .unwrap_or_else(|| "n/a".into()),
        a.out_checkpoint.display()
    );
    Ok(())
}

fn eval_mlr(a: EvalMlrArgs, resolved: &str) -> CliResult {
    if !(a.logit_scale.is_finite() && a.logit_scale > 0.0) {
        return Err(usage(format!(
            "logit scale must be positive, got {}",
            a.logit_scale
        )));
    }
    if !(0.0..=1.0).contains(&a.precision_threshold) {
        return Err(usage(format!(
            "precision threshold must lie in [0, 1], got {}",
            a.precision_threshold
        )));
    }
    let params = load_checkpoint(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let bank = manifest.load_text_bank(&a.text_bank)?;
    let records = manifest.load_records()?;
    let report = evaluate_mlr(
        &records,
        &bank,
        &params,
        a.logit_scale,
        a.pooling.into(),
        a.precision_threshold,
    )?;

    create_parent(&a.report)?;
    fs::write(&a.report, report.to_json()?)?;
    let csv = match a.report.extension() {
        Some(ext) if ext == "csv" => with_suffix(&a.report, ".csv"),
        _ => a.report.with_extension("csv"),
    };
    fs::write(&csv, report.to_csv())?;
    fs::write(with_suffix(&a.report, ".config"), resolved)?;
    println!(
        "{} records: mAP {:.4}, precision {}, mfi_stat {:.4}; {} classes skipped; report {}",
        records.len(),
        report.map,
        report
            .precision
            .map(|p| format!("{p:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        report.mfi_stat,
        report.skipped_classes.len(),
        a.report.display()
    );
    Ok(())
}

/// File-name-safe version of an image id.
fn mask_name(image_id: &str) -> String {
    let s: String = image_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() || s.starts_with('.') {
        format!("_{s}")
    } else {
        s
    }
}

fn segment(a: SegmentArgs, resolved: &str) -> CliResult {
    if !(0.0..=1.0).contains(&a.bg_threshold) {
        return Err(usage(format!(
            "bg threshold must lie in [0, 1], got {}",
            a.bg_threshold
        )));
    }
    if !(a.softmax_scale.is_finite() && a.softmax_scale > 0.0) {
        return Err(usage(format!(
            "softmax scale must be positive, got {}",
            a.softmax_scale
        )));
    }
    if matches!(a.out_size, Some((0, _) | (_, 0))) {
        return Err(usage("output size must be non-empty"));
    }
    let params = load_checkpoint(&a.checkpoint)?;
    let bank = read_text_bank(&a.text_bank)?;
    let records = read_shard(&a.shard)?;
    let text = project_text(&bank, &params, NormMode::Eval)?;

    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("segment.config"), resolved)?;
    let mut legend = String::from("value,class\n0,background\n");
    for (i, name) in bank.class_names.iter().enumerate() {
        legend.push_str(&format!("{},{name}\n", i + 1));
    }
    fs::write(a.out_dir.join("classes.csv"), legend)?;

    let mut covered = 0usize;
    let mut pixels = 0usize;
    for r in &records {
        let opts = SegmentOptions {
            out_size: a.out_size.unwrap_or((r.height, r.width)),
            bg_threshold: a.bg_threshold,
            softmax_scale: a.softmax_scale,
        };
        let mask = segment_projected(r, &text, &params, &opts)?;
        pixels += mask.class_ids.len();
        covered += (0..mask.height)
            .flat_map(|h| (0..mask.width).map(move |w| (h, w)))
            .filter(|&(h, w)| mask.get(h, w) != disentangle_core::evaluation::BACKGROUND)
            .count();
        let path = a.out_dir.join(format!("{}.pgm", mask_name(&r.image_id)));
        let mut out = BufWriter::new(File::create(path)?);
        mask.write_pgm(&mut out)?;
        out.flush()?;
    }
    println!(
        "wrote {} masks to {}; {:.1}% of pixels assigned a class",
        records.len(),
        a.out_dir.display(),
        if pixels == 0 {
            0.0
        } else {
            100.0 * covered as f64 / pixels as f64
        }
    );
    Ok(())
}

fn analyze_mfi(a: AnalyzeMfiArgs, resolved: &str) -> CliResult {
    if a.bins == 0 {
        return Err(usage("bins must be positive"));
    }
    let bank = read_text_bank(&a.text_bank)?;
    let mut sets: Vec<(&str, DenseArray<f32>)> = vec![("raw", bank.positive.clone())];
    if let Some(ckpt) = &a.checkpoint {
        let params = load_checkpoint(ckpt)?;
        sets.push((
            "projected",
            project_text(&bank, &params, NormMode::Eval)?.positive(),
        ));
    }

    create_parent(&a.csv)?;
    let mut summary = String::from("features,mfi_statistic\n");
    let mut stats = Vec::new();
    for (label, rows) in &sets {
        let stat = mfi_statistic(rows)?;
        stats.push(stat);
        summary.push_str(&format!("{label},{stat:.6}\n"));
        fs::write(
            sibling(&a.csv, &format!("_{label}_similarity.csv")),
            similarity_csv(rows, &bank.class_names)?,
        )?;
        fs::write(
            sibling(&a.csv, &format!("_{label}_histogram.csv")),
            histogram_csv(rows, a.bins)?,
        )?;
        println!("{label:<10} mfi_statistic {stat:.4}");
    }
    fs::write(&a.csv, summary)?;
    fs::write(with_suffix(&a.csv, ".config"), resolved)?;
    if let [raw, projected] = stats[..] {
        if raw > 0.0 {
            println!("reduction  {:.1}%", 100.0 * (1.0 - projected / raw));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_names_are_file_safe() {
        assert_eq!(mask_name("train00001"), "train00001");
        assert_eq!(mask_name("a/b c"), "a_b_c");
        assert_eq!(mask_name("../x"), "_.._x");
        assert_eq!(mask_name(""), "_");
    }

    #[test]
    fn output_paths() {
        let p = Path::new("out/report.json");
        assert_eq!(
            with_suffix(p, ".config"),
            Path::new("out/report.json.config")
        );
        assert_eq!(sibling(p, "_raw.csv"), Path::new("out/report_raw.csv"));
    }
}
