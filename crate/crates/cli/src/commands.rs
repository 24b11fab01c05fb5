use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcnn::evalstats::{compare_models, evaluate, exemplar_csv, timecourse as time_course, Evaluation};
use rcnn::network::Checkpoint;
use rcnn::scenegen::{
    generate_dataset, load_mnist_dir, occlusion_deciles, synthetic_digits, Dataset, DatasetManifest, Disparity,
    GenerateConfig, InputMode, Split, RECORD_BYTES,
};
use rcnn::training::{train as run_training, AdamConfig, TrainConfig, TrainIo};
use rcnn::{ModelSpec, Preset};

use crate::config::{self, set, CompareSettings, EvalSettings, GenerateSettings, TimecourseSettings, TrainSettings};
use crate::{CliError, CompareArgs, EvalArgs, GenerateArgs, ParamsArgs, TimecourseArgs, TrainArgs};

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    v.as_deref().ok_or_else(|| CliError::usage(format!("--{flag} is required")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(CliError::usage(format!("unknown split {s:?}; use train or test"))),
    }
}

/// Occlusion histogram of a split, read shard by shard.
fn split_deciles(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<[usize; 10], CliError> {
    let mut fractions = Vec::new();
    for sh in &manifest.split(split)?.shards {
        let path = dir.join(&sh.file);
        let bytes = fs::read(&path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        fractions.extend(bytes.chunks_exact(RECORD_BYTES).map(|r| f32::from_le_bytes([r[6], r[7], r[8], r[9]])));
    }
    Ok(occlusion_deciles(&fractions))
}

pub fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let mut s: GenerateSettings = config::base(a.config.as_deref())?;
    if a.mnist_dir.is_some() {
        s.mnist_dir = a.mnist_dir;
    }
    if a.synthetic_per_class.is_some() {
        s.synthetic_per_class = a.synthetic_per_class;
    }
    if a.out.is_some() {
        s.out = a.out;
    }
    if a.limit_bases.is_some() {
        s.limit_bases = a.limit_bases;
    }
    set(&mut s.seed, a.seed);
    set(&mut s.samples_per_base, a.samples_per_base);
    set(&mut s.disparity_far, a.disparity_far);
    set(&mut s.disparity_near, a.disparity_near);
    set(&mut s.shard_records, a.shard_records);
    let out = required(&s.out, "out")?.to_path_buf();
    if s.samples_per_base == 0 || s.shard_records == 0 {
        return Err(CliError::usage("--samples-per-base and --shard-records must be positive"));
    }

    let (train, test) = match (s.synthetic_per_class, &s.mnist_dir) {
        (Some(n), _) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            (synthetic_digits(n, &mut rng), synthetic_digits(n.div_ceil(6).max(1), &mut rng))
        }
        (None, Some(dir)) => load_mnist_dir(dir)?,
        (None, None) => return Err(CliError::usage("--mnist-dir (or RCNN_MNIST_DIR) is required")),
    };
    let cfg = GenerateConfig {
        seed: s.seed,
        samples_per_base: s.samples_per_base,
        limit_bases: s.limit_bases,
        disparity: Disparity { far: s.disparity_far, near: s.disparity_near },
        shard_records: s.shard_records,
    };
    let manifest = generate_dataset(&cfg, &train, &test, &out)?;
    config::snapshot(&s, &out, "generate")?;
    for split in Split::ALL {
        let info = manifest.split(split)?;
        let deciles = split_deciles(&out, &manifest, split)?;
        let hist: Vec<String> = deciles.iter().map(|c| c.to_string()).collect();
        println!(
            "{}: {} scenes from {} base digits, {} shards; occlusion deciles {}",
            split.name(),
            info.count,
            info.bases,
            info.shards.len(),
            hist.join(" ")
        );
    }
    println!("checksum train {}", manifest.split_checksum(Split::Train)?);
    println!("checksum test {}", manifest.split_checksum(Split::Test)?);
    Ok(())
}

fn parse_mode(s: &str) -> Result<InputMode, CliError> {
    InputMode::parse(s).ok_or_else(|| CliError::usage(format!("unknown input mode {s:?}; use mono or stereo")))
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut s: TrainSettings = config::base(a.config.as_deref())?;
    if a.data.is_some() {
        s.data = a.data;
    }
    if a.out.is_some() {
        s.out = a.out;
    }
    if a.limit.is_some() {
        s.limit = a.limit;
    }
    if a.resume.is_some() {
        s.resume = a.resume;
    }
    set(&mut s.model, a.model);
    if a.mono {
        s.input_mode = "mono".into();
    } else if a.stereo {
        s.input_mode = "stereo".into();
    }
    set(&mut s.filters, a.filters);
    set(&mut s.tau, a.tau);
    set(&mut s.epochs, a.epochs);
    set(&mut s.batch_size, a.batch_size);
    set(&mut s.learning_rate, a.learning_rate);
    set(&mut s.beta1, a.beta1);
    set(&mut s.beta2, a.beta2);
    set(&mut s.epsilon, a.epsilon);
    set(&mut s.seed, a.seed);
    set(&mut s.holdout_fraction, a.holdout_fraction);

    let data_dir = required(&s.data, "data")?.to_path_buf();
    let out = required(&s.out, "out")?.to_path_buf();
    let preset: Preset = s.model.parse()?;
    let mode = parse_mode(&s.input_mode)?;
    let spec = ModelSpec::preset_scaled(preset, s.filters, mode.channels()).with_tau(s.tau);
    let cfg = TrainConfig {
        adam: AdamConfig { learning_rate: s.learning_rate, beta1: s.beta1, beta2: s.beta2, epsilon: s.epsilon },
        epochs: s.epochs,
        batch_size: s.batch_size,
        seed: s.seed,
        holdout_fraction: s.holdout_fraction,
        input_mode: mode,
    };
    cfg.validate()?;
    spec.validate()?;
    let resume = s.resume.as_ref().map(Checkpoint::load).transpose()?;
    let dataset = Dataset::open(&data_dir)?;
    let data = dataset.load(Split::Train, s.limit)?;
    config::snapshot(&s, &out, "train")?;
    eprintln!("training {} ({}, {} parameters) on {} records", preset, mode.name(), spec.count_params(), data.len());
    let mut io = TrainIo { out_dir: Some(out.clone()), resume: resume.as_ref(), ..Default::default() };
    io.meta.insert("model".into(), preset.name().into());
    io.meta.insert("dataset_checksum".into(), dataset.manifest.split_checksum(Split::Train)?);
    run_training(&spec, &cfg, &data, &io, &mut |m| {
        println!(
            "epoch {} {}: loss {:.4} accuracy {:.4} ({:.1}s)",
            m.epoch, m.split, m.loss, m.accuracy_last_step, m.wallclock_s
        );
    })?;
    println!("wrote {}", out.join(rcnn::training::FINAL_CHECKPOINT).display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut s: EvalSettings = config::base(a.config.as_deref())?;
    if a.checkpoint.is_some() {
        s.checkpoint = a.checkpoint;
    }
    if a.data.is_some() {
        s.data = a.data;
    }
    if a.out.is_some() {
        s.out = a.out;
    }
    if a.name.is_some() {
        s.name = a.name;
    }
    if a.limit.is_some() {
        s.limit = a.limit;
    }
    set(&mut s.split, a.split);
    set(&mut s.batch_size, a.batch_size);
    s.dump |= a.dump;

    let ck = Checkpoint::load(required(&s.checkpoint, "checkpoint")?)?;
    let out = required(&s.out, "out")?.to_path_buf();
    let split = parse_split(&s.split)?;
    let dataset = Dataset::open(required(&s.data, "data")?)?;
    let data = dataset.load(split, s.limit)?;
    let mut checksum = dataset.manifest.split_checksum(split)?;
    if data.len() < dataset.manifest.split(split)?.count {
        checksum = format!("{checksum}:first{}", data.len());
    }
    let mut ev = evaluate(&ck, &data, s.batch_size, s.dump)?;
    ev.model = s.name.clone().unwrap_or_else(|| format!("{}-{}", ev.preset, ev.input_mode.name()));
    ev.dataset_checksum = checksum;
    ev.save(&out)?;
    config::snapshot(&s, &out, "eval")?;
    println!(
        "{}: accuracy {} error {} on {} {} records",
        ev.model,
        ev.accuracy(),
        ev.error_rate(),
        ev.len(),
        split.name()
    );
    Ok(())
}

pub fn compare(a: CompareArgs) -> Result<(), CliError> {
    let mut s: CompareSettings = config::base(a.config.as_deref())?;
    if !a.evals.is_empty() {
        s.evals = a.evals;
    }
    if a.out.is_some() {
        s.out = a.out;
    }
    set(&mut s.fdr, a.fdr);
    s.exact_small |= a.exact_small;
    if s.evals.len() < 2 {
        return Err(CliError::usage("compare needs at least two evaluation directories"));
    }
    let evals = s.evals.iter().map(|d| Evaluation::load(d, false)).collect::<Result<Vec<_>, _>>()?;
    let cmp = compare_models(&evals, s.fdr, s.exact_small)?;
    let csv = cmp.to_csv();
    print!("{csv}");
    for m in &cmp.models {
        eprintln!("{}: error {} ({} samples)", m.model, m.error, m.n);
    }
    if let Some(out) = &s.out {
        config::snapshot(&s, out, "compare")?;
        write_file(&out.join("compare.csv"), &csv)?;
        let json = serde_json::to_string_pretty(&cmp).map_err(|e| CliError::io(e.to_string()))?;
        write_file(&out.join("compare.json"), json)?;
    }
    Ok(())
}

pub fn timecourse(a: TimecourseArgs) -> Result<(), CliError> {
    let mut s: TimecourseSettings = config::base(a.config.as_deref())?;
    if a.eval.is_some() {
        s.eval = a.eval;
    }
    if a.out.is_some() {
        s.out = a.out;
    }
    set(&mut s.top_k, a.top_k);
    let dir = required(&s.eval, "eval")?;
    let ev = Evaluation::load(dir, true).map_err(|e| {
        let mut err = CliError::from(e);
        if err.code == CliError::MISSING_DUMP {
            err.message.push_str("\nhint: rerun `rcnn eval` with --dump");
        }
        err
    })?;
    let dump = ev.dump.as_ref().expect("loaded with dump");
    let report = time_course(dump, s.top_k)?;
    if report.single_step {
        println!("single-step model: no change over time is possible");
    }
    println!(
        "corrected {} of {} ({} of all, {} of initially wrong)",
        report.counts.corrected, report.n, report.corrected_over_all, report.corrected_over_initially_wrong
    );
    println!(
        "reverted {} of {} ({} of all, {} of initially correct)",
        report.counts.reverted, report.n, report.reverted_over_all, report.reverted_over_initially_correct
    );
    let c = report.counts;
    println!("stable correct {} stable wrong {} other {}", c.stable_correct, c.stable_wrong, c.other);
    let csv = exemplar_csv(&report, dump);
    match &s.out {
        Some(out) => {
            config::snapshot(&s, out, "timecourse")?;
            write_file(&out.join("exemplars.csv"), &csv)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::io(e.to_string()))?;
            write_file(&out.join("timecourse.json"), json)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn params(a: ParamsArgs) -> Result<(), CliError> {
    println!("{:<6} {:>10} {:>10}", "model", "stereo", "mono");
    for p in Preset::ALL {
        let stereo = ModelSpec::preset_scaled(p, a.filters, 2);
        let mono = ModelSpec::preset_scaled(p, a.filters, 1);
        stereo.validate()?;
        println!("{:<6} {:>10} {:>10}", p.name(), stereo.count_params(), mono.count_params());
    }
    Ok(())
}
