use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gcapsnet::analysis::{
    format_f64, init_sensitivity_study, metrics_csv, reconstruction_grid, run_comparison, train_run, write_text, Clock,
    ComparisonSpec, RunSpec, MIN_SENSITIVITY_TRIALS,
};
use gcapsnet::capsule_ops::CapsLayerSpec;
use gcapsnet::data_io::{load_idx_split, synthetic_dataset, write_atomic, Dataset, Split};
use gcapsnet::network::{evaluate, load_checkpoint, load_checkpoint_expecting, save_checkpoint, seeds, MaskSource};
use gcapsnet::routing::RoutingConfig;

use crate::config::RunConfig;
use crate::CliError;

/// Samples per split when `dataset=synthetic` and no limit is given.
const SYNTHETIC_DEFAULT: (usize, usize) = (2000, 1000);

fn limit(data: Dataset, n: usize) -> Dataset {
    if n == 0 {
        data
    } else {
        data.take(n)
    }
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset, CliError> {
    let (images, labels, n) = match split {
        Split::Train => (&cfg.train_images, &cfg.train_labels, cfg.train_limit),
        Split::Test => (&cfg.test_images, &cfg.test_labels, cfg.test_limit),
    };
    if cfg.dataset == "synthetic" {
        let (count, seed) = match split {
            Split::Train => (if n == 0 { SYNTHETIC_DEFAULT.0 } else { n }, seeds::data(cfg.seed)),
            Split::Test => (if n == 0 { SYNTHETIC_DEFAULT.1 } else { n }, seeds::data(cfg.seed).wrapping_add(1)),
        };
        let mut data = synthetic_dataset(seed, count, cfg.num_classes).map_err(CliError::runtime)?;
        data.split = split;
        return Ok(data);
    }
    let (Some(images), Some(labels)) = (images, labels) else {
        return Err(CliError::Usage(format!("no {split} image/label files configured")));
    };
    let data = load_idx_split(images, labels, &cfg.dataset, split, cfg.num_classes).map_err(CliError::runtime)?;
    Ok(limit(data, n))
}

fn selected_split(cfg: &RunConfig) -> Split {
    if cfg.split == "train" {
        Split::Train
    } else {
        Split::Test
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    write_text(path, text).map_err(CliError::runtime)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write(&dir.join("config.txt"), &cfg.to_text())
}

fn clock(cfg: &RunConfig) -> Clock {
    if cfg.record_wall_time {
        Clock::Wall
    } else {
        Clock::Frozen
    }
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&PathBuf, CliError> {
    cfg.checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --checkpoint PATH".into()))
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let routing = cfg.single_routing()?;
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    let arch = cfg.arch(train.image_shape());
    let run_id = format!("{}-seed{}", routing.label(), cfg.seed);
    let dir = cfg.output_dir.join(&run_id);
    write_config(&dir, cfg)?;
    eprintln!(
        "training {} ({}) on {} {} / {} examples for {} epochs",
        routing.model_name(),
        routing,
        cfg.dataset,
        train.len(),
        test.len(),
        cfg.epochs
    );
    let result = train_run(&RunSpec {
        run_id: run_id.clone(),
        train: &train,
        test: &test,
        arch,
        routing,
        train_config: cfg.train_config(),
        clock: clock(cfg),
    })
    .map_err(CliError::runtime)?;
    write(&dir.join("metrics.csv"), &metrics_csv(&result.records))?;
    if let Some(reason) = result.diverged {
        return Err(CliError::Runtime(format!("run {run_id} diverged: {reason}")));
    }
    let checkpoint = dir.join("checkpoint.gcaps");
    save_checkpoint(&result.model, &checkpoint).map_err(CliError::runtime)?;
    let eval = result.final_test.expect("finished run has a final evaluation");
    println!(
        "{run_id}: test accuracy {} loss {}",
        format_f64(eval.accuracy),
        format_f64(eval.mean_loss)
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn confusion_csv(confusion: &[Vec<usize>]) -> String {
    let mut out = String::from("true");
    for k in 0..confusion.len() {
        let _ = write!(out, ",pred_{k}");
    }
    out.push('\n');
    for (k, row) in confusion.iter().enumerate() {
        let _ = write!(out, "{k}");
        for n in row {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
    }
    out
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let path = checkpoint_path(cfg)?;
    let split = selected_split(cfg);
    let data = load_split(cfg, split)?;
    let stored = load_checkpoint(path).map_err(CliError::runtime)?;
    let routing = if cfg.is_explicit("routing") || cfg.is_explicit("iterations") {
        cfg.single_routing()?
    } else {
        stored.routing
    };
    let model = load_checkpoint_expecting(path, &cfg.arch(data.image_shape()), &routing).map_err(CliError::runtime)?;
    let eval = evaluate(&model, &data, cfg.batch_size).map_err(CliError::runtime)?;
    let run_name = path
        .parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let dir = cfg.output_dir.join("eval").join(format!("{run_name}-{split}"));
    write_config(&dir, cfg)?;
    write(&dir.join("confusion.csv"), &confusion_csv(&eval.confusion))?;
    println!("accuracy {}", format_f64(eval.accuracy));
    println!("loss {}", format_f64(eval.mean_loss));
    println!("samples {}", eval.samples);
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn compare(cfg: &RunConfig) -> Result<(), CliError> {
    let configs = cfg.routings();
    if configs.len() < 2 {
        return Err(CliError::Usage("compare needs at least two --routing configs (e.g. alg1,alg2,alg4)".into()));
    }
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    let dir = cfg.output_dir.join("compare");
    write_config(&dir, cfg)?;
    let report = run_comparison(&ComparisonSpec {
        train: &train,
        test: &test,
        arch: cfg.arch(train.image_shape()),
        configs: configs.clone(),
        train_config: cfg.train_config(),
        seeds: cfg.seeds.clone(),
        clock: clock(cfg),
        curves_dir: Some(dir.join("curves")),
    })
    .map_err(CliError::runtime)?;
    write(&dir.join("report.csv"), &report.to_csv())?;
    write(&dir.join("metrics.csv"), &metrics_csv(&report.records))?;
    print!("{}", report.to_csv());
    let findings = [
        (RoutingConfig::alg1(), RoutingConfig::alg2()),
        (RoutingConfig::alg4(), RoutingConfig::alg2()),
        (RoutingConfig::alg3(), RoutingConfig::alg1()),
    ];
    for (a, b) in findings {
        let (a, b) = (a.with_iterations(cfg.iterations), b.with_iterations(cfg.iterations));
        if let Some((wins, total)) = report.seed_wins(&a, &b) {
            println!(
                "finding: {} ({}) beat {} ({}) on {wins} of {total} seeds",
                a.model_name(),
                a.label(),
                b.model_name(),
                b.label()
            );
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn routing_report(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.trials < MIN_SENSITIVITY_TRIALS {
        return Err(CliError::Usage(format!(
            "routing-report needs trials >= {MIN_SENSITIVITY_TRIALS}, got {}",
            cfg.trials
        )));
    }
    if cfg.caps_types == 0 || cfg.caps_lower % cfg.caps_types != 0 {
        return Err(CliError::Usage(format!(
            "caps_lower {} is not divisible into {} types",
            cfg.caps_lower, cfg.caps_types
        )));
    }
    let spec = CapsLayerSpec::new(
        cfg.caps_lower,
        cfg.caps_upper,
        cfg.caps_dim_lower,
        cfg.caps_dim_upper,
        cfg.caps_types,
        cfg.caps_lower / cfg.caps_types,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let configs = if cfg.is_explicit("routing") {
        cfg.routings()
    } else {
        RoutingConfig::all().map(|r| r.with_iterations(cfg.iterations)).to_vec()
    };
    let report = init_sensitivity_study(&spec, &configs, cfg.trials, cfg.seed).map_err(CliError::runtime)?;
    let dir = cfg.output_dir.join("routing-report");
    write_config(&dir, cfg)?;
    write(&dir.join("routing_report.csv"), &report.to_csv())?;
    let summary = report.summary_csv(&configs);
    write(&dir.join("summary.csv"), &summary)?;
    print!("{summary}");
    let (a, b) = (
        RoutingConfig::alg1().with_iterations(cfg.iterations),
        RoutingConfig::alg2().with_iterations(cfg.iterations),
    );
    if let Some(fraction) = report.fraction_faster(&a, &b) {
        println!(
            "finding: mean |dc| under {} exceeds {} in {} of {} trials ({})",
            a.label(),
            b.label(),
            (fraction * cfg.trials as f64).round(),
            cfg.trials,
            format_f64(fraction)
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn reconstruct(cfg: &RunConfig) -> Result<(), CliError> {
    let path = checkpoint_path(cfg)?;
    let model = load_checkpoint(path).map_err(CliError::runtime)?;
    if !model.routing.is_grouped() {
        return Err(CliError::Runtime(format!(
            "{}: reconstruction grids need a grouped checkpoint (alg3 or alg4), this one uses {}",
            path.display(),
            model.routing
        )));
    }
    let split = selected_split(cfg);
    let data = load_split(cfg, split)?;
    if cfg.image_index >= data.len() {
        return Err(CliError::Runtime(format!(
            "image_index {} out of range for {} {split} examples",
            cfg.image_index,
            data.len()
        )));
    }
    let sample = data.select(&[cfg.image_index]);
    let label = match cfg.reconstruction_mask {
        MaskSource::TrueLabel => Some(sample.labels()[0]),
        MaskSource::Predicted => None,
    };
    let grid = reconstruction_grid(&model, sample.images(), label).map_err(CliError::runtime)?;
    let dir = cfg.output_dir.join("reconstruct");
    write_config(&dir, cfg)?;
    let file = dir.join(format!("grid_{split}_{}.pgm", cfg.image_index));
    write_atomic(&file, &grid.to_pgm()).map_err(CliError::runtime)?;
    println!(
        "{} panels (combined + {} types), masked to class {} (true label {})",
        grid.panels.len(),
        grid.panels.len() - 1,
        grid.label,
        sample.labels()[0]
    );
    println!("wrote {}", file.display());
    Ok(())
}
