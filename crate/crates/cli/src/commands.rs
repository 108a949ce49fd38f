use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use acmt_core::checkpoint::{load_checkpoint, save_checkpoint};
use acmt_core::config::RunConfig;
use acmt_core::dataset::{load_dataset, read_field, read_image, read_mask, save_dataset, write_field};
use acmt_core::metrics::{evaluate_registration, fid_proxy, kid_proxy, FeatureExtractorProxy, MetricsReport};
use acmt_core::phantom::{generate_phantom_with, PairedSample};
use acmt_core::pipeline::{mean_scores, register_pair};
use acmt_core::registration::register;
use acmt_core::sampler::{translate_dataset, TranslateOptions};
use acmt_core::trainer::{TrainLog, Trainer};
use acmt_core::{AcmtError, Image};
use anyhow::{bail, Context, Result};

use crate::{Command, EvalMode};

const CONFIG_ECHO: &str = "config.toml";
const TRAIN_LOG: &str = "train_log.jsonl";
/// Seed of the fixed descriptor network behind the FID/KID proxies.
const EXTRACTOR_SEED: u64 = 0;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            out,
            count,
            size,
            seed,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            override_seed(&mut cfg, seed);
            gen(&cfg, &out, count, size)
        }
        Command::Train {
            data,
            config,
            out,
            epochs,
            seed,
            resume,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            override_seed(&mut cfg, seed);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            train(&cfg, &data, &out, resume)
        }
        Command::Translate {
            ckpt,
            data,
            out,
            nfe,
            stochastic,
            seed,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            override_seed(&mut cfg, seed);
            if let Some(n) = nfe {
                cfg.translate.nfe = n;
            }
            cfg.translate.stochastic |= stochastic;
            translate(&cfg, &ckpt, &data, &out)
        }
        Command::Register {
            fixed,
            moving,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            register_images(&cfg, &fixed, &moving, &out)
        }
        Command::Eval {
            mode,
            data,
            against,
            field,
            moving_mask,
            fixed_mask,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let report = match mode {
                EvalMode::Translation => {
                    let data = data.context("--mode translation needs --data")?;
                    eval_translation(&data, against.as_deref())?
                }
                EvalMode::Registration => match (data, field, moving_mask, fixed_mask) {
                    (Some(d), None, None, None) => eval_registration_dataset(&cfg, &d)?,
                    (None, Some(f), Some(m), Some(x)) => eval_registration_single(&f, &m, &x)?,
                    _ => bail!("--mode registration needs either --data or all of --field, --moving-mask, --fixed-mask"),
                },
            };
            write_report(&cfg, &report, &out)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Ok(RunConfig::from_toml_str(&text).with_context(|| format!("config {}", p.display()))?)
        }
    }
}

fn override_seed(cfg: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AcmtError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Writes the fully defaulted effective config next to a command's outputs.
fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, cfg.to_toml_string()).with_context(|| format!("writing {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn gen(cfg: &RunConfig, out: &Path, count: usize, size: usize) -> Result<()> {
    let samples = (0..count as u64)
        .map(|i| generate_phantom_with(cfg.seed.wrapping_add(i), (size, size), &cfg.phantom))
        .collect::<acmt_core::Result<Vec<PairedSample>>>()?;
    let manifest = save_dataset(&samples, out)?;
    echo_config(cfg, out)?;
    log::info!("wrote {} pairs to {}", manifest.samples.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let (manifest, samples) = load_dataset(data)?;
    let mut tc = cfg.train_config();
    if manifest.image_size != tc.network.image_size {
        // The dataset decides the input size; the rest of the network is as configured.
        tc.network.image_size = manifest.image_size;
        tc.network.validate()?;
    }
    let mut trainer = if resume {
        let ckpt = load_checkpoint(out)?;
        log::info!("resuming from {} at epoch {}, step {}", out.display(), ckpt.epoch, ckpt.step);
        Trainer::resume(ckpt, tc)?
    } else {
        Trainer::new(tc)?
    };
    create_dir(out)?;
    let mut echoed = cfg.clone();
    echoed.network.image_size = trainer.config().network.image_size;
    echo_config(&echoed, out)?;

    let log_path = out.join(TRAIN_LOG);
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut writer = BufWriter::new(file);
    let mut last_good: Option<PathBuf> = None;
    let mut written = 0;
    let mut log = TrainLog::default();
    let result = trainer.fit_with(&samples, &mut log, |t, log| {
        for rec in &log.steps[written..] {
            writeln!(writer, "{}", rec.to_json_line()).map_err(|e| AcmtError::Io {
                path: log_path.clone(),
                source: e,
            })?;
        }
        written = log.steps.len();
        writer.flush().map_err(|e| AcmtError::Io {
            path: log_path.clone(),
            source: e,
        })?;
        save_checkpoint(&t.checkpoint(), out)?;
        last_good = Some(out.to_path_buf());
        Ok(())
    });
    match result {
        Ok(()) => {
            log::info!(
                "trained {} epochs ({} steps) in {:.1}s; checkpoint at {}",
                trainer.epoch(),
                trainer.step(),
                log.wall_clock_secs,
                out.display()
            );
            Ok(())
        }
        Err(e @ AcmtError::NonFinite { .. }) => {
            match &last_good {
                Some(p) => eprintln!("last good checkpoint: {}", p.display()),
                None if resume => eprintln!("last good checkpoint: {}", out.display()),
                None => eprintln!("no checkpoint was saved before the failure"),
            }
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn translate(cfg: &RunConfig, ckpt_dir: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let opts = TranslateOptions {
        nfe: cfg.translate.nfe,
        stochastic: cfg.translate.stochastic,
        seed: cfg.seed,
    };
    let summary = translate_dataset(data, &ckpt.net, &ckpt.bridge, &opts, out)?;
    let mut echoed = cfg.clone();
    echoed.bridge = ckpt.bridge.clone();
    echoed.network = ckpt.net.config().clone();
    echoed.weights = ckpt.weights.clone();
    echo_config(&echoed, out)?;
    if summary.is_partial() {
        bail!(
            "{} of {} samples failed to translate; partial output in {}",
            summary.failures.len(),
            summary.failures.len() + summary.manifest.samples.len(),
            out.display()
        );
    }
    log::info!("translated {} pairs into {}", summary.manifest.samples.len(), out.display());
    Ok(())
}

fn register_images(cfg: &RunConfig, fixed: &Path, moving: &Path, out: &Path) -> Result<()> {
    let f = read_image(fixed)?;
    let m = read_image(moving)?;
    let field = register(&f, &m, &cfg.registration)?;
    let dir = parent_dir(out);
    create_dir(&dir)?;
    write_field(out, &field)?;
    echo_config(cfg, &dir)?;
    log::info!("field written to {}, mean |u| = {:.3} px", out.display(), field.mean_magnitude());
    Ok(())
}

fn all_images(samples: &[PairedSample]) -> Vec<Image> {
    samples.iter().flat_map(|p| [p.mr.clone(), p.us.clone()]).collect()
}

fn eval_translation(data: &Path, against: Option<&Path>) -> Result<MetricsReport> {
    let (_, samples) = load_dataset(data)?;
    let (a, b): (Vec<Image>, Vec<Image>) = match against {
        Some(other) => {
            let (_, other) = load_dataset(other)?;
            (all_images(&samples), all_images(&other))
        }
        None => (
            samples.iter().map(|p| p.mr.clone()).collect(),
            samples.iter().map(|p| p.us.clone()).collect(),
        ),
    };
    let extractor = FeatureExtractorProxy::new(EXTRACTOR_SEED);
    Ok(MetricsReport {
        mode: "translation".into(),
        fid_proxy: Some(fid_proxy(&a, &b, &extractor)?),
        kid_proxy: Some(kid_proxy(&a, &b, &extractor)?),
        n_images: a.len().min(b.len()),
        ..MetricsReport::default()
    })
}

fn eval_registration_dataset(cfg: &RunConfig, data: &Path) -> Result<MetricsReport> {
    let (_, samples) = load_dataset(data)?;
    let scores = samples
        .iter()
        .map(|p| register_pair(p, &cfg.registration))
        .collect::<acmt_core::Result<Vec<_>>>()?;
    let mean = mean_scores(&scores)?;
    Ok(MetricsReport {
        mode: "registration".into(),
        dsc: Some(mean.dsc),
        iou: Some(mean.iou),
        asd_px: Some(mean.asd),
        n_pairs: scores.len(),
        ..MetricsReport::default()
    })
}

fn eval_registration_single(field: &Path, moving_mask: &Path, fixed_mask: &Path) -> Result<MetricsReport> {
    let u = read_field(field)?;
    let m = read_mask(moving_mask)?;
    let f = read_mask(fixed_mask)?;
    let s = evaluate_registration(&u, &m, &f)?;
    Ok(MetricsReport {
        mode: "registration".into(),
        dsc: Some(s.dsc),
        iou: Some(s.iou),
        asd_px: Some(s.asd),
        n_pairs: 1,
        ..MetricsReport::default()
    })
}

fn write_report(cfg: &RunConfig, report: &MetricsReport, out: &Path) -> Result<()> {
    let dir = parent_dir(out);
    create_dir(&dir)?;
    let text = report.to_text();
    fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    echo_config(cfg, &dir)?;
    print!("{text}");
    Ok(())
}
