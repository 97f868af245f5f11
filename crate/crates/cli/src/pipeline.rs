//! `run-all`: phantoms → split → synthesis → training → reconstruction →
//! evaluation, written into one experiment directory.
//!
//! Everything is produced in a hidden staging directory next to the target
//! and renamed into place only after the last step succeeds, so a failure
//! never leaves a partial experiment behind.
//!
//! Layout of the finished directory:
//!
//! ```text
//! config.json                resolved configuration
//! phantoms/phantom_NNNN.*    volumes and generating curves
//! splits/{train,val,test}.json
//! pairs/phantom_NNNN/        synthesized pairs
//! model/model.{json,bin}     trained parameters
//! history.json               per-epoch losses
//! recon/phantom_NNNN.*       curved reconstructions of the test split
//! previews/*.pgm             axial maximum projections
//! metrics.json, metrics.txt  per-sample and mean scores
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use oral3d_core::io::{write_curve, write_pgm, write_volume};
use oral3d_core::synth::{generate_phantom, synthesize_pair};
use oral3d_core::volume::mip_axial;
use oral3d_core::{MetricReport, PairedSample, Volume3};
use oral3d_nn::train::mean_reconstruction_loss;
use oral3d_nn::{reconstruct_curved, save_model, train_from, EpochRecord, NetParams, Smear};
use serde::Serialize;

use crate::commands::{phantom_name, write_json, write_pair};
use crate::config::PipelineConfig;
use crate::error::{Context, Error, Result};
use crate::split::split;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub name: String,
    pub network: MetricReport,
    pub smear: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsFile {
    pub tau: f64,
    pub samples: Vec<SampleMetrics>,
    pub mean_network: MetricReport,
    pub mean_smear: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub out: PathBuf,
    pub split: [usize; 3],
    pub final_train_loss_r: f64,
    /// `None` with an empty validation split.
    pub val_loss_r: Option<f64>,
    pub metrics: MetricsFile,
}

/// Progress messages emitted while running.
pub trait Progress {
    fn note(&mut self, msg: &str);
}

impl<F: FnMut(&str)> Progress for F {
    fn note(&mut self, msg: &str) {
        self(msg)
    }
}

fn staging_dir(out: &Path) -> Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("paths.out {} has no final component", out.display())))?;
    Ok(out.with_file_name(format!(".{}.partial", name.to_string_lossy())))
}

fn is_empty_dir(p: &Path) -> Result<bool> {
    Ok(fs::read_dir(p).at(p)?.next().is_none())
}

pub fn run_all(cfg: &PipelineConfig, progress: &mut dyn Progress) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.paths.out.clone();
    if out.exists() && !(out.is_dir() && is_empty_dir(&out)?) {
        return Err(Error::Config(format!("output directory {} exists and is not empty", out.display())));
    }
    let stage = staging_dir(&out)?;
    if stage.exists() {
        return Err(Error::Config(format!(
            "staging directory {} is left from an interrupted run; remove it first",
            stage.display()
        )));
    }
    match run_stages(cfg, &stage, progress) {
        Ok(mut summary) => {
            if out.exists() {
                fs::remove_dir(&out).at(&out)?;
            }
            fs::rename(&stage, &out).at(&out)?;
            summary.out = out;
            Ok(summary)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&stage);
            Err(e)
        }
    }
}

fn mean_report(rows: &[MetricReport]) -> MetricReport {
    let n = rows.len() as f64;
    let psnr = rows.iter().map(|r| r.psnr_db.unwrap_or(f64::INFINITY)).sum::<f64>() / n;
    let ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    let dice = rows.iter().map(|r| r.dice).sum::<f64>() / n;
    MetricReport::new(psnr, ssim, dice)
}

/// Aligned text table of every sample plus the means.
pub fn metrics_table(m: &MetricsFile) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "inf".to_string(), |x| format!("{x:.4}"));
    let mut s = format!("{:<16}{:<10}{:>12}{:>12}{:>12}{:>14}\n", "sample", "method", "psnr_db", "ssim", "dice", "overall_pct");
    let mut row = |name: &str, method: &str, r: &MetricReport| {
        let _ = writeln!(
            s,
            "{name:<16}{method:<10}{:>12}{:>12.4}{:>12.4}{:>14}",
            fmt(r.psnr_db),
            r.ssim,
            r.dice,
            fmt(r.overall_pct)
        );
    };
    for x in &m.samples {
        row(&x.name, "network", &x.network);
        row(&x.name, "smear", &x.smear);
    }
    row("mean", "network", &m.mean_network);
    row("mean", "smear", &m.mean_smear);
    s
}

fn preview(path: &Path, v: &Volume3) -> Result<()> {
    write_pgm(path, &mip_axial(v)).at(path)
}

fn run_stages(cfg: &PipelineConfig, dir: &Path, progress: &mut dyn Progress) -> Result<RunSummary> {
    fs::create_dir_all(dir).at(dir)?;
    write_json(&dir.join("config.json"), cfg)?;

    let n = cfg.dataset.phantoms;
    progress.note(&format!("generating {n} phantoms and their pairs"));
    let names: Vec<String> = (0..n).map(phantom_name).collect();
    let mut pairs: Vec<PairedSample> = Vec::with_capacity(n);
    for (i, name) in names.iter().enumerate() {
        let (v, curve) = generate_phantom(&cfg.phantom_spec(i))?;
        let stem = dir.join("phantoms").join(name);
        write_volume(&stem, &v).at(&stem)?;
        let cpath = dir.join("phantoms").join(format!("{name}_curve.json"));
        write_curve(&cpath, &curve).at(&cpath)?;
        let pair = synthesize_pair(&v, &cfg.synth).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        write_pair(&dir.join("pairs").join(name), &pair)?;
        pairs.push(pair);
    }

    let [train_names, val_names, test_names] = split(&names, cfg.dataset.split, cfg.split_seed());
    for (file, part) in ["train", "val", "test"].iter().zip([&train_names, &val_names, &test_names]) {
        write_json(&dir.join("splits").join(format!("{file}.json")), part)?;
    }
    let index = |list: &[String]| -> Vec<usize> {
        list.iter().map(|n| names.iter().position(|m| m == n).expect("split of known names")).collect()
    };
    let pick = |ids: &[usize]| -> Vec<&PairedSample> { ids.iter().map(|&i| &pairs[i]).collect() };
    let (train_ids, val_ids, test_ids) = (index(&train_names), index(&val_names), index(&test_names));

    progress.note(&format!(
        "training on {} pairs for {} epochs ({} val, {} test)",
        train_ids.len(),
        cfg.train.epochs,
        val_ids.len(),
        test_ids.len()
    ));
    let train_set: Vec<PairedSample> = pick(&train_ids).into_iter().cloned().collect();
    let init = NetParams::init(&cfg.arch, cfg.train.seed)?;
    let epochs = cfg.train.epochs;
    let outcome = train_from(init, &train_set, &cfg.train, |r: &EpochRecord| {
        progress.note(&format!(
            "epoch {}/{epochs}: loss_r {:.5} loss_p {:.5} total {:.5}",
            r.epoch + 1,
            r.loss_r,
            r.loss_p,
            r.total
        ))
    })?;
    let model = dir.join("model").join("model");
    save_model(&model, &outcome.params, Some(&cfg.train)).at(&model)?;
    write_json(&dir.join("history.json"), &outcome.history)?;
    let val_set: Vec<PairedSample> = pick(&val_ids).into_iter().cloned().collect();
    let val_loss_r = if val_set.is_empty() { None } else { Some(mean_reconstruction_loss(&outcome.params, &val_set)?) };

    progress.note("reconstructing and scoring the test split");
    let smear = Smear { depth: cfg.synth.d };
    let mut samples = Vec::with_capacity(test_ids.len());
    for &i in &test_ids {
        let (p, name) = (&pairs[i], &names[i]);
        let net = reconstruct_curved(&outcome.params, &p.px, &p.samples, &cfg.deform)?;
        let base = reconstruct_curved(&smear, &p.px, &p.samples, &cfg.deform)?;
        let stem = dir.join("recon").join(name);
        write_volume(&stem, &net).at(&stem)?;
        let previews = dir.join("previews");
        preview(&previews.join(format!("{name}_recon.pgm")), &net)?;
        preview(&previews.join(format!("{name}_truth.pgm")), &p.curved_gt)?;
        preview(&previews.join(format!("{name}_smear.pgm")), &base)?;
        let score = |v: &Volume3| MetricReport::evaluate(v, &p.curved_gt, cfg.metrics.tau, &cfg.metrics.ssim);
        samples.push(SampleMetrics { name: name.clone(), network: score(&net)?, smear: score(&base)? });
    }
    let metrics = MetricsFile {
        tau: cfg.metrics.tau,
        mean_network: mean_report(&samples.iter().map(|s| s.network.clone()).collect::<Vec<_>>()),
        mean_smear: mean_report(&samples.iter().map(|s| s.smear.clone()).collect::<Vec<_>>()),
        samples,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    let table = metrics_table(&metrics);
    fs::write(dir.join("metrics.txt"), &table).at(&dir.join("metrics.txt"))?;

    Ok(RunSummary {
        out: dir.to_path_buf(),
        split: [train_ids.len(), val_ids.len(), test_ids.len()],
        final_train_loss_r: outcome.history.last().map_or(f64::NAN, |r| r.loss_r),
        val_loss_r,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staging_sits_next_to_the_target() {
        assert_eq!(staging_dir(Path::new("runs/a")).unwrap(), PathBuf::from("runs/.a.partial"));
        assert!(staging_dir(Path::new("/")).is_err());
    }

    #[test]
    fn means_and_table() {
        let rows = [MetricReport::new(20.0, 0.5, 0.25), MetricReport::new(30.0, 0.7, 0.75)];
        let m = mean_report(&rows);
        assert_eq!(m, MetricReport::new(25.0, 0.6, 0.5));
        let with_exact = mean_report(&[MetricReport::new(f64::INFINITY, 1.0, 1.0), rows[0].clone()]);
        assert_eq!(with_exact.psnr_db, None);
        let file = MetricsFile {
            tau: -0.8,
            samples: vec![SampleMetrics { name: "a".into(), network: rows[0].clone(), smear: rows[1].clone() }],
            mean_network: rows[0].clone(),
            mean_smear: rows[1].clone(),
        };
        let t = metrics_table(&file);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()), "{t}");
        assert!(lines[1].starts_with("a") && lines[1].contains("20.0000"));
    }
}
