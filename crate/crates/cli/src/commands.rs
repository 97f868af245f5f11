//! One function per subcommand. Each reads its inputs, writes its outputs and
//! returns what it computed; printing is left to the caller.
//!
//! A synthesized pair is a directory holding `px.pgm` (preview), `px` (float
//! image), `flat`, `roi` (volume files) and `curve.json`.

use std::fs;
use std::path::{Path, PathBuf};

use oral3d_core::arch::{min_curvature_radius, sample_equal_arclength};
use oral3d_core::io::{
    read_curve, read_fvolume, read_image, read_pgm, read_volume, write_curve, write_fvolume, write_image, write_pgm,
    write_volume,
};
use oral3d_core::metrics::{dice_masked, psnr_masked, SsimConfig};
use oral3d_core::synth::{flatten, generate_phantom, swept_band_mask, synthesize_pair};
use oral3d_core::{register, DeformConfig, FVolume, Image2, MetricReport, PairedSample, SynthConfig, Volume3};
use oral3d_nn::gradcheck::{self, GradcheckReport};
use oral3d_nn::{load_model, reconstruct_curved, save_model, train_from, NetParams, TrainOutcome};
use serde::Serialize;

use crate::config::{PipelineConfig, SplitRatio};
use crate::error::{Context, Error, Result};
use crate::split::split;

/// Lowest band PSNR a flatten/register roundtrip may reach.
pub const ROUNDTRIP_MIN_PSNR: f64 = 30.0;
/// Largest acceptable gradient relative error.
pub const GRADCHECK_MAX_REL_ERR: f64 = 1e-4;

pub fn phantom_name(index: usize) -> String {
    format!("phantom_{index:04}")
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").at(path)
}

/// `n` phantoms as `<out>/phantom_NNNN` volume files plus `_curve.json`
/// generating curves. Returns the volume header paths.
pub fn phantoms(cfg: &PipelineConfig, n: usize, out: &Path) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(Error::Config("phantom count must be >= 1".into()));
    }
    let mut written = Vec::with_capacity(n);
    for i in 0..n {
        let name = phantom_name(i);
        let (v, curve) = generate_phantom(&cfg.phantom_spec(i))?;
        let stem = out.join(&name);
        write_volume(&stem, &v).at(&stem)?;
        let cpath = out.join(format!("{name}_curve.json"));
        write_curve(&cpath, &curve).at(&cpath)?;
        written.push(stem.with_extension("json"));
    }
    Ok(written)
}

/// Writes `train.json`, `val.json` and `test.json` lists under `out`.
pub fn split_files(files: &[String], ratio: SplitRatio, seed: u64, out: &Path) -> Result<[Vec<String>; 3]> {
    let parts = split(files, ratio, seed);
    for (name, part) in ["train", "val", "test"].iter().zip(&parts) {
        write_json(&out.join(format!("{name}.json")), part)?;
    }
    Ok(parts)
}

pub fn write_pair(dir: &Path, pair: &PairedSample) -> Result<()> {
    let files: [(&str, &dyn Fn(&Path) -> oral3d_core::Result<()>); 5] = [
        ("px.pgm", &|p| write_pgm(p, &pair.px)),
        ("px", &|p| write_image(p, &pair.px)),
        ("flat", &|p| write_fvolume(p, &pair.flat_gt)),
        ("roi", &|p| write_volume(p, &pair.curved_gt)),
        ("curve.json", &|p| write_curve(p, &pair.curve)),
    ];
    for (name, write) in files {
        let p = dir.join(name);
        write(&p).at(&p)?;
    }
    Ok(())
}

/// Panoramic image and flattened target of a pair directory.
pub fn read_training_pair(dir: &Path) -> Result<(Image2, FVolume)> {
    let (px, flat) = (dir.join("px"), dir.join("flat"));
    Ok((read_image(&px).at(&px)?, read_fvolume(&flat).at(&flat)?))
}

pub fn synth(cfg: &SynthConfig, volume: &Path, out: &Path) -> Result<PairedSample> {
    let v = read_volume(volume).at(volume)?;
    let pair = synthesize_pair(&v, cfg).at(volume)?;
    write_pair(out, &pair)?;
    Ok(pair)
}

/// Flattens along `curve`, or along the curve fitted to the volume itself.
pub fn flatten_volume(cfg: &SynthConfig, volume: &Path, curve: Option<&Path>, out: &Path) -> Result<FVolume> {
    cfg.validate()?;
    let v = read_volume(volume).at(volume)?;
    let flat = match curve {
        Some(c) => {
            let samples = sample_equal_arclength(&read_curve(c).at(c)?, cfg.w)?;
            flatten(&v, &samples, cfg.d, cfg.depth_step)?
        }
        None => synthesize_pair(&v, cfg).at(volume)?.flat_gt,
    };
    let stem = out.join("flat");
    write_fvolume(&stem, &flat).at(&stem)?;
    Ok(flat)
}

pub fn deform(cfg: &DeformConfig, flat: &Path, curve: &Path, out: &Path) -> Result<Volume3> {
    let f = read_fvolume(flat).at(flat)?;
    if f.depth_step() != cfg.depth_step {
        return Err(Error::Config(format!(
            "flattened volume depth step {} differs from deform.depth_step {}",
            f.depth_step(),
            cfg.depth_step
        )));
    }
    let samples = sample_equal_arclength(&read_curve(curve).at(curve)?, f.width())?;
    let v = register(&f, &samples, cfg)?;
    let stem = out.join("curved");
    write_volume(&stem, &v).at(&stem)?;
    Ok(v)
}

/// Pair directories named by a manifest (entries resolve by file stem inside
/// `dataset`), or every pair directory in `dataset` in name order.
pub fn dataset_dirs(dataset: &Path, manifest: Option<&Path>) -> Result<Vec<PathBuf>> {
    let dirs = match manifest {
        Some(m) => {
            let entries: Vec<String> = serde_json::from_slice(&fs::read(m).at(m)?).at(m)?;
            entries
                .iter()
                .map(|e| {
                    let stem = Path::new(e)
                        .file_stem()
                        .ok_or_else(|| Error::Config(format!("manifest entry {e:?} has no file name")))?;
                    Ok(dataset.join(stem))
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            let mut dirs: Vec<PathBuf> = fs::read_dir(dataset)
                .at(dataset)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("flat.json").is_file())
                .collect();
            dirs.sort();
            dirs
        }
    };
    if dirs.is_empty() {
        return Err(Error::Config(format!("no training pairs found in {}", dataset.display())));
    }
    Ok(dirs)
}

/// Trains on the listed pairs; writes `model.json`/`model.bin` and
/// `history.json` under `out`.
pub fn train(
    cfg: &PipelineConfig,
    dataset: &Path,
    manifest: Option<&Path>,
    out: &Path,
    on_epoch: impl FnMut(&oral3d_nn::EpochRecord),
) -> Result<TrainOutcome> {
    let data = dataset_dirs(dataset, manifest)?
        .iter()
        .map(|d| read_training_pair(d))
        .collect::<Result<Vec<_>>>()?;
    let init = NetParams::init(&cfg.arch, cfg.train.seed)?;
    let outcome = train_from(init, &data, &cfg.train, on_epoch)?;
    save_model(out.join("model"), &outcome.params, Some(&cfg.train)).at(&out.join("model.json"))?;
    write_json(&out.join("history.json"), &outcome.history)?;
    Ok(outcome)
}

pub fn gradcheck(graphs: usize, seed: u64) -> Result<GradcheckReport> {
    if graphs == 0 {
        return Err(Error::Config("gradcheck needs at least one graph".into()));
    }
    Ok(gradcheck::run(graphs, seed)?)
}

/// Fails when the report exceeds the tolerance or misses an op.
pub fn gradcheck_verdict(r: &GradcheckReport) -> Result<()> {
    if !(r.worst() < GRADCHECK_MAX_REL_ERR) {
        return Err(Error::Check(format!(
            "max relative error {:.3e} is not below {GRADCHECK_MAX_REL_ERR:e}",
            r.worst()
        )));
    }
    if r.graphs >= gradcheck::OPS.len() && !r.covers_every_op() {
        return Err(Error::Check("random graphs did not exercise every op".into()));
    }
    Ok(())
}

/// A panoramic image from a `.pgm` file or a float image file.
pub fn read_px(path: &Path) -> Result<Image2> {
    if path.extension().is_some_and(|e| e == "pgm") {
        read_pgm(path).at(path)
    } else {
        read_image(path).at(path)
    }
}

pub fn reconstruct(cfg: &PipelineConfig, model: &Path, px: &Path, curve: &Path, out: &Path) -> Result<Volume3> {
    let (params, _) = load_model(model).at(model)?;
    let image = read_px(px)?;
    let samples = sample_equal_arclength(&read_curve(curve).at(curve)?, params.arch.in_w)?;
    let v = reconstruct_curved(&params, &image, &samples, &cfg.deform)?;
    let stem = out.join("recon");
    write_volume(&stem, &v).at(&stem)?;
    Ok(v)
}

pub fn eval(a: &Path, b: &Path, tau: f64, ssim: &SsimConfig) -> Result<MetricReport> {
    let va = read_volume(a).at(a)?;
    let vb = read_volume(b).at(b)?;
    Ok(MetricReport::evaluate(&va, &vb, tau, ssim)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundtripReport {
    /// `None` when the band is reproduced exactly.
    pub psnr_db: Option<f64>,
    pub dice: f64,
    pub min_curvature_radius: f64,
    /// Radius the fitted curve must exceed for normals not to cross.
    pub fold_free_radius: f64,
    /// False when the curve is too tight and the PSNR check was skipped.
    pub checked: bool,
}

impl RoundtripReport {
    pub fn verdict(&self) -> Result<()> {
        match self.psnr_db {
            Some(p) if self.checked && !(p >= ROUNDTRIP_MIN_PSNR) => Err(Error::Check(format!(
                "roundtrip PSNR {p:.2} dB below {ROUNDTRIP_MIN_PSNR} dB"
            ))),
            _ => Ok(()),
        }
    }
}

/// Flattens and re-embeds a volume, scoring the band the normals sweep.
pub fn roundtrip(cfg: &PipelineConfig, volume: &Path) -> Result<RoundtripReport> {
    let v = read_volume(volume).at(volume)?;
    roundtrip_volume(cfg, &v).at(volume)
}

pub fn roundtrip_volume(cfg: &PipelineConfig, v: &Volume3) -> Result<RoundtripReport> {
    let pair = synthesize_pair(v, &cfg.synth)?;
    let [nx, ny, _] = v.dims();
    let back = register(&pair.flat_gt, &pair.samples, &DeformConfig { out_w: nx, out_d: ny, ..cfg.deform.clone() })?;
    let mask = swept_band_mask(v.dims(), &pair.samples, cfg.synth.d_half)?;
    let psnr = psnr_masked(&back, &pair.curved_gt, &mask)?;
    let radius = min_curvature_radius(&pair.curve);
    let bound = cfg.synth.d as f64 / 2.0 * cfg.synth.depth_step;
    Ok(RoundtripReport {
        psnr_db: psnr.is_finite().then_some(psnr),
        dice: dice_masked(&back, &pair.curved_gt, cfg.metrics.tau, &mask)?,
        min_curvature_radius: radius,
        fold_free_radius: bound,
        checked: radius > bound,
    })
}
