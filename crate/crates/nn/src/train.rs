//! Batch-1 training with a discriminator warm-up.
//!
//! Before `d_start_epoch` only the voxel and projection terms drive the
//! generator. From then on every sample costs one discriminator update on
//! aligned real/fake patches (fake detached) followed by one generator update
//! through the freshly updated discriminator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use oral3d_core::{FVolume, Image2, PairedSample};

use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::loss::{
    reconstruction_loss, record_discriminator_loss, record_generator_adv_loss, record_projection_loss, LossWeights,
};
use crate::net::{discriminator_forward, generator_forward, image_tensor, ArchDescriptor, NetParams};
use crate::patches::draw_origins;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: LossWeights,
    pub lr0: f64,
    /// Learning-rate factor applied every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    /// First (zero-based) epoch that trains the discriminator.
    pub d_start_epoch: usize,
    pub patch_size: usize,
    pub patches_per_step: usize,
    #[serde(default)]
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: LossWeights::default(),
            lr0: 1e-3,
            decay_factor: 0.1,
            decay_every: 50,
            epochs: 300,
            d_start_epoch: 100,
            patch_size: 24,
            patches_per_step: 4,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lambda.validate()?;
        self.adam.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_every == 0 {
            return Err(Error::Config("decay factor must lie in (0, 1] with a period >= 1".into()));
        }
        if self.patch_size == 0 || self.patches_per_step == 0 {
            return Err(Error::Config("patch size and patches per step must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    /// Checks the patch geometry against the network and the data.
    pub fn check_against(&self, arch: &ArchDescriptor) -> Result<()> {
        let dims = [arch.in_w, arch.in_h, arch.depth];
        if self.patch_size < arch.min_patch() || dims.iter().any(|&d| d < self.patch_size) {
            return Err(Error::Config(format!(
                "patch size {} must lie in [{}, {}]",
                self.patch_size,
                arch.min_patch(),
                dims.iter().min().copied().unwrap_or(0)
            )));
        }
        Ok(())
    }
}

/// Losses averaged over one epoch; adversarial terms are absent while the
/// discriminator is idle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_g: Option<f64>,
    pub loss_r: f64,
    pub loss_p: f64,
    pub loss_d: Option<f64>,
    pub total: f64,
    pub g_steps: usize,
    pub d_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetParams<f32>,
    pub history: Vec<EpochRecord>,
}

/// A panoramic image and its flattened ground truth.
pub trait TrainingPair {
    fn px(&self) -> &Image2;
    fn flat(&self) -> &FVolume;
}

impl TrainingPair for PairedSample {
    fn px(&self) -> &Image2 {
        &self.px
    }

    fn flat(&self) -> &FVolume {
        &self.flat_gt
    }
}

impl TrainingPair for (Image2, FVolume) {
    fn px(&self) -> &Image2 {
        &self.0
    }

    fn flat(&self) -> &FVolume {
        &self.1
    }
}

/// `[d, h, w]` view of a flattened volume.
pub fn flat_tensor(f: &FVolume) -> Tensor<f32> {
    let [w, h, d] = f.dims();
    Tensor::new(vec![d, h, w], f.data().to_vec()).expect("flattened dims")
}

fn check_pair(arch: &ArchDescriptor, p: &impl TrainingPair) -> Result<()> {
    let want = [arch.in_w, arch.in_h, arch.depth];
    if p.px().dims() != [arch.in_w, arch.in_h] || p.flat().dims() != want {
        return Err(Error::Shape(format!(
            "pair {:?}/{:?} does not match network {:?}",
            p.px().dims(),
            p.flat().dims(),
            want
        )));
    }
    Ok(())
}

#[derive(Default)]
struct Sums {
    g: f64,
    r: f64,
    p: f64,
    d: f64,
    total: f64,
    n: usize,
    adversarial: usize,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    params: NetParams<f32>,
    adam_g: Adam,
    adam_d: Adam,
    rng: ChaCha8Rng,
}

impl Trainer<'_> {
    fn discriminator_step(&mut self, fake: &Tensor<f32>, real: &Tensor<f32>, origins: &[[usize; 3]], lr: f64) -> Result<f64> {
        let p = self.cfg.patch_size;
        let mut tape = Tape::new();
        let d = self.params.discriminator.load(&mut tape, true);
        let fake = tape.constant(fake.clone());
        let real = tape.constant(real.clone());
        let (mut rs, mut fs) = (Vec::new(), Vec::new());
        for o in origins {
            let at = [o[2], o[1], o[0]];
            let r = tape.crop(real, &at, &[p; 3])?;
            rs.push(discriminator_forward(&mut tape, &self.params.arch, &d, r)?);
            let f = tape.crop(fake, &at, &[p; 3])?;
            fs.push(discriminator_forward(&mut tape, &self.params.arch, &d, f)?);
        }
        let loss = record_discriminator_loss(&mut tape, &rs, &fs)?;
        let mut grads = tape.backward(loss)?;
        let grads: Vec<_> = d.iter().map(|&v| grads.take(v)).collect();
        self.adam_d.step(&mut self.params.discriminator, &grads, lr)?;
        Ok(tape.value(loss).item() as f64)
    }

    fn sample_step(&mut self, pair: &impl TrainingPair, adversarial: bool, lr: f64, sums: &mut Sums) -> Result<()> {
        let arch = self.params.arch.clone();
        let cfg = self.cfg;
        let mut tape = Tape::new();
        let g = self.params.generator.load(&mut tape, true);
        let x = tape.constant(image_tensor(pair.px()));
        let out = generator_forward(&mut tape, &arch, &g, x)?;
        let target_t = flat_tensor(pair.flat());
        let target = tape.constant(target_t.clone());
        let lr_loss = tape.mse(out, target)?;
        let lp_loss = record_projection_loss(&mut tape, out, target)?;
        let a = tape.scale(lr_loss, cfg.lambda.reconstruction);
        let b = tape.scale(lp_loss, cfg.lambda.projection);
        let mut total = tape.add(a, b)?;

        if adversarial {
            let origins = draw_origins(pair.flat().dims(), cfg.patches_per_step, cfg.patch_size, &mut self.rng)?;
            let fake = tape.value(out).clone();
            sums.d += self.discriminator_step(&fake, &target_t, &origins, lr)?;
            let d = self.params.discriminator.load(&mut tape, false);
            let mut scores: Vec<Var> = Vec::with_capacity(origins.len());
            for o in &origins {
                let patch = tape.crop(out, &[o[2], o[1], o[0]], &[cfg.patch_size; 3])?;
                scores.push(discriminator_forward(&mut tape, &arch, &d, patch)?);
            }
            let lg = record_generator_adv_loss(&mut tape, &scores)?;
            sums.g += tape.value(lg).item() as f64;
            sums.adversarial += 1;
            let c = tape.scale(lg, cfg.lambda.adversarial);
            total = tape.add(total, c)?;
        }

        sums.r += tape.value(lr_loss).item() as f64;
        sums.p += tape.value(lp_loss).item() as f64;
        sums.total += tape.value(total).item() as f64;
        sums.n += 1;
        let mut grads = tape.backward(total)?;
        let grads: Vec<_> = g.iter().map(|&v| grads.take(v)).collect();
        self.adam_g.step(&mut self.params.generator, &grads, lr)
    }
}

pub fn train<P: TrainingPair>(dataset: &[P], arch: &ArchDescriptor, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let init = NetParams::init(arch, cfg.seed)?;
    train_from(init, dataset, cfg, |_| {})
}

/// Trains starting from `init`, reporting each finished epoch.
pub fn train_from<P: TrainingPair>(
    init: NetParams<f32>,
    dataset: &[P],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.check_against(&init.arch)?;
    for p in dataset {
        check_pair(&init.arch, p)?;
    }
    let mut t = Trainer {
        cfg,
        adam_g: Adam::new(cfg.adam, &init.generator),
        adam_d: Adam::new(cfg.adam, &init.discriminator),
        params: init,
        // Offset so the data stream differs from the initialization stream.
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_da7a),
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let adversarial = epoch >= cfg.d_start_epoch;
        order.shuffle(&mut t.rng);
        let mut sums = Sums::default();
        for &i in &order {
            t.sample_step(&dataset[i], adversarial, lr, &mut sums)?;
        }
        let n = sums.n as f64;
        let adv = (sums.adversarial > 0).then_some(sums.adversarial as f64);
        let rec = EpochRecord {
            epoch,
            lr,
            loss_g: adv.map(|a| sums.g / a),
            loss_r: sums.r / n,
            loss_p: sums.p / n,
            loss_d: adv.map(|a| sums.d / a),
            total: sums.total / n,
            g_steps: sums.n,
            d_steps: sums.adversarial,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome { params: t.params, history })
}

/// Mean voxel loss of the generator over `pairs`.
pub fn mean_reconstruction_loss<P: TrainingPair>(params: &NetParams<f32>, pairs: &[P]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = 0.0;
    for p in pairs {
        let g = params.generate(p.px(), p.flat().depth_step())?;
        sum += reconstruction_loss(p.flat(), &g)?;
    }
    Ok(sum / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchDescriptor {
        ArchDescriptor {
            in_h: 8,
            in_w: 16,
            stages: 2,
            base_channels: 4,
            growth: 2,
            dense_a_layers: 1,
            dense_b_layers: 1,
            depth: 8,
            disc_channels: vec![2, 2],
            leaky_slope: 0.2,
        }
    }

    fn pair(seed: u64, arch: &ArchDescriptor) -> (Image2, FVolume) {
        let (w, h, d) = (arch.in_w, arch.in_h, arch.depth);
        let s = seed as f32;
        let px = Image2::from_vec([w, h], (0..w * h).map(|i| ((i as f32 + s) * 0.21).sin() * 0.8).collect()).unwrap();
        let flat = FVolume::from_vec(
            [w, h, d],
            1.0,
            (0..w * h * d).map(|i| (i as f32 * 0.05 + s).cos() * 0.7 - 0.2).collect(),
        )
        .unwrap();
        (px, flat)
    }

    fn cfg(epochs: usize, d_start: usize) -> TrainConfig {
        TrainConfig { epochs, d_start_epoch: d_start, patch_size: 4, patches_per_step: 2, lr0: 1e-3, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_accounting() {
        let arch = tiny_arch();
        let data: Vec<_> = (0..3).map(|s| pair(s, &arch)).collect();
        let c = TrainConfig { lambda: LossWeights { adversarial: 0.0, ..LossWeights::default() }, ..cfg(1, 1) };
        let out = train(&data, &arch, &c).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!((out.history[0].g_steps, out.history[0].d_steps), (3, 0));
        assert!(out.history[0].loss_g.is_none() && out.history[0].loss_d.is_none());

        let out = train(&data, &arch, &cfg(3, 1)).unwrap();
        let steps: Vec<_> = out.history.iter().map(|r| (r.g_steps, r.d_steps)).collect();
        assert_eq!(steps, vec![(3, 0), (3, 3), (3, 3)]);
        assert!(out.history[1].loss_d.unwrap() >= 0.0 && out.history[2].loss_g.unwrap() >= 0.0);
    }

    #[test]
    fn learning_rate_decays_stepwise() {
        let c = TrainConfig { lr0: 1.0, decay_factor: 0.1, decay_every: 50, ..TrainConfig::default() };
        assert_eq!(c.lr_at(0), 1.0);
        assert_eq!(c.lr_at(49), 1.0);
        assert!((c.lr_at(50) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(299) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn same_seed_same_history_and_params() {
        let arch = tiny_arch();
        let data: Vec<_> = (0..2).map(|s| pair(s, &arch)).collect();
        let a = train(&data, &arch, &cfg(3, 1)).unwrap();
        let b = train(&data, &arch, &cfg(3, 1)).unwrap();
        assert_eq!(a, b);
        let c = train(&data, &arch, &TrainConfig { seed: 1, ..cfg(3, 1) }).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn one_small_step_reduces_voxel_loss() {
        let arch = tiny_arch();
        let data = vec![pair(4, &arch)];
        let c = TrainConfig {
            lambda: LossWeights { adversarial: 0.0, reconstruction: 1.0, projection: 0.0 },
            lr0: 1e-5,
            ..cfg(1, 1)
        };
        let init = NetParams::init(&arch, c.seed).unwrap();
        let before = mean_reconstruction_loss(&init, &data).unwrap();
        let out = train_from(init, &data, &c, |_| {}).unwrap();
        let after = mean_reconstruction_loss(&out.params, &data).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn rejected_inputs() {
        let arch = tiny_arch();
        let empty: Vec<(Image2, FVolume)> = Vec::new();
        assert!(matches!(train(&empty, &arch, &cfg(1, 1)), Err(Error::EmptyDataset)));
        let data = vec![pair(0, &arch)];
        assert!(matches!(train(&data, &arch, &cfg(0, 1)), Err(Error::Config(_))));
        assert!(matches!(train(&data, &arch, &TrainConfig { patch_size: 9, ..cfg(1, 1) }), Err(Error::Config(_))));
        let other = ArchDescriptor { depth: 4, ..arch.clone() };
        assert!(matches!(train(&data, &other, &TrainConfig { patch_size: 4, ..cfg(1, 1) }), Err(Error::Shape(_))));
    }
}
