//! Generator and discriminator definitions.
//!
//! The generator is a 2D encoder–decoder whose final feature channels are
//! read as depth. Each encoder stage halves the resolution and appends a
//! channel-growing dense block (A); each decoder stage upsamples, joins the
//! matching skip, runs a dense block (B) and compresses back to the skip's
//! channel count. The discriminator is a small strided 3D convolution stack
//! whose residual logit map is averaged before the sigmoid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use oral3d_core::{FVolume, Image2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{ConvGeom, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub in_h: usize,
    pub in_w: usize,
    pub stages: usize,
    pub base_channels: usize,
    pub growth: usize,
    pub dense_a_layers: usize,
    pub dense_b_layers: usize,
    /// Output channels, read as depth samples.
    pub depth: usize,
    /// Channels of each stride-2 discriminator convolution.
    pub disc_channels: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            in_h: 64,
            in_w: 128,
            stages: 3,
            base_channels: 16,
            growth: 8,
            dense_a_layers: 2,
            dense_b_layers: 2,
            depth: 32,
            disc_channels: vec![8, 16, 32],
            leaky_slope: 0.2,
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.stages.min(16);
        if self.in_h == 0 || self.in_w == 0 || self.in_h % f != 0 || self.in_w % f != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of 2^{}",
                self.in_h, self.in_w, self.stages
            )));
        }
        if self.base_channels == 0 || self.depth == 0 || self.disc_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return Err(Error::Config(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Smallest cubic patch the discriminator accepts.
    pub fn min_patch(&self) -> usize {
        1 << self.disc_channels.len()
    }
}

/// One convolution of a network, in evaluation order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub geom: ConvGeom,
    /// Nonlinearity gain used for initialization.
    pub leaky: bool,
}

impl LayerSpec {
    fn planar(name: String, cin: usize, cout: usize, k: usize, stride: usize, leaky: bool) -> Self {
        Self { name, cin, cout, kernel: [1, k, k], geom: ConvGeom::planar(stride, k / 2), leaky }
    }

    fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.kernel[0], self.kernel[1], self.kernel[2]]
    }
}

pub fn generator_layers(arch: &ArchDescriptor) -> Vec<LayerSpec> {
    let g = arch.growth;
    let mut layers = vec![LayerSpec::planar("g.stem".into(), 1, arch.base_channels, 3, 1, true)];
    let mut c = arch.base_channels;
    let mut skips = vec![c];
    for s in 0..arch.stages {
        layers.push(LayerSpec::planar(format!("g.enc{s}.down"), c, c, 3, 2, true));
        for l in 0..arch.dense_a_layers {
            layers.push(LayerSpec::planar(format!("g.enc{s}.a{l}"), c + l * g, g, 3, 1, true));
        }
        c += arch.dense_a_layers * g;
        skips.push(c);
    }
    skips.pop();
    for s in 0..arch.stages {
        let skip = skips.pop().expect("one skip per stage");
        let cin = c + skip;
        for l in 0..arch.dense_b_layers {
            layers.push(LayerSpec::planar(format!("g.dec{s}.b{l}"), cin + l * g, g, 3, 1, true));
        }
        layers.push(LayerSpec::planar(format!("g.dec{s}.fuse"), cin + arch.dense_b_layers * g, skip, 1, 1, true));
        c = skip;
    }
    layers.push(LayerSpec::planar("g.head".into(), c, arch.depth, 3, 1, false));
    layers
}

pub fn discriminator_layers(arch: &ArchDescriptor) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut c = 1;
    for (i, &out) in arch.disc_channels.iter().enumerate() {
        layers.push(LayerSpec {
            name: format!("d.conv{i}"),
            cin: c,
            cout: out,
            kernel: [4; 3],
            geom: ConvGeom::cubic(2, 1),
            leaky: true,
        });
        c = out;
    }
    layers.push(LayerSpec { name: "d.head".into(), cin: c, cout: 1, kernel: [3; 3], geom: ConvGeom::cubic(1, 1), leaky: false });
    layers
}

/// Named tensors in a fixed order: `<layer>.w`, `<layer>.b` per convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Shape(format!("{} names for {} tensors", names.len(), tensors.len())));
        }
        Ok(Self { names, tensors })
    }

    fn for_layers(layers: &[LayerSpec], mut weight: impl FnMut(&LayerSpec) -> Tensor<T>) -> Self {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for l in layers {
            names.push(format!("{}.w", l.name));
            tensors.push(weight(l));
            names.push(format!("{}.b", l.name));
            tensors.push(Tensor::zeros(&[l.cout]));
        }
        Self { names, tensors }
    }

    pub fn zeros(layers: &[LayerSpec]) -> Self {
        Self::for_layers(layers, |l| Tensor::zeros(&l.weight_shape()))
    }

    /// Uniform He initialization with zero biases.
    pub fn init(layers: &[LayerSpec], slope: f64, rng: &mut impl Rng) -> Self {
        Self::for_layers(layers, |l| {
            let shape = l.weight_shape();
            let fan_in = (l.cin * l.kernel.iter().product::<usize>()) as f64;
            let gain = if l.leaky { (2.0 / (1.0 + slope * slope)).sqrt() } else { 1.0 };
            let bound = gain * (3.0 / fan_in).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
            Tensor::new(shape, data).expect("shape from layer spec")
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Put every tensor on `tape`, as trainable leaves or as constants.
    pub fn load(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    fn check(&self, layers: &[LayerSpec]) -> Result<()> {
        let want = Self::zeros(layers);
        if want.names != self.names {
            return Err(Error::Shape("parameter names do not match the architecture".into()));
        }
        for ((n, a), b) in self.names.iter().zip(&self.tensors).zip(&want.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("{n} has shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }
}

/// Generator and discriminator parameters with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T = f32> {
    pub arch: ArchDescriptor,
    pub generator: ParamSet<T>,
    pub discriminator: ParamSet<T>,
}

impl<T: Scalar> NetParams<T> {
    pub fn init(arch: &ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = ParamSet::init(&generator_layers(arch), arch.leaky_slope, &mut rng);
        let discriminator = ParamSet::init(&discriminator_layers(arch), arch.leaky_slope, &mut rng);
        Ok(Self { arch: arch.clone(), generator, discriminator })
    }

    pub fn zeros(arch: &ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch: arch.clone(),
            generator: ParamSet::zeros(&generator_layers(arch)),
            discriminator: ParamSet::zeros(&discriminator_layers(arch)),
        })
    }

    pub fn from_parts(arch: ArchDescriptor, generator: ParamSet<T>, discriminator: ParamSet<T>) -> Result<Self> {
        arch.validate()?;
        generator.check(&generator_layers(&arch))?;
        discriminator.check(&discriminator_layers(&arch))?;
        Ok(Self { arch, generator, discriminator })
    }

    pub fn cast<U: Scalar>(&self) -> NetParams<U> {
        NetParams { arch: self.arch.clone(), generator: self.generator.cast(), discriminator: self.discriminator.cast() }
    }

    /// Generator output for a panoramic image, as a `[w, h, depth]` volume.
    pub fn generate(&self, px: &Image2, depth_step: f64) -> Result<FVolume> {
        let mut tape = Tape::new();
        let g = self.generator.load(&mut tape, false);
        let x = tape.constant(image_tensor(px));
        let out = generator_forward(&mut tape, &self.arch, &g, x)?;
        let data = tape.value(out).data().iter().map(|v| v.f64() as f32).collect();
        Ok(FVolume::from_vec([self.arch.in_w, self.arch.in_h, self.arch.depth], depth_step, data)?)
    }

    /// Discriminator score of one `[d, h, w]` patch.
    pub fn discriminate(&self, patch: &Tensor<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let d = self.discriminator.load(&mut tape, false);
        let x = tape.constant(patch.clone());
        let s = discriminator_forward(&mut tape, &self.arch, &d, x)?;
        Ok(tape.value(s).item().f64())
    }
}

/// `[1, 1, h, w]` view of an image.
pub fn image_tensor<T: Scalar>(px: &Image2) -> Tensor<T> {
    let [w, h] = px.dims();
    Tensor::new(vec![1, 1, h, w], px.data().iter().map(|&v| T::lit(v as f64)).collect()).expect("image dims")
}

fn apply<T: Scalar>(tape: &mut Tape<T>, l: &LayerSpec, p: &[Var], x: Var, slope: f64) -> Result<Var> {
    let y = tape.conv(x, p[0], Some(p[1]), l.geom)?;
    Ok(if l.leaky { tape.leaky_relu(y, slope) } else { y })
}

/// Records the generator on `tape`. `x` is `[1, 1, in_h, in_w]`; the result
/// is `[depth, in_h, in_w]` with values in `(-1, 1)`.
pub fn generator_forward<T: Scalar>(tape: &mut Tape<T>, arch: &ArchDescriptor, params: &[Var], x: Var) -> Result<Var> {
    if tape.shape(x) != [1, 1, arch.in_h, arch.in_w] {
        return Err(Error::Shape(format!(
            "generator expects a {}x{} image, got {:?}",
            arch.in_w,
            arch.in_h,
            tape.shape(x)
        )));
    }
    let layers = generator_layers(arch);
    if params.len() != 2 * layers.len() {
        return Err(Error::Shape(format!("{} generator tensors, expected {}", params.len(), 2 * layers.len())));
    }
    let slope = arch.leaky_slope;
    let mut next = layers.iter().zip(params.chunks_exact(2));
    let mut step = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let (l, p) = next.next().expect("layer plan covers the forward pass");
        apply(tape, l, p, x, slope)
    };

    let mut h = step(tape, x)?;
    let mut skips = vec![h];
    for _ in 0..arch.stages {
        h = step(tape, h)?;
        for _ in 0..arch.dense_a_layers {
            let y = step(tape, h)?;
            h = tape.concat(&[h, y])?;
        }
        skips.push(h);
    }
    skips.pop();
    for _ in 0..arch.stages {
        let up = tape.upsample2x(h)?;
        let skip = skips.pop().expect("one skip per stage");
        h = tape.concat(&[up, skip])?;
        for _ in 0..arch.dense_b_layers {
            let y = step(tape, h)?;
            h = tape.concat(&[h, y])?;
        }
        h = step(tape, h)?;
    }
    let logits = step(tape, h)?;
    let out = tape.tanh(logits);
    tape.reshape(out, &[arch.depth, arch.in_h, arch.in_w])
}

/// Records the discriminator on `tape` for one cubic `[s, s, s]` patch and
/// returns its score in `(0, 1)` as a one-element tensor.
pub fn discriminator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &ArchDescriptor,
    params: &[Var],
    patch: Var,
) -> Result<Var> {
    let sh = tape.shape(patch).to_vec();
    if sh.len() != 3 || sh[0] != sh[1] || sh[1] != sh[2] || sh[0] < arch.min_patch() {
        return Err(Error::Shape(format!(
            "discriminator expects a cubic patch of side >= {}, got {sh:?}",
            arch.min_patch()
        )));
    }
    let layers = discriminator_layers(arch);
    if params.len() != 2 * layers.len() {
        return Err(Error::Shape(format!("{} discriminator tensors, expected {}", params.len(), 2 * layers.len())));
    }
    let mut h = tape.reshape(patch, &[1, sh[0], sh[1], sh[2]])?;
    for (l, p) in layers.iter().zip(params.chunks_exact(2)) {
        h = apply(tape, l, p, h, arch.leaky_slope)?;
    }
    let logit = tape.mean(h);
    Ok(tape.sigmoid(logit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(w: usize, h: usize) -> Image2 {
        Image2::from_vec([w, h], (0..w * h).map(|i| ((i as f32) * 0.013).sin() * 0.9).collect()).unwrap()
    }

    #[test]
    fn default_channel_plan() {
        let layers = generator_layers(&ArchDescriptor::default());
        let find = |n: &str| layers.iter().find(|l| l.name == n).unwrap().clone();
        assert_eq!((find("g.enc2.a1").cin, find("g.enc2.a1").cout), (56, 8));
        assert_eq!((find("g.dec0.b0").cin, find("g.dec0.fuse").cout), (112, 48));
        assert_eq!((find("g.dec2.fuse").cin, find("g.dec2.fuse").cout), (64, 16));
        assert_eq!((find("g.head").cin, find("g.head").cout), (16, 32));
        assert_eq!(layers.len(), 1 + 3 * 3 + 3 * 3 + 1);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = NetParams::<f32>::zeros(&ArchDescriptor::default()).unwrap();
        let f = net.generate(&px(128, 64), 1.0).unwrap();
        assert_eq!(f.dims(), [128, 64, 32]);
        assert!(f.data().iter().all(|&v| v == 0.0));
        let patch = Tensor::full(&[24, 24, 24], 0.3f32);
        assert_eq!(net.discriminate(&patch).unwrap(), 0.5);
    }

    #[test]
    fn random_network_is_pure_and_bounded() {
        let net = NetParams::<f32>::init(&ArchDescriptor::default(), 7).unwrap();
        let img = px(128, 64);
        let a = net.generate(&img, 1.0).unwrap();
        let b = net.generate(&img, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
        assert!(a.data().iter().any(|&v| v != 0.0));
        let patch = Tensor::new(vec![24, 24, 24], (0..24 * 24 * 24).map(|i| (i as f32 * 0.01).cos()).collect()).unwrap();
        let s = net.discriminate(&patch).unwrap();
        assert!(s > 0.0 && s < 1.0);
        assert_eq!(s, net.discriminate(&patch).unwrap());
    }

    #[test]
    fn shape_contracts() {
        let net = NetParams::<f32>::zeros(&ArchDescriptor::default()).unwrap();
        assert!(matches!(net.generate(&px(64, 64), 1.0), Err(Error::Shape(_))));
        assert!(matches!(net.discriminate(&Tensor::zeros(&[24, 24, 16])), Err(Error::Shape(_))));
        assert!(matches!(net.discriminate(&Tensor::zeros(&[4, 4, 4])), Err(Error::Shape(_))));
        let bad = ArchDescriptor { in_h: 60, ..ArchDescriptor::default() };
        assert!(matches!(NetParams::<f32>::zeros(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_seeded() {
        let arch = ArchDescriptor::default();
        let a = NetParams::<f32>::init(&arch, 3).unwrap();
        assert_eq!(a, NetParams::init(&arch, 3).unwrap());
        assert_ne!(a, NetParams::init(&arch, 4).unwrap());
        assert!(NetParams::from_parts(arch.clone(), a.generator.clone(), a.discriminator.clone()).is_ok());
        assert!(NetParams::from_parts(arch, a.discriminator.clone(), a.generator.clone()).is_err());
    }
}
