//! Finite-difference verification of the tape's gradients.
//!
//! Random programs are small straight-line compositions of every
//! differentiable op, replayed in double precision so that each parameter can
//! be perturbed and re-evaluated independently of the tape that produced the
//! analytic gradient.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{record_discriminator_loss, record_generator_adv_loss, record_projection_loss};
use crate::net::{discriminator_forward, generator_forward, ArchDescriptor, NetParams};
use crate::tape::{ConvGeom, Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const FLOOR: f64 = 1e-6;
/// Leaky inputs closer than this to the kink make a graph ineligible.
pub const KINK_MARGIN: f64 = 1e-3;
pub const MAX_PARAMS: usize = 5000;

pub const OPS: [&str; 13] = [
    "conv2d", "conv3d", "concat", "upsample", "leaky", "tanh", "sigmoid", "mean", "mean_axis", "mse", "crop",
    "reshape", "add",
];

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// An operand: a leaf tensor or the result of an earlier instruction.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Ref {
    Leaf(usize),
    Node(usize),
}

#[derive(Debug, Clone)]
enum Instr {
    Conv { x: Ref, w: Ref, b: Ref, geom: ConvGeom },
    Concat(Vec<Ref>),
    Upsample(Ref),
    Leaky(Ref, f64),
    Tanh(Ref),
    Sigmoid(Ref),
    Mean(Ref),
    MeanAxis(Ref, usize),
    Mse(Ref, Ref),
    Crop { x: Ref, origin: Vec<usize>, size: Vec<usize> },
    Reshape(Ref, Vec<usize>),
    Add(Ref, Ref),
    Scale(Ref, f64),
}

/// A replayable graph: leaf tensors plus a straight-line instruction list.
#[derive(Debug, Clone)]
pub struct Program {
    leaves: Vec<(Tensor<f64>, bool)>,
    instrs: Vec<Instr>,
    ops: Vec<&'static str>,
}

impl Program {
    /// `(leaf vars, instruction vars)`.
    fn replay(&self, tape: &mut Tape<f64>) -> Result<(Vec<Var>, Vec<Var>)> {
        let leaves: Vec<Var> =
            self.leaves.iter().map(|(t, p)| if *p { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect();
        let mut nodes: Vec<Var> = Vec::with_capacity(self.instrs.len());
        for ins in &self.instrs {
            let at = |r: Ref| match r {
                Ref::Leaf(i) => leaves[i],
                Ref::Node(i) => nodes[i],
            };
            let v = match ins {
                Instr::Conv { x, w, b, geom } => tape.conv(at(*x), at(*w), Some(at(*b)), *geom)?,
                Instr::Concat(parts) => tape.concat(&parts.iter().map(|&p| at(p)).collect::<Vec<_>>())?,
                Instr::Upsample(x) => tape.upsample2x(at(*x))?,
                Instr::Leaky(x, s) => tape.leaky_relu(at(*x), *s),
                Instr::Tanh(x) => tape.tanh(at(*x)),
                Instr::Sigmoid(x) => tape.sigmoid(at(*x)),
                Instr::Mean(x) => tape.mean(at(*x)),
                Instr::MeanAxis(x, a) => tape.mean_axis(at(*x), *a)?,
                Instr::Mse(a, b) => tape.mse(at(*a), at(*b))?,
                Instr::Crop { x, origin, size } => tape.crop(at(*x), origin, size)?,
                Instr::Reshape(x, s) => tape.reshape(at(*x), s)?,
                Instr::Add(a, b) => tape.add(at(*a), at(*b))?,
                Instr::Scale(x, c) => tape.scale(at(*x), *c),
            };
            nodes.push(v);
        }
        if nodes.is_empty() {
            return Err(Error::Shape("empty program".into()));
        }
        Ok((leaves, nodes))
    }

    fn eval(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, nodes) = self.replay(&mut tape)?;
        Ok(tape.value(nodes[nodes.len() - 1]).item())
    }

    pub fn param_count(&self) -> usize {
        self.leaves.iter().filter(|(_, p)| *p).map(|(t, _)| t.len()).sum()
    }

    pub fn ops(&self) -> &[&'static str] {
        &self.ops
    }

    /// False when some leaky input sits too close to the kink for central
    /// differences to be meaningful.
    fn smooth_enough(&self) -> Result<bool> {
        let mut tape = Tape::new();
        let (leaves, nodes) = self.replay(&mut tape)?;
        for ins in &self.instrs {
            if let Instr::Leaky(x, _) = ins {
                let v = match *x {
                    Ref::Leaf(i) => leaves[i],
                    Ref::Node(i) => nodes[i],
                };
                if tape.value(v).data().iter().any(|a| a.abs() < KINK_MARGIN) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

/// Largest relative error between backward() and central differences over
/// every trainable leaf element.
pub fn check_program(p: &Program) -> Result<f64> {
    let mut tape = Tape::new();
    let (leaves, nodes) = p.replay(&mut tape)?;
    let out = nodes[nodes.len() - 1];
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe = p.clone();
    for (li, (t, trainable)) in p.leaves.iter().enumerate() {
        if !trainable {
            continue;
        }
        let zero = Tensor::zeros(t.shape());
        let g = grads.get(leaves[li]).unwrap_or(&zero);
        for j in 0..t.len() {
            let orig = t.data()[j];
            probe.leaves[li].0.data_mut()[j] = orig + STEP;
            let up = probe.eval()?;
            probe.leaves[li].0.data_mut()[j] = orig - STEP;
            let down = probe.eval()?;
            probe.leaves[li].0.data_mut()[j] = orig;
            worst = worst.max(relative_error(g.data()[j], (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    p: Program,
    node_shapes: Vec<Vec<usize>>,
}

impl Builder<'_> {
    fn shape(&self, r: Ref) -> &[usize] {
        match r {
            Ref::Leaf(i) => self.p.leaves[i].0.shape(),
            Ref::Node(i) => &self.node_shapes[i],
        }
    }

    fn leaf(&mut self, shape: &[usize], trainable: bool, scale: f64) -> Ref {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-scale..scale)).collect();
        self.p.leaves.push((Tensor::new(shape.to_vec(), data).expect("shape"), trainable));
        Ref::Leaf(self.p.leaves.len() - 1)
    }

    fn push(&mut self, ins: Instr, shape: Vec<usize>, op: &'static str) -> Ref {
        self.p.instrs.push(ins);
        self.node_shapes.push(shape);
        if !op.is_empty() {
            self.p.ops.push(op);
        }
        Ref::Node(self.node_shapes.len() - 1)
    }

    /// Apply `op` to a rank-4 value `x`; returns the new rank-4 value.
    fn apply(&mut self, op: &'static str, x: Ref) -> Ref {
        let sh = self.shape(x).to_vec();
        let [c, d, h, w] = [sh[0], sh[1], sh[2], sh[3]];
        match op {
            "conv2d" | "conv3d" => {
                let cube = op == "conv3d";
                let mut k = [1; 3];
                let mut geom = ConvGeom::planar(1, 0);
                for (a, &ext) in [d, h, w].iter().enumerate() {
                    if a == 0 && !cube {
                        continue;
                    }
                    let pad = self.rng.random_range(0..=1);
                    let stride = self.rng.random_range(1..=2);
                    k[a] = self.rng.random_range(1..=3.min(ext + 2 * pad));
                    geom.pad[a] = pad;
                    geom.stride[a] = stride;
                }
                let cout = self.rng.random_range(1..=3);
                let fan = (c * k.iter().product::<usize>()) as f64;
                let wi = self.leaf(&[cout, c, k[0], k[1], k[2]], true, (3.0 / fan).sqrt());
                let bi = self.leaf(&[cout], true, 0.5);
                let out: Vec<usize> =
                    (0..3).map(|a| ([d, h, w][a] + 2 * geom.pad[a] - k[a]) / geom.stride[a] + 1).collect();
                self.push(Instr::Conv { x, w: wi, b: bi, geom }, vec![cout, out[0], out[1], out[2]], op)
            }
            "concat" => {
                let extra = self.rng.random_range(1..=2);
                let other = self.leaf(&[extra, d, h, w], true, 1.0);
                let parts = if self.rng.random_bool(0.5) { vec![x, other, x] } else { vec![other, x] };
                let lead = parts.iter().map(|&p| self.shape(p)[0]).sum();
                self.push(Instr::Concat(parts), vec![lead, d, h, w], op)
            }
            "upsample" => self.push(Instr::Upsample(x), vec![c, d, 2 * h, 2 * w], op),
            "leaky" => {
                let s = self.rng.random_range(0.05..0.3);
                self.push(Instr::Leaky(x, s), sh, op)
            }
            "tanh" => self.push(Instr::Tanh(x), sh, op),
            "sigmoid" => self.push(Instr::Sigmoid(x), sh, op),
            "mean_axis" => {
                let axis = self.rng.random_range(0..4);
                let mut reduced = sh.clone();
                reduced.remove(axis);
                let m = self.push(Instr::MeanAxis(x, axis), reduced, op);
                let mut back = sh;
                back[axis] = 1;
                self.push(Instr::Reshape(m, back.clone()), back, "")
            }
            "crop" => {
                let size: Vec<usize> = sh.iter().map(|&e| self.rng.random_range(1.max(e / 2)..=e)).collect();
                let origin: Vec<usize> = sh.iter().zip(&size).map(|(&e, &s)| self.rng.random_range(0..=e - s)).collect();
                self.push(Instr::Crop { x, origin, size: size.clone() }, size, op)
            }
            "reshape" => {
                let to = if self.rng.random_bool(0.5) { vec![c * d, 1, h, w] } else { vec![c, 1, d * h, w] };
                self.push(Instr::Reshape(x, to.clone()), to, op)
            }
            "add" => {
                let other = if self.rng.random_bool(0.3) { x } else { self.leaf(&sh, true, 1.0) };
                let s = self.rng.random_range(-1.5..1.5);
                let scaled = self.push(Instr::Scale(other, s), sh.clone(), "");
                self.push(Instr::Add(x, scaled), sh, op)
            }
            _ => unreachable!("unknown op {op}"),
        }
    }
}

/// A random program that uses `must` somewhere and ends in a scalar.
pub fn random_program(rng: &mut ChaCha8Rng, must: &'static str) -> Program {
    let mut b =
        Builder { rng, p: Program { leaves: Vec::new(), instrs: Vec::new(), ops: Vec::new() }, node_shapes: Vec::new() };
    let c = b.rng.random_range(1..=2);
    let d = b.rng.random_range(1..=3);
    let (h, w) = (b.rng.random_range(3..=5), b.rng.random_range(3..=5));
    let mut x = b.leaf(&[c, d, h, w], true, 1.0);
    let body: Vec<&'static str> = OPS.iter().copied().filter(|o| !matches!(*o, "mean" | "mse")).collect();
    // The required op goes first, while the operand is still small.
    if body.contains(&must) {
        x = b.apply(must, x);
    }
    for _ in 0..b.rng.random_range(1..=4) {
        let op = body[b.rng.random_range(0..body.len())];
        let len: usize = b.shape(x).iter().product();
        let op = if (op == "upsample" && len > 150) || (matches!(op, "conv2d" | "conv3d" | "concat") && len > 400) {
            "tanh"
        } else {
            op
        };
        x = b.apply(op, x);
    }
    let want_mse = must == "mse" || (must != "mean" && b.rng.random_bool(0.5));
    if want_mse {
        let sh = b.shape(x).to_vec();
        let t = b.leaf(&sh, false, 1.0);
        b.push(Instr::Mse(x, t), vec![1], "mse");
    } else {
        b.push(Instr::Mean(x), vec![1], "mean");
    }
    b.p
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub graphs: usize,
    pub rejected: usize,
    pub max_rel_err: f64,
    pub max_params: usize,
    pub op_counts: BTreeMap<String, usize>,
    /// Composite generator + discriminator objective on a tiny architecture.
    pub network_rel_err: f64,
}

impl GradcheckReport {
    /// Larger of the two errors; NaN if either is NaN.
    pub fn worst(&self) -> f64 {
        if self.max_rel_err.is_nan() || self.network_rel_err.is_nan() {
            return f64::NAN;
        }
        self.max_rel_err.max(self.network_rel_err)
    }

    pub fn covers_every_op(&self) -> bool {
        OPS.iter().all(|o| self.op_counts.get(*o).copied().unwrap_or(0) > 0)
    }
}

/// Checks `graphs` random programs (cycling through the op list so each op
/// is exercised) plus the composed network objective.
pub fn run(graphs: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        graphs: 0,
        rejected: 0,
        max_rel_err: 0.0,
        max_params: 0,
        op_counts: BTreeMap::new(),
        network_rel_err: 0.0,
    };
    while report.graphs < graphs {
        let must = OPS[report.graphs % OPS.len()];
        let p = random_program(&mut rng, must);
        if p.param_count() > MAX_PARAMS || !p.smooth_enough()? {
            report.rejected += 1;
            continue;
        }
        report.max_rel_err = report.max_rel_err.max(check_program(&p)?);
        report.max_params = report.max_params.max(p.param_count());
        for op in p.ops() {
            *report.op_counts.entry((*op).to_string()).or_default() += 1;
        }
        report.graphs += 1;
    }
    report.network_rel_err = check_network(seed)?;
    Ok(report)
}

pub fn tiny_arch() -> ArchDescriptor {
    ArchDescriptor {
        in_h: 8,
        in_w: 8,
        stages: 2,
        base_channels: 3,
        growth: 2,
        dense_a_layers: 1,
        dense_b_layers: 1,
        depth: 8,
        disc_channels: vec![2, 2],
        leaky_slope: 0.2,
    }
}

/// Generator tensors first, then discriminator tensors.
fn tensor_mut(p: &mut NetParams<f64>, i: usize) -> &mut Tensor<f64> {
    let ng = p.generator.len();
    if i < ng {
        &mut p.generator.tensors_mut()[i]
    } else {
        &mut p.discriminator.tensors_mut()[i - ng]
    }
}

/// Full objective: generator voxel + projection + adversarial terms, and the
/// discriminator loss, differentiated with respect to every parameter.
pub fn check_network(seed: u64) -> Result<f64> {
    let arch = tiny_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let net = NetParams::<f64>::init(&arch, seed)?;
    let n = arch.in_h * arch.in_w;
    let px = Tensor::new(vec![1, 1, arch.in_h, arch.in_w], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let m = n * arch.depth;
    let target = Tensor::new(vec![arch.depth, arch.in_h, arch.in_w], (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let real = Tensor::new(vec![4, 4, 4], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let origin = [2, 1, 3];

    let build = |tape: &mut Tape<f64>, net: &NetParams<f64>| -> Result<(Vec<Var>, Var)> {
        let g = net.generator.load(tape, true);
        let d = net.discriminator.load(tape, true);
        let x = tape.constant(px.clone());
        let out = generator_forward(tape, &arch, &g, x)?;
        let t = tape.constant(target.clone());
        let lr = tape.mse(out, t)?;
        let lp = record_projection_loss(tape, out, t)?;
        let patch = tape.crop(out, &origin, &[4, 4, 4])?;
        let fake = discriminator_forward(tape, &arch, &d, patch)?;
        let r = tape.constant(real.clone());
        let real_s = discriminator_forward(tape, &arch, &d, r)?;
        let lg = record_generator_adv_loss(tape, &[fake])?;
        let ld = record_discriminator_loss(tape, &[real_s], &[fake])?;
        let a = tape.scale(lr, 10.0);
        let s1 = tape.add(a, lp)?;
        let s2 = tape.add(s1, lg)?;
        let total = tape.add(s2, ld)?;
        let mut leaves = g;
        leaves.extend(d);
        Ok((leaves, total))
    };

    let mut tape = Tape::new();
    let (leaves, total) = build(&mut tape, &net)?;
    let grads = tape.backward(total)?;
    let eval = |net: &NetParams<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let (_, total) = build(&mut tape, net)?;
        Ok(tape.value(total).item())
    };
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (li, &v) in leaves.iter().enumerate() {
        let len = tensor_mut(&mut probe, li).len();
        let zero = Tensor::zeros(&[len]);
        let g = grads.get(v).unwrap_or(&zero);
        for j in 0..len {
            let orig = tensor_mut(&mut probe, li).data()[j];
            tensor_mut(&mut probe, li).data_mut()[j] = orig + STEP;
            let up = eval(&probe)?;
            tensor_mut(&mut probe, li).data_mut()[j] = orig - STEP;
            let down = eval(&probe)?;
            tensor_mut(&mut probe, li).data_mut()[j] = orig;
            worst = worst.max(relative_error(g.data()[j], (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}
