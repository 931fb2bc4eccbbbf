//! Finite-difference gradient checks over the tape ops and the composed
//! modules. Each suite draws fresh random inputs from its seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acl::{acl_loss, MemoryBank};
use crate::attention::GroupedAttentionModule;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::idl::{idl_loss, InstanceBank, Reduction};
use crate::nn::{Binding, Mode, ParamStore};
use crate::tensor::{grad_check, Tape, Tensor, Var};

pub const CHECK_EPS: f64 = 1e-5;
pub const CHECK_TOLERANCE: f64 = 1e-4;
pub const SUITES: [&str; 5] = ["ops", "attention", "backbone", "idl", "acl"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= CHECK_TOLERANCE
    }
}

/// Run one named suite, or every suite for `"all"`.
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "ops" => ops(&mut rng),
        "attention" => attention(&mut rng),
        "backbone" => backbone(&mut rng),
        "idl" => idl(&mut rng),
        "acl" => acl(&mut rng),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s, seed)?);
            }
            Ok(out)
        }
        other => Err(Error::usage(format!("unknown module {other:?} (expected one of {}, all)", SUITES.join(", ")))),
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.01 apart, so pooling maxima never tie.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::new(shape.to_vec(), order.into_iter().map(|k| k as f64 * 0.01 - 0.5 * n as f64 * 0.01).collect())
        .expect("shape")
}

fn scaled(t: &Tensor, factor: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect()).expect("shape")
}

/// `sum(w * v)` for a random constant `w`, so no gradient is trivially uniform.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(uniform(&shape, &mut rng));
    let prod = tape.mul(w, v)?;
    Ok(tape.sum(prod))
}

struct Collector {
    out: Vec<CheckResult>,
}

impl Collector {
    fn check(&mut self, name: &str, input: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<()> {
        let err = grad_check(f, input, CHECK_EPS)?;
        self.out.push(CheckResult { name: name.to_string(), max_relative_error: err });
        Ok(())
    }
}

fn ops(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut c = Collector { out: Vec::new() };
    let ps: u64 = rng.random();

    let groups = [1, 2][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=1);
    let k = [1, 3][rng.random_range(0..2)];
    let x4 = uniform(&[2, 4, 5, 5], rng);
    let w = uniform(&[6, 4 / groups, k, k], rng);
    let b = uniform(&[6], rng);
    c.check("conv2d/input", &x4, |t, v| {
        let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(v, wv, Some(bv), groups, stride, padding)?;
        project(t, y, ps)
    })?;
    c.check("conv2d/weight", &w, |t, v| {
        let xv = t.constant(x4.clone());
        let y = t.conv2d(xv, v, None, groups, stride, padding)?;
        project(t, y, ps + 1)
    })?;
    c.check("conv2d/bias", &b, |t, v| {
        let (xv, wv) = (t.constant(x4.clone()), t.constant(w.clone()));
        let y = t.conv2d(xv, wv, Some(v), groups, stride, padding)?;
        project(t, y, ps + 2)
    })?;
    c.check("global_avg_pool", &x4, |t, v| {
        let y = t.global_avg_pool(v)?;
        project(t, y, ps + 3)
    })?;
    c.check("channel_avg_pool", &x4, |t, v| {
        let y = t.channel_avg_pool(v)?;
        project(t, y, ps + 4)
    })?;
    let xp = spaced(&[2, 3, 6, 5], rng);
    c.check("max_pool2d", &xp, |t, v| {
        let y = t.max_pool2d(v, 3, 2, 1)?;
        project(t, y, ps + 5)
    })?;

    let x2 = uniform(&[3, 7], rng);
    let lw = uniform(&[4, 7], rng);
    let lb = uniform(&[4], rng);
    c.check("linear/input", &x2, |t, v| {
        let (wv, bv) = (t.constant(lw.clone()), t.constant(lb.clone()));
        let y = t.linear(v, wv, Some(bv))?;
        project(t, y, ps + 6)
    })?;
    c.check("linear/weight", &lw, |t, v| {
        let xv = t.constant(x2.clone());
        let y = t.linear(xv, v, None)?;
        project(t, y, ps + 7)
    })?;
    c.check("linear/bias", &lb, |t, v| {
        let (xv, wv) = (t.constant(x2.clone()), t.constant(lw.clone()));
        let y = t.linear(xv, wv, Some(v))?;
        project(t, y, ps + 8)
    })?;
    c.check("matmul_nt/left", &x2, |t, v| {
        let bv = t.constant(lw.clone());
        let y = t.matmul_nt(v, bv)?;
        project(t, y, ps + 9)
    })?;
    c.check("matmul_nt/right", &lw, |t, v| {
        let av = t.constant(x2.clone());
        let y = t.matmul_nt(av, v)?;
        project(t, y, ps + 10)
    })?;
    c.check("sigmoid", &x4, |t, v| {
        let y = t.sigmoid(v);
        project(t, y, ps + 11)
    })?;
    let xr = away_from_zero(&[3, 8], rng);
    c.check("relu", &xr, |t, v| {
        let y = t.relu(v);
        project(t, y, ps + 12)
    })?;

    let gate_c = uniform(&[2, 4, 1, 1], rng);
    let gate_s = uniform(&[2, 1, 5, 5], rng);
    c.check("mul/channel-gate", &gate_c, |t, v| {
        let xv = t.constant(x4.clone());
        let y = t.mul(v, xv)?;
        project(t, y, ps + 13)
    })?;
    c.check("mul/pixel-gate", &gate_s, |t, v| {
        let xv = t.constant(x4.clone());
        let y = t.mul(v, xv)?;
        project(t, y, ps + 14)
    })?;
    c.check("mul/gated-features", &x4, |t, v| {
        let (a, s) = (t.constant(gate_c.clone()), t.constant(gate_s.clone()));
        let y = t.mul(a, v)?;
        let z = t.mul(s, y)?;
        project(t, z, ps + 15)
    })?;
    c.check("add", &x4, |t, v| {
        let s = t.sigmoid(v);
        let y = t.add(v, s)?;
        project(t, y, ps + 16)
    })?;

    let gamma = uniform(&[4], rng);
    let beta = uniform(&[4], rng);
    c.check("batch_norm_train/input", &x4, |t, v| {
        let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
        let (y, _, _) = t.batch_norm_train(v, g, b, 1e-5)?;
        project(t, y, ps + 17)
    })?;
    c.check("batch_norm_train/gamma", &gamma, |t, v| {
        let (xv, b) = (t.constant(x4.clone()), t.constant(beta.clone()));
        let (y, _, _) = t.batch_norm_train(xv, v, b, 1e-5)?;
        project(t, y, ps + 18)
    })?;
    c.check("batch_norm_train/beta", &beta, |t, v| {
        let (xv, g) = (t.constant(x4.clone()), t.constant(gamma.clone()));
        let (y, _, _) = t.batch_norm_train(xv, g, v, 1e-5)?;
        project(t, y, ps + 19)
    })?;
    let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..2.0)).collect();
    c.check("batch_norm_eval/input", &x4, |t, v| {
        let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
        let y = t.batch_norm_eval(v, g, b, &mean, &var, 1e-5)?;
        project(t, y, ps + 20)
    })?;
    c.check("l2_normalize_rows", &x2, |t, v| {
        let y = t.l2_normalize_rows(v)?;
        project(t, y, ps + 21)
    })?;
    for tau in [0.05, 0.1, 1.0] {
        // keep logits / tau of order one so the finite differences stay accurate
        let x2 = scaled(&x2, 3.0 * tau);
        c.check(&format!("softmax_rows/tau={tau}"), &x2, |t, v| {
            let y = t.softmax_rows(v, tau)?;
            project(t, y, ps + 22)
        })?;
        c.check(&format!("log_softmax_rows/tau={tau}"), &x2, |t, v| {
            let y = t.log_softmax_rows(v, tau)?;
            project(t, y, ps + 23)
        })?;
    }
    let positive = Tensor::from_fn(&[3, 7], |_| rng.random_range(0.2..2.0));
    c.check("ln/gather/affine/mean", &positive, |t, v| {
        let l = t.ln(v);
        let g = t.gather(l, &[(0, 1), (2, 6), (0, 1)])?;
        let a = t.affine(g, -2.0, 0.5);
        Ok(t.mean(a))
    })?;
    c.check("reshape/slice_rows", &x4, |t, v| {
        let s = t.slice_rows(v, 1, 2)?;
        let r = t.reshape(s, &[4, 25])?;
        project(t, r, ps + 24)
    })?;
    Ok(c.out)
}

fn attention(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut c = Collector { out: Vec::new() };
    let ps: u64 = rng.random();
    let channels = [4, 8][rng.random_range(0..2)];
    let mut store = ParamStore::new();
    let gam = GroupedAttentionModule::new(&mut store, "gam", channels, rng);
    // non-zero biases so every parameter carries gradient
    for p in store.iter_mut() {
        if p.name.ends_with("bias") {
            p.value = uniform(p.value.shape(), rng);
        }
    }
    let features = uniform(&[2, channels, 5, 4], rng);

    c.check("gam/features", &features, |t, v| {
        let mut bind = Binding::new(&store, false);
        let out = gam.forward(t, &mut bind, v)?;
        project(t, out.output, ps)
    })?;
    c.check("gam/channel-map", &features, |t, v| {
        let mut bind = Binding::new(&store, false);
        let out = gam.forward(t, &mut bind, v)?;
        project(t, out.channel_map, ps + 1)
    })?;
    c.check("gam/spatial-map", &features, |t, v| {
        let mut bind = Binding::new(&store, false);
        let out = gam.forward(t, &mut bind, v)?;
        project(t, out.spatial_map, ps + 2)
    })?;
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let id = store.find(&name).expect("present");
        let value = store.get(id).value.clone();
        c.check(&format!("gam/{name}"), &value, |t, v| {
            let mut bind = Binding::new(&store, false);
            bind.bind(id, v);
            let x = t.constant(features.clone());
            let out = gam.forward(t, &mut bind, x)?;
            project(t, out.output, ps + 3)
        })?;
    }
    Ok(c.out)
}

/// Smallest ReLU input magnitude accepted for a backbone test point: ten
/// times the finite-difference step, so no perturbation crosses a kink.
const KINK_MARGIN: f64 = 10.0 * CHECK_EPS;

fn backbone(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut c = Collector { out: Vec::new() };
    let ps: u64 = rng.random();
    let groups = [1, 2, 4][rng.random_range(0..3)];
    let cfg = BackboneConfig::preset("tiny", Some(groups), Some(6))?;
    // resample until the point is safely away from every ReLU kink
    let (model, images) = loop {
        let mut model = Backbone::new(&cfg, rng.random())?;
        for p in model.store.iter_mut() {
            if p.name.contains("bias") || p.name.contains("beta") {
                p.value = uniform(p.value.shape(), rng);
            }
        }
        let images = Tensor::from_fn(&[2, 3, 4, 2], |_| rng.random_range(0.0..1.0));
        let margin = [Mode::Train, Mode::Eval]
            .into_iter()
            .map(|mode| {
                let mut tape = Tape::new();
                let mut bind = Binding::new(&model.store, false);
                let x = tape.constant(images.clone());
                model.forward(&mut tape, &mut bind, x, mode)?;
                Ok(tape.relu_margin())
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if margin > KINK_MARGIN {
            break (model, images);
        }
    };

    for mode in [Mode::Train, Mode::Eval] {
        let tag = if mode == Mode::Train { "train" } else { "eval" };
        c.check(&format!("backbone/{tag}/images"), &images, |t, v| {
            let mut bind = Binding::new(&model.store, false);
            let out = model.forward(t, &mut bind, v, mode)?;
            project(t, out.embedding, ps)
        })?;
    }
    let picks = [
        "stage0.block0.gam.channel.fc.weight",
        "stage0.block0.gam.spatial.conv.weight",
        "stage1.block0.conv2.weight",
        "head.weight",
    ];
    for name in picks {
        let Some(id) = model.store.find(name) else {
            return Err(Error::usage(format!("backbone has no parameter {name}")));
        };
        let value = model.store.get(id).value.clone();
        c.check(&format!("backbone/{name}"), &value, |t, v| {
            let mut bind = Binding::new(&model.store, false);
            bind.bind(id, v);
            let x = t.constant(images.clone());
            let out = model.forward(t, &mut bind, x, Mode::Train)?;
            project(t, out.embedding, ps + 1)
        })?;
    }
    Ok(c.out)
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(&[n, d], rng);
    for i in 0..n {
        crate::tensor::normalize_in_place(t.row_mut(i));
    }
    t
}

fn idl(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut c = Collector { out: Vec::new() };
    let (n, d, b) = (10, 6, 4);
    let bank = InstanceBank::new(unit_rows(n, d, rng))?;
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    let indices = all[..b].to_vec();
    let aug = unit_rows(b, d, rng);
    let orig = unit_rows(b, d, rng);
    for tau in [0.05, 0.1, 1.0] {
        // embeddings of norm 3 tau keep every logit / tau within [-3, 3]
        let (aug, orig) = (scaled(&aug, 3.0 * tau), scaled(&orig, 3.0 * tau));
        for red in [Reduction::Sum, Reduction::Mean] {
            c.check(&format!("idl/augmented/tau={tau}/{red}"), &aug, |t, v| {
                let o = t.constant(orig.clone());
                idl_loss(t, &indices, v, o, &bank, tau, red)
            })?;
            c.check(&format!("idl/originals/tau={tau}/{red}"), &orig, |t, v| {
                let a = t.constant(aug.clone());
                idl_loss(t, &indices, a, v, &bank, tau, red)
            })?;
        }
    }
    Ok(c.out)
}

fn acl(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut c = Collector { out: Vec::new() };
    let (m, d, b) = (5, 6, 4);
    let n = 12;
    let mut assignment: Vec<usize> = (0..n).map(|i| i % m).collect();
    assignment.shuffle(rng);
    let mut sizes = vec![0; m];
    for &a in &assignment {
        sizes[a] += 1;
    }
    let bank = MemoryBank::from_parts(unit_rows(m, d, rng), sizes, assignment.clone())?;
    let batch: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
    let emb = unit_rows(b, d, rng);
    for tau in [0.05, 0.1, 1.0] {
        let emb = scaled(&emb, 3.0 * tau);
        for red in [Reduction::Sum, Reduction::Mean] {
            c.check(&format!("acl/embeddings/tau={tau}/{red}"), &emb, |t, v| {
                acl_loss(t, v, &batch, &bank, tau, red)
            })?;
        }
    }
    Ok(c.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_usage_error() {
        assert!(matches!(run_suite("nope", 0), Err(Error::Usage(_))));
    }
}
