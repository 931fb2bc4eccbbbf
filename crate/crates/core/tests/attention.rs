use gamreid::attention::{
    attention_map_pixels, export_attention_map, ChannelAttention, GroupedAttentionModule, SpatialAttention,
};
use gamreid::dataio::read_pgm;
use gamreid::nn::{Binding, ParamStore};
use gamreid::tensor::{grad_check, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn channel_module(c: usize, seed: u64) -> (ParamStore, ChannelAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = ChannelAttention::new(&mut store, "ca", c, &mut rng);
    (store, m)
}

fn spatial_module(seed: u64) -> (ParamStore, SpatialAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = SpatialAttention::new(&mut store, "sa", &mut rng);
    (store, m)
}

fn gam(c: usize, seed: u64) -> (ParamStore, GroupedAttentionModule) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = GroupedAttentionModule::new(&mut store, "gam", c, &mut rng);
    (store, m)
}

fn run_channel(store: &ParamStore, m: &ChannelAttention, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let mut bind = Binding::new(store, false);
    let v = tape.constant(x.clone());
    let out = m.forward(&mut tape, &mut bind, v).unwrap();
    tape.value(out).clone()
}

fn run_spatial(store: &ParamStore, m: &SpatialAttention, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let mut bind = Binding::new(store, false);
    let v = tape.constant(x.clone());
    let out = m.forward(&mut tape, &mut bind, v).unwrap();
    tape.value(out).clone()
}

fn run_gam(store: &ParamStore, m: &GroupedAttentionModule, x: &Tensor) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::new();
    let mut bind = Binding::new(store, false);
    let v = tape.constant(x.clone());
    let out = m.forward(&mut tape, &mut bind, v).unwrap();
    (
        tape.value(out.output).clone(),
        tape.value(out.channel_map).clone(),
        tape.value(out.spatial_map).clone(),
    )
}

fn zero_all(store: &mut ParamStore) {
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn at(t: &Tensor, idx: [usize; 4]) -> f64 {
    let s = t.shape();
    t.data()[((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]]
}

/// Independent pool -> affine -> sigmoid.
fn channel_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut pooled = vec![0.0; n * c];
    for i in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for r in 0..h {
                for q in 0..wd {
                    s += at(x, [i, ch, r, q]);
                }
            }
            pooled[i * c + ch] = s / (h * wd) as f64;
        }
    }
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for o in 0..c {
            let mut acc = b.data()[o];
            for k in 0..c {
                acc += w.data()[o * c + k] * pooled[i * c + k];
            }
            out[i * c + o] = sigmoid(acc);
        }
    }
    out
}

/// Independent channel mean -> zero-padded 7x7 conv -> sigmoid.
fn spatial_oracle(x: &Tensor, w: &Tensor, b: f64) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Vec::with_capacity(n * h * wd);
    for i in 0..n {
        let mean = |r: isize, q: isize| -> f64 {
            if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                return 0.0;
            }
            (0..c).map(|ch| at(x, [i, ch, r as usize, q as usize])).sum::<f64>() / c as f64
        };
        for r in 0..h {
            for q in 0..wd {
                let mut acc = b;
                for u in 0..7 {
                    for v in 0..7 {
                        acc += w.data()[u * 7 + v] * mean(r as isize + u as isize - 3, q as isize + v as isize - 3);
                    }
                }
                out.push(sigmoid(acc));
            }
        }
    }
    out
}

#[test]
fn channel_gate_of_zero_is_half() {
    let (mut store, m) = channel_module(8, 1);
    zero_all(&mut store);
    let a = run_channel(&store, &m, &Tensor::zeros(&[2, 8, 3, 3]));
    assert_eq!(a.shape(), &[2, 8]);
    assert!(a.data().iter().all(|&v| v == 0.5));
}

#[test]
fn channel_gate_identity_weight_constant_input() {
    let (mut store, m) = channel_module(5, 2);
    zero_all(&mut store);
    let w = &mut store.get_mut(m.fc_weight).value;
    for i in 0..5 {
        w.data_mut()[i * 5 + i] = 1.0;
    }
    let c = 0.7;
    let a = run_channel(&store, &m, &Tensor::full(&[1, 5, 4, 2], c));
    for &v in a.data() {
        assert!((v - sigmoid(c)).abs() < 1e-15);
    }
}

#[test]
fn channel_gate_matches_composition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut store, m) = channel_module(8, 3);
    store.get_mut(m.fc_bias).value = random(&[8], &mut rng);
    let x = random(&[2, 8, 4, 4], &mut rng);
    let a = run_channel(&store, &m, &x);
    let oracle = channel_oracle(&x, &store.get(m.fc_weight).value, &store.get(m.fc_bias).value);
    for (got, want) in a.data().iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn spatial_gate_trivial_cases() {
    let (mut store, m) = spatial_module(4);
    zero_all(&mut store);
    let a = run_spatial(&store, &m, &Tensor::zeros(&[2, 3, 5, 4]));
    assert_eq!(a.shape(), &[2, 1, 5, 4]);
    assert!(a.data().iter().all(|&v| v == 0.5));

    let b = -1.3;
    store.get_mut(m.conv_bias).value.data_mut()[0] = b;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = run_spatial(&store, &m, &random(&[1, 1, 6, 6], &mut rng));
    assert!(a.data().iter().all(|&v| (v - sigmoid(b)).abs() < 1e-15));
}

#[test]
fn spatial_gate_matches_composition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut store, m) = spatial_module(5);
    store.get_mut(m.conv_bias).value.data_mut()[0] = 0.3;
    let x = random(&[1, 4, 8, 8], &mut rng);
    let a = run_spatial(&store, &m, &x);
    let oracle = spatial_oracle(&x, &store.get(m.conv_weight).value, 0.3);
    assert_eq!(a.len(), oracle.len());
    for (got, want) in a.data().iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn gam_of_zero_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut store, m) = gam(6, 6);
    store.get_mut(m.channel.fc_bias).value = random(&[6], &mut rng);
    store.get_mut(m.spatial.conv_bias).value.data_mut()[0] = 2.0;
    let (out, _, _) = run_gam(&store, &m, &Tensor::zeros(&[2, 6, 5, 3]));
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gam_with_half_gates_is_quarter_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut store, m) = gam(4, 7);
    zero_all(&mut store);
    let x = random(&[2, 4, 5, 5], &mut rng);
    let (out, ac, as_) = run_gam(&store, &m, &x);
    assert!(ac.data().iter().all(|&v| v == 0.5));
    assert!(as_.data().iter().all(|&v| v == 0.5));
    for (o, i) in out.data().iter().zip(x.data()) {
        assert!((o - 0.25 * i).abs() < 1e-15);
    }
}

#[test]
fn gam_output_composes_both_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut store, m) = gam(6, 8);
    store.get_mut(m.channel.fc_bias).value = random(&[6], &mut rng);
    let x = random(&[2, 6, 7, 5], &mut rng);
    let (out, _, _) = run_gam(&store, &m, &x);
    let ac = channel_oracle(&x, &store.get(m.channel.fc_weight).value, &store.get(m.channel.fc_bias).value);
    let mut refined = x.clone();
    let (c, hw) = (6, 35);
    for (k, v) in refined.data_mut().iter_mut().enumerate() {
        *v *= ac[k / hw];
    }
    let as_ = spatial_oracle(&refined, &store.get(m.spatial.conv_weight).value, 0.0);
    for (k, &o) in out.data().iter().enumerate() {
        let (i, p) = (k / (c * hw), k % hw);
        let want = as_[i * hw + p] * refined.data()[k];
        assert!((o - want).abs() < 1e-12);
    }
}

#[test]
fn gam_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut store, m) = gam(4, 9);
    store.get_mut(m.channel.fc_bias).value = random(&[4], &mut rng);
    let x = random(&[1, 4, 5, 5], &mut rng);
    let weights = random(&[1, 4, 5, 5], &mut rng);
    let err = grad_check(
        |tape, v| {
            let mut bind = Binding::new(&store, false);
            let out = m.forward(tape, &mut bind, v)?;
            let w = tape.constant(weights.clone());
            let prod = tape.mul(out.output, w)?;
            Ok(tape.sum(prod))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");

    // with respect to the channel weight as well
    let w0 = store.get(m.channel.fc_weight).value.clone();
    let err = grad_check(
        |tape, v| {
            let mut bind = Binding::new(&store, false);
            bind.bind(m.channel.fc_weight, v);
            let xv = tape.constant(x.clone());
            let out = m.forward(tape, &mut bind, xv)?;
            let w = tape.constant(weights.clone());
            let prod = tape.mul(out.output, w)?;
            Ok(tape.sum(prod))
        },
        &w0,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn shape_preserved_and_output_attenuated() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (shape, seed) in [([1, 2, 1, 1], 0), ([3, 4, 6, 2], 1), ([2, 8, 9, 9], 2), ([1, 16, 4, 7], 3)] {
        let (store, m) = gam(shape[1], seed);
        let x = Tensor::from_fn(&shape, |_| rng.random_range(-5.0..5.0));
        let (out, ac, as_) = run_gam(&store, &m, &x);
        assert_eq!(out.shape(), x.shape());
        assert!(ac.data().iter().chain(as_.data()).all(|&a| a > 0.0 && a < 1.0));
        for (o, i) in out.data().iter().zip(x.data()) {
            assert!(o.abs() <= i.abs());
        }
    }
}

#[test]
fn channel_gate_ignores_spatial_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (store, m) = channel_module(6, 11);
    let x = random(&[2, 6, 4, 3], &mut rng);
    let hw = 12;
    let mut perm: Vec<usize> = (0..hw).collect();
    perm.reverse();
    perm.swap(2, 7);
    let mut shuffled = x.clone();
    for plane in 0..12 {
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.data_mut()[plane * hw + dst] = x.data()[plane * hw + src];
        }
    }
    let a = run_channel(&store, &m, &x);
    let b = run_channel(&store, &m, &shuffled);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn spatial_gate_ignores_channel_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (store, m) = spatial_module(12);
    let (c, hw) = (5, 6 * 4);
    let x = random(&[1, c, 6, 4], &mut rng);
    let order = [3, 0, 4, 2, 1];
    let mut permuted = x.clone();
    for (dst, &src) in order.iter().enumerate() {
        permuted.data_mut()[dst * hw..(dst + 1) * hw].copy_from_slice(&x.data()[src * hw..(src + 1) * hw]);
    }
    let a = run_spatial(&store, &m, &x);
    let b = run_spatial(&store, &m, &permuted);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn ungrouped_features_are_accepted() {
    // g=1 upstream only changes the producer of the features
    let (store, m) = gam(64, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (out, _, _) = run_gam(&store, &m, &random(&[1, 64, 3, 3], &mut rng));
    assert!(out.all_finite());
}

#[test]
fn wrong_channel_count_is_a_shape_error() {
    let (store, m) = channel_module(4, 14);
    let mut tape = Tape::new();
    let mut bind = Binding::new(&store, false);
    let v = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
    assert!(matches!(m.forward(&mut tape, &mut bind, v), Err(gamreid::Error::Shape(_))));
}

#[test]
fn parameter_counts() {
    assert_eq!(ChannelAttention::num_params(64), 64 * 64 + 64);
    assert_eq!(SpatialAttention::num_params(), 50);
    let (store, _) = gam(32, 0);
    assert_eq!(store.num_scalars(), GroupedAttentionModule::num_params(32));
}

#[test]
fn pgm_export_by_hand() {
    let maps = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.pgm");
    export_attention_map(&maps, 0, &path).unwrap();
    let (w, h, px) = read_pgm(&path).unwrap();
    assert_eq!((w, h), (2, 2));
    assert_eq!(px, vec![0, 255, 127, 63]);

    let flat = Tensor::full(&[1, 1, 3, 3], 0.4);
    assert!(attention_map_pixels(&flat, 0).unwrap().2.iter().all(|&p| p == 0));
}

#[test]
fn pgm_export_preserves_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let maps = Tensor::from_fn(&[2, 1, 5, 6], |_| rng.random_range(0.0..1.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.pgm");
    export_attention_map(&maps, 1, &path).unwrap();
    let (_, _, px) = read_pgm(&path).unwrap();
    let values = &maps.data()[30..60];
    for i in 0..30 {
        for j in 0..30 {
            if values[i] < values[j] {
                assert!(px[i] <= px[j]);
            }
        }
    }
}
