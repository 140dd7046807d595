use proptest::prelude::*;

use super::*;
use crate::diffkit::{Graph, Tensor};
use crate::rng;

pub(crate) fn tiny_arch() -> ArchConfig {
    ArchConfig {
        latent_channels: 2,
        latent_size: 8,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        down_layers: vec![2, 2],
        up_layers: vec![3, 3],
        attention: vec![true, false],
        downsample: vec![true, false],
        head_dim: 4,
        ff_mult: 2,
        cond_dim: 6,
        cond_seq_len: 3,
        vocab_size: 5,
        time_embed_dim: 8,
        norm_groups: 4,
        train_timesteps: 50,
    }
}

pub(crate) fn inputs(
    spec: &UNetSpec,
    n: usize,
    seed: u64,
) -> (Tensor, Vec<usize>, Vec<Vec<usize>>) {
    let mut r = rng::stream(seed, "unet-test-inputs");
    let x = Tensor::randn(
        &[n, spec.latent_channels, spec.latent_size, spec.latent_size],
        1.0,
        &mut r,
    );
    let ts = (0..n)
        .map(|i| (7 + 13 * i + seed as usize) % spec.train_timesteps)
        .collect();
    let toks = (0..n)
        .map(|i| {
            (0..spec.cond_seq_len)
                .map(|j| (i + j + seed as usize) % spec.vocab_size)
                .collect()
        })
        .collect();
    (x, ts, toks)
}

#[test]
fn desk_forward_on_zeros_is_finite_and_shaped() {
    let spec = UNetSpec::desk();
    let m = build_unet(&spec, 0).unwrap();
    let x = Tensor::zeros(&[1, 4, 16, 16]);
    let out = m.forward(&x, &[500], &[vec![0; 8]]).unwrap();
    assert_eq!(out.shape(), &[1, 4, 16, 16]);
    assert!(out.is_finite());
}

#[test]
fn output_shape_matches_for_boundary_timesteps() {
    let spec = tiny_arch().to_spec().unwrap();
    let m = build_unet(&spec, 1).unwrap();
    let (x, _, toks) = inputs(&spec, 1, 0);
    for t in [0, 1, spec.train_timesteps / 2, spec.train_timesteps - 1] {
        assert_eq!(m.forward(&x, &[t], &toks).unwrap().shape(), x.shape());
    }
}

#[test]
fn build_is_deterministic() {
    let spec = UNetSpec::desk();
    let a = build_unet(&spec, 42).unwrap();
    let b = build_unet(&spec, 42).unwrap();
    assert!(a.params().bitwise_eq(b.params()));
    let c = build_unet(&spec, 43).unwrap();
    assert!(!a.params().bitwise_eq(c.params()));
}

#[test]
fn forward_matches_tapped_forward() {
    let spec = tiny_arch().to_spec().unwrap();
    let m = build_unet(&spec, 3).unwrap();
    let (x, ts, toks) = inputs(&spec, 2, 1);
    let out = m.forward(&x, &ts, &toks).unwrap();
    let (tapped, _) = m.forward_with_taps(&x, &ts, &toks).unwrap();
    assert!(out.bitwise_eq(&tapped));
    let report = m.forward_report(&x, &ts, &toks).unwrap();
    assert!(out.bitwise_eq(&report.output));
}

#[test]
fn desk_mid_features_shape() {
    let spec = UNetSpec::desk();
    let m = build_unet(&spec, 0).unwrap();
    let x = Tensor::zeros(&[1, 4, 16, 16]);
    let (_, mid) = m.forward_with_taps(&x, &[10], &[vec![1; 8]]).unwrap();
    assert_eq!(mid.shape(), &[1, 32 * 4, 4, 4]);
}

#[test]
fn timestep_out_of_range_is_contract_error() {
    let spec = tiny_arch().to_spec().unwrap();
    let m = build_unet(&spec, 0).unwrap();
    let (x, _, toks) = inputs(&spec, 1, 0);
    let err = m.forward(&x, &[spec.train_timesteps], &toks).unwrap_err();
    assert!(matches!(err, crate::Error::Contract(_)), "{err}");
}

#[test]
fn bad_token_and_latent_shapes_rejected() {
    let spec = tiny_arch().to_spec().unwrap();
    let m = build_unet(&spec, 0).unwrap();
    let (x, ts, _) = inputs(&spec, 1, 0);
    assert!(m
        .forward(&x, &ts, &[vec![spec.vocab_size; spec.cond_seq_len]])
        .is_err());
    assert!(m
        .forward(&x, &ts, &[vec![0; spec.cond_seq_len + 1]])
        .is_err());
    let wrong = Tensor::zeros(&[1, spec.latent_channels, 4, 4]);
    let err = m
        .forward(&wrong, &ts, &[vec![0; spec.cond_seq_len]])
        .unwrap_err();
    assert!(matches!(err, crate::Error::DimensionMismatch { .. }));
}

#[test]
fn timestep_embed_at_zero() {
    let e = timestep_embed(0, 64, 1000).unwrap();
    for (i, v) in e.data().iter().enumerate() {
        assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
    }
}

#[test]
fn timestep_embed_bounded_and_distinct() {
    let all: Vec<Tensor> = (0..1000)
        .map(|t| timestep_embed(t, 64, 1000).unwrap())
        .collect();
    for e in &all {
        assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            assert!(
                all[i].max_abs_diff(&all[j]) > 0.0,
                "t={i} and t={j} collide"
            );
        }
    }
}

#[test]
fn timestep_embed_errors() {
    assert!(matches!(
        timestep_embed(0, 63, 1000),
        Err(crate::Error::Config(_))
    ));
    assert!(matches!(
        timestep_embed(1000, 64, 1000),
        Err(crate::Error::Contract(_))
    ));
}

fn plain_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (xv, kv, bv) = (
        g.constant(x.clone()),
        g.constant(k.clone()),
        g.constant(b.clone()),
    );
    let y = g.conv2d(xv, kv, Some(bv), 1, 1).unwrap();
    g.value(y).clone()
}

fn random_unit(e: usize, o: usize, c: usize, seed: u64) -> CondConvUnit {
    let mut r = rng::stream(seed, "condconv-unit");
    CondConvUnit::new(
        Tensor::randn(&[e, o, c, 3, 3], 0.3, &mut r),
        Tensor::randn(&[o], 0.1, &mut r),
        Tensor::randn(&[e, c], 1.0, &mut r),
        Tensor::randn(&[e], 1.0, &mut r),
    )
    .unwrap()
}

#[test]
fn single_expert_condconv_is_plain_conv() {
    let unit = random_unit(1, 4, 3, 0);
    let mut r = rng::stream(1, "x");
    let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut r);
    let y = unit.forward(&x).unwrap();
    assert!(y.bitwise_eq(&plain_conv(&x, &unit.expert(0), &unit.bias)));
}

#[test]
fn saturated_routing_matches_expert_zero() {
    let mut unit = random_unit(2, 4, 3, 2);
    unit.router_weight = Tensor::zeros(&[2, 3]);
    unit.router_bias = Tensor::new(vec![2], vec![25.0, 0.0]).unwrap();
    let mut r = rng::stream(3, "x");
    let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
    let y = unit.forward(&x).unwrap();
    let reference = plain_conv(&x, &unit.expert(0), &unit.bias);
    let rel =
        y.max_abs_diff(&reference) / reference.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(rel <= 1e-9, "relative error {rel}");
}

#[test]
fn uniform_routing_is_mean_kernel() {
    let mut unit = random_unit(2, 3, 2, 4);
    unit.router_weight = Tensor::zeros(&[2, 2]);
    unit.router_bias = Tensor::zeros(&[2]);
    let mut r = rng::stream(5, "x");
    let x = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut r);
    let (e0, e1) = (unit.expert(0), unit.expert(1));
    let mean: Vec<f64> = e0
        .data()
        .iter()
        .zip(e1.data())
        .map(|(a, b)| 0.5 * a + 0.5 * b)
        .collect();
    let mean = Tensor::new(e0.shape().to_vec(), mean).unwrap();
    let y = unit.forward(&x).unwrap();
    assert!(y.max_abs_diff(&plain_conv(&x, &mean, &unit.bias)) < 1e-12);
}

#[test]
fn condconv_channel_mismatch() {
    let unit = random_unit(2, 3, 2, 0);
    let err = unit.forward(&Tensor::zeros(&[1, 3, 4, 4])).unwrap_err();
    assert!(matches!(err, crate::Error::DimensionMismatch { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn routing_is_convex(seed in any::<u64>(), e in 1usize..5, c in 1usize..4) {
        let unit = random_unit(e, 2, c, seed);
        let mut r = rng::stream(seed, "x");
        let x = Tensor::uniform(&[2, c, 4, 4], -3.0, 3.0, &mut r);
        let routing = unit.routing(&x).unwrap();
        for row in routing.data().chunks(e) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let k = unit.effective_kernels(&x).unwrap();
        let klen = k.numel() / 2;
        for (i, v) in k.data().iter().enumerate() {
            let j = i % klen;
            let experts = (0..e).map(|m| unit.experts.data()[m * klen + j]);
            let lo = experts.clone().fold(f64::INFINITY, f64::min);
            let hi = experts.fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
            prop_assert!(*v >= lo - slack && *v <= hi + slack);
        }
    }
}

#[test]
fn gradients_reach_nearly_every_parameter() {
    let spec = UNetSpec::desk();
    let m = build_unet(&spec, 9).unwrap();
    let (x, ts, toks) = inputs(&spec, 2, 9);
    let mut g = Graph::new();
    let p = m.bind(&mut g, |_| true);
    let xv = g.constant(x);
    let taps = m.graph_forward(&mut g, &p, xv, &ts, &toks, None).unwrap();
    let target = g.constant(Tensor::zeros(g.shape(taps.output)));
    let loss = g.mse(taps.output, target).unwrap();
    let grads = g.backward(loss).unwrap();
    let (mut zero, mut total) = (0usize, 0usize);
    for (_, v) in p.iter() {
        let gr = grads.get(v);
        total += gr.numel();
        zero += gr.data().iter().filter(|&&d| d == 0.0).count();
    }
    let frac = zero as f64 / total as f64;
    assert!(frac < 0.05, "zero-gradient fraction {frac}");
}

#[test]
fn from_parts_rejects_mismatched_params() {
    let spec = tiny_arch().to_spec().unwrap();
    let m = build_unet(&spec, 0).unwrap();
    let (s, mut p) = m.into_parts();
    p.insert("stem.conv.bias", Tensor::zeros(&[3]));
    p.insert("extra.weight", Tensor::zeros(&[1]));
    let err = UNetModel::from_parts(s, p).unwrap_err().to_string();
    assert!(
        err.contains("stem.conv.bias") && err.contains("extra.weight"),
        "{err}"
    );
}

#[test]
fn trace_lists_every_unit_once() {
    let spec = tiny_arch().to_spec().unwrap();
    let m = build_unet(&spec, 0).unwrap();
    let (x, ts, toks) = inputs(&spec, 1, 0);
    let r = m.forward_report(&x, &ts, &toks).unwrap();
    let resnets = r.trace.iter().filter(|u| u.ends_with(".resnet")).count();
    let (d, mid, u) = spec.layer_census();
    assert_eq!(
        resnets,
        d.iter().sum::<usize>() + mid + u.iter().sum::<usize>()
    );
    assert_eq!(r.trace.first().unwrap(), "dn0.l0.resnet");
    assert_eq!(r.trace.last().unwrap(), "up1.l2.attn");
}

#[test]
fn profiler_matches_enumeration_and_runtime_counter() {
    let spec = UNetSpec::desk();
    let m = build_unet(&spec, 0).unwrap();
    let report = crate::profiler::profile(&spec, [4, 16, 16]).unwrap();
    assert_eq!(report.totals.params, m.param_count() as u64);
    let x = Tensor::zeros(&[1, 4, 16, 16]);
    let run = m.forward_report(&x, &[3], &[vec![0; 8]]).unwrap();
    let measured: crate::profiler::FlopBreakdown = run.flops.into();
    assert_eq!(report.totals.flop_breakdown, measured);
}
