//! Acceptance suite. Runs every criterion in sequence, writes one PASS/FAIL
//! line per criterion to stdout (bypassing the test harness capture) and
//! fails if any criterion fails.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng as _;
use slimdiff::compress::{
    inherit_condconv, provenance_audit, prune_layers, recombine, transplant_weights,
    CombinationPlan, ExtraExperts, LayerMapping, Provenance, PrunePlan,
};
use slimdiff::data::gen_dataset;
use slimdiff::diffkit::{Graph, OpKind, Tensor, Var};
use slimdiff::distill::{
    loss_graph, run_stage, run_stage1, run_stage2, total_loss, train_teacher, HeldOut,
    IncubationConfig, LossWeights, PerceptualProbe, StageRun, StepInputs, TeacherTargets,
};
use slimdiff::io::{Checkpoint, ModelKind, PlanChoice, RunConfig, SegmentConfig};
use slimdiff::profiler::{count_params, estimate_flops, speedup_estimate, DEFAULT_OVERHEAD};
use slimdiff::rng;
use slimdiff::sampler::{ddim_sample, NoiseSchedule, SamplerSchedule, Segment};
use slimdiff::unet::{build_unet, ArchConfig, BlockId, Part, UNetModel, UNetSpec};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Outcome {
    id: u8,
    title: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn run(id: u8, title: &'static str, f: impl FnOnce() -> Check) -> Outcome {
    let t0 = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let o = Outcome {
        id,
        title,
        pass: res.is_ok(),
        detail: res.unwrap_or_else(|e| e),
        secs: t0.elapsed().as_secs_f64(),
    };
    say(&line(&o));
    o
}

fn line(o: &Outcome) -> String {
    format!(
        "criterion {} [{}] {}: {} ({:.1}s)",
        o.id,
        if o.pass { "PASS" } else { "FAIL" },
        o.title,
        o.detail,
        o.secs
    )
}

fn rand_t(shape: &[usize], seed: u64, label: &str) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng::stream(seed, label))
}

fn desk_inputs(spec: &UNetSpec, n: usize, seed: u64) -> (Tensor, Vec<usize>, Vec<Vec<usize>>) {
    let x = Tensor::randn(
        &[n, spec.latent_channels, spec.latent_size, spec.latent_size],
        1.0,
        &mut rng::stream(seed, "acceptance/x"),
    );
    let mut r = rng::stream(seed, "acceptance/t");
    let t = (0..n)
        .map(|_| r.gen_range(0..spec.train_timesteps))
        .collect();
    let tokens = gen_dataset(seed, n)
        .unwrap()
        .into_iter()
        .map(|s| s.tokens)
        .collect();
    (x, t, tokens)
}

// ------------------------------------------------------------ criterion 1

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

type OpFn = fn(&mut Graph, &[Var]) -> Var;

/// Every recorded operator kind; the match in `op_case` is exhaustive.
const ALL_OPS: [OpKind; 24] = [
    OpKind::Conv2d,
    OpKind::ConvPerSample,
    OpKind::MixKernels,
    OpKind::Linear,
    OpKind::GroupNorm,
    OpKind::LayerNorm,
    OpKind::Attention,
    OpKind::Silu,
    OpKind::Gelu,
    OpKind::Softmax,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddChannelBias,
    OpKind::AddBroadcast,
    OpKind::Concat,
    OpKind::Upsample2x,
    OpKind::ToTokens,
    OpKind::FromTokens,
    OpKind::GlobalAvgPool,
    OpKind::Embedding,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Mse,
];

fn op_case(kind: OpKind) -> Option<(Vec<Vec<usize>>, OpFn)> {
    let s = |v: &[&[usize]]| v.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    let case: (Vec<Vec<usize>>, OpFn) = match kind {
        OpKind::Leaf => return None,
        OpKind::Conv2d => (s(&[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]]), |g, v| {
            let a = g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
            let b = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            let a = g.sum(a);
            let b = g.sum(b);
            g.add(a, b).unwrap()
        }),
        OpKind::ConvPerSample => (s(&[&[2, 2, 4, 4], &[2, 2, 2, 3, 3], &[2]]), |g, v| {
            g.conv2d_per_sample(v[0], v[1], Some(v[2]), 1).unwrap()
        }),
        OpKind::MixKernels => (s(&[&[3, 2], &[2, 2, 3]]), |g, v| {
            g.mix_kernels(v[0], v[1]).unwrap()
        }),
        OpKind::Linear => (s(&[&[2, 3, 4], &[5, 4], &[5]]), |g, v| {
            g.linear(v[0], v[1], Some(v[2])).unwrap()
        }),
        OpKind::GroupNorm => (s(&[&[2, 4, 3, 3], &[4], &[4]]), |g, v| {
            g.group_norm(v[0], 2, v[1], v[2], 1e-5).unwrap()
        }),
        OpKind::LayerNorm => (s(&[&[2, 3, 5], &[5], &[5]]), |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
        }),
        OpKind::Attention => (s(&[&[2, 3, 4], &[2, 5, 4], &[2, 5, 6]]), |g, v| {
            g.attention(v[0], v[1], v[2], 2).unwrap()
        }),
        OpKind::Silu => (s(&[&[3, 4]]), |g, v| g.silu(v[0])),
        OpKind::Gelu => (s(&[&[3, 4]]), |g, v| g.gelu(v[0])),
        OpKind::Softmax => (s(&[&[3, 4]]), |g, v| g.softmax(v[0]).unwrap()),
        OpKind::Add => (s(&[&[2, 3], &[2, 3]]), |g, v| g.add(v[0], v[1]).unwrap()),
        OpKind::Mul => (s(&[&[2, 3], &[2, 3]]), |g, v| g.mul(v[0], v[1]).unwrap()),
        OpKind::Scale => (s(&[&[2, 3]]), |g, v| g.scale(v[0], -1.7)),
        OpKind::AddChannelBias => (s(&[&[2, 3, 2, 2], &[2, 3]]), |g, v| {
            g.add_channel_bias(v[0], v[1]).unwrap()
        }),
        OpKind::AddBroadcast => (s(&[&[2, 3, 4], &[3, 4]]), |g, v| {
            g.add_broadcast(v[0], v[1]).unwrap()
        }),
        OpKind::Concat => (s(&[&[2, 1, 2, 3], &[2, 2, 2, 3]]), |g, v| {
            g.concat_channels(&[v[0], v[1]]).unwrap()
        }),
        OpKind::Upsample2x => (s(&[&[1, 2, 2, 3]]), |g, v| {
            g.upsample_nearest2x(v[0]).unwrap()
        }),
        OpKind::ToTokens => (s(&[&[2, 3, 2, 2]]), |g, v| g.to_tokens(v[0]).unwrap()),
        OpKind::FromTokens => (s(&[&[2, 4, 3]]), |g, v| g.from_tokens(v[0], 2, 2).unwrap()),
        OpKind::GlobalAvgPool => (s(&[&[2, 3, 2, 3]]), |g, v| g.global_avg_pool(v[0]).unwrap()),
        OpKind::Embedding => (s(&[&[4, 3]]), |g, v| {
            g.embedding(v[0], &[1, 3, 1, 0], &[2, 2]).unwrap()
        }),
        OpKind::Sum => (s(&[&[2, 3]]), |g, v| g.sum(v[0])),
        OpKind::Mean => (s(&[&[2, 3]]), |g, v| g.mean(v[0])),
        OpKind::Mse => (s(&[&[2, 3], &[2, 3]]), |g, v| g.mse(v[0], v[1]).unwrap()),
    };
    Some(case)
}

fn graph_kinds(g: &Graph, out: Var) -> Vec<OpKind> {
    let mut stack = vec![out];
    let mut kinds = Vec::new();
    while let Some(v) = stack.pop() {
        kinds.push(g.kind(v));
        stack.extend(g.inputs(v));
    }
    kinds
}

/// Worst relative error between the analytic gradient of
/// `sum(f(inputs) ⊙ R)` and central differences over every input element.
fn fd_worst(inputs: &[Tensor], seed: u64, f: OpFn, kind: OpKind) -> Result<f64, String> {
    let eval = |vals: &[Tensor], grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = f(&mut g, &vars);
        let has_kind = graph_kinds(&g, out).contains(&kind);
        let r = g.constant(rand_t(g.shape(out), seed, "acceptance/probe"));
        let prod = g.mul(out, r).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        let grads = grad.then(|| {
            let gr = g.backward(loss).unwrap();
            vars.iter().map(|v| gr.get(*v)).collect::<Vec<_>>()
        });
        (value, grads, has_kind)
    };
    let (_, grads, has_kind) = eval(inputs, true);
    ensure!(has_kind, "{kind:?} case does not record a {kind:?} node");
    let grads = grads.unwrap();
    let mut worst: f64 = 0.0;
    for (i, inp) in inputs.iter().enumerate() {
        for j in 0..inp.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let num = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[i].data()[j], num));
        }
    }
    Ok(worst)
}

fn one_layer_pair(seed: u64) -> (UNetModel, UNetModel) {
    let spec = ArchConfig {
        latent_channels: 2,
        latent_size: 4,
        base_channels: 8,
        channel_multipliers: vec![1],
        down_layers: vec![1],
        up_layers: vec![1],
        attention: vec![true],
        downsample: vec![false],
        head_dim: 4,
        ff_mult: 2,
        cond_dim: 6,
        cond_seq_len: 3,
        vocab_size: 5,
        time_embed_dim: 8,
        norm_groups: 4,
        train_timesteps: 50,
    }
    .to_spec()
    .unwrap();
    let teacher = build_unet(&spec, 1000 + seed).unwrap();
    let base = build_unet(&spec, 2000 + seed).unwrap();
    let (mut student, _) =
        inherit_condconv(&base, BlockId::Up(0), 2, ExtraExperts::Random, seed).unwrap();
    let names: Vec<String> = student.params().names().map(String::from).collect();
    for n in names {
        if n.ends_with("router.bias") {
            student.params_mut().get_mut(&n).unwrap().data_mut()[0] = 0.3;
        }
        if n.ends_with("router.weight") {
            let shape = student.params().get(&n).unwrap().shape().to_vec();
            let t = Tensor::randn(&shape, 0.5, &mut rng::stream(seed, &n));
            student.params_mut().insert(n, t);
        }
    }
    (student, teacher)
}

/// Central differences of the weighted four-term objective with respect to
/// sampled student parameters; returns (worst relative error, entries).
fn total_loss_fd(seed: u64) -> Result<(f64, usize), String> {
    let (student, teacher) = one_layer_pair(seed);
    let spec = student.spec().clone();
    let x0 = rand_t(&[2, spec.latent_channels, 4, 4], seed, "acceptance/x0");
    let noise = Tensor::randn(x0.shape(), 1.0, &mut rng::stream(seed, "acceptance/eps"));
    let mut r = rng::stream(seed, "acceptance/ts");
    let timesteps = vec![r.gen_range(0..50), r.gen_range(0..50)];
    let tokens = vec![
        (0..3).map(|_| r.gen_range(0..5)).collect(),
        (0..3).map(|_| r.gen_range(0..5)).collect(),
    ];
    let x_t = ok(ok(NoiseSchedule::with_steps(50))?.add_noise(&x0, &noise, &timesteps))?;
    let inputs = StepInputs {
        x_t,
        noise,
        timesteps,
        tokens,
    };
    let probe = PerceptualProbe::with_widths(spec.latent_channels, &[3, 4], seed);
    let targets = ok(TeacherTargets::compute(&teacher, &probe, &inputs))?;
    let weights = LossWeights::default();
    let value = |m: &UNetModel| {
        let mut g = Graph::new();
        let lg = loss_graph(
            &mut g,
            m,
            |_| false,
            &inputs,
            Some(&targets),
            &probe,
            &weights,
        )
        .unwrap();
        g.value(lg.total).item()
    };
    let mut g = Graph::new();
    let lg = ok(loss_graph(
        &mut g,
        &student,
        |_| true,
        &inputs,
        Some(&targets),
        &probe,
        &weights,
    ))?;
    let composed = total_loss(&weights, &lg.terms);
    let recorded = g.value(lg.total).item();
    ensure!(
        rel_err(composed, recorded) < 1e-12,
        "total_loss {composed} disagrees with the recorded objective {recorded}"
    );
    let grads = ok(g.backward(lg.total))?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, v) in lg.params.iter() {
        let an = grads.get(v);
        let i = rng::stream(seed, name).gen_range(0..an.numel());
        let mut plus = student.clone();
        plus.params_mut().get_mut(name).unwrap().data_mut()[i] += FD_STEP;
        let mut minus = student.clone();
        minus.params_mut().get_mut(name).unwrap().data_mut()[i] -= FD_STEP;
        let num = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
        let a = an.data()[i];
        if a.abs().max(num.abs()) < 1e-7 {
            ensure!((a - num).abs() < 1e-9, "{name}[{i}]: {a} vs {num}");
            continue;
        }
        let e = rel_err(a, num);
        ensure!(
            e < FD_TOL,
            "seed {seed} {name}[{i}]: analytic {a}, numeric {num}"
        );
        worst = worst.max(e);
        checked += 1;
    }
    Ok((worst, checked))
}

fn criterion1() -> Check {
    let mut worst: f64 = 0.0;
    for kind in ALL_OPS {
        let (shapes, f) = op_case(kind).expect("non-leaf op");
        for seed in 0..SEEDS {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| rand_t(s, seed, &format!("acceptance/{kind:?}/{i}")))
                .collect();
            let e = fd_worst(&inputs, seed, f, kind)?;
            ensure!(e < FD_TOL, "{kind:?} seed {seed}: relative error {e:e}");
            worst = worst.max(e);
        }
    }
    let mut loss_worst: f64 = 0.0;
    let mut entries = 0;
    for seed in 0..SEEDS {
        let (e, n) = total_loss_fd(seed)?;
        loss_worst = loss_worst.max(e);
        entries += n;
    }
    Ok(format!(
        "{} operators x {SEEDS} seeds, worst rel err {worst:.2e}; total loss {entries} entries over {SEEDS} seeds, worst {loss_worst:.2e} (tol {FD_TOL:e})",
        ALL_OPS.len()
    ))
}

// ------------------------------------------------------------ criterion 2

fn criterion2() -> Check {
    let spec = UNetSpec::desk();
    let teacher = ok(build_unet(&spec, 0))?;
    let block = BlockId::Up(spec.up_blocks.len() - 1);
    let (x, t, c) = desk_inputs(&spec, 2, 3);
    let reference = ok(teacher.forward_report(&x, &t, &c))?;

    let (one, _) = ok(inherit_condconv(
        &teacher,
        block,
        1,
        ExtraExperts::CrossLayer,
        0,
    ))?;
    let out = ok(one.forward(&x, &t, &c))?;
    ensure!(
        out.bitwise_eq(&reference.output),
        "one-expert augmentation changed the output (max diff {:e})",
        out.max_abs_diff(&reference.output)
    );

    let mut worst: f64 = 0.0;
    for n in [2, 4] {
        let (mut cc, _) = ok(inherit_condconv(
            &teacher,
            block,
            n,
            ExtraExperts::CrossLayer,
            0,
        ))?;
        let names: Vec<String> = cc
            .params()
            .names()
            .filter(|n| n.ends_with("router.bias"))
            .map(String::from)
            .collect();
        for name in names {
            cc.params_mut().get_mut(&name).unwrap().data_mut()[0] = 40.0;
        }
        let r = ok(cc.forward_report(&x, &t, &c))?;
        let a = &reference.blocks[&block];
        let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let rel = r.blocks[&block].max_abs_diff(a) / scale;
        ensure!(
            rel < 1e-6,
            "{n} experts: saturated block differs by {rel:e} relative"
        );
        worst = worst.max(rel);
    }
    Ok(format!(
        "one expert bitwise on {block}; saturated routing with 2 and 4 experts within {worst:.1e} relative"
    ))
}

// ------------------------------------------------------------ criterion 3

fn criterion3() -> Check {
    let spec = UNetSpec::desk();
    let teacher = ok(build_unet(&spec, 0))?;
    let pruned = ok(prune_layers(&spec, &PrunePlan::default_for(&spec)))?;
    let student = ok(build_unet(&pruned, 99))?;
    let plan = CombinationPlan::all_teacher(&spec, true);
    let combined = ok(recombine(&teacher, &student, &plan))?;
    for i in 0..10 {
        let (x, t, c) = desk_inputs(&spec, 1, 100 + i);
        let a = ok(teacher.forward(&x, &t, &c))?;
        let b = ok(combined.model.forward(&x, &t, &c))?;
        ensure!(
            a.bitwise_eq(&b),
            "input {i}: outputs differ by {:e}",
            a.max_abs_diff(&b)
        );
    }
    ensure!(
        combined.freeze.frozen_names().count() == combined.model.params().len(),
        "all-teacher frozen plan left parameters trainable"
    );
    Ok("10 inputs bitwise equal, every parameter frozen".into())
}

// ------------------------------------------------------------ criterion 4

fn criterion4(teacher: &UNetModel) -> Check {
    let spec = teacher.spec().clone();
    let mut cfg = RunConfig::default()
        .incubation_config()
        .map_err(|e| e.to_string())?;
    cfg.combination = Some(ok(CombinationPlan::preset("M2", &spec))?);
    cfg.stage1.steps = 20;
    cfg.stage2.steps = 200;
    let data = ok(gen_dataset(cfg.data.seed, cfg.data.size))?;
    let heldout = ok(HeldOut::new(teacher, &cfg.eval))?;
    let (_, s1) = ok(run_stage1(teacher, &cfg, &data, &mut |_| {}))?;
    let (combined, s2) = ok(run_stage2(
        teacher,
        &s1.model,
        &cfg,
        &data,
        &heldout,
        &mut |_| {},
    ))?;
    let plan = cfg.combination_plan(&spec);
    let trained = &s2.model;
    let mut teacher_params = 0;
    let mut changed_student = 0;
    for (name, p) in combined.provenance.iter() {
        let now = trained.params().get(name).unwrap();
        match p {
            Provenance::Teacher => {
                let orig = teacher.params().get(name).unwrap();
                ensure!(now.bitwise_eq(orig), "teacher-sourced `{name}` changed");
                teacher_params += 1;
            }
            _ => {
                if !now.bitwise_eq(combined.model.params().get(name).unwrap()) {
                    changed_student += 1;
                }
            }
        }
    }
    ensure!(
        changed_student > 0,
        "no student-sourced parameter was updated"
    );
    let audit = ok(provenance_audit(&combined.provenance))?;
    let mut expected = BTreeMap::new();
    for name in trained.params().names() {
        let part = ok(Part::of_param(name))?;
        let src = plan.source_of(part, &spec).ok_or("part without source")?;
        expected.insert(part, Provenance::from(src));
    }
    ensure!(
        audit == expected,
        "audit {audit:?} differs from plan {expected:?}"
    );
    let student_parts: Vec<String> = audit
        .iter()
        .filter(|(_, p)| **p == Provenance::Student)
        .map(|(k, _)| k.to_string())
        .collect();
    Ok(format!(
        "200 steps: {teacher_params} teacher tensors bitwise unchanged, {changed_student} student tensors updated; audit student parts {student_parts:?}"
    ))
}

// ------------------------------------------------------------ criterion 5

fn random_spec(seed: u64) -> UNetSpec {
    let mut r = rng::stream(seed, "acceptance/spec");
    let n = r.gen_range(1..=4);
    let mut downs = 0;
    let downsample: Vec<bool> = (0..n)
        .map(|i| {
            let d = i + 1 < n && downs < 2 && r.gen_bool(0.6);
            downs += usize::from(d);
            d
        })
        .collect();
    let arch = ArchConfig {
        channel_multipliers: (0..n).map(|_| r.gen_range(1..=3)).collect(),
        down_layers: (0..n).map(|_| r.gen_range(1..=3)).collect(),
        up_layers: (0..n).map(|_| r.gen_range(1..=3)).collect(),
        attention: (0..n).map(|_| r.gen_bool(0.5)).collect(),
        downsample,
        base_channels: 8,
        head_dim: 4,
        ff_mult: r.gen_range(1..=3),
        cond_dim: 8,
        time_embed_dim: 16,
        norm_groups: 4,
        ..ArchConfig::default()
    };
    let mut spec = arch.to_spec().unwrap();
    let prunable: Vec<(BlockId, usize)> = spec
        .block_ids()
        .into_iter()
        .filter(|b| *b != BlockId::Mid)
        .filter_map(|b| {
            let layers = &spec.block(b).unwrap().layers;
            (layers.len() > 1).then(|| (b, layers[r.gen_range(0..layers.len())].id))
        })
        .collect();
    if !prunable.is_empty() && r.gen_bool(0.5) {
        let pick = prunable[r.gen_range(0..prunable.len())];
        spec = prune_layers(&spec, &PrunePlan::new([pick])).unwrap();
    }
    if r.gen_bool(0.5) {
        let ids = spec.block_ids();
        let b = ids[r.gen_range(0..ids.len())];
        let m = build_unet(&spec, 0).unwrap();
        let (cc, _) = inherit_condconv(&m, b, r.gen_range(1..=3), ExtraExperts::Random, 0).unwrap();
        spec = cc.spec().clone();
    }
    spec
}

fn criterion5() -> Check {
    let mut total = 0u64;
    for seed in 0..50 {
        let spec = random_spec(seed);
        let model = ok(build_unet(&spec, seed))?;
        let enumerated: u64 = model.params().iter().map(|(_, t)| t.numel() as u64).sum();
        let counted = ok(count_params(&spec))?.totals.params;
        ensure!(
            counted == enumerated,
            "spec {seed}: counted {counted}, enumerated {enumerated}"
        );
        total += counted;
    }
    let spec = UNetSpec::desk();
    let model = ok(build_unet(&spec, 0))?;
    let (x, t, c) = desk_inputs(&spec, 1, 5);
    let runtime = ok(model.forward_report(&x, &t, &c))?.flops;
    let est = ok(estimate_flops(&spec, [4, 16, 16]))?
        .totals
        .flop_breakdown;
    for (name, a, b) in [
        ("conv", est.conv, runtime.conv),
        ("linear", est.linear, runtime.linear),
        ("attention", est.attention, runtime.attention),
    ] {
        ensure!(a == b, "{name}: estimated {a}, counted at runtime {b}");
    }
    Ok(format!(
        "50 random specs ({total} params) exact; desk conv/linear/attention FLOPs {}/{}/{} match the runtime counter exactly (elementwise estimated {} vs counted {})",
        est.conv, est.linear, est.attention, est.elementwise, runtime.elementwise
    ))
}

// ------------------------------------------------------------ criterion 6

fn criterion6() -> Check {
    let desk = UNetSpec::desk();
    let pruned = ok(prune_layers(&desk, &PrunePlan::default_for(&desk)))?;
    let sp = ok(speedup_estimate(
        &desk,
        &pruned,
        [4, 16, 16],
        DEFAULT_OVERHEAD,
    ))?;
    // Independent route: sum the per-block rows rather than reading totals.
    let rows = |s: &UNetSpec| -> Result<u64, String> {
        Ok(ok(estimate_flops(s, [4, 16, 16]))?
            .blocks
            .iter()
            .map(|r| r.flops)
            .sum())
    };
    let (fb, fa) = (rows(&desk)?, rows(&pruned)?);
    let direct = 1.0 - fa as f64 / fb as f64;
    ensure!(
        sp.flops_before == fb && sp.flops_after == fa && sp.unet_flop_reduction == direct,
        "desk: reported {} vs recomputed {direct}",
        sp.unet_flop_reduction
    );
    // Runtime counters of the two instantiated models agree on the heavy terms.
    let (x, t, c) = desk_inputs(&desk, 1, 6);
    let heavy = |s: &UNetSpec| -> Result<(u64, u64), String> {
        let f = ok(ok(build_unet(s, 0))?.forward_report(&x, &t, &c))?.flops;
        let e = ok(estimate_flops(s, [4, 16, 16]))?.totals.flop_breakdown;
        Ok((
            f.conv + f.linear + f.attention,
            e.conv + e.linear + e.attention,
        ))
    };
    let (rb, eb) = heavy(&desk)?;
    let (ra, ea) = heavy(&pruned)?;
    ensure!(
        rb == eb && ra == ea,
        "runtime heavy-op FLOPs disagree with the estimate"
    );

    let sd = UNetSpec::sd15_shaped();
    let sd_pruned = ok(prune_layers(&sd, &PrunePlan::default_for(&sd)))?;
    let shape = [4, sd.latent_size, sd.latent_size];
    let mut sd_r = 0.0;
    for f in [0.0, DEFAULT_OVERHEAD, 0.5] {
        let s = ok(speedup_estimate(&sd, &sd_pruned, shape, f))?;
        ensure!(
            s.unet_flop_reduction > 0.0,
            "SD-shaped reduction not positive"
        );
        ensure!(
            s.pipeline_reduction == (1.0 - f) * s.unet_flop_reduction,
            "pipeline reduction {} != (1-{f})*{}",
            s.pipeline_reduction,
            s.unet_flop_reduction
        );
        sd_r = s.unet_flop_reduction;
    }
    Ok(format!(
        "desk UNet FLOP reduction {:.4} equals recomputation; SD-shaped reduction {:.4}, pipeline {:.4} at overhead {DEFAULT_OVERHEAD}",
        sp.unet_flop_reduction,
        sd_r,
        (1.0 - DEFAULT_OVERHEAD) * sd_r
    ))
}

// ------------------------------------------------------------ criterion 7

fn criterion7() -> Check {
    let spec = UNetSpec::desk();
    let large = ok(build_unet(&spec, 0))?;
    let pruned = ok(prune_layers(&spec, &PrunePlan::default_for(&spec)))?;
    let (small, _) = ok(transplant_weights(
        &pruned,
        &large,
        &LayerMapping::identity(),
        1,
    ))?;
    let noise = ok(NoiseSchedule::with_steps(spec.train_timesteps))?;
    let tokens = vec![ok(gen_dataset(4, 1))?.remove(0).tokens];
    let models: BTreeMap<&str, &UNetModel> = [("small", &small), ("large", &large)].into();
    let mut seen = Vec::new();
    for name in ["S1", "S2", "S3"] {
        let segs = ok(SegmentConfig::preset(name))?;
        let schedule = ok(SamplerSchedule::new(
            segs.iter()
                .map(|s| Segment {
                    name: &s.model,
                    model: models[s.model.as_str()],
                    n_steps: s.steps,
                })
                .collect(),
        ))?;
        let out = ok(ddim_sample(&schedule, &noise, &tokens, 8.0, 1))?;
        let mut expect = Vec::new();
        for s in &segs {
            expect.extend(std::iter::repeat(s.model.clone()).take(s.steps));
        }
        let got: Vec<String> = out.trace.iter().map(|r| r.model.clone()).collect();
        ensure!(got == expect, "{name}: trace models {got:?}");
        let switch = (1..got.len()).find(|&i| got[i] != got[i - 1]);
        ensure!(
            switch == Some(segs[0].steps),
            "{name}: handoff at {switch:?}, boundary {}",
            segs[0].steps
        );
        seen.push(format!("{name}@{}", segs[0].steps));
    }
    let whole = ok(SamplerSchedule::single("large", &large, 25))?;
    let split = ok(SamplerSchedule::new(vec![
        Segment {
            name: "large",
            model: &large,
            n_steps: 10,
        },
        Segment {
            name: "large",
            model: &large,
            n_steps: 15,
        },
    ]))?;
    let a = ok(ddim_sample(&whole, &noise, &tokens, 8.0, 2))?;
    let b = ok(ddim_sample(&split, &noise, &tokens, 8.0, 2))?;
    ensure!(
        a.trajectory.len() == b.trajectory.len(),
        "trajectory lengths differ"
    );
    for (i, (x, y)) in a.trajectory.iter().zip(&b.trajectory).enumerate() {
        ensure!(x.bitwise_eq(y), "split trajectory differs at step {i}");
    }
    Ok(format!(
        "handoffs {}; split single-model schedule bitwise identical over 25 steps",
        seen.join(", ")
    ))
}

// ------------------------------------------------------------ criterion 8

/// Means of consecutive 100-step windows of the task loss.
fn windowed_task_loss(run: &StageRun) -> Vec<f64> {
    run.records
        .chunks(100)
        .filter(|c| c.len() == 100)
        .map(|c| c.iter().map(|r| r.terms.task).sum::<f64>() / 100.0)
        .collect()
}

struct Pipeline {
    cfg: IncubationConfig,
    stage1: StageRun,
    student_init: UNetModel,
    combined: slimdiff::compress::Recombined,
    stage2: StageRun,
}

fn criterion8(teacher: &UNetModel, teacher_secs: f64, slot: &mut Option<Pipeline>) -> Check {
    let t0 = Instant::now();
    let cfg = ok(RunConfig::default().incubation_config())?;
    let spec = teacher.spec().clone();
    let data = ok(gen_dataset(cfg.data.seed, cfg.data.size))?;
    let heldout = ok(HeldOut::new(teacher, &cfg.eval))?;
    let (init, s1) = ok(run_stage1(teacher, &cfg, &data, &mut |_| {}))?;
    let plan = cfg.combination_plan(&spec);
    let undistilled = ok(recombine(teacher, &init.model, &plan))?;
    let u = ok(heldout.evaluate(&undistilled.model, 0))?;
    let (combined, s2) = ok(run_stage2(
        teacher,
        &s1.model,
        &cfg,
        &data,
        &heldout,
        &mut |_| {},
    ))?;
    let d = *s2.divergence.last().ok_or("no divergence record")?;

    let mut ablate = cfg.clone();
    ablate.stage2.weights.lambda_mid = 0.0;
    let s2_0 = ok(run_stage(
        combined.model.clone(),
        Some(teacher),
        combined.freeze.clone(),
        &data,
        &ablate.data,
        &ablate.stage2,
        Some(&heldout),
        ablate.eval.every,
        &mut |_| {},
    ))?;
    let d0 = *s2_0.divergence.last().ok_or("no divergence record")?;
    let secs = teacher_secs + t0.elapsed().as_secs_f64();

    let reduction = 1.0 - d.output_mse / u.output_mse;
    let detail = format!(
        "held-out output MSE undistilled {:.4e} -> distilled {:.4e} ({:.1}% lower, need >= 30%); mid MSE lambda_mid={} {:.4e} vs lambda_mid=0 {:.4e}; teacher {} + stage1 {} + stage2 {} x2 steps in {:.1} min",
        u.output_mse,
        d.output_mse,
        100.0 * reduction,
        cfg.stage2.weights.lambda_mid,
        d.mid_mse,
        d0.mid_mse,
        RunConfig::default().distill.teacher.steps,
        cfg.stage1.steps,
        cfg.stage2.steps,
        secs / 60.0
    );
    *slot = Some(Pipeline {
        cfg: cfg.clone(),
        stage1: s1,
        student_init: init.model,
        combined,
        stage2: s2,
    });
    ensure!(reduction >= 0.30, "{detail}");
    ensure!(d.mid_mse < d0.mid_mse, "{detail}");
    Ok(detail)
}

// ------------------------------------------------------------ criterion 9

fn criterion9(teacher: &UNetModel, p: Option<&Pipeline>, dir: &Path) -> Check {
    let spec = teacher.spec().clone();
    let pruned_spec = ok(prune_layers(&spec, &PrunePlan::default_for(&spec)))?;
    let (pruned, _) = ok(transplant_weights(
        &pruned_spec,
        teacher,
        &LayerMapping::identity(),
        3,
    ))?;
    let mut kinds = vec![
        Checkpoint::new(ModelKind::Teacher, teacher.clone()),
        Checkpoint::new(ModelKind::Pruned, pruned),
    ];
    match p {
        Some(p) => {
            ensure!(
                p.cfg.condconv.is_some(),
                "default pipeline has no CondConv stage"
            );
            kinds.push(Checkpoint::new(ModelKind::CondConv, p.student_init.clone()));
            kinds.push(Checkpoint::from_recombined(
                ModelKind::Recombined,
                p.combined.clone(),
            ));
            let mut fin = p.combined.clone();
            fin.model = p.stage2.model.clone();
            kinds.push(Checkpoint::from_recombined(ModelKind::Distilled, fin));
            ensure!(!p.stage1.records.is_empty(), "stage 1 did not run");
        }
        None => return Err("pipeline artifacts unavailable".into()),
    }
    for ck in &kinds {
        let path = dir.join(format!("{:?}.asdm", ck.kind));
        ok(ck.save(&path))?;
        let back = ok(Checkpoint::load(&path))?;
        ensure!(back.bitwise_eq(ck), "{:?} did not round-trip", ck.kind);
        ensure!(
            ok(back.to_bytes())? == ok(std::fs::read(&path))?,
            "{:?} re-serialization differs",
            ck.kind
        );
    }

    let mut configs = vec![RunConfig::default()];
    let mut c = RunConfig::default();
    c.seed = 17;
    c.combination_plan = Some(PlanChoice::Preset("M5".into()));
    c.sampler.segments = ok(SegmentConfig::preset("S1"))?;
    c.sampler.total_steps = 25;
    c.sampler.models = [
        ("small".to_string(), "s.asdm".into()),
        ("large".to_string(), "l.asdm".into()),
    ]
    .into();
    configs.push(c);
    for c in &configs {
        let text = c.to_json();
        let back = ok(RunConfig::from_json(&text))?;
        ensure!(
            &back == c && back.to_json() == text,
            "config is not a fixed point"
        );
    }

    let teacher_path = dir.join("Teacher.asdm");
    let sample = |out: &str| -> Result<Vec<Vec<u8>>, String> {
        let o = dir.join(out);
        let st = ok(Command::new(env!("CARGO_BIN_EXE_slimdiff"))
            .args(["sample", "--checkpoint"])
            .arg(format!("teacher={}", teacher_path.display()))
            .arg("--out")
            .arg(&o)
            .output())?;
        ensure!(
            st.status.success(),
            "sample failed: {}",
            String::from_utf8_lossy(&st.stderr)
        );
        (0..RunConfig::default().sampler.n_samples)
            .map(|i| ok(std::fs::read(o.join(format!("sample_{i}.f64")))))
            .collect()
    };
    let (a, b) = (sample("sa")?, sample("sb")?);
    ensure!(a == b, "same-seed sample latents differ");
    Ok(format!(
        "{} model kinds bitwise, {} configs fixed points, {} latent dumps byte-identical",
        kinds.len(),
        configs.len(),
        a.len()
    ))
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let mut outcomes = vec![
        run(1, "gradient suite", criterion1),
        run(2, "CondConv equivalence", criterion2),
        run(3, "recombination identity", criterion3),
        run(5, "accounting oracle", criterion5),
        run(6, "pruning speedup accounting", criterion6),
        run(7, "scheduler handoff", criterion7),
    ];

    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let run_cfg = cfg.seeded();
    let teacher_run = train_teacher(
        &cfg.spec().unwrap(),
        run_cfg.distill.teacher_init_seed,
        &run_cfg.data,
        &run_cfg.distill.teacher.stage(),
        &mut |_| {},
    )
    .expect("teacher training");
    let teacher_secs = t0.elapsed().as_secs_f64();
    let windows = windowed_task_loss(&teacher_run);
    let monotone = windows.windows(2).all(|w| w[1] <= w[0]);
    say(&format!(
        "teacher: {} steps in {:.1} min; 100-step mean task loss {:.4} -> {:.4}, nonincreasing across windows: {monotone}",
        teacher_run.records.len(),
        teacher_secs / 60.0,
        windows.first().copied().unwrap_or(f64::NAN),
        windows.last().copied().unwrap_or(f64::NAN),
    ));
    let teacher = teacher_run.model;

    outcomes.push(run(4, "freeze invariant", || criterion4(&teacher)));
    let mut pipeline = None;
    outcomes.push(run(8, "end-to-end desk distillation", || {
        criterion8(&teacher, teacher_secs, &mut pipeline)
    }));
    outcomes.push(run(9, "round-trips", || {
        criterion9(&teacher, pipeline.as_ref(), dir.path())
    }));

    outcomes.sort_by_key(|o| o.id);
    say("acceptance summary:");
    for o in &outcomes {
        say(&line(o));
    }
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
