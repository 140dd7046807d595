use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use slimdiff::compress::prune_layers;
use slimdiff::data::{decode, gen_dataset};
use slimdiff::distill::{incubation_run, train_teacher, HeldOut, StepRecord};
use slimdiff::io::{latent_bytes, preview_pgm, Checkpoint, ModelKind, RunConfig};
use slimdiff::profiler::{profile, speedup_estimate};
use slimdiff::sampler::{ddim_sample, NoiseSchedule, SamplerSchedule, Segment};
use slimdiff::unet::{UNetModel, UNetSpec};

use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Inspect { path, json } => inspect(path, *json),
        cmd => {
            let cfg = load_config(cli)?;
            fs::create_dir_all(&cli.out)
                .with_context(|| format!("creating {}", cli.out.display()))?;
            match cmd {
                Command::Profile {
                    compare,
                    pruned,
                    overhead,
                } => cmd_profile(&cfg, compare.as_deref(), *pruned, *overhead, &cli.out),
                Command::TrainTeacher => cmd_train_teacher(&cfg, &cli.out),
                Command::Incubate { teacher } => cmd_incubate(&cfg, teacher.as_deref(), &cli.out),
                Command::Sample { checkpoints } => cmd_sample(&cfg, checkpoints, &cli.out),
                Command::GenData { n } => cmd_gen_data(&cfg, *n, &cli.out),
                Command::Inspect { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn latent_shape(spec: &UNetSpec) -> [usize; 3] {
    [spec.latent_channels, spec.latent_size, spec.latent_size]
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Line-delimited JSON sink that keeps the first write error.
struct JsonLines {
    w: BufWriter<File>,
    path: PathBuf,
    err: Option<std::io::Error>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            w: BufWriter::new(f),
            path,
            err: None,
        })
    }

    fn push(&mut self, value: &impl Serialize) {
        if self.err.is_some() {
            return;
        }
        let line = serde_json::to_string(value).expect("records serialize");
        if let Err(e) = writeln!(self.w, "{line}") {
            self.err = Some(e);
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.err.take() {
            return Err(e).with_context(|| format!("writing {}", self.path.display()));
        }
        self.w
            .flush()
            .with_context(|| format!("writing {}", self.path.display()))
    }
}

#[derive(Serialize)]
struct StageLine<'a> {
    stage: u8,
    #[serde(flatten)]
    record: &'a StepRecord,
}

fn cmd_profile(
    cfg: &RunConfig,
    compare: Option<&Path>,
    pruned: bool,
    overhead: f64,
    out: &Path,
) -> Result<()> {
    let spec = cfg.spec()?;
    let shape = latent_shape(&spec);
    let report = profile(&spec, shape)?;
    println!("{}", report.to_table());
    let other = match (compare, pruned) {
        (Some(p), _) => Some(
            RunConfig::load(p)
                .with_context(|| format!("loading comparison config {}", p.display()))?
                .spec()?,
        ),
        (None, true) => {
            let inc = cfg.incubation_config()?;
            Some(prune_layers(&spec, &inc.prune_plan(&spec))?)
        }
        (None, false) => None,
    };
    let mut doc = json!({ "model": report });
    if let Some(o) = other {
        let cmp = profile(&o, shape)?;
        let sp = speedup_estimate(&spec, &o, shape, overhead)?;
        println!("{}", cmp.to_table());
        println!(
            "params {} -> {} ({:.2}% fewer), flops {} -> {} (UNet {:.2}% fewer, pipeline {:.2}% at overhead {})",
            report.totals.params,
            cmp.totals.params,
            100.0 * (1.0 - cmp.totals.params as f64 / report.totals.params as f64),
            sp.flops_before,
            sp.flops_after,
            100.0 * sp.unet_flop_reduction,
            100.0 * sp.pipeline_reduction,
            overhead
        );
        doc["compare"] = serde_json::to_value(&cmp)?;
        doc["speedup"] = serde_json::to_value(sp)?;
    }
    write_json(&out.join("profile.json"), &doc)
}

fn cmd_train_teacher(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.spec()?;
    let c = cfg.seeded();
    let mut log = JsonLines::create(out.join("teacher_metrics.jsonl"))?;
    let run = train_teacher(
        &spec,
        c.distill.teacher_init_seed,
        &c.data,
        &c.distill.teacher.stage(),
        &mut |r| log.push(r),
    )?;
    log.finish()?;
    let path = out.join("teacher.asdm");
    Checkpoint::new(ModelKind::Teacher, run.model).save(&path)?;
    if let Some(last) = run.records.last() {
        println!(
            "trained teacher for {} steps, final task loss {:.6}",
            run.records.len(),
            last.terms.task
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_incubate(cfg: &RunConfig, teacher: Option<&Path>, out: &Path) -> Result<()> {
    let Some(path) = teacher.or(cfg.teacher_checkpoint.as_deref()) else {
        bail!("incubate needs a teacher checkpoint: pass --teacher or set `teacher_checkpoint`");
    };
    let teacher = load_checkpoint(path)?.model;
    if teacher.spec() != &cfg.spec()? {
        bail!(
            "teacher checkpoint {} was built for a different architecture than the config",
            path.display()
        );
    }
    let inc_cfg = cfg.incubation_config()?;
    let mut log = JsonLines::create(out.join("incubate_metrics.jsonl"))?;
    let inc = incubation_run(&teacher, &inc_cfg, &mut |stage, r| {
        log.push(&StageLine { stage, record: r })
    })?;
    log.finish()?;

    let heldout = HeldOut::new(&teacher, &inc_cfg.eval)?;
    let undistilled = heldout.evaluate(&inc.undistilled.model, 0)?;
    let mut div = JsonLines::create(out.join("divergence.jsonl"))?;
    for d in &inc.stage2.divergence {
        div.push(d);
    }
    div.finish()?;
    let last = inc.stage2.divergence.last().copied();
    write_json(
        &out.join("summary.json"),
        &json!({
            "undistilled": undistilled,
            "distilled": last,
            "transplant": inc.student_init.transplant,
            "frozen_tensors": inc.combined.freeze.frozen_names().count(),
        }),
    )?;

    let student_kind = if inc_cfg.condconv.is_some() {
        ModelKind::CondConv
    } else {
        ModelKind::Pruned
    };
    let artifacts = [
        (
            "student_init.asdm",
            Checkpoint::new(student_kind, inc.student_init.model.clone()),
        ),
        (
            "stage1.asdm",
            Checkpoint::new(student_kind, inc.stage1.model.clone()),
        ),
        (
            "recombined.asdm",
            Checkpoint::from_recombined(ModelKind::Recombined, inc.combined.clone()),
        ),
        (
            "distilled.asdm",
            Checkpoint::from_recombined(ModelKind::Distilled, inc.final_model()),
        ),
    ];
    for (name, ck) in artifacts {
        ck.save(out.join(name))?;
    }
    if let Some(d) = last {
        println!(
            "held-out output MSE to teacher: undistilled {:.6e}, distilled {:.6e}",
            undistilled.output_mse, d.output_mse
        );
    }
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, extra: &[String], out: &Path) -> Result<()> {
    let mut c = cfg.seeded();
    for e in extra {
        let Some((name, path)) = e.split_once('=') else {
            bail!("--checkpoint expects NAME=PATH, got `{e}`");
        };
        c.sampler.models.insert(name.to_string(), path.into());
    }
    let segs = c.sampler.resolved_segments()?;
    let mut models: BTreeMap<&str, UNetModel> = BTreeMap::new();
    for s in &segs {
        if !models.contains_key(s.model.as_str()) {
            let ck = load_checkpoint(&c.sampler.models[&s.model])?;
            models.insert(&s.model, ck.model);
        }
    }
    let schedule = SamplerSchedule::new(
        segs.iter()
            .map(|s| Segment {
                name: &s.model,
                model: &models[s.model.as_str()],
                n_steps: s.steps,
            })
            .collect(),
    )?;
    let spec = schedule.segments()[0].model.spec();
    let noise = NoiseSchedule::with_steps(spec.train_timesteps)?;
    let tokens: Vec<Vec<usize>> = gen_dataset(c.sampler.cond_seed, c.sampler.n_samples)?
        .into_iter()
        .map(|s| s.tokens)
        .collect();
    let res = ddim_sample(
        &schedule,
        &noise,
        &tokens,
        c.sampler.guidance_scale,
        c.sampler.noise_seed,
    )?;
    for i in 0..tokens.len() {
        let x = res.latent.index_first(i);
        fs::write(out.join(format!("sample_{i}.f64")), latent_bytes(&x))?;
        fs::write(out.join(format!("sample_{i}.pgm")), preview_pgm(&x)?)?;
    }
    let mut trace = JsonLines::create(out.join("trace.jsonl"))?;
    for r in &res.trace {
        trace.push(r);
    }
    trace.finish()?;
    write_json(
        &out.join("conditions.json"),
        &tokens
            .iter()
            .map(|t| json!({ "tokens": t, "primitives": decode(t).ok() }))
            .collect::<Vec<_>>(),
    )?;
    println!(
        "sampled {} latents over {} steps ({} multiply-accumulates)",
        tokens.len(),
        schedule.total_steps(),
        res.flops.total()
    );
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig, n: Option<usize>, out: &Path) -> Result<()> {
    let c = cfg.seeded();
    let n = n.unwrap_or(c.data.size);
    let data = gen_dataset(c.data.seed, n)?;
    let mut lines = JsonLines::create(out.join("data.jsonl"))?;
    for (i, s) in data.iter().enumerate() {
        lines.push(&json!({
            "index": i,
            "tokens": s.tokens,
            "primitives": decode(&s.tokens)?,
            "latent_shape": s.latent.shape(),
            "latent": s.latent.data(),
        }));
    }
    lines.finish()?;
    println!("wrote {n} samples to {}", out.join("data.jsonl").display());
    Ok(())
}

fn inspect(path: &Path, as_json: bool) -> Result<()> {
    let ck = load_checkpoint(path)?;
    if as_json {
        let doc = json!({
            "kind": ck.kind,
            "parameters": ck.model.param_count(),
            "provenance_counts": ck.provenance_counts(),
            "tensors": ck.inventory(),
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        print!("{}", ck.render_inventory());
    }
    Ok(())
}
