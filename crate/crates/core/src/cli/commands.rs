use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attribution::{attribute_pool, LayerScores};
use crate::config::RunConfig;
use crate::dataset::{build_dataset, load_jsonl, load_manifest, save_jsonl, save_manifest, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::{
    bench_overhead, run_tradeoff, sweep_gating, sweep_modes, sweep_rs, AblationTable, BenchReport, EvalSet, SeedRun,
    TradeoffReport,
};
use crate::ledger::{DirLock, ExperimentLedger};
use crate::model::{build_planted_with_retry, load_weights, random_model, save_weights, Model};
use crate::steering::{fit_mean_shift, fit_null_space, load_plan, make_plan, save_plan, BackendKind, SteeringPlan};

use super::Command;

struct Ctx<'a> {
    cfg: &'a RunConfig,
    force: bool,
    ledger: ExperimentLedger,
    ledger_path: PathBuf,
}

impl Ctx<'_> {
    fn path(&self, p: &Path) -> PathBuf {
        self.cfg.paths.resolve(p)
    }

    /// Input hashes, verified unless `--force` downgrades staleness to a warning.
    fn inputs(&self, names: &[&str]) -> Result<BTreeMap<String, String>> {
        match self.ledger.verify(names) {
            Err(Error::Stale(items)) if self.force => {
                for i in &items {
                    log::warn!("proceeding despite stale input: {i}");
                }
                self.ledger.current(names)
            }
            other => other,
        }
    }

    fn record(&mut self, name: &str, path: &Path, inputs: &BTreeMap<String, String>) -> Result<()> {
        self.ledger.record(name, path, inputs.clone())?;
        self.ledger.save(&self.ledger_path)
    }

    fn model(&self) -> Result<Model> {
        load_weights(&self.path(&self.cfg.paths.model))
    }

    fn samples(&self) -> Result<Vec<Sample>> {
        load_jsonl(&self.path(&self.cfg.paths.samples))
    }

    fn calibration(&self) -> Result<Vec<Sample>> {
        Ok(self
            .samples()?
            .into_iter()
            .filter(|s| s.split == Split::Calib)
            .collect())
    }

    fn scores(&self) -> Result<LayerScores> {
        read_json(&self.path(&self.cfg.paths.scores))
    }

    fn eval_set(&self, model: &Model, samples: &[Sample]) -> Result<EvalSet> {
        let trigger = model.planted().map(|p| p.trigger_token);
        EvalSet::from_samples(samples, trigger, self.cfg.dataset.params.max_caption_len)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub(super) fn dispatch(cfg: &RunConfig, cmd: &Command, force: bool) -> Result<()> {
    let out = &cfg.paths.out_dir;
    let _lock = DirLock::acquire(out, force)?;
    let ledger_path = cfg.paths.resolve(&cfg.paths.ledger);
    let mut ctx = Ctx {
        cfg,
        force,
        ledger: ExperimentLedger::load(&ledger_path)?,
        ledger_path,
    };
    match cmd {
        Command::BuildModel => build_model(&mut ctx),
        Command::GenData => gen_data(&mut ctx),
        Command::Attribute { mode } => attribute(&mut ctx, mode.map(Into::into)),
        Command::Plan {
            backend,
            gating,
            r_s,
            lambda,
        } => {
            let mut policy = cfg.policy.clone();
            if let Some(b) = backend {
                policy.backend = (*b).into();
            }
            if let Some(g) = gating {
                policy.gating = (*g).into();
            }
            if let Some(r) = r_s {
                policy.r_s = *r;
            }
            if let Some(l) = lambda {
                policy.lambda = *l;
            }
            policy.validate()?;
            plan(&mut ctx, &policy)
        }
        Command::SteerEval { eval_dir, benchmark } => {
            if *benchmark {
                steer_benchmark(&mut ctx)
            } else {
                steer_eval(&mut ctx, eval_dir.as_deref())
            }
        }
        Command::SweepRs => sweep(&mut ctx),
        Command::Bench { tokens } => bench(&mut ctx, tokens.unwrap_or(cfg.eval.bench_tokens)),
        Command::Report => report(&mut ctx),
    }
}

fn build_model(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let model = if cfg.planted.enabled {
        let (m, used) =
            build_planted_with_retry(&cfg.model, &cfg.planted.spec(), cfg.planted.seed, cfg.planted.max_tries)?;
        if used != cfg.planted.seed {
            log::warn!(
                "planted construction succeeded with seed {used} instead of {}",
                cfg.planted.seed
            );
        }
        m
    } else {
        random_model(&cfg.model, cfg.planted.seed)?
    };
    let path = ctx.path(&cfg.paths.model);
    save_weights(&model, &path)?;
    ctx.record("model", &path, &BTreeMap::new())?;
    println!("model {} -> {}", model.content_hash(), path.display());
    Ok(())
}

fn gen_data(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let inputs = ctx.inputs(&["model"])?;
    let model = ctx.model()?;
    let ds = build_dataset(&model, &cfg.dataset.params, cfg.dataset.seed)?;
    let (sp, rp, mp) = (
        ctx.path(&cfg.paths.samples),
        ctx.path(&cfg.paths.reference),
        ctx.path(&cfg.paths.manifest),
    );
    save_jsonl(&ds.samples, &sp)?;
    save_jsonl(&ds.reference, &rp)?;
    save_manifest(&ds.manifest, &mp)?;
    ctx.record("samples", &sp, &inputs)?;
    ctx.record("reference", &rp, &inputs)?;
    ctx.record("manifest", &mp, &inputs)?;
    let c = &ds.manifest.counts;
    println!(
        "calibration {} token + {} sentence, evaluation {} probes + {} captions, {} reference -> {}",
        c.token_calib,
        c.sentence_calib,
        c.token_eval,
        c.sentence_eval,
        ds.reference.len(),
        sp.display()
    );
    Ok(())
}

fn attribute(ctx: &mut Ctx, mode: Option<crate::attribution::AttributionMode>) -> Result<()> {
    let cfg = ctx.cfg;
    let mode = mode.unwrap_or(cfg.eval.mode);
    let inputs = ctx.inputs(&["model", "samples"])?;
    let model = ctx.model()?;
    let calib = ctx.calibration()?;
    let scores = attribute_pool(&model, &calib, mode, &cfg.indicator)?;
    let path = ctx.path(&cfg.paths.scores);
    write_json(&scores, &path)?;
    ctx.record("scores", &path, &inputs)?;
    let shown: Vec<String> = scores.scores.iter().map(|s| format!("{s:.4}")).collect();
    println!(
        "{} scores [{}], top layer {}",
        mode.as_str(),
        shown.join(", "),
        scores.argmax()
    );
    Ok(())
}

fn fit_backend(
    model: &Model,
    samples: &[Sample],
    kind: BackendKind,
    k: usize,
) -> Result<crate::steering::SteeringBackend> {
    match kind {
        BackendKind::MeanShift => fit_mean_shift(model, samples),
        BackendKind::NullSpace => fit_null_space(model, samples, k),
    }
}

fn plan(ctx: &mut Ctx, policy: &crate::steering::SteeringPolicyConfig) -> Result<()> {
    let cfg = ctx.cfg;
    let inputs = ctx.inputs(&["model", "samples", "reference", "scores"])?;
    let model = ctx.model()?;
    let scores = ctx.scores()?;
    scores.validate(model.config().n_layers)?;
    let mut fit = ctx.calibration()?;
    fit.extend(load_jsonl(&ctx.path(&cfg.paths.reference))?);
    let backend = fit_backend(&model, &fit, policy.backend, policy.k)?;
    let plan = make_plan(&scores, policy, backend)?;
    let path = ctx.path(&cfg.paths.plan);
    save_plan(&plan, &path)?;
    ctx.record("plan_payload", &path.with_extension("bin"), &inputs)?;
    ctx.record("plan", &path, &inputs)?;
    let mask: String = plan.mask.iter().map(|&m| if m { '1' } else { '0' }).collect();
    let lam: Vec<String> = plan.intensities.iter().map(|x| format!("{x:.4}")).collect();
    println!(
        "{} plan mask {mask} intensities [{}]{}",
        policy.backend.as_str(),
        lam.join(", "),
        if plan.degenerate { " (degenerate)" } else { "" }
    );
    Ok(())
}

fn write_tradeoff(ctx: &mut Ctx, report: &TradeoffReport, inputs: &BTreeMap<String, String>) -> Result<()> {
    let stem = ctx.path(&ctx.cfg.paths.tradeoff);
    let (j, t, c) = (with_ext(&stem, "json"), with_ext(&stem, "txt"), with_ext(&stem, "csv"));
    write_json(report, &j)?;
    write_text(&report.to_text(), &t)?;
    write_text(&report.to_csv(), &c)?;
    ctx.record("tradeoff", &j, inputs)?;
    print!("{}", report.to_text());
    Ok(())
}

fn steer_eval(ctx: &mut Ctx, eval_dir: Option<&Path>) -> Result<()> {
    let cfg = ctx.cfg;
    let mut inputs = ctx.inputs(&["model", "plan", "plan_payload", "samples"])?;
    let model = ctx.model()?;
    let layerwise = load_plan(&ctx.path(&cfg.paths.plan))?;
    let (samples, seed) = match eval_dir {
        None => (ctx.samples()?, cfg.dataset.seed),
        Some(dir) => {
            let other = ExperimentLedger::load(&dir.join(&cfg.paths.ledger))?;
            let hashes = other.verify(&["samples", "manifest"])?;
            let manifest = load_manifest(&other.artifacts["manifest"].path)?;
            if manifest.model_hash != model.content_hash() {
                return Err(Error::Validation(format!(
                    "evaluation data in {} was generated by a different model",
                    dir.display()
                )));
            }
            inputs.insert("eval_samples".into(), hashes["samples"].clone());
            (load_jsonl(&other.artifacts["samples"].path)?, manifest.seed)
        }
    };
    let eval = ctx.eval_set(&model, &samples)?;
    let uniform = SteeringPlan::uniform(
        layerwise.total_intensity(),
        layerwise.backend.clone(),
        layerwise.policy.clone(),
    );
    let row = run_tradeoff(&model, &eval, &uniform, &layerwise, seed)?;
    let report = TradeoffReport::from_rows(vec![row])?;
    write_tradeoff(ctx, &report, &inputs)
}

fn steer_benchmark(ctx: &mut Ctx) -> Result<()> {
    let bench = ctx.cfg.benchmark();
    let mut rows = Vec::new();
    for seed in 0..ctx.cfg.eval.seeds {
        let run = SeedRun::prepare(&bench, seed)?;
        rows.push(run.tradeoff(&bench)?);
        log::info!("benchmark seed {seed} done");
    }
    let report = TradeoffReport::from_rows(rows)?;
    write_tradeoff(ctx, &report, &BTreeMap::new())?;
    println!("layerwise dominates: {}", report.layerwise_dominates());
    Ok(())
}

fn sweep(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let inputs = ctx.inputs(&["model", "samples", "scores", "plan", "plan_payload"])?;
    let model = ctx.model()?;
    let samples = ctx.samples()?;
    let calib: Vec<Sample> = samples.iter().filter(|s| s.split == Split::Calib).cloned().collect();
    let eval = ctx.eval_set(&model, &samples)?;
    let scores = ctx.scores()?;
    let plan = load_plan(&ctx.path(&cfg.paths.plan))?;
    let tables = vec![
        sweep_rs(&model, &eval, &scores, &cfg.eval.rs_grid, &plan.backend, &plan.policy)?,
        sweep_modes(&model, &calib, &eval, &cfg.indicator, &plan.backend, &plan.policy)?,
        sweep_gating(&model, &eval, &scores, &plan.backend, &plan.policy)?,
    ];
    let stem = ctx.path(&cfg.paths.sweep);
    let (j, t, c) = (with_ext(&stem, "json"), with_ext(&stem, "txt"), with_ext(&stem, "csv"));
    write_json(&tables, &j)?;
    let text: String = tables.iter().map(|t| t.to_text() + "\n").collect();
    write_text(&text, &t)?;
    let mut csv = String::new();
    for (i, table) in tables.iter().enumerate() {
        for (n, line) in table.to_csv().lines().enumerate() {
            if n == 0 && i > 0 {
                continue;
            }
            let prefix = if n == 0 {
                "table".to_string()
            } else {
                table.name.clone()
            };
            csv.push_str(&format!("{prefix},{line}\n"));
        }
    }
    write_text(&csv, &c)?;
    ctx.record("sweep", &j, &inputs)?;
    print!("{text}");
    Ok(())
}

fn bench(ctx: &mut Ctx, tokens: usize) -> Result<()> {
    let cfg = ctx.cfg;
    let inputs = ctx.inputs(&["model", "plan", "plan_payload"])?;
    let model = ctx.model()?;
    let plan = load_plan(&ctx.path(&cfg.paths.plan))?;
    let report = bench_overhead(&model, &plan, tokens)?;
    let path = ctx.path(&cfg.paths.bench);
    write_json(&report, &path)?;
    ctx.record("bench", &path, &inputs)?;
    println!(
        "{} tokens: unsteered {:.0} ns/token, steered {:.0} ns/token, ratio {:.3}",
        report.n_tokens, report.unsteered_ns_per_token, report.steered_ns_per_token, report.ratio
    );
    Ok(())
}

fn report(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let names = ["model", "samples", "scores", "plan", "tradeoff", "sweep", "bench"];
    let inputs = ctx.inputs(&names)?;
    let scores = ctx.scores()?;
    let plan: crate::steering::PlanFile = read_json(&ctx.path(&cfg.paths.plan))?;
    let tradeoff: TradeoffReport = read_json(&with_ext(&ctx.path(&cfg.paths.tradeoff), "json"))?;
    let tables: Vec<AblationTable> = read_json(&with_ext(&ctx.path(&cfg.paths.sweep), "json"))?;
    let bench: BenchReport = read_json(&ctx.path(&cfg.paths.bench))?;

    let mut out = String::from("provenance\n");
    for (name, hash) in &inputs {
        out.push_str(&format!("  {name:<10} {hash}\n"));
    }
    let shown: Vec<String> = scores.scores.iter().map(|s| format!("{s:.4}")).collect();
    out.push_str(&format!(
        "\nattribution ({}) [{}], top layer {}\n",
        scores.mode.as_str(),
        shown.join(", "),
        scores.argmax()
    ));
    let mask: String = plan.mask.iter().map(|m| char::from(b'0' + m)).collect();
    let lam: Vec<String> = plan.intensities.iter().map(|x| format!("{x:.4}")).collect();
    out.push_str(&format!(
        "plan {} r_s {} lambda {} mask {mask} intensities [{}]\n\n",
        plan.backend.kind.as_str(),
        plan.r_s_effective,
        plan.lambda,
        lam.join(", ")
    ));
    out.push_str(&tradeoff.to_text());
    out.push('\n');
    for t in &tables {
        out.push_str(&t.to_text());
        out.push('\n');
    }
    out.push_str(&format!(
        "steering overhead {:.3}x over {} tokens\n",
        bench.ratio, bench.n_tokens
    ));
    let path = ctx.path(&cfg.paths.report);
    write_text(&out, &path)?;
    ctx.record("report", &path, &inputs)?;
    print!("{out}");
    Ok(())
}
