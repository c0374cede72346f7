use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;

use forge_core::consensus::{filter_consensus, CandidateSet};
use forge_core::curation::{apply_corrections, deficiency_stats, diff_report, ladder_report};
use forge_core::dataset::{
    load_dataset_with, load_traces_with, write_dataset, ActionKind, AgentTrace, Dataset, LoadOptions, Split,
};
use forge_core::grounding::{EvalConfig, Evaluator};
use forge_core::grpo::{
    run_seeded, stratified_sample, GaussRewardConfig, RewardMode, SamplerConfig, ToyInit, TrainingLog,
};
use forge_core::metrics::{evaluate_with, render_table};
use forge_core::review::{
    run_review, CannedClient, CorrectionProposal, HttpReviewerClient, ProposalStatus, ProposalStore, ReviewerClient,
    ReviewerClientConfig, RunOptions,
};

use crate::config::FileConfig;
use crate::{Cli, Command, Format, GlobalArgs, ReviewCommand, RewardArg, SplitArg, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Resolved global settings: flags over config file over defaults.
struct Ctx {
    global: GlobalArgs,
    file: FileConfig,
}

impl Ctx {
    fn load_opts(&self) -> LoadOptions {
        LoadOptions {
            lenient: self.global.lenient,
        }
    }

    fn dataset_path(&self) -> anyhow::Result<&Path> {
        self.global
            .dataset
            .as_deref()
            .ok_or_else(|| usage("--dataset is required for this command"))
    }

    fn dataset(&self) -> anyhow::Result<Dataset> {
        let path = self.dataset_path()?;
        Ok(load_dataset_with(path, self.load_opts())?)
    }

    fn traces(&self, dataset: &Dataset) -> anyhow::Result<Vec<AgentTrace>> {
        let path = self
            .global
            .traces
            .as_deref()
            .ok_or_else(|| usage("--traces is required for this command"))?;
        Ok(load_traces_with(path, dataset, self.load_opts())?)
    }

    fn evaluator(&self) -> Evaluator {
        self.global
            .evaluator
            .map(Evaluator::from)
            .or(self.file.eval.evaluator)
            .unwrap_or(Evaluator::Bbox)
    }

    fn eval_config(&self) -> anyhow::Result<EvalConfig> {
        let d = EvalConfig::default();
        let e = &self.file.eval;
        let cfg = EvalConfig {
            tau: self.global.tau.or(e.tau).unwrap_or(d.tau),
            fallback_radius: self
                .global
                .fallback_radius
                .or(e.fallback_radius)
                .unwrap_or(d.fallback_radius),
            boundary_inclusive: if self.global.boundary_exclusive {
                false
            } else {
                e.boundary_inclusive.unwrap_or(d.boundary_inclusive)
            },
            text_match: d.text_match,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }

    fn seed(&self) -> u64 {
        self.global.seed.or(self.file.seed).unwrap_or(0)
    }

    fn json(&self) -> bool {
        self.global.format == Format::JsonLines
    }
}

fn print_json_line<T: Serialize>(out: &mut impl Write, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.global.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let ctx = Ctx {
        global: cli.global,
        file,
    };
    if let Some(jobs) = ctx.global.jobs.or(ctx.file.jobs) {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();

    match cli.command {
        Command::Eval { averaging } => {
            let dataset = ctx.dataset()?;
            let traces = ctx.traces(&dataset)?;
            let reports = evaluate_with(
                &dataset,
                &traces,
                ctx.evaluator(),
                &ctx.eval_config()?,
                averaging.into(),
            )?;
            if ctx.json() {
                for r in reports.values() {
                    print_json_line(&mut out, r)?;
                }
            } else {
                writeln!(out, "evaluator: {}", ctx.evaluator())?;
                write!(out, "{}", render_table(&reports))?;
            }
        }
        Command::Filter { agents, out: path } => {
            let dataset = ctx.dataset()?;
            let traces = ctx.traces(&dataset)?;
            let set = filter_consensus(&dataset, &traces, &agents, ctx.evaluator(), &ctx.eval_config()?)?;
            match path {
                Some(p) => {
                    let mut w = create(&p)?;
                    set.write_jsonl(&mut w)?;
                    w.flush()?;
                    eprintln!(
                        "{} of {} episodes failed by all {} agents; written to {}",
                        set.candidates.len(),
                        dataset.len(),
                        agents.len(),
                        p.display()
                    );
                }
                None => set.write_jsonl(&mut out)?,
            }
        }
        Command::Review(ReviewCommand::Run {
            candidates,
            store,
            canned,
            endpoint,
            model,
            token_var,
            max_concurrent,
            max_retries,
            timeout,
        }) => {
            let dataset = ctx.dataset()?;
            let set = read_candidates(&candidates)?;
            let r = &ctx.file.reviewer;
            let d = ReviewerClientConfig::default();
            let client_cfg = ReviewerClientConfig {
                endpoint: endpoint.or_else(|| r.endpoint.clone()).unwrap_or(d.endpoint),
                model: model.or_else(|| r.model.clone()).unwrap_or(d.model),
                token_var: token_var.or_else(|| r.token_var.clone()),
                timeout_secs: timeout.or(r.timeout_secs).unwrap_or(d.timeout_secs),
                max_concurrent: max_concurrent.or(r.max_concurrent).unwrap_or(d.max_concurrent),
                max_retries: max_retries.or(r.max_retries).unwrap_or(d.max_retries),
            };
            client_cfg.validate().map_err(usage)?;
            let client: Box<dyn ReviewerClient> = match canned {
                Some(p) => {
                    let f = File::open(&p).with_context(|| format!("opening {}", p.display()))?;
                    Box::new(CannedClient::from_jsonl(BufReader::new(f)).map_err(anyhow::Error::msg)?)
                }
                None => Box::new(HttpReviewerClient::new(&client_cfg).map_err(usage)?),
            };
            let mut store = ProposalStore::open(&store)?;
            let opts = RunOptions {
                max_concurrent: client_cfg.max_concurrent,
                max_retries: client_cfg.max_retries,
                ..RunOptions::default()
            };
            let outcome = run_review(&set, &dataset, client.as_ref(), &mut store, &opts)?;
            if ctx.json() {
                print_json_line(&mut out, &outcome)?;
            } else {
                writeln!(
                    out,
                    "proposed {}, parse failures {}, skipped {}",
                    outcome.proposed.len(),
                    outcome.parse_failures.len(),
                    outcome.skipped.len()
                )?;
                for pf in &outcome.parse_failures {
                    writeln!(out, "  parse failure {}: {}", pf.episode_id, pf.error)?;
                }
            }
        }
        Command::Review(ReviewCommand::Serve {
            store,
            screenshots,
            bind,
        }) => {
            let dataset = ctx.dataset()?;
            let root = match screenshots {
                Some(r) => r,
                None => ctx
                    .dataset_path()?
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())
                    .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
            };
            let store = ProposalStore::open(&store)?;
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .context("starting the async runtime")?;
            rt.block_on(async {
                let server = forge_server::ReviewServer::bind(forge_server::AppState::new(store, dataset, root), &bind)
                    .await
                    .with_context(|| format!("binding {bind}"))?;
                eprintln!("review API listening on http://{}", server.local_addr()?);
                server.serve().await?;
                anyhow::Ok(())
            })?;
        }
        Command::Apply {
            proposals,
            out: path,
            skip_pending,
        } => {
            let dataset = ctx.dataset()?;
            let mut props = read_proposals(&proposals)?;
            let pending = props.iter().filter(|p| p.status == ProposalStatus::Pending).count();
            if skip_pending {
                props.retain(|p| p.status != ProposalStatus::Pending);
            } else if pending > 0 {
                bail!("{pending} proposals are still pending review (use --skip-pending to ignore them)");
            }
            let curated = apply_corrections(&dataset, &props)?;
            let mut w = create(&path)?;
            write_dataset(&curated, &mut w)?;
            w.flush()?;
            let applied = props
                .iter()
                .filter(|p| p.status.is_approved() && p.cause.is_deficiency())
                .count();
            eprintln!(
                "applied {applied} of {} proposals ({pending} pending{}); wrote {}",
                props.len() + if skip_pending { pending } else { 0 },
                if skip_pending { ", skipped" } else { "" },
                path.display()
            );
        }
        Command::Stats {
            proposals,
            accepted_only,
        } => {
            let dataset = ctx.dataset()?;
            let props = read_proposals(&proposals)?;
            let stats = deficiency_stats(&props, dataset.len(), accepted_only);
            if ctx.json() {
                print_json_line(&mut out, &stats)?;
            } else {
                write!(out, "{}", stats.render())?;
            }
        }
        Command::Diff {
            before,
            after,
            ladder,
            split,
        } => {
            let opts = ctx.load_opts();
            let before = load_dataset_with(&before, opts)?;
            let after = load_dataset_with(&after, opts)?;
            let traces = ctx.traces(&before)?;
            let split = split.map(|s| match s {
                SplitArg::Easy => Split::Easy,
                SplitArg::Hard => Split::Hard,
            });
            let cfg = ctx.eval_config()?;
            if ladder {
                let report = ladder_report(&before, &after, &traces, &cfg, split)?;
                if ctx.json() {
                    for row in &report.rows {
                        print_json_line(&mut out, row)?;
                    }
                } else {
                    write!(out, "{}", report.render())?;
                }
            } else {
                let report = diff_report(&before, &after, &traces, ctx.evaluator(), &cfg, split)?;
                if ctx.json() {
                    for row in &report.rows {
                        print_json_line(&mut out, row)?;
                    }
                } else {
                    write!(out, "{}", report.render())?;
                }
            }
        }
        Command::Sample { batch, target } => {
            let dataset = ctx.dataset()?;
            let mut pool: BTreeMap<ActionKind, Vec<(String, u32)>> = BTreeMap::new();
            for ep in dataset.episodes() {
                for s in &ep.steps {
                    pool.entry(s.canonical_action().kind())
                        .or_default()
                        .push((ep.episode_id.clone(), s.step_id));
                }
            }
            let batch_size = batch
                .or(ctx.file.sampler.batch_size)
                .ok_or_else(|| usage("--batch is required"))?;
            let target = match target {
                Some(t) => Some(parse_target(&t)?),
                None => ctx.file.sampler.target.clone(),
            };
            let cfg = match target {
                Some(target) => SamplerConfig { target, batch_size },
                None => SamplerConfig::uniform_over(&pool, batch_size),
            };
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let b = stratified_sample(&pool, &cfg, ctx.seed())?;
            #[derive(Serialize)]
            struct Item<'a> {
                kind: ActionKind,
                episode_id: &'a str,
                step_id: u32,
            }
            if ctx.json() {
                for (kind, (ep, sid)) in &b.items {
                    print_json_line(
                        &mut out,
                        &Item {
                            kind: *kind,
                            episode_id: ep,
                            step_id: *sid,
                        },
                    )?;
                }
            } else {
                for (kind, n) in &b.counts {
                    let flag = if b.with_replacement.contains(kind) {
                        " (with replacement)"
                    } else {
                        ""
                    };
                    writeln!(out, "{kind}: {n}{flag}")?;
                }
                writeln!(out, "tv distance: {:.6}", b.tv_distance(&cfg.target))?;
                for (kind, (ep, sid)) in &b.items {
                    writeln!(out, "{ep}\t{sid}\t{kind}")?;
                }
            }
        }
        Command::GrpoToy {
            reward,
            seeds,
            iters,
            out: path,
        } => {
            let mut cfg = ctx.file.grpo.clone().unwrap_or_default();
            if let Some(n) = iters {
                cfg.iterations = n;
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let toy = &ctx.file.toy;
            let spec = toy.env_spec();
            spec.validate().map_err(|e| usage(e.to_string()))?;
            let d = ToyInit::default();
            let init = ToyInit {
                distance: toy.init_distance.unwrap_or(d.distance),
                scale: toy.scale.unwrap_or(d.scale),
            };
            let gauss = toy
                .sigma
                .map(GaussRewardConfig::new)
                .transpose()
                .map_err(|e| usage(e.to_string()))?;
            let modes: &[RewardMode] = match reward {
                RewardArg::Gaussian => &[RewardMode::Gaussian],
                RewardArg::Binary => &[RewardMode::Binary],
                RewardArg::Both => &[RewardMode::Gaussian, RewardMode::Binary],
            };
            let base = ctx.seed();
            let jobs: Vec<(RewardMode, u64)> = (0..seeds)
                .flat_map(|i| modes.iter().map(move |&m| (m, base + i)))
                .collect();
            let logs: Vec<TrainingLog> = jobs
                .par_iter()
                .map(|&(mode, seed)| run_seeded(&spec, init, mode, &cfg, gauss.as_ref(), seed))
                .collect::<Result<_, _>>()?;
            if let Some(p) = &path {
                let mut w = create(p)?;
                write_toy_csv(&mut w, &logs)?;
                w.flush()?;
            }
            report_toy(&mut out, &logs, ctx.json())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_candidates(path: &Path) -> anyhow::Result<CandidateSet> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    CandidateSet::read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// A proposal store directory, or a JSON-lines file of proposals.
fn read_proposals(path: &Path) -> anyhow::Result<Vec<CorrectionProposal>> {
    if path.is_dir() {
        return Ok(ProposalStore::open(path)?.proposals());
    }
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: CorrectionProposal =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(p);
    }
    Ok(out)
}

fn parse_target(s: &str) -> anyhow::Result<BTreeMap<ActionKind, f64>> {
    let mut target = BTreeMap::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("target entry `{part}` is not kind=share")))?;
        let kind: ActionKind = k.trim().parse().map_err(|e: String| usage(e))?;
        let p: f64 = v
            .trim()
            .parse()
            .map_err(|_| usage(format!("share `{v}` for {kind} is not a number")))?;
        if target.insert(kind, p).is_some() {
            return Err(usage(format!("{kind} listed twice in --target")));
        }
    }
    Ok(target)
}

fn mode_name(m: RewardMode) -> &'static str {
    match m {
        RewardMode::Gaussian => "gaussian",
        RewardMode::Binary => "binary",
    }
}

fn write_toy_csv(w: &mut impl Write, logs: &[TrainingLog]) -> std::io::Result<()> {
    writeln!(w, "reward,seed,iteration,mean_distance,objective,reward_mean")?;
    for log in logs {
        for r in &log.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                mode_name(log.mode),
                log.seed,
                r.iteration,
                r.mean_distance,
                r.objective,
                r.reward_mean
            )?;
        }
    }
    Ok(())
}

fn report_toy(out: &mut impl Write, logs: &[TrainingLog], json: bool) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct Summary {
        reward: &'static str,
        seed: u64,
        initial_mean_distance: f64,
        final_mean_distance: f64,
    }
    for log in logs {
        let s = Summary {
            reward: mode_name(log.mode),
            seed: log.seed,
            initial_mean_distance: log.initial_mean_distance,
            final_mean_distance: log.final_mean_distance(),
        };
        if json {
            print_json_line(out, &s)?;
        } else {
            writeln!(
                out,
                "{:<8} seed {:>3}: {:.4} -> {:.4}",
                s.reward, s.seed, s.initial_mean_distance, s.final_mean_distance
            )?;
        }
    }
    let by_seed = |m: RewardMode| -> BTreeMap<u64, f64> {
        logs.iter()
            .filter(|l| l.mode == m)
            .map(|l| (l.seed, l.final_mean_distance()))
            .collect()
    };
    let (g, b) = (by_seed(RewardMode::Gaussian), by_seed(RewardMode::Binary));
    if !json && !g.is_empty() && !b.is_empty() {
        let wins = g.iter().filter(|(s, d)| b.get(s).is_some_and(|bd| *d < bd)).count();
        writeln!(out, "gaussian lower final distance in {wins}/{} seeds", g.len())?;
    }
    Ok(())
}
