use std::path::Path;

use gapkit::conesim::{
    cone_metrics, draw_seed, infonce_decomposed, paired_corpora, random_net_forward, train_toy_clip,
    variance_decomposition, CorpusSpec, RandomNetSpec, ToyClipConfig,
};
use gapkit::embedstore::{l2_normalize, write_dataset, DatasetMeta, Split};
use gapkit::geometry::{align, compute_gap, fit_pca, participation_ratio, pca_project, shift, AlignmentConfig, SplitSelector};
use gapkit::sweep::{probe_cell, run_sweep, SweepConfig, SweepReport, SWEEP_SCHEMA};
use gapkit::VERSION;
use rayon::prelude::*;
use serde_json::json;

use crate::args::*;
use crate::output::{cell, emit_csv, emit_json, load, CliResult, Failure, Log};

pub fn run(cli: Cli) -> CliResult {
    let log = Log {
        verbosity: if cli.quiet { -1 } else { cli.verbose as i8 },
    };
    match cli.command {
        Command::Analyze(a) => analyze(a, log),
        Command::Project(a) => project(a, log),
        Command::Align(a) => align_cmd(a, log),
        Command::Probe(a) => probe(a, log),
        Command::Sweep(a) => sweep(a, log),
        Command::Simulate(s) => match s {
            SimulateCommand::Cone(a) => cone(a, log),
            SimulateCommand::Variance(a) => variance(a, log),
            SimulateCommand::Infonce(a) => infonce(a, log),
            SimulateCommand::Toyclip(a) => toyclip(a, log),
        },
        Command::Report(a) => report(a, log),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn analyze(a: AnalyzeArgs, log: Log) -> CliResult {
    let split = SplitSelector::from(a.split);
    let ds = load(&a.data)?;
    log.info(format_args!("loaded {} pairs of dimension {}", ds.len(), ds.dim()));
    let g = compute_gap(&ds, split)?;
    let rows = split.rows(&ds);
    // Participation ratio of each modality's PCA spectrum; null below two rows.
    let effective_rank = |m: ndarray::ArrayView2<'_, f64>| {
        fit_pca(m.select(ndarray::Axis(0), &rows).view(), 1)
            .ok()
            .map(|p| participation_ratio(&p.spectrum))
    };
    emit_json(
        &json!({
            "schema": "gapctl.analyze/v1",
            "tool_version": VERSION,
            "dataset": ds.meta().name,
            "backbone": ds.meta().backbone,
            "split": split.name(),
            "n": g.n_samples,
            "dim": ds.dim(),
            "gap_norm": g.gap_norm,
            "r_image": g.r_image,
            "r_text": g.r_text,
            "mu_norms": { "image": g.mu_image_norm(), "text": g.mu_text_norm() },
            "effective_rank": { "image": effective_rank(ds.image()), "text": effective_rank(ds.text()) },
            "config": { "data": path_str(&a.data), "split": split.name() },
        }),
        a.out.as_ref(),
    )
}

fn project(a: ProjectArgs, log: Log) -> CliResult {
    let split = SplitSelector::from(a.split);
    let k = a.k as usize;
    let ds = load(&a.data)?;
    let p = pca_project(&ds, k, split)?;
    log.info(format_args!(
        "{k} components explain {:.4} of the pooled variance",
        p.explained_variance.iter().sum::<f64>() / p.total_variance
    ));
    let rows = split.rows(&ds);
    let mut header = vec!["modality".to_string(), "index".to_string()];
    header.extend((1..=k).map(|c| format!("pc{c}")));
    let mut out = Vec::with_capacity(2 * rows.len());
    for (modality, proj) in [("image", &p.projected_image), ("text", &p.projected_text)] {
        for (r, &idx) in proj.rows().into_iter().zip(&rows) {
            let mut line = vec![modality.to_string(), idx.to_string()];
            line.extend(r.iter().map(|v| v.to_string()));
            out.push(line);
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    emit_csv(&header, &out, a.out.as_ref())?;
    if let Some(path) = &a.summary {
        let ratio: Vec<f64> = p.explained_variance.iter().map(|v| v / p.total_variance).collect();
        let components: Vec<Vec<f64>> = p.components.rows().into_iter().map(|r| r.to_vec()).collect();
        emit_json(
            &json!({
                "schema": "gapctl.project/v1",
                "tool_version": VERSION,
                "dataset": ds.meta().name,
                "backbone": ds.meta().backbone,
                "split": split.name(),
                "n": rows.len(),
                "explained_variance": p.explained_variance,
                "explained_variance_ratio": ratio,
                "total_variance": p.total_variance,
                "participation_ratio": p.participation_ratio,
                "components": components,
                "mean": p.mean_used.to_vec(),
                "config": { "data": path_str(&a.data), "k": k, "split": split.name() },
            }),
            Some(path),
        )?;
    }
    Ok(())
}

fn align_cmd(a: AlignArgs, log: Log) -> CliResult {
    let ds = load(&a.data)?;
    let cfg = AlignmentConfig::from_train(&ds, a.lambda)?;
    let before = compute_gap(&ds, SplitSelector::Train)?;
    let train_rows = ds.split_indices(Split::Train);
    let pre = shift(&ds, &cfg)?.centroid_gap(Some(&train_rows));
    let mut out = align(&ds, &cfg)?;
    let after = compute_gap(&out, SplitSelector::Train)?;
    let mut creation = ds.meta().creation.clone();
    creation.insert("aligned_from".into(), json!(path_str(&a.data)));
    creation.insert("lambda".into(), json!(a.lambda));
    creation.insert("delta_split".into(), json!("train"));
    creation.insert("delta_norm".into(), json!(before.gap_norm));
    creation.insert("tool_version".into(), json!(VERSION));
    out.set_meta(DatasetMeta {
        name: ds.meta().name.clone(),
        backbone: ds.meta().backbone.clone(),
        creation,
    });
    write_dataset(&out, &a.out).map_err(|e| Failure::from(e).with_path(&a.out))?;
    log.info(format_args!("wrote {}", a.out.display()));
    emit_json(
        &json!({
            "schema": "gapctl.align/v1",
            "tool_version": VERSION,
            "dataset": ds.meta().name,
            "backbone": ds.meta().backbone,
            "lambda": a.lambda,
            "delta_norm": before.gap_norm,
            "shifted_gap_norm": pre.dot(&pre).sqrt(),
            "aligned_gap_norm": after.gap_norm,
            "r_image": { "before": before.r_image, "after": after.r_image },
            "r_text": { "before": before.r_text, "after": after.r_text },
            "output": path_str(&a.out),
            "config": { "data": path_str(&a.data), "lambda": a.lambda, "out": path_str(&a.out) },
        }),
        None,
    )
}

fn probe(a: ProbeArgs, log: Log) -> CliResult {
    let train = a.train.config();
    train.validate()?;
    let ds = load(&a.data)?;
    let gap = compute_gap(&ds, SplitSelector::Train)?;
    log.info(format_args!("train gap norm {:.6}", gap.gap_norm));
    let cell = probe_cell(&ds, &gap.delta, a.lambda, a.seed, &train)?;
    let h = &cell.history;
    emit_json(
        &json!({
            "schema": "gapctl.probe/v1",
            "tool_version": VERSION,
            "dataset": ds.meta().name,
            "backbone": ds.meta().backbone,
            "lambda": a.lambda,
            "seed": a.seed,
            "cell_seed": cell.cell_seed,
            "delta_norm": gap.gap_norm,
            "evaluation_split": "test",
            "overall_auc": cell.auc.overall_auc,
            "per_class_auc": cell.auc.per_class_auc,
            "excluded_classes": cell.auc.excluded_classes,
            "auc_aggregation": cell.auc.aggregation,
            "best_epoch": h.best_epoch,
            "epochs_run": h.epochs_run,
            "stopped_early": h.stopped_early,
            "train_rows": h.train_rows,
            "val_rows": h.val_rows,
            "val_carved": h.val_carved,
            "train_loss": h.train_loss,
            "val_loss": h.val_loss,
            "config": { "data": path_str(&a.data), "lambda": a.lambda, "seed": a.seed, "train": train },
        }),
        a.out.as_ref(),
    )
}

fn sweep(a: SweepArgs, log: Log) -> CliResult {
    let seeds = match &a.seed_list {
        Some(list) => list.0.clone(),
        None => (0..a.seeds).collect(),
    };
    let config = SweepConfig {
        lambda_grid: a.lambdas.0.clone(),
        seeds,
        train: a.train.config(),
    }
    .validated()?;
    let workers = match a.workers {
        Some(w) => w as usize,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let ds = load(&a.data)?;
    log.info(format_args!(
        "{} lambdas x {} seeds on {workers} workers",
        config.lambda_grid.len(),
        config.seeds.len()
    ));
    let report = run_sweep(&ds, config, workers)?;
    if !report.complete {
        let failed = report.records.iter().filter(|r| !r.is_ok()).count();
        log.warn(format_args!("{failed} of {} cells failed; see their `error` fields", report.records.len()));
    }
    write_report(&report, a.out.as_ref(), a.csv.as_ref(), a.aggregate_csv.as_ref())
}

fn write_report(
    report: &SweepReport,
    out: Option<&std::path::PathBuf>,
    csv: Option<&std::path::PathBuf>,
    aggregate_csv: Option<&std::path::PathBuf>,
) -> CliResult {
    if let Some(path) = csv {
        let rows: Vec<Vec<String>> = report
            .records
            .iter()
            .map(|r| vec![r.lambda.to_string(), r.seed.to_string(), cell(r.overall_auc)])
            .collect();
        emit_csv(&["lambda", "seed", "auc"], &rows, Some(path))?;
    }
    if let Some(path) = aggregate_csv {
        let rows: Vec<Vec<String>> = report
            .aggregates
            .iter()
            .map(|g| {
                vec![
                    g.lambda.to_string(),
                    cell(g.mean_auc),
                    cell(g.std_auc),
                    g.geometry.gap_norm.to_string(),
                    cell(g.geometry.r_image),
                    cell(g.geometry.r_text),
                    cell(g.geometry.aligned_gap_norm),
                    g.n_ok.to_string(),
                    g.n_failed.to_string(),
                ]
            })
            .collect();
        emit_csv(
            &[
                "lambda",
                "mean_auc",
                "std_auc",
                "gap_norm",
                "r_image",
                "r_text",
                "aligned_gap_norm",
                "n_ok",
                "n_failed",
            ],
            &rows,
            Some(path),
        )?;
    }
    emit_json(report, out)
}

fn report(a: ReportArgs, log: Log) -> CliResult {
    let bytes = match std::fs::read(&a.input) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Failure::validation(format!("cannot open {}: no such file (check --in)", a.input.display())))
        }
        Err(e) => return Err(Failure::runtime(format!("cannot read {}: {e}", a.input.display()))),
    };
    let mut report: SweepReport = serde_json::from_slice(&bytes)
        .map_err(|e| Failure::validation(format!("{} is not a sweep report: {e}", a.input.display())))?;
    if report.schema != SWEEP_SCHEMA {
        return Err(Failure::validation(format!(
            "{} has schema `{}`; expected `{SWEEP_SCHEMA}`",
            a.input.display(),
            report.schema
        )));
    }
    if let Err(e) = report.verify() {
        if a.check {
            return Err(e.into());
        }
        log.warn(format_args!("stored aggregates were stale and have been recomputed ({e})"));
    }
    report.aggregates = report.reaggregate()?;
    report.complete = report.records.iter().all(|r| r.is_ok());
    log.info(format_args!("{} records across {} lambdas", report.records.len(), report.aggregates.len()));
    write_report(&report, a.out.as_ref(), a.csv.as_ref(), a.aggregate_csv.as_ref())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn net_spec(net: &NetArgs, depth: usize, input_dim: usize, seed: u64) -> RandomNetSpec {
    RandomNetSpec {
        depth,
        width: net.width,
        input_dim,
        activation: net.activation.into(),
        init_scale: net.init_scale,
        init: net.init.into(),
        seed,
    }
}

fn cone(a: ConeArgs, log: Log) -> CliResult {
    if a.depths.0.is_empty() || a.replicates == 0 {
        return Err(Failure::validation("need at least one depth and one replicate"));
    }
    for &d in &a.depths.0 {
        net_spec(&a.net, d, a.input_dim, 0).validate()?;
    }
    // Replicates run in parallel; depths share inputs and weights, so deeper
    // nets extend shallower ones.
    let per_rep = (0..a.replicates)
        .into_par_iter()
        .map(|rep| {
            let seed = draw_seed(a.seed, rep);
            let inputs = CorpusSpec::gaussian(a.n, a.input_dim, seed).generate()?.samples;
            a.depths
                .0
                .iter()
                .map(|&depth| {
                    let out = random_net_forward(&net_spec(&a.net, depth, a.input_dim, seed), inputs.view())?;
                    Ok((depth, rep, seed, cone_metrics(out.view())?))
                })
                .collect::<gapkit::Result<Vec<_>>>()
        })
        .collect::<gapkit::Result<Vec<_>>>()?;
    let records: Vec<_> = per_rep.into_iter().flatten().collect();
    log.info(format_args!("{} replicates done", a.replicates));
    let summary: Vec<_> = a
        .depths
        .0
        .iter()
        .map(|&depth| {
            let of_depth: Vec<_> = records.iter().filter(|r| r.0 == depth).map(|r| r.3).collect();
            let mut cos: Vec<f64> = of_depth.iter().map(|m| m.mean_pairwise_cosine).collect();
            let mean_r = of_depth.iter().map(|m| m.r).sum::<f64>() / of_depth.len() as f64;
            json!({ "depth": depth, "median_cosine": median(&mut cos), "mean_r": mean_r })
        })
        .collect();
    if let Some(path) = &a.csv {
        let rows: Vec<Vec<String>> = records
            .iter()
            .map(|(d, rep, _, m)| vec![d.to_string(), rep.to_string(), m.r.to_string(), m.mean_pairwise_cosine.to_string()])
            .collect();
        emit_csv(&["depth", "replicate", "r", "mean_cosine"], &rows, Some(path))?;
    }
    let records: Vec<_> = records
        .iter()
        .map(|(d, rep, seed, m)| {
            json!({ "depth": d, "replicate": rep, "seed": seed, "r": m.r, "mean_pairwise_cosine": m.mean_pairwise_cosine, "pairs": m.pairs })
        })
        .collect();
    emit_json(
        &json!({
            "schema": "gapctl.simulate.cone/v1",
            "tool_version": VERSION,
            "config": {
                "depths": a.depths.0, "width": a.net.width, "input_dim": a.input_dim,
                "activation": gapkit::conesim::Activation::from(a.net.activation),
                "init": gapkit::conesim::WeightInit::from(a.net.init),
                "init_scale": a.net.init_scale, "n": a.n, "replicates": a.replicates, "seed": a.seed,
            },
            "summary": summary,
            "records": records,
        }),
        a.out.as_ref(),
    )
}

fn variance(a: VarianceArgs, log: Log) -> CliResult {
    if a.replicates == 0 {
        return Err(Failure::validation("need at least one replicate"));
    }
    if !(a.diversity_factor >= 0.0 && a.diversity_factor.is_finite()) {
        return Err(Failure::validation("--diversity-factor must be a non-negative number"));
    }
    net_spec(&a.net, a.depth, a.dim, 0).validate()?;
    let preset = match a.corpus {
        CorpusArg::Gaussian => CorpusSpec::gaussian,
        CorpusArg::Homogeneous => CorpusSpec::homogeneous,
        CorpusArg::Diverse => CorpusSpec::diverse,
    };
    let pairs = (0..a.replicates)
        .into_par_iter()
        .map(|rep| {
            let seed = draw_seed(a.seed, rep);
            let reference = preset(a.n, a.dim, seed);
            let scaled = reference.with_diversity_scaled(a.diversity_factor);
            let family = net_spec(&a.net, a.depth, a.dim, seed);
            let r = variance_decomposition(&family, &reference.generate()?, a.draws)?;
            let s = variance_decomposition(&family, &scaled.generate()?, a.draws)?;
            Ok([(rep, "reference", reference.diversity(), r), (rep, "scaled", scaled.diversity(), s)])
        })
        .collect::<gapkit::Result<Vec<_>>>()?;
    let lower = pairs.iter().filter(|[r, s]| s.3.data_term < r.3.data_term).count();
    let records: Vec<_> = pairs.into_iter().flatten().collect();
    log.info(format_args!("{} replicates done", a.replicates));
    if let Some(path) = &a.csv {
        let rows: Vec<Vec<String>> = records
            .iter()
            .map(|(rep, corpus, div, v)| {
                vec![
                    rep.to_string(),
                    corpus.to_string(),
                    div.to_string(),
                    v.data_term.to_string(),
                    v.weight_term.to_string(),
                    v.total.to_string(),
                ]
            })
            .collect();
        emit_csv(&["replicate", "corpus", "diversity", "data_term", "weight_term", "total"], &rows, Some(path))?;
    }
    let records: Vec<_> = records
        .iter()
        .map(|(rep, corpus, div, v)| json!({ "replicate": rep, "corpus": corpus, "diversity": div, "decomposition": v }))
        .collect();
    emit_json(
        &json!({
            "schema": "gapctl.simulate.variance/v1",
            "tool_version": VERSION,
            "config": {
                "corpus": format!("{:?}", a.corpus).to_lowercase(), "n": a.n, "dim": a.dim, "depth": a.depth,
                "width": a.net.width,
                "activation": gapkit::conesim::Activation::from(a.net.activation),
                "init": gapkit::conesim::WeightInit::from(a.net.init),
                "init_scale": a.net.init_scale, "draws": a.draws, "replicates": a.replicates,
                "diversity_factor": a.diversity_factor, "seed": a.seed,
            },
            "scaled_data_term_lower": lower,
            "records": records,
        }),
        a.out.as_ref(),
    )
}

fn infonce(a: InfonceArgs, _log: Log) -> CliResult {
    if !(a.pair_noise >= 0.0 && a.pair_noise.is_finite()) {
        return Err(Failure::validation("--pair-noise must be a non-negative number"));
    }
    let base = CorpusSpec::gaussian(a.batch, a.dim, a.seed).generate()?.samples;
    let noise = CorpusSpec::gaussian(a.batch, a.dim, draw_seed(a.seed, 1)).generate()?.samples;
    let image = l2_normalize(base.view())?;
    let text = l2_normalize((&image + &(noise * a.pair_noise)).view())?;
    let b = infonce_decomposed(image.view(), text.view(), a.temperature)?;
    if let Some(path) = &a.csv {
        let rows: Vec<Vec<String>> = (0..b.batch_size)
            .map(|i| {
                vec![
                    i.to_string(),
                    b.per_sample_total[i].to_string(),
                    b.per_sample_attraction[i].to_string(),
                    b.per_sample_repulsion[i].to_string(),
                ]
            })
            .collect();
        emit_csv(&["index", "total", "attraction", "repulsion"], &rows, Some(path))?;
    }
    emit_json(
        &json!({
            "schema": "gapctl.simulate.infonce/v1",
            "tool_version": VERSION,
            "config": { "batch": a.batch, "dim": a.dim, "temperature": a.temperature, "pair_noise": a.pair_noise, "seed": a.seed },
            "result": b,
        }),
        a.out.as_ref(),
    )
}

fn toyclip(a: ToyclipArgs, log: Log) -> CliResult {
    let tower = RandomNetSpec {
        depth: a.depth,
        width: a.width,
        input_dim: a.dim,
        activation: a.activation.into(),
        init_scale: 1.0,
        init: a.init.into(),
        seed: 0,
    };
    let image_seed = a.seed.wrapping_mul(2).wrapping_add(1);
    let cfg = ToyClipConfig {
        image_encoder: tower.with_seed(image_seed),
        text_encoder: tower.with_seed(image_seed.wrapping_add(1)),
        steps: a.steps,
        temperature: a.temperature,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        log_every: a.log_every,
        seed: a.seed,
        linear_head: !a.no_linear_head,
    };
    cfg.validate()?;
    let latent = CorpusSpec::diverse(a.n, a.latent_dim, a.latent_seed);
    let (image, text) = paired_corpora(&latent, a.dim, a.noise)?;
    log.info(format_args!("training {} steps on {} pairs", a.steps, a.n));
    let traj = train_toy_clip(&image, &text, &cfg)?;
    if let Some(path) = &a.csv {
        let rows: Vec<Vec<String>> = traj
            .entries
            .iter()
            .map(|e| {
                vec![
                    e.step.to_string(),
                    e.gap_norm.to_string(),
                    e.r_image.to_string(),
                    e.r_text.to_string(),
                    e.loss.to_string(),
                ]
            })
            .collect();
        emit_csv(&["step", "gap_norm", "r_image", "r_text", "loss"], &rows, Some(path))?;
    }
    emit_json(
        &json!({
            "schema": "gapctl.simulate.toyclip/v1",
            "tool_version": VERSION,
            "config": { "corpus": latent, "input_dim": a.dim, "noise": a.noise, "training": cfg },
            "initial": traj.initial(),
            "final": traj.last(),
            "trajectory": traj.entries,
        }),
        a.out.as_ref(),
    )
}
