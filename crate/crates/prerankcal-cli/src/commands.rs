//! Implementations of the four subcommands plus the run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use prerankcal::data::{load_csv, split, synth, Dataset, SplitSpec, SynthKind};
use prerankcal::error::{Error, Result};
use prerankcal::metrics::{
    holm_correct, null_pce_distribution_mean, p_value, pce, reliability_curve, CalibrationReport,
    NullDistribution, PreRankSummary, QuantileGrid,
};
use prerankcal::model::{load_checkpoint, save_checkpoint, MixtureNetwork, NetworkConfig};
use prerankcal::pit::{pit_batch, PitBatch, PitBatchConfig, PitMode};
use prerankcal::preranks::PreRankSpec;
use prerankcal::scoring::nll;
use prerankcal::training::{
    mean_energy_score, train, tune_lambda, Composition, PreRankSel, RegularizerConfig, ScoreKind,
    TrainConfig,
};

use crate::{Command, DataOpts, FitOpts, NetOpts, RegOpts};

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    artifacts: Vec<String>,
    wall_clock_secs: f64,
    version: String,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

struct CommandOutput {
    config: serde_json::Value,
    artifacts: Vec<PathBuf>,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidParameter(_) | Error::MissingContext { .. } | Error::DimensionMismatch { .. } => 2,
        Error::NanLoss { .. } => 4,
        _ => 3,
    }
}

pub fn dispatch(cmd: Command) -> i32 {
    let started = Instant::now();
    let (out_dir, seed, result) = match &cmd {
        Command::Train { data, reg, net, fit } => (
            data.out.clone(),
            data.seed,
            cmd_train(data, reg, net, fit),
        ),
        Command::Evaluate {
            data,
            checkpoint,
            preranks,
            n_sims,
            samples,
            tau,
            grid,
            lag,
        } => (
            data.out.clone(),
            data.seed,
            cmd_evaluate(data, checkpoint, preranks, *n_sims, *samples, *tau, *grid, *lag),
        ),
        Command::Nulltest {
            data,
            pit_file,
            checkpoint,
            n_sims,
            runs,
            preranks,
            samples,
            tau,
            grid,
            lag,
        } => (
            data.out.clone(),
            data.seed,
            cmd_nulltest(
                data, pit_file, checkpoint, *n_sims, *runs, preranks, *samples, *tau, *grid, *lag,
            ),
        ),
        Command::Tune {
            data,
            reg,
            net,
            fit,
            grid_lambdas,
        } => (
            data.out.clone(),
            data.seed,
            cmd_tune(data, reg, net, fit, grid_lambdas),
        ),
    };

    let command_line: Vec<String> = std::env::args().collect();
    let (status, error, config, artifacts, code) = match &result {
        Ok(out) => (
            "ok".to_string(),
            None,
            out.config.clone(),
            out.artifacts.iter().map(|p| p.display().to_string()).collect(),
            0,
        ),
        Err(e) => (
            "error".to_string(),
            Some(e.to_string()),
            serde_json::Value::Null,
            Vec::new(),
            exit_code(e),
        ),
    };
    let manifest = RunManifest {
        command: command_line.join(" "),
        config,
        seeds: vec![seed],
        artifacts,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        status,
        error,
    };
    if std::fs::create_dir_all(&out_dir).is_ok() {
        if let Ok(json) = serde_json::to_string_pretty(&manifest) {
            let _ = std::fs::write(out_dir.join("manifest.json"), json);
        }
    }
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    code
}

fn parse_synth_spec(spec: &str) -> Result<(SynthKind, usize)> {
    let (kind, n) = spec
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("--synth expects kind:n, got `{spec}`")))?;
    let kind: SynthKind = kind.parse()?;
    let n: usize = n
        .parse()
        .map_err(|_| Error::invalid(format!("invalid synthetic size `{n}`")))?;
    Ok((kind, n))
}

fn resolve_dataset(opts: &DataOpts) -> Result<Dataset> {
    match (&opts.data, &opts.synth) {
        (Some(path), None) => load_csv(path, "x_", "y_"),
        (None, Some(spec)) => {
            let (kind, n) = parse_synth_spec(spec)?;
            Ok(synth(kind, n, opts.seed))
        }
        (None, None) => Err(Error::invalid("one of --data or --synth is required")),
        (Some(_), Some(_)) => Err(Error::invalid("--data conflicts with --synth")),
    }
}

fn parse_hidden(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("invalid hidden width `{s}`")))
        })
        .collect()
}

fn parse_score(s: &str) -> ScoreKind {
    match s {
        "energy" => ScoreKind::Energy,
        _ => ScoreKind::Nll,
    }
}

/// Parses a pre-rank token into the training-side selection. A bare
/// `marginal` or `pca` denotes the averaged family.
fn parse_prerank_sel(token: &str) -> Result<PreRankSel> {
    let (name, index) = match token.split_once(':') {
        Some((n, i)) => {
            let idx = i
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("invalid pre-rank index `{i}`")))?;
            (n, Some(idx))
        }
        None => (token, None),
    };
    match (name, index) {
        ("marginal", None) => Ok(PreRankSel::MarginalMean),
        ("marginal", Some(d)) => Ok(PreRankSel::One(PreRankSpec::Marginal { d })),
        ("location", None) => Ok(PreRankSel::One(PreRankSpec::Location)),
        ("scale", None) => Ok(PreRankSel::One(PreRankSpec::Scale)),
        ("dependency", h) => Ok(PreRankSel::One(PreRankSpec::Dependency {
            h: h.unwrap_or(1),
        })),
        ("pca", None) => Ok(PreRankSel::PcaMean),
        ("pca", Some(d)) => Ok(PreRankSel::One(PreRankSpec::Pca { d })),
        ("hdr", None) => Ok(PreRankSel::One(PreRankSpec::Hdr)),
        ("copula", None) => Ok(PreRankSel::One(PreRankSpec::Copula)),
        _ => Err(Error::invalid(format!("unknown pre-rank token `{token}`"))),
    }
}

fn parse_compose(s: &str) -> Composition {
    match s {
        "marginal" => Composition::MarginalPlus,
        "pca" => Composition::PcaPlus,
        _ => Composition::Plain,
    }
}

/// Expands an evaluation token into its family members: `marginal` and
/// `pca` average over all output components.
fn expand_eval_token(token: &str, dim: usize, lag: usize) -> Result<(String, Vec<PreRankSpec>)> {
    let specs = match token {
        "marginal" => (1..=dim).map(|d| PreRankSpec::Marginal { d }).collect(),
        "location" => vec![PreRankSpec::Location],
        "scale" => vec![PreRankSpec::Scale],
        "dependency" => vec![PreRankSpec::Dependency { h: lag }],
        "pca" => (1..=dim).map(|d| PreRankSpec::Pca { d }).collect(),
        "hdr" => vec![PreRankSpec::Hdr],
        "copula" => vec![PreRankSpec::Copula],
        other => return Err(Error::invalid(format!("unknown pre-rank token `{other}`"))),
    };
    for s in &specs {
        s.validate(dim)?;
    }
    Ok((token.to_string(), specs))
}

fn reg_config_from_opts(opts: &RegOpts) -> Result<RegularizerConfig> {
    let mut reg = RegularizerConfig::new(opts.lambda, parse_prerank_sel(&opts.prerank)?);
    reg.composition = parse_compose(&opts.compose);
    reg.sample_count = opts.samples;
    reg.tau = opts.tau;
    reg.grid_size = opts.grid;
    reg.exponent = opts.exponent;
    reg.pca_threshold = opts.pca_threshold;
    Ok(reg)
}

fn write_history_csv(path: &Path, history: &prerankcal::training::TrainHistory) -> Result<()> {
    let mut buf = String::from("epoch,train_loss,val_score");
    if let Some(first) = history.epochs.first() {
        for (group, _) in &first.val_pce {
            buf.push_str(&format!(",val_pce_{group}"));
        }
    }
    buf.push('\n');
    for row in &history.epochs {
        buf.push_str(&format!("{},{},{}", row.epoch, row.train_loss, row.val_score));
        for (_, v) in &row.val_pce {
            buf.push_str(&format!(",{v}"));
        }
        buf.push('\n');
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn cmd_train(
    data_opts: &DataOpts,
    reg_opts: &RegOpts,
    net_opts: &NetOpts,
    fit: &FitOpts,
) -> std::result::Result<CommandOutput, Error> {
    let dataset = resolve_dataset(data_opts)?;
    if dataset.rejected_rows > 0 {
        eprintln!("warning: rejected {} malformed rows", dataset.rejected_rows);
    }
    let (train_data, val_data, _test) = split(&dataset, &SplitSpec::new(data_opts.seed, data_opts.run_index))?;
    let net = NetworkConfig::new(
        train_data.feature_dim(),
        train_data.target_dim(),
        net_opts.components,
    )
    .with_hidden(parse_hidden(&net_opts.hidden)?);
    let reg = reg_config_from_opts(reg_opts)?;
    let config = TrainConfig {
        learning_rate: fit.lr,
        batch_size: fit.batch,
        max_epochs: fit.epochs,
        patience: fit.patience,
        seed: data_opts.seed,
        score: parse_score(&fit.score),
        eval_samples: 100,
    };
    let outcome = train(&net, &config, &reg, &train_data, &val_data)?;

    std::fs::create_dir_all(&data_opts.out)?;
    let ckpt_path = data_opts.out.join("checkpoint.json");
    save_checkpoint(&ckpt_path, &outcome.network)?;
    let history_path = data_opts.out.join("history.csv");
    write_history_csv(&history_path, &outcome.history)?;

    let config_echo = serde_json::json!({
        "network": net,
        "regularizer": reg,
        "train": config,
        "run_index": data_opts.run_index,
        "best_epoch": outcome.history.best_epoch,
        "val_energy_score": outcome.val_energy_score,
        "val_pce_main": outcome.val_pce_main,
    });
    println!(
        "trained {} epochs; best epoch {}; val score {:.6}",
        outcome.history.epochs.len(),
        outcome.history.best_epoch,
        outcome.history.epochs[outcome.history.best_epoch].val_score
    );
    Ok(CommandOutput {
        config: config_echo,
        artifacts: vec![ckpt_path, history_path],
    })
}

/// Per-token PIT batches with shared per-row clouds (one seed for all
/// tokens), the family-averaged PCE, and the pooled PIT values.
fn family_pits(
    network: &MixtureNetwork,
    xs: &[&[f64]],
    ys: &[&[f64]],
    specs: &[PreRankSpec],
    cfg: &PitBatchConfig,
    grid: &QuantileGrid,
) -> Result<(f64, PitBatch)> {
    let mut total_pce = 0.0;
    let mut pooled = Vec::new();
    for &spec in specs {
        let batch = pit_batch(spec, network, xs, ys, cfg)?;
        total_pce += pce(&batch, grid)?;
        pooled.extend_from_slice(&batch.pit_values);
    }
    Ok((
        total_pce / specs.len() as f64,
        PitBatch {
            pit_values: pooled,
            mode: cfg.mode,
            prerank: specs[0],
            sample_count: cfg.sample_count,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    data_opts: &DataOpts,
    checkpoint: &Path,
    preranks: &str,
    n_sims: usize,
    samples: usize,
    tau: f64,
    grid_size: usize,
    lag: usize,
) -> std::result::Result<CommandOutput, Error> {
    if n_sims == 0 {
        return Err(Error::invalid("--n-sims must be at least 1"));
    }
    let network = load_checkpoint(checkpoint)?;
    let dataset = resolve_dataset(data_opts)?;
    if dataset.is_empty() {
        return Err(Error::UndefinedMetric("evaluation needs test rows"));
    }
    let (_train, _val, test) = split(&dataset, &SplitSpec::new(data_opts.seed, data_opts.run_index))?;
    if test.feature_dim() != network.config.input_dim || test.target_dim() != network.config.output_dim
    {
        return Err(Error::DimensionMismatch {
            expected: network.config.input_dim,
            got: test.feature_dim(),
        });
    }
    let xs = test.feature_rows();
    let ys = test.target_rows();
    let grid = QuantileGrid::new(grid_size)?;
    let cfg = PitBatchConfig {
        sample_count: samples,
        tau,
        mode: PitMode::Hard,
        seed: data_opts.seed,
    };

    let tokens: Vec<&str> = preranks.split(',').map(|s| s.trim()).collect();
    let mut nulls: std::collections::HashMap<usize, NullDistribution> = Default::default();
    let mut entries: Vec<(String, f64, f64, Vec<(f64, f64)>)> = Vec::new();
    for token in &tokens {
        let (name, specs) = expand_eval_token(token, test.target_dim(), lag)?;
        let (family_pce, pooled) = family_pits(&network, &xs, &ys, &specs, &cfg, &grid)?;
        let null = nulls.entry(specs.len()).or_insert_with(|| {
            null_pce_distribution_mean(test.len(), &grid, n_sims, specs.len(), data_opts.seed ^ 0x9e37)
                .expect("valid null parameters")
        });
        let p = p_value(family_pce, null);
        let reliability = reliability_curve(&pooled, &grid)?;
        entries.push((name, family_pce, p, reliability));
    }
    let raw_p: Vec<f64> = entries.iter().map(|e| e.2).collect();
    let holm = holm_correct(&raw_p);

    let mut total_nll = 0.0;
    for i in 0..test.len() {
        total_nll += nll(&network.forward(xs[i])?, ys[i])?;
    }
    let mean_nll = total_nll / test.len() as f64;
    let energy = mean_energy_score(&network, &xs, &ys, 100, data_opts.seed ^ 0x517c)?;

    let report = CalibrationReport {
        nll: mean_nll,
        energy_score: energy,
        preranks: entries
            .iter()
            .zip(&holm)
            .map(|((name, pce_v, p, reliability), hp)| PreRankSummary {
                prerank: name.clone(),
                pce: *pce_v,
                p_value: *p,
                holm_p: *hp,
                reliability: reliability.clone(),
            })
            .collect(),
    };

    std::fs::create_dir_all(&data_opts.out)?;
    let report_path = data_opts.out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    let mut artifacts = vec![report_path];
    for summary in &report.preranks {
        let path = data_opts.out.join(format!("reliability_{}.csv", summary.prerank));
        let mut buf = String::from("alpha,empirical_cdf\n");
        for (alpha, cdf) in &summary.reliability {
            buf.push_str(&format!("{alpha},{cdf}\n"));
        }
        std::fs::write(&path, buf)?;
        artifacts.push(path);
    }
    for summary in &report.preranks {
        println!(
            "{:<12} pce={:.5} p={:.5} holm_p={:.5}",
            summary.prerank, summary.pce, summary.p_value, summary.holm_p
        );
    }
    println!("nll={mean_nll:.5} energy_score={energy:.5}");

    let config_echo = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "preranks": tokens,
        "n_sims": n_sims,
        "samples": samples,
        "tau": tau,
        "grid": grid_size,
        "run_index": data_opts.run_index,
        "test_rows": test.len(),
    });
    Ok(CommandOutput {
        config: config_echo,
        artifacts,
    })
}

#[derive(Serialize)]
struct NulltestRow {
    prerank: String,
    observed_pce: f64,
    p_value: f64,
    holm_p: f64,
    n_test: usize,
}

#[allow(clippy::too_many_arguments)]
fn cmd_nulltest(
    data_opts: &DataOpts,
    pit_file: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    n_sims: usize,
    runs: u32,
    preranks: &str,
    samples: usize,
    tau: f64,
    grid_size: usize,
    lag: usize,
) -> std::result::Result<CommandOutput, Error> {
    if n_sims == 0 {
        return Err(Error::invalid("--n-sims must be at least 1"));
    }
    if runs == 0 {
        return Err(Error::invalid("--runs must be at least 1"));
    }
    let grid = QuantileGrid::new(grid_size)?;
    let null_seed = data_opts.seed ^ 0x9e37;

    // Observed statistics: (token, pce, n_test, runs_per_statistic).
    let observed: Vec<(String, f64, usize, usize)> = if let Some(path) = pit_file {
        let mut reader = csv::ReaderBuilder::new().from_path(path)?;
        let headers = reader.headers()?.clone();
        let pr_col = headers.iter().position(|h| h == "prerank").ok_or_else(|| {
            Error::Format("pit file needs a `prerank` column".to_string())
        })?;
        let pit_col = headers
            .iter()
            .position(|h| h == "pit")
            .ok_or_else(|| Error::Format("pit file needs a `pit` column".to_string()))?;
        let mut by_token: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for record in reader.records() {
            let record = record?;
            let token = record
                .get(pr_col)
                .ok_or_else(|| Error::Format("missing prerank cell".to_string()))?
                .to_string();
            let pit: f64 = record
                .get(pit_col)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("missing or invalid pit cell".to_string()))?;
            if !(0.0..=1.0).contains(&pit) {
                return Err(Error::Format(format!("pit value {pit} outside [0, 1]")));
            }
            by_token.entry(token).or_default().push(pit);
        }
        by_token
            .into_iter()
            .map(|(token, pits)| {
                let batch = PitBatch {
                    pit_values: pits,
                    mode: PitMode::Hard,
                    prerank: PreRankSpec::Location,
                    sample_count: 0,
                };
                let n = batch.len();
                Ok((token, pce(&batch, &grid)?, n, 1))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let ckpt = checkpoint
            .as_ref()
            .ok_or_else(|| Error::invalid("nulltest needs --pit-file or --checkpoint"))?;
        let network = load_checkpoint(ckpt)?;
        let dataset = resolve_dataset(data_opts)?;
        if dataset.is_empty() {
            return Err(Error::UndefinedMetric("nulltest needs test rows"));
        }
        let tokens: Vec<&str> = preranks.split(',').map(|s| s.trim()).collect();
        let mut acc: Vec<(String, f64, usize, usize)> = Vec::new();
        for (r, run_index) in (1..=runs).enumerate() {
            let (_tr, _va, test) = split(&dataset, &SplitSpec::new(data_opts.seed, run_index))?;
            let xs = test.feature_rows();
            let ys = test.target_rows();
            let cfg = PitBatchConfig {
                sample_count: samples,
                tau,
                mode: PitMode::Hard,
                seed: prerankcal::seeds::split(data_opts.seed, run_index as u64),
            };
            for (t, token) in tokens.iter().enumerate() {
                let (name, specs) = expand_eval_token(token, test.target_dim(), lag)?;
                let (family_pce, _) = family_pits(&network, &xs, &ys, &specs, &cfg, &grid)?;
                if r == 0 {
                    acc.push((name, family_pce, test.len(), runs as usize * specs.len()));
                } else {
                    acc[t].1 += family_pce;
                }
            }
        }
        for entry in acc.iter_mut() {
            entry.1 /= runs as f64;
        }
        acc
    };

    let mut nulls: std::collections::HashMap<(usize, usize), NullDistribution> = Default::default();
    let mut rows: Vec<NulltestRow> = Vec::new();
    for (token, observed_pce, n_test, runs_per_stat) in &observed {
        let null = nulls
            .entry((*n_test, *runs_per_stat))
            .or_insert_with(|| {
                null_pce_distribution_mean(*n_test, &grid, n_sims, *runs_per_stat, null_seed)
                    .expect("valid null parameters")
            });
        rows.push(NulltestRow {
            prerank: token.clone(),
            observed_pce: *observed_pce,
            p_value: p_value(*observed_pce, null),
            holm_p: 0.0,
            n_test: *n_test,
        });
    }
    let raw: Vec<f64> = rows.iter().map(|r| r.p_value).collect();
    for (row, hp) in rows.iter_mut().zip(holm_correct(&raw)) {
        row.holm_p = hp;
    }

    std::fs::create_dir_all(&data_opts.out)?;
    let path = data_opts.out.join("nulltest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&rows)?)?;
    println!("{:<12} {:>10} {:>10} {:>10} {:>8}", "prerank", "pce", "p", "holm_p", "n");
    for row in &rows {
        println!(
            "{:<12} {:>10.5} {:>10.5} {:>10.5} {:>8}",
            row.prerank, row.observed_pce, row.p_value, row.holm_p, row.n_test
        );
    }
    let config_echo = serde_json::json!({
        "n_sims": n_sims,
        "runs": runs,
        "grid": grid_size,
        "mode": if pit_file.is_some() { "pit_file" } else { "checkpoint" },
    });
    Ok(CommandOutput {
        config: config_echo,
        artifacts: vec![path],
    })
}

fn cmd_tune(
    data_opts: &DataOpts,
    reg_opts: &RegOpts,
    net_opts: &NetOpts,
    fit: &FitOpts,
    grid_lambdas: &str,
) -> std::result::Result<CommandOutput, Error> {
    let lambdas: Vec<f64> = grid_lambdas
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("invalid lambda `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = resolve_dataset(data_opts)?;
    let (train_data, val_data, _test) = split(&dataset, &SplitSpec::new(data_opts.seed, data_opts.run_index))?;
    let net = NetworkConfig::new(
        train_data.feature_dim(),
        train_data.target_dim(),
        net_opts.components,
    )
    .with_hidden(parse_hidden(&net_opts.hidden)?);
    let reg = reg_config_from_opts(reg_opts)?;
    let config = TrainConfig {
        learning_rate: fit.lr,
        batch_size: fit.batch,
        max_epochs: fit.epochs,
        patience: fit.patience,
        seed: data_opts.seed,
        score: parse_score(&fit.score),
        eval_samples: 100,
    };
    let report = tune_lambda(&lambdas, &net, &config, &reg, &train_data, &val_data)?;

    std::fs::create_dir_all(&data_opts.out)?;
    let path = data_opts.out.join("tune.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "{:<10} {:>12} {:>12} {:>10}",
        "lambda", "val_pce", "val_es", "qualifies"
    );
    for e in &report.entries {
        println!(
            "{:<10} {:>12.6} {:>12.6} {:>10}",
            e.lambda, e.val_pce, e.val_energy_score, e.qualifies
        );
    }
    println!(
        "reference_es={:.6} es_budget={:.6} selected={}",
        report.reference_es, report.es_budget, report.selected
    );
    if report.entries.len() == 1 {
        println!("note: degenerate single-point grid; selection is trivially lambda=0");
    }
    let config_echo = serde_json::json!({
        "grid_lambdas": lambdas,
        "regularizer": reg,
        "selected": report.selected,
        "reference_es": report.reference_es,
        "es_budget": report.es_budget,
    });
    Ok(CommandOutput {
        config: config_echo,
        artifacts: vec![path],
    })
}
