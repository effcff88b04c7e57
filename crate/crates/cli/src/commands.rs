use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use harpeft_core::data::{
    generate_recordings, load_corpus, lodo_folds, write_domain_csv, write_manifest, DomainEntry, Fold, Manifest,
    SyntheticSpec,
};
use harpeft_core::eval::{
    derive_seed, finetune_on_target, lodo_csv, pretrain_backbone, rank_csv, rank_plot_svg, rank_sweep, run_fold,
    split_csv, split_sweep, ExperimentConfig, LodoRecord, RankRow, Report, SplitRow,
};
use harpeft_core::finetune::Strategy;
use harpeft_core::io::{load_encoder, save_adapters, save_encoder, save_model};
use harpeft_core::numerics::Purpose;
use harpeft_core::Error;
use serde::Serialize;

use crate::config::{load_config, resolve_out_dir, RunManifest};
use crate::{Cli, Command, Failure, LoraArgs};

type Outcome = Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    let out = resolve_out_dir(cli.out.clone());
    if let Command::Generate { spec, domains, classes } = &cli.command {
        return generate(spec.as_deref(), *domains, *classes, cli.seed, &out);
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    cli.overrides.apply(&mut cfg, cli.seed);
    match cli.command {
        Command::Generate { .. } => unreachable!(),
        Command::Pretrain { data, held_out } => pretrain(&cfg, &data.data, &held_out, &out),
        Command::Finetune {
            checkpoint,
            data,
            target,
            strategy,
            lora,
            split,
        } => {
            if !strategy.uses_adapters() && (lora.rank.is_some() || lora.alpha.is_some()) {
                return Err(Failure::usage(format!("--rank and --alpha do not apply to strategy {strategy}")));
            }
            apply_lora(&mut cfg, &lora);
            finetune(&cfg, &checkpoint, &data.data, &target, strategy, split, &out)
        }
        Command::Lodo {
            data,
            strategies,
            lora,
            jobs,
        } => {
            apply_lora(&mut cfg, &lora);
            lodo(&cfg, &data.data, &strategies, jobs, &out)
        }
        Command::SweepRank {
            checkpoint,
            data,
            target,
            ranks,
            alpha,
        } => {
            apply_lora(&mut cfg, &LoraArgs { rank: None, alpha });
            sweep_rank(&cfg, &checkpoint, &data.data, &target, &ranks, &out)
        }
        Command::SweepSplit {
            checkpoint,
            data,
            target,
            fractions,
            strategies,
            lora,
        } => {
            apply_lora(&mut cfg, &lora);
            sweep_split(&cfg, &checkpoint, &data.data, &target, &fractions, &strategies, &out)
        }
        Command::Report { runs } => report(&cfg, &runs, &out),
    }
}

fn apply_lora(cfg: &mut ExperimentConfig, args: &LoraArgs) {
    if let Some(r) = args.rank {
        cfg.lora.rank = r;
    }
    if let Some(a) = args.alpha {
        cfg.lora.alpha = a;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn generate(spec_path: Option<&Path>, domains: usize, classes: usize, seed: Option<u64>, out: &Path) -> Outcome {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::separable(domains, classes, seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let mut manifest = RunManifest::new("generate", &spec, spec.seed, out);
    if let Some(p) = spec_path {
        manifest = manifest.input("spec", p);
    }
    manifest.write()?;

    let recordings = generate_recordings(&spec)?;
    let mut entries = Vec::new();
    for (shift, recs) in spec.domains.iter().zip(&recordings) {
        let file = format!("{}.csv", shift.name);
        write_domain_csv(&out.join(&file), recs)?;
        entries.push(DomainEntry {
            name: shift.name.clone(),
            path: PathBuf::from(file),
            sample_rate: shift.sample_rate,
        });
        eprintln!("{}: {} recordings at {} Hz", shift.name, recs.len(), shift.sample_rate);
    }
    write_manifest(&out.join("manifest.toml"), &Manifest { domains: entries })?;
    println!("{}", out.join("manifest.toml").display());
    Ok(())
}

/// The corpus folds and the position of `name` among them. The position
/// matches the fold index of a full LODO run, so derived seeds agree.
fn fold_for(data: &Path, name: &str) -> Result<(usize, Fold), Failure> {
    let bundles = load_corpus(data)?;
    let names: Vec<&str> = bundles.iter().map(|b| b.name.as_str()).collect();
    let Some(idx) = names.iter().position(|n| *n == name) else {
        return Err(Error::UnknownDomain {
            name: name.to_string(),
            available: names.join(", "),
        }
        .into());
    };
    let fold = lodo_folds(&bundles)?.swap_remove(idx);
    Ok((idx, fold))
}

fn pretrain(cfg: &ExperimentConfig, data: &Path, held_out: &str, out: &Path) -> Outcome {
    RunManifest::new("pretrain", cfg, cfg.seed, out).input("data", data).write()?;
    let (idx, fold) = fold_for(data, held_out)?;
    eprintln!("pretraining on {} windows (held out: {held_out})", fold.pretrain.len());
    let (encoder, log) = pretrain_backbone(&fold.pretrain, cfg, idx as u32)?;
    for (e, loss) in log.epoch_losses.iter().enumerate() {
        eprintln!("epoch {:>3}  mae loss {loss:.6}", e + 1);
    }
    save_encoder(&out.join("backbone.hpck"), &encoder)?;
    write_json(&out.join("pretrain_log.json"), &log)?;
    println!("{}", out.join("backbone.hpck").display());
    Ok(())
}

fn finetune(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data: &Path,
    target: &str,
    strategy: Strategy,
    split: f64,
    out: &Path,
) -> Outcome {
    RunManifest::new("finetune", cfg, cfg.seed, out)
        .input("checkpoint", checkpoint)
        .input("data", data)
        .write()?;
    let backbone = load_encoder(checkpoint)?;
    let (idx, fold) = fold_for(data, target)?;
    let f = idx as u32;
    let tc = harpeft_core::finetune::TrainConfig {
        train_fraction: split,
        ..cfg.train_config(strategy, f)
    };
    tc.validate()?;
    let run = finetune_on_target(&backbone, &fold.target, split, derive_seed(cfg.seed, Purpose::Split, f), &tc)?;
    for w in &run.log.warnings {
        eprintln!("warning: {w}");
    }
    let saved = if strategy.uses_adapters() {
        let p = out.join("adapters.hpck");
        save_adapters(&p, &run.model)?;
        p
    } else {
        let p = out.join("model.hpck");
        save_model(&p, &run.model)?;
        p
    };
    write_json(&out.join("metrics.json"), &run.metrics)?;
    write_json(&out.join("resources.json"), &run.log.resources)?;
    fs::write(out.join("train_log.jsonl"), run.log.to_json_lines()?)?;
    println!(
        "{target} {strategy}: accuracy {:.4}  macro-F1 {:.4}  ({})",
        run.metrics.accuracy,
        run.metrics.macro_f1,
        saved.display()
    );
    Ok(())
}

fn lodo(cfg: &ExperimentConfig, data: &Path, strategies: &[Strategy], jobs: usize, out: &Path) -> Outcome {
    if strategies.is_empty() {
        return Err(Failure::usage("no strategies requested"));
    }
    if jobs == 0 {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    RunManifest::new("lodo", cfg, cfg.seed, out).input("data", data).write()?;
    let folds = lodo_folds(&load_corpus(data)?)?;
    let records_dir = out.join("records");
    fs::create_dir_all(&records_dir)?;

    let results: Vec<(usize, Result<Vec<LodoRecord>, Error>)> = thread::scope(|s| {
        let workers: Vec<_> = (0..jobs.min(folds.len()))
            .map(|w| {
                let folds = &folds;
                s.spawn(move || {
                    (w..folds.len())
                        .step_by(jobs)
                        .map(|i| {
                            eprintln!("fold {i}: target {}", folds[i].target_domain);
                            (i, run_fold(i, &folds[i], strategies, cfg))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        workers.into_iter().flat_map(|h| h.join().expect("fold worker panicked")).collect()
    });

    let mut results = results;
    results.sort_by_key(|(i, _)| *i);
    let mut records = Vec::new();
    for (_, r) in results {
        records.extend(r?);
    }
    for r in &records {
        write_json(&records_dir.join(format!("fold{}-{}.json", r.fold, r.strategy)), r)?;
    }
    fs::write(out.join("lodo.csv"), lodo_csv(&records))?;
    let text = Report {
        lodo: records,
        ..Report::default()
    }
    .render_text();
    fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn sweep_rank(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path, target: &str, ranks: &[usize], out: &Path) -> Outcome {
    RunManifest::new("sweep-rank", cfg, cfg.seed, out)
        .input("checkpoint", checkpoint)
        .input("data", data)
        .write()?;
    let backbone = load_encoder(checkpoint)?;
    let (_, fold) = fold_for(data, target)?;
    let rows = rank_sweep(&backbone, &fold.target, ranks, cfg)?;
    write_json(&out.join("ranks.json"), &rows)?;
    fs::write(out.join("ranks.csv"), rank_csv(&rows))?;
    fs::write(out.join("rank_plot.svg"), rank_plot_svg(&rows))?;
    print!("{}", Report { ranks: rows, ..Report::default() }.render_text());
    Ok(())
}

fn sweep_split(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data: &Path,
    target: &str,
    fractions: &[f64],
    strategies: &[Strategy],
    out: &Path,
) -> Outcome {
    RunManifest::new("sweep-split", cfg, cfg.seed, out)
        .input("checkpoint", checkpoint)
        .input("data", data)
        .write()?;
    let backbone = load_encoder(checkpoint)?;
    let (_, fold) = fold_for(data, target)?;
    let rows = split_sweep(&backbone, &fold.target, fractions, strategies, cfg)?;
    write_json(&out.join("splits.json"), &rows)?;
    fs::write(out.join("splits.csv"), split_csv(&rows))?;
    print!("{}", Report { splits: rows, ..Report::default() }.render_text());
    Ok(())
}

/// (target, strategy) pairs absent from an otherwise complete grid.
fn missing_runs(records: &[LodoRecord]) -> Vec<String> {
    let targets: BTreeSet<(usize, &str)> = records.iter().map(|r| (r.fold, r.target_domain.as_str())).collect();
    let strategies: BTreeSet<Strategy> = records.iter().map(|r| r.strategy).collect();
    let have: BTreeSet<(usize, Strategy)> = records.iter().map(|r| (r.fold, r.strategy)).collect();
    let mut missing = Vec::new();
    for (fold, name) in &targets {
        for s in &strategies {
            if !have.contains(&(*fold, *s)) {
                missing.push(format!("fold{fold}-{s} ({name})"));
            }
        }
    }
    missing
}

fn report(cfg: &ExperimentConfig, runs: &Path, out: &Path) -> Outcome {
    if !runs.is_dir() {
        return Err(Failure::usage(format!("{} is not a directory", runs.display())));
    }
    RunManifest::new("report", cfg, cfg.seed, out).input("runs", runs).write()?;
    let mut lodo: Vec<LodoRecord> = Vec::new();
    let records_dir = runs.join("records");
    if records_dir.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&records_dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
        for p in paths {
            lodo.push(read_json(&p)?);
        }
    }
    lodo.sort_by_key(|a| (a.fold, a.strategy));
    let ranks: Vec<RankRow> = match runs.join("ranks.json") {
        p if p.is_file() => read_json(&p)?,
        _ => Vec::new(),
    };
    let splits: Vec<SplitRow> = match runs.join("splits.json") {
        p if p.is_file() => read_json(&p)?,
        _ => Vec::new(),
    };
    if lodo.is_empty() && ranks.is_empty() && splits.is_empty() {
        return Err(Failure::runtime(format!(
            "no results under {} (expected records/*.json, ranks.json or splits.json)",
            runs.display()
        )));
    }

    let missing = missing_runs(&lodo);
    if !lodo.is_empty() {
        fs::write(out.join("lodo.csv"), lodo_csv(&lodo))?;
    }
    if !ranks.is_empty() {
        fs::write(out.join("ranks.csv"), rank_csv(&ranks))?;
    }
    if !splits.is_empty() {
        fs::write(out.join("splits.csv"), split_csv(&splits))?;
    }
    let mut text = Report { lodo, ranks, splits }.render_text();
    if !missing.is_empty() {
        text.push_str("\nMissing runs:\n");
        for m in &missing {
            text.push_str(&format!("  {m}\n"));
        }
    }
    fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
