//! Trains every (variant, seed) combination and aggregates the results.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mmt_core::train::{mean_sd, Trainer};
use mmt_core::{Model, RunVariant};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::pipeline::{Corpus, TextPipeline};

#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub variant: RunVariant,
    pub seed: u64,
    pub steps: usize,
    pub bleu: f64,
    pub ambiguous: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub variant: RunVariant,
    pub runs: usize,
    pub bleu: (f64, f64),
    pub ambiguous: Option<(f64, f64)>,
}

/// Worker count from `MMT_THREADS`, else the available parallelism.
pub fn threads_from_env() -> usize {
    std::env::var("MMT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One training run, returning the best dev evaluation.
pub fn train_once(cfg: &ExperimentConfig, text: &TextPipeline, train: &Corpus, dev: &Corpus) -> Result<GridRun> {
    let mc = cfg.model_config(text.src_vocab.len(), text.tgt_vocab.len());
    let images = mc.uses_images();
    let model = Model::new(mc, cfg.train.seed)?;
    let train_d = text.dataset(train, images)?;
    let dev_d = text.dataset(dev, images)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), text.tgt_vocab.clone())?;
    let out = trainer.run(&train_d, &dev_d, |_, _| Ok::<_, Error>(()))?;
    Ok(GridRun { variant: cfg.variant, seed: cfg.train.seed, steps: out.steps, bleu: out.best.bleu, ambiguous: out.best.ambiguous_accuracy })
}

/// Runs the grid on at most `threads` workers. Results come back in
/// (variant, seed) order regardless of scheduling.
pub fn run_grid(
    cfg: &ExperimentConfig,
    variants: &[RunVariant],
    seeds: &[u64],
    train: &Corpus,
    dev: &Corpus,
    threads: usize,
) -> Result<Vec<GridRun>> {
    if seeds.len() < 2 {
        return Err(Error::Usage("the grid needs at least two seeds".into()));
    }
    if variants.is_empty() {
        return Err(Error::Usage("the grid needs at least one variant".into()));
    }
    let text = TextPipeline::learn(train, cfg.bpe_merges)?;
    let jobs: Vec<(RunVariant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<GridRun>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(variant, seed)) = jobs.get(i) else { break };
                let mut c = cfg.clone();
                c.variant = variant;
                c.train.seed = seed;
                let r = train_once(&c, &text, train, dev);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Mean ± sample standard deviation per variant, in first-seen order.
pub fn summarize(runs: &[GridRun]) -> Result<Vec<GridRow>> {
    let mut order: Vec<RunVariant> = Vec::new();
    for r in runs {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let mine: Vec<&GridRun> = runs.iter().filter(|r| r.variant == v).collect();
            let bleu = mean_sd(&mine.iter().map(|r| r.bleu).collect::<Vec<_>>())?;
            let amb: Option<Vec<f64>> = mine.iter().map(|r| r.ambiguous).collect();
            let ambiguous = amb.map(|a| mean_sd(&a)).transpose()?;
            Ok(GridRow { variant: v, runs: mine.len(), bleu, ambiguous })
        })
        .collect()
}

/// Results table with scores in percent.
pub fn format_table(rows: &[GridRow]) -> String {
    let cell = |(m, s): (f64, f64)| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s);
    let width = rows.iter().map(|r| r.variant.label().chars().count()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>5}  {:>13}  {:>13}", "Model", "Runs", "BLEU", "Ambiguous");
    let _ = writeln!(out, "{}", "-".repeat(width + 39));
    for r in rows {
        let amb = r.ambiguous.map_or("-".to_string(), cell);
        let _ = writeln!(out, "{:<width$}  {:>5}  {:>13}  {:>13}", r.variant.label(), r.runs, cell(r.bleu), amb);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(variant: RunVariant, seed: u64, bleu: f64) -> GridRun {
        GridRun { variant, seed, steps: 10, bleu, ambiguous: Some(bleu / 2.0) }
    }

    #[test]
    fn two_seeds_aggregate() {
        let rows = summarize(&[run(RunVariant::CbnPool5, 1, 0.3), run(RunVariant::CbnPool5, 2, 0.5)]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].runs, 2);
        assert!((rows[0].bleu.0 - 0.4).abs() < 1e-15);
        assert!((rows[0].bleu.1 - 0.02f64.sqrt()).abs() < 1e-15);
        let table = format_table(&rows);
        assert!(table.contains("RN v1 CBN Pool5"));
        assert!(table.contains("40.0 ± 14.1"));
    }

    #[test]
    fn identical_runs_have_zero_spread() {
        let rows = summarize(&[run(RunVariant::TextOnly, 1, 0.7), run(RunVariant::TextOnly, 1, 0.7)]).unwrap();
        assert_eq!(rows[0].bleu, (0.7, 0.0));
        assert_eq!(rows[0].ambiguous, Some((0.35, 0.0)));
    }

    #[test]
    fn one_seed_is_rejected() {
        let c = Corpus { src: vec!["a".into()], tgt: vec!["b".into()], images: None, slots: vec![None] };
        let e = run_grid(&ExperimentConfig::default(), &[RunVariant::TextOnly], &[1], &c, &c, 1).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
