//! Experiment orchestration.
//!
//! Runs the full audit over a corpus: stratified cross-validation of
//! every configured model kind across several seeded runs, per-fold
//! ensembles, rationale-rank and second-order interpretability stats,
//! unigram mining, insertion attacks with flip counting, and the
//! context-impact group test. Everything flows from one root seed, and
//! the rendered report body is byte-identical across reruns of the
//! same config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{
    build_adv_set, flip_rate, mine_unigrams, AdversarialCandidate, FlipDetail, MiningOutcome,
};
use crate::corpus::{
    load_corpus, make_folds, synth_corpus, Corpus, Label, LoadOptions, SynthSpec, Vocabulary,
};
use crate::error::{Error, Result};
use crate::interpret::{
    group_difference, impact_records, rr_stats, second_order_tally, GroupDifference, ImpactRecord,
    RrStats, SecondOrderTally,
};
use crate::langmodel::{train_lm, AveragedLm, Direction, LmConfig, NgramLm, SequenceScorer};
use crate::metrics::f1_scores;
use crate::models::{
    argmax_label, majority_vote, train, Classifier, Model, ModelKind, TrainConfig,
};
use crate::rng::{derive_seed, stage_tag};

/// Where the corpus comes from: a JSONL file or a synthesis recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Path(PathBuf),
    Synth(SynthSpec),
}

/// Naturalness scorer used for insertion attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerSpec {
    Ngram { order: usize, alpha: f64 },
    Lstm(LmConfig),
}

impl Default for ScorerSpec {
    fn default() -> ScorerSpec {
        ScorerSpec::Ngram { order: 3, alpha: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub model_kinds: Vec<ModelKind>,
    /// Cross-validation fold count; at least 2.
    pub folds: usize,
    /// Independent seeded runs per cell; odd, and equal to the train
    /// config's ensemble size.
    pub runs: usize,
    pub train: TrainConfig,
    /// Unigrams to insert; empty skips the attack stage.
    pub unigrams: Vec<String>,
    /// Top-K adversarial candidates kept per unigram.
    pub adv_set_size: usize,
    pub scorer: ScorerSpec,
    /// ℓ1 strength for unigram mining.
    pub l1_strength: f64,
    /// Vocabulary min-count threshold, applied per fold.
    pub min_count: usize,
    /// Root seed; every stage derives from it.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            corpus: CorpusSource::Synth(SynthSpec::default()),
            model_kinds: vec![ModelKind::Cnn, ModelKind::Lstm, ModelKind::LstmRationale],
            folds: 5,
            runs: 5,
            train: TrainConfig::default(),
            unigrams: Vec::new(),
            adv_set_size: 50,
            scorer: ScorerSpec::default(),
            l1_strength: 0.01,
            min_count: 1,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "fold count must be at least 2, got {}",
                self.folds
            )));
        }
        if self.runs == 0 || self.runs % 2 == 0 {
            return Err(Error::Config(format!(
                "run count must be odd and positive, got {}",
                self.runs
            )));
        }
        if self.runs != self.train.ensemble_size {
            return Err(Error::Config(format!(
                "run count {} must equal the train config's ensemble size {}",
                self.runs, self.train.ensemble_size
            )));
        }
        if self.model_kinds.is_empty() {
            return Err(Error::Config("no model kinds configured".into()));
        }
        let mut seen = Vec::new();
        for kind in &self.model_kinds {
            if seen.contains(kind) {
                return Err(Error::Config(format!("duplicate model kind {kind}")));
            }
            seen.push(*kind);
        }
        if self.adv_set_size == 0 {
            return Err(Error::Config("adversarial set size must be positive".into()));
        }
        if !self.unigrams.is_empty() {
            match &self.scorer {
                ScorerSpec::Ngram { order, alpha } => {
                    if *order == 0 || *alpha <= 0.0 {
                        return Err(Error::Config(
                            "n-gram scorer needs order >= 1 and alpha > 0".into(),
                        ));
                    }
                }
                ScorerSpec::Lstm(cfg) => cfg.validate()?,
            }
        }
        self.train.validate()
    }
}

/// One (fold, kind, run) evaluation cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunCell {
    pub fold: usize,
    pub kind: ModelKind,
    pub run: usize,
    pub macro_f1: f64,
    /// Per-class F1 in class order.
    pub class_f1: [f64; 3],
    pub rr: Option<RrStats>,
    pub second_order: SecondOrderTally,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleCell {
    pub fold: usize,
    pub kind: ModelKind,
    pub macro_f1: f64,
    pub class_f1: [f64; 3],
}

/// One tweet's vote from one trained model; the raw record behind every
/// F1 and ensemble cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteRecord {
    pub fold: usize,
    pub kind: ModelKind,
    pub run: usize,
    pub tweet_id: String,
    pub gold: Label,
    pub predicted: Label,
    pub scores: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvSetRecord {
    pub unigram: String,
    pub candidates: Vec<AdversarialCandidate>,
}

/// Flip counts for one (kind, unigram, run), summed over folds; each
/// candidate is scored by the model that held its source tweet out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipRunRecord {
    pub kind: ModelKind,
    pub unigram: String,
    pub run: usize,
    pub flips: usize,
    pub evaluated: usize,
    pub details: Vec<FlipDetail>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextRow {
    pub kind: ModelKind,
    pub n_records: usize,
    /// None when no tweets carry yes/no mention annotations.
    pub outcome: Option<GroupDifference>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub fold: Option<usize>,
    pub kind: Option<ModelKind>,
    pub run: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub n: usize,
    pub label_counts: [usize; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_echo: String,
    pub corpus: CorpusSummary,
    pub runs: Vec<RunCell>,
    pub ensembles: Vec<EnsembleCell>,
    pub votes: Vec<VoteRecord>,
    pub adv_sets: Vec<AdvSetRecord>,
    pub flips: Vec<FlipRunRecord>,
    pub mining: Option<MiningOutcome>,
    pub context: Vec<ContextRow>,
    pub impacts: Vec<(ModelKind, Vec<ImpactRecord>)>,
    pub failures: Vec<FailureRecord>,
}

impl ExperimentReport {
    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Stage<'a> {
    failures: &'a mut Vec<FailureRecord>,
}

impl Stage<'_> {
    fn record<T>(
        &mut self,
        stage: &str,
        fold: Option<usize>,
        kind: Option<ModelKind>,
        run: Option<usize>,
        result: Result<T>,
    ) -> Option<T> {
        match result {
            Ok(v) => Some(v),
            Err(e) => {
                self.failures.push(FailureRecord {
                    stage: stage.to_string(),
                    fold,
                    kind,
                    run,
                    message: e.to_string(),
                });
                None
            }
        }
    }
}

fn load_source(source: &CorpusSource, seed: u64) -> Result<Corpus> {
    match source {
        CorpusSource::Path(path) => {
            let (corpus, _) = load_corpus(path, &LoadOptions::default())?;
            Ok(corpus)
        }
        CorpusSource::Synth(spec) => synth_corpus(spec, seed),
    }
}

/// Trains the configured naturalness scorer on the corpus sequences.
pub fn build_scorer(
    spec: &ScorerSpec,
    corpus: &Corpus,
    seed: u64,
) -> Result<Box<dyn SequenceScorer>> {
    let sequences: Vec<Vec<String>> =
        corpus.tweets.iter().map(|t| t.tokens.clone()).collect();
    match spec {
        ScorerSpec::Ngram { order, alpha } => {
            Ok(Box::new(NgramLm::train(&sequences, *order, *alpha)?))
        }
        ScorerSpec::Lstm(cfg) => {
            let mut forward_cfg = cfg.clone();
            forward_cfg.seed = derive_seed(seed, &[stage_tag("lm-forward")]);
            let (forward, _) = train_lm(&sequences, Direction::Forward, &forward_cfg)?;
            let mut backward_cfg = cfg.clone();
            backward_cfg.seed = derive_seed(seed, &[stage_tag("lm-backward")]);
            let (backward, _) = train_lm(&sequences, Direction::Backward, &backward_cfg)?;
            Ok(Box::new(AveragedLm::new(forward, backward)?))
        }
    }
}

/// Runs the whole audit. Stage failures are collected into the report's
/// failure manifest rather than aborting; only config and corpus errors
/// abort. Callers must treat a non-empty manifest as failure.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let root = config.seed;
    let corpus = load_source(&config.corpus, derive_seed(root, &[stage_tag("corpus")]))?;
    if corpus.len() < config.adv_set_size && !config.unigrams.is_empty() {
        return Err(Error::CorpusSmallerThanK {
            size: corpus.len(),
            k: config.adv_set_size,
        });
    }
    let config_echo =
        serde_json::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
    let summary = CorpusSummary {
        n: corpus.len(),
        label_counts: corpus.label_counts(),
    };

    let assignment = make_folds(&corpus, config.folds, derive_seed(root, &[stage_tag("folds")]))?;
    let all_indices: Vec<usize> = (0..corpus.len()).collect();

    let mut failures = Vec::new();
    let mut runs = Vec::new();
    let mut ensembles = Vec::new();
    let mut votes = Vec::new();

    // Models and vocabularies are kept per fold for the attack stage.
    let mut fold_vocabs: Vec<Vocabulary> = Vec::with_capacity(config.folds);
    let mut fold_models: Vec<BTreeMap<usize, Vec<Option<Model>>>> = Vec::with_capacity(config.folds);

    for fold in 0..config.folds {
        let train_idx = assignment.train_indices(fold);
        let test_idx = assignment.test_indices(fold);
        let vocab = Vocabulary::build(
            train_idx
                .iter()
                .flat_map(|&i| corpus.tweets[i].tokens.iter()),
            config.min_count,
        );
        let mut per_kind: BTreeMap<usize, Vec<Option<Model>>> = BTreeMap::new();

        for (kind_idx, &kind) in config.model_kinds.iter().enumerate() {
            let mut models: Vec<Option<Model>> = Vec::with_capacity(config.runs);
            for run in 0..config.runs {
                let mut stage = Stage { failures: &mut failures };
                let mut train_cfg = config.train.clone();
                train_cfg.seed = derive_seed(
                    root,
                    &[stage_tag("train"), fold as u64, kind_idx as u64, run as u64],
                );
                let outcome = stage.record(
                    "train",
                    Some(fold),
                    Some(kind),
                    Some(run),
                    train(&corpus, &train_idx, kind, &vocab, &train_cfg),
                );
                let Some(outcome) = outcome else {
                    models.push(None);
                    continue;
                };
                let model = outcome.model;

                let cell = stage.record(
                    "evaluate",
                    Some(fold),
                    Some(kind),
                    Some(run),
                    evaluate_cell(&model, &corpus, &test_idx, &vocab, fold, kind, run, &mut votes),
                );
                if let Some(cell) = cell {
                    runs.push(cell);
                }
                models.push(Some(model));
            }

            let complete: Vec<&Model> = models.iter().flatten().collect();
            if complete.len() == config.runs {
                let mut stage = Stage { failures: &mut failures };
                let cell = stage.record(
                    "ensemble",
                    Some(fold),
                    Some(kind),
                    None,
                    ensemble_cell(&complete, &corpus, &test_idx, &vocab, fold, kind),
                );
                if let Some(cell) = cell {
                    ensembles.push(cell);
                }
            } else {
                failures.push(FailureRecord {
                    stage: "ensemble".into(),
                    fold: Some(fold),
                    kind: Some(kind),
                    run: None,
                    message: format!(
                        "skipped: only {} of {} member models trained",
                        complete.len(),
                        config.runs
                    ),
                });
            }
            per_kind.insert(kind_idx, models);
        }
        fold_vocabs.push(vocab);
        fold_models.push(per_kind);
    }

    // Unigram mining over the full corpus.
    let mining = {
        let mut stage = Stage { failures: &mut failures };
        stage.record(
            "mining",
            None,
            None,
            None,
            mine_unigrams(&corpus, &all_indices, config.l1_strength),
        )
    };

    // Insertion attacks: one adversarial set per unigram, flips counted
    // by the held-out fold's models.
    let mut adv_sets = Vec::new();
    let mut flips = Vec::new();
    if !config.unigrams.is_empty() {
        let scorer = {
            let mut stage = Stage { failures: &mut failures };
            stage.record(
                "scorer",
                None,
                None,
                None,
                build_scorer(&config.scorer, &corpus, derive_seed(root, &[stage_tag("scorer")])),
            )
        };
        if let Some(scorer) = scorer {
            for unigram in &config.unigrams {
                let mut stage = Stage { failures: &mut failures };
                let set = stage.record(
                    "adv_set",
                    None,
                    None,
                    None,
                    build_adv_set(
                        scorer.as_ref(),
                        &corpus,
                        &all_indices,
                        unigram,
                        config.adv_set_size,
                    ),
                );
                let Some(candidates) = set else { continue };

                // Split candidates by the fold holding their source out.
                let by_id = corpus.id_index();
                let mut per_fold: Vec<Vec<AdversarialCandidate>> =
                    vec![Vec::new(); config.folds];
                for c in &candidates {
                    let idx = by_id[c.source_id.as_str()];
                    per_fold[assignment.fold_of(idx)].push(c.clone());
                }

                for (kind_idx, &kind) in config.model_kinds.iter().enumerate() {
                    for run in 0..config.runs {
                        let mut record = FlipRunRecord {
                            kind,
                            unigram: unigram.clone(),
                            run,
                            flips: 0,
                            evaluated: 0,
                            details: Vec::new(),
                        };
                        let mut complete = true;
                        for fold in 0..config.folds {
                            let Some(Some(model)) =
                                fold_models[fold].get(&kind_idx).map(|m| &m[run])
                            else {
                                complete = false;
                                continue;
                            };
                            let mut stage = Stage { failures: &mut failures };
                            let report = stage.record(
                                "flips",
                                Some(fold),
                                Some(kind),
                                Some(run),
                                flip_rate(model, &corpus, &fold_vocabs[fold], &per_fold[fold]),
                            );
                            match report {
                                Some(r) => {
                                    record.flips += r.flips;
                                    record.evaluated += r.evaluated;
                                    record.details.extend(r.details);
                                }
                                None => complete = false,
                            }
                        }
                        if complete {
                            flips.push(record);
                        }
                    }
                }
                adv_sets.push(AdvSetRecord {
                    unigram: unigram.clone(),
                    candidates,
                });
            }
        }
    }

    // Context-impact group test: run 0's model per fold, pooled over
    // each tweet's held-out fold.
    let mut context = Vec::new();
    let mut impacts = Vec::new();
    for (kind_idx, &kind) in config.model_kinds.iter().enumerate() {
        let mut records: Vec<ImpactRecord> = Vec::new();
        let mut complete = true;
        for fold in 0..config.folds {
            let Some(Some(model)) = fold_models[fold].get(&kind_idx).map(|m| &m[0]) else {
                complete = false;
                continue;
            };
            let test_idx = assignment.test_indices(fold);
            let mut stage = Stage { failures: &mut failures };
            match stage.record(
                "context",
                Some(fold),
                Some(kind),
                Some(0),
                impact_records(model, &corpus, &test_idx),
            ) {
                Some(r) => records.extend(r),
                None => complete = false,
            }
        }
        if !complete {
            continue;
        }
        let outcome = match group_difference(
            &records,
            derive_seed(root, &[stage_tag("context"), kind_idx as u64]),
        ) {
            Ok(diff) => Some(diff),
            Err(Error::EmptyGroup(_)) => None,
            Err(e) => {
                failures.push(FailureRecord {
                    stage: "context".into(),
                    fold: None,
                    kind: Some(kind),
                    run: None,
                    message: e.to_string(),
                });
                continue;
            }
        };
        context.push(ContextRow {
            kind,
            n_records: records.len(),
            outcome,
        });
        impacts.push((kind, records));
    }

    Ok(ExperimentReport {
        config_echo,
        corpus: summary,
        runs,
        ensembles,
        votes,
        adv_sets,
        flips,
        mining,
        context,
        impacts,
        failures,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cell(
    model: &Model,
    corpus: &Corpus,
    test_idx: &[usize],
    vocab: &Vocabulary,
    fold: usize,
    kind: ModelKind,
    run: usize,
    votes: &mut Vec<VoteRecord>,
) -> Result<RunCell> {
    let mut predictions = Vec::with_capacity(test_idx.len());
    let mut golds = Vec::with_capacity(test_idx.len());
    for &i in test_idx {
        let tweet = &corpus.tweets[i];
        let scores = model.class_scores(&vocab.encode(&tweet.tokens), &tweet.context_features)?;
        let predicted = argmax_label(&scores);
        votes.push(VoteRecord {
            fold,
            kind,
            run,
            tweet_id: tweet.id.clone(),
            gold: tweet.label,
            predicted,
            scores,
        });
        predictions.push(predicted);
        golds.push(tweet.label);
    }
    let f1 = f1_scores(&predictions, &golds)?;
    let rr = rr_stats(model, corpus, test_idx, vocab)?;
    let second_order = second_order_tally(model, corpus, test_idx, vocab)?;
    Ok(RunCell {
        fold,
        kind,
        run,
        macro_f1: f1.macro_f1,
        class_f1: [
            f1.per_class[0].f1,
            f1.per_class[1].f1,
            f1.per_class[2].f1,
        ],
        rr,
        second_order,
    })
}

fn ensemble_cell(
    members: &[&Model],
    corpus: &Corpus,
    test_idx: &[usize],
    vocab: &Vocabulary,
    fold: usize,
    kind: ModelKind,
) -> Result<EnsembleCell> {
    let mut predictions = Vec::with_capacity(test_idx.len());
    let mut golds = Vec::with_capacity(test_idx.len());
    for &i in test_idx {
        let tweet = &corpus.tweets[i];
        predictions.push(majority_vote(
            members,
            &vocab.encode(&tweet.tokens),
            &tweet.context_features,
        )?);
        golds.push(tweet.label);
    }
    let f1 = f1_scores(&predictions, &golds)?;
    Ok(EnsembleCell {
        fold,
        kind,
        macro_f1: f1.macro_f1,
        class_f1: [
            f1.per_class[0].f1,
            f1.per_class[1].f1,
            f1.per_class[2].f1,
        ],
    })
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Renders the deterministic report body. Contains no timestamps or
/// absolute paths; identical configs yield identical bytes.
pub fn render_report(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let w = &mut out;

    writeln!(w, "# audit report").unwrap();
    writeln!(w).unwrap();
    writeln!(w, "## corpus").unwrap();
    let [agg, loss, other] = report.corpus.label_counts;
    writeln!(
        w,
        "tweets={} aggression={agg} loss={loss} other={other}",
        report.corpus.n
    )
    .unwrap();

    writeln!(w).unwrap();
    writeln!(w, "## per-run F1").unwrap();
    writeln!(w, "fold,kind,run,macro_f1,f1_aggression,f1_loss,f1_other").unwrap();
    for c in &report.runs {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            c.fold,
            c.kind,
            c.run,
            fmt6(c.macro_f1),
            fmt6(c.class_f1[0]),
            fmt6(c.class_f1[1]),
            fmt6(c.class_f1[2])
        )
        .unwrap();
    }

    writeln!(w).unwrap();
    writeln!(w, "## ensemble F1").unwrap();
    writeln!(w, "fold,kind,macro_f1,f1_aggression,f1_loss,f1_other").unwrap();
    for c in &report.ensembles {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.fold,
            c.kind,
            fmt6(c.macro_f1),
            fmt6(c.class_f1[0]),
            fmt6(c.class_f1[1]),
            fmt6(c.class_f1[2])
        )
        .unwrap();
    }

    writeln!(w).unwrap();
    writeln!(w, "## aggregate macro F1").unwrap();
    writeln!(
        w,
        "kind,mean_over_folds_of_run_means,mean_over_runs_of_fold_means,grand_mean,ensemble_mean"
    )
    .unwrap();
    let kinds: Vec<ModelKind> = {
        let mut seen = Vec::new();
        for c in &report.runs {
            if !seen.contains(&c.kind) {
                seen.push(c.kind);
            }
        }
        for c in &report.ensembles {
            if !seen.contains(&c.kind) {
                seen.push(c.kind);
            }
        }
        seen
    };
    for &kind in &kinds {
        let cells: Vec<&RunCell> = report.runs.iter().filter(|c| c.kind == kind).collect();
        let folds: Vec<usize> = {
            let mut f: Vec<usize> = cells.iter().map(|c| c.fold).collect();
            f.sort_unstable();
            f.dedup();
            f
        };
        let runs: Vec<usize> = {
            let mut r: Vec<usize> = cells.iter().map(|c| c.run).collect();
            r.sort_unstable();
            r.dedup();
            r
        };
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let by_fold: Vec<f64> = folds
            .iter()
            .map(|&f| {
                mean(
                    &cells
                        .iter()
                        .filter(|c| c.fold == f)
                        .map(|c| c.macro_f1)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let by_run: Vec<f64> = runs
            .iter()
            .map(|&r| {
                mean(
                    &cells
                        .iter()
                        .filter(|c| c.run == r)
                        .map(|c| c.macro_f1)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let grand: Vec<f64> = cells.iter().map(|c| c.macro_f1).collect();
        let ens: Vec<f64> = report
            .ensembles
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.macro_f1)
            .collect();
        let cell = |xs: &[f64]| {
            if xs.is_empty() {
                "-".to_string()
            } else {
                fmt6(mean(xs))
            }
        };
        writeln!(
            w,
            "{},{},{},{},{}",
            kind,
            cell(&by_fold),
            cell(&by_run),
            cell(&grand),
            cell(&ens)
        )
        .unwrap();
    }

    writeln!(w).unwrap();
    writeln!(w, "## rationale rank").unwrap();
    writeln!(w, "fold,kind,run,avg_rr,frac_rr0,frac_rr1,cohort").unwrap();
    for c in &report.runs {
        match &c.rr {
            Some(rr) => writeln!(
                w,
                "{},{},{},{},{},{},{}",
                c.fold,
                c.kind,
                c.run,
                fmt6(rr.avg_rr),
                fmt6(rr.frac_rr0),
                fmt6(rr.frac_rr1),
                rr.n
            )
            .unwrap(),
            None => writeln!(w, "{},{},{},empty-cohort,-,-,0", c.fold, c.kind, c.run).unwrap(),
        }
    }

    writeln!(w).unwrap();
    writeln!(w, "## second-order consistency").unwrap();
    writeln!(w, "fold,kind,run,stays_top1,becomes_top2,displaced").unwrap();
    for c in &report.runs {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.fold,
            c.kind,
            c.run,
            c.second_order.stays_top1,
            c.second_order.becomes_top2,
            c.second_order.displaced
        )
        .unwrap();
    }

    writeln!(w).unwrap();
    writeln!(w, "## mined unigrams").unwrap();
    match &report.mining {
        Some(m) => {
            writeln!(w, "token,weight").unwrap();
            for u in &m.unigrams {
                writeln!(w, "{},{}", u.token, fmt6(u.weight)).unwrap();
            }
            writeln!(w, "optimality_gap,{:.3e}", m.optimality_gap).unwrap();
        }
        None => writeln!(w, "mining-failed").unwrap(),
    }

    writeln!(w).unwrap();
    writeln!(w, "## prediction flips").unwrap();
    writeln!(w, "kind,unigram,run,flips,evaluated").unwrap();
    for f in &report.flips {
        writeln!(
            w,
            "{},{},{},{},{}",
            f.kind, f.unigram, f.run, f.flips, f.evaluated
        )
        .unwrap();
    }
    writeln!(w, "kind,unigram,mean_flips").unwrap();
    let mut pairs: Vec<(ModelKind, &String)> = Vec::new();
    for f in &report.flips {
        if !pairs.contains(&(f.kind, &f.unigram)) {
            pairs.push((f.kind, &f.unigram));
        }
    }
    for (kind, unigram) in pairs {
        let xs: Vec<f64> = report
            .flips
            .iter()
            .filter(|f| f.kind == kind && &f.unigram == unigram)
            .map(|f| f.flips as f64)
            .collect();
        writeln!(
            w,
            "{},{},{}",
            kind,
            unigram,
            fmt6(xs.iter().sum::<f64>() / xs.len() as f64)
        )
        .unwrap();
    }

    writeln!(w).unwrap();
    writeln!(w, "## context impact").unwrap();
    writeln!(w, "kind,records,mean_diff,p_value,n_yes,n_no,exact").unwrap();
    for row in &report.context {
        match &row.outcome {
            Some(d) => writeln!(
                w,
                "{},{},{},{},{},{},{}",
                row.kind,
                row.n_records,
                fmt6(d.mean_diff),
                fmt6(d.p_value),
                d.n_yes,
                d.n_no,
                d.exact
            )
            .unwrap(),
            None => writeln!(w, "{},{},no-annotated-groups,-,-,-,-", row.kind, row.n_records)
                .unwrap(),
        }
    }

    writeln!(w).unwrap();
    writeln!(w, "## failures").unwrap();
    if report.failures.is_empty() {
        writeln!(w, "none").unwrap();
    } else {
        writeln!(w, "stage,fold,kind,run,message").unwrap();
        for f in &report.failures {
            let opt = |v: &Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
            writeln!(
                w,
                "{},{},{},{},{}",
                f.stage,
                opt(&f.fold),
                f.kind.map_or("-".to_string(), |k| k.to_string()),
                opt(&f.run),
                f.message.replace(',', ";").replace('\n', " ")
            )
            .unwrap();
        }
    }

    writeln!(w).unwrap();
    writeln!(w, "## config").unwrap();
    writeln!(w, "{}", report.config_echo).unwrap();
    out
}

fn votes_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "fold,kind,run,tweet_id,gold,predicted,s_aggression,s_loss,s_other\n",
    );
    for v in &report.votes {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            v.fold,
            v.kind,
            v.run,
            v.tweet_id,
            v.gold.as_str(),
            v.predicted.as_str(),
            fmt6(v.scores[0]),
            fmt6(v.scores[1]),
            fmt6(v.scores[2])
        );
    }
    out
}

fn impacts_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("kind,tweet_id,impact,group\n");
    for (kind, records) in &report.impacts {
        for r in records {
            let _ = writeln!(out, "{},{},{},{:?}", kind, r.tweet_id, fmt6(r.impact), r.group);
        }
    }
    out
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| Error::Checkpoint(format!("serializing report row: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Writes the report body plus the raw records every cell traces to.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Checkpoint(format!("creating {dir:?}: {e}")))?;
    let write = |name: &str, body: &str| -> Result<()> {
        fs::write(dir.join(name), body)
            .map_err(|e| Error::Checkpoint(format!("writing {name}: {e}")))
    };
    write("report.md", &render_report(report))?;
    write("votes.csv", &votes_csv(report))?;
    write("impacts.csv", &impacts_csv(report))?;
    write("adv_sets.jsonl", &jsonl(&report.adv_sets)?)?;
    write("flips.jsonl", &jsonl(&report.flips)?)?;
    write("failures.jsonl", &jsonl(&report.failures)?)?;
    if let Some(m) = &report.mining {
        write("mining.jsonl", &jsonl(&m.unigrams)?)?;
    }
    Ok(())
}
