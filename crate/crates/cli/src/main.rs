//! Command line driver for the audit toolkit.
//!
//! Every subcommand reads a JSON config file, takes a few targeted
//! flag overrides, and writes CSV/JSONL outputs under `--out`. Log
//! verbosity is controlled by `RUST_LOG` only; the exit code is 0 only
//! on full success.

use std::error::Error;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use raudit_core::adversary::{
    build_adv_set, flip_rate, mark_selected, mine_unigrams, naturalness_sample,
};
use raudit_core::corpus::{
    load_corpus, make_folds, synth_corpus, Label, LoadOptions, SynthSpec, Vocabulary,
};
use raudit_core::experiment::{
    build_scorer, run_experiment, write_report, ExperimentConfig, ScorerSpec,
};
use raudit_core::interpret::{
    group_difference, impact_records, influence_report, rr_stats, second_order_tally,
};
use raudit_core::langmodel::{train_lm, Direction, LmConfig};
use raudit_core::metrics::f1_scores;
use raudit_core::models::{
    majority_vote, train_ensemble, validate_ensemble, Classifier, Model, ModelKind, TrainConfig,
};
use raudit_core::rng::{derive_seed, stage_tag};

#[derive(Parser)]
#[command(name = "raudit", version, about = "Aggression classifier audit toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus file.
    Synth(SynthArgs),
    /// Train a model ensemble on a corpus.
    Train(TrainArgs),
    /// Token-influence and rationale-rank analysis of a trained model.
    Interpret(InterpretArgs),
    /// Build insertion attacks and count prediction flips.
    Attack(AttackArgs),
    /// Mine aggression-correlated unigrams.
    Mine(MineArgs),
    /// Train the naturalness language model.
    LmTrain(LmTrainArgs),
    /// Score a trained ensemble on a corpus.
    Evaluate(EvaluateArgs),
    /// Run the full cross-validated audit and write its report.
    Report(ReportArgs),
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    match s {
        "cnn" => Ok(ModelKind::Cnn),
        "lstm" => Ok(ModelKind::Lstm),
        "lstm_rationale" | "lstm-rationale" => Ok(ModelKind::LstmRationale),
        other => Err(format!(
            "unknown model kind {other:?}; expected cnn, lstm, or lstm_rationale"
        )),
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Synthesis recipe (JSON); omitted means the built-in default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generation seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training job (JSON): corpus path, model kind, train config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the job's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the job's model kind.
    #[arg(long, value_parser = parse_kind)]
    model: Option<ModelKind>,
    /// Train on this cross-validation fold's training split instead of
    /// the whole corpus.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InterpretArgs {
    /// Interpretation job (JSON): corpus path and models directory.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the permutation-test seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    /// Attack job (JSON): corpus, scorer, unigrams, set size.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scorer/sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MineArgs {
    /// Mining job (JSON): corpus path and l1 strength.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LmTrainArgs {
    /// Language-model job (JSON): corpus path and LM config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the LM training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Evaluation job (JSON): corpus path and models directory.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to these model kinds (repeatable).
    #[arg(long, value_parser = parse_kind)]
    model: Vec<ModelKind>,
    /// Overrides the fold count.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("finished with failures; see the failure manifest");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<bool, Box<dyn Error>> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Interpret(args) => cmd_interpret(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Mine(args) => cmd_mine(args),
        Command::LmTrain(args) => cmd_lm_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Box<dyn Error>> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("reading config {}: {e}", path.display()))?;
    let value =
        serde_json::from_str(&text).map_err(|e| format!("parsing {}: {e}", path.display()))?;
    Ok(value)
}

fn write_out(dir: &Path, name: &str, body: &str) -> Result<(), Box<dyn Error>> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), body).map_err(|e| format!("writing {name}: {e}"))?;
    Ok(())
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn member_name(i: usize) -> String {
    format!("member-{i:02}.json")
}

fn save_vocab(dir: &Path, vocab: &Vocabulary) -> Result<(), Box<dyn Error>> {
    let body = serde_json::to_string_pretty(vocab.tokens_in_id_order())?;
    write_out(dir, "vocab.json", &body)
}

fn load_vocab(dir: &Path) -> Result<Vocabulary, Box<dyn Error>> {
    let tokens: Vec<String> = read_json(&dir.join("vocab.json"))?;
    Ok(Vocabulary::from_tokens(tokens)?)
}

fn load_members(dir: &Path, vocab: &Vocabulary) -> Result<Vec<Model>, Box<dyn Error>> {
    let mut members = Vec::new();
    for i in 0.. {
        let path = dir.join(member_name(i));
        if !path.exists() {
            break;
        }
        members.push(Model::load(&path, Some(vocab.hash()))?);
    }
    if members.is_empty() {
        return Err(format!("no member-*.json models under {}", dir.display()).into());
    }
    Ok(members)
}

fn cmd_synth(args: SynthArgs) -> Result<bool, Box<dyn Error>> {
    let spec: SynthSpec = match &args.config {
        Some(path) => read_json(path)?,
        None => SynthSpec::default(),
    };
    let seed = args.seed.unwrap_or(0);
    let corpus = synth_corpus(&spec, seed)?;
    fs::create_dir_all(&args.out)?;
    raudit_core::corpus::write_corpus(&args.out.join("corpus.jsonl"), &corpus)?;
    let [agg, loss, other] = corpus.label_counts();
    log::info!("synthesized {} tweets (seed {seed})", corpus.len());
    println!(
        "wrote {} tweets: aggression={agg} loss={loss} other={other}",
        corpus.len()
    );
    Ok(true)
}

#[derive(Deserialize)]
#[serde(default)]
struct TrainJob {
    corpus: PathBuf,
    kind: ModelKind,
    train: TrainConfig,
    min_count: usize,
    /// Fold count used when `--fold` selects a training split.
    folds: usize,
}

impl Default for TrainJob {
    fn default() -> TrainJob {
        TrainJob {
            corpus: PathBuf::new(),
            kind: ModelKind::LstmRationale,
            train: TrainConfig::default(),
            min_count: 1,
            folds: 5,
        }
    }
}

fn require_corpus(path: &Path) -> Result<(), Box<dyn Error>> {
    if path.as_os_str().is_empty() {
        return Err("job config is missing the corpus path".into());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<bool, Box<dyn Error>> {
    let mut job: TrainJob = read_json(&args.config)?;
    require_corpus(&job.corpus)?;
    if let Some(seed) = args.seed {
        job.train.seed = seed;
    }
    if let Some(kind) = args.model {
        job.kind = kind;
    }
    let options = LoadOptions {
        min_count: job.min_count,
        ..LoadOptions::default()
    };
    let (corpus, full_vocab) = load_corpus(&job.corpus, &options)?;

    let (indices, vocab) = match args.fold {
        Some(fold) => {
            if fold >= job.folds {
                return Err(format!("fold {fold} out of range for {} folds", job.folds).into());
            }
            let assignment = make_folds(
                &corpus,
                job.folds,
                derive_seed(job.train.seed, &[stage_tag("folds")]),
            )?;
            let indices = assignment.train_indices(fold);
            let vocab = Vocabulary::build(
                indices.iter().flat_map(|&i| corpus.tweets[i].tokens.iter()),
                job.min_count,
            );
            (indices, vocab)
        }
        None => ((0..corpus.len()).collect(), full_vocab),
    };

    log::info!(
        "training {} x{} on {} tweets",
        job.kind,
        job.train.ensemble_size,
        indices.len()
    );
    let outcomes = train_ensemble(&corpus, &indices, job.kind, &vocab, &job.train)?;
    save_vocab(&args.out, &vocab)?;
    for (i, outcome) in outcomes.iter().enumerate() {
        outcome.model.save(&args.out.join(member_name(i)))?;
        write_out(&args.out, &format!("member-{i:02}.log.csv"), &outcome.log.to_csv())?;
    }
    let manifest = serde_json::json!({
        "kind": job.kind,
        "members": outcomes.len(),
        "vocab_hash": vocab.hash(),
        "trained_on": indices.len(),
        "fold": args.fold,
    });
    write_out(&args.out, "manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "trained {} member(s) of {} on {} tweets",
        outcomes.len(),
        job.kind,
        indices.len()
    );
    Ok(true)
}

#[derive(Deserialize)]
#[serde(default)]
struct InterpretJob {
    corpus: PathBuf,
    models_dir: PathBuf,
    /// Which ensemble member to analyze.
    member: usize,
    /// Permutation-test seed.
    seed: u64,
}

impl Default for InterpretJob {
    fn default() -> InterpretJob {
        InterpretJob {
            corpus: PathBuf::new(),
            models_dir: PathBuf::new(),
            member: 0,
            seed: 0,
        }
    }
}

fn cmd_interpret(args: InterpretArgs) -> Result<bool, Box<dyn Error>> {
    let mut job: InterpretJob = read_json(&args.config)?;
    require_corpus(&job.corpus)?;
    if let Some(seed) = args.seed {
        job.seed = seed;
    }
    let (corpus, _) = load_corpus(&job.corpus, &LoadOptions::default())?;
    let vocab = load_vocab(&job.models_dir)?;
    let model = Model::load(
        &job.models_dir.join(member_name(job.member)),
        Some(vocab.hash()),
    )?;
    let indices: Vec<usize> = (0..corpus.len()).collect();

    let mut influence = String::new();
    for &i in &indices {
        let report = influence_report(&model, &corpus, i, &vocab, Label::Aggression)?;
        influence.push_str(&serde_json::to_string(&report)?);
        influence.push('\n');
    }
    write_out(&args.out, "influence.jsonl", &influence)?;

    let rr = rr_stats(&model, &corpus, &indices, &vocab)?;
    let mut rr_csv = String::from("avg_rr,frac_rr0,frac_rr1,cohort\n");
    match rr {
        Some(rr) => {
            let _ = writeln!(
                rr_csv,
                "{},{},{},{}",
                fmt6(rr.avg_rr),
                fmt6(rr.frac_rr0),
                fmt6(rr.frac_rr1),
                rr.n
            );
        }
        None => rr_csv.push_str("empty-cohort,-,-,0\n"),
    }
    write_out(&args.out, "rr.csv", &rr_csv)?;

    let tally = second_order_tally(&model, &corpus, &indices, &vocab)?;
    write_out(
        &args.out,
        "second_order.csv",
        &format!(
            "stays_top1,becomes_top2,displaced\n{},{},{}\n",
            tally.stays_top1, tally.becomes_top2, tally.displaced
        ),
    )?;

    let records = impact_records(&model, &corpus, &indices)?;
    let mut context_csv = String::from("records,mean_diff,p_value,n_yes,n_no,exact\n");
    match group_difference(&records, job.seed) {
        Ok(diff) => {
            let _ = writeln!(
                context_csv,
                "{},{},{},{},{},{}",
                records.len(),
                fmt6(diff.mean_diff),
                fmt6(diff.p_value),
                diff.n_yes,
                diff.n_no,
                diff.exact
            );
        }
        Err(raudit_core::Error::EmptyGroup(_)) => {
            let _ = writeln!(context_csv, "{},no-annotated-groups,-,-,-,-", records.len());
        }
        Err(e) => return Err(e.into()),
    }
    write_out(&args.out, "context.csv", &context_csv)?;
    println!(
        "interpreted {} tweets with member {} under {}",
        corpus.len(),
        job.member,
        job.models_dir.display()
    );
    Ok(true)
}

#[derive(Deserialize)]
#[serde(default)]
struct SampleSpec {
    n_each: usize,
    seed: u64,
}

impl Default for SampleSpec {
    fn default() -> SampleSpec {
        SampleSpec { n_each: 10, seed: 0 }
    }
}

#[derive(Deserialize)]
#[serde(default)]
struct AttackJob {
    corpus: PathBuf,
    /// Optional trained ensemble for flip counting.
    models_dir: Option<PathBuf>,
    scorer: ScorerSpec,
    unigrams: Vec<String>,
    /// Top-K candidates kept per unigram.
    k: usize,
    /// Blinded naturalness sheet; requires exactly one unigram.
    sample: Option<SampleSpec>,
    seed: u64,
}

impl Default for AttackJob {
    fn default() -> AttackJob {
        AttackJob {
            corpus: PathBuf::new(),
            models_dir: None,
            scorer: ScorerSpec::default(),
            unigrams: Vec::new(),
            k: 50,
            sample: None,
            seed: 0,
        }
    }
}

fn cmd_attack(args: AttackArgs) -> Result<bool, Box<dyn Error>> {
    let mut job: AttackJob = read_json(&args.config)?;
    require_corpus(&job.corpus)?;
    if let Some(seed) = args.seed {
        job.seed = seed;
    }
    if job.unigrams.is_empty() {
        return Err("attack job lists no unigrams".into());
    }
    if job.sample.is_some() && job.unigrams.len() != 1 {
        return Err("naturalness sampling requires exactly one unigram".into());
    }
    let (corpus, _) = load_corpus(&job.corpus, &LoadOptions::default())?;
    let scorer = build_scorer(
        &job.scorer,
        &corpus,
        derive_seed(job.seed, &[stage_tag("scorer")]),
    )?;
    let all: Vec<usize> = (0..corpus.len()).collect();

    let ensemble = match &job.models_dir {
        Some(dir) => {
            let vocab = load_vocab(dir)?;
            let members = load_members(dir, &vocab)?;
            Some((vocab, members))
        }
        None => None,
    };

    let mut adv_jsonl = String::new();
    let mut flips_csv = String::from("unigram,member,flips,evaluated\n");
    let mut details_jsonl = String::new();
    for unigram in &job.unigrams {
        let set = build_adv_set(scorer.as_ref(), &corpus, &all, unigram, job.k)?;
        for candidate in &set {
            adv_jsonl.push_str(&serde_json::to_string(candidate)?);
            adv_jsonl.push('\n');
        }
        if let Some((vocab, members)) = &ensemble {
            for (i, model) in members.iter().enumerate() {
                let report = flip_rate(model, &corpus, vocab, &set)?;
                let _ = writeln!(
                    flips_csv,
                    "{unigram},{i},{},{}",
                    report.flips, report.evaluated
                );
                for detail in &report.details {
                    details_jsonl.push_str(&serde_json::to_string(&(unigram, i, detail))?);
                    details_jsonl.push('\n');
                }
            }
        }
        if let Some(sample) = &job.sample {
            let sheet = naturalness_sample(&set, &corpus, sample.n_each, sample.seed)?;
            let mut sheet_csv = String::from("row_id,text\n");
            for row in &sheet.rows {
                let _ = writeln!(sheet_csv, "{},{}", row.row_id, row.tokens.join(" "));
            }
            let mut key_csv = String::from("row_id,source,origin_id\n");
            for row in &sheet.key {
                let source = match row.source {
                    raudit_core::adversary::SheetSource::Generated => "generated",
                    raudit_core::adversary::SheetSource::Real => "real",
                };
                let _ = writeln!(key_csv, "{},{source},{}", row.row_id, row.origin_id);
            }
            write_out(&args.out, "sheet.csv", &sheet_csv)?;
            write_out(&args.out, "sheet_key.csv", &key_csv)?;
        }
    }
    write_out(&args.out, "adv_set.jsonl", &adv_jsonl)?;
    if ensemble.is_some() {
        write_out(&args.out, "flips.csv", &flips_csv)?;
        write_out(&args.out, "flip_details.jsonl", &details_jsonl)?;
    }
    println!(
        "built {} candidate(s) per unigram for {} unigram(s)",
        job.k,
        job.unigrams.len()
    );
    Ok(true)
}

#[derive(Deserialize)]
#[serde(default)]
struct MineJob {
    corpus: PathBuf,
    l1_strength: f64,
    /// Reviewed allow-list; matching mined tokens are marked selected.
    allow_list: Vec<String>,
}

impl Default for MineJob {
    fn default() -> MineJob {
        MineJob {
            corpus: PathBuf::new(),
            l1_strength: 0.01,
            allow_list: Vec::new(),
        }
    }
}

fn cmd_mine(args: MineArgs) -> Result<bool, Box<dyn Error>> {
    let job: MineJob = read_json(&args.config)?;
    require_corpus(&job.corpus)?;
    let (corpus, _) = load_corpus(&job.corpus, &LoadOptions::default())?;
    let all: Vec<usize> = (0..corpus.len()).collect();
    let mut outcome = mine_unigrams(&corpus, &all, job.l1_strength)?;
    let allow = job.allow_list.iter().cloned().collect();
    mark_selected(&mut outcome.unigrams, &allow);

    let mut csv = String::from("token,weight,selected\n");
    for u in &outcome.unigrams {
        let _ = writeln!(csv, "{},{},{}", u.token, fmt6(u.weight), u.selected);
    }
    write_out(&args.out, "mined.csv", &csv)?;
    write_out(&args.out, "outcome.json", &serde_json::to_string_pretty(&outcome)?)?;
    println!(
        "mined {} positive unigram(s); optimality gap {:.3e}",
        outcome.unigrams.len(),
        outcome.optimality_gap
    );
    Ok(true)
}

#[derive(Deserialize)]
#[serde(default)]
struct LmJob {
    corpus: PathBuf,
    config: LmConfig,
    /// Omitted trains both directions.
    direction: Option<Direction>,
}

impl Default for LmJob {
    fn default() -> LmJob {
        LmJob {
            corpus: PathBuf::new(),
            config: LmConfig::default(),
            direction: None,
        }
    }
}

fn cmd_lm_train(args: LmTrainArgs) -> Result<bool, Box<dyn Error>> {
    let mut job: LmJob = read_json(&args.config)?;
    require_corpus(&job.corpus)?;
    if let Some(seed) = args.seed {
        job.config.seed = seed;
    }
    let (corpus, _) = load_corpus(&job.corpus, &LoadOptions::default())?;
    let sequences: Vec<Vec<String>> = corpus.tweets.iter().map(|t| t.tokens.clone()).collect();
    let directions = match job.direction {
        Some(d) => vec![d],
        None => vec![Direction::Forward, Direction::Backward],
    };
    for direction in directions {
        let mut config = job.config.clone();
        config.seed = derive_seed(job.config.seed, &[stage_tag("lm"), direction as u64]);
        log::info!("training {direction} LM on {} sequences", sequences.len());
        let (lm, log) = train_lm(&sequences, direction, &config)?;
        fs::create_dir_all(&args.out)?;
        lm.save(&args.out.join(format!("lm-{direction}.json")))?;
        write_out(&args.out, &format!("lm-{direction}.curve.csv"), &log.to_csv())?;
        println!(
            "{direction}: best epoch {} of {}, stopped_early={}",
            log.best_epoch,
            log.epochs.len(),
            log.stopped_early
        );
    }
    Ok(true)
}

#[derive(Deserialize)]
#[serde(default)]
struct EvalJob {
    corpus: PathBuf,
    models_dir: PathBuf,
}

impl Default for EvalJob {
    fn default() -> EvalJob {
        EvalJob {
            corpus: PathBuf::new(),
            models_dir: PathBuf::new(),
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<bool, Box<dyn Error>> {
    let job: EvalJob = read_json(&args.config)?;
    require_corpus(&job.corpus)?;
    let (corpus, _) = load_corpus(&job.corpus, &LoadOptions::default())?;
    let vocab = load_vocab(&job.models_dir)?;
    let members = load_members(&job.models_dir, &vocab)?;
    validate_ensemble(&members)?;

    let mut csv = String::from("member,macro_f1,f1_aggression,f1_loss,f1_other\n");
    let mut votes = String::from("member,tweet_id,gold,predicted,s_aggression,s_loss,s_other\n");
    let golds: Vec<Label> = corpus.tweets.iter().map(|t| t.label).collect();
    for (i, model) in members.iter().enumerate() {
        let mut predictions = Vec::with_capacity(corpus.len());
        for tweet in &corpus.tweets {
            let scores =
                model.class_scores(&vocab.encode(&tweet.tokens), &tweet.context_features)?;
            let predicted = raudit_core::models::argmax_label(&scores);
            let _ = writeln!(
                votes,
                "{i},{},{},{},{},{},{}",
                tweet.id,
                tweet.label.as_str(),
                predicted.as_str(),
                fmt6(scores[0]),
                fmt6(scores[1]),
                fmt6(scores[2])
            );
            predictions.push(predicted);
        }
        let f1 = f1_scores(&predictions, &golds)?;
        let _ = writeln!(
            csv,
            "{i},{},{},{},{}",
            fmt6(f1.macro_f1),
            fmt6(f1.per_class[0].f1),
            fmt6(f1.per_class[1].f1),
            fmt6(f1.per_class[2].f1)
        );
    }
    let mut ensemble_predictions = Vec::with_capacity(corpus.len());
    for tweet in &corpus.tweets {
        ensemble_predictions.push(majority_vote(
            &members,
            &vocab.encode(&tweet.tokens),
            &tweet.context_features,
        )?);
    }
    let f1 = f1_scores(&ensemble_predictions, &golds)?;
    let _ = writeln!(
        csv,
        "ensemble,{},{},{},{}",
        fmt6(f1.macro_f1),
        fmt6(f1.per_class[0].f1),
        fmt6(f1.per_class[1].f1),
        fmt6(f1.per_class[2].f1)
    );
    write_out(&args.out, "evaluation.csv", &csv)?;
    write_out(&args.out, "votes.csv", &votes)?;
    println!(
        "evaluated {} member(s) + ensemble: macro F1 {}",
        members.len(),
        fmt6(f1.macro_f1)
    );
    Ok(true)
}

fn cmd_report(args: ReportArgs) -> Result<bool, Box<dyn Error>> {
    let mut config: ExperimentConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(folds) = args.folds {
        config.folds = folds;
    }
    if !args.model.is_empty() {
        config.model_kinds = args.model.clone();
    }
    let report = run_experiment(&config)?;
    write_report(&report, &args.out)?;
    println!(
        "report written to {}; {} run cell(s), {} failure(s)",
        args.out.display(),
        report.runs.len(),
        report.failures.len()
    );
    Ok(report.is_success())
}
