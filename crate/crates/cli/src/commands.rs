use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use trikb::blob::{ensure_dir, write_json, write_jsonl};
use trikb::features::{
    build_vocab, generate_synthetic, load_dataset, write_dataset, Dataset, SynthSpec,
};
use trikb::inference::{
    bench_ranking, ensemble, evaluate, load_partner_predictions, oracle_ensemble, score, BenchSpec,
    EnsembleSource, Predictor,
};
use trikb::knowledge::{accumulate, export_graph, KnowledgeBase};
use trikb::trainer::{extend_for_stage, init_params, train_stage, Checkpoint, Stage, TrainConfig};
use trikb::{AnswerVocab, LossToggles, ModelDims, Rng, SampleFeatures};

use crate::run::{CliError, CliResult, RunManifest};
use crate::{
    AccumulateArgs, BenchArgs, Cli, Command, EnsembleArgs, EvalArgs, ExportArgs, InferArgs,
    SplitArg, SynthArgs, TrainArgs,
};

pub const FEATURES_FILE: &str = "features.jsonl";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const HISTOGRAM_FILE: &str = "per_answer.tsv";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const ENSEMBLE_SUMMARY: &str = "ensemble.json";
pub const GRAPH_FILE: &str = "graph.json";
pub const BENCH_JSON: &str = "bench.json";
pub const BENCH_TSV: &str = "bench.tsv";

/// Stream label for new tail rows added between stages.
const EXTEND_STREAM: u64 = 0x7461_696c;

struct Paths {
    root: Option<PathBuf>,
}

impl Paths {
    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// A feature manifest, or the default manifest inside a directory.
    fn features(&self, p: &Path) -> PathBuf {
        let p = self.resolve(p);
        if p.is_dir() {
            p.join(FEATURES_FILE)
        } else {
            p
        }
    }

    fn out_dir(&self, p: &Path) -> CliResult<PathBuf> {
        let p = self.resolve(p);
        ensure_dir(&p)?;
        Ok(p)
    }
}

pub fn dispatch(cli: Cli) -> CliResult {
    let paths = Paths {
        root: cli.data_root,
    };
    match cli.command {
        Command::Synth(a) => synth(&paths, a),
        Command::Train(a) => train(&paths, a),
        Command::Accumulate(a) => accumulate_cmd(&paths, a),
        Command::Infer(a) => infer(&paths, a),
        Command::Eval(a) => eval(&paths, a),
        Command::Ensemble(a) => ensemble_cmd(&paths, a),
        Command::ExportKg(a) => export_kg(&paths, a),
        Command::Bench(a) => bench(&paths, a),
    }
}

fn select(data: &Dataset, split: SplitArg) -> Vec<&SampleFeatures> {
    match split.split() {
        Some(s) => data.split(s).collect(),
        None => data.samples.iter().collect(),
    }
}

fn synth(paths: &Paths, a: SynthArgs) -> CliResult {
    let spec = SynthSpec {
        classes: a.classes,
        per_class: a.per_class,
        noise: a.noise,
        seed: a.seed,
        objects: a.objects,
        dim: a.dim,
        tokens: a.tokens,
        train_fraction: a.train_fraction,
        class_offset: a.class_offset,
    };
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut run = RunManifest::start("synth");
    run.seed(a.seed).config(&spec);
    let out = paths.out_dir(&a.out)?;
    let data = generate_synthetic(&spec)?;
    let manifest = out.join(FEATURES_FILE);
    write_dataset(&data, &manifest)?;
    let back = load_dataset(&manifest)?;
    println!(
        "wrote {} samples over {} classes ({} train) to {}",
        back.samples.len(),
        spec.classes,
        back.split(trikb::Split::Train).count(),
        manifest.display()
    );
    run.output(&manifest)
        .output(&manifest.with_extension("bin"));
    run.finish(&out)
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let stage: Stage = a.stage.into();
    let mut c = TrainConfig::for_profile(a.profile.into(), stage);
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.tau {
        c.tau = v;
    }
    if let Some(v) = a.margin {
        c.margin = v;
    }
    if let Some(v) = a.weight_decay {
        c.weight_decay = v;
    }
    c.grad_clip = a.grad_clip;
    c.seed = a.seed;
    c.shuffle = !a.no_shuffle;
    c.weight_by_count = a.weight_by_count;
    c.toggles = LossToggles {
        transe: !a.no_l_transe,
        tri: !a.no_l_tri,
        sem: !a.no_l_sem,
    };
    c
}

fn train(paths: &Paths, a: TrainArgs) -> CliResult {
    let mut config = train_config(&a);
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if config.stage == Stage::Finetune && a.checkpoint_in.is_none() && !a.from_scratch {
        return Err(CliError::Usage(
            "fine-tuning needs --checkpoint-in (or --from-scratch)".into(),
        ));
    }
    let mut run = RunManifest::start("train");
    let features = paths.features(&a.features);
    run.input(&features);
    let data = load_dataset(&features)?;
    let start = match &a.checkpoint_in {
        Some(dir) => {
            let dir = paths.resolve(dir);
            run.input(&dir);
            let ckpt = Checkpoint::load(&dir)?;
            config.dims = ckpt.params.dims();
            let vocab = build_vocab(&[&data], Some(&ckpt.vocab));
            let mut rng = Rng::new(config.seed).fork(EXTEND_STREAM);
            Some(extend_for_stage(&ckpt, &vocab, config.stage, &mut rng)?)
        }
        None => None,
    };
    let (ckpt, log) = train_stage(&data, start, &config)?;
    let out = paths.out_dir(&a.out)?;
    ckpt.save(&out)?;
    if Checkpoint::load(&out)? != ckpt {
        return Err(trikb::Error::Integrity("checkpoint did not reload identically".into()).into());
    }
    let log_path = out.join(TRAIN_LOG);
    write_jsonl(&log_path, &log)?;
    if let Some(last) = log.last() {
        println!(
            "{} stage: {} epochs, vocabulary {}, final loss {:.6} (transe {:.6}, tri {:.6}, sem {:.6})",
            config.stage,
            log.len(),
            ckpt.vocab.len(),
            last.total,
            last.l_transe,
            last.l_tri,
            last.l_sem
        );
    }
    run.seed(config.seed).config(&config);
    run.output(&out.join(trikb::trainer::CHECKPOINT_MANIFEST))
        .output(&out.join(trikb::trainer::CHECKPOINT_BLOB))
        .output(&log_path);
    run.finish(&out)
}

fn accumulate_cmd(paths: &Paths, a: AccumulateArgs) -> CliResult {
    let mut run = RunManifest::start("accumulate");
    let features = paths.features(&a.features);
    let ckpt_dir = paths.resolve(&a.checkpoint);
    run.input(&features).input(&ckpt_dir);
    let data = load_dataset(&features)?;
    let ckpt = Checkpoint::load(&ckpt_dir)?;
    let existing = match &a.kb_in {
        Some(dir) => {
            let dir = paths.resolve(dir);
            run.input(&dir);
            Some(KnowledgeBase::load(&dir)?)
        }
        None => None,
    };
    let mut kb = accumulate(&data, &ckpt, existing.as_ref())?;
    let out = paths.out_dir(&a.out)?;
    kb.seal_and_save(&out)?;
    let back = KnowledgeBase::load(&out)?;
    let meta = back.metadata();
    println!(
        "knowledge base: {} triplets, {} duplicate (image, answer) pairs",
        meta.triplets, meta.duplicate_image_answer
    );
    run.config(&meta);
    run.output(&out.join(trikb::knowledge::KB_MANIFEST))
        .output(&out.join(trikb::knowledge::KB_BLOB));
    run.finish(&out)
}

fn infer(paths: &Paths, a: InferArgs) -> CliResult {
    if a.top_k == 0 {
        return Err(CliError::Usage("--top-k must be >= 1".into()));
    }
    let mut run = RunManifest::start("infer");
    let features = paths.features(&a.features);
    let ckpt_dir = paths.resolve(&a.checkpoint);
    run.input(&features).input(&ckpt_dir);
    let data = load_dataset(&features)?;
    let ckpt = Checkpoint::load(&ckpt_dir)?;
    let samples = select(&data, a.split);
    let predictions = Predictor::new(&ckpt)?.predict_all(&samples, a.top_k, a.threads)?;
    let out = paths.out_dir(&a.out)?;
    let dump = out.join(PREDICTIONS_FILE);
    write_jsonl(&dump, &predictions)?;
    println!(
        "{} predictions with up to {} candidates each",
        predictions.len(),
        a.top_k
    );
    run.config(&serde_json::json!({ "top_k": a.top_k, "split": format!("{:?}", a.split) }));
    run.output(&dump);
    run.finish(&out)
}

fn eval(paths: &Paths, a: EvalArgs) -> CliResult {
    let mut run = RunManifest::start("eval");
    let features = paths.features(&a.features);
    let ckpt_dir = paths.resolve(&a.checkpoint);
    run.input(&features).input(&ckpt_dir);
    let data = load_dataset(&features)?;
    let ckpt = Checkpoint::load(&ckpt_dir)?;
    let samples = select(&data, a.split);
    let report = evaluate(&samples, data.meta.scoring, &ckpt, 1, a.threads)?;
    let out = paths.out_dir(&a.out)?;
    let report_path = out.join(REPORT_FILE);
    write_json(&report_path, &report)?;
    let hist = out.join(HISTOGRAM_FILE);
    let mut text = String::from("answer\tn\taccuracy\n");
    for row in &report.per_answer {
        text.push_str(&format!("{}\t{}\t{}\n", row.answer, row.n, row.accuracy));
    }
    std::fs::write(&hist, text).map_err(|e| trikb::Error::Io {
        path: hist.clone(),
        source: e,
    })?;
    println!(
        "accuracy {:.4}  mAccuracy {:.4}  top-1 {:.4}  over {} samples",
        report.accuracy, report.m_accuracy, report.top1, report.samples
    );
    run.config(
        &serde_json::json!({ "split": format!("{:?}", a.split), "scoring": report.scoring }),
    );
    run.output(&report_path).output(&hist);
    run.finish(&out)
}

#[derive(Serialize)]
struct DecisionRecord<'a> {
    sample_id: &'a str,
    #[serde(flatten)]
    decision: trikb::inference::EnsembleDecision,
}

#[derive(Serialize)]
struct EnsembleSummary {
    samples: usize,
    threshold: f64,
    primary_chosen: usize,
    partner_chosen: usize,
    primary_accuracy: f64,
    partner_accuracy: f64,
    ensemble_accuracy: f64,
    oracle_accuracy: f64,
}

fn ensemble_cmd(paths: &Paths, a: EnsembleArgs) -> CliResult {
    if a.m.is_nan() {
        return Err(CliError::Usage("--m must be a number".into()));
    }
    let mut run = RunManifest::start("ensemble");
    let features = paths.features(&a.features);
    let ckpt_dir = paths.resolve(&a.checkpoint);
    let partner_path = paths.resolve(&a.partner);
    run.input(&features).input(&ckpt_dir).input(&partner_path);
    let data = load_dataset(&features)?;
    let ckpt = Checkpoint::load(&ckpt_dir)?;
    let partner = load_partner_predictions(&partner_path)?;
    let samples = select(&data, a.split);
    let predictor = Predictor::new(&ckpt)?;

    let mut records = Vec::with_capacity(samples.len());
    let (mut primary_answers, mut partner_answers, mut truth) =
        (Vec::new(), Vec::new(), Vec::new());
    let (mut primary_score, mut partner_score, mut ensemble_score) = (0.0, 0.0, 0.0);
    let mut chosen: BTreeMap<&'static str, usize> = BTreeMap::new();
    for s in &samples {
        let other = partner.get(&s.sample_id).ok_or_else(|| {
            trikb::Error::Alignment(format!("no partner prediction for {}", s.sample_id))
        })?;
        let p = predictor.predict(s, 2)?;
        let decision = ensemble(&p.rank(), &ckpt.vocab, other, a.m)?;
        *chosen
            .entry(match decision.source {
                EnsembleSource::PrimaryModel => "primary",
                EnsembleSource::PartnerModel => "partner",
            })
            .or_default() += 1;
        if !s.answers.is_empty() {
            let scoring = data.meta.scoring;
            primary_score += score(p.answer(), &s.answers, scoring);
            partner_score += score(other, &s.answers, scoring);
            ensemble_score += score(&decision.answer, &s.answers, scoring);
            primary_answers.push(p.answer().to_string());
            partner_answers.push(other.clone());
            truth.push(s.answers.as_slice());
        }
        records.push(DecisionRecord {
            sample_id: &s.sample_id,
            decision,
        });
    }
    let n = truth.len();
    let oracle = if n > 0 {
        oracle_ensemble(
            &primary_answers,
            &partner_answers,
            &truth,
            data.meta.scoring,
        )?
    } else {
        0.0
    };
    let mean = |x: f64| if n > 0 { x / n as f64 } else { 0.0 };
    let summary = EnsembleSummary {
        samples: samples.len(),
        threshold: a.m,
        primary_chosen: chosen.get("primary").copied().unwrap_or(0),
        partner_chosen: chosen.get("partner").copied().unwrap_or(0),
        primary_accuracy: mean(primary_score),
        partner_accuracy: mean(partner_score),
        ensemble_accuracy: mean(ensemble_score),
        oracle_accuracy: oracle,
    };
    let out = paths.out_dir(&a.out)?;
    let decisions = out.join(DECISIONS_FILE);
    write_jsonl(&decisions, &records)?;
    let summary_path = out.join(ENSEMBLE_SUMMARY);
    write_json(&summary_path, &summary)?;
    println!(
        "ensemble {:.4} (primary {:.4}, partner {:.4}, oracle {:.4}); primary chosen {} of {}",
        summary.ensemble_accuracy,
        summary.primary_accuracy,
        summary.partner_accuracy,
        summary.oracle_accuracy,
        summary.primary_chosen,
        summary.samples
    );
    run.config(&serde_json::json!({ "m": a.m, "split": format!("{:?}", a.split) }));
    run.output(&decisions).output(&summary_path);
    run.finish(&out)
}

fn export_kg(paths: &Paths, a: ExportArgs) -> CliResult {
    let mut run = RunManifest::start("export-kg");
    let kb_dir = paths.resolve(&a.kb);
    run.input(&kb_dir);
    let kb = KnowledgeBase::load(&kb_dir)?;
    let graph = export_graph(&kb);
    let out = paths.out_dir(&a.out)?;
    let path = out.join(GRAPH_FILE);
    write_json(&path, &graph)?;
    println!(
        "graph: {} nodes, {} edges",
        graph.nodes.len(),
        graph.edges.len()
    );
    run.output(&path);
    run.finish(&out)
}

fn bench(paths: &Paths, a: BenchArgs) -> CliResult {
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        return Err(CliError::Usage(
            "--sizes must list positive table sizes".into(),
        ));
    }
    let mut run = RunManifest::start("bench");
    let params = match &a.checkpoint {
        Some(dir) => {
            let dir = paths.resolve(dir);
            run.input(&dir);
            Checkpoint::load(&dir)?.params
        }
        None => {
            let vocab = AnswerVocab::from(vec!["_".to_string()]);
            init_params(
                &vocab,
                trikb::features::DEFAULT_FEATURE_DIM,
                ModelDims::FULL,
                &mut Rng::new(a.seed),
            )?
        }
    };
    let spec = BenchSpec {
        queries: a.queries,
        objects: trikb::features::DEFAULT_OBJECTS,
        tokens: a.tokens,
        top_k: a.top_k,
        seed: a.seed,
    };
    let table = bench_ranking(&a.sizes, &params, spec)?;
    let out = paths.out_dir(&a.out)?;
    let json = out.join(BENCH_JSON);
    write_json(&json, &table)?;
    let tsv = out.join(BENCH_TSV);
    let mut text = String::from("tails\tinference_s\tranking_s\tratio\n");
    println!(
        "{:>10} {:>14} {:>12} {:>8}",
        "tails", "inference (s)", "ranking (s)", "ratio"
    );
    for r in &table.rows {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.tails, r.inference_s, r.ranking_s, r.ratio
        ));
        println!(
            "{:>10} {:>14.4} {:>12.4} {:>8.4}",
            r.tails, r.inference_s, r.ranking_s, r.ratio
        );
    }
    std::fs::write(&tsv, text).map_err(|e| trikb::Error::Io {
        path: tsv.clone(),
        source: e,
    })?;
    println!("prefix-consistent rankings: {}", table.prefix_consistent);
    run.seed(a.seed).config(&spec);
    run.output(&json).output(&tsv);
    run.finish(&out)
}
