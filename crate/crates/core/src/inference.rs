//! Answering by tail completion: rank every tail row by cosine distance to
//! `h + r`, then score predictions, combine with a partner model, and time
//! the ranking step.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::extractor::{ForwardPass, ModelParams};
use crate::features::{Annotation, AnswerVocab, SampleFeatures, Scoring};
use crate::numerics::{cosine_distance_with_norms, norm, Rng, Tensor};
use crate::trainer::Checkpoint;

pub const DEFAULT_ENSEMBLE_THRESHOLD: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub tail: usize,
    pub distance: f64,
}

/// Candidates in ascending distance; equal distances in ascending index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub sample_id: String,
    pub entries: Vec<RankEntry>,
}

impl RankResult {
    pub fn top(&self) -> Option<&RankEntry> {
        self.entries.first()
    }
}

fn rank_order(a: &RankEntry, b: &RankEntry) -> std::cmp::Ordering {
    a.distance.total_cmp(&b.distance).then(a.tail.cmp(&b.tail))
}

/// Tail table with cached row norms.
#[derive(Clone, Debug)]
pub struct TailIndex<'a> {
    tails: &'a Tensor,
    norms: Vec<f64>,
}

impl<'a> TailIndex<'a> {
    pub fn new(tails: &'a Tensor) -> Result<Self> {
        if tails.shape().len() != 2 || tails.rows() == 0 {
            return Err(Error::Domain(
                "cannot rank against an empty tail table".into(),
            ));
        }
        let norms: Vec<f64> = tails.row_iter().map(norm).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::Domain(format!("tail row {i} has zero norm")));
        }
        Ok(Self { tails, norms })
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    fn query_norm(&self, query: &[f64]) -> Result<f64> {
        if query.len() != self.tails.cols() {
            return Err(Error::Shape(format!(
                "query of width {} against tails of width {}",
                query.len(),
                self.tails.cols()
            )));
        }
        let nq = norm(query);
        if nq == 0.0 {
            return Err(Error::Domain("query h + r has zero norm".into()));
        }
        Ok(nq)
    }

    /// Distance from `query` to every row.
    pub fn distances(&self, query: &[f64]) -> Result<Vec<f64>> {
        let nq = self.query_norm(query)?;
        Ok(self
            .tails
            .row_iter()
            .zip(&self.norms)
            .map(|(t, &nt)| cosine_distance_with_norms(query, t, nq, nt))
            .collect())
    }

    /// The `k` nearest rows.
    pub fn rank(&self, query: &[f64], k: usize) -> Result<Vec<RankEntry>> {
        if k == 0 {
            return Err(Error::Domain("k must be >= 1".into()));
        }
        let nq = self.query_norm(query)?;
        let entries = self
            .tails
            .row_iter()
            .zip(&self.norms)
            .enumerate()
            .map(|(tail, (t, &nt))| RankEntry {
                tail,
                distance: cosine_distance_with_norms(query, t, nq, nt),
            });
        if k >= self.len() {
            let mut all: Vec<RankEntry> = entries.collect();
            all.sort_unstable_by(rank_order);
            return Ok(all);
        }
        // rows arrive in index order, so an equal distance never displaces
        let mut best: Vec<RankEntry> = Vec::with_capacity(k + 1);
        for e in entries {
            if best.len() == k && rank_order(&e, &best[k - 1]).is_ge() {
                continue;
            }
            let at = best.partition_point(|b| rank_order(b, &e).is_lt());
            best.insert(at, e);
            best.truncate(k);
        }
        Ok(best)
    }
}

/// One answered sample with the attention diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub answers: Vec<String>,
    pub tails: Vec<usize>,
    pub distances: Vec<f64>,
    pub selected_object: usize,
    pub alpha: Vec<f64>,
}

impl Prediction {
    pub fn answer(&self) -> &str {
        &self.answers[0]
    }

    pub fn rank(&self) -> RankResult {
        RankResult {
            sample_id: self.sample_id.clone(),
            entries: self
                .tails
                .iter()
                .zip(&self.distances)
                .map(|(&tail, &distance)| RankEntry { tail, distance })
                .collect(),
        }
    }
}

/// Read-only view of a checkpoint prepared for answering.
pub struct Predictor<'a> {
    params: &'a ModelParams,
    vocab: &'a AnswerVocab,
    index: TailIndex<'a>,
    tau: f64,
}

impl<'a> Predictor<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Result<Self> {
        if ckpt.vocab.is_empty() {
            return Err(Error::Domain("checkpoint has an empty vocabulary".into()));
        }
        Ok(Self {
            params: &ckpt.params,
            vocab: &ckpt.vocab,
            index: TailIndex::new(&ckpt.params.tails)?,
            tau: ckpt.config.tau,
        })
    }

    pub fn predict(&self, sample: &SampleFeatures, k: usize) -> Result<Prediction> {
        let pass = ForwardPass::run(sample, self.params, self.tau, None)?;
        let ranked = self.index.rank(&pass.query(), k)?;
        let result = pass.into_result();
        Ok(Prediction {
            sample_id: sample.sample_id.clone(),
            answers: ranked
                .iter()
                .map(|e| self.vocab.answer(e.tail).unwrap_or_default().to_string())
                .collect(),
            tails: ranked.iter().map(|e| e.tail).collect(),
            distances: ranked.iter().map(|e| e.distance).collect(),
            selected_object: result.selected_object,
            alpha: result.alpha,
        })
    }

    /// Predicts every sample, optionally across threads. Output order and
    /// values do not depend on `threads`.
    pub fn predict_all(
        &self,
        samples: &[&SampleFeatures],
        k: usize,
        threads: usize,
    ) -> Result<Vec<Prediction>> {
        let threads = threads.max(1).min(samples.len().max(1));
        if threads == 1 {
            return samples.iter().map(|s| self.predict(s, k)).collect();
        }
        let chunk = samples.len().div_ceil(threads);
        let parts: Vec<Result<Vec<Prediction>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| self.predict(s, k)).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("prediction worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(samples.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }
}

/// Ranks the tail table for one sample.
pub fn infer(sample: &SampleFeatures, ckpt: &Checkpoint, k: usize) -> Result<RankResult> {
    Ok(Predictor::new(ckpt)?.predict(sample, k)?.rank())
}

/// `min(matching annotators / 3, 1)`.
pub fn vqa_accuracy(predicted: &str, annotations: &[Annotation]) -> f64 {
    let matches: u32 = annotations
        .iter()
        .filter(|a| a.answer == predicted)
        .map(|a| a.count)
        .sum();
    (f64::from(matches) / 3.0).min(1.0)
}

pub fn score(predicted: &str, annotations: &[Annotation], scoring: Scoring) -> f64 {
    match scoring {
        Scoring::Soft => vqa_accuracy(predicted, annotations),
        Scoring::Exact => {
            if annotations.iter().any(|a| a.answer == predicted) {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerAccuracy {
    pub answer: String,
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scoring: Scoring,
    pub samples: usize,
    /// Mean per-sample score.
    pub accuracy: f64,
    /// Unweighted mean of per-answer accuracies.
    pub m_accuracy: f64,
    /// Fraction whose top answer is the majority annotation.
    pub top1: f64,
    pub per_answer: Vec<AnswerAccuracy>,
    pub predictions: Vec<Prediction>,
}

/// Scores predictions against their samples. Samples are grouped by majority
/// annotated answer (ties to the lexicographically smallest) for the
/// per-answer table; samples without annotations are skipped.
pub fn report(
    samples: &[&SampleFeatures],
    predictions: Vec<Prediction>,
    scoring: Scoring,
) -> Result<EvalReport> {
    if samples.len() != predictions.len() {
        return Err(Error::Alignment(format!(
            "{} samples but {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    let mut groups: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    let (mut n, mut total, mut top1) = (0usize, 0.0, 0usize);
    for (s, p) in samples.iter().zip(&predictions) {
        let Some(majority) = s.majority_answer() else {
            continue;
        };
        let value = score(p.answer(), &s.answers, scoring);
        n += 1;
        total += value;
        if p.answer() == majority {
            top1 += 1;
        }
        let g = groups.entry(majority).or_default();
        g.0 += 1;
        g.1 += value;
    }
    if n == 0 {
        return Err(Error::Domain("no annotated samples to evaluate".into()));
    }
    let per_answer: Vec<AnswerAccuracy> = groups
        .into_iter()
        .map(|(answer, (count, sum))| AnswerAccuracy {
            answer: answer.to_string(),
            n: count,
            accuracy: sum / count as f64,
        })
        .collect();
    let m_accuracy = per_answer.iter().map(|a| a.accuracy).sum::<f64>() / per_answer.len() as f64;
    Ok(EvalReport {
        scoring,
        samples: n,
        accuracy: total / n as f64,
        m_accuracy,
        top1: top1 as f64 / n as f64,
        per_answer,
        predictions,
    })
}

/// Predicts and scores every sample.
pub fn evaluate(
    samples: &[&SampleFeatures],
    scoring: Scoring,
    ckpt: &Checkpoint,
    k: usize,
    threads: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Domain("nothing to evaluate".into()));
    }
    let predictions = Predictor::new(ckpt)?.predict_all(samples, k, threads)?;
    report(samples, predictions, scoring)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleSource {
    PrimaryModel,
    PartnerModel,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleDecision {
    pub answer: String,
    pub source: EnsembleSource,
    /// Distance gap between the two best tails; infinite with one tail.
    #[serde(serialize_with = "finite_or_null")]
    pub gap: f64,
    pub threshold: f64,
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

/// Keeps the primary answer when its top-2 distance gap exceeds `m`,
/// otherwise defers to the partner.
pub fn ensemble(
    primary: &RankResult,
    vocab: &AnswerVocab,
    partner_answer: &str,
    m: f64,
) -> Result<EnsembleDecision> {
    let first = primary
        .top()
        .ok_or_else(|| Error::Domain(format!("{}: empty ranking", primary.sample_id)))?;
    let gap = match primary.entries.get(1) {
        Some(second) => second.distance - first.distance,
        None => f64::INFINITY,
    };
    let (answer, source) = if gap > m {
        let a = vocab
            .answer(first.tail)
            .ok_or_else(|| Error::Vocabulary(format!("tail {} outside vocabulary", first.tail)))?;
        (a.to_string(), EnsembleSource::PrimaryModel)
    } else {
        (partner_answer.to_string(), EnsembleSource::PartnerModel)
    };
    Ok(EnsembleDecision {
        answer,
        source,
        gap,
        threshold: m,
    })
}

/// One line of a partner model's prediction file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartnerPrediction {
    pub sample_id: String,
    pub answer: String,
}

/// Reads a line-delimited partner prediction file into a lookup by sample.
pub fn load_partner_predictions(path: &std::path::Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in crate::blob::read_jsonl::<PartnerPrediction>(path)? {
        if out.insert(p.sample_id.clone(), p.answer).is_some() {
            return Err(Error::Alignment(format!(
                "{}: duplicate partner prediction for {}",
                path.display(),
                p.sample_id
            )));
        }
    }
    Ok(out)
}

/// Mean over samples of the better of the two models' scores.
pub fn oracle_ensemble(
    primary: &[String],
    partner: &[String],
    truth: &[&[Annotation]],
    scoring: Scoring,
) -> Result<f64> {
    if primary.len() != partner.len() || primary.len() != truth.len() {
        return Err(Error::Alignment(format!(
            "{} primary, {} partner and {} ground-truth entries",
            primary.len(),
            partner.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Domain("nothing to score".into()));
    }
    let sum: f64 = primary
        .iter()
        .zip(partner)
        .zip(truth)
        .map(|((a, b), t)| score(a, t, scoring).max(score(b, t, scoring)))
        .sum();
    Ok(sum / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub queries: usize,
    pub objects: usize,
    pub tokens: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            queries: 100,
            objects: crate::features::DEFAULT_OBJECTS,
            tokens: 16,
            top_k: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub tails: usize,
    /// Seconds for extraction plus ranking over all queries.
    pub inference_s: f64,
    /// Seconds spent ranking alone.
    pub ranking_s: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub spec: BenchSpec,
    pub rows: Vec<BenchRow>,
    /// Whether each larger table ranks the smaller table's rows exactly as
    /// the smaller table does.
    pub prefix_consistent: bool,
}

/// Times extraction plus ranking against synthetic tail tables of each size,
/// single-threaded. Tables share a prefix: the table of size `n` is the
/// first `n` rows of the largest one.
pub fn bench_ranking(sizes: &[usize], params: &ModelParams, spec: BenchSpec) -> Result<BenchTable> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Domain("table sizes must be >= 1".into()));
    }
    if spec.queries == 0 || spec.top_k == 0 || spec.objects == 0 || spec.tokens == 0 {
        return Err(Error::Domain(
            "bench needs queries, objects, tokens and k >= 1".into(),
        ));
    }
    let embed = params.tails.cols();
    let dim = params.feature_dim();
    let largest = *sizes.iter().max().expect("non-empty");
    let mut rng = Rng::new(spec.seed);
    let bound = 1.0 / (embed as f64).sqrt();
    let table: Vec<f64> = (0..largest * embed)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    let queries: Vec<SampleFeatures> = (0..spec.queries)
        .map(|i| random_sample(i, spec.objects, spec.tokens, dim, &mut rng))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(sizes.len());
    let mut tops: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    for &n in sizes {
        let tails = Tensor::matrix(n, embed, table[..n * embed].to_vec())?;
        let index = TailIndex::new(&tails)?;
        let (mut inference, mut ranking) = (0.0, 0.0);
        let mut dists = Vec::with_capacity(queries.len());
        for q in &queries {
            let start = Instant::now();
            let pass = ForwardPass::run(q, params, 1.0, None)?;
            let query = pass.query();
            let mid = Instant::now();
            let ranked = index.rank(&query, spec.top_k)?;
            let end = Instant::now();
            std::hint::black_box(&ranked);
            inference += (end - start).as_secs_f64();
            ranking += (end - mid).as_secs_f64();
            dists.push(index.distances(&query)?);
        }
        rows.push(BenchRow {
            tails: n,
            inference_s: inference,
            ranking_s: ranking,
            ratio: ranking / inference,
        });
        tops.push((n, dists));
    }
    let smallest = *sizes.iter().min().expect("non-empty");
    let reference = &tops
        .iter()
        .find(|(n, _)| *n == smallest)
        .expect("present")
        .1;
    let prefix_consistent = tops.iter().all(|(_, d)| {
        d.iter().zip(reference).all(|(a, b)| {
            a[..smallest]
                .iter()
                .zip(b)
                .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    });
    Ok(BenchTable {
        spec,
        rows,
        prefix_consistent,
    })
}

fn random_sample(
    i: usize,
    objects: usize,
    tokens: usize,
    dim: usize,
    rng: &mut Rng,
) -> Result<SampleFeatures> {
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.normal()).collect() };
    Ok(SampleFeatures {
        sample_id: format!("q{i}"),
        image_id: format!("img{i}"),
        objects: Tensor::matrix(objects, dim, draw(objects * dim))?,
        tokens: Tensor::matrix(tokens, dim, draw(tokens * dim))?,
        cls: Tensor::vector(draw(dim))?,
        answers: Vec::new(),
        split: crate::features::Split::Test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::ModelDims;
    use crate::features::{generate_synthetic, Split, SynthSpec};
    use crate::numerics::Rng;
    use crate::trainer::{init_params, train_stage, Stage, TrainConfig};
    use proptest::prelude::*;

    fn table(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn brute_force(tails: &Tensor, q: &[f64]) -> Vec<usize> {
        let d: Vec<f64> = tails
            .row_iter()
            .map(|t| crate::numerics::cosine_distance(q, t).unwrap())
            .collect();
        let mut idx: Vec<usize> = (0..d.len()).collect();
        // stable sort keeps ascending index among equal distances
        idx.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap());
        idx
    }

    fn sample_with(answers: &[(&str, u32)]) -> SampleFeatures {
        SampleFeatures {
            sample_id: "s".into(),
            image_id: "i".into(),
            objects: Tensor::zeros(vec![1, 1]),
            tokens: Tensor::zeros(vec![1, 1]),
            cls: Tensor::zeros(vec![1]),
            answers: answers
                .iter()
                .map(|(a, c)| Annotation::new(*a, *c))
                .collect(),
            split: Split::Test,
        }
    }

    fn prediction(answer: &str) -> Prediction {
        Prediction {
            sample_id: "s".into(),
            answers: vec![answer.into()],
            tails: vec![0],
            distances: vec![0.0],
            selected_object: 0,
            alpha: vec![1.0],
        }
    }

    #[test]
    fn nearest_row_wins() {
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let idx = TailIndex::new(&t).unwrap();
        let r = idx.rank(&[0.9, 0.1], 1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].tail, 0);
    }

    #[test]
    fn oversized_k_returns_everything() {
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let r = TailIndex::new(&t).unwrap().rank(&[0.0, 1.0], 10).unwrap();
        assert_eq!(r.iter().map(|e| e.tail).collect::<Vec<_>>(), vec![1, 2, 0]);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let t = table(&[
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![1.0, 0.0],
        ]);
        let r = TailIndex::new(&t).unwrap().rank(&[1.0, 0.0], 4).unwrap();
        assert_eq!(
            r.iter().map(|e| e.tail).collect::<Vec<_>>(),
            vec![1, 2, 3, 0]
        );
        let top2 = TailIndex::new(&t).unwrap().rank(&[1.0, 0.0], 2).unwrap();
        assert_eq!(top2.iter().map(|e| e.tail).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn degenerate_inputs_are_domain_errors() {
        let t = table(&[vec![1.0, 0.0]]);
        let idx = TailIndex::new(&t).unwrap();
        assert_eq!(idx.rank(&[0.0, 0.0], 1).unwrap_err().category(), "domain");
        assert_eq!(idx.rank(&[1.0, 0.0], 0).unwrap_err().category(), "domain");
        let empty = Tensor::zeros(vec![0, 2]);
        assert_eq!(TailIndex::new(&empty).unwrap_err().category(), "domain");
        let zero = table(&[vec![0.0, 0.0]]);
        assert_eq!(TailIndex::new(&zero).unwrap_err().category(), "domain");
    }

    #[test]
    fn ranking_matches_brute_force() {
        let mut rng = Rng::new(11);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..6).map(|_| rng.normal()).collect())
            .collect();
        let t = table(&rows);
        let idx = TailIndex::new(&t).unwrap();
        for _ in 0..20 {
            let q: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let got: Vec<usize> = idx.rank(&q, 200).unwrap().iter().map(|e| e.tail).collect();
            assert_eq!(got, brute_force(&t, &q));
        }
    }

    #[test]
    fn vqa_accuracy_cases() {
        let ann = [Annotation::new("cat", 3), Annotation::new("dog", 1)];
        assert_eq!(vqa_accuracy("cat", &ann), 1.0);
        assert_eq!(vqa_accuracy("dog", &ann), 1.0 / 3.0);
        assert_eq!(vqa_accuracy("cow", &ann), 0.0);
        assert_eq!(vqa_accuracy("cat", &[Annotation::new("cat", 7)]), 1.0);
        assert_eq!(score("dog", &ann, Scoring::Exact), 1.0);
        assert_eq!(score("cow", &ann, Scoring::Exact), 0.0);
    }

    #[test]
    fn m_accuracy_hand_example() {
        let samples = [
            sample_with(&[("cat", 3)]),
            sample_with(&[("cat", 3)]),
            sample_with(&[("cat", 3)]),
            sample_with(&[("dog", 3)]),
        ];
        let refs: Vec<&SampleFeatures> = samples.iter().collect();
        let preds = vec![
            prediction("cat"),
            prediction("cat"),
            prediction("cat"),
            prediction("cat"),
        ];
        let r = report(&refs, preds, Scoring::Soft).unwrap();
        assert!((r.accuracy - 0.75).abs() < 1e-12);
        assert!((r.m_accuracy - 0.5).abs() < 1e-12);
        assert_eq!(r.per_answer.len(), 2);
        assert_eq!(r.per_answer[0].answer, "cat");
        assert_eq!(r.per_answer[0].n, 3);
    }

    #[test]
    fn all_correct_scores_one() {
        let samples = [sample_with(&[("a", 3)]), sample_with(&[("b", 4)])];
        let refs: Vec<&SampleFeatures> = samples.iter().collect();
        let r = report(&refs, vec![prediction("a"), prediction("b")], Scoring::Soft).unwrap();
        assert_eq!((r.accuracy, r.m_accuracy, r.top1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn report_checks_alignment() {
        let samples = [sample_with(&[("a", 3)])];
        let refs: Vec<&SampleFeatures> = samples.iter().collect();
        let err = report(&refs, vec![], Scoring::Soft).unwrap_err();
        assert_eq!(err.category(), "alignment");
    }

    fn ranked(distances: &[f64]) -> RankResult {
        RankResult {
            sample_id: "s".into(),
            entries: distances
                .iter()
                .enumerate()
                .map(|(tail, &distance)| RankEntry { tail, distance })
                .collect(),
        }
    }

    #[test]
    fn ensemble_threshold_rule() {
        let vocab = AnswerVocab::from(vec!["cat".to_string(), "dog".to_string()]);
        let d = ensemble(
            &ranked(&[0.2, 0.3]),
            &vocab,
            "cow",
            DEFAULT_ENSEMBLE_THRESHOLD,
        )
        .unwrap();
        assert_eq!(
            (d.answer.as_str(), d.source),
            ("cat", EnsembleSource::PrimaryModel)
        );
        let d = ensemble(&ranked(&[0.2, 0.25]), &vocab, "cow", 0.07).unwrap();
        assert_eq!(
            (d.answer.as_str(), d.source),
            ("cow", EnsembleSource::PartnerModel)
        );
        let d = ensemble(&ranked(&[0.2]), &vocab, "cow", 0.07).unwrap();
        assert_eq!(d.source, EnsembleSource::PrimaryModel);
        assert!(d.gap.is_infinite());
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"gap\":null"));
    }

    #[test]
    fn ensemble_extreme_thresholds() {
        let vocab = AnswerVocab::from(vec!["cat".to_string(), "dog".to_string()]);
        for r in [ranked(&[0.2, 0.2]), ranked(&[0.0, 2.0]), ranked(&[0.5])] {
            let lo = ensemble(&r, &vocab, "x", f64::NEG_INFINITY).unwrap();
            assert_eq!(lo.source, EnsembleSource::PrimaryModel);
            let hi = ensemble(&r, &vocab, "x", f64::INFINITY).unwrap();
            assert_eq!(hi.source, EnsembleSource::PartnerModel);
        }
    }

    #[test]
    fn oracle_ensemble_cases() {
        let truth = [Annotation::new("cat", 3)];
        let t: Vec<&[Annotation]> = vec![&truth, &truth];
        let primary = vec!["cat".to_string(), "dog".to_string()];
        let partner = vec!["dog".to_string(), "dog".to_string()];
        let v = oracle_ensemble(&primary, &partner, &t, Scoring::Soft).unwrap();
        assert_eq!(v, 0.5);
        let err = oracle_ensemble(&primary, &partner[..1], &t, Scoring::Soft).unwrap_err();
        assert_eq!(err.category(), "alignment");
    }

    fn trained() -> (crate::features::Dataset, Checkpoint) {
        let mut spec = SynthSpec::desk(4, 20, 3);
        spec.dim = 8;
        spec.objects = 4;
        let data = generate_synthetic(&spec).unwrap();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 16,
            dims: ModelDims {
                affinity: 8,
                hidden: 16,
                embed: 8,
            },
            ..TrainConfig::desk(Stage::Pretrain)
        };
        let ckpt = train_stage(&data, None, &config).unwrap().0;
        (data, ckpt)
    }

    #[test]
    fn threaded_prediction_matches_single_thread() {
        let (data, ckpt) = trained();
        let samples: Vec<&SampleFeatures> = data.samples.iter().collect();
        let p = Predictor::new(&ckpt).unwrap();
        let one = p.predict_all(&samples, 3, 1).unwrap();
        let four = p.predict_all(&samples, 3, 4).unwrap();
        assert_eq!(one, four);
        assert_eq!(one.len(), samples.len());
        assert_eq!(one[0].answers.len(), 3);
        let r = infer(samples[0], &ckpt, 100).unwrap();
        assert_eq!(r.entries.len(), ckpt.vocab.len());
        assert_eq!(r.entries[..3], one[0].rank().entries[..]);
    }

    #[test]
    fn evaluate_metrics_are_in_range() {
        let (data, ckpt) = trained();
        let test: Vec<&SampleFeatures> = data.split(Split::Test).collect();
        let r = evaluate(&test, data.meta.scoring, &ckpt, 1, 2).unwrap();
        for v in [r.accuracy, r.m_accuracy, r.top1] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(r.predictions.len(), test.len());
    }

    #[test]
    fn bench_emits_one_row_per_size() {
        let vocab = AnswerVocab::from(vec!["a".to_string()]);
        let dims = ModelDims {
            affinity: 4,
            hidden: 8,
            embed: 6,
        };
        let params = init_params(&vocab, 5, dims, &mut Rng::new(0)).unwrap();
        let spec = BenchSpec {
            queries: 3,
            objects: 4,
            tokens: 2,
            top_k: 2,
            seed: 1,
        };
        let t = bench_ranking(&[10, 50, 20], &params, spec).unwrap();
        assert_eq!(
            t.rows.iter().map(|r| r.tails).collect::<Vec<_>>(),
            vec![10, 50, 20]
        );
        assert!(t.prefix_consistent);
        assert!(bench_ranking(&[], &params, spec).is_err());
    }

    proptest! {
        #[test]
        fn positive_row_rescaling_keeps_order(
            seed in 0u64..1000,
            scales in proptest::collection::vec(0.1f64..10.0, 12),
        ) {
            let mut rng = Rng::new(seed);
            let rows: Vec<Vec<f64>> = (0..12)
                .map(|_| (0..4).map(|_| rng.normal()).collect())
                .collect();
            let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let scaled: Vec<Vec<f64>> = rows
                .iter()
                .zip(&scales)
                .map(|(r, s)| r.iter().map(|x| x * s).collect())
                .collect();
            let (a, b) = (table(&rows), table(&scaled));
            let ra: Vec<usize> = TailIndex::new(&a).unwrap().rank(&q, 12).unwrap().iter().map(|e| e.tail).collect();
            let rb: Vec<usize> = TailIndex::new(&b).unwrap().rank(&q, 12).unwrap().iter().map(|e| e.tail).collect();
            prop_assert_eq!(ra.clone(), rb);
            let mut sorted = ra;
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        }

        #[test]
        fn vqa_accuracy_monotone_and_saturating(c in 0u32..20) {
            let at = |n: u32| if n == 0 {
                vqa_accuracy("a", &[Annotation::new("b", 1)])
            } else {
                vqa_accuracy("a", &[Annotation::new("a", n)])
            };
            prop_assert!(at(c) <= at(c + 1));
            if c >= 3 {
                prop_assert_eq!(at(c), 1.0);
            }
        }

        #[test]
        fn m_accuracy_ignores_group_duplication(
            hits in proptest::collection::vec(proptest::bool::ANY, 2..12),
            dup in 0usize..3,
        ) {
            let labels = ["a", "b", "c"];
            let samples: Vec<SampleFeatures> = hits
                .iter()
                .enumerate()
                .map(|(i, _)| sample_with(&[(labels[i % 3], 3)]))
                .collect();
            let preds: Vec<Prediction> = hits
                .iter()
                .enumerate()
                .map(|(i, &h)| prediction(if h { labels[i % 3] } else { "zzz" }))
                .collect();
            let refs: Vec<&SampleFeatures> = samples.iter().collect();
            let base = report(&refs, preds.clone(), Scoring::Soft).unwrap();

            let target = labels[dup % 3];
            let mut s2 = samples.clone();
            let mut p2 = preds.clone();
            for (s, p) in samples.iter().zip(&preds) {
                if s.answers[0].answer == target {
                    s2.push(s.clone());
                    p2.push(p.clone());
                }
            }
            let refs2: Vec<&SampleFeatures> = s2.iter().collect();
            let again = report(&refs2, p2, Scoring::Soft).unwrap();
            prop_assert!((base.m_accuracy - again.m_accuracy).abs() < 1e-12);
        }
    }
}
