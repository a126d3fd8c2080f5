//! Feature interchange (MKF-1), answer vocabularies and the synthetic
//! desk-scale dataset generator.
//!
//! An MKF-1 dataset is two files side by side:
//!
//! * a UTF-8 manifest with one JSON object per line. The first line is the
//!   header (`format`, `objects`, `dim`, `scoring`, `samples`, `blob`,
//!   `blob_bytes`); every following line describes one sample (`sample_id`,
//!   `image_id`, `split`, `tokens`, `offset`, `floats`, `answers`).
//! * a flat blob of little-endian `f32`. Each sample occupies
//!   `(objects + tokens + 1) * dim` floats starting at byte `offset`, laid out
//!   row-major as the object matrix, then the token matrix, then the fused
//!   `[CLS]` vector.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const FEATURE_FORMAT: &str = "MKF-1";
pub const DEFAULT_OBJECTS: usize = 36;
pub const DEFAULT_FEATURE_DIM: usize = 768;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// How predictions are scored against annotations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    /// `min(matching annotators / 3, 1)`
    #[default]
    Soft,
    /// Exact match against the single annotated answer.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub answer: String,
    pub count: u32,
}

impl Annotation {
    pub fn new(answer: impl Into<String>, count: u32) -> Self {
        Self {
            answer: answer.into(),
            count,
        }
    }
}

/// One question/image pair as produced by the upstream encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeatures {
    pub sample_id: String,
    pub image_id: String,
    /// `[K × d_v]` object embeddings.
    pub objects: Tensor,
    /// `[D × d_v]` question token embeddings.
    pub tokens: Tensor,
    /// `[d_v]` fused cross-modal vector.
    pub cls: Tensor,
    pub answers: Vec<Annotation>,
    pub split: Split,
}

impl SampleFeatures {
    /// The answer given by the most annotators, ties broken lexicographically.
    pub fn majority_answer(&self) -> Option<&str> {
        self.answers
            .iter()
            .max_by(|a, b| a.count.cmp(&b.count).then_with(|| b.answer.cmp(&a.answer)))
            .map(|a| a.answer.as_str())
    }

    fn float_count(&self) -> usize {
        self.objects.len() + self.tokens.len() + self.cls.len()
    }
}

/// Append-only bijection between answer strings and tail indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for AnswerVocab {
    fn from(answers: Vec<String>) -> Self {
        let mut vocab = AnswerVocab::default();
        for a in answers {
            vocab.insert(&a);
        }
        vocab
    }
}

impl From<AnswerVocab> for Vec<String> {
    fn from(v: AnswerVocab) -> Self {
        v.answers
    }
}

impl AnswerVocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index of `answer`, assigning the next free one if new.
    pub fn insert(&mut self, answer: &str) -> usize {
        if let Some(&i) = self.index.get(answer) {
            return i;
        }
        let i = self.answers.len();
        self.answers.push(answer.to_owned());
        self.index.insert(answer.to_owned(), i);
        i
    }

    pub fn get(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, index: usize) -> Option<&str> {
        self.answers.get(index).map(String::as_str)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    /// True when `self` starts with every entry of `prefix`, in order.
    pub fn extends(&self, prefix: &AnswerVocab) -> bool {
        self.answers.len() >= prefix.answers.len()
            && self
                .answers
                .iter()
                .zip(&prefix.answers)
                .all(|(a, b)| a == b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Objects per image (K).
    pub objects: usize,
    /// Encoder width (d_v).
    pub dim: usize,
    #[serde(default)]
    pub scoring: Scoring,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SampleFeatures>,
    pub vocab: AnswerVocab,
}

impl Dataset {
    /// Builds a dataset, validating dimensions and deriving the vocabulary
    /// from the train split.
    pub fn new(meta: DatasetMeta, samples: Vec<SampleFeatures>) -> Result<Self> {
        for s in &samples {
            validate_sample(&meta, s)?;
        }
        let mut ds = Self {
            meta,
            samples,
            vocab: AnswerVocab::new(),
        };
        ds.vocab = build_vocab(&[&ds], None);
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleFeatures> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// A copy restricted to one split. The vocabulary is kept as-is.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: self.split(split).cloned().collect(),
            vocab: self.vocab.clone(),
        }
    }
}

fn validate_sample(meta: &DatasetMeta, s: &SampleFeatures) -> Result<()> {
    let id = &s.sample_id;
    if s.objects.shape() != [meta.objects, meta.dim] {
        return Err(Error::Schema(format!(
            "{id}: object matrix {:?}, dataset declares {}x{}",
            s.objects.shape(),
            meta.objects,
            meta.dim
        )));
    }
    if s.tokens.shape().len() != 2 || s.tokens.rows() == 0 || s.tokens.cols() != meta.dim {
        return Err(Error::Schema(format!(
            "{id}: token matrix {:?} must be Dx{} with D >= 1",
            s.tokens.shape(),
            meta.dim
        )));
    }
    if s.cls.shape() != [meta.dim] {
        return Err(Error::Schema(format!(
            "{id}: cls vector {:?}, expected [{}]",
            s.cls.shape(),
            meta.dim
        )));
    }
    if s.split != Split::Test && s.answers.is_empty() {
        return Err(Error::Schema(format!("{id}: no annotated answers")));
    }
    if s.answers.iter().any(|a| a.count == 0) {
        return Err(Error::Schema(format!("{id}: annotator count must be >= 1")));
    }
    Ok(())
}

/// Union of train-split answers, appended after `existing` in first-seen
/// order.
pub fn build_vocab(datasets: &[&Dataset], existing: Option<&AnswerVocab>) -> AnswerVocab {
    let mut vocab = existing.cloned().unwrap_or_default();
    for ds in datasets {
        for s in ds.split(Split::Train) {
            for a in &s.answers {
                vocab.insert(&a.answer);
            }
        }
    }
    vocab
}

/// One (sample, answer) pair used as a training triplet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    /// Index into `Dataset::samples`.
    pub sample: usize,
    pub answer: String,
    pub count: u32,
}

/// One instance per distinct (train sample, answer) pair, counts summed.
pub fn expand_annotations(d: &Dataset) -> Vec<TrainingInstance> {
    let mut out = Vec::new();
    for (si, s) in d.samples.iter().enumerate() {
        if s.split != Split::Train {
            continue;
        }
        let start = out.len();
        for a in &s.answers {
            match out[start..]
                .iter_mut()
                .find(|i: &&mut TrainingInstance| i.answer == a.answer)
            {
                Some(existing) => existing.count += a.count,
                None => out.push(TrainingInstance {
                    sample: si,
                    answer: a.answer.clone(),
                    count: a.count,
                }),
            }
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    objects: usize,
    dim: usize,
    scoring: Scoring,
    samples: usize,
    blob: String,
    blob_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    sample_id: String,
    image_id: String,
    split: Split,
    tokens: usize,
    offset: u64,
    floats: u64,
    answers: Vec<Annotation>,
}

fn blob_path_for(manifest: &Path) -> (PathBuf, String) {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "features".into());
    let name = format!("{stem}.bin");
    (manifest.with_file_name(&name), name)
}

/// Writes `d` as a canonical MKF-1 manifest at `manifest_path` plus a blob
/// named after the manifest stem.
pub fn write_dataset(d: &Dataset, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let (blob_path, blob_name) = blob_path_for(manifest_path);

    let total_floats: usize = d.samples.iter().map(SampleFeatures::float_count).sum();
    let mut blob = Vec::with_capacity(total_floats * 4);
    let mut records = Vec::with_capacity(d.samples.len());
    for s in &d.samples {
        let offset = blob.len() as u64;
        for t in [&s.objects, &s.tokens, &s.cls] {
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        records.push(ManifestRecord {
            sample_id: s.sample_id.clone(),
            image_id: s.image_id.clone(),
            split: s.split,
            tokens: s.tokens.rows(),
            offset,
            floats: s.float_count() as u64,
            answers: s.answers.clone(),
        });
    }

    let header = ManifestHeader {
        format: FEATURE_FORMAT.into(),
        objects: d.meta.objects,
        dim: d.meta.dim,
        scoring: d.meta.scoring,
        samples: d.samples.len(),
        blob: blob_name,
        blob_bytes: blob.len() as u64,
    };
    let mut text = Vec::new();
    push_json_line(&mut text, &header).map_err(|e| Error::json(manifest_path, e))?;
    for r in &records {
        push_json_line(&mut text, r).map_err(|e| Error::json(manifest_path, e))?;
    }

    if let Some(dir) = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let mut f = fs::File::create(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    f.write_all(&text)
        .map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

fn push_json_line<T: Serialize>(out: &mut Vec<u8>, value: &T) -> serde_json::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.push(b'\n');
    Ok(())
}

/// Loads and fully validates an MKF-1 dataset.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());

    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty manifest", manifest_path.display())))?;
    let probe: serde_json::Value = serde_json::from_str(first)
        .map_err(|_| Error::Format(format!("{}: header is not JSON", manifest_path.display())))?;
    match probe.get("format").and_then(|v| v.as_str()) {
        Some(FEATURE_FORMAT) => {}
        Some(other) => {
            return Err(Error::Compatibility {
                expected: FEATURE_FORMAT.into(),
                found: other.into(),
            })
        }
        None => {
            return Err(Error::Format(format!(
                "{}: missing format tag",
                manifest_path.display()
            )))
        }
    }
    let header: ManifestHeader = serde_json::from_value(probe)
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", manifest_path.display())))?;
    if header.objects == 0 || header.dim == 0 {
        return Err(Error::Schema("objects and dim must be positive".into()));
    }

    let blob_path = manifest_path.with_file_name(&header.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() as u64 != header.blob_bytes {
        return Err(Error::Integrity(format!(
            "{}: {} bytes, manifest declares {}",
            blob_path.display(),
            blob.len(),
            header.blob_bytes
        )));
    }

    let meta = DatasetMeta {
        objects: header.objects,
        dim: header.dim,
        scoring: header.scoring,
    };
    let mut samples = Vec::with_capacity(header.samples);
    for (lineno, l) in lines.enumerate() {
        let r: ManifestRecord = serde_json::from_str(l).map_err(|e| {
            Error::Format(format!(
                "{}: record {}: {e}",
                manifest_path.display(),
                lineno + 1
            ))
        })?;
        samples.push(decode_record(&meta, &r, &blob)?);
    }
    if samples.len() != header.samples {
        return Err(Error::Integrity(format!(
            "manifest declares {} samples, found {}",
            header.samples,
            samples.len()
        )));
    }
    Dataset::new(meta, samples)
}

fn decode_record(meta: &DatasetMeta, r: &ManifestRecord, blob: &[u8]) -> Result<SampleFeatures> {
    let id = &r.sample_id;
    if r.tokens == 0 {
        return Err(Error::Schema(format!("{id}: zero question tokens")));
    }
    let expected = ((meta.objects + r.tokens + 1) * meta.dim) as u64;
    if r.floats != expected {
        return Err(Error::Schema(format!(
            "{id}: record holds {} floats, dims require {expected}",
            r.floats
        )));
    }
    let start = r.offset;
    let end = start
        .checked_add(r.floats * 4)
        .filter(|&e| e <= blob.len() as u64)
        .ok_or_else(|| {
            Error::Integrity(format!(
                "{id}: bytes {start}..{} exceed blob of {} bytes",
                start + r.floats * 4,
                blob.len()
            ))
        })?;
    let values: Vec<f64> = blob[start as usize..end as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let nonfinite = |_| Error::Integrity(format!("{id}: non-finite feature value"));
    let (obj, rest) = values.split_at(meta.objects * meta.dim);
    let (tok, cls) = rest.split_at(r.tokens * meta.dim);
    Ok(SampleFeatures {
        sample_id: r.sample_id.clone(),
        image_id: r.image_id.clone(),
        objects: Tensor::matrix(meta.objects, meta.dim, obj.to_vec()).map_err(nonfinite)?,
        tokens: Tensor::matrix(r.tokens, meta.dim, tok.to_vec()).map_err(nonfinite)?,
        cls: Tensor::vector(cls.to_vec()).map_err(nonfinite)?,
        answers: r.answers.clone(),
        split: r.split,
    })
}

/// Parameters of the synthetic oracle dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
    pub objects: usize,
    pub dim: usize,
    pub tokens: usize,
    /// Fraction of each class assigned to the train split; the rest is test.
    pub train_fraction: f64,
    /// First class id, so disjoint answer sets can be generated.
    pub class_offset: usize,
}

impl SynthSpec {
    /// Small feature dimensions suitable for CI-speed training.
    pub fn desk(classes: usize, per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            noise: 0.3,
            seed,
            objects: 8,
            dim: 32,
            tokens: 4,
            train_fraction: 0.8,
            class_offset: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.per_class == 0 || self.objects == 0 || self.dim == 0 || self.tokens == 0 {
            return Err(Error::Domain(
                "counts and dimensions must be positive".into(),
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Domain(format!(
                "noise must be >= 0, got {}",
                self.noise
            )));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Domain("train_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Object row holding the class signal for `class` (a global class id).
    pub fn designated_row(&self, class: usize) -> usize {
        class % self.objects
    }
}

pub fn synthetic_answer(class: usize) -> String {
    format!("class_{class}")
}

/// Generates a dataset whose answer is a deterministic function of one
/// designated object row and the `[CLS]` vector.
///
/// Class `c` owns a unit object centroid and a unit `[CLS]` centroid. Each
/// sample places the object centroid plus noise in row `c mod K`; the other
/// rows and all question tokens are pure noise. Values are rounded to `f32`
/// so the in-memory dataset equals its MKF-1 round trip.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let d = spec.dim;
    let unit = |rng: &mut Rng| {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = crate::numerics::norm(&v);
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let centroids: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.classes)
        .map(|_| (unit(&mut rng), unit(&mut rng)))
        .collect();

    let noise_std = spec.noise / (d as f64).sqrt();
    let noise = |rng: &mut Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| noise_std * rng.normal()).collect()
    };
    let round = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect::<Vec<f64>>();
    let n_train = (spec.per_class as f64 * spec.train_fraction).round() as usize;

    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for (c, (obj_c, cls_c)) in centroids.iter().enumerate() {
        let class = spec.class_offset + c;
        let row = spec.designated_row(class);
        for i in 0..spec.per_class {
            let mut objects = noise(&mut rng, spec.objects * d);
            for (dst, &src) in objects[row * d..(row + 1) * d].iter_mut().zip(obj_c) {
                *dst += src;
            }
            let tokens = noise(&mut rng, spec.tokens * d);
            let cls: Vec<f64> = noise(&mut rng, d)
                .into_iter()
                .zip(cls_c)
                .map(|(n, c)| n + c)
                .collect();
            samples.push(SampleFeatures {
                sample_id: format!("s{class:04}_{i:05}"),
                image_id: format!("img{class:04}_{i:05}"),
                objects: Tensor::matrix(spec.objects, d, round(objects))?,
                tokens: Tensor::matrix(spec.tokens, d, round(tokens))?,
                cls: Tensor::vector(round(cls))?,
                answers: vec![Annotation::new(synthetic_answer(class), 10)],
                split: if i < n_train {
                    Split::Train
                } else {
                    Split::Test
                },
            });
        }
    }
    Dataset::new(
        DatasetMeta {
            objects: spec.objects,
            dim: d,
            scoring: Scoring::Soft,
        },
        samples,
    )
}
