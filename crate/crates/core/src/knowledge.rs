//! The accumulated knowledge base: one (head, relation, tail) triplet per
//! training instance with its provenance, stored as `kb.json` (format tag
//! `MKB-1`) plus a checksummed `kb.bin`, and exported as a merged graph.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{self, BlobWriter, TensorEntry};
use crate::error::{Error, Result};
use crate::extractor::ForwardPass;
use crate::features::{expand_annotations, AnswerVocab, Dataset};
use crate::numerics::Tensor;
use crate::trainer::{Checkpoint, Stage, StageRecord};

pub const KB_FORMAT: &str = "MKB-1";
pub const KB_MANIFEST: &str = "kb.json";
pub const KB_BLOB: &str = "kb.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeTriplet {
    pub head: Vec<f64>,
    pub relation: Vec<f64>,
    pub tail: usize,
    pub sample_id: String,
    pub image_id: String,
    pub selected_object: usize,
    pub stage: Stage,
}

/// Triplet fields that live in the manifest rather than the blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Provenance {
    sample_id: String,
    image_id: String,
    tail: usize,
    selected_object: usize,
    stage: Stage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbMetadata {
    pub triplets: usize,
    pub per_stage: BTreeMap<String, usize>,
    /// Triplets whose (image, answer) pair already occurred earlier.
    pub duplicate_image_answer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBase {
    vocab: AnswerVocab,
    tails: Tensor,
    history: Vec<StageRecord>,
    triplets: Vec<KnowledgeTriplet>,
    sealed: bool,
}

impl KnowledgeBase {
    pub fn new(vocab: AnswerVocab, tails: Tensor, history: Vec<StageRecord>) -> Result<Self> {
        if tails.shape().len() != 2 || tails.rows() != vocab.len() {
            return Err(Error::Shape(format!(
                "tail table {:?} for a vocabulary of {}",
                tails.shape(),
                vocab.len()
            )));
        }
        Ok(Self {
            vocab,
            tails,
            history,
            triplets: Vec::new(),
            sealed: false,
        })
    }

    pub fn vocab(&self) -> &AnswerVocab {
        &self.vocab
    }

    pub fn tails(&self) -> &Tensor {
        &self.tails
    }

    pub fn history(&self) -> &[StageRecord] {
        &self.history
    }

    pub fn triplets(&self) -> &[KnowledgeTriplet] {
        &self.triplets
    }

    pub fn embed(&self) -> usize {
        self.tails.cols()
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn push(&mut self, t: KnowledgeTriplet) -> Result<()> {
        if self.sealed {
            return Err(Error::Sealed);
        }
        if t.tail >= self.vocab.len() {
            return Err(Error::Vocabulary(format!(
                "{}: tail {} outside vocabulary of {}",
                t.sample_id,
                t.tail,
                self.vocab.len()
            )));
        }
        if t.head.len() != self.embed() || t.relation.len() != self.embed() {
            return Err(Error::Shape(format!(
                "{}: triplet widths {}/{}, knowledge base width {}",
                t.sample_id,
                t.head.len(),
                t.relation.len(),
                self.embed()
            )));
        }
        if !t.head.iter().chain(&t.relation).all(|x| x.is_finite()) {
            return Err(Error::Evaluation(format!(
                "{}: non-finite embedding",
                t.sample_id
            )));
        }
        self.triplets.push(t);
        Ok(())
    }

    pub fn metadata(&self) -> KbMetadata {
        let mut per_stage = BTreeMap::new();
        let mut seen = HashMap::new();
        let mut duplicates = 0;
        for t in &self.triplets {
            *per_stage.entry(t.stage.to_string()).or_insert(0) += 1;
            let n = seen.entry((t.image_id.as_str(), t.tail)).or_insert(0usize);
            if *n > 0 {
                duplicates += 1;
            }
            *n += 1;
        }
        KbMetadata {
            triplets: self.triplets.len(),
            per_stage,
            duplicate_image_answer: duplicates,
        }
    }

    /// Seals the knowledge base and writes it into `dir`.
    pub fn seal_and_save(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        self.seal();
        self.save(dir)
    }

    fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        blob::ensure_dir(dir)?;
        let n = self.triplets.len();
        let embed = self.embed();
        let mut writer = BlobWriter::default();
        writer.push("tails", &self.tails);
        let heads: Vec<f64> = self
            .triplets
            .iter()
            .flat_map(|t| t.head.iter().copied())
            .collect();
        writer.push_raw("heads", vec![n, embed], &heads);
        let rels: Vec<f64> = self
            .triplets
            .iter()
            .flat_map(|t| t.relation.iter().copied())
            .collect();
        writer.push_raw("relations", vec![n, embed], &rels);
        let (bytes, tensors) = writer.finish();
        let manifest = KbManifest {
            format: KB_FORMAT.into(),
            embed,
            vocab: self.vocab.clone(),
            history: self.history.clone(),
            metadata: self.metadata(),
            triplets: self
                .triplets
                .iter()
                .map(|t| Provenance {
                    sample_id: t.sample_id.clone(),
                    image_id: t.image_id.clone(),
                    tail: t.tail,
                    selected_object: t.selected_object,
                    stage: t.stage,
                })
                .collect(),
            blob: KB_BLOB.into(),
            blob_bytes: bytes.len(),
            sha256: blob::sha256_hex(&bytes),
            tensors,
        };
        let blob_path = dir.join(KB_BLOB);
        std::fs::write(&blob_path, &bytes).map_err(|e| Error::io(&blob_path, e))?;
        blob::write_json(&dir.join(KB_MANIFEST), &manifest)
    }

    /// Loads a saved knowledge base; the result is sealed.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: KbManifest = blob::read_manifest(&dir.join(KB_MANIFEST), KB_FORMAT)?;
        let bytes = blob::read_verified(&dir.join(&m.blob), m.blob_bytes, &m.sha256)?;
        let tails = blob::tensor_at(&bytes, blob::find(&m.tensors, "tails")?)?;
        let heads = blob::tensor_at(&bytes, blob::find(&m.tensors, "heads")?)?;
        let rels = blob::tensor_at(&bytes, blob::find(&m.tensors, "relations")?)?;
        let n = m.triplets.len();
        for (name, t) in [("heads", &heads), ("relations", &rels)] {
            if t.shape() != [n, m.embed] {
                return Err(Error::Integrity(format!(
                    "{name} table {:?} for {n} triplets of width {}",
                    t.shape(),
                    m.embed
                )));
            }
        }
        if tails.shape() != [m.vocab.len(), m.embed] {
            return Err(Error::Integrity(format!(
                "tail table {:?} for {} answers of width {}",
                tails.shape(),
                m.vocab.len(),
                m.embed
            )));
        }
        let mut kb = Self::new(m.vocab, tails, m.history)?;
        for (i, p) in m.triplets.into_iter().enumerate() {
            kb.push(KnowledgeTriplet {
                head: heads.row(i).to_vec(),
                relation: rels.row(i).to_vec(),
                tail: p.tail,
                sample_id: p.sample_id,
                image_id: p.image_id,
                selected_object: p.selected_object,
                stage: p.stage,
            })
            .map_err(|e| Error::Integrity(e.to_string()))?;
        }
        kb.seal();
        Ok(kb)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct KbManifest {
    format: String,
    embed: usize,
    vocab: AnswerVocab,
    history: Vec<StageRecord>,
    metadata: KbMetadata,
    triplets: Vec<Provenance>,
    blob: String,
    blob_bytes: usize,
    sha256: String,
    tensors: Vec<TensorEntry>,
}

/// Appends one triplet per training instance of `data`, extracted with the
/// deterministic argmax attention. The result is a new, unsealed knowledge
/// base carrying `existing`'s triplets first and `ckpt`'s vocabulary and tail
/// table.
pub fn accumulate(
    data: &Dataset,
    ckpt: &Checkpoint,
    existing: Option<&KnowledgeBase>,
) -> Result<KnowledgeBase> {
    let mut kb = KnowledgeBase::new(
        ckpt.vocab.clone(),
        ckpt.params.tails.clone(),
        ckpt.history.clone(),
    )?;
    if let Some(prev) = existing {
        if !ckpt.vocab.extends(&prev.vocab) || prev.embed() != kb.embed() {
            return Err(Error::Stage(
                "checkpoint does not extend the existing knowledge base".into(),
            ));
        }
        for t in &prev.triplets {
            kb.push(t.clone())?;
        }
    }
    let stage = ckpt.history.last().map_or(Stage::Pretrain, |r| r.stage);
    let instances = expand_annotations(data);
    let mut cached: Option<(usize, ForwardPass)> = None;
    for inst in &instances {
        let tail = ckpt.vocab.get(&inst.answer).ok_or_else(|| {
            Error::Vocabulary(format!(
                "answer {:?} missing from checkpoint vocabulary",
                inst.answer
            ))
        })?;
        let sample = &data.samples[inst.sample];
        if cached.as_ref().map(|c| c.0) != Some(inst.sample) {
            let pass = ForwardPass::run(sample, &ckpt.params, ckpt.config.tau, None)?;
            cached = Some((inst.sample, pass));
        }
        let pass = &cached.as_ref().expect("just set").1;
        kb.push(KnowledgeTriplet {
            head: pass.head.clone(),
            relation: pass.relation.clone(),
            tail,
            sample_id: sample.sample_id.clone(),
            image_id: sample.image_id.clone(),
            selected_object: crate::numerics::argmax(pass.alpha()),
            stage,
        })?;
    }
    Ok(kb)
}

pub const GRAPH_FORMAT: &str = "MKG-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Image,
    Answer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub source: String,
    pub target: String,
    pub sample_id: String,
    pub selected_object: usize,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraphExport {
    pub format: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Merges heads by image and tails by answer; every triplet becomes an edge.
/// Nodes appear in first-seen order, images before answers.
pub fn export_graph(kb: &KnowledgeBase) -> KnowledgeGraphExport {
    let mut images: Vec<GraphNode> = Vec::new();
    let mut answers: Vec<GraphNode> = Vec::new();
    let mut seen_images = HashSet::new();
    let mut seen_answers = HashSet::new();
    let mut edges = Vec::with_capacity(kb.triplets.len());
    for t in &kb.triplets {
        let source = format!("image:{}", t.image_id);
        if seen_images.insert(source.clone()) {
            images.push(GraphNode {
                id: source.clone(),
                kind: NodeKind::Image,
                label: t.image_id.clone(),
            });
        }
        let answer = kb.vocab.answer(t.tail).unwrap_or_default();
        let target = format!("answer:{answer}");
        if seen_answers.insert(target.clone()) {
            answers.push(GraphNode {
                id: target.clone(),
                kind: NodeKind::Answer,
                label: answer.to_string(),
            });
        }
        edges.push(GraphEdge {
            source,
            target,
            sample_id: t.sample_id.clone(),
            selected_object: t.selected_object,
            stage: t.stage,
        });
    }
    images.extend(answers);
    KnowledgeGraphExport {
        format: GRAPH_FORMAT.into(),
        nodes: images,
        edges,
    }
}
