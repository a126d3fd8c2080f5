//! AdamW training over the combined loss, the two-stage pre-train /
//! fine-tune schedule with an append-only answer vocabulary, and checkpoint
//! files.
//!
//! A checkpoint is a directory holding `checkpoint.json` (format tag
//! `MKC-1`, vocabulary, stage history, config, rng position and a tensor
//! table) and `params.bin` (little-endian `f64`, row-major, checksummed).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{self, BlobWriter, TensorEntry};
use crate::error::{Error, Result};
use crate::extractor::{draw_gumbel, ForwardPass, ModelDims, ModelParams, PARAM_NAMES};
use crate::features::{expand_annotations, AnswerVocab, Dataset, SampleFeatures};
use crate::losses::{total_loss, BatchItem, LossBreakdown, LossToggles};
use crate::numerics::{Ffn, Rng, RngState, Tensor};

pub const CHECKPOINT_FORMAT: &str = "MKC-1";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "params.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

/// Named hyper-parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Published settings at full model width.
    Paper,
    /// Narrow model and short schedule for synthetic data and CI.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// Ranking margin.
    pub margin: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub toggles: LossToggles,
    pub shuffle: bool,
    /// Weight each instance by its annotator count instead of uniformly.
    pub weight_by_count: bool,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    pub dims: ModelDims,
}

/// Full-scale settings for `stage`.
pub fn default_config(stage: Stage) -> TrainConfig {
    TrainConfig::paper(stage)
}

impl TrainConfig {
    pub fn paper(stage: Stage) -> Self {
        Self {
            stage,
            learning_rate: match stage {
                Stage::Pretrain => 1e-5,
                Stage::Finetune => 1e-4,
            },
            epochs: 200,
            batch_size: 256,
            tau: 1.0,
            margin: 1.0,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            toggles: LossToggles::default(),
            shuffle: true,
            weight_by_count: false,
            grad_clip: None,
            dims: ModelDims::FULL,
        }
    }

    /// Fine-tuning is gentler than pre-training here: on equally small
    /// stages a long fine-tune overwrites what the shared heads learned first.
    pub fn desk(stage: Stage) -> Self {
        let (learning_rate, epochs) = match stage {
            Stage::Pretrain => (2e-3, 30),
            Stage::Finetune => (5e-4, 10),
        };
        Self {
            learning_rate,
            epochs,
            batch_size: 64,
            dims: ModelDims::DESK,
            ..Self::paper(stage)
        }
    }

    pub fn for_profile(profile: Profile, stage: Stage) -> Self {
        match profile {
            Profile::Paper => Self::paper(stage),
            Profile::Desk => Self::desk(stage),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Domain(format!("invalid config: {what}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and >= 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("temperature must be > 0");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be >= 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("gradient clip must be > 0");
            }
        }
        let d = self.dims;
        if d.affinity == 0 || d.hidden == 0 || d.embed == 0 {
            return bad("model widths must be >= 1");
        }
        Ok(())
    }
}

fn uniform_fill(t: &mut Tensor, bound: f64, rng: &mut Rng) {
    for x in t.data_mut() {
        *x = rng.uniform(-bound, bound);
    }
}

fn tail_bound(embed: usize) -> f64 {
    1.0 / (embed as f64).sqrt()
}

/// Fresh parameters: fan-in uniform projections and layers, zero biases,
/// and tail rows uniform in `±1/√embed`.
pub fn init_params(
    vocab: &AnswerVocab,
    feature_dim: usize,
    dims: ModelDims,
    rng: &mut Rng,
) -> Result<ModelParams> {
    if vocab.is_empty() {
        return Err(Error::Vocabulary(
            "cannot initialize with an empty vocabulary".into(),
        ));
    }
    let mut p = ModelParams::zeros(feature_dim, dims, vocab.len());
    let proj = 1.0 / (feature_dim as f64).sqrt();
    uniform_fill(&mut p.w_question, proj, rng);
    uniform_fill(&mut p.w_object, proj, rng);
    p.ffn_head = Ffn::init(feature_dim, dims.hidden, dims.embed, rng);
    p.ffn_relation = Ffn::init(feature_dim, dims.hidden, dims.embed, rng);
    uniform_fill(&mut p.tails, tail_bound(dims.embed), rng);
    Ok(p)
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One scalar AdamW update; returns the new value.
pub fn adamw_update(
    theta: f64,
    grad: f64,
    m: &mut f64,
    v: &mut f64,
    config: &TrainConfig,
    decay: f64,
    t: u64,
) -> f64 {
    *m = config.beta1 * *m + (1.0 - config.beta1) * grad;
    *v = config.beta2 * *v + (1.0 - config.beta2) * grad * grad;
    let m_hat = *m / (1.0 - config.beta1.powi(t as i32));
    let v_hat = *v / (1.0 - config.beta2.powi(t as i32));
    theta - config.learning_rate * (m_hat / (v_hat.sqrt() + config.eps) + decay * theta)
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

/// Applies step `t` (1-based) of AdamW with decoupled weight decay.
/// Bias vectors are not decayed.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    config: &TrainConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Domain("optimizer steps are 1-based".into()));
    }
    for (name, g) in PARAM_NAMES.iter().zip(grads.tensors()) {
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient in {name}")));
        }
    }
    let p = params.tensors_mut();
    let g = grads.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    for ((((name, p), g), m), v) in PARAM_NAMES.iter().zip(p).zip(g).zip(m).zip(v) {
        let decay = if is_bias(name) {
            0.0
        } else {
            config.weight_decay
        };
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            p[i] = adamw_update(p[i], gi, &mut m[i], &mut v[i], config, decay, t);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let total: f64 = grads
        .tensors()
        .iter()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        grads.scale(max_norm / total);
    }
    total
}

/// One completed or opened stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub vocab_size: usize,
    pub epochs: usize,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: AnswerVocab,
    pub history: Vec<StageRecord>,
    pub config: TrainConfig,
    pub rng: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    feature_dim: usize,
    dims: ModelDims,
    vocab: AnswerVocab,
    history: Vec<StageRecord>,
    config: TrainConfig,
    rng: RngState,
    blob: String,
    blob_bytes: usize,
    sha256: String,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Writes `checkpoint.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        blob::ensure_dir(dir)?;
        let mut writer = BlobWriter::default();
        for (name, t) in PARAM_NAMES.iter().zip(self.params.tensors()) {
            writer.push(*name, t);
        }
        let (bytes, tensors) = writer.finish();
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            feature_dim: self.params.feature_dim(),
            dims: self.params.dims(),
            vocab: self.vocab.clone(),
            history: self.history.clone(),
            config: self.config.clone(),
            rng: self.rng,
            blob: CHECKPOINT_BLOB.into(),
            blob_bytes: bytes.len(),
            sha256: blob::sha256_hex(&bytes),
            tensors,
        };
        let blob_path = dir.join(CHECKPOINT_BLOB);
        std::fs::write(&blob_path, &bytes).map_err(|e| Error::io(&blob_path, e))?;
        blob::write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest =
            blob::read_manifest(&dir.join(CHECKPOINT_MANIFEST), CHECKPOINT_FORMAT)?;
        let bytes = blob::read_verified(
            &dir.join(&manifest.blob),
            manifest.blob_bytes,
            &manifest.sha256,
        )?;
        let mut params =
            ModelParams::zeros(manifest.feature_dim, manifest.dims, manifest.vocab.len());
        for (name, slot) in PARAM_NAMES.iter().zip(params.tensors_mut()) {
            let t = blob::tensor_at(&bytes, blob::find(&manifest.tensors, name)?)?;
            if t.shape() != slot.shape() {
                return Err(Error::Integrity(format!(
                    "tensor {name} has shape {:?}, manifest implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(Self {
            params,
            vocab: manifest.vocab,
            history: manifest.history,
            config: manifest.config,
            rng: manifest.rng,
        })
    }
}

/// Grows the tail table to `new_vocab` for the next stage. Existing rows are
/// kept bit-for-bit; new rows are drawn like fresh tail rows. An open record
/// for `stage` is appended to the history.
pub fn extend_for_stage(
    ckpt: &Checkpoint,
    new_vocab: &AnswerVocab,
    stage: Stage,
    rng: &mut Rng,
) -> Result<Checkpoint> {
    if !new_vocab.extends(&ckpt.vocab) {
        return Err(Error::Stage(format!(
            "new vocabulary ({} answers) does not extend the checkpoint vocabulary ({} answers) append-only",
            new_vocab.len(),
            ckpt.vocab.len()
        )));
    }
    let mut out = ckpt.clone();
    let embed = ckpt.params.tails.cols();
    let added = new_vocab.len() - ckpt.vocab.len();
    let bound = tail_bound(embed);
    let fresh: Vec<f64> = (0..added * embed)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    out.params.tails.append_rows(&fresh)?;
    out.vocab = new_vocab.clone();
    out.history.push(StageRecord {
        stage,
        vocab_size: new_vocab.len(),
        epochs: 0,
        instances: 0,
    });
    Ok(out)
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_transe: f64,
    pub l_tri: f64,
    pub l_sem: f64,
    pub total: f64,
}

/// One instance of a batch with its Gumbel noise fixed.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub sample: &'a SampleFeatures,
    pub positive: usize,
    pub weight: f64,
    pub noise: Vec<f64>,
}

/// Batch loss and its gradient with respect to every parameter.
pub fn loss_and_grad(
    examples: &[Example<'_>],
    params: &ModelParams,
    tau: f64,
    margin: f64,
    toggles: LossToggles,
) -> Result<(LossBreakdown, ModelParams)> {
    let passes = examples
        .iter()
        .map(|e| ForwardPass::run(e.sample, params, tau, Some(&e.noise)))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<BatchItem> = passes
        .iter()
        .zip(examples)
        .map(|(p, e)| BatchItem {
            head: p.head.clone(),
            relation: p.relation.clone(),
            positive: e.positive,
            weight: e.weight,
        })
        .collect();
    let loss = total_loss(&items, &params.tails, margin, toggles)?;
    let mut grads = params.zeros_like();
    grads.tails = loss.d_tails;
    for ((pass, e), dq) in passes.iter().zip(examples).zip(&loss.d_query) {
        // the query is h + r, so both receive the same upstream gradient
        pass.backward(e.sample, params, dq, dq, &mut grads);
    }
    Ok((loss.breakdown, grads))
}

fn first_non_finite(params: &ModelParams) -> Option<&'static str> {
    PARAM_NAMES
        .iter()
        .zip(params.tensors())
        .find(|(_, t)| !t.is_finite())
        .map(|(n, _)| *n)
}

/// Runs one stage over the train split of `data`.
///
/// Without a checkpoint the vocabulary is built from `data` and parameters
/// are initialized from `config.seed`. With one, its vocabulary must already
/// cover every training answer (see [`extend_for_stage`]). The returned log
/// has one entry per epoch.
pub fn train_stage(
    data: &Dataset,
    ckpt: Option<Checkpoint>,
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    config.validate()?;
    let instances = expand_annotations(data);
    if instances.is_empty() {
        return Err(Error::Domain("dataset has no training instances".into()));
    }
    let mut rng = Rng::new(config.seed);
    let mut ckpt = match ckpt {
        None => {
            let vocab = crate::features::build_vocab(&[data], None);
            let params = init_params(&vocab, data.meta.dim, config.dims, &mut rng)?;
            Checkpoint {
                params,
                vocab,
                history: Vec::new(),
                config: config.clone(),
                rng: rng.state(),
            }
        }
        Some(c) => {
            if c.params.dims() != config.dims {
                return Err(Error::Shape(format!(
                    "config widths {:?} differ from checkpoint widths {:?}",
                    config.dims,
                    c.params.dims()
                )));
            }
            if c.params.feature_dim() != data.meta.dim {
                return Err(Error::Shape(format!(
                    "dataset features are {}-wide, checkpoint expects {}",
                    data.meta.dim,
                    c.params.feature_dim()
                )));
            }
            c
        }
    };
    let positives = instances
        .iter()
        .map(|i| {
            ckpt.vocab.get(&i.answer).ok_or_else(|| {
                Error::Vocabulary(format!(
                    "training answer {:?} missing from vocabulary",
                    i.answer
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = instances
        .iter()
        .map(|i| {
            if config.weight_by_count {
                f64::from(i.count)
            } else {
                1.0
            }
        })
        .collect();

    let objects = data.meta.objects;
    let mut state = AdamState::new(&ckpt.params);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut t = 0u64;
    for epoch in 1..=config.epochs {
        if config.shuffle {
            rng.shuffle(&mut order);
        }
        let mut sums = LossBreakdown::default();
        for batch in order.chunks(config.batch_size) {
            let examples: Vec<Example> = batch
                .iter()
                .map(|&i| Example {
                    sample: &data.samples[instances[i].sample],
                    positive: positives[i],
                    weight: weights[i],
                    noise: draw_gumbel(&mut rng, objects),
                })
                .collect();
            let (loss, mut grads) = loss_and_grad(
                &examples,
                &ckpt.params,
                config.tau,
                config.margin,
                config.toggles,
            )?;
            t += 1;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, step {t}: {loss:?}; first non-finite parameter: {}",
                    first_non_finite(&ckpt.params).unwrap_or("none")
                )));
            }
            if let Some(c) = config.grad_clip {
                clip_gradients(&mut grads, c);
            }
            adamw_step(&mut ckpt.params, &grads, &mut state, config, t)?;
            let share = batch.len() as f64 / instances.len() as f64;
            sums.l_transe += share * loss.l_transe;
            sums.l_tri += share * loss.l_tri;
            sums.l_sem += share * loss.l_sem;
            sums.total += share * loss.total;
        }
        log.push(EpochLog {
            epoch,
            l_transe: sums.l_transe,
            l_tri: sums.l_tri,
            l_sem: sums.l_sem,
            total: sums.total,
        });
    }

    let record = StageRecord {
        stage: config.stage,
        vocab_size: ckpt.vocab.len(),
        epochs: config.epochs,
        instances: instances.len(),
    };
    match ckpt.history.last_mut() {
        Some(open) if open.stage == config.stage && open.epochs == 0 => *open = record,
        _ => ckpt.history.push(record),
    }
    ckpt.config = config.clone();
    ckpt.rng = rng.state();
    Ok((ckpt, log))
}
