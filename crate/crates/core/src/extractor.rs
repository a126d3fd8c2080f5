//! Triplet extraction: question-guided hard attention over objects for the
//! head entity, and a feed-forward projection of the fused `[CLS]` vector for
//! the relation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SampleFeatures;
use crate::numerics::{
    argmax, axpy, dot, gumbel_sample, matmul_transposed, softmax, Ffn, FfnCache, ParamSet, Rng,
    Tensor,
};

/// Model widths that do not come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Width of the affinity projections.
    pub affinity: usize,
    /// Inner width of both feed-forward heads.
    pub hidden: usize,
    /// Entity / relation embedding width.
    pub embed: usize,
}

impl ModelDims {
    pub const FULL: ModelDims = ModelDims {
        affinity: 768,
        hidden: 1024,
        embed: 300,
    };

    pub const DESK: ModelDims = ModelDims {
        affinity: 32,
        hidden: 128,
        embed: 64,
    };
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::FULL
    }
}

/// All learnable tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Question projection, `[d_a × d_v]`.
    pub w_question: Tensor,
    /// Object projection, `[d_a × d_v]`.
    pub w_object: Tensor,
    pub ffn_head: Ffn,
    pub ffn_relation: Ffn,
    /// Tail look-up table, one row per answer.
    pub tails: Tensor,
}

pub const PARAM_NAMES: [&str; 11] = [
    "w_question",
    "w_object",
    "ffn_head.first.weight",
    "ffn_head.first.bias",
    "ffn_head.second.weight",
    "ffn_head.second.bias",
    "ffn_relation.first.weight",
    "ffn_relation.first.bias",
    "ffn_relation.second.weight",
    "ffn_relation.second.bias",
    "tails",
];

impl ModelParams {
    pub fn zeros(feature_dim: usize, dims: ModelDims, vocab_size: usize) -> Self {
        Self {
            w_question: Tensor::zeros(vec![dims.affinity, feature_dim]),
            w_object: Tensor::zeros(vec![dims.affinity, feature_dim]),
            ffn_head: Ffn::zeros(feature_dim, dims.hidden, dims.embed),
            ffn_relation: Ffn::zeros(feature_dim, dims.hidden, dims.embed),
            tails: Tensor::zeros(vec![vocab_size, dims.embed]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim(), self.dims(), self.vocab_size())
    }

    pub fn feature_dim(&self) -> usize {
        self.w_object.cols()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            affinity: self.w_object.rows(),
            hidden: self.ffn_head.first.d_out(),
            embed: self.tails.cols(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tails.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 11] {
        [
            &self.w_question,
            &self.w_object,
            &self.ffn_head.first.weight,
            &self.ffn_head.first.bias,
            &self.ffn_head.second.weight,
            &self.ffn_head.second.bias,
            &self.ffn_relation.first.weight,
            &self.ffn_relation.first.bias,
            &self.ffn_relation.second.weight,
            &self.ffn_relation.second.bias,
            &self.tails,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 11] {
        [
            &mut self.w_question,
            &mut self.w_object,
            &mut self.ffn_head.first.weight,
            &mut self.ffn_head.first.bias,
            &mut self.ffn_head.second.weight,
            &mut self.ffn_head.second.bias,
            &mut self.ffn_relation.first.weight,
            &mut self.ffn_relation.first.bias,
            &mut self.ffn_relation.second.weight,
            &mut self.ffn_relation.second.bias,
            &mut self.tails,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Adds `other` element-wise.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    fn check_sample(&self, sample: &SampleFeatures) -> Result<()> {
        let d = self.feature_dim();
        if sample.objects.cols() != d || sample.tokens.cols() != d || sample.cls.len() != d {
            return Err(Error::Shape(format!(
                "{}: features are {}-wide, model expects {d}",
                sample.sample_id,
                sample.cls.len()
            )));
        }
        Ok(())
    }
}

impl ParamSet for ModelParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        PARAM_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(self.tensors())
            .collect()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        PARAM_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(self.tensors_mut())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Gumbel-Softmax sample, differentiable.
    TrainSample,
    /// Deterministic one-hot at the most relevant object.
    EvalArgmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionResult {
    pub head: Vec<f64>,
    pub relation: Vec<f64>,
    pub alpha: Vec<f64>,
    pub relevance: Vec<f64>,
    pub selected_object: usize,
}

/// Object/token affinity: entry `(i, j) = ⟨W_o v_i, W_q q_j⟩`.
pub fn affinity(tokens: &Tensor, objects: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let q = matmul_transposed(tokens, &params.w_question)?;
    let o = matmul_transposed(objects, &params.w_object)?;
    matmul_transposed(&o, &q)
}

/// Best-matching token score per object, with the winning column.
pub fn object_relevance_with_index(a: &Tensor) -> (Vec<f64>, Vec<usize>) {
    a.row_iter()
        .map(|row| {
            let j = argmax(row);
            (row[j], j)
        })
        .unzip()
}

pub fn object_relevance(a: &Tensor) -> Vec<f64> {
    object_relevance_with_index(a).0
}

/// Draws one Gumbel(0, 1) value per object.
pub fn draw_gumbel(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gumbel_sample(rng)).collect()
}

/// `softmax((relevance + noise) / tau)`. Noise is added to the raw logits,
/// which equals the log-probability form up to a constant shift.
pub fn attend_with_noise(relevance: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if relevance.len() != noise.len() {
        return Err(Error::Shape(
            "noise length differs from object count".into(),
        ));
    }
    let logits: Vec<f64> = relevance.iter().zip(noise).map(|(a, g)| a + g).collect();
    softmax(&logits, tau)
}

pub fn attend(relevance: &[f64], tau: f64, mode: AttentionMode, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    match mode {
        AttentionMode::TrainSample => {
            let noise = draw_gumbel(rng, relevance.len());
            attend_with_noise(relevance, &noise, tau)
        }
        AttentionMode::EvalArgmax => Ok(one_hot(relevance.len(), argmax(relevance))),
    }
}

fn one_hot(n: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[at] = 1.0;
    v
}

fn pool(objects: &Tensor, alpha: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; objects.cols()];
    for (row, &w) in objects.row_iter().zip(alpha) {
        if w != 0.0 {
            axpy(w, row, &mut x);
        }
    }
    x
}

/// `ffn_head(Σ_i alpha_i v_i)`
pub fn head_entity(objects: &Tensor, alpha: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    if alpha.len() != objects.rows() {
        return Err(Error::Shape(format!(
            "{} attention weights for {} objects",
            alpha.len(),
            objects.rows()
        )));
    }
    params.ffn_head.forward(&pool(objects, alpha))
}

pub fn relation(cls: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    params.ffn_relation.forward(cls)
}

/// Full forward pass with diagnostics.
pub fn extract(
    sample: &SampleFeatures,
    params: &ModelParams,
    tau: f64,
    mode: AttentionMode,
    rng: &mut Rng,
) -> Result<ExtractionResult> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let noise = match mode {
        AttentionMode::TrainSample => Some(draw_gumbel(rng, sample.objects.rows())),
        AttentionMode::EvalArgmax => None,
    };
    Ok(ForwardPass::run(sample, params, tau, noise.as_deref())?.into_result())
}

/// Everything the backward pass needs from one extraction.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    question_proj: Tensor,
    object_proj: Tensor,
    best_token: Vec<usize>,
    relevance: Vec<f64>,
    alpha: Vec<f64>,
    sampled: bool,
    tau: f64,
    head_cache: FfnCache,
    relation_cache: FfnCache,
    pub head: Vec<f64>,
    pub relation: Vec<f64>,
}

impl ForwardPass {
    /// `noise = Some(g)` runs the Gumbel-Softmax path with fixed noise;
    /// `None` runs the deterministic argmax path.
    pub fn run(
        sample: &SampleFeatures,
        params: &ModelParams,
        tau: f64,
        noise: Option<&[f64]>,
    ) -> Result<Self> {
        params.check_sample(sample)?;
        let question_proj = matmul_transposed(&sample.tokens, &params.w_question)?;
        let object_proj = matmul_transposed(&sample.objects, &params.w_object)?;
        let a = matmul_transposed(&object_proj, &question_proj)?;
        let (relevance, best_token) = object_relevance_with_index(&a);
        let alpha = match noise {
            Some(g) => attend_with_noise(&relevance, g, tau)?,
            None => one_hot(relevance.len(), argmax(&relevance)),
        };
        let pooled = pool(&sample.objects, &alpha);
        let (head, head_cache) = params.ffn_head.forward_cached(&pooled)?;
        let (relation, relation_cache) = params.ffn_relation.forward_cached(sample.cls.data())?;
        Ok(Self {
            question_proj,
            object_proj,
            best_token,
            relevance,
            alpha,
            sampled: noise.is_some(),
            tau,
            head_cache,
            relation_cache,
            head,
            relation,
        })
    }

    /// `h + r`
    pub fn query(&self) -> Vec<f64> {
        self.head
            .iter()
            .zip(&self.relation)
            .map(|(h, r)| h + r)
            .collect()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn into_result(self) -> ExtractionResult {
        ExtractionResult {
            selected_object: argmax(&self.alpha),
            head: self.head,
            relation: self.relation,
            alpha: self.alpha,
            relevance: self.relevance,
        }
    }

    /// Back-propagates `dL/dh` and `dL/dr` into `grads`.
    pub fn backward(
        &self,
        sample: &SampleFeatures,
        params: &ModelParams,
        d_head: &[f64],
        d_relation: &[f64],
        grads: &mut ModelParams,
    ) {
        params
            .ffn_relation
            .backward(&self.relation_cache, d_relation, &mut grads.ffn_relation);
        let d_pooled = params
            .ffn_head
            .backward(&self.head_cache, d_head, &mut grads.ffn_head);
        if !self.sampled {
            // one-hot selection carries no gradient to the projections
            return;
        }

        let d_alpha: Vec<f64> = sample
            .objects
            .row_iter()
            .map(|v| dot(&d_pooled, v))
            .collect();
        let mean = dot(&self.alpha, &d_alpha);
        let d_a = self.dim_affinity();
        let mut d_question = Tensor::zeros(vec![self.question_proj.rows(), d_a]);
        for (i, (&w, &da)) in self.alpha.iter().zip(&d_alpha).enumerate() {
            let d_rel = w * (da - mean) / self.tau;
            if d_rel == 0.0 {
                continue;
            }
            let j = self.best_token[i];
            // d O_i = d_rel * P_j ; d W_o += d O_i ⊗ v_i
            let v = sample.objects.row(i);
            for (m, &p) in self.question_proj.row(j).iter().enumerate() {
                axpy(d_rel * p, v, grads.w_object.row_mut(m));
            }
            axpy(d_rel, self.object_proj.row(i), d_question.row_mut(j));
        }
        for (j, dq) in d_question.row_iter().enumerate() {
            let q = sample.tokens.row(j);
            for (m, &g) in dq.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, q, grads.w_question.row_mut(m));
                }
            }
        }
    }

    fn dim_affinity(&self) -> usize {
        self.question_proj.cols()
    }
}
