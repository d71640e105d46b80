//! The Q2A model: configuration, parameters, multi-step unrolling and the
//! per-question loss with its gradient.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{self, DecoderParams, StepOutput, StepsKind};
use crate::embedding::ButtonEncodingMode;
use crate::grounding::{self, ActiveTerms, GroundCache, GroundingParams, TaskContext};
use crate::nn::{self, Linear};
use crate::seed;
use crate::types::{argmax, FeatureBundle, QaFeatures, StepPrediction};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    ConfigError(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad label for {qa_id}: {detail}")]
    BadLabel { qa_id: String, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    /// Attention width.
    pub d_a: usize,
    /// Fusion MLP hidden width (also the MLP steps network's).
    pub d_h: usize,
    /// Width of the context feature `C`.
    pub d_c: usize,
    /// Width of the state `H`.
    pub d_r: usize,
    pub head_hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d_a: 128,
            d_h: 256,
            d_c: 128,
            d_r: 128,
            head_hidden: 256,
        }
    }
}

/// Every ablation axis of the model plus its widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub button_mode: ButtonEncodingMode,
    pub use_video: bool,
    pub use_script: bool,
    pub att_qa_s: bool,
    pub att_s_v: bool,
    pub att_transfer: bool,
    pub steps_kind: StepsKind,
    pub use_history: bool,
    /// Concatenate the question feature into the fusion input.
    pub append_question: bool,
    pub dims: Dims,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            button_mode: ButtonEncodingMode::Reverse,
            use_video: true,
            use_script: true,
            att_qa_s: true,
            att_s_v: true,
            att_transfer: true,
            steps_kind: StepsKind::Gru,
            use_history: true,
            append_question: false,
            dims: Dims::default(),
        }
    }
}

impl ModelConfig {
    /// Full model with every width set to `d` (for tests and toy runs).
    pub fn tiny(d: usize) -> Self {
        Self {
            dims: Dims {
                d_a: d,
                d_h: d,
                d_c: d,
                d_r: d,
                head_hidden: d,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::ConfigError(m.to_string()));
        let d = &self.dims;
        if [d.d_a, d.d_h, d.d_c, d.d_r, d.head_hidden].contains(&0) {
            return err("all widths must be positive");
        }
        if self.att_transfer && !self.use_script {
            return err("transfer attention requested without script");
        }
        if self.att_transfer && !self.use_video {
            return err("transfer attention requested without video");
        }
        if self.att_transfer && !(self.att_qa_s && self.att_s_v) {
            return err("transfer attention needs both QA→S and S→V");
        }
        if self.att_qa_s && !self.use_script {
            return err("QA→S attention requested without script");
        }
        if self.att_s_v && !(self.use_script && self.use_video) {
            return err("S→V attention needs script and video");
        }
        Ok(())
    }

    pub fn terms(&self) -> ActiveTerms {
        ActiveTerms::of(self)
    }
}

/// Widths fixed by the frozen encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub d_s: usize,
    pub d_v: usize,
    pub d_b: usize,
}

impl InputDims {
    pub fn of(bundle: &FeatureBundle) -> Self {
        Self {
            d_s: bundle.text_dim(),
            d_v: bundle.image_dim(),
            d_b: bundle.button_dim(),
        }
    }
}

/// Trainable tensors (plus the frozen `h0`).
#[derive(Clone, Debug, PartialEq)]
pub struct Q2AParams {
    pub grounding: GroundingParams,
    pub decoder: DecoderParams,
}

impl Q2AParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            grounding: self.grounding.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn layers(&self) -> Vec<(&'static str, &Linear)> {
        let mut v = self.grounding.layers();
        v.extend(self.decoder.layers());
        v
    }

    pub fn layers_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        let mut v = self.grounding.layers_mut();
        v.extend(self.decoder.layers_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.num_params()).sum()
    }

    /// All trainable values in layer order, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, l) in self.layers() {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for (_, l) in self.layers_mut() {
            l.w.iter_mut()
                .chain(l.b.iter_mut())
                .for_each(|x| *x = *it.next().expect("length matches"));
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Q2AParams) {
        for ((_, a), (_, b)) in self.layers_mut().into_iter().zip(other.layers()) {
            a.add_scaled(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.layers_mut()
            .into_iter()
            .for_each(|(_, l)| l.scale(alpha));
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|(_, l)| l.is_finite())
    }
}

/// How the state is carried from one step to the next.
#[derive(Clone, Copy, Debug)]
pub enum Unroll<'a> {
    /// Carry the ground-truth candidate's state.
    TeacherForced(&'a [usize]),
    /// Carry the highest-scoring candidate's state.
    FreeRunning,
}

/// Forward trace of one question.
pub struct QaTrace {
    pub context: TaskContext,
    pub steps: Vec<(GroundCache, StepOutput)>,
}

impl QaTrace {
    pub fn predictions(&self) -> Vec<StepPrediction> {
        self.steps
            .iter()
            .map(|(_, o)| StepPrediction::from_scores(o.scores.to_vec()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Q2AModel {
    pub config: ModelConfig,
    pub input: InputDims,
    pub params: Q2AParams,
}

impl Q2AModel {
    /// Seeded initialization; `h0` comes from its own seed stream.
    pub fn new(config: ModelConfig, input: InputDims, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng(seed, seed::stream::MODEL_INIT, 0);
        let mut h0_rng = seed::rng(seed, seed::stream::INITIAL_STATE, 0);
        let d = config.dims;
        let grounding = GroundingParams::init(&mut rng, &config, input.d_s, input.d_v, input.d_b);
        let decoder = DecoderParams::init(
            &mut rng,
            &mut h0_rng,
            config.steps_kind,
            d.d_c,
            d.d_r,
            d.d_h,
            d.head_hidden,
        );
        Ok(Self {
            config,
            input,
            params: Q2AParams { grounding, decoder },
        })
    }

    pub fn check_bundle(&self, bundle: &FeatureBundle) -> Result<(), ModelError> {
        let got = InputDims::of(bundle);
        let empty_buttons = bundle.qas.iter().all(|q| q.steps.iter().all(Vec::is_empty));
        if got.d_s != self.input.d_s
            || got.d_v != self.input.d_v
            || (!empty_buttons && got.d_b != self.input.d_b)
        {
            return Err(ModelError::DimensionMismatch(format!(
                "bundle {} has widths {:?}, model expects {:?}",
                bundle.task_id, got, self.input
            )));
        }
        Ok(())
    }

    pub fn task_context(&self, bundle: &FeatureBundle) -> TaskContext {
        TaskContext::new(
            nn::to_f64_2d(bundle.script.view()),
            nn::to_f64_2d(bundle.video.view()),
            &self.params.grounding,
            self.config.terms(),
        )
    }

    fn step_inputs(&self, qa: &QaFeatures, step: usize) -> (Array2<f64>, Array2<f64>) {
        let cands = &qa.steps[step];
        let text = nn::stack_rows(
            cands
                .iter()
                .map(|c| c.text.mapv(f64::from))
                .collect::<Vec<_>>()
                .iter()
                .map(|r| r.view()),
            self.input.d_s,
        );
        let button = nn::stack_rows(
            cands
                .iter()
                .map(|c| c.button.mapv(f64::from))
                .collect::<Vec<_>>()
                .iter()
                .map(|r| r.view()),
            self.input.d_b,
        );
        (text, button)
    }

    /// `C` for candidate `candidate` of step `step`.
    pub fn ground(
        &self,
        bundle: &FeatureBundle,
        qa: &QaFeatures,
        step: usize,
        candidate: usize,
    ) -> Result<Array1<f64>, ModelError> {
        let ctx = self.task_context(bundle);
        let (text, button) = self.step_inputs(qa, step);
        let q = nn::to_f64(qa.question.view());
        let g =
            grounding::ground_step(&ctx, text, button.view(), q.view(), &self.params.grounding)?;
        Ok(g.context.row(candidate).to_owned())
    }

    /// Run every step of a question, carrying the state per `unroll`.
    pub fn trace(
        &self,
        ctx: TaskContext,
        qa: &QaFeatures,
        unroll: Unroll,
    ) -> Result<QaTrace, ModelError> {
        if let Unroll::TeacherForced(gt) = unroll {
            check_labels(qa, gt)?;
        }
        let q = nn::to_f64(qa.question.view());
        let mut h = self.params.decoder.h0.clone();
        let mut steps = Vec::with_capacity(qa.steps.len());
        for i in 0..qa.steps.len() {
            let (text, button) = self.step_inputs(qa, i);
            let g = grounding::ground_step(
                &ctx,
                text,
                button.view(),
                q.view(),
                &self.params.grounding,
            )?;
            let out = decoder::step_forward(
                h.view(),
                g.context.clone(),
                &self.params.decoder,
                self.config.use_history,
            )?;
            let carried = match unroll {
                Unroll::TeacherForced(gt) => gt[i],
                Unroll::FreeRunning => argmax(out.scores.as_slice().expect("contiguous")),
            };
            h = out.states.row(carried).to_owned();
            steps.push((g, out));
        }
        Ok(QaTrace {
            context: ctx,
            steps,
        })
    }

    pub fn teacher_forced_unroll(
        &self,
        bundle: &FeatureBundle,
        qa: &QaFeatures,
        gt: &[usize],
    ) -> Result<Vec<StepPrediction>, ModelError> {
        Ok(self
            .trace(self.task_context(bundle), qa, Unroll::TeacherForced(gt))?
            .predictions())
    }

    pub fn free_running_infer(
        &self,
        bundle: &FeatureBundle,
        qa: &QaFeatures,
    ) -> Result<Vec<StepPrediction>, ModelError> {
        Ok(self
            .trace(self.task_context(bundle), qa, Unroll::FreeRunning)?
            .predictions())
    }

    /// Mean step cross-entropy of one question under teacher forcing.
    pub fn qa_loss(
        &self,
        bundle: &FeatureBundle,
        qa: &QaFeatures,
        gt: &[usize],
    ) -> Result<f64, ModelError> {
        let trace = self.trace(self.task_context(bundle), qa, Unroll::TeacherForced(gt))?;
        let total: f64 = trace
            .steps
            .iter()
            .zip(gt)
            .map(|((_, o), &g)| step_loss(o.scores.as_slice().unwrap(), g))
            .sum();
        Ok(total / gt.len() as f64)
    }

    /// Question loss and its exact gradient w.r.t. every trainable tensor.
    pub fn loss_and_grad(
        &self,
        bundle: &FeatureBundle,
        qa: &QaFeatures,
        gt: &[usize],
    ) -> Result<(f64, Q2AParams), ModelError> {
        let trace = self.trace(self.task_context(bundle), qa, Unroll::TeacherForced(gt))?;
        let n_steps = gt.len() as f64;
        let p = &self.params;
        let mut grad = p.zeros_like();
        let mut cgrad = trace.context.zero_grad();
        let d_r = p.decoder.d_r();
        let mut loss = 0.0;
        let mut dh_next = Array1::<f64>::zeros(d_r);
        for (i, (g, out)) in trace.steps.iter().enumerate().rev() {
            let gi = gt[i];
            let p_gt = out.scores[gi];
            loss += step_loss(out.scores.as_slice().unwrap(), gi);
            let mut d_logits = Array1::zeros(out.scores.len());
            if p_gt >= PROB_FLOOR {
                d_logits.assign(&out.scores);
                d_logits[gi] -= 1.0;
                d_logits /= n_steps;
            }
            let mut d_states = Array2::zeros(out.states.raw_dim());
            d_states.row_mut(gi).assign(&dh_next);
            let (d_context, dh_in) =
                decoder::step_backward(out, &d_logits, &d_states, &p.decoder, &mut grad.decoder);
            dh_next = if self.config.use_history {
                dh_in
            } else {
                Array1::zeros(d_r)
            };
            grounding::ground_step_backward(
                &trace.context,
                g,
                &d_context,
                &p.grounding,
                &mut grad.grounding,
                &mut cgrad,
            );
        }
        trace
            .context
            .backward(&cgrad, &p.grounding, &mut grad.grounding);
        Ok((loss / n_steps, grad))
    }
}

/// `-ln(max(p_gt, 1e-12))`.
pub fn step_loss(scores: &[f64], gt: usize) -> f64 {
    -scores[gt].max(PROB_FLOOR).ln()
}

pub fn check_labels(qa: &QaFeatures, gt: &[usize]) -> Result<(), ModelError> {
    let bad = |detail: String| {
        Err(ModelError::BadLabel {
            qa_id: qa.qa_id.clone(),
            detail,
        })
    };
    if gt.len() != qa.steps.len() {
        return bad(format!("{} labels for {} steps", gt.len(), qa.steps.len()));
    }
    for (i, (&g, s)) in gt.iter().zip(&qa.steps).enumerate() {
        if g >= s.len() {
            return bad(format!("step {i}: index {g} with {} candidates", s.len()));
        }
    }
    Ok(())
}
