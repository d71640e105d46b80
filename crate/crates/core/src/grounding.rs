//! Context grounding: scaled dot-product attention, the QA→S, S→V and
//! transfer (QA⇢S⇢V) terms, and the fusion MLP producing `C` for every
//! candidate of a step.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::model::{ModelConfig, ModelError};
use crate::nn::{self, Linear};

/// Learned query/key maps into the shared attention width.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProj {
    pub query: Linear,
    pub key: Linear,
}

impl AttentionProj {
    pub fn init(rng: &mut ChaCha8Rng, d_query: usize, d_key: usize, d_a: usize) -> Self {
        Self {
            query: Linear::init(rng, d_query, d_a),
            key: Linear::init(rng, d_key, d_a),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
        }
    }

    pub fn d_a(&self) -> usize {
        self.query.fan_out()
    }
}

/// Row-softmax of `q kᵀ / sqrt(d_a)` for already projected queries/keys.
pub fn attention_weights(q: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    nn::softmax_rows(&(q.dot(&k.t()) * scale))
}

/// `At(query, keys, values)`: returns the weights (`m x n`) and the
/// context `weights · values` (values are not projected).
pub fn attention(
    query: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
    proj: &AttentionProj,
) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
    if keys.nrows() == 0 || keys.nrows() != values.nrows() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} keys for {} values",
            keys.nrows(),
            values.nrows()
        )));
    }
    if query.ncols() != proj.query.fan_in() || keys.ncols() != proj.key.fan_in() {
        return Err(ModelError::DimensionMismatch(
            "attention projection width".into(),
        ));
    }
    let w = attention_weights(&proj.query.forward(query), &proj.key.forward(keys));
    let ctx = w.dot(&values);
    Ok((w, ctx))
}

/// Compose QA→S weights (`m x e`) with S→V weights (`e x f`).
pub fn transfer_mask(
    mask_qs: ArrayView2<f64>,
    mask_sv: ArrayView2<f64>,
) -> Result<Array2<f64>, ModelError> {
    if mask_qs.ncols() != mask_sv.nrows() {
        return Err(ModelError::DimensionMismatch(format!(
            "QA→S mask has {} columns, S→V mask {} rows",
            mask_qs.ncols(),
            mask_sv.nrows()
        )));
    }
    Ok(mask_qs.dot(&mask_sv))
}

/// Which context terms enter the fusion input, in order
/// `[T, B, Q?, QA→S?, video term?]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTerms {
    pub question: bool,
    pub qa_s: bool,
    pub transfer: bool,
    /// Mean over sentences of `At(S, V, V)`.
    pub sv_summary: bool,
    /// `At(T, V, V)` when the script is off.
    pub direct_video: bool,
}

impl ActiveTerms {
    pub fn of(c: &ModelConfig) -> Self {
        let qa_s = c.use_script && c.att_qa_s;
        let transfer = qa_s && c.use_video && c.att_s_v && c.att_transfer;
        Self {
            question: c.append_question,
            qa_s,
            transfer,
            sv_summary: c.use_script && c.use_video && c.att_s_v && !transfer,
            direct_video: c.use_video && !c.use_script,
        }
    }

    pub fn video_term(&self) -> bool {
        self.transfer || self.sv_summary || self.direct_video
    }

    pub fn needs_sv(&self) -> bool {
        self.transfer || self.sv_summary
    }

    pub fn fusion_width(&self, d_s: usize, d_v: usize, d_b: usize) -> usize {
        d_s + d_b
            + if self.question { d_s } else { 0 }
            + if self.qa_s { d_s } else { 0 }
            + if self.video_term() { d_v } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingParams {
    /// QA→S: queries from answer text, keys from script sentences.
    pub qa_s: AttentionProj,
    /// S→V: queries from script sentences, keys from frames.
    pub s_v: AttentionProj,
    /// QA→V, only used when the script is switched off.
    pub qa_v: AttentionProj,
    pub fuse_hidden: Linear,
    pub fuse_out: Linear,
}

impl GroundingParams {
    pub fn init(
        rng: &mut ChaCha8Rng,
        config: &ModelConfig,
        d_s: usize,
        d_v: usize,
        d_b: usize,
    ) -> Self {
        let d = &config.dims;
        let width = ActiveTerms::of(config).fusion_width(d_s, d_v, d_b);
        Self {
            qa_s: AttentionProj::init(rng, d_s, d_s, d.d_a),
            s_v: AttentionProj::init(rng, d_s, d_v, d.d_a),
            qa_v: AttentionProj::init(rng, d_s, d_v, d.d_a),
            fuse_hidden: Linear::init(rng, width, d.d_h),
            fuse_out: Linear::init(rng, d.d_h, d.d_c),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            qa_s: self.qa_s.zeros_like(),
            s_v: self.s_v.zeros_like(),
            qa_v: self.qa_v.zeros_like(),
            fuse_hidden: self.fuse_hidden.zeros_like(),
            fuse_out: self.fuse_out.zeros_like(),
        }
    }

    pub fn layers(&self) -> Vec<(&'static str, &Linear)> {
        vec![
            ("grounding.qa_s.query", &self.qa_s.query),
            ("grounding.qa_s.key", &self.qa_s.key),
            ("grounding.s_v.query", &self.s_v.query),
            ("grounding.s_v.key", &self.s_v.key),
            ("grounding.qa_v.query", &self.qa_v.query),
            ("grounding.qa_v.key", &self.qa_v.key),
            ("grounding.fuse_hidden", &self.fuse_hidden),
            ("grounding.fuse_out", &self.fuse_out),
        ]
    }

    pub fn layers_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        vec![
            ("grounding.qa_s.query", &mut self.qa_s.query),
            ("grounding.qa_s.key", &mut self.qa_s.key),
            ("grounding.s_v.query", &mut self.s_v.query),
            ("grounding.s_v.key", &mut self.s_v.key),
            ("grounding.qa_v.query", &mut self.qa_v.query),
            ("grounding.qa_v.key", &mut self.qa_v.key),
            ("grounding.fuse_hidden", &mut self.fuse_hidden),
            ("grounding.fuse_out", &mut self.fuse_out),
        ]
    }
}

/// Candidate-independent quantities of one task, computed once per QA.
#[derive(Clone, Debug)]
pub struct TaskContext {
    pub terms: ActiveTerms,
    pub script: Array2<f64>,
    pub video: Array2<f64>,
    /// Projected script keys for QA→S.
    pub script_keys: Option<Array2<f64>>,
    /// S→V projected queries, keys and weights (`e x f`).
    pub sv: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
    pub summary: Option<Array1<f64>>,
    /// Projected frame keys for direct QA→V.
    pub video_keys: Option<Array2<f64>>,
}

/// Gradients w.r.t. the quantities held in a [`TaskContext`].
#[derive(Clone, Debug, Default)]
pub struct TaskContextGrad {
    pub script_keys: Option<Array2<f64>>,
    pub sv_weights: Option<Array2<f64>>,
    pub summary: Option<Array1<f64>>,
    pub video_keys: Option<Array2<f64>>,
}

impl TaskContext {
    pub fn new(
        script: Array2<f64>,
        video: Array2<f64>,
        params: &GroundingParams,
        terms: ActiveTerms,
    ) -> Self {
        let script_keys = terms.qa_s.then(|| params.qa_s.key.forward(script.view()));
        let sv = terms.needs_sv().then(|| {
            let q = params.s_v.query.forward(script.view());
            let k = params.s_v.key.forward(video.view());
            let w = attention_weights(&q, &k);
            (q, k, w)
        });
        let summary = match (&sv, terms.sv_summary) {
            (Some((_, _, w)), true) => Some(
                w.dot(&video)
                    .mean_axis(Axis(0))
                    .expect("script is non-empty"),
            ),
            _ => None,
        };
        let video_keys = terms
            .direct_video
            .then(|| params.qa_v.key.forward(video.view()));
        Self {
            terms,
            script,
            video,
            script_keys,
            sv,
            summary,
            video_keys,
        }
    }

    pub fn zero_grad(&self) -> TaskContextGrad {
        TaskContextGrad {
            script_keys: self
                .script_keys
                .as_ref()
                .map(|k| Array2::zeros(k.raw_dim())),
            sv_weights: self.sv.as_ref().map(|(_, _, w)| Array2::zeros(w.raw_dim())),
            summary: self.summary.as_ref().map(|s| Array1::zeros(s.raw_dim())),
            video_keys: self.video_keys.as_ref().map(|k| Array2::zeros(k.raw_dim())),
        }
    }

    /// Push accumulated context gradients into the projection parameters.
    pub fn backward(
        &self,
        g: &TaskContextGrad,
        params: &GroundingParams,
        grad: &mut GroundingParams,
    ) {
        let mut d_sv = g.sv_weights.clone();
        if let (Some(ds), Some((_, _, w))) = (&g.summary, &self.sv) {
            // summary = mean_rows(W V)  =>  dW[r, :] = (V ds)ᵀ / e
            let row = self.video.dot(ds) / w.nrows() as f64;
            let d = d_sv.get_or_insert_with(|| Array2::zeros(w.raw_dim()));
            for mut r in d.rows_mut() {
                r += &row;
            }
        }
        if let (Some(dw), Some((q, k, w))) = (&d_sv, &self.sv) {
            let scale = 1.0 / (q.ncols() as f64).sqrt();
            let dl = nn::softmax_rows_backward(w, dw) * scale;
            params
                .s_v
                .query
                .accumulate(self.script.view(), dl.dot(k).view(), &mut grad.s_v.query);
            params
                .s_v
                .key
                .accumulate(self.video.view(), dl.t().dot(q).view(), &mut grad.s_v.key);
        }
        if let Some(dk) = &g.script_keys {
            params
                .qa_s
                .key
                .accumulate(self.script.view(), dk.view(), &mut grad.qa_s.key);
        }
        if let Some(dk) = &g.video_keys {
            params
                .qa_v
                .key
                .accumulate(self.video.view(), dk.view(), &mut grad.qa_v.key);
        }
    }
}

/// Forward state of one step's grounding, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GroundCache {
    pub text: Array2<f64>,
    pub fusion_in: Array2<f64>,
    pub hidden_pre: Array2<f64>,
    pub hidden: Array2<f64>,
    /// QA→S projected queries and weights.
    pub qa_s: Option<(Array2<f64>, Array2<f64>)>,
    /// QA→V projected queries and weights.
    pub qa_v: Option<(Array2<f64>, Array2<f64>)>,
    pub context: Array2<f64>,
}

/// Context features `C` (`n x d_c`) for all candidates of one step.
///
/// `text` is `n x d_s`, `button` is `n x d_b`.
pub fn ground_step(
    ctx: &TaskContext,
    text: Array2<f64>,
    button: ArrayView2<f64>,
    question: ArrayView1<f64>,
    params: &GroundingParams,
) -> Result<GroundCache, ModelError> {
    let t = ctx.terms;
    let n = text.nrows();
    if button.nrows() != n {
        return Err(ModelError::DimensionMismatch(
            "button rows differ from text rows".into(),
        ));
    }
    let mut parts: Vec<Array2<f64>> = vec![text.clone(), button.to_owned()];
    if t.question {
        parts.push(
            question
                .broadcast((n, question.len()))
                .expect("broadcast")
                .to_owned(),
        );
    }
    let mut qa_s = None;
    if let Some(keys) = &ctx.script_keys {
        let q = params.qa_s.query.forward(text.view());
        let w = attention_weights(&q, keys);
        parts.push(w.dot(&ctx.script));
        if t.transfer {
            let (_, _, sv) = ctx.sv.as_ref().expect("transfer needs S→V");
            parts.push(transfer_mask(w.view(), sv.view())?.dot(&ctx.video));
        }
        qa_s = Some((q, w));
    }
    if let Some(summary) = &ctx.summary {
        parts.push(
            summary
                .broadcast((n, summary.len()))
                .expect("broadcast")
                .to_owned(),
        );
    }
    let mut qa_v = None;
    if let Some(keys) = &ctx.video_keys {
        let q = params.qa_v.query.forward(text.view());
        let w = attention_weights(&q, keys);
        parts.push(w.dot(&ctx.video));
        qa_v = Some((q, w));
    }
    let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.view()).collect();
    let fusion_in = concatenate(Axis(1), &views).expect("rows agree");
    if fusion_in.ncols() != params.fuse_hidden.fan_in() {
        return Err(ModelError::DimensionMismatch(format!(
            "fusion input width {} but parameters expect {}",
            fusion_in.ncols(),
            params.fuse_hidden.fan_in()
        )));
    }
    let hidden_pre = params.fuse_hidden.forward(fusion_in.view());
    let hidden = nn::relu(&hidden_pre);
    let context = params.fuse_out.forward(hidden.view());
    Ok(GroundCache {
        text,
        fusion_in,
        hidden_pre,
        hidden,
        qa_s,
        qa_v,
        context,
    })
}

/// Backward of [`ground_step`] given `dL/dC`.
pub fn ground_step_backward(
    ctx: &TaskContext,
    cache: &GroundCache,
    d_context: &Array2<f64>,
    params: &GroundingParams,
    grad: &mut GroundingParams,
    cgrad: &mut TaskContextGrad,
) {
    let t = ctx.terms;
    let d_hidden =
        params
            .fuse_out
            .backward(cache.hidden.view(), d_context.view(), &mut grad.fuse_out);
    let d_pre = nn::relu_backward(&cache.hidden_pre, &d_hidden);
    let d_in =
        params
            .fuse_hidden
            .backward(cache.fusion_in.view(), d_pre.view(), &mut grad.fuse_hidden);

    let d_s = ctx.script.ncols();
    let d_v = ctx.video.ncols();
    // Skip the frozen inputs [T, B, Q?].
    let mut col =
        d_in.ncols() - if t.qa_s { d_s } else { 0 } - if t.video_term() { d_v } else { 0 };
    let d_qs = t.qa_s.then(|| {
        let d = d_in.slice(s![.., col..col + d_s]).to_owned();
        col += d_s;
        d
    });
    let d_video = t
        .video_term()
        .then(|| d_in.slice(s![.., col..col + d_v]).to_owned());
    let scale_of = |q: &Array2<f64>| 1.0 / (q.ncols() as f64).sqrt();

    if let (Some(d_qs), Some((q, w))) = (&d_qs, &cache.qa_s) {
        let mut dw = d_qs.dot(&ctx.script.t());
        if t.transfer {
            let d_tr = d_video.as_ref().expect("video term").dot(&ctx.video.t());
            let (_, _, sv) = ctx.sv.as_ref().expect("transfer needs S→V");
            dw += &d_tr.dot(&sv.t());
            *cgrad.sv_weights.as_mut().expect("allocated") += &w.t().dot(&d_tr);
        }
        let keys = ctx.script_keys.as_ref().expect("QA→S keys");
        let dl = nn::softmax_rows_backward(w, &dw) * scale_of(q);
        params
            .qa_s
            .query
            .accumulate(cache.text.view(), dl.dot(keys).view(), &mut grad.qa_s.query);
        *cgrad.script_keys.as_mut().expect("allocated") += &dl.t().dot(q);
    }
    if let (Some(dv), true) = (&d_video, t.sv_summary) {
        *cgrad.summary.as_mut().expect("allocated") += &dv.sum_axis(Axis(0));
    }
    if let (Some(dv), Some((q, w))) = (&d_video, &cache.qa_v) {
        let dw = dv.dot(&ctx.video.t());
        let keys = ctx.video_keys.as_ref().expect("QA→V keys");
        let dl = nn::softmax_rows_backward(w, &dw) * scale_of(q);
        params
            .qa_v
            .query
            .accumulate(cache.text.view(), dl.dot(keys).view(), &mut grad.qa_v.query);
        *cgrad.video_keys.as_mut().expect("allocated") += &dl.t().dot(q);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn identity_proj(d: usize) -> AttentionProj {
        let eye = Linear {
            w: Array2::eye(d),
            b: Array1::zeros(d),
        };
        AttentionProj {
            query: eye.clone(),
            key: eye,
        }
    }

    fn random_stochastic(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((r, c), |_| rng.random_range(0.0..1.0f64));
        for mut row in m.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        m
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = AttentionProj::init(&mut rng, 3, 3, 4);
        let keys = array![[0.3, -0.2, 1.0], [0.3, -0.2, 1.0], [0.3, -0.2, 1.0]];
        let query = array![[1.0, 2.0, 3.0], [-4.0, 0.0, 0.5]];
        let (w, _) = attention(query.view(), keys.view(), keys.view(), &proj).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = AttentionProj::init(&mut rng, 2, 3, 4);
        let (w, ctx) = attention(
            array![[1.0, 2.0]].view(),
            array![[0.1, 0.2, 0.3]].view(),
            array![[7.0, -1.0]].view(),
            &proj,
        )
        .unwrap();
        assert_eq!(w, array![[1.0]]);
        assert_eq!(ctx, array![[7.0, -1.0]]);
    }

    #[test]
    fn two_key_softmax_hand_value() {
        // d_a = 1 so the scale is 1; logits (0, ln 3).
        let proj = identity_proj(1);
        let (w, _) = attention(
            array![[1.0]].view(),
            array![[0.0], [3f64.ln()]].view(),
            array![[0.0], [1.0]].view(),
            &proj,
        )
        .unwrap();
        assert!((w[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((w[(0, 1)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn key_bias_shift_leaves_weights_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut proj = AttentionProj::init(&mut rng, 3, 3, 4);
        let q = array![[1.0, -0.5, 0.2], [0.0, 0.3, 2.0]];
        let k = array![[0.2, 0.1, 0.0], [1.0, -1.0, 0.5], [0.3, 0.3, 0.3]];
        let (w0, _) = attention(q.view(), k.view(), k.view(), &proj).unwrap();
        proj.key.b += 5.0;
        let (w1, _) = attention(q.view(), k.view(), k.view(), &proj).unwrap();
        assert!(w0.iter().zip(&w1).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn transfer_mask_cases() {
        let sv = array![[0.2, 0.8], [0.6, 0.4]];
        assert_eq!(
            transfer_mask(array![[1.0]].view(), array![[0.3, 0.7]].view()).unwrap(),
            array![[0.3, 0.7]]
        );
        assert_eq!(
            transfer_mask(array![[0.5, 0.5]].view(), Array2::<f64>::eye(2).view()).unwrap(),
            array![[0.5, 0.5]]
        );
        assert!(transfer_mask(array![[1.0]].view(), sv.view()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (m, e, f) = (
                rng.random_range(1..5),
                rng.random_range(1..7),
                rng.random_range(1..9),
            );
            let out = transfer_mask(
                random_stochastic(&mut rng, m, e).view(),
                random_stochastic(&mut rng, e, f).view(),
            )
            .unwrap();
            for row in out.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_fusion_weights_emit_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let config = ModelConfig::tiny(4);
        let mut p = GroundingParams::init(&mut rng, &config, 4, 4, 4);
        p.fuse_hidden.w.fill(0.0);
        p.fuse_out.w.fill(0.0);
        p.fuse_out.b = Array1::from_iter((0..4).map(|i| i as f64 - 1.5));
        let ctx = TaskContext::new(
            Array2::ones((2, 4)),
            Array2::ones((3, 4)),
            &p,
            ActiveTerms::of(&config),
        );
        let text = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let g = ground_step(
            &ctx,
            text,
            Array2::zeros((3, 4)).view(),
            Array1::zeros(4).view(),
            &p,
        )
        .unwrap();
        for row in g.context.rows() {
            assert_eq!(row, p.fuse_out.b);
        }
    }
}
