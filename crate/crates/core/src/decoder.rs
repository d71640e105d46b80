//! Steps network (GRU cell or 2-layer MLP), prediction head and one
//! decoding step with its backward pass. Unrolling over steps lives in
//! [`crate::model`].

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::nn::{self, sigmoid, Linear};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepsKind {
    Mlp,
    #[default]
    Gru,
}

impl StepsKind {
    pub fn name(self) -> &'static str {
        match self {
            StepsKind::Mlp => "mlp",
            StepsKind::Gru => "gru",
        }
    }
}

/// PyTorch-convention GRU cell:
/// `r = σ(W_ir x + W_hr h)`, `z = σ(W_iz x + W_hz h)`,
/// `n = tanh(W_in x + r ⊙ (W_hn h))`, `h' = (1 - z) ⊙ n + z ⊙ h` (biases
/// live in each linear map).
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub ir: Linear,
    pub iz: Linear,
    pub in_: Linear,
    pub hr: Linear,
    pub hz: Linear,
    pub hn: Linear,
}

// One per model, so the size gap between variants does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum StepsNet {
    Gru(GruCell),
    /// `H = out(ReLU(hidden([C, h])))`.
    Mlp {
        hidden: Linear,
        out: Linear,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub steps: StepsNet,
    pub head_hidden: Linear,
    pub head_out: Linear,
    /// Initial state; drawn once and never trained.
    pub h0: Array1<f64>,
}

impl DecoderParams {
    pub fn init(
        rng: &mut ChaCha8Rng,
        h0_rng: &mut ChaCha8Rng,
        kind: StepsKind,
        d_c: usize,
        d_r: usize,
        d_h: usize,
        head_hidden: usize,
    ) -> Self {
        let steps = match kind {
            StepsKind::Gru => StepsNet::Gru(GruCell {
                ir: Linear::init(rng, d_c, d_r),
                iz: Linear::init(rng, d_c, d_r),
                in_: Linear::init(rng, d_c, d_r),
                hr: Linear::init(rng, d_r, d_r),
                hz: Linear::init(rng, d_r, d_r),
                hn: Linear::init(rng, d_r, d_r),
            }),
            StepsKind::Mlp => StepsNet::Mlp {
                hidden: Linear::init(rng, d_c + d_r, d_h),
                out: Linear::init(rng, d_h, d_r),
            },
        };
        let head_hidden_layer = Linear::init(rng, d_r, head_hidden);
        let head_out = Linear::init(rng, head_hidden, 1);
        let h0 = Array1::from_iter((0..d_r).map(|_| StandardNormal.sample(h0_rng)));
        Self {
            steps,
            head_hidden: head_hidden_layer,
            head_out,
            h0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let steps = match &self.steps {
            StepsNet::Gru(g) => StepsNet::Gru(GruCell {
                ir: g.ir.zeros_like(),
                iz: g.iz.zeros_like(),
                in_: g.in_.zeros_like(),
                hr: g.hr.zeros_like(),
                hz: g.hz.zeros_like(),
                hn: g.hn.zeros_like(),
            }),
            StepsNet::Mlp { hidden, out } => StepsNet::Mlp {
                hidden: hidden.zeros_like(),
                out: out.zeros_like(),
            },
        };
        Self {
            steps,
            head_hidden: self.head_hidden.zeros_like(),
            head_out: self.head_out.zeros_like(),
            h0: Array1::zeros(self.h0.len()),
        }
    }

    pub fn kind(&self) -> StepsKind {
        match self.steps {
            StepsNet::Gru(_) => StepsKind::Gru,
            StepsNet::Mlp { .. } => StepsKind::Mlp,
        }
    }

    pub fn d_r(&self) -> usize {
        self.h0.len()
    }

    pub fn d_c(&self) -> usize {
        match &self.steps {
            StepsNet::Gru(g) => g.ir.fan_in(),
            StepsNet::Mlp { hidden, .. } => hidden.fan_in() - self.d_r(),
        }
    }

    pub fn layers(&self) -> Vec<(&'static str, &Linear)> {
        let mut v: Vec<(&'static str, &Linear)> = match &self.steps {
            StepsNet::Gru(g) => vec![
                ("decoder.gru.ir", &g.ir),
                ("decoder.gru.iz", &g.iz),
                ("decoder.gru.in", &g.in_),
                ("decoder.gru.hr", &g.hr),
                ("decoder.gru.hz", &g.hz),
                ("decoder.gru.hn", &g.hn),
            ],
            StepsNet::Mlp { hidden, out } => {
                vec![("decoder.mlp.hidden", hidden), ("decoder.mlp.out", out)]
            }
        };
        v.push(("decoder.head_hidden", &self.head_hidden));
        v.push(("decoder.head_out", &self.head_out));
        v
    }

    pub fn layers_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        let mut v: Vec<(&'static str, &mut Linear)> = match &mut self.steps {
            StepsNet::Gru(g) => vec![
                ("decoder.gru.ir", &mut g.ir),
                ("decoder.gru.iz", &mut g.iz),
                ("decoder.gru.in", &mut g.in_),
                ("decoder.gru.hr", &mut g.hr),
                ("decoder.gru.hz", &mut g.hz),
                ("decoder.gru.hn", &mut g.hn),
            ],
            StepsNet::Mlp { hidden, out } => {
                vec![("decoder.mlp.hidden", hidden), ("decoder.mlp.out", out)]
            }
        };
        v.push(("decoder.head_hidden", &mut self.head_hidden));
        v.push(("decoder.head_out", &mut self.head_out));
        v
    }
}

#[derive(Clone, Debug)]
enum StepsCache {
    Gru {
        hm: Array2<f64>,
        r: Array2<f64>,
        z: Array2<f64>,
        n: Array2<f64>,
        hn: Array2<f64>,
    },
    Mlp {
        input: Array2<f64>,
        pre: Array2<f64>,
        hidden: Array2<f64>,
    },
}

/// Output of one decoding step over all candidates.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Incoming state shared by every candidate.
    pub h_in: Array1<f64>,
    pub contexts: Array2<f64>,
    /// `H`, one row per candidate.
    pub states: Array2<f64>,
    pub logits: Array1<f64>,
    /// Softmax of the logits.
    pub scores: Array1<f64>,
    cache: StepsCache,
    head_pre: Array2<f64>,
    head_act: Array2<f64>,
}

fn repeat_row(h: ArrayView1<f64>, n: usize) -> Array2<f64> {
    h.broadcast((n, h.len())).expect("broadcast").to_owned()
}

/// One step: `H_j = steps(C_j, h)` for every candidate, then softmax over
/// `head(H_j)`. Without history the incoming state is always `h0`.
pub fn step_forward(
    h_prev: ArrayView1<f64>,
    contexts: Array2<f64>,
    params: &DecoderParams,
    history: bool,
) -> Result<StepOutput, ModelError> {
    let n = contexts.nrows();
    if n == 0 {
        return Err(ModelError::DimensionMismatch(
            "step without candidates".into(),
        ));
    }
    if contexts.ncols() != params.d_c() || h_prev.len() != params.d_r() {
        return Err(ModelError::DimensionMismatch(format!(
            "step input {}x{} with state {} for d_c {} / d_r {}",
            n,
            contexts.ncols(),
            h_prev.len(),
            params.d_c(),
            params.d_r()
        )));
    }
    let h_in = if history {
        h_prev.to_owned()
    } else {
        params.h0.clone()
    };
    let hm = repeat_row(h_in.view(), n);
    let (states, cache) = match &params.steps {
        StepsNet::Gru(g) => {
            let r = (g.ir.forward(contexts.view()) + g.hr.forward(hm.view())).mapv(sigmoid);
            let z = (g.iz.forward(contexts.view()) + g.hz.forward(hm.view())).mapv(sigmoid);
            let hn = g.hn.forward(hm.view());
            let n_gate = (g.in_.forward(contexts.view()) + &r * &hn).mapv(f64::tanh);
            let states = (1.0 - &z) * &n_gate + &z * &hm;
            (
                states,
                StepsCache::Gru {
                    hm,
                    r,
                    z,
                    n: n_gate,
                    hn,
                },
            )
        }
        StepsNet::Mlp { hidden, out } => {
            let input = concatenate(Axis(1), &[contexts.view(), hm.view()]).expect("rows agree");
            let pre = hidden.forward(input.view());
            let act = nn::relu(&pre);
            (
                out.forward(act.view()),
                StepsCache::Mlp {
                    input,
                    pre,
                    hidden: act,
                },
            )
        }
    };
    let head_pre = params.head_hidden.forward(states.view());
    let head_act = nn::relu(&head_pre);
    let logits = params
        .head_out
        .forward(head_act.view())
        .column(0)
        .to_owned();
    let scores = nn::softmax(logits.view());
    Ok(StepOutput {
        h_in,
        contexts,
        states,
        logits,
        scores,
        cache,
        head_pre,
        head_act,
    })
}

/// Backward of [`step_forward`]. Returns `dL/dC` and `dL/dh_in` (the
/// latter is meaningless without history and should then be dropped).
pub fn step_backward(
    out: &StepOutput,
    d_logits: &Array1<f64>,
    d_states_extra: &Array2<f64>,
    params: &DecoderParams,
    grad: &mut DecoderParams,
) -> (Array2<f64>, Array1<f64>) {
    let dl = d_logits.view().insert_axis(Axis(1));
    let d_act = params
        .head_out
        .backward(out.head_act.view(), dl, &mut grad.head_out);
    let d_pre = nn::relu_backward(&out.head_pre, &d_act);
    let d_states =
        params
            .head_hidden
            .backward(out.states.view(), d_pre.view(), &mut grad.head_hidden)
            + d_states_extra;

    match (&params.steps, &mut grad.steps, &out.cache) {
        (StepsNet::Gru(g), StepsNet::Gru(gg), StepsCache::Gru { hm, r, z, n, hn }) => {
            let dn = &d_states * &(1.0 - z);
            let dz = &d_states * &(hm - n);
            let mut dh = &d_states * z;
            let dn_pre = dn * &n.mapv(|v| 1.0 - v * v);
            let dr = &dn_pre * hn;
            let d_hn = &dn_pre * r;
            let dr_pre = dr * &r.mapv(|v| v * (1.0 - v));
            let dz_pre = dz * &z.mapv(|v| v * (1.0 - v));
            let x = out.contexts.view();
            let mut dx = g.in_.backward(x, dn_pre.view(), &mut gg.in_);
            dx += &g.ir.backward(x, dr_pre.view(), &mut gg.ir);
            dx += &g.iz.backward(x, dz_pre.view(), &mut gg.iz);
            dh += &g.hn.backward(hm.view(), d_hn.view(), &mut gg.hn);
            dh += &g.hr.backward(hm.view(), dr_pre.view(), &mut gg.hr);
            dh += &g.hz.backward(hm.view(), dz_pre.view(), &mut gg.hz);
            (dx, dh.sum_axis(Axis(0)))
        }
        (
            StepsNet::Mlp { hidden, out: o },
            StepsNet::Mlp {
                hidden: gh,
                out: go,
            },
            StepsCache::Mlp {
                input,
                pre,
                hidden: act,
            },
        ) => {
            let d_act = o.backward(act.view(), d_states.view(), go);
            let d_pre = nn::relu_backward(pre, &d_act);
            let d_in = hidden.backward(input.view(), d_pre.view(), gh);
            let d_c = out.contexts.ncols();
            (
                d_in.slice(s![.., ..d_c]).to_owned(),
                d_in.slice(s![.., d_c..]).sum_axis(Axis(0)),
            )
        }
        _ => unreachable!("gradient buffer built from the same parameters"),
    }
}
