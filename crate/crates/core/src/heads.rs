//! Task-specific predictors on top of a pooled representation, and the
//! weighted multi-task loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 5;
pub const QUANTITY_HIDDEN: usize = 10;
pub const INDICATION_HIDDEN: usize = 50;
pub const HEAD_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadsParams {
    pub qty_w1: ParamId,
    pub qty_b1: ParamId,
    pub qty_w2: ParamId,
    pub qty_b2: ParamId,
    pub tag_w: ParamId,
    pub tag_b: ParamId,
    pub ind_w1: ParamId,
    pub ind_b1: ParamId,
    pub ind_w2: ParamId,
    pub ind_b2: ParamId,
}

impl HeadsParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, d_model: usize, rng: &mut R) -> Self {
        let mut add = |name: &str, t: Tensor| store.add(format!("heads.{name}"), t);
        Self {
            qty_w1: add("quantity.w1", Tensor::glorot(d_model, QUANTITY_HIDDEN, rng)),
            qty_b1: add("quantity.b1", Tensor::zeros(&[QUANTITY_HIDDEN])),
            qty_w2: add("quantity.w2", Tensor::glorot(QUANTITY_HIDDEN, 1, rng)),
            qty_b2: add("quantity.b2", Tensor::zeros(&[1])),
            tag_w: add("tag.w", Tensor::glorot(d_model, N_CLASSES, rng)),
            tag_b: add("tag.b", Tensor::zeros(&[N_CLASSES])),
            ind_w1: add("indication.w1", Tensor::glorot(d_model, INDICATION_HIDDEN, rng)),
            ind_b1: add("indication.b1", Tensor::zeros(&[INDICATION_HIDDEN])),
            ind_w2: add("indication.w2", Tensor::glorot(INDICATION_HIDDEN, N_CLASSES, rng)),
            ind_b2: add("indication.b2", Tensor::zeros(&[N_CLASSES])),
        }
    }

    pub fn ids(&self) -> [ParamId; 10] {
        [
            self.qty_w1, self.qty_b1, self.qty_w2, self.qty_b2, self.tag_w, self.tag_b,
            self.ind_w1, self.ind_b1, self.ind_w2, self.ind_b2,
        ]
    }

    pub fn indication_ids(&self) -> [ParamId; 4] {
        [self.ind_w1, self.ind_b1, self.ind_w2, self.ind_b2]
    }
}

/// Loss weights for quantity, quantity tag and indication; a point on the 2-simplex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct TaskWeights {
    pub alpha_qnt: f64,
    pub beta_qntt: f64,
    pub beta_ind: f64,
}

impl TaskWeights {
    pub fn new(alpha_qnt: f64, beta_qntt: f64, beta_ind: f64) -> Result<Self> {
        let w = [alpha_qnt, beta_qntt, beta_ind];
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("task weights must lie in [0, 1], got {w:?}")));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("task weights must sum to 1, got {w:?}")));
        }
        Ok(Self {
            alpha_qnt,
            beta_qntt,
            beta_ind,
        })
    }

    pub fn uniform() -> Self {
        Self::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).expect("on simplex")
    }
}

impl TryFrom<[f64; 3]> for TaskWeights {
    type Error = Error;
    fn try_from(w: [f64; 3]) -> Result<Self> {
        Self::new(w[0], w[1], w[2])
    }
}

impl From<TaskWeights> for [f64; 3] {
    fn from(w: TaskWeights) -> Self {
        [w.alpha_qnt, w.beta_qntt, w.beta_ind]
    }
}

/// Outputs of the three predictors for one example.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `1 × 1`
    pub quantity: Var,
    /// `1 × 5`
    pub tag_logits: Var,
    /// `1 × 5`
    pub ind_logits: Var,
}

fn linear(tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (wv, bv) = (tape.param(w), tape.param(b));
    let y = tape.matmul(x, wv)?;
    tape.add_bias(y, bv)
}

pub fn heads_forward<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    rep: Var,
    params: &HeadsParams,
    training: bool,
    rng: &mut R,
) -> Result<HeadOutputs> {
    let h = linear(tape, rep, params.qty_w1, params.qty_b1)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, HEAD_DROPOUT, training, rng)?;
    let quantity = linear(tape, h, params.qty_w2, params.qty_b2)?;

    let tag_logits = linear(tape, rep, params.tag_w, params.tag_b)?;

    let h = linear(tape, rep, params.ind_w1, params.ind_b1)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, HEAD_DROPOUT, training, rng)?;
    let ind_logits = linear(tape, h, params.ind_w2, params.ind_b2)?;
    Ok(HeadOutputs {
        quantity,
        tag_logits,
        ind_logits,
    })
}

/// Per-class cross-entropy weights for the two classification tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassWeights {
    pub tag: [f64; N_CLASSES],
    pub indication: [f64; N_CLASSES],
}

/// Ground truth for one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Targets {
    pub quantity: f64,
    pub tag: usize,
    pub indication: usize,
}

/// `α·MSE + β_tag·CE_tag + β_ind·CE_ind` for one example.
pub fn multitask_loss(
    tape: &mut Tape<'_>,
    out: &HeadOutputs,
    target: &Targets,
    weights: &TaskWeights,
    class_weights: Option<&ClassWeights>,
) -> Result<Var> {
    for (name, label) in [("quantity_tag", target.tag), ("indication", target.indication)] {
        if label >= N_CLASSES {
            return Err(Error::Data(format!("{name} label {label} outside [0, {N_CLASSES})")));
        }
    }
    let (wt, wi) = class_weights.map_or((1.0, 1.0), |c| (c.tag[target.tag], c.indication[target.indication]));
    let mse = tape.squared_error(out.quantity, target.quantity)?;
    let ce_tag = tape.cross_entropy(out.tag_logits, target.tag, wt)?;
    let ce_ind = tape.cross_entropy(out.ind_logits, target.indication, wi)?;
    tape.lin_comb(&[
        (mse, weights.alpha_qnt),
        (ce_tag, weights.beta_qntt),
        (ce_ind, weights.beta_ind),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (ParamStore, HeadsParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let heads = HeadsParams::init(&mut store, 6, &mut rng);
        (store, heads)
    }

    #[test]
    fn weights_must_be_on_simplex() {
        assert!(TaskWeights::new(0.5, 0.3, 0.2).is_ok());
        assert!(TaskWeights::new(0.5, 0.3, 0.3).is_err());
        assert!(TaskWeights::new(1.2, -0.1, -0.1).is_err());
        let w: TaskWeights = serde_json::from_str("[0.2, 0.3, 0.5]").unwrap();
        assert_eq!(w.beta_ind, 0.5);
        assert!(serde_json::from_str::<TaskWeights>("[0.2, 0.3, 0.6]").is_err());
    }

    #[test]
    fn zero_params_emit_biases() {
        let (mut store, heads) = fixture();
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        store.get_mut(heads.qty_b2).data_mut()[0] = 2.5;
        store.get_mut(heads.tag_b).data_mut()[3] = -1.0;
        store.get_mut(heads.ind_b2).data_mut()[0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::with_params(&store);
        let rep = tape.constant(&Tensor::uniform(&[1, 6], -1.0, 1.0, &mut rng));
        let out = heads_forward(&mut tape, rep, &heads, false, &mut rng).unwrap();
        assert_eq!(tape.value(out.quantity), &[2.5]);
        assert_eq!(tape.value(out.tag_logits), store.get(heads.tag_b).data());
        assert_eq!(tape.value(out.ind_logits), store.get(heads.ind_b2).data());
        assert_eq!(tape.value(out.tag_logits).len(), 5);
    }

    #[test]
    fn indication_params_do_not_touch_other_heads() {
        let (store, heads) = fixture();
        let mut other = store.clone();
        for id in heads.indication_ids() {
            other.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.37);
        }
        let rep_t = Tensor::matrix(1, 6, vec![0.3, -0.2, 0.9, 0.0, 1.1, -0.5]).unwrap();
        let run = |s: &ParamStore| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape::with_params(s);
            let rep = tape.constant(&rep_t);
            let o = heads_forward(&mut tape, rep, &heads, false, &mut rng).unwrap();
            (
                tape.value(o.quantity).to_vec(),
                tape.value(o.tag_logits).to_vec(),
                tape.value(o.ind_logits).to_vec(),
            )
        };
        let (a, b) = (run(&store), run(&other));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(a.2, b.2);
    }

    fn loss_for(q_err: f64, logits_tag: [f64; 5], logits_ind: [f64; 5], w: TaskWeights) -> f64 {
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::matrix(1, 1, vec![q_err]).unwrap());
        let t = tape.constant(&Tensor::matrix(1, 5, logits_tag.to_vec()).unwrap());
        let i = tape.constant(&Tensor::matrix(1, 5, logits_ind.to_vec()).unwrap());
        let out = HeadOutputs {
            quantity: q,
            tag_logits: t,
            ind_logits: i,
        };
        let target = Targets {
            quantity: 0.0,
            tag: 0,
            indication: 0,
        };
        let l = multitask_loss(&mut tape, &out, &target, &w, None).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn loss_combines_linearly() {
        // uniform logits give CE = ln 5; pick a quantity error with MSE = 0.5
        let q = 0.5f64.sqrt();
        let w = TaskWeights::new(0.5, 0.3, 0.2).unwrap();
        let ln5 = 5f64.ln();
        let got = loss_for(q, [0.0; 5], [1.0; 5], w);
        assert!((got - (0.5 * 0.5 + 0.3 * ln5 + 0.2 * ln5)).abs() < 1e-12);
        assert!((0.5f64 * 0.5 + 0.3 * 1.0 + 0.2 * 2.0 - 0.95).abs() < 1e-12);

        let vertex = TaskWeights::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(loss_for(q, [3.0, 0.0, 0.0, 0.0, 0.0], [0.0; 5], vertex), q * q);
        let tag_only = TaskWeights::new(0.0, 1.0, 0.0).unwrap();
        assert!((loss_for(q, [0.0; 5], [9.0, 0.0, 0.0, 0.0, 0.0], tag_only) - ln5).abs() < 1e-9);
    }

    #[test]
    fn bad_label_is_data_error() {
        let (store, heads) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::with_params(&store);
        let rep = tape.constant(&Tensor::zeros(&[1, 6]));
        let out = heads_forward(&mut tape, rep, &heads, false, &mut rng).unwrap();
        let target = Targets {
            quantity: 1.0,
            tag: 5,
            indication: 0,
        };
        let r = multitask_loss(&mut tape, &out, &target, &TaskWeights::uniform(), None);
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
