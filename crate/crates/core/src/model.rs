//! Encoder plus heads, and the no-encoder baseline, behind one type.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::PrescriptionRecord;
use crate::encoder::{encoder_forward, pool, Pooling, SteConfig, SteEncoder};
use crate::error::{Error, Result};
use crate::heads::{heads_forward, multitask_loss, ClassWeights, HeadOutputs, HeadsParams, TaskWeights};
use crate::metrics::{evaluate_metrics, Prediction, RunMetrics};
use crate::rng::{stream_rng, Stream};

/// Model families compared by the experiment harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Full encoder with positional encoding and signatures.
    #[serde(rename = "ste")]
    Ste,
    /// Positional encoding removed.
    #[serde(rename = "ste-no-pe")]
    SteNoPe,
    /// Signature transforms replaced by the reduced path itself.
    #[serde(rename = "ste-no-st")]
    SteNoSt,
    /// Heads on a single pooled embedding, no encoder.
    #[serde(rename = "baseline")]
    Baseline,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Ste => "STE",
            Variant::SteNoPe => "STE w/o PE",
            Variant::SteNoSt => "STE w/o ST",
            Variant::Baseline => "Baseline (pooled embedding)",
        }
    }

    /// Encoder configuration after applying this variant's ablation.
    pub fn apply(self, base: &SteConfig) -> SteConfig {
        let mut cfg = base.clone();
        match self {
            Variant::SteNoPe => cfg.use_positional_encoding = false,
            Variant::SteNoSt => cfg.use_signature = false,
            Variant::Ste | Variant::Baseline => {}
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub encoder: SteConfig,
    /// Pooling of the raw embeddings for the baseline; `first` stands in for a `[CLS]` token.
    pub baseline_pooling: Pooling,
}

impl ModelSpec {
    pub fn new(variant: Variant, base: &SteConfig) -> Self {
        Self {
            variant,
            encoder: variant.apply(base),
            baseline_pooling: Pooling::First,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub encoder: Option<SteEncoder>,
    pub heads: HeadsParams,
}

impl Model {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.encoder.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let mut store = ParamStore::new();
        let encoder = match spec.variant {
            Variant::Baseline => None,
            _ => Some(SteEncoder::init(&mut store, &spec.encoder, &mut rng)?),
        };
        let heads = HeadsParams::init(&mut store, spec.encoder.d_model(), &mut rng);
        Ok(Self {
            spec: spec.clone(),
            store,
            encoder,
            heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.spec.encoder.d_model()
    }

    /// Forward one record on `tape`, which must have been built over `self.store`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        record: &PrescriptionRecord,
        training: bool,
        rng: &mut R,
    ) -> Result<HeadOutputs> {
        match record.embeddings.shape() {
            [_, c] if *c == self.d_model() => {}
            s => return Err(Error::dim("Model::forward", s, &[0, self.d_model()])),
        }
        let x = tape.constant(&record.embeddings);
        let rep = self.representation(tape, x, training, rng)?;
        heads_forward(tape, rep, &self.heads, training, rng)
    }

    fn representation<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match &self.encoder {
            None => pool(tape, x, self.spec.baseline_pooling),
            Some(enc) => {
                let out = encoder_forward(tape, x, enc, &self.spec.encoder, training, rng)?;
                pool(tape, out, self.spec.encoder.pooling)
            }
        }
    }

    /// Mean multi-task loss over `batch`; gradients land in the store's grad slots when `backprop`.
    pub fn batch_loss(
        &mut self,
        batch: &[&PrescriptionRecord],
        weights: &TaskWeights,
        class_weights: Option<&ClassWeights>,
        training: bool,
        backprop: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut tape = Tape::with_params(&self.store);
        let mut terms = Vec::with_capacity(batch.len());
        let scale = 1.0 / batch.len() as f64;
        for rec in batch {
            let out = self.forward(&mut tape, rec, training, rng)?;
            let l = multitask_loss(&mut tape, &out, &rec.targets(), weights, class_weights)?;
            terms.push((l, scale));
        }
        let loss = tape.lin_comb(&terms)?;
        let value = tape.scalar(loss);
        if backprop {
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = (0..self.store.len())
                .map(|i| {
                    tape.grad(Var(i))
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; self.store.get(crate::ParamId(i)).len()])
                })
                .collect();
            drop(tape);
            for (t, g) in self.store.tensors_mut().iter_mut().zip(grads) {
                t.grad = Some(g);
            }
        }
        Ok(value)
    }

    /// Mean inference-mode loss over `records`.
    pub fn mean_loss(&self, records: &[PrescriptionRecord], weights: &TaskWeights) -> Result<f64> {
        if records.is_empty() {
            return Err(Error::Data("cannot compute a loss over no records".into()));
        }
        let mut rng = stream_rng(0, Stream::Dropout);
        let mut total = 0.0;
        for rec in records {
            let mut tape = Tape::with_params(&self.store);
            let out = self.forward(&mut tape, rec, false, &mut rng)?;
            let l = multitask_loss(&mut tape, &out, &rec.targets(), weights, None)?;
            total += tape.scalar(l);
        }
        Ok(total / records.len() as f64)
    }

    pub fn predict(&self, record: &PrescriptionRecord) -> Result<Prediction> {
        let mut rng = stream_rng(0, Stream::Dropout);
        let mut tape = Tape::with_params(&self.store);
        let out = self.forward(&mut tape, record, false, &mut rng)?;
        Ok(Prediction {
            quantity: tape.scalar(out.quantity),
            tag: argmax(tape.value(out.tag_logits)),
            indication: argmax(tape.value(out.ind_logits)),
        })
    }

    pub fn evaluate(&self, records: &[PrescriptionRecord]) -> Result<RunMetrics> {
        let preds = records
            .iter()
            .map(|r| self.predict(r))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<Prediction> = records
            .iter()
            .map(|r| {
                let t = r.targets();
                Prediction {
                    quantity: t.quantity,
                    tag: t.tag,
                    indication: t.indication,
                }
            })
            .collect();
        evaluate_metrics(&preds, &labels)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
