//! The Sig-Transformer Encoder stack.
//!
//! Each layer has three sub-layers:
//!
//! ```text
//! s1 = dropout(AdditiveMultiHead(x))                      L × (h·d_sig)
//! s2 = dropout(s1 · W_ff1 + b_ff1)                        L × d_model
//! s3 = layer_norm(s2 + dropout(FFN(s2)))                  L × d_model
//! FFN(z) = dropout(relu(z · W_a + b_a)) · W_b + b_b
//! ```
//!
//! Only the third sub-layer carries a residual connection and layer norm;
//! the first two change width so there is nothing to add back.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{additive_multi_head, HeadParams, SigAttentionConfig, SigMode};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How the final per-position outputs are reduced to one prediction vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Last,
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteConfig {
    pub attention: SigAttentionConfig,
    pub n_layers: usize,
    /// Hidden width of the third sub-layer; `None` means `d_model`.
    pub d_ff_hidden: Option<usize>,
    pub p_drop: f64,
    pub use_positional_encoding: bool,
    pub use_signature: bool,
    pub pooling: Pooling,
}

impl Default for SteConfig {
    fn default() -> Self {
        Self {
            attention: SigAttentionConfig::default(),
            n_layers: 1,
            d_ff_hidden: None,
            p_drop: 0.1,
            use_positional_encoding: true,
            use_signature: true,
            pooling: Pooling::Mean,
        }
    }
}

impl SteConfig {
    /// Small configuration used by tests, gradient checks and desk-scale experiments.
    pub fn toy() -> Self {
        Self {
            attention: SigAttentionConfig {
                d_model: 8,
                heads: 2,
                d_presig: 2,
                sig_order: 2,
                mode: SigMode::Stream,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("p_drop must lie in [0, 1), got {}", self.p_drop)));
        }
        if self.attention.mode == SigMode::Pooled && self.n_layers != 1 {
            return Err(Error::Config(format!(
                "pooled signature mode collapses the sequence and needs n_layers = 1, got {}",
                self.n_layers
            )));
        }
        if self.use_positional_encoding && !self.attention.d_model.is_multiple_of(2) {
            return Err(Error::Config("positional encoding needs an even d_model".into()));
        }
        if self.d_ff_hidden == Some(0) {
            return Err(Error::Config("d_ff_hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.attention.d_model
    }

    pub fn hidden(&self) -> usize {
        self.d_ff_hidden.unwrap_or(self.attention.d_model)
    }
}

/// Sinusoidal table: `PE[t, 2i] = sin(t / 10000^{2i/d})`, `PE[t, 2i+1] = cos(…)`.
pub fn positional_encoding(len: usize, d_model: usize) -> Result<Tensor> {
    if len == 0 || d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs L >= 1 and an even d_model, got L={len}, d_model={d_model}"
        )));
    }
    let mut data = vec![0.0; len * d_model];
    for t in 0..len {
        for i in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[t * d_model + 2 * i] = angle.sin();
            data[t * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(len, d_model, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteLayerParams {
    pub heads: Vec<HeadParams>,
    /// `(h·sig_dim) × d_model`.
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2a: ParamId,
    pub b_ff2a: ParamId,
    pub w_ff2b: ParamId,
    pub b_ff2b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl SteLayerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SteConfig,
        rng: &mut R,
    ) -> Self {
        let att = &cfg.attention;
        let heads = (0..att.heads)
            .map(|i| HeadParams::init(store, &format!("{prefix}.head{i}"), att, rng))
            .collect();
        let (dm, hid, wide) = (att.d_model, cfg.hidden(), att.output_width());
        Self {
            heads,
            w_ff1: store.add(format!("{prefix}.ff1.w"), Tensor::glorot(wide, dm, rng)),
            b_ff1: store.add(format!("{prefix}.ff1.b"), Tensor::zeros(&[dm])),
            w_ff2a: store.add(format!("{prefix}.ff2a.w"), Tensor::glorot(dm, hid, rng)),
            b_ff2a: store.add(format!("{prefix}.ff2a.b"), Tensor::zeros(&[hid])),
            w_ff2b: store.add(format!("{prefix}.ff2b.w"), Tensor::glorot(hid, dm, rng)),
            b_ff2b: store.add(format!("{prefix}.ff2b.b"), Tensor::zeros(&[dm])),
            ln_gain: store.add(format!("{prefix}.ln.gain"), Tensor::full(&[dm], 1.0)),
            ln_bias: store.add(format!("{prefix}.ln.bias"), Tensor::zeros(&[dm])),
        }
    }
}

fn linear(tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (wv, bv) = (tape.param(w), tape.param(b));
    let y = tape.matmul(x, wv)?;
    tape.add_bias(y, bv)
}

pub fn ste_layer_forward<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    params: &SteLayerParams,
    cfg: &SteConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let p = cfg.p_drop;
    let att = additive_multi_head(tape, x, &params.heads, &cfg.attention, cfg.use_signature)?;
    let s1 = tape.dropout(att, p, training, rng)?;

    let proj = linear(tape, s1, params.w_ff1, params.b_ff1)?;
    let s2 = tape.dropout(proj, p, training, rng)?;

    let hidden = linear(tape, s2, params.w_ff2a, params.b_ff2a)?;
    let hidden = tape.relu(hidden);
    let hidden = tape.dropout(hidden, p, training, rng)?;
    let ffn = linear(tape, hidden, params.w_ff2b, params.b_ff2b)?;
    let ffn = tape.dropout(ffn, p, training, rng)?;
    let res = tape.add(s2, ffn)?;
    let (g, b) = (tape.param(params.ln_gain), tape.param(params.ln_bias));
    tape.layer_norm(res, g, b, LAYER_NORM_EPS)
}

/// Encoder parameters for the whole stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteEncoder {
    pub layers: Vec<SteLayerParams>,
}

impl SteEncoder {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &SteConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.n_layers)
            .map(|i| SteLayerParams::init(store, &format!("encoder.layer{i}"), cfg, rng))
            .collect();
        Ok(Self { layers })
    }
}

/// Run the stack on an `L × d_model` embedding matrix.
///
/// Returns `L × d_model` in stream mode and `1 × d_model` in pooled mode.
pub fn encoder_forward<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    embeddings: Var,
    encoder: &SteEncoder,
    cfg: &SteConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    cfg.validate()?;
    let len = match tape.shape(embeddings) {
        [l, c] if *c == cfg.d_model() => *l,
        s => return Err(Error::dim("encoder_forward", s, &[0, cfg.d_model()])),
    };
    if encoder.layers.len() != cfg.n_layers {
        return Err(Error::Config(format!(
            "encoder has {} layers, config says {}",
            encoder.layers.len(),
            cfg.n_layers
        )));
    }
    let mut x = embeddings;
    if cfg.use_positional_encoding {
        let pe = tape.constant(&positional_encoding(len, cfg.d_model())?);
        x = tape.add(x, pe)?;
    }
    for layer in &encoder.layers {
        x = ste_layer_forward(tape, x, layer, cfg, training, rng)?;
    }
    Ok(x)
}

/// Reduce an `L × d` output to the `1 × d` prediction input.
pub fn pool(tape: &mut Tape<'_>, x: Var, pooling: Pooling) -> Result<Var> {
    let rows = tape.shape(x)[0];
    match pooling {
        _ if rows == 1 && tape.shape(x).len() == 2 => Ok(x),
        Pooling::Mean => tape.mean_rows(x),
        Pooling::Last => tape.row(x, rows - 1),
        Pooling::First => tape.row(x, 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(6, 8).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((pe.get2(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get2(1, 0) - 0.8415).abs() < 1e-4);
        assert!(matches!(positional_encoding(3, 7), Err(Error::Config(_))));
    }

    #[test]
    fn pooled_mode_needs_single_layer() {
        let mut cfg = SteConfig::toy();
        cfg.attention.mode = SigMode::Pooled;
        cfg.n_layers = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.n_layers = 1;
        cfg.validate().unwrap();
    }

    #[test]
    fn stream_layer_keeps_shape() {
        let cfg = SteConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = SteEncoder::init(&mut store, &cfg, &mut rng).unwrap();
        for len in [1, 2, 5] {
            let x = Tensor::uniform(&[len, 8], -1.0, 1.0, &mut rng);
            let mut tape = Tape::with_params(&store);
            let xv = tape.constant(&x);
            let y = encoder_forward(&mut tape, xv, &enc, &cfg, true, &mut rng).unwrap();
            assert_eq!(tape.shape(y), &[len, 8]);
            assert!(tape.value(y).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_ffn_reduces_to_layer_norm() {
        let cfg = SteConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = SteEncoder::init(&mut store, &cfg, &mut rng).unwrap();
        let l = &enc.layers[0];
        for id in [l.w_ff2a, l.w_ff2b, l.b_ff2a, l.b_ff2b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(&x);
        let att = additive_multi_head(&mut tape, xv, &l.heads, &cfg.attention, true).unwrap();
        let s2 = linear(&mut tape, att, l.w_ff1, l.b_ff1).unwrap();
        let (g, b) = (tape.param(l.ln_gain), tape.param(l.ln_bias));
        let expected = tape.layer_norm(s2, g, b, LAYER_NORM_EPS).unwrap();
        let got = ste_layer_forward(&mut tape, xv, l, &cfg, false, &mut rng).unwrap();
        assert_eq!(tape.value(expected), tape.value(got));
    }
}
