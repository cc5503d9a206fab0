//! Scaled dot-product attention, `ReducedSig`, Sig-Attention and the
//! additive multi-head block.
//!
//! Each head sums two signatures: one of the input sequence reduced to
//! `d_presig` channels, one of the attended sequence reduced the same way.
//! Head outputs are concatenated along the feature axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::signature::sig_dim;
use crate::tensor::Tensor;

/// Whether a signature is emitted for every prefix or once per sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigMode {
    Stream,
    Pooled,
}

impl SigMode {
    pub fn is_stream(self) -> bool {
        matches!(self, SigMode::Stream)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigAttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_presig: usize,
    pub sig_order: usize,
    pub mode: SigMode,
}

impl Default for SigAttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            heads: 8,
            d_presig: 32,
            sig_order: 2,
            mode: SigMode::Stream,
        }
    }
}

impl SigAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.d_presig == 0 || self.sig_order == 0 {
            return Err(Error::Config("d_presig and sig_order must be >= 1".into()));
        }
        sig_dim(self.d_presig, self.sig_order)?;
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn sig_dim(&self) -> usize {
        sig_dim(self.d_presig, self.sig_order).expect("validated config")
    }

    /// Width of the concatenated head outputs, `heads · sig_dim`.
    pub fn output_width(&self) -> usize {
        self.heads * self.sig_dim()
    }
}

/// Parameters of one head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Input-branch reduction, `d_model × d_presig`.
    pub wx: ParamId,
    /// Attention-branch reduction, `d_k × d_presig`.
    pub wr: ParamId,
    pub br: ParamId,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SigAttentionConfig,
        rng: &mut R,
    ) -> Self {
        let (dm, dk, dp) = (cfg.d_model, cfg.d_k(), cfg.d_presig);
        Self {
            wq: store.add(format!("{prefix}.wq"), Tensor::glorot(dm, dk, rng)),
            wk: store.add(format!("{prefix}.wk"), Tensor::glorot(dm, dk, rng)),
            wv: store.add(format!("{prefix}.wv"), Tensor::glorot(dm, dk, rng)),
            wx: store.add(format!("{prefix}.wx"), Tensor::glorot(dm, dp, rng)),
            wr: store.add(format!("{prefix}.wr"), Tensor::glorot(dk, dp, rng)),
            br: store.add(format!("{prefix}.br"), Tensor::zeros(&[dp])),
        }
    }
}

/// `softmax(QKᵀ / √d_k) · V`.
pub fn scaled_dot_attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    if qs.len() != 2 || qs != ks || ks[0] != vs.first().copied().unwrap_or(0) {
        return Err(Error::dim("scaled_dot_attention", &qs, &ks));
    }
    let d_k = qs[1] as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / d_k.sqrt());
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v)
}

/// Signature transform of `x`, or its stand-in when signatures are ablated.
///
/// The ablation keeps the reduced path and zero-pads it to `sig_dim`
/// columns; in pooled mode the path is averaged over positions first.
pub fn signature_or_identity(
    tape: &mut Tape<'_>,
    path: Var,
    order: usize,
    mode: SigMode,
    use_signature: bool,
) -> Result<Var> {
    let (_, d) = match tape.shape(path) {
        [r, c] => (*r, *c),
        s => return Err(Error::Contract(format!("path must be L×d, got {s:?}"))),
    };
    if use_signature {
        return tape.signature(path, order, mode.is_stream());
    }
    let width = sig_dim(d, order)?;
    match mode {
        SigMode::Stream => tape.pad_cols(path, width),
        SigMode::Pooled => tape.mean_pad_rows(path, width),
    }
}

/// `S^N(x·W + b)` applied to an `L × d_in` sequence.
#[allow(clippy::too_many_arguments)]
pub fn reduced_sig(
    tape: &mut Tape<'_>,
    x: Var,
    w: Var,
    b: Option<Var>,
    order: usize,
    mode: SigMode,
    use_signature: bool,
) -> Result<Var> {
    let mut y = tape.matmul(x, w)?;
    if let Some(b) = b {
        y = tape.add_bias(y, b)?;
    }
    signature_or_identity(tape, y, order, mode, use_signature)
}

/// `ReducedSig(Attention(Q, K, V))` for already-projected `Q`, `K`, `V`.
pub fn sig_attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    head: &HeadParams,
    cfg: &SigAttentionConfig,
    use_signature: bool,
) -> Result<Var> {
    let attended = scaled_dot_attention(tape, q, k, v)?;
    let (wr, br) = (tape.param(head.wr), tape.param(head.br));
    reduced_sig(tape, attended, wr, Some(br), cfg.sig_order, cfg.mode, use_signature)
}

/// One head: input-branch signature plus Sig-Attention signature.
pub fn sig_head(
    tape: &mut Tape<'_>,
    x: Var,
    head: &HeadParams,
    cfg: &SigAttentionConfig,
    use_signature: bool,
) -> Result<Var> {
    let q = {
        let w = tape.param(head.wq);
        tape.matmul(x, w)?
    };
    let k = {
        let w = tape.param(head.wk);
        tape.matmul(x, w)?
    };
    let v = {
        let w = tape.param(head.wv);
        tape.matmul(x, w)?
    };
    let attn = sig_attention(tape, q, k, v, head, cfg, use_signature)?;
    let wx = tape.param(head.wx);
    let direct = reduced_sig(tape, x, wx, None, cfg.sig_order, cfg.mode, use_signature)?;
    tape.add(direct, attn)
}

/// Self-attention over `x` (`Q = K = V = X`), heads concatenated along features.
///
/// Output is `L × (h·sig_dim)` in stream mode and `1 × (h·sig_dim)` pooled.
pub fn additive_multi_head(
    tape: &mut Tape<'_>,
    x: Var,
    heads: &[HeadParams],
    cfg: &SigAttentionConfig,
    use_signature: bool,
) -> Result<Var> {
    match tape.shape(x) {
        [_, c] if *c == cfg.d_model => {}
        s => return Err(Error::dim("additive_multi_head", s, &[0, cfg.d_model])),
    }
    let outs = heads
        .iter()
        .map(|h| sig_head(tape, x, h, cfg, use_signature))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_cols(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_widths() {
        let cfg = SigAttentionConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.d_k(), 96);
        assert_eq!(cfg.sig_dim(), 1056);
        assert_eq!(cfg.output_width(), 8448);
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = SigAttentionConfig {
            d_model: 10,
            heads: 3,
            ..SigAttentionConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn attention_single_position_returns_v() {
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::matrix(1, 2, vec![0.3, -2.0]).unwrap());
        let k = tape.constant(&Tensor::matrix(1, 2, vec![5.0, 1.0]).unwrap());
        let v = tape.constant(&Tensor::matrix(1, 2, vec![7.0, -1.5]).unwrap());
        let out = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(out), &[7.0, -1.5]);
    }

    #[test]
    fn attention_hand_example() {
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap());
        let k = tape.constant(&Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap());
        let v = tape.constant(&Tensor::matrix(2, 1, vec![2.0, 4.0]).unwrap());
        let out = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        let e = std::f64::consts::E;
        let first = 2.0 * e / (e + 1.0) + 4.0 / (e + 1.0);
        assert!((tape.value(out)[0] - first).abs() < 1e-14);
        assert!((tape.value(out)[0] - 2.5379).abs() < 1e-4);
        assert!((tape.value(out)[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn equal_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng));
        let k = tape.constant(&Tensor::from_rows(&vec![vec![0.2, -0.4, 1.1]; 4]).unwrap());
        let vt = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let v = tape.constant(&vt);
        let out = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..4).map(|i| vt.get2(i, j)).sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!((tape.value(out)[i * 3 + j] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::zeros(&[2, 3]));
        let k = tape.constant(&Tensor::zeros(&[2, 4]));
        assert!(scaled_dot_attention(&mut tape, q, k, k).is_err());
    }
}
