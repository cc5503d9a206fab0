//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Every component is expressed as a function of a [`ParamStore`] whose
//! tensors are the differentiated inputs. The component output is reduced
//! to a scalar with a fixed random linear readout, so every output
//! coordinate contributes to the checked gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{additive_multi_head, HeadParams, SigMode};
use crate::autodiff::{Fault, ParamId, ParamStore, Tape, Var};
use crate::encoder::{encoder_forward, pool, SteConfig, SteEncoder};
use crate::error::{Error, Result};
use crate::heads::{heads_forward, multitask_loss, HeadsParams, TaskWeights, Targets};
use crate::rng::{mix_seed, stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so exact zeros compare absolutely.
    pub floor: f64,
    pub seed: u64,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            seed: 0,
            fault: None,
        }
    }
}

/// Result for one checked component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    /// Number of scalar inputs compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Input tensor and flat index of the worst disagreement.
    pub worst_param: String,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub rows: Vec<ComponentCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.component.len()).max().unwrap_or(9).max(9);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>12}  {:<40}  {}\n",
            "component", "inputs", "max rel err", "worst", "status"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>7}  {:>12.3e}  {:<40}  {}\n",
                r.component,
                r.checked,
                r.max_rel_err,
                format!("{}[{}]", r.worst_param, r.worst_index),
                if r.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

fn readout(tape: &mut Tape<'_>, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn evaluate<F>(store: &ParamStore, build: &F, weights: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let out = build(&mut tape)?;
    let r = readout(&mut tape, out, weights)?;
    Ok(tape.scalar(r))
}

/// Compare analytic and numeric gradients of `build` with respect to every scalar in `store`.
pub fn check_component<F>(
    component: &str,
    store: &ParamStore,
    build: F,
    cfg: &GradCheckConfig,
) -> Result<ComponentCheck>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let (weights, analytic) = {
        let mut tape = Tape::with_params(store);
        tape.inject_fault(cfg.fault);
        let out = build(&mut tape)?;
        let n = tape.value(out).len();
        let mut rng = stream_rng(mix_seed(&[cfg.seed, n as u64]), Stream::Init);
        let weights = Tensor::uniform(tape.shape(out), -1.0, 1.0, &mut rng);
        let r = readout(&mut tape, out, &weights)?;
        tape.backward(r)?;
        let grads: Vec<Vec<f64>> = (0..store.len())
            .map(|i| {
                tape.grad(Var(i))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(ParamId(i)).len()])
            })
            .collect();
        (weights, grads)
    };

    let mut probe = store.clone();
    let mut check = ComponentCheck {
        component: component.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        passed: true,
    };
    for (p, grad) in analytic.iter().enumerate() {
        let id = ParamId(p);
        for (j, &a) in grad.iter().enumerate() {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + cfg.step;
            let plus = evaluate(&probe, &build, &weights)?;
            probe.get_mut(id).data_mut()[j] = orig - cfg.step;
            let minus = evaluate(&probe, &build, &weights)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "{component}: non-finite gradient at {}[{j}]",
                    store.name(id)
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            check.checked += 1;
            if rel > check.max_rel_err || check.worst_param.is_empty() {
                check.max_rel_err = rel;
                check.worst_param = store.name(id).to_string();
                check.worst_index = j;
            }
        }
    }
    check.passed = check.max_rel_err <= cfg.tolerance;
    Ok(check)
}

fn inputs(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize])]) -> Result<(ParamStore, Vec<Var>)> {
    let mut store = ParamStore::new();
    let mut vars = Vec::new();
    for (name, shape) in specs {
        vars.push(store.add(*name, Tensor::uniform(shape, -1.0, 1.0, rng)).var());
    }
    Ok((store, vars))
}

type Build = Box<dyn Fn(&mut Tape<'_>) -> Result<Var>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, ParamStore, Build)>> {
    let mut cases: Vec<(&'static str, ParamStore, Build)> = Vec::new();
    let mut add = |name: &'static str, specs: &[(&str, &[usize])], f: Build| -> Result<()> {
        let (store, _) = inputs(rng, specs)?;
        cases.push((name, store, f));
        Ok(())
    };
    let (a, b, c) = (Var(0), Var(1), Var(2));
    add("matmul", &[("a", &[3, 4]), ("b", &[4, 2])], Box::new(move |t| t.matmul(a, b)))?;
    add(
        "transpose",
        &[("a", &[3, 4]), ("b", &[3, 2])],
        Box::new(move |t| {
            let at = t.transpose(a)?;
            t.matmul(at, b)
        }),
    )?;
    add("add", &[("a", &[3, 4]), ("b", &[3, 4])], Box::new(move |t| t.add(a, b)))?;
    add("add_bias", &[("x", &[3, 4]), ("b", &[4])], Box::new(move |t| t.add_bias(a, b)))?;
    add("mul", &[("a", &[2, 3]), ("b", &[2, 3])], Box::new(move |t| t.mul(a, b)))?;
    add(
        "scale+sum",
        &[("a", &[2, 3])],
        Box::new(move |t| {
            let s = t.scale(a, -1.7);
            Ok(t.sum(s))
        }),
    )?;
    add("mean_rows", &[("a", &[4, 3])], Box::new(move |t| t.mean_rows(a)))?;
    add("row", &[("a", &[4, 3])], Box::new(move |t| t.row(a, 2)))?;
    add("relu", &[("a", &[3, 5])], Box::new(move |t| Ok(t.relu(a))))?;
    add("softmax_rows", &[("a", &[3, 4])], Box::new(move |t| t.softmax_rows(a)))?;
    add(
        "layer_norm",
        &[("x", &[3, 5]), ("gain", &[5]), ("bias", &[5])],
        Box::new(move |t| t.layer_norm(a, b, c, 1e-5)),
    )?;
    add(
        "dropout",
        &[("a", &[4, 4])],
        Box::new(move |t| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(7);
            t.dropout(a, 0.3, true, &mut mask_rng)
        }),
    )?;
    add(
        "concat_cols",
        &[("a", &[3, 2]), ("b", &[3, 4])],
        Box::new(move |t| t.concat_cols(&[a, b])),
    )?;
    add("pad_cols", &[("a", &[3, 2])], Box::new(move |t| t.pad_cols(a, 5)))?;
    add("mean_pad_rows", &[("a", &[3, 2])], Box::new(move |t| t.mean_pad_rows(a, 6)))?;
    add(
        "squared_error",
        &[("pred", &[1, 1])],
        Box::new(move |t| t.squared_error(a, 0.25)),
    )?;
    add(
        "cross_entropy",
        &[("logits", &[1, 5])],
        Box::new(move |t| t.cross_entropy(a, 3, 0.7)),
    )?;
    add(
        "lin_comb",
        &[("a", &[1, 1]), ("b", &[1, 1]), ("c", &[1, 1])],
        Box::new(move |t| t.lin_comb(&[(a, 0.2), (b, -1.5), (c, 3.0)])),
    )?;
    Ok(cases)
}

fn signature_cases(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, ParamStore, Build)>> {
    let p = Var(0);
    let (stream, _) = inputs(rng, &[("path", &[4, 3])])?;
    let (pooled, _) = inputs(rng, &[("path", &[5, 2])])?;
    let (single, _) = inputs(rng, &[("path", &[2, 4])])?;
    Ok(vec![
        ("signature (stream, N=3)", stream, Box::new(move |t| t.signature(p, 3, true))),
        ("signature (pooled, N=4)", pooled, Box::new(move |t| t.signature(p, 4, false))),
        ("signature (one segment)", single, Box::new(move |t| t.signature(p, 3, false))),
    ])
}

fn attention_case(mode: SigMode, rng: &mut ChaCha8Rng) -> Result<(ParamStore, Build)> {
    let mut cfg = SteConfig::toy().attention;
    cfg.mode = mode;
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::uniform(&[3, cfg.d_model], -1.0, 1.0, rng)).var();
    let heads: Vec<HeadParams> = (0..cfg.heads)
        .map(|i| HeadParams::init(&mut store, &format!("head{i}"), &cfg, rng))
        .collect();
    for i in 0..store.len() {
        let t = store.get_mut(ParamId(i));
        let shape = t.shape().to_vec();
        *t = Tensor::uniform(&shape, -1.0, 1.0, rng);
    }
    Ok((
        store,
        Box::new(move |t| additive_multi_head(t, x, &heads, &cfg, true)),
    ))
}

/// Full encoder, pooling, heads and multitask loss on a 3-token input.
pub fn ste_case(cfg: &SteConfig, seed: u64) -> Result<(ParamStore, Build)> {
    let cfg = cfg.clone();
    let mut rng = stream_rng(seed, Stream::Init);
    let mut store = ParamStore::new();
    let x = store
        .add("embeddings", Tensor::uniform(&[3, cfg.d_model()], -1.0, 1.0, &mut rng))
        .var();
    let encoder = SteEncoder::init(&mut store, &cfg, &mut rng)?;
    let heads = HeadsParams::init(&mut store, cfg.d_model(), &mut rng);
    // Non-zero biases and layer-norm parameters so no gradient is trivially symmetric.
    for i in 1..store.len() {
        let t = store.get_mut(ParamId(i));
        if t.shape().len() == 1 {
            let shape = t.shape().to_vec();
            *t = Tensor::uniform(&shape, 0.5, 1.5, &mut rng);
        }
    }
    let weights = TaskWeights::new(0.5, 0.3, 0.2)?;
    let target = Targets {
        quantity: 1.5,
        tag: 1,
        indication: 4,
    };
    let dropout_seed = mix_seed(&[seed, 1]);
    Ok((
        store,
        Box::new(move |t| {
            let mut drop_rng = stream_rng(dropout_seed, Stream::Dropout);
            let out = encoder_forward(t, x, &encoder, &cfg, true, &mut drop_rng)?;
            let rep = pool(t, out, cfg.pooling)?;
            let heads_out = heads_forward(t, rep, &heads, true, &mut drop_rng)?;
            multitask_loss(t, &heads_out, &target, &weights, None)
        }),
    ))
}

/// Primitives, signature backward, multi-head sig-attention and the full toy model.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = stream_rng(cfg.seed, Stream::Init);
    let mut cases = primitive_cases(&mut rng)?;
    cases.extend(signature_cases(&mut rng)?);
    let (s, b) = attention_case(SigMode::Stream, &mut rng)?;
    cases.push(("additive multi-head (stream)", s, b));
    let (s, b) = attention_case(SigMode::Pooled, &mut rng)?;
    cases.push(("additive multi-head (pooled)", s, b));

    let toy = SteConfig::toy();
    let (s, b) = ste_case(&toy, cfg.seed)?;
    cases.push(("STE + heads (toy)", s, b));
    let mut pooled = toy.clone();
    pooled.attention.mode = SigMode::Pooled;
    let (s, b) = ste_case(&pooled, cfg.seed)?;
    cases.push(("STE + heads (toy, pooled)", s, b));
    let mut no_sig = toy;
    no_sig.use_signature = false;
    let (s, b) = ste_case(&no_sig, cfg.seed)?;
    cases.push(("STE + heads (toy, w/o ST)", s, b));

    let rows = cases
        .into_iter()
        .map(|(name, store, build)| check_component(name, &store, build, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        rows,
    })
}
