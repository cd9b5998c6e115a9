//! Multi-head self-attention, exact and Linformer-style low rank.
//!
//! Both variants share the same projections. The Linformer variant inserts a
//! learned `[k × n]` projection along the sequence axis for keys and values
//! before the attention product, so the attention matrix is `[n × k]` instead
//! of `[n × n]`. One projection is shared by every head; because it acts on
//! rows while heads split columns, applying it before or after the head split
//! is the same computation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, AttnShape};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Standard,
    #[default]
    Linear,
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionMode::Standard => "standard",
            AttentionMode::Linear => "linear",
        })
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AttentionMode::Standard),
            "linear" => Ok(AttentionMode::Linear),
            other => Err(Error::contract(format!(
                "unknown attention mode {other:?} (expected standard or linear)"
            ))),
        }
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams<T: Scalar = f32> {
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub num_heads: usize,
}

fn check_heads(d_model: usize, num_heads: usize) -> Result<()> {
    if num_heads == 0 || d_model % num_heads != 0 {
        return Err(Error::contract(format!(
            "{num_heads} heads do not divide d_model {d_model}"
        )));
    }
    Ok(())
}

impl<T: Scalar> MhaParams<T> {
    /// Weights drawn from N(0, std²), zero biases.
    pub fn random<R: Rng + ?Sized>(d_model: usize, num_heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        check_heads(d_model, num_heads)?;
        let mut w = || Tensor::randn([d_model, d_model], std, rng);
        Ok(MhaParams {
            w_q: w(),
            w_k: w(),
            w_v: w(),
            w_o: w(),
            b_q: Tensor::zeros([d_model]),
            b_k: Tensor::zeros([d_model]),
            b_v: Tensor::zeros([d_model]),
            b_o: Tensor::zeros([d_model]),
            num_heads,
        })
    }

    /// All four projections set to the identity.
    pub fn identity(d_model: usize, num_heads: usize) -> Result<Self> {
        check_heads(d_model, num_heads)?;
        Ok(MhaParams {
            w_q: Tensor::identity(d_model),
            w_k: Tensor::identity(d_model),
            w_v: Tensor::identity(d_model),
            w_o: Tensor::identity(d_model),
            b_q: Tensor::zeros([d_model]),
            b_k: Tensor::zeros([d_model]),
            b_v: Tensor::zeros([d_model]),
            b_o: Tensor::zeros([d_model]),
            num_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        check_heads(d, self.num_heads)?;
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != [d, d] {
                return Err(Error::dim("mha params", w.shape(), &[d, d]));
            }
        }
        for b in [&self.b_q, &self.b_k, &self.b_v, &self.b_o] {
            if b.numel() != d {
                return Err(Error::dim("mha params", b.shape(), &[d]));
            }
        }
        Ok(())
    }

    /// Named tensors in registration order, relative to a layer prefix.
    pub fn named(&self) -> [(&'static str, &Tensor<T>); 8] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
        ]
    }
}

/// Exact attention projections plus the shared sequence projection(s).
#[derive(Clone, Debug, PartialEq)]
pub struct LinformerParams<T: Scalar = f32> {
    pub inner: MhaParams<T>,
    /// `[k × n_seq]`, shared across heads; projects keys, and values too
    /// when `f_proj` is `None`.
    pub e_proj: Tensor<T>,
    /// Separate `[k × n_seq]` value projection when keys and values do not
    /// share one.
    pub f_proj: Option<Tensor<T>>,
}

impl<T: Scalar> LinformerParams<T> {
    pub fn random<R: Rng + ?Sized>(
        d_model: usize,
        num_heads: usize,
        n_seq: usize,
        rank: usize,
        share_kv: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_rank(rank, n_seq)?;
        let inner = MhaParams::random(d_model, num_heads, std, rng)?;
        let e_proj = Tensor::randn([rank, n_seq], std, rng);
        let f_proj = (!share_kv).then(|| Tensor::randn([rank, n_seq], std, rng));
        Ok(LinformerParams { inner, e_proj, f_proj })
    }

    pub fn share_kv(&self) -> bool {
        self.f_proj.is_none()
    }

    pub fn rank(&self) -> usize {
        self.e_proj.shape()[0]
    }

    pub fn n_seq(&self) -> usize {
        self.e_proj.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        let (r, n) = self.e_proj.dims2("linformer params")?;
        check_rank(r, n)?;
        if let Some(f) = &self.f_proj {
            if f.shape() != self.e_proj.shape() {
                return Err(Error::dim("linformer params", f.shape(), self.e_proj.shape()));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_rank(rank: usize, n_seq: usize) -> Result<()> {
    if rank == 0 || rank > n_seq {
        return Err(Error::contract(format!(
            "projection rank {rank} must lie in 1..={n_seq}"
        )));
    }
    Ok(())
}

/// Handles to one attention layer's parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub num_heads: usize,
    pub e_proj: Option<Var>,
    pub f_proj: Option<Var>,
}

impl AttentionVars {
    /// Registers exact-attention parameters as `prefix.w_q`, ….
    pub fn register<T: Scalar>(tape: &mut Tape<T>, prefix: &str, p: &MhaParams<T>) -> Result<Self> {
        let mut reg = |n: &str, t: &Tensor<T>| tape.param(format!("{prefix}.{n}"), t.clone());
        Ok(AttentionVars {
            w_q: reg("w_q", &p.w_q)?,
            b_q: reg("b_q", &p.b_q)?,
            w_k: reg("w_k", &p.w_k)?,
            b_k: reg("b_k", &p.b_k)?,
            w_v: reg("w_v", &p.w_v)?,
            b_v: reg("b_v", &p.b_v)?,
            w_o: reg("w_o", &p.w_o)?,
            b_o: reg("b_o", &p.b_o)?,
            num_heads: p.num_heads,
            e_proj: None,
            f_proj: None,
        })
    }

    /// Registers Linformer parameters; the sequence projections become
    /// `prefix.e_proj` and `prefix.f_proj`.
    pub fn register_linformer<T: Scalar>(
        tape: &mut Tape<T>,
        prefix: &str,
        p: &LinformerParams<T>,
    ) -> Result<Self> {
        let mut vars = Self::register(tape, prefix, &p.inner)?;
        vars.e_proj = Some(tape.param(format!("{prefix}.e_proj"), p.e_proj.clone())?);
        if let Some(f) = &p.f_proj {
            vars.f_proj = Some(tape.param(format!("{prefix}.f_proj"), f.clone())?);
        }
        Ok(vars)
    }
}

/// Self-attention over `batch` stacked sequences in `x [batch·n × d]`.
/// Uses the low-rank path when `vars.e_proj` is set.
pub fn attend<T: Scalar>(tape: &mut Tape<T>, x: Var, vars: &AttentionVars, batch: usize) -> Result<Var> {
    let d = tape.value(vars.w_q).shape()[0];
    let (rows, width) = tape.value(x).dims2("attention")?;
    if width != d {
        return Err(Error::dim("attention", tape.shape(x), tape.shape(vars.w_q)));
    }
    if let Some(e) = vars.e_proj {
        let n = tape.shape(e)[1];
        if batch == 0 || rows != batch * n {
            return Err(Error::dim("linformer projection", tape.shape(e), tape.shape(x)));
        }
    }
    let q = tape.linear(x, vars.w_q, vars.b_q)?;
    let mut k = tape.linear(x, vars.w_k, vars.b_k)?;
    let mut v = tape.linear(x, vars.w_v, vars.b_v)?;
    if let Some(e) = vars.e_proj {
        k = tape.seq_project(e, k, batch)?;
        v = tape.seq_project(vars.f_proj.unwrap_or(e), v, batch)?;
    }
    let a = tape.attention(q, k, v, batch, vars.num_heads)?;
    tape.linear(a, vars.w_o, vars.b_o)
}

fn check_input<T: Scalar>(x: &Tensor<T>, d: usize) -> Result<usize> {
    let (n, w) = x.dims2("attention")?;
    if w != d {
        return Err(Error::dim("attention", x.shape(), &[n, d]));
    }
    Ok(n)
}

/// Exact multi-head self-attention of one sequence `x [n × d]`.
pub fn standard_mha<T: Scalar>(x: &Tensor<T>, params: &MhaParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    check_input(x, params.d_model())?;
    let mut tape = Tape::inference();
    let vars = AttentionVars::register(&mut tape, "attn", params)?;
    let xv = tape.constant(x.clone());
    let out = attend(&mut tape, xv, &vars, 1)?;
    Ok(tape.value(out).clone())
}

/// Linformer multi-head self-attention of one sequence `x [n × d]`; `n`
/// must equal the projection's column count.
pub fn linformer_mha<T: Scalar>(x: &Tensor<T>, params: &LinformerParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let n = check_input(x, params.inner.d_model())?;
    if n != params.n_seq() {
        return Err(Error::dim("linformer projection", params.e_proj.shape(), x.shape()));
    }
    let mut tape = Tape::inference();
    let vars = AttentionVars::register_linformer(&mut tape, "attn", params)?;
    let xv = tape.constant(x.clone());
    let out = attend(&mut tape, xv, &vars, 1)?;
    Ok(tape.value(out).clone())
}

/// Per-head attention matrices (`[n × n]` exact, `[n × k]` low rank) for
/// one sequence. `proj` supplies the key and value sequence projections.
pub fn attention_matrices<T: Scalar>(
    x: &Tensor<T>,
    params: &MhaParams<T>,
    proj: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<Vec<Tensor<T>>> {
    params.validate()?;
    let n = check_input(x, params.d_model())?;
    let d = params.d_model();
    let mut tape = Tape::inference();
    let vars = AttentionVars::register(&mut tape, "attn", params)?;
    let xv = tape.constant(x.clone());
    let q = tape.linear(xv, vars.w_q, vars.b_q)?;
    let mut k = tape.linear(xv, vars.w_k, vars.b_k)?;
    let mut v = tape.linear(xv, vars.w_v, vars.b_v)?;
    if let Some((e, f)) = proj {
        let e = tape.constant(e.clone());
        let f = tape.constant(f.clone());
        k = tape.seq_project(e, k, 1)?;
        v = tape.seq_project(f, v, 1)?;
    }
    let kv_len = tape.shape(k)[0];
    let shape = AttnShape {
        batch: 1,
        heads: params.num_heads,
        q_len: n,
        kv_len,
        width: d,
    };
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); shape.probs_len()];
    kernels::attention_forward(
        tape.value(q).data(),
        tape.value(k).data(),
        tape.value(v).data(),
        shape,
        &mut out,
        Some(&mut probs),
    );
    Ok(probs
        .chunks_exact(n * kv_len)
        .map(|c| Tensor::from_parts(vec![n, kv_len], c.to_vec()))
        .collect())
}

/// Multiply-accumulate counts of one attention forward pass, split by term.
/// Bias additions and the softmax are not counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    /// Q, K, V and output projections: `4·n·d²`.
    pub projections: u64,
    /// Sequence projection of K and V (low-rank mode only): `2·k·n·d`.
    pub seq_projection: u64,
    /// Scores `Q·Kᵀ` plus the weighted sum of values: `2·n·m·d` with
    /// `m = n` (exact) or `m = k` (low rank).
    pub attention_core: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.projections + self.seq_projection + self.attention_core
    }
}

/// Per-term multiply-accumulate count. Summed over heads the per-head
/// widths add back up to `d_model`, so `num_heads` does not change the
/// count; it is validated only.
pub fn flop_breakdown(mode: AttentionMode, n_seq: usize, d_model: usize, num_heads: usize, k: usize) -> FlopBreakdown {
    debug_assert!(num_heads > 0 && d_model % num_heads == 0);
    let (n, d, k) = (n_seq as u64, d_model as u64, k as u64);
    let projections = 4 * n * d * d;
    match mode {
        AttentionMode::Standard => FlopBreakdown {
            projections,
            seq_projection: 0,
            attention_core: 2 * n * n * d,
        },
        AttentionMode::Linear => FlopBreakdown {
            projections,
            seq_projection: 2 * k * n * d,
            attention_core: 2 * n * k * d,
        },
    }
}

/// Total multiply-accumulate count of one attention forward pass.
pub fn flop_count(mode: AttentionMode, n_seq: usize, d_model: usize, num_heads: usize, k: usize) -> u64 {
    flop_breakdown(mode, n_seq, d_model, num_heads, k).total()
}
