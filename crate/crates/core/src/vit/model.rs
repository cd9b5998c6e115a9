use indexmap::IndexMap;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, AttentionMode, AttentionVars};
use crate::error::{Error, Result};
use crate::gradcheck::{register, Params};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::vit::config::ViTConfig;
use crate::vit::patch::patchify_batch;

const INIT_STD: f64 = 0.02;

/// Parameter shapes in registration order.
fn param_shapes(c: &ViTConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.hidden_size;
    let mut v = vec![
        ("patch_embed.weight".to_string(), vec![c.patch_dim(), d], Init::Normal),
        ("patch_embed.bias".to_string(), vec![d], Init::Zero),
        ("cls_token".to_string(), vec![1, d], Init::Normal),
        ("pos_embed".to_string(), vec![c.seq_len(), d], Init::Normal),
    ];
    for i in 0..c.layers {
        let p = |n: &str| format!("blocks.{i}.{n}");
        v.push((p("norm1.gamma"), vec![d], Init::One));
        v.push((p("norm1.beta"), vec![d], Init::Zero));
        for w in ["q", "k", "v", "o"] {
            v.push((p(&format!("attn.w_{w}")), vec![d, d], Init::Normal));
            v.push((p(&format!("attn.b_{w}")), vec![d], Init::Zero));
        }
        if c.attention_mode == AttentionMode::Linear {
            v.push((p("attn.e_proj"), vec![c.proj_rank, c.seq_len()], Init::Normal));
            if !c.share_kv {
                v.push((p("attn.f_proj"), vec![c.proj_rank, c.seq_len()], Init::Normal));
            }
        }
        v.push((p("norm2.gamma"), vec![d], Init::One));
        v.push((p("norm2.beta"), vec![d], Init::Zero));
        v.push((p("mlp.w1"), vec![d, c.mlp_size], Init::Normal));
        v.push((p("mlp.b1"), vec![c.mlp_size], Init::Zero));
        v.push((p("mlp.w2"), vec![c.mlp_size, d], Init::Normal));
        v.push((p("mlp.b2"), vec![d], Init::Zero));
    }
    v.push(("norm.gamma".to_string(), vec![d], Init::One));
    v.push(("norm.beta".to_string(), vec![d], Init::Zero));
    v.push(("head.weight".to_string(), vec![d, c.num_classes], Init::Normal));
    v.push(("head.bias".to_string(), vec![c.num_classes], Init::Zero));
    v
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

/// Parameters of one encoder block, from the architecture alone.
pub fn per_block_params(c: &ViTConfig) -> u64 {
    let (d, m) = (c.hidden_size as u64, c.mlp_size as u64);
    let norms = 2 * (2 * d);
    let attn = 4 * (d * d + d);
    let seq_proj = match c.attention_mode {
        AttentionMode::Standard => 0,
        AttentionMode::Linear => {
            let e = (c.proj_rank * c.seq_len()) as u64;
            if c.share_kv {
                e
            } else {
                2 * e
            }
        }
    };
    let mlp = (d * m + m) + (m * d + d);
    norms + attn + seq_proj + mlp
}

/// Parameter count evaluated from the architecture:
///
/// ```text
/// patch embedding   P·d + d            (P = channels·patch²)
/// class token       d
/// positions         (N + 1)·d          (N = patches)
/// blocks            L · [4d + 4(d² + d) + s·k·(N + 1) + 2dm + m + d]
/// final norm        2d
/// head              d·C + C
/// ```
///
/// where `s` is 0 for exact attention, 1 with a shared key/value projection
/// and 2 otherwise.
pub fn closed_form_params(c: &ViTConfig) -> u64 {
    let d = c.hidden_size as u64;
    let embed = c.patch_dim() as u64 * d + d + d + c.seq_len() as u64 * d;
    let head = 2 * d + d * c.num_classes as u64 + c.num_classes as u64;
    embed + c.layers as u64 * per_block_params(c) + head
}

/// Sum of the sizes of every tensor the model registers.
pub fn count_params(c: &ViTConfig) -> Result<u64> {
    c.validate()?;
    Ok(param_shapes(c)
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>() as u64)
        .sum())
}

/// Outputs of one forward pass recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Unnormalized class scores `[B × num_classes]`.
    pub logits: Var,
    /// Final-norm class-token representation `[B × hidden_size]`.
    pub embedding: Var,
}

/// A ViT classifier. Every tensor lives in a name-addressed registry.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel<T: Scalar = f32> {
    config: ViTConfig,
    params: Params<T>,
}

impl<T: Scalar> ViTModel<T> {
    /// Deterministic initialization: weights from a normal truncated at two
    /// standard deviations (σ = 0.02), zero biases, unit norm gains.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_shapes(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Normal => Tensor::trunc_normal(shape, INIT_STD, &mut rng),
                    Init::Zero => Tensor::zeros(shape),
                    Init::One => Tensor::ones(shape),
                };
                (name, t)
            })
            .collect();
        Ok(ViTModel {
            config: config.clone(),
            params,
        })
    }

    /// Wraps an existing registry after checking names and shapes against
    /// `config`.
    pub fn from_params(config: ViTConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&params) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::contract(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ViTModel { config, params })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn num_params(&self) -> u64 {
        self.params.values().map(|t| t.numel() as u64).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ViTModel<U> {
        ViTModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Registers every parameter on `tape`.
    pub fn register(&self, tape: &mut Tape<T>) -> Result<IndexMap<String, Var>> {
        register(tape, &self.params)
    }

    /// Class logits `[B × num_classes]` for a `[B × C × H × W]` batch.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let vars = self.register(&mut tape)?;
        let enc = encode(&self.config, &mut tape, &vars, batch, None)?;
        Ok(tape.value(enc.logits).clone())
    }

    /// The representation fed to the head, `[B × hidden_size]`.
    pub fn embed(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let vars = self.register(&mut tape)?;
        let enc = encode(&self.config, &mut tape, &vars, batch, None)?;
        Ok(tape.value(enc.embedding).clone())
    }

    /// Applies the classification head to embeddings.
    pub fn head(&self, embedding: &Tensor<T>) -> Result<Tensor<T>> {
        let w = &self.params["head.weight"];
        let b = self.params["head.bias"].data();
        let mut out = embedding.matmul(w)?;
        let c = b.len();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (x, bias) in row.iter_mut().zip(b) {
                *x = *x + *bias;
            }
        }
        Ok(out)
    }
}

fn in_block(i: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(op) => Error::NonFinite(format!("blocks.{i} ({op})")),
        other => other,
    }
}

/// Records the full forward pass on `tape` using registered parameter
/// handles. Dropout is applied only when `rng` is given.
pub(crate) fn encode<T: Scalar>(
    c: &ViTConfig,
    tape: &mut Tape<T>,
    vars: &IndexMap<String, Var>,
    batch: &Tensor<T>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Encoded> {
    let &[b, ch, h, w] = batch.shape() else {
        return Err(Error::dim(
            "forward",
            batch.shape(),
            &[0, c.channels, c.image_size, c.image_size],
        ));
    };
    if ch != c.channels || h != c.image_size || w != c.image_size {
        return Err(Error::dim(
            "forward",
            batch.shape(),
            &[b, c.channels, c.image_size, c.image_size],
        ));
    }
    let v = |n: &str| -> Result<Var> {
        vars.get(n)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {n} not registered")))
    };
    let eps = T::of(c.layer_norm_eps);

    let patches = tape.constant(patchify_batch(batch, c.patch_size)?);
    let emb = tape.linear(patches, v("patch_embed.weight")?, v("patch_embed.bias")?)?;
    let mut x = tape.tokens(emb, v("cls_token")?, v("pos_embed")?, b)?;

    for i in 0..c.layers {
        let p = |n: &str| v(&format!("blocks.{i}.{n}"));
        let attn = AttentionVars {
            w_q: p("attn.w_q")?,
            b_q: p("attn.b_q")?,
            w_k: p("attn.w_k")?,
            b_k: p("attn.b_k")?,
            w_v: p("attn.w_v")?,
            b_v: p("attn.b_v")?,
            w_o: p("attn.w_o")?,
            b_o: p("attn.b_o")?,
            num_heads: c.heads,
            e_proj: match c.attention_mode {
                AttentionMode::Linear => Some(p("attn.e_proj")?),
                AttentionMode::Standard => None,
            },
            f_proj: match (c.attention_mode, c.share_kv) {
                (AttentionMode::Linear, false) => Some(p("attn.f_proj")?),
                _ => None,
            },
        };
        let mut block = || -> Result<Var> {
            let n1 = tape.layer_norm(x, p("norm1.gamma")?, p("norm1.beta")?, eps)?;
            let mut a = attend(tape, n1, &attn, b)?;
            if let Some(r) = rng.as_deref_mut() {
                a = tape.dropout(a, c.dropout, r)?;
            }
            let x1 = tape.add(x, a)?;
            let n2 = tape.layer_norm(x1, p("norm2.gamma")?, p("norm2.beta")?, eps)?;
            let h1 = tape.linear(n2, p("mlp.w1")?, p("mlp.b1")?)?;
            let h1 = tape.gelu(h1)?;
            let mut h2 = tape.linear(h1, p("mlp.w2")?, p("mlp.b2")?)?;
            if let Some(r) = rng.as_deref_mut() {
                h2 = tape.dropout(h2, c.dropout, r)?;
            }
            tape.add(x1, h2)
        };
        x = block().map_err(in_block(i))?;
    }

    let normed = tape.layer_norm(x, v("norm.gamma")?, v("norm.beta")?, eps)?;
    let cls_rows: Vec<usize> = (0..b).map(|i| i * c.seq_len()).collect();
    let embedding = tape.select_rows(normed, &cls_rows)?;
    let logits = tape.linear(embedding, v("head.weight")?, v("head.bias")?)?;
    Ok(Encoded { logits, embedding })
}

impl<T: Scalar> ViTModel<T> {
    /// Records a forward pass on a training tape. Returns the parameter
    /// handles alongside the outputs.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        batch: &Tensor<T>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(IndexMap<String, Var>, Encoded)> {
        let vars = self.register(tape)?;
        let enc = encode(&self.config, tape, &vars, batch, rng)?;
        Ok((vars, enc))
    }

    /// Records a forward pass with caller-registered parameter handles.
    pub fn encode_with(
        &self,
        tape: &mut Tape<T>,
        vars: &IndexMap<String, Var>,
        batch: &Tensor<T>,
    ) -> Result<Encoded> {
        encode(&self.config, tape, vars, batch, None)
    }
}
