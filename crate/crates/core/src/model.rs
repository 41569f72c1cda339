//! Decoder-only GPT-2-style transformer.
//!
//! Pre-norm blocks (`x + attn(ln1(x))`, then `x + mlp(ln2(x))`), learned
//! absolute positions, GELU MLP with 4x expansion, and a final layer norm.
//! The output projection is tied to the token embedding unless
//! `tied_output` is off.
//!
//! Parameter count, per layer with hidden size `H`:
//!
//! | tensor                 | elements   |
//! |------------------------|------------|
//! | ln1 gain + bias        | 2H         |
//! | q, k, v weight         | 3H²        |
//! | q, v bias              | 2H         |
//! | attention out + bias   | H² + H     |
//! | ln2 gain + bias        | 2H         |
//! | mlp fc weight + bias   | 4H² + 4H   |
//! | mlp proj weight + bias | 4H² + H    |
//!
//! giving `12H² + 12H` per layer. Keys carry no bias: it would add the same
//! amount to every score in a row and cancel in the softmax.
//!
//! The model adds `V·H` token embeddings, `max_seqlen·H` positions, `2H` for the final norm and, when untied,
//! another `V·H` for the output projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::TokenMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
/// Sequence lengths are kept multiples of this.
pub const SEQLEN_GRANULARITY: usize = 8;

const PER_LAYER_TENSORS: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seqlen: usize,
    pub init_seed: u64,
    #[serde(default = "default_tied")]
    pub tied_output: bool,
}

fn default_tied() -> bool {
    true
}

impl ModelConfig {
    /// Every invariant violation, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hidden == 0 {
            out.push("model.hidden must be positive".to_string());
        }
        if self.n_heads == 0 {
            out.push("model.n_heads must be positive".to_string());
        } else if self.hidden % self.n_heads != 0 {
            out.push(format!(
                "model.hidden ({}) must be divisible by model.n_heads ({})",
                self.hidden, self.n_heads
            ));
        }
        if self.vocab == 0 {
            out.push("model.vocab must be positive".to_string());
        }
        if self.max_seqlen < SEQLEN_GRANULARITY || self.max_seqlen % SEQLEN_GRANULARITY != 0 {
            out.push(format!(
                "model.max_seqlen ({}) must be a positive multiple of the granularity {g}",
                self.max_seqlen,
                g = SEQLEN_GRANULARITY
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }
}

/// Closed-form parameter count; see the module docs for the breakdown.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let h = config.hidden;
    let per_layer = 12 * h * h + 12 * h;
    let output = if config.tied_output {
        0
    } else {
        config.vocab * h
    };
    config.vocab * h + config.max_seqlen * h + config.n_layers * per_layer + 2 * h + output
}

/// Named parameter tensors in a fixed layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(config: &ModelConfig) -> Vec<Spec> {
    let (h, v) = (config.hidden, config.vocab);
    let spec = |name: String, shape: Vec<usize>, init| Spec { name, shape, init };
    let mut out = vec![
        spec("wte".into(), vec![v, h], Init::Normal),
        spec("wpe".into(), vec![config.max_seqlen, h], Init::Normal),
    ];
    for l in 0..config.n_layers {
        let p = |s: &str| format!("h.{l}.{s}");
        out.extend([
            spec(p("ln1.gain"), vec![h], Init::Ones),
            spec(p("ln1.bias"), vec![h], Init::Zeros),
            spec(p("attn.q.weight"), vec![h, h], Init::Normal),
            spec(p("attn.q.bias"), vec![h], Init::Zeros),
            spec(p("attn.k.weight"), vec![h, h], Init::Normal),
            spec(p("attn.v.weight"), vec![h, h], Init::Normal),
            spec(p("attn.v.bias"), vec![h], Init::Zeros),
            spec(p("attn.out.weight"), vec![h, h], Init::Normal),
            spec(p("attn.out.bias"), vec![h], Init::Zeros),
            spec(p("ln2.gain"), vec![h], Init::Ones),
            spec(p("ln2.bias"), vec![h], Init::Zeros),
            spec(p("mlp.fc.weight"), vec![h, 4 * h], Init::Normal),
            spec(p("mlp.fc.bias"), vec![4 * h], Init::Zeros),
            spec(p("mlp.proj.weight"), vec![4 * h, h], Init::Normal),
            spec(p("mlp.proj.bias"), vec![h], Init::Zeros),
        ]);
    }
    out.push(spec("ln_f.gain".into(), vec![h], Init::Ones));
    out.push(spec("ln_f.bias".into(), vec![h], Init::Zeros));
    if !config.tied_output {
        out.push(spec("lm_head.weight".into(), vec![h, v], Init::Normal));
    }
    out
}

/// GPT-2-style initialization, fully determined by `config.init_seed`.
pub fn init_parameters(config: &ModelConfig) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for spec in layout(config) {
        let tensor = match spec.init {
            Init::Normal => Tensor::from_fn(spec.shape, |_| normal.sample(&mut rng)),
            Init::Zeros => Tensor::zeros(spec.shape),
            Init::Ones => Tensor::ones(spec.shape),
        };
        names.push(spec.name);
        tensors.push(tensor);
    }
    Ok(Parameters {
        config: config.clone(),
        names,
        tensors,
    })
}

impl Parameters {
    /// Assembles parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != named.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&named) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::contract(format!(
                    "parameter mismatch: expected `{}` {:?}, found `{}` {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every tensor on `graph`, as differentiable leaves or constants.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| graph.leaf(t.clone(), requires_grad))
            .collect()
    }
}

fn check_tokens(config: &ModelConfig, tokens: &TokenMatrix) -> Result<()> {
    if tokens.cols() > config.max_seqlen {
        return Err(Error::SeqLen {
            len: tokens.cols(),
            max: config.max_seqlen,
        });
    }
    if let Some(&bad) = tokens.ids().iter().find(|&&t| t as usize >= config.vocab) {
        return Err(Error::Index {
            what: "token",
            index: bad as usize,
            bound: config.vocab,
        });
    }
    Ok(())
}

/// Records the forward pass on `g`; returns logits shaped `[B·L, V]`.
pub fn logits_on_graph(
    g: &mut Graph,
    config: &ModelConfig,
    vars: &[Var],
    tokens: &TokenMatrix,
) -> Result<Var> {
    check_tokens(config, tokens)?;
    let (b, l) = (tokens.rows(), tokens.cols());
    let (h, nh) = (config.hidden, config.n_heads);
    let d = config.head_dim();
    let ids: Vec<usize> = tokens.ids().iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();

    let tok = g.embedding(vars[0], &ids)?;
    let pos = g.embedding(vars[1], &positions)?;
    let mut x = g.add(tok, pos)?;

    let linear = |g: &mut Graph, x: Var, w: Var, bias: Var| -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add_bias(y, bias)
    };
    let to_heads = |g: &mut Graph, x: Var| -> Result<Var> {
        let x = g.reshape(x, &[b, l, nh, d])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * nh, l, d])
    };

    for layer in 0..config.n_layers {
        let p = &vars[2 + layer * PER_LAYER_TENSORS..2 + (layer + 1) * PER_LAYER_TENSORS];
        let hn = g.layer_norm(x, p[0], p[1], LAYER_NORM_EPS)?;
        let q = linear(g, hn, p[2], p[3])?;
        let k = g.matmul(hn, p[4])?;
        let v = linear(g, hn, p[5], p[6])?;
        let (q, k, v) = (to_heads(g, q)?, to_heads(g, k)?, to_heads(g, v)?);
        let scores = g.bmm_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.causal_softmax(scores)?;
        let ctx = g.bmm(attn, v)?;
        let ctx = g.reshape(ctx, &[b, nh, l, d])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * l, h])?;
        let attn_out = linear(g, ctx, p[7], p[8])?;
        x = g.add(x, attn_out)?;

        let hn = g.layer_norm(x, p[9], p[10], LAYER_NORM_EPS)?;
        let fc = linear(g, hn, p[11], p[12])?;
        let act = g.gelu(fc);
        let mlp_out = linear(g, act, p[13], p[14])?;
        x = g.add(x, mlp_out)?;
    }

    let tail = 2 + config.n_layers * PER_LAYER_TENSORS;
    let x = g.layer_norm(x, vars[tail], vars[tail + 1], LAYER_NORM_EPS)?;
    if config.tied_output {
        g.matmul_nt(x, vars[0])
    } else {
        g.matmul(x, vars[tail + 2])
    }
}

/// Next-token logits, shaped `[B, L, V]`.
pub fn forward(params: &Parameters, tokens: &TokenMatrix) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let logits = logits_on_graph(&mut g, params.config(), &vars, tokens)?;
    g.value(logits)
        .reshape([tokens.rows(), tokens.cols(), params.config().vocab])
}

/// Records the next-token loss on `g`: logits for positions `0..L-1`
/// scored against tokens `1..L`.
pub fn loss_on_graph(
    g: &mut Graph,
    config: &ModelConfig,
    vars: &[Var],
    tokens: &TokenMatrix,
) -> Result<Var> {
    if tokens.cols() < 2 {
        return Err(Error::contract(format!(
            "degenerate batch: need at least 2 tokens per row, got {}",
            tokens.cols()
        )));
    }
    let inputs = tokens.truncate(tokens.cols() - 1);
    let targets: Vec<usize> = tokens.shifted_targets();
    let logits = logits_on_graph(g, config, vars, &inputs)?;
    g.cross_entropy(logits, &targets)
}

/// Mean next-token negative log-likelihood over all `B·(L-1)` predictions.
pub fn loss_on_batch(params: &Parameters, tokens: &TokenMatrix) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let loss = loss_on_graph(&mut g, params.config(), &vars, tokens)?;
    g.value(loss).item()
}

/// Loss and its gradient for every parameter, in layout order.
pub fn loss_and_grads(params: &Parameters, tokens: &TokenMatrix) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let loss = loss_on_graph(&mut g, params.config(), &vars, tokens)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| {
            grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    Ok((value, out))
}
