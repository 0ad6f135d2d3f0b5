use std::collections::BTreeMap;

use super::tokenizer::Token;
use super::{ModelConfig, Parameters};
use crate::numcore::{NodeId, Tape, Tensor};
use crate::{Error, Result};

/// Parameter tensors registered on one tape.
#[derive(Clone, Debug)]
pub struct ParamHandles {
    config: ModelConfig,
    nodes: BTreeMap<String, NodeId>,
}

impl ParamHandles {
    /// Registers every tensor of `params`. Trainable tensors become named
    /// leaves `"{prefix}{name}"`; frozen ones are constants.
    pub fn register(tape: &mut Tape, params: &Parameters, trainable: bool, prefix: &str) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for (name, t) in params.iter() {
            let id = if trainable {
                tape.param(format!("{prefix}{name}"), t.clone())?
            } else {
                tape.constant(t.clone())
            };
            nodes.insert(name.clone(), id);
        }
        Ok(ParamHandles {
            config: *params.config(),
            nodes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn node(&self, name: &str) -> NodeId {
        self.nodes[name]
    }
}

fn check_tokens(config: &ModelConfig, tokens: &[Token]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Contract("forward pass over an empty sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Contract(format!("token id {bad} outside vocabulary")));
    }
    Ok(())
}

/// Logits `[len, vocab]`; row `t` only depends on tokens `0..=t`.
pub fn forward_logits(tape: &mut Tape, params: &ParamHandles, tokens: &[Token]) -> Result<NodeId> {
    let cfg = params.config;
    check_tokens(&cfg, tokens)?;
    let len = tokens.len();
    let dh = cfg.head_dim();
    let attn_scale = 1.0 / (dh as f64).sqrt();

    let tok = tape.embedding(params.node("tok_emb"), tokens)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.embedding(params.node("pos_emb"), &positions)?;
    let mut x = tape.add(tok, pos)?;

    for l in 0..cfg.n_layers {
        let p = |s: &str| params.node(&format!("layers.{l}.{s}"));
        let h = tape.layer_norm(x, p("ln1.scale"), p("ln1.offset"))?;
        let q = tape.matmul(h, p("attn.wq"))?;
        let k = tape.matmul(h, p("attn.wk"))?;
        let v = tape.matmul(h, p("attn.wv"))?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, attn_scale)?;
            let probs = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = tape.matmul(att, p("attn.wo"))?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, p("ln2.scale"), p("ln2.offset"))?;
        let f = tape.matmul(h2, p("mlp.w1"))?;
        let f = tape.add_row(f, p("mlp.b1"))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, p("mlp.w2"))?;
        let f = tape.add_row(f, p("mlp.b2"))?;
        x = tape.add(x, f)?;
    }

    let hf = tape.layer_norm(x, params.node("ln_f.scale"), params.node("ln_f.offset"))?;
    tape.matmul(hf, params.node("head"))
}

/// Per-sequence forward passes; mini-batches are processed one row at a time.
pub fn forward_logits_batch(tape: &mut Tape, params: &ParamHandles, batch: &[Vec<Token>]) -> Result<Vec<NodeId>> {
    batch.iter().map(|seq| forward_logits(tape, params, seq)).collect()
}

/// Log-distributions for positions `prefix_len..len`: row `i` is the
/// distribution of token `prefix_len + i` given every earlier token.
pub fn sequence_logprobs(
    tape: &mut Tape,
    params: &ParamHandles,
    full_sequence: &[Token],
    prefix_len: usize,
) -> Result<NodeId> {
    if prefix_len == 0 || prefix_len >= full_sequence.len() {
        return Err(Error::Contract(format!(
            "prefix_len {prefix_len} must lie in 1..{}",
            full_sequence.len()
        )));
    }
    let len = full_sequence.len();
    let logits = forward_logits(tape, params, &full_sequence[..len - 1])?;
    let rows = tape.slice_rows(logits, prefix_len - 1, len - 1)?;
    tape.log_softmax(rows)
}

/// Convenience: logits on a throwaway tape with frozen parameters.
pub fn forward_logits_value(params: &Parameters, tokens: &[Token]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let handles = ParamHandles::register(&mut tape, params, false, "")?;
    let out = forward_logits(&mut tape, &handles, tokens)?;
    Ok(tape.value(out)?.clone())
}
