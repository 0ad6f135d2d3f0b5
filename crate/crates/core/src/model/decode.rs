use rand::Rng;

use super::tokenizer::{Token, EOS};
use super::{DecodingParams, Parameters};
use crate::numcore::kernels;
use crate::seed;
use crate::{Error, Result};

/// Incremental decoder with a per-layer key/value cache.
///
/// Performs the same floating-point operations, in the same order, as the
/// tape forward pass, so its logits agree with `forward_logits` bit for bit.
pub struct Decoder<'a> {
    params: &'a Parameters,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

fn tensor<'p>(params: &'p Parameters, name: &str) -> &'p [f64] {
    params
        .get(name)
        .unwrap_or_else(|| panic!("parameter {name} missing"))
        .data()
}

fn layer_norm(x: &[f64], params: &Parameters, prefix: &str) -> Vec<f64> {
    let gamma = tensor(params, &format!("{prefix}.scale"));
    let beta = tensor(params, &format!("{prefix}.offset"));
    let mut out = vec![0.0; x.len()];
    let mut stats = Vec::with_capacity(2);
    kernels::layer_norm_rows(x, gamma, beta, &mut out, &mut stats);
    out
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a Parameters) -> Self {
        let n = params.config().n_layers;
        Decoder {
            params,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            pos: 0,
        }
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Consumes one token and returns the next-token logits.
    pub fn feed(&mut self, token: Token) -> Result<Vec<f64>> {
        let cfg = *self.params.config();
        if self.pos >= cfg.max_seq_len {
            return Err(Error::Contract(format!("decoder exceeded max_seq_len {}", cfg.max_seq_len)));
        }
        if token >= cfg.vocab_size {
            return Err(Error::Contract(format!("token id {token} outside vocabulary")));
        }
        let p = self.params;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let attn_scale = 1.0 / (dh as f64).sqrt();

        let tok = &tensor(p, "tok_emb")[token * d..(token + 1) * d];
        let pos = &tensor(p, "pos_emb")[self.pos * d..(self.pos + 1) * d];
        let mut x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        let n_ctx = self.pos + 1;

        for l in 0..cfg.n_layers {
            let name = |s: &str| format!("layers.{l}.{s}");
            let h = layer_norm(&x, p, &format!("layers.{l}.ln1"));
            let q = kernels::vecmat(&h, tensor(p, &name("attn.wq")), d);
            let k = kernels::vecmat(&h, tensor(p, &name("attn.wk")), d);
            let v = kernels::vecmat(&h, tensor(p, &name("attn.wv")), d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let keys = &self.keys[l];
            let values = &self.values[l];

            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; n_ctx];
            for hd in 0..cfg.n_heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = &q[lo..hi];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = kernels::dot(qh, &keys[j * d + lo..j * d + hi]) * attn_scale;
                }
                kernels::masked_softmax_in_place(&mut scores, n_ctx);
                let out = &mut att[lo..hi];
                for (j, &w) in scores.iter().enumerate() {
                    kernels::axpy(w, &values[j * d + lo..j * d + hi], out);
                }
            }
            let o = kernels::vecmat(&att, tensor(p, &name("attn.wo")), d);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }

            let h2 = layer_norm(&x, p, &format!("layers.{l}.ln2"));
            let mut f = kernels::vecmat(&h2, tensor(p, &name("mlp.w1")), cfg.d_ff());
            for (fi, bi) in f.iter_mut().zip(tensor(p, &name("mlp.b1"))) {
                *fi += bi;
            }
            for fi in f.iter_mut() {
                *fi = kernels::gelu(*fi);
            }
            let mut f2 = kernels::vecmat(&f, tensor(p, &name("mlp.w2")), d);
            for (fi, bi) in f2.iter_mut().zip(tensor(p, &name("mlp.b2"))) {
                *fi += bi;
            }
            for (xi, fi) in x.iter_mut().zip(&f2) {
                *xi += fi;
            }
        }

        let hf = layer_norm(&x, p, "ln_f");
        self.pos += 1;
        Ok(kernels::vecmat(&hf, tensor(p, "head"), cfg.vocab_size))
    }

    /// Feeds a non-empty prompt; returns the logits after its last token.
    pub fn feed_all(&mut self, tokens: &[Token]) -> Result<Vec<f64>> {
        let mut last = Err(Error::Contract("empty prompt".into()));
        for &t in tokens {
            last = Ok(self.feed(t)?);
        }
        last
    }
}

/// Draws one token from `logits`.
///
/// Temperature 0 is argmax with ties to the lowest id. Otherwise logits are
/// divided by the temperature, softmaxed, sorted by probability (ties by
/// id), truncated to the shortest prefix whose mass reaches `top_p` (the
/// crossing token is kept), renormalized and sampled.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> Token {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let mut probs: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    kernels::masked_softmax_in_place(&mut probs, logits.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let mut keep = order.len();
    if top_p < 1.0 {
        let mut cum = 0.0;
        for (i, &t) in order.iter().enumerate() {
            cum += probs[t];
            if cum >= top_p {
                keep = i + 1;
                break;
            }
        }
    }
    let nucleus = &order[..keep];
    let mass: f64 = nucleus.iter().map(|&t| probs[t]).sum();
    let u = rng.random::<f64>() * mass;
    let mut cum = 0.0;
    for &t in nucleus {
        cum += probs[t];
        if u < cum {
            return t;
        }
    }
    nucleus[keep - 1]
}

/// Autoregressive continuation of `prompt`. The returned tokens include the
/// terminating EOS when one was drawn.
pub fn sample(params: &Parameters, prompt: &[Token], dec: &DecodingParams, rng_seed: u64) -> Result<Vec<Token>> {
    dec.validate()?;
    let max_len = params.config().max_seq_len;
    if prompt.is_empty() || prompt.len() > max_len {
        return Err(Error::Contract(format!(
            "prompt of {} tokens does not fit max_seq_len {max_len}",
            prompt.len()
        )));
    }
    let mut rng = seed::rng_from_seed(rng_seed);
    let mut decoder = Decoder::new(params);
    let mut logits = decoder.feed_all(prompt)?;
    let mut out = Vec::with_capacity(dec.max_new_tokens);
    while out.len() < dec.max_new_tokens {
        let t = sample_token(&logits, dec.temperature, dec.top_p, &mut rng);
        out.push(t);
        if t == EOS || decoder.position() >= max_len {
            break;
        }
        if out.len() < dec.max_new_tokens {
            logits = decoder.feed(t)?;
        }
    }
    Ok(out)
}
