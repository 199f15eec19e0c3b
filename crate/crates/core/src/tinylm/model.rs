use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::{BOS, EOS, SEP};
use super::ModelError;
use crate::diffcore::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            d_model: 32,
            n_layers: 2,
            d_ff: 64,
            context_len: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("context_len", self.context_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig("vocab_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(ModelError::InvalidConfig(format!("duplicate parameter {name}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Log-likelihood of a response given its prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceLogLik {
    pub sum_logp: f64,
    /// Response tokens including EOS.
    pub n_tokens: usize,
    pub avg_logp: f64,
}

impl SequenceLogLik {
    pub fn new(sum_logp: f64, n_tokens: usize) -> Result<Self, ModelError> {
        if n_tokens == 0 {
            return Err(ModelError::EmptyResponse);
        }
        Ok(Self {
            sum_logp,
            n_tokens,
            avg_logp: sum_logp / n_tokens as f64,
        })
    }
}

const BLOCK_PARAMS: usize = 10;
const ATTN_NORM: usize = 0;
const WQ: usize = 1;
const WK: usize = 2;
const WV: usize = 3;
const WO: usize = 4;
const MLP_NORM: usize = 5;
const W1: usize = 6;
const B1: usize = 7;
const W2: usize = 8;
const B2: usize = 9;

/// Parameters of one model inserted into a graph, in [`ModelParams`] order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Character-level causal transformer: token + position embeddings, pre-norm
/// single-head attention blocks with GELU MLPs, and an output projection tied
/// to the token embedding and scaled by the final norm gain `head.norm`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl TinyLm {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let mut normal = |shape: Vec<usize>, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Tensor::new(shape, vals).expect("shape").with_grad()
        };
        let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).expect("shape").with_grad();
        let zeros = |n: usize| Tensor::zeros(vec![n]).with_grad();

        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        let mut entries = vec![
            ("tok_emb".to_string(), normal(vec![config.vocab_size, d], 0.1)),
            ("pos_emb".to_string(), normal(vec![config.context_len, d], 0.1)),
        ];
        for l in 0..config.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            entries.push((p("attn_norm"), ones(d)));
            entries.push((p("wq"), normal(vec![d, d], proj_std)));
            entries.push((p("wk"), normal(vec![d, d], proj_std)));
            entries.push((p("wv"), normal(vec![d, d], proj_std)));
            entries.push((p("wo"), normal(vec![d, d], resid_std)));
            entries.push((p("mlp_norm"), ones(d)));
            entries.push((p("w1"), normal(vec![d, config.d_ff], proj_std)));
            entries.push((p("b1"), zeros(config.d_ff)));
            entries.push((
                p("w2"),
                normal(vec![config.d_ff, d], resid_std * (d as f64 / config.d_ff as f64).sqrt()),
            ));
            entries.push((p("b2"), zeros(d)));
        }
        entries.push(("head.norm".to_string(), ones(d)));
        Ok(Self {
            config,
            params: ModelParams::new(entries)?,
        })
    }

    fn block_index(&self, layer: usize, which: usize) -> usize {
        2 + layer * BLOCK_PARAMS + which
    }

    fn head_index(&self) -> usize {
        2 + self.config.n_layers * BLOCK_PARAMS
    }

    /// Inserts all parameters into `g`. With `trainable == false` they enter
    /// as constants and no gradient is tracked.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.leaf(t)
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Accumulates gradients for every bound parameter into `params`.
    pub fn absorb_grads(
        &mut self,
        bound: &BoundParams,
        grads: &crate::diffcore::Gradients,
    ) -> Result<(), ModelError> {
        for (i, v) in bound.vars.iter().enumerate() {
            grads.write_into(*v, self.params.tensor_mut(i))?;
        }
        Ok(())
    }

    /// Per-position next-token log-probabilities, shape `[T, V]`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, tokens: &[usize]) -> Result<Var, ModelError> {
        let t = tokens.len();
        if t == 0 {
            return Err(ModelError::EmptyResponse);
        }
        if t > self.config.context_len {
            return Err(ModelError::TooLong {
                len: t,
                max: self.config.context_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::InvalidToken(bad));
        }
        let v = &p.vars;
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.embedding(v[0], tokens)?;
        let pos = g.embedding(v[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        let inv_sqrt_d = 1.0 / (self.config.d_model as f64).sqrt();

        for l in 0..self.config.n_layers {
            let w = |k| v[self.block_index(l, k)];
            let n = g.rms_norm(x)?;
            let h = g.mul(n, w(ATTN_NORM))?;
            let q = g.matmul(h, w(WQ))?;
            let k = g.matmul(h, w(WK))?;
            let val = g.matmul(h, w(WV))?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, inv_sqrt_d);
            let att = g.causal_softmax(scores)?;
            let ctx = g.matmul(att, val)?;
            let out = g.matmul(ctx, w(WO))?;
            x = g.add(x, out)?;

            let n = g.rms_norm(x)?;
            let h = g.mul(n, w(MLP_NORM))?;
            let a = g.matmul(h, w(W1))?;
            let a = g.add(a, w(B1))?;
            let a = g.gelu(a);
            let m = g.matmul(a, w(W2))?;
            let m = g.add(m, w(B2))?;
            x = g.add(x, m)?;
        }

        let n = g.rms_norm(x)?;
        let h = g.mul(n, v[self.head_index()])?;
        let emb_t = g.transpose(v[0])?;
        let logits = g.matmul(h, emb_t)?;
        Ok(g.log_softmax(logits)?)
    }

    /// Concrete log-probability rows without gradient tracking.
    pub fn log_probs(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let rows = self.forward(&mut g, &p, tokens)?;
        g.ensure_finite()?;
        Ok(g.value(rows).clone())
    }

    /// Differentiable summed log-likelihood of `response` (plus EOS) after
    /// `prompt`. Returns the scalar node and the token count.
    pub fn response_logp(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        prompt: &[usize],
        response: &[usize],
    ) -> Result<(Var, usize), ModelError> {
        if response.is_empty() {
            return Err(ModelError::EmptyResponse);
        }
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let (tokens, start) = layout(prompt, response);
        let rows = self.forward(g, p, &tokens)?;
        let idx = target_indices(&tokens, start, tokens.len(), self.config.vocab_size);
        let picked = g.gather(rows, &idx)?;
        Ok((g.sum(picked), idx.len()))
    }

    /// Average-log-likelihood node (`sum / n`) for one response.
    pub fn response_avg_logp(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        prompt: &[usize],
        response: &[usize],
    ) -> Result<(Var, Var, usize), ModelError> {
        let (sum, n) = self.response_logp(g, p, prompt, response)?;
        let avg = g.scale(sum, 1.0 / n as f64);
        Ok((sum, avg, n))
    }

    pub fn sequence_loglik(&self, prompt: &[usize], response: &[usize]) -> Result<SequenceLogLik, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (sum, n) = self.response_logp(&mut g, &p, prompt, response)?;
        g.ensure_finite()?;
        SequenceLogLik::new(g.scalar(sum), n)
    }

    /// Evaluates each `(prompt, response)` independently.
    pub fn batch_loglik(&self, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<SequenceLogLik>, ModelError> {
        batch
            .iter()
            .map(|(p, r)| self.sequence_loglik(p, r))
            .collect()
    }

    /// Mean negative log-likelihood per response token over the batch.
    pub fn sft_loss(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<Var, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut sums = Vec::with_capacity(batch.len());
        let mut total = 0usize;
        for (prompt, response) in batch {
            let (s, n) = self.response_logp(g, p, prompt, response)?;
            sums.push(s);
            total += n;
        }
        let stacked = g.stack(&sums)?;
        let s = g.sum(stacked);
        Ok(g.scale(s, -1.0 / total as f64))
    }
}

/// `[BOS] prompt [SEP] response [EOS]`, plus the index of the first response token.
pub fn layout(prompt: &[usize], response: &[usize]) -> (Vec<usize>, usize) {
    let mut tokens = Vec::with_capacity(prompt.len() + response.len() + 3);
    tokens.push(BOS);
    tokens.extend_from_slice(prompt);
    tokens.push(SEP);
    let start = tokens.len();
    tokens.extend_from_slice(response);
    tokens.push(EOS);
    (tokens, start)
}

/// Flat indices into a `[T, V]` row matrix selecting, for each target
/// position in `start..end`, the entry predicting `tokens[pos]`.
pub fn target_indices(tokens: &[usize], start: usize, end: usize, vocab: usize) -> Vec<usize> {
    (start..end).map(|pos| (pos - 1) * vocab + tokens[pos]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::vocab::PAD;

    fn tiny() -> TinyLm {
        TinyLm::new(ModelConfig {
            d_model: 8,
            d_ff: 12,
            context_len: 20,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_small() {
        let a = TinyLm::new(ModelConfig::default()).unwrap();
        let b = TinyLm::new(ModelConfig::default()).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert!(a.params.count() <= 200_000);
        let c = TinyLm::new(ModelConfig {
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a.params.fingerprint(), c.params.fingerprint());
    }

    #[test]
    fn rows_are_distributions() {
        let m = tiny();
        let rows = m.log_probs(&[1, 5, 6, 3, 9, 9, 2]).unwrap();
        let v = m.config.vocab_size;
        for r in rows.values().chunks(v) {
            let s: f64 = r.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_output_scale_gives_uniform_rows() {
        let mut m = tiny();
        m.params
            .get_mut("head.norm")
            .unwrap()
            .values_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let rows = m.log_probs(&[1, 7, 8, 3, 4, 2]).unwrap();
        let lnv = (m.config.vocab_size as f64).ln();
        for x in rows.values() {
            assert!((x + lnv).abs() < 1e-9);
        }
        let ll = m.sequence_loglik(&[7], &[4]).unwrap();
        // response "a" plus EOS
        assert_eq!(ll.n_tokens, 2);
        assert!((ll.avg_logp + lnv).abs() < 1e-12);
    }

    #[test]
    fn over_length_and_empty_rejected() {
        let m = tiny();
        assert!(matches!(
            m.log_probs(&[4; 21]),
            Err(ModelError::TooLong { len: 21, max: 20 })
        ));
        assert!(matches!(m.sequence_loglik(&[4], &[]), Err(ModelError::EmptyResponse)));
        assert!(matches!(m.log_probs(&[40]), Err(ModelError::InvalidToken(40))));
    }

    #[test]
    fn trailing_pad_does_not_change_response_likelihood() {
        let m = tiny();
        let (prompt, response) = (vec![5, 6, 7], vec![8, 9, 10, 11]);
        let base = m.sequence_loglik(&prompt, &response).unwrap();
        let (mut tokens, start) = layout(&prompt, &response);
        let end = tokens.len();
        tokens.extend([PAD; 5]);
        let rows = m.log_probs(&tokens).unwrap();
        let idx = target_indices(&tokens, start, end, m.config.vocab_size);
        let sum: f64 = idx.iter().map(|&i| rows.values()[i]).sum();
        assert!((sum - base.sum_logp).abs() < 1e-12);
    }

    #[test]
    fn loglik_equals_independent_regather() {
        let m = tiny();
        let (prompt, response) = (vec![30, 12], vec![4, 5, 6]);
        let ll = m.sequence_loglik(&prompt, &response).unwrap();
        let tokens = [BOS, 30, 12, SEP, 4, 5, 6, EOS];
        let rows = m.log_probs(&tokens).unwrap();
        let v = m.config.vocab_size;
        let mut manual = 0.0;
        for (pos, &t) in tokens.iter().enumerate().skip(4) {
            manual += rows.values()[(pos - 1) * v + t];
        }
        assert!((manual - ll.sum_logp).abs() < 1e-12);
        assert_eq!(ll.n_tokens, 4);
        assert!(ll.avg_logp <= 0.0);
    }

    #[test]
    fn batch_composition_does_not_matter() {
        let m = tiny();
        let a = (vec![4, 5], vec![6, 7, 8]);
        let b = (vec![9], vec![10, 11]);
        let alone = m.sequence_loglik(&a.0, &a.1).unwrap();
        let batch = m.batch_loglik(&[b.clone(), a.clone(), b]).unwrap();
        assert!((batch[1].avg_logp - alone.avg_logp).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_sft_loss_is_ln_v() {
        let mut m = tiny();
        m.params
            .get_mut("head.norm")
            .unwrap()
            .values_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let mut g = Graph::new();
        let p = m.bind(&mut g, true);
        let batch = vec![(vec![4, 5], vec![6, 7]), (vec![8], vec![9, 10, 11, 12])];
        let loss = m.sft_loss(&mut g, &p, &batch).unwrap();
        assert!((g.scalar(loss) - 40f64.ln()).abs() < 1e-9);
        assert!(m.sft_loss(&mut g, &p, &[]).is_err());
    }
}
