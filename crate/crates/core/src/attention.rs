//! Nested attention bottleneck: three query/key/value triplets whose nine
//! query-key products collapse into one token-to-token attention map.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv1x1, FeedForwardNetwork};
use crate::params::{ParamBuilder, ParamId, Session};

pub const TRIPLETS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionNormalization {
    /// Logits scaled by `1/(3·sqrt(d))`, then row softmax.
    #[default]
    Softmax,
    /// Unscaled logits used directly as weights.
    Raw,
}

#[derive(Debug, Clone)]
pub struct Triplet {
    pub query: Conv1x1,
    pub key: Conv1x1,
    pub value: Conv1x1,
}

#[derive(Debug, Clone)]
pub struct NestedAttention {
    pub dim: usize,
    pub token_grid: (usize, usize),
    pub triplets: Vec<Triplet>,
    pub ffn: FeedForwardNetwork,
    pub normalization: AttentionNormalization,
}

/// Intermediate values of one attention pass, all on the session tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    /// `d×gh×gw` pooled tokens.
    pub tokens: Var,
    /// `N×N` attention map.
    pub attention: Var,
    /// `d×gh×gw` value-weighted context.
    pub context: Var,
    /// `d×H×W` block output.
    pub output: Var,
}

impl NestedAttention {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        dim: usize,
        token_grid: (usize, usize),
        normalization: AttentionNormalization,
    ) -> Result<Self> {
        if token_grid.0 == 0 || token_grid.1 == 0 {
            return Err(Error::config(
                "token_grid",
                "token grid must be at least 1x1",
            ));
        }
        let mut triplets = Vec::with_capacity(TRIPLETS);
        for e in 0..TRIPLETS {
            let mut tb = pb.scope(format!("qkv.{e}"));
            triplets.push(Triplet {
                query: Conv1x1::new(&mut tb.scope("query"), dim, dim, true)?,
                key: Conv1x1::new(&mut tb.scope("key"), dim, dim, true)?,
                value: Conv1x1::new(&mut tb.scope("value"), dim, dim, true)?,
            });
        }
        Ok(NestedAttention {
            dim,
            token_grid,
            triplets,
            ffn: FeedForwardNetwork::new(&mut pb.scope("ffn"), dim)?,
            normalization,
        })
    }

    /// Token grid actually used for an `h×w` map.
    pub fn effective_grid(&self, h: usize, w: usize) -> (usize, usize) {
        (self.token_grid.0.min(h), self.token_grid.1.min(w))
    }

    fn logit_scale(&self) -> f64 {
        1.0 / (TRIPLETS as f64 * (self.dim as f64).sqrt())
    }

    /// Pooled tokens plus per-triplet `(Q, K, V)` as `d×N` matrices.
    fn project(&self, s: &mut Session<'_>, x: Var) -> Result<(Var, Vec<[Var; 3]>, usize)> {
        let (c, h, w) = s.value(x).chw()?;
        if c != self.dim {
            return Err(Error::shape(format!(
                "nested attention over {} channels got {c}",
                self.dim
            )));
        }
        let (gh, gw) = self.effective_grid(h, w);
        let n = gh * gw;
        let tokens = s.tape.avg_pool_to_grid(x, gh, gw)?;
        let mut out = Vec::with_capacity(TRIPLETS);
        for t in &self.triplets {
            let mut qkv = [tokens; 3];
            for (slot, conv) in qkv.iter_mut().zip([&t.query, &t.key, &t.value]) {
                let m = conv.forward(s, tokens)?;
                *slot = s.tape.reshape(m, &[c, n])?;
            }
            out.push(qkv);
        }
        Ok((tokens, out, n))
    }

    fn sum(s: &mut Session<'_>, vars: impl IntoIterator<Item = Var>) -> Result<Var> {
        let mut it = vars.into_iter();
        let mut acc = it.next().expect("non-empty");
        for v in it {
            acc = s.tape.add(acc, v)?;
        }
        Ok(acc)
    }

    fn normalize(&self, s: &mut Session<'_>, logits: Var) -> Result<Var> {
        match self.normalization {
            AttentionNormalization::Softmax => {
                let scaled = s.tape.scale(logits, self.logit_scale())?;
                s.tape.softmax_rows(scaled)
            }
            AttentionNormalization::Raw => Ok(logits),
        }
    }

    /// `(ΣQ_i)ᵀ(ΣK_j)` computed with one product.
    fn factored_logits(s: &mut Session<'_>, qkv: &[[Var; 3]]) -> Result<Var> {
        let q = Self::sum(s, qkv.iter().map(|t| t[0]))?;
        let k = Self::sum(s, qkv.iter().map(|t| t[1]))?;
        let qt = s.tape.transpose(q)?;
        s.tape.matmul(qt, k)
    }

    /// `Σ_i Σ_j Q_iᵀK_j` over all nine pairs, i-major.
    fn pairwise_logits(s: &mut Session<'_>, qkv: &[[Var; 3]]) -> Result<Var> {
        let mut prods = Vec::with_capacity(qkv.len() * qkv.len());
        for qi in qkv {
            let qt = s.tape.transpose(qi[0])?;
            for kj in qkv {
                prods.push(s.tape.matmul(qt, kj[1])?);
            }
        }
        Self::sum(s, prods)
    }

    fn finish(
        &self,
        s: &mut Session<'_>,
        x: Var,
        tokens: Var,
        qkv: &[[Var; 3]],
        attention: Var,
    ) -> Result<AttentionTrace> {
        let (c, h, w) = s.value(x).chw()?;
        let (gh, gw) = self.effective_grid(h, w);
        let v = Self::sum(s, qkv.iter().map(|t| t[2]))?;
        // context (d×N) = ΣV · Aᵀ, i.e. the transpose of A·ΣVᵀ
        let at = s.tape.transpose(attention)?;
        let ctx = s.tape.matmul(v, at)?;
        let context = s.tape.reshape(ctx, &[c, gh, gw])?;
        let refined = self.ffn.forward(s, context)?;
        let sum = s.tape.add(refined, context)?;
        let output = s.tape.upsample(sum, h, w)?;
        Ok(AttentionTrace {
            tokens,
            attention,
            context,
            output,
        })
    }

    pub fn trace(&self, s: &mut Session<'_>, x: Var) -> Result<AttentionTrace> {
        let (tokens, qkv, _) = self.project(s, x)?;
        let logits = Self::factored_logits(s, &qkv)?;
        let attention = self.normalize(s, logits)?;
        self.finish(s, x, tokens, &qkv, attention)
    }

    /// Same computation with the nine query-key products formed explicitly.
    pub fn trace_pairwise(&self, s: &mut Session<'_>, x: Var) -> Result<AttentionTrace> {
        let (tokens, qkv, _) = self.project(s, x)?;
        let logits = Self::pairwise_logits(s, &qkv)?;
        let attention = self.normalize(s, logits)?;
        self.finish(s, x, tokens, &qkv, attention)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        Ok(self.trace(s, x)?.output)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for t in &self.triplets {
            p.extend(t.query.params());
            p.extend(t.key.params());
            p.extend(t.value.params());
        }
        p.extend(self.ffn.params());
        p
    }
}
