//! Text prior to static portrait tokens: a trainable word-embedding table with
//! sinusoidal positions, followed by a per-token two-layer mapping net.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::{TextPrior, Vocabulary};

/// `L x C` tokens produced from one text prior.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticPortraitTokens {
    pub tokens: Tensor,
}

impl StaticPortraitTokens {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Clone, Debug)]
pub struct TextEmbedder {
    pub vocab: Vocabulary,
    pub table: ParamId,
    pub dim: usize,
}

impl TextEmbedder {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let vocab = Vocabulary::template();
        let table = store.add(format!("{name}.table"), Tensor::randn(vocab.len(), dim, 0.5, rng));
        Self { vocab, table, dim }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.table);
        let e = g.embedding(table, ids)?;
        Ok(g.positional(e))
    }

    /// `L x C` embedding, one row per word of the prior's text.
    pub fn tokenize_and_embed(&self, store: &ParamStore, prior: &TextPrior) -> Result<Tensor> {
        let ids = self.vocab.tokenize(&prior.text)?;
        let mut g = Graph::new(store);
        let v = self.forward(&mut g, &ids)?;
        Ok(g.value(v).clone())
    }
}

/// Per-token `C -> C -> C` MLP with GELU in between.
#[derive(Clone, Debug)]
pub struct MappingNet {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MappingNet {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        let h = self.fc1.forward(g, emb)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn map_to_static_tokens(&self, store: &ParamStore, emb: &Tensor) -> Result<StaticPortraitTokens> {
        if let Some((row, col)) = emb.first_non_finite() {
            return Err(Error::NonFiniteValue { row, col });
        }
        let mut g = Graph::new(store);
        let x = g.constant(emb.clone());
        let y = self.forward(&mut g, x)?;
        Ok(StaticPortraitTokens { tokens: g.value(y).clone() })
    }
}
