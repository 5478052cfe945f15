//! Prompt conditioner: token embeddings for a fixed template vocabulary,
//! with two typed slots that accept either vocabulary tokens or free
//! concept vectors. Token embeddings are mean-pooled and linearly
//! projected to the denoiser's conditioning width. Gradients flow to the
//! concept slots, which is what concept-level personalization trains.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::config::ModelDims;
use crate::error::{Error, Result};
use crate::nn::{Dense, Param};

/// Fixed template vocabulary: filler words first, then one token per
/// domain name and one per class name.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    num_domains: usize,
    num_classes: usize,
}

const FILLER: [&str; 3] = ["a", "style", "of"];

impl Vocabulary {
    pub fn new(domain_names: &[String], class_names: &[String]) -> Self {
        let mut tokens: Vec<String> = FILLER.iter().map(|s| s.to_string()).collect();
        tokens.extend(domain_names.iter().map(|d| format!("dom:{d}")));
        tokens.extend(class_names.iter().map(|c| format!("cls:{c}")));
        Vocabulary { tokens, num_domains: domain_names.len(), num_classes: class_names.len() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn filler(&self, word: &str) -> Result<usize> {
        FILLER
            .iter()
            .position(|&f| f == word)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown filler token {word:?}")))
    }

    pub fn domain_token(&self, domain: usize) -> Result<usize> {
        if domain >= self.num_domains {
            return Err(Error::InvalidArgument(format!("unknown domain token id {domain}")));
        }
        Ok(FILLER.len() + domain)
    }

    pub fn class_token(&self, class: usize) -> Result<usize> {
        if class >= self.num_classes {
            return Err(Error::InvalidArgument(format!("unknown class token id {class}")));
        }
        Ok(FILLER.len() + self.num_domains + class)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Content for one template slot: a single trained vocabulary token or a
/// block of free concept rows (n x d_w).
#[derive(Debug, Clone, Copy)]
pub enum SlotValue<'a> {
    Vocab(usize),
    Concept(&'a Array2<f64>),
}

/// The rendered template "a [STYLE] style of a [CLASS]". Exactly one slot
/// of each kind.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    ids: [usize; 4], // a, style, of, a
}

impl PromptTemplate {
    pub fn new(vocab: &Vocabulary) -> Result<Self> {
        Ok(PromptTemplate {
            ids: [vocab.filler("a")?, vocab.filler("style")?, vocab.filler("of")?, vocab.filler("a")?],
        })
    }
}

enum SeqToken<'a> {
    Vocab(usize),
    Free(ndarray::ArrayView1<'a, f64>),
}

fn render<'a>(
    template: &PromptTemplate,
    style: &SlotValue<'a>,
    class: &SlotValue<'a>,
) -> Vec<SeqToken<'a>> {
    let mut seq = Vec::new();
    let push_slot = |seq: &mut Vec<SeqToken<'a>>, slot: &SlotValue<'a>| match slot {
        SlotValue::Vocab(id) => seq.push(SeqToken::Vocab(*id)),
        SlotValue::Concept(rows) => {
            for row in rows.rows() {
                seq.push(SeqToken::Free(row));
            }
        }
    };
    seq.push(SeqToken::Vocab(template.ids[0]));
    push_slot(&mut seq, style);
    seq.push(SeqToken::Vocab(template.ids[1]));
    seq.push(SeqToken::Vocab(template.ids[2]));
    seq.push(SeqToken::Vocab(template.ids[3]));
    push_slot(&mut seq, class);
    seq
}

/// Per-call cache for the backward pass.
pub struct CondCache {
    pooled: Array1<f64>,
    seq_len: usize,
    vocab_ids: Vec<usize>,
    style_rows: usize,
    class_rows: usize,
}

/// Gradients with respect to the free slot contents; zero-row arrays for
/// vocabulary-filled slots.
pub struct SlotGrads {
    pub style: Array2<f64>,
    pub class: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Conditioner {
    pub embed: Param, // (vocab, d_w)
    pub proj: Dense,  // d_w -> d_cond
    d_w: usize,
}

impl Conditioner {
    pub fn new(vocab_len: usize, dims: &ModelDims, rng: &mut impl Rng) -> Self {
        Conditioner {
            // Init scale matches the concept-vector initialization so free
            // slots start in-distribution.
            embed: Param::randn(&[vocab_len, dims.d_w], 0.02, rng),
            proj: Dense::new(dims.d_w, dims.d_cond, rng),
            d_w: dims.d_w,
        }
    }

    /// Encodes the filled template into the conditioning vector.
    pub fn forward(
        &self,
        template: &PromptTemplate,
        style: &SlotValue,
        class: &SlotValue,
    ) -> Result<(Array1<f64>, CondCache)> {
        for slot in [style, class] {
            if let SlotValue::Concept(rows) = slot {
                if rows.shape()[1] != self.d_w {
                    return Err(Error::ShapeMismatch {
                        expected: format!("slot width {}", self.d_w),
                        actual: format!("{}", rows.shape()[1]),
                    });
                }
            }
        }
        let seq = render(template, style, class);
        let mut pooled = Array1::zeros(self.d_w);
        let mut vocab_ids = Vec::new();
        for tok in &seq {
            match tok {
                SeqToken::Vocab(id) => {
                    for j in 0..self.d_w {
                        pooled[j] += self.embed.value[[*id, j]];
                    }
                    vocab_ids.push(*id);
                }
                SeqToken::Free(row) => {
                    for j in 0..self.d_w {
                        pooled[j] += row[j];
                    }
                }
            }
        }
        pooled /= seq.len() as f64;
        let cond = self.proj.forward(&pooled);
        let rows = |s: &SlotValue| match s {
            SlotValue::Vocab(_) => 0,
            SlotValue::Concept(r) => r.shape()[0],
        };
        let cache = CondCache {
            pooled,
            seq_len: seq.len(),
            vocab_ids,
            style_rows: rows(style),
            class_rows: rows(class),
        };
        Ok((cond, cache))
    }

    /// Accumulates embedding/projection gradients and returns the
    /// gradients for the free slot rows.
    pub fn backward(&mut self, cache: &CondCache, g_cond: &Array1<f64>) -> SlotGrads {
        let g_pooled = self.proj.backward(&cache.pooled, g_cond);
        let per_token = &g_pooled / cache.seq_len as f64;
        for &id in &cache.vocab_ids {
            for j in 0..self.d_w {
                self.embed.grad[[id, j]] += per_token[j];
            }
        }
        let tile = |n: usize| {
            let mut g = Array2::zeros((n, self.d_w));
            for mut row in g.rows_mut() {
                row.assign(&per_token);
            }
            g
        };
        SlotGrads { style: tile(cache.style_rows), class: tile(cache.class_rows) }
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.embed];
        p.extend(self.proj.params());
        p
    }

    pub fn params_ref(&self) -> Vec<&Param> {
        vec![&self.embed, &self.proj.w, &self.proj.b]
    }
}
