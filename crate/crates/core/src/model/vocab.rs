//! Token layout of the synthetic scene-description world.
//!
//! ```text
//! 0 <bos>   1 <sep>   2 .   3 <eos>   4 yes   5 no   6 additional   7 <pad>
//! 8 .. 8+N          object tokens
//! 8+N .. 8+2N       probe tokens ("is <object>?")
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::TokenId;

pub const BOS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const PERIOD: TokenId = 2;
pub const EOS: TokenId = 3;
pub const YES: TokenId = 4;
pub const NO: TokenId = 5;
pub const ADD: TokenId = 6;
pub const PAD: TokenId = 7;

pub const N_STRUCTURAL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldLayout {
    pub n_objects: usize,
}

impl WorldLayout {
    pub fn new(n_objects: usize) -> Result<Self> {
        if n_objects < 2 {
            return Err(Error::Config("the world needs at least 2 object tokens".into()));
        }
        Ok(WorldLayout { n_objects })
    }

    /// Layout implied by a vocabulary size (`8 + 2N`).
    pub fn for_vocab(vocab_size: usize) -> Result<Self> {
        if vocab_size < N_STRUCTURAL + 4 || !(vocab_size - N_STRUCTURAL).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is not of the form 8 + 2N with N >= 2"
            )));
        }
        Self::new((vocab_size - N_STRUCTURAL) / 2)
    }

    pub fn vocab_size(&self) -> usize {
        N_STRUCTURAL + 2 * self.n_objects
    }

    pub fn object(&self, k: usize) -> TokenId {
        debug_assert!(k < self.n_objects);
        (N_STRUCTURAL + k) as TokenId
    }

    pub fn probe(&self, k: usize) -> TokenId {
        debug_assert!(k < self.n_objects);
        (N_STRUCTURAL + self.n_objects + k) as TokenId
    }

    pub fn objects(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.n_objects).map(|k| self.object(k))
    }

    pub fn is_object(&self, t: TokenId) -> bool {
        self.object_index(t).is_some()
    }

    pub fn object_index(&self, t: TokenId) -> Option<usize> {
        let t = t as usize;
        (N_STRUCTURAL..N_STRUCTURAL + self.n_objects)
            .contains(&t)
            .then(|| t - N_STRUCTURAL)
    }

    pub fn probe_index(&self, t: TokenId) -> Option<usize> {
        let t = t as usize;
        let lo = N_STRUCTURAL + self.n_objects;
        (lo..lo + self.n_objects).contains(&t).then(|| t - lo)
    }

    /// Probe token asking about `object`.
    pub fn probe_for(&self, object: TokenId) -> Option<TokenId> {
        self.object_index(object).map(|k| self.probe(k))
    }

    pub fn surface(&self, t: TokenId) -> String {
        match t {
            BOS => "<bos>".into(),
            SEP => "<sep>".into(),
            PERIOD => ".".into(),
            EOS => "<eos>".into(),
            YES => "yes".into(),
            NO => "no".into(),
            ADD => "additional".into(),
            PAD => "<pad>".into(),
            _ => {
                if let Some(k) = self.object_index(t) {
                    format!("obj{k:02}")
                } else if let Some(k) = self.probe_index(t) {
                    format!("is obj{k:02}?")
                } else {
                    format!("<unk{t}>")
                }
            }
        }
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.surface(t)).collect::<Vec<_>>().join(" ")
    }
}
