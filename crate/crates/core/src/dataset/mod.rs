//! Bi-granularity hallucination samples over synthetic scenes.
//!
//! Token-level samples are yes/no probes ("is X?") answered by the model;
//! sentence-level samples are greedy multi-sentence captions split at the
//! period token.

mod gen;
mod jsonl;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::{self, WorldLayout};
use crate::model::TokenId;

pub use gen::{
    build_calibration, build_dataset, build_evaluation, caption_prompt, gen_eval_captions, gen_eval_probes,
    gen_reference, gen_sentence_level, gen_token_level, label_caption, probe_prompt, probed_object, scene_overlap,
    sentence_spans, split_bank, split_disjoint, split_scenes, Dataset, DatasetParams, ProbeLabeling, SceneBank,
};
pub use jsonl::{load_jsonl, load_manifest, parse_jsonl, save_jsonl, save_manifest, to_jsonl};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Token,
    Sentence,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Token => "token",
            Granularity::Sentence => "sentence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Calib,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub id: u32,
    /// Distinct object tokens in presentation order.
    pub objects: Vec<TokenId>,
}

impl Scene {
    /// Drops repeated objects, keeping first occurrences.
    pub fn new(id: u32, objects: Vec<TokenId>) -> Self {
        let mut seen = Vec::with_capacity(objects.len());
        for t in objects {
            if !seen.contains(&t) {
                seen.push(t);
            }
        }
        Scene { id, objects: seen }
    }

    pub fn contains(&self, t: TokenId) -> bool {
        self.objects.contains(&t)
    }
}

/// Half-open `[start, end)` range of response positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub hallucinated: bool,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub granularity: Granularity,
    pub scene: Scene,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub token_labels: Vec<bool>,
    pub spans: Vec<Span>,
    pub split: Split,
}

impl Sample {
    /// Prompt followed by response.
    pub fn full_tokens(&self) -> Vec<TokenId> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.response);
        t
    }

    /// Position in [`Sample::full_tokens`] whose next-token distribution emits
    /// response token `i`.
    pub fn prediction_position(&self, i: usize) -> usize {
        self.prompt.len() + i - 1
    }

    pub fn has_hallucination(&self) -> bool {
        self.token_labels.iter().any(|&b| b)
    }

    pub fn hallucinated_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.token_labels.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Checks the structural invariants of a sample.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("sample {}: {m}", self.id)));
        if self.prompt.is_empty() {
            return bad("empty prompt".into());
        }
        if self.response.is_empty() {
            return bad("empty response".into());
        }
        if self.token_labels.len() != self.response.len() {
            return bad(format!(
                "{} token labels for {} response tokens",
                self.token_labels.len(),
                self.response.len()
            ));
        }
        if self.spans.is_empty() {
            return bad("no spans".into());
        }
        let mut at = 0;
        for s in &self.spans {
            if s.start != at || s.end <= s.start {
                return bad(format!("spans do not partition the response at position {at}"));
            }
            let any = self.token_labels[s.start..s.end].iter().any(|&b| b);
            if any != s.hallucinated {
                return bad(format!(
                    "span [{}, {}) labeled {} but its tokens say {}",
                    s.start, s.end, s.hallucinated, any
                ));
            }
            at = s.end;
        }
        if at != self.response.len() {
            return bad(format!("spans cover {at} of {} response tokens", self.response.len()));
        }
        if self.granularity == Granularity::Token && self.spans.len() != 1 {
            return bad("token-level samples have exactly one span".into());
        }
        Ok(())
    }

    /// Additionally checks that scene objects belong to the object sub-vocabulary.
    pub fn validate_in(&self, layout: &WorldLayout) -> Result<()> {
        self.validate()?;
        if let Some(t) = self.scene.objects.iter().find(|&&t| !layout.is_object(t)) {
            return Err(Error::Validation(format!(
                "sample {}: scene token {t} is not an object",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub token_calib: usize,
    pub token_eval: usize,
    pub sentence_calib: usize,
    pub sentence_eval: usize,
}

impl SplitCounts {
    pub fn of(samples: &[Sample]) -> Self {
        let mut c = SplitCounts::default();
        for s in samples {
            match (s.granularity, s.split) {
                (Granularity::Token, Split::Calib) => c.token_calib += 1,
                (Granularity::Token, Split::Eval) => c.token_eval += 1,
                (Granularity::Sentence, Split::Calib) => c.sentence_calib += 1,
                (Granularity::Sentence, Split::Eval) => c.sentence_eval += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// `(id, surface)` for every token.
    pub vocab: Vec<(TokenId, String)>,
    pub cue_tokens: Vec<TokenId>,
    pub object_tokens: Vec<TokenId>,
    pub seed: u64,
    pub counts: SplitCounts,
    /// Counts of the faithful reference pool used to fit steering backends.
    #[serde(default)]
    pub reference_counts: SplitCounts,
    pub model_hash: String,
    /// Generation parameters; with `seed` and the model they regenerate the dataset.
    #[serde(default)]
    pub params: Option<DatasetParams>,
}

impl DatasetManifest {
    pub fn new(layout: &WorldLayout, cue_tokens: Vec<TokenId>, seed: u64, model_hash: String) -> Self {
        let vocab = (0..layout.vocab_size() as TokenId)
            .map(|t| (t, layout.surface(t)))
            .collect();
        DatasetManifest {
            vocab,
            cue_tokens,
            object_tokens: layout.objects().collect(),
            seed,
            counts: SplitCounts::default(),
            reference_counts: SplitCounts::default(),
            model_hash,
            params: None,
        }
    }

    pub fn validate(&self, samples: &[Sample]) -> Result<()> {
        if self.cue_tokens.is_empty() {
            return Err(Error::Validation("manifest cue-token set is empty".into()));
        }
        let got = SplitCounts::of(samples);
        if got != self.counts {
            return Err(Error::Validation(format!(
                "manifest counts {:?} disagree with stored samples {:?}",
                self.counts, got
            )));
        }
        Ok(())
    }
}

/// Default cue set: the period token and the "additional" token.
pub fn default_cue_tokens() -> Vec<TokenId> {
    vec![vocab::PERIOD, vocab::ADD]
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(response: Vec<TokenId>, labels: Vec<bool>, spans: Vec<Span>) -> Sample {
        Sample {
            id: 0,
            granularity: Granularity::Sentence,
            scene: Scene::new(0, vec![8, 9]),
            prompt: vec![0, 8, 9, 1],
            response,
            token_labels: labels,
            spans,
            split: Split::Calib,
        }
    }

    fn span(start: usize, end: usize, hallucinated: bool) -> Span {
        Span {
            start,
            end,
            hallucinated,
        }
    }

    #[test]
    fn validation_catches_broken_partitions() {
        let ok = sample(
            vec![8, 2, 9, 10, 2],
            vec![false, false, false, true, false],
            vec![span(0, 2, false), span(2, 5, true)],
        );
        ok.validate().unwrap();
        let mut gap = ok.clone();
        gap.spans[1].start = 3;
        assert!(matches!(gap.validate(), Err(Error::Validation(_))));
        let mut short = ok.clone();
        short.spans[1].end = 4;
        assert!(short.validate().is_err());
        let mut mislabeled = ok.clone();
        mislabeled.spans[0].hallucinated = true;
        assert!(mislabeled.validate().is_err());
        let mut tok = ok.clone();
        tok.granularity = Granularity::Token;
        assert!(tok.validate().is_err());
    }

    #[test]
    fn prediction_positions() {
        let s = sample(vec![8, 2], vec![false, false], vec![span(0, 2, false)]);
        assert_eq!(s.prediction_position(0), 3);
        assert_eq!(s.full_tokens()[s.prediction_position(1) + 1], 2);
    }

    #[test]
    fn counts_and_manifest() {
        let layout = WorldLayout::for_vocab(32).unwrap();
        let s = sample(vec![8], vec![false], vec![span(0, 1, false)]);
        let mut m = DatasetManifest::new(&layout, default_cue_tokens(), 1, String::new());
        assert!(m.validate(std::slice::from_ref(&s)).is_err());
        m.counts.sentence_calib = 1;
        m.validate(&[s]).unwrap();
        assert_eq!(m.vocab.len(), 32);
        assert_eq!(m.object_tokens.len(), 12);
    }
}
