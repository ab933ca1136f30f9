use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::{self, WorldLayout};
use crate::model::{continue_greedy, DecodeState, Model, NoHook, TokenId};

use super::{default_cue_tokens, DatasetManifest, Granularity, Sample, Scene, Span, Split, SplitCounts};

/// Knobs for scene sampling and pool construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub n_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that a scene contains the trigger object.
    pub trigger_rate: f64,
    pub calib_fraction: f64,
    pub n_token: usize,
    pub n_sentence: usize,
    /// Faithful samples per granularity used to fit steering backends.
    pub n_reference: usize,
    pub max_caption_len: usize,
    /// Also label "no" on a present object as hallucinated.
    pub probe_false_negatives: bool,
    pub cue_tokens: Vec<TokenId>,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            n_scenes: 600,
            min_objects: 2,
            max_objects: 4,
            trigger_rate: 0.5,
            calib_fraction: 0.5,
            n_token: 100,
            n_sentence: 100,
            n_reference: 100,
            max_caption_len: 24,
            probe_false_negatives: false,
            cue_tokens: default_cue_tokens(),
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dataset: {m}")));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if !(0.0..=1.0).contains(&self.trigger_rate) {
            return bad("trigger_rate must lie in [0, 1]");
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction < 1.0) {
            return bad("calib_fraction must lie in (0, 1)");
        }
        if self.cue_tokens.is_empty() {
            return bad("cue_tokens must be nonempty");
        }
        if self.max_caption_len == 0 {
            return bad("max_caption_len must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProbeLabeling {
    pub false_negatives: bool,
}

impl ProbeLabeling {
    fn hallucinated(&self, present: bool, answer: TokenId) -> bool {
        if present {
            self.false_negatives && answer != vocab::YES
        } else {
            answer == vocab::YES
        }
    }
}

/// A seeded collection of scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBank {
    pub scenes: Vec<Scene>,
}

impl SceneBank {
    /// Scenes of `min..=max` objects. With probability `trigger_rate` a scene
    /// contains `trigger`; `excluded` objects never appear.
    pub fn generate(
        layout: &WorldLayout,
        params: &DatasetParams,
        trigger: Option<TokenId>,
        excluded: &[TokenId],
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        let pool: Vec<TokenId> = layout
            .objects()
            .filter(|t| Some(*t) != trigger && !excluded.contains(t))
            .collect();
        if pool.len() < params.max_objects {
            return Err(Error::Config(format!(
                "max_objects {} exceeds the {} eligible objects",
                params.max_objects,
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes = (0..params.n_scenes as u32)
            .map(|id| {
                let size = rng.random_range(params.min_objects..=params.max_objects);
                let with_trigger = trigger.is_some() && rng.random_bool(params.trigger_rate);
                let mut objs: Vec<TokenId> = if with_trigger {
                    let mut o: Vec<_> = pool.choose_multiple(&mut rng, size - 1).copied().collect();
                    o.push(trigger.unwrap());
                    o
                } else {
                    pool.choose_multiple(&mut rng, size).copied().collect()
                };
                objs.shuffle(&mut rng);
                Scene::new(id, objs)
            })
            .collect();
        Ok(SceneBank { scenes })
    }
}

pub fn caption_prompt(scene: &Scene) -> Vec<TokenId> {
    let mut p = Vec::with_capacity(scene.objects.len() + 2);
    p.push(vocab::BOS);
    p.extend_from_slice(&scene.objects);
    p.push(vocab::SEP);
    p
}

pub fn probe_prompt(layout: &WorldLayout, scene: &Scene, object: TokenId) -> Result<Vec<TokenId>> {
    let probe = layout
        .probe_for(object)
        .ok_or_else(|| Error::Input(format!("token {object} is not an object")))?;
    let mut p = caption_prompt(scene);
    p.push(probe);
    Ok(p)
}

/// A token is hallucinated iff it is an object token absent from the scene.
pub fn label_caption(layout: &WorldLayout, scene: &Scene, response: &[TokenId]) -> Vec<bool> {
    response
        .iter()
        .map(|&t| layout.is_object(t) && !scene.contains(t))
        .collect()
}

/// Splits a response after every period token. A trailing remainder without
/// object tokens (typically the end-of-sequence token) joins the last span.
pub fn sentence_spans(layout: &WorldLayout, response: &[TokenId], labels: &[bool]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, &t) in response.iter().enumerate() {
        if t == vocab::PERIOD {
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < response.len() {
        let has_object = response[start..].iter().any(|&t| layout.is_object(t));
        match spans.last_mut() {
            Some(last) if !has_object => last.1 = response.len(),
            _ => spans.push((start, response.len())),
        }
    }
    spans
        .into_iter()
        .map(|(start, end)| Span {
            start,
            end,
            hallucinated: labels[start..end].iter().any(|&b| b),
        })
        .collect()
}

fn scene_rng(seed: u64, scene: &Scene, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (scene.id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

fn shuffled_scene_order(scenes: &[Scene], seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Probes every object of the world against `scene`, in a seeded order.
fn probe_scene(
    model: &Model,
    layout: &WorldLayout,
    scene: &Scene,
    labeling: ProbeLabeling,
    seed: u64,
) -> Result<Vec<Sample>> {
    let prompt = caption_prompt(scene);
    let mut prefix = DecodeState::new(model);
    for &t in &prompt {
        prefix.step(t, &NoHook)?;
    }
    let mut objects: Vec<TokenId> = layout.objects().collect();
    objects.shuffle(&mut scene_rng(seed, scene, 1));
    objects
        .into_iter()
        .map(|obj| {
            let mut st = prefix.clone();
            let probe = layout.probe_for(obj).expect("object token");
            let logits = st.step(probe, &NoHook)?;
            let answer = continue_greedy(&mut st, logits, 1, &NoHook, None)?[0];
            let hallucinated = labeling.hallucinated(scene.contains(obj), answer);
            let mut p = prompt.clone();
            p.push(probe);
            Ok(Sample {
                id: 0,
                granularity: Granularity::Token,
                scene: scene.clone(),
                prompt: p,
                response: vec![answer],
                token_labels: vec![hallucinated],
                spans: vec![Span {
                    start: 0,
                    end: 1,
                    hallucinated,
                }],
                split: Split::Calib,
            })
        })
        .collect()
}

fn caption_scene(model: &Model, layout: &WorldLayout, scene: &Scene, max_len: usize) -> Result<Sample> {
    let prompt = caption_prompt(scene);
    let room = model.config().max_seq_len.saturating_sub(prompt.len());
    let response = crate::model::generate(model, &prompt, max_len.min(room), &NoHook, Some(vocab::EOS))?;
    let token_labels = label_caption(layout, scene, &response);
    let spans = sentence_spans(layout, &response, &token_labels);
    Ok(Sample {
        id: 0,
        granularity: Granularity::Sentence,
        scene: scene.clone(),
        prompt,
        response,
        token_labels,
        spans,
        split: Split::Calib,
    })
}

fn layout_of(model: &Model) -> Result<WorldLayout> {
    WorldLayout::for_vocab(model.config().vocab_size)
}

fn numbered(mut v: Vec<Sample>) -> Vec<Sample> {
    for (i, s) in v.iter_mut().enumerate() {
        s.id = i as u64;
    }
    v
}

/// Scenes handled per parallel batch while filling a pool.
const CHUNK: usize = 32;

/// Walks scenes in `order`, batch by batch, keeping samples accepted by
/// `keep` until `n` are found. Returns the kept samples and the number of
/// candidates examined.
fn fill_pool(
    order: &[usize],
    n: usize,
    make: impl Fn(usize) -> Result<Vec<Sample>> + Sync,
    mut keep: impl FnMut(&Sample) -> bool,
) -> Result<(Vec<Sample>, usize)> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    for chunk in order.chunks(CHUNK) {
        let batch: Vec<Vec<Sample>> = chunk.par_iter().map(|&i| make(i)).collect::<Result<_>>()?;
        for s in batch.into_iter().flatten() {
            attempts += 1;
            if keep(&s) {
                out.push(s);
                if out.len() == n {
                    return Ok((out, attempts));
                }
            }
        }
    }
    Ok((out, attempts))
}

fn exhausted(wanted: usize, found: usize, attempts: usize) -> Error {
    Error::GenerationExhausted {
        wanted,
        found,
        attempts,
    }
}

/// Token-level calibration samples: probes whose greedy answer is hallucinated.
pub fn gen_token_level(
    n: usize,
    scenes: &[Scene],
    model: &Model,
    seed: u64,
    labeling: ProbeLabeling,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let layout = layout_of(model)?;
    let order = shuffled_scene_order(scenes, seed);
    let (out, attempts) = fill_pool(
        &order,
        n,
        |i| probe_scene(model, &layout, &scenes[i], labeling, seed),
        Sample::has_hallucination,
    )?;
    if out.len() < n {
        return Err(exhausted(n, out.len(), attempts));
    }
    Ok(numbered(out))
}

/// Sentence-level calibration samples: greedy captions with at least one
/// hallucinated and one faithful sentence.
pub fn gen_sentence_level(n: usize, scenes: &[Scene], model: &Model, seed: u64, max_len: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let layout = layout_of(model)?;
    let order = shuffled_scene_order(scenes, seed);
    let (out, attempts) = fill_pool(
        &order,
        n,
        |i| Ok(vec![caption_scene(model, &layout, &scenes[i], max_len)?]),
        |s| s.spans.iter().any(|sp| sp.hallucinated) && s.spans.iter().any(|sp| !sp.hallucinated),
    )?;
    if out.len() < n {
        return Err(exhausted(n, out.len(), attempts));
    }
    Ok(numbered(out))
}

/// Fully faithful samples of both granularities: `n` captions without any
/// hallucinated token and `n` correctly answered probes, alternating between
/// present and absent objects.
pub fn gen_reference(
    n: usize,
    scenes: &[Scene],
    model: &Model,
    seed: u64,
    max_len: usize,
    labeling: ProbeLabeling,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let layout = layout_of(model)?;
    let order = shuffled_scene_order(scenes, seed);
    let (mut all, attempts) = fill_pool(
        &order,
        n,
        |i| Ok(vec![caption_scene(model, &layout, &scenes[i], max_len)?]),
        |s| !s.has_hallucination(),
    )?;
    if all.len() < n {
        return Err(exhausted(n, all.len(), attempts));
    }
    let mut want_present = true;
    let mut last_scene = None;
    let (toks, attempts) = fill_pool(
        &order,
        n,
        |i| probe_scene(model, &layout, &scenes[i], labeling, seed),
        |s| {
            let ok = last_scene != Some(s.scene.id)
                && !s.has_hallucination()
                && s.scene.contains(probed_object(&layout, s)) == want_present;
            if ok {
                last_scene = Some(s.scene.id);
                want_present = !want_present;
            }
            ok
        },
    )?;
    if toks.len() < n {
        return Err(exhausted(n, toks.len(), attempts));
    }
    all.extend(toks);
    Ok(numbered(all))
}

/// Object asked about by a token-level sample.
pub fn probed_object(layout: &WorldLayout, s: &Sample) -> TokenId {
    let probe = *s.prompt.last().expect("nonempty prompt");
    layout.object(layout.probe_index(probe).expect("probe token"))
}

/// One unfiltered caption per scene.
pub fn gen_eval_captions(scenes: &[Scene], model: &Model, max_len: usize) -> Result<Vec<Sample>> {
    let layout = layout_of(model)?;
    let v: Vec<Sample> = scenes
        .par_iter()
        .map(|sc| caption_scene(model, &layout, sc, max_len))
        .collect::<Result<_>>()?;
    Ok(numbered(v))
}

/// Every object of the world probed against every scene, unfiltered.
pub fn gen_eval_probes(scenes: &[Scene], model: &Model, seed: u64, labeling: ProbeLabeling) -> Result<Vec<Sample>> {
    let layout = layout_of(model)?;
    let v: Vec<Vec<Sample>> = scenes
        .par_iter()
        .map(|sc| probe_scene(model, &layout, sc, labeling, seed))
        .collect::<Result<_>>()?;
    Ok(numbered(v.into_iter().flatten().collect()))
}

/// Partitions scene ids into calibration and evaluation sets.
pub fn split_scenes(scene_ids: &[u32], calib_fraction: f64, seed: u64) -> Result<(BTreeSet<u32>, BTreeSet<u32>)> {
    if !(calib_fraction > 0.0 && calib_fraction < 1.0) {
        return Err(Error::Split(format!("calib_fraction {calib_fraction} not in (0, 1)")));
    }
    let mut ids: Vec<u32> = scene_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n_calib = (calib_fraction * ids.len() as f64).round() as usize;
    if n_calib == 0 || n_calib == ids.len() {
        return Err(Error::Split(format!(
            "{} scenes cannot honor calib_fraction {calib_fraction}",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let calib = ids[..n_calib].iter().copied().collect();
    let eval = ids[n_calib..].iter().copied().collect();
    Ok((calib, eval))
}

/// Scene-level split of samples; each returned sample carries its split tag.
pub fn split_disjoint(samples: Vec<Sample>, calib_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let ids: Vec<u32> = samples.iter().map(|s| s.scene.id).collect();
    let (calib_ids, _) = split_scenes(&ids, calib_fraction, seed)?;
    let (mut calib, mut eval): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| calib_ids.contains(&s.scene.id));
    calib.iter_mut().for_each(|s| s.split = Split::Calib);
    eval.iter_mut().for_each(|s| s.split = Split::Eval);
    Ok((calib, eval))
}

/// Everything `gen-data` produces.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Calibration pool followed by the evaluation set, ids unique.
    pub samples: Vec<Sample>,
    /// Faithful reference samples from calibration scenes.
    pub reference: Vec<Sample>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn calibration(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Calib)
    }

    pub fn evaluation(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Eval)
    }
}

/// Seeded scene bank split by scene into calibration and evaluation scenes.
pub fn split_bank(model: &Model, params: &DatasetParams, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    params.validate()?;
    let layout = layout_of(model)?;
    let planted = model.planted();
    let trigger = planted.map(|p| p.trigger_token);
    let excluded: Vec<TokenId> = planted.map(|p| vec![p.spurious_token]).unwrap_or_default();
    let bank = SceneBank::generate(&layout, params, trigger, &excluded, seed)?;
    let ids: Vec<u32> = bank.scenes.iter().map(|s| s.id).collect();
    let (calib_ids, _) = split_scenes(&ids, params.calib_fraction, seed ^ 0x51)?;
    Ok(bank.scenes.into_iter().partition(|s| calib_ids.contains(&s.id)))
}

fn labeling_of(params: &DatasetParams) -> ProbeLabeling {
    ProbeLabeling {
        false_negatives: params.probe_false_negatives,
    }
}

/// Calibration pool (token then sentence level) and the faithful reference
/// pool, both drawn from `calib_scenes`. Reference ids follow pool ids.
pub fn build_calibration(
    model: &Model,
    params: &DatasetParams,
    seed: u64,
    calib_scenes: &[Scene],
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let labeling = labeling_of(params);
    let mut pool = gen_token_level(params.n_token, calib_scenes, model, seed ^ 0x70, labeling)?;
    pool.extend(gen_sentence_level(
        params.n_sentence,
        calib_scenes,
        model,
        seed ^ 0x5e,
        params.max_caption_len,
    )?);
    let reference = gen_reference(
        params.n_reference,
        calib_scenes,
        model,
        seed ^ 0x4ef,
        params.max_caption_len,
        labeling,
    )?;
    let mut pool = numbered(pool);
    let base = pool.len() as u64;
    let mut reference = reference;
    for (i, s) in reference.iter_mut().enumerate() {
        s.id = base + i as u64;
    }
    pool.iter_mut().for_each(|s| s.split = Split::Calib);
    Ok((pool, reference))
}

/// Unfiltered probes of every object plus one caption per scene, tagged
/// evaluation and numbered from `first_id`.
pub fn build_evaluation(
    model: &Model,
    params: &DatasetParams,
    seed: u64,
    eval_scenes: &[Scene],
    first_id: u64,
) -> Result<Vec<Sample>> {
    let mut eval = gen_eval_probes(eval_scenes, model, seed ^ 0xe1, labeling_of(params))?;
    eval.extend(gen_eval_captions(eval_scenes, model, params.max_caption_len)?);
    for (i, s) in eval.iter_mut().enumerate() {
        s.id = first_id + i as u64;
        s.split = Split::Eval;
    }
    Ok(eval)
}

/// Builds calibration pools, the reference pool and the evaluation set from a
/// seeded scene bank split by scene.
pub fn build_dataset(model: &Model, params: &DatasetParams, seed: u64) -> Result<Dataset> {
    let layout = layout_of(model)?;
    let (calib_scenes, eval_scenes) = split_bank(model, params, seed)?;
    let (mut samples, mut reference) = build_calibration(model, params, seed, &calib_scenes)?;
    let first_eval = samples.len() as u64;
    samples.extend(build_evaluation(model, params, seed, &eval_scenes, first_eval)?);
    let first_ref = samples.len() as u64;
    for (i, s) in reference.iter_mut().enumerate() {
        s.id = first_ref + i as u64;
    }
    let mut manifest = DatasetManifest::new(&layout, params.cue_tokens.clone(), seed, model.content_hash());
    manifest.params = Some(params.clone());
    manifest.counts = SplitCounts::of(&samples);
    manifest.reference_counts = SplitCounts::of(&reference);
    Ok(Dataset {
        samples,
        reference,
        manifest,
    })
}

/// Scene ids that appear in more than one split.
pub fn scene_overlap(samples: &[Sample]) -> BTreeMap<u32, BTreeSet<Split>> {
    let mut m: BTreeMap<u32, BTreeSet<Split>> = BTreeMap::new();
    for s in samples {
        m.entry(s.scene.id).or_default().insert(s.split);
    }
    m.retain(|_, v| v.len() > 1);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_planted, ModelConfig, PlantedSpec};

    fn planted(strength: f64) -> Model {
        let spec = PlantedSpec {
            hallucination_layers: vec![3],
            trigger_token: 10,
            spurious_token: 13,
            strength,
            task_layers: vec![1, 6],
        };
        build_planted(&ModelConfig::default(), &spec, 7).unwrap()
    }

    fn small_params() -> DatasetParams {
        DatasetParams {
            n_scenes: 80,
            n_token: 10,
            n_sentence: 10,
            n_reference: 10,
            ..DatasetParams::default()
        }
    }

    fn bank(m: &Model, n: usize) -> Vec<Scene> {
        let layout = layout_of(m).unwrap();
        let p = m.planted().unwrap();
        let params = DatasetParams {
            n_scenes: n,
            ..DatasetParams::default()
        };
        SceneBank::generate(&layout, &params, Some(p.trigger_token), &[p.spurious_token], 3)
            .unwrap()
            .scenes
    }

    #[test]
    fn caption_spans_split_at_periods() {
        let layout = WorldLayout::new(12).unwrap();
        let scene = Scene::new(0, vec![8, 9]);
        let resp = [8, vocab::PERIOD, 9, 10, vocab::PERIOD, vocab::EOS];
        let labels = label_caption(&layout, &scene, &resp);
        assert_eq!(labels, [false, false, false, true, false, false]);
        let spans = sentence_spans(&layout, &resp, &labels);
        let got: Vec<_> = spans.iter().map(|s| (s.start, s.end, s.hallucinated)).collect();
        assert_eq!(got, [(0, 2, false), (2, 6, true)]);
    }

    #[test]
    fn trailing_object_without_period_is_its_own_span() {
        let layout = WorldLayout::new(12).unwrap();
        let resp = [8, vocab::PERIOD, 9];
        let spans = sentence_spans(&layout, &resp, &[false, false, false]);
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[1].start, spans[1].end), (2, 3));
    }

    #[test]
    fn split_ten_scenes_in_half() {
        let ids: Vec<u32> = (0..10).collect();
        let (a, b) = split_scenes(&ids, 0.5, 9).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        assert!(a.is_disjoint(&b));
        assert_eq!(split_scenes(&ids, 0.5, 9).unwrap(), (a, b));
        assert!(matches!(split_scenes(&ids[..1], 0.5, 0), Err(Error::Split(_))));
        assert!(matches!(split_scenes(&ids, 1.0, 0), Err(Error::Split(_))));
        assert!(matches!(split_scenes(&ids, 0.0, 0), Err(Error::Split(_))));
    }

    #[test]
    fn zero_requested_is_empty() {
        let m = planted(4.0);
        let scenes = bank(&m, 4);
        assert!(gen_token_level(0, &scenes, &m, 0, ProbeLabeling::default())
            .unwrap()
            .is_empty());
        assert!(gen_sentence_level(0, &scenes, &m, 0, 24).unwrap().is_empty());
    }

    #[test]
    fn probe_labels_follow_scene_membership() {
        let m = planted(4.0);
        let layout = layout_of(&m).unwrap();
        let spurious = m.planted().unwrap().spurious_token;
        let scenes = bank(&m, 40);
        let all = gen_eval_probes(&scenes, &m, 1, ProbeLabeling::default()).unwrap();
        let mut spurious_yes = 0;
        for s in &all {
            let obj = probed_object(&layout, s);
            let oracle = !s.scene.objects.contains(&obj) && s.response[0] == vocab::YES;
            assert_eq!(s.token_labels[0], oracle);
            if obj == spurious && s.token_labels[0] {
                spurious_yes += 1;
            }
        }
        assert!(spurious_yes > 0);
        let pool = gen_token_level(5, &scenes, &m, 1, ProbeLabeling::default()).unwrap();
        assert_eq!(pool.len(), 5);
        assert!(pool.iter().all(|s| s.has_hallucination() && s.validate().is_ok()));
    }

    #[test]
    fn sentence_pool_has_both_labels() {
        let m = planted(4.0);
        let scenes = bank(&m, 40);
        let pool = gen_sentence_level(5, &scenes, &m, 2, 24).unwrap();
        for s in &pool {
            s.validate().unwrap();
            assert!(s.spans.iter().any(|sp| sp.hallucinated));
            assert!(s.spans.iter().any(|sp| !sp.hallucinated));
        }
    }

    #[test]
    fn faithful_model_exhausts() {
        let m = planted(0.0);
        let scenes = bank(&m, 20);
        match gen_sentence_level(1, &scenes, &m, 0, 24) {
            Err(Error::GenerationExhausted {
                wanted: 1,
                found: 0,
                attempts,
            }) => assert_eq!(attempts, 20),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            gen_token_level(1, &scenes, &m, 0, ProbeLabeling::default()),
            Err(Error::GenerationExhausted { .. })
        ));
    }

    #[test]
    fn dataset_is_reproducible_and_disjoint() {
        let m = planted(4.0);
        let a = build_dataset(&m, &small_params(), 5).unwrap();
        let b = build_dataset(&m, &small_params(), 5).unwrap();
        assert_eq!(
            super::super::to_jsonl(&a.samples).unwrap(),
            super::super::to_jsonl(&b.samples).unwrap()
        );
        assert_eq!(a.manifest, b.manifest);
        a.manifest.validate(&a.samples).unwrap();
        let mut all = a.samples.clone();
        all.extend(a.reference.iter().cloned());
        assert!(scene_overlap(&all).is_empty());
        assert!(a.calibration().all(|s| s.has_hallucination()));
        assert!(a.reference.iter().all(|s| !s.has_hallucination()));
        let ids: BTreeSet<u64> = all.iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), all.len());
    }
}
