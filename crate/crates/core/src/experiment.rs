//! Synthetic preference data and the end-to-end fading-memory experiment.
//!
//! Preference pairs are built from the model's own captions:
//! the rejected answer is the greedy caption, and the chosen answer swaps
//! each hallucinated object for a present one (round-robin over the scene's
//! objects). A caption without hallucinations is kept as the chosen answer
//! and its object mentions are swapped for absent objects to make the
//! rejected one. Both answers are teacher-forced with the image to get the
//! hidden states that feed the binder.

use std::collections::BTreeSet;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binder::ReCoParams;
use crate::cache::{to_f32, Segment, SourceMeta, TraceRecord};
use crate::diagnostics::{self, InfluenceCurve};
use crate::dpo::{self, DpoConfig, Optimizer, PreferenceQuad, TrainOutcome};
use crate::metrics::{extract_mentions, CaptionEval, ChairCorpus};
use crate::rng::{derive_key, Stream};
use crate::vlm::{DecodeMode, SceneSpec, ToyVlm, VlmConfig, VlmError, BOS, EOS, OBJECT_BASE, PERIOD};

pub const SOURCE_MODEL: &str = "toy-vlm";
pub const TAP_POINT: &str = "pre_head_hidden";

/// Scenes with 2 to 4 distinct objects each (fewer if `n_obj` is smaller).
pub fn sample_scenes(count: usize, n_obj: usize, seed: u64) -> Vec<SceneSpec> {
    assert!(n_obj >= 1, "need at least one object class");
    let mut rng = Stream::derived(seed, 0x7363_656e_65);
    (0..count)
        .map(|_| {
            let k = (2 + rng.next_below(3) as usize).min(n_obj);
            let mut pool: Vec<u32> = (0..n_obj as u32).collect();
            rng.shuffle(&mut pool);
            let scene_seed = rng.next_u64();
            SceneSpec::new(pool[..k].iter().copied(), scene_seed).expect("k ≥ 1")
        })
        .collect()
}

pub fn object_range(config: &VlmConfig) -> Range<u32> {
    OBJECT_BASE..OBJECT_BASE + config.n_obj as u32
}

/// Sentence-level object mentions of a caption, scored against the scene.
/// Tokens from the first EOS on are not part of the caption.
pub fn caption_eval(config: &VlmConfig, tokens: &[u32], scene: &SceneSpec) -> CaptionEval {
    let end = tokens.iter().position(|&w| w == EOS).unwrap_or(tokens.len());
    CaptionEval::new(extract_mentions(&tokens[..end], object_range(config), PERIOD), scene.present_objects.clone())
}

/// `(chosen, rejected)` answers for one scene's greedy caption.
pub fn preference_answers(config: &VlmConfig, caption: &[u32], scene: &SceneSpec) -> (Vec<u32>, Vec<u32>) {
    let range = object_range(config);
    let present: Vec<u32> = scene.present_objects.iter().copied().collect();
    let absent: Vec<u32> = (0..config.n_obj as u32).filter(|o| !scene.present_objects.contains(o)).collect();
    let is_hallucinated = |w: u32| range.contains(&w) && !scene.present_objects.contains(&(w - range.start));

    if caption.iter().any(|&w| is_hallucinated(w)) {
        let mut j = 0;
        let chosen = caption
            .iter()
            .map(|&w| {
                if is_hallucinated(w) {
                    let fix = range.start + present[j % present.len()];
                    j += 1;
                    fix
                } else {
                    w
                }
            })
            .collect();
        (chosen, caption.to_vec())
    } else {
        let rejected = caption
            .iter()
            .enumerate()
            .map(|(i, &w)| if range.contains(&w) && !absent.is_empty() { range.start + absent[i % absent.len()] } else { w })
            .collect();
        (caption.to_vec(), rejected)
    }
}

/// How captions are produced for preference records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptionSettings<'a> {
    pub max_len: usize,
    pub reco: Option<&'a ReCoParams>,
    pub mode: DecodeMode,
}

impl CaptionSettings<'_> {
    pub fn greedy(max_len: usize) -> Self {
        Self { max_len, reco: None, mode: DecodeMode::Greedy }
    }

    /// Sampling seeds are split per scene so a scene's caption does not
    /// depend on its position among parallel workers.
    fn mode_for(&self, index: usize) -> DecodeMode {
        match self.mode {
            DecodeMode::Temperature { temperature, seed } => {
                DecodeMode::Temperature { temperature, seed: derive_key(seed, index as u64) }
            }
            DecodeMode::Greedy => DecodeMode::Greedy,
        }
    }
}

/// Cache record for one scene: caption, preference answers, and
/// teacher-forced states for prompt, chosen and rejected. Returns the
/// caption alongside.
pub fn preference_record(
    model: &ToyVlm,
    scene: &SceneSpec,
    prompt: &[u32],
    settings: &CaptionSettings,
    index: usize,
) -> Result<(TraceRecord, Vec<u32>), VlmError> {
    let caption = model.generate(scene, prompt, settings.max_len, settings.reco, settings.mode_for(index))?;
    let (chosen, rejected) = preference_answers(model.config(), &caption.tokens, scene);
    let bundle = model.image_bundle(scene)?;
    let (prompt_states, chosen_states) = model.teacher_force(&bundle, prompt, &chosen)?;
    let (_, rejected_states) = model.teacher_force(&bundle, prompt, &rejected)?;
    let record = TraceRecord {
        example_id: example_id(index),
        d: model.config().d,
        image_embeddings: caption.trace.image_embeddings.iter().map(|r| to_f32(r)).collect(),
        prompt: Segment::from_f64(prompt.to_vec(), &prompt_states),
        chosen: Segment::from_f64(chosen, &chosen_states),
        rejected: Segment::from_f64(rejected, &rejected_states),
        source: SourceMeta {
            model: SOURCE_MODEL.into(),
            tap_point: TAP_POINT.into(),
            config_fingerprint: model.config().fingerprint(),
        },
    };
    Ok((record, caption.tokens))
}

pub fn example_id(index: usize) -> String {
    format!("scene-{index:05}")
}

/// One record per scene, in scene order, with ids from [`example_id`].
pub fn preference_records(
    model: &ToyVlm,
    scenes: &[SceneSpec],
    prompt: &[u32],
    settings: &CaptionSettings,
) -> Result<Vec<(TraceRecord, Vec<u32>)>, VlmError> {
    scenes.par_iter().enumerate().map(|(i, s)| preference_record(model, s, prompt, settings, i)).collect()
}

/// Greedy captions for every scene, in scene order.
pub fn captions(
    model: &ToyVlm,
    scenes: &[SceneSpec],
    prompt: &[u32],
    max_len: usize,
    reco: Option<&ReCoParams>,
) -> Result<Vec<Vec<u32>>, VlmError> {
    scenes
        .par_iter()
        .map(|s| Ok(model.generate(s, prompt, max_len, reco, DecodeMode::Greedy)?.tokens))
        .collect()
}

pub fn chair_corpus(config: &VlmConfig, scenes: &[SceneSpec], captions: &[Vec<u32>]) -> ChairCorpus {
    let evals: Vec<CaptionEval> = scenes.iter().zip(captions).map(|(s, c)| caption_eval(config, c, s)).collect();
    ChairCorpus::from_evals(&evals)
}

/// Experiment settings. Training uses the default DPO hyperparameters with
/// the adaptive-moment optimizer: under plain descent the first full-batch
/// step saturates the margin and little of the update reaches the image
/// path, so hallucination reduction is weak and seed-dependent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: VlmConfig,
    pub dpo: DpoConfig,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene_seed: u64,
    pub max_len: usize,
    pub t_max: usize,
    pub prompt: Vec<u32>,
    pub early_window: Range<usize>,
    pub late_window: Range<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: VlmConfig::default(),
            dpo: DpoConfig { optimizer: Optimizer::adam(), ..DpoConfig::default() },
            train_scenes: 500,
            test_scenes: 100,
            scene_seed: 1,
            max_len: 96,
            t_max: 96,
            prompt: vec![BOS],
            early_window: 0..8,
            late_window: 64..96,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairPair {
    pub chair_i: f64,
    pub chair_s: f64,
}

impl ChairPair {
    fn of(c: &ChairCorpus) -> Self {
        Self { chair_i: c.chair_i().value, chair_s: c.chair_s().unwrap_or(0.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub early_mean: f64,
    pub late_mean: f64,
    pub reco_late_mean: f64,
    pub chair_base: ChairPair,
    pub chair_reco: ChairPair,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub hallucinating_train_captions: usize,
}

impl PipelineReport {
    /// Late-window over early-window mean without ReCo.
    pub fn fade_ratio(&self) -> f64 {
        self.late_mean / self.early_mean
    }

    /// Late-window mean with trained ReCo over the same without it.
    pub fn restore_ratio(&self) -> f64 {
        self.reco_late_mean / self.late_mean
    }

    pub fn chair_i_ratio(&self) -> f64 {
        self.chair_reco.chair_i / self.chair_base.chair_i
    }
}

pub struct PipelineRun {
    pub report: PipelineReport,
    pub params: ReCoParams,
    pub training: TrainOutcome,
    pub base_curve: InfluenceCurve,
    pub reco_curve: InfluenceCurve,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] VlmError),
    #[error(transparent)]
    Train(#[from] dpo::DpoError),
    #[error(transparent)]
    Diagnostics(#[from] diagnostics::DiagnosticsError),
    #[error(transparent)]
    Binder(#[from] crate::binder::BinderError),
    #[error("window {0:?} has no steps")]
    EmptyWindow(Range<usize>),
}

/// Build the model, sample disjoint train and test scenes, train ReCo on
/// the training captions, and compare curves and CHAIR on the test scenes.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    run_pipeline_with_model(&ToyVlm::build(cfg.model.clone())?, cfg)
}

/// As [`run_pipeline`] with a prebuilt model; `cfg.model` only sizes the
/// scene sampler and must describe `model`.
pub fn run_pipeline_with_model(model: &ToyVlm, cfg: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    let all = sample_scenes(cfg.train_scenes + cfg.test_scenes, cfg.model.n_obj, cfg.scene_seed);
    let (train_scenes, test_scenes) = all.split_at(cfg.train_scenes);

    let records = preference_records(model, train_scenes, &cfg.prompt, &CaptionSettings::greedy(cfg.max_len))?;
    let hallucinating = records
        .iter()
        .zip(train_scenes)
        .filter(|((_, caption), scene)| !caption_eval(&cfg.model, caption, scene).hallucinated().is_empty())
        .count();
    let quads = records.iter().map(|(r, _)| PreferenceQuad::from_record(r)).collect::<Result<Vec<_>, _>>()?;
    let init = ReCoParams::identity_init(cfg.model.d)?;
    let training = dpo::train(model.head(), &quads, &cfg.dpo, &init)?;
    let params = training.params.clone();

    let base_curve = diagnostics::influence_curve(model, test_scenes, &cfg.prompt, cfg.t_max, None)?;
    let reco_curve = diagnostics::influence_curve(model, test_scenes, &cfg.prompt, cfg.t_max, Some(&params))?;
    let window = |c: &InfluenceCurve, w: &Range<usize>| c.window_mean(w.clone()).ok_or_else(|| PipelineError::EmptyWindow(w.clone()));

    let base_caps = captions(model, test_scenes, &cfg.prompt, cfg.max_len, None)?;
    let reco_caps = captions(model, test_scenes, &cfg.prompt, cfg.max_len, Some(&params))?;

    let report = PipelineReport {
        early_mean: window(&base_curve, &cfg.early_window)?,
        late_mean: window(&base_curve, &cfg.late_window)?,
        reco_late_mean: window(&reco_curve, &cfg.late_window)?,
        chair_base: ChairPair::of(&chair_corpus(&cfg.model, test_scenes, &base_caps)),
        chair_reco: ChairPair::of(&chair_corpus(&cfg.model, test_scenes, &reco_caps)),
        initial_loss: training.initial_loss,
        epoch_losses: training.epoch_losses.clone(),
        hallucinating_train_captions: hallucinating,
    };
    Ok(PipelineRun { report, params, training, base_curve, reco_curve })
}

/// Distinct object ids mentioned anywhere in a caption.
pub fn mentioned_objects(config: &VlmConfig, tokens: &[u32]) -> BTreeSet<u32> {
    let range = object_range(config);
    tokens.iter().filter(|w| range.contains(w)).map(|w| w - range.start).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(objs: &[u32]) -> SceneSpec {
        SceneSpec::new(objs.iter().copied(), 0).unwrap()
    }

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = sample_scenes(200, 16, 9);
        assert_eq!(a, sample_scenes(200, 16, 9));
        assert_ne!(a, sample_scenes(200, 16, 10));
        for s in &a {
            assert!((2..=4).contains(&s.present_objects.len()));
            assert!(s.present_objects.iter().all(|&o| o < 16));
        }
        let sizes: BTreeSet<usize> = a.iter().map(|s| s.present_objects.len()).collect();
        assert_eq!(sizes, BTreeSet::from([2, 3, 4]));
        assert!(sample_scenes(5, 1, 0).iter().all(|s| s.present_objects.len() == 1));
    }

    #[test]
    fn hallucinations_are_replaced_round_robin() {
        let cfg = VlmConfig::default();
        let s = scene(&[1, 5]);
        // Objects 1 (present), 7 (absent), 9 (absent), then period and EOS.
        let caption = [5, 11, 13, PERIOD, 30, 13, EOS];
        let (chosen, rejected) = preference_answers(&cfg, &caption, &s);
        assert_eq!(rejected, caption);
        assert_eq!(chosen, vec![5, 5, 9, PERIOD, 30, 5, EOS]);
    }

    #[test]
    fn clean_captions_get_a_corrupted_rejection() {
        let cfg = VlmConfig { n_obj: 4, vocab_size: 12, ..VlmConfig::default() };
        let s = scene(&[0, 2]);
        let caption = [4, 6, PERIOD, 10, EOS];
        let (chosen, rejected) = preference_answers(&cfg, &caption, &s);
        assert_eq!(chosen, caption);
        // Absent objects are 1 and 3; position i takes absent[i % 2].
        assert_eq!(rejected, vec![5, 7, PERIOD, 10, EOS]);
    }

    #[test]
    fn record_states_line_up_with_tokens() {
        let model = ToyVlm::build(VlmConfig::default()).unwrap();
        let s = sample_scenes(1, 16, 3).remove(0);
        let (rec, caption) = preference_record(&model, &s, &[BOS], &CaptionSettings::greedy(24), 7).unwrap();
        assert_eq!(rec.example_id, "scene-00007");
        rec.validate().unwrap();
        assert_eq!(rec.prompt.token_ids, vec![BOS]);
        assert_eq!(rec.image_token_count(), 8);
        // Both answers start from the state after the prompt, which is also
        // the caption's first state.
        let gen = model.generate(&s, &[BOS], 24, None, DecodeMode::Greedy).unwrap();
        assert_eq!(caption, gen.tokens);
        let first = to_f32(&gen.trace.hidden_states[0]);
        assert_eq!(rec.chosen.hidden_states[0], first);
        assert_eq!(rec.rejected.hidden_states[0], first);
    }

    #[test]
    fn chair_of_captions() {
        let cfg = VlmConfig::default();
        let scenes = vec![scene(&[0, 1]), scene(&[2])];
        let caps = vec![vec![4, 5, PERIOD, 6, EOS], vec![6, PERIOD, EOS]];
        let c = chair_corpus(&cfg, &scenes, &caps);
        assert_eq!((c.mentioned, c.hallucinated, c.sentences, c.hallucinated_sentences), (4, 1, 3, 1));
        assert_eq!(mentioned_objects(&cfg, &caps[0]), BTreeSet::from([0, 1, 2]));
    }
}
