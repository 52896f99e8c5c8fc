//! Mean-teacher training loop with judge-gated pseudo-labels.
//!
//! Each step trains the student on a labeled batch (L1 to ground truth) and
//! an unlabeled batch (pseudo-label, weather-prompt, semantics and feature
//! terms), then moves the teacher towards the student by EMA. Every
//! `assessment_interval` steps the teacher's predictions on the unlabeled
//! batch compete with the stored pseudo-labels under the round's online judge.
//! Between rounds the whole ensemble re-checks the database, prompts are
//! refitted and descriptions of changed images are rebuilt.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::assessment::{vlm_vis, Assessor, ExpertScoreTable};
use crate::backends::{Embedding, FeatureExtractor, JointEncoder, RatingBackend, Registry};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{Image, ImageSample, LabeledPair, UnlabeledSet, WeatherTag};
use crate::model::{Adam, RestorationModel, ARCHITECTURE_ID};
use crate::objectives::{dual_target_feat_loss_grad, l1_loss, total_loss, LossBreakdown, LossComponents};
use crate::pseudodb::{CandidateSet, LabelSource, PseudoLabelDb};
use crate::rng::{stream_rng, DetRng, RngState, Stream};
use crate::semantics::{sem_loss_grad, DescribeContext, IclExampleSet, PairStore, Validator};
use crate::weatherprompt::{init_prompts, train_prompts, wpl_loss_grad, PromptEmbeddings, WeatherPrompts};

/// `θ_t ← α·θ_t + (1 − α)·θ_s`, element-wise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], decay: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Domain(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Domain(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = decay * *t + (1.0 - decay) * s;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub labeled: Vec<LabeledPair>,
    pub unlabeled: UnlabeledSet,
    pub candidates: BTreeMap<String, CandidateSet>,
    /// Stage-one reference images per weather class.
    pub prompt_refs: BTreeMap<WeatherTag, Vec<ImageSample>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub round: u32,
    pub loss: LossBreakdown,
    pub replaced: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub online_expert: String,
    pub online_replacements: usize,
    pub reassess_replacements: usize,
    pub prompt_loss: Option<(f64, f64)>,
    pub descriptions_regenerated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean ensemble score of the stored labels right after initialization.
    pub db_score_init: f64,
    /// Same, after the final round boundary.
    pub db_score_final: f64,
    /// Mean VLM-Vis of the raw unlabeled inputs and of the final model's
    /// restorations, normalized over both sets together.
    pub vlm_vis_before: f64,
    pub vlm_vis_after: f64,
    pub rounds: Vec<RoundSummary>,
}

/// Everything that changes during training; checkpoints store exactly this.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: RestorationModel,
    pub teacher: RestorationModel,
    pub optimizer: Adam,
    pub round: u32,
    /// Steps completed in the current round.
    pub round_iteration: u64,
    /// Steps completed overall.
    pub iteration: u64,
    pub db: PseudoLabelDb,
    pub prompts: Option<WeatherPrompts>,
    pub pairs: PairStore,
    pub labeled_rng: DetRng,
    pub unlabeled_rng: DetRng,
    pub log: Vec<StepRecord>,
    pub rounds: Vec<RoundSummary>,
    pub db_score_init: f64,
    /// True once the boundary of `round` has run.
    pub boundary_done: bool,
}

impl TrainState {
    pub fn online_expert<'a>(&self, experts: &'a [Arc<dyn RatingBackend>]) -> &'a Arc<dyn RatingBackend> {
        &experts[self.round as usize % experts.len()]
    }

    /// The final restoration model.
    pub fn model(&self) -> &RestorationModel {
        &self.teacher
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub data: Datasets,
    pub registry: Registry,
    pub assessor: Assessor,
    pub exec: Exec,
    pub icl: IclExampleSet,
    pub validator: Validator,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many total steps (leaving a checkpoint); for testing resume.
    pub stop_after: Option<u64>,
    /// Start from this database instead of assessing the candidates.
    pub initial_db: Option<PseudoLabelDb>,
}

struct UnlabeledTerms {
    ps: f64,
    wpl: f64,
    sem: Option<f64>,
    feat: f64,
    grad: Vec<f64>,
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn add_scaled(acc: &mut [f64], g: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += s * b;
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Datasets, registry: Registry) -> Result<Self> {
        config.validate()?;
        let assessor = Assessor::new(config.rating_template.clone())?.with_retries(config.assessment_retries);
        let validator = Validator::default().with_threshold(config.overlap_threshold);
        let trainer = Self {
            config,
            data,
            registry,
            assessor,
            exec: Exec::default(),
            icl: IclExampleSet::default_set(),
            validator,
            checkpoint_dir: None,
            stop_after: None,
            initial_db: None,
        };
        trainer.check()?;
        Ok(trainer)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self.assessor = self.assessor.with_exec(exec);
        self
    }

    /// Uses an existing database; it must hold a record for every unlabeled image.
    pub fn with_initial_db(mut self, db: PseudoLabelDb) -> Result<Self> {
        let missing: Vec<String> = self
            .data
            .unlabeled
            .items()
            .iter()
            .filter(|s| db.get(&s.id).is_none())
            .map(|s| s.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingCandidates(missing));
        }
        self.initial_db = Some(db);
        Ok(self)
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Preconditions on data and backends, checked before any work.
    pub fn check(&self) -> Result<()> {
        let w = &self.config.loss_weights;
        if self.data.labeled.is_empty() {
            return Err(Error::Validation("labeled set is empty".into()));
        }
        if self.data.unlabeled.is_empty() {
            return Err(Error::Validation("unlabeled set is empty".into()));
        }
        if self.registry.rating().is_empty() {
            return Err(Error::Registry("at least one rating expert is required".into()));
        }
        let needs_encoder = w.w2 > 0.0 || w.w3 > 0.0;
        if needs_encoder {
            let enc = self
                .registry
                .encoder()
                .ok_or_else(|| Error::Registry("w2/w3 > 0 need a joint encoder".into()))?;
            let probe = &self.data.unlabeled.items()[0];
            let emb = enc.embed_image(probe)?;
            if enc.image_vjp(probe, emb.values()).is_none() {
                return Err(Error::config("w2", "the encoder's image tower is not differentiable"));
            }
            if w.w2 > 0.0 {
                for tag in WeatherTag::ALL {
                    if self.data.prompt_refs.get(&tag).is_none_or(Vec::is_empty) {
                        return Err(Error::Training(format!("no prompt reference images for `{}`", tag.as_str())));
                    }
                }
            }
        }
        if w.w3 > 0.0 && (self.registry.caption().is_none() || self.registry.rewrite().is_none()) {
            return Err(Error::Registry("w3 > 0 needs caption and rewrite backends".into()));
        }
        if w.w4 > 0.0 {
            let fx = self
                .registry
                .features()
                .ok_or_else(|| Error::Registry("w4 > 0 needs a feature extractor".into()))?;
            let probe = &self.data.unlabeled.items()[0];
            let f = fx.extract(probe)?;
            if fx.vjp(probe, f.as_slice()).is_none() {
                return Err(Error::config("w4", "the feature extractor is not differentiable"));
            }
        }
        Ok(())
    }

    fn experts(&self) -> &[Arc<dyn RatingBackend>] {
        self.registry.rating()
    }

    fn encoder(&self) -> Option<&dyn JointEncoder> {
        self.registry.encoder().map(|e| e.as_ref())
    }

    fn describe_context(&self) -> Option<DescribeContext<'_>> {
        Some(DescribeContext {
            caption: self.registry.caption()?.as_ref(),
            rewrite: self.registry.rewrite()?.as_ref(),
            encoder: self.encoder()?,
            icl: &self.icl,
            validator: &self.validator,
            retries: self.config.description_retries,
        })
    }

    fn uses_prompts(&self) -> bool {
        self.config.loss_weights.w2 > 0.0
    }

    fn uses_pairs(&self) -> bool {
        self.config.loss_weights.w3 > 0.0
    }

    fn label_versions(db: &PseudoLabelDb) -> BTreeMap<String, u64> {
        db.records().iter().map(|(k, r)| (k.clone(), r.version)).collect()
    }

    fn ensemble_mean(&self, db: &PseudoLabelDb) -> Result<f64> {
        let samples: Vec<ImageSample> = self
            .data
            .unlabeled
            .items()
            .iter()
            .map(|s| s.with_pixels(db.get(&s.id).expect("record for every image").label.clone()))
            .collect::<Result<_>>()?;
        let table = self.assessor.ensemble(&samples, self.experts())?;
        Ok(table.rows().keys().filter_map(|id| table.mean_score(id)).sum::<f64>() / table.rows().len() as f64)
    }

    fn initial_labels(&self) -> Result<PseudoLabelDb> {
        let candidates = if self.config.candidate_init {
            self.data.candidates.clone()
        } else {
            self.data
                .unlabeled
                .items()
                .iter()
                .map(|s| {
                    (
                        s.id.clone(),
                        CandidateSet {
                            image_id: s.id.clone(),
                            candidates: vec![("identity".to_string(), s.pixels.clone())],
                        },
                    )
                })
                .collect()
        };
        PseudoLabelDb::init(&self.data.unlabeled, &candidates, self.experts(), &self.assessor)
    }

    /// Pseudo-label initialization, prompt fitting and description building.
    pub fn init_state(&self) -> Result<TrainState> {
        let seed = self.config.seed;
        let student = RestorationModel::init(&mut stream_rng(seed, Stream::Init));
        let teacher = student.clone();
        let optimizer = Adam::new(self.config.learning_rate, student.params().len());

        let db = match &self.initial_db {
            Some(db) => db.clone(),
            None => self.initial_labels()?,
        };
        let db_score_init = self.ensemble_mean(&db)?;

        let prompts = if self.uses_prompts() {
            let enc = self.encoder().expect("checked");
            let init = init_prompts(
                self.config.n_ctx,
                enc,
                enc.prompt_width(),
                &mut stream_rng(seed, Stream::Prompts),
            )?;
            let fit = train_prompts(
                &init,
                &self.data.prompt_refs,
                enc,
                self.config.prompt_epochs,
                self.config.prompt_lr,
                self.config.temperature,
            )?;
            Some(fit.prompts)
        } else {
            None
        };

        let mut pairs = PairStore::default();
        if self.uses_pairs() {
            let ctx = self.describe_context().expect("checked");
            pairs.refresh(self.data.unlabeled.items(), &Self::label_versions(&db), &ctx, self.exec)?;
        }

        Ok(TrainState {
            student,
            teacher,
            optimizer,
            round: 0,
            round_iteration: 0,
            iteration: 0,
            db,
            prompts,
            pairs,
            labeled_rng: stream_rng(seed, Stream::LabeledBatches),
            unlabeled_rng: stream_rng(seed, Stream::UnlabeledBatches),
            log: Vec::new(),
            rounds: Vec::new(),
            db_score_init,
            boundary_done: false,
        })
    }

    fn labeled_step(&self, state: &TrainState, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        let pairs: Vec<&LabeledPair> = batch.iter().map(|&i| &self.data.labeled[i]).collect();
        let n = pairs.len() as f64;
        let results = self.exec.map(&pairs, |pair| -> Result<(f64, Vec<f64>)> {
            let tape = state.student.forward_tape(&pair.degraded.pixels)?;
            let out = tape.output()?;
            let (loss, mut g) = l1_loss(out.as_slice(), pair.clean.pixels.as_slice())?;
            g.iter_mut().for_each(|v| *v /= n);
            Ok((loss, state.student.backward(&tape, &g)?))
        });
        let mut grad = vec![0.0; state.student.params().len()];
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l / n;
            add_into(&mut grad, &g);
        }
        Ok((loss, grad))
    }

    #[allow(clippy::too_many_arguments)]
    fn unlabeled_terms(
        &self,
        state: &TrainState,
        sample: &ImageSample,
        prompts: Option<&PromptEmbeddings>,
        encoder: Option<&dyn JointEncoder>,
        features: Option<&dyn FeatureExtractor>,
        batch: f64,
        validated: f64,
    ) -> Result<UnlabeledTerms> {
        let w = &self.config.loss_weights;
        let t = self.config.temperature;
        let tape = state.student.forward_tape(&sample.pixels)?;
        let restored = sample.with_pixels(tape.output()?)?;
        let label = &state
            .db
            .get(&sample.id)
            .ok_or_else(|| Error::UnknownImage(sample.id.clone()))?
            .label;
        let mut pix = vec![0.0; restored.pixels.as_slice().len()];

        let (ps, g) = l1_loss(restored.pixels.as_slice(), label.as_slice())?;
        add_scaled(&mut pix, &g, w.w1 / batch);

        let mut wpl = 0.0;
        let mut sem = None;
        let emb: Option<Embedding> = match encoder {
            Some(enc) if w.w2 > 0.0 || w.w3 > 0.0 => Some(enc.embed_image(&restored)?),
            _ => None,
        };
        let mut emb_grad = emb.as_ref().map(|e| vec![0.0; e.dim()]);
        if let (Some(e), Some(p), Some(eg)) = (&emb, prompts, emb_grad.as_mut()) {
            let (l, g) = wpl_loss_grad(e, p, t)?;
            wpl = l;
            add_scaled(eg, &g, w.w2 / batch);
        }
        if let (Some(e), Some(eg)) = (&emb, emb_grad.as_mut()) {
            if let Some(pair) = state.pairs.get(&sample.id).filter(|p| p.validated && w.w3 > 0.0) {
                let (l, g) = sem_loss_grad(e, pair, t)?;
                sem = Some(l);
                add_scaled(eg, &g, w.w3 / validated);
            }
        }
        if let (Some(enc), Some(eg)) = (encoder, &emb_grad) {
            let g = enc.image_vjp(&restored, eg).expect("checked differentiable")?;
            add_into(&mut pix, &g);
        }

        let mut feat = 0.0;
        if let Some(fx) = features.filter(|_| w.w4 > 0.0) {
            let pred = fx.extract(&restored)?;
            let pseudo = fx.extract(&sample.with_pixels(label.clone())?)?;
            let input = fx.extract(sample)?;
            let (l, g) = dual_target_feat_loss_grad(&pred, &pseudo, &input)?;
            feat = l;
            let gp = fx.vjp(&restored, &g).expect("checked differentiable")?;
            add_scaled(&mut pix, &gp, w.w4 / batch);
        }

        let grad = state.student.backward(&tape, &pix)?;
        Ok(UnlabeledTerms { ps, wpl, sem, feat, grad })
    }

    /// One optimizer step; see the module docs for the sequence.
    pub fn train_step(&self, state: &mut TrainState) -> Result<StepRecord> {
        let cfg = &self.config;
        let n_l = self.data.labeled.len();
        let n_u = self.data.unlabeled.len();
        let lb = index::sample(&mut state.labeled_rng, n_l, cfg.batch_labeled.min(n_l)).into_vec();
        let ub = index::sample(&mut state.unlabeled_rng, n_u, cfg.batch_unlabeled.min(n_u)).into_vec();
        let unlabeled: Vec<&ImageSample> = ub.iter().map(|&i| &self.data.unlabeled.items()[i]).collect();

        let (sup, mut grad) = self.labeled_step(state, &lb)?;
        let mut c = LossComponents {
            sup,
            ..Default::default()
        };

        if !cfg.loss_weights.is_supervised_only() {
            let prompts = match &state.prompts {
                Some(p) => Some(p.embed(self.encoder().expect("checked"))?),
                None => None,
            };
            let encoder = self.encoder();
            let features = self.registry.features().map(|f| f.as_ref());
            let validated = unlabeled
                .iter()
                .filter(|s| state.pairs.get(&s.id).is_some_and(|p| p.validated))
                .count();
            let batch = unlabeled.len() as f64;
            let st: &TrainState = state;
            let results = self.exec.map(&unlabeled, |s| {
                self.unlabeled_terms(st, s, prompts.as_ref(), encoder, features, batch, validated.max(1) as f64)
            });
            for r in results {
                let t = r?;
                c.ps += t.ps / batch;
                c.wpl += t.wpl / batch;
                c.feat += t.feat / batch;
                if let Some(s) = t.sem {
                    c.sem += s / validated as f64;
                }
                add_into(&mut grad, &t.grad);
            }
        }

        let loss = total_loss(c, &cfg.loss_weights).map_err(|e| match e {
            Error::Divergence { breakdown, .. } => Error::Divergence {
                iteration: Some(state.iteration),
                breakdown,
            },
            other => other,
        })?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: Some(state.iteration),
                breakdown: Box::new(loss),
            });
        }
        state.optimizer.update(state.student.params_mut(), &grad)?;
        ema_update(state.teacher.params_mut(), state.student.params(), cfg.ema_decay)?;

        let mut replaced = 0;
        if cfg.assessment_interval.is_due(state.iteration) {
            let preds = state
                .teacher
                .forward_batch(&unlabeled.iter().map(|s| &s.pixels).collect::<Vec<_>>(), self.exec)?;
            let judge = state.online_expert(self.experts()).clone();
            for (s, pred) in unlabeled.iter().zip(&preds) {
                let source = LabelSource::Teacher {
                    round: state.round,
                    iteration: state.iteration,
                };
                if cfg.vlm_updates {
                    replaced += usize::from(state.db.maybe_update(s, pred, judge.as_ref(), &self.assessor, source)?);
                } else {
                    state.db.force_replace(&s.id, pred, source)?;
                    replaced += 1;
                }
            }
        }

        let record = StepRecord {
            iteration: state.iteration,
            round: state.round,
            loss,
            replaced,
        };
        state.iteration += 1;
        state.round_iteration += 1;
        state.log.push(record.clone());
        Ok(record)
    }

    /// Ensemble re-assessment with teacher predictions, prompt refit and
    /// description refresh.
    fn round_boundary(&self, state: &mut TrainState) -> Result<RoundSummary> {
        let round = state.round;
        let online = state.online_expert(self.experts()).id().name.clone();
        let online_replacements = state
            .log
            .iter()
            .filter(|r| r.round == round)
            .map(|r| r.replaced)
            .sum();
        let mut summary = RoundSummary {
            round,
            online_expert: online,
            online_replacements,
            reassess_replacements: 0,
            prompt_loss: None,
            descriptions_regenerated: 0,
        };
        if self.config.vlm_updates {
            let inputs: Vec<&Image> = self.data.unlabeled.items().iter().map(|s| &s.pixels).collect();
            let preds = state.teacher.forward_batch(&inputs, self.exec)?;
            let fresh: BTreeMap<String, Image> = self
                .data
                .unlabeled
                .items()
                .iter()
                .zip(preds)
                .map(|(s, p)| (s.id.clone(), p))
                .collect();
            let iteration = state.iteration;
            let r = state.db.full_reassess(
                self.data.unlabeled.items(),
                &fresh,
                self.experts(),
                &self.assessor,
                |_| LabelSource::Teacher { round, iteration },
            )?;
            summary.reassess_replacements = r.replaced;
        }
        if self.config.round_refresh {
            if let Some(p) = &state.prompts {
                let fit = train_prompts(
                    p,
                    &self.data.prompt_refs,
                    self.encoder().expect("checked"),
                    self.config.prompt_epochs,
                    self.config.prompt_lr,
                    self.config.temperature,
                )?;
                summary.prompt_loss = Some((fit.losses[0], *fit.losses.last().expect("non-empty")));
                state.prompts = Some(fit.prompts);
            }
            if self.uses_pairs() {
                let ctx = self.describe_context().expect("checked");
                let r = state.pairs.refresh(
                    self.data.unlabeled.items(),
                    &Self::label_versions(&state.db),
                    &ctx,
                    self.exec,
                )?;
                summary.descriptions_regenerated = r.regenerated;
            }
        }
        Ok(summary)
    }

    fn checkpoint_due(&self, state: &TrainState) -> bool {
        self.checkpoint_dir.is_some() && state.iteration.is_multiple_of(self.config.checkpoint_interval)
    }

    fn save_checkpoint(&self, state: &TrainState) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            save_checkpoint(&dir.join(format!("step-{:08}", state.iteration)), state, &self.config)?;
        }
        Ok(())
    }

    /// Runs the remaining steps of the current round and its boundary.
    /// Returns `false` if stopped early by `stop_after`.
    pub fn run_round(&self, state: &mut TrainState) -> Result<bool> {
        while state.round_iteration < self.config.iterations_per_round {
            if self.stop_after.is_some_and(|n| state.iteration >= n) {
                self.save_checkpoint(state)?;
                return Ok(false);
            }
            self.train_step(state)?;
            if self.checkpoint_due(state) {
                self.save_checkpoint(state)?;
            }
        }
        if !state.boundary_done {
            let summary = self.round_boundary(state)?;
            log::info!(
                "round {} done: {} online and {} boundary replacements",
                summary.round,
                summary.online_replacements,
                summary.reassess_replacements
            );
            state.rounds.push(summary);
            state.boundary_done = true;
        }
        Ok(true)
    }

    /// Trains from `state` to the end of the schedule.
    pub fn run(&self, state: &mut TrainState) -> Result<Option<TrainReport>> {
        while state.round < self.config.rounds {
            if !self.run_round(state)? {
                return Ok(None);
            }
            if state.round + 1 < self.config.rounds {
                state.round += 1;
                state.round_iteration = 0;
                state.boundary_done = false;
            } else {
                break;
            }
        }
        self.save_checkpoint(state)?;
        Ok(Some(self.report(state)?))
    }

    pub fn report(&self, state: &TrainState) -> Result<TrainReport> {
        let inputs: Vec<&Image> = self.data.unlabeled.items().iter().map(|s| &s.pixels).collect();
        let outputs: Vec<ImageSample> = self
            .data
            .unlabeled
            .items()
            .iter()
            .zip(state.model().forward_batch(&inputs, self.exec)?)
            .map(|(s, p)| s.with_pixels(p))
            .collect::<Result<_>>()?;
        let before = self.assessor.ensemble(self.data.unlabeled.items(), self.experts())?;
        let after = self.assessor.ensemble(&outputs, self.experts())?;
        let (vlm_vis_before, vlm_vis_after) = paired_vlm_vis(&before, &after)?;
        Ok(TrainReport {
            db_score_init: state.db_score_init,
            db_score_final: self.ensemble_mean(&state.db)?,
            vlm_vis_before,
            vlm_vis_after,
            rounds: state.rounds.clone(),
        })
    }

    /// Initializes and trains to completion.
    pub fn run_training(&self) -> Result<(TrainState, TrainReport)> {
        let mut state = self.init_state()?;
        let report = self
            .run(&mut state)?
            .ok_or_else(|| Error::Training("stopped before the end of the schedule".into()))?;
        Ok((state, report))
    }
}

/// Mean VLM-Vis of two score tables over the same images, normalized jointly.
pub fn paired_vlm_vis(a: &ExpertScoreTable, b: &ExpertScoreTable) -> Result<(f64, f64)> {
    let merged = ExpertScoreTable::merged_with_prefix(&[("a/", a), ("b/", b)])?;
    let vis = vlm_vis(&merged)?;
    let mean = |prefix: &str| {
        let v: Vec<f64> = vis
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| *v)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok((mean("a/"), mean("b/")))
}

/// Plain supervised training with the same initialization and labeled batch
/// stream as [`Trainer`]; used as the reference baseline.
pub fn train_supervised(config: &TrainConfig, labeled: &[LabeledPair], exec: Exec) -> Result<RestorationModel> {
    if labeled.is_empty() {
        return Err(Error::Validation("labeled set is empty".into()));
    }
    let mut student = RestorationModel::init(&mut stream_rng(config.seed, Stream::Init));
    let mut teacher = student.clone();
    let mut adam = Adam::new(config.learning_rate, student.params().len());
    let mut rng = stream_rng(config.seed, Stream::LabeledBatches);
    let steps = config.iterations_per_round * u64::from(config.rounds);
    for _ in 0..steps {
        let batch = index::sample(&mut rng, labeled.len(), config.batch_labeled.min(labeled.len())).into_vec();
        let n = batch.len() as f64;
        let grads = exec.map(&batch, |&i| -> Result<Vec<f64>> {
            let pair = &labeled[i];
            let tape = student.forward_tape(&pair.degraded.pixels)?;
            let (_, mut g) = l1_loss(tape.output()?.as_slice(), pair.clean.pixels.as_slice())?;
            g.iter_mut().for_each(|v| *v /= n);
            student.backward(&tape, &g)
        });
        let mut grad = vec![0.0; student.params().len()];
        for g in grads {
            add_into(&mut grad, &g?);
        }
        adam.update(student.params_mut(), &grad)?;
        ema_update(teacher.params_mut(), student.params(), config.ema_decay)?;
    }
    Ok(teacher)
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// <dir>/state.json    counters, RNG positions, round summaries
// <dir>/student.bin   little-endian f64 parameters
// <dir>/teacher.bin
// <dir>/adam.bin      step count, then both moment vectors
// <dir>/prompts.txt   when prompts are in use
// <dir>/pairs.jsonl
// <dir>/log.jsonl     one StepRecord per line
// <dir>/db/           pseudo-label database

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    architecture_id: String,
    config: String,
    round: u32,
    round_iteration: u64,
    iteration: u64,
    labeled_rng: RngState,
    unlabeled_rng: RngState,
    rounds: Vec<RoundSummary>,
    db_score_init: f64,
    boundary_done: bool,
}

pub fn save_checkpoint(dir: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = tempfile::Builder::new().prefix(".ckpt").tempdir_in(parent)?;
    let t = tmp.path();
    let meta = CheckpointMeta {
        architecture_id: ARCHITECTURE_ID.to_string(),
        config: config.to_config_string(),
        round: state.round,
        round_iteration: state.round_iteration,
        iteration: state.iteration,
        labeled_rng: RngState::capture(&state.labeled_rng),
        unlabeled_rng: RngState::capture(&state.unlabeled_rng),
        rounds: state.rounds.clone(),
        db_score_init: state.db_score_init,
        boundary_done: state.boundary_done,
    };
    std::fs::write(t.join("state.json"), serde_json::to_string_pretty(&meta)?)?;
    std::fs::write(t.join("student.bin"), state.student.to_bytes())?;
    std::fs::write(t.join("teacher.bin"), state.teacher.to_bytes())?;
    std::fs::write(t.join("adam.bin"), state.optimizer.to_bytes())?;
    if let Some(p) = &state.prompts {
        std::fs::write(t.join("prompts.txt"), p.to_text())?;
    }
    std::fs::write(t.join("pairs.jsonl"), state.pairs.to_jsonl()?)?;
    let mut log = String::new();
    for r in &state.log {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    std::fs::write(t.join("log.jsonl"), log)?;
    state.db.save(&t.join("db"))?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    let kept = tmp.keep();
    std::fs::rename(&kept, dir)?;
    Ok(())
}

/// Restores a state written by [`save_checkpoint`]. Text embeddings of the
/// description pairs are recomputed with `encoder` when pairs are present.
pub fn load_checkpoint(dir: &Path, config: &TrainConfig, encoder: Option<&dyn JointEncoder>) -> Result<TrainState> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
    if meta.architecture_id != ARCHITECTURE_ID {
        return Err(Error::Validation(format!(
            "checkpoint architecture `{}` does not match `{ARCHITECTURE_ID}`",
            meta.architecture_id
        )));
    }
    if meta.config != config.to_config_string() {
        return Err(Error::config(
            "resume",
            format!("checkpoint {} was written with a different configuration", dir.display()),
        ));
    }
    let rng = |s: &RngState| {
        s.restore()
            .ok_or_else(|| Error::Codec("malformed RNG state in checkpoint".into()))
    };
    let prompts_path = dir.join("prompts.txt");
    let prompts = if prompts_path.exists() {
        Some(WeatherPrompts::from_text(&std::fs::read_to_string(prompts_path)?)?)
    } else {
        None
    };
    let pairs_text = std::fs::read_to_string(dir.join("pairs.jsonl"))?;
    let pairs = match encoder {
        Some(enc) => PairStore::from_jsonl(&pairs_text, enc)?,
        None if pairs_text.trim().is_empty() => PairStore::default(),
        None => return Err(Error::Registry("checkpoint has description pairs but no encoder is registered".into())),
    };
    let log = std::fs::read_to_string(dir.join("log.jsonl"))?
        .lines()
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
    Ok(TrainState {
        student: RestorationModel::from_bytes(&std::fs::read(dir.join("student.bin"))?)?,
        teacher: RestorationModel::from_bytes(&std::fs::read(dir.join("teacher.bin"))?)?,
        optimizer: Adam::from_bytes(config.learning_rate, &std::fs::read(dir.join("adam.bin"))?)?,
        round: meta.round,
        round_iteration: meta.round_iteration,
        iteration: meta.iteration,
        db: PseudoLabelDb::load(&dir.join("db"))?,
        prompts,
        pairs,
        labeled_rng: rng(&meta.labeled_rng)?,
        unlabeled_rng: rng(&meta.unlabeled_rng)?,
        log,
        rounds: meta.rounds,
        db_score_init: meta.db_score_init,
        boundary_done: meta.boundary_done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ema_limits_and_formula() {
        let mut t = vec![1.0, 2.0];
        ema_update(&mut t, &[5.0, 6.0], 0.0).unwrap();
        assert_eq!(t, vec![5.0, 6.0]);
        let mut t = vec![1.0, 2.0];
        ema_update(&mut t, &[5.0, 6.0], 1.0).unwrap();
        assert_eq!(t, vec![1.0, 2.0]);
        let mut t = vec![1.0];
        ema_update(&mut t, &[0.0], 0.9).unwrap();
        assert_relative_eq!(t[0], 0.9, epsilon = 1e-15);
        assert!(ema_update(&mut t, &[0.0, 1.0], 0.5).is_err());
    }
}
