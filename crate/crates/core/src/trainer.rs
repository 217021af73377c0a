//! Two-stage training. Stage 1 aligns the projector with the frozen LM on
//! scene descriptions; stage 2 trains projector and LoRA adapters on QA.
//! Also the evaluation loop and the two ablation drivers.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use bella_numcore::{AdamW, ParamGroup, ParamStore, SplitMix64, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::bevenc::FrozenEncoderParams;
use crate::config::RunConfig;
use crate::dataset::{BevCache, Dataset, Split};
use crate::error::{BellaError, Result};
use crate::evalmetrics::EvalReport;
use crate::langdata::{Vocab, SEP_WORD};
use crate::lm::{
    assemble_prompt, check_vocab, forward, generate, init_lora, question_prefix, LoraConfig, MicroLm, PromptAssembly,
    Stage, LM_PREFIX, LORA_PREFIX,
};
use crate::lmtrain::build_lm;
use crate::params::Bound;
use crate::projector::{self, project, project_value, ProjectorConfig, ProjectorVariant};
use crate::scenesim::Category;

/// One teacher-forced sequence tied to the frame whose grid it sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub episode_id: u64,
    pub frame_index: usize,
    pub assembly: PromptAssembly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub step: usize,
    pub epoch: usize,
    pub stage: String,
    pub loss: f64,
    pub grad_norms: BTreeMap<String, f64>,
    /// Seconds since the stage started.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecksumRecord {
    pub boundary: String,
    pub bevenc: String,
    pub lm: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub first_batch_loss: f64,
    pub epoch_mean_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were kept (lowest validation loss).
    pub best_epoch: usize,
    pub wall_clock_s: f64,
    pub checksums: Vec<ChecksumRecord>,
    pub optimizer_params: Vec<String>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub events: Vec<TrainEvent>,
}

impl TrainLog {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.into(),
            first_batch_loss: f64::NAN,
            epoch_mean_loss: Vec::new(),
            val_loss: Vec::new(),
            best_epoch: 0,
            wall_clock_s: 0.0,
            checksums: Vec::new(),
            optimizer_params: Vec::new(),
            warnings: Vec::new(),
            events: Vec::new(),
        }
    }

    /// True when every recorded boundary carries the same frozen checksums.
    pub fn frozen_constant(&self) -> bool {
        self.checksums
            .windows(2)
            .all(|w| w[0].bevenc == w[1].bevenc && w[0].lm == w[1].lm)
    }
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
    }
}

/// A single QA prediction from [`Experiment::evaluate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub episode_id: u64,
    pub frame_index: usize,
    pub category: Category,
    pub question: String,
    pub answer: String,
    pub prediction: String,
}

/// Shared state of a run: corpus, split, cached encoder outputs and the
/// frozen language model.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub data: Arc<Dataset>,
    pub split: Split,
    pub encoder: FrozenEncoderParams,
    pub bev: Arc<BevCache>,
    pub lm: Arc<MicroLm>,
    pub lora_cfg: LoraConfig,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Experiment {
    /// Builds (and, if configured, trains) the language model first.
    pub fn new(cfg: RunConfig, data: Arc<Dataset>) -> Result<Self> {
        cfg.validate()?;
        let split = Split::new(&cfg.data, data.episodes.iter().map(|e| e.episode_id));
        let (lm, _) = build_lm(&cfg, &data, &split.train)?;
        Self::with_lm(cfg, data, lm)
    }

    /// Uses an already built language model (e.g. from a checkpoint).
    pub fn with_lm(cfg: RunConfig, data: Arc<Dataset>, lm: MicroLm) -> Result<Self> {
        cfg.validate()?;
        let lm_cfg = cfg.model.lm_config(data.vocab.len())?;
        check_vocab(&lm_cfg, &data.vocab)?;
        if lm.cfg != lm_cfg {
            return Err(BellaError::Config(format!(
                "language model {:?} does not match the configured {:?}",
                lm.cfg, lm_cfg
            )));
        }
        let split = Split::new(&cfg.data, data.episodes.iter().map(|e| e.episode_id));
        let encoder = FrozenEncoderParams::canonical();
        let keys = data
            .pretrain
            .iter()
            .map(|s| (s.episode_id, s.frame_index))
            .chain(data.qa.iter().map(|q| (q.episode_id, q.frame_index)));
        let bev = BevCache::build(&data, keys, &encoder)?;
        Ok(Self {
            lora_cfg: cfg.model.lora(),
            cfg,
            data,
            split,
            encoder,
            bev: Arc::new(bev),
            lm: Arc::new(lm),
            verbose: false,
        })
    }

    /// Same corpus and frozen parts, different settings for the trainable
    /// side.
    pub fn with_settings(&self, seed: u64, variant: ProjectorVariant) -> Self {
        let mut e = self.clone();
        e.cfg.train.seed = seed;
        e.cfg.model.projector = variant;
        e
    }

    pub fn projector_config(&self) -> ProjectorConfig {
        ProjectorConfig {
            variant: self.cfg.model.projector,
            d: self.cfg.model.d_model,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.data.vocab
    }

    fn sep(&self) -> usize {
        self.vocab().id(SEP_WORD).expect("separator in vocabulary")
    }

    pub fn pretrain_samples(&self, episodes: &BTreeSet<u64>) -> Result<Vec<Sample>> {
        let max = self.lm.cfg.max_len;
        self.data
            .pretrain
            .iter()
            .filter(|s| episodes.contains(&s.episode_id))
            .map(|s| {
                let y = self.vocab().encode(&s.description)?;
                Ok(Sample {
                    episode_id: s.episode_id,
                    frame_index: s.frame_index,
                    assembly: assemble_prompt(Stage::Pretrain, &[], &y, self.sep(), max)?,
                })
            })
            .collect()
    }

    pub fn finetune_samples(&self, episodes: &BTreeSet<u64>) -> Result<Vec<Sample>> {
        let max = self.lm.cfg.max_len;
        self.data
            .qa
            .iter()
            .filter(|q| episodes.contains(&q.episode_id))
            .map(|q| {
                let question = self.vocab().encode(&q.question)?;
                let answer = self.vocab().encode(&q.gold_answer)?;
                Ok(Sample {
                    episode_id: q.episode_id,
                    frame_index: q.frame_index,
                    assembly: assemble_prompt(Stage::Finetune, &question, &answer, self.sep(), max)?,
                })
            })
            .collect()
    }

    fn checksum_record(&self, boundary: &str) -> ChecksumRecord {
        ChecksumRecord {
            boundary: boundary.into(),
            bevenc: self.encoder.checksum(),
            lm: self.lm.checksum(),
        }
    }

    /// Sum over the batch of per-sample CE sums, divided by the batch's
    /// target count.
    fn batch_loss(&self, tape: &mut Tape<'_, f32>, p: &Bound, stage: Stage, batch: &[&Sample]) -> Result<Var> {
        let total: usize = batch.iter().map(|s| s.assembly.num_targets()).sum();
        let scale = 1.0 / total.max(1) as f32;
        let pcfg = self.projector_config();
        let lora = (stage == Stage::Finetune).then_some((p, &self.lora_cfg));
        let mut acc: Option<Var> = None;
        for s in batch {
            let bev = self.bev.get(s.episode_id, s.frame_index)?;
            let e = project(tape, p, &pcfg, bev)?;
            let logits = forward(tape, &self.lm.cfg, p, lora, &s.assembly.ids, e)?;
            let l = tape.cross_entropy(logits, &s.assembly.targets(), scale)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, l)?,
                None => l,
            });
        }
        acc.ok_or_else(|| BellaError::Dataset("empty batch".into()))
    }

    /// Mean per-target loss over `samples` without updates.
    pub fn mean_loss(&self, trainable: &ParamStore, stage: Stage, samples: &[Sample]) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0;
        for s in samples {
            let mut tape = Tape::new();
            let mut p = Bound::bind(&mut tape, &self.lm.params);
            p.extend_from(&mut tape, trainable);
            let l = self.batch_loss(&mut tape, &p, stage, &[s])?;
            let k = s.assembly.num_targets();
            sum += tape.value(l).data()[0] as f64 * k as f64;
            n += k;
        }
        Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stage(
        &self,
        stage: Stage,
        store: &mut ParamStore,
        groups: Vec<ParamGroup>,
        train: &[Sample],
        val: &[Sample],
        epochs: usize,
        log: &mut TrainLog,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(BellaError::Dataset(format!("no {} samples", stage_name(stage))));
        }
        let t0 = Instant::now();
        let tc = &self.cfg.train;
        let mut opt = AdamW::new(groups.clone(), tc.optimizer(), store)?;
        log.optimizer_params = opt.param_names().map(str::to_string).collect();
        let group_of: BTreeMap<&str, &str> = groups
            .iter()
            .flat_map(|g| g.params.iter().map(move |p| (p.as_str(), g.name.as_str())))
            .collect();
        let mut best: Option<(f64, usize, ParamStore)> = None;
        let mut step = 0;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..epochs {
            SplitMix64::derive(tc.seed, &format!("shuffle/{}/{epoch}", stage_name(stage))).shuffle(&mut order);
            let mut sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(tc.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
                let (loss, grads) = {
                    let mut tape = Tape::new();
                    let mut p = Bound::bind(&mut tape, &self.lm.params);
                    let lm_vars: Vec<(String, Var)> = p.iter().map(|(n, v)| (n.to_string(), v)).collect();
                    let tb = Bound::bind(&mut tape, store);
                    for (n, v) in tb.iter() {
                        p.insert(n, v);
                    }
                    let l = self.batch_loss(&mut tape, &p, stage, &batch)?;
                    let loss = tape.value(l).data()[0] as f64;
                    let mut g = tape.backward(l)?;
                    let mut grads = BTreeMap::new();
                    let mut norms: BTreeMap<String, f64> = BTreeMap::new();
                    for (n, v) in tb.iter() {
                        if let Some(t) = g.take(v) {
                            *norms.entry(group_of[n].to_string()).or_default() += sq_norm(&t);
                            grads.insert(n.to_string(), t);
                        }
                    }
                    let mut lm_sq = 0.0;
                    for (_, v) in &lm_vars {
                        if let Some(t) = g.get(*v) {
                            lm_sq += sq_norm(t);
                        }
                    }
                    norms.insert("lm".into(), lm_sq);
                    for g in &groups {
                        norms.entry(g.name.clone()).or_default();
                    }
                    let norms = norms.into_iter().map(|(k, v)| (k, v.sqrt())).collect();
                    ((loss, norms), grads)
                };
                let (loss, grad_norms) = loss;
                if step == 0 {
                    log.first_batch_loss = loss;
                }
                opt.step(store, &grads)?;
                log.events.push(TrainEvent {
                    step,
                    epoch,
                    stage: stage_name(stage).into(),
                    loss,
                    grad_norms,
                    timestamp: t0.elapsed().as_secs_f64(),
                });
                sum += loss;
                batches += 1;
                step += 1;
            }
            let mean = sum / batches as f64;
            log.epoch_mean_loss.push(mean);
            let v = if val.is_empty() {
                mean
            } else {
                self.mean_loss(store, stage, val)?
            };
            log.val_loss.push(v);
            if self.verbose {
                eprintln!(
                    "[{}] seed {} {} epoch {epoch}: train {mean:.4} val {v:.4} ({:.1}s)",
                    stage_name(stage),
                    tc.seed,
                    self.cfg.model.projector,
                    t0.elapsed().as_secs_f64()
                );
            }
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, epoch, store.clone()));
            }
        }
        if let Some((_, epoch, snapshot)) = best {
            log.best_epoch = epoch;
            *store = snapshot;
        }
        log.wall_clock_s = t0.elapsed().as_secs_f64();
        Ok(())
    }

    fn fresh_projector(&self) -> ParamStore {
        projector::init(
            &self.projector_config(),
            SplitMix64::derive(self.cfg.train.seed, "projector").next_u64(),
        )
    }

    /// Stage 1: projector only. Returns the projector parameters.
    pub fn pretrain(&self) -> Result<(ParamStore, TrainLog)> {
        let mut log = TrainLog::new("pretrain");
        log.checksums.push(self.checksum_record("pretrain/start"));
        let train = self.pretrain_samples(&self.split.train)?;
        let val = self.pretrain_samples(&self.split.val)?;
        let mut store = self.fresh_projector();
        let groups = vec![group(
            &store,
            "projector",
            projector::PREFIX,
            self.cfg.train.lr_projector,
        )];
        self.run_stage(
            Stage::Pretrain,
            &mut store,
            groups,
            &train,
            &val,
            self.cfg.train.epochs_pretrain,
            &mut log,
        )?;
        log.checksums.push(self.checksum_record("pretrain/end"));
        Ok((store, log))
    }

    /// Stage 2: projector and LoRA. `stage1` is required unless
    /// `train.ablate_pretraining` is set, in which case it is ignored.
    pub fn finetune(&self, stage1: Option<&ParamStore>) -> Result<(ParamStore, TrainLog)> {
        let tc = &self.cfg.train;
        let mut log = TrainLog::new("finetune");
        log.warnings = tc.warnings();
        log.checksums.push(self.checksum_record("finetune/start"));
        let mut store = if tc.ablate_pretraining {
            self.fresh_projector()
        } else {
            let s = stage1.ok_or_else(|| {
                BellaError::Config(
                    "finetuning needs a stage-1 checkpoint unless train.ablate_pretraining is set".into(),
                )
            })?;
            let p = s.subset(projector::PREFIX);
            let want = self.fresh_projector();
            for (n, t) in want.iter() {
                match p.get(n) {
                    Some(got) if got.shape() == t.shape() => {}
                    _ => {
                        return Err(BellaError::Config(format!(
                            "stage-1 checkpoint does not fit projector `{}` (tensor `{n}`)",
                            self.cfg.model.projector
                        )))
                    }
                }
            }
            let mut p = p;
            p.set_requires_grad_all(true);
            p
        };
        let lora_seed = SplitMix64::derive(tc.seed, "lora").next_u64();
        store.extend(init_lora(&self.lm.cfg, &self.lora_cfg, lora_seed));
        let groups = vec![
            group(&store, "projector", projector::PREFIX, tc.lr_projector),
            group(&store, "lora", LORA_PREFIX, tc.lr_lm),
        ];
        let train = self.finetune_samples(&self.split.train)?;
        let val = self.finetune_samples(&self.split.val)?;
        self.run_stage(
            Stage::Finetune,
            &mut store,
            groups,
            &train,
            &val,
            tc.epochs_finetune,
            &mut log,
        )?;
        log.checksums.push(self.checksum_record("finetune/end"));
        Ok((store, log))
    }

    /// Greedy answer for one question about an encoded grid.
    pub fn answer(&self, trained: &ParamStore, bev: &Tensor<f32>, question: &str) -> Result<String> {
        answer_question(
            &self.lm,
            trained,
            &self.projector_config(),
            &self.lora_cfg,
            self.vocab(),
            bev,
            question,
            self.cfg.eval.max_new_tokens,
        )
    }

    /// Answers every QA item of `episodes` and scores the answers.
    pub fn evaluate(&self, trained: &ParamStore, episodes: &BTreeSet<u64>) -> Result<(Vec<Prediction>, EvalReport)> {
        let mut preds = Vec::new();
        for q in self.data.qa.iter().filter(|q| episodes.contains(&q.episode_id)) {
            let bev = self.bev.get(q.episode_id, q.frame_index)?;
            preds.push(Prediction {
                episode_id: q.episode_id,
                frame_index: q.frame_index,
                category: q.category,
                question: q.question.clone(),
                answer: q.gold_answer.clone(),
                prediction: self.answer(trained, bev, &q.question)?,
            });
        }
        let report = report_for(&preds)?;
        Ok((preds, report))
    }
}

/// Greedy answer from a frozen LM and trained projector (plus adapters, if
/// `trained` holds any).
#[allow(clippy::too_many_arguments)]
pub fn answer_question(
    lm: &MicroLm,
    trained: &ParamStore,
    pcfg: &ProjectorConfig,
    lora_cfg: &LoraConfig,
    vocab: &Vocab,
    bev: &Tensor<f32>,
    question: &str,
    max_new: usize,
) -> Result<String> {
    let q = vocab.encode(question)?;
    let sep = vocab
        .id(SEP_WORD)
        .ok_or_else(|| BellaError::OutOfVocabulary(SEP_WORD.into()))?;
    let prefix = question_prefix(&q, sep, lm.cfg.max_len)?;
    let e = project_value(trained, pcfg, bev)?;
    let lora = trained
        .names_with_prefix(LORA_PREFIX)
        .next()
        .is_some()
        .then_some((trained, lora_cfg));
    let out = generate(lm, lora, &prefix, &e, max_new)?;
    vocab.decode(&out)
}

pub fn report_for(preds: &[Prediction]) -> Result<EvalReport> {
    let p: Vec<String> = preds.iter().map(|x| x.prediction.clone()).collect();
    let g: Vec<String> = preds.iter().map(|x| x.answer.clone()).collect();
    let c: Vec<Category> = preds.iter().map(|x| x.category).collect();
    EvalReport::build(&p, &g, &c)
}

fn sq_norm(t: &Tensor<f32>) -> f64 {
    t.data().iter().map(|&x| (x as f64) * (x as f64)).sum()
}

fn group(store: &ParamStore, name: &str, prefix: &str, lr: f64) -> ParamGroup {
    ParamGroup {
        name: name.into(),
        params: store.names_with_prefix(prefix).map(str::to_string).collect(),
        learning_rate: lr,
    }
}

/// Base LM plus trained tensors, as written to disk.
pub fn full_checkpoint(exp: &Experiment, trained: &ParamStore) -> ParamStore {
    let mut s = exp.lm.params.clone();
    s.extend(trained.clone());
    s
}

/// Trainable part of a checkpoint, checked against the frozen LM of `exp`.
pub fn trainable_from_checkpoint(exp: &Experiment, ckpt: &ParamStore) -> Result<ParamStore> {
    let lm = ckpt.subset(LM_PREFIX);
    let tok = lm
        .get("lm/tok_emb")
        .ok_or_else(|| BellaError::Config("checkpoint has no language model".into()))?;
    if tok.shape()[0] != exp.vocab().len() {
        return Err(BellaError::VocabMismatch(format!(
            "checkpoint embeds {} tokens, corpus vocabulary has {}",
            tok.shape()[0],
            exp.vocab().len()
        )));
    }
    if lm.checksum(LM_PREFIX) != exp.lm.checksum() {
        return Err(BellaError::Config(
            "checkpoint language model differs from the configured one".into(),
        ));
    }
    let mut s = ckpt.subset(projector::PREFIX);
    s.extend(ckpt.subset(LORA_PREFIX));
    s.set_requires_grad_all(true);
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Pretraining,
    Projector,
}

impl std::str::FromStr for AblationKind {
    type Err = BellaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretraining" => Ok(Self::Pretraining),
            "projector" => Ok(Self::Projector),
            _ => Err(BellaError::Config(format!("unknown ablation kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArmKey {
    pub seed: u64,
    pub variant: ProjectorVariant,
    pub pretrained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub key: ArmKey,
    pub data_hash: String,
    pub report: EvalReport,
    pub pretrain_log: Option<TrainLog>,
    pub finetune_log: TrainLog,
    pub checkpoint_checksum: String,
}

pub const COLUMNS: [&str; 6] = ["exist", "count", "object", "status", "comparison", "overall"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Seed-averaged accuracy per column of [`COLUMNS`].
    pub accuracy: BTreeMap<String, f64>,
    pub per_seed_overall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub seeds: Vec<u64>,
    pub data_hash: String,
    pub rows: Vec<AblationRow>,
    /// Each row minus the first row.
    pub deltas: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<16}", "");
        for c in COLUMNS {
            let _ = write!(s, " {:>10}", title(c));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<16}", r.label);
            for c in COLUMNS {
                let _ = write!(s, " {:>10.1}", r.accuracy[c]);
            }
            s.push('\n');
        }
        for d in self.deltas.iter().skip(1) {
            let _ = write!(s, "{:<16}", format!("Δ {}", d.label));
            for c in COLUMNS {
                let _ = write!(s, " {:>+10.1}", d.accuracy[c]);
            }
            s.push('\n');
        }
        s
    }
}

fn title(c: &str) -> String {
    let mut ch = c.chars();
    ch.next()
        .map(|f| f.to_ascii_uppercase().to_string() + ch.as_str())
        .unwrap_or_default()
}

/// Runs ablation arms, reusing any arm already trained (the full model with
/// the deep projector belongs to both ablations).
#[derive(Debug)]
pub struct AblationRunner {
    pub base: Experiment,
    pub arms: BTreeMap<ArmKey, ArmResult>,
    stage1: BTreeMap<(u64, ProjectorVariant), (ParamStore, TrainLog)>,
}

impl AblationRunner {
    pub fn new(base: Experiment) -> Self {
        Self {
            base,
            arms: BTreeMap::new(),
            stage1: BTreeMap::new(),
        }
    }

    pub fn arm(&mut self, key: ArmKey) -> Result<&ArmResult> {
        if !self.arms.contains_key(&key) {
            let mut exp = self.base.with_settings(key.seed, key.variant);
            exp.cfg.train.ablate_pretraining = !key.pretrained;
            let pre = if key.pretrained {
                if let Entry::Vacant(slot) = self.stage1.entry((key.seed, key.variant)) {
                    slot.insert(exp.pretrain()?);
                }
                Some(&self.stage1[&(key.seed, key.variant)])
            } else {
                None
            };
            let (trained, ft_log) = exp.finetune(pre.map(|p| &p.0))?;
            let (_, report) = exp.evaluate(&trained, &exp.split.test)?;
            let result = ArmResult {
                key,
                data_hash: exp.data.content_hash(),
                report,
                pretrain_log: pre.map(|p| p.1.clone()),
                finetune_log: ft_log,
                checkpoint_checksum: full_checkpoint(&exp, &trained).checksum(""),
            };
            if self.base.verbose {
                eprintln!(
                    "[arm] seed {} {} pretrained={}: overall {:.1}",
                    key.seed, key.variant, key.pretrained, result.report.qa_overall
                );
            }
            self.arms.insert(key, result);
        }
        Ok(&self.arms[&key])
    }

    pub fn run(&mut self, kind: AblationKind, seeds: &[u64]) -> Result<AblationReport> {
        if seeds.is_empty() {
            return Err(BellaError::Config("ablation needs at least one seed".into()));
        }
        let deep = self.base.cfg.model.projector;
        let settings: Vec<(String, ProjectorVariant, bool)> = match kind {
            AblationKind::Pretraining => vec![
                ("No Pretraining".into(), deep, false),
                ("Full Model".into(), deep, true),
            ],
            AblationKind::Projector => ProjectorVariant::ALL
                .into_iter()
                .map(|v| (v.table_label().to_string(), v, true))
                .collect(),
        };
        let mut rows = Vec::new();
        let mut hashes = BTreeSet::new();
        for (label, variant, pretrained) in settings {
            let mut sums: BTreeMap<String, f64> = COLUMNS.iter().map(|c| (c.to_string(), 0.0)).collect();
            let mut per_seed = Vec::new();
            for &seed in seeds {
                let r = self.arm(ArmKey {
                    seed,
                    variant,
                    pretrained,
                })?;
                hashes.insert(r.data_hash.clone());
                for c in Category::SHORT_ANSWER {
                    let a = r.report.accuracy.per_category.get(&c).map_or(0.0, |a| a.accuracy);
                    *sums.get_mut(c.as_str()).expect("column") += a;
                }
                *sums.get_mut("overall").expect("column") += r.report.qa_overall;
                per_seed.push(r.report.qa_overall);
            }
            rows.push(AblationRow {
                label,
                accuracy: sums.into_iter().map(|(k, v)| (k, v / seeds.len() as f64)).collect(),
                per_seed_overall: per_seed,
            });
        }
        if hashes.len() != 1 {
            return Err(BellaError::Dataset("ablation arms saw different data".into()));
        }
        let deltas = rows
            .iter()
            .map(|r| AblationRow {
                label: r.label.clone(),
                accuracy: COLUMNS
                    .iter()
                    .map(|c| (c.to_string(), r.accuracy[*c] - rows[0].accuracy[*c]))
                    .collect(),
                per_seed_overall: r
                    .per_seed_overall
                    .iter()
                    .zip(&rows[0].per_seed_overall)
                    .map(|(a, b)| a - b)
                    .collect(),
            })
            .collect();
        Ok(AblationReport {
            kind,
            seeds: seeds.to_vec(),
            data_hash: hashes.into_iter().next().expect("one hash"),
            rows,
            deltas,
        })
    }
}
