use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use bella_core::bevenc::{encode_scene, FrozenEncoderParams};
use bella_core::config::RunConfig;
use bella_core::dataset::{read_jsonl, write_jsonl, Dataset, Split, FILES};
use bella_core::gradcheck::composite_check;
use bella_core::langdata::{category_counts, Vocab};
use bella_core::lm::{MicroLm, LM_PREFIX, LORA_PREFIX};
use bella_core::lmtrain::build_lm;
use bella_core::projector::{self, ProjectorConfig, ProjectorVariant};
use bella_core::scenesim::{oracle_answer, Category, Scene};
use bella_core::trainer::{
    answer_question, full_checkpoint, report_for, trainable_from_checkpoint, AblationKind, AblationRunner, Experiment,
    Prediction, TrainLog,
};
use bella_numcore::{operator_suite, ParamStore};
use serde::Serialize;

use crate::setup::{
    echo_config, load_data, log, require_file, resolve, run_dir, write_json, write_text, CliError, CliResult,
    CONFIG_FILE,
};
use crate::{
    AblateArgs, AskArgs, Cli, Command, EvalArgs, FinetuneArgs, GenArgs, GradcheckArgs, KindArg, SplitArg, TrainArgs,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-5;

pub fn run(cli: Cli) -> CliResult<()> {
    let file = cli.config.as_deref();
    let ov = &cli.overrides;
    let train_flags = |a: &TrainArgs| -> Vec<(&'static str, String)> {
        a.seed.map(|s| ("train.seed", s.to_string())).into_iter().collect()
    };
    match &cli.command {
        Command::Gen(a) => {
            let mut flags = Vec::new();
            if let Some(s) = a.seed {
                flags.push(("data.seed", s.to_string()));
            }
            if let Some(n) = a.episodes {
                flags.push(("data.train_episodes", n.to_string()));
                flags.push(("data.test_episodes", "0".to_string()));
            }
            gen(resolve(file, ov, "data.seed", &flags)?, a)
        }
        Command::Pretrain(a) => pretrain(resolve(file, ov, "train.seed", &train_flags(a))?, a, cli.verbose),
        Command::Finetune(a) => finetune(resolve(file, ov, "train.seed", &train_flags(&a.train))?, a, cli.verbose),
        Command::Eval(a) => eval(resolve(file, ov, "train.seed", &[])?, a),
        Command::Ask(a) => ask(resolve(file, ov, "train.seed", &[])?, a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(resolve(file, ov, "train.seed", &[])?, a, cli.verbose),
    }
}

fn gen(mut cfg: RunConfig, a: &GenArgs) -> CliResult<()> {
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone().into());
    let occupied = fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !a.force {
            return Err(CliError::Runtime(format!(
                "{} is not empty; pass --force to replace it",
                out.display()
            )));
        }
        for f in FILES.iter().chain([&CONFIG_FILE]) {
            let p = out.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            }
        }
    }
    let t0 = Instant::now();
    let data = Dataset::generate(&cfg.data)?;
    data.write(&out)?;
    cfg.paths.data_dir = out.display().to_string();
    echo_config(&out, &cfg)?;
    let counts = category_counts(&data.qa);
    let per_cat: Vec<String> = Category::ALL
        .iter()
        .map(|c| format!("{} {}", c.as_str(), counts.get(c).copied().unwrap_or(0)))
        .collect();
    println!(
        "gen: {} episodes, {} descriptions, {} QA items ({}), vocab {}, {:.1}s -> {}",
        data.episodes.len(),
        data.pretrain.len(),
        data.qa.len(),
        per_cat.join(", "),
        data.vocab.len(),
        t0.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct StageOutput<'a> {
    lm_pretrain_loss: &'a [f64],
    #[serde(flatten)]
    log: &'a TrainLog,
}

fn save_stage(dir: &Path, exp: &Experiment, trained: &ParamStore, log: &TrainLog, lm_loss: &[f64]) -> CliResult<()> {
    echo_config(dir, &exp.cfg)?;
    full_checkpoint(exp, trained).save(dir.join(CHECKPOINT_FILE))?;
    write_json(
        &dir.join("train_log.json"),
        &StageOutput {
            lm_pretrain_loss: lm_loss,
            log,
        },
    )?;
    write_jsonl(&dir.join("events.jsonl"), &log.events)?;
    println!(
        "{}: first batch loss {:.4}, epoch means [{}], best epoch {}, {:.1}s -> {}",
        log.stage,
        log.first_batch_loss,
        log.epoch_mean_loss
            .iter()
            .map(|l| format!("{l:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
        log.best_epoch,
        log.wall_clock_s,
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn fresh_experiment(cfg: RunConfig, verbose: bool) -> CliResult<(Experiment, Vec<f64>)> {
    let data = load_data(&cfg)?;
    let split = Split::new(&cfg.data, data.episodes.iter().map(|e| e.episode_id));
    let (lm, loss) = build_lm(&cfg, &data, &split.train)?;
    let mut exp = Experiment::with_lm(cfg, Arc::new(data), lm)?;
    exp.verbose = verbose;
    Ok((exp, loss))
}

fn lm_from_checkpoint(cfg: &RunConfig, vocab: &Vocab, ckpt: &ParamStore) -> CliResult<MicroLm> {
    let lm_cfg = cfg
        .model
        .lm_config(vocab.len())
        .map_err(|e| CliError::Schema(e.to_string()))?;
    Ok(MicroLm::from_store(lm_cfg, &ckpt.subset(LM_PREFIX))?)
}

fn load_checkpoint(p: &Path) -> CliResult<ParamStore> {
    require_file(p, "checkpoint")?;
    Ok(ParamStore::load(p)?)
}

fn pretrain(cfg: RunConfig, a: &TrainArgs, verbose: bool) -> CliResult<()> {
    let root = cfg.paths.runs_dir.clone();
    let (exp, lm_loss) = fresh_experiment(cfg, verbose)?;
    let dir = run_dir(a.out.as_deref(), Path::new(&root), "pretrain", exp.cfg.train.seed)?;
    let (store, log) = exp.pretrain()?;
    save_stage(&dir, &exp, &store, &log, &lm_loss)
}

fn finetune(cfg: RunConfig, a: &FinetuneArgs, verbose: bool) -> CliResult<()> {
    let root = cfg.paths.runs_dir.clone();
    let (exp, stage1, lm_loss) = match &a.from {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let data = load_data(&cfg)?;
            let lm = lm_from_checkpoint(&cfg, &data.vocab, &ckpt)?;
            let mut exp = Experiment::with_lm(cfg, Arc::new(data), lm)?;
            exp.verbose = verbose;
            (exp, Some(ckpt), Vec::new())
        }
        None if cfg.train.ablate_pretraining => {
            let (exp, loss) = fresh_experiment(cfg, verbose)?;
            (exp, None, loss)
        }
        None => {
            return Err(CliError::MissingCheckpoint(
                "finetune needs --from <stage-1 checkpoint> unless train.ablate_pretraining=true".into(),
            ))
        }
    };
    if exp.cfg.train.ablate_pretraining && stage1.is_some() {
        log("train.ablate_pretraining is set: the projector of --from is ignored, the frozen LM is kept");
    }
    let dir = run_dir(a.train.out.as_deref(), Path::new(&root), "finetune", exp.cfg.train.seed)?;
    let (store, log) = exp.finetune(stage1.as_ref())?;
    save_stage(&dir, &exp, &store, &log, &lm_loss)
}

fn split_ids(cfg: &RunConfig, data: &Dataset, which: SplitArg) -> BTreeSet<u64> {
    let ids = data.episodes.iter().map(|e| e.episode_id);
    let s = Split::new(&cfg.data, ids.clone());
    match which {
        SplitArg::Train => s.train,
        SplitArg::Val => s.val,
        SplitArg::Test => s.test,
        SplitArg::All => ids.collect(),
    }
}

fn eval(cfg: RunConfig, a: &EvalArgs) -> CliResult<()> {
    let preds: Vec<Prediction> = if let Some(p) = &a.predictions {
        if !p.is_file() {
            return Err(CliError::Runtime(format!("predictions file {} not found", p.display())));
        }
        read_jsonl(p)?
    } else if a.oracle {
        let data = load_data(&cfg)?;
        let ids = split_ids(&cfg, &data, a.split);
        data.qa
            .iter()
            .filter(|q| ids.contains(&q.episode_id))
            .map(|q| {
                Ok(Prediction {
                    episode_id: q.episode_id,
                    frame_index: q.frame_index,
                    category: q.category,
                    question: q.question.clone(),
                    answer: q.gold_answer.clone(),
                    prediction: oracle_answer(data.scene(q.episode_id, q.frame_index)?, q)?,
                })
            })
            .collect::<bella_core::Result<_>>()?
    } else if let Some(p) = &a.checkpoint {
        let ckpt = load_checkpoint(p)?;
        let data = load_data(&cfg)?;
        let ids = split_ids(&cfg, &data, a.split);
        let lm = lm_from_checkpoint(&cfg, &data.vocab, &ckpt)?;
        let exp = Experiment::with_lm(cfg.clone(), Arc::new(data), lm)?;
        let trained = trainable_from_checkpoint(&exp, &ckpt)?;
        exp.evaluate(&trained, &ids)?.0
    } else {
        return Err(CliError::Schema(
            "eval needs one of --checkpoint, --predictions or --oracle".into(),
        ));
    };
    if preds.is_empty() {
        return Err(CliError::Runtime(
            "nothing to evaluate: the selected split has no QA items".into(),
        ));
    }
    let report = report_for(&preds)?;
    let dir = run_dir(a.out.as_deref(), Path::new(&cfg.paths.runs_dir), "eval", cfg.train.seed)?;
    echo_config(&dir, &cfg)?;
    write_jsonl(&dir.join("predictions.jsonl"), &preds)?;
    write_json(&dir.join("report.json"), &report)?;
    let tables = format!(
        "{}\n{}",
        report.render_accuracy_table(),
        report.render_generative_table()
    );
    write_text(&dir.join("tables.txt"), &tables)?;
    print!("{tables}");
    println!(
        "overall accuracy {:.1} on {} items -> {}",
        report.qa_overall,
        preds.len(),
        dir.display()
    );
    Ok(())
}

fn ask(cfg: RunConfig, a: &AskArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let text = fs::read_to_string(&a.scene).map_err(|e| CliError::Runtime(format!("{}: {e}", a.scene.display())))?;
    let scene: Scene =
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", a.scene.display())))?;
    let vocab = Vocab::canonical();
    let lm = lm_from_checkpoint(&cfg, &vocab, &ckpt)?;
    let mut trained = ckpt.subset(projector::PREFIX);
    trained.extend(ckpt.subset(LORA_PREFIX));
    let bev = encode_scene(&scene, &FrozenEncoderParams::canonical())?;
    let pcfg = ProjectorConfig {
        variant: cfg.model.projector,
        d: cfg.model.d_model,
    };
    let answer = answer_question(
        &lm,
        &trained,
        &pcfg,
        &cfg.model.lora(),
        &vocab,
        &bev,
        &a.question,
        cfg.eval.max_new_tokens,
    )?;
    println!("{answer}");
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let t0 = Instant::now();
    let mut failed = Vec::new();
    for c in operator_suite(a.seeds, GRAD_H)? {
        println!("{:<16} {:.3e}  ({} checks)", c.name, c.max_rel_error, c.runs);
        if c.max_rel_error >= GRAD_TOL {
            failed.push(c.name.to_string());
        }
    }
    for v in ProjectorVariant::ALL {
        let mut worst = 0f64;
        for seed in 0..a.seeds {
            worst = worst.max(composite_check(v, seed, a.per_param, GRAD_H)?.max_rel_error);
        }
        let name = format!("composite/{v}");
        println!("{name:<16} {worst:.3e}  ({} checks)", a.seeds);
        if worst >= GRAD_TOL {
            failed.push(name);
        }
    }
    println!("gradcheck: {:.1}s", t0.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "relative error >= {GRAD_TOL:e} in {}",
            failed.join(", ")
        )))
    }
}

fn ablate(cfg: RunConfig, a: &AblateArgs, verbose: bool) -> CliResult<()> {
    let root = cfg.paths.runs_dir.clone();
    let seeds = cfg.eval.ablation_seeds.clone();
    let (exp, _) = fresh_experiment(cfg, verbose)?;
    let dir = run_dir(a.out.as_deref(), Path::new(&root), "ablate", exp.cfg.train.seed)?;
    echo_config(&dir, &exp.cfg)?;
    let kinds = match a.kind {
        KindArg::Pretraining => vec![AblationKind::Pretraining],
        KindArg::Projector => vec![AblationKind::Projector],
        KindArg::All => vec![AblationKind::Pretraining, AblationKind::Projector],
    };
    let mut runner = AblationRunner::new(exp);
    for kind in kinds {
        let report = runner.run(kind, &seeds)?;
        let name = serde_json::to_value(kind).expect("serializes");
        let name = name.as_str().expect("string");
        write_json(&dir.join(format!("ablation_{name}.json")), &report)?;
        write_text(&dir.join(format!("ablation_{name}.txt")), &report.render())?;
        println!("{name} ablation, seeds {seeds:?}, data {}", &report.data_hash[..12]);
        print!("{}", report.render());
    }
    let arms: Vec<_> = runner.arms.values().collect();
    write_json(&dir.join("arms.json"), &arms)?;
    println!("-> {}", dir.display());
    Ok(())
}
