use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use mcsv::checkpoint::Checkpoint;
use mcsv::config::ExperimentConfig;
use mcsv::data::{generate_corpus, load_corpus, noisy_copies, AugmentPolicy, Corpus};
use mcsv::dsp::{LogMelExtractor, Waveform};
use mcsv::eval::{
    det_metrics, embed_all, score_stats as stats_of, score_trials, ScoreSet, TrialSet,
};
use mcsv::losscheck::{run_losscheck, Fault, LosscheckOptions};
use mcsv::seed::seed_override;
use mcsv::train::{model_from_checkpoint, StepMetrics, Trainer, METRICS_HEADER};
use serde_json::json;

use super::{EvaluateArgs, Failure, GenDataArgs, LosscheckArgs, ScoreStatsArgs, TrainArgs};

const TRAIN_DIR: &str = "train";
const TEST_DIR: &str = "test";
const TRIALS_FILE: &str = "trials.txt";
const CONFIG_FILE: &str = "config.json";
const HASH_FILE: &str = "config.sha256";
const RUN_FILE: &str = "run.json";
const METRICS_FILE: &str = "metrics.csv";
const MODEL_FILE: &str = "model.ckpt";
const CHECKPOINT_DIR: &str = "checkpoints";

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_split(data: &Path, split: &str) -> Result<Corpus, Failure> {
    let dir = data.join(split);
    load_corpus(&dir).map_err(|e| {
        Failure::Runtime(format!(
            "cannot load corpus from {} ({e}); run `mcsv gen-data` first",
            dir.display()
        ))
    })
}

pub fn gen_data(args: GenDataArgs) -> CmdResult {
    let mut cfg = ExperimentConfig::resolve(args.config.as_deref())?;
    if let Some(d) = args.data {
        cfg.data_dir = d;
    }
    cfg.validate()?;
    let train = generate_corpus(&cfg.data_dir.join(TRAIN_DIR), &cfg.train_corpus())?;
    let test_dir = cfg.data_dir.join(TEST_DIR);
    let test = generate_corpus(&test_dir, &cfg.test_corpus())?;
    let trials = TrialSet::all_pairs(
        test.entries()
            .map(|e| (e.utterance_id.as_str(), e.speaker_id.as_str())),
    );
    trials.write(&test_dir.join(TRIALS_FILE))?;
    let targets = trials.trials.iter().filter(|t| t.target).count();
    println!(
        "train: {} utterances from {} speakers",
        train.utterances.len(),
        train.speakers.len()
    );
    println!(
        "test: {} utterances from {} speakers, {} trials ({targets} target)",
        test.utterances.len(),
        test.speakers.len(),
        trials.len()
    );
    println!("written to {} (seed {})", cfg.data_dir.display(), cfg.seed);
    Ok(())
}

/// Config file, then command-line flags on top.
fn train_config(args: &TrainArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::resolve(args.config.as_deref())?;
    if let Some(d) = &args.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if let Some(v) = args.loss {
        cfg.loss.variant = v;
    }
    if let Some(m) = args.margin {
        cfg.loss.margin = m;
    }
    if let Some(t) = args.tau {
        cfg.loss.tau = t;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if args.no_augment {
        cfg.augment = AugmentPolicy::disabled();
    }
    if args.no_projector {
        cfg.model.projector = false;
    }
    if args.learnable_margin {
        cfg.loss.learnable_margin = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Metrics rows from an earlier run that precede `epoch`.
fn metrics_before(path: &Path, epoch: u64) -> Result<Vec<String>, Failure> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|e| e.parse::<u64>().ok())
                .is_some_and(|e| e < epoch)
        })
        .map(str::to_string)
        .collect())
}

pub fn train(args: TrainArgs) -> CmdResult {
    let cfg = train_config(&args)?;
    let data = load_split(&cfg.data_dir, TRAIN_DIR)?.unlabeled();
    let out = cfg.output_dir.clone();
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;

    let opts = cfg.train_options();
    let metrics_path = out.join(METRICS_FILE);
    let (mut trainer, mut rows) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let t = Trainer::resume(opts, &data, &ckpt)?;
            let rows = metrics_before(&metrics_path, t.epoch())?;
            println!("resuming {} at epoch {}", path.display(), t.epoch());
            (t, rows)
        }
        None => (Trainer::new(opts, &data)?, Vec::new()),
    };
    trainer.set_pipelined(args.pipelined);

    let hash = cfg.content_hash();
    write(&out.join(CONFIG_FILE), &cfg.to_json())?;
    write(&out.join(HASH_FILE), &format!("{hash}\n"))?;
    println!(
        "{} on {} utterances, {} steps/epoch, config {}",
        cfg.loss.variant,
        data.len(),
        trainer.steps_per_epoch(),
        &hash[..12]
    );

    let write_run = |t: &Trainer| {
        let run = json!({
            "config_hash": hash,
            "seed": cfg.seed,
            "loss": cfg.loss.variant.short_name(),
            "margin": cfg.loss.margin,
            "tau": cfg.loss.tau,
            "learnable_margin": cfg.loss.learnable_margin,
            "augment_enabled": cfg.augment.enabled,
            "projector": cfg.model.projector,
            "epochs_completed": t.epoch(),
            "global_step": t.global_step(),
            "skipped_steps": t.skipped_steps(),
        });
        write(
            &out.join(RUN_FILE),
            &serde_json::to_string_pretty(&run).expect("run summary serializes"),
        )
    };

    while !trainer.is_finished() {
        let log: Vec<StepMetrics> = trainer.run_epoch(&data)?;
        rows.extend(log.iter().map(StepMetrics::csv_row));
        let mut csv = format!("{METRICS_HEADER}\n");
        for r in &rows {
            csv.push_str(r);
            csv.push('\n');
        }
        write(&metrics_path, &csv)?;
        let ckpt = trainer.checkpoint();
        ckpt.save(&ckpt_dir.join(format!("epoch_{:03}.ckpt", trainer.epoch())))?;
        ckpt.save(&out.join(MODEL_FILE))?;
        write_run(&trainer)?;
        let n = log.len().max(1) as f64;
        println!(
            "epoch {:>3}  loss {:.4}  pos {:.3}  neg {:.3}  margin {:.3}",
            trainer.epoch(),
            log.iter().map(|m| m.loss).sum::<f64>() / n,
            log.iter().map(|m| m.mean_pos_cos).sum::<f64>() / n,
            log.iter().map(|m| m.mean_neg_cos).sum::<f64>() / n,
            log.last().map_or(0.0, |m| m.margin),
        );
    }
    if trainer.skipped_steps() > 0 {
        println!("skipped {} non-finite steps", trainer.skipped_steps());
    }
    write_run(&trainer)?;
    println!("run written to {}", out.display());
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> CmdResult {
    let (ckpt_path, run_dir) = match (&args.run, &args.checkpoint) {
        (Some(run), _) => (run.join(MODEL_FILE), Some(run.clone())),
        (None, Some(c)) => (c.clone(), None),
        (None, None) => {
            return Err(Failure::Usage(
                "evaluate needs --run or --checkpoint".into(),
            ))
        }
    };
    let config_path = match (&args.config, &run_dir) {
        (Some(c), _) => c.clone(),
        (None, Some(run)) => run.join(CONFIG_FILE),
        (None, None) => return Err(Failure::Usage("--checkpoint needs --config".into())),
    };
    let mut cfg = ExperimentConfig::resolve(Some(&config_path))?;
    if let Some(d) = &args.data {
        cfg.data_dir = d.clone();
    }
    cfg.eval.validate()?;
    let out: PathBuf = args
        .out
        .clone()
        .or(run_dir)
        .unwrap_or_else(|| ckpt_path.parent().unwrap_or(Path::new(".")).to_path_buf());

    let trials_path = args
        .trials
        .clone()
        .unwrap_or_else(|| cfg.data_dir.join(TEST_DIR).join(TRIALS_FILE));
    let trials = TrialSet::read(&trials_path)?;
    if trials.is_empty() {
        return Err(Failure::Runtime(format!(
            "trial list {} is empty",
            trials_path.display()
        )));
    }

    let model = model_from_checkpoint(cfg.model, &Checkpoint::load(&ckpt_path)?)?;
    let corpus = load_split(&cfg.data_dir, TEST_DIR)?;
    let ids = trials.utterances();
    let clean = ids
        .iter()
        .map(|&id| {
            corpus.audio(id).ok_or_else(|| {
                Failure::Runtime(format!("utterance `{id}` is not in the held-out corpus"))
            })
        })
        .collect::<Result<Vec<&Waveform>, _>>()?;
    let audio: Vec<Waveform> = if args.noisy {
        noisy_copies(clean.iter().copied(), cfg.test_noise_seed())?
    } else {
        clean.into_iter().cloned().collect()
    };
    let extractor = LogMelExtractor::new(audio[0].sample_rate());
    let embeddings: HashMap<String, _> = embed_all(
        ids.iter().copied().zip(&audio),
        &model,
        &extractor,
        cfg.eval.num_frames,
        cfg.eval.frame_secs,
    )?;

    let scores = score_trials(&trials, &embeddings)?;
    let det = det_metrics(&scores, &cfg.eval.dcf())?;
    let stats = stats_of(&scores)?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write(&out.join("scores.csv"), &scores.to_csv())?;
    write(&out.join("histogram.csv"), &stats.histogram_csv())?;
    let summary = json!({
        "trials": trials.len(),
        "noisy": args.noisy,
        "eer": det.eer,
        "threshold_at_eer": det.threshold_at_eer,
        "min_dcf": det.min_dcf,
        "threshold_at_min_dcf": det.threshold_at_min_dcf,
        "p_target": cfg.eval.p_target,
        "mean_pos": stats.mean_pos,
        "mean_neg": stats.mean_neg,
        "gap": stats.gap,
    });
    write(
        &out.join("eval.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    println!(
        "{} trials{}",
        trials.len(),
        if args.noisy { " (noisy)" } else { "" }
    );
    println!("EER      {:.2}%", 100.0 * det.eer);
    println!(
        "minDCF   {:.4} (P_target {})",
        det.min_dcf, cfg.eval.p_target
    );
    println!("mean_pos {:.4}", stats.mean_pos);
    println!("mean_neg {:.4}", stats.mean_neg);
    println!("gap      {:.4}", stats.gap);
    Ok(())
}

pub fn losscheck(args: LosscheckArgs) -> CmdResult {
    let mut opts = LosscheckOptions {
        seed: seed_override()?.unwrap_or(0),
        fault: args.inject_fault.map(|_| Fault::AmGradientSignFlip),
        ..LosscheckOptions::default()
    };
    if let Some(n) = args.batch_size {
        opts = opts.with_batch_size(n);
    }
    let report = run_losscheck(&opts)?;
    print!("{}", report.table());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime("loss check failed".into()))
    }
}

pub fn score_stats(args: ScoreStatsArgs) -> CmdResult {
    let text = fs::read_to_string(&args.scores).map_err(|e| io_err(&args.scores, e))?;
    let scores = ScoreSet::parse_csv(&text)?;
    let stats = stats_of(&scores)?;
    let (tar, non) = scores.split();
    println!("trials   {} ({} target)", tar.len() + non.len(), tar.len());
    println!("mean_pos {:.4}", stats.mean_pos);
    println!("mean_neg {:.4}", stats.mean_neg);
    println!("gap      {:.4}", stats.gap);
    if let Some(out) = &args.out {
        write(out, &stats.histogram_csv())?;
        println!("histogram written to {}", out.display());
    } else {
        print!("{}", stats.histogram_csv());
    }
    Ok(())
}
