use crate::manifest::{corpus_hash, write_json, RunManifest};
use crate::{EntropyModeArg, EvalArgs, GradcheckArgs, ModeArg, SynthArgs, TrainArgs};
use anyhow::{anyhow, Context};
use cotrain::corpus::{
    load_corpus, synth_corpus, true_mi_oracle, write_corpus, Corpus, SyntheticSpec,
};
use cotrain::evaluation::evaluate_model;
use cotrain::selfcheck::{run_gradcheck, seed_range, GradcheckOptions};
use cotrain::trainer::{
    load_checkpoint, parse_jsonl, save_checkpoint, EntropyMode, JsonlSink, LrSegment,
    MetricsRecord, MetricsSink, Mode, TrainConfig, Trainer,
};
use serde::Serialize;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: e.into(),
    }
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_DATA,
        error: e.into(),
    }
}

fn create_out(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(data)
}

#[derive(Serialize)]
struct OracleReport {
    true_mi_bits: f64,
    joint_table: Vec<Vec<f64>>,
}

/// Config matching a synthetic corpus: its window geometry and six passes
/// over it at a constant rate, cloning after the first fifth.
fn synthetic_train_config(spec: &SyntheticSpec) -> cotrain::Result<TrainConfig> {
    let hundreds = spec.num_utterances as f64 / 100.0;
    let end = 6.0 * hundreds;
    Ok(TrainConfig {
        geometry: spec.geometry()?,
        lr_schedule: vec![LrSegment {
            start: 0.0,
            end,
            lr: 0.4,
        }],
        clone_at: Some((end * 0.2 * 100.0).round() / 100.0),
        seed: spec.seed,
        ..TrainConfig::default()
    })
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let spec = SyntheticSpec::from_json_file(&a.spec).map_err(usage)?;
    create_out(&a.out)?;
    let (corpus, joint) = synth_corpus(&spec).map_err(usage)?;
    let config = synthetic_train_config(&spec).map_err(usage)?;
    let mut m = RunManifest::new("synth")
        .artifact("manifest", cotrain::corpus::MANIFEST_NAME)
        .artifact("oracle", "oracle.json")
        .artifact("train_config", "train_config.json");
    m.seed = Some(spec.seed);
    m.config = serde_json::to_value(&spec).map_err(data)?;
    m.corpus_hash = Some(corpus_hash(&corpus));
    m.write(&a.out).map_err(data)?;

    write_corpus(&a.out, &corpus).map_err(data)?;
    let mi = true_mi_oracle(&joint).map_err(data)?;
    let joint_table = joint.row_iter().map(<[f64]>::to_vec).collect();
    write_json(
        &a.out.join("oracle.json"),
        &OracleReport {
            true_mi_bits: mi,
            joint_table,
        },
    )
    .map_err(data)?;
    write_json(&a.out.join("train_config.json"), &config).map_err(data)?;
    println!(
        "{} utterances, true MI {mi:.6} bits -> {}",
        corpus.len(),
        a.out.display()
    );
    Ok(())
}

fn parse_schedule(s: &str) -> anyhow::Result<Vec<LrSegment>> {
    s.split(',')
        .map(|seg| {
            let parts: Vec<&str> = seg.trim().split(':').collect();
            let [start, end, lr] = parts[..] else {
                return Err(anyhow!("schedule segment {seg:?} is not start:end:lr"));
            };
            Ok(LrSegment {
                start: start
                    .parse()
                    .with_context(|| format!("bad start in {seg:?}"))?,
                end: end.parse().with_context(|| format!("bad end in {seg:?}"))?,
                lr: lr
                    .parse()
                    .with_context(|| format!("bad learning rate in {seg:?}"))?,
            })
        })
        .collect()
}

fn train_config(
    a: &TrainArgs,
    from_checkpoint: Option<&TrainConfig>,
) -> anyhow::Result<TrainConfig> {
    let mut cfg = match (&a.config, from_checkpoint) {
        (Some(p), _) => TrainConfig::from_json_file(p)?,
        (None, Some(c)) => c.clone(),
        (None, None) => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Base => Mode::Base,
            ModeArg::Adversarial => Mode::Adversarial,
        };
    }
    if let Some(m) = a.entropy_mode {
        cfg.entropy_mode = match m {
            EntropyModeArg::PerUtterance => EntropyMode::PerUtterance,
            EntropyModeArg::Global => EntropyMode::Global,
        };
    }
    if let Some(s) = &a.lr_schedule {
        cfg.lr_schedule = parse_schedule(s)?;
    }
    if let Some(c) = &a.clone_at {
        cfg.clone_at = match c.trim() {
            "none" => None,
            v => Some(v.parse().with_context(|| format!("bad --clone-at {v:?}"))?),
        };
    }
    cfg.validate()?;
    if let Some(orig) = from_checkpoint {
        if *orig != cfg {
            return Err(anyhow!("config differs from the one stored in the checkpoint; resume needs the same config"));
        }
    }
    Ok(cfg)
}

/// Records emitted up to a checkpoint taken after `processed` utterances.
fn emitted_before(r: &MetricsRecord, processed: u64) -> bool {
    match r {
        MetricsRecord::Minibatch { step, .. } => *step < processed,
        MetricsRecord::Epoch { step, .. } | MetricsRecord::Clone { step, .. } => *step <= processed,
    }
}

/// Opens the metrics stream. On resume, an existing stream is cut back to
/// the checkpoint so the file ends up identical to an uninterrupted run.
fn open_metrics(path: &Path, resume_at: Option<u64>) -> anyhow::Result<BufWriter<File>> {
    let Some(processed) = resume_at else {
        return Ok(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ));
    };
    if path.exists() {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let kept: Vec<MetricsRecord> = parse_jsonl(&text)?
            .into_iter()
            .filter(|r| emitted_before(r, processed))
            .collect();
        let mut sink = JsonlSink::new(Vec::new());
        for r in &kept {
            sink.record(r)?;
        }
        fs::write(path, sink.into_inner())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn train(a: &TrainArgs) -> CmdResult {
    if a.checkpoint_every == Some(0) {
        return Err(usage(anyhow!("--checkpoint-every must be positive")));
    }
    let resumed = a
        .resume
        .as_deref()
        .map(load_checkpoint)
        .transpose()
        .map_err(data)?;
    let config = train_config(a, resumed.as_ref().map(|(c, _)| c)).map_err(usage)?;
    let corpus = load_corpus(&a.corpus).map_err(data)?;

    create_out(&a.out)?;
    fs::create_dir_all(a.out.join(CHECKPOINT_DIR))
        .context("creating checkpoint directory")
        .map_err(data)?;
    let mut m = RunManifest::new("train")
        .artifact("metrics", METRICS_FILE)
        .artifact("checkpoints", CHECKPOINT_DIR)
        .artifact("final_checkpoint", FINAL_CHECKPOINT);
    m.seed = Some(config.seed);
    m.config = serde_json::to_value(&config).map_err(data)?;
    m.corpus_hash = Some(corpus_hash(&corpus));
    m.write(&a.out).map_err(data)?;

    let resume_at = resumed.as_ref().map(|(_, s)| s.processed);
    let mut trainer = match resumed {
        Some((_, state)) => Trainer::resume(config.clone(), corpus, state),
        None => Trainer::new(config.clone(), corpus),
    }
    .map_err(data)?;

    let mut sink =
        JsonlSink::new(open_metrics(&a.out.join(METRICS_FILE), resume_at).map_err(data)?);
    let ckpt_dir = a.out.join(CHECKPOINT_DIR);
    let every = a.checkpoint_every;
    let mut last_epoch = trainer.state().epoch;
    trainer
        .run_with(&mut sink, |t| {
            let st = t.state();
            if st.epoch != last_epoch {
                last_epoch = st.epoch;
                save_checkpoint(
                    &ckpt_dir.join(format!("epoch-{:03}.ckpt", st.epoch)),
                    t.config(),
                    st,
                )?;
            }
            if every.is_some_and(|n| st.processed % n == 0) {
                save_checkpoint(
                    &ckpt_dir.join(format!("step-{:08}.ckpt", st.processed)),
                    t.config(),
                    st,
                )?;
            }
            Ok(())
        })
        .map_err(data)?;
    let mut out = sink.into_inner();
    out.flush().context("flushing metrics").map_err(data)?;
    save_checkpoint(
        &a.out.join(FINAL_CHECKPOINT),
        trainer.config(),
        trainer.state(),
    )
    .map_err(data)?;

    let st = trainer.state();
    println!(
        "trained {} utterances over {} epochs; {} live symbols -> {}",
        st.processed,
        st.epoch,
        st.alphabet.live_count(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    summary: &'a cotrain::evaluation::EvalSummary,
    held_out: &'a cotrain::evaluation::HeldOutObjective,
    /// Majority tag of each symbol, `null` for symbols that label no frame.
    symbol_tags: &'a [Option<String>],
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let (config, state) = load_checkpoint(&a.checkpoint).map_err(data)?;
    let corpus: Corpus = load_corpus(&a.corpus).map_err(data)?;
    let hash = corpus_hash(&corpus);
    let corpus = if config.normalize {
        corpus.normalized().map_err(data)?
    } else {
        corpus
    };
    match corpus.dim() {
        Some(d) if d == state.model.dims.input_dim => {}
        Some(d) => {
            return Err(data(anyhow!(
                "corpus frames have dimension {d} but the checkpoint expects {}",
                state.model.dims.input_dim
            )))
        }
        None => return Err(data(anyhow!("corpus has no utterances"))),
    }

    create_out(&a.out)?;
    let mut m = RunManifest::new("eval")
        .artifact("summary", "summary.json")
        .artifact("confusion", "confusion.csv")
        .artifact("symbol_stats", "symbol_stats.csv");
    m.seed = Some(config.seed);
    m.config = serde_json::to_value(&config).map_err(data)?;
    m.corpus_hash = Some(hash);
    m.write(&a.out).map_err(data)?;

    let report = evaluate_model(
        &state.model,
        &corpus,
        &config.geometry,
        &state.alphabet.live_mask,
    )
    .map_err(data)?;
    let write = |name: &str, text: String| {
        fs::write(a.out.join(name), text).with_context(|| format!("writing {name}"))
    };
    write("confusion.csv", report.evaluation.confusion.to_csv()).map_err(data)?;
    write("symbol_stats.csv", report.stats.to_csv()).map_err(data)?;
    let out = EvalOutput {
        summary: &report.summary,
        held_out: &report.objective,
        symbol_tags: &report.tags.tags,
    };
    write_json(&a.out.join("summary.json"), &out).map_err(data)?;
    let s = &report.summary;
    println!(
        "overall {:.4} covered {:.4} agreement {:.4} bound {:.4} bits",
        s.overall_acc, s.covered_acc, s.agreement_rate, report.objective.mi_bound_bits
    );
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    if a.seeds == 0 {
        return Err(usage(anyhow!("--seeds must be positive")));
    }
    let opts = GradcheckOptions {
        corrupt: a.corrupt,
        ..GradcheckOptions::default()
    };
    let seeds = seed_range(a.seed, a.seeds);
    if let Some(out) = &a.out {
        create_out(out)?;
        let mut m = RunManifest::new("gradcheck").artifact("report", "gradcheck.json");
        m.seed = Some(a.seed);
        m.write(out).map_err(data)?;
    }
    let report = run_gradcheck(&seeds, &opts).map_err(data)?;
    if let Some(out) = &a.out {
        write_json(&out.join("gradcheck.json"), &report).map_err(data)?;
    }
    for f in report.failures() {
        eprintln!(
            "FAIL {:?} seed {}: rel. err {:.3e} at {}",
            f.case,
            f.seed,
            f.max_rel_err,
            f.worst.as_deref().unwrap_or("?")
        );
    }
    println!(
        "{} checks over {} seeds, max rel. err {:.3e} (threshold {:.0e}): {}",
        report.results.len(),
        seeds.len(),
        report.max_rel_err,
        report.threshold,
        if report.passed { "pass" } else { "FAIL" }
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_CHECK,
            error: anyhow!("gradient check failed"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_flag_parses() {
        let s = parse_schedule("0:1.5:0.4, 1.5:3:0.1").unwrap();
        assert_eq!(
            s,
            vec![
                LrSegment {
                    start: 0.0,
                    end: 1.5,
                    lr: 0.4
                },
                LrSegment {
                    start: 1.5,
                    end: 3.0,
                    lr: 0.1
                }
            ]
        );
        assert!(parse_schedule("0:1").is_err());
        assert!(parse_schedule("0:x:0.4").is_err());
    }

    #[test]
    fn synthetic_config_matches_geometry() {
        let spec = SyntheticSpec::identity(4, 3, 1);
        let c = synthetic_train_config(&spec).unwrap();
        c.validate().unwrap();
        assert_eq!(c.geometry.total, 7);
        assert_eq!(c.total_utterances(), 600);
        assert_eq!(c.clone_step(), Some(120));
    }
}
