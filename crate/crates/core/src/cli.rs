//! Command-line front end: `usr <subcommand> ...`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::io::{load_corpus, load_labelled, save_corpus, EVAL_FILE};
use crate::data::{generate_corpus, CorpusConfig, DataError, Tokenizer};
use crate::decode::{decode_views, evaluate, save_reports, DecodeConfig, DecodeError, EvalConfig};
use crate::exec::Exec;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Modality, Model, ModelError};
use crate::train::{
    apply_override, read_metrics, run_pretrain, train_semi, train_supervised, Metrics, RunManifest, Stage, TrainError,
    TrainOutput,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "usr", about = "Unified speech recognition on a synthetic audiovisual corpus")]
struct Cli {
    /// Run sequentially instead of on the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a corpus directory.
    MakeData(MakeDataArgs),
    /// Masked-prediction pre-training.
    Pretrain(TrainArgs),
    /// Supervised training on the labelled split.
    Train(TrainArgs),
    /// Semi-supervised training with pseudo-labels.
    TrainSemi(TrainArgs),
    /// Corpus WER of a checkpoint on the eval split.
    Evaluate(EvalArgs),
    /// Print hypotheses for the first utterances of the eval split.
    Decode(DecodeArgs),
    /// CSV of per-epoch curves from run directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct MakeDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeOpts {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus directory; defaults to the one recorded next to the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_modality, default_value = "av")]
    modality: Modality,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    opts: DecodeOpts,
    /// Corrupt the audio with white noise at this SNR (dB).
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Per-utterance JSONL report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    opts: DecodeOpts,
    #[arg(long, default_value_t = 10)]
    limit: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    Modality::parse(s).ok_or_else(|| format!("unknown modality {s:?} (expected v, a or av)"))
}

/// Corpus generation settings for `make-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub corpus: CorpusConfig,
    pub utterances: usize,
    pub labelled_fraction: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            utterances: 1000,
            labelled_fraction: 0.1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Data(DataError::Config(_)) | TrainError::Model(ModelError::Config(_)) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let res = match cli.cmd {
        Cmd::MakeData(a) => make_data(a, exec),
        Cmd::Pretrain(a) => train(a, Stage::Pretrain, exec),
        Cmd::Train(a) => train(a, Stage::Supervised, exec),
        Cmd::TrainSemi(a) => train(a, Stage::Semi, exec),
        Cmd::Evaluate(a) => eval_cmd(a, exec),
        Cmd::Decode(a) => decode_cmd(a),
        Cmd::Report(a) => report(a),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn load_json_with_overrides<T>(path: Option<&Path>, set: &[String]) -> Result<T, CliError>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let mut v = serde_json::to_value(T::default())?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        v = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        let mut base = serde_json::to_value(T::default())?;
        merge_defaults(&mut base, v);
        v = base;
    }
    for s in set {
        let (k, val) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
        apply_override(&mut v, k.trim(), val.trim())?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

fn merge_defaults(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_defaults(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn make_data(a: MakeDataArgs, exec: Exec) -> Result<(), CliError> {
    let mut spec: DataSpec = load_json_with_overrides(a.config.as_deref(), &a.set)?;
    if let Some(s) = a.seed {
        spec.corpus.seed = s;
    }
    let corpus = generate_corpus(&spec.corpus, spec.utterances, spec.labelled_fraction, exec)?;
    save_corpus(&corpus, &a.out)?;
    std::fs::write(a.out.join("data_spec.json"), serde_json::to_string_pretty(&spec)?)?;
    info!(
        "wrote {} labelled, {} unlabelled, {} eval utterances to {}",
        corpus.labelled.len(),
        corpus.unlabelled.len(),
        corpus.eval.len(),
        a.out.display()
    );
    Ok(())
}

fn write_checkpoint(path: &Path, out: &TrainOutput, students: usize) -> Result<(), CliError> {
    let (_, student) = &out.students[students];
    save_checkpoint(
        path,
        &Checkpoint {
            config: out.model.config.clone(),
            student: student.clone(),
            teacher: out.teacher.clone(),
            optimizer: if out.students.len() == 1 { out.optimizer.clone() } else { None },
        },
    )?;
    Ok(())
}

fn train(a: TrainArgs, stage: Stage, exec: Exec) -> Result<(), CliError> {
    let mut m = RunManifest::load(a.config.as_deref(), &a.set)?;
    m.stage = stage;
    m.config.optim.seed = a.seed;
    m.out = Some(a.out.clone());
    std::fs::create_dir_all(&a.out)?;
    m.save(&a.out.join("manifest.json"))?;
    let corpus = load_corpus(&m.corpus)?;
    let stage_name = match stage {
        Stage::Supervised => "supervised",
        Stage::Semi => "semi",
        Stage::Pretrain => "pretrain",
    };
    let metrics = Metrics::to_file(stage_name, &a.out.join("metrics.jsonl"))?;
    let mut out = match stage {
        Stage::Supervised => train_supervised(&corpus, &m.config, metrics)?,
        Stage::Pretrain => run_pretrain(&corpus, &m.config, metrics)?,
        Stage::Semi => {
            let init = match &m.init {
                Some(p) => Some(load_checkpoint(p)?.student),
                None => None,
            };
            train_semi(&corpus, &m.config, init.as_ref(), metrics)?
        }
    };
    if out.students.len() == 1 {
        write_checkpoint(&a.out.join("final.ckpt"), &out, 0)?;
    } else {
        for i in 0..out.students.len() {
            let name = out.students[i].0[0].name();
            write_checkpoint(&a.out.join(format!("final_{name}.ckpt")), &out, i)?;
        }
    }
    if stage != Stage::Pretrain && !m.config.eval_modalities.is_empty() {
        let cfg = EvalConfig {
            decode: m.config.decode.clone(),
            ..Default::default()
        };
        let reports = out.evaluate(&corpus.eval, &m.config.eval_modalities, &cfg, exec)?;
        save_reports(&a.out.join("eval.jsonl"), &reports)?;
        for r in &reports {
            println!("{} WER {:.4}", r.summary.modality, r.summary.wer);
        }
    }
    Ok(())
}

fn load_for_decode(o: &DecodeOpts) -> Result<(Model, Checkpoint, Vec<crate::data::LabelledSample>, DecodeConfig), CliError> {
    let ck = load_checkpoint(&o.ckpt)?;
    let dir = o.ckpt.parent().unwrap_or(Path::new("."));
    let manifest = RunManifest::load(Some(&dir.join("manifest.json")), &[]).ok();
    let data = match (&o.data, &manifest) {
        (Some(d), _) => d.clone(),
        (None, Some(m)) => m.corpus.clone(),
        (None, None) => return Err(CliError::Config("--data is required when the checkpoint has no manifest".into())),
    };
    let (_, eval) = load_labelled(&data.join(EVAL_FILE))?;
    let mut dc = manifest.map(|m| m.config.decode).unwrap_or_default();
    if let Some(b) = o.beam {
        dc.beam_size = b;
    }
    if let Some(al) = o.alpha {
        dc.alpha = al;
    }
    dc.validate()?;
    let model = Model::for_store(&ck.config, &ck.student)?;
    Ok((model, ck, eval, dc))
}

fn eval_cmd(a: EvalArgs, exec: Exec) -> Result<(), CliError> {
    let (model, ck, eval, decode) = load_for_decode(&a.opts)?;
    let cfg = EvalConfig {
        decode,
        snr_db: a.snr_db,
        noise_seed: a.noise_seed,
    };
    let r = evaluate(&model, &ck.student, &eval, a.opts.modality, &cfg, exec)?;
    if let Some(p) = &a.out {
        save_reports(p, std::slice::from_ref(&r))?;
    }
    println!("{}", serde_json::to_string(&r.summary)?);
    Ok(())
}

fn decode_cmd(a: DecodeArgs) -> Result<(), CliError> {
    let (model, ck, eval, decode) = load_for_decode(&a.opts)?;
    let tok = Tokenizer::new(model.config.vocab())?;
    let mut stdout = std::io::stdout().lock();
    for s in eval.iter().take(a.limit) {
        let r = decode_views(&model, &ck.student, &s.views, a.opts.modality, &decode)?;
        writeln!(
            stdout,
            "{}\t{}\t{}\t{:.4}",
            s.id,
            tok.render(&s.labels),
            tok.render(&r.best.tokens),
            r.best.combined
        )?;
    }
    Ok(())
}

const CURVES: [(&str, &str); 5] = [
    ("unlabelled", "kept_fraction_ctc"),
    ("unlabelled", "kept_fraction_attention"),
    ("val", "attention_accuracy"),
    ("val", "ctc_loss"),
    ("train", "epoch_loss"),
];

fn report(a: ReportArgs) -> Result<(), CliError> {
    let mut rows = vec!["run,epoch,split,modality,metric,value".to_string()];
    for dir in &a.runs {
        let recs = read_metrics(&dir.join("metrics.jsonl"))?;
        for r in recs {
            if CURVES.iter().any(|&(s, m)| r.split == s && r.metric == m) {
                rows.push(format!(
                    "{},{},{},{},{},{}",
                    dir.display(),
                    r.epoch,
                    r.split,
                    r.modality.as_deref().unwrap_or(""),
                    r.metric,
                    r.value
                ));
            }
        }
    }
    let text = rows.join("\n") + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
