//! Corpus persistence: one little-endian binary record stream per split plus
//! a JSONL manifest.
//!
//! Split file layout: magic `USRC`, `u32` version, `u32` config length and
//! config JSON, `u32` split-name length and name, `u64` record count, then per
//! record: `u64` id, `u32` T_v, `u32` video_dim, `u32` r, `u32` audio_dim,
//! video floats, audio floats, `u32` label count (`u32::MAX` when unlabelled)
//! and `u32` label ids.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusConfig, DataError, LabelledSample, Tokenizer, UnlabelledSample, Views};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"USRC";
const VERSION: u32 = 1;
const NO_LABELS: u32 = u32::MAX;

pub const LABELLED_FILE: &str = "train_labelled.bin";
pub const UNLABELLED_FILE: &str = "train_unlabelled.bin";
pub const EVAL_FILE: &str = "eval.bin";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: u64,
    pub views: Views,
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestLine {
    pub split: String,
    pub id: u64,
    pub video_frames: usize,
    pub audio_frames: usize,
    pub transcript: Option<String>,
}

pub fn write_split<W: Write>(
    w: &mut W,
    cfg: &CorpusConfig,
    split: &str,
    records: &[Record],
) -> Result<(), DataError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    let cfg_json = serde_json::to_vec(cfg)?;
    w.write_u32::<LE>(cfg_json.len() as u32)?;
    w.write_all(&cfg_json)?;
    w.write_u32::<LE>(split.len() as u32)?;
    w.write_all(split.as_bytes())?;
    w.write_u64::<LE>(records.len() as u64)?;
    for r in records {
        let tv = r.views.video_frames();
        let ta = r.views.audio_frames();
        if tv == 0 || ta % tv != 0 {
            return Err(DataError::Format(format!("record {}: audio/video length mismatch", r.id)));
        }
        w.write_u64::<LE>(r.id)?;
        w.write_u32::<LE>(tv as u32)?;
        w.write_u32::<LE>(r.views.video.shape()[1] as u32)?;
        w.write_u32::<LE>((ta / tv) as u32)?;
        w.write_u32::<LE>(r.views.audio.shape()[1] as u32)?;
        for &x in r.views.video.data().iter().chain(r.views.audio.data()) {
            w.write_f32::<LE>(x)?;
        }
        match &r.labels {
            None => w.write_u32::<LE>(NO_LABELS)?,
            Some(l) => {
                w.write_u32::<LE>(l.len() as u32)?;
                for &id in l {
                    w.write_u32::<LE>(id as u32)?;
                }
            }
        }
    }
    Ok(())
}

fn read_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, DataError> {
    let mut v = vec![0f32; n];
    r.read_f32_into::<LE>(&mut v)?;
    Ok(v)
}

pub fn read_split<R: Read>(r: &mut R) -> Result<(CorpusConfig, String, Vec<Record>), DataError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    let cfg: CorpusConfig = serde_json::from_slice(&buf)?;
    let n = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    let split = String::from_utf8(buf).map_err(|e| DataError::Format(e.to_string()))?;
    let count = r.read_u64::<LE>()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let id = r.read_u64::<LE>()?;
        let tv = r.read_u32::<LE>()? as usize;
        let vd = r.read_u32::<LE>()? as usize;
        let ratio = r.read_u32::<LE>()? as usize;
        let ad = r.read_u32::<LE>()? as usize;
        let video = Tensor::new(&[tv, vd], read_vec(r, tv * vd)?)
            .map_err(|e| DataError::Format(e.to_string()))?;
        let audio = Tensor::new(&[tv * ratio, ad], read_vec(r, tv * ratio * ad)?)
            .map_err(|e| DataError::Format(e.to_string()))?;
        let nl = r.read_u32::<LE>()?;
        let labels = if nl == NO_LABELS {
            None
        } else {
            let mut l = Vec::with_capacity(nl as usize);
            for _ in 0..nl {
                let id = r.read_u32::<LE>()? as usize;
                if id >= cfg.vocab_size {
                    return Err(DataError::BadToken(id));
                }
                l.push(id);
            }
            Some(l)
        };
        records.push(Record {
            id,
            views: Views { video, audio },
            labels,
        });
    }
    Ok((cfg, split, records))
}

fn labelled_records(s: &[LabelledSample]) -> Vec<Record> {
    s.iter()
        .map(|s| Record {
            id: s.id,
            views: s.views.clone(),
            labels: Some(s.labels.clone()),
        })
        .collect()
}

fn into_labelled(records: Vec<Record>) -> Result<Vec<LabelledSample>, DataError> {
    records
        .into_iter()
        .map(|r| {
            let labels = r
                .labels
                .ok_or_else(|| DataError::Format(format!("record {} has no labels", r.id)))?;
            Ok(LabelledSample {
                id: r.id,
                views: r.views,
                labels,
            })
        })
        .collect()
}

/// Writes the three split files and the manifest into `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let unlab: Vec<Record> = corpus
        .unlabelled
        .iter()
        .map(|s| Record {
            id: s.id,
            views: s.views.clone(),
            labels: None,
        })
        .collect();
    let splits = [
        ("train_labelled", LABELLED_FILE, labelled_records(&corpus.labelled)),
        ("train_unlabelled", UNLABELLED_FILE, unlab),
        ("eval", EVAL_FILE, labelled_records(&corpus.eval)),
    ];
    let tok = Tokenizer::new(corpus.config.vocab())?;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    for (split, file, records) in &splits {
        let mut w = BufWriter::new(File::create(dir.join(file))?);
        write_split(&mut w, &corpus.config, split, records)?;
        w.flush()?;
        for r in records {
            let line = ManifestLine {
                split: split.to_string(),
                id: r.id,
                video_frames: r.views.video_frames(),
                audio_frames: r.views.audio_frames(),
                transcript: r.labels.as_ref().map(|l| tok.render(l)),
            };
            serde_json::to_writer(&mut manifest, &line)?;
            manifest.write_all(b"\n")?;
        }
    }
    manifest.flush()?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<(CorpusConfig, Vec<Record>), DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let (cfg, _, records) = read_split(&mut r)?;
    Ok((cfg, records))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, DataError> {
    let (config, lab) = load_split(&dir.join(LABELLED_FILE))?;
    let (_, unlab) = load_split(&dir.join(UNLABELLED_FILE))?;
    let (_, eval) = load_split(&dir.join(EVAL_FILE))?;
    Ok(Corpus {
        config,
        labelled: into_labelled(lab)?,
        unlabelled: unlab
            .into_iter()
            .map(|r| UnlabelledSample {
                id: r.id,
                views: r.views,
            })
            .collect(),
        eval: into_labelled(eval)?,
    })
}

/// Loads a labelled split file, e.g. for evaluation.
pub fn load_labelled(path: &Path) -> Result<(CorpusConfig, Vec<LabelledSample>), DataError> {
    let (cfg, records) = load_split(path)?;
    Ok((cfg, into_labelled(records)?))
}
