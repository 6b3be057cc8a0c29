//! Versioned little-endian checkpoint: magic `USRK`, `u32` version, model
//! config JSON, a flags byte (bit 0 teacher, bit 1 optimizer), the student
//! store, then the optional teacher store and `f64` optimizer moments. A store is
//! a `u32` count of `(name, ndim, dims, f32 data)` entries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{ModelConfig, ModelError};
use crate::autodiff::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"USRK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub student: ParamStore<f32>,
    pub teacher: Option<ParamStore<f32>>,
    pub optimizer: Option<OptimizerState>,
}

fn fmt_err(m: impl Into<String>) -> ModelError {
    ModelError::Format(m.into())
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<(), ModelError> {
    w.write_u32::<LE>(b.len() as u32)?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, ModelError> {
    let n = r.read_u32::<LE>()? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn write_store<W: Write>(w: &mut W, s: &ParamStore<f32>) -> Result<(), ModelError> {
    w.write_u32::<LE>(s.len() as u32)?;
    for (_, p) in s.iter() {
        write_bytes(w, p.name.as_bytes())?;
        w.write_u32::<LE>(p.value.ndim() as u32)?;
        for &d in p.value.shape() {
            w.write_u32::<LE>(d as u32)?;
        }
        for &x in p.value.data() {
            w.write_f32::<LE>(x)?;
        }
    }
    Ok(())
}

fn read_store<R: Read>(r: &mut R) -> Result<ParamStore<f32>, ModelError> {
    let n = r.read_u32::<LE>()?;
    let mut s = ParamStore::new();
    for _ in 0..n {
        let name = String::from_utf8(read_bytes(r)?).map_err(|e| fmt_err(e.to_string()))?;
        let nd = r.read_u32::<LE>()? as usize;
        let shape = (0..nd)
            .map(|_| r.read_u32::<LE>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let mut data = vec![0f32; shape.iter().product()];
        r.read_f32_into::<LE>(&mut data)?;
        s.add(name, Tensor::new(&shape, data)?);
    }
    Ok(s)
}

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    write_bytes(w, &serde_json::to_vec(&ck.config)?)?;
    let flags = u8::from(ck.teacher.is_some()) | (u8::from(ck.optimizer.is_some()) << 1);
    w.write_u8(flags)?;
    write_store(w, &ck.student)?;
    if let Some(t) = &ck.teacher {
        if !t.same_layout(&ck.student) {
            return Err(fmt_err("teacher layout differs from student"));
        }
        write_store(w, t)?;
    }
    if let Some(o) = &ck.optimizer {
        w.write_u64::<LE>(o.step)?;
        for (i, (_, p)) in ck.student.iter().enumerate() {
            let n = p.value.numel();
            if o.m[i].len() != n || o.v[i].len() != n {
                return Err(fmt_err(format!("optimizer state for {} has wrong size", p.name)));
            }
            for &x in o.m[i].iter().chain(&o.v[i]) {
                w.write_f64::<LE>(x)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint, ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let config: ModelConfig = serde_json::from_slice(&read_bytes(r)?)?;
    let flags = r.read_u8()?;
    let student = read_store(r)?;
    let teacher = if flags & 1 != 0 {
        let t = read_store(r)?;
        if !t.same_layout(&student) {
            return Err(fmt_err("teacher layout differs from student"));
        }
        Some(t)
    } else {
        None
    };
    let optimizer = if flags & 2 != 0 {
        let step = r.read_u64::<LE>()?;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (_, p) in student.iter() {
            let n = p.value.numel();
            let mut a = vec![0f64; n];
            let mut b = vec![0f64; n];
            r.read_f64_into::<LE>(&mut a)?;
            r.read_f64_into::<LE>(&mut b)?;
            m.push(a);
            v.push(b);
        }
        Some(OptimizerState { step, m, v })
    } else {
        None
    };
    Ok(Checkpoint {
        config,
        student,
        teacher,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
