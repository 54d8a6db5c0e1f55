//! Checkpoint container: magic "RTCK", u32 version, then a length-prefixed
//! section table. Tensors are encoded as (u16 name-len, name, u8 dtype,
//! u8 rank, u32 dims, little-endian payload). Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use super::rtt::RttState;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::schedules::{NoiseSchedule, ScheduleKind};

const MAGIC: &[u8; 4] = b"RTCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub m: Vec<(String, Tensor<f32>)>,
    pub v: Vec<(String, Tensor<f32>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: String,
    pub epoch: u32,
    pub seed: u64,
    pub config_text: String,
    pub schedule: Option<NoiseSchedule>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam: Option<AdamSnapshot>,
    pub rtt: RttState,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.stage == other.stage
            && self.epoch == other.epoch
            && self.seed == other.seed
            && self.config_text == other.config_text
            && self.schedule == other.schedule
            && self.params == other.params
            && self.adam == other.adam
            && self.rtt == other.rtt
    }
}

// ── low-level writers ───────────────────────────────────────────────────

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::data(format!("name too long: {name}")));
    }
    put_u16(buf, bytes.len() as u16);
    buf.extend_from_slice(bytes);
    Ok(())
}

fn put_tensor_f32(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_name(buf, name)?;
    buf.push(0); // dtype f32
    put_tensor_dims(buf, t.shape())?;
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_tensor_f64(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    put_name(buf, name)?;
    buf.push(1); // dtype f64
    put_tensor_dims(buf, shape)?;
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_tensor_dims(buf: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::data("tensor rank too large".to_string()));
    }
    buf.push(shape.len() as u8);
    for &d in shape {
        if d > u32::MAX as usize {
            return Err(Error::data("tensor dim too large".to_string()));
        }
        put_u32(buf, d as u32);
    }
    Ok(())
}

// ── low-level readers ───────────────────────────────────────────────────

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::data("checkpoint name is not UTF-8".to_string()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

enum AnyTensor {
    F32(Tensor<f32>),
    F64(#[allow(dead_code)] Vec<usize>, Vec<f64>),
}

fn read_tensor(c: &mut Cursor) -> Result<(String, AnyTensor)> {
    let name = c.name()?;
    let dtype = c.u8()?;
    let rank = c.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(c.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    match dtype {
        0 => {
            let raw = c.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok((name, AnyTensor::F32(Tensor::new(shape, data)?)))
        }
        1 => {
            let raw = c.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok((name, AnyTensor::F64(shape, data)))
        }
        other => Err(Error::data(format!("unknown tensor dtype {other}"))),
    }
}

fn tensor_list(items: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    put_u32(&mut buf, items.len() as u32);
    for (name, t) in items {
        put_tensor_f32(&mut buf, name, t)?;
    }
    Ok(buf)
}

fn read_tensor_list(c: &mut Cursor) -> Result<Vec<(String, Tensor<f32>)>> {
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        match read_tensor(c)? {
            (name, AnyTensor::F32(t)) => out.push((name, t)),
            (name, AnyTensor::F64(..)) => {
                return Err(Error::data(format!(
                    "tensor {name}: expected f32 payload"
                )))
            }
        }
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();

        let meta = format!(
            "stage={}\nepoch={}\nseed={}\nschedule_kind={}\n",
            self.stage,
            self.epoch,
            self.seed,
            self.schedule
                .as_ref()
                .map(|s| s.kind().name())
                .unwrap_or("none"),
        );
        sections.push(("meta", meta.into_bytes()));
        sections.push(("config", self.config_text.clone().into_bytes()));

        if let Some(s) = &self.schedule {
            let mut buf = Vec::new();
            put_u32(&mut buf, 1);
            put_tensor_f64(&mut buf, "betas", &[s.len()], s.betas())?;
            sections.push(("schedule", buf));
        }

        sections.push(("params", tensor_list(&self.params)?));

        if let Some(a) = &self.adam {
            let mut buf = Vec::new();
            put_u64(&mut buf, a.step);
            buf.extend(tensor_list(&a.m)?);
            buf.extend(tensor_list(&a.v)?);
            sections.push(("moments", buf));
        }

        {
            let mut buf = Vec::new();
            put_f64(&mut buf, self.rtt.global_min_epoch_avg);
            let (sum, count) = self.rtt.accumulators();
            put_f64(&mut buf, sum);
            put_u64(&mut buf, count);
            put_u32(&mut buf, self.rtt.reps_histogram.len() as u32);
            for &h in &self.rtt.reps_histogram {
                put_u64(&mut buf, h);
            }
            sections.push(("rtt", buf));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, payload) in &sections {
            put_name(&mut out, name)?;
            put_u64(&mut out, payload.len() as u64);
            out.extend_from_slice(payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut c = Cursor::new(bytes);
        if c.take(4)? != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)".to_string()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::data(format!(
                "checkpoint version {version} unsupported (expected {VERSION})"
            )));
        }
        let n_sections = c.u32()? as usize;
        let mut meta_text = String::new();
        let mut config_text = String::new();
        let mut schedule_betas: Option<Vec<f64>> = None;
        let mut params = Vec::new();
        let mut adam = None;
        let mut rtt = RttState::new();
        for _ in 0..n_sections {
            let name = c.name()?;
            let len = c.u64()? as usize;
            let payload = c.take(len)?;
            let mut pc = Cursor::new(payload);
            match name.as_str() {
                "meta" => {
                    meta_text = String::from_utf8(payload.to_vec())
                        .map_err(|_| Error::data("meta section not UTF-8".to_string()))?;
                }
                "config" => {
                    config_text = String::from_utf8(payload.to_vec())
                        .map_err(|_| Error::data("config section not UTF-8".to_string()))?;
                }
                "schedule" => {
                    let count = pc.u32()?;
                    if count != 1 {
                        return Err(Error::data("schedule section malformed".to_string()));
                    }
                    match read_tensor(&mut pc)? {
                        (_, AnyTensor::F64(_, data)) => schedule_betas = Some(data),
                        _ => {
                            return Err(Error::data(
                                "schedule betas must be f64".to_string(),
                            ))
                        }
                    }
                    if !pc.done() {
                        return Err(Error::data("trailing bytes in schedule".to_string()));
                    }
                }
                "params" => {
                    params = read_tensor_list(&mut pc)?;
                    if !pc.done() {
                        return Err(Error::data("trailing bytes in params".to_string()));
                    }
                }
                "moments" => {
                    let step = pc.u64()?;
                    let m = read_tensor_list(&mut pc)?;
                    let v = read_tensor_list(&mut pc)?;
                    if !pc.done() {
                        return Err(Error::data("trailing bytes in moments".to_string()));
                    }
                    adam = Some(AdamSnapshot { step, m, v });
                }
                "rtt" => {
                    let global_min = pc.f64()?;
                    let sum = pc.f64()?;
                    let count = pc.u64()?;
                    let hist_len = pc.u32()? as usize;
                    let mut hist = Vec::with_capacity(hist_len);
                    for _ in 0..hist_len {
                        hist.push(pc.u64()?);
                    }
                    if !pc.done() {
                        return Err(Error::data("trailing bytes in rtt".to_string()));
                    }
                    rtt = RttState::restore(global_min, sum, count, hist);
                }
                other => {
                    return Err(Error::data(format!("unknown checkpoint section '{other}'")));
                }
            }
        }
        if !c.done() {
            return Err(Error::data("trailing bytes after sections".to_string()));
        }

        let meta = parse_meta(&meta_text)?;
        let schedule = match (meta.schedule_kind, schedule_betas) {
            (Some(kind), Some(betas)) => Some(NoiseSchedule::from_betas(kind, betas)?),
            (None, None) => None,
            _ => {
                return Err(Error::data(
                    "schedule kind and betas must come together".to_string(),
                ))
            }
        };
        Ok(Checkpoint {
            stage: meta.stage,
            epoch: meta.epoch,
            seed: meta.seed,
            config_text,
            schedule,
            params,
            adam,
            rtt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let bytes = self.to_bytes()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Meta {
    stage: String,
    epoch: u32,
    seed: u64,
    schedule_kind: Option<ScheduleKind>,
}

fn parse_meta(text: &str) -> Result<Meta> {
    let mut stage = None;
    let mut epoch = None;
    let mut seed = None;
    let mut schedule_kind = None;
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        match k {
            "stage" => stage = Some(v.to_string()),
            "epoch" => {
                epoch = Some(v.parse::<u32>().map_err(|_| {
                    Error::data(format!("bad epoch '{v}' in checkpoint meta"))
                })?)
            }
            "seed" => {
                seed = Some(v.parse::<u64>().map_err(|_| {
                    Error::data(format!("bad seed '{v}' in checkpoint meta"))
                })?)
            }
            "schedule_kind" => {
                schedule_kind = match v {
                    "none" => None,
                    other => Some(ScheduleKind::parse(other)?),
                }
            }
            _ => {}
        }
    }
    Ok(Meta {
        stage: stage.ok_or_else(|| Error::data("checkpoint meta missing stage".to_string()))?,
        epoch: epoch.ok_or_else(|| Error::data("checkpoint meta missing epoch".to_string()))?,
        seed: seed.ok_or_else(|| Error::data("checkpoint meta missing seed".to_string()))?,
        schedule_kind,
    })
}
