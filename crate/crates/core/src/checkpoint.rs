//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "SHADDCKP"
//! version  u32      1
//! count    u32      number of records
//! record   name_len u32, name (UTF-8), dtype u8, ndim u32, dims u32 × ndim,
//!          payload_len u64, payload
//! ```
//!
//! dtype 0 = f32, 1 = i8, 2 = JSON text. Integers and floats are
//! little-endian. Record `meta` (JSON) holds the model config, step counter
//! and MoE latencies; every parameter is stored under its dotted name with its
//! momentum under `<name>#velocity`; shift layers add `<prefix>#sign` and
//! `<prefix>#exponent`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::attention::Projection;
use crate::error::{Error, Result};
use crate::model::{FeedForward, ModelConfig, Vit};
use crate::param::Params;
use crate::quant::ShiftLinear;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SHADDCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const VELOCITY: &str = "#velocity";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor),
    I8 { shape: Vec<usize>, data: Vec<i8> },
    Json(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    step: u64,
    moe_lat: BTreeMap<String, Vec<f64>>,
}

fn moe_latencies(model: &Vit) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (i, b) in model.blocks.iter().enumerate() {
        for (name, p) in ["q", "k", "v", "o"].iter().zip(b.attn.projections()) {
            if let Projection::Moe(m) = p {
                out.insert(format!("blocks.{i}.attn.{name}"), m.lat.clone());
            }
        }
        if let FeedForward::Moe(m) = &b.ff {
            out.insert(format!("blocks.{i}.mlp"), m.lat.clone());
        }
    }
    out
}

fn restore_latencies(model: &mut Vit, lat: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let get = |k: &str| {
        lat.get(k).cloned().ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("meta lacks latencies for {k}"),
        })
    };
    for (i, b) in model.blocks.iter_mut().enumerate() {
        for (name, p) in ["q", "k", "v", "o"].iter().zip(b.attn.projections_mut()) {
            if let Projection::Moe(m) = p {
                m.set_latencies(get(&format!("blocks.{i}.attn.{name}"))?)?;
            }
        }
        if let FeedForward::Moe(m) = &mut b.ff {
            m.set_latencies(get(&format!("blocks.{i}.mlp"))?)?;
        }
    }
    Ok(())
}

/// Flattens the full training state into records.
pub fn to_records(model: &mut Vit) -> Result<Vec<Record>> {
    let meta = Meta {
        config: model.cfg.clone(),
        step: model.step,
        moe_lat: moe_latencies(model),
    };
    let mut out = vec![Record {
        name: "meta".into(),
        payload: Payload::Json(serde_json::to_string(&meta)?),
    }];
    model.visit_params("", &mut |name, p| {
        out.push(Record {
            name: name.to_string(),
            payload: Payload::F32(p.value.clone()),
        });
        out.push(Record {
            name: format!("{name}{VELOCITY}"),
            payload: Payload::F32(p.velocity.clone()),
        });
    });
    model.visit_linears(&mut |prefix, l| {
        if let Some(s) = &l.shift {
            let shape = vec![s.in_dim, s.out_dim];
            out.push(Record {
                name: format!("{prefix}#sign"),
                payload: Payload::I8 {
                    shape: shape.clone(),
                    data: s.sign.clone(),
                },
            });
            out.push(Record {
                name: format!("{prefix}#exponent"),
                payload: Payload::I8 {
                    shape,
                    data: s.exponent.clone(),
                },
            });
        }
    });
    Ok(out)
}

/// Rebuilds a model from records written by [`to_records`].
pub fn from_records(records: Vec<Record>) -> Result<Vit> {
    let mut map: BTreeMap<String, Payload> = BTreeMap::new();
    for r in records {
        if map.insert(r.name.clone(), r.payload).is_some() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("duplicate record {}", r.name),
            });
        }
    }
    let Some(Payload::Json(meta)) = map.remove("meta") else {
        return Err(Error::Format {
            offset: 0,
            msg: "missing meta record".into(),
        });
    };
    let meta: Meta = serde_json::from_str(&meta)?;
    let mut model = Vit::new(meta.config)?;
    model.step = meta.step;
    restore_latencies(&mut model, &meta.moe_lat)?;
    let mut err = None;
    let mut take_f32 = |map: &mut BTreeMap<String, Payload>, name: &str, want: &[usize]| -> Option<Tensor> {
        match map.remove(name) {
            Some(Payload::F32(t)) if t.shape() == want => Some(t),
            other => {
                err.get_or_insert_with(|| Error::Format {
                    offset: 0,
                    msg: format!(
                        "record {name}: expected f32 {want:?}, found {}",
                        match other {
                            None => "nothing".to_string(),
                            Some(Payload::F32(t)) => format!("f32 {:?}", t.shape()),
                            Some(_) => "another dtype".to_string(),
                        }
                    ),
                });
                None
            }
        }
    };
    model.visit_params("", &mut |name, p| {
        let shape = p.value.shape().to_vec();
        if let Some(t) = take_f32(&mut map, name, &shape) {
            p.value = t;
        }
        if let Some(t) = take_f32(&mut map, &format!("{name}{VELOCITY}"), &shape) {
            p.velocity = t;
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut err = None;
    model.visit_linears(&mut |prefix, l| {
        let Some(current) = &l.shift else { return };
        let fetch = |map: &mut BTreeMap<String, Payload>, key: String| match map.remove(&key) {
            Some(Payload::I8 { shape, data }) if shape == [current.in_dim, current.out_dim] => Ok(data),
            _ => Err(Error::Format {
                offset: 0,
                msg: format!("record {key}: expected i8 matrix"),
            }),
        };
        match (
            fetch(&mut map, format!("{prefix}#sign")),
            fetch(&mut map, format!("{prefix}#exponent")),
        ) {
            (Ok(sign), Ok(exponent)) => {
                l.shift = Some(ShiftLinear {
                    in_dim: current.in_dim,
                    out_dim: current.out_dim,
                    sign,
                    exponent,
                });
            }
            (Err(e), _) | (_, Err(e)) => {
                err.get_or_insert(e);
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = map.keys().next() {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unexpected record {name}"),
        });
    }
    Ok(model)
}

pub fn write_records(records: &[Record], w: &mut impl Write) -> Result<()> {
    let u32_of = |v: usize| u32::try_from(v).map_err(|_| Error::Invalid(format!("{v} exceeds u32")));
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(u32_of(records.len())?)?;
    for r in records {
        w.write_u32::<LittleEndian>(u32_of(r.name.len())?)?;
        w.write_all(r.name.as_bytes())?;
        let (dtype, shape, bytes): (u8, Vec<usize>, Vec<u8>) = match &r.payload {
            Payload::F32(t) => (
                0,
                t.shape().to_vec(),
                t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            Payload::I8 { shape, data } => (1, shape.clone(), data.iter().map(|&v| v as u8).collect()),
            Payload::Json(s) => (2, vec![s.len()], s.as_bytes().to_vec()),
        };
        w.write_u8(dtype)?;
        w.write_u32::<LittleEndian>(u32_of(shape.len())?)?;
        for d in shape {
            w.write_u32::<LittleEndian>(u32_of(d)?)?;
        }
        w.write_u64::<LittleEndian>(bytes.len() as u64)?;
        w.write_all(&bytes)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset,
            msg: msg.into(),
        }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got != n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Upper bound on a single payload, guarding allocations on corrupt input.
const MAX_PAYLOAD: u64 = 1 << 32;

pub fn read_records(r: &mut impl Read) -> Result<Vec<Record>> {
    let mut rd = Reader { inner: r, offset: 0 };
    if rd.bytes(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = rd.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = rd.u32("record count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = rd.u32("name length")? as usize;
        if len > 4096 {
            return Err(rd.fail(format!("name length {len} too large")));
        }
        let name = String::from_utf8(rd.bytes(len, "name")?).map_err(|_| rd.fail("name is not UTF-8"))?;
        let dtype = rd.bytes(1, "dtype")?[0];
        let ndim = rd.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(rd.fail(format!("ndim {ndim} too large")));
        }
        let shape = (0..ndim)
            .map(|_| rd.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let at = rd.offset;
        let plen = rd.u64("payload length")?;
        if plen > MAX_PAYLOAD {
            return Err(rd.fail(format!("payload length {plen} too large")));
        }
        let elems: usize = shape.iter().product();
        let expect = match dtype {
            0 => elems as u64 * 4,
            1 => elems as u64,
            2 => plen,
            _ => {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("unknown dtype {dtype}"),
                })
            }
        };
        if plen != expect {
            return Err(Error::Format {
                offset: at,
                msg: format!("record {name}: payload {plen} bytes, shape needs {expect}"),
            });
        }
        let bytes = rd.bytes(plen as usize, "payload")?;
        let payload = match dtype {
            0 => {
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Payload::F32(Tensor::new(shape, data).map_err(|e| Error::Format {
                    offset: at,
                    msg: e.to_string(),
                })?)
            }
            1 => Payload::I8 {
                shape,
                data: bytes.into_iter().map(|b| b as i8).collect(),
            },
            _ => Payload::Json(String::from_utf8(bytes).map_err(|_| Error::Format {
                offset: at,
                msg: "JSON is not UTF-8".into(),
            })?),
        };
        out.push(Record { name, payload });
    }
    Ok(out)
}

pub fn save(model: &mut Vit, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&to_records(model)?, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vit> {
    from_records(read_records(&mut BufReader::new(File::open(path)?))?)
}
