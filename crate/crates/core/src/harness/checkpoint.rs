//! Binary checkpoints.
//!
//! Layout (little-endian): magic `LCRS`, format version (u32), dims header
//! (u32 count followed by that many u32 values), stage tag (u8), tensor
//! count (u32), then per tensor: name length (u32), UTF-8 name, rows (u32),
//! cols (u32) and `rows·cols` f32 values.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{Catalog, Window};
use crate::error::{Error, Result};
use crate::model::{Aggregation, Model, ModelConfig};
use crate::nn::{ParamStore, Tensor2};

pub const MAGIC: &[u8; 4] = b"LCRS";
pub const FORMAT_VERSION: u32 = 1;
const DIMS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrained,
    Rl,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Pretrained => 0,
            Stage::Rl => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Rl => "rl",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: Model,
}

fn dims(c: &ModelConfig) -> Result<[u32; DIMS]> {
    let v = [
        c.d,
        c.heads,
        c.encoder_layers,
        c.ffn_hidden,
        c.steps,
        c.use_cross as usize,
        c.aggregation.code() as usize,
        c.layer_norm as usize,
        c.head_hidden[0],
        c.head_hidden[1],
        c.catalog.users,
        c.catalog.items,
        c.catalog.words,
        c.window.max_search,
        c.window.max_rec,
    ];
    let mut out = [0u32; DIMS];
    for (o, x) in out.iter_mut().zip(v) {
        *o = u32::try_from(x).map_err(|_| Error::Checkpoint(format!("dimension {x} exceeds u32")))?;
    }
    Ok(out)
}

fn config_from_dims(v: &[u32]) -> Result<ModelConfig> {
    if v.len() != DIMS {
        return Err(Error::Checkpoint(format!("expected {DIMS} dims, found {}", v.len())));
    }
    let u = |i: usize| v[i] as usize;
    let mut c = ModelConfig::new(
        Catalog {
            users: u(10),
            items: u(11),
            words: u(12),
        },
        Window {
            max_search: u(13),
            max_rec: u(14),
        },
        u(0),
    );
    c.heads = u(1);
    c.encoder_layers = u(2);
    c.ffn_hidden = u(3);
    c.steps = u(4);
    c.use_cross = v[5] != 0;
    c.aggregation = Aggregation::from_code(v[6])?;
    c.layer_norm = v[7] != 0;
    c.head_hidden = [u(8), u(9)];
    Ok(c)
}

impl Checkpoint {
    pub fn new(stage: Stage, model: Model) -> Self {
        Self { stage, model }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(DIMS as u32).to_le_bytes());
        for x in dims(&self.model.config)? {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.push(self.stage.tag());
        let entries = self.model.store.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
            for &x in e.value.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}; this build reads version {FORMAT_VERSION}"
            )));
        }
        let n = read_u32(&mut r)? as usize;
        let dims = (0..n).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let config = config_from_dims(&dims)?;
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag)?;
        let stage = match tag[0] {
            0 => Stage::Pretrained,
            1 => Stage::Rl,
            t => return Err(Error::Checkpoint(format!("unknown stage tag {t}"))),
        };
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from(f32::from_le_bytes(b)));
            }
            let t = Tensor2::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            store.add(name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            stage,
            model: Model::from_store(config, store)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("checkpoint is truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
