//! Binary checkpoint container.
//!
//! Layout, all little-endian: magic `MOH1`, u32 version, u32 tensor
//! count, then per tensor: u16 name length, name bytes, u8 rank, one u64
//! per dimension, f64 data. Model/trainer metadata rides along as
//! reserved `__meta/...` records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MohError, Result};
use crate::moh::{MoHConfig, RouterMode, RouterState};
use crate::tensor::Tensor;
use crate::train::{Model, ModelMode};

pub const MAGIC: &[u8; 4] = b"MOH1";
pub const VERSION: u32 = 1;

#[derive(Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub cfg: MoHConfig,
    pub mode: ModelMode,
    pub num_classes: usize,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    /// Named weight tensors in a fixed, documented order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, rng_seed: u64, rng_word_pos: u128) -> Checkpoint {
        Checkpoint {
            version: VERSION,
            cfg: model.cfg,
            mode: model.mode,
            num_classes: model.num_classes,
            step,
            rng_seed,
            rng_word_pos,
            tensors: model.params(),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| MohError::MalformedRecord {
                name: name.to_string(),
                detail: "missing from checkpoint".into(),
            })
    }

    /// Rebuild a runnable model. Weight tensors come back trainable so a
    /// loaded checkpoint can resume training.
    pub fn to_model(&self) -> Result<Model> {
        let cfg = self.cfg;
        cfg.validate()?;
        let mut weights = crate::attention::MHAWeights::new(
            cfg.heads, cfg.d_in, cfg.d_k, cfg.d_v, cfg.d_out,
        )?;
        let expect = |t: &Tensor, shape: &[usize], name: &str| -> Result<Tensor> {
            if t.shape() != shape {
                return Err(MohError::MalformedRecord {
                    name: name.to_string(),
                    detail: format!("shape {:?}, expected {:?}", t.shape(), shape),
                });
            }
            Ok(t.detach().with_grad())
        };
        let (hk, hv) = (cfg.d_k / cfg.heads, cfg.d_v / cfg.heads);
        for i in 0..cfg.heads {
            weights.w_q[i] = expect(
                self.tensor(&format!("attn/w_q_{i}"))?,
                &[cfg.d_in, hk],
                "w_q",
            )?;
            weights.w_k[i] = expect(
                self.tensor(&format!("attn/w_k_{i}"))?,
                &[cfg.d_in, hk],
                "w_k",
            )?;
            weights.w_v[i] = expect(
                self.tensor(&format!("attn/w_v_{i}"))?,
                &[cfg.d_in, hv],
                "w_v",
            )?;
            weights.w_o_rows[i] = expect(
                self.tensor(&format!("attn/w_o_{i}"))?,
                &[hv, cfg.d_out],
                "w_o",
            )?;
        }
        let router = if self.mode == ModelMode::Moh && cfg.router_mode == RouterMode::LearnedTwoStage
        {
            Some(RouterState {
                w_shared: expect(
                    self.tensor("router/w_shared")?,
                    &[cfg.shared_heads, cfg.d_in],
                    "w_shared",
                )?,
                w_routed: expect(
                    self.tensor("router/w_routed")?,
                    &[cfg.routed_heads(), cfg.d_in],
                    "w_routed",
                )?,
                w_head_type: expect(self.tensor("router/w_head_type")?, &[2, cfg.d_in], "w_head_type")?,
            })
        } else {
            None
        };
        Ok(Model {
            mode: self.mode,
            cfg,
            num_classes: self.num_classes,
            weights,
            router,
            w_cls: expect(
                self.tensor("cls/w")?,
                &[cfg.d_out, self.num_classes],
                "cls/w",
            )?,
            b_cls: expect(self.tensor("cls/b")?, &[1, self.num_classes], "cls/b")?,
        })
    }
}

fn meta_records(c: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mode_tag = match c.mode {
        ModelMode::Dense => 0.0,
        ModelMode::Moh => 1.0,
    };
    let router_tag = match c.cfg.router_mode {
        RouterMode::LearnedTwoStage => 0.0,
        RouterMode::ParameterFree => 1.0,
    };
    vec![
        (
            "__meta/config".to_string(),
            vec![11],
            vec![
                c.cfg.heads as f64,
                c.cfg.shared_heads as f64,
                c.cfg.top_k as f64,
                c.cfg.d_in as f64,
                c.cfg.d_k as f64,
                c.cfg.d_v as f64,
                c.cfg.d_out as f64,
                c.cfg.beta,
                router_tag,
                mode_tag,
                c.num_classes as f64,
            ],
        ),
        ("__meta/step".to_string(), vec![1], vec![c.step as f64]),
        (
            // Raw bit patterns; never used arithmetically.
            "__meta/rng".to_string(),
            vec![3],
            vec![
                f64::from_bits(c.rng_seed),
                f64::from_bits(c.rng_word_pos as u64),
                f64::from_bits((c.rng_word_pos >> 64) as u64),
            ],
        ),
    ]
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = meta_records(c).len() + c.tensors.len();
    w.write_all(&(count as u32).to_le_bytes())?;
    let mut write_record = |name: &str, shape: &[usize], data: &[f64]| -> Result<()> {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(MohError::MalformedRecord {
                name: name.to_string(),
                detail: "name too long".into(),
            });
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for (name, shape, data) in meta_records(c) {
        write_record(&name, &shape, &data)?;
    }
    for (name, t) in &c.tensors {
        write_record(name, &t.shape(), &t.data())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            MohError::Truncated
        } else {
            MohError::Io(e)
        }
    })
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(MohError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(MohError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| MohError::MalformedRecord {
            name: "<binary>".into(),
            detail: "tensor name is not UTF-8".into(),
        })?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        // 1 GiB sanity cap catches corrupt dimension fields before we
        // try to allocate from them.
        if numel > (1 << 27) {
            return Err(MohError::MalformedRecord {
                name,
                detail: format!("implausible element count {numel}"),
            });
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        records.push((name, shape, data));
    }

    let take = |records: &[(String, Vec<usize>, Vec<f64>)], name: &str| -> Result<Vec<f64>> {
        records
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, d)| d.clone())
            .ok_or_else(|| MohError::MalformedRecord {
                name: name.to_string(),
                detail: "missing metadata record".into(),
            })
    };
    let meta = take(&records, "__meta/config")?;
    if meta.len() != 11 {
        return Err(MohError::MalformedRecord {
            name: "__meta/config".into(),
            detail: format!("expected 11 fields, got {}", meta.len()),
        });
    }
    let router_mode = match meta[8] as i64 {
        0 => RouterMode::LearnedTwoStage,
        1 => RouterMode::ParameterFree,
        other => {
            return Err(MohError::MalformedRecord {
                name: "__meta/config".into(),
                detail: format!("unknown router mode tag {other}"),
            })
        }
    };
    let mode = match meta[9] as i64 {
        0 => ModelMode::Dense,
        1 => ModelMode::Moh,
        other => {
            return Err(MohError::MalformedRecord {
                name: "__meta/config".into(),
                detail: format!("unknown model mode tag {other}"),
            })
        }
    };
    let cfg = MoHConfig {
        heads: meta[0] as usize,
        shared_heads: meta[1] as usize,
        top_k: meta[2] as usize,
        d_in: meta[3] as usize,
        d_k: meta[4] as usize,
        d_v: meta[5] as usize,
        d_out: meta[6] as usize,
        beta: meta[7],
        router_mode,
    };
    let step = take(&records, "__meta/step")?[0] as u64;
    let rng = take(&records, "__meta/rng")?;
    if rng.len() != 3 {
        return Err(MohError::MalformedRecord {
            name: "__meta/rng".into(),
            detail: "expected 3 fields".into(),
        });
    }
    let rng_seed = rng[0].to_bits();
    let rng_word_pos = (rng[1].to_bits() as u128) | ((rng[2].to_bits() as u128) << 64);

    let mut tensors = Vec::new();
    for (name, shape, data) in records {
        if name.starts_with("__meta/") {
            continue;
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MohError::MalformedRecord {
                name,
                detail: "shape/data length mismatch".into(),
            });
        }
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }

    Ok(Checkpoint {
        version,
        cfg,
        mode,
        num_classes: meta[10] as usize,
        step,
        rng_seed,
        rng_word_pos,
        tensors,
    })
}
