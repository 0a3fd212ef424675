//! `PNFM` model checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "PNFM" version
//! input_width input_height base_channels num_stages blocks_per_stage
//! leff_ratio output_activation bottleneck_heads
//! encoder_heads[num_stages] decoder_heads[num_stages]
//! parameter_count
//! per parameter: name_len name_bytes ndim dims[ndim] f64_le[product(dims)]
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, OutputActivation, PanoFormer};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNFM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn u32_of(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::InvalidInput(format!("{v} exceeds u32")))
}

pub fn write_checkpoint(w: &mut impl Write, model: &PanoFormer) -> Result<()> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let activation = match c.output_activation {
        OutputActivation::Linear => 0,
        OutputActivation::Softplus => 1,
    };
    let header = [
        c.input_width,
        c.input_height,
        c.base_channels,
        c.num_stages,
        c.blocks_per_stage,
        c.leff_ratio,
        activation,
        c.bottleneck_heads,
    ];
    for v in header
        .iter()
        .chain(&c.encoder_heads)
        .chain(&c.decoder_heads)
    {
        out.extend_from_slice(&u32_of(*v)?);
    }
    out.extend_from_slice(&u32_of(model.params.len())?);
    for p in model.params.iter() {
        out.extend_from_slice(&u32_of(p.name.len())?);
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&u32_of(p.tensor.shape.len())?);
        for &d in &p.tensor.shape {
            out.extend_from_slice(&u32_of(d)?);
        }
        for v in &p.tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                format: "PNFM",
                detail: format!("truncated at byte {}", self.pos),
            }),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Reads a checkpoint and rebuilds the model it describes.
pub fn read_checkpoint(r: &mut impl Read) -> Result<PanoFormer> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut rd = Reader { buf, pos: 0 };
    let bad = |detail: String| Error::Format {
        format: "PNFM",
        detail,
    };
    if rd.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Unsupported {
            format: "PNFM",
            detail: format!("version {version}"),
        });
    }
    let mut h = [0usize; 8];
    for v in &mut h {
        *v = rd.u32()?;
    }
    let stages = h[3];
    if stages > 16 {
        return Err(bad(format!("{stages} stages")));
    }
    let mut heads = Vec::with_capacity(2 * stages);
    for _ in 0..2 * stages {
        heads.push(rd.u32()?);
    }
    let output_activation = match h[6] {
        0 => OutputActivation::Linear,
        1 => OutputActivation::Softplus,
        other => return Err(bad(format!("output activation code {other}"))),
    };
    let config = ModelConfig {
        input_width: h[0],
        input_height: h[1],
        base_channels: h[2],
        num_stages: stages,
        blocks_per_stage: h[4],
        leff_ratio: h[5],
        output_activation,
        bottleneck_heads: h[7],
        encoder_heads: heads[..stages].to_vec(),
        decoder_heads: heads[stages..].to_vec(),
    };
    config.validate()?;
    let count = rd.u32()?;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = rd.u32()?;
        let name = String::from_utf8(rd.take(len)?.to_vec())
            .map_err(|_| bad("parameter name is not UTF-8".into()))?;
        let ndim = rd.u32()?;
        if ndim > 8 {
            return Err(bad(format!("{name}: rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(rd.u32()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad(format!("{name}: shape {shape:?} overflows")))?;
        let data = rd
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        named.push((name, Tensor::new(&shape, data)?));
    }
    if rd.pos != rd.buf.len() {
        return Err(bad(format!("{} trailing bytes", rd.buf.len() - rd.pos)));
    }
    let mut model = PanoFormer::build(config, 0)?;
    model.load_params(named)?;
    Ok(model)
}
