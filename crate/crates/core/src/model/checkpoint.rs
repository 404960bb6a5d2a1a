//! `FDFH` checkpoint codec.
//!
//! Layout: magic `FDFH`, version `u32`, tensor count `u32`, then per tensor a
//! `u32` name length, the UTF-8 name, a `u32` rank, `rank` dims as `u64` and
//! the row-major values as little-endian `f64`. Scalars are rank 0.

use std::collections::BTreeMap;

use super::{BatchNorm, ModelParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::wire::{put_f64s, put_u32, put_u64, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDFH";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u64(out, d as u64);
    }
    put_f64s(out, values);
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let dims = params.dims();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, 8);
    put_tensor(&mut out, "trunk.w1", &[dims.input, dims.hidden], params.w1.as_slice());
    put_tensor(&mut out, "trunk.b1", &[dims.hidden], &params.b1);
    put_tensor(&mut out, "trunk.w2", &[dims.hidden, dims.output], params.w2.as_slice());
    put_tensor(&mut out, "trunk.b2", &[dims.output], &params.b2);
    put_tensor(&mut out, "bn.running_mean", &[dims.output], &params.bn.running_mean);
    put_tensor(&mut out, "bn.running_var", &[dims.output], &params.bn.running_var);
    put_tensor(&mut out, "bn.momentum", &[], &[params.bn.momentum]);
    put_tensor(&mut out, "bn.eps", &[], &[params.bn.eps]);
    out
}

struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
    offset: usize,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let offset = r.offset();
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::parse(offset, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64("dim")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse(offset, "tensor size overflow"))?;
        let values = r.f64s(n, &name)?;
        if tensors
            .insert(name.clone(), Tensor { dims, values, offset })
            .is_some()
        {
            return Err(Error::parse(offset, format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;

    let mut take = |name: &str, rank: usize| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::parse(bytes.len(), format!("missing tensor {name}")))?;
        if t.dims.len() != rank {
            return Err(Error::parse(t.offset, format!("{name} has rank {}", t.dims.len())));
        }
        Ok(t)
    };
    let w1 = take("trunk.w1", 2)?;
    let b1 = take("trunk.b1", 1)?;
    let w2 = take("trunk.w2", 2)?;
    let b2 = take("trunk.b2", 1)?;
    let rm = take("bn.running_mean", 1)?;
    let rv = take("bn.running_var", 1)?;
    let momentum = take("bn.momentum", 0)?;
    let eps = take("bn.eps", 0)?;

    let (input, hidden) = (w1.dims[0], w1.dims[1]);
    let output = w2.dims[1];
    let check = |t: &Tensor, want: &[usize], name: &str| -> Result<()> {
        if t.dims != want {
            return Err(Error::parse(
                t.offset,
                format!("{name} has shape {:?}, expected {want:?}", t.dims),
            ));
        }
        Ok(())
    };
    check(&b1, &[hidden], "trunk.b1")?;
    check(&w2, &[hidden, output], "trunk.w2")?;
    check(&b2, &[output], "trunk.b2")?;
    check(&rm, &[output], "bn.running_mean")?;
    check(&rv, &[output], "bn.running_var")?;
    if let Some(bad) = rv.values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::parse(rv.offset, format!("negative running variance {bad}")));
    }

    Ok(ModelParams {
        w1: Matrix::from_vec(input, hidden, w1.values)?,
        b1: b1.values,
        w2: Matrix::from_vec(hidden, output, w2.values)?,
        b2: b2.values,
        bn: BatchNorm {
            running_mean: rm.values,
            running_var: rv.values,
            momentum: momentum.values[0],
            eps: eps.values[0],
        },
        revision: 0,
    })
}
