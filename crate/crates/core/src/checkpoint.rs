//! Binary checkpoint format.
//!
//! All integers are little-endian `u64` unless noted, reals little-endian
//! IEEE-754 `f64`:
//!
//! ```text
//! magic            8 bytes  "SMESCKPT"
//! version          u32      1
//! features, encoder_hidden, d_in, d_out, experts, tasks
//! activation       u8       0 identity, 1 relu, 2 tanh
//! mass_source      u8       0 sparse, 1 dense
//! routing          u8       0 dense, 1 naive, 2 progressive
//! routing_a        u64      k (naive) or K_s (progressive), else 0
//! routing_b        u64      K_a (progressive), else 0
//! seed             u64
//! beta             f64
//! loss_weights     tasks × f64
//! task_weights     tasks × f64
//! param_count      u64
//! parameters       param_count × f64 in block order
//! ```
//!
//! Block order: `encoder.hidden.{weight,bias}`, `encoder.out.{weight,bias}`,
//! then `expert{e}.{weight,bias}` for each expert, `router{t}.{weight,bias}`
//! and `head{t}.{weight,bias}` for each task. Weights are row-major with one
//! row per output unit.

use std::io::{Read, Write};
use std::path::Path;

use crate::balance::MassSource;
use crate::error::{Error, Result};
use crate::layer::Activation;
use crate::model::{ModelDims, ModelSpec, MoeModel};
use crate::routing::{RoutingBudget, RoutingMode};

pub const MAGIC: &[u8; 8] = b"SMESCKPT";
pub const VERSION: u32 = 1;

pub fn encode(model: &MoeModel) -> Vec<u8> {
    let spec = model.spec();
    let d = spec.dims;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        d.features,
        d.encoder_hidden,
        d.d_in,
        d.d_out,
        d.experts,
        d.tasks,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.push(spec.expert_activation.code());
    out.push(spec.mass_source.code());
    let (code, a, b) = match spec.mode {
        RoutingMode::Dense => (0u8, 0, 0),
        RoutingMode::Naive { k } => (1, k, 0),
        RoutingMode::Progressive(budget) => (2, budget.shared(), budget.adaptive()),
    };
    out.push(code);
    out.extend_from_slice(&(a as u64).to_le_bytes());
    out.extend_from_slice(&(b as u64).to_le_bytes());
    out.extend_from_slice(&model.seed().to_le_bytes());
    out.extend_from_slice(&spec.beta.to_le_bytes());
    for v in spec.loss_weights.iter().chain(&spec.task_weights) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let params = model.params().flatten();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} does not fit usize")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<MoeModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dims = ModelDims {
        features: r.usize("features")?,
        encoder_hidden: r.usize("encoder_hidden")?,
        d_in: r.usize("d_in")?,
        d_out: r.usize("d_out")?,
        experts: r.usize("experts")?,
        tasks: r.usize("tasks")?,
    };
    dims.validate()?;
    let activation = Activation::from_code(r.u8("activation")?)
        .ok_or_else(|| Error::Checkpoint("unknown activation code".into()))?;
    let mass_source = MassSource::from_code(r.u8("mass_source")?)
        .ok_or_else(|| Error::Checkpoint("unknown mass source".into()))?;
    let code = r.u8("routing")?;
    let a = r.usize("routing_a")?;
    let b = r.usize("routing_b")?;
    let mode = match code {
        0 => RoutingMode::Dense,
        1 => RoutingMode::Naive { k: a },
        2 => RoutingMode::Progressive(RoutingBudget::new(a, b, dims.experts)?),
        c => return Err(Error::Checkpoint(format!("unknown routing code {c}"))),
    };
    let seed = r.u64("seed")?;
    let beta = r.f64("beta")?;
    let loss_weights = (0..dims.tasks)
        .map(|_| r.f64("loss_weights"))
        .collect::<Result<Vec<_>>>()?;
    let task_weights = (0..dims.tasks)
        .map(|_| r.f64("task_weights"))
        .collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec {
        dims,
        expert_activation: activation,
        mode,
        loss_weights,
        task_weights,
        beta,
        mass_source,
    };
    let mut model = MoeModel::init(spec, seed)?;
    let count = r.usize("param_count")?;
    if count != model.params().param_count() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, dims require {}",
            model.params().param_count()
        )));
    }
    for block in model.params_mut().blocks_mut() {
        for v in block.data.iter_mut() {
            *v = r.f64(&block.name)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &MoeModel) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(model))
        .map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MoeModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MoeModel {
        let dims = ModelDims {
            features: 3,
            encoder_hidden: 4,
            d_in: 3,
            d_out: 2,
            experts: 5,
            tasks: 2,
        };
        let mut spec = ModelSpec::progressive(dims, 1, 2).unwrap();
        spec.beta = 0.25;
        spec.loss_weights = vec![1.0, 0.5];
        let mut m = MoeModel::init(spec, 77).unwrap();
        m.params_mut().scale(1.5);
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&model());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
