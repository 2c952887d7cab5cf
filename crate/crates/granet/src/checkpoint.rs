//! Binary checkpoint container: magic header, version byte, the embedded
//! network config text, then every parameter tensor and batch-norm running
//! statistic as (name, shape, raw little-endian f64 values).

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::network::GraNetModel;

const MAGIC: &[u8; 8] = b"GRANETCP";
const VERSION: u8 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn put_values(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: std::path::PathBuf,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse {
                path: self.path.clone(),
                line: 0,
                msg: "truncated checkpoint".into(),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: "invalid UTF-8 in checkpoint".into(),
        })
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serializes config, parameters, and running statistics.
pub fn save(model: &mut GraNetModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    put_str(&mut buf, &model.config.to_section_text());

    let mut params: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.for_each_param(&mut |name, t| {
        params.push((name, t.shape().to_vec(), t.values().to_vec()));
    });
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, shape, values) in &params {
        put_str(&mut buf, name);
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_values(&mut buf, values);
    }

    let mut stats: Vec<(String, Vec<f64>)> = Vec::new();
    model.for_each_stat(&mut |name, v| stats.push((name, v.clone())));
    buf.extend_from_slice(&(stats.len() as u32).to_le_bytes());
    for (name, values) in &stats {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
        put_values(&mut buf, values);
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from a checkpoint file.
pub fn load(path: impl AsRef<Path>) -> Result<GraNetModel> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        data: &data,
        pos: 0,
        path: path.to_path_buf(),
    };
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.into(),
    };
    if r.take(8)? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    if r.u8()? != VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let config_text = r.string()?;
    let config = NetworkConfig::from_section_text(&config_text)?;
    let mut model = GraNetModel::init(&config)?;

    let param_count = r.u32()? as usize;
    let mut params: HashMap<String, Tensor> = HashMap::with_capacity(param_count);
    for _ in 0..param_count {
        let name = r.string()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = r.values(numel)?;
        params.insert(name, Tensor::new(shape, values)?);
    }
    let stat_count = r.u32()? as usize;
    let mut stats: HashMap<String, Vec<f64>> = HashMap::with_capacity(stat_count);
    for _ in 0..stat_count {
        let name = r.string()?;
        let len = r.u32()? as usize;
        stats.insert(name, r.values(len)?);
    }

    let mut missing = Vec::new();
    model.for_each_param(&mut |name, t| match params.remove(&name) {
        Some(saved) if saved.shape() == t.shape() => *t = saved,
        Some(saved) => missing.push(format!(
            "{name}: shape {:?} in file, {:?} in model",
            saved.shape(),
            t.shape()
        )),
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    model.for_each_stat(&mut |name, v| match stats.remove(&name) {
        Some(saved) if saved.len() == v.len() => *v = saved,
        Some(saved) => missing.push(format!(
            "{name}: {} stats in file, {} in model",
            saved.len(),
            v.len()
        )),
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        return Err(bad(&format!("checkpoint mismatch: {}", missing.join("; "))));
    }
    if !params.is_empty() || !stats.is_empty() {
        let extras: Vec<String> = params.keys().chain(stats.keys()).cloned().collect();
        return Err(bad(&format!(
            "unused checkpoint tensors: {}",
            extras.join(", ")
        )));
    }
    Ok(model)
}
