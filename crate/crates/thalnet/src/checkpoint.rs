//! Checkpoint container: a text manifest (parameter names, shapes, byte
//! offsets, a config echo, the seed, and the step counter) followed by the
//! raw little-endian f64 payload in manifest order. Round-trips bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamSet;

const MAGIC: &str = "thalnet-checkpoint v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    /// Echo of the experiment configuration as key/value pairs.
    pub config: Vec<(String, String)>,
    pub params: ParamSet,
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("seed {}\n", ckpt.seed));
    manifest.push_str(&format!("step {}\n", ckpt.step));
    manifest.push_str(&format!("config-lines {}\n", ckpt.config.len()));
    for (k, v) in &ckpt.config {
        manifest.push_str(&format!("{k} = {v}\n"));
    }
    manifest.push_str(&format!("params {}\n", ckpt.params.len()));
    let mut offset = 0usize;
    for p in ckpt.params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("param {} {} {}\n", p.name, dims.join("x"), offset));
        offset += p.value.numel() * 8;
    }
    manifest.push_str(&format!("payload {offset}\n"));

    let mut file = fs::File::create(path)?;
    file.write_all(manifest.as_bytes())?;
    let mut payload = Vec::with_capacity(offset);
    for p in ckpt.params.iter() {
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

struct Lines<'a> {
    rest: &'a [u8],
    consumed: u64,
    path: &'a Path,
}

impl<'a> Lines<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            offset: self.consumed,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        let end = self
            .rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("unexpected end of manifest"))?;
        let line = std::str::from_utf8(&self.rest[..end])
            .map_err(|_| self.err("manifest is not valid UTF-8"))?;
        self.rest = &self.rest[end + 1..];
        self.consumed += end as u64 + 1;
        Ok(line)
    }

    fn expect_field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.next_line()?;
        let value = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected '{key} <value>', got '{line}'")))?;
        value
            .parse()
            .map_err(|_| self.err(format!("cannot parse '{value}' as {key}")))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut lines = Lines {
        rest: &bytes,
        consumed: 0,
        path,
    };

    let magic = lines.next_line()?;
    if magic != MAGIC {
        return Err(lines.err(format!("bad magic line '{magic}'")));
    }
    let seed: u64 = lines.expect_field("seed")?;
    let step: u64 = lines.expect_field("step")?;
    let config_lines: usize = lines.expect_field("config-lines")?;
    let mut config = Vec::with_capacity(config_lines);
    for _ in 0..config_lines {
        let line = lines.next_line()?;
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| lines.err(format!("bad config echo line '{line}'")))?;
        config.push((k.to_string(), v.to_string()));
    }

    let param_count: usize = lines.expect_field("params")?;
    let mut entries = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let line = lines.next_line()?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 4 || parts[0] != "param" {
            return Err(lines.err(format!("bad param line '{line}'")));
        }
        let name = parts[1].to_string();
        let shape: Vec<usize> = parts[2]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| lines.err(format!("bad shape '{}'", parts[2])))?;
        let offset: usize = parts[3]
            .parse()
            .map_err(|_| lines.err(format!("bad offset '{}'", parts[3])))?;
        entries.push((name, shape, offset));
    }
    let payload_len: usize = lines.expect_field("payload")?;
    let payload_start = lines.consumed;
    let payload = lines.rest;
    if payload.len() != payload_len {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: payload_start,
            msg: format!(
                "payload is {} bytes but manifest declares {payload_len}",
                payload.len()
            ),
        });
    }

    let mut params = ParamSet::new();
    for (name, shape, offset) in entries {
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if end > payload.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: payload_start + offset as u64,
                msg: format!("parameter '{name}' extends past the payload"),
            });
        }
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8 bytes")))
            .collect();
        let value = Tensor::from_vec(&shape, data).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: payload_start + offset as u64,
            msg: format!("parameter '{name}': {e}"),
        })?;
        params.register(name, value);
    }

    Ok(Checkpoint {
        seed,
        step,
        config,
        params,
    })
}
