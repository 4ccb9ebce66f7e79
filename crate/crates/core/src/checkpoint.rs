//! `AWDLAB01` checkpoint files.
//!
//! Layout: the 8-byte magic, then a sequence of named tensors until end of
//! file. Each tensor is `u64` name length, UTF-8 name, `u64` rank, `rank`
//! `u64` dims, then the elements as little-endian `f64`. All integers are
//! little-endian.
//!
//! Model parameters come first, in model order. Reserved names carry the
//! rest: `meta.arch` (layer table), `meta.input_shape`, `meta.epoch`,
//! `meta.metric`, `optim.scalars` and one `optim.momentum.<param>` per
//! parameter.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::optimizer::{OptimizerState, Schedule};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AWDLAB01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    /// Validation metric that justified the snapshot (NaN when none).
    pub metric: f64,
}

const ARCH_COLS: usize = 6;

fn encode_layer(layer: &Layer) -> [f64; ARCH_COLS] {
    match *layer {
        Layer::Linear { input, output, bias } => [0.0, input as f64, output as f64, bias as u8 as f64, 0.0, 0.0],
        Layer::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => [
            1.0,
            in_channels as f64,
            out_channels as f64,
            kernel as f64,
            stride as f64,
            padding as f64,
        ],
        Layer::Relu => [2.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        Layer::AvgPool2 => [3.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        Layer::Flatten => [4.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    }
}

fn decode_layer(row: &[f64]) -> Result<Layer> {
    let u = |v: f64| v as usize;
    Ok(match row[0] as u8 {
        0 => Layer::Linear {
            input: u(row[1]),
            output: u(row[2]),
            bias: row[3] != 0.0,
        },
        1 => Layer::Conv {
            in_channels: u(row[1]),
            out_channels: u(row[2]),
            kernel: u(row[3]),
            stride: u(row[4]),
            padding: u(row[5]),
        },
        2 => Layer::Relu,
        3 => Layer::AvgPool2,
        4 => Layer::Flatten,
        k => return Err(Error::Format(format!("unknown layer code {k}"))),
    })
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let len = self.u64()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rank = self.u64()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok((name, shape, data))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for p in self.model.params() {
            put_tensor(&mut buf, &p.name, p.tensor.shape(), p.tensor.data());
        }
        let layers = self.model.layers();
        let arch: Vec<f64> = layers.iter().flat_map(encode_layer).collect();
        put_tensor(&mut buf, "meta.arch", &[layers.len(), ARCH_COLS], &arch);
        let input: Vec<f64> = self.model.input_shape().iter().map(|&d| d as f64).collect();
        put_tensor(&mut buf, "meta.input_shape", &[input.len()], &input);
        put_tensor(&mut buf, "meta.epoch", &[1], &[self.epoch as f64]);
        put_tensor(&mut buf, "meta.metric", &[1], &[self.metric]);
        if let Some(st) = &self.optimizer {
            let schedule = match st.schedule {
                Schedule::Cosine => 0.0,
                Schedule::Constant => 1.0,
            };
            let scalars = [
                st.momentum,
                st.base_lr,
                st.total_steps as f64,
                schedule,
                st.step as f64,
                st.lambda_bar,
                st.last_lambda,
            ];
            put_tensor(&mut buf, "optim.scalars", &[scalars.len()], &scalars);
            for (p, b) in self.model.params().iter().zip(&st.buffers) {
                put_tensor(&mut buf, &format!("optim.momentum.{}", p.name), p.tensor.shape(), b);
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing AWDLAB01 magic".into()));
        }
        let mut r = Reader { bytes, pos: 8 };
        let mut params = Vec::new();
        let mut arch = None;
        let mut input_shape = None;
        let (mut epoch, mut metric) = (0usize, f64::NAN);
        let mut scalars = None;
        let mut buffers = Vec::new();
        while r.pos < bytes.len() {
            let (name, shape, data) = r.tensor()?;
            match name.as_str() {
                "meta.arch" => arch = Some((shape, data)),
                "meta.input_shape" => input_shape = Some(data.iter().map(|&v| v as usize).collect::<Vec<_>>()),
                "meta.epoch" => epoch = data.first().copied().unwrap_or(0.0) as usize,
                "meta.metric" => metric = data.first().copied().unwrap_or(f64::NAN),
                "optim.scalars" => scalars = Some(data),
                n if n.starts_with("optim.momentum.") => buffers.push(data),
                _ => params.push((name, Tensor::new(shape, data)?)),
            }
        }
        let (arch_shape, arch_data) = arch.ok_or_else(|| Error::Format("checkpoint lacks meta.arch".into()))?;
        if arch_shape.len() != 2 || arch_shape[1] != ARCH_COLS {
            return Err(Error::Format(format!("bad meta.arch shape {arch_shape:?}")));
        }
        let layers = arch_data.chunks(ARCH_COLS).map(decode_layer).collect::<Result<Vec<_>>>()?;
        let input_shape = input_shape.ok_or_else(|| Error::Format("checkpoint lacks meta.input_shape".into()))?;
        let model = Model::from_parts(layers, input_shape, params)?;
        let optimizer = match scalars {
            Some(s) if s.len() == 7 => {
                if buffers.len() != model.params().len() {
                    return Err(Error::Format("momentum buffer count does not match parameters".into()));
                }
                Some(OptimizerState {
                    momentum: s[0],
                    base_lr: s[1],
                    total_steps: s[2] as u64,
                    schedule: if s[3] == 0.0 { Schedule::Cosine } else { Schedule::Constant },
                    step: s[4] as u64,
                    lambda_bar: s[5],
                    last_lambda: s[6],
                    buffers,
                })
            }
            Some(_) => return Err(Error::Format("optim.scalars has the wrong length".into())),
            None => None,
        };
        Ok(Self {
            model,
            optimizer,
            epoch,
            metric,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
