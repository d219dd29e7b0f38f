//! Model files (`.cdfn`).
//!
//! ```text
//! "CDFN" | u8 version=1
//! u32 input_dim | u32 n_aux | n_aux x u32 | u32 tap | u32 n_layers
//! n_layers x (u8 tag | hyperparameters as u32/i32/f32)
//! n_layers x (u8 has_params | [weight tensor | bias tensor])
//! tensor = u32 ndim | ndim x u32 | f32 data
//! ```

use std::path::Path;

use super::network::{LayerParams, LayerSpec, NetworkSpec, ParamStore};
use super::ops::{ConvGeom, PoolGeom};
use super::tensor::Tensor;
use crate::error::Result;
use crate::io::{read_bytes, write_bytes, ByteReader, ByteWriter};

pub const MODEL_MAGIC: &[u8; 4] = b"CDFN";
pub const MODEL_VERSION: u8 = 1;

/// A network topology with its trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub params: ParamStore,
}

impl Model {
    /// Rounds parameters to f32 so in-memory values equal what a saved file
    /// reloads to.
    pub fn quantized(mut self) -> Self {
        for t in self.params.tensors_mut() {
            crate::io::quantize(t.data_mut());
        }
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u8(MODEL_VERSION);
        let s = &self.spec;
        w.u32(s.input_dim as u32);
        w.u32(s.aux_dims.len() as u32);
        for &d in &s.aux_dims {
            w.u32(d as u32);
        }
        w.u32(s.tap as u32);
        w.u32(s.layers.len() as u32);
        for l in &s.layers {
            encode_layer(&mut w, l);
        }
        for p in &self.params.layers {
            match p {
                None => w.u8(0),
                Some(p) => {
                    w.u8(1);
                    encode_tensor(&mut w, &p.weight);
                    encode_tensor(&mut w, &p.bias);
                }
            }
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(MODEL_MAGIC)?;
        let v = r.u8()?;
        if v != MODEL_VERSION {
            return Err(r.err(format!("unsupported model version {v}")));
        }
        let input_dim = r.u32()? as usize;
        let n_aux = r.u32()? as usize;
        let aux_dims = (0..n_aux).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let tap = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let layers = (0..n_layers).map(|_| decode_layer(&mut r)).collect::<Result<Vec<_>>>()?;
        let spec = NetworkSpec {
            input_dim,
            aux_dims,
            layers,
            tap,
        };
        spec.validate().map_err(|e| r.err(e.to_string()))?;
        let mut params = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            params.push(match r.u8()? {
                0 => None,
                1 => Some(LayerParams {
                    weight: decode_tensor(&mut r)?,
                    bias: decode_tensor(&mut r)?,
                }),
                other => return Err(r.err(format!("bad parameter flag {other}"))),
            });
        }
        r.finish()?;
        let params = ParamStore { layers: params };
        params.check_matches(&spec).map_err(|e| r.err(e.to_string()))?;
        Ok(Self { spec, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?, path)
    }
}

fn encode_tensor(w: &mut ByteWriter, t: &Tensor) {
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f32s(t.data());
}

fn decode_tensor(r: &mut ByteReader) -> Result<Tensor> {
    let nd = r.u32()? as usize;
    if nd == 0 || nd > 8 {
        return Err(r.err(format!("implausible tensor rank {nd}")));
    }
    let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().product();
    let data = r.f32s(n)?;
    Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))
}

fn encode_layer(w: &mut ByteWriter, l: &LayerSpec) {
    match l {
        LayerSpec::FullyConnected { input, output } => {
            w.u8(0);
            w.u32(*input as u32);
            w.u32(*output as u32);
        }
        LayerSpec::Conv2D(g) => {
            w.u8(1);
            for v in [g.in_c, g.in_h, g.in_w, g.out_c, g.kh, g.kw, g.sh, g.sw] {
                w.u32(v as u32);
            }
        }
        LayerSpec::MaxPool2D(g) => {
            w.u8(2);
            for v in [g.c, g.in_h, g.in_w, g.ph, g.pw, g.sh, g.sw] {
                w.u32(v as u32);
            }
        }
        LayerSpec::TimeDelay { input, output, offsets } => {
            w.u8(3);
            w.u32(*input as u32);
            w.u32(*output as u32);
            w.u32(offsets.len() as u32);
            for &o in offsets {
                w.i32(o);
            }
        }
        LayerSpec::PNorm { input, output, p } => {
            w.u8(4);
            w.u32(*input as u32);
            w.u32(*output as u32);
            w.f32(*p as f32);
        }
        LayerSpec::ReLU { dim } => {
            w.u8(5);
            w.u32(*dim as u32);
        }
        LayerSpec::Softmax { dim } => {
            w.u8(6);
            w.u32(*dim as u32);
        }
        LayerSpec::Concat { input, extra, slot } => {
            w.u8(7);
            w.u32(*input as u32);
            w.u32(*extra as u32);
            w.u32(*slot as u32);
        }
        LayerSpec::LengthNorm { dim } => {
            w.u8(8);
            w.u32(*dim as u32);
        }
    }
}

fn decode_layer(r: &mut ByteReader) -> Result<LayerSpec> {
    let tag = r.u8()?;
    let u = |r: &mut ByteReader| r.u32().map(|v| v as usize);
    Ok(match tag {
        0 => LayerSpec::FullyConnected {
            input: u(r)?,
            output: u(r)?,
        },
        1 => LayerSpec::Conv2D(ConvGeom {
            in_c: u(r)?,
            in_h: u(r)?,
            in_w: u(r)?,
            out_c: u(r)?,
            kh: u(r)?,
            kw: u(r)?,
            sh: u(r)?,
            sw: u(r)?,
        }),
        2 => LayerSpec::MaxPool2D(PoolGeom {
            c: u(r)?,
            in_h: u(r)?,
            in_w: u(r)?,
            ph: u(r)?,
            pw: u(r)?,
            sh: u(r)?,
            sw: u(r)?,
        }),
        3 => {
            let input = u(r)?;
            let output = u(r)?;
            let n = u(r)?;
            if n > 1024 {
                return Err(r.err(format!("implausible offset count {n}")));
            }
            let offsets = (0..n).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
            LayerSpec::TimeDelay { input, output, offsets }
        }
        4 => LayerSpec::PNorm {
            input: u(r)?,
            output: u(r)?,
            p: r.f32()? as f64,
        },
        5 => LayerSpec::ReLU { dim: u(r)? },
        6 => LayerSpec::Softmax { dim: u(r)? },
        7 => LayerSpec::Concat {
            input: u(r)?,
            extra: u(r)?,
            slot: u(r)?,
        },
        8 => LayerSpec::LengthNorm { dim: u(r)? },
        other => return Err(r.err(format!("unknown layer tag {other}"))),
    })
}
