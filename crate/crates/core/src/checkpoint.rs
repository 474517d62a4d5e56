//! Model container.
//!
//! ```text
//! BLOCKADMM v1
//! blocks 2
//! block 0 2
//! linear 128 784 bias
//! relu
//! block 1 1
//! linear 10 128 nobias
//! nmf 0 128 8            (or: nmf none)
//! payload 812345
//! <little-endian f64 values>
//! ```
//!
//! The payload holds each linear layer's weight (row-major) then its bias, in
//! block and layer order, followed by the NMF basis when present.

use std::path::Path;

use crate::blocks::{Block, Layer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "BLOCKADMM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NmfBasis {
    /// Index of the block whose output is projected.
    pub position: usize,
    /// `[m, r]`
    pub m: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub blocks: Vec<Block>,
    pub nmf: Option<NmfBasis>,
}

impl Model {
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        match &self.nmf {
            Some(n) => crate::nmf::deepfacto_predict(&self.blocks, &n.m, n.position, x),
            None => crate::blocks::straight_through_forward(&self.blocks, x),
        }
    }
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(blocks: &[Block], nmf: Option<&NmfBasis>) -> Vec<u8> {
    let mut head = format!("{MAGIC} v{VERSION}\nblocks {}\n", blocks.len());
    let mut payload: Vec<f64> = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        head.push_str(&format!("block {i} {}\n", b.layers().len()));
        for l in b.layers() {
            match l {
                Layer::Linear(lin) => {
                    let tag = if lin.bias.is_some() { "bias" } else { "nobias" };
                    head.push_str(&format!("linear {} {} {tag}\n", lin.weight.rows(), lin.weight.cols()));
                    payload.extend_from_slice(lin.weight.data());
                    if let Some(bias) = &lin.bias {
                        payload.extend_from_slice(bias.data());
                    }
                }
                Layer::Relu => head.push_str("relu\n"),
            }
        }
    }
    match nmf {
        Some(n) => {
            head.push_str(&format!("nmf {} {} {}\n", n.position, n.m.rows(), n.m.cols()));
            payload.extend_from_slice(n.m.data());
        }
        None => head.push_str("nmf none\n"),
    }
    head.push_str(&format!("payload {}\n", payload.len() * 8));
    let mut out = head.into_bytes();
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| err("unexpected end of header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| err("header is not UTF-8"))
    }

    fn fields(&mut self, tag: &str, count: usize) -> Result<Vec<&'a str>> {
        let line = self.line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.first() != Some(&tag) || parts.len() != count + 1 {
            return Err(err(format!("expected a {tag:?} line with {count} fields, got {line:?}")));
        }
        Ok(parts[1..].to_vec())
    }
}

fn int(s: &str) -> Result<usize> {
    s.parse().map_err(|_| err(format!("expected an integer, got {s:?}")))
}

fn take(values: &mut std::slice::Iter<'_, f64>, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = values.by_ref().take(n).copied().collect();
    if data.len() != n {
        return Err(err("payload ends before the declared tensors"));
    }
    Tensor::new(shape.to_vec(), data)
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let first = r.line()?;
    let want = format!("{MAGIC} v{VERSION}");
    if first != want {
        return if first.starts_with(MAGIC) {
            Err(err(format!("unsupported container version {first:?}, this build reads {want:?}")))
        } else {
            Err(err(format!("not a model file, header {first:?}")))
        };
    }
    enum Spec {
        Linear(usize, usize, bool),
        Relu,
    }
    let nblocks = int(r.fields("blocks", 1)?[0])?;
    let mut specs = Vec::with_capacity(nblocks);
    let mut expected = 0usize;
    for i in 0..nblocks {
        let f = r.fields("block", 2)?;
        if int(f[0])? != i {
            return Err(err(format!("block {i} listed out of order")));
        }
        let nl = int(f[1])?;
        let mut layers = Vec::with_capacity(nl);
        for _ in 0..nl {
            let line = r.line()?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["relu"] => layers.push(Spec::Relu),
                ["linear", o, n, tag] => {
                    let (o, n) = (int(o)?, int(n)?);
                    let bias = match *tag {
                        "bias" => true,
                        "nobias" => false,
                        _ => return Err(err(format!("bad bias tag {tag:?}"))),
                    };
                    expected += o * n + if bias { o } else { 0 };
                    layers.push(Spec::Linear(o, n, bias));
                }
                _ => return Err(err(format!("unknown layer line {line:?}"))),
            }
        }
        specs.push(layers);
    }
    let nmf_line = r.line()?;
    let nmf_shape = match nmf_line.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["nmf", "none"] => None,
        ["nmf", p, m, k] => {
            let (p, m, k) = (int(p)?, int(m)?, int(k)?);
            expected += m * k;
            Some((p, m, k))
        }
        _ => return Err(err(format!("bad nmf line {nmf_line:?}"))),
    };
    let declared = int(r.fields("payload", 1)?[0])?;
    let body = &bytes[r.pos..];
    if declared != expected * 8 || body.len() != declared {
        return Err(err(format!(
            "payload length mismatch: structure needs {} bytes, header declares {declared}, file holds {}",
            expected * 8,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut it = values.iter();
    let mut blocks = Vec::with_capacity(nblocks);
    for (i, layers) in specs.into_iter().enumerate() {
        let mut built = Vec::with_capacity(layers.len());
        for s in layers {
            built.push(match s {
                Spec::Relu => Layer::Relu,
                Spec::Linear(o, n, bias) => {
                    let w = take(&mut it, &[o, n])?;
                    let b = if bias { Some(take(&mut it, &[o, 1])?) } else { None };
                    Layer::linear(w, b)?
                }
            });
        }
        blocks.push(Block::new(i, built).map_err(|e| err(format!("block {i}: {e}")))?);
    }
    let nmf = match nmf_shape {
        Some((position, m, k)) => {
            if position + 1 >= nblocks {
                return Err(err(format!("nmf position {position} has no following block")));
            }
            Some(NmfBasis { position, m: take(&mut it, &[m, k])? })
        }
        None => None,
    };
    Ok(Model { blocks, nmf })
}

pub fn save_model(path: &Path, blocks: &[Block], nmf: Option<&NmfBasis>) -> Result<()> {
    std::fs::write(path, encode(blocks, nmf))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}
