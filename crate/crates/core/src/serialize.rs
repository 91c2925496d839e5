//! Network files.
//!
//! ```text
//! {"input_dim": 2, "blocks": [
//!   {"type": "linear", "weights": [[...], ...], "bias": [...]},
//!   {"type": "batchnorm", "gamma": [...], "beta": [...], "mean": [...], "var": [...], "eps": 1e-5},
//!   {"type": "relu"}
//! ]}
//! ```
//!
//! Floats are written with 17 significant digits, which round-trips every
//! `f64` bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::network::{BatchNormLayer, Block, LinearLayer, Network};
use crate::tensor::{Matrix, Vector};

/// Formats `v` with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_array(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&format_f64(*v));
    }
    out.push(']');
}

pub fn to_json(net: &Network) -> String {
    let mut out = String::new();
    let _ = write!(out, "{{\"input_dim\": {}, \"blocks\": [", net.input_dim());
    for (i, block) in net.blocks().iter().enumerate() {
        out.push_str(if i == 0 { "\n  " } else { ",\n  " });
        match block {
            Block::Linear(l) => {
                out.push_str("{\"type\": \"linear\", \"weights\": [");
                for (r, row) in l.weights.iter_rows().enumerate() {
                    if r > 0 {
                        out.push_str(", ");
                    }
                    write_array(&mut out, row);
                }
                out.push_str("], \"bias\": ");
                write_array(&mut out, &l.bias);
                out.push('}');
            }
            Block::BatchNorm(bn) => {
                out.push_str("{\"type\": \"batchnorm\", \"gamma\": ");
                write_array(&mut out, &bn.gamma);
                out.push_str(", \"beta\": ");
                write_array(&mut out, &bn.beta);
                out.push_str(", \"mean\": ");
                write_array(&mut out, &bn.running_mean);
                out.push_str(", \"var\": ");
                write_array(&mut out, &bn.running_var);
                let _ = write!(out, ", \"eps\": {}}}", format_f64(bn.epsilon));
            }
            Block::Relu => out.push_str("{\"type\": \"relu\"}"),
        }
    }
    out.push_str("\n]}\n");
    out
}

#[derive(Deserialize)]
struct FileRepr<'a> {
    input_dim: usize,
    #[serde(borrow)]
    blocks: Vec<&'a RawValue>,
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum BlockRepr {
    Linear {
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Batchnorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    Relu,
}

/// Byte offset of a serde_json error inside `text`.
fn error_offset(text: &str, err: &serde_json::Error) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(err.line().saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + err.column().saturating_sub(1)).min(text.len())
}

fn parse_error(text: &str, base: usize, err: serde_json::Error) -> Error {
    Error::Parse {
        offset: base + error_offset(text, &err),
        message: err.to_string(),
    }
}

fn build_block(repr: BlockRepr) -> Result<Block> {
    Ok(match repr {
        BlockRepr::Linear { weights, bias } => {
            let matrix = if weights.is_empty() {
                Matrix::zeros(0, 0)
            } else {
                Matrix::from_rows(&weights)?
            };
            Block::Linear(LinearLayer::new(matrix, Vector::new(bias)?)?)
        }
        BlockRepr::Batchnorm {
            gamma,
            beta,
            mean,
            var,
            eps,
        } => Block::BatchNorm(BatchNormLayer::new(
            Vector::new(gamma)?,
            Vector::new(beta)?,
            Vector::new(mean)?,
            Vector::new(var)?,
            eps,
        )?),
        BlockRepr::Relu => Block::Relu,
    })
}

pub fn from_json(text: &str) -> Result<Network> {
    let file: FileRepr<'_> = serde_json::from_str(text).map_err(|e| parse_error(text, 0, e))?;
    let mut blocks = Vec::with_capacity(file.blocks.len());
    let mut offsets = Vec::with_capacity(file.blocks.len());
    for raw in &file.blocks {
        let slice = raw.get();
        // The raw value borrows from `text`, so its address gives its offset.
        let base = slice.as_ptr() as usize - text.as_ptr() as usize;
        let repr: BlockRepr =
            serde_json::from_str(slice).map_err(|e| parse_error(slice, base, e))?;
        let block = build_block(repr).map_err(|e| Error::Parse {
            offset: base,
            message: format!("block {}: {e}", blocks.len()),
        })?;
        blocks.push(block);
        offsets.push(base);
    }
    Network::new(file.input_dim, blocks).map_err(|e| Error::Parse {
        offset: offsets.first().copied().unwrap_or(0),
        message: e.to_string(),
    })
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
