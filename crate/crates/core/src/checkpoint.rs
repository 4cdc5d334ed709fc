//! Plain-text checkpoints.
//!
//! ```text
//! HAST-CKPT v1
//! dim_w=300
//! ...
//! VOCAB <n>
//! <token>            one per line, index order
//! TENSOR <name> <rank> <dims...>
//! <row values>       one row per line, 17 significant digits
//! ```
//!
//! LSTM tensors stack their gates as (input, forget, candidate, output) along rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &str = "HAST-CKPT v1";

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(checkpoint, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_checkpoint(checkpoint: &Checkpoint, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{MAGIC}")?;
    write!(out, "{}", checkpoint.config)?;
    writeln!(out, "VOCAB {}", checkpoint.vocab.len())?;
    for token in checkpoint.vocab.tokens() {
        writeln!(out, "{token}")?;
    }
    let mut line = String::new();
    for (name, tensor) in checkpoint.params.named() {
        let dims = tensor.shape().dims();
        let dims_text: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        writeln!(out, "TENSOR {name} {} {}", dims.len(), dims_text.join(" ")).map(|_| ())?;
        let width = match tensor.shape() {
            Shape::Matrix(_, c) => c,
            other => other.len(),
        };
        for row in tensor.values().chunks(width.max(1)) {
            line.clear();
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v:.16e}").expect("writing to a String");
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file), path)
}

fn integrity(origin: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Integrity(format!("{}:{line}: {msg}", origin.display()))
}

pub fn read_checkpoint(reader: impl BufRead, origin: &Path) -> Result<Checkpoint> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((_, Err(e))) => Err(Error::io(origin, e)),
            None => Err(integrity(
                origin,
                0,
                format!("truncated file: expected {what}"),
            )),
        }
    };

    let (_, header) = next("header")?;
    if header.trim_end() != MAGIC {
        return Err(integrity(
            origin,
            1,
            format!("unsupported header '{header}', expected '{MAGIC}'"),
        ));
    }

    let mut config = ModelConfig::default();
    let mut seen = Vec::new();
    let (vocab_line, vocab_header) = loop {
        let (n, line) = next("configuration or VOCAB")?;
        if line.starts_with("VOCAB ") {
            break (n, line);
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| integrity(origin, n, format!("expected key=value, got '{line}'")))?;
        config
            .set(key, value)
            .map_err(|e| integrity(origin, n, e))?;
        seen.push(key.to_string());
    };
    if let Some(missing) = ModelConfig::KEYS
        .iter()
        .find(|k| !seen.iter().any(|s| s == *k))
    {
        return Err(integrity(
            origin,
            vocab_line,
            format!("missing config key '{missing}'"),
        ));
    }
    config
        .validate()
        .map_err(|e| integrity(origin, vocab_line, e))?;

    let count: usize = vocab_header["VOCAB ".len()..]
        .trim()
        .parse()
        .map_err(|_| integrity(origin, vocab_line, "bad vocabulary size"))?;
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        tokens.push(next("vocabulary entry")?.1);
    }
    let vocab = Vocabulary::from_tokens(tokens).map_err(|e| integrity(origin, vocab_line, e))?;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    loop {
        let (n, line) = match lines.next() {
            None => break,
            Some((n, l)) => (n, l.map_err(|e| Error::io(origin, e))?),
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 || fields[0] != "TENSOR" {
            return Err(integrity(
                origin,
                n,
                format!("expected TENSOR header, got '{line}'"),
            ));
        }
        let name = fields[1].to_string();
        let rank: usize = fields[2]
            .parse()
            .map_err(|_| integrity(origin, n, "bad tensor rank"))?;
        if fields.len() != 3 + rank {
            return Err(integrity(
                origin,
                n,
                format!("rank {rank} needs {rank} dimensions"),
            ));
        }
        let dims = fields[3..]
            .iter()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| integrity(origin, n, "bad tensor dimension"))?;
        let shape = Shape::from_dims(&dims).map_err(|e| integrity(origin, n, e))?;
        let (rows, width) = match shape {
            Shape::Matrix(r, c) => (r, c),
            other => (1, other.len()),
        };
        let mut data = Vec::with_capacity(shape.len());
        for _ in 0..rows {
            let (rn, row) = match lines.next() {
                Some((rn, Ok(l))) => (rn, l),
                Some((_, Err(e))) => return Err(Error::io(origin, e)),
                None => return Err(integrity(origin, n, format!("truncated tensor '{name}'"))),
            };
            let before = data.len();
            for v in row.split_whitespace() {
                data.push(
                    v.parse::<f64>()
                        .map_err(|_| integrity(origin, rn, format!("bad value '{v}'")))?,
                );
            }
            if data.len() - before != width {
                return Err(integrity(
                    origin,
                    rn,
                    format!(
                        "row of '{name}' has {} values, expected {width}",
                        data.len() - before
                    ),
                ));
            }
        }
        if tensors
            .insert(name.clone(), Tensor::new(shape, data)?)
            .is_some()
        {
            return Err(integrity(origin, n, format!("duplicate tensor '{name}'")));
        }
    }

    if let Some(extra) = tensors
        .keys()
        .find(|k| !ModelParams::names().any(|n| n == *k))
    {
        return Err(integrity(origin, 0, format!("unknown tensor '{extra}'")));
    }
    let params = ModelParams::from_named(&config, |name| {
        tensors.get(name).cloned().ok_or_else(|| {
            Error::Integrity(format!("{}: missing tensor '{name}'", origin.display()))
        })
    })
    .map_err(|e| match e {
        Error::Integrity(_) => e,
        other => integrity(origin, 0, other),
    })?;
    if params.vocab_size() != vocab.len() {
        return Err(integrity(
            origin,
            0,
            format!(
                "embedding matrix has {} rows but the vocabulary has {} entries",
                params.vocab_size(),
                vocab.len()
            ),
        ));
    }
    Ok(Checkpoint {
        config,
        vocab,
        params,
    })
}
