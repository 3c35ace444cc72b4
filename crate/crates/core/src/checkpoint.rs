//! Single-file parameter checkpoints.
//!
//! Layout: a magic line, one line of JSON header, then every block's values as raw
//! little-endian floats, concatenated in header order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::{Error, Real, Result};

const MAGIC: &str = "LTCIL-CHECKPOINT v1";

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (it is a 68-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Format(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub task: usize,
    /// `"f32"` or `"f64"`.
    pub precision: String,
    pub byte_order: String,
    pub rng: RngState,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub values: Vec<Vec<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn block(&self, name: &str) -> Option<(&[usize], &[T])> {
        let i = self.header.blocks.iter().position(|b| b.name == name)?;
        Some((&self.header.blocks[i].shape, &self.values[i]))
    }
}

pub fn write_checkpoint<T: Real>(
    out: &mut impl Write,
    config_hash: &str,
    task: usize,
    rng: &ChaCha8Rng,
    params: &[(String, &Tensor<T>)],
) -> Result<()> {
    let header = CheckpointHeader {
        config_hash: config_hash.to_string(),
        task,
        precision: T::NAME.to_string(),
        byte_order: "little".into(),
        rng: RngState::capture(rng),
        blocks: params.iter().map(|(n, t)| BlockInfo { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "{json}")?;
    let mut buf = Vec::new();
    for (_, t) in params {
        buf.clear();
        t.data().iter().for_each(|v| v.write_le(&mut buf));
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Real>(input: impl Read) -> Result<Checkpoint<T>> {
    let mut r = BufReader::new(input);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic line)".into()));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.precision != T::NAME {
        return Err(Error::Format(format!("checkpoint holds {} values, requested {}", header.precision, T::NAME)));
    }
    if header.byte_order != "little" {
        return Err(Error::Format(format!("unsupported byte order {:?}", header.byte_order)));
    }
    let mut values = Vec::with_capacity(header.blocks.len());
    let mut bytes = Vec::new();
    for b in &header.blocks {
        let n: usize = b.shape.iter().product();
        bytes.resize(n * T::BYTES, 0);
        r.read_exact(&mut bytes).map_err(|_| Error::Format(format!("block {} truncated", b.name)))?;
        values.push(bytes.chunks_exact(T::BYTES).map(T::read_le).collect());
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after the last block".into()));
    }
    Ok(Checkpoint { header, values })
}

pub fn save_checkpoint<T: Real>(path: &Path, config_hash: &str, task: usize, rng: &ChaCha8Rng, params: &[(String, &Tensor<T>)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, config_hash, task, rng, params)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    read_checkpoint(std::fs::File::open(path)?)
}
