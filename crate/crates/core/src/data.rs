//! Procedural (latent, condition-token) pairs.
//!
//! Each sample places one to three primitives on a 3×3 grid of cells of a
//! 4×16×16 latent. Bars draw on channel 0, blobs on channel 1 and checker
//! patches on channel 2; channel 3 receives every primitive at half
//! amplitude. The sum is clamped to [−1, 1].
//!
//! Token layout (length 8, vocabulary 32):
//!
//! | token   | meaning                                        |
//! |---------|------------------------------------------------|
//! | 0       | null (unconditional)                           |
//! | 1       | padding                                        |
//! | 2–10    | `2 + 3·kind + intensity` (kind: bar, blob, checker; intensity 0.4/0.7/1.0) |
//! | 11–19   | `11 + 3·row + col` cell                        |
//! | 20–22   | `19 + count` primitive count                   |
//!
//! Sequence: `[count, A₁, B₁, A₂, B₂, A₃, B₃, pad]` with unused pairs padded.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffkit::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub const NULL_TOKEN: usize = 0;
pub const PAD_TOKEN: usize = 1;
pub const SEQ_LEN: usize = 8;
pub const VOCAB_SIZE: usize = 32;
pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIZE: usize = 16;
pub const AMPLITUDES: [f64; 3] = [0.4, 0.7, 1.0];
pub const MAX_PRIMITIVES: usize = 3;

const KIND_BASE: usize = 2;
const CELL_BASE: usize = 11;
const COUNT_BASE: usize = 19;
/// Pixel centre of grid row/column 0, 1, 2.
const CELL_CENTRES: [usize; 3] = [3, 8, 13];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Bar,
    Blob,
    Checker,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Bar, Kind::Blob, Kind::Checker];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: Kind,
    /// Index into [`AMPLITUDES`].
    pub intensity: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[4, 16, 16]`.
    pub latent: Tensor,
    pub tokens: Vec<usize>,
}

/// Token sequence for 1–3 primitives in distinct cells.
pub fn encode(prims: &[Primitive]) -> Result<Vec<usize>> {
    if prims.is_empty() || prims.len() > MAX_PRIMITIVES {
        return Err(Error::contract(format!(
            "need 1..={MAX_PRIMITIVES} primitives, got {}",
            prims.len()
        )));
    }
    let mut out = vec![PAD_TOKEN; SEQ_LEN];
    out[0] = COUNT_BASE + prims.len();
    for (i, p) in prims.iter().enumerate() {
        if p.intensity >= AMPLITUDES.len() || p.row >= 3 || p.col >= 3 {
            return Err(Error::contract(format!(
                "primitive {i} out of range: {p:?}"
            )));
        }
        if prims[..i].iter().any(|q| (q.row, q.col) == (p.row, p.col)) {
            return Err(Error::contract(format!(
                "primitive {i} shares cell ({}, {})",
                p.row, p.col
            )));
        }
        out[1 + 2 * i] = KIND_BASE + 3 * p.kind.index() + p.intensity;
        out[2 + 2 * i] = CELL_BASE + 3 * p.row + p.col;
    }
    Ok(out)
}

/// Inverse of [`encode`].
pub fn decode(tokens: &[usize]) -> Result<Vec<Primitive>> {
    if tokens.len() != SEQ_LEN {
        return Err(Error::contract(format!(
            "expected {SEQ_LEN} tokens, got {}",
            tokens.len()
        )));
    }
    let count = tokens[0]
        .checked_sub(COUNT_BASE)
        .filter(|c| (1..=MAX_PRIMITIVES).contains(c))
        .ok_or_else(|| Error::contract(format!("token 0 is {}, not a count", tokens[0])))?;
    let mut prims = Vec::with_capacity(count);
    for i in 0..count {
        let (a, b) = (tokens[1 + 2 * i], tokens[2 + 2 * i]);
        if !(KIND_BASE..CELL_BASE).contains(&a) || !(CELL_BASE..COUNT_BASE + 1).contains(&b) {
            return Err(Error::contract(format!("pair {i} is ({a}, {b})")));
        }
        let (k, c) = (a - KIND_BASE, b - CELL_BASE);
        prims.push(Primitive {
            kind: Kind::ALL[k / 3],
            intensity: k % 3,
            row: c / 3,
            col: c % 3,
        });
    }
    if tokens[1 + 2 * count..].iter().any(|&t| t != PAD_TOKEN) {
        return Err(Error::contract("non-padding token after the last pair"));
    }
    Ok(prims)
}

/// Renders primitives into a `[4, 16, 16]` latent.
pub fn render(prims: &[Primitive]) -> Tensor {
    const S: usize = LATENT_SIZE;
    let mut t = Tensor::zeros(&[LATENT_CHANNELS, S, S]);
    let d = t.data_mut();
    for p in prims {
        let amp = AMPLITUDES[p.intensity];
        let (cy, cx) = (CELL_CENTRES[p.row] as i64, CELL_CENTRES[p.col] as i64);
        let ch = p.kind.index();
        for y in 0..S as i64 {
            for x in 0..S as i64 {
                let (dy, dx) = (y - cy, x - cx);
                let v = match p.kind {
                    Kind::Bar if dy.abs() <= 1 && dx.abs() <= 4 => amp,
                    Kind::Blob => amp * (-((dy * dy + dx * dx) as f64) / 4.5).exp(),
                    Kind::Checker if (-3..3).contains(&dy) && (-3..3).contains(&dx) => {
                        if (dy + dx).rem_euclid(2) == 0 {
                            amp
                        } else {
                            -amp
                        }
                    }
                    _ => 0.0,
                };
                let i = (y as usize) * S + x as usize;
                d[ch * S * S + i] += v;
                d[3 * S * S + i] += 0.5 * v;
            }
        }
    }
    for v in d.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    t
}

fn random_primitives(r: &mut rng::Rng) -> Vec<Primitive> {
    let count = r.gen_range(1..=MAX_PRIMITIVES);
    let mut cells: Vec<usize> = (0..9).collect();
    cells.shuffle(r);
    cells[..count]
        .iter()
        .map(|&c| Primitive {
            kind: Kind::ALL[r.gen_range(0..3)],
            intensity: r.gen_range(0..AMPLITUDES.len()),
            row: c / 3,
            col: c % 3,
        })
        .collect()
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn gen_dataset(seed: u64, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    Ok((0..n)
        .map(|i| {
            let prims = random_primitives(&mut rng::stream(seed, &format!("data/sample{i}")));
            Sample {
                latent: render(&prims),
                tokens: encode(&prims).expect("generated primitives are valid"),
            }
        })
        .collect())
}

/// Stacked latents `[B, 4, 16, 16]` with their token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub latents: Tensor,
    pub tokens: Vec<Vec<usize>>,
    /// Dataset indices, in batch order.
    pub indices: Vec<usize>,
    pub epoch: u64,
}

impl Batch {
    pub fn from_samples(data: &[Sample], indices: &[usize], epoch: u64) -> Result<Self> {
        let latents: Vec<Tensor> = indices.iter().map(|&i| data[i].latent.clone()).collect();
        Ok(Self {
            latents: Tensor::stack(&latents)?,
            tokens: indices.iter().map(|&i| data[i].tokens.clone()).collect(),
            indices: indices.to_vec(),
            epoch,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Endless stream of shuffled batches; each epoch draws a fresh seeded
/// permutation and drops its final partial batch.
#[derive(Debug, Clone)]
pub struct BatchIter<'a> {
    data: &'a [Sample],
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

pub fn batch_iter(data: &[Sample], batch_size: usize, seed: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if batch_size > data.len() {
        return Err(Error::config(format!(
            "batch size {batch_size} exceeds dataset size {}",
            data.len()
        )));
    }
    let mut it = BatchIter {
        data,
        batch: batch_size,
        seed,
        epoch: 0,
        order: Vec::new(),
        pos: 0,
    };
    it.shuffle();
    Ok(it)
}

impl BatchIter<'_> {
    fn shuffle(&mut self) {
        self.order = (0..self.data.len()).collect();
        self.order.shuffle(&mut rng::stream(
            self.seed,
            &format!("data/epoch{}", self.epoch),
        ));
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len() / self.batch
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos + self.batch > self.data.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let idx = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        Some(Batch::from_samples(self.data, idx, self.epoch).expect("uniform sample shapes"))
    }
}
