use rand::seq::SliceRandom;

use super::alphabet::PAD;
use crate::rng::{self, Stream};

/// Padded `[rows, len]` block of encoded words, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub rows: usize,
    pub len: usize,
    /// Encoded length of each row (BOS and EOS included).
    pub lengths: Vec<usize>,
    /// Position of each row in the input list.
    pub indices: Vec<usize>,
}

impl Batch {
    /// Gathers `indices` from `encoded`, padding with PAD to `pad_len`
    /// (or to the longest member when `None`).
    pub fn gather(encoded: &[Vec<usize>], indices: &[usize], pad_len: Option<usize>) -> Self {
        let longest = indices.iter().map(|&i| encoded[i].len()).max().unwrap_or(0);
        let len = pad_len.unwrap_or(longest).max(longest);
        let mut ids = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            ids.extend_from_slice(&encoded[i]);
            ids.extend(std::iter::repeat(PAD).take(len - encoded[i].len()));
        }
        Batch {
            ids,
            rows: indices.len(),
            len,
            lengths: indices.iter().map(|&i| encoded[i].len()).collect(),
            indices: indices.to_vec(),
        }
    }

    pub fn token(&self, row: usize, t: usize) -> usize {
        self.ids[row * self.len + t]
    }

    /// Column `t` across rows.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.rows).map(|r| self.token(r, t)).collect()
    }

    /// True at real (non-PAD) positions.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.rows)
            .flat_map(|r| (0..self.len).map(move |t| t < self.lengths[r]))
            .collect()
    }

    /// Rows that still have a real token at position `t`.
    pub fn active(&self, t: usize) -> Vec<bool> {
        self.lengths.iter().map(|&l| t < l).collect()
    }
}

/// Index groups for one epoch, shuffled deterministically per `(seed, epoch)`.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = rng::indexed(seed, Stream::Shuffle, epoch);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Batches of `encoded` for one epoch. With `pad_to_longest == false` every
/// batch is padded to the longest word of the whole input.
pub fn make_batches(
    encoded: &[Vec<usize>],
    batch_size: usize,
    pad_to_longest: bool,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Batch> + '_ {
    let global = encoded.iter().map(Vec::len).max().unwrap_or(0);
    let pad = (!pad_to_longest).then_some(global);
    batch_order(encoded.len(), batch_size, seed, epoch, true)
        .into_iter()
        .map(move |idx| Batch::gather(encoded, &idx, pad))
}
