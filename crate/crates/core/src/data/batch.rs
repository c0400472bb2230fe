use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::vocab::{bigram_key, PAD};
use super::{RelationInstance, Span, Vocabularies};
use crate::error::Result;

pub const DEFAULT_MAX_POS: usize = 50;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// A padded mini-batch. Per-position arrays are `[b, t_max]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Batch {
    /// Index of each row's instance in the list passed to [`batchify`].
    pub indices: Vec<usize>,
    pub lengths: Vec<usize>,
    pub t_max: usize,
    pub chars: Vec<Vec<char>>,
    pub char_ids: Vec<usize>,
    pub bigram_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub head_pos: Vec<usize>,
    pub tail_pos: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// Total number of real (unmasked) characters.
    pub fn num_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Flat `[b*t_max]` indices of real positions, sentence by sentence.
    pub fn real_positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_tokens());
        for (b, &len) in self.lengths.iter().enumerate() {
            out.extend((0..len).map(|t| b * self.t_max + t));
        }
        out
    }

    /// For each sentence, the rows of its tokens in the packed (real-only)
    /// token order produced by [`Batch::real_positions`].
    pub fn packed_segments(&self) -> Vec<Vec<usize>> {
        let mut start = 0;
        self.lengths
            .iter()
            .map(|&len| {
                let seg = (start..start + len).collect();
                start += len;
                seg
            })
            .collect()
    }

    /// Characters of every real token in packed order.
    pub fn packed_chars(&self) -> Vec<char> {
        self.chars.iter().flatten().copied().collect()
    }
}

/// Signed distance from `i` to the nearest index of `span` (0 inside it),
/// clipped to `±max_pos` and shifted into `0..=2*max_pos`.
pub fn relative_position(i: usize, span: Span, max_pos: usize) -> usize {
    let rel: i64 = if i < span.start {
        i as i64 - span.start as i64
    } else if i >= span.end {
        i as i64 - (span.end as i64 - 1)
    } else {
        0
    };
    let m = max_pos as i64;
    (rel.clamp(-m, m) + m) as usize
}

/// Groups instances into padded batches. With a seed the instance order is
/// shuffled first (deterministically); without one, file order is kept.
pub fn batchify(
    instances: &[RelationInstance],
    vocab: &Vocabularies,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    max_pos: usize,
) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size.max(1))
        .map(|chunk| make_batch(instances, chunk, vocab, max_pos))
        .collect()
}

pub fn make_batch(
    instances: &[RelationInstance],
    indices: &[usize],
    vocab: &Vocabularies,
    max_pos: usize,
) -> Result<Batch> {
    let t_max = indices
        .iter()
        .map(|&i| instances[i].len())
        .max()
        .unwrap_or(0);
    let n = indices.len() * t_max;
    let mut batch = Batch {
        indices: indices.to_vec(),
        lengths: Vec::with_capacity(indices.len()),
        t_max,
        chars: Vec::with_capacity(indices.len()),
        char_ids: vec![PAD; n],
        bigram_ids: vec![PAD; n],
        mask: vec![false; n],
        head_pos: vec![0; n],
        tail_pos: vec![0; n],
        labels: Vec::with_capacity(indices.len()),
    };
    for (b, &idx) in indices.iter().enumerate() {
        let inst = &instances[idx];
        batch.lengths.push(inst.len());
        batch.chars.push(inst.chars.clone());
        batch.labels.push(vocab.label_id(&inst.relation)?);
        for (t, &c) in inst.chars.iter().enumerate() {
            let at = b * t_max + t;
            batch.char_ids[at] = vocab.char_id(c);
            batch.bigram_ids[at] = vocab.bigrams.id_or_unk(&bigram_key(&inst.chars, t));
            batch.mask[at] = true;
            batch.head_pos[at] = relative_position(t, inst.head, max_pos);
            batch.tail_pos[at] = relative_position(t, inst.tail, max_pos);
        }
    }
    Ok(batch)
}
