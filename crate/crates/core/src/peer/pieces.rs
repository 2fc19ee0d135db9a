use serde::{Deserialize, Serialize};

/// Fixed-size piece ownership bitmap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PieceSet {
    words: Vec<u64>,
    len: usize,
    count: usize,
}

impl PieceSet {
    pub fn empty(len: usize) -> Self {
        PieceSet {
            words: vec![0; len.div_ceil(64)],
            len,
            count: 0,
        }
    }

    pub fn full(len: usize) -> Self {
        let mut set = PieceSet::empty(len);
        for (i, w) in set.words.iter_mut().enumerate() {
            let lo = i * 64;
            let n = (len - lo).min(64);
            *w = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
        }
        set.count = len;
        set
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_full(&self) -> bool {
        self.count == self.len
    }

    #[inline]
    pub fn contains(&self, piece: usize) -> bool {
        debug_assert!(piece < self.len);
        self.words[piece / 64] >> (piece % 64) & 1 == 1
    }

    /// Returns `true` when the piece was not already present.
    pub fn insert(&mut self, piece: usize) -> bool {
        assert!(piece < self.len, "piece {piece} out of range {}", self.len);
        let w = &mut self.words[piece / 64];
        let bit = 1u64 << (piece % 64);
        if *w & bit != 0 {
            return false;
        }
        *w |= bit;
        self.count += 1;
        true
    }

    /// Number of pieces in `self` that `other` lacks.
    pub fn difference_count(&self, other: &PieceSet) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & !b).count_ones() as usize)
            .sum()
    }

    pub fn is_subset(&self, other: &PieceSet) -> bool {
        self.difference_count(other) == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(i, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(i * 64 + bit)
            })
        })
    }

    /// Pieces present in `self` but in neither `a` nor `b`.
    pub fn iter_missing_from<'a>(
        &'a self,
        a: &'a PieceSet,
        b: &'a PieceSet,
    ) -> impl Iterator<Item = usize> + 'a {
        self.words.iter().enumerate().flat_map(move |(i, &w)| {
            let mut w = w & !a.words[i] & !b.words[i];
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(i * 64 + bit)
            })
        })
    }

    pub fn remove(&mut self, piece: usize) -> bool {
        let w = &mut self.words[piece / 64];
        let bit = 1u64 << (piece % 64);
        if *w & bit == 0 {
            return false;
        }
        *w &= !bit;
        self.count -= 1;
        true
    }
}
