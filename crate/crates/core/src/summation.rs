//! Pairwise (tree) summation.
//!
//! The result depends only on the order of the inputs, never on how the work
//! was split across threads, which keeps reductions reproducible.

const BLOCK: usize = 32;

/// Pairwise sum of a slice with a naive base case of 32 elements.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Streaming pairwise accumulator.
///
/// Values are summed naively in blocks of 32; completed blocks are merged
/// like a binary counter, so the rounding error grows like `log(n)`.
#[derive(Clone, Debug, Default)]
pub struct PairwiseSum {
    block: f64,
    filled: usize,
    stack: Vec<(f64, u32)>,
}

impl PairwiseSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        self.block += value;
        self.filled += 1;
        if self.filled == BLOCK {
            self.push_block();
        }
    }

    fn push_block(&mut self) {
        let mut carry = (self.block, 0u32);
        self.block = 0.0;
        self.filled = 0;
        while let Some(&(top, level)) = self.stack.last() {
            if level != carry.1 {
                break;
            }
            self.stack.pop();
            carry = (top + carry.0, level + 1);
        }
        self.stack.push(carry);
    }

    pub fn total(&self) -> f64 {
        let mut acc = self.block;
        for &(v, _) in self.stack.iter().rev() {
            acc += v;
        }
        acc
    }
}

impl Extend<f64> for PairwiseSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for v in iter {
            self.add(v);
        }
    }
}

impl FromIterator<f64> for PairwiseSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        acc.extend(iter);
        acc
    }
}
