/// A padded token batch with its loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Row-major `[batch, seq_len]` token ids.
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    /// `mask[b * seq_len + p]` scores the prediction of token `p + 1` from
    /// position `p`.
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn scored_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
