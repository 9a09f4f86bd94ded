use crate::error::{Error, Result};
use crate::tensor::SeqLayout;

/// Attention probabilities of every block, head and frequency.
///
/// Block `l` holds `[U, F, heads, T, T]` values; row `q` of a `T x T`
/// matrix is the distribution of query frame `q` over key frames.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layout: SeqLayout,
    pub heads: usize,
    pub blocks: Vec<Vec<f64>>,
}

impl AttentionRecord {
    pub fn new(layout: SeqLayout, heads: usize) -> Self {
        Self { layout, heads, blocks: Vec::new() }
    }

    pub(crate) fn push_block(&mut self, scores: Vec<f64>) {
        self.blocks.push(scores);
    }

    fn check(&self, block: usize, head: usize, utterance: usize) -> Result<()> {
        if block >= self.blocks.len() || head >= self.heads || utterance >= self.layout.utterances {
            return Err(Error::InvalidArgument(format!(
                "block {block}, head {head}, utterance {utterance} out of range ({} blocks, {} heads, {} utterances)",
                self.blocks.len(),
                self.heads,
                self.layout.utterances
            )));
        }
        Ok(())
    }

    /// The `T x T` matrix of one frequency.
    pub fn scores(&self, block: usize, head: usize, utterance: usize, freq: usize) -> Result<&[f64]> {
        self.check(block, head, utterance)?;
        if freq >= self.layout.freqs {
            return Err(Error::InvalidArgument(format!("frequency {freq} out of range")));
        }
        let t = self.layout.frames;
        let seq = utterance * self.layout.freqs + freq;
        let start = (seq * self.heads + head) * t * t;
        Ok(&self.blocks[block][start..start + t * t])
    }

    /// Query-key map: scores averaged over frequencies, `T x T`.
    pub fn qk_map(&self, block: usize, head: usize, utterance: usize) -> Result<Vec<f64>> {
        self.check(block, head, utterance)?;
        let (nf, t) = (self.layout.freqs, self.layout.frames);
        let mut out = vec![0.0; t * t];
        for f in 0..nf {
            for (o, v) in out.iter_mut().zip(self.scores(block, head, utterance, f)?) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= nf as f64);
        Ok(out)
    }

    /// Frequency-key map: scores averaged over queries, `F x T`.
    pub fn fk_map(&self, block: usize, head: usize, utterance: usize) -> Result<Vec<f64>> {
        self.check(block, head, utterance)?;
        let (nf, t) = (self.layout.freqs, self.layout.frames);
        let mut out = vec![0.0; nf * t];
        for f in 0..nf {
            let s = self.scores(block, head, utterance, f)?;
            let row = &mut out[f * t..(f + 1) * t];
            for q in 0..t {
                for (o, v) in row.iter_mut().zip(&s[q * t..(q + 1) * t]) {
                    *o += v;
                }
            }
            row.iter_mut().for_each(|v| *v /= t as f64);
        }
        Ok(out)
    }
}
