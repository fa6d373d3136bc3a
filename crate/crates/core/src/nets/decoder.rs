use crate::chemgraph::TokenSequence;
use crate::scalar::{c, Scalar};
use crate::seeding::Rng;
use crate::tensor::{Mat, ParamId, ParamStore, Segments, Var};

use super::layers::{glorot, Fwd, LayerNorm, Linear, MultiHeadAttention};

/// Teacher-forcing layout of several sequences: row `j` of a segment reads
/// token `j` and is scored against token `j + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Segments,
}

impl TokenBatch {
    pub fn pack(seqs: &[&TokenSequence]) -> Self {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut positions = Vec::new();
        for s in seqs {
            assert!(s.len() >= 2, "sequence needs at least BOS and EOS");
            let n = s.len() - 1;
            inputs.extend_from_slice(&s.ids[..n]);
            targets.extend_from_slice(&s.ids[1..]);
            positions.extend(0..n);
        }
        Self {
            inputs,
            targets,
            positions,
            segments: Segments::from_lengths(seqs.iter().map(|s| s.len() - 1)),
        }
    }
}

pub fn sinusoidal_positions<T: Scalar>(max_len: usize, width: usize) -> Mat<T> {
    Mat::from_shape_fn((max_len, width), |(p, i)| {
        let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
        let angle = p as f64 * rate;
        c(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm3: LayerNorm,
}

impl DecoderBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        ff: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            self_attention: MultiHeadAttention::new(store, &format!("{name}.self"), width, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            cross_attention: MultiHeadAttention::new(store, &format!("{name}.cross"), width, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            ff_in: Linear::new(store, &format!("{name}.ff0"), width, ff, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ff1"), ff, width, true, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), width),
        }
    }

    fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        x: Var,
        segs: &Segments,
        memory: Var,
        memory_segs: &Segments,
    ) -> Var {
        let a = self.self_attention.forward(f, x, segs, x, segs, true);
        let x = f.tape.add(x, a);
        let x = self.norm1.forward(f, x);
        let a = self
            .cross_attention
            .forward(f, x, segs, memory, memory_segs, false);
        let x = f.tape.add(x, a);
        let x = self.norm2.forward(f, x);
        let h = self.ff_in.forward(f, x);
        let h = f.tape.relu(h);
        let h = self.ff_out.forward(f, h);
        let x = f.tape.add(x, h);
        self.norm3.forward(f, x)
    }
}

/// Post-norm transformer decoder whose memory is the single graph embedding.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub embedding: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub output: Linear,
    pub vocab_size: usize,
    pub width: usize,
    positions: Mat<f64>,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        width: usize,
        blocks: usize,
        heads: usize,
        max_len: usize,
        rng: &mut Rng,
    ) -> Self {
        let embedding = store.add("decoder.embedding", glorot(vocab_size, width, rng));
        let blocks = (0..blocks)
            .map(|b| DecoderBlock::new(store, &format!("decoder.block{b}"), width, heads, 2 * width, rng))
            .collect();
        Self {
            embedding,
            blocks,
            output: Linear::new(store, "decoder.output", width, vocab_size, true, rng),
            vocab_size,
            width,
            positions: sinusoidal_positions(max_len, width),
        }
    }

    /// Logits for every row of `tokens`; `z` holds one row per sequence.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, z: Var, tokens: &TokenBatch) -> Var {
        let table = f.p(self.embedding);
        let emb = f.tape.gather_rows(table, tokens.inputs.clone());
        let pe = Mat::from_shape_fn((tokens.positions.len(), self.width), |(r, i)| {
            c(self.positions[[tokens.positions[r], i]])
        });
        let pe = f.tape.constant(pe);
        let mut x = f.tape.add(emb, pe);
        let memory_segs = Segments::from_lengths(std::iter::repeat_n(1, tokens.segments.len()));
        for block in &self.blocks {
            x = block.forward(f, x, &tokens.segments, z, &memory_segs);
        }
        self.output.forward(f, x)
    }
}
