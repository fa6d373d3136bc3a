use crate::chemgraph::{featurize, MoleculeGraph, EDGE_DIM, NODE_DIM};
use crate::scalar::Scalar;
use crate::seeding::Rng;
use crate::tensor::{Mat, ParamId, ParamStore, Segments, Var};

use super::layers::{dropout_mask, Fwd, Linear, MultiHeadAttention};

/// Featurized molecule with directed edge lists (each bond appears both ways).
#[derive(Debug, Clone)]
pub struct MolFeatures<T> {
    pub nodes: Mat<T>,
    pub edges: Mat<T>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl<T: Scalar> MolFeatures<T> {
    pub fn new(graph: &MoleculeGraph) -> Self {
        let fv = featurize::<T>(graph);
        let m = graph.bond_count();
        let mut edges = Mat::zeros((2 * m, EDGE_DIM));
        let mut src = Vec::with_capacity(2 * m);
        let mut dst = Vec::with_capacity(2 * m);
        for (i, b) in graph.bonds.iter().enumerate() {
            for (k, (s, d)) in [(b.u, b.v), (b.v, b.u)].into_iter().enumerate() {
                edges.row_mut(2 * i + k).assign(&fv.edge_features.row(i));
                src.push(s);
                dst.push(d);
            }
        }
        Self {
            nodes: fv.node_features,
            edges,
            src,
            dst,
        }
    }

    pub fn atom_count(&self) -> usize {
        self.nodes.nrows()
    }
}

pub fn featurize_all<T: Scalar>(graphs: &[MoleculeGraph]) -> Vec<MolFeatures<T>> {
    graphs.iter().map(MolFeatures::new).collect()
}

/// Several molecules packed into one disconnected graph.
#[derive(Debug, Clone)]
pub struct GraphBatch<T> {
    pub nodes: Mat<T>,
    pub edges: Mat<T>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub segments: Segments,
}

impl<T: Scalar> GraphBatch<T> {
    pub fn pack(mols: &[&MolFeatures<T>]) -> Self {
        let n: usize = mols.iter().map(|m| m.atom_count()).sum();
        let e: usize = mols.iter().map(|m| m.src.len()).sum();
        let mut nodes = Mat::zeros((n, NODE_DIM));
        let mut edges = Mat::zeros((e, EDGE_DIM));
        let (mut src, mut dst) = (Vec::with_capacity(e), Vec::with_capacity(e));
        let (mut node_off, mut edge_off) = (0, 0);
        for m in mols {
            let (a, b) = (m.atom_count(), m.src.len());
            nodes
                .slice_mut(ndarray::s![node_off..node_off + a, ..])
                .assign(&m.nodes);
            edges
                .slice_mut(ndarray::s![edge_off..edge_off + b, ..])
                .assign(&m.edges);
            src.extend(m.src.iter().map(|&s| s + node_off));
            dst.extend(m.dst.iter().map(|&d| d + node_off));
            node_off += a;
            edge_off += b;
        }
        Self {
            nodes,
            edges,
            src,
            dst,
            segments: Segments::from_lengths(mols.iter().map(|m| m.atom_count())),
        }
    }

    pub fn from_graphs(graphs: &[&MoleculeGraph]) -> Self {
        let feats: Vec<MolFeatures<T>> = graphs.iter().map(|g| MolFeatures::new(g)).collect();
        Self::pack(&feats.iter().collect::<Vec<_>>())
    }

    pub fn graph_count(&self) -> usize {
        self.segments.len()
    }
}

/// `h_v <- MLP((1 + eps) h_v + sum_u ReLU(h_u + W e_uv))`
#[derive(Debug, Clone)]
pub struct GineLayer {
    pub edge: Linear,
    pub hidden: Linear,
    pub out: Linear,
    pub eps: ParamId,
}

impl GineLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut Rng) -> Self {
        Self {
            edge: Linear::new(store, &format!("{name}.edge"), EDGE_DIM, width, false, rng),
            hidden: Linear::new(store, &format!("{name}.mlp0"), width, width, true, rng),
            out: Linear::new(store, &format!("{name}.mlp1"), width, width, true, rng),
            eps: store.add(format!("{name}.eps"), Mat::zeros((1, 1))),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, h: Var, batch: &GraphBatch<T>) -> Var {
        let n = batch.nodes.nrows();
        let edges = f.tape.constant(batch.edges.clone());
        let e = self.edge.forward(f, edges);
        let hu = f.tape.gather_rows(h, batch.src.clone());
        let msg = f.tape.add(hu, e);
        let msg = f.tape.relu(msg);
        let agg = f.tape.scatter_add_rows(msg, batch.dst.clone(), n);
        let eps = f.p(self.eps);
        let one_plus = f.tape.affine(eps, T::one(), T::one());
        let own = f.tape.scale_by(h, one_plus);
        let x = f.tape.add(own, agg);
        let x = self.hidden.forward(f, x);
        let x = f.tape.relu(x);
        self.out.forward(f, x)
    }
}

/// Input projection followed by a stack of GINE layers, ReLU between layers.
#[derive(Debug, Clone)]
pub struct GineStack {
    pub input: Linear,
    pub layers: Vec<GineLayer>,
}

impl GineStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        depth: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), NODE_DIM, width, true, rng),
            layers: (0..depth)
                .map(|k| GineLayer::new(store, &format!("{name}.gine{k}"), width, rng))
                .collect(),
        }
    }

    /// Node states after each layer.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, batch: &GraphBatch<T>) -> Vec<Var> {
        let x = f.tape.constant(batch.nodes.clone());
        let mut h = self.input.forward(f, x);
        let mut states = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(f, h, batch);
            states.push(h);
            if k + 1 < self.layers.len() {
                h = f.tape.relu(h);
            }
        }
        states
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub layer_states: Vec<Var>,
    /// One row per graph.
    pub z: Var,
}

/// GINE stack, node self-attention within each graph, mean pooling.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub gnn: GineStack,
    pub attention: MultiHeadAttention,
    pub width: usize,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        width: usize,
        depth: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            gnn: GineStack::new(store, "encoder", width, depth, rng),
            attention: MultiHeadAttention::new(store, "encoder.attention", width, heads, rng),
            width,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, batch: &GraphBatch<T>) -> EncoderOutput {
        let layer_states = self.gnn.forward(f, batch);
        let h = *layer_states.last().expect("at least one layer");
        let segs = &batch.segments;
        let a = self.attention.forward(f, h, segs, h, segs, false);
        let z = f.tape.segment_mean(a, segs);
        EncoderOutput { layer_states, z }
    }
}

#[derive(Debug, Clone)]
pub struct TaskOutput {
    pub layer_states: Vec<Var>,
    /// Pooled penultimate representation before dropout.
    pub pooled: Var,
    /// Logits for classification, raw values for regression.
    pub predictions: Var,
}

#[derive(Debug, Clone)]
pub struct TaskLearner {
    pub gnn: GineStack,
    pub head: Linear,
    pub dropout: f64,
    pub outputs: usize,
}

impl TaskLearner {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        width: usize,
        depth: usize,
        outputs: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!((0.0..1.0).contains(&dropout), "dropout rate must be in [0, 1)");
        Self {
            gnn: GineStack::new(store, "task", width, depth, rng),
            head: Linear::new(store, "task.head", width, outputs, true, rng),
            dropout,
            outputs,
        }
    }

    /// Dropout on the pooled representation is applied only when `dropout` is given.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        batch: &GraphBatch<T>,
        dropout: Option<&mut Rng>,
    ) -> TaskOutput {
        let layer_states = self.gnn.forward(f, batch);
        let h = *layer_states.last().expect("at least one layer");
        let pooled = f.tape.segment_mean(h, &batch.segments);
        let x = match dropout {
            Some(rng) if self.dropout > 0.0 => {
                let (r, c) = f.tape.shape(pooled);
                let mask = f.tape.constant(dropout_mask(r, c, self.dropout, rng));
                f.tape.mul(pooled, mask)
            }
            _ => pooled,
        };
        let predictions = self.head.forward(f, x);
        TaskOutput {
            layer_states,
            pooled,
            predictions,
        }
    }
}

/// `d -> d -> 1` MLP; the score is the sigmoid of its output.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub hidden: Linear,
    pub out: Linear,
}

impl Discriminator {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, width: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(store, "disc.hidden", width, width, true, rng),
            out: Linear::new(store, "disc.out", width, 1, true, rng),
        }
    }

    /// Pre-sigmoid logits, one row per input row.
    pub fn logits<T: Scalar>(&self, f: &mut Fwd<T>, z: Var) -> Var {
        let h = self.hidden.forward(f, z);
        let h = f.tape.relu(h);
        self.out.forward(f, h)
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, z: Var) -> Var {
        let l = self.logits(f, z);
        f.tape.sigmoid(l)
    }
}
