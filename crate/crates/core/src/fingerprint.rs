//! Circular fingerprints, Tanimoto similarity, the pairwise similarity matrix with
//! its thresholded positive/negative sets, and ring-framework keys for splitting.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::chemgraph::MoleculeGraph;
use crate::error::{Error, Result};

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_NBITS: usize = 2048;
/// Largest training set for which the dense matrix is materialized.
pub const DEFAULT_MATRIX_CAP: usize = 20_000;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a sequence of words.
fn fnv1a(words: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    for w in words {
        for byte in w.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

fn element_code(symbol: &str) -> u64 {
    symbol
        .bytes()
        .fold(0u64, |acc, b| (acc << 8) | b as u64)
}

/// Round-0 identifier of an atom.
pub fn atom_invariant(graph: &MoleculeGraph, atom: usize) -> u64 {
    let a = &graph.atoms[atom];
    fnv1a(&[
        element_code(&a.element),
        a.degree as u64,
        a.formal_charge as i64 as u64,
        a.aromatic as u64,
        a.in_ring as u64,
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    words: Vec<u64>,
    nbits: usize,
    radius: usize,
}

impl Fingerprint {
    pub fn empty(nbits: usize, radius: usize) -> Self {
        Self {
            words: vec![0; nbits.div_ceil(64)],
            nbits,
            radius,
        }
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn set(&mut self, bit: usize) {
        let bit = bit % self.nbits;
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        (self.words[bit / 64] >> (bit % 64)) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn on_bits(&self) -> Vec<usize> {
        (0..self.nbits).filter(|&b| self.get(b)).collect()
    }
}

/// Morgan-style circular fingerprint.
///
/// Every identifier of every iteration `0..=radius` sets bit `id % nbits`.
pub fn ecfp(graph: &MoleculeGraph, radius: usize, nbits: usize) -> Fingerprint {
    assert!(nbits >= 64, "fingerprint width must be at least 64 bits");
    let mut fp = Fingerprint::empty(nbits, radius);
    let adj = graph.adjacency();
    let mut ids: Vec<u64> = (0..graph.atom_count())
        .map(|i| atom_invariant(graph, i))
        .collect();
    for &id in &ids {
        fp.set((id % nbits as u64) as usize);
    }
    for _ in 0..radius {
        let next: Vec<u64> = (0..ids.len())
            .map(|v| {
                let mut env: Vec<(u64, u64)> = adj[v]
                    .iter()
                    .map(|&(w, b)| (graph.bonds[b].order.slot() as u64, ids[w]))
                    .collect();
                env.sort_unstable();
                let mut words = Vec::with_capacity(1 + 2 * env.len());
                words.push(ids[v]);
                for (order, id) in env {
                    words.push(order);
                    words.push(id);
                }
                fnv1a(&words)
            })
            .collect();
        ids = next;
        for &id in &ids {
            fp.set((id % nbits as u64) as usize);
        }
    }
    fp
}

/// `|a & b| / |a | b|`, and 1 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.nbits != b.nbits {
        return Err(Error::WidthMismatch {
            left: a.nbits,
            right: b.nbits,
        });
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Dense symmetric pairwise Tanimoto matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn from_fingerprints(fps: &[Fingerprint], cap: usize) -> Result<Self> {
        let n = fps.len();
        if n == 0 {
            return Err(Error::Invalid("similarity matrix needs molecules".into()));
        }
        if n > cap {
            return Err(Error::SizeLimit { n, cap });
        }
        let mut values = Array2::from_elem((n, n), 1.0);
        for i in 0..n {
            for j in 0..i {
                let s = tanimoto(&fps[i], &fps[j])?;
                values[[i, j]] = s;
                values[[j, i]] = s;
            }
        }
        Ok(Self { values })
    }

    /// Wraps a precomputed square matrix.
    pub fn from_values(values: Array2<f64>) -> Self {
        assert_eq!(values.nrows(), values.ncols(), "similarity matrix must be square");
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Lower-triangle multiset `{A_ij | i >= j}`, unsorted.
    pub fn lower_triangle(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                out.push(self.values[[i, j]]);
            }
        }
        out
    }
}

/// Fingerprints every graph and builds the dense matrix.
pub fn similarity_matrix(
    graphs: &[MoleculeGraph],
    radius: usize,
    nbits: usize,
    cap: usize,
) -> Result<SimilarityMatrix> {
    let fps: Vec<_> = graphs.iter().map(|g| ecfp(g, radius, nbits)).collect();
    SimilarityMatrix::from_fingerprints(&fps, cap)
}

/// Linear-interpolation quantile of `values` at fraction `p` in `[0, 1]`.
pub fn quantile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = p * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Positive sets `P_i = {j : A_ij >= alpha}` (always containing `i`); negatives
/// are the complement.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSets {
    pub alpha: f64,
    positives: Vec<Vec<usize>>,
}

impl ContrastSets {
    pub fn from_threshold(a: &SimilarityMatrix, alpha: f64) -> Self {
        let n = a.len();
        let positives = (0..n)
            .map(|i| (0..n).filter(|&j| a.get(i, j) >= alpha).collect())
            .collect();
        Self { alpha, positives }
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positives[i]
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.positives[i].binary_search(&j).is_ok()
    }

    pub fn negatives(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| !self.is_positive(i, j)).collect()
    }

    /// Positives of each batch member restricted to other batch members, as
    /// positions within `batch`.
    pub fn batch_positives(&self, batch: &[usize]) -> Vec<Vec<usize>> {
        batch
            .iter()
            .enumerate()
            .map(|(bi, &i)| {
                batch
                    .iter()
                    .enumerate()
                    .filter(|&(bj, &j)| bj != bi && self.is_positive(i, j))
                    .map(|(bj, _)| bj)
                    .collect()
            })
            .collect()
    }
}

/// Threshold at the `q`-th quartile (`q` in 1..=3) of the lower triangle of `a`.
pub fn contrast_sets(a: &SimilarityMatrix, q: u8) -> Result<ContrastSets> {
    if !(1..=3).contains(&q) {
        return Err(Error::Invalid(format!("quartile index {q} not in 1..=3")));
    }
    let mut values = a.lower_triangle();
    let alpha = quantile(&mut values, q as f64 / 4.0);
    Ok(ContrastSets::from_threshold(a, alpha))
}

/// Ring-and-linker framework key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScaffoldKey(pub String);

/// Atoms left after repeatedly stripping non-ring atoms of degree at most one.
pub fn framework_atoms(graph: &MoleculeGraph) -> Vec<bool> {
    let n = graph.atom_count();
    let adj = graph.adjacency();
    let mut alive = vec![true; n];
    let mut degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    loop {
        let doomed: Vec<usize> = (0..n)
            .filter(|&v| alive[v] && !graph.atoms[v].in_ring && degree[v] <= 1)
            .collect();
        if doomed.is_empty() {
            break;
        }
        for &v in &doomed {
            alive[v] = false;
        }
        for &v in &doomed {
            for &(w, _) in &adj[v] {
                if alive[w] {
                    degree[w] -= 1;
                }
            }
        }
    }
    alive
}

fn atom_label(graph: &MoleculeGraph, i: usize) -> String {
    let a = &graph.atoms[i];
    if a.aromatic {
        a.element.to_lowercase()
    } else {
        a.element.clone()
    }
}

pub fn scaffold(graph: &MoleculeGraph) -> ScaffoldKey {
    let alive = framework_atoms(graph);
    let mut edges: Vec<String> = graph
        .bonds
        .iter()
        .filter(|b| alive[b.u] && alive[b.v])
        .map(|b| {
            let (x, y) = (atom_label(graph, b.u), atom_label(graph, b.v));
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            format!("{lo}{}{hi}", b.order.symbol())
        })
        .collect();
    edges.sort_unstable();
    ScaffoldKey(edges.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemgraph::parse_smiles;

    fn fp(s: &str, radius: usize) -> Fingerprint {
        ecfp(&parse_smiles(s).unwrap(), radius, DEFAULT_NBITS)
    }

    #[test]
    fn radius_zero_element_bits_are_disjoint() {
        let (c, o) = (fp("C", 0), fp("O", 0));
        let gc = parse_smiles("C").unwrap();
        let go = parse_smiles("O").unwrap();
        let bc = (atom_invariant(&gc, 0) % 2048) as usize;
        let bo = (atom_invariant(&go, 0) % 2048) as usize;
        assert_ne!(bc, bo);
        assert_eq!(c.on_bits(), [bc]);
        assert_eq!(o.on_bits(), [bo]);
        assert_eq!(tanimoto(&c, &o).unwrap(), 0.0);
    }

    #[test]
    fn relabeled_benzene_same_fingerprint() {
        let g = parse_smiles("c1ccccc1O").unwrap();
        let p = g.permuted(&[3, 5, 0, 6, 1, 4, 2]);
        assert_eq!(ecfp(&g, 2, 2048), ecfp(&p, 2, 2048));
    }

    #[test]
    fn tanimoto_cases() {
        let mut a = Fingerprint::empty(64, 0);
        let mut b = Fingerprint::empty(64, 0);
        assert_eq!(tanimoto(&a, &b).unwrap(), 1.0);
        for bit in [1, 2, 3] {
            a.set(bit);
        }
        for bit in [2, 3, 4, 5] {
            b.set(bit);
        }
        assert!((tanimoto(&a, &b).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
        let c = Fingerprint::empty(128, 0);
        assert!(matches!(tanimoto(&a, &c), Err(Error::WidthMismatch { .. })));
    }

    #[test]
    fn matrix_basics_and_cap() {
        let g = parse_smiles("CCO").unwrap();
        let m = similarity_matrix(std::slice::from_ref(&g), 2, 2048, 10).unwrap();
        assert_eq!(m.values(), &Array2::from_elem((1, 1), 1.0));
        let m = similarity_matrix(&[g.clone(), g.clone()], 2, 2048, 10).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));
        assert!(matches!(
            similarity_matrix(&[g.clone(), g.clone(), g], 2, 2048, 2),
            Err(Error::SizeLimit { n: 3, cap: 2 })
        ));
    }

    fn matrix(values: Array2<f64>) -> SimilarityMatrix {
        SimilarityMatrix { values }
    }

    #[test]
    fn quartile_threshold_by_hand() {
        // lower triangle: 1, 0.1, 1, 0.2, 0.3, 1 -> sorted 0.1 0.2 0.3 1 1 1
        let a = matrix(ndarray::array![[1.0, 0.1, 0.2], [0.1, 1.0, 0.3], [0.2, 0.3, 1.0]]);
        let sets = contrast_sets(&a, 2).unwrap();
        assert!((sets.alpha - 0.65).abs() < 1e-12);
        for i in 0..3 {
            assert_eq!(sets.positives(i), [i]);
        }
        // q=1: position 1.25 -> 0.2 + 0.25 * 0.1
        let sets = contrast_sets(&a, 1).unwrap();
        assert!((sets.alpha - 0.225).abs() < 1e-12);
        assert_eq!(sets.positives(0), [0]);
        assert_eq!(sets.positives(1), [1, 2]);
        assert_eq!(sets.negatives(1), [0]);
        assert!(contrast_sets(&a, 4).is_err());
        let ones = matrix(Array2::from_elem((3, 3), 1.0));
        let sets = contrast_sets(&ones, 3).unwrap();
        assert_eq!(sets.alpha, 1.0);
        assert!(sets.negatives(2).is_empty());
    }

    #[test]
    fn batch_positives_exclude_self() {
        let a = matrix(ndarray::array![[1.0, 0.9, 0.0], [0.9, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let sets = ContrastSets::from_threshold(&a, 0.5);
        assert_eq!(
            sets.batch_positives(&[2, 0, 1]),
            vec![vec![], vec![2], vec![1]]
        );
    }

    #[test]
    fn scaffold_keys() {
        let key = |s: &str| scaffold(&parse_smiles(s).unwrap());
        assert_eq!(key("CCO").0, "");
        assert_eq!(key("Cc1ccccc1"), key("c1ccccc1"));
        assert_eq!(key("c1ccccc1").0, "c:c,c:c,c:c,c:c,c:c,c:c");
        assert_eq!(key("c1ccccc1CCc1ccccc1"), key("Oc1ccccc1CCc1ccc(Cl)cc1"));
        assert_ne!(key("c1ccccc1CCc1ccccc1"), key("c1ccccc1Cc1ccccc1"));
        let g = parse_smiles("CC(=O)Nc1ccc(O)cc1").unwrap();
        let p = g.permuted(&[10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
        assert_eq!(scaffold(&g), scaffold(&p));
    }
}
