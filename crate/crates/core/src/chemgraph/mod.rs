//! Molecular graphs built from SMILES, plus the token view used as the translation target.

mod features;
mod smiles;
mod tokens;

pub use features::{featurize, FeatureVectors, EDGE_DIM, ELEMENTS, NODE_DIM};
pub use smiles::parse_smiles;
pub use tokens::{
    build_vocabulary, detokenize, tokenize_smiles, TokenSequence, Vocabulary, BOS, EOS, PAD, UNK,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn slot(self) -> usize {
        match self {
            BondOrder::Single => 0,
            BondOrder::Double => 1,
            BondOrder::Triple => 2,
            BondOrder::Aromatic => 3,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            BondOrder::Single => '-',
            BondOrder::Double => '=',
            BondOrder::Triple => '#',
            BondOrder::Aromatic => ':',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomRecord {
    /// Element symbol with canonical capitalization (`"C"`, `"Cl"`), never lowercase.
    pub element: String,
    pub degree: usize,
    pub formal_charge: i32,
    pub aromatic: bool,
    pub in_ring: bool,
    pub explicit_h: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BondRecord {
    pub u: usize,
    pub v: usize,
    pub order: BondOrder,
}

impl BondRecord {
    pub fn other(&self, a: usize) -> usize {
        if self.u == a {
            self.v
        } else {
            self.u
        }
    }
}

/// Heavy-atom molecular graph. Implicit hydrogens are not materialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoleculeGraph {
    pub atoms: Vec<AtomRecord>,
    pub bonds: Vec<BondRecord>,
}

impl MoleculeGraph {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    /// Neighbor lists as `(neighbor, bond index)` pairs.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (i, b) in self.bonds.iter().enumerate() {
            adj[b.u].push((b.v, i));
            adj[b.v].push((b.u, i));
        }
        adj
    }

    /// Flags each bond that lies on a cycle (i.e. is not a bridge).
    pub fn ring_bonds(&self) -> Vec<bool> {
        let n = self.atoms.len();
        let adj = self.adjacency();
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut is_bridge = vec![false; self.bonds.len()];
        let mut timer = 0;
        // Iterative DFS: (vertex, parent edge, next neighbor cursor).
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
            disc[root] = timer;
            low[root] = timer;
            timer += 1;
            while let Some(top) = stack.len().checked_sub(1) {
                let (v, parent_edge, cursor) = stack[top];
                if cursor < adj[v].len() {
                    let (w, e) = adj[v][cursor];
                    stack[top].2 += 1;
                    if Some(e) == parent_edge {
                        continue;
                    }
                    if disc[w] == usize::MAX {
                        disc[w] = timer;
                        low[w] = timer;
                        timer += 1;
                        stack.push((w, Some(e), 0));
                    } else {
                        low[v] = low[v].min(disc[w]);
                    }
                } else {
                    stack.pop();
                    if let (Some(e), Some(&(p, _, _))) = (parent_edge, stack.last()) {
                        low[p] = low[p].min(low[v]);
                        if low[v] > disc[p] {
                            is_bridge[e] = true;
                        }
                    }
                }
            }
        }
        is_bridge.into_iter().map(|b| !b).collect()
    }

    /// Recomputes `degree` and `in_ring` from the bond list.
    pub(crate) fn refresh_topology(&mut self) {
        for a in &mut self.atoms {
            a.degree = 0;
            a.in_ring = false;
        }
        let ring = self.ring_bonds();
        for (b, on_ring) in self.bonds.iter().zip(ring) {
            self.atoms[b.u].degree += 1;
            self.atoms[b.v].degree += 1;
            if on_ring {
                self.atoms[b.u].in_ring = true;
                self.atoms[b.v].in_ring = true;
            }
        }
    }

    /// Relabels atoms so that old atom `i` becomes atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MoleculeGraph {
        assert_eq!(perm.len(), self.atoms.len());
        let mut atoms = self.atoms.clone();
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old].clone();
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| BondRecord {
                u: perm[b.u],
                v: perm[b.v],
                order: b.order,
            })
            .collect();
        MoleculeGraph { atoms, bonds }
    }

    pub fn is_connected(&self) -> bool {
        if self.atoms.is_empty() {
            return false;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.atoms.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(w, _) in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}
