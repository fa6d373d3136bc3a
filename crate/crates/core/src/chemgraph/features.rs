use ndarray::Array2;

use super::MoleculeGraph;
use crate::scalar::Scalar;

/// Element one-hot slots; anything else falls into the trailing unknown slot.
pub const ELEMENTS: [&str; 12] = ["C", "N", "O", "S", "F", "Cl", "Br", "I", "P", "B", "Si", "Se"];

const ELEMENT_SLOTS: usize = ELEMENTS.len() + 1;
const DEGREE_SLOTS: usize = 7;
const CHARGE_SLOTS: usize = 5;

/// element (+unk) | degree 0..=6 | charge -2..=2 | aromatic | in_ring
pub const NODE_DIM: usize = ELEMENT_SLOTS + DEGREE_SLOTS + CHARGE_SLOTS + 2;
/// single | double | triple | aromatic
pub const EDGE_DIM: usize = 4;

/// Per-atom and per-bond feature rows (edge row `i` belongs to bond `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVectors<T> {
    pub node_features: Array2<T>,
    pub edge_features: Array2<T>,
}

pub fn featurize<T: Scalar>(graph: &MoleculeGraph) -> FeatureVectors<T> {
    let mut node = Array2::zeros((graph.atoms.len(), NODE_DIM));
    for (i, atom) in graph.atoms.iter().enumerate() {
        let element = ELEMENTS
            .iter()
            .position(|e| *e == atom.element)
            .unwrap_or(ELEMENTS.len());
        let degree = atom.degree.min(DEGREE_SLOTS - 1);
        let charge = (atom.formal_charge.clamp(-2, 2) + 2) as usize;
        let mut offset = 0;
        node[[i, offset + element]] = T::one();
        offset += ELEMENT_SLOTS;
        node[[i, offset + degree]] = T::one();
        offset += DEGREE_SLOTS;
        node[[i, offset + charge]] = T::one();
        offset += CHARGE_SLOTS;
        if atom.aromatic {
            node[[i, offset]] = T::one();
        }
        if atom.in_ring {
            node[[i, offset + 1]] = T::one();
        }
    }
    let mut edge = Array2::zeros((graph.bonds.len(), EDGE_DIM));
    for (i, bond) in graph.bonds.iter().enumerate() {
        edge[[i, bond.order.slot()]] = T::one();
    }
    FeatureVectors {
        node_features: node,
        edge_features: edge,
    }
}
