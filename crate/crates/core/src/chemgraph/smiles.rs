//! SMILES reader for the organic subset, bracket atoms, branches,
//! ring closures (`1`..`9`, `%nn`) and the bond symbols `- = # : / \`.
//!
//! Stereo markers (`/`, `\`, `@`) are accepted and dropped. No valence model and
//! no aromaticity perception: aromatic flags come from lowercase atoms and `:` bonds.

use std::collections::BTreeMap;

use super::{AtomRecord, BondOrder, BondRecord, MoleculeGraph};
use crate::error::{Error, Result};

/// Element symbols recognised inside brackets. Two-letter symbols are tried first.
const BRACKET_ELEMENTS: &[&str] = &[
    "He", "Li", "Be", "Ne", "Na", "Mg", "Al", "Si", "Cl", "Ar", "Ca", "Sc", "Ti", "Cr", "Mn",
    "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Zr", "Nb",
    "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "Xe", "Cs", "Ba", "La",
    "Ce", "Gd", "Hf", "Ta", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At",
    "Rn", "Ra", "Ac", "Th", "Pa", "Np", "Pu", "Am", "Cm", "Eu", "Sm", "Yb", "Dy", "Nd", "Er",
    "H", "B", "C", "N", "O", "F", "P", "S", "K", "V", "Y", "I", "W", "U",
];

const AROMATIC_BRACKET: &[&str] = &["se", "as", "te", "b", "c", "n", "o", "p", "s"];

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    atoms: Vec<AtomRecord>,
    bonds: Vec<BondRecord>,
    bond_colon: Vec<bool>,
}

#[derive(Clone, Copy)]
struct PendingBond {
    order: BondOrder,
    colon: bool,
}

impl<'a> Parser<'a> {
    fn error(&self, position: usize, reason: impl Into<String>) -> Error {
        Error::MalformedSmiles {
            smiles: self.text.to_string(),
            position,
            reason: reason.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<u8> {
        self.bytes.get(self.pos + offset).copied()
    }

    fn add_atom(&mut self, element: &str, aromatic: bool, charge: i32, hydrogens: u32) -> usize {
        self.atoms.push(AtomRecord {
            element: element.to_string(),
            degree: 0,
            formal_charge: charge,
            aromatic,
            in_ring: false,
            explicit_h: hydrogens,
        });
        self.atoms.len() - 1
    }

    fn add_bond(&mut self, u: usize, v: usize, bond: Option<PendingBond>, at: usize) -> Result<()> {
        if u == v {
            return Err(self.error(at, "atom bonded to itself"));
        }
        if self
            .bonds
            .iter()
            .any(|b| (b.u == u && b.v == v) || (b.u == v && b.v == u))
        {
            return Err(self.error(at, "duplicate bond"));
        }
        let (order, colon) = match bond {
            Some(p) => (p.order, p.colon),
            None if self.atoms[u].aromatic && self.atoms[v].aromatic => {
                (BondOrder::Aromatic, false)
            }
            None => (BondOrder::Single, false),
        };
        self.bonds.push(BondRecord { u, v, order });
        self.bond_colon.push(colon);
        Ok(())
    }

    fn bond_symbol(c: u8) -> Option<PendingBond> {
        let order = match c {
            b'-' | b'/' | b'\\' => BondOrder::Single,
            b'=' => BondOrder::Double,
            b'#' => BondOrder::Triple,
            b':' => BondOrder::Aromatic,
            _ => return None,
        };
        Some(PendingBond {
            order,
            colon: c == b':',
        })
    }

    fn read_number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        (self.pos > start).then(|| self.text[start..self.pos].parse().ok())?
    }

    /// Parses `[isotope? symbol chiral? hcount? charge? class?]`; `pos` is at `[`.
    fn bracket_atom(&mut self) -> Result<(String, bool, i32, u32)> {
        let open = self.pos;
        self.pos += 1;
        let _isotope = self.read_number();
        let rest = &self.text[self.pos..];
        let (symbol, aromatic) = if rest.starts_with('*') {
            ("*".to_string(), false)
        } else if let Some(s) = AROMATIC_BRACKET.iter().find(|s| rest.starts_with(**s)) {
            (capitalize(s), true)
        } else if let Some(s) = BRACKET_ELEMENTS.iter().find(|s| rest.starts_with(**s)) {
            (s.to_string(), false)
        } else {
            return Err(self.error(self.pos, "unknown element in bracket atom"));
        };
        self.pos += if symbol == "*" { 1 } else { symbol.len() };
        while self.peek() == Some(b'@') {
            self.pos += 1;
        }
        for tag in ["TH", "AL", "SP", "TB", "OH"] {
            if self.text[self.pos..].starts_with(tag) {
                self.pos += 2;
                self.read_number();
            }
        }
        let mut hydrogens = 0;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            hydrogens = self.read_number().unwrap_or(1);
        }
        let mut charge = 0i32;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(n) = self.read_number() {
                charge = unit * n as i32;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += unit;
                }
            }
        }
        if self.peek() == Some(b':') {
            self.pos += 1;
            if self.read_number().is_none() {
                return Err(self.error(self.pos, "atom class needs a number"));
            }
        }
        if self.peek() != Some(b']') {
            return Err(self.error(open, "unclosed or malformed bracket atom"));
        }
        self.pos += 1;
        Ok((symbol, aromatic, charge, hydrogens))
    }

    fn organic_atom(&mut self) -> Option<(&'static str, bool)> {
        let c = self.peek()?;
        let next = self.peek_at(1);
        let (sym, aromatic, len) = match (c, next) {
            (b'C', Some(b'l')) => ("Cl", false, 2),
            (b'B', Some(b'r')) => ("Br", false, 2),
            (b'B', _) => ("B", false, 1),
            (b'C', _) => ("C", false, 1),
            (b'N', _) => ("N", false, 1),
            (b'O', _) => ("O", false, 1),
            (b'P', _) => ("P", false, 1),
            (b'S', _) => ("S", false, 1),
            (b'F', _) => ("F", false, 1),
            (b'I', _) => ("I", false, 1),
            (b'*', _) => ("*", false, 1),
            (b'b', _) => ("B", true, 1),
            (b'c', _) => ("C", true, 1),
            (b'n', _) => ("N", true, 1),
            (b'o', _) => ("O", true, 1),
            (b'p', _) => ("P", true, 1),
            (b's', _) => ("S", true, 1),
            _ => return None,
        };
        self.pos += len;
        Some((sym, aromatic))
    }

    fn run(mut self) -> Result<MoleculeGraph> {
        if self.text.is_empty() {
            return Err(self.error(0, "empty SMILES"));
        }
        let mut prev: Option<usize> = None;
        let mut branches: Vec<(usize, usize)> = Vec::new();
        let mut pending: Option<(PendingBond, usize)> = None;
        let mut rings: BTreeMap<u32, (usize, Option<PendingBond>, usize)> = BTreeMap::new();

        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                b'(' => {
                    let Some(p) = prev else {
                        return Err(self.error(at, "branch without a preceding atom"));
                    };
                    if pending.is_some() {
                        return Err(self.error(at, "bond symbol before branch"));
                    }
                    branches.push((p, at));
                    self.pos += 1;
                }
                b')' => {
                    let Some((p, _)) = branches.pop() else {
                        return Err(self.error(at, "unbalanced ')'"));
                    };
                    if pending.is_some() {
                        return Err(self.error(at, "dangling bond symbol"));
                    }
                    prev = Some(p);
                    self.pos += 1;
                }
                b'.' => {
                    if pending.is_some() {
                        return Err(self.error(at, "bond symbol before '.'"));
                    }
                    if !branches.is_empty() {
                        return Err(self.error(at, "'.' inside a branch"));
                    }
                    prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let number = if c == b'%' {
                        let digits = self.text.get(self.pos + 1..self.pos + 3);
                        match digits.filter(|d| d.bytes().all(|b| b.is_ascii_digit())) {
                            Some(d) => {
                                self.pos += 3;
                                d.parse::<u32>().unwrap()
                            }
                            None => return Err(self.error(at, "'%' needs two digits")),
                        }
                    } else {
                        self.pos += 1;
                        (c - b'0') as u32
                    };
                    let Some(p) = prev else {
                        return Err(self.error(at, "ring closure without an atom"));
                    };
                    let bond = pending.take().map(|(b, _)| b);
                    if let Some((other, other_bond, open_at)) = rings.remove(&number) {
                        let merged = match (bond, other_bond) {
                            (Some(a), Some(b)) if a.order != b.order => {
                                return Err(self.error(open_at, "conflicting ring-closure bonds"))
                            }
                            (Some(a), _) => Some(a),
                            (None, b) => b,
                        };
                        self.add_bond(other, p, merged, at)?;
                    } else {
                        rings.insert(number, (p, bond, at));
                    }
                }
                b'[' => {
                    let (symbol, aromatic, charge, h) = self.bracket_atom()?;
                    let idx = self.add_atom(&symbol, aromatic, charge, h);
                    if let Some(p) = prev {
                        self.add_bond(p, idx, pending.take().map(|(b, _)| b), at)?;
                    } else if pending.is_some() {
                        return Err(self.error(at, "bond symbol without a preceding atom"));
                    }
                    prev = Some(idx);
                }
                _ if Self::bond_symbol(c).is_some() => {
                    if pending.is_some() {
                        return Err(self.error(at, "two consecutive bond symbols"));
                    }
                    if prev.is_none() {
                        return Err(self.error(at, "bond symbol without a preceding atom"));
                    }
                    pending = Some((Self::bond_symbol(c).unwrap(), at));
                    self.pos += 1;
                }
                _ => {
                    let Some((symbol, aromatic)) = self.organic_atom() else {
                        return Err(self.error(at, format!("unknown symbol {:?}", c as char)));
                    };
                    let idx = self.add_atom(symbol, aromatic, 0, 0);
                    if let Some(p) = prev {
                        self.add_bond(p, idx, pending.take().map(|(b, _)| b), at)?;
                    }
                    prev = Some(idx);
                }
            }
        }
        if let Some((_, at)) = pending {
            return Err(self.error(at, "dangling bond symbol"));
        }
        if let Some(&(_, at)) = branches.last() {
            return Err(self.error(at, "unbalanced '('"));
        }
        if let Some((number, &(_, _, at))) = rings.iter().next() {
            return Err(self.error(at, format!("unmatched ring closure {number}")));
        }
        if self.atoms.is_empty() {
            return Err(self.error(0, "no atoms"));
        }
        for (b, colon) in self.bonds.iter().zip(&self.bond_colon) {
            if *colon {
                self.atoms[b.u].aromatic = true;
                self.atoms[b.v].aromatic = true;
            }
        }
        let mut graph = MoleculeGraph {
            atoms: self.atoms,
            bonds: self.bonds,
        };
        graph.refresh_topology();
        Ok(graph)
    }
}

fn capitalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for (i, ch) in s.chars().enumerate() {
        if i == 0 {
            out.extend(ch.to_uppercase());
        } else {
            out.push(ch);
        }
    }
    out
}

/// Parses one SMILES string into a heavy-atom graph.
pub fn parse_smiles(text: &str) -> Result<MoleculeGraph> {
    Parser {
        text,
        bytes: text.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        bond_colon: Vec::new(),
    }
    .run()
}
