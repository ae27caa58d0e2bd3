//! The 13 vehicle part classes, their physical adjacency, and co-occurrence
//! edge weights.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type ClassId = usize;

pub const N_CLASSES: usize = 13;

pub const CLASS_NAMES: [&str; N_CLASSES] = [
    "Foreground",
    "Wheel",
    "Plate",
    "Front window",
    "Back window",
    "Left front window",
    "Left front door",
    "Left back window",
    "Left back door",
    "Right front window",
    "Right front door",
    "Right back window",
    "Right back door",
];

pub const FOREGROUND: ClassId = 0;
pub const WHEEL: ClassId = 1;
pub const PLATE: ClassId = 2;
pub const FRONT_WINDOW: ClassId = 3;
pub const BACK_WINDOW: ClassId = 4;
pub const LEFT_FRONT_WINDOW: ClassId = 5;
pub const LEFT_FRONT_DOOR: ClassId = 6;
pub const LEFT_BACK_WINDOW: ClassId = 7;
pub const LEFT_BACK_DOOR: ClassId = 8;
pub const RIGHT_FRONT_WINDOW: ClassId = 9;
pub const RIGHT_FRONT_DOOR: ClassId = 10;
pub const RIGHT_BACK_WINDOW: ClassId = 11;
pub const RIGHT_BACK_DOOR: ClassId = 12;

/// The committed adjacency table.
pub const ADJACENCY_FILE: &str = include_str!("../data/adjacency.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Center,
}

pub fn side_of(c: ClassId) -> Side {
    match c {
        5..=8 => Side::Left,
        9..=12 => Side::Right,
        _ => Side::Center,
    }
}

/// The class on the opposite side of the vehicle (identity for center parts).
pub fn mirror_class(c: ClassId) -> ClassId {
    match side_of(c) {
        Side::Left => c + 4,
        Side::Right => c - 4,
        Side::Center => c,
    }
}

pub fn class_by_name(name: &str) -> Option<ClassId> {
    CLASS_NAMES.iter().position(|n| n.eq_ignore_ascii_case(name.trim()))
}

fn edge_key(a: ClassId, b: ClassId) -> (ClassId, ClassId) {
    (a.min(b), a.max(b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartOntology {
    edges: BTreeSet<(ClassId, ClassId)>,
    weights: [[f64; N_CLASSES]; N_CLASSES],
}

impl PartOntology {
    /// Edge set from the committed table, all weights zero.
    pub fn build_adjacency() -> Self {
        let g = Self::parse(ADJACENCY_FILE).expect("committed adjacency table parses");
        PartOntology {
            edges: g.edges,
            weights: [[0.0; N_CLASSES]; N_CLASSES],
        }
    }

    pub fn from_edges(edges: impl IntoIterator<Item = (ClassId, ClassId)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            check_edge(a, b).map_err(Error::Config)?;
            set.insert(edge_key(a, b));
        }
        Ok(PartOntology {
            edges: set,
            weights: [[0.0; N_CLASSES]; N_CLASSES],
        })
    }

    pub fn edges(&self) -> impl Iterator<Item = (ClassId, ClassId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: ClassId, b: ClassId) -> bool {
        self.edges.contains(&edge_key(a, b))
    }

    /// Neighbors of `c`, excluding `c` itself.
    pub fn neighbors(&self, c: ClassId) -> Vec<ClassId> {
        (0..N_CLASSES).filter(|&j| j != c && self.has_edge(c, j)).collect()
    }

    pub fn weight(&self, a: ClassId, b: ClassId) -> f64 {
        self.weights[a][b]
    }

    pub fn weights(&self) -> &[[f64; N_CLASSES]; N_CLASSES] {
        &self.weights
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = [false; N_CLASSES];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(c) = stack.pop() {
            for j in self.neighbors(c) {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// `W_ij = Count(i ∩ j) / N` over edges; non-edges stay zero. A class
    /// counts once per sample however many instances it has.
    pub fn compute_cooccurrence(&self, corpus: &[BTreeSet<ClassId>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts = [[0usize; N_CLASSES]; N_CLASSES];
        for present in corpus {
            if let Some(&bad) = present.iter().find(|&&c| c >= N_CLASSES) {
                return Err(Error::Config(format!("class id {bad} out of range")));
            }
            let ids: Vec<ClassId> = present.iter().copied().collect();
            for (k, &i) in ids.iter().enumerate() {
                for &j in &ids[k + 1..] {
                    counts[i][j] += 1;
                }
            }
        }
        let n = corpus.len() as f64;
        let mut weights = [[0.0; N_CLASSES]; N_CLASSES];
        for &(i, j) in &self.edges {
            let w = counts[i][j] as f64 / n;
            weights[i][j] = w;
            weights[j][i] = w;
        }
        Ok(PartOntology {
            edges: self.edges.clone(),
            weights,
        })
    }

    pub fn serialize(&self) -> String {
        let mut s = String::from("[edges]\n");
        for &(a, b) in &self.edges {
            let _ = writeln!(s, "{} -- {}", CLASS_NAMES[a], CLASS_NAMES[b]);
        }
        s.push_str("\n[weights]\n");
        for (i, row) in self.weights.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}: {}", CLASS_NAMES[i], vals.join(" "));
        }
        s
    }

    /// Parses the `[edges]` / `[weights]` text format. The weights section is
    /// optional; when present it must list all classes.
    pub fn parse(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Edges,
            Weights,
        }
        let err = |line: usize, msg: String| Error::OntologyParse { line, msg };
        let mut section = Section::None;
        let mut edges = BTreeSet::new();
        let mut weights = [[0.0; N_CLASSES]; N_CLASSES];
        let mut rows_seen = [None::<usize>; N_CLASSES];
        let mut any_weights = false;

        for (idx, raw) in text.lines().enumerate() {
            let ln = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[edges]" => {
                    section = Section::Edges;
                    continue;
                }
                "[weights]" => {
                    section = Section::Weights;
                    any_weights = true;
                    continue;
                }
                _ => {}
            }
            match section {
                Section::None => return Err(err(ln, "content outside a section".into())),
                Section::Edges => {
                    let (a, b) = line
                        .split_once("--")
                        .ok_or_else(|| err(ln, format!("expected `A -- B`, got `{line}`")))?;
                    let a = lookup(a).map_err(|m| err(ln, m))?;
                    let b = lookup(b).map_err(|m| err(ln, m))?;
                    check_edge(a, b).map_err(|m| err(ln, m))?;
                    edges.insert(edge_key(a, b));
                }
                Section::Weights => {
                    let (name, vals) = line
                        .split_once(':')
                        .ok_or_else(|| err(ln, format!("expected `Name: w...`, got `{line}`")))?;
                    let i = lookup(name).map_err(|m| err(ln, m))?;
                    if rows_seen[i].is_some() {
                        return Err(err(ln, format!("duplicate weight row for {}", CLASS_NAMES[i])));
                    }
                    let vals: Vec<&str> = vals.split_whitespace().collect();
                    if vals.len() != N_CLASSES {
                        return Err(err(ln, format!("expected {N_CLASSES} weights, got {}", vals.len())));
                    }
                    for (j, v) in vals.iter().enumerate() {
                        let w: f64 = v
                            .parse()
                            .map_err(|_| err(ln, format!("bad weight `{v}`")))?;
                        if !(0.0..=1.0).contains(&w) {
                            return Err(err(ln, format!("weight {w} outside [0, 1]")));
                        }
                        weights[i][j] = w;
                    }
                    rows_seen[i] = Some(ln);
                }
            }
        }

        if any_weights {
            if let Some(i) = rows_seen.iter().position(Option::is_none) {
                return Err(err(
                    text.lines().count(),
                    format!("missing weight row for {}", CLASS_NAMES[i]),
                ));
            }
            for i in 0..N_CLASSES {
                let ln = rows_seen[i].unwrap_or(0);
                for j in 0..N_CLASSES {
                    if weights[i][j] != weights[j][i] {
                        return Err(err(
                            ln,
                            format!(
                                "asymmetric weights between {} and {}",
                                CLASS_NAMES[i], CLASS_NAMES[j]
                            ),
                        ));
                    }
                    let allowed = i != j && edges.contains(&edge_key(i, j));
                    if weights[i][j] != 0.0 && !allowed {
                        return Err(err(
                            ln,
                            format!(
                                "nonzero weight on non-edge {} / {}",
                                CLASS_NAMES[i], CLASS_NAMES[j]
                            ),
                        ));
                    }
                }
            }
        }
        Ok(PartOntology { edges, weights })
    }
}

fn lookup(name: &str) -> std::result::Result<ClassId, String> {
    class_by_name(name).ok_or_else(|| format!("unknown part label `{}`", name.trim()))
}

fn check_edge(a: ClassId, b: ClassId) -> std::result::Result<(), String> {
    if a >= N_CLASSES || b >= N_CLASSES {
        return Err(format!("class id out of range in edge ({a}, {b})"));
    }
    if a == b {
        return Err(format!("self-edge on {}", CLASS_NAMES[a]));
    }
    let (sa, sb) = (side_of(a), side_of(b));
    if sa != Side::Center && sb != Side::Center && sa != sb {
        return Err(format!(
            "edge {} -- {} crosses the left/right divide",
            CLASS_NAMES[a], CLASS_NAMES[b]
        ));
    }
    Ok(())
}
