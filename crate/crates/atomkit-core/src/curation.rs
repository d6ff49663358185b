//! Candidate-molecule screening: a SMILES-subset parser, circular
//! fingerprints, Tanimoto similarity, and the selection filter.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("fingerprint width mismatch: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("contract violation: {0}")]
    Contract(String),
}

fn parse_err(position: usize, message: impl Into<String>) -> CurationError {
    CurationError::Parse { position, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    C,
    N,
    O,
    H,
}

impl Element {
    pub fn valence(self) -> u8 {
        match self {
            Element::C => 4,
            Element::N => 3,
            Element::O => 2,
            Element::H => 1,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::H => "H",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomNode {
    pub element: Element,
    pub aromatic: bool,
    pub in_ring: bool,
    pub implicit_h: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeGraph {
    pub atoms: Vec<AtomNode>,
    pub bonds: Vec<Bond>,
}

impl MoleculeGraph {
    pub fn heavy_atoms(&self) -> usize {
        self.atoms.iter().filter(|a| a.element != Element::H).count()
    }

    pub fn count(&self, element: Element) -> usize {
        self.atoms.iter().filter(|a| a.element == element).count()
    }

    pub fn total_hydrogens(&self) -> usize {
        self.count(Element::H)
            + self.atoms.iter().map(|a| a.implicit_h as usize).sum::<usize>()
    }

    pub fn neighbors(&self, i: usize) -> Vec<(usize, BondOrder)> {
        let mut out = Vec::new();
        for b in &self.bonds {
            if b.i == i {
                out.push((b.j, b.order));
            } else if b.j == i {
                out.push((b.i, b.order));
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        if self.atoms.is_empty() {
            return false;
        }
        let mut seen = vec![false; self.atoms.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for (j, _) in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Number of independent cycles (E - V + components).
    pub fn ring_count(&self) -> usize {
        let n = self.atoms.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = n;
        for b in &self.bonds {
            let (ri, rj) = (find(&mut parent, b.i), find(&mut parent, b.j));
            if ri != rj {
                parent[ri] = rj;
                components -= 1;
            }
        }
        self.bonds.len() + components - n
    }
}

/// Valence contribution of one bond as seen from `element`. Aromatic bonds at
/// oxygen count as single (the lone pair carries the ring), elsewhere 1.5.
fn bond_weight(order: BondOrder, element: Element) -> f64 {
    match order {
        BondOrder::Single => 1.0,
        BondOrder::Double => 2.0,
        BondOrder::Triple => 3.0,
        BondOrder::Aromatic => {
            if element == Element::O {
                1.0
            } else {
                1.5
            }
        }
    }
}

/// Organic-subset SMILES: atoms C/N/O/H (lowercase c/n/o aromatic), bonds
/// `-`, `=`, `#`, branches, ring closures 1..9, `.` fragment separator. No
/// brackets, charges, stereo, or isotopes.
pub fn parse_smiles(s: &str) -> Result<MoleculeGraph, CurationError> {
    if s.is_empty() {
        return Err(parse_err(0, "empty SMILES"));
    }
    let mut atoms: Vec<AtomNode> = Vec::new();
    let mut bonds: Vec<Bond> = Vec::new();
    let mut prev: Option<usize> = None;
    let mut pending: Option<BondOrder> = None;
    let mut stack: Vec<usize> = Vec::new();
    let mut rings: HashMap<u8, (usize, Option<BondOrder>, usize)> = HashMap::new();

    let add_bond = |bonds: &mut Vec<Bond>,
                        atoms: &[AtomNode],
                        i: usize,
                        j: usize,
                        explicit: Option<BondOrder>,
                        pos: usize|
     -> Result<(), CurationError> {
        if i == j {
            return Err(parse_err(pos, "self bond"));
        }
        let order = explicit.unwrap_or_else(|| {
            if atoms[i].aromatic && atoms[j].aromatic {
                BondOrder::Aromatic
            } else {
                BondOrder::Single
            }
        });
        if bonds.iter().any(|b| (b.i == i && b.j == j) || (b.i == j && b.j == i)) {
            return Err(parse_err(pos, "duplicate bond"));
        }
        bonds.push(Bond { i: i.min(j), j: i.max(j), order });
        Ok(())
    };

    for (pos, ch) in s.char_indices() {
        match ch {
            'C' | 'N' | 'O' | 'H' | 'c' | 'n' | 'o' => {
                let element = match ch.to_ascii_uppercase() {
                    'C' => Element::C,
                    'N' => Element::N,
                    'O' => Element::O,
                    _ => Element::H,
                };
                let aromatic = ch.is_ascii_lowercase();
                atoms.push(AtomNode { element, aromatic, in_ring: false, implicit_h: 0 });
                let idx = atoms.len() - 1;
                if let Some(p) = prev {
                    add_bond(&mut bonds, &atoms, p, idx, pending.take(), pos)?;
                } else if pending.is_some() {
                    return Err(parse_err(pos, "bond symbol with no preceding atom"));
                }
                prev = Some(idx);
            }
            '-' => pending = Some(BondOrder::Single),
            '=' => pending = Some(BondOrder::Double),
            '#' => pending = Some(BondOrder::Triple),
            '1'..='9' => {
                let digit = ch as u8 - b'0';
                let here = prev.ok_or_else(|| parse_err(pos, "ring closure before any atom"))?;
                match rings.remove(&digit) {
                    Some((other, opened_order, _)) => {
                        let order = match (opened_order, pending.take()) {
                            (Some(a), Some(b)) if a != b => {
                                return Err(parse_err(pos, "conflicting ring bond orders"))
                            }
                            (a, b) => a.or(b),
                        };
                        add_bond(&mut bonds, &atoms, other, here, order, pos)?;
                    }
                    None => {
                        rings.insert(digit, (here, pending.take(), pos));
                    }
                }
            }
            '(' => {
                let p = prev.ok_or_else(|| parse_err(pos, "branch before any atom"))?;
                stack.push(p);
            }
            ')' => {
                if pending.is_some() {
                    return Err(parse_err(pos, "dangling bond before ')'"));
                }
                prev = Some(stack.pop().ok_or_else(|| parse_err(pos, "unmatched ')'"))?);
            }
            '.' => {
                if pending.is_some() {
                    return Err(parse_err(pos, "bond across fragment separator"));
                }
                prev = None;
            }
            _ => return Err(parse_err(pos, format!("unsupported character '{ch}'"))),
        }
    }
    if !stack.is_empty() {
        return Err(parse_err(s.len(), "unbalanced '('"));
    }
    if let Some((_, (_, _, pos))) = rings.iter().next() {
        return Err(parse_err(*pos, "dangling ring closure"));
    }
    if pending.is_some() {
        return Err(parse_err(s.len(), "trailing bond symbol"));
    }

    let mut graph = MoleculeGraph { atoms, bonds };
    mark_rings(&mut graph);
    assign_implicit_h(&mut graph)?;
    Ok(graph)
}

/// Flags atoms incident to a cycle edge (an edge that is not a bridge).
fn mark_rings(graph: &mut MoleculeGraph) {
    let n = graph.atoms.len();
    let adj: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|i| {
            graph
                .bonds
                .iter()
                .enumerate()
                .filter_map(|(bi, b)| {
                    if b.i == i {
                        Some((b.j, bi))
                    } else if b.j == i {
                        Some((b.i, bi))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut bridge = vec![false; graph.bonds.len()];
    let mut timer = 0usize;
    // Iterative Tarjan bridge finding.
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
        while let Some(&(u, pe, next)) = stack.last() {
            if disc[u] == usize::MAX {
                disc[u] = timer;
                low[u] = timer;
                timer += 1;
            }
            if next < adj[u].len() {
                stack.last_mut().expect("nonempty").2 += 1;
                let (v, be) = adj[u][next];
                if be == pe {
                    continue;
                }
                if disc[v] == usize::MAX {
                    stack.push((v, be, 0));
                } else {
                    low[u] = low[u].min(disc[v]);
                }
            } else {
                stack.pop();
                if let Some(&(parent, _, _)) = stack.last() {
                    low[parent] = low[parent].min(low[u]);
                    if low[u] > disc[parent] {
                        bridge[pe] = true;
                    }
                }
            }
        }
    }
    for (bi, b) in graph.bonds.iter().enumerate() {
        if !bridge[bi] {
            graph.atoms[b.i].in_ring = true;
            graph.atoms[b.j].in_ring = true;
        }
    }
}

fn assign_implicit_h(graph: &mut MoleculeGraph) -> Result<(), CurationError> {
    for i in 0..graph.atoms.len() {
        let a = graph.atoms[i];
        if a.aromatic && !a.in_ring {
            return Err(parse_err(i, "aromatic atom outside a ring"));
        }
        let total: f64 = graph
            .neighbors(i)
            .iter()
            .map(|&(_, order)| bond_weight(order, a.element))
            .sum();
        let used = total.ceil() as i32;
        let free = a.element.valence() as i32 - used;
        if free < 0 {
            return Err(parse_err(
                i,
                format!("valence violation on atom {i} ({})", a.element.symbol()),
            ));
        }
        graph.atoms[i].implicit_h = free as u8;
    }
    Ok(())
}

/// Parses a `.smi`-style listing: one `SMILES name` pair per line, blank
/// lines and `#` comments skipped. A missing name defaults to the SMILES.
pub fn parse_smiles_list(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let mut parts = l.split_whitespace();
            let smiles = parts.next().expect("nonempty line").to_string();
            let name = parts.next().map(str::to_string).unwrap_or_else(|| smiles.clone());
            (smiles, name)
        })
        .collect()
}

pub const FP_BITS: usize = 2048;
pub const FP_RADIUS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    pub bits: Vec<u64>,
    pub n_bits: usize,
}

impl Fingerprint {
    fn empty(n_bits: usize) -> Fingerprint {
        Fingerprint { bits: vec![0; n_bits.div_ceil(64)], n_bits }
    }

    fn set(&mut self, code: u64) {
        let bit = (code % self.n_bits as u64) as usize;
        self.bits[bit / 64] |= 1u64 << (bit % 64);
    }

    pub fn popcount(&self) -> u32 {
        self.bits.iter().map(|w| w.count_ones()).sum()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn bond_code(order: BondOrder) -> u8 {
    match order {
        BondOrder::Single => 1,
        BondOrder::Double => 2,
        BondOrder::Triple => 3,
        BondOrder::Aromatic => 4,
    }
}

/// Circular fingerprint: invariant initial atom codes, then `radius` rounds of
/// neighborhood hashing; every round's code of every atom is folded into the
/// bitset.
pub fn morgan_fingerprint(mol: &MoleculeGraph) -> Fingerprint {
    morgan_fingerprint_sized(mol, FP_RADIUS, FP_BITS)
}

pub fn morgan_fingerprint_sized(mol: &MoleculeGraph, radius: usize, n_bits: usize) -> Fingerprint {
    let mut fp = Fingerprint::empty(n_bits);
    let mut codes: Vec<u64> = (0..mol.atoms.len())
        .map(|i| {
            let a = mol.atoms[i];
            let degree = mol.neighbors(i).len() as u8;
            let bytes = [
                a.element.valence(),
                a.element.symbol().as_bytes()[0],
                degree,
                a.implicit_h,
                a.aromatic as u8,
                a.in_ring as u8,
            ];
            fnv1a(&bytes)
        })
        .collect();
    for code in &codes {
        fp.set(*code);
    }
    for _ in 0..radius {
        let mut next = Vec::with_capacity(codes.len());
        for i in 0..mol.atoms.len() {
            let mut env: Vec<(u8, u64)> = mol
                .neighbors(i)
                .into_iter()
                .map(|(j, order)| (bond_code(order), codes[j]))
                .collect();
            env.sort_unstable();
            let mut bytes = Vec::with_capacity(8 + env.len() * 9);
            bytes.extend_from_slice(&codes[i].to_le_bytes());
            for (bc, nc) in env {
                bytes.push(bc);
                bytes.extend_from_slice(&nc.to_le_bytes());
            }
            next.push(fnv1a(&bytes));
        }
        codes = next;
        for code in &codes {
            fp.set(*code);
        }
    }
    fp
}

/// |a AND b| / |a OR b|, with 0/0 defined as 0.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, CurationError> {
    if a.n_bits != b.n_bits {
        return Err(CurationError::WidthMismatch(a.n_bits, b.n_bits));
    }
    let mut inter = 0u32;
    let mut union = 0u32;
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CriterionFailure {
    TooManyHeavyAtoms { candidate: usize, seed: usize },
    DisallowedElement,
    TooManyOxygens(usize),
    TooManyNitrogens(usize),
    Disconnected,
}

impl std::fmt::Display for CriterionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CriterionFailure::TooManyHeavyAtoms { candidate, seed } => {
                write!(f, "heavy atoms {candidate} exceed seed's {seed}")
            }
            CriterionFailure::DisallowedElement => write!(f, "element outside C/H/O/N"),
            CriterionFailure::TooManyOxygens(n) => write!(f, "{n} oxygens (max 5)"),
            CriterionFailure::TooManyNitrogens(n) => write!(f, "{n} nitrogens (max 3)"),
            CriterionFailure::Disconnected => write!(f, "disconnected fragments"),
        }
    }
}

/// Structural criteria against a seed: heavy-atom budget, element whitelist,
/// oxygen/nitrogen caps, single connected component.
pub fn check_criteria(
    candidate: &MoleculeGraph,
    seed: &MoleculeGraph,
) -> Result<(), CriterionFailure> {
    let heavy = candidate.heavy_atoms();
    let budget = seed.heavy_atoms();
    if heavy > budget {
        return Err(CriterionFailure::TooManyHeavyAtoms { candidate: heavy, seed: budget });
    }
    // The parser only produces C/H/O/N, so the whitelist holds by
    // construction; kept for future atom sources.
    if candidate.count(Element::O) > 5 {
        return Err(CriterionFailure::TooManyOxygens(candidate.count(Element::O)));
    }
    if candidate.count(Element::N) > 3 {
        return Err(CriterionFailure::TooManyNitrogens(candidate.count(Element::N)));
    }
    if !candidate.is_connected() {
        return Err(CriterionFailure::Disconnected);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    pub lower: f64,
    pub upper: f64,
    /// Max allowed similarity to any previously accepted molecule.
    pub accepted_cap: f64,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        if !(0.0 <= self.lower && self.lower < self.upper && self.upper <= 1.0) {
            return Err(CurationError::Contract(format!(
                "need 0 <= lower < upper <= 1, got ({}, {})",
                self.lower, self.upper
            )));
        }
        if !(0.0..=1.0).contains(&self.accepted_cap) {
            return Err(CurationError::Contract("accepted cap must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// The main-text diversity cap.
    pub fn preset_loose() -> SelectionConfig {
        SelectionConfig { lower: 0.875, upper: 0.925, accepted_cap: 0.80 }
    }

    /// The appendix diversity cap.
    pub fn preset_strict() -> SelectionConfig {
        SelectionConfig { lower: 0.875, upper: 0.925, accepted_cap: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accepted {
    pub smiles: String,
    pub name: String,
    pub matched_seed: String,
    pub seed_similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejected {
    pub smiles: String,
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct SelectionResult {
    pub accepted: Vec<Accepted>,
    pub rejected: Vec<Rejected>,
}

/// Screens the pool in order. A candidate is accepted iff it parses, its
/// best-matching seed similarity lies strictly inside (lower, upper), it
/// passes the structural criteria against that seed, and its similarity to
/// every previously accepted molecule stays at or below the cap.
pub fn select_candidates(
    seeds: &[(String, String)],
    pool: &[(String, String)],
    cfg: &SelectionConfig,
) -> Result<SelectionResult, CurationError> {
    select_candidates_sized(seeds, pool, cfg, FP_BITS)
}

pub fn select_candidates_sized(
    seeds: &[(String, String)],
    pool: &[(String, String)],
    cfg: &SelectionConfig,
    n_bits: usize,
) -> Result<SelectionResult, CurationError> {
    cfg.validate()?;
    let mut parsed_seeds = Vec::with_capacity(seeds.len());
    for (smiles, name) in seeds {
        let mol = parse_smiles(smiles)?;
        let fp = morgan_fingerprint_sized(&mol, FP_RADIUS, n_bits);
        parsed_seeds.push((name.clone(), mol, fp));
    }
    if parsed_seeds.is_empty() {
        return Err(CurationError::Contract("no seeds".into()));
    }

    let mut result = SelectionResult::default();
    let mut accepted_fps: Vec<Fingerprint> = Vec::new();
    for (smiles, name) in pool {
        let reject = |reason: String, result: &mut SelectionResult| {
            result.rejected.push(Rejected {
                smiles: smiles.clone(),
                name: name.clone(),
                reason,
            });
        };
        let mol = match parse_smiles(smiles) {
            Ok(m) => m,
            Err(e) => {
                reject(format!("unparseable: {e}"), &mut result);
                continue;
            }
        };
        let fp = morgan_fingerprint_sized(&mol, FP_RADIUS, n_bits);
        let (best_seed, best_sim) = parsed_seeds
            .iter()
            .map(|(n, _, sfp)| (n, tanimoto(&fp, sfp).expect("equal widths")))
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
            .map(|(n, s)| (n.clone(), s))
            .expect("nonempty seeds");
        if !(best_sim > cfg.lower && best_sim < cfg.upper) {
            reject(
                format!("seed similarity {best_sim:.4} outside ({}, {})", cfg.lower, cfg.upper),
                &mut result,
            );
            continue;
        }
        let seed_mol = &parsed_seeds.iter().find(|(n, _, _)| *n == best_seed).unwrap().1;
        if let Err(c) = check_criteria(&mol, seed_mol) {
            reject(format!("criteria: {c}"), &mut result);
            continue;
        }
        if let Some(sim) = accepted_fps
            .iter()
            .map(|afp| tanimoto(&fp, afp).expect("equal widths"))
            .find(|s| *s > cfg.accepted_cap)
        {
            reject(
                format!("similarity {sim:.4} to an accepted molecule exceeds cap {}", cfg.accepted_cap),
                &mut result,
            );
            continue;
        }
        accepted_fps.push(fp);
        result.accepted.push(Accepted {
            smiles: smiles.clone(),
            name: name.clone(),
            matched_seed: best_seed,
            seed_similarity: best_sim,
        });
    }
    Ok(result)
}
