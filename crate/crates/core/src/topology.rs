//! Radial configurations, branch-exchange masks and exact configuration counts.

use num_bigint::BigInt;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{DnrError, Result};
use crate::grid::Network;

/// Branch status vector: `true` means closed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration {
    closed: Vec<bool>,
}

impl Configuration {
    pub fn new(closed: Vec<bool>) -> Self {
        Configuration { closed }
    }

    pub fn len(&self) -> usize {
        self.closed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closed.is_empty()
    }

    pub fn is_closed(&self, branch: usize) -> bool {
        self.closed[branch]
    }

    pub fn set(&mut self, branch: usize, closed: bool) {
        self.closed[branch] = closed;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.closed
    }

    pub fn open_branches(&self) -> impl Iterator<Item = usize> + '_ {
        self.closed.iter().enumerate().filter(|(_, c)| !**c).map(|(k, _)| k)
    }

    /// Number of branches whose status differs (the L1 distance of the 0/1 vectors).
    pub fn hamming(&self, other: &Configuration) -> usize {
        self.closed
            .iter()
            .zip(&other.closed)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// `"1101..."` rendering used by the dataset files.
    pub fn to_bitstring(&self) -> String {
        self.closed.iter().map(|&c| if c { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(bits: &str) -> Result<Self> {
        bits.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(DnrError::Validation(format!("invalid configuration bit '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Configuration::new)
    }
}

/// Spanning forest induced by the closed branches, one tree per substation.
#[derive(Debug, Clone)]
pub struct Forest {
    pub parent: Vec<Option<usize>>,
    pub parent_branch: Vec<Option<usize>>,
    pub root: Vec<usize>,
    pub depth: Vec<usize>,
    /// Breadth-first order starting from the substations.
    pub order: Vec<usize>,
}

impl Forest {
    /// Returns `None` unless the closed branches form exactly one tree per
    /// substation covering every bus.
    pub fn build(net: &Network, config: &Configuration) -> Option<Forest> {
        let n = net.bus_count();
        if config.len() != net.branch_count() {
            return None;
        }
        let mut parent = vec![None; n];
        let mut parent_branch = vec![None; n];
        let mut root = vec![usize::MAX; n];
        let mut depth = vec![0; n];
        let mut order = Vec::with_capacity(n);
        let mut visited = vec![false; n];
        for &s in net.substations() {
            visited[s] = true;
            root[s] = s;
            order.push(s);
        }
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            for &(br, w) in net.incident(u) {
                if !config.is_closed(br) || parent_branch[u] == Some(br) {
                    continue;
                }
                if visited[w] {
                    // Either a loop or a path joining two substations.
                    return None;
                }
                visited[w] = true;
                parent[w] = Some(u);
                parent_branch[w] = Some(br);
                root[w] = root[u];
                depth[w] = depth[u] + 1;
                order.push(w);
            }
        }
        if order.len() != n {
            return None;
        }
        // Closed branches inside unreached components were never inspected;
        // full coverage plus the edge count rules them out.
        let closed = config.as_slice().iter().filter(|c| **c).count();
        if closed != n - net.substation_count() {
            return None;
        }
        Some(Forest {
            parent,
            parent_branch,
            root,
            depth,
            order,
        })
    }

    /// Branches on the unique cycle (through the substation super-node when
    /// `u` and `v` hang off different substations) closed by an edge `u`-`v`.
    pub fn cycle_branches(&self, mut u: usize, mut v: usize) -> Vec<usize> {
        let mut out = Vec::new();
        if self.root[u] != self.root[v] {
            for start in [u, v] {
                let mut x = start;
                while let Some(br) = self.parent_branch[x] {
                    out.push(br);
                    x = self.parent[x].expect("non-root has parent");
                }
            }
            return out;
        }
        while self.depth[u] > self.depth[v] {
            out.push(self.parent_branch[u].unwrap());
            u = self.parent[u].unwrap();
        }
        while self.depth[v] > self.depth[u] {
            out.push(self.parent_branch[v].unwrap());
            v = self.parent[v].unwrap();
        }
        while u != v {
            out.push(self.parent_branch[u].unwrap());
            out.push(self.parent_branch[v].unwrap());
            u = self.parent[u].unwrap();
            v = self.parent[v].unwrap();
        }
        out
    }
}

pub fn is_radial(net: &Network, config: &Configuration) -> bool {
    Forest::build(net, config).is_some()
}

/// Feasible `(close i, open j)` branch exchanges for a radial configuration.
///
/// Row `i` is populated for each open switchable branch: every switchable
/// branch on its fundamental cycle, plus the diagonal `(i, i)` which encodes
/// staying in the current configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchPairMask {
    m: usize,
    pairs: Vec<(u16, u16)>,
}

impl SwitchPairMask {
    pub fn from_pairs(m: usize, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        pairs.dedup();
        SwitchPairMask {
            m,
            pairs: pairs.into_iter().map(|(i, j)| (i as u16, j as u16)).collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn count(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.m && j < self.m && self.pairs.binary_search(&(i as u16, j as u16)).is_ok()
    }

    /// Feasible pairs in row-major order.
    pub fn pairs(&self) -> impl ExactSizeIterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().map(|&(i, j)| (i as usize, j as usize))
    }

    /// Flat `i * m + j` indices of the feasible cells, ascending.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.pairs().map(|(i, j)| i * self.m + j).collect()
    }

    pub fn dense(&self) -> Vec<bool> {
        let mut out = vec![false; self.m * self.m];
        for (i, j) in self.pairs() {
            out[i * self.m + j] = true;
        }
        out
    }

    /// Rows that may be closed (open switchable branches).
    pub fn closeable(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.pairs().map(|(i, _)| i).collect();
        rows.dedup();
        rows
    }

    /// The stay cell used when a single representative is needed: the
    /// diagonal entry of the lowest-indexed closeable branch.
    pub fn canonical_stay(&self) -> Option<(usize, usize)> {
        self.pairs().find(|(i, j)| i == j)
    }

    /// Feasible pairs that actually change the configuration.
    pub fn exchanges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs().filter(|(i, j)| i != j)
    }
}

pub fn switch_pair_mask(net: &Network, config: &Configuration) -> Result<SwitchPairMask> {
    let forest = Forest::build(net, config)
        .ok_or_else(|| DnrError::Contract("switch-pair mask requires a radial configuration".into()))?;
    Ok(mask_from_forest(net, config, &forest))
}

pub(crate) fn mask_from_forest(net: &Network, config: &Configuration, forest: &Forest) -> SwitchPairMask {
    let m = net.branch_count();
    let mut pairs = Vec::new();
    for i in config.open_branches() {
        let br = &net.branches[i];
        if !br.switchable {
            continue;
        }
        pairs.push((i, i));
        for j in forest.cycle_branches(br.from, br.to) {
            if net.branches[j].switchable {
                pairs.push((i, j));
            }
        }
    }
    SwitchPairMask::from_pairs(m, pairs)
}

/// Close branch `close_i` and open `open_j`; `(i, i)` leaves the configuration unchanged.
pub fn apply_pair(
    config: &Configuration,
    mask: &SwitchPairMask,
    close_i: usize,
    open_j: usize,
) -> Result<Configuration> {
    if mask.m() != config.len() || !mask.contains(close_i, open_j) {
        return Err(DnrError::RejectedAction {
            close: close_i,
            open: open_j,
        });
    }
    let mut next = config.clone();
    if close_i != open_j {
        next.set(close_i, true);
        next.set(open_j, false);
    }
    Ok(next)
}

/// Exact number of radial configurations (spanning forests with one
/// substation per tree), via the matrix-tree theorem with all substations
/// merged into one node and a fraction-free integer determinant.
pub fn count_radial_configurations(net: &Network) -> Result<BigInt> {
    let n = net.bus_count();
    // Substations collapse to node 0; load buses follow in index order.
    let mut node = vec![0usize; n];
    let mut k = 1;
    for bus in 0..n {
        if !net.is_substation(bus) {
            node[bus] = k;
            k += 1;
        }
    }
    if !is_connected(net) {
        return Err(DnrError::Contract(
            "configuration counting requires a feeder that is connected with all branches closed".into(),
        ));
    }
    let size = k - 1;
    if size == 0 {
        return Ok(BigInt::one());
    }
    let mut lap = vec![vec![0i64; size]; size];
    for br in &net.branches {
        let (a, b) = (node[br.from], node[br.to]);
        if a == b {
            continue;
        }
        for (x, y) in [(a, b), (b, a)] {
            if x > 0 {
                lap[x - 1][x - 1] += 1;
                if y > 0 {
                    lap[x - 1][y - 1] -= 1;
                }
            }
        }
    }
    let matrix = lap
        .into_iter()
        .map(|row| row.into_iter().map(BigInt::from).collect())
        .collect();
    Ok(bareiss_determinant(matrix))
}

fn is_connected(net: &Network) -> bool {
    let n = net.bus_count();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &(_, w) in net.incident(u) {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Fraction-free Gaussian elimination; every division is exact.
pub fn bareiss_determinant(mut a: Vec<Vec<BigInt>>) -> BigInt {
    let n = a.len();
    if n == 0 {
        return BigInt::one();
    }
    let mut sign = BigInt::one();
    let mut prev = BigInt::one();
    for c in 0..n - 1 {
        if a[c][c].is_zero() {
            match (c + 1..n).find(|&r| !a[r][c].is_zero()) {
                Some(r) => {
                    a.swap(c, r);
                    sign = -sign;
                }
                None => return BigInt::zero(),
            }
        }
        let (upper, lower) = a.split_at_mut(c + 1);
        let pivot_row = &upper[c];
        for row in lower.iter_mut() {
            let factor = row[c].clone();
            for col in c + 1..n {
                let value = &row[col] * &pivot_row[c] - &factor * &pivot_row[col];
                row[col] = value / &prev;
            }
            row[c] = BigInt::zero();
        }
        prev = pivot_row[c].clone();
    }
    sign * a[n - 1][n - 1].clone()
}
