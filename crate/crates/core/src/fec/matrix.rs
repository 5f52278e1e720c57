//! Sparse parity-check matrices: construction, validation and alist I/O.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Sparse binary parity-check matrix stored as both row and column adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParityCheckMatrix {
    rows: usize,
    cols: usize,
    /// Variable indices per check, sorted.
    check_adj: Vec<Vec<u32>>,
    /// Check indices per variable, sorted.
    var_adj: Vec<Vec<u32>>,
}

impl ParityCheckMatrix {
    /// Builds a matrix from its (check, variable) incidences.
    pub fn from_edges(rows: usize, cols: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut check_adj = vec![Vec::new(); rows];
        let mut var_adj = vec![Vec::new(); cols];
        for &(c, v) in edges {
            if c >= rows || v >= cols {
                return Err(Error::InvalidArgument(format!(
                    "edge ({c},{v}) outside {rows}x{cols}"
                )));
            }
            check_adj[c].push(v as u32);
            var_adj[v].push(c as u32);
        }
        for a in check_adj.iter_mut().chain(var_adj.iter_mut()) {
            a.sort_unstable();
            let before = a.len();
            a.dedup();
            if a.len() != before {
                return Err(Error::InvalidArgument("duplicate edge".into()));
            }
        }
        let h = Self { rows, cols, check_adj, var_adj };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols <= self.rows {
            return Err(Error::InvalidArgument(format!(
                "bad dimensions {}x{}",
                self.rows, self.cols
            )));
        }
        if let Some(c) = self.check_adj.iter().position(|a| a.len() < 2) {
            return Err(Error::InvalidArgument(format!("check {c} has degree < 2")));
        }
        if let Some(v) = self.var_adj.iter().position(|a| a.len() < 2) {
            return Err(Error::InvalidArgument(format!("variable {v} has degree < 2")));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_edges(&self) -> usize {
        self.check_adj.iter().map(Vec::len).sum()
    }

    pub fn check_neighbors(&self, check: usize) -> &[u32] {
        &self.check_adj[check]
    }

    pub fn var_neighbors(&self, var: usize) -> &[u32] {
        &self.var_adj[var]
    }

    /// Design rate (n - m) / n.
    pub fn design_rate(&self) -> f64 {
        (self.cols - self.rows) as f64 / self.cols as f64
    }

    /// All (check, variable) incidences in check-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.check_adj
            .iter()
            .enumerate()
            .flat_map(|(c, vs)| vs.iter().map(move |&v| (c, v as usize)))
    }

    /// H·c over GF(2) is all-zero.
    pub fn is_codeword(&self, word: &[u8]) -> bool {
        word.len() == self.cols
            && self
                .check_adj
                .iter()
                .all(|vs| vs.iter().fold(0u8, |acc, &v| acc ^ word[v as usize]) & 1 == 0)
    }

    /// Regular quasi-cyclic code: `base_rows x base_cols` circulant blocks of
    /// size `z`, each variable block connected to `col_weight` check blocks.
    ///
    /// The base graph and the circulant shifts are drawn from a seeded
    /// generator; shifts are redrawn until the lifted graph has no cycles of
    /// length 4 or 6.
    pub fn regular_qc(
        base_rows: usize,
        base_cols: usize,
        col_weight: usize,
        z: usize,
        seed: u64,
    ) -> Result<Self> {
        if base_cols * col_weight % base_rows != 0 || col_weight > base_rows {
            return Err(Error::InvalidArgument("irregular QC base requested".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let Some(proto) = balanced_base(base_rows, base_cols, col_weight, &mut rng) else {
                continue;
            };
            if let Some(shift) = lift_shifts(&proto, base_rows, z, &mut rng) {
                let mut edges = Vec::with_capacity(base_cols * col_weight * z);
                for (j, blocks) in proto.iter().enumerate() {
                    for (&r, &s) in blocks.iter().zip(&shift[j]) {
                        for t in 0..z {
                            edges.push((r * z + t, j * z + (t + s) % z));
                        }
                    }
                }
                return Self::from_edges(base_rows * z, base_cols * z, &edges);
            }
        }
        Err(Error::InvalidArgument("could not construct girth-8 lifting".into()))
    }

    /// Default code: rate-1/2 (3,6)-regular QC-LDPC, n = 1296, z = 54.
    pub fn default_code() -> Self {
        Self::regular_qc(12, 24, 3, 54, 0x5EED_1296).expect("default code construction")
    }

    pub fn to_alist(&self) -> String {
        let mut s = String::new();
        let max_col = self.var_adj.iter().map(Vec::len).max().unwrap_or(0);
        let max_row = self.check_adj.iter().map(Vec::len).max().unwrap_or(0);
        let _ = writeln!(s, "{} {}", self.cols, self.rows);
        let _ = writeln!(s, "{max_col} {max_row}");
        let join = |v: Vec<String>| v.join(" ");
        let _ = writeln!(s, "{}", join(self.var_adj.iter().map(|a| a.len().to_string()).collect()));
        let _ = writeln!(s, "{}", join(self.check_adj.iter().map(|a| a.len().to_string()).collect()));
        for (adj, width) in [(&self.var_adj, max_col), (&self.check_adj, max_row)] {
            for a in adj {
                let mut idx: Vec<String> = a.iter().map(|x| (x + 1).to_string()).collect();
                idx.resize(width, "0".into());
                let _ = writeln!(s, "{}", join(idx));
            }
        }
        s
    }

    /// Parses the alist format: `n m`, max degrees, degree lists, then
    /// 1-based index lists per column and per row (zero padding allowed).
    pub fn from_alist(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let mut next_nums = |what: &str| -> Result<(usize, Vec<usize>)> {
            let (no, line) = lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                reason: format!("unexpected end of file reading {what}"),
            })?;
            let nums = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { line: no + 1, reason: e.to_string() })?;
            Ok((no + 1, nums))
        };
        let (l, dims) = next_nums("dimensions")?;
        if dims.len() != 2 {
            return Err(Error::Parse { line: l, reason: "expected `n m`".into() });
        }
        let (n, m) = (dims[0], dims[1]);
        next_nums("max degrees")?;
        let (l, col_deg) = next_nums("column degrees")?;
        if col_deg.len() != n {
            return Err(Error::Parse { line: l, reason: "column degree count".into() });
        }
        let (l, row_deg) = next_nums("row degrees")?;
        if row_deg.len() != m {
            return Err(Error::Parse { line: l, reason: "row degree count".into() });
        }
        let mut edges = Vec::new();
        for (v, &d) in col_deg.iter().enumerate() {
            let (l, idx) = next_nums("column list")?;
            let rows: Vec<usize> = idx.into_iter().filter(|&x| x != 0).collect();
            if rows.len() != d || rows.iter().any(|&r| r > m) {
                return Err(Error::Parse { line: l, reason: format!("column {v} list") });
            }
            edges.extend(rows.into_iter().map(|r| (r - 1, v)));
        }
        let h = Self::from_edges(m, n, &edges)?;
        for (c, &d) in row_deg.iter().enumerate() {
            let (l, idx) = next_nums("row list")?;
            let mut cols: Vec<u32> = idx.into_iter().filter(|&x| x != 0).map(|x| x as u32 - 1).collect();
            cols.sort_unstable();
            if cols.len() != d || cols != h.check_adj[c] {
                return Err(Error::Parse { line: l, reason: format!("row {c} disagrees with columns") });
            }
        }
        Ok(h)
    }

    pub fn load_alist(path: &Path) -> Result<Self> {
        Self::from_alist(&std::fs::read_to_string(path)?)
    }
}

/// Random base graph with exact row degree `base_cols*col_weight/base_rows`.
fn balanced_base(rows: usize, cols: usize, w: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    let per_row = cols * w / rows;
    for _ in 0..1000 {
        let mut slots: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat(r).take(per_row)).collect();
        slots.shuffle(rng);
        let proto: Vec<Vec<usize>> = slots.chunks(w).map(|c| {
            let mut v = c.to_vec();
            v.sort_unstable();
            v
        }).collect();
        if proto.iter().all(|c| c.windows(2).all(|p| p[0] != p[1])) {
            return Some(proto);
        }
    }
    None
}

/// Greedy column-by-column shift assignment avoiding 4- and 6-cycles.
fn lift_shifts(proto: &[Vec<usize>], rows: usize, z: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<usize>>> {
    let mut at: Vec<Vec<Option<usize>>> = vec![vec![None; proto.len()]; rows];
    let mut out = Vec::with_capacity(proto.len());
    for (j, blocks) in proto.iter().enumerate() {
        let mut placed = false;
        for _ in 0..2000 {
            let cand: Vec<usize> = blocks.iter().map(|_| rng.gen_range(0..z)).collect();
            let s_new = |r: usize| blocks.iter().position(|&b| b == r).map(|i| cand[i]);
            let ok = {
                let mut ok = true;
                // 4-cycles: j -a- c1 -b- j.
                'four: for c1 in 0..j {
                    for &a in blocks {
                        for &b in blocks {
                            if a >= b {
                                continue;
                            }
                            if let (Some(x), Some(y)) = (at[a][c1], at[b][c1]) {
                                let d = (s_new(a).unwrap() + z - x + y + z - s_new(b).unwrap()) % z;
                                if d == 0 {
                                    ok = false;
                                    break 'four;
                                }
                            }
                        }
                    }
                }
                // 6-cycles: j -r0- c1 -r1- c2 -r2- j.
                if ok {
                    'six: for &r0 in blocks {
                        for &r2 in blocks {
                            if r0 == r2 {
                                continue;
                            }
                            for c1 in 0..j {
                                let Some(a) = at[r0][c1] else { continue };
                                for r1 in 0..rows {
                                    if r1 == r0 || r1 == r2 {
                                        continue;
                                    }
                                    let Some(b) = at[r1][c1] else { continue };
                                    for c2 in 0..j {
                                        if c2 == c1 {
                                            continue;
                                        }
                                        let (Some(c), Some(d)) = (at[r1][c2], at[r2][c2]) else { continue };
                                        let sum = s_new(r0).unwrap() + 3 * z - a + b - c + d - s_new(r2).unwrap();
                                        if sum % z == 0 {
                                            ok = false;
                                            break 'six;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                ok
            };
            if ok {
                for (i, &r) in blocks.iter().enumerate() {
                    at[r][j] = Some(cand[i]);
                }
                out.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(out)
}
