//! Tables, table sets, linearization and cell masking.
//!
//! A [`Table`] is a named grid of string cells. A [`TableSet`] groups the
//! tables of one query together with the binary relation labels between
//! every pair of tables. Linearization renders a table into the flat atom
//! stream the tokenizer consumes:
//!
//! ```text
//! [TAB] <name> [HDR] h1 | h2 | ... [ROW] c1 | c2 | ... [ROW] ...
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TAB: &str = "[TAB]";
pub const HDR: &str = "[HDR]";
pub const ROW: &str = "[ROW]";
pub const CELL_SEP: &str = "|";
pub const MASK: &str = "[MASK]";

/// Atoms that may never appear inside a cell, header or table name.
pub const DELIMITER_ATOMS: [&str; 5] = [TAB, HDR, ROW, CELL_SEP, MASK];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// A single broken table invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyName,
    NoColumns,
    DuplicateColumn(String),
    RowArity { row: usize, arity: usize, expected: usize },
    ReservedAtom { row: Option<usize>, column: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyName => write!(f, "table name is empty"),
            Violation::NoColumns => write!(f, "table has no columns"),
            Violation::DuplicateColumn(c) => write!(f, "duplicate column name {c:?}"),
            Violation::RowArity { row, arity, expected } => {
                write!(f, "row {row} arity {arity} != {expected}")
            }
            Violation::ReservedAtom { row: Some(r), column } => {
                write!(f, "cell ({r}, {column}) contains a reserved delimiter atom")
            }
            Violation::ReservedAtom { row: None, column } => {
                write!(f, "header {column} contains a reserved delimiter atom")
            }
        }
    }
}

fn has_reserved_atom(text: &str) -> bool {
    text.split_whitespace().any(|w| DELIMITER_ATOMS.contains(&w))
}

impl Table {
    pub fn new(name: impl Into<String>, columns: Vec<String>, rows: Vec<Vec<String>>) -> Self {
        Table { name: name.into(), columns, rows }
    }

    /// Checks every table invariant and returns the full list of violations
    /// (empty when the table is well formed).
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.name.trim().is_empty() {
            out.push(Violation::EmptyName);
        }
        if self.columns.is_empty() {
            out.push(Violation::NoColumns);
        }
        let mut seen = HashSet::new();
        for (c, col) in self.columns.iter().enumerate() {
            if !seen.insert(col.as_str()) {
                out.push(Violation::DuplicateColumn(col.clone()));
            }
            if has_reserved_atom(col) {
                out.push(Violation::ReservedAtom { row: None, column: c });
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.len() != self.columns.len() {
                out.push(Violation::RowArity { row: r, arity: row.len(), expected: self.columns.len() });
            }
            for (c, cell) in row.iter().enumerate() {
                if has_reserved_atom(cell) {
                    out.push(Violation::ReservedAtom { row: Some(r), column: c });
                }
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidTable {
                name: self.name.clone(),
                violations: v.iter().map(ToString::to_string).collect(),
            })
        }
    }

    pub fn num_cells(&self) -> usize {
        self.rows.len() * self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Renders the table in the canonical single-space atom format.
    pub fn linearize(&self) -> Result<String> {
        self.ensure_valid()?;
        Ok(self.linearize_unchecked())
    }

    pub(crate) fn linearize_unchecked(&self) -> String {
        let mut out = format!("{TAB} {} {HDR} {}", self.name, self.columns.join(" | "));
        for row in &self.rows {
            out.push(' ');
            out.push_str(ROW);
            out.push(' ');
            out.push_str(&row.join(" | "));
        }
        out
    }

    /// Replaces `ceil(rate * cells)` distinct cells, chosen uniformly
    /// without replacement, by the [`MASK`] sentinel.
    pub fn mask_cells<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Result<MaskedTable> {
        self.ensure_valid()?;
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Config(format!("mask rate {rate} outside (0, 1]")));
        }
        let total = self.num_cells();
        if total == 0 {
            return Err(Error::EmptyTable(self.name.clone()));
        }
        let count = mask_count(rate, total);
        let width = self.columns.len();
        let mut picks = index::sample(rng, total, count).into_vec();
        picks.sort_unstable();
        let mut table = self.clone();
        let targets = picks
            .into_iter()
            .map(|flat| {
                let (r, c) = (flat / width, flat % width);
                let original = std::mem::replace(&mut table.rows[r][c], MASK.to_string());
                MaskTarget { row: r, column: c, original }
            })
            .collect();
        Ok(MaskedTable { table, targets })
    }
}

/// Number of cells masked at `rate` out of `total`; always at least one.
pub fn mask_count(rate: f64, total: usize) -> usize {
    // Guard against `0.15 * 20 = 3.0000000000000004` style rounding.
    let raw = rate * total as f64;
    let rounded = raw.round();
    let n = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (n as usize).clamp(1, total)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTarget {
    pub row: usize,
    pub column: usize,
    pub original: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedTable {
    pub table: Table,
    /// Targets in row-major order.
    pub targets: Vec<MaskTarget>,
}

/// The tables of one query plus pairwise relation labels, keyed `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TableSet {
    pub tables: Vec<Table>,
    relations: BTreeMap<(usize, usize), bool>,
}

impl TableSet {
    pub fn new(tables: Vec<Table>) -> Self {
        TableSet { tables, relations: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// Stores a relation label. The pair is normalized so that `i < j`.
    pub fn set_relation(&mut self, i: usize, j: usize, label: bool) -> Result<()> {
        let n = self.tables.len();
        if i == j || i >= n || j >= n {
            return Err(Error::InvalidRelation { i, j, tables: n });
        }
        self.relations.insert((i.min(j), i.max(j)), label);
        Ok(())
    }

    pub fn relation(&self, i: usize, j: usize) -> Option<bool> {
        self.relations.get(&(i.min(j), i.max(j))).copied()
    }

    pub fn relations(&self) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        self.relations.iter().map(|(&(i, j), &l)| (i, j, l))
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.tables {
            t.ensure_valid()?;
        }
        let mut names = HashSet::new();
        for t in &self.tables {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Data(format!("duplicate table name {:?} in table set", t.name)));
            }
        }
        for &(i, j) in self.relations.keys() {
            if i >= j || j >= self.tables.len() {
                return Err(Error::InvalidRelation { i, j, tables: self.tables.len() });
            }
        }
        Ok(())
    }

    /// Every unordered pair `i < j` with its stored label (unlabelled pairs
    /// count as unrelated).
    pub fn relation_candidates(&self) -> Vec<(usize, usize, bool)> {
        let n = self.tables.len();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push((i, j, self.relation(i, j).unwrap_or(false)));
            }
        }
        out
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    /// All tables linearized and joined by `[SEP]`.
    pub fn linearize(&self, sep: &str) -> Result<String> {
        let parts = self.tables.iter().map(Table::linearize).collect::<Result<Vec<_>>>()?;
        Ok(parts.join(&format!(" {sep} ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(cols: &[&str], rows: &[&[&str]]) -> Table {
        Table::new(
            "t1",
            cols.iter().map(|s| s.to_string()).collect(),
            rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
        )
    }

    #[test]
    fn validate_accepts_well_formed() {
        assert!(t(&["a", "b"], &[&["1", "2"], &["3", "4"]]).validate().is_empty());
    }

    #[test]
    fn validate_reports_arity() {
        let v = t(&["a", "b"], &[&["1", "2", "3"]]).validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "row 0 arity 3 != 2");
    }

    #[test]
    fn validate_reports_duplicate_column() {
        let v = t(&["id", "id"], &[]).validate();
        assert_eq!(v, vec![Violation::DuplicateColumn("id".into())]);
        assert!(v[0].to_string().contains("\"id\""));
    }

    #[test]
    fn validate_rejects_delimiters_in_cells() {
        let v = t(&["a"], &[&["x | y"]]).validate();
        assert_eq!(v, vec![Violation::ReservedAtom { row: Some(0), column: 0 }]);
    }

    #[test]
    fn linearize_formats() {
        assert_eq!(t(&["a", "b"], &[&["1", "2"]]).linearize().unwrap(), "[TAB] t1 [HDR] a | b [ROW] 1 | 2");
        assert_eq!(t(&["a", "b"], &[]).linearize().unwrap(), "[TAB] t1 [HDR] a | b");
        assert_eq!(
            t(&["a", "b"], &[&["1", "2"], &["3", "4"]]).linearize().unwrap(),
            "[TAB] t1 [HDR] a | b [ROW] 1 | 2 [ROW] 3 | 4"
        );
    }

    #[test]
    fn linearize_rejects_invalid() {
        assert!(t(&["a", "b"], &[&["1"]]).linearize().is_err());
    }

    #[test]
    fn mask_counts_use_ceiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = t(&["a"], &[&["1"]]);
        assert_eq!(one.mask_cells(0.15, &mut rng).unwrap().targets.len(), 1);

        let cols: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let rows = vec![(0..10).map(|i| i.to_string()).collect::<Vec<_>>(); 2];
        let wide = Table::new("w", cols, rows);
        let m = wide.mask_cells(0.15, &mut rng).unwrap();
        assert_eq!(m.targets.len(), 3);
        for tg in &m.targets {
            assert_eq!(m.table.rows[tg.row][tg.column], MASK);
            assert_eq!(wide.rows[tg.row][tg.column], tg.original);
        }
    }

    #[test]
    fn mask_is_seed_deterministic() {
        let tb = t(&["a", "b", "c"], &[&["1", "2", "3"], &["4", "5", "6"], &["7", "8", "9"]]);
        let a = tb.mask_cells(0.4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = tb.mask_cells(0.4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_rejects_empty_and_bad_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(t(&["a"], &[]).mask_cells(0.5, &mut rng), Err(Error::EmptyTable(_))));
        assert!(t(&["a"], &[&["1"]]).mask_cells(0.0, &mut rng).is_err());
        assert!(t(&["a"], &[&["1"]]).mask_cells(1.5, &mut rng).is_err());
    }

    #[test]
    fn relation_candidates_enumerate_pairs() {
        let mk = |n: usize| {
            TableSet::new((0..n).map(|i| Table::new(format!("t{i}"), vec!["a".into()], vec![])).collect())
        };
        let mut two = mk(2);
        two.set_relation(0, 1, true).unwrap();
        assert_eq!(two.relation_candidates(), vec![(0, 1, true)]);

        let mut three = mk(3);
        three.set_relation(2, 1, true).unwrap();
        let c = three.relation_candidates();
        assert_eq!(c.len(), 3);
        assert_eq!(c.iter().filter(|p| p.2).count(), 1);
        assert!(c.contains(&(1, 2, true)));

        assert_eq!(mk(6).relation_candidates().len(), 15);
        assert!(mk(3).set_relation(1, 1, true).is_err());
        assert!(mk(3).set_relation(0, 3, true).is_err());
    }

    fn arb_table() -> impl Strategy<Value = Table> {
        (1usize..6, 1usize..8).prop_flat_map(|(w, h)| {
            proptest::collection::vec(proptest::collection::vec("[a-z0-9]{1,4}", w), h).prop_map(move |rows| {
                Table::new("p", (0..w).map(|i| format!("c{i}")).collect(), rows)
            })
        })
    }

    proptest! {
        #[test]
        fn mask_count_matches_ceiling(tb in arb_table(), rate in 0.01f64..=1.0, seed in any::<u64>()) {
            let m = tb.mask_cells(rate, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let expect = ((rate * tb.num_cells() as f64 - 1e-9).ceil() as usize).clamp(1, tb.num_cells());
            prop_assert_eq!(m.targets.len(), expect);
            let uniq: HashSet<_> = m.targets.iter().map(|t| (t.row, t.column)).collect();
            prop_assert_eq!(uniq.len(), m.targets.len());
        }

        #[test]
        fn linearize_is_deterministic(tb in arb_table()) {
            prop_assert_eq!(tb.linearize().unwrap(), tb.clone().linearize().unwrap());
        }

        #[test]
        fn candidate_count_is_n_choose_2(n in 0usize..9) {
            let ts = TableSet::new((0..n).map(|i| Table::new(format!("t{i}"), vec!["a".into()], vec![])).collect());
            let c = ts.relation_candidates();
            prop_assert_eq!(c.len(), n * n.saturating_sub(1) / 2);
            let uniq: HashSet<_> = c.iter().map(|p| (p.0, p.1)).collect();
            prop_assert_eq!(uniq.len(), c.len());
        }
    }
}
