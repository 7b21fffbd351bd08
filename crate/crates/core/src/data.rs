//! Observed-data and design-structure types shared by every other module.
//!
//! A sample holds `2n` units in row order: outcome `y`, take-up `d`,
//! assignment `a`, matching covariates `x` and adjustment covariates `w`.
//! All types are immutable after construction and safe to share read-only
//! across parallel workers.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{count, Scalar};

/// Per-unit observed data for `2n` units.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSample<F: Scalar = f64> {
    y: DVector<F>,
    d: Vec<u8>,
    a: Vec<u8>,
    x: DMatrix<F>,
    w: DMatrix<F>,
    unit_ids: Option<Vec<String>>,
}

impl<F: Scalar> ObservedSample<F> {
    /// Builds a sample, checking every invariant and reporting all
    /// violations at once.
    pub fn new(
        y: DVector<F>,
        d: Vec<u8>,
        a: Vec<u8>,
        x: DMatrix<F>,
        w: DMatrix<F>,
    ) -> Result<Self> {
        let rows = y.len();
        let mut issues = Vec::new();
        if rows % 2 != 0 {
            issues.push(format!("row count must be even, got {rows}"));
        }
        if rows < 4 {
            issues.push(format!("need at least 4 rows (2 pairs), got {rows}"));
        }
        for (name, len) in [("d", d.len()), ("a", a.len())] {
            if len != rows {
                issues.push(format!("column {name} has {len} rows, expected {rows}"));
            }
        }
        for (name, m) in [("x", &x), ("w", &w)] {
            if m.nrows() != rows && m.ncols() > 0 {
                issues.push(format!(
                    "matrix {name} has {} rows, expected {rows}",
                    m.nrows()
                ));
            }
        }
        for (i, v) in d.iter().enumerate() {
            if *v > 1 {
                issues.push(format!("d not binary at row {} (got {v})", i + 1));
            }
        }
        for (i, v) in a.iter().enumerate() {
            if *v > 1 {
                issues.push(format!("a not binary at row {} (got {v})", i + 1));
            }
        }
        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                issues.push(format!("y not finite at row {}", i + 1));
            }
        }
        for (name, m) in [("x", &x), ("w", &w)] {
            for c in 0..m.ncols() {
                for r in 0..m.nrows() {
                    if !m[(r, c)].is_finite() {
                        issues.push(format!("{name}{} not finite at row {}", c + 1, r + 1));
                    }
                }
            }
        }
        if !issues.is_empty() {
            return Err(Error::validation(issues));
        }
        Ok(Self {
            y,
            d,
            a,
            x,
            w,
            unit_ids: None,
        })
    }

    pub fn with_unit_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_units() {
            return Err(Error::validation(vec![format!(
                "unit_id column has {} rows, expected {}",
                ids.len(),
                self.n_units()
            )]));
        }
        self.unit_ids = Some(ids);
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.y.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.y.len() / 2
    }

    pub fn y(&self) -> &DVector<F> {
        &self.y
    }

    pub fn d(&self) -> &[u8] {
        &self.d
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn x(&self) -> &DMatrix<F> {
        &self.x
    }

    pub fn w(&self) -> &DMatrix<F> {
        &self.w
    }

    pub fn unit_ids(&self) -> Option<&[String]> {
        self.unit_ids.as_deref()
    }

    pub fn d_vector(&self) -> DVector<F> {
        DVector::from_iterator(self.d.len(), self.d.iter().map(|&v| count(v as usize)))
    }

    pub fn a_vector(&self) -> DVector<F> {
        DVector::from_iterator(self.a.len(), self.a.iter().map(|&v| count(v as usize)))
    }

    pub fn treated_count(&self) -> usize {
        self.a.iter().filter(|&&v| v == 1).count()
    }

    /// Replaces the outcome column; used by simulation shift checks.
    pub fn with_y(mut self, y: DVector<F>) -> Result<Self> {
        if y.len() != self.n_units() {
            return Err(Error::validation(vec!["replacement y length mismatch".into()]));
        }
        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::validation(vec![format!("y not finite at row {}", i + 1)]));
            }
        }
        self.y = y;
        Ok(self)
    }
}

/// The permutation grouping units into `n` pairs plus an ordering of pairs
/// into consecutive pairs-of-pairs blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairStructure {
    pairs: Vec<[usize; 2]>,
    pair_order: Vec<usize>,
}

impl PairStructure {
    /// Builds a structure, checking that `pairs` partitions `{0, .., 2n-1}`
    /// and `pair_order` is a permutation of `{0, .., n-1}`.
    pub fn new(pairs: Vec<[usize; 2]>, pair_order: Vec<usize>) -> Result<Self> {
        let n = pairs.len();
        if n < 1 {
            return Err(Error::InvalidPairing("no pairs".into()));
        }
        if pair_order.len() != n {
            return Err(Error::InvalidPairing(format!(
                "pair_order has {} entries, expected {n}",
                pair_order.len()
            )));
        }
        let mut seen = vec![false; 2 * n];
        for p in &pairs {
            for &u in p {
                if u >= 2 * n {
                    return Err(Error::InvalidPairing(format!(
                        "unit index {u} out of range for {} units",
                        2 * n
                    )));
                }
                if seen[u] {
                    return Err(Error::InvalidPairing(format!(
                        "unit index {u} appears in more than one pair"
                    )));
                }
                seen[u] = true;
            }
        }
        let mut order_seen = vec![false; n];
        for &j in &pair_order {
            if j >= n || order_seen[j] {
                return Err(Error::InvalidPairing(
                    "pair_order is not a permutation of the pairs".into(),
                ));
            }
            order_seen[j] = true;
        }
        Ok(Self { pairs, pair_order })
    }

    /// Identity ordering: pairs are already arranged into adjacent blocks.
    pub fn with_identity_order(pairs: Vec<[usize; 2]>) -> Result<Self> {
        let order = (0..pairs.len()).collect();
        Self::new(pairs, order)
    }

    /// Groups rows by a shared pair label, in order of first appearance.
    /// Every label must appear on exactly two rows.
    pub fn from_pair_ids(ids: &[String]) -> Result<(Self, Vec<String>)> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut first_seen: Vec<&str> = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            let slot = groups.entry(id.as_str()).or_default();
            if slot.is_empty() {
                first_seen.push(id.as_str());
            }
            slot.push(i);
        }
        let bad: Vec<String> = groups
            .iter()
            .filter(|(_, v)| v.len() != 2)
            .map(|(k, v)| format!("{k} ({} rows)", v.len()))
            .collect();
        if !bad.is_empty() {
            return Err(Error::InvalidPairing(format!(
                "pair_id values without exactly two rows: {}",
                bad.join(", ")
            )));
        }
        let mut pairs = Vec::with_capacity(first_seen.len());
        let mut labels = Vec::with_capacity(first_seen.len());
        for label in first_seen {
            let v = &groups[label];
            pairs.push([v[0], v[1]]);
            labels.push(label.to_string());
        }
        Ok((Self::with_identity_order(pairs)?, labels))
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_units(&self) -> usize {
        2 * self.pairs.len()
    }

    pub fn pairs(&self) -> &[[usize; 2]] {
        &self.pairs
    }

    pub fn pair_order(&self) -> &[usize] {
        &self.pair_order
    }

    /// Pairs visited in `pair_order`; consecutive pairs form the
    /// pairs-of-pairs blocks used by the cross-pair variance term.
    pub fn ordered_pairs(&self) -> impl Iterator<Item = [usize; 2]> + '_ {
        self.pair_order.iter().map(move |&j| self.pairs[j])
    }

    /// Re-orders pairs ascending by a per-pair key (stable in pair index).
    pub fn order_by_key<F: Scalar>(mut self, keys: &[F]) -> Result<Self> {
        if keys.len() != self.n_pairs() {
            return Err(Error::InvalidPairing(format!(
                "got {} ordering keys for {} pairs",
                keys.len(),
                self.n_pairs()
            )));
        }
        let mut order: Vec<usize> = (0..self.n_pairs()).collect();
        order.sort_by(|&i, &j| keys[i].partial_cmp(&keys[j]).unwrap().then(i.cmp(&j)));
        self.pair_order = order;
        Ok(self)
    }

    /// Swaps the two unit indices inside pair `j`; the design it describes
    /// is unchanged, which several statistics must be invariant to.
    pub fn swap_within_pair(mut self, j: usize) -> Self {
        self.pairs[j].swap(0, 1);
        self
    }

    /// Swaps the two pairs inside pairs-of-pairs block `b` (0-based).
    pub fn swap_block_pairs(mut self, b: usize) -> Self {
        self.pair_order.swap(2 * b, 2 * b + 1);
        self
    }

    /// Labels pairs by position in `pair_order`, unit index -> 1-based id.
    pub fn pair_id_by_unit(&self) -> Vec<usize> {
        let mut ids = vec![0usize; self.n_units()];
        for (rank, pair) in self.ordered_pairs().enumerate() {
            for u in pair {
                ids[u] = rank + 1;
            }
        }
        ids
    }

    /// Errors unless every pair has exactly one treated unit. Pair labels
    /// (1-based rank in `pair_order`) of the offenders are reported.
    pub fn check_one_treated_per_pair(&self, a: &[u8]) -> Result<()> {
        let mut bad = Vec::new();
        for (rank, [u, v]) in self.ordered_pairs().enumerate() {
            if a[u] + a[v] != 1 {
                bad.push(format!("{}", rank + 1));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::PairsNotOneTreated(bad))
        }
    }
}

/// A parsed-but-unvalidated table: header names plus string cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Result of validating a raw table against the sample schema.
#[derive(Debug, Clone)]
pub struct ValidatedSample<F: Scalar = f64> {
    pub sample: ObservedSample<F>,
    /// The pair_id column, verbatim, when present.
    pub pair_ids: Option<Vec<String>>,
}

/// Positions of the columns named `prefix1..prefixK`, in order.
/// Numbering must be consecutive from 1.
pub fn find_covariate_columns(headers: &[String], prefix: &str) -> Result<Vec<usize>> {
    let mut issues = Vec::new();
    let cols = covariate_columns(headers, prefix, &mut issues);
    if issues.is_empty() {
        Ok(cols)
    } else {
        Err(Error::validation(issues))
    }
}

/// Columns named `prefix1..prefixK`, in order; errors listed if numbering
/// has gaps.
fn covariate_columns(
    headers: &[String],
    prefix: &str,
    issues: &mut Vec<String>,
) -> Vec<usize> {
    let mut numbered: BTreeMap<usize, usize> = BTreeMap::new();
    for (idx, h) in headers.iter().enumerate() {
        if let Some(rest) = h.strip_prefix(prefix) {
            if !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()) {
                let k: usize = rest.parse().unwrap_or(0);
                if k >= 1 {
                    numbered.insert(k, idx);
                }
            }
        }
    }
    let mut cols = Vec::new();
    for (want, (k, idx)) in numbered.iter().enumerate() {
        if *k != want + 1 {
            issues.push(format!(
                "covariate columns {prefix}* must be numbered consecutively from 1 \
                 (found {prefix}{k} without {prefix}{})",
                want + 1
            ));
            break;
        }
        cols.push(*idx);
    }
    cols
}

/// Validates raw tabular records against the sample schema.
///
/// Required columns: `y`, `d`, `a`. Covariates are `x1..xK` and `w1..wK`;
/// `pair_id` and `unit_id` are carried through when present. Unrecognized
/// columns are ignored. Every violated invariant is reported, not just the
/// first.
pub fn validate_sample<F: Scalar>(table: &RawTable) -> Result<ValidatedSample<F>> {
    let headers = &table.headers;
    let mut issues = Vec::new();

    let find = |name: &str| headers.iter().position(|h| h == name);
    let y_col = find("y");
    let d_col = find("d");
    let a_col = find("a");
    for (name, col) in [("y", y_col), ("d", d_col), ("a", a_col)] {
        if col.is_none() {
            issues.push(format!("missing required column {name}"));
        }
    }
    let x_cols = covariate_columns(headers, "x", &mut issues);
    let w_cols = covariate_columns(headers, "w", &mut issues);
    let pair_col = find("pair_id");
    let unit_col = find("unit_id");

    let rows = table.rows.len();
    if rows % 2 != 0 {
        issues.push(format!("row count must be even, got {rows}"));
    }
    if rows < 4 {
        issues.push(format!("need at least 4 rows (2 pairs), got {rows}"));
    }
    for (i, row) in table.rows.iter().enumerate() {
        if row.len() != headers.len() {
            issues.push(format!(
                "ragged row {}: {} fields, expected {}",
                i + 1,
                row.len(),
                headers.len()
            ));
        }
    }
    if !issues.is_empty() {
        // Shape problems make cell-level parsing unreliable; stop here.
        return Err(Error::validation(issues));
    }

    // None means the problem is already recorded; Some may still be non-finite.
    let parse_cell = |row: usize, col: usize, name: &str, issues: &mut Vec<String>| -> Option<f64> {
        let cell = table.rows[row][col].trim();
        if cell.is_empty() {
            issues.push(format!("missing value at row {}, column {name}", row + 1));
            return None;
        }
        match cell.parse::<f64>() {
            Ok(v) => Some(v),
            Err(_) => {
                issues.push(format!(
                    "cannot parse {name} at row {} (got {:?})",
                    row + 1,
                    cell
                ));
                None
            }
        }
    };

    let mut y = Vec::with_capacity(rows);
    let mut d = Vec::with_capacity(rows);
    let mut a = Vec::with_capacity(rows);
    let mut x_flat = Vec::with_capacity(rows * x_cols.len());
    let mut w_flat = Vec::with_capacity(rows * w_cols.len());

    let real_cell = |row: usize, col: usize, name: &str, issues: &mut Vec<String>| -> f64 {
        match parse_cell(row, col, name, issues) {
            Some(v) if v.is_finite() => v,
            Some(_) => {
                issues.push(format!("{name} not finite at row {}", row + 1));
                0.0
            }
            None => 0.0,
        }
    };

    for r in 0..rows {
        y.push(real_cell(r, y_col.unwrap(), "y", &mut issues));
        for (name, col, dst) in [("d", d_col.unwrap(), &mut d), ("a", a_col.unwrap(), &mut a)] {
            match parse_cell(r, col, name, &mut issues) {
                Some(v) if v == 0.0 => dst.push(0u8),
                Some(v) if v == 1.0 => dst.push(1u8),
                Some(v) => {
                    issues.push(format!("{name} not binary at row {} (got {v})", r + 1));
                    dst.push(0u8);
                }
                None => dst.push(0u8),
            }
        }
        for (k, &col) in x_cols.iter().enumerate() {
            x_flat.push(real_cell(r, col, &format!("x{}", k + 1), &mut issues));
        }
        for (k, &col) in w_cols.iter().enumerate() {
            w_flat.push(real_cell(r, col, &format!("w{}", k + 1), &mut issues));
        }
    }
    if !issues.is_empty() {
        return Err(Error::validation(issues));
    }

    let to_f = |v: f64| F::from_f64(v).expect("finite cell");
    let y = DVector::from_iterator(rows, y.into_iter().map(to_f));
    let x = DMatrix::from_row_iterator(rows, x_cols.len(), x_flat.into_iter().map(to_f));
    let w = DMatrix::from_row_iterator(rows, w_cols.len(), w_flat.into_iter().map(to_f));

    let mut sample = ObservedSample::new(y, d, a, x, w)?;
    if let Some(col) = unit_col {
        let ids = table.rows.iter().map(|r| r[col].clone()).collect();
        sample = sample.with_unit_ids(ids)?;
    }
    let pair_ids = pair_col.map(|col| table.rows.iter().map(|r| r[col].clone()).collect());
    Ok(ValidatedSample { sample, pair_ids })
}

/// Serializes a sample back to a raw table. Numeric cells use the shortest
/// representation that round-trips, so write-then-validate reproduces the
/// sample bit-exactly.
pub fn write_sample<F: Scalar>(
    sample: &ObservedSample<F>,
    pair_ids: Option<&[String]>,
) -> RawTable {
    let mut headers = vec!["y".to_string(), "d".to_string(), "a".to_string()];
    for k in 1..=sample.x().ncols() {
        headers.push(format!("x{k}"));
    }
    for k in 1..=sample.w().ncols() {
        headers.push(format!("w{k}"));
    }
    if pair_ids.is_some() {
        headers.push("pair_id".to_string());
    }
    if sample.unit_ids().is_some() {
        headers.push("unit_id".to_string());
    }
    let fmt = |v: F| format!("{}", v.to_f64().expect("finite"));
    let mut rows = Vec::with_capacity(sample.n_units());
    for i in 0..sample.n_units() {
        let mut row = vec![
            fmt(sample.y()[i]),
            format!("{}", sample.d()[i]),
            format!("{}", sample.a()[i]),
        ];
        for c in 0..sample.x().ncols() {
            row.push(fmt(sample.x()[(i, c)]));
        }
        for c in 0..sample.w().ncols() {
            row.push(fmt(sample.w()[(i, c)]));
        }
        if let Some(ids) = pair_ids {
            row.push(ids[i].clone());
        }
        if let Some(ids) = sample.unit_ids() {
            row.push(ids[i].clone());
        }
        rows.push(row);
    }
    RawTable { headers, rows }
}
