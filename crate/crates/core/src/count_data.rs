//! Two-group count matrices: loading, validation, filtering.
//!
//! Count files are UTF-8 TSV with a `gene_id` header cell followed by the
//! sample ids, and one integer row per gene. Group files are two-column TSV
//! (`sample_id\tgroup`) with groups `A` or `B`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Group::A),
            "B" => Ok(Group::B),
            other => Err(Error::Config(format!("unknown group label {other:?} (expected A or B)"))),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::A => "A",
            Group::B => "B",
        })
    }
}

pub type GroupMap = BTreeMap<String, Group>;

/// Sample positions of each group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupIndex {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl GroupIndex {
    pub fn from_labels(groups: &[Group]) -> Self {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, g) in groups.iter().enumerate() {
            match g {
                Group::A => a.push(i),
                Group::B => b.push(i),
            }
        }
        GroupIndex { a, b }
    }

    /// Same samples with the group labels exchanged.
    pub fn swapped(&self) -> Self {
        GroupIndex {
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Integer counts for `m` genes × `n` samples in two groups.
///
/// Immutable after construction. Square roots of the counts are cached
/// because every randomization re-uses them.
#[derive(Clone, Debug)]
pub struct CountMatrix {
    gene_ids: Vec<String>,
    sample_ids: Vec<String>,
    counts: Vec<u64>,
    roots: Vec<f64>,
    groups: Vec<Group>,
    index: GroupIndex,
}

impl PartialEq for CountMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.gene_ids == other.gene_ids
            && self.sample_ids == other.sample_ids
            && self.counts == other.counts
            && self.groups == other.groups
    }
}

impl CountMatrix {
    /// Build and validate a matrix from row-major counts (`counts[j * n + i]`).
    pub fn new(
        gene_ids: Vec<String>,
        sample_ids: Vec<String>,
        counts: Vec<u64>,
        groups: Vec<Group>,
    ) -> Result<Self> {
        let m = gene_ids.len();
        let n = sample_ids.len();
        if groups.len() != n {
            return Err(Error::Validation(format!(
                "{} group labels for {n} samples",
                groups.len()
            )));
        }
        if counts.len() != m * n {
            return Err(Error::Validation(format!(
                "{} counts for a {m} x {n} matrix",
                counts.len()
            )));
        }
        if m < 2 {
            return Err(Error::Validation(format!("need at least 2 genes, got {m}")));
        }
        let mut seen = HashSet::with_capacity(m);
        for id in &gene_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate gene id {id:?}")));
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id {id:?}")));
            }
        }
        let index = GroupIndex::from_labels(&groups);
        if index.a.len() < 2 || index.b.len() < 2 {
            return Err(Error::Validation(format!(
                "each group needs at least 2 samples (n_A = {}, n_B = {})",
                index.a.len(),
                index.b.len()
            )));
        }
        let roots = counts.iter().map(|&x| (x as f64).sqrt()).collect();
        Ok(CountMatrix {
            gene_ids,
            sample_ids,
            counts,
            roots,
            groups,
            index,
        })
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_a(&self) -> usize {
        self.index.a.len()
    }

    pub fn n_b(&self) -> usize {
        self.index.b.len()
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group_index(&self) -> &GroupIndex {
        &self.index
    }

    #[inline]
    pub fn get(&self, gene: usize, sample: usize) -> u64 {
        self.counts[gene * self.n_samples() + sample]
    }

    /// Counts of one gene across samples.
    #[inline]
    pub fn row(&self, gene: usize) -> &[u64] {
        let n = self.n_samples();
        &self.counts[gene * n..(gene + 1) * n]
    }

    /// `√X` of one gene across samples.
    #[inline]
    pub fn root_row(&self, gene: usize) -> &[f64] {
        let n = self.n_samples();
        &self.roots[gene * n..(gene + 1) * n]
    }

    pub fn gene_total(&self, gene: usize) -> u64 {
        self.row(gene).iter().sum()
    }

    pub fn sample_totals(&self) -> Vec<u64> {
        let n = self.n_samples();
        let mut totals = vec![0u64; n];
        for row in self.counts.chunks_exact(n) {
            for (t, &x) in totals.iter_mut().zip(row) {
                *t += x;
            }
        }
        totals
    }

    /// Matrix restricted to the given genes, in the given order.
    pub fn select_genes(&self, genes: &[usize]) -> Result<CountMatrix> {
        let n = self.n_samples();
        let mut counts = Vec::with_capacity(genes.len() * n);
        for &j in genes {
            counts.extend_from_slice(self.row(j));
        }
        CountMatrix::new(
            genes.iter().map(|&j| self.gene_ids[j].clone()).collect(),
            self.sample_ids.clone(),
            counts,
            self.groups.clone(),
        )
    }

    /// Parse a count table; `groups` must label every sample column.
    pub fn read_tsv<R: BufRead>(reader: R, groups: &GroupMap) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            column: 1,
            message: "empty count file".into(),
        })?;
        let header = header?;
        let mut cells = header.trim_end_matches('\r').split('\t');
        if cells.next() != Some("gene_id") {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                message: "first header cell must be \"gene_id\"".into(),
            });
        }
        let sample_ids: Vec<String> = cells.map(str::to_owned).collect();
        let n = sample_ids.len();
        let labels = sample_ids
            .iter()
            .map(|s| {
                groups
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("sample {s:?} has no group assignment")))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut gene_ids = Vec::new();
        let mut counts = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let mut cells = line.split('\t');
            gene_ids.push(cells.next().unwrap_or_default().to_owned());
            let mut seen = 0;
            for (col, cell) in cells.enumerate() {
                let column = col + 2;
                if col >= n {
                    return Err(Error::Parse {
                        line: lineno,
                        column,
                        message: format!("expected {n} count cells"),
                    });
                }
                let value = cell.parse::<u64>().map_err(|_| Error::Parse {
                    line: lineno,
                    column,
                    message: format!("invalid count {cell:?} (expected a non-negative integer)"),
                })?;
                counts.push(value);
                seen += 1;
            }
            if seen != n {
                return Err(Error::Parse {
                    line: lineno,
                    column: seen + 2,
                    message: format!("expected {n} count cells, found {seen}"),
                });
            }
        }
        CountMatrix::new(gene_ids, sample_ids, counts, labels)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "gene_id")?;
        for s in &self.sample_ids {
            write!(w, "\t{s}")?;
        }
        writeln!(w)?;
        for (j, id) in self.gene_ids.iter().enumerate() {
            write!(w, "{id}")?;
            for x in self.row(j) {
                write!(w, "\t{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_groups_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sample_id\tgroup")?;
        for (s, g) in self.sample_ids.iter().zip(&self.groups) {
            writeln!(w, "{s}\t{g}")?;
        }
        Ok(())
    }

    pub fn group_map(&self) -> GroupMap {
        self.sample_ids
            .iter()
            .cloned()
            .zip(self.groups.iter().copied())
            .collect()
    }
}

/// Parse a `sample_id\tgroup` table. A leading `sample_id` header is optional.
pub fn read_group_map<R: BufRead>(reader: R) -> Result<GroupMap> {
    let mut map = GroupMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || (idx == 0 && line.starts_with("sample_id\t")) {
            continue;
        }
        let mut cells = line.split('\t');
        let (Some(sample), Some(group), None) = (cells.next(), cells.next(), cells.next()) else {
            return Err(Error::Parse {
                line: idx + 1,
                column: 1,
                message: "expected two cells: sample_id and group".into(),
            });
        };
        let group = group.parse::<Group>().map_err(|e| Error::Parse {
            line: idx + 1,
            column: 2,
            message: e.to_string(),
        })?;
        if map.insert(sample.to_owned(), group).is_some() {
            return Err(Error::Config(format!("sample {sample:?} listed twice in group file")));
        }
    }
    Ok(map)
}

pub fn load_groups(path: &Path) -> Result<GroupMap> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open group file {}: {e}", path.display())))?;
    read_group_map(BufReader::new(file))
}

pub fn load_counts(path: &Path, groups: &GroupMap) -> Result<CountMatrix> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open count file {}: {e}", path.display())))?;
    CountMatrix::read_tsv(BufReader::new(file), groups)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub min_total_reads: u64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec { min_total_reads: 20 }
    }
}

/// Drop genes whose total count is below the threshold (the threshold itself
/// is kept). Returns the filtered matrix and the removed gene ids.
pub fn filter_low_counts(data: &CountMatrix, spec: FilterSpec) -> Result<(CountMatrix, Vec<String>)> {
    let (keep, removed): (Vec<usize>, Vec<usize>) =
        (0..data.n_genes()).partition(|&j| data.gene_total(j) >= spec.min_total_reads);
    if keep.is_empty() {
        return Err(Error::EmptyMatrix {
            threshold: spec.min_total_reads,
        });
    }
    let removed = removed.into_iter().map(|j| data.gene_ids[j].clone()).collect();
    Ok((data.select_genes(&keep)?, removed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn groups_aabb() -> GroupMap {
        [("s1", Group::A), ("s2", Group::A), ("s3", Group::B), ("s4", Group::B)]
            .into_iter()
            .map(|(s, g)| (s.to_owned(), g))
            .collect()
    }

    const TOY: &str = "gene_id\ts1\ts2\ts3\ts4\ng1\t1\t2\t3\t4\ng2\t0\t0\t5\t0\ng3\t10\t20\t30\t40\n";

    #[test]
    fn parses_small_table() {
        let data = CountMatrix::read_tsv(TOY.as_bytes(), &groups_aabb()).unwrap();
        assert_eq!((data.n_genes(), data.n_samples(), data.n_a(), data.n_b()), (3, 4, 2, 2));
        assert_eq!(data.get(2, 3), 40);
        assert_eq!(data.row(1), &[0, 0, 5, 0]);
    }

    #[test]
    fn negative_count_names_the_cell() {
        let bad = TOY.replace("0\t0\t5", "0\t-1\t5");
        match CountMatrix::read_tsv(bad.as_bytes(), &groups_aabb()) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (3, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_a_parse_error() {
        let bad = TOY.replace("g2\t0\t0\t5\t0", "g2\t0\t0\t5");
        assert!(matches!(
            CountMatrix::read_tsv(bad.as_bytes(), &groups_aabb()),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn one_sided_groups_are_rejected() {
        let all_a: GroupMap = ["s1", "s2", "s3", "s4"]
            .into_iter()
            .map(|s| (s.to_owned(), Group::A))
            .collect();
        assert!(matches!(
            CountMatrix::read_tsv(TOY.as_bytes(), &all_a),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unmapped_sample_is_a_config_error() {
        let mut groups = groups_aabb();
        groups.remove("s3");
        assert!(matches!(
            CountMatrix::read_tsv(TOY.as_bytes(), &groups),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_gene_ids_are_rejected() {
        let dup = TOY.replace("g3", "g1");
        assert!(matches!(
            CountMatrix::read_tsv(dup.as_bytes(), &groups_aabb()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn group_file_parsing() {
        let map = read_group_map("sample_id\tgroup\ns1\tA\ns2\tB\n".as_bytes()).unwrap();
        assert_eq!(map["s2"], Group::B);
        assert!(read_group_map("s1\tC\n".as_bytes()).is_err());
        assert!(read_group_map("s1\tA\ns1\tB\n".as_bytes()).is_err());
    }

    #[test]
    fn filter_threshold_is_inclusive() {
        let table = "gene_id\ts1\ts2\ts3\ts4\nlow\t1\t1\t1\t2\nmid\t5\t5\t5\t5\nhigh\t25\t25\t25\t25\n";
        let data = CountMatrix::read_tsv(table.as_bytes(), &groups_aabb()).unwrap();
        let (kept, removed) = filter_low_counts(&data, FilterSpec { min_total_reads: 20 }).unwrap();
        assert_eq!(kept.gene_ids(), &["mid", "high"]);
        assert_eq!(removed, vec!["low".to_string()]);

        let (same, none) = filter_low_counts(&data, FilterSpec { min_total_reads: 0 }).unwrap();
        assert_eq!(same, data);
        assert!(none.is_empty());

        assert!(matches!(
            filter_low_counts(&data, FilterSpec { min_total_reads: 1_000_000_000 }),
            Err(Error::EmptyMatrix { .. })
        ));
    }

    fn arb_matrix() -> impl Strategy<Value = CountMatrix> {
        (2usize..12, 2usize..4, 2usize..4).prop_flat_map(|(m, na, nb)| {
            let n = na + nb;
            proptest::collection::vec(0u64..60, m * n).prop_map(move |counts| {
                let mut groups = vec![Group::A; na];
                groups.extend(vec![Group::B; nb]);
                CountMatrix::new(
                    (0..m).map(|j| format!("g{j}")).collect(),
                    (0..n).map(|i| format!("s{i}")).collect(),
                    counts,
                    groups,
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn tsv_round_trip(data in arb_matrix()) {
            let mut counts = Vec::new();
            let mut groups = Vec::new();
            data.write_tsv(&mut counts).unwrap();
            data.write_groups_tsv(&mut groups).unwrap();
            let map = read_group_map(groups.as_slice()).unwrap();
            let back = CountMatrix::read_tsv(counts.as_slice(), &map).unwrap();
            prop_assert_eq!(back, data);
        }

        #[test]
        fn filter_is_idempotent_and_preserves_sums(data in arb_matrix(), threshold in 0u64..200) {
            let spec = FilterSpec { min_total_reads: threshold };
            if let Ok((once, _)) = filter_low_counts(&data, spec) {
                let (twice, removed) = filter_low_counts(&once, spec).unwrap();
                prop_assert_eq!(&twice, &once);
                prop_assert!(removed.is_empty());

                let mut expected = vec![0u64; data.n_samples()];
                for j in (0..data.n_genes()).filter(|&j| data.gene_total(j) >= threshold) {
                    for (e, &x) in expected.iter_mut().zip(data.row(j)) {
                        *e += x;
                    }
                }
                prop_assert_eq!(once.sample_totals(), expected);
            }
        }
    }
}
