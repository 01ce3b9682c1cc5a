//! Dataset ingestion, label derivation, and train/test splitting.
//!
//! On-disk layout is tab-separated throughout:
//!   - manifest: header `sample_id<TAB>label<TAB>path`, one row per sample,
//!     paths relative to the manifest's directory;
//!   - record file: one row per sequence, `abundance<TAB>v1<TAB>...<TAB>v_dim`;
//!   - metadata table: header row of field names, `sample_id` column required.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{Sample, SequenceRecord};
use crate::error::{Error, Result};

/// A parsed manifest plus everything loaded through it.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub samples: Vec<Sample>,
    /// Sample ids whose record files held nothing with positive abundance.
    pub rejected: Vec<String>,
    /// Raw manifest label strings by sample id, for rule-based labeling.
    pub raw_labels: Vec<(String, String)>,
    pub dim: usize,
}

fn parse_float(s: &str, file: &str, line: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        file: file.to_string(),
        line,
        msg: format!("cannot parse {s:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            file: file.to_string(),
            line,
            msg: format!("non-finite value {s:?}"),
        });
    }
    Ok(v)
}

/// Read one sample record file, dropping zero-abundance rows.
fn load_record_file(path: &Path, expected_dim: Option<usize>) -> Result<Vec<SequenceRecord>> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Schema(format!("cannot read record file {name}: {e}")))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                file: name.clone(),
                line: i + 1,
                msg: "expected abundance followed by embedding values".into(),
            });
        }
        let abundance = parse_float(fields[0], &name, i + 1)?;
        if abundance < 0.0 {
            return Err(Error::Parse {
                file: name.clone(),
                line: i + 1,
                msg: format!("negative abundance {abundance}"),
            });
        }
        let dim = fields.len() - 1;
        if let Some(d) = expected_dim {
            if dim != d {
                return Err(Error::Schema(format!(
                    "{name}: row {} has {dim} embedding columns, dataset uses {d}",
                    i + 1
                )));
            }
        }
        if abundance == 0.0 {
            continue;
        }
        let embedding = fields[1..]
            .iter()
            .map(|f| parse_float(f, &name, i + 1))
            .collect::<Result<Vec<f64>>>()?;
        records.push(SequenceRecord { embedding, abundance });
    }
    Ok(records)
}

/// Load a dataset through its manifest. Zero-abundance records are dropped;
/// samples left empty are set aside in `rejected` rather than returned.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let name = manifest_path.display().to_string();
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::Schema(format!("cannot read manifest {name}: {e}")))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            file: name.clone(),
            line: 1,
            msg: "empty manifest".into(),
        })?
        .1;
    if header.split('\t').collect::<Vec<_>>() != ["sample_id", "label", "path"] {
        return Err(Error::Parse {
            file: name.clone(),
            line: 1,
            msg: format!("expected header sample_id<TAB>label<TAB>path, got {header:?}"),
        });
    }

    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    let mut raw_labels = Vec::new();
    let mut seen = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                file: name.clone(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let (id, label_raw, rel) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        if id.is_empty() {
            return Err(Error::Parse {
                file: name.clone(),
                line: i + 1,
                msg: "empty sample_id".into(),
            });
        }
        if seen.insert(id.to_string(), i + 1).is_some() {
            return Err(Error::Parse {
                file: name.clone(),
                line: i + 1,
                msg: format!("duplicate sample_id {id:?}"),
            });
        }
        let records = load_record_file(&base.join(rel), dim)?;
        if let (None, Some(r)) = (dim, records.first()) {
            dim = Some(r.embedding.len());
        }
        raw_labels.push((id.to_string(), label_raw.to_string()));
        if records.is_empty() {
            rejected.push(id.to_string());
            continue;
        }
        let label = match label_raw {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        };
        samples.push(Sample {
            id: id.to_string(),
            records,
            label,
        });
    }
    Ok(LoadedDataset {
        samples,
        rejected,
        raw_labels,
        dim: dim.unwrap_or(0),
    })
}

/// Tab-separated metadata table with a header row.
#[derive(Debug, Clone)]
pub struct MetadataTable {
    pub fields: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetadataTable {
    pub fn load(path: &Path) -> Result<MetadataTable> {
        let name = path.display().to_string();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Schema(format!("cannot read metadata table {name}: {e}")))?;
        Self::parse(&text, &name)
    }

    pub fn parse(text: &str, name: &str) -> Result<MetadataTable> {
        let mut lines = text.lines().enumerate();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse {
                file: name.to_string(),
                line: 1,
                msg: "empty metadata table".into(),
            })?
            .1;
        let fields: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<String> = line.split('\t').map(|s| s.trim().to_string()).collect();
            if row.len() != fields.len() {
                return Err(Error::Parse {
                    file: name.to_string(),
                    line: i + 1,
                    msg: format!("expected {} fields, got {}", fields.len(), row.len()),
                });
            }
            rows.push(row);
        }
        Ok(MetadataTable { fields, rows })
    }

    pub fn column(&self, field: &str) -> Result<usize> {
        self.fields
            .iter()
            .position(|f| f == field)
            .ok_or_else(|| Error::Config(format!("unknown metadata field {field:?}")))
    }
}

/// How to turn a metadata field into binary labels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LabelRule {
    /// Label 1 when the field value equals one of `positive`, else 0.
    FieldEquals {
        field: String,
        positive: Vec<String>,
        #[serde(default)]
        exclude: Vec<String>,
    },
    /// Label 1 when the numeric field value is at least `threshold`, else 0.
    ThresholdBinary {
        field: String,
        threshold: f64,
        #[serde(default)]
        exclude: Vec<String>,
    },
    /// Label 1 for the EMPO 3 soil annotation "Solid (non-saline)", else 0.
    Empo3Soil {
        field: String,
        #[serde(default)]
        exclude: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivedLabels {
    pub labels: Vec<(String, usize)>,
    pub excluded: Vec<String>,
}

/// Apply a label rule to a metadata table.
pub fn derive_labels(table: &MetadataTable, rule: &LabelRule) -> Result<DerivedLabels> {
    let id_col = table.column("sample_id")?;
    let (field, exclude) = match rule {
        LabelRule::FieldEquals { field, exclude, .. } => (field, exclude),
        LabelRule::ThresholdBinary { field, exclude, .. } => (field, exclude),
        LabelRule::Empo3Soil { field, exclude } => (field, exclude),
    };
    let col = table.column(field)?;
    let mut labels = Vec::new();
    let mut excluded = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for row in &table.rows {
        let id = row[id_col].clone();
        if !seen.insert(id.clone()) {
            return Err(Error::Conflict(format!(
                "sample id {id:?} appears more than once in the metadata table"
            )));
        }
        let value = row[col].as_str();
        if exclude.iter().any(|e| e == value) {
            excluded.push(id);
            continue;
        }
        let label = match rule {
            LabelRule::FieldEquals { positive, .. } => {
                usize::from(positive.iter().any(|p| p == value))
            }
            LabelRule::ThresholdBinary { threshold, .. } => {
                let v: f64 = value.parse().map_err(|_| {
                    Error::Parse {
                        file: "metadata".into(),
                        line: 0,
                        msg: format!(
                            "sample {id}: cannot parse {value:?} as a number for threshold rule"
                        ),
                    }
                })?;
                usize::from(v >= *threshold)
            }
            LabelRule::Empo3Soil { .. } => usize::from(value == "Solid (non-saline)"),
        };
        labels.push((id, label));
    }
    Ok(DerivedLabels { labels, excluded })
}

/// Attach derived labels to loaded samples; samples without a derived label
/// (excluded or absent from the table) are dropped and listed.
pub fn apply_labels(samples: Vec<Sample>, derived: &DerivedLabels) -> (Vec<Sample>, Vec<String>) {
    let by_id: BTreeMap<&str, usize> = derived
        .labels
        .iter()
        .map(|(id, l)| (id.as_str(), *l))
        .collect();
    let mut labeled = Vec::new();
    let mut dropped = Vec::new();
    for mut s in samples {
        match by_id.get(s.id.as_str()) {
            Some(&l) => {
                s.label = Some(l);
                labeled.push(s);
            }
            None => dropped.push(s.id),
        }
    }
    (labeled, dropped)
}

/// A train/test partition of sample ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: Option<u64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stratified split preserving per-class proportions.
///
/// The test set takes `ceil((1 - train_fraction)·n)` samples overall,
/// apportioned across classes by largest remainder, with at least one test
/// sample for any class of two or more. Depends only on the id set, the
/// labels, and the seed, never on input order.
pub fn stratified_split(
    labels: &[(String, usize)],
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("no labeled samples to split".into()));
    }
    if !(0.0..1.0).contains(&train_fraction) || train_fraction <= 0.0 {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} must be in (0, 1)"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, label) in labels {
        by_class.entry(*label).or_default().push(id.clone());
    }
    if by_class.len() < 2 {
        return Err(Error::Degenerate(format!(
            "stratification needs at least two classes, got {}",
            by_class.len()
        )));
    }
    let n = labels.len();
    let n_test = ((1.0 - train_fraction) * n as f64).ceil() as usize;
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let sizes: Vec<usize> = classes.iter().map(|c| by_class[c].len()).collect();

    // Largest-remainder apportionment of the test total across classes.
    let quotas: Vec<f64> = sizes
        .iter()
        .map(|&nc| n_test as f64 * nc as f64 / n as f64)
        .collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = n_test.saturating_sub(take.iter().sum());
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = quotas[i] - quotas[i].floor();
        let fj = quotas[j] - quotas[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    let mut next = 0;
    let k = take.len();
    while leftover > 0 {
        take[order[next % k]] += 1;
        next += 1;
        leftover -= 1;
    }
    // Keep every class represented on both sides where possible.
    let lo: Vec<usize> = sizes.iter().map(|&nc| usize::from(nc >= 2)).collect();
    let hi: Vec<usize> = sizes
        .iter()
        .map(|&nc| if nc >= 2 { nc - 1 } else { 0 })
        .collect();
    for i in 0..take.len() {
        take[i] = take[i].clamp(lo[i], hi[i]);
    }
    loop {
        let total: usize = take.iter().sum();
        if total == n_test {
            break;
        }
        if total < n_test {
            // Grow the class with the most headroom.
            let Some((i, _)) = take
                .iter()
                .enumerate()
                .filter(|(i, &t)| t < hi[*i])
                .max_by(|(i, a), (j, b)| (hi[*i] - **a).cmp(&(hi[*j] - **b)).then(j.cmp(i)))
            else {
                break;
            };
            take[i] += 1;
        } else {
            let Some((i, _)) = take
                .iter()
                .enumerate()
                .filter(|(i, &t)| t > lo[*i])
                .max_by(|(i, a), (j, b)| (**a - lo[*i]).cmp(&(**b - lo[*j])).then(j.cmp(i)))
            else {
                break;
            };
            take[i] -= 1;
        }
    }

    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for (ci, c) in classes.iter().enumerate() {
        let mut ids = by_class[c].clone();
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (*c as u64).wrapping_mul(0x9e37)));
        ids.shuffle(&mut rng);
        test_ids.extend(ids.drain(..take[ci]));
        train_ids.extend(ids);
    }
    train_ids.sort();
    test_ids.sort();
    Ok(DatasetSplit {
        train_ids,
        test_ids,
        seed: Some(seed),
    })
}

/// Two-study split: one manifest's samples train, the other's test.
pub fn cross_study_split(train: &[Sample], test: &[Sample]) -> Result<DatasetSplit> {
    let train_ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
    let test_ids: Vec<String> = test.iter().map(|s| s.id.clone()).collect();
    for id in &test_ids {
        if train_ids.contains(id) {
            return Err(Error::Conflict(format!(
                "sample id {id:?} appears in both studies"
            )));
        }
    }
    Ok(DatasetSplit {
        train_ids,
        test_ids,
        seed: None,
    })
}

/// Format a float for the TSV outputs; `{}` round-trips f64 exactly.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Write a sample's records in the record-file format.
pub fn write_record_file(path: &Path, records: &[SequenceRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format_value(r.abundance));
        for v in &r.embedding {
            out.push('\t');
            out.push_str(&format_value(*v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write a manifest plus one record file per sample into `dir`; returns the
/// manifest path.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("sample_id\tlabel\tpath\n");
    for s in samples {
        let rel = format!("{}.tsv", s.id);
        write_record_file(&dir.join(&rel), &s.records)?;
        let label = s.label.map_or(String::new(), |l| l.to_string());
        manifest.push_str(&format!("{}\t{label}\t{rel}\n", s.id));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &Path, name: &str, content: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, content).unwrap();
        p
    }

    fn tmpdir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("setpool-dataio-{tag}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn zero_abundance_records_are_dropped() {
        let d = tmpdir("drop");
        write_tmp(&d, "a.tsv", "1.0\t0.1\t0.2\n0\t9.0\t9.0\n2.0\t0.3\t0.4\n");
        let manifest = write_tmp(&d, "manifest.tsv", "sample_id\tlabel\tpath\na\t1\ta.tsv\n");
        let ds = load_dataset(&manifest).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.samples[0].records.len(), 2);
        assert_eq!(ds.samples[0].label, Some(1));
        assert_eq!(ds.dim, 2);
    }

    #[test]
    fn cardinalities_match_manifest() {
        let d = tmpdir("card");
        write_tmp(&d, "a.tsv", "1\t1\t2\n1\t3\t4\n1\t5\t6\n");
        write_tmp(&d, "b.tsv", "1\t1\t2\n1\t3\t4\n");
        let manifest = write_tmp(
            &d,
            "manifest.tsv",
            "sample_id\tlabel\tpath\na\t0\ta.tsv\nb\t1\tb.tsv\n",
        );
        let ds = load_dataset(&manifest).unwrap();
        assert_eq!(ds.samples[0].records.len(), 3);
        assert_eq!(ds.samples[1].records.len(), 2);
    }

    #[test]
    fn dimension_mismatch_names_the_file() {
        let d = tmpdir("dim");
        write_tmp(&d, "a.tsv", "1\t1\t2\t3\n");
        write_tmp(&d, "b.tsv", "1\t1\t2\n");
        let manifest = write_tmp(
            &d,
            "manifest.tsv",
            "sample_id\tlabel\tpath\na\t0\ta.tsv\nb\t1\tb.tsv\n",
        );
        match load_dataset(&manifest) {
            Err(Error::Schema(msg)) => assert!(msg.contains("b.tsv"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn all_zero_sample_is_rejected_with_id() {
        let d = tmpdir("rej");
        write_tmp(&d, "a.tsv", "0\t1\t2\n0\t3\t4\n");
        write_tmp(&d, "b.tsv", "1\t1\t2\n");
        let manifest = write_tmp(
            &d,
            "manifest.tsv",
            "sample_id\tlabel\tpath\na\t0\ta.tsv\nb\t1\tb.tsv\n",
        );
        let ds = load_dataset(&manifest).unwrap();
        assert_eq!(ds.rejected, vec!["a".to_string()]);
        assert_eq!(ds.samples.len(), 1);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let d = tmpdir("line");
        write_tmp(&d, "a.tsv", "1\t1\t2\nnot-a-number\t3\t4\n");
        let manifest = write_tmp(&d, "manifest.tsv", "sample_id\tlabel\tpath\na\t0\ta.tsv\n");
        match load_dataset(&manifest) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_sample_id_is_rejected() {
        let d = tmpdir("dup");
        write_tmp(&d, "a.tsv", "1\t1\t2\n");
        let manifest = write_tmp(
            &d,
            "manifest.tsv",
            "sample_id\tlabel\tpath\na\t0\ta.tsv\na\t1\ta.tsv\n",
        );
        assert!(matches!(load_dataset(&manifest), Err(Error::Parse { .. })));
    }

    #[test]
    fn loading_is_order_independent() {
        let d = tmpdir("order");
        write_tmp(&d, "a.tsv", "1\t1\t2\n");
        write_tmp(&d, "b.tsv", "2\t3\t4\n");
        write_tmp(&d, "c.tsv", "3\t5\t6\n");
        let m1 = write_tmp(
            &d,
            "m1.tsv",
            "sample_id\tlabel\tpath\na\t0\ta.tsv\nb\t1\tb.tsv\nc\t0\tc.tsv\n",
        );
        let m2 = write_tmp(
            &d,
            "m2.tsv",
            "sample_id\tlabel\tpath\nc\t0\tc.tsv\na\t0\ta.tsv\nb\t1\tb.tsv\n",
        );
        let mut s1 = load_dataset(&m1).unwrap().samples;
        let mut s2 = load_dataset(&m2).unwrap().samples;
        s1.sort_by(|a, b| a.id.cmp(&b.id));
        s2.sort_by(|a, b| a.id.cmp(&b.id));
        assert_eq!(s1, s2);
    }

    #[test]
    fn field_equals_rule() {
        let table = MetadataTable::parse(
            "sample_id\tprimary_experimental_variable\ns1\ttumor mucosa\ns2\tbladder mucosa\n",
            "meta",
        )
        .unwrap();
        let rule = LabelRule::FieldEquals {
            field: "primary_experimental_variable".into(),
            positive: vec!["tumor mucosa".into()],
            exclude: vec![],
        };
        let got = derive_labels(&table, &rule).unwrap();
        assert_eq!(got.labels, vec![("s1".into(), 1), ("s2".into(), 0)]);
        assert!(got.excluded.is_empty());
    }

    #[test]
    fn threshold_rule_with_exclusions() {
        let table = MetadataTable::parse(
            "sample_id\tco_occurrence\ns1\t0.36\ns2\t0.28\ns3\tnot applicable\n",
            "meta",
        )
        .unwrap();
        let rule = LabelRule::ThresholdBinary {
            field: "co_occurrence".into(),
            threshold: 0.3,
            exclude: vec!["not applicable".into()],
        };
        let got = derive_labels(&table, &rule).unwrap();
        assert_eq!(got.labels, vec![("s1".into(), 1), ("s2".into(), 0)]);
        assert_eq!(got.excluded, vec!["s3".to_string()]);
    }

    #[test]
    fn empo3_soil_rule() {
        let table = MetadataTable::parse(
            "sample_id\tempo_3\ns1\tSolid (non-saline)\ns2\tAqueous (non-saline)\ns3\tAnimal (saline)\n",
            "meta",
        )
        .unwrap();
        let rule = LabelRule::Empo3Soil {
            field: "empo_3".into(),
            exclude: vec![],
        };
        let got = derive_labels(&table, &rule).unwrap();
        assert_eq!(
            got.labels,
            vec![("s1".into(), 1), ("s2".into(), 0), ("s3".into(), 0)]
        );
    }

    #[test]
    fn unknown_field_is_a_rule_error() {
        let table = MetadataTable::parse("sample_id\tx\ns1\t1\n", "meta").unwrap();
        let rule = LabelRule::FieldEquals {
            field: "missing".into(),
            positive: vec![],
            exclude: vec![],
        };
        assert!(matches!(derive_labels(&table, &rule), Err(Error::Config(_))));
    }

    fn synthetic_labels(n0: usize, n1: usize) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        for i in 0..n0 {
            v.push((format!("a{i:04}"), 0));
        }
        for i in 0..n1 {
            v.push((format!("b{i:04}"), 1));
        }
        v
    }

    #[test]
    fn study_shaped_split_gives_24_test_samples_13_11() {
        // 64 positive / 52 negative, 80/20: ceil(23.2) = 24 test samples,
        // apportioned 13/11 by largest remainder.
        let labels = synthetic_labels(52, 64);
        let split = stratified_split(&labels, 0.8, 5).unwrap();
        assert_eq!(split.test_ids.len(), 24);
        assert_eq!(split.train_ids.len(), 92);
        let test_pos = split.test_ids.iter().filter(|id| id.starts_with('b')).count();
        assert_eq!(test_pos, 13);
        assert_eq!(split.test_ids.len() - test_pos, 11);
    }

    #[test]
    fn single_class_is_a_stratification_error() {
        let labels: Vec<(String, usize)> = (0..10).map(|i| (format!("s{i}"), 1)).collect();
        assert!(matches!(
            stratified_split(&labels, 0.8, 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn split_is_deterministic_and_order_free() {
        let labels = synthetic_labels(20, 30);
        let a = stratified_split(&labels, 0.8, 42).unwrap();
        let b = stratified_split(&labels, 0.8, 42).unwrap();
        assert_eq!(a, b);
        let mut reversed = labels.clone();
        reversed.reverse();
        let c = stratified_split(&reversed, 0.8, 42).unwrap();
        assert_eq!(a, c);
        let d = stratified_split(&labels, 0.8, 43).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn split_bounds_hold_for_1000_random_label_vectors() {
        // Property sweep: disjoint, exhaustive, deterministic, per-class
        // proportions within one sample of the 80/20 target.
        use rand::Rng;
        for case in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(case);
            let n0 = rng.random_range(2..40);
            let n1 = rng.random_range(2..40);
            let labels = synthetic_labels(n0, n1);
            let split = stratified_split(&labels, 0.8, case).unwrap();
            assert_eq!(split.train_ids.len() + split.test_ids.len(), n0 + n1);
            for id in &split.test_ids {
                assert!(!split.train_ids.contains(id));
            }
            let t0 = split.test_ids.iter().filter(|id| id.starts_with('a')).count();
            let t1 = split.test_ids.len() - t0;
            assert!(t0 >= 1 && t1 >= 1, "case {case}: every class tested");
            assert!(
                (t0 as f64 - 0.2 * n0 as f64).abs() <= 1.0 + 1e-9,
                "case {case}: class-0 test count {t0} vs target {}",
                0.2 * n0 as f64
            );
            assert!(
                (t1 as f64 - 0.2 * n1 as f64).abs() <= 1.0 + 1e-9,
                "case {case}: class-1 test count {t1} vs target {}",
                0.2 * n1 as f64
            );
        }
    }

    fn dummy_samples(prefix: &str, n: usize, label: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("{prefix}{i}"),
                records: vec![SequenceRecord {
                    embedding: vec![0.0],
                    abundance: 1.0,
                }],
                label: Some(label),
            })
            .collect()
    }

    #[test]
    fn cross_study_split_keeps_studies_intact() {
        let mut train = dummy_samples("t", 3, 1);
        train.extend(dummy_samples("u", 24, 0));
        let mut test = dummy_samples("v", 10, 1);
        test.extend(dummy_samples("w", 7, 0));
        let split = cross_study_split(&train, &test).unwrap();
        assert_eq!(split.train_ids.len(), 27);
        assert_eq!(split.test_ids.len(), 17);
        let train_pos = train.iter().filter(|s| s.label == Some(1)).count();
        let test_pos = test.iter().filter(|s| s.label == Some(1)).count();
        assert_eq!((train_pos, test_pos), (3, 10));
    }

    #[test]
    fn overlapping_ids_conflict() {
        let train = dummy_samples("x", 3, 0);
        let test = dummy_samples("x", 2, 1);
        assert!(matches!(
            cross_study_split(&train, &test),
            Err(Error::Conflict(_))
        ));
    }

    #[test]
    fn dataset_roundtrip_through_disk() {
        let d = tmpdir("roundtrip");
        let samples = vec![
            Sample {
                id: "s1".into(),
                records: vec![SequenceRecord {
                    embedding: vec![0.1234567890123, -4.5],
                    abundance: 2.0,
                }],
                label: Some(1),
            },
            Sample {
                id: "s2".into(),
                records: vec![SequenceRecord {
                    embedding: vec![1.0, 2.0],
                    abundance: 0.5,
                }],
                label: Some(0),
            },
        ];
        let manifest = write_dataset(&d.join("ds"), &samples).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded.samples, samples);
    }
}
