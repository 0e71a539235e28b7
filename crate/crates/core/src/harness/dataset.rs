//! CSV formats for datasets, point sets and embedding clouds.
//!
//! * dataset: `domain,label,f0,…,f{d-1}`, one file per domain or a single
//!   combined file;
//! * point set: `f0,…,f{d-1}`;
//! * embeddings: `item,f0,…,f{d-1}`, one row per Monte Carlo sample.
//!
//! Floats are written in shortest round-trip form, so parsing a written
//! file gives back the exact values.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kernel::PointSet;
use crate::prob_embedding::ProbEmbedding;
use crate::train::LabeledDomain;

/// Labeled samples of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub domain: usize,
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
}

impl DomainData {
    pub fn new(domain: usize, x: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::shape("domain labels", x.nrows(), labels.len()));
        }
        Ok(Self { domain, x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_labeled(&self) -> Result<LabeledDomain> {
        LabeledDomain::new(self.x.clone(), self.labels.clone(), self.domain as u64)
    }
}

fn feature_header(prefix: &[&str], d: usize) -> Vec<String> {
    prefix
        .iter()
        .map(|s| s.to_string())
        .chain((0..d).map(|j| format!("f{j}")))
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a header and the data rows, checking that the header is
/// `prefix` followed by `f0..f{d-1}`. Returns `(d, rows)`.
fn read_rows(path: &Path, prefix: &[&str]) -> Result<(usize, Vec<csv::StringRecord>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let d = header.len().saturating_sub(prefix.len());
    let expected = feature_header(prefix, d);
    if d == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::parse(
            path,
            format!("expected header {}, got {}", expected.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>().map_err(|e| csv_err(path, e))?;
    Ok((d, rows))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, format!("row {line}: invalid {what} {field:?}")))
}

fn parse_features(path: &Path, line: usize, rec: &csv::StringRecord, skip: usize) -> Result<Vec<f64>> {
    rec.iter()
        .skip(skip)
        .map(|f| {
            let v: f64 = parse_field(path, line, f, "feature")?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(path, format!("row {line}: non-finite feature")))
            }
        })
        .collect()
}

fn float_row(row: ndarray::ArrayView1<'_, f64>) -> Vec<String> {
    row.iter().map(|v| format!("{v:?}")).collect()
}

/// Writes one or more domains into a single CSV file.
pub fn write_dataset_csv(path: &Path, domains: &[DomainData]) -> Result<()> {
    let d = domains.first().map_or(0, |x| x.x.ncols());
    if d == 0 || domains.iter().any(|x| x.x.ncols() != d) {
        return Err(Error::validation("domains must share a positive feature dimension"));
    }
    let rows = domains.iter().flat_map(|dom| {
        (0..dom.len()).map(move |i| {
            [dom.domain.to_string(), dom.labels[i].to_string()]
                .into_iter()
                .chain(float_row(dom.x.row(i)))
                .collect()
        })
    });
    write_rows(path, &feature_header(&["domain", "label"], d), rows)
}

/// Reads any number of dataset files and groups rows by the domain column,
/// in increasing domain order.
pub fn read_dataset_csv(paths: &[impl AsRef<Path>]) -> Result<Vec<DomainData>> {
    let mut grouped: BTreeMap<usize, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    let mut dim = None;
    for p in paths {
        let path = p.as_ref();
        let (d, rows) = read_rows(path, &["domain", "label"])?;
        if *dim.get_or_insert(d) != d {
            return Err(Error::parse(path, "feature dimension differs from earlier files"));
        }
        for (line, rec) in rows.iter().enumerate() {
            let domain: usize = parse_field(path, line + 2, &rec[0], "domain")?;
            let label: usize = parse_field(path, line + 2, &rec[1], "label")?;
            let entry = grouped.entry(domain).or_default();
            entry.0.extend(parse_features(path, line + 2, rec, 2)?);
            entry.1.push(label);
        }
    }
    let d = dim.ok_or_else(|| Error::validation("no dataset files given"))?;
    if grouped.is_empty() {
        return Err(Error::validation("dataset files contain no rows"));
    }
    grouped
        .into_iter()
        .map(|(domain, (flat, labels))| {
            let x = Array2::from_shape_vec((labels.len(), d), flat).expect("row-major features");
            DomainData::new(domain, x, labels)
        })
        .collect()
}

pub fn write_point_set_csv(path: &Path, points: &PointSet) -> Result<()> {
    let v = points.view();
    write_rows(path, &feature_header(&[], points.dim()), v.rows().into_iter().map(|r| float_row(r)))
}

pub fn read_point_set_csv(path: &Path) -> Result<PointSet> {
    let (d, rows) = read_rows(path, &[])?;
    let mut flat = Vec::with_capacity(rows.len() * d);
    for (line, rec) in rows.iter().enumerate() {
        flat.extend(parse_features(path, line + 2, rec, 0)?);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, "no points"));
    }
    PointSet::new(Array2::from_shape_vec((rows.len(), d), flat).expect("row-major points"))
}

pub fn write_embeddings_csv(path: &Path, items: &[ProbEmbedding]) -> Result<()> {
    let d = items.first().map_or(0, ProbEmbedding::dim);
    let rows = items.iter().enumerate().flat_map(|(i, e)| {
        let s = e.samples().to_owned();
        (0..s.nrows())
            .map(|t| std::iter::once(i.to_string()).chain(float_row(s.row(t))).collect())
            .collect::<Vec<Vec<String>>>()
    });
    write_rows(path, &feature_header(&["item"], d), rows)
}

/// Reads embedding clouds; rows sharing an item id form one cloud, items in
/// increasing id order.
pub fn read_embeddings_csv(path: &Path) -> Result<Vec<ProbEmbedding>> {
    let (_, rows) = read_rows(path, &["item"])?;
    let mut grouped: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (line, rec) in rows.iter().enumerate() {
        let item: usize = parse_field(path, line + 2, &rec[0], "item")?;
        grouped.entry(item).or_default().push(parse_features(path, line + 2, rec, 1)?);
    }
    if grouped.is_empty() {
        return Err(Error::parse(path, "no embedding rows"));
    }
    grouped.values().map(|rows| ProbEmbedding::from_rows(rows)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synthetic::{generate_synthetic, SyntheticSpec};

    #[test]
    fn dataset_round_trip_is_exact() {
        let data = generate_synthetic(&SyntheticSpec::shift3()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let combined = dir.path().join("all.csv");
        write_dataset_csv(&combined, &data).unwrap();
        assert_eq!(read_dataset_csv(&[&combined]).unwrap(), data);

        let files: Vec<_> = data
            .iter()
            .map(|d| {
                let p = dir.path().join(format!("domain_{}.csv", d.domain));
                write_dataset_csv(&p, std::slice::from_ref(d)).unwrap();
                p
            })
            .collect();
        assert_eq!(read_dataset_csv(&files).unwrap(), data);
    }

    #[test]
    fn awkward_floats_round_trip() {
        let x = Array2::from_shape_vec((2, 3), vec![0.1, -1e-300, 1.0 / 3.0, 123456.789e10, f64::MIN_POSITIVE, -0.0]).unwrap();
        let d = DomainData::new(7, x, vec![0, 1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_dataset_csv(&p, std::slice::from_ref(&d)).unwrap();
        let back = read_dataset_csv(&[&p]).unwrap();
        assert_eq!(back[0].x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), d.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn malformed_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "domain,label,x0\n0,1,2.0\n").unwrap();
        assert!(matches!(read_dataset_csv(&[&p]), Err(Error::Parse { .. })));
        std::fs::write(&p, "domain,label,f0\n0,one,2.0\n").unwrap();
        assert!(matches!(read_dataset_csv(&[&p]), Err(Error::Parse { .. })));
        assert!(matches!(read_dataset_csv(&[dir.path().join("missing.csv")]), Err(Error::Io { .. })));
    }

    #[test]
    fn point_sets_and_embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ps = PointSet::from_rows(&[vec![0.1, 0.2], vec![-3.0, 4.5]]).unwrap();
        let p = dir.path().join("pts.csv");
        write_point_set_csv(&p, &ps).unwrap();
        assert_eq!(read_point_set_csv(&p).unwrap(), ps);

        let items = vec![
            ProbEmbedding::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap(),
            ProbEmbedding::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        ];
        let e = dir.path().join("emb.csv");
        write_embeddings_csv(&e, &items).unwrap();
        assert_eq!(read_embeddings_csv(&e).unwrap(), items);
    }
}
