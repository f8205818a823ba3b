use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{Domain, DomainDataset, Instance};
use crate::error::{IdianError, Result};

/// Loads `label,f0,...,f{d-1}` rows. Empty feature fields are missing, an empty
/// label field means unlabeled. Target instances are stably reordered so the
/// labeled ones come first.
pub fn load_csv(path: impl AsRef<Path>, domain: Domain, n_classes: usize) -> Result<DomainDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| IdianError::io(path, e))?;
    read_csv(file, domain, n_classes)
}

pub fn read_csv<R: Read>(reader: R, domain: Domain, n_classes: usize) -> Result<DomainDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| IdianError::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    if header.is_empty() || header.get(0).map(str::trim) != Some("label") {
        return Err(IdianError::Parse {
            row: 0,
            message: "header must start with `label`".into(),
        });
    }
    let dim = header.len() - 1;

    let mut instances = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // Row numbers are 1-based data rows, header excluded.
        let row = i + 1;
        let record = record.map_err(|e| IdianError::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != dim + 1 {
            return Err(IdianError::Parse {
                row,
                message: format!("expected {} fields, found {}", dim + 1, record.len()),
            });
        }
        let label_field = record[0].trim();
        let label = if label_field.is_empty() {
            None
        } else {
            let y: usize = label_field.parse().map_err(|_| IdianError::Parse {
                row,
                message: format!("label `{label_field}` is not a class index"),
            })?;
            if y >= n_classes {
                return Err(IdianError::Parse {
                    row,
                    message: format!("label {y} outside [0, {n_classes})"),
                });
            }
            Some(y)
        };
        let mut features = Vec::with_capacity(dim);
        let mut mask = Vec::with_capacity(dim);
        for (k, field) in record.iter().skip(1).enumerate() {
            let field = field.trim();
            if field.is_empty() {
                features.push(0.0);
                mask.push(false);
            } else {
                let v: f64 = field.parse().map_err(|_| IdianError::Parse {
                    row,
                    message: format!("feature f{k} value `{field}` is not numeric"),
                })?;
                if !v.is_finite() {
                    return Err(IdianError::Parse {
                        row,
                        message: format!("feature f{k} is not finite"),
                    });
                }
                features.push(v);
                mask.push(true);
            }
        }
        instances.push(Instance {
            features,
            mask,
            label,
        });
    }

    let labeled_count = match domain {
        Domain::Source => instances.len(),
        Domain::Target => {
            let (mut labeled, unlabeled): (Vec<_>, Vec<_>) =
                instances.into_iter().partition(|x| x.label.is_some());
            let n = labeled.len();
            labeled.extend(unlabeled);
            instances = labeled;
            n
        }
    };
    DomainDataset::new(domain, instances, dim, n_classes, labeled_count)
}

fn csv_err(e: impl std::fmt::Display) -> IdianError {
    IdianError::Data(format!("csv write failed: {e}"))
}

/// Writes a dataset in the same format `load_csv` reads.
pub fn write_csv<W: Write>(ds: &DomainDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim).map(|k| format!("f{k}")));
    wtr.write_record(&header).map_err(csv_err)?;
    for inst in &ds.instances {
        let mut rec = Vec::with_capacity(ds.dim + 1);
        rec.push(inst.label.map(|y| y.to_string()).unwrap_or_default());
        for (v, m) in inst.features.iter().zip(&inst.mask) {
            // `{:?}` prints the shortest representation that parses back exactly.
            rec.push(if *m { format!("{v:?}") } else { String::new() });
        }
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush().map_err(csv_err)?;
    Ok(())
}

/// 0/1 mask matrix with the same shape as the features, for auditing.
pub fn write_mask_csv<W: Write>(ds: &DomainDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<String> = (0..ds.dim).map(|k| format!("m{k}")).collect();
    wtr.write_record(&header).map_err(csv_err)?;
    for inst in &ds.instances {
        wtr.write_record(inst.mask.iter().map(|m| if *m { "1" } else { "0" }))
            .map_err(csv_err)?;
    }
    wtr.flush().map_err(csv_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DomainDataset> {
        read_csv(text.as_bytes(), Domain::Target, 3)
    }

    #[test]
    fn empty_feature_is_missing() {
        let ds = parse("label,f0,f1,f2\n1,0.5,,0.8\n").unwrap();
        let x = &ds.instances[0];
        assert_eq!(x.features, vec![0.5, 0.0, 0.8]);
        assert_eq!(x.mask, vec![true, false, true]);
        assert_eq!(x.label, Some(1));
        assert_eq!(ds.dim, 3);
    }

    #[test]
    fn empty_label_is_unlabeled() {
        let ds = parse("label,f0,f1\n,0.1,0.2\n").unwrap();
        assert_eq!(ds.instances[0].label, None);
        assert!(ds.instances[0].is_complete());
        assert_eq!(ds.labeled_count, 0);
    }

    #[test]
    fn ragged_row_names_row() {
        let err = parse("label,f0,f1,f2\n0,1,2,3\n2,0.1\n").unwrap_err();
        match err {
            IdianError::Parse { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_feature_rejected() {
        let err = parse("label,f0\n0,abc\n").unwrap_err();
        assert!(matches!(err, IdianError::Parse { row: 1, .. }));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let err = parse("label,f0\n3,0.5\n").unwrap_err();
        assert!(matches!(err, IdianError::Parse { row: 1, .. }));
    }

    #[test]
    fn labeled_rows_moved_first() {
        let ds = parse("label,f0\n,0.1\n2,0.2\n,0.3\n0,0.4\n").unwrap();
        assert_eq!(ds.labeled_count, 2);
        let labels: Vec<_> = ds.instances.iter().map(|x| x.label).collect();
        assert_eq!(labels, vec![Some(2), Some(0), None, None]);
    }

    #[test]
    fn source_with_missing_value_rejected() {
        let err = read_csv("label,f0,f1\n0,,1\n".as_bytes(), Domain::Source, 2).unwrap_err();
        assert!(matches!(err, IdianError::Data(_)));
    }

    #[test]
    fn mask_export_matches_shape() {
        let ds = parse("label,f0,f1\n1,,0.5\n").unwrap();
        let mut buf = Vec::new();
        write_mask_csv(&ds, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "m0,m1\n0,1\n");
    }
}
