//! CSV import and export of paired feature sets.
//!
//! Columns, in order: `instance_id, class_id, level_id, ft_0..ft_{Dt-1},
//! fs_0..fs_{Ds-1}`, then optionally `lt_0..lt_{C-1}, ls_0..ls_{C-1}` and
//! optionally `ambiguous` (`0`/`1`/`true`/`false`). Row numbers in diagnostics
//! are file line numbers, the header being line 1.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::feature_model::{FeatureRecord, GroupKey, PairedFeatureSet};

/// Expectations checked against the header. `None` accepts whatever the file
/// declares.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvSchema {
    pub dim_t: Option<usize>,
    pub dim_s: Option<usize>,
    pub logits: Option<bool>,
    pub ambiguous: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    dim_t: usize,
    dim_s: usize,
    num_logits: usize,
    ambiguous: bool,
}

fn run_len(header: &[String], start: usize, prefix: &str) -> usize {
    header[start..]
        .iter()
        .enumerate()
        .take_while(|(i, name)| **name == format!("{prefix}{i}"))
        .count()
}

fn parse_layout(header: &[String]) -> Result<Layout> {
    let fixed = ["instance_id", "class_id", "level_id"];
    for (i, want) in fixed.iter().enumerate() {
        match header.get(i) {
            Some(name) if name == want => {}
            Some(name) => {
                return Err(Error::SchemaMismatch(format!(
                    "column {i} is `{name}`, expected `{want}`"
                )))
            }
            None => return Err(Error::SchemaMismatch(format!("missing column `{want}`"))),
        }
    }
    let mut pos = fixed.len();
    let dim_t = run_len(header, pos, "ft_");
    pos += dim_t;
    let dim_s = run_len(header, pos, "fs_");
    pos += dim_s;
    let lt = run_len(header, pos, "lt_");
    pos += lt;
    let ls = run_len(header, pos, "ls_");
    pos += ls;
    let ambiguous = header.get(pos).is_some_and(|n| n == "ambiguous");
    if ambiguous {
        pos += 1;
    }
    if let Some(extra) = header.get(pos) {
        return Err(Error::SchemaMismatch(format!(
            "unexpected column `{extra}` at position {pos}"
        )));
    }
    if dim_t == 0 || dim_s == 0 {
        return Err(Error::SchemaMismatch(
            "need at least one ft_ and one fs_ column".into(),
        ));
    }
    if lt != ls {
        return Err(Error::SchemaMismatch(format!(
            "{lt} teacher logit columns but {ls} student logit columns"
        )));
    }
    Ok(Layout {
        dim_t,
        dim_s,
        num_logits: lt,
        ambiguous,
    })
}

fn check_schema(layout: &Layout, schema: &CsvSchema) -> Result<()> {
    let mismatch = |what: &str, want: String, got: String| {
        Err(Error::SchemaMismatch(format!("{what}: expected {want}, found {got}")))
    };
    if let Some(d) = schema.dim_t.filter(|&d| d != layout.dim_t) {
        return mismatch("teacher dimension", d.to_string(), layout.dim_t.to_string());
    }
    if let Some(d) = schema.dim_s.filter(|&d| d != layout.dim_s) {
        return mismatch("student dimension", d.to_string(), layout.dim_s.to_string());
    }
    if let Some(l) = schema.logits.filter(|&l| l != (layout.num_logits > 0)) {
        return mismatch("logit columns", l.to_string(), (!l).to_string());
    }
    if let Some(a) = schema.ambiguous.filter(|&a| a != layout.ambiguous) {
        return mismatch("ambiguous column", a.to_string(), (!a).to_string());
    }
    Ok(())
}

pub fn import_csv_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<PairedFeatureSet> {
    let mut rdr = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(::csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let layout = parse_layout(&header)?;
    check_schema(&layout, schema)?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            row: line,
            column: String::new(),
            message: e.to_string(),
        })?;
        if row.len() != header.len() {
            return Err(Error::Parse {
                row: line,
                column: String::new(),
                message: format!("{} fields, header has {}", row.len(), header.len()),
            });
        }
        let err = |col: usize, message: String| Error::Parse {
            row: line,
            column: header[col].clone(),
            message,
        };
        let int = |col: usize| -> Result<u64> {
            row[col]
                .parse::<u64>()
                .map_err(|e| err(col, format!("`{}`: {e}", &row[col])))
        };
        let small = |col: usize| -> Result<u32> {
            u32::try_from(int(col)?).map_err(|_| err(col, format!("`{}` exceeds u32", &row[col])))
        };
        let floats = |start: usize, n: usize| -> Result<Vec<f64>> {
            (start..start + n)
                .map(|col| {
                    let v: f64 = row[col]
                        .parse()
                        .map_err(|e| err(col, format!("`{}`: {e}", &row[col])))?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(err(col, format!("non-finite value `{}`", &row[col])))
                    }
                })
                .collect()
        };

        let mut col = 3;
        let f_t = floats(col, layout.dim_t)?;
        col += layout.dim_t;
        let f_s = floats(col, layout.dim_s)?;
        col += layout.dim_s;
        let mut record = FeatureRecord::new(int(0)?, GroupKey::new(small(1)?, small(2)?), f_t, f_s);
        if layout.num_logits > 0 {
            let lt = floats(col, layout.num_logits)?;
            col += layout.num_logits;
            let ls = floats(col, layout.num_logits)?;
            col += layout.num_logits;
            record = record.with_logits(lt, ls);
        }
        if layout.ambiguous {
            record.ambiguous = Some(match row[col].to_ascii_lowercase().as_str() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(err(col, format!("`{other}` is not a boolean"))),
            });
        }
        records.push(record);
    }

    let set = PairedFeatureSet::new(layout.dim_t, layout.dim_s, records);
    let report = crate::feature_model::validate(&set);
    if let Some(v) = report.violations.first() {
        return Err(match v.record {
            Some(i) => Error::Parse {
                row: i + 2,
                column: String::new(),
                message: v.reason.clone(),
            },
            None => Error::Invalid(report),
        });
    }
    Ok(set)
}

pub fn import_csv(path: &Path, schema: &CsvSchema) -> Result<PairedFeatureSet> {
    import_csv_reader(File::open(path)?, schema)
}

pub fn csv_header(dim_t: usize, dim_s: usize, num_logits: usize, ambiguous: bool) -> Vec<String> {
    let mut h: Vec<String> = ["instance_id", "class_id", "level_id"]
        .map(String::from)
        .to_vec();
    h.extend((0..dim_t).map(|i| format!("ft_{i}")));
    h.extend((0..dim_s).map(|i| format!("fs_{i}")));
    h.extend((0..num_logits).map(|i| format!("lt_{i}")));
    h.extend((0..num_logits).map(|i| format!("ls_{i}")));
    if ambiguous {
        h.push("ambiguous".into());
    }
    h
}

/// Writes a valid set. Floats use the shortest representation that parses
/// back to the same value.
pub fn export_csv_writer<W: Write>(set: &PairedFeatureSet, writer: W) -> Result<()> {
    set.ensure_valid()?;
    let num_logits = set.num_logits().unwrap_or(0);
    let ambiguous = set.has_ambiguous_flags();
    let mut w = ::csv::Writer::from_writer(writer);
    w.write_record(csv_header(set.dim_t, set.dim_s, num_logits, ambiguous))?;
    for r in &set.records {
        let mut row = vec![
            r.instance_id.to_string(),
            r.group.class_id.to_string(),
            r.group.level_id.to_string(),
        ];
        let empty = Vec::new();
        for v in r
            .f_t
            .iter()
            .chain(&r.f_s)
            .chain(r.logits_t.as_ref().unwrap_or(&empty))
            .chain(r.logits_s.as_ref().unwrap_or(&empty))
        {
            row.push(format!("{v:?}"));
        }
        if ambiguous {
            row.push(u8::from(r.ambiguous == Some(true)).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(path: &Path, set: &PairedFeatureSet) -> Result<()> {
    export_csv_writer(set, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_ROWS: &str = "instance_id,class_id,level_id,ft_0,ft_1,fs_0\n\
                            1,0,0,0.5,1.5,2\n\
                            2,1,0,-1,0,3e-2\n";

    #[test]
    fn two_rows() {
        let set = import_csv_reader(TWO_ROWS.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!((set.dim_t, set.dim_s, set.len()), (2, 1, 2));
        assert_eq!(set.records[1].f_s, vec![0.03]);
        assert_eq!(set.records[1].group, GroupKey::new(1, 0));
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let text = TWO_ROWS.replace("-1,0,3e-2", "-1,abc,3e-2");
        match import_csv_reader(text.as_bytes(), &CsvSchema::default()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "ft_1");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors() {
        let bad_header = "id,class_id,level_id,ft_0,fs_0\n1,0,0,1,1\n";
        assert!(matches!(
            import_csv_reader(bad_header.as_bytes(), &CsvSchema::default()),
            Err(Error::SchemaMismatch(_))
        ));
        let gap = "instance_id,class_id,level_id,ft_0,ft_2,fs_0\n1,0,0,1,1,1\n";
        assert!(matches!(
            import_csv_reader(gap.as_bytes(), &CsvSchema::default()),
            Err(Error::SchemaMismatch(_))
        ));
        let schema = CsvSchema {
            dim_t: Some(3),
            ..CsvSchema::default()
        };
        assert!(matches!(
            import_csv_reader(TWO_ROWS.as_bytes(), &schema),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn duplicate_id_reported_with_row() {
        let text = TWO_ROWS.replace("2,1,0", "1,1,0");
        assert!(matches!(
            import_csv_reader(text.as_bytes(), &CsvSchema::default()),
            Err(Error::Parse { row: 3, .. })
        ));
    }

    #[test]
    fn export_then_import() {
        let mut set = import_csv_reader(TWO_ROWS.as_bytes(), &CsvSchema::default()).unwrap();
        for (i, r) in set.records.iter_mut().enumerate() {
            r.logits_t = Some(vec![0.1 * i as f64, 1.0 / 3.0]);
            r.logits_s = Some(vec![f64::MIN_POSITIVE, -2.5]);
            r.ambiguous = Some(i == 0);
        }
        let mut buf = Vec::new();
        export_csv_writer(&set, &mut buf).unwrap();
        let back = import_csv_reader(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back, set);
    }
}
