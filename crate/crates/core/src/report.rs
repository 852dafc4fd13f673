//! Results CSV and the reports built from it.
//!
//! Reports are pure functions of the CSV: a table of `mean±std` cells
//! (rows are datasets, columns `mode@k`) and `x,mean,std` series. Both show
//! accuracies in percent with two decimals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::{aggregate, Aggregate, ResultRow};

pub const RESULTS_HEADER: [&str; 8] = [
    "mode",
    "dataset",
    "k_or_fraction",
    "lr",
    "seed",
    "test_top1",
    "params_trainable",
    "wall_ms",
];

fn parse_x(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if headers.iter().ne(RESULTS_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", RESULTS_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |field: &str, v: &str| Error::Parse {
            line,
            msg: format!("bad {field} '{v}'"),
        };
        if rec.len() != RESULTS_HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, got {}", RESULTS_HEADER.len(), rec.len()),
            });
        }
        if parse_x(&rec[2]).is_none() {
            return Err(bad("k_or_fraction", &rec[2]));
        }
        let acc: f64 = rec[5].parse().map_err(|_| bad("test_top1", &rec[5]))?;
        if !(0.0..=1.0).contains(&acc) {
            return Err(bad("test_top1", &rec[5]));
        }
        rows.push(ResultRow {
            mode: rec[0].to_string(),
            dataset: rec[1].to_string(),
            k_or_fraction: rec[2].to_string(),
            lr: rec[3].parse().map_err(|_| bad("lr", &rec[3]))?,
            seed: rec[4].parse().map_err(|_| bad("seed", &rec[4]))?,
            test_top1: acc,
            params_trainable: rec[6].parse().map_err(|_| bad("params_trainable", &rec[6]))?,
            wall_ms: rec[7].parse().map_err(|_| bad("wall_ms", &rec[7]))?,
        });
    }
    Ok(rows)
}

pub fn render_results(rows: &[ResultRow]) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.mode.clone(),
            r.dataset.clone(),
            r.k_or_fraction.clone(),
            r.lr.to_string(),
            r.seed.to_string(),
            r.test_top1.to_string(),
            r.params_trainable.to_string(),
            r.wall_ms.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text)
}

fn x_of(r: &ResultRow) -> f64 {
    parse_x(&r.k_or_fraction).unwrap_or(f64::NAN)
}

fn canonical_order(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (&a.mode, &a.dataset)
            .cmp(&(&b.mode, &b.dataset))
            .then(x_of(a).total_cmp(&x_of(b)))
            .then(a.seed.cmp(&b.seed))
    });
}

/// Merges `new` into the CSV at `path`. A row replaces any existing row with
/// the same `(mode, dataset, k_or_fraction, seed)`, so reruns never
/// duplicate; the file is rewritten in canonical order.
pub fn upsert_results(path: &Path, new: &[ResultRow]) -> Result<()> {
    let mut rows = if path.exists() {
        read_results(path)?
    } else {
        Vec::new()
    };
    let key = |r: &ResultRow| (r.mode.clone(), r.dataset.clone(), r.k_or_fraction.clone(), r.seed);
    let replaced: BTreeSet<_> = new.iter().map(key).collect();
    rows.retain(|r| !replaced.contains(&key(r)));
    rows.extend(new.iter().cloned());
    canonical_order(&mut rows);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, render_results(&rows)).map_err(|e| Error::io(path, e))
}

/// `(mode, dataset, x)` groups in canonical order.
fn groups(rows: &[ResultRow]) -> Result<Vec<((String, String, String), Aggregate)>> {
    let mut sorted = rows.to_vec();
    canonical_order(&mut sorted);
    let mut map: Vec<((String, String, String), Vec<f64>)> = Vec::new();
    for r in &sorted {
        let k = (r.mode.clone(), r.dataset.clone(), r.k_or_fraction.clone());
        match map.last_mut() {
            Some((last, v)) if *last == k => v.push(r.test_top1),
            _ => map.push((k, vec![r.test_top1])),
        }
    }
    map.into_iter()
        .map(|(k, v)| Ok((k, aggregate(&v)?)))
        .collect()
}

/// Markdown table: one row per dataset, one column per `mode@k`. Cells built
/// from a single seed are marked `(n=1)`.
pub fn table(rows: &[ResultRow]) -> Result<String> {
    let groups = groups(rows)?;
    let mut columns: Vec<(String, f64, String)> = Vec::new();
    let mut cells: BTreeMap<(String, String), String> = BTreeMap::new();
    let mut datasets = BTreeSet::new();
    for ((mode, dataset, x), agg) in &groups {
        let col = format!("{mode}@{x}");
        if !columns.iter().any(|c| c.2 == col) {
            columns.push((mode.clone(), parse_x(x).unwrap_or(f64::NAN), col.clone()));
        }
        datasets.insert(dataset.clone());
        let mut cell = agg.percent();
        if agg.single_seed() {
            cell.push_str(" (n=1)");
        }
        cells.insert((dataset.clone(), col), cell);
    }
    columns.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut out = String::new();
    if columns.is_empty() {
        return Ok(out);
    }
    let _ = write!(out, "| dataset |");
    for c in &columns {
        let _ = write!(out, " {} |", c.2);
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in &columns {
        out.push_str("---|");
    }
    out.push('\n');
    for d in &datasets {
        let _ = write!(out, "| {d} |");
        for c in &columns {
            let cell = cells.get(&(d.clone(), c.2.clone())).map_or("-", String::as_str);
            let _ = write!(out, " {cell} |");
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct SeriesQuery {
    pub mode: Option<String>,
    pub dataset: Option<String>,
    /// Adds a final `reference,mean,std` row from this mode's largest x.
    pub reference_mode: Option<String>,
}

fn only_one(values: BTreeSet<String>, what: &str) -> Result<String> {
    match values.len() {
        1 => Ok(values.into_iter().next().unwrap()),
        _ => Err(Error::config(format!(
            "series needs exactly one {what}; candidates: {}",
            values.into_iter().collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// `x,mean,std` for one `(mode, dataset)`, ordered by x with one row per x.
pub fn series(rows: &[ResultRow], q: &SeriesQuery) -> Result<String> {
    if rows.is_empty() {
        return Ok(String::new());
    }
    let filtered: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| q.mode.as_ref().is_none_or(|m| *m == r.mode))
        .filter(|r| q.dataset.as_ref().is_none_or(|d| *d == r.dataset))
        .collect();
    let mode = only_one(filtered.iter().map(|r| r.mode.clone()).collect(), "mode")?;
    let dataset = only_one(filtered.iter().map(|r| r.dataset.clone()).collect(), "dataset")?;
    let mut out = String::from("x,mean,std\n");
    let gs = groups(rows)?;
    for ((m, d, x), agg) in &gs {
        if *m == mode && *d == dataset {
            let _ = writeln!(out, "{x},{:.2},{:.2}", 100.0 * agg.mean, 100.0 * agg.std);
        }
    }
    if let Some(rm) = &q.reference_mode {
        let reference = gs
            .iter()
            .filter(|((m, d, _), _)| m == rm && *d == dataset)
            .last()
            .ok_or_else(|| Error::config(format!("no rows for reference mode '{rm}'")))?;
        let agg = reference.1;
        let _ = writeln!(out, "reference,{:.2},{:.2}", 100.0 * agg.mean, 100.0 * agg.std);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: &str, x: &str, seed: u64, acc: f64) -> ResultRow {
        ResultRow {
            mode: mode.into(),
            dataset: "target".into(),
            k_or_fraction: x.into(),
            lr: 1e-3,
            seed,
            test_top1: acc,
            params_trainable: 160,
            wall_ms: 0,
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let rows = vec![row("lora", "4", 0, 0.5), row("lora", "0.05", 1, 0.25)];
        let text = render_results(&rows);
        assert!(text.starts_with("mode,dataset,k_or_fraction,lr,seed,test_top1,params_trainable,wall_ms\n"));
        assert_eq!(parse_results(&text).unwrap(), rows);
        assert!(parse_results("").unwrap().is_empty());
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = render_results(&[row("lora", "4", 0, 0.5), row("lora", "8", 0, 0.5)]);
        let broken = text.replace("lora,target,8,0.001,0,0.5", "lora,target,8,0.001,zero,0.5");
        match parse_results(&broken) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_results("a,b\n1,2\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn three_seeds_make_one_cell() {
        let rows: Vec<_> = [0.9, 0.95, 1.0]
            .iter()
            .enumerate()
            .map(|(s, &a)| row("lora", "4", s as u64, a))
            .collect();
        let t = table(&rows).unwrap();
        assert!(t.contains("| target | 95.00±5.00 |"), "{t}");
        assert_eq!(t.lines().count(), 3);
        assert!(table(&rows[..1]).unwrap().contains("(n=1)"));
    }

    #[test]
    fn shot_series_is_ordered() {
        let mut rows = Vec::new();
        for k in ["50", "1", "16", "2", "8", "4"] {
            rows.push(row("lora", k, 0, 0.5));
            rows.push(row("lora", k, 1, 0.7));
        }
        rows.push(row("linear_probe", "50", 0, 0.4));
        let q = SeriesQuery {
            mode: Some("lora".into()),
            reference_mode: Some("linear_probe".into()),
            ..Default::default()
        };
        let s = series(&rows, &q).unwrap();
        let xs: Vec<&str> = s.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(xs, ["1", "2", "4", "8", "16", "50", "reference"]);
        assert!(s.contains("\n4,60.00,14.14\n"), "{s}");
        assert!(s.ends_with("reference,40.00,0.00\n"));
        assert!(series(&rows, &SeriesQuery::default()).is_err());
    }

    #[test]
    fn upsert_replaces_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        upsert_results(&p, &[row("lora", "4", 0, 0.5), row("lora", "4", 1, 0.6)]).unwrap();
        let mut again = row("lora", "4", 0, 0.8);
        again.lr = 5e-3;
        upsert_results(&p, &[again.clone()]).unwrap();
        let rows = read_results(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], again);
    }
}
