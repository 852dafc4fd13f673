//! Dataset manifest: a UTF-8 CSV of `path,label,split` preceded by
//! `#classes=a;b;c` and `#norm=mean0,...|std0,...` header lines.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

/// Per-channel normalization applied at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Norm {
    pub fn identity(channels: usize) -> Self {
        Norm {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Normalizes a channel-major buffer in place.
    pub fn apply(&self, data: &mut [f64]) {
        let per = data.len() / self.mean.len();
        for (ch, chunk) in data.chunks_mut(per).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub norm: Norm,
    pub items: Vec<Item>,
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].split == split)
            .collect()
    }

    /// Item indices of `split`, grouped by class, in canonical order.
    pub fn by_class(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes.len()];
        for (i, it) in self.items.iter().enumerate() {
            if it.split == split {
                out[it.label].push(i);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::config("a manifest needs at least 2 classes"));
        }
        if self.norm.mean.len() != self.norm.std.len() || self.norm.mean.is_empty() {
            return Err(Error::config("norm mean/std lengths differ"));
        }
        if self.norm.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("norm std must be > 0"));
        }
        for (i, it) in self.items.iter().enumerate() {
            if it.label >= self.classes.len() {
                return Err(Error::Parse {
                    line: i + 4,
                    msg: format!("label {} out of range", it.label),
                });
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "#classes={}", self.classes.join(";"));
        let _ = writeln!(s, "#norm={}|{}", join(&self.norm.mean), join(&self.norm.std));
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(["path", "label", "split"]).unwrap();
        for it in &self.items {
            w.write_record([it.path.as_str(), &it.label.to_string(), it.split.name()])
                .unwrap();
        }
        s.push_str(&String::from_utf8(w.into_inner().unwrap()).unwrap());
        s
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n');
        let mut classes = None;
        let mut norm = None;
        let mut consumed = 0;
        let mut body_start = 0;
        for line in lines.by_ref() {
            let trimmed = line.trim_end();
            let Some(header) = trimmed.strip_prefix('#') else {
                break;
            };
            consumed += 1;
            body_start += line.len();
            if let Some(v) = header.strip_prefix("classes=") {
                classes = Some(v.split(';').map(str::to_string).collect::<Vec<_>>());
            } else if let Some(v) = header.strip_prefix("norm=") {
                norm = Some(parse_norm(v).ok_or_else(|| Error::Parse {
                    line: consumed,
                    msg: format!("malformed norm header '{v}'"),
                })?);
            }
        }
        let classes = classes.ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing #classes= header".into(),
        })?;
        let norm = norm.ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing #norm= header".into(),
        })?;

        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text[body_start..].as_bytes());
        let headers = rdr.headers().map_err(|e| Error::Parse {
            line: consumed + 1,
            msg: e.to_string(),
        })?;
        if headers != vec!["path", "label", "split"] {
            return Err(Error::Parse {
                line: consumed + 1,
                msg: format!("expected header path,label,split, got {headers:?}"),
            });
        }
        let mut items = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: consumed + e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = consumed + rec.position().map_or(0, |p| p.line() as usize);
            let bad = |msg: String| Error::Parse { line, msg };
            if rec.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", rec.len())));
            }
            let label = rec[1]
                .parse()
                .map_err(|_| bad(format!("bad label '{}'", &rec[1])))?;
            let split = Split::parse(&rec[2]).ok_or_else(|| bad(format!("bad split '{}'", &rec[2])))?;
            if label >= classes.len() {
                return Err(bad(format!("label {label} out of range for {} classes", classes.len())));
            }
            items.push(Item {
                path: rec[0].to_string(),
                label,
                split,
            });
        }
        let m = DatasetManifest {
            name: name.to_string(),
            classes,
            norm,
            items,
        };
        m.validate()?;
        Ok(m)
    }

    /// Reads `<dir>/manifest.csv`; the dataset is named after `dir`.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Self::parse(&text, &name)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))
    }
}

fn parse_norm(v: &str) -> Option<Norm> {
    let (m, s) = v.split_once('|')?;
    let parse = |t: &str| -> Option<Vec<f64>> { t.split(',').map(|x| x.trim().parse().ok()).collect() };
    Some(Norm {
        mean: parse(m)?,
        std: parse(s)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetManifest {
        DatasetManifest {
            name: "t".into(),
            classes: vec!["a".into(), "b".into()],
            norm: Norm {
                mean: vec![0.5, 0.25],
                std: vec![0.1, 0.2],
            },
            items: vec![
                Item {
                    path: "images/0.cyt".into(),
                    label: 0,
                    split: Split::Train,
                },
                Item {
                    path: "images/1.cyt".into(),
                    label: 1,
                    split: Split::Val,
                },
                Item {
                    path: "images/2.cyt".into(),
                    label: 1,
                    split: Split::Test,
                },
            ],
        }
    }

    #[test]
    fn render_format() {
        let text = small().render();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("#classes=a;b"));
        assert_eq!(lines.next(), Some("#norm=0.5,0.25|0.1,0.2"));
        assert_eq!(lines.next(), Some("path,label,split"));
        assert_eq!(lines.next(), Some("images/0.cyt,0,train"));
        assert_eq!(DatasetManifest::parse(&text, "t").unwrap(), small());
    }

    #[test]
    fn bad_rows_name_the_line() {
        let text = small().render().replace("images/1.cyt,1,val", "images/1.cyt,7,val");
        match DatasetManifest::parse(&text, "t") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let text = small().render().replace(",test", ",holdout");
        assert!(matches!(
            DatasetManifest::parse(&text, "t"),
            Err(Error::Parse { line: 6, .. })
        ));
        assert!(DatasetManifest::parse("path,label,split\n", "t").is_err());
    }

    #[test]
    fn norm_applies_per_channel() {
        let n = Norm {
            mean: vec![1.0, 0.0],
            std: vec![2.0, 0.5],
        };
        let mut d = vec![3.0, 1.0, 1.0, 2.0];
        n.apply(&mut d);
        assert_eq!(d, vec![1.0, 0.0, 2.0, 4.0]);
    }
}
