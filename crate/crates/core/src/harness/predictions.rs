//! Prediction files: `id, misogyny, category, task1_logit, task2_logits`
//! per row, with the category logits comma-joined. Columns of a task the
//! model does not cover are empty.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::data::{batched_logits, prepare};
use crate::error::{Error, Result};
use crate::metrics::ensemble_logits;
use crate::models::{predict, Category, Misogyny, TaskLogits, NUM_CATEGORIES};
use crate::text::load_tsv;

pub const PREDICTION_HEADER: [&str; 5] = ["id", "misogyny", "category", "task1_logit", "task2_logits"];

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub ids: Vec<String>,
    pub logits: TaskLogits,
}

impl PredictionFile {
    /// Renders the file; labels are derived from the logits with the
    /// standard prediction rule.
    pub fn render(&self) -> Result<String> {
        let preds = predict(&self.logits, 0.5)?;
        if self.logits.len() != self.ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} rows of logits",
                self.ids.len(),
                self.logits.len()
            )));
        }
        let mut out = PREDICTION_HEADER.join("\t");
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            let m = preds.task1.as_ref().map_or("", |p| p[i].name());
            let c = preds.task2.as_ref().map_or("", |p| p[i].name());
            let z1 = self.logits.task1.as_ref().map_or(String::new(), |z| z[i].to_string());
            let z2 = self.logits.task2.as_ref().map_or(String::new(), |z| {
                z[i].iter().map(f64::to_string).collect::<Vec<_>>().join(",")
            });
            let _ = writeln!(out, "{id}\t{m}\t{c}\t{z1}\t{z2}");
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()?).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.split('\t').eq(PREDICTION_HEADER) => {}
            _ => return Err(err(1, format!("header must be {:?}", PREDICTION_HEADER.join("\t")))),
        }
        let mut ids = Vec::new();
        let mut task1: Vec<Option<f64>> = Vec::new();
        let mut task2: Vec<Option<Vec<f64>>> = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(n, format!("expected 5 tab-separated fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(n, format!("invalid logit {s:?}")));
            let z1 = if f[3].is_empty() { None } else { Some(num(f[3])?) };
            let z2 = if f[4].is_empty() {
                None
            } else {
                let row = f[4].split(',').map(num).collect::<Result<Vec<_>>>()?;
                if row.len() != NUM_CATEGORIES {
                    return Err(err(n, format!("expected {NUM_CATEGORIES} category logits, found {}", row.len())));
                }
                Some(row)
            };
            // Label columns must agree with the logits they were derived from.
            if let (Some(z), false) = (z1, f[1].is_empty()) {
                let m: Misogyny = f[1].parse().map_err(|e: Error| err(n, e.to_string()))?;
                let want = predict(&TaskLogits { task1: Some(vec![z]), task2: None }, 0.5)?.task1.unwrap()[0];
                if m != want {
                    return Err(err(n, format!("label {:?} disagrees with logit {z}", f[1])));
                }
            }
            if let (Some(z), false) = (&z2, f[2].is_empty()) {
                let c: Category = f[2].parse().map_err(|e: Error| err(n, e.to_string()))?;
                let want = predict(&TaskLogits { task1: None, task2: Some(vec![z.clone()]) }, 0.5)?.task2.unwrap()[0];
                if c != want {
                    return Err(err(n, format!("label {:?} disagrees with the category logits", f[2])));
                }
            }
            ids.push(f[0].to_string());
            task1.push(z1);
            task2.push(z2);
        }
        let column = |name: &str, present: usize, total: usize| -> Result<bool> {
            if present != 0 && present != total {
                return Err(Error::Data(format!("{}: {name} column is filled on some rows only", path.display())));
            }
            Ok(present == total && total > 0)
        };
        let has1 = column("task1_logit", task1.iter().flatten().count(), ids.len())?;
        let has2 = column("task2_logits", task2.iter().flatten().count(), ids.len())?;
        if ids.is_empty() {
            return Err(Error::Data(format!("{}: prediction file has no rows", path.display())));
        }
        let logits = TaskLogits {
            task1: has1.then(|| task1.into_iter().flatten().collect()),
            task2: has2.then(|| task2.into_iter().flatten().collect()),
        };
        logits.validate().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(Self { ids, logits })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Runs a checkpoint over a dataset TSV (labels, if any, are ignored).
pub fn predict_file(ckpt: &Checkpoint, input: &Path) -> Result<PredictionFile> {
    let rows = load_tsv(input)?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no examples to predict", input.display())));
    }
    let data = prepare(&rows, &ckpt.vocabulary, &ckpt.preprocessor, ckpt.model.spec().encoder.max_len, None)?;
    Ok(PredictionFile {
        ids: data.ids.clone(),
        logits: batched_logits(&ckpt.model, &data)?,
    })
}

/// Averages the logits of prediction files row by row.
pub fn ensemble_files(files: &[PredictionFile], names: &[PathBuf]) -> Result<PredictionFile> {
    let first = files
        .first()
        .ok_or_else(|| Error::InvalidArgument("no prediction files to ensemble".into()))?;
    let name = |i: usize| names.get(i).map_or_else(|| format!("file {i}"), |p| p.display().to_string());
    for (fi, f) in files.iter().enumerate().skip(1) {
        if let Some(pos) = (0..first.ids.len().max(f.ids.len())).find(|&r| first.ids.get(r) != f.ids.get(r)) {
            let id = f.ids.get(pos).or_else(|| first.ids.get(pos)).expect("one side has the row");
            return Err(Error::Data(format!(
                "{} diverges from {} at row {} (id {id:?})",
                name(fi),
                name(0),
                pos + 1
            )));
        }
        if f.logits.task1.is_some() != first.logits.task1.is_some() || f.logits.task2.is_some() != first.logits.task2.is_some() {
            return Err(Error::Data(format!("{} covers different tasks than {}", name(fi), name(0))));
        }
    }
    let members: Vec<TaskLogits> = files.iter().map(|f| f.logits.clone()).collect();
    let e = ensemble_logits(&members)?;
    Ok(PredictionFile {
        ids: first.ids.clone(),
        logits: e.logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file() -> PredictionFile {
        PredictionFile {
            ids: vec!["a".into(), "b".into(), "c".into()],
            logits: TaskLogits {
                task1: Some(vec![0.1, -2.5, 1e-17]),
                task2: Some(vec![
                    vec![0.3, -0.1, 0.0, 1.0 / 3.0, 0.0, 0.0, 0.0, 0.0],
                    vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                    vec![-1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 7.25],
                ]),
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let f = file();
        let text = f.render().unwrap();
        assert!(text.starts_with("id\tmisogyny\tcategory\ttask1_logit\ttask2_logits\n"));
        let back = PredictionFile::parse(&text, Path::new("p.tsv")).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.render().unwrap(), text);
        assert!(text.contains("\tDiscredit\t"));
        assert!(text.contains("\tThreat of violence\t"));
    }

    #[test]
    fn uncovered_task_columns_are_empty() {
        let f = PredictionFile {
            ids: vec!["x".into()],
            logits: TaskLogits { task1: Some(vec![0.0]), task2: None },
        };
        let text = f.render().unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "x\tmisogyny\t\t0\t");
        assert_eq!(PredictionFile::parse(&text, Path::new("p")).unwrap(), f);
    }

    #[test]
    fn three_copies_ensemble_to_the_same_file() {
        let f = file();
        let e = ensemble_files(&[f.clone(), f.clone(), f.clone()], &[]).unwrap();
        assert_eq!(e.render().unwrap(), f.render().unwrap());
    }

    #[test]
    fn averaged_tie_goes_to_none() {
        let mk = |k: usize| {
            let mut row = vec![0.0; 8];
            row[k] = 2.0;
            PredictionFile {
                ids: vec!["t".into()],
                logits: TaskLogits { task1: None, task2: Some(vec![row]) },
            }
        };
        let e = ensemble_files(&[mk(0), mk(1)], &[]).unwrap();
        assert_eq!(e.logits.task2.as_ref().unwrap()[0][..3], [1.0, 1.0, 0.0]);
        assert!(e.render().unwrap().contains("\tNone\t"));
    }

    #[test]
    fn id_mismatch_names_the_row() {
        let a = file();
        let mut b = file();
        b.ids[1] = "zz".into();
        let err = ensemble_files(&[a.clone(), b], &["a.tsv".into(), "b.tsv".into()]).unwrap_err().to_string();
        assert!(err.contains("\"zz\"") && err.contains("row 2") && err.contains("b.tsv"), "{err}");
        let mut short = file();
        short.ids.pop();
        short.logits.task1.as_mut().unwrap().pop();
        short.logits.task2.as_mut().unwrap().pop();
        let err = ensemble_files(&[a, short], &[]).unwrap_err().to_string();
        assert!(err.contains("\"c\""), "{err}");
    }

    #[test]
    fn malformed_files_are_rejected() {
        let p = Path::new("p.tsv");
        assert!(PredictionFile::parse("id\tx\n", p).is_err());
        let h = PREDICTION_HEADER.join("\t");
        assert!(PredictionFile::parse(&format!("{h}\n"), p).is_err());
        assert!(PredictionFile::parse(&format!("{h}\na\tnone\t\tabc\t\n"), p).is_err());
        assert!(PredictionFile::parse(&format!("{h}\na\tmisogyny\t\t-1\t\n"), p).is_err());
        assert!(PredictionFile::parse(&format!("{h}\na\t\tNone\t\t1,2\n"), p).is_err());
    }
}
