//! Dataset TSV ingestion and the stratified train/dev split.
//!
//! Labeled files have the header `id<TAB>text<TAB>misogyny<TAB>category`;
//! unlabeled files carry only `id<TAB>text`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Category, Misogyny};
use crate::tensor::SeededRng;

pub const LABELED_HEADER: [&str; 4] = ["id", "text", "misogyny", "category"];
pub const UNLABELED_HEADER: [&str; 2] = ["id", "text"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub text: String,
    pub task1_label: Option<Misogyny>,
    pub task2_label: Option<Category>,
}

impl RawExample {
    /// A misogynistic tweet labeled `None` for the category, or the reverse.
    pub fn labels_disagree(&self) -> bool {
        match (self.task1_label, self.task2_label) {
            (Some(m), Some(c)) => (m == Misogyny::None) != (c == Category::None),
            _ => false,
        }
    }
}

/// Ids of rows whose two labels contradict each other. Such rows are kept.
pub fn label_inconsistencies(examples: &[RawExample]) -> Vec<&str> {
    examples
        .iter()
        .filter(|e| e.labels_disagree())
        .map(|e| e.id.as_str())
        .collect()
}

pub fn load_tsv(path: &Path) -> Result<Vec<RawExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, path)
}

pub fn parse_tsv(text: &str, path: &Path) -> Result<Vec<RawExample>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = match lines.next() {
        Some((_, h)) => h.trim_start_matches('\u{FEFF}').split('\t').collect(),
        None => return Err(parse_err(1, "empty file, expected a header row".into())),
    };
    let labeled = if header == LABELED_HEADER {
        true
    } else if header == UNLABELED_HEADER {
        false
    } else {
        return Err(parse_err(
            1,
            format!(
                "header must be {:?} or {:?}, got {header:?}",
                LABELED_HEADER.join("\t"),
                UNLABELED_HEADER.join("\t")
            ),
        ));
    };
    let width = header.len();

    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != width {
            return Err(parse_err(
                line_no,
                format!("expected {width} tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(parse_err(line_no, "empty id".into()));
        }
        let (task1_label, task2_label) = if labeled {
            let m = fields[2]
                .parse::<Misogyny>()
                .map_err(|e| parse_err(line_no, e.to_string()))?;
            let c = fields[3]
                .parse::<Category>()
                .map_err(|e| parse_err(line_no, e.to_string()))?;
            (Some(m), Some(c))
        } else {
            (None, None)
        };
        let ex = RawExample {
            id: fields[0].to_string(),
            text: fields[1].to_string(),
            task1_label,
            task2_label,
        };
        if ex.labels_disagree() {
            log::warn!(
                "{}:{line_no}: row {:?} is labeled {:?} for misogyny but {:?} for category",
                path.display(),
                ex.id,
                ex.task1_label.unwrap(),
                ex.task2_label.unwrap()
            );
        }
        out.push(ex);
    }
    Ok(out)
}

/// Writes labeled examples in the dataset TSV layout.
pub fn write_tsv(path: &Path, examples: &[RawExample]) -> Result<()> {
    let mut out = LABELED_HEADER.join("\t");
    out.push('\n');
    for e in examples {
        let (Some(m), Some(c)) = (e.task1_label, e.task2_label) else {
            return Err(Error::Data(format!("example {:?} lacks labels", e.id)));
        };
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, e.text, m.name(), c.name()));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn stratum_key(e: &RawExample) -> usize {
    match (e.task2_label, e.task1_label) {
        (Some(c), _) => c.index(),
        (None, Some(m)) => 100 + m.index(),
        (None, None) => 200,
    }
}

/// Stratified split by category label.
///
/// The train side gets `floor(fraction · N)` examples. Each stratum first
/// receives `floor(fraction · n_s)`, a stratum of one example always goes to
/// train, and any shortfall is handed out one at a time to the strata with the
/// largest fractional remainders (ties to the lower label index). Both halves
/// keep the input order.
pub fn split_train_dev(
    examples: &[RawExample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<RawExample>, Vec<RawExample>)> {
    if examples.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("split fraction must be in (0, 1], got {fraction}")));
    }

    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        strata.entry(stratum_key(e)).or_default().push(i);
    }

    let target = (fraction * examples.len() as f64).floor() as usize;
    let mut quota: Vec<(usize, f64, usize)> = Vec::new(); // (train count, remainder, size)
    for members in strata.values() {
        let ideal = fraction * members.len() as f64;
        let mut take = ideal.floor() as usize;
        if members.len() == 1 {
            take = 1;
        }
        quota.push((take, ideal - ideal.floor(), members.len()));
    }
    let assigned: usize = quota.iter().map(|q| q.0).sum();
    if assigned < target {
        let mut order: Vec<usize> = (0..quota.len()).collect();
        order.sort_by(|&a, &b| quota[b].1.total_cmp(&quota[a].1).then(a.cmp(&b)));
        let mut missing = target - assigned;
        while missing > 0 {
            let before = missing;
            for &s in &order {
                if missing == 0 {
                    break;
                }
                if quota[s].0 < quota[s].2 {
                    quota[s].0 += 1;
                    missing -= 1;
                }
            }
            if missing == before {
                break;
            }
        }
    }

    let rng = SeededRng::new(seed);
    let mut in_train = vec![false; examples.len()];
    for ((key, members), (take, _, _)) in strata.iter().zip(&quota) {
        let mut members = members.clone();
        rng.fork(*key as u64 + 1).shuffle(&mut members);
        for &i in &members[..*take] {
            in_train[i] = true;
        }
    }

    let mut train = Vec::with_capacity(target);
    let mut dev = Vec::with_capacity(examples.len() - target);
    for (e, t) in examples.iter().zip(in_train) {
        if t {
            train.push(e.clone());
        } else {
            dev.push(e.clone());
        }
    }
    Ok((train, dev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(id: usize, c: Category) -> RawExample {
        RawExample {
            id: format!("t{id}"),
            text: "x".into(),
            task1_label: Some(Misogyny::from_flag(c != Category::None)),
            task2_label: Some(c),
        }
    }

    #[test]
    fn parses_fixture_rows() {
        let src = "id\ttext\tmisogyny\tcategory\n\
                   1\t@a مرحبا\tnone\tNone\n\
                   2\tعيب 😂\tmisogyny\tDamning\n\
                   3\t#وسم_ما\tmisogyny\tSexual harassment\n";
        let rows = parse_tsv(src, Path::new("f.tsv")).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].task2_label, Some(Category::Damning));
        assert_eq!(rows[2].task1_label, Some(Misogyny::Misogyny));
        assert_eq!(rows[0].text, "@a مرحبا");
    }

    #[test]
    fn unknown_category_names_the_row() {
        let src = "id\ttext\tmisogyny\tcategory\n1\tx\tnone\tNone\n2\ty\tmisogyny\tSarcasm\n";
        let err = parse_tsv(src, Path::new("f.tsv")).unwrap_err().to_string();
        assert!(err.contains("f.tsv:3"), "{err}");
        assert!(err.contains("Sarcasm"), "{err}");
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let src = "id\ttext\tmisogyny\tcategory\n1\tx\tnone\n";
        let err = parse_tsv(src, Path::new("f.tsv")).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(parse_tsv("", Path::new("f.tsv")).is_err());
        assert!(parse_tsv("a\tb\n", Path::new("f.tsv")).is_err());
    }

    #[test]
    fn unlabeled_files_parse() {
        let rows = parse_tsv("id\ttext\n7\thello\n", Path::new("u.tsv")).unwrap();
        assert_eq!(rows[0].task1_label, None);
        assert_eq!(rows[0].task2_label, None);
    }

    #[test]
    fn inconsistent_rows_are_reported_not_repaired() {
        let src = "id\ttext\tmisogyny\tcategory\n1\tx\tnone\tDamning\n2\ty\tmisogyny\tDamning\n";
        let rows = parse_tsv(src, Path::new("f.tsv")).unwrap();
        assert_eq!(label_inconsistencies(&rows), vec!["1"]);
        assert_eq!(rows[0].task2_label, Some(Category::Damning));
    }

    #[test]
    fn full_release_sized_split() {
        // Any stratification of 7866 examples must give floor(0.9·7866) = 7079.
        let counts = [3061, 669, 105, 2868, 219, 61, 652, 231];
        assert_eq!(counts.iter().sum::<usize>(), 7866);
        let mut data = Vec::new();
        for (c, &n) in Category::ALL.iter().zip(&counts) {
            for _ in 0..n {
                data.push(ex(data.len(), *c));
            }
        }
        let (train, dev) = split_train_dev(&data, 0.9, 1).unwrap();
        assert_eq!(train.len(), 7079);
        assert_eq!(dev.len(), 787);
    }

    #[test]
    fn ten_examples_two_classes() {
        let data: Vec<_> = (0..10)
            .map(|i| ex(i, if i % 2 == 0 { Category::None } else { Category::Damning }))
            .collect();
        let (train, dev) = split_train_dev(&data, 0.9, 3).unwrap();
        assert_eq!((train.len(), dev.len()), (9, 1));
        assert_eq!(split_train_dev(&data, 0.9, 3).unwrap(), (train, dev));
    }

    #[test]
    fn singleton_stratum_goes_to_train() {
        let mut data: Vec<_> = (0..9).map(|i| ex(i, Category::None)).collect();
        data.push(ex(9, Category::Derailing));
        let (train, _) = split_train_dev(&data, 0.9, 0).unwrap();
        assert!(train.iter().any(|e| e.task2_label == Some(Category::Derailing)));
        assert!(split_train_dev(&[], 0.9, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(labels in prop::collection::vec(0usize..8, 1..120), seed in 0u64..50) {
            let data: Vec<_> = labels
                .iter()
                .enumerate()
                .map(|(i, &c)| ex(i, Category::ALL[c]))
                .collect();
            let (train, dev) = split_train_dev(&data, 0.9, seed).unwrap();
            let mut ids: Vec<&str> = train.iter().chain(&dev).map(|e| e.id.as_str()).collect();
            ids.sort_unstable();
            let mut want: Vec<&str> = data.iter().map(|e| e.id.as_str()).collect();
            want.sort_unstable();
            prop_assert_eq!(ids, want);
            let target = (0.9 * data.len() as f64).floor() as usize;
            prop_assert!(train.len() >= target);
        }
    }
}
