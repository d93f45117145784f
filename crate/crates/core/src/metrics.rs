//! Accuracy and macro-averaged precision, recall and F1, per-class
//! classification reports, and logit ensembling.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TaskLogits;
use crate::tensor::{sigmoid, softmax_slice};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub total: usize,
    pub classes: Vec<ClassRow>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores `preds` against `golds`, both label indices into `labels`.
///
/// Zero divisions give 0, and classes without gold support are left out of
/// the macro averages (they still get a report row).
pub fn evaluate(preds: &[usize], golds: &[usize], labels: &[String]) -> Result<MetricsReport> {
    if preds.len() != golds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let k = labels.len();
    if let Some(&bad) = preds.iter().chain(golds).find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside a space of {k} labels")));
    }

    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut support = vec![0usize; k];
    for (&p, &g) in preds.iter().zip(golds) {
        predicted[p] += 1;
        support[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }

    let classes: Vec<ClassRow> = (0..k)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassRow {
                label: labels[c].clone(),
                precision,
                recall,
                f1,
                support: support[c],
            }
        })
        .collect();

    let present: Vec<&ClassRow> = classes.iter().filter(|r| r.support > 0).collect();
    let macro_of = |f: fn(&ClassRow) -> f64| present.iter().map(|r| f(r)).sum::<f64>() / present.len() as f64;
    Ok(MetricsReport {
        accuracy: ratio(tp.iter().sum(), golds.len()),
        macro_precision: macro_of(|r| r.precision),
        macro_recall: macro_of(|r| r.recall),
        macro_f1: macro_of(|r| r.f1),
        total: golds.len(),
        classes,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid metrics report: {e}")))
    }

    /// Aligned per-class table with four-decimal scores.
    pub fn to_text(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|r| r.label.chars().count())
            .chain([9])
            .max()
            .unwrap_or(9);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}", "", "Precision", "Recall", "F1", "Support");
        for r in &self.classes {
            let pad = width - r.label.chars().count();
            let _ = writeln!(
                out,
                "{}{}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                r.label,
                " ".repeat(pad),
                r.precision,
                r.recall,
                r.f1,
                r.support
            );
        }
        out.push('\n');
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>9.4}  {:>7}", "accuracy", "", "", self.accuracy, self.total);
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
            "macro avg", self.macro_precision, self.macro_recall, self.macro_f1, self.total
        );
        out
    }
}

/// Mean logits of several models and the probabilities derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub logits: TaskLogits,
    pub task1_probs: Option<Vec<f64>>,
    pub task2_probs: Option<Vec<Vec<f64>>>,
}

/// Running mean `m += (x − m) / k`, exact when every member is equal.
fn running_mean(acc: &mut [f64], x: &[f64], k: usize) {
    for (m, v) in acc.iter_mut().zip(x) {
        *m += (v - *m) / k as f64;
    }
}

/// Element-wise mean of member logits, then sigmoid for task 1 and softmax
/// for task 2.
pub fn ensemble_logits(members: &[TaskLogits]) -> Result<Ensemble> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble of zero models".into()))?;
    let n = first.validate()?;
    for (i, m) in members.iter().enumerate().skip(1) {
        let len = m.validate()?;
        if len != n || m.task1.is_some() != first.task1.is_some() || m.task2.is_some() != first.task2.is_some() {
            return Err(Error::InvalidArgument(format!(
                "ensemble member {i} does not cover the same tasks and examples as member 0"
            )));
        }
    }

    let mut mean = first.clone();
    for (i, m) in members.iter().enumerate().skip(1) {
        if let (Some(acc), Some(x)) = (&mut mean.task1, &m.task1) {
            running_mean(acc, x, i + 1);
        }
        if let (Some(acc), Some(x)) = (&mut mean.task2, &m.task2) {
            for (row, xr) in acc.iter_mut().zip(x) {
                running_mean(row, xr, i + 1);
            }
        }
    }
    let task1_probs = mean.task1.as_ref().map(|z| z.iter().map(|&v| sigmoid(v)).collect());
    let task2_probs = mean
        .task2
        .as_ref()
        .map(|rows| rows.iter().map(|r| softmax_slice(r)).collect());
    Ok(Ensemble {
        logits: mean,
        task1_probs,
        task2_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{argmax, predict};
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let r = evaluate(&y, &y, &names(3)).unwrap();
        assert_eq!((r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn binary_hand_case() {
        let r = evaluate(&[1, 1, 0, 0], &[1, 0, 1, 0], &names(2)).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!((r.macro_precision, r.macro_recall, r.macro_f1), (0.5, 0.5, 0.5));
        assert_eq!(r.classes.iter().map(|c| c.support).sum::<usize>(), 4);
    }

    #[test]
    fn zero_support_classes_are_reported_but_not_averaged() {
        let r = evaluate(&[0, 2], &[0, 1], &names(3)).unwrap();
        assert_eq!(r.classes.len(), 3);
        assert_eq!(r.classes[2].support, 0);
        assert_eq!(r.macro_recall, 0.5);
        assert_eq!(r.macro_precision, 0.5);
    }

    #[test]
    fn length_mismatch_and_empty_input() {
        assert!(evaluate(&[0], &[0, 1], &names(2)).is_err());
        assert!(evaluate(&[], &[], &names(2)).is_err());
        assert!(evaluate(&[5], &[0], &names(2)).is_err());
    }

    #[test]
    fn text_report_layout() {
        let labels: Vec<String> = crate::models::Task::Categorization
            .class_names()
            .iter()
            .map(|s| s.to_string())
            .collect();
        let r = evaluate(&[0, 1, 7, 3], &[0, 1, 7, 0], &labels).unwrap();
        let text = r.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].contains("Precision") && lines[0].ends_with("Support"));
        assert!(lines[1].starts_with("None "));
        assert!(lines[8].starts_with("Threat of violence"));
        assert!(text.contains("macro avg"));
        assert!(lines[1].contains("1.0000"));
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn ensemble_of_identical_members_is_exact() {
        let m = TaskLogits {
            task1: Some(vec![0.1234567, -3.5]),
            task2: Some(vec![vec![0.3, -0.7, 1.1, 0.0, 0.2, 0.9, -2.0, 0.4]; 2]),
        };
        let e = ensemble_logits(&[m.clone(), m.clone(), m.clone()]).unwrap();
        assert_eq!(e.logits, m);
        assert_eq!(predict(&e.logits, 0.5).unwrap(), predict(&m, 0.5).unwrap());
    }

    #[test]
    fn ensemble_mean_of_rows() {
        let row = |a: f64, b: f64| {
            let mut r = vec![0.0; 8];
            r[0] = a;
            r[1] = b;
            r
        };
        let members: Vec<TaskLogits> = [(1.0, -1.0), (0.0, 0.0), (2.0, -2.0)]
            .iter()
            .map(|&(a, b)| TaskLogits { task1: None, task2: Some(vec![row(a, b)]) })
            .collect();
        let e = ensemble_logits(&members).unwrap();
        assert_eq!(e.logits.task2.unwrap()[0], row(1.0, -1.0));
        let p: f64 = e.task2_probs.unwrap()[0].iter().sum();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heterogeneous_members_are_rejected() {
        let a = TaskLogits { task1: Some(vec![0.0]), task2: None };
        let b = TaskLogits { task1: Some(vec![0.0, 1.0]), task2: None };
        let c = TaskLogits { task1: None, task2: Some(vec![vec![0.0; 8]]) };
        assert!(ensemble_logits(&[a.clone(), b]).is_err());
        assert!(ensemble_logits(&[a, c]).is_err());
        assert!(ensemble_logits(&[]).is_err());
    }

    #[test]
    fn ensemble_argmax_matches_plain_average() {
        let mut rng = SeededRng::new(4);
        for _ in 0..50 {
            let members: Vec<TaskLogits> = (0..3)
                .map(|_| TaskLogits {
                    task1: None,
                    task2: Some(vec![(0..8).map(|_| rng.normal()).collect()]),
                })
                .collect();
            let e = ensemble_logits(&members).unwrap();
            let avg: Vec<f64> = (0..8)
                .map(|k| members.iter().map(|m| m.task2.as_ref().unwrap()[0][k]).sum::<f64>() / 3.0)
                .collect();
            assert_eq!(argmax(&e.logits.task2.unwrap()[0]), argmax(&avg));
        }
    }

    proptest! {
        #[test]
        fn macro_is_mean_of_present_rows(pairs in prop::collection::vec((0usize..8, 0usize..8), 1..300)) {
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = evaluate(&p, &g, &names(8)).unwrap();
            let rows: Vec<&ClassRow> = r.classes.iter().filter(|c| c.support > 0).collect();
            let mf1 = rows.iter().map(|c| c.f1).sum::<f64>() / rows.len() as f64;
            prop_assert!((r.macro_f1 - mf1).abs() < 1e-12);
            prop_assert_eq!(r.classes.iter().map(|c| c.support).sum::<usize>(), g.len());
            for v in [r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn ensemble_argmax_shift_invariant(seed in 0u64..200, c in -30.0f64..30.0) {
            let mut rng = SeededRng::new(seed);
            let members: Vec<TaskLogits> = (0..3)
                .map(|_| TaskLogits { task1: None, task2: Some(vec![(0..8).map(|_| rng.normal()).collect()]) })
                .collect();
            let shifted: Vec<TaskLogits> = members
                .iter()
                .map(|m| TaskLogits { task1: None, task2: Some(vec![m.task2.as_ref().unwrap()[0].iter().map(|v| v + c).collect()]) })
                .collect();
            let a = ensemble_logits(&members).unwrap().logits.task2.unwrap();
            let b = ensemble_logits(&shifted).unwrap().logits.task2.unwrap();
            let mut sorted = a[0].clone();
            sorted.sort_by(|x, y| y.total_cmp(x));
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(argmax(&a[0]), argmax(&b[0]));
        }
    }
}
