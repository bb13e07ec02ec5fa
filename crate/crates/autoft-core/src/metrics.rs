//! Evaluation metrics and result reports: AUC, LogLoss, per-unit routing
//! fractions and the method comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dcn::cross_entropy;
use crate::error::{Error, Result};

/// Probability that a random positive outranks a random negative, ties
/// counted 0.5 (midrank method). O(n log n) rank-sum computation.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Internal(format!(
            "auc: {} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::MetricUndefined(format!(
            "AUC needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // midranks over tie groups, ranks are 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean clamped cross-entropy (no regularization term).
pub fn logloss(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Internal(format!(
            "logloss: {} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::MetricUndefined("logloss of empty input".into()));
    }
    let sum: f64 = labels
        .iter()
        .zip(scores)
        .map(|(&y, &s)| cross_entropy(y, s))
        .sum();
    Ok(sum / labels.len() as f64)
}

/// Per-unit fractions of test instances routed to the pretrained bank.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingReport {
    /// Pretrained fraction per embedding field.
    pub embed: Vec<f64>,
    /// Pretrained fraction per cross layer.
    pub cross: Vec<f64>,
    /// Pretrained fraction per deep layer.
    pub deep: Vec<f64>,
    pub instances: usize,
}

impl RoutingReport {
    /// Fine-tuned fraction by depth (cross layers then deep layers, in
    /// layer order): the series to compare against the claim that higher
    /// layers prefer fine-tuning.
    pub fn finetuned_by_depth(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (l, p) in self.cross.iter().enumerate() {
            out.push((format!("cross.{l}"), 1.0 - p));
        }
        for (l, p) in self.deep.iter().enumerate() {
            out.push((format!("deep.{l}"), 1.0 - p));
        }
        out
    }

    /// CSV rows `component,unit,pretrained_fraction`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,unit,pretrained_fraction\n");
        for (name, units) in [("embed", &self.embed), ("cross", &self.cross), ("deep", &self.deep)] {
            for (i, p) in units.iter().enumerate() {
                let _ = writeln!(s, "{name},{i},{p}");
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "routing fractions over {} instances (pretrained share)", self.instances);
        for (name, units) in [("embed", &self.embed), ("cross", &self.cross), ("deep", &self.deep)] {
            for (i, p) in units.iter().enumerate() {
                let _ = writeln!(s, "  {name:>5}[{i}]  pretrained {:.4}  finetuned {:.4}", p, 1.0 - p);
            }
        }
        let _ = writeln!(s, "fine-tuned fraction by depth:");
        for (unit, f) in self.finetuned_by_depth() {
            let _ = writeln!(s, "  {unit:>8}  {f:.4}");
        }
        s
    }
}

/// Parses a route dump (`id,p_e,p_c,p_d` with bit strings, 1 = pretrained)
/// into per-unit routing fractions.
pub fn routing_fractions(dump_csv: &str) -> Result<RoutingReport> {
    let mut lines = dump_csv.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Data {
            row: 0,
            message: "route dump is empty".into(),
        });
    };
    if header.trim() != "id,p_e,p_c,p_d" {
        return Err(Error::Data {
            row: 0,
            message: format!("unexpected route dump header '{header}'"),
        });
    }
    let mut sums: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    let mut count = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = lineno; // header was line 0, so lineno is the 1-based data row
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Data {
                row,
                message: format!("expected 4 columns, got {}", parts.len()),
            });
        }
        let parse_bits = |s: &str| -> Result<Vec<f64>> {
            s.chars()
                .map(|c| match c {
                    '0' => Ok(0.0),
                    '1' => Ok(1.0),
                    other => Err(Error::Data {
                        row,
                        message: format!("invalid route bit '{other}'"),
                    }),
                })
                .collect()
        };
        let e = parse_bits(parts[1])?;
        let c = parse_bits(parts[2])?;
        let d = parse_bits(parts[3])?;
        match &mut sums {
            None => sums = Some((e, c, d)),
            Some((se, sc, sd)) => {
                if se.len() != e.len() || sc.len() != c.len() || sd.len() != d.len() {
                    return Err(Error::Data {
                        row,
                        message: "inconsistent route widths".into(),
                    });
                }
                for (a, b) in se.iter_mut().zip(e) {
                    *a += b;
                }
                for (a, b) in sc.iter_mut().zip(c) {
                    *a += b;
                }
                for (a, b) in sd.iter_mut().zip(d) {
                    *a += b;
                }
            }
        }
        count += 1;
    }
    let (se, sc, sd) = sums.ok_or_else(|| Error::Data {
        row: 1,
        message: "route dump has no data rows".into(),
    })?;
    let norm = |v: Vec<f64>| v.into_iter().map(|s| s / count as f64).collect();
    Ok(RoutingReport {
        embed: norm(se),
        cross: norm(sc),
        deep: norm(sd),
        instances: count,
    })
}

/// Final metrics of one completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub seed: u64,
    pub auc: f64,
    pub logloss: f64,
    pub instances: usize,
}

/// One row of the comparison table: mean and stddev over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub method: String,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub logloss_mean: f64,
    pub logloss_std: f64,
    pub seeds: Vec<u64>,
    pub instances: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const METHOD_ORDER: &[&str] = &[
    "Target-only",
    "Source-only",
    "All",
    "Fine-Tune",
    "AutoFT",
    "AutoFT-Embedding",
    "AutoFT-Cross",
    "AutoFT-Deep",
    "AutoFT-CrossDeep",
];

/// Groups per-run metrics by method. Only methods actually present appear;
/// nothing is fabricated for missing runs.
pub fn results_table(runs: &[RunMetrics]) -> Vec<MetricReport> {
    let mut grouped: BTreeMap<&str, Vec<&RunMetrics>> = BTreeMap::new();
    for r in runs {
        grouped.entry(r.method.as_str()).or_default().push(r);
    }
    let mut methods: Vec<&str> = grouped.keys().copied().collect();
    methods.sort_by_key(|m| {
        METHOD_ORDER
            .iter()
            .position(|k| k == m)
            .map_or((1, m.to_string()), |i| (0, format!("{i:03}")))
    });
    methods
        .into_iter()
        .map(|m| {
            let rows = &grouped[m];
            let aucs: Vec<f64> = rows.iter().map(|r| r.auc).collect();
            let lls: Vec<f64> = rows.iter().map(|r| r.logloss).collect();
            let (auc_mean, auc_std) = mean_std(&aucs);
            let (logloss_mean, logloss_std) = mean_std(&lls);
            MetricReport {
                method: m.to_string(),
                auc_mean,
                auc_std,
                logloss_mean,
                logloss_std,
                seeds: rows.iter().map(|r| r.seed).collect(),
                instances: rows.iter().map(|r| r.instances).max().unwrap_or(0),
            }
        })
        .collect()
}

pub fn results_table_csv(table: &[MetricReport]) -> String {
    let mut s = String::from("method,auc_mean,auc_std,logloss_mean,logloss_std,n_seeds\n");
    for r in table {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method, r.auc_mean, r.auc_std, r.logloss_mean, r.logloss_std,
            r.seeds.len()
        );
    }
    s
}

/// Plain-text table with the best AUC (max) and LogLoss (min) flagged.
pub fn results_table_text(table: &[MetricReport]) -> String {
    let best_auc = table.iter().map(|r| r.auc_mean).fold(f64::NEG_INFINITY, f64::max);
    let best_ll = table.iter().map(|r| r.logloss_mean).fold(f64::INFINITY, f64::min);
    let mut s = String::new();
    let _ = writeln!(s, "{:<20} {:>16} {:>18} {:>8}", "method", "AUC", "LogLoss", "seeds");
    for r in table {
        let auc_flag = if r.auc_mean == best_auc { "*" } else { " " };
        let ll_flag = if r.logloss_mean == best_ll { "*" } else { " " };
        let _ = writeln!(
            s,
            "{:<20} {:>7.4} ±{:.4}{} {:>8.4} ±{:.4}{} {:>8}",
            r.method, r.auc_mean, r.auc_std, auc_flag, r.logloss_mean, r.logloss_std, ll_flag,
            r.seeds.len()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    /// O(n^2) all-pairs reference, ties counted half.
    fn auc_brute_force(labels: &[u8], scores: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_ordered_cases() {
        let labels = [0, 0, 1, 1];
        assert_eq!(auc(&labels, &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auc(&labels, &[0.9, 0.8, 0.2, 0.1]).unwrap(), 0.0);
        assert_eq!(auc(&labels, &[0.5, 0.5, 0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn auc_rejects_single_class() {
        assert!(auc(&[1, 1], &[0.1, 0.2]).is_err());
        assert!(auc(&[0, 0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn auc_matches_brute_force_with_ties() {
        let mut rng = SeededRng::new(2);
        for case in 0..50 {
            let n = 200;
            let labels: Vec<u8> = (0..n).map(|_| rng.next_index(2) as u8).collect();
            // coarse grid forces plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| rng.next_index(20) as f64 / 20.0).collect();
            if labels.iter().all(|&y| y == labels[0]) {
                continue;
            }
            let fast = auc(&labels, &scores).unwrap();
            let slow = auc_brute_force(&labels, &scores);
            assert!((fast - slow).abs() < 1e-12, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn auc_complement_for_tie_free_inputs() {
        let mut rng = SeededRng::new(3);
        let n = 101;
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let inverted: Vec<f64> = scores.iter().map(|&s| -s).collect();
        let sum = auc(&labels, &scores).unwrap() + auc(&labels, &inverted).unwrap();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auc_is_invariant_under_monotone_transforms(
            seed in 0u64..1000,
        ) {
            let mut rng = SeededRng::new(seed);
            let n = 60;
            let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let base = auc(&labels, &scores).unwrap();
            let exp_scores: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|&s| 2.5 * s + 7.0).collect();
            prop_assert!((auc(&labels, &exp_scores).unwrap() - base).abs() < 1e-12);
            prop_assert!((auc(&labels, &affine).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn logloss_cases() {
        let l = logloss(&[1, 0], &[0.5, 0.5]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(logloss(&[1, 0], &[1.0, 0.0]).unwrap() <= 1e-6);
    }

    #[test]
    fn logloss_matches_dcn_loss_definition() {
        // mean of the per-instance cross-entropy with lambda = 0
        let labels = [1u8, 0, 1, 1];
        let scores = [0.7, 0.3, 0.9, 0.2];
        let manual: f64 = labels
            .iter()
            .zip(&scores)
            .map(|(&y, &s)| crate::dcn::cross_entropy(y, s))
            .sum::<f64>()
            / 4.0;
        assert_eq!(logloss(&labels, &scores).unwrap(), manual);
    }

    #[test]
    fn constant_predictor_at_base_rate_is_the_best_constant() {
        let labels = [1u8, 1, 0, 1, 0, 0, 0, 1, 1, 0];
        let base = labels.iter().map(|&y| f64::from(y)).sum::<f64>() / labels.len() as f64;
        let floor = logloss(&labels, &vec![base; labels.len()]).unwrap();
        for q in [0.05, 0.2, 0.35, 0.65, 0.8, 0.95] {
            let ll = logloss(&labels, &vec![q; labels.len()]).unwrap();
            assert!(ll >= floor - 1e-12, "constant {q} beat the base rate");
        }
    }

    #[test]
    fn routing_fractions_counting() {
        let dump = "id,p_e,p_c,p_d\n0,10,111,11\n1,00,101,11\n";
        let report = routing_fractions(dump).unwrap();
        assert_eq!(report.embed, vec![0.5, 0.0]);
        assert_eq!(report.cross, vec![1.0, 0.5, 1.0]);
        assert_eq!(report.deep, vec![1.0, 1.0]);
        assert_eq!(report.instances, 2);
        // pretrained + finetuned sums to exactly 1 per unit
        for (_, f) in report.finetuned_by_depth() {
            assert!((0.0..=1.0).contains(&f));
        }
        for (p, f) in report.cross.iter().zip(report.finetuned_by_depth().iter().map(|x| x.1)) {
            assert_eq!(p + f, 1.0);
        }
    }

    #[test]
    fn routing_fractions_rejects_malformed_rows() {
        let dump = "id,p_e,p_c,p_d\n0,10,11\n";
        let err = routing_fractions(dump).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
        let dump2 = "id,p_e,p_c,p_d\n0,10,1x,11\n";
        assert!(routing_fractions(dump2).is_err());
    }

    #[test]
    fn results_table_grouping_and_flags() {
        let runs = vec![
            RunMetrics { method: "Fine-Tune".into(), seed: 1, auc: 0.80, logloss: 0.50, instances: 100 },
            RunMetrics { method: "Fine-Tune".into(), seed: 2, auc: 0.82, logloss: 0.48, instances: 100 },
            RunMetrics { method: "AutoFT".into(), seed: 1, auc: 0.85, logloss: 0.45, instances: 100 },
        ];
        let table = results_table(&runs);
        assert_eq!(table.len(), 2);
        assert_eq!(table[0].method, "Fine-Tune", "canonical order puts Fine-Tune first");
        assert!((table[0].auc_mean - 0.81).abs() < 1e-12);
        assert!(table[0].auc_std > 0.0);
        assert_eq!(table[1].auc_std, 0.0, "single run has zero stddev");
        let text = results_table_text(&table);
        let autoft_line = text.lines().find(|l| l.starts_with("AutoFT")).unwrap();
        assert!(autoft_line.contains('*'), "best method flagged: {text}");
        let csv = results_table_csv(&table);
        assert!(csv.starts_with("method,auc_mean"));
        assert_eq!(csv.lines().count(), 3);
    }
}
