//! Evaluation protocol: optimal assignment between predicted and true
//! labels, clustering accuracy, normalized mutual information, and the
//! known/novel/all report emitted once per epoch.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Minimum-cost perfect assignment on a square cost matrix, by shortest
/// augmenting paths with potentials (cubic in the matrix size). Returns
/// `assignment[row] = col` and the total cost. Ties resolve toward the
/// identity, so a zero matrix maps each row to its own column.
pub fn hungarian(cost: &Matrix) -> Result<(Vec<usize>, f64)> {
    let n = cost.rows();
    if n != cost.cols() {
        return Err(Error::invalid(format!(
            "assignment needs a square matrix, got {n}x{}",
            cost.cols()
        )));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    if !cost.is_finite() {
        return Err(Error::invalid("assignment cost matrix must be finite"));
    }

    // 1-based arrays with a virtual column 0; p[j] is the row matched to
    // column j (0 = unmatched), u/v the dual potentials.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost.get(i, assignment[i])).sum();
    Ok((assignment, total))
}

fn check_labels(preds: &[usize], truth: &[usize], universe: usize) -> Result<()> {
    if preds.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions against {} truth labels",
            preds.len(),
            truth.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("label sequences must be non-empty"));
    }
    if preds
        .iter()
        .chain(truth.iter())
        .any(|&l| l >= universe)
    {
        return Err(Error::invalid(format!(
            "label outside universe 0..{universe}"
        )));
    }
    Ok(())
}

/// Fraction of samples correct under the best one-to-one relabeling of
/// predictions, found by solving the assignment problem on the
/// contingency matrix (cost = max count - count) over a universe of
/// `universe` labels.
pub fn clustering_accuracy(preds: &[usize], truth: &[usize], universe: usize) -> Result<f64> {
    if universe == 0 {
        return Err(Error::invalid("label universe must be >= 1"));
    }
    check_labels(preds, truth, universe)?;
    let mut contingency = vec![vec![0usize; universe]; universe];
    for (&p, &t) in preds.iter().zip(truth) {
        contingency[p][t] += 1;
    }
    let max_count = contingency
        .iter()
        .flat_map(|row| row.iter())
        .copied()
        .max()
        .unwrap_or(0) as f64;
    let mut cost = Matrix::zeros(universe, universe);
    for (p, row) in contingency.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            cost.set(p, t, max_count - c as f64);
        }
    }
    let (assignment, _) = hungarian(&cost)?;
    let matched: usize = assignment
        .iter()
        .enumerate()
        .map(|(p, &t)| contingency[p][t])
        .sum();
    Ok(matched as f64 / preds.len() as f64)
}

fn entropy_nats(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization:
/// `MI / ((H(preds) + H(truth)) / 2)`. Zero by convention when either
/// marginal is constant. Symmetric in its arguments.
pub fn nmi(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions against {} truth labels",
            preds.len(),
            truth.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("label sequences must be non-empty"));
    }
    let width = preds.iter().chain(truth.iter()).max().unwrap() + 1;
    let n = preds.len() as f64;
    let mut joint = vec![vec![0usize; width]; width];
    let mut row = vec![0usize; width];
    let mut col = vec![0usize; width];
    for (&p, &t) in preds.iter().zip(truth) {
        joint[p][t] += 1;
        row[p] += 1;
        col[t] += 1;
    }
    let h_p = entropy_nats(&row, n);
    let h_t = entropy_nats(&col, n);
    if h_p == 0.0 || h_t == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (p, joint_row) in joint.iter().enumerate() {
        for (t, &c) in joint_row.iter().enumerate() {
            if c > 0 {
                let pj = c as f64 / n;
                mi += pj * (pj * n * n / (row[p] as f64 * col[t] as f64)).ln();
            }
        }
    }
    Ok((mi / ((h_p + h_t) / 2.0)).clamp(0.0, 1.0))
}

/// Per-epoch metrics. A group with no samples reports `None` for its
/// metrics rather than a fake zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub epoch: usize,
    pub known_acc: Option<f64>,
    pub novel_acc: Option<f64>,
    pub all_acc: Option<f64>,
    pub novel_nmi: Option<f64>,
    pub all_nmi: Option<f64>,
}

/// The evaluation report: exact-match accuracy on samples whose truth is
/// a known class, clustering accuracy and NMI on the novel-truth subset
/// (matching over the full label universe), and clustering accuracy and
/// NMI over everything.
pub fn group_report(
    preds: &[usize],
    truth: &[usize],
    known_classes: usize,
    total_classes: usize,
    epoch: usize,
) -> Result<MetricsReport> {
    if known_classes > total_classes || total_classes == 0 {
        return Err(Error::invalid("need 0 <= known_classes <= total_classes >= 1"));
    }
    check_labels(preds, truth, total_classes)?;

    let mut known_hits = 0usize;
    let mut known_total = 0usize;
    let mut novel_preds = Vec::new();
    let mut novel_truth = Vec::new();
    for (&p, &t) in preds.iter().zip(truth) {
        if t < known_classes {
            known_total += 1;
            if p == t {
                known_hits += 1;
            }
        } else {
            novel_preds.push(p);
            novel_truth.push(t);
        }
    }

    let known_acc = (known_total > 0).then(|| known_hits as f64 / known_total as f64);
    let (novel_acc, novel_nmi) = if novel_preds.is_empty() {
        (None, None)
    } else {
        (
            Some(clustering_accuracy(&novel_preds, &novel_truth, total_classes)?),
            Some(nmi(&novel_preds, &novel_truth)?),
        )
    };
    Ok(MetricsReport {
        epoch,
        known_acc,
        novel_acc,
        all_acc: Some(clustering_accuracy(preds, truth, total_classes)?),
        novel_nmi,
        all_nmi: Some(nmi(preds, truth)?),
    })
}

fn field_to_record(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".into(),
    }
}

fn field_from_record(s: &str) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::invalid(format!("bad metric field {s:?}")))
}

impl MetricsReport {
    /// One-line record: `epoch known novel all novel_nmi all_nmi`,
    /// six decimals, `-` for absent groups.
    pub fn to_record(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.epoch,
            field_to_record(self.known_acc),
            field_to_record(self.novel_acc),
            field_to_record(self.all_acc),
            field_to_record(self.novel_nmi),
            field_to_record(self.all_nmi),
        )
    }

    pub fn parse_record(line: &str) -> Result<MetricsReport> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::invalid(format!(
                "metric record has {} fields, expected 6",
                fields.len()
            )));
        }
        Ok(MetricsReport {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::invalid(format!("bad epoch field {:?}", fields[0])))?,
            known_acc: field_from_record(fields[1])?,
            novel_acc: field_from_record(fields[2])?,
            all_acc: field_from_record(fields[3])?,
            novel_nmi: field_from_record(fields[4])?,
            all_nmi: field_from_record(fields[5])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_assignment(cost: &Matrix) -> f64 {
        fn permute(rest: &mut Vec<usize>, chosen: &mut Vec<usize>, cost: &Matrix, best: &mut f64) {
            if rest.is_empty() {
                let total: f64 = chosen
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| cost.get(i, j))
                    .sum();
                if total < *best {
                    *best = total;
                }
                return;
            }
            for k in 0..rest.len() {
                let j = rest.remove(k);
                chosen.push(j);
                permute(rest, chosen, cost, best);
                chosen.pop();
                rest.insert(k, j);
            }
        }
        let mut best = f64::INFINITY;
        permute(
            &mut (0..cost.rows()).collect(),
            &mut Vec::new(),
            cost,
            &mut best,
        );
        best
    }

    #[test]
    fn hungarian_reference_cases() {
        let cost = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let (perm, total) = hungarian(&cost).unwrap();
        assert_eq!(perm, vec![0, 1]);
        assert_eq!(total, 2.0);

        let (perm, total) = hungarian(&Matrix::zeros(4, 4)).unwrap();
        assert_eq!(perm, vec![0, 1, 2, 3]);
        assert_eq!(total, 0.0);

        let cost = Matrix::new(
            3,
            3,
            vec![0.0, 9.0, 9.0, 9.0, 0.0, 9.0, 9.0, 9.0, 0.0],
        )
        .unwrap();
        let (perm, total) = hungarian(&cost).unwrap();
        assert_eq!(perm, vec![0, 1, 2]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn hungarian_rejects_bad_matrices() {
        assert!(hungarian(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in 2..=6usize {
            for _ in 0..25 {
                let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-5.0..5.0)).collect();
                let cost = Matrix::new(n, n, data).unwrap();
                let (_, total) = hungarian(&cost).unwrap();
                let best = brute_force_assignment(&cost);
                assert!(
                    (total - best).abs() < 1e-9,
                    "n={n}: got {total}, brute force {best}"
                );
            }
        }
    }

    #[test]
    fn clustering_accuracy_reference_cases() {
        let truth = vec![0, 1, 2, 0, 1, 2];
        assert_eq!(clustering_accuracy(&truth, &truth, 3).unwrap(), 1.0);

        // Fixed relabeling of predictions is absorbed by the matching.
        let permuted: Vec<usize> = truth.iter().map(|&t| (t + 1) % 3).collect();
        assert_eq!(clustering_accuracy(&permuted, &truth, 3).unwrap(), 1.0);

        // Crossed halves: best mapping recovers half the samples.
        let acc = clustering_accuracy(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn clustering_accuracy_invariant_to_uniform_relabeling() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = rng.random_range(2..6usize);
            let n = rng.random_range(4..30usize);
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mut relabel: Vec<usize> = (0..k).collect();
            relabel.shuffle(&mut rng);
            let renamed: Vec<usize> = preds.iter().map(|&p| relabel[p]).collect();
            let a = clustering_accuracy(&preds, &truth, k).unwrap();
            let b = clustering_accuracy(&renamed, &truth, k).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clustering_accuracy_validates_input() {
        assert!(clustering_accuracy(&[0, 1], &[0], 2).is_err());
        assert!(clustering_accuracy(&[], &[], 2).is_err());
        assert!(clustering_accuracy(&[2], &[0], 2).is_err());
    }

    #[test]
    fn nmi_reference_cases() {
        assert_eq!(nmi(&[0, 1, 0, 1], &[0, 1, 0, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[1, 1, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);

        // Direct-formula value for the quarter-overlap case.
        let v = nmi(&[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap();
        let mi = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2.0f64.ln();
        let h_p = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let h_t = std::f64::consts::LN_2;
        let expected = mi / ((h_p + h_t) / 2.0);
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.3437).abs() < 1e-4);
    }

    #[test]
    fn nmi_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(3..40usize);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let ab = nmi(&a, &b).unwrap();
            let ba = nmi(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn group_report_perfect_predictions() {
        let truth = vec![0, 1, 2, 3];
        let report = group_report(&truth, &truth, 2, 4, 7).unwrap();
        assert_eq!(report.epoch, 7);
        assert_eq!(report.known_acc, Some(1.0));
        assert_eq!(report.novel_acc, Some(1.0));
        assert_eq!(report.all_acc, Some(1.0));
        assert_eq!(report.novel_nmi, Some(1.0));
        assert_eq!(report.all_nmi, Some(1.0));
    }

    #[test]
    fn group_report_absorbs_novel_slot_permutation() {
        // Known samples exact; novel samples land in swapped novel slots.
        let truth = vec![0, 1, 2, 2, 3, 3];
        let preds = vec![0, 1, 3, 3, 2, 2];
        let report = group_report(&preds, &truth, 2, 4, 0).unwrap();
        assert_eq!(report.known_acc, Some(1.0));
        assert_eq!(report.novel_acc, Some(1.0));
        assert_eq!(report.all_acc, Some(1.0));
    }

    #[test]
    fn group_report_half_misassigned_novel() {
        let truth = vec![0, 1, 2, 2, 3, 3];
        let preds = vec![0, 1, 2, 3, 2, 3];
        let report = group_report(&preds, &truth, 2, 4, 0).unwrap();
        assert_eq!(report.known_acc, Some(1.0));
        assert_eq!(report.novel_acc, Some(0.5));
    }

    #[test]
    fn group_report_empty_groups_are_absent() {
        let report = group_report(&[0, 1], &[0, 1], 2, 4, 0).unwrap();
        assert_eq!(report.known_acc, Some(1.0));
        assert_eq!(report.novel_acc, None);
        assert_eq!(report.novel_nmi, None);
        assert!(report.all_acc.is_some());

        let report = group_report(&[2, 3], &[2, 3], 2, 4, 0).unwrap();
        assert_eq!(report.known_acc, None);
        assert_eq!(report.novel_acc, Some(1.0));
    }

    #[test]
    fn record_round_trip() {
        let report = MetricsReport {
            epoch: 12,
            known_acc: Some(0.9),
            novel_acc: None,
            all_acc: Some(0.850001),
            novel_nmi: None,
            all_nmi: Some(1.0 / 3.0),
        };
        let line = report.to_record();
        assert_eq!(line, "12 0.900000 - 0.850001 - 0.333333");
        let back = MetricsReport::parse_record(&line).unwrap();
        assert_eq!(back.epoch, 12);
        assert_eq!(back.novel_acc, None);
        assert!((back.all_nmi.unwrap() - 1.0 / 3.0).abs() < 1e-6);
        assert!(MetricsReport::parse_record("1 2 3").is_err());
        assert!(MetricsReport::parse_record("x - - - - -").is_err());
    }
}
