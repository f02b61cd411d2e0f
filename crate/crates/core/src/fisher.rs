//! Diagonal empirical Fisher information per prefix row.
//!
//! For row `i` with `p` parameters and `q` samples,
//! `F_i = (1 / pq) · Σ_j Σ_k (∂ log p(y_k | x_k; θ) / ∂θ_j)²`, where the
//! derivative is taken per sample and the sequence log-likelihood is the sum
//! of token log-probabilities.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::prefix::{PrefixMatrix, PREFIX_PARAM};
use crate::tasks::Example;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub task_id: usize,
    pub scores: Vec<f64>,
}

impl FisherReport {
    /// Indices of the `n` largest scores, descending, ties to the lower index.
    pub fn top_n(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order.truncate(n);
        order
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    task_id: usize,
    row_index: usize,
    score: f64,
}

pub fn write_reports_csv(reports: &[FisherReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        for (row_index, &score) in r.scores.iter().enumerate() {
            w.serialize(CsvRow {
                task_id: r.task_id,
                row_index,
                score,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<FisherReport>> {
    let mut reports: Vec<FisherReport> = Vec::new();
    for rec in csv::Reader::from_path(path)?.deserialize() {
        let row: CsvRow = rec?;
        if reports.last().is_none_or(|r| r.task_id != row.task_id) {
            reports.push(FisherReport {
                task_id: row.task_id,
                scores: Vec::new(),
            });
        }
        let r = reports.last_mut().expect("pushed above");
        if row.row_index != r.scores.len() {
            return Err(Error::Config(format!(
                "task {} rows out of order at {}",
                row.task_id, row.row_index
            )));
        }
        r.scores.push(row.score);
    }
    Ok(reports)
}

/// Running sum of squared per-sample gradients with Neumaier compensation,
/// so the result barely depends on sample order.
#[derive(Clone, Debug)]
pub struct FisherAccumulator {
    rows: usize,
    params_per_row: usize,
    sum_sq: Vec<f64>,
    compensation: Vec<f64>,
    count: usize,
}

fn neumaier_add(sum: &mut f64, comp: &mut f64, x: f64) {
    let t = *sum + x;
    if sum.abs() >= x.abs() {
        *comp += (*sum - t) + x;
    } else {
        *comp += (x - t) + *sum;
    }
    *sum = t;
}

impl FisherAccumulator {
    pub fn new(rows: usize, params_per_row: usize) -> Self {
        Self {
            rows,
            params_per_row,
            sum_sq: vec![0.0; rows * params_per_row],
            compensation: vec![0.0; rows * params_per_row],
            count: 0,
        }
    }

    pub fn for_prefix(prefix: &PrefixMatrix) -> Self {
        Self::new(prefix.n_rows(), prefix.row_dim())
    }

    /// Number of samples `q` seen so far.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Compensated per-parameter sums of squared gradients.
    pub fn sum_sq(&self) -> Vec<f64> {
        self.sum_sq
            .iter()
            .zip(&self.compensation)
            .map(|(s, c)| s + c)
            .collect()
    }

    /// Add one sample's log-likelihood gradient, shaped `[rows × p]`.
    pub fn add_sample(&mut self, grad: &Tensor) -> Result<()> {
        if grad.shape() != [self.rows, self.params_per_row] {
            return Err(Error::Dimension {
                op: "fisher accumulate",
                lhs: grad.shape().to_vec(),
                rhs: vec![self.rows, self.params_per_row],
            });
        }
        if !grad.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at sample {}",
                self.count
            )));
        }
        for ((s, c), g) in self
            .sum_sq
            .iter_mut()
            .zip(self.compensation.iter_mut())
            .zip(grad.data())
        {
            neumaier_add(s, c, g * g);
        }
        self.count += 1;
        Ok(())
    }

    /// Per-sample gradient of `log p(target | input)` with respect to the
    /// prefix rows `indices`, added to the running sums. LM parameters are
    /// treated as constants.
    pub fn accumulate(
        &mut self,
        model: &Transformer,
        prefix: &PrefixMatrix,
        indices: &[usize],
        example: &Example,
    ) -> Result<()> {
        let grad = log_likelihood_grad(model, prefix, indices, example)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("sample {}: {m}", self.count)),
                other => other,
            })?;
        self.add_sample(&grad)
    }

    pub fn finalize(&self, task_id: usize) -> Result<FisherReport> {
        if self.count == 0 {
            return Err(Error::EmptyData(format!("no samples for task {task_id}")));
        }
        let p = self.params_per_row;
        let denom = (p * self.count) as f64;
        let scores = (0..self.rows)
            .map(|r| {
                let (mut s, mut c) = (0.0, 0.0);
                for j in r * p..(r + 1) * p {
                    neumaier_add(&mut s, &mut c, self.sum_sq[j]);
                    neumaier_add(&mut s, &mut c, self.compensation[j]);
                }
                (s + c) / denom
            })
            .collect();
        Ok(FisherReport { task_id, scores })
    }
}

/// `∂/∂P_θ` of the summed token log-likelihood of one example.
pub fn log_likelihood_grad(
    model: &Transformer,
    prefix: &PrefixMatrix,
    indices: &[usize],
    example: &Example,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bp = model.bind_frozen(&mut g);
    let leaf = g.param(PREFIX_PARAM, &prefix.rows_arc(), true);
    let acts = prefix.gather_from(&mut g, leaf, indices)?;
    let ce = model.sequence_loss(&mut g, &bp, &example.input_tokens(), &example.target, Some(&acts))?;
    let n_tokens = (example.target.len() + 1) as f64;
    let ll = g.scale(ce, -n_tokens);
    let grads = g.backward(ll)?;
    grads
        .wrt(leaf)
        .cloned()
        .ok_or_else(|| Error::Contract("prefix leaf has no gradient".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finalize_by_hand() {
        let mut acc = FisherAccumulator::new(1, 2);
        // Three samples whose squared grads sum to [6, 12].
        for g in [[1.0, 2.0], [1.0, 2.0], [2.0, 2.0]] {
            acc.add_sample(&Tensor::new(vec![1, 2], g.to_vec()).unwrap()).unwrap();
        }
        let r = acc.finalize(0).unwrap();
        assert!((r.scores[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_and_empty() {
        let mut acc = FisherAccumulator::new(3, 2);
        assert!(matches!(acc.finalize(0), Err(Error::EmptyData(_))));
        acc.add_sample(&Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(acc.finalize(0).unwrap().scores, vec![0.0; 3]);
        let bad = Tensor::new(vec![3, 2], vec![0., 0., f64::NAN, 0., 0., 0.]).unwrap();
        assert!(matches!(acc.add_sample(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn duplicated_homogeneous_data_keeps_score() {
        let g = Tensor::new(vec![2, 1], vec![0.5, -3.0]).unwrap();
        let mut once = FisherAccumulator::new(2, 1);
        once.add_sample(&g).unwrap();
        let mut twice = FisherAccumulator::new(2, 1);
        twice.add_sample(&g).unwrap();
        twice.add_sample(&g).unwrap();
        assert_eq!(twice.count(), 2);
        assert_eq!(twice.sum_sq()[1], 2.0 * once.sum_sq()[1]);
        assert_eq!(once.finalize(0).unwrap(), twice.finalize(0).unwrap());
    }

    #[test]
    fn top_n_tie_breaks_low() {
        let r = FisherReport {
            task_id: 0,
            scores: vec![1.0, 2.0, 2.0, 0.5],
        };
        assert_eq!(r.top_n(3), vec![1, 2, 0]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let reports = vec![
            FisherReport {
                task_id: 0,
                scores: vec![0.25, 1e-30],
            },
            FisherReport {
                task_id: 1,
                scores: vec![3.0, 0.0],
            },
        ];
        write_reports_csv(&reports, &path).unwrap();
        assert_eq!(read_reports_csv(&path).unwrap(), reports);
        let head = std::fs::read_to_string(&path).unwrap();
        assert!(head.starts_with("task_id,row_index,score"));
    }
}
