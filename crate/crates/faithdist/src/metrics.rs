//! Agreement and robustness metrics: adversarial disagreement examples,
//! empirical distillation agreement, robust accuracy, and summary tables
//! (mean, population std, histogram bins) in the results CSV/JSON format.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{disagreement_attack, robust_accuracy_attack, AttackConfig, InputRegion};
use crate::bounds::FaithfulnessRecord;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{FeedForwardNetwork, TeacherStudentPair};
use crate::tensor::Tensor;

/// Per-example agreement classification. `in_ade` can only hold when
/// `in_oa` does: the adversarial-disagreement set is restricted to examples
/// the networks agree on cleanly. The check is empirical (PGD, not
/// exhaustive), recorded by `empirical: true`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementRecord {
    pub example_id: usize,
    pub in_oa: bool,
    pub in_ade: bool,
    pub empirical: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Vec<f64>>,
}

impl AgreementRecord {
    pub fn validate(&self) -> Result<()> {
        if self.in_ade && !self.in_oa {
            return Err(Error::Validation(format!(
                "example {}: in_ade requires in_oa",
                self.example_id
            )));
        }
        Ok(())
    }

    /// The Def.-3 summand `1_OA - 1_ADE` for this example.
    pub fn agreement_term(&self) -> f64 {
        f64::from(self.in_oa) - f64::from(self.in_ade)
    }
}

/// Classifies one example: clean agreement first, then a PGD search for a
/// disagreement witness inside the region. `init` optionally seeds the
/// attack (used to nest witnesses across a growing epsilon grid).
pub fn is_adversarial_disagreement(
    pair: &TeacherStudentPair,
    x: &Tensor,
    region: &InputRegion,
    cfg: &AttackConfig,
    example_id: usize,
    init: Option<&Tensor>,
) -> Result<AgreementRecord> {
    let in_oa = pair.teacher.predict(x)? == pair.student.predict(x)?;
    if !in_oa {
        return Ok(AgreementRecord { example_id, in_oa, in_ade: false, empirical: true, witness: None });
    }
    let (found, witness) = disagreement_attack(pair, region, cfg, init)?;
    Ok(AgreementRecord {
        example_id,
        in_oa,
        in_ade: found,
        empirical: true,
        witness: found.then(|| witness.data().to_vec()),
    })
}

/// Empirical distillation agreement of Def. 3:
/// `mean(1_OA - 1_ADE)` over the dataset, with `S_ADE` approximated by PGD.
pub fn empirical_distillation_agreement(
    pair: &TeacherStudentPair,
    data: &Dataset,
    epsilon: f64,
    cfg: &AttackConfig,
) -> Result<f64> {
    let records = agreement_records(pair, data, epsilon, cfg, None)?;
    Ok(records.iter().map(AgreementRecord::agreement_term).sum::<f64>() / records.len() as f64)
}

/// Per-example agreement records; `inits` optionally carries one seed point
/// per example (witnesses from a smaller epsilon).
pub fn agreement_records(
    pair: &TeacherStudentPair,
    data: &Dataset,
    epsilon: f64,
    cfg: &AttackConfig,
    inits: Option<&[Option<Vec<f64>>]>,
) -> Result<Vec<AgreementRecord>> {
    if data.is_empty() {
        return Err(Error::Usage("agreement over an empty dataset".into()));
    }
    let mut records = Vec::with_capacity(data.len());
    for (i, x) in data.inputs.iter().enumerate() {
        let region = InputRegion::unit_box(x.clone(), epsilon)?;
        let init = inits
            .and_then(|v| v.get(i))
            .and_then(|w| w.as_ref())
            .map(|w| Tensor::from_raw(vec![w.len()], w.clone()));
        let record = is_adversarial_disagreement(
            pair,
            x,
            &region,
            &cfg.for_example(i as u64),
            i,
            init.as_ref(),
        )?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Fraction of examples whose correct clean prediction survives every
/// visited PGD iterate; cleanly misclassified examples count as non-robust.
pub fn robust_accuracy(
    net: &FeedForwardNetwork,
    data: &Dataset,
    epsilon: f64,
    cfg: &AttackConfig,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("robust accuracy over an empty dataset".into()));
    }
    let mut robust = 0usize;
    for (i, (x, &y)) in data.inputs.iter().zip(&data.labels).enumerate() {
        let region = InputRegion::unit_box(x.clone(), epsilon)?;
        let (flipped, _) = robust_accuracy_attack(net, y, &region, &cfg.for_example(i as u64))?;
        if !flipped {
            robust += 1;
        }
    }
    Ok(robust as f64 / data.len() as f64)
}

/// One aggregated row of the results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: String,
    pub epsilon: f64,
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation (divides by n, not n-1).
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    /// CSV with the fixed column order
    /// `dataset,method,epsilon,metric,mean,std,n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,method,epsilon,metric,mean,std,n\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.dataset, r.method, r.epsilon, r.metric, r.mean, r.std, r.n
            ));
        }
        out
    }

    pub fn push(&mut self, row: SummaryRow) {
        self.rows.push(row);
    }

    /// Deterministic ordering regardless of insertion order.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.dataset, &a.method, &a.metric)
                .cmp(&(&b.dataset, &b.method, &b.metric))
                .then(a.epsilon.total_cmp(&b.epsilon))
        });
    }
}

/// Population mean and standard deviation.
pub fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates one group of values into a row; empty groups are omitted
/// (returns `None`) rather than producing NaN rows.
pub fn summarize_group(
    dataset: &str,
    method: &str,
    epsilon: f64,
    metric: &str,
    values: &[f64],
) -> Option<SummaryRow> {
    if values.is_empty() {
        return None;
    }
    let (mean, std) = population_stats(values);
    Some(SummaryRow {
        dataset: dataset.to_string(),
        method: method.to_string(),
        epsilon,
        metric: metric.to_string(),
        mean,
        std,
        n: values.len(),
    })
}

/// Groups faithfulness records by epsilon and emits EmpLB / FaithUB rows in
/// ascending epsilon order.
pub fn summarize(dataset: &str, method: &str, records: &[FaithfulnessRecord]) -> Result<SummaryTable> {
    let mut by_eps: BTreeMap<u64, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        if !r.epsilon.is_finite() || r.epsilon < 0.0 {
            return Err(Error::Validation(format!(
                "example {}: invalid epsilon {}",
                r.example_id, r.epsilon
            )));
        }
        let entry = by_eps
            .entry(r.epsilon.to_bits())
            .or_insert_with(|| (r.epsilon, Vec::new(), Vec::new()));
        entry.1.push(r.emp_lb);
        entry.2.push(r.faith_ub);
    }
    let mut table = SummaryTable::default();
    for (_, (eps, emp, faith)) in by_eps {
        if let Some(row) = summarize_group(dataset, method, eps, "emp_lb", &emp) {
            table.push(row);
        }
        if let Some(row) = summarize_group(dataset, method, eps, "faith_ub", &faith) {
            table.push(row);
        }
    }
    Ok(table)
}

/// Uniform-bin histogram counts over `[0, 1]`; values at 1.0 land in the
/// last bin, out-of-range values are clamped.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins.max(1)];
    let bins = counts.len();
    for &v in values {
        let idx = ((v * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
}
