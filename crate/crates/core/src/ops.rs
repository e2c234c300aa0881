//! Operation counting and the per-op energy model for attention scores.
//!
//! Counting scope is the score matrix only (`QKᵀ` or the L1 distance map).
//! Each of the `d_k` terms of a score entry costs one accumulate add, so a
//! score entry costs `d_k` adds rather than the `d_k - 1` of a reduction tree.
//! [`full_layer_op_counts`] widens the scope to the whole attention layer.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::attention::ScoreKind;
use crate::error::{Error, Result};

/// Exact scalar operation counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpTally {
    pub mults: u64,
    pub adds: u64,
    pub abs_diffs: u64,
    pub exps: u64,
    pub divs: u64,
}

impl OpTally {
    pub const ZERO: OpTally = OpTally {
        mults: 0,
        adds: 0,
        abs_diffs: 0,
        exps: 0,
        divs: 0,
    };

    pub fn total(&self) -> u64 {
        self.mults + self.adds + self.abs_diffs + self.exps + self.divs
    }

    /// Every count multiplied by `k`.
    pub fn times(self, k: u64) -> OpTally {
        OpTally {
            mults: self.mults * k,
            adds: self.adds * k,
            abs_diffs: self.abs_diffs * k,
            exps: self.exps * k,
            divs: self.divs * k,
        }
    }
}

impl Add for OpTally {
    type Output = OpTally;

    fn add(self, o: OpTally) -> OpTally {
        OpTally {
            mults: self.mults + o.mults,
            adds: self.adds + o.adds,
            abs_diffs: self.abs_diffs + o.abs_diffs,
            exps: self.exps + o.exps,
            divs: self.divs + o.divs,
        }
    }
}

impl AddAssign for OpTally {
    fn add_assign(&mut self, o: OpTally) {
        *self = *self + o;
    }
}

impl std::iter::Sum for OpTally {
    fn sum<I: Iterator<Item = OpTally>>(iter: I) -> OpTally {
        iter.fold(OpTally::ZERO, Add::add)
    }
}

/// Receives operation events from instrumented kernels.
///
/// The uncounted path uses [`NoCount`], which compiles to nothing.
pub trait OpSink {
    fn mults(&mut self, _n: u64) {}
    fn adds(&mut self, _n: u64) {}
    fn abs_diffs(&mut self, _n: u64) {}
    fn exps(&mut self, _n: u64) {}
    fn divs(&mut self, _n: u64) {}
}

/// Sink that discards every event.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoCount;

impl OpSink for NoCount {}

impl OpSink for OpTally {
    fn mults(&mut self, n: u64) {
        self.mults += n;
    }
    fn adds(&mut self, n: u64) {
        self.adds += n;
    }
    fn abs_diffs(&mut self, n: u64) {
        self.abs_diffs += n;
    }
    fn exps(&mut self, n: u64) {
        self.exps += n;
    }
    fn divs(&mut self, n: u64) {
        self.divs += n;
    }
}

/// Per-operation energy costs in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub pj_mult: f64,
    pub pj_add: f64,
    /// One subtraction; stripping the sign bit is treated as free.
    pub pj_abs_diff: f64,
    pub pj_exp: f64,
    pub pj_div: f64,
}

impl Default for EnergyModel {
    /// 32-bit float costs: 3.7 pJ per multiply, 0.9 pJ per add.
    /// Exponentials and divisions are outside the score scope and cost 0.
    fn default() -> Self {
        Self {
            pj_mult: 3.7,
            pj_add: 0.9,
            pj_abs_diff: 0.9,
            pj_exp: 0.0,
            pj_div: 0.0,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        let costs = [self.pj_mult, self.pj_add, self.pj_abs_diff, self.pj_exp, self.pj_div];
        if costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Parameter(format!("energy costs must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Closed-form tally for one score matrix of shape `n_q × n_k` with key dimension `d_k`.
pub fn score_op_counts(kind: ScoreKind, n_q: usize, n_k: usize, d_k: usize) -> OpTally {
    let terms = (n_q * n_k * d_k) as u64;
    match kind {
        ScoreKind::DotProduct => OpTally {
            mults: terms,
            adds: terms,
            ..OpTally::ZERO
        },
        ScoreKind::L1 => OpTally {
            abs_diffs: terms,
            adds: terms,
            ..OpTally::ZERO
        },
        // One difference, one square, one accumulate per term.
        ScoreKind::SquaredL2 => OpTally {
            abs_diffs: terms,
            mults: terms,
            adds: terms,
            ..OpTally::ZERO
        },
        // |x|^p as exp(p ln|x|): two transcendental calls and a multiply per term,
        // plus the final 1/p power per entry.
        ScoreKind::Lp(_) => {
            let entries = (n_q * n_k) as u64;
            OpTally {
                abs_diffs: terms,
                mults: terms + entries,
                adds: terms,
                exps: 2 * terms + 2 * entries,
                ..OpTally::ZERO
            }
        }
    }
}

/// Closed-form tally for a complete single-head attention layer on `n` tokens:
/// Q/K/V projections from `d_model`, scores, scaling, softmax, `αV`, and the
/// output projection back to `d_model`.
///
/// This widens the scope beyond the score matrix and is labelled as such
/// wherever it is reported.
pub fn full_layer_op_counts(kind: ScoreKind, n: usize, d_model: usize, d_k: usize) -> OpTally {
    let n64 = n as u64;
    let proj = (n * d_model * d_k) as u64;
    let projections = OpTally {
        mults: 3 * proj,
        adds: 3 * proj,
        ..OpTally::ZERO
    };
    let scores = score_op_counts(kind, n, n, d_k);
    // One multiply per entry for the λ/√Dk (or 1/√Dk) scale.
    let scale = OpTally {
        mults: n64 * n64,
        ..OpTally::ZERO
    };
    // Max-subtraction, exponent, row sum, normalising division.
    let softmax = OpTally {
        adds: 2 * n64 * n64,
        exps: n64 * n64,
        divs: n64 * n64,
        ..OpTally::ZERO
    };
    let weighted = OpTally {
        mults: (n * n * d_k) as u64,
        adds: (n * n * d_k) as u64,
        ..OpTally::ZERO
    };
    let out_proj = OpTally {
        mults: proj,
        adds: proj,
        ..OpTally::ZERO
    };
    projections + scores + scale + softmax + weighted + out_proj
}

/// Energy of a tally in picojoules.
pub fn energy_estimate(tally: &OpTally, model: &EnergyModel) -> f64 {
    tally.mults as f64 * model.pj_mult
        + tally.adds as f64 * model.pj_add
        + tally.abs_diffs as f64 * model.pj_abs_diff
        + tally.exps as f64 * model.pj_exp
        + tally.divs as f64 * model.pj_div
}

/// Dot-product vs L1 score energy for an `n × n` score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub n: usize,
    pub d_k: usize,
    pub dot_pj: f64,
    pub l1_pj: f64,
    pub reduction_fraction: f64,
    pub mult_add_ratio: f64,
}

pub fn reduction_report(n: usize, d_k: usize, model: &EnergyModel) -> Result<ReductionReport> {
    model.validate()?;
    let dot_pj = energy_estimate(&score_op_counts(ScoreKind::DotProduct, n, n, d_k), model);
    let l1_pj = energy_estimate(&score_op_counts(ScoreKind::L1, n, n, d_k), model);
    if dot_pj == 0.0 {
        return Err(Error::DegenerateModel(format!(
            "dot-product energy is zero for n={n}, d_k={d_k}"
        )));
    }
    if model.pj_add == 0.0 {
        return Err(Error::DegenerateModel("addition cost is zero".into()));
    }
    Ok(ReductionReport {
        n,
        d_k,
        dot_pj,
        l1_pj,
        reduction_fraction: 1.0 - l1_pj / dot_pj,
        mult_add_ratio: model.pj_mult / model.pj_add,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gpt_scale_counts() {
        let dot = score_op_counts(ScoreKind::DotProduct, 2048, 2048, 128);
        assert_eq!(dot.mults, 536_870_912);
        assert_eq!(dot.adds, 536_870_912);
        let l1 = score_op_counts(ScoreKind::L1, 2048, 2048, 128);
        assert_eq!(l1.abs_diffs, 536_870_912);
        assert_eq!(l1.adds, 536_870_912);
        assert_eq!(l1.mults, 0);
    }

    #[test]
    fn unit_case_counts() {
        assert_eq!(
            score_op_counts(ScoreKind::DotProduct, 1, 1, 1),
            OpTally { mults: 1, adds: 1, ..OpTally::ZERO }
        );
        assert_eq!(
            score_op_counts(ScoreKind::L1, 1, 1, 1),
            OpTally { abs_diffs: 1, adds: 1, ..OpTally::ZERO }
        );
    }

    #[test]
    fn energy_of_small_scores() {
        let m = EnergyModel::default();
        assert_eq!(energy_estimate(&OpTally::ZERO, &m), 0.0);
        let dot = energy_estimate(&score_op_counts(ScoreKind::DotProduct, 2, 2, 4), &m);
        assert!((dot - 73.6).abs() < 1e-9, "{dot}");
        let l1 = energy_estimate(&score_op_counts(ScoreKind::L1, 2, 2, 4), &m);
        assert!((l1 - 28.8).abs() < 1e-9, "{l1}");
    }

    #[test]
    fn default_reduction_and_ratio() {
        let r = reduction_report(2048, 128, &EnergyModel::default()).unwrap();
        assert!((r.reduction_fraction - (1.0 - 1.8 / 4.6)).abs() < 1e-12);
        assert!((r.reduction_fraction - 0.6087).abs() < 1e-4);
        assert_eq!(format!("{:.0}", r.reduction_fraction * 100.0), "61");
        assert!((r.mult_add_ratio - 4.111).abs() < 1e-3);
    }

    #[test]
    fn equal_cost_ops_give_no_reduction() {
        let m = EnergyModel {
            pj_abs_diff: 3.7,
            ..EnergyModel::default()
        };
        assert!(reduction_report(16, 16, &m).unwrap().reduction_fraction.abs() < 1e-15);
    }

    #[test]
    fn zero_cost_model_is_degenerate() {
        let m = EnergyModel {
            pj_mult: 0.0,
            pj_add: 0.0,
            pj_abs_diff: 0.0,
            pj_exp: 0.0,
            pj_div: 0.0,
        };
        assert!(matches!(reduction_report(4, 4, &m), Err(Error::DegenerateModel(_))));
        let neg = EnergyModel {
            pj_add: -1.0,
            ..EnergyModel::default()
        };
        assert!(reduction_report(4, 4, &neg).is_err());
    }

    #[test]
    fn tallies_add_and_sum() {
        let a = score_op_counts(ScoreKind::DotProduct, 3, 4, 5);
        let b = score_op_counts(ScoreKind::L1, 3, 4, 5);
        let s: OpTally = [a, b].into_iter().sum();
        assert_eq!(s, a + b);
        assert_eq!(s.adds, 120);
        assert_eq!(a.times(3).mults, 180);
    }

    #[test]
    fn full_layer_contains_score_scope() {
        let full = full_layer_op_counts(ScoreKind::L1, 8, 16, 16);
        let score = score_op_counts(ScoreKind::L1, 8, 8, 16);
        assert!(full.adds > score.adds && full.mults > 0 && full.exps == 64);
        assert_eq!(full.abs_diffs, score.abs_diffs);
    }
}
