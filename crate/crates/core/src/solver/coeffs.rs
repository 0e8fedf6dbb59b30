use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Lms,
    Ss,
    Pc,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Lms => "lms",
            SolverKind::Ss => "ss",
            SolverKind::Pc => "pc",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lms" => Ok(SolverKind::Lms),
            "ss" => Ok(SolverKind::Ss),
            "pc" => Ok(SolverKind::Pc),
            other => Err(Error::Argument(format!("unknown solver kind `{other}`"))),
        }
    }
}

/// Which model output the increment combines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prediction {
    Noise,
    Data,
}

/// Learnable parameter count of an untied solver.
pub fn param_count(kind: SolverKind, order: usize, n: usize) -> usize {
    let k = order;
    match kind {
        SolverKind::Lms => k * (2 * n + 1 - k) / 2,
        SolverKind::Ss => (k * k + k - 1) * n,
        SolverKind::Pc => k * (2 * n + 1 - k),
    }
}

/// Score evaluations per solve.
pub fn nfe(kind: SolverKind, order: usize, n: usize) -> usize {
    match kind {
        SolverKind::Lms => n,
        SolverKind::Ss => order * n,
        SolverKind::Pc => n + 1,
    }
}

/// Flat coefficient vector with a fixed index layout.
///
/// LMS row `i` (1-based) holds `b_{1..min(k,i), i}`; weight `j` multiplies the
/// evaluation `j` steps back. PC appends one corrector row per step of the same
/// width whose first weight multiplies the fresh evaluation at the predicted
/// state and the rest the cached evaluations `1..min(k,i)−1` steps back. SS
/// steps hold `b` (k), stage offsets `c_2..c_k` as fractions of the step in λ,
/// then a `(k−1) × k` block of stage weights of which only `l < j` is used.
/// In tied mode a single row (or step block) is shared by every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverCoefficients {
    pub kind: SolverKind,
    pub order: usize,
    pub n: usize,
    pub prediction: Prediction,
    #[serde(default)]
    pub tied: bool,
    pub params: Vec<f64>,
}

impl SolverCoefficients {
    pub fn zeros(
        kind: SolverKind,
        order: usize,
        n: usize,
        prediction: Prediction,
        tied: bool,
    ) -> Result<Self> {
        check_shape(order, n)?;
        let len = layout_len(kind, order, n, tied);
        Ok(Self {
            kind,
            order,
            n,
            prediction,
            tied,
            params: vec![0.0; len],
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_shape(self.order, self.n)?;
        let expect = layout_len(self.kind, self.order, self.n, self.tied);
        if self.params.len() != expect {
            return Err(Error::Argument(format!(
                "{} solver of order {} with N = {} needs {expect} parameters, got {}",
                self.kind,
                self.order,
                self.n,
                self.params.len()
            )));
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("SolverCoefficients"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn nfe(&self) -> usize {
        nfe(self.kind, self.order, self.n)
    }

    fn width(&self, i: usize) -> usize {
        self.order.min(i)
    }

    fn lms_offset(&self, i: usize) -> usize {
        if self.tied {
            0
        } else {
            (1..i).map(|l| self.width(l)).sum()
        }
    }

    /// Parameter indices of `b_{1..min(k,i), i}` (LMS, or the PC predictor).
    pub fn lms_row(&self, i: usize) -> Vec<usize> {
        debug_assert!(matches!(self.kind, SolverKind::Lms | SolverKind::Pc));
        let o = self.lms_offset(i);
        (o..o + self.width(i)).collect()
    }

    /// Parameter indices of the PC corrector row of step `i`.
    pub fn corrector_row(&self, i: usize) -> Vec<usize> {
        debug_assert_eq!(self.kind, SolverKind::Pc);
        let base = if self.tied {
            self.order
        } else {
            param_count(SolverKind::Lms, self.order, self.n)
        };
        let o = base + self.lms_offset(i);
        (o..o + self.width(i)).collect()
    }

    fn ss_base(&self, i: usize) -> usize {
        if self.tied {
            0
        } else {
            let k = self.order;
            (i - 1) * (k * k + k - 1)
        }
    }

    pub fn ss_b(&self, i: usize) -> Vec<usize> {
        let b = self.ss_base(i);
        (b..b + self.order).collect()
    }

    /// Stage offset index for stage `j` (1-based); stage 1 has none.
    pub fn ss_c(&self, i: usize, j: usize) -> Option<usize> {
        (j >= 2).then(|| self.ss_base(i) + self.order + (j - 2))
    }

    /// Index of `a_{j,i,l}` for `j ≥ 2`, `1 ≤ l ≤ k`.
    pub fn ss_a(&self, i: usize, j: usize, l: usize) -> usize {
        let k = self.order;
        self.ss_base(i) + k + (k - 1) + (j - 2) * k + (l - 1)
    }

    /// Rows that a consistent solver keeps summing to one.
    pub fn consistency_rows(&self) -> Vec<Vec<usize>> {
        let steps: Vec<usize> = if self.tied {
            vec![self.n.max(self.order)]
        } else {
            (1..=self.n).collect()
        };
        let mut rows = Vec::new();
        for &i in &steps {
            match self.kind {
                SolverKind::Lms => rows.push(self.lms_row(i)),
                SolverKind::Pc => {
                    rows.push(self.lms_row(i));
                    rows.push(self.corrector_row(i));
                }
                SolverKind::Ss => rows.push(self.ss_b(i)),
            }
        }
        rows
    }

    /// Euclidean projection of every consistency row onto `Σ b = 1`.
    pub fn project_consistency(&mut self) {
        for row in self.consistency_rows() {
            let s: f64 = row.iter().map(|&p| self.params[p]).sum();
            let shift = (s - 1.0) / row.len() as f64;
            for &p in &row {
                self.params[p] -= shift;
            }
        }
    }

    /// Human-readable label of every flat parameter.
    pub fn index_map(&self) -> Vec<String> {
        let mut labels = vec![String::new(); self.len()];
        let step_label = |i: usize| if self.tied { "*".to_string() } else { i.to_string() };
        let steps: Vec<usize> = if self.tied {
            vec![self.n.max(self.order)]
        } else {
            (1..=self.n).collect()
        };
        for &i in &steps {
            let si = step_label(i);
            match self.kind {
                SolverKind::Lms | SolverKind::Pc => {
                    for (j, p) in self.lms_row(i).into_iter().enumerate() {
                        labels[p] = format!("b[{si}][{}]", j + 1);
                    }
                    if self.kind == SolverKind::Pc {
                        for (j, p) in self.corrector_row(i).into_iter().enumerate() {
                            labels[p] = format!("ac[{si}][{}]", j + 1);
                        }
                    }
                }
                SolverKind::Ss => {
                    let k = self.order;
                    for (j, p) in self.ss_b(i).into_iter().enumerate() {
                        labels[p] = format!("ss_b[{si}][{}]", j + 1);
                    }
                    for j in 2..=k {
                        labels[self.ss_c(i, j).unwrap()] = format!("ss_c[{si}][{j}]");
                        for l in 1..=k {
                            let suffix = if l >= j { " (inert)" } else { "" };
                            labels[self.ss_a(i, j, l)] = format!("ss_a[{si}][{j}][{l}]{suffix}");
                        }
                    }
                }
            }
        }
        labels
    }
}

fn check_shape(order: usize, n: usize) -> Result<()> {
    if order < 1 {
        return Err(Error::Argument("solver order must be at least 1".into()));
    }
    if n < order {
        return Err(Error::Argument(format!(
            "order {order} exceeds the step count N = {n}"
        )));
    }
    Ok(())
}

fn layout_len(kind: SolverKind, order: usize, n: usize, tied: bool) -> usize {
    if !tied {
        return param_count(kind, order, n);
    }
    let k = order;
    match kind {
        SolverKind::Lms => k,
        SolverKind::Pc => 2 * k,
        SolverKind::Ss => k * k + k - 1,
    }
}
