//! Rater and model agreement statistics, all in `f64`.

mod table;

use serde::Serialize;

pub use table::ScoreTable;

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("{0} undefined: reference has no {1} slides")]
    UndefinedAgreement(&'static str, &'static str),
    #[error("unknown score column `{0}`")]
    MissingColumn(String),
    #[error("thresholds must be non-empty and ascending")]
    Thresholds,
    #[error("score table: {0}")]
    Table(String),
    #[error("score csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StatsError>;

fn same_len(x: &[f64], y: &[f64], need: usize) -> Result<usize> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < need {
        return Err(StatsError::TooFew { need, got: x.len() });
    }
    Ok(x.len())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Centered sums `(x̄, ȳ, Sxx, Syy, Sxy)`.
fn centered_sums(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    (mx, my, sxx, syy, sxy)
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y, 2)?;
    let (_, _, sxx, syy, sxy) = centered_sums(x, y);
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Lin's concordance correlation coefficient with population moments,
/// `2·s_xy / (s_x² + s_y² + (x̄−ȳ)²)`, evaluated on sums (the `1/n` cancels).
pub fn lin_ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = same_len(x, y, 2)? as f64;
    let (mx, my, sxx, syy, sxy) = centered_sums(x, y);
    let den = sxx + syy + n * (mx - my) * (mx - my);
    if den == 0.0 {
        // Both constant and equal.
        return Ok(1.0);
    }
    if sxx == 0.0 && syy == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * sxy / den)
}

/// Mean absolute error.
pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = same_len(x, y, 1)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConcordanceReport {
    pub n: usize,
    pub lcc: f64,
    pub pcc: f64,
    pub mae: f64,
}

pub fn concordance(candidate: &[f64], reference: &[f64]) -> Result<ConcordanceReport> {
    Ok(ConcordanceReport {
        n: candidate.len(),
        lcc: lin_ccc(candidate, reference)?,
        pcc: pearson(candidate, reference)?,
        mae: mae(candidate, reference)?,
    })
}

/// Positive status rule: `score ≥ cutoff`, or `score > cutoff` when strict.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StatusRule {
    pub cutoff: f64,
    pub strict: bool,
}

impl Default for StatusRule {
    fn default() -> Self {
        Self { cutoff: 25.0, strict: false }
    }
}

impl StatusRule {
    pub fn positive(&self, score: f64) -> bool {
        if self.strict {
            score > self.cutoff
        } else {
            score >= self.cutoff
        }
    }
}

/// Confusion counts of candidate status against reference status.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AgreementCounts {
    pub both_pos: usize,
    pub both_neg: usize,
    /// Candidate positive, reference negative.
    pub cand_only: usize,
    /// Candidate negative, reference positive.
    pub ref_only: usize,
}

impl AgreementCounts {
    pub fn tally(candidate: &[f64], reference: &[f64], rule: StatusRule) -> Result<Self> {
        same_len(candidate, reference, 1)?;
        let mut c = Self::default();
        for (&a, &b) in candidate.iter().zip(reference) {
            match (rule.positive(a), rule.positive(b)) {
                (true, true) => c.both_pos += 1,
                (false, false) => c.both_neg += 1,
                (true, false) => c.cand_only += 1,
                (false, true) => c.ref_only += 1,
            }
        }
        Ok(c)
    }

    pub fn n(&self) -> usize {
        self.both_pos + self.both_neg + self.cand_only + self.ref_only
    }

    pub fn ref_positives(&self) -> usize {
        self.both_pos + self.ref_only
    }

    pub fn ref_negatives(&self) -> usize {
        self.both_neg + self.cand_only
    }

    pub fn opa(&self) -> f64 {
        (self.both_pos + self.both_neg) as f64 / self.n() as f64
    }

    pub fn ppa(&self) -> Option<f64> {
        let d = self.ref_positives();
        (d > 0).then(|| self.both_pos as f64 / d as f64)
    }

    pub fn npa(&self) -> Option<f64> {
        let d = self.ref_negatives();
        (d > 0).then(|| self.both_neg as f64 / d as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AgreementReport {
    pub cutoff: f64,
    pub opa: f64,
    pub npa: f64,
    pub ppa: f64,
}

/// Overall, negative and positive percent agreement at a cutoff, NPA/PPA
/// relative to the reference statuses.
pub fn status_agreement(candidate: &[f64], reference: &[f64], rule: StatusRule) -> Result<AgreementReport> {
    let c = AgreementCounts::tally(candidate, reference, rule)?;
    Ok(AgreementReport {
        cutoff: rule.cutoff,
        opa: c.opa(),
        npa: c.npa().ok_or(StatsError::UndefinedAgreement("NPA", "negative"))?,
        ppa: c.ppa().ok_or(StatsError::UndefinedAgreement("PPA", "positive"))?,
    })
}

/// Per-slide median of the columns; the lower median for an even count.
pub fn median_consolidate(columns: &[&[f64]]) -> Result<Vec<f64>> {
    let first = columns.first().ok_or(StatsError::TooFew { need: 1, got: 0 })?;
    for c in columns {
        same_len(first, c, 0)?;
    }
    let k = columns.len();
    let mut buf = vec![0.0; k];
    Ok((0..first.len())
        .map(|i| {
            for (b, c) in buf.iter_mut().zip(columns) {
                *b = c[i];
            }
            buf.sort_by(|a, b| a.total_cmp(b));
            buf[(k - 1) / 2]
        })
        .collect())
}

/// Normalization of the pairwise rater difference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaScale {
    /// `Σ_{i<j} |a_i − a_j| / (n(n−1))`: the 1/6 factor for three raters,
    /// half the mean pairwise difference.
    #[default]
    HalfPairMean,
    /// Mean absolute difference over unordered pairs.
    PairMean,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RaterVariability {
    pub delta: Vec<f64>,
}

/// Per-slide inter-rater variability Δ.
pub fn rater_variability(columns: &[&[f64]], scale: DeltaScale) -> Result<RaterVariability> {
    if columns.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: columns.len() });
    }
    for c in columns {
        same_len(columns[0], c, 0)?;
    }
    let k = columns.len();
    let den = match scale {
        DeltaScale::HalfPairMean => (k * (k - 1)) as f64,
        DeltaScale::PairMean => (k * (k - 1) / 2) as f64,
    };
    let delta = (0..columns[0].len())
        .map(|s| {
            let mut sum = 0.0;
            for i in 0..k {
                for j in i + 1..k {
                    sum += (columns[i][s] - columns[j][s]).abs();
                }
            }
            sum / den
        })
        .collect();
    Ok(RaterVariability { delta })
}

/// Metrics over the slides whose Δ stays at or below one threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub included: usize,
    pub included_fraction: f64,
    /// `None` when fewer than two slides are included or a correlation is
    /// undefined on the subset.
    pub concordance: Option<ConcordanceReport>,
    pub agreement: Option<AgreementCounts>,
}

pub fn filtered_concordance_curve(
    candidate: &[f64],
    reference: &[f64],
    variability: &RaterVariability,
    thresholds: &[f64],
    rule: StatusRule,
) -> Result<Vec<CurvePoint>> {
    let n = same_len(candidate, reference, 1)?;
    same_len(candidate, &variability.delta, 1)?;
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(StatsError::Thresholds);
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let keep: Vec<usize> = (0..n).filter(|&i| variability.delta[i] <= t).collect();
            let c: Vec<f64> = keep.iter().map(|&i| candidate[i]).collect();
            let r: Vec<f64> = keep.iter().map(|&i| reference[i]).collect();
            let defined = keep.len() >= 2;
            CurvePoint {
                threshold: t,
                included: keep.len(),
                included_fraction: keep.len() as f64 / n as f64,
                concordance: if defined { concordance(&c, &r).ok() } else { None },
                agreement: if defined { AgreementCounts::tally(&c, &r, rule).ok() } else { None },
            }
        })
        .collect())
}

/// One candidate/reference comparison in a table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub candidate: String,
    pub reference: String,
    pub concordance: Option<ConcordanceReport>,
    pub agreement: AgreementCounts,
}

impl Comparison {
    fn new(candidate: &str, reference: &str, c: &[f64], r: &[f64], rule: StatusRule) -> Result<Self> {
        Ok(Self {
            candidate: candidate.to_string(),
            reference: reference.to_string(),
            concordance: concordance(c, r).ok(),
            agreement: AgreementCounts::tally(c, r, rule)?,
        })
    }
}

/// Every ordered pair of distinct columns; the reference supplies the
/// NPA/PPA strata.
pub fn pairwise_table(table: &ScoreTable, columns: &[&str], rule: StatusRule) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for &r in columns {
        for &c in columns {
            if c != r {
                out.push(Comparison::new(c, r, table.column(c)?, table.column(r)?, rule)?);
            }
        }
    }
    Ok(out)
}

/// Each column against the median of the remaining columns.
pub fn leave_one_out_analysis(table: &ScoreTable, columns: &[&str], rule: StatusRule) -> Result<Vec<Comparison>> {
    if columns.len() < 4 {
        return Err(StatsError::TooFew { need: 4, got: columns.len() });
    }
    let data: Vec<&[f64]> = columns.iter().map(|c| table.column(c)).collect::<Result<_>>()?;
    (0..columns.len())
        .map(|i| {
            let rest: Vec<&[f64]> = (0..columns.len()).filter(|&j| j != i).map(|j| data[j]).collect();
            let med = median_consolidate(&rest)?;
            Comparison::new(columns[i], &format!("median(others of {})", columns[i]), data[i], &med, rule)
        })
        .collect()
}
