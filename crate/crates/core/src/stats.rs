//! One-way multivariate analysis of (co)variance with Wilks' Lambda and
//! Rao's F approximation.
//!
//! Without covariates this is the classic one-way MANOVA: with `E` the
//! pooled within-group SSCP matrix and `H` the between-group SSCP matrix,
//! `Λ = det(E) / det(E + H)`. With covariates, both the full model
//! (intercept + covariates + group dummies) and the reduced model
//! (intercept + covariates) are fitted by least squares and
//! `Λ = det(E_full) / det(E_reduced)`, which reduces to the formula above
//! when no covariates are given. Covariate columns that are linearly
//! dependent on the intercept or on each other are dropped and do not
//! consume error degrees of freedom.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("error SSCP matrix is singular (normalized det {0:e})")]
    SingularErrorMatrix(f64),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Observations (`n × p`), a group label per row, and optional covariates
/// (`n × q`).
#[derive(Debug, Clone, PartialEq)]
pub struct MancovaInput {
    pub observations: Vec<Vec<f64>>,
    pub groups: Vec<usize>,
    pub covariates: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilksResult {
    pub lambda: f64,
    pub f_stat: f64,
    pub df1: f64,
    pub df2: f64,
    pub p_value: f64,
}

/// Relative threshold on the normalized determinant of `E`.
const SINGULAR_TOL: f64 = 1e-12;
/// Relative residual norm below which a design column counts as dependent.
const RANK_TOL: f64 = 1e-10;

/// Determinant by LU factorization with partial pivoting.
pub fn determinant(matrix: &[Vec<f64>]) -> f64 {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        let p = a[col][col];
        det *= p;
        for row in col + 1..n {
            let factor = a[row][col] / p;
            if factor != 0.0 {
                for k in col..n {
                    a[row][k] -= factor * a[col][k];
                }
            }
        }
    }
    det
}

/// Orthonormal basis (as columns of length n) spanning `columns`, skipping
/// columns that are numerically dependent on earlier ones. Two passes of
/// modified Gram-Schmidt.
fn orthonormal_basis(columns: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for col in columns {
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > RANK_TOL * norm0 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Residual SSCP matrix of `y` (columns) after projecting out `basis`.
fn residual_sscp(y_cols: &[Vec<f64>], basis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let residuals: Vec<Vec<f64>> = y_cols
        .iter()
        .map(|col| {
            let mut r = col.clone();
            for _ in 0..2 {
                for q in basis {
                    let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                    r.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
                }
            }
            r
        })
        .collect();
    let p = residuals.len();
    let mut m = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in i..p {
            let s: f64 = residuals[i].iter().zip(&residuals[j]).map(|(a, b)| a * b).sum();
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    m
}

/// Determinant of `m` after scaling to unit diagonal by `diag`.
fn normalized_det(m: &[Vec<f64>], diag: &[f64]) -> f64 {
    let p = m.len();
    let scaled: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            (0..p)
                .map(|j| m[i][j] / (diag[i] * diag[j]).sqrt())
                .collect()
        })
        .collect();
    determinant(&scaled)
}

/// Rao's F approximation to Wilks' Lambda for `p` variables, hypothesis
/// degrees of freedom `df_h` and error degrees of freedom `df_e`. Exact
/// when `p ≤ 2` or `df_h ≤ 2`.
pub fn rao_f(lambda: f64, p: usize, df_h: usize, df_e: usize) -> WilksResult {
    let (pf, qf, ef) = (p as f64, df_h as f64, df_e as f64);
    let denom = pf * pf + qf * qf - 5.0;
    let s = if denom > 0.0 {
        ((pf * pf * qf * qf - 4.0) / denom).sqrt()
    } else {
        1.0
    };
    let m = ef + qf - (pf + qf + 1.0) / 2.0;
    let df1 = pf * qf;
    let df2 = m * s - df1 / 2.0 + 1.0;
    let root = lambda.powf(1.0 / s);
    let f_stat = ((1.0 - root) / root * df2 / df1).max(0.0);
    let p_value = f_sf(f_stat, df1, df2);
    WilksResult {
        lambda,
        f_stat,
        df1,
        df2,
        p_value,
    }
}

/// Upper tail of the F distribution through the regularized incomplete beta.
pub fn f_sf(f: f64, df1: f64, df2: f64) -> f64 {
    if !(f > 0.0) {
        return 1.0;
    }
    if !f.is_finite() {
        return 0.0;
    }
    let x = df2 / (df2 + df1 * f);
    beta_reg(df2 / 2.0, df1 / 2.0, x).clamp(0.0, 1.0)
}

pub fn wilks_manova(input: &MancovaInput) -> Result<WilksResult, StatsError> {
    let n = input.observations.len();
    if input.groups.len() != n {
        return Err(StatsError::DimensionMismatch(format!(
            "{n} observations but {} group labels",
            input.groups.len()
        )));
    }
    let p = input.observations.first().map_or(0, Vec::len);
    if p == 0 {
        return Err(StatsError::InsufficientData("no dependent variables".into()));
    }
    if input.observations.iter().any(|r| r.len() != p) {
        return Err(StatsError::DimensionMismatch("ragged observation rows".into()));
    }
    let mut labels: Vec<usize> = input.groups.clone();
    labels.sort_unstable();
    labels.dedup();
    let g = labels.len();
    if g < 2 {
        return Err(StatsError::InsufficientData("need at least two groups".into()));
    }
    for &l in &labels {
        let size = input.groups.iter().filter(|&&x| x == l).count();
        if size < 2 {
            return Err(StatsError::InsufficientData(format!(
                "group {l} has {size} row(s); need at least 2"
            )));
        }
    }

    let column = |rows: &[Vec<f64>], j: usize| -> Vec<f64> { rows.iter().map(|r| r[j]).collect() };
    let y_cols: Vec<Vec<f64>> = (0..p).map(|j| column(&input.observations, j)).collect();

    let mut reduced_design = vec![vec![1.0; n]];
    if let Some(cov) = &input.covariates {
        if cov.len() != n {
            return Err(StatsError::DimensionMismatch(format!(
                "{n} observations but {} covariate rows",
                cov.len()
            )));
        }
        let q = cov.first().map_or(0, Vec::len);
        if cov.iter().any(|r| r.len() != q) {
            return Err(StatsError::DimensionMismatch("ragged covariate rows".into()));
        }
        reduced_design.extend((0..q).map(|j| column(cov, j)));
    }
    let reduced = orthonormal_basis(&reduced_design);
    let q_eff = reduced.len() - 1;

    let mut full_design = reduced_design.clone();
    // g - 1 treatment dummies; the first label is the reference level
    for &l in &labels[1..] {
        full_design.push(
            input
                .groups
                .iter()
                .map(|&x| if x == l { 1.0 } else { 0.0 })
                .collect(),
        );
    }
    let full = orthonormal_basis(&full_design);
    let df_h = full.len() - reduced.len();
    if df_h == 0 {
        return Err(StatsError::InsufficientData(
            "group indicators are collinear with the covariates".into(),
        ));
    }
    if n <= p + q_eff + g {
        return Err(StatsError::InsufficientData(format!(
            "n = {n} must exceed p + q + groups = {}",
            p + q_eff + g
        )));
    }
    let df_e = n - full.len();

    let e_full = residual_sscp(&y_cols, &full);
    let e_reduced = residual_sscp(&y_cols, &reduced);
    let diag: Vec<f64> = (0..p).map(|i| e_reduced[i][i]).collect();
    // a column that is constant up to rounding carries no information
    for (d, col) in diag.iter().zip(&y_cols) {
        let raw: f64 = col.iter().map(|v| v * v).sum();
        if !(*d > RANK_TOL * RANK_TOL * raw) {
            return Err(StatsError::SingularErrorMatrix(0.0));
        }
    }
    let det_e = normalized_det(&e_full, &diag);
    let det_t = normalized_det(&e_reduced, &diag);
    if !(det_e > SINGULAR_TOL * det_t.abs().max(f64::MIN_POSITIVE)) || !det_e.is_finite() {
        return Err(StatsError::SingularErrorMatrix(det_e));
    }
    let lambda = (det_e / det_t).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(rao_f(lambda, p, df_h, df_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Reject,
    FailToReject,
}

pub const ALPHA: f64 = 0.05;

impl Verdict {
    /// Strict `p < α`.
    pub fn at(p_value: f64, alpha: f64) -> Self {
        if p_value < alpha {
            Self::Reject
        } else {
            Self::FailToReject
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDifference {
    pub sensor: String,
    pub n_phone: usize,
    pub n_watch: usize,
    pub result: WilksResult,
    pub alpha: f64,
    pub verdict: Verdict,
    pub summary: String,
}

/// Tests whether phone and watch rows (e.g. x, y, z per sample) share a
/// mean vector. Group 0 is phone, group 1 is watch.
pub fn device_difference_report(
    phone_rows: &[Vec<f64>],
    watch_rows: &[Vec<f64>],
    sensor: &str,
) -> Result<DeviceDifference, StatsError> {
    if phone_rows.is_empty() || watch_rows.is_empty() {
        return Err(StatsError::InsufficientData("both devices need rows".into()));
    }
    let p = phone_rows[0].len();
    if watch_rows[0].len() != p {
        return Err(StatsError::DimensionMismatch(format!(
            "phone rows have {p} variables, watch rows {}",
            watch_rows[0].len()
        )));
    }
    let mut observations = phone_rows.to_vec();
    observations.extend_from_slice(watch_rows);
    let mut groups = vec![0; phone_rows.len()];
    groups.extend(std::iter::repeat_n(1, watch_rows.len()));
    let result = wilks_manova(&MancovaInput {
        observations,
        groups,
        covariates: None,
    })?;
    let verdict = Verdict::at(result.p_value, ALPHA);
    let summary = format!(
        "{sensor}: Wilks' lambda = {:.6}, F({:.0}, {:.0}) = {:.4}, p = {:.3e} -> {} the null hypothesis of equal phone/watch means at alpha = {ALPHA}",
        result.lambda,
        result.df1,
        result.df2,
        result.f_stat,
        result.p_value,
        match verdict {
            Verdict::Reject => "reject",
            Verdict::FailToReject => "fail to reject",
        }
    );
    Ok(DeviceDifference {
        sensor: sensor.to_string(),
        n_phone: phone_rows.len(),
        n_watch: watch_rows.len(),
        result,
        alpha: ALPHA,
        verdict,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn one_var(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn hand_example() {
        let input = MancovaInput {
            observations: one_var(&[0.0, 1.0, 2.0, 3.0]),
            groups: vec![0, 0, 1, 1],
            covariates: None,
        };
        let r = wilks_manova(&input).unwrap();
        assert!((r.lambda - 0.2).abs() < 1e-9);
        assert!((r.f_stat - 8.0).abs() < 1e-9);
        assert!((r.df1 - 1.0).abs() < 1e-12);
        assert!((r.df2 - 2.0).abs() < 1e-12);
        // F(1,2) tail at 8: 1 - sqrt(8/10) by the t(2) closed form
        let expected = 1.0 - (8.0f64 / 10.0).sqrt();
        assert!((r.p_value - expected).abs() < 1e-9, "{}", r.p_value);
    }

    #[test]
    fn determinant_matches_cofactor_expansion() {
        let m = vec![
            vec![2.0, -1.0, 0.5],
            vec![0.3, 4.0, 1.0],
            vec![1.0, 2.0, -3.0],
        ];
        let cof = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        assert!((determinant(&m) - cof).abs() < 1e-12);
        assert_eq!(determinant(&[vec![1.0, 2.0], vec![2.0, 4.0]]), 0.0);
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize, p: usize, shift: f64) -> MancovaInput {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let observations = groups
            .iter()
            .map(|&g| (0..p).map(|j| normal.sample(rng) + shift * g as f64 * (j + 1) as f64).collect())
            .collect();
        MancovaInput {
            observations,
            groups,
            covariates: None,
        }
    }

    #[test]
    fn affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_input(&mut rng, 60, 3, 0.4);
        let base = wilks_manova(&input).unwrap();
        let mut transformed = input.clone();
        for row in transformed.observations.iter_mut() {
            row[1] = -3.5 * row[1] + 1e3;
            row[2] = 0.01 * row[2] - 7.0;
        }
        let r = wilks_manova(&transformed).unwrap();
        assert!((r.lambda - base.lambda).abs() < 1e-9);
    }

    #[test]
    fn constant_covariate_is_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut input = random_input(&mut rng, 50, 2, 0.3);
        let base = wilks_manova(&input).unwrap();
        input.covariates = Some(vec![vec![4.2]; 50]);
        let r = wilks_manova(&input).unwrap();
        assert!((r.lambda - base.lambda).abs() < 1e-9);
        assert!((r.f_stat - base.f_stat).abs() < 1e-9);
        assert!((r.p_value - base.p_value).abs() < 1e-9);
    }

    #[test]
    fn covariate_absorbs_its_effect() {
        // y depends on a covariate that is also shifted between groups;
        // partialling it out should remove the group effect.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let n = 80;
        let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let cov: Vec<Vec<f64>> = groups
            .iter()
            .map(|&g| vec![g as f64 * 3.0 + rng.random_range(-1.0..1.0)])
            .collect();
        let obs: Vec<Vec<f64>> = cov
            .iter()
            .map(|c| vec![2.0 * c[0] + normal.sample(&mut rng), -c[0] + normal.sample(&mut rng)])
            .collect();
        let without = wilks_manova(&MancovaInput {
            observations: obs.clone(),
            groups: groups.clone(),
            covariates: None,
        })
        .unwrap();
        let with = wilks_manova(&MancovaInput {
            observations: obs,
            groups,
            covariates: Some(cov),
        })
        .unwrap();
        assert!(without.p_value < 1e-6);
        assert!(with.lambda > without.lambda);
        assert_eq!(with.df2, without.df2 - 1.0);
    }

    #[test]
    fn row_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random_input(&mut rng, 40, 3, 0.5);
        let base = wilks_manova(&input).unwrap();
        let mut order: Vec<usize> = (0..40).collect();
        order.reverse();
        order.swap(3, 17);
        let permuted = MancovaInput {
            observations: order.iter().map(|&i| input.observations[i].clone()).collect(),
            groups: order.iter().map(|&i| input.groups[i]).collect(),
            covariates: None,
        };
        let r = wilks_manova(&permuted).unwrap();
        assert!((r.lambda - base.lambda).abs() < 1e-12);
        assert!((r.f_stat - base.f_stat).abs() < 1e-12 * base.f_stat.max(1.0));
        assert!((r.p_value - base.p_value).abs() < 1e-12);
    }

    #[test]
    fn null_groups_are_not_rejected_wildly() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let r = wilks_manova(&random_input(&mut rng, 200, 3, 0.0)).unwrap();
            assert!(r.p_value > 0.001, "seed {seed}: p = {}", r.p_value);
            assert!(r.lambda > 0.0 && r.lambda <= 1.0);
        }
    }

    #[test]
    fn error_paths() {
        let err = wilks_manova(&MancovaInput {
            observations: one_var(&[1.0, 2.0, 3.0]),
            groups: vec![0, 0, 0],
            covariates: None,
        });
        assert!(matches!(err, Err(StatsError::InsufficientData(_))));
        let err = wilks_manova(&MancovaInput {
            observations: one_var(&[1.0, 2.0, 3.0]),
            groups: vec![0, 1, 1],
            covariates: None,
        });
        assert!(matches!(err, Err(StatsError::InsufficientData(_))));
        // second variable is an exact multiple of the first
        let obs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let err = wilks_manova(&MancovaInput {
            observations: obs,
            groups: (0..10).map(|i| i % 2).collect(),
            covariates: None,
        });
        assert!(matches!(err, Err(StatsError::SingularErrorMatrix(_))));
        // constant column in both groups
        let obs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0]).collect();
        let err = wilks_manova(&MancovaInput {
            observations: obs,
            groups: (0..10).map(|i| i % 2).collect(),
            covariates: None,
        });
        assert!(matches!(err, Err(StatsError::SingularErrorMatrix(_))));
    }

    #[test]
    fn separable_devices_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let phone: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![normal.sample(&mut rng), normal.sample(&mut rng) - 9.0, normal.sample(&mut rng)])
            .collect();
        let watch: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![normal.sample(&mut rng) + 1.0, normal.sample(&mut rng) - 8.0, normal.sample(&mut rng) + 0.5])
            .collect();
        let report = device_difference_report(&phone, &watch, "accel").unwrap();
        assert!(report.result.p_value < 0.05);
        assert_eq!(report.verdict, Verdict::Reject);
        assert!(report.summary.contains("reject"));
    }

    #[test]
    fn near_identical_devices_do_not_produce_garbage() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let phone: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut watch = phone.clone();
        watch[0][0] += 1e-15;
        match device_difference_report(&phone, &watch, "accel") {
            Ok(r) => {
                assert!(r.result.lambda > 0.0 && r.result.lambda <= 1.0);
                assert!((0.0..=1.0).contains(&r.result.p_value));
                assert_eq!(r.verdict, Verdict::FailToReject);
            }
            Err(e) => assert!(matches!(e, StatsError::SingularErrorMatrix(_))),
        }
        // fully degenerate: every row identical
        let flat = vec![vec![1.0, 2.0, 3.0]; 20];
        let mut flat_w = flat.clone();
        flat_w[0][0] += 1e-15;
        assert!(matches!(
            device_difference_report(&flat, &flat_w, "accel"),
            Err(StatsError::SingularErrorMatrix(_))
        ));
    }

    #[test]
    fn alpha_boundary_is_strict() {
        assert_eq!(Verdict::at(0.05, ALPHA), Verdict::FailToReject);
        assert_eq!(Verdict::at(0.0499999, ALPHA), Verdict::Reject);
    }
}
