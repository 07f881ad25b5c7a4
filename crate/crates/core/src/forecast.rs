//! Per-node expected values via autoregression, plus 3-sigma flagging.
//!
//! Each (node, metric) series gets an independent one-step-ahead AR
//! forecast fitted by least squares on history strictly before the target
//! timestamp. Fits are side-effect-free and independent across cells.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::panel::MetricPanel;

/// Default floor applied to sigma in [`detect_3sigma`] so zero-variance
/// series do not flag numerical noise.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("series of length {len} is too short for order {order} (need at least order + 2)")]
    InsufficientHistory { len: usize, order: usize },
    #[error("order must be at least 1")]
    ZeroOrder,
}

/// Autoregressive model of a single series: intercept plus `order` lag
/// coefficients, with the residual standard deviation of the fit.
#[derive(Debug, Clone)]
pub struct ArModel {
    order: usize,
    /// `[intercept, phi_1, ..., phi_order]`; `phi_k` multiplies the value
    /// `k` steps back.
    coeffs: Vec<f64>,
    residual_std: f64,
    train_len: usize,
}

impl ArModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn residual_std(&self) -> f64 {
        self.residual_std
    }

    pub fn train_len(&self) -> usize {
        self.train_len
    }

    /// One-step-ahead prediction from the last `order` values of `history`.
    pub fn predict_next(&self, history: &[f64]) -> f64 {
        assert!(history.len() >= self.order, "history shorter than order");
        let mut v = self.coeffs[0];
        for k in 1..=self.order {
            v += self.coeffs[k] * history[history.len() - k];
        }
        v
    }
}

/// Least-squares fit of `value_t` on the previous `order` values plus an
/// intercept. Rank-deficient designs are solved in the minimum-norm sense
/// (SVD); an intercept-only mean model is the fallback when even that
/// degenerates.
pub fn fit_ar(series: &[f64], order: usize) -> Result<ArModel, ForecastError> {
    if order == 0 {
        return Err(ForecastError::ZeroOrder);
    }
    if series.len() < order + 2 {
        return Err(ForecastError::InsufficientHistory {
            len: series.len(),
            order,
        });
    }
    Ok(fit_rows(series, order, None))
}

/// [`fit_ar`] plus one outlier-trimming pass: rows whose residual exceeds
/// three residual standard deviations are dropped and the model refitted.
/// Identical to `fit_ar` on clean series; on series carrying occasional
/// level shifts (injected anomalies in history) it keeps the forecast
/// anchored to normal behavior.
pub fn fit_ar_robust(series: &[f64], order: usize) -> Result<ArModel, ForecastError> {
    let first = fit_ar(series, order)?;
    let sigma = first.residual_std.max(DEFAULT_SIGMA_FLOOR);
    let rows = series.len() - order;
    let keep: Vec<bool> = (0..rows)
        .map(|r| {
            let t = order + r;
            let resid = series[t] - first.predict_next(&series[..t]);
            resid.abs() <= 3.0 * sigma
        })
        .collect();
    let kept = keep.iter().filter(|k| **k).count();
    if kept == rows || kept < order + 2 {
        return Ok(first);
    }
    Ok(fit_rows(series, order, Some(&keep)))
}

/// Least-squares AR fit over (a subset of) the regression rows.
fn fit_rows(series: &[f64], order: usize, keep: Option<&[bool]>) -> ArModel {
    let all_rows = series.len() - order;
    let row_ids: Vec<usize> = (0..all_rows)
        .filter(|&r| keep.is_none_or(|k| k[r]))
        .collect();
    let mut design = DMatrix::zeros(row_ids.len(), order + 1);
    let mut target = DVector::zeros(row_ids.len());
    for (i, &r) in row_ids.iter().enumerate() {
        let t = order + r;
        design[(i, 0)] = 1.0;
        for k in 1..=order {
            design[(i, k)] = series[t - k];
        }
        target[i] = series[t];
    }

    let coeffs: Vec<f64> = match min_norm_least_squares(&design, &target) {
        Some(sol) if sol.iter().all(|v| v.is_finite()) => sol,
        _ => mean_model_rows(series, order, &row_ids),
    };

    let residual_std = |coeffs: &[f64]| -> f64 {
        let mut sse = 0.0;
        for &r in &row_ids {
            let t = order + r;
            let mut pred = coeffs[0];
            for k in 1..=order {
                pred += coeffs[k] * series[t - k];
            }
            let resid = series[t] - pred;
            sse += resid * resid;
        }
        (sse / row_ids.len() as f64).sqrt()
    };
    let mut coeffs = coeffs;
    let mut std = residual_std(&coeffs);
    if !std.is_finite() || coeffs.iter().any(|c| !c.is_finite()) {
        coeffs = mean_model_rows(series, order, &row_ids);
        std = residual_std(&coeffs);
    }
    ArModel {
        order,
        coeffs,
        residual_std: std,
        train_len: series.len(),
    }
}

fn mean_model_rows(series: &[f64], order: usize, row_ids: &[usize]) -> Vec<f64> {
    let mean = row_ids
        .iter()
        .map(|&r| series[order + r])
        .sum::<f64>()
        / row_ids.len().max(1) as f64;
    let mut coeffs = vec![0.0; order + 1];
    coeffs[0] = mean;
    coeffs
}

/// Minimum-norm least squares via the eigendecomposition of the normal
/// equations; eigenvalues below a relative floor are treated as zero, so
/// rank-deficient designs (constant series, exact linear ramps) still get
/// an exact-fit solution.
fn min_norm_least_squares(design: &DMatrix<f64>, target: &DVector<f64>) -> Option<Vec<f64>> {
    let gram = design.transpose() * design;
    let rhs = design.transpose() * target;
    let eig = SymmetricEigen::new(gram);
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if lambda_max <= 0.0 || !lambda_max.is_finite() {
        return None;
    }
    let tol = lambda_max * 1e-12;
    let mut theta = DVector::zeros(design.ncols());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > tol {
            let v = eig.eigenvectors.column(i);
            theta += v.dot(&rhs) / lambda * v;
        }
    }
    Some(theta.as_slice().to_vec())
}


/// Default AR order for a panel with `t_len` timestamps.
pub fn default_order(t_len: usize) -> usize {
    (t_len / 3).clamp(1, 7)
}

/// Expected values and fit dispersions for every (node, metric) cell of a
/// panel at one timestamp.
#[derive(Debug, Clone)]
pub struct ForecastBundle {
    pub t: usize,
    /// Expected values `f` at `t` (single-timestamp panel).
    pub expected: MetricPanel,
    /// Residual standard deviation of each cell's fitted model.
    pub sigma: MetricPanel,
    /// Cells that fell back to a mean or last-value forecast.
    pub fallbacks: usize,
}

/// One-step-ahead forecast of every cell at timestamp `t`, using only
/// values strictly before `t`. Cells with fewer than `order + 2` history
/// points fall back to the history mean; cells with no history at all fall
/// back to the value observed at `t` (sigma 0). Both fallbacks are counted.
pub fn forecast_panel(panel: &MetricPanel, t: usize, order: usize) -> ForecastBundle {
    assert!(t < panel.t_len(), "timestamp out of range");
    let keys = panel.keys().to_vec();
    let metrics = panel.metrics().to_vec();
    let mut expected = MetricPanel::new(keys.clone(), metrics.clone(), 1);
    let mut sigma = MetricPanel::new(keys, metrics, 1);
    let mut fallbacks = 0usize;

    for node in 0..panel.keys().len() {
        for metric in 0..panel.metrics().len() {
            let history: Vec<f64> = (0..t)
                .filter_map(|u| panel.get_by_index(node, metric, u))
                .filter(|v| v.is_finite())
                .collect();
            let (f, s) = if history.is_empty() {
                fallbacks += 1;
                (panel.get_by_index(node, metric, t).unwrap_or(0.0), 0.0)
            } else if history.len() < order + 2 {
                fallbacks += 1;
                let mean = history.iter().sum::<f64>() / history.len() as f64;
                let var = history
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / history.len() as f64;
                (mean, var.sqrt())
            } else {
                let model = fit_ar_robust(&history, order).expect("length checked");
                (model.predict_next(&history), model.residual_std())
            };
            expected.set_by_index(node, metric, 0, f);
            sigma.set_by_index(node, metric, 0, s);
        }
    }
    ForecastBundle {
        t,
        expected,
        sigma,
        fallbacks,
    }
}

/// True iff `|v - f| > 3 * max(sigma, floor)` with the default floor.
pub fn detect_3sigma(v: f64, f: f64, sigma: f64) -> bool {
    detect_3sigma_with_floor(v, f, sigma, DEFAULT_SIGMA_FLOOR)
}

pub fn detect_3sigma_with_floor(v: f64, f: f64, sigma: f64, floor: f64) -> bool {
    debug_assert!(sigma >= 0.0);
    (v - f).abs() > 3.0 * sigma.max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::NodeKey;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_series_predicts_constant_with_zero_std() {
        let model = fit_ar(&[5.0; 6], 1).unwrap();
        assert_relative_eq!(model.predict_next(&[5.0; 6]), 5.0, max_relative = 1e-12);
        assert!(model.residual_std() < 1e-9);
    }

    #[test]
    fn linear_ramp_extrapolates_exactly() {
        // 1..=20 satisfies y_t = y_{t-1} + (y_{t-1} - y_{t-2}); the design
        // matrix is collinear but every least-squares solution predicts 21.
        let series: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        let model = fit_ar(&series, 2).unwrap();
        assert!((model.predict_next(&series) - 21.0).abs() < 1e-6);
        assert!(model.residual_std() < 1e-8);
    }

    #[test]
    fn too_short_series_is_an_error() {
        assert!(matches!(
            fit_ar(&[1.0, 2.0], 3),
            Err(ForecastError::InsufficientHistory { len: 2, order: 3 })
        ));
    }

    #[test]
    fn noiseless_ar_process_recovers_coefficients() {
        // Slowly decaying oscillation keeps the design well conditioned.
        let (c, phi1, phi2) = (0.7, 1.5, -0.9);
        let mut series = vec![2.0, 1.0];
        for t in 2..40 {
            let v = c + phi1 * series[t - 1] + phi2 * series[t - 2];
            series.push(v);
        }
        let model = fit_ar(&series, 2).unwrap();
        assert_relative_eq!(model.coeffs()[0], c, max_relative = 1e-6, epsilon = 1e-6);
        assert_relative_eq!(model.coeffs()[1], phi1, max_relative = 1e-6);
        assert_relative_eq!(model.coeffs()[2], phi2, max_relative = 1e-6);
        assert!(model.residual_std() < 1e-8);
    }

    fn one_cell_panel(values: &[Option<f64>]) -> MetricPanel {
        let key = NodeKey::leaf(vec!["x"]);
        let mut p = MetricPanel::new(vec![key.clone()], vec!["m".into()], values.len());
        for (t, v) in values.iter().enumerate() {
            if let Some(v) = v {
                p.set(&key, "m", t, *v);
            }
        }
        p
    }

    #[test]
    fn constant_panel_forecast_matches_panel() {
        let p = one_cell_panel(&[Some(4.0); 12]);
        let fc = forecast_panel(&p, 11, 3);
        assert_relative_eq!(
            fc.expected.get(&NodeKey::leaf(vec!["x"]), "m", 0).unwrap(),
            4.0,
            max_relative = 1e-9
        );
        assert_eq!(fc.fallbacks, 0);
    }

    #[test]
    fn single_timestamp_panel_falls_back_to_observed_value() {
        let p = one_cell_panel(&[Some(7.5)]);
        let fc = forecast_panel(&p, 0, 3);
        assert_eq!(fc.expected.get(&NodeKey::leaf(vec!["x"]), "m", 0), Some(7.5));
        assert_eq!(fc.sigma.get(&NodeKey::leaf(vec!["x"]), "m", 0), Some(0.0));
        assert_eq!(fc.fallbacks, 1); // node x metric = 1 cell
    }

    #[test]
    fn forecast_ignores_values_at_or_after_t() {
        let mut values: Vec<Option<f64>> = (0..20).map(|v| Some(v as f64)).collect();
        let p1 = one_cell_panel(&values);
        let f1 = forecast_panel(&p1, 15, 2);
        // perturb the future: everything from t onward
        for v in values.iter_mut().skip(15) {
            *v = Some(-1000.0);
        }
        let p2 = one_cell_panel(&values);
        let f2 = forecast_panel(&p2, 15, 2);
        assert_eq!(
            f1.expected.get(&NodeKey::leaf(vec!["x"]), "m", 0),
            f2.expected.get(&NodeKey::leaf(vec!["x"]), "m", 0)
        );
    }

    #[test]
    fn three_sigma_rule() {
        assert!(!detect_3sigma(10.0, 10.0, 2.0));
        assert!(detect_3sigma(17.0, 10.0, 2.0)); // 7 > 6
        assert!(!detect_3sigma(15.9, 10.0, 2.0));
        // sigma = 0: the floor only masks drift below 3e-8
        assert!(detect_3sigma(10.000001, 10.0, 0.0));
        assert!(!detect_3sigma(10.0 + 2e-8, 10.0, 0.0));
    }

    #[test]
    fn three_sigma_symmetric_in_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let f: f64 = rng.random_range(-5.0..5.0);
            let d: f64 = rng.random_range(0.0..10.0);
            let s: f64 = rng.random_range(0.0..3.0);
            assert_eq!(
                detect_3sigma(f + d, f, s),
                detect_3sigma(f - d, f, s)
            );
        }
    }
}
