//! Per-location confidence series: monotone step fitting, smoothing and
//! first-detection extraction.

use chrono::{Datelike, NaiveDate};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LocationSeries {
    pub location_id: String,
    /// `(capture date, P_T)` with strictly increasing dates.
    pub points: Vec<(NaiveDate, f64)>,
}

impl LocationSeries {
    pub fn new(location_id: impl Into<String>, points: Vec<(NaiveDate, f64)>) -> Result<Self> {
        let location_id = location_id.into();
        if let Some(w) = points.windows(2).find(|w| w[0].0 >= w[1].0) {
            return Err(Error::schema(format!(
                "location {location_id}: capture dates not strictly increasing at {}",
                w[1].0
            )));
        }
        if let Some((d, c)) = points.iter().find(|(_, c)| !(0.0..=1.0).contains(c)) {
            return Err(Error::schema(format!(
                "location {location_id}: confidence {c} at {d} outside [0, 1]"
            )));
        }
        Ok(Self {
            location_id,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn confidences(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|&(_, c)| c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepFit {
    /// First index predicted "on"; `0` is always-on, `n` never-on.
    pub t0: usize,
    /// Sum of squared errors against the fitted step.
    pub residual: f64,
}

impl StepFit {
    pub fn value_at(&self, i: usize) -> f64 {
        if i < self.t0 {
            0.0
        } else {
            1.0
        }
    }
}

/// Least-squares projection onto the 0→1 step family, trying all `n + 1`
/// change positions. Ties go to the smallest `t0`.
pub fn fit_step(series: &LocationSeries) -> Result<StepFit> {
    if series.is_empty() {
        return Err(Error::range(format!(
            "location {} has an empty series",
            series.location_id
        )));
    }
    let n = series.len();
    let mut best = StepFit {
        t0: 0,
        residual: f64::INFINITY,
    };
    for t0 in 0..=n {
        let residual: f64 = series
            .confidences()
            .enumerate()
            .map(|(i, c)| {
                let target = if i < t0 { 0.0 } else { 1.0 };
                (c - target) * (c - target)
            })
            .sum();
        if residual < best.residual {
            best = StepFit { t0, residual };
        }
    }
    Ok(best)
}

/// Replace each confidence with the fitted step value.
pub fn smooth_series(series: &LocationSeries) -> Result<LocationSeries> {
    let fit = fit_step(series)?;
    Ok(LocationSeries {
        location_id: series.location_id.clone(),
        points: series
            .points
            .iter()
            .enumerate()
            .map(|(i, &(d, _))| (d, fit.value_at(i)))
            .collect(),
    })
}

/// Year of the earliest capture with confidence ≥ `threshold`.
pub fn first_detection_year(series: &LocationSeries, threshold: f64) -> Option<i32> {
    first_detection(series, threshold).map(|i| series.points[i].0.year())
}

/// Index of the earliest capture with confidence ≥ `threshold`.
pub fn first_detection(series: &LocationSeries, threshold: f64) -> Option<usize> {
    series.confidences().position(|c| c >= threshold)
}
