use rayon::prelude::*;

use super::{ControllerError, DiffusionPlan, MAX_CFG, MAX_STEPS, MIN_STEPS};

/// Normalized targets are kept this far inside `(0, 1)`.
pub const LABEL_EPS: f64 = 1e-6;

/// The brute-force `(steps, cfg)` search grid, sorted ascending on both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    steps: Vec<u32>,
    cfg: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self::new(vec![2, 5, 10, 20, 40, 80], vec![0.5, 1.0, 2.0, 4.0, 7.0, 9.5]).expect("default grid is valid")
    }
}

impl SweepGrid {
    pub fn new(mut steps: Vec<u32>, mut cfg: Vec<f64>) -> Result<Self, ControllerError> {
        steps.sort_unstable();
        steps.dedup();
        cfg.sort_by(f64::total_cmp);
        cfg.dedup();
        if steps.is_empty() || cfg.is_empty() {
            return Err(ControllerError::EmptyBatch);
        }
        for &s in &steps {
            for &c in &cfg {
                DiffusionPlan::new(s, c)?;
            }
        }
        Ok(Self { steps, cfg })
    }

    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn cfg(&self) -> &[f64] {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.steps.len() * self.cfg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in tie-break order: fewer steps first, then lower cfg.
    pub fn points(&self) -> Vec<DiffusionPlan> {
        self.steps
            .iter()
            .flat_map(|&s| self.cfg.iter().map(move |&c| DiffusionPlan { steps: s, cfg: c }))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleLabel {
    pub image_id: String,
    pub best_steps: u32,
    pub best_cfg: f64,
    pub best_score: f64,
    pub y_steps: f64,
    pub y_cfg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelFailure {
    pub image_id: String,
    pub plan: DiffusionPlan,
    pub reason: String,
}

/// `((steps − 2)/78, cfg/10)`, clamped into `[ε, 1 − ε]`.
pub fn normalize_label(steps: u32, cfg: f64) -> (f64, f64) {
    let ys = (steps as f64 - MIN_STEPS as f64) / (MAX_STEPS - MIN_STEPS) as f64;
    let yc = cfg / MAX_CFG;
    (ys.clamp(LABEL_EPS, 1.0 - LABEL_EPS), yc.clamp(LABEL_EPS, 1.0 - LABEL_EPS))
}

/// Scores every grid point for every image and keeps the argmin.
///
/// `score(i, plan)` decodes image `i` with `plan` and returns its distance to
/// the original; it must be reentrant. A failing grid point invalidates that
/// image. Results are in input order regardless of scheduling.
pub fn oracle_labels<F>(ids: &[String], grid: &SweepGrid, score: F) -> Vec<Result<OracleLabel, LabelFailure>>
where
    F: Fn(usize, DiffusionPlan) -> Result<f64, String> + Sync,
{
    let points = grid.points();
    let jobs: Vec<(usize, usize)> = (0..ids.len())
        .flat_map(|i| (0..points.len()).map(move |p| (i, p)))
        .collect();
    let scores: Vec<Result<f64, String>> = jobs.par_iter().map(|&(i, p)| score(i, points[p])).collect();
    scores
        .chunks(points.len())
        .enumerate()
        .map(|(i, row)| {
            let mut best: Option<(usize, f64)> = None;
            for (p, r) in row.iter().enumerate() {
                let s = match r {
                    Ok(s) if s.is_finite() => *s,
                    Ok(s) => {
                        return Err(LabelFailure {
                            image_id: ids[i].clone(),
                            plan: points[p],
                            reason: format!("non-finite score {s}"),
                        })
                    }
                    Err(e) => {
                        return Err(LabelFailure {
                            image_id: ids[i].clone(),
                            plan: points[p],
                            reason: e.clone(),
                        })
                    }
                };
                if best.is_none_or(|(_, b)| s < b) {
                    best = Some((p, s));
                }
            }
            let (p, s) = best.expect("grid is non-empty");
            let plan = points[p];
            let (y_steps, y_cfg) = normalize_label(plan.steps, plan.cfg);
            Ok(OracleLabel {
                image_id: ids[i].clone(),
                best_steps: plan.steps,
                best_cfg: plan.cfg,
                best_score: s,
                y_steps,
                y_cfg,
            })
        })
        .collect()
}
