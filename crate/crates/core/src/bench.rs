//! Wall-clock comparison of one simulated force step against model
//! inference on the same static state.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::model::{predict, ModelConfig, ModelWeights};
use crate::msm::{build_surface, force_schedule, run_to_stability, MsmConfig, MsmState, SURFACE_NORMAL_IN};
use crate::train::{PointSelection, Summary};
use crate::types::{Condition, PointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub repetitions: usize,
    /// Grid index to load; `None` picks the mass nearest the centre that is
    /// not a marker.
    pub location: Option<usize>,
    /// Marker sub-grid side for the small-cloud timing.
    pub markers_per_side: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { repetitions: 20, location: None, markers_per_side: 5 }
    }
}

/// Seconds per repetition, summarised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub points: usize,
    pub seconds: Summary,
    pub samples: Vec<f64>,
}

impl Timing {
    fn of(points: usize, samples: Vec<f64>) -> Timing {
        Timing { points, seconds: Summary::of(samples.iter().copied()), samples }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub location: usize,
    /// Ramp step the timed state sits at; the simulation relaxes it under
    /// the next step's force.
    pub from_step: usize,
    /// Solver iterations in one timed force step.
    pub solver_steps: usize,
    pub simulate: Timing,
    pub predict_full: Timing,
    pub predict_markers: Timing,
    /// Simulation time over full-cloud inference time.
    pub ratio: f64,
}

fn time<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<Vec<f64>> {
    f()?;
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            f()?;
            Ok(start.elapsed().as_secs_f64())
        })
        .collect()
}

/// Relaxes the sheet to the middle of a normal-direction ramp, then times
/// the next force step against `predict` on that state, once on every mass
/// and once on a marker sub-grid plus the contact point.
pub fn bench<T: Real>(msm: &MsmConfig, weights: &ModelWeights<T>, model: &ModelConfig, config: &BenchConfig) -> Result<BenchReport> {
    if config.repetitions == 0 {
        return Err(Error::InvalidArgument("bench needs at least one repetition".into()));
    }
    let n = msm.grid_n;
    let markers = match PointSelection::marker_grid(n, config.markers_per_side)? {
        PointSelection::Markers(m) => m,
        PointSelection::All => unreachable!("marker_grid returns markers"),
    };
    let location = match config.location {
        Some(l) => l,
        None => {
            let c = (n - 1) as f64 / 2.0;
            let dist = |i: usize| ((i / n) as f64 - c).powi(2) + ((i % n) as f64 - c).powi(2);
            (0..msm.num_points())
                .filter(|i| !markers.contains(i))
                .min_by(|a, b| dist(*a).total_cmp(&dist(*b)).then(a.cmp(b)))
                .ok_or_else(|| Error::InvalidArgument("every mass is a marker".into()))?
        }
    };
    if location >= msm.num_points() {
        return Err(Error::InvalidArgument(format!("location {location} is outside the grid")));
    }
    let schedule = force_schedule(msm);
    let from_step = schedule.len() / 2;
    let load = |state: &mut MsmState, f: f64| {
        state.set_external_force(location, [f * SURFACE_NORMAL_IN[0], f * SURFACE_NORMAL_IN[1], f * SURFACE_NORMAL_IN[2]])
    };

    let mut state = build_surface(msm)?;
    for &f in &schedule[..from_step] {
        load(&mut state, f);
        state = run_to_stability(&state, msm)?.0;
    }
    let mut next = state.clone();
    load(&mut next, schedule[from_step]);
    let (relaxed, solver_steps, _) = run_to_stability(&next, msm)?;

    let simulate = time(config.repetitions, || run_to_stability(&next, msm).map(|_| ()))?;

    let full = PointCloud::new(state.positions_mm())?;
    let condition = Condition::new(full.points()[location], relaxed.positions_mm()[location])?;
    let predict_full = time(config.repetitions, || predict(&full, &condition, weights, model).map(|_| ()))?;

    let mut rows = markers;
    if !rows.contains(&location) {
        rows.push(location);
    }
    let small = full.select(&rows)?;
    let predict_markers = time(config.repetitions, || predict(&small, &condition, weights, model).map(|_| ()))?;

    let simulate = Timing::of(full.len(), simulate);
    let predict_full = Timing::of(full.len(), predict_full);
    let predict_markers = Timing::of(small.len(), predict_markers);
    let ratio = simulate.seconds.mean / predict_full.seconds.mean;
    Ok(BenchReport {
        repetitions: config.repetitions,
        location,
        from_step,
        solver_steps,
        simulate,
        predict_full,
        predict_markers,
        ratio,
    })
}
