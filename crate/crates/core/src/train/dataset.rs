use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::IndentationRun;
use crate::rng::Rng;
use crate::types::{Condition, DisplacementField, PointCloud, Sample, SampleMeta};

/// Multi-step pairs drawn from each indentation run.
pub const MULTI_STEP_PAIRS_PER_RUN: usize = 15;

/// Which simulated masses make up a sample's point cloud.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSelection {
    /// Every mass, in grid order.
    All,
    /// A fixed marker subset (grid indices, ascending) plus the contact mass,
    /// appended last when it is not itself a marker.
    Markers(Vec<usize>),
}

impl PointSelection {
    /// `rows`, and the position of `contact` within them.
    fn rows(&self, num_points: usize, contact: usize) -> (Vec<usize>, usize) {
        match self {
            PointSelection::All => ((0..num_points).collect(), contact),
            PointSelection::Markers(m) => {
                let mut rows = m.clone();
                let pos = match rows.iter().position(|&i| i == contact) {
                    Some(p) => p,
                    None => {
                        rows.push(contact);
                        rows.len() - 1
                    }
                };
                (rows, pos)
            }
        }
    }

    /// Evenly spaced `per_side × per_side` sub-grid of a `grid_n × grid_n`
    /// sheet, inset one spacing from the border when the grid allows it.
    pub fn marker_grid(grid_n: usize, per_side: usize) -> Result<Self> {
        if per_side < 2 || per_side > grid_n {
            return Err(Error::Config(format!("cannot place {per_side}×{per_side} markers on a {grid_n}-point grid")));
        }
        let (lo, hi) = if grid_n >= per_side + 2 { (1, grid_n - 2) } else { (0, grid_n - 1) };
        let coord = |s: usize| lo + ((hi - lo) * s + (per_side - 1) / 2) / (per_side - 1);
        let mut idx: Vec<usize> =
            (0..per_side).flat_map(|sj| (0..per_side).map(move |si| coord(sj) * grid_n + coord(si))).collect();
        idx.sort_unstable();
        idx.dedup();
        Ok(PointSelection::Markers(idx))
    }
}

/// The two supervised views of a set of indentation runs.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetModes {
    /// `t → t + 1` for every step of every run.
    pub single_step: Vec<Sample>,
    /// Pairs at least two steps apart.
    pub multi_step: Vec<Sample>,
}

impl DatasetModes {
    /// Training uses both modes together.
    pub fn combined(&self) -> Vec<Sample> {
        self.single_step.iter().chain(&self.multi_step).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.single_step.len() + self.multi_step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn make_sample(run: &IndentationRun, selection: &PointSelection, t_in: usize, t_out: usize) -> Result<Sample> {
    let a = &run.states[t_in];
    let b = &run.states[t_out];
    let (rows, contact_row) = selection.rows(a.positions.len(), run.location);
    let full_in = PointCloud::new(a.positions.clone())?;
    let full_out = PointCloud::new(b.positions.clone())?;
    let input = full_in.select(&rows)?;
    let output = full_out.select(&rows)?;
    let condition = Condition::new(input.points()[contact_row], output.points()[contact_row])?;
    let target = DisplacementField::between(&input, &output)?;
    let meta = SampleMeta { location: run.location, direction: run.direction_index, t_in, t_out, contact_row };
    Sample::new(input, condition, target, b.applied_force - a.applied_force, meta)
}

/// All `(t, t')` with `t' ≥ t + 2` over states `0..num_states`.
pub fn multi_step_pairs(num_states: usize) -> Vec<(usize, usize)> {
    (0..num_states).flat_map(|t| (t + 2..num_states).map(move |u| (t, u))).collect()
}

/// [`build_modes_with`] on full clouds.
pub fn build_modes(runs: &[IndentationRun], rng: &Rng) -> Result<DatasetModes> {
    build_modes_with(runs, rng, &PointSelection::All)
}

/// Single-step samples for every adjacent pair of states and up to
/// [`MULTI_STEP_PAIRS_PER_RUN`] distinct multi-step pairs per run, drawn
/// uniformly with a child of `rng` keyed by the run's location and
/// direction, so a run gets the same pairs in any subset of runs.
pub fn build_modes_with(runs: &[IndentationRun], rng: &Rng, selection: &PointSelection) -> Result<DatasetModes> {
    let mut single_step = Vec::new();
    let mut multi_step = Vec::new();
    for run in runs {
        let n = run.states.len();
        if n < 3 {
            return Err(Error::InvalidArgument(format!(
                "run at location {} has {n} states; multi-step pairs need at least 3",
                run.location
            )));
        }
        for t in 0..n - 1 {
            single_step.push(make_sample(run, selection, t, t + 1)?);
        }
        let pairs = multi_step_pairs(n);
        let mut child = rng.child(((run.location as u64) << 16) | run.direction_index as u64);
        let picks = child.sample_distinct(pairs.len(), MULTI_STEP_PAIRS_PER_RUN.min(pairs.len()))?;
        for p in picks {
            let (t, u) = pairs[p];
            multi_step.push(make_sample(run, selection, t, u)?);
        }
    }
    Ok(DatasetModes { single_step, multi_step })
}

/// Location-level `train:val:test` ratio and shuffle seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub ratios: [usize; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { ratios: [7, 2, 1], seed: 0 }
    }
}

/// Location ids (grid indices) per split, plus the matching runs.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationSplit {
    pub train_locations: Vec<usize>,
    pub val_locations: Vec<usize>,
    pub test_locations: Vec<usize>,
    pub train: Vec<IndentationRun>,
    pub val: Vec<IndentationRun>,
    pub test: Vec<IndentationRun>,
}

/// Shuffles the distinct locations with `spec.seed` and cuts them by ratio;
/// integer remainders go to the training split.
pub fn split_by_location(runs: &[IndentationRun], spec: &SplitSpec) -> Result<LocationSplit> {
    let parts: usize = spec.ratios.iter().sum();
    if parts == 0 {
        return Err(Error::Config("split ratios must not all be zero".into()));
    }
    let mut locations: Vec<usize> = Vec::new();
    for r in runs {
        if !locations.contains(&r.location) {
            locations.push(r.location);
        }
    }
    let total = locations.len();
    if total < parts {
        return Err(Error::InvalidArgument(format!(
            "{total} locations cannot be split {}:{}:{}",
            spec.ratios[0], spec.ratios[1], spec.ratios[2]
        )));
    }
    Rng::new(spec.seed).shuffle(&mut locations);
    let val_n = total * spec.ratios[1] / parts;
    let test_n = total * spec.ratios[2] / parts;
    let train_n = total - val_n - test_n;
    let train_locations = locations[..train_n].to_vec();
    let val_locations = locations[train_n..train_n + val_n].to_vec();
    let test_locations = locations[train_n + val_n..].to_vec();
    let pick = |locs: &[usize]| runs.iter().filter(|r| locs.contains(&r.location)).cloned().collect::<Vec<_>>();
    Ok(LocationSplit {
        train: pick(&train_locations),
        val: pick(&val_locations),
        test: pick(&test_locations),
        train_locations,
        val_locations,
        test_locations,
    })
}

/// Random `⌈fraction·N⌉`-point subset of a sample, in original order, always
/// keeping the contact point. Targets are restricted to the same rows.
pub fn augment_subsample(sample: &Sample, fraction: f64, min_points: usize, rng: &mut Rng) -> Result<Sample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("augmentation fraction must lie in (0, 1], got {fraction}")));
    }
    let n = sample.input.len();
    let m = ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    if m < min_points {
        return Err(Error::InvalidArgument(format!(
            "subsample of {m} points is too small for the kNN graph (need {min_points})"
        )));
    }
    if m >= n {
        return Ok(sample.clone());
    }
    let contact = sample.meta.contact_row;
    let others = rng.sample_distinct(n - 1, m - 1)?;
    let mut rows: Vec<usize> = others.into_iter().map(|i| if i >= contact { i + 1 } else { i }).collect();
    rows.push(contact);
    rows.sort_unstable();
    let contact_row = rows.iter().position(|&r| r == contact).expect("contact kept");
    let meta = SampleMeta { contact_row, ..sample.meta };
    Sample::new(
        sample.input.select(&rows)?,
        sample.condition,
        sample.target_displacement.select(&rows)?,
        sample.target_force_change,
        meta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msm::StaticState;

    /// Synthetic run: `n` points on a line, state t shifts the contact point down by t mm.
    fn fake_run(location: usize, n: usize, n_t: usize) -> IndentationRun {
        let states = (0..=n_t)
            .map(|t| {
                let mut positions: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
                positions[location][2] = -(t as f64);
                StaticState { positions, applied_force: t as f64 * 7.5 / n_t as f64, max_speed: 0.0, max_residual: 0.0 }
            })
            .collect();
        IndentationRun { location, location_ordinal: 0, direction_index: 0, direction: [0.0, 0.0, -1.0], states }
    }

    #[test]
    fn one_run_gives_fifteen_of_each() {
        let modes = build_modes(&[fake_run(3, 10, 15)], &Rng::new(0)).unwrap();
        assert_eq!(modes.single_step.len(), 15);
        assert_eq!(modes.multi_step.len(), 15);
        assert_eq!(modes.combined().len(), 30);
        assert!(modes.single_step.iter().all(|s| s.target_force_change == 0.5));
        for s in &modes.multi_step {
            assert!(s.meta.t_out >= s.meta.t_in + 2);
            assert!(s.target_force_change >= 1.0 && s.target_force_change <= 7.5);
        }
        let mut pairs: Vec<_> = modes.multi_step.iter().map(|s| (s.meta.t_in, s.meta.t_out)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        assert_eq!(pairs.len(), 15);
    }

    #[test]
    fn full_ramp_pair_has_full_force() {
        let run = fake_run(3, 10, 15);
        let s = make_sample(&run, &PointSelection::All, 0, 15).unwrap();
        assert_eq!(s.target_force_change, 7.5);
        assert_eq!(s.condition.start, [3.0, 0.0, 0.0]);
        assert_eq!(s.condition.end, [3.0, 0.0, -15.0]);
        assert_eq!(s.target_cloud().points()[3], s.condition.end);
    }

    #[test]
    fn short_runs_rejected() {
        assert!(build_modes(&[fake_run(0, 4, 1)], &Rng::new(0)).is_err());
        assert_eq!(multi_step_pairs(16).len(), 105);
    }

    #[test]
    fn markers_append_contact() {
        let run = fake_run(5, 12, 3);
        let sel = PointSelection::Markers(vec![0, 2, 4]);
        let s = make_sample(&run, &sel, 0, 2).unwrap();
        assert_eq!(s.input.len(), 4);
        assert_eq!(s.meta.contact_row, 3);
        let sel = PointSelection::Markers(vec![0, 5, 9]);
        let s = make_sample(&run, &sel, 0, 2).unwrap();
        assert_eq!(s.input.len(), 3);
        assert_eq!(s.meta.contact_row, 1);
    }

    #[test]
    fn marker_grid_shape() {
        let PointSelection::Markers(m) = PointSelection::marker_grid(16, 5).unwrap() else { panic!() };
        assert_eq!(m.len(), 25);
        assert_eq!(m[0], 16 + 1);
        assert_eq!(*m.last().unwrap(), 14 * 16 + 14);
        assert!(PointSelection::marker_grid(4, 5).is_err());
    }

    fn runs_for(locations: usize) -> Vec<IndentationRun> {
        (0..locations).flat_map(|l| (0..2).map(move |_| fake_run(l, locations, 3))).collect()
    }

    #[test]
    fn split_sizes() {
        let runs = runs_for(100);
        let s = split_by_location(&runs, &SplitSpec { ratios: [7, 2, 1], seed: 1 }).unwrap();
        assert_eq!((s.train_locations.len(), s.val_locations.len(), s.test_locations.len()), (70, 20, 10));
        assert_eq!(s.train.len(), 140);
        let runs = runs_for(20);
        let s = split_by_location(&runs, &SplitSpec { ratios: [12, 3, 5], seed: 1 }).unwrap();
        assert_eq!((s.train_locations.len(), s.val_locations.len(), s.test_locations.len()), (12, 3, 5));
        let s = split_by_location(&runs, &SplitSpec { ratios: [7, 2, 1], seed: 1 }).unwrap();
        assert_eq!((s.train_locations.len(), s.val_locations.len(), s.test_locations.len()), (14, 4, 2));
        assert!(split_by_location(&runs_for(5), &SplitSpec { ratios: [7, 2, 1], seed: 0 }).is_err());
    }

    #[test]
    fn splits_never_share_locations() {
        let runs = runs_for(37);
        for seed in 0..50 {
            let s = split_by_location(&runs, &SplitSpec { ratios: [7, 2, 1], seed }).unwrap();
            for l in &s.train_locations {
                assert!(!s.val_locations.contains(l) && !s.test_locations.contains(l));
            }
            for l in &s.val_locations {
                assert!(!s.test_locations.contains(l));
            }
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), runs.len());
        }
    }

    #[test]
    fn subsample_sizes_and_alignment() {
        let run = fake_run(700, 1024, 2);
        let s = make_sample(&run, &PointSelection::All, 0, 2).unwrap();
        let mut rng = Rng::new(3);
        let a = augment_subsample(&s, 0.1, 6, &mut rng).unwrap();
        assert_eq!(a.input.len(), 103);
        assert_eq!(a.input.points()[a.meta.contact_row], s.input.points()[700]);
        assert_eq!(a.condition, s.condition);
        // rows stay in original order and targets follow them
        let xs: Vec<f64> = a.input.points().iter().map(|p| p[0]).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
        for (p, d) in a.input.points().iter().zip(a.target_displacement.deltas()) {
            assert_eq!(*d, s.target_displacement.deltas()[p[0] as usize]);
        }
        assert_eq!(augment_subsample(&s, 1.0, 6, &mut rng).unwrap(), s);
        let run = fake_run(10, 256, 2);
        let s = make_sample(&run, &PointSelection::All, 0, 1).unwrap();
        assert_eq!(augment_subsample(&s, 0.1, 6, &mut rng).unwrap().input.len(), 26);
        assert!(augment_subsample(&s, 0.01, 6, &mut rng).is_err());
        assert!(augment_subsample(&s, 0.0, 6, &mut rng).is_err());
    }
}
