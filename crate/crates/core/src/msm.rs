//! Mass-spring surface simulator.
//!
//! A single-layer sheet of point masses on a triangulated grid. Neighbouring
//! masses are joined by linear springs, and every mass is tied to its own
//! rest position by a fixed spring. A point force is ramped up in `n_t`
//! equal increments; after each increment the sheet is integrated with
//! semi-implicit Euler until it is quasi-static.
//!
//! Physics runs in SI units (metres, seconds, newtons). Positions leaving
//! this module through [`IndentationRun`] are in millimetres.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{sample_unit_direction_in_cone, Rng};
use crate::types::{norm3, sub3, Vec3};

pub const MM_PER_M: f64 = 1000.0;

/// Direction of a push straight into the undeformed sheet.
pub const SURFACE_NORMAL_IN: Vec3 = [0.0, 0.0, -1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsmConfig {
    /// Sheet edge length, mm.
    pub side_length: f64,
    /// Masses per side.
    pub grid_n: usize,
    /// kg per mass.
    pub mass: f64,
    /// Viscous damping coefficient, N·s/m.
    pub damping: f64,
    /// Integration step, s.
    pub dt: f64,
    /// Between-mass spring stiffness, N/m.
    pub k_between: f64,
    /// Anchor spring stiffness, N/m.
    pub k_fixed: f64,
    /// Peak applied force, N.
    pub f_max: f64,
    pub n_t: usize,
    /// Masses sharing the applied force.
    pub n_n: usize,
    /// Directions per location, the surface normal included.
    pub n_directions: usize,
    pub n_locations: usize,
    /// Maximum angle between sampled directions and the normal, degrees.
    pub cone_half_angle_deg: f64,
    /// Quasi-static speed threshold, m/s.
    pub stability_v: f64,
    /// Quasi-static out-of-balance force threshold, N.
    pub stability_f: f64,
    pub max_steps_per_state: usize,
}

impl Default for MsmConfig {
    fn default() -> Self {
        MsmConfig {
            side_length: 100.0,
            grid_n: 32,
            mass: 0.00016,
            damping: 0.1,
            dt: 0.0001,
            k_between: 100.0,
            k_fixed: 21.0,
            f_max: 7.5,
            n_t: 15,
            n_n: 1,
            n_directions: 11,
            n_locations: 100,
            cone_half_angle_deg: 45.0,
            stability_v: 0.02,
            stability_f: 0.02,
            max_steps_per_state: 2_000_000,
        }
    }
}

impl MsmConfig {
    /// 16×16 grid, 20 locations, 3 directions: 900 non-rest states.
    pub fn desk() -> Self {
        MsmConfig { grid_n: 16, n_locations: 20, n_directions: 3, ..Self::default() }
    }

    /// Stand-in target domain for transfer learning: a softer between-mass
    /// spring and a stiffer anchor than the source simulator.
    pub fn transfer_target() -> Self {
        MsmConfig { k_between: 60.0, k_fixed: 35.0, n_locations: 16, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("side_length", self.side_length),
            ("mass", self.mass),
            ("damping", self.damping),
            ("dt", self.dt),
            ("k_between", self.k_between),
            ("k_fixed", self.k_fixed),
            ("stability_v", self.stability_v),
            ("stability_f", self.stability_f),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("msm.{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.f_max >= 0.0 && self.f_max.is_finite()) {
            return Err(Error::Config(format!("msm.f_max must be non-negative, got {}", self.f_max)));
        }
        if self.grid_n < 2 {
            return Err(Error::Config("msm.grid_n must be at least 2".into()));
        }
        if self.n_t < 1 || self.n_n < 1 || self.n_directions < 1 || self.max_steps_per_state < 1 {
            return Err(Error::Config("msm.n_t, n_n, n_directions and max_steps_per_state must be at least 1".into()));
        }
        if !(0.0..=90.0).contains(&self.cone_half_angle_deg) {
            return Err(Error::Config("msm.cone_half_angle_deg must lie in [0, 90]".into()));
        }
        if self.n_n > self.grid_n * self.grid_n {
            return Err(Error::Config("msm.n_n exceeds the number of masses".into()));
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.grid_n * self.grid_n
    }

    /// Grid spacing in metres.
    pub fn spacing_m(&self) -> f64 {
        self.side_length / MM_PER_M / (self.grid_n - 1) as f64
    }

    /// Grid indices with a full neighbourhood (outermost ring excluded).
    pub fn interior_indices(&self) -> Vec<usize> {
        let n = self.grid_n;
        (1..n.saturating_sub(1)).flat_map(|j| (1..n - 1).map(move |i| j * n + i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    /// Metres.
    pub rest_length: f64,
    /// N/m.
    pub stiffness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsmState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    rest_positions: Vec<Vec3>,
    springs: Vec<Spring>,
    pub external_force: Vec<Vec3>,
    pub net_force_cache: Vec<Vec3>,
}

impl MsmState {
    /// State at rest (`positions == rest_positions`, zero velocity).
    pub fn from_parts(rest_positions: Vec<Vec3>, springs: Vec<Spring>) -> Result<Self> {
        let n = rest_positions.len();
        if n == 0 {
            return Err(Error::InvalidArgument("a mass-spring state needs at least one mass".into()));
        }
        if let Some(i) = rest_positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::BlowUp { index: i });
        }
        for s in &springs {
            if s.i == s.j || s.i >= n || s.j >= n {
                return Err(Error::InvalidArgument(format!("spring ({}, {}) is invalid for {n} masses", s.i, s.j)));
            }
            if !(s.rest_length > 0.0) || !(s.stiffness > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "spring ({}, {}) needs positive rest length and stiffness",
                    s.i, s.j
                )));
            }
        }
        Ok(MsmState {
            positions: rest_positions.clone(),
            velocities: vec![[0.0; 3]; n],
            rest_positions,
            springs,
            external_force: vec![[0.0; 3]; n],
            net_force_cache: vec![[0.0; 3]; n],
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn rest_positions(&self) -> &[Vec3] {
        &self.rest_positions
    }

    pub fn springs(&self) -> &[Spring] {
        &self.springs
    }

    pub fn set_external_force(&mut self, index: usize, force: Vec3) {
        self.external_force[index] = force;
    }

    pub fn clear_external_forces(&mut self) {
        self.external_force.iter_mut().for_each(|f| *f = [0.0; 3]);
    }

    /// Shifts current and rest positions by `offset` metres.
    pub fn translate(&mut self, offset: Vec3) {
        for p in self.positions.iter_mut().chain(self.rest_positions.iter_mut()) {
            for c in 0..3 {
                p[c] += offset[c];
            }
        }
    }

    /// Current positions in millimetres.
    pub fn positions_mm(&self) -> Vec<Vec3> {
        self.positions.iter().map(|p| [p[0] * MM_PER_M, p[1] * MM_PER_M, p[2] * MM_PER_M]).collect()
    }

    fn accumulate_forces(&self, config: &MsmConfig, out: &mut [Vec3]) -> Result<()> {
        for (i, p) in self.positions.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::BlowUp { index: i });
            }
            let v = self.velocities[i];
            let r = self.rest_positions[i];
            let e = self.external_force[i];
            for c in 0..3 {
                out[i][c] = -config.k_fixed * (p[c] - r[c]) - config.damping * v[c] + e[c];
            }
        }
        for s in &self.springs {
            let d = sub3(self.positions[s.i], self.positions[s.j]);
            let len = norm3(d);
            if len == 0.0 {
                continue;
            }
            let scale = -s.stiffness * (len - s.rest_length) / len;
            for c in 0..3 {
                let f = scale * d[c];
                out[s.i][c] += f;
                out[s.j][c] -= f;
            }
        }
        Ok(())
    }
}

/// Triangulated `grid_n × grid_n` sheet in the `z = 0` plane, at rest.
///
/// Every cell gets one diagonal, oriented towards the sheet centre, which
/// makes the mesh symmetric under reflection about both centre lines.
pub fn build_surface(config: &MsmConfig) -> Result<MsmState> {
    config.validate()?;
    let n = config.grid_n;
    let h = config.spacing_m();
    let idx = |i: usize, j: usize| j * n + i;
    let rest: Vec<Vec3> = (0..n).flat_map(|j| (0..n).map(move |i| [i as f64 * h, j as f64 * h, 0.0])).collect();

    let cells = n - 1;
    let mut pairs = Vec::with_capacity(3 * n * n);
    for j in 0..n {
        for i in 0..n {
            if i + 1 < n {
                pairs.push((idx(i, j), idx(i + 1, j)));
            }
            if j + 1 < n {
                pairs.push((idx(i, j), idx(i, j + 1)));
            }
        }
    }
    for cj in 0..cells {
        for ci in 0..cells {
            let left = 2 * ci + 1 < cells;
            let bottom = 2 * cj + 1 < cells;
            if left == bottom {
                pairs.push((idx(ci, cj), idx(ci + 1, cj + 1)));
            } else {
                pairs.push((idx(ci + 1, cj), idx(ci, cj + 1)));
            }
        }
    }
    let springs = pairs
        .into_iter()
        .map(|(a, b)| Spring { i: a, j: b, rest_length: norm3(sub3(rest[a], rest[b])), stiffness: config.k_between })
        .collect();
    MsmState::from_parts(rest, springs)
}

/// Net force on every mass: springs, anchors, damping and external load.
pub fn net_forces(state: &MsmState, config: &MsmConfig) -> Result<Vec<Vec3>> {
    let mut out = vec![[0.0; 3]; state.len()];
    state.accumulate_forces(config, &mut out)?;
    Ok(out)
}

/// One semi-implicit Euler step: `v += F/m·dt`, then `p += v·dt`.
pub fn step(state: &MsmState, config: &MsmConfig) -> Result<MsmState> {
    let mut next = state.clone();
    step_in_place(&mut next, config)?;
    Ok(next)
}

fn step_in_place(state: &mut MsmState, config: &MsmConfig) -> Result<()> {
    let mut forces = std::mem::take(&mut state.net_force_cache);
    state.accumulate_forces(config, &mut forces)?;
    advance(state, &forces, config)?;
    state.net_force_cache = forces;
    Ok(())
}

fn advance(state: &mut MsmState, forces: &[Vec3], config: &MsmConfig) -> Result<()> {
    let a = config.dt / config.mass;
    for (i, ((p, v), f)) in state.positions.iter_mut().zip(state.velocities.iter_mut()).zip(forces).enumerate() {
        for c in 0..3 {
            v[c] += f[c] * a;
            p[c] += v[c] * config.dt;
        }
        if p.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::BlowUp { index: i });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// max ‖v_i‖, m/s.
    pub max_speed: f64,
    /// max ‖F_net,i‖ with the external load included, N.
    pub max_residual: f64,
}

fn residuals(state: &MsmState, forces: &[Vec3]) -> Residuals {
    let max_speed = state.velocities.iter().map(|v| norm3(*v)).fold(0.0, f64::max);
    let max_residual = forces.iter().map(|f| norm3(*f)).fold(0.0, f64::max);
    Residuals { max_speed, max_residual }
}

/// Steps until every mass is slower than `stability_v` and carries an
/// out-of-balance force below `stability_f`.
pub fn run_to_stability(state: &MsmState, config: &MsmConfig) -> Result<(MsmState, usize, Residuals)> {
    let mut s = state.clone();
    let mut forces = vec![[0.0; 3]; s.len()];
    let mut last = Residuals { max_speed: f64::INFINITY, max_residual: f64::INFINITY };
    for steps in 0..=config.max_steps_per_state {
        s.accumulate_forces(config, &mut forces)?;
        last = residuals(&s, &forces);
        if last.max_speed < config.stability_v && last.max_residual < config.stability_f {
            s.net_force_cache.copy_from_slice(&forces);
            return Ok((s, steps, last));
        }
        if steps == config.max_steps_per_state {
            break;
        }
        advance(&mut s, &forces, config)?;
    }
    Err(Error::NotConverged {
        steps: config.max_steps_per_state,
        max_speed: last.max_speed,
        max_residual: last.max_residual,
    })
}

/// `F_t = t · F_max / (n_t · n_n)` for `t = 1..=n_t`.
pub fn force_schedule(config: &MsmConfig) -> Vec<f64> {
    let denom = (config.n_t * config.n_n) as f64;
    (1..=config.n_t).map(|t| t as f64 * config.f_max / denom).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndentationPlan {
    pub location_index: usize,
    pub direction: Vec3,
    /// Per-mass force magnitude at steps `1..=n_t`.
    pub forces: Vec<f64>,
}

impl IndentationPlan {
    pub fn new(location_index: usize, direction: Vec3, config: &MsmConfig) -> Result<Self> {
        let len = norm3(direction);
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::InvalidArgument("indentation direction must be non-zero".into()));
        }
        if location_index >= config.num_points() {
            return Err(Error::InvalidArgument(format!("location {location_index} is outside the grid")));
        }
        Ok(IndentationPlan {
            location_index,
            direction: [direction[0] / len, direction[1] / len, direction[2] / len],
            forces: force_schedule(config),
        })
    }
}

/// Masses loaded by an indentation at `location`: the location itself and
/// its `n_n - 1` nearest neighbours at rest (ties by index).
fn loaded_masses(state: &MsmState, location: usize, n_n: usize) -> Vec<usize> {
    let origin = state.rest_positions[location];
    let mut order: Vec<(f64, usize)> =
        state.rest_positions.iter().enumerate().map(|(i, p)| (norm3(sub3(*p, origin)), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(n_n).map(|(_, i)| i).collect()
}

/// One static state of an indentation ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticState {
    /// Millimetres.
    pub positions: Vec<Vec3>,
    /// Force magnitude on the contact mass, N.
    pub applied_force: f64,
    pub max_speed: f64,
    pub max_residual: f64,
}

/// Quasi-static ramp from `state`: element 0 is the unloaded input, element
/// `t` the equilibrium under `F_t`, each relaxed from element `t - 1`.
pub fn indent(state: &MsmState, plan: &IndentationPlan, config: &MsmConfig) -> Result<Vec<(MsmState, f64)>> {
    let loaded = loaded_masses(state, plan.location_index, config.n_n);
    let mut current = state.clone();
    current.clear_external_forces();
    let mut out = Vec::with_capacity(plan.forces.len() + 1);
    out.push((current.clone(), 0.0));
    for &f in &plan.forces {
        for &i in &loaded {
            current.set_external_force(i, [f * plan.direction[0], f * plan.direction[1], f * plan.direction[2]]);
        }
        let (next, _, _) = run_to_stability(&current, config)?;
        current = next;
        out.push((current.clone(), f));
    }
    Ok(out)
}

/// All static states of one (location, direction) ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndentationRun {
    /// Grid index of the loaded mass.
    pub location: usize,
    /// Ordinal of the location within the generated dataset.
    pub location_ordinal: usize,
    /// 0 is the surface normal.
    pub direction_index: usize,
    pub direction: Vec3,
    pub states: Vec<StaticState>,
}

impl IndentationRun {
    /// Depth of the contact mass below its rest height at each state, mm.
    pub fn contact_displacements(&self) -> Vec<f64> {
        let p0 = self.states[0].positions[self.location];
        self.states.iter().map(|s| norm3(sub3(s.positions[self.location], p0))).collect()
    }
}

/// Simulates one ramp and records it.
pub fn simulate_run(
    rest: &MsmState,
    config: &MsmConfig,
    location: usize,
    location_ordinal: usize,
    direction_index: usize,
    direction: Vec3,
) -> Result<IndentationRun> {
    let plan = IndentationPlan::new(location, direction, config)?;
    let states = indent(rest, &plan, config)?;
    let mut recorded = Vec::with_capacity(states.len());
    for (s, f) in states {
        let r = residuals(&s, &s.net_force_cache);
        recorded.push(StaticState { positions: s.positions_mm(), applied_force: f, max_speed: r.max_speed, max_residual: r.max_residual });
    }
    Ok(IndentationRun { location, location_ordinal, direction_index, direction: plan.direction, states: recorded })
}

/// The (location, direction) pairs a dataset will simulate, in output order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub location: usize,
    pub location_ordinal: usize,
    pub direction_index: usize,
    pub direction: Vec3,
}

/// Draws `n_locations` distinct interior masses and, for each, the normal
/// plus `n_directions - 1` directions from the cone around it.
///
/// Location `l` takes its directions from `rng.child(l)`.
pub fn plan_dataset(config: &MsmConfig, rng: &mut Rng) -> Result<Vec<RunSpec>> {
    plan_dataset_excluding(config, rng, &[])
}

/// Like [`plan_dataset`] but never indents the grid points in `excluded`.
pub fn plan_dataset_excluding(config: &MsmConfig, rng: &mut Rng, excluded: &[usize]) -> Result<Vec<RunSpec>> {
    config.validate()?;
    let interior: Vec<usize> = config.interior_indices().into_iter().filter(|i| !excluded.contains(i)).collect();
    if config.n_locations > interior.len() {
        return Err(Error::Config(format!(
            "msm.n_locations = {} exceeds the {} available interior grid points",
            config.n_locations,
            interior.len()
        )));
    }
    let picks = rng.sample_distinct(interior.len(), config.n_locations)?;
    let mut specs = Vec::with_capacity(config.n_locations * config.n_directions);
    for (ordinal, &p) in picks.iter().enumerate() {
        let mut child = rng.child(ordinal as u64);
        for d in 0..config.n_directions {
            let direction = if d == 0 {
                SURFACE_NORMAL_IN
            } else {
                sample_unit_direction_in_cone(&mut child, SURFACE_NORMAL_IN, config.cone_half_angle_deg)?
            };
            specs.push(RunSpec { location: interior[p], location_ordinal: ordinal, direction_index: d, direction });
        }
    }
    Ok(specs)
}

/// Simulates `specs` in parallel, preserving their order.
pub fn simulate_runs(config: &MsmConfig, specs: &[RunSpec]) -> Result<Vec<(IndentationRun, f64)>> {
    let rest = build_surface(config)?;
    specs
        .par_iter()
        .map(|s| {
            let start = Instant::now();
            let run = simulate_run(&rest, config, s.location, s.location_ordinal, s.direction_index, s.direction)?;
            Ok((run, start.elapsed().as_secs_f64()))
        })
        .collect()
}

/// Full data-generation plan: `n_locations × n_directions` ramps of `n_t`
/// loaded states each.
pub fn generate_dataset(config: &MsmConfig, rng: &mut Rng) -> Result<Vec<IndentationRun>> {
    let specs = plan_dataset(config, rng)?;
    Ok(simulate_runs(config, &specs)?.into_iter().map(|(r, _)| r).collect())
}
