//! Shared helpers for the integration tests.
#![allow(dead_code)]

use cgnn_core::autodiff::{Tape, Tensor, Var};
use cgnn_core::model::{ModelConfig, ModelWeights};
use cgnn_core::rng::Rng;
use cgnn_core::types::{Condition, DisplacementField, PointCloud, Sample, SampleMeta};
use cgnn_core::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

/// Entries uniform in `±[margin, 1]`, so no entry sits near zero.
pub fn away_from_zero(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let mut t = random_tensor(rng, shape, margin, 1.0);
    for v in t.data_mut() {
        if rng.uniform() < 0.5 {
            *v = -*v;
        }
    }
    t
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Finite-difference comparison over every entry of every input.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// Norm-wise relative error over the compared entries.
    pub error: f64,
    pub compared: usize,
    /// Entries whose one-sided differences disagree, i.e. the step crosses
    /// a point where the function is not smooth.
    pub skipped: usize,
}

/// Tape gradient of a scalar `loss` against central differences.
pub fn fd_report(inputs: &[Tensor<f64>], loss: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> FdReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = loss(&mut tape, &vars).unwrap();
    let base = tape.value(l).item();
    tape.backward(l).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let l = loss(&mut tape, &vars).unwrap();
        tape.value(l).item()
    };
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    let mut work = inputs.to_vec();
    let mut flat = 0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = x;
            let (fwd, bwd) = (up - base, base - down);
            if (fwd - bwd).abs() > 0.05 * (fwd.abs() + bwd.abs()) + 1e-5 * base.abs().max(1.0) {
                skipped += 1;
            } else {
                a.push(analytic[flat]);
                n.push((up - down) / (2.0 * FD_STEP));
            }
            flat += 1;
        }
    }
    let diff: Vec<f64> = a.iter().zip(&n).map(|(a, b)| a - b).collect();
    FdReport { error: norm(&diff) / norm(&a).max(norm(&n)).max(1e-12), compared: a.len(), skipped }
}

/// Norm-wise relative error for a loss that is smooth around `inputs`.
pub fn fd_error_scalar(inputs: &[Tensor<f64>], loss: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let r = fd_report(inputs, loss);
    assert_eq!(r.skipped, 0, "loss is not smooth around the check point");
    r.error
}

/// [`fd_error_scalar`] for an op with any output shape, projected to a
/// scalar by `mean((Y − C)²)` with a fixed random `C`.
pub fn fd_error(inputs: &[Tensor<f64>], seed: u64, op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = op(&mut tape, &vars).unwrap();
        tape.shape(y).to_vec()
    };
    let c = random_tensor(&mut Rng::new(seed).child(99), &shape, -1.0, 1.0);
    fd_error_scalar(inputs, |tape, vars| {
        let y = op(tape, vars)?;
        let c = tape.constant(c.clone());
        let d = tape.sub(y, c)?;
        let sq = tape.square(d);
        tape.reduce_mean(sq, None)
    })
}

pub fn random_cloud(rng: &mut Rng, n: usize, extent: f64) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [rng.uniform_range(0.0, extent), rng.uniform_range(0.0, extent), rng.uniform_range(-extent / 10.0, 0.0)])
            .collect(),
    )
    .unwrap()
}

pub fn random_condition(rng: &mut Rng, extent: f64) -> Condition {
    let start = [rng.uniform_range(0.0, extent), rng.uniform_range(0.0, extent), 0.0];
    Condition::new(start, [start[0], start[1], -rng.uniform_range(0.5, 3.0)]).unwrap()
}

/// A synthetic sample over a random cloud with a smooth random target.
pub fn random_sample(rng: &mut Rng, n: usize) -> Sample {
    let input = random_cloud(rng, n, 20.0);
    let condition = random_condition(rng, 20.0);
    let deltas = (0..n).map(|_| [rng.uniform_range(-0.2, 0.2), rng.uniform_range(-0.2, 0.2), rng.uniform_range(-1.0, 0.0)]).collect();
    let meta = SampleMeta { location: 0, direction: 0, t_in: 0, t_out: 1, contact_row: 0 };
    Sample::new(input, condition, DisplacementField::new(deltas).unwrap(), rng.uniform_range(0.2, 2.0), meta).unwrap()
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        k: 3,
        edge_widths: vec![6, 6, 6],
        displacement_widths: vec![8],
        force_widths: vec![6, 4, 1],
        input_scale: 0.1,
        ..ModelConfig::default()
    }
}

/// Weights with every tensor (output layers included) drawn uniformly from
/// `±scale`, so all gradient paths are active.
pub fn dense_weights(config: &ModelConfig, rng: &mut Rng, scale: f64) -> ModelWeights<f64> {
    let mut w = ModelWeights::<f64>::init(config, rng).unwrap();
    for t in w.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.uniform_range(-scale, scale);
        }
    }
    w
}

fn kink_free_linear(rng: &mut Rng, m: usize, k: usize, n: usize) -> Vec<Tensor<f64>> {
    loop {
        let x = random_tensor(rng, &[m, k], -1.0, 1.0);
        let w = random_tensor(rng, &[k, n], -1.0, 1.0);
        let b = random_tensor(rng, &[n], -0.5, 0.5);
        let mut tape = Tape::new();
        let v: Vec<Var> = [&x, &w, &b].iter().map(|t| tape.constant((*t).clone())).collect();
        let z = tape.linear(v[0], v[1], v[2], false).unwrap();
        if tape.value(z).data().iter().all(|z| z.abs() > 0.05) {
            return vec![x, w, b];
        }
    }
}

fn kink_free_edges(rng: &mut Rng, m: usize, n: usize, targets: &[usize], sources: &[usize]) -> Vec<Tensor<f64>> {
    loop {
        let own = random_tensor(rng, &[m, n], -1.0, 1.0);
        let nbr = random_tensor(rng, &[m, n], -1.0, 1.0);
        let bias = random_tensor(rng, &[n], -0.5, 0.5);
        let ok = targets.iter().zip(sources).all(|(&t, &s)| {
            (0..n).all(|c| (own.data()[t * n + c] + nbr.data()[s * n + c] + bias.data()[c]).abs() > 0.05)
        });
        if ok {
            return vec![own, nbr, bias];
        }
    }
}

/// Distinct entries at least 0.05 apart, so every max is unique.
fn spread_values(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    rng.shuffle(&mut vals);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Relative finite-difference error of every tape op for one seed.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    use std::rc::Rc;
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let ins = vec![random_tensor(r, &[4, 3], -1.0, 1.0), random_tensor(r, &[3, 5], -1.0, 1.0)];
    out.push(("matmul", fd_error(&ins, seed, |t, v| t.matmul(v[0], v[1]))));

    let ins = vec![random_tensor(r, &[4, 3], -1.0, 1.0), random_tensor(r, &[4, 3], -1.0, 1.0)];
    out.push(("add", fd_error(&ins, seed, |t, v| t.add(v[0], v[1]))));
    out.push(("sub", fd_error(&ins, seed, |t, v| t.sub(v[0], v[1]))));
    let ins = vec![random_tensor(r, &[4, 3], -1.0, 1.0), random_tensor(r, &[1, 3], -1.0, 1.0)];
    out.push(("add broadcast", fd_error(&ins, seed, |t, v| t.add(v[0], v[1]))));
    out.push(("sub broadcast", fd_error(&ins, seed, |t, v| t.sub(v[0], v[1]))));

    let ins = vec![random_tensor(r, &[4, 2], -1.0, 1.0), random_tensor(r, &[4, 3], -1.0, 1.0), random_tensor(r, &[4, 1], -1.0, 1.0)];
    out.push(("concat", fd_error(&ins, seed, |t, v| t.concat(v))));

    let ins = vec![away_from_zero(r, &[5, 4], 0.05)];
    out.push(("relu", fd_error(&ins, seed, |t, v| Ok(t.relu(v[0])))));

    let ins = vec![random_tensor(r, &[4, 3], -1.0, 1.0)];
    let index: Rc<[usize]> = vec![0, 2, 2, 3, 1, 0].into();
    out.push(("gather_rows", fd_error(&ins, seed, |t, v| t.gather_rows(v[0], index.clone()))));

    let ins = vec![random_tensor(r, &[6, 3], -1.0, 1.0)];
    let index: Rc<[usize]> = vec![0, 1, 1, 2, 0, 2].into();
    out.push(("scatter_mean", fd_error(&ins, seed, |t, v| t.scatter_mean(v[0], index.clone(), 4))));

    let ins = vec![random_tensor(r, &[5, 4], -1.0, 1.0)];
    out.push(("reduce_mean all", fd_error(&ins, seed, |t, v| t.reduce_mean(v[0], None))));
    out.push(("reduce_mean axis 0", fd_error(&ins, seed, |t, v| t.reduce_mean(v[0], Some(0)))));
    out.push(("reduce_mean axis 1", fd_error(&ins, seed, |t, v| t.reduce_mean(v[0], Some(1)))));

    let ins = vec![spread_values(r, &[5, 4])];
    out.push(("reduce_max axis 0", fd_error(&ins, seed, |t, v| t.reduce_max(v[0], 0))));
    out.push(("reduce_max axis 1", fd_error(&ins, seed, |t, v| t.reduce_max(v[0], 1))));

    let ins = vec![random_tensor(r, &[5, 4], -1.0, 1.0)];
    out.push(("square", fd_error(&ins, seed, |t, v| Ok(t.square(v[0])))));
    out.push(("scale", fd_error(&ins, seed, |t, v| Ok(t.scale(v[0], -1.7)))));
    let ins = vec![away_from_zero(r, &[5, 3], 0.2)];
    out.push(("sqrt_sum_rows", fd_error(&ins, seed, |t, v| t.sqrt_sum_rows(v[0]))));

    let ins = kink_free_linear(r, 5, 4, 3);
    out.push(("linear", fd_error(&ins, seed, |t, v| t.linear(v[0], v[1], v[2], false))));
    out.push(("linear relu", fd_error(&ins, seed, |t, v| t.linear(v[0], v[1], v[2], true))));

    let targets = [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 4];
    let sources = [0, 3, 1, 2, 2, 0, 3, 4, 4, 1, 0];
    let ins = kink_free_edges(r, 5, 4, &targets, &sources);
    let (tg, sr): (Rc<[usize]>, Rc<[usize]>) = (targets.to_vec().into(), sources.to_vec().into());
    out.push(("edge_mean", fd_error(&ins, seed, |t, v| t.edge_mean(v[0], v[1], v[2], tg.clone(), sr.clone()))));
    out
}

/// Finite-difference check of the full training loss with respect to every
/// network weight, for one seed. Steps that move a kNN graph or cross a ReLU
/// boundary are reported as skipped.
pub fn model_gradient_report(seed: u64) -> FdReport {
    use cgnn_core::train::sample_loss_on_tape;
    let mut rng = Rng::new(seed);
    let config = small_model();
    let sample = random_sample(&mut rng, 12);
    let weights = dense_weights(&config, &mut rng, 0.5);
    fd_report(weights.tensors(), |tape, params| Ok(sample_loss_on_tape(tape, params, &sample, &config, 88.0)?.total))
}

/// Independent kNN reference: for each node the `k` nearest other nodes by
/// squared distance (ties to the smaller index) plus itself, ascending.
pub fn knn_oracle(points: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let d2 = |j: usize| (0..3).map(|c| (points[i][c] - points[j][c]).powi(2)).sum::<f64>();
            let mut others: Vec<usize> = (0..points.len()).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| d2(a).total_cmp(&d2(b)).then(a.cmp(&b)));
            let mut row: Vec<usize> = others[..k].to_vec();
            row.push(i);
            row.sort_unstable();
            row
        })
        .collect()
}

/// Checks `knn_graph` against the library scan and [`knn_oracle`] on
/// `clouds` random clouds of up to 300 points with k ∈ {1, 5, N−1}.
/// Returns the number of graphs compared.
pub fn knn_agreement(seed: u64, clouds: usize) -> std::result::Result<usize, String> {
    use cgnn_core::graph::{knn_graph, knn_graph_brute_force};
    let mut rng = Rng::new(seed);
    let mut compared = 0;
    for c in 0..clouds {
        let n = 2 + rng.below(299);
        let points: Vec<[f64; 3]> = random_cloud(&mut rng, n, 50.0).into_points();
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        for k in [1, 5, n - 1] {
            if k > n - 1 {
                continue;
            }
            let fast = knn_graph(&flat, n, 3, k).map_err(|e| e.to_string())?;
            let scan = knn_graph_brute_force(&flat, n, 3, k).map_err(|e| e.to_string())?;
            if fast != scan {
                return Err(format!("cloud {c} (N = {n}, k = {k}): tree and scan differ"));
            }
            let oracle = knn_oracle(&points, k);
            for (i, want) in oracle.iter().enumerate() {
                if fast.neighbours(i) != want.as_slice() {
                    return Err(format!("cloud {c} (N = {n}, k = {k}) node {i}: {:?} vs {want:?}", fast.neighbours(i)));
                }
            }
            compared += 1;
        }
    }
    Ok(compared)
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-300)
}

/// Relative changes `(δx, δF)` when the input rows are permuted, for one
/// random cloud and random weights.
pub fn permutation_errors(seed: u64, n: usize) -> (f64, f64) {
    use cgnn_core::model::cgnn_forward;
    let mut rng = Rng::new(seed);
    let config = small_model();
    let weights = dense_weights(&config, &mut rng, 0.5);
    let cloud = random_cloud(&mut rng, n, 20.0);
    let condition = random_condition(&mut rng, 20.0);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let shuffled = cloud.select(&perm).unwrap();
    let (d, f) = cgnn_forward(&cloud, &condition, &weights, &config).unwrap();
    let (dp, fp) = cgnn_forward(&shuffled, &condition, &weights, &config).unwrap();
    let expected: Vec<f64> = perm.iter().flat_map(|&i| d.deltas()[i]).collect();
    let got: Vec<f64> = dp.deltas().iter().flatten().copied().collect();
    (relative(&got, &expected), (f - fp).abs() / f.abs().max(1e-300))
}
