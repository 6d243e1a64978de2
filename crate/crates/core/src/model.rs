//! The conditional dynamic-graph network.
//!
//! Three DynamicEdgeConv layers each rebuild a kNN graph (with self-loops)
//! in their own input feature space and average learned edge messages.
//! Their outputs are concatenated with the broadcast condition vector; a
//! per-point MLP maps that to the displacement field, and a max-pooled copy
//! feeds a four-layer head that predicts the change in force magnitude.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NamedTensors, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{knn_graph, EdgeList};
use crate::rng::Rng;
use crate::types::{apply_displacement, Condition, DisplacementField, PointCloud};

/// How the edge function sees a neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeFeature {
    /// `h(x_i, x_j − x_i)`
    Centered,
    /// `h(x_i, x_j)`
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Neighbours per node, excluding the self-loop.
    pub k: usize,
    pub aggregation: Aggregation,
    pub edge_feature: EdgeFeature,
    /// Output width of each DynamicEdgeConv layer.
    pub edge_widths: Vec<usize>,
    /// Hidden widths of the displacement MLP; its output layer has width 3.
    pub displacement_widths: Vec<usize>,
    /// Widths of the force head's linear layers; the last must be 1.
    pub force_widths: Vec<usize>,
    /// Coordinates (mm) are multiplied by this before entering the network,
    /// and predicted displacements divided by it.
    pub input_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 5,
            aggregation: Aggregation::Mean,
            edge_feature: EdgeFeature::Centered,
            edge_widths: vec![64, 64, 64],
            displacement_widths: vec![256, 128],
            force_widths: vec![128, 64, 32, 1],
            input_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("model.k must be at least 1".into()));
        }
        if self.edge_widths.is_empty() {
            return Err(Error::Config("model.edge_widths needs at least one layer".into()));
        }
        if self.force_widths.last() != Some(&1) {
            return Err(Error::Config("model.force_widths must end with 1".into()));
        }
        let all = self.edge_widths.iter().chain(&self.displacement_widths).chain(&self.force_widths);
        if all.clone().any(|&w| w == 0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::Config("model.input_scale must be positive".into()));
        }
        Ok(())
    }

    /// Width of the per-point feature `[f₁, f₂, f₃, C]`.
    pub fn point_feature_width(&self) -> usize {
        self.edge_widths.iter().sum::<usize>() + 6
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut d_in = 3;
        for (l, &w) in self.edge_widths.iter().enumerate() {
            out.push((format!("edge{l}.w_self"), vec![d_in, w]));
            out.push((format!("edge{l}.w_nbr"), vec![d_in, w]));
            out.push((format!("edge{l}.bias"), vec![w]));
            d_in = w;
        }
        let g = self.point_feature_width();
        let mut dense = |prefix: &str, widths: &[usize]| {
            let mut d = g;
            for (j, &w) in widths.iter().enumerate() {
                out.push((format!("{prefix}{j}.weight"), vec![d, w]));
                out.push((format!("{prefix}{j}.bias"), vec![w]));
                d = w;
            }
        };
        let mut disp = self.displacement_widths.clone();
        disp.push(3);
        dense("disp", &disp);
        dense("force", &self.force_widths);
        out
    }
}

/// Learnable parameters, stored in [`ModelConfig::parameter_layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelWeights<T> {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, and
    /// zero output layers so a fresh model predicts no deformation.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        let last_disp = format!("disp{}.weight", config.displacement_widths.len());
        let last_force = format!("force{}.weight", config.force_widths.len() - 1);
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let numel: usize = shape.iter().product();
            let zero = name.ends_with("bias") || name == last_disp || name == last_force;
            let data = if zero {
                vec![T::zero(); numel]
            } else {
                let fan_in = if name.starts_with("edge") { 2 * shape[0] } else { shape[0] };
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| T::from_f64(rng.uniform_range(-bound, bound))).collect()
            };
            tensors.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(ModelWeights { names, tensors })
    }

    /// Checks names and shapes against `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != named.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model config expects {}",
                named.len(),
                layout.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(&named) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {n} {:?} does not match model parameter {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(ModelWeights { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Records every parameter on `tape`, trainable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

impl ModelWeights<f32> {
    pub fn to_named(&self) -> NamedTensors {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }
}

/// Parameters of one DynamicEdgeConv layer as recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EdgeLayer {
    pub w_self: Var,
    pub w_nbr: Var,
    pub bias: Var,
}

/// One DynamicEdgeConv over a given graph:
/// `x'_i = mean_{(i,j) ∈ edges} relu(W_selfᵀ x_i + W_nbrᵀ e_ij + b)` with
/// `e_ij = x_j − x_i` (centered) or `x_j` (literal).
///
/// The first linear map is applied per node and gathered per edge, which is
/// algebraically the same as applying it to every concatenated edge feature.
pub fn edge_conv_with_edges<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    edges: &EdgeList,
    layer: EdgeLayer,
    form: EdgeFeature,
) -> Result<Var> {
    let (n, _) = tape.value(x).dims2()?;
    if edges.num_nodes() != n {
        return Err(Error::shape(tape.shape(x), &[edges.num_nodes()], "edge_conv graph"));
    }
    let p = tape.matmul(x, layer.w_self)?;
    let q = tape.matmul(x, layer.w_nbr)?;
    let own = match form {
        EdgeFeature::Centered => tape.sub(p, q)?,
        EdgeFeature::Literal => p,
    };
    tape.edge_mean(own, q, layer.bias, edges.targets().into(), edges.sources().into())
}

/// DynamicEdgeConv with the graph rebuilt from the current values of `x`.
/// Neighbour selection is not differentiated.
pub fn edge_conv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    k: usize,
    layer: EdgeLayer,
    form: EdgeFeature,
) -> Result<(Var, EdgeList)> {
    let (n, d) = tape.value(x).dims2()?;
    let edges = knn_graph(tape.value(x).data(), n, d, k)?;
    let out = edge_conv_with_edges(tape, x, &edges, layer, form)?;
    Ok((out, edges))
}

/// Tape handles of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N, 3]`, millimetres.
    pub displacement: Var,
    /// `[1, 1]`, newtons.
    pub force: Var,
    /// Edges visited by each DynamicEdgeConv layer.
    pub edges_per_layer: Vec<usize>,
}

fn dense_stack<T: Real>(tape: &mut Tape<T>, mut h: Var, params: &[Var], last_linear: bool) -> Result<Var> {
    let layers = params.len() / 2;
    for j in 0..layers {
        let relu = !(last_linear && j + 1 == layers);
        h = tape.linear(h, params[2 * j], params[2 * j + 1], relu)?;
    }
    Ok(h)
}

/// Records `(δx, δF) = f(x, C)` on `tape`. `params` come from
/// [`ModelWeights::bind`]; `points` is the input cloud in millimetres.
pub fn cgnn_forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &[Var],
    points: &PointCloud,
    condition: &Condition,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    let n = points.len();
    if n <= config.k {
        return Err(Error::InvalidArgument(format!(
            "cloud has {n} points but k = {}: lower k or provide at least k + 1 points",
            config.k
        )));
    }
    let expected = config.parameter_layout().len();
    if params.len() != expected {
        return Err(Error::shape(&[params.len()], &[expected], "model parameter count"));
    }
    let s = config.input_scale;
    let flat: Vec<f64> = points.points().iter().flat_map(|p| p.map(|c| c * s)).collect();
    let x = tape.constant(Tensor::from_f64(vec![n, 3], &flat)?);
    let c = tape.constant(Tensor::from_f64(vec![1, 6], &condition.to_array().map(|v| v * s))?);

    let mut features = Vec::with_capacity(config.edge_widths.len() + 1);
    let mut edges_per_layer = Vec::with_capacity(config.edge_widths.len());
    let mut h = x;
    for l in 0..config.edge_widths.len() {
        let layer = EdgeLayer { w_self: params[3 * l], w_nbr: params[3 * l + 1], bias: params[3 * l + 2] };
        let (out, edges) = edge_conv(tape, h, config.k, layer, config.edge_feature)?;
        edges_per_layer.push(edges.len());
        features.push(out);
        h = out;
    }
    let broadcast: Rc<[usize]> = vec![0usize; n].into();
    let cb = tape.gather_rows(c, broadcast)?;
    features.push(cb);
    let g = tape.concat(&features)?;

    let start = 3 * config.edge_widths.len();
    let disp_params = 2 * (config.displacement_widths.len() + 1);
    let mut displacement = dense_stack(tape, g, &params[start..start + disp_params], true)?;
    if s != 1.0 {
        displacement = tape.scale(displacement, T::from_f64(1.0 / s));
    }

    let global = tape.reduce_max(g, 0)?;
    let force = dense_stack(tape, global, &params[start + disp_params..], true)?;
    Ok(ForwardOutput { displacement, force, edges_per_layer })
}

/// Untracked forward pass: `(δx, δF)`.
pub fn cgnn_forward<T: Real>(
    points: &PointCloud,
    condition: &Condition,
    weights: &ModelWeights<T>,
    config: &ModelConfig,
) -> Result<(DisplacementField, f64)> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape, false);
    let out = cgnn_forward_on_tape(&mut tape, &params, points, condition, config)?;
    let d = tape.value(out.displacement).data();
    let deltas = d.chunks_exact(3).map(|r| [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]).collect();
    Ok((DisplacementField::new(deltas)?, tape.value(out.force).item().as_f64()))
}

/// Deformed surface `ŷ = x + δx` and predicted force change.
pub fn predict<T: Real>(
    points: &PointCloud,
    condition: &Condition,
    weights: &ModelWeights<T>,
    config: &ModelConfig,
) -> Result<(PointCloud, f64)> {
    let (dx, df) = cgnn_forward(points, condition, weights, config)?;
    Ok((apply_displacement(points, &dx)?, df))
}
