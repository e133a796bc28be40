//! Tiny feed-forward networks with per-layer output taps, reverse-mode
//! differentiation, and flat parameter-vector views.
//!
//! Supported layers: dense, 3x3 same-padded convolution, relu, 2x2 mean
//! pool, flatten. Skip edges (add / channel concat) attach to any earlier
//! node output, which is enough to build plain, residual, and densely
//! connected toy networks. Images are `[C, H, W]`, vectors `[D]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Tap sizes above this use the randomized Frobenius-norm estimator
/// instead of exact per-component sweeps.
const EXACT_JACOBIAN_LIMIT: usize = 4096;
const HUTCHINSON_PROBES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipKind {
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv3x3 { in_ch: usize, out_ch: usize },
    Relu,
    MeanPool2,
    Flatten,
}

impl LayerKind {
    fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv3x3 { .. } => "conv3x3",
            LayerKind::Relu => "relu",
            LayerKind::MeanPool2 => "meanpool2",
            LayerKind::Flatten => "flatten",
        }
    }

    fn param_count(&self) -> usize {
        match self {
            LayerKind::Dense { inputs, outputs } => outputs * inputs + outputs,
            LayerKind::Conv3x3 { in_ch, out_ch } => out_ch * in_ch * 9 + out_ch,
            _ => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerKind::Dense { inputs, .. } => *inputs,
            LayerKind::Conv3x3 { in_ch, .. } => in_ch * 9,
            _ => 0,
        }
    }
}

/// One node of the forward chain. `skip_from` merges the layer output with
/// an earlier node output (node 0 is the network input).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub skip_from: Option<(usize, SkipKind)>,
    pub tap: bool,
}

impl LayerSpec {
    pub fn plain(kind: LayerKind) -> Self {
        LayerSpec { kind, skip_from: None, tap: false }
    }

    pub fn tapped(kind: LayerKind) -> Self {
        LayerSpec { kind, skip_from: None, tap: true }
    }
}

/// Segment of the flat parameter vector belonging to one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSegment {
    pub layer: usize,
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat view of all trainable parameters in canonical layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<ParamSegment>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<ParamSegment>) -> Self {
        ParamVector { values, layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[ParamSegment] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-layer slices in canonical order.
    pub fn unflatten(&self) -> Vec<(&ParamSegment, &[f64])> {
        self.layout
            .iter()
            .map(|seg| (seg, &self.values[seg.offset..seg.offset + seg.len]))
            .collect()
    }

    /// Rebuilds the flat vector from per-layer slices.
    pub fn flatten(segments: &[(&ParamSegment, &[f64])]) -> Self {
        let total: usize = segments.iter().map(|(s, _)| s.len).sum();
        let mut values = vec![0.0; total];
        let mut layout = Vec::with_capacity(segments.len());
        for (seg, data) in segments {
            values[seg.offset..seg.offset + seg.len].copy_from_slice(data);
            layout.push((*seg).clone());
        }
        ParamVector { values, layout }
    }

    pub fn segment_mut(&mut self, layer: usize) -> Option<&mut [f64]> {
        let seg = self.layout.iter().find(|s| s.layer == layer)?.clone();
        Some(&mut self.values[seg.offset..seg.offset + seg.len])
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|v| v * c).collect(),
            layout: self.layout.clone(),
        }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        ParamVector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Tap outputs plus final logits of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub taps: Vec<Tensor>,
    pub output: Tensor,
}

/// Parameter gradient together with the gradient w.r.t. the input.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub param_grad: ParamVector,
    pub input_grad: Tensor,
}

/// Layered network description with shape inference done at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// Shape of every node output; index 0 is the input.
    node_shapes: Vec<Vec<usize>>,
    /// Node indices exposed as taps, in depth order.
    tap_nodes: Vec<usize>,
    layout: Vec<ParamSegment>,
    total_params: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl ArchitectureGraph {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("architecture needs at least one layer".into()));
        }
        let mut node_shapes = vec![input_shape.clone()];
        let mut layout = Vec::new();
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            let prev = node_shapes[i].clone();
            let mut out = infer_shape(&layer.kind, &prev)
                .map_err(|e| Error::Config(format!("layer {i} ({}): {e}", layer.kind.name())))?;
            if let Some((src, kind)) = &layer.skip_from {
                if *src > i {
                    return Err(Error::Config(format!("layer {i}: skip source {src} is not an earlier node")));
                }
                let src_shape = &node_shapes[*src];
                match kind {
                    SkipKind::Add => {
                        if *src_shape != out {
                            return Err(Error::Config(format!(
                                "layer {i}: add-skip shape {src_shape:?} != {out:?}"
                            )));
                        }
                    }
                    SkipKind::Concat => {
                        if out.len() != 3 || src_shape.len() != 3 || out[1..] != src_shape[1..] {
                            return Err(Error::Config(format!(
                                "layer {i}: concat-skip needs matching spatial dims, {src_shape:?} vs {out:?}"
                            )));
                        }
                        out[0] += src_shape[0];
                    }
                }
            }
            let count = layer.kind.param_count();
            if count > 0 {
                layout.push(ParamSegment {
                    layer: i,
                    name: format!("{}_{i}", layer.kind.name()),
                    offset,
                    len: count,
                });
                offset += count;
            }
            node_shapes.push(out);
        }
        let tap_nodes: Vec<usize> =
            layers.iter().enumerate().filter(|(_, l)| l.tap).map(|(i, _)| i + 1).collect();
        if tap_nodes.is_empty() {
            return Err(Error::Config("architecture exposes no tap points".into()));
        }
        Ok(ArchitectureGraph {
            input_shape,
            layers,
            node_shapes,
            tap_nodes,
            layout,
            total_params: offset,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.node_shapes.last().unwrap()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn tap_count(&self) -> usize {
        self.tap_nodes.len()
    }

    pub fn tap_shape(&self, l: usize) -> Result<&[usize]> {
        let node = *self
            .tap_nodes
            .get(l.checked_sub(1).ok_or(Error::TapOutOfRange { index: l, count: self.tap_count() })?)
            .ok_or(Error::TapOutOfRange { index: l, count: self.tap_count() })?;
        Ok(&self.node_shapes[node])
    }

    /// True when the tap's producing layer consumes a skip edge.
    pub fn tap_is_skip_fed(&self, l: usize) -> bool {
        self.tap_nodes
            .get(l - 1)
            .map(|&node| self.layers[node - 1].skip_from.is_some())
            .unwrap_or(false)
    }

    pub fn param_count(&self) -> usize {
        self.total_params
    }

    pub fn param_layout(&self) -> &[ParamSegment] {
        &self.layout
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::new(vec![0.0; self.total_params], self.layout.clone())
    }

    /// Uniform fan-in initialization, biases zero.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVector {
        let mut p = self.zero_params();
        for seg in self.layout.clone() {
            let kind = &self.layers[seg.layer].kind;
            let fan_in = kind.fan_in().max(1);
            let bound = (1.0 / fan_in as f64).sqrt();
            let weight_count = seg.len
                - match kind {
                    LayerKind::Dense { outputs, .. } => *outputs,
                    LayerKind::Conv3x3 { out_ch, .. } => *out_ch,
                    _ => 0,
                };
            let slice = &mut p.values_mut()[seg.offset..seg.offset + seg.len];
            for w in slice[..weight_count].iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.total_params {
            return Err(Error::ShapeMismatch {
                expected: vec![self.total_params],
                got: vec![params.len()],
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass caching every node output (needed for backward sweeps).
    fn forward_cache(&self, params: &ParamVector, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_params(params)?;
        self.check_input(x)?;
        let mut nodes: Vec<Tensor> = Vec::with_capacity(self.layers.len() + 1);
        nodes.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let seg = self.layout.iter().find(|s| s.layer == i);
            let p = seg.map(|s| &params.values()[s.offset..s.offset + s.len]).unwrap_or(&[]);
            let mut out = layer_forward(&layer.kind, p, &nodes[i], &self.node_shapes[i])?;
            if let Some((src, kind)) = &layer.skip_from {
                out = match kind {
                    SkipKind::Add => {
                        let mut merged = out;
                        for (a, b) in merged.iter_mut().zip(nodes[*src].data()) {
                            *a += b;
                        }
                        merged
                    }
                    SkipKind::Concat => {
                        let mut merged = out;
                        merged.extend_from_slice(nodes[*src].data());
                        merged
                    }
                };
            }
            nodes.push(Tensor::new(self.node_shapes[i + 1].clone(), out)?);
        }
        Ok(nodes)
    }

    /// Runs the network and exposes all tap outputs plus the final logits.
    pub fn forward_traced(&self, params: &ParamVector, x: &Tensor) -> Result<ForwardTrace> {
        let nodes = self.forward_cache(params, x)?;
        let taps = self.tap_nodes.iter().map(|&n| nodes[n].clone()).collect();
        Ok(ForwardTrace { taps, output: nodes.last().unwrap().clone() })
    }

    pub fn logits(&self, params: &ParamVector, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cache(params, x)?.pop().unwrap())
    }

    pub fn predict(&self, params: &ParamVector, x: &Tensor) -> Result<usize> {
        let logits = self.logits(params, x)?;
        Ok(argmax(logits.data()))
    }

    /// Softmax cross-entropy of the logits against `label`.
    pub fn loss(&self, params: &ParamVector, x: &Tensor, label: usize) -> Result<f64> {
        let logits = self.logits(params, x)?;
        let (loss, _) = cross_entropy(logits.data(), label)?;
        Ok(loss)
    }

    /// Reverse-mode gradient of the cross-entropy loss w.r.t. parameters
    /// and input.
    pub fn backward(&self, params: &ParamVector, x: &Tensor, label: usize) -> Result<LossGradient> {
        let nodes = self.forward_cache(params, x)?;
        let logits = nodes.last().unwrap();
        let (loss, dlogits) = cross_entropy(logits.data(), label)?;
        let (param_grad, input_grad) =
            self.backward_sweep(params, &nodes, nodes.len() - 1, &dlogits, true)?;
        Ok(LossGradient { loss, param_grad: param_grad.unwrap(), input_grad })
    }

    /// Vector-Jacobian product: cotangent seeded at tap `l` (1-based),
    /// pulled back to the input. Parameter gradients are skipped.
    pub fn tap_vjp(
        &self,
        params: &ParamVector,
        nodes: &[Tensor],
        l: usize,
        cotangent: &[f64],
    ) -> Result<Tensor> {
        let node = *self
            .tap_nodes
            .get(l.wrapping_sub(1))
            .ok_or(Error::TapOutOfRange { index: l, count: self.tap_count() })?;
        let (_, input_grad) = self.backward_sweep(params, nodes, node, cotangent, false)?;
        Ok(input_grad)
    }

    /// Frobenius norm of the input-Jacobian of tap `l`, evaluated at
    /// `x + delta`. Exact component sweeps for small taps, randomized
    /// probe estimate above [`EXACT_JACOBIAN_LIMIT`].
    pub fn input_jacobian_norm(
        &self,
        params: &ParamVector,
        x: &Tensor,
        delta: &Tensor,
        l: usize,
    ) -> Result<f64> {
        if !x.same_shape(delta) {
            return Err(Error::ShapeMismatch {
                expected: x.shape().to_vec(),
                got: delta.shape().to_vec(),
            });
        }
        let tap_len = numel(self.tap_shape(l)?);
        let point = x.add(delta)?;
        let nodes = self.forward_cache(params, &point)?;
        let mut sq_sum = 0.0;
        if tap_len <= EXACT_JACOBIAN_LIMIT {
            let mut seed = vec![0.0; tap_len];
            for j in 0..tap_len {
                seed[j] = 1.0;
                let g = self.tap_vjp(params, &nodes, l, &seed)?;
                sq_sum += g.data().iter().map(|v| v * v).sum::<f64>();
                seed[j] = 0.0;
            }
        } else {
            // E[||J^T v||^2] over Rademacher v equals the squared Frobenius norm.
            let mut probe_rng = rng::stream(0x4a61636f, &[l as u64, tap_len as u64]);
            for _ in 0..HUTCHINSON_PROBES {
                let v: Vec<f64> =
                    (0..tap_len).map(|_| if probe_rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
                let g = self.tap_vjp(params, &nodes, l, &v)?;
                sq_sum += g.data().iter().map(|x| x * x).sum::<f64>() / HUTCHINSON_PROBES as f64;
            }
        }
        Ok(sq_sum.sqrt())
    }

    /// Shared reverse sweep. Seeds `seed` at node `seed_node`, accumulates
    /// cotangents down to the input, optionally collecting parameter grads.
    fn backward_sweep(
        &self,
        params: &ParamVector,
        nodes: &[Tensor],
        seed_node: usize,
        seed: &[f64],
        want_param_grad: bool,
    ) -> Result<(Option<ParamVector>, Tensor)> {
        let mut cots: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        cots[seed_node] = Some(seed.to_vec());
        let mut param_grad = if want_param_grad { Some(self.zero_params()) } else { None };
        for i in (1..=seed_node).rev() {
            let Some(g) = cots[i].take() else { continue };
            let layer = &self.layers[i - 1];
            // Split the cotangent between the layer op and the skip source.
            let g_op: Vec<f64> = match &layer.skip_from {
                Some((src, SkipKind::Add)) => {
                    accumulate(&mut cots[*src], &g);
                    g
                }
                Some((src, SkipKind::Concat)) => {
                    let own = numel(&self.node_shapes[i]) - numel(&self.node_shapes[*src]);
                    accumulate(&mut cots[*src], &g[own..]);
                    g[..own].to_vec()
                }
                None => g,
            };
            let seg = self.layout.iter().find(|s| s.layer == i - 1);
            let p = seg.map(|s| &params.values()[s.offset..s.offset + s.len]).unwrap_or(&[]);
            let mut pg_slice = param_grad.as_mut().zip(seg).map(|(pg, s)| (pg, s.clone()));
            let dx = layer_backward(
                &self.layers[i - 1].kind,
                p,
                &nodes[i - 1],
                &self.node_shapes[i - 1],
                &g_op,
                &mut pg_slice,
            )?;
            accumulate(&mut cots[i - 1], &dx);
        }
        let input_grad = Tensor::new(
            self.input_shape.clone(),
            cots[0].take().unwrap_or_else(|| vec![0.0; numel(&self.input_shape)]),
        )?;
        Ok((param_grad, input_grad))
    }
}

/// Output-coordinate span for which `coord + d - 1` stays inside `0..n`.
#[inline]
fn conv_span(d: usize, n: usize) -> (usize, usize) {
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 { n.saturating_sub(1) } else { n };
    (lo, hi)
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Returns (loss, d loss / d logits).
fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Config(format!("label {label} out of range for {} logits", logits.len())));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "cross-entropy loss".into() });
    }
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

fn infer_shape(kind: &LayerKind, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
    match kind {
        LayerKind::Dense { inputs, outputs } => {
            if input.len() != 1 || input[0] != *inputs {
                return Err(format!("dense expects [{inputs}], got {input:?}"));
            }
            Ok(vec![*outputs])
        }
        LayerKind::Conv3x3 { in_ch, out_ch } => {
            if input.len() != 3 || input[0] != *in_ch {
                return Err(format!("conv3x3 expects [{in_ch}, H, W], got {input:?}"));
            }
            Ok(vec![*out_ch, input[1], input[2]])
        }
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::MeanPool2 => {
            if input.len() != 3 || input[1] % 2 != 0 || input[2] % 2 != 0 {
                return Err(format!("meanpool2 expects even [C, H, W], got {input:?}"));
            }
            Ok(vec![input[0], input[1] / 2, input[2] / 2])
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
    }
}

fn layer_forward(
    kind: &LayerKind,
    p: &[f64],
    input: &Tensor,
    in_shape: &[usize],
) -> Result<Vec<f64>> {
    let x = input.data();
    Ok(match kind {
        LayerKind::Dense { inputs, outputs } => {
            let (w, b) = p.split_at(outputs * inputs);
            let mut y = vec![0.0; *outputs];
            for o in 0..*outputs {
                let row = &w[o * inputs..(o + 1) * inputs];
                y[o] = b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
            }
            y
        }
        LayerKind::Conv3x3 { in_ch, out_ch } => {
            let (h, wd) = (in_shape[1], in_shape[2]);
            let (w, b) = p.split_at(out_ch * in_ch * 9);
            let mut y = vec![0.0; out_ch * h * wd];
            for o in 0..*out_ch {
                y[o * h * wd..(o + 1) * h * wd].fill(b[o]);
                for i in 0..*in_ch {
                    for dy in 0..3usize {
                        let (y_lo, y_hi) = conv_span(dy, h);
                        for dx in 0..3usize {
                            let (x_lo, x_hi) = conv_span(dx, wd);
                            let wk = w[((o * in_ch + i) * 3 + dy) * 3 + dx];
                            for yy in y_lo..y_hi {
                                let src = (i * h + yy + dy - 1) * wd;
                                let dst = (o * h + yy) * wd;
                                for xx in x_lo..x_hi {
                                    y[dst + xx] += wk * x[src + xx + dx - 1];
                                }
                            }
                        }
                    }
                }
            }
            y
        }
        LayerKind::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        LayerKind::MeanPool2 => {
            let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (h / 2, wd / 2);
            let mut y = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += x[(ch * h + 2 * yy + dy) * wd + 2 * xx + dx];
                            }
                        }
                        y[(ch * oh + yy) * ow + xx] = acc / 4.0;
                    }
                }
            }
            y
        }
        LayerKind::Flatten => x.to_vec(),
    })
}

fn layer_backward(
    kind: &LayerKind,
    p: &[f64],
    input: &Tensor,
    in_shape: &[usize],
    g: &[f64],
    param_grad: &mut Option<(&mut ParamVector, ParamSegment)>,
    // returns d loss / d input
) -> Result<Vec<f64>> {
    let x = input.data();
    Ok(match kind {
        LayerKind::Dense { inputs, outputs } => {
            let w = &p[..outputs * inputs];
            let mut dx = vec![0.0; *inputs];
            if let Some((pg, seg)) = param_grad {
                let slice = &mut pg.values_mut()[seg.offset..seg.offset + seg.len];
                let (dw, db) = slice.split_at_mut(outputs * inputs);
                for o in 0..*outputs {
                    db[o] += g[o];
                    for i in 0..*inputs {
                        dw[o * inputs + i] += g[o] * x[i];
                    }
                }
            }
            for o in 0..*outputs {
                let row = &w[o * inputs..(o + 1) * inputs];
                for i in 0..*inputs {
                    dx[i] += row[i] * g[o];
                }
            }
            dx
        }
        LayerKind::Conv3x3 { in_ch, out_ch } => {
            let (h, wd) = (in_shape[1], in_shape[2]);
            let w = &p[..out_ch * in_ch * 9];
            let mut dx = vec![0.0; in_ch * h * wd];
            for o in 0..*out_ch {
                let g_plane = &g[o * h * wd..(o + 1) * h * wd];
                for i in 0..*in_ch {
                    for dy in 0..3usize {
                        let (y_lo, y_hi) = conv_span(dy, h);
                        for dxk in 0..3usize {
                            let (x_lo, x_hi) = conv_span(dxk, wd);
                            let wi = ((o * in_ch + i) * 3 + dy) * 3 + dxk;
                            let wk = w[wi];
                            if let Some((pg, seg)) = param_grad {
                                let mut dw = 0.0;
                                for yy in y_lo..y_hi {
                                    let src = (i * h + yy + dy - 1) * wd;
                                    let row = yy * wd;
                                    for xx in x_lo..x_hi {
                                        let go = g_plane[row + xx];
                                        dx[src + xx + dxk - 1] += wk * go;
                                        dw += go * x[src + xx + dxk - 1];
                                    }
                                }
                                pg.values_mut()[seg.offset + wi] += dw;
                            } else {
                                for yy in y_lo..y_hi {
                                    let src = (i * h + yy + dy - 1) * wd;
                                    let row = yy * wd;
                                    for xx in x_lo..x_hi {
                                        dx[src + xx + dxk - 1] += wk * g_plane[row + xx];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some((pg, seg)) = param_grad {
                    pg.values_mut()[seg.offset + out_ch * in_ch * 9 + o] +=
                        g_plane.iter().sum::<f64>();
                }
            }
            dx
        }
        LayerKind::Relu => x.iter().zip(g).map(|(v, go)| if *v > 0.0 { *go } else { 0.0 }).collect(),
        LayerKind::MeanPool2 => {
            let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (h / 2, wd / 2);
            let mut dx = vec![0.0; c * h * wd];
            for ch in 0..c {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let go = g[(ch * oh + yy) * ow + xx] / 4.0;
                        for dy in 0..2 {
                            for dxk in 0..2 {
                                dx[(ch * h + 2 * yy + dy) * wd + 2 * xx + dxk] += go;
                            }
                        }
                    }
                }
            }
            dx
        }
        LayerKind::Flatten => g.to_vec(),
    })
}

/// Named toy architectures used throughout the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    Mlp,
    PlainCnn,
    ResidualCnn,
    DenseCnn,
}

impl ArchName {
    pub fn all() -> [ArchName; 4] {
        [ArchName::Mlp, ArchName::PlainCnn, ArchName::ResidualCnn, ArchName::DenseCnn]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchName::Mlp => "mlp",
            ArchName::PlainCnn => "plain_cnn",
            ArchName::ResidualCnn => "residual_cnn",
            ArchName::DenseCnn => "dense_cnn",
        }
    }
}

impl std::str::FromStr for ArchName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchName::Mlp),
            "plain_cnn" => Ok(ArchName::PlainCnn),
            "residual_cnn" => Ok(ArchName::ResidualCnn),
            "dense_cnn" => Ok(ArchName::DenseCnn),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Builds one of the named toy networks for `[C, H, W]` inputs.
pub fn build_architecture(name: ArchName, input_shape: &[usize], classes: usize) -> Result<ArchitectureGraph> {
    if input_shape.len() != 3 {
        return Err(Error::Config(format!("expected [C, H, W] input, got {input_shape:?}")));
    }
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    use LayerKind::*;
    use SkipKind::*;
    let layers = match name {
        ArchName::Mlp => {
            let d = c * h * w;
            vec![
                LayerSpec::plain(Flatten),
                LayerSpec::plain(Dense { inputs: d, outputs: 64 }),
                LayerSpec::tapped(Relu),
                LayerSpec::plain(Dense { inputs: 64, outputs: 32 }),
                LayerSpec::tapped(Relu),
                LayerSpec::tapped(Dense { inputs: 32, outputs: classes }),
            ]
        }
        ArchName::PlainCnn => {
            let flat = 8 * (h / 2) * (w / 2) / 4;
            vec![
                LayerSpec::plain(Conv3x3 { in_ch: c, out_ch: 8 }),
                LayerSpec::tapped(Relu),
                LayerSpec::plain(Conv3x3 { in_ch: 8, out_ch: 8 }),
                LayerSpec::tapped(Relu),
                LayerSpec::plain(MeanPool2),
                LayerSpec::plain(Conv3x3 { in_ch: 8, out_ch: 8 }),
                LayerSpec::tapped(Relu),
                LayerSpec::plain(MeanPool2),
                LayerSpec::plain(Flatten),
                LayerSpec::tapped(Dense { inputs: flat, outputs: classes }),
            ]
        }
        ArchName::ResidualCnn => {
            let flat = 8 * (h / 2) * (w / 2) / 4;
            vec![
                LayerSpec::plain(Conv3x3 { in_ch: c, out_ch: 8 }),
                LayerSpec::tapped(Relu), // node 2, skip source
                LayerSpec::plain(Conv3x3 { in_ch: 8, out_ch: 8 }),
                LayerSpec { kind: Relu, skip_from: Some((2, Add)), tap: true },
                LayerSpec::plain(MeanPool2),
                LayerSpec::plain(Conv3x3 { in_ch: 8, out_ch: 8 }),
                LayerSpec::tapped(Relu),
                LayerSpec::plain(MeanPool2),
                LayerSpec::plain(Flatten),
                LayerSpec::tapped(Dense { inputs: flat, outputs: classes }),
            ]
        }
        ArchName::DenseCnn => {
            let flat = 8 * (h / 2) * (w / 2) / 4;
            vec![
                LayerSpec::plain(Conv3x3 { in_ch: c, out_ch: 8 }),
                LayerSpec::tapped(Relu), // node 2, reused downstream
                LayerSpec::plain(Conv3x3 { in_ch: 8, out_ch: 8 }),
                LayerSpec { kind: Relu, skip_from: Some((2, Concat)), tap: true }, // 16 channels
                LayerSpec::plain(MeanPool2),
                LayerSpec::plain(Conv3x3 { in_ch: 16, out_ch: 8 }),
                LayerSpec::tapped(Relu),
                LayerSpec::plain(MeanPool2),
                LayerSpec::plain(Flatten),
                LayerSpec::tapped(Dense { inputs: flat, outputs: classes }),
            ]
        }
    };
    ArchitectureGraph::new(input_shape.to_vec(), layers)
}
