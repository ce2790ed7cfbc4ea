//! Score network: a small fully-connected tanh network `s_W(x, t)` trained
//! by implicit or sliced score matching on simulated forward paths, with
//! hand-rolled reverse-mode differentiation.
//!
//! The implicit loss per sample is `1/2 ||s||^2 + div_x s`; the sliced loss
//! replaces the divergence with probe-direction estimates
//! `v^T grad_x (s^T v)`, averaged over the probes. Divergence (and the
//! probe terms) are computed exactly by propagating one forward tangent per
//! direction through the network; parameter gradients then come from a
//! reverse sweep over both the primal and tangent computations, which keeps
//! everything exact rather than approximated.
//!
//! Training is plain minibatch Adam over uniformly drawn `(time, path)`
//! pairs. Batch gradients are accumulated over fixed-size chunks that are
//! summed in index order, so results do not depend on thread scheduling.

use std::cell::RefCell;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dot product with four independent accumulators; breaking the FP add
/// dependency chain is worth a measurable slice of the evaluation hot loop.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n4 = a.len() & !3;
    let (a4, ar) = a.split_at(n4);
    let (b4, br) = b.split_at(n4);
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        s0 += ca[0] * cb[0];
        s1 += ca[1] * cb[1];
        s2 += ca[2] * cb[2];
        s3 += ca[3] * cb[3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

use crate::models::PathEnsemble;
use crate::sampler::ControlField;

/// Feed-forward network with inputs `(x, t)`, tanh hidden layers, and a
/// linear output of the state dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScoreNetwork {
    widths: Vec<usize>,
    params: Vec<f64>,
    w_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

impl MlpScoreNetwork {
    fn layout(widths: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
        let mut w_offsets = Vec::new();
        let mut b_offsets = Vec::new();
        let mut off = 0;
        for l in 0..widths.len() - 1 {
            w_offsets.push(off);
            off += widths[l] * widths[l + 1];
            b_offsets.push(off);
            off += widths[l + 1];
        }
        (w_offsets, b_offsets, off)
    }

    fn from_widths(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidInput("network needs at least one layer".into()));
        }
        if widths.iter().any(|w| *w == 0) {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        let (w_offsets, b_offsets, total) = Self::layout(&widths);
        Ok(Self { widths, params: vec![0.0; total], w_offsets, b_offsets })
    }

    /// Zero-initialized network for state dimension `dim` with the given
    /// hidden widths.
    pub fn zeros(dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut widths = vec![dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        Self::from_widths(widths)
    }

    /// Network with uniform fan-in initialization `U(-1/sqrt(m), 1/sqrt(m))`
    /// on weights, zero biases; deterministic given `seed`.
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dim, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.n_layers() {
            let (rows, cols) = net.layer_dims(l);
            let bound = 1.0 / (cols as f64).sqrt();
            let off = net.w_offsets[l];
            for w in net.params[off..off + rows * cols].iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn with_params(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::from_widths(widths)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteValue("network parameters".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// State dimension (output width).
    pub fn dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// `(rows, cols)` of layer `l`'s weight matrix.
    fn layer_dims(&self, l: usize) -> (usize, usize) {
        (self.widths[l + 1], self.widths[l])
    }

    fn weight(&self, l: usize) -> &[f64] {
        let (rows, cols) = self.layer_dims(l);
        &self.params[self.w_offsets[l]..self.w_offsets[l] + rows * cols]
    }

    fn bias(&self, l: usize) -> &[f64] {
        let rows = self.widths[l + 1];
        &self.params[self.b_offsets[l]..self.b_offsets[l] + rows]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn max_width(&self) -> usize {
        *self.widths.iter().max().unwrap()
    }

    /// Evaluates `s_W(x, t)`.
    pub fn forward(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let mut a = vec![0.0; self.max_width()];
        let mut b = vec![0.0; self.max_width()];
        self.forward_into(x, t, &mut out, &mut a, &mut b);
        out
    }

    /// Allocation-free forward pass; `buf_a`/`buf_b` must each hold at least
    /// `max_width()` values.
    pub fn forward_into(
        &self,
        x: &[f64],
        t: f64,
        out: &mut [f64],
        buf_a: &mut [f64],
        buf_b: &mut [f64],
    ) {
        debug_assert_eq!(x.len() + 1, self.widths[0]);
        let mut cur = buf_a;
        let mut nxt = buf_b;
        cur[..x.len()].copy_from_slice(x);
        cur[x.len()] = t;
        let last = self.n_layers() - 1;
        for l in 0..=last {
            let (rows, cols) = self.layer_dims(l);
            let w = self.weight(l);
            let bias = self.bias(l);
            let input = &cur[..cols];
            for r in 0..rows {
                let acc = bias[r] + dot(&w[r * cols..(r + 1) * cols], input);
                nxt[r] = if l < last { acc.tanh() } else { acc };
            }
            std::mem::swap(&mut cur, &mut nxt);
        }
        out.copy_from_slice(&cur[..self.dim()]);
    }

    /// Exact divergence `div_x s_W(x, t)`, one forward tangent per spatial
    /// coordinate.
    pub fn divergence(&self, x: &[f64], t: f64) -> f64 {
        let mut ws = Workspace::new(self, x.len());
        self.propagate(x, t, &DirMode::Basis, &mut ws);
        let n = self.dim();
        let r = &ws.tps[self.n_layers()];
        (0..n).map(|d| r[d * n + d]).sum()
    }

    /// Serializes widths and parameters as versioned JSON.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            widths: self.widths.clone(),
            params: self.params.clone(),
        };
        let data = serde_json::to_vec(&file)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        std::fs::write(path, data)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        let file: CheckpointFile = serde_json::from_slice(&data)
            .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                file.format_version
            )));
        }
        Self::with_params(file.widths, file.params)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Which probe directions drive the divergence term.
enum DirMode<'a> {
    /// Coordinate basis: exact divergence.
    Basis,
    /// Shared probe directions for the whole batch.
    Shared(&'a [Vec<f64>]),
    /// One set of probes per point, flattened `[point][probe][coord]`.
    PerPoint { dirs: &'a [f64], n_v: usize },
}

impl DirMode<'_> {
    fn channels(&self, dim: usize) -> usize {
        match self {
            DirMode::Basis => dim,
            DirMode::Shared(d) => d.len(),
            DirMode::PerPoint { n_v, .. } => *n_v,
        }
    }

    /// Probe `d` for point `p`, written into `out` (state coordinates only).
    fn probe(&self, p: usize, d: usize, dim: usize, out: &mut [f64]) {
        match self {
            DirMode::Basis => {
                out.fill(0.0);
                out[d] = 1.0;
            }
            DirMode::Shared(dirs) => out.copy_from_slice(&dirs[d]),
            DirMode::PerPoint { dirs, n_v } => {
                let off = (p * n_v + d) * dim;
                out.copy_from_slice(&dirs[off..off + dim]);
            }
        }
    }

    /// Scale on the divergence estimate: exact divergence sums the basis
    /// probes, sliced estimates average theirs.
    fn scale(&self, _dim: usize) -> f64 {
        match self {
            DirMode::Basis => 1.0,
            DirMode::Shared(d) => 1.0 / d.len() as f64,
            DirMode::PerPoint { n_v, .. } => 1.0 / *n_v as f64,
        }
    }
}

/// Reusable buffers for one primal + tangent sweep and its reverse pass.
struct Workspace {
    /// `acts[l]`: activations entering layer `l`; `acts[L]` is the output.
    acts: Vec<Vec<f64>>,
    /// `tps[l]`: tangent activations per channel, flattened `[d][coord]`.
    tps: Vec<Vec<f64>>,
    /// `tqs[l]`: pre-activation tangents at hidden levels.
    tqs: Vec<Vec<f64>>,
    channels: usize,
    ubar: Vec<f64>,
    ubar2: Vec<f64>,
    pbar: Vec<f64>,
    pbar2: Vec<f64>,
    abar: Vec<f64>,
    probe: Vec<f64>,
}

impl Workspace {
    fn new(net: &MlpScoreNetwork, channels: usize) -> Self {
        let levels = net.n_layers() + 1;
        let acts = (0..levels).map(|l| vec![0.0; net.widths[l]]).collect();
        let tps = (0..levels).map(|l| vec![0.0; channels * net.widths[l]]).collect();
        let tqs = (0..levels).map(|l| vec![0.0; channels * net.widths[l]]).collect();
        let w = net.max_width();
        Workspace {
            acts,
            tps,
            tqs,
            channels,
            ubar: vec![0.0; w],
            ubar2: vec![0.0; w],
            pbar: vec![0.0; channels * w],
            pbar2: vec![0.0; channels * w],
            abar: vec![0.0; w],
            probe: vec![0.0; net.dim()],
        }
    }
}

impl MlpScoreNetwork {
    /// Primal forward pass plus one tangent channel per probe direction.
    /// Point index `0` is used for probe lookup in basis/shared modes.
    fn propagate(&self, x: &[f64], t: f64, mode: &DirMode<'_>, ws: &mut Workspace) {
        self.propagate_indexed(x, t, 0, mode, ws)
    }

    fn propagate_indexed(
        &self,
        x: &[f64],
        t: f64,
        point: usize,
        mode: &DirMode<'_>,
        ws: &mut Workspace,
    ) {
        let n_in = self.widths[0];
        let dim = self.dim();
        let channels = ws.channels;
        let last = self.n_layers() - 1;

        ws.acts[0][..x.len()].copy_from_slice(x);
        ws.acts[0][x.len()] = t;
        for d in 0..channels {
            mode.probe(point, d, dim, &mut ws.probe);
            let row = &mut ws.tps[0][d * n_in..(d + 1) * n_in];
            row[..dim].copy_from_slice(&ws.probe);
            row[dim] = 0.0; // time carries no spatial tangent
        }

        for l in 0..=last {
            let (rows, cols) = self.layer_dims(l);
            let w = self.weight(l);
            let bias = self.bias(l);
            let (lo, hi) = ws.acts.split_at_mut(l + 1);
            let input = &lo[l][..cols];
            let output = &mut hi[0];
            for r in 0..rows {
                let acc = bias[r] + dot(&w[r * cols..(r + 1) * cols], input);
                output[r] = if l < last { acc.tanh() } else { acc };
            }
            let (plo, phi) = ws.tps.split_at_mut(l + 1);
            let p_in = &plo[l];
            let p_out = &mut phi[0];
            let q_out = &mut ws.tqs[l + 1];
            for d in 0..channels {
                let pin = &p_in[d * cols..(d + 1) * cols];
                for r in 0..rows {
                    let acc = dot(&w[r * cols..(r + 1) * cols], pin);
                    q_out[d * rows + r] = acc;
                    p_out[d * rows + r] = if l < last {
                        let u = output[r];
                        (1.0 - u * u) * acc
                    } else {
                        acc
                    };
                }
            }
        }
    }

    /// Loss and parameter gradient of one point; the gradient is added to
    /// `grad` in place.
    fn point_loss_grad(
        &self,
        x: &[f64],
        t: f64,
        point: usize,
        mode: &DirMode<'_>,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> f64 {
        self.propagate_indexed(x, t, point, mode, ws);
        let dim = self.dim();
        let channels = ws.channels;
        let scale = mode.scale(dim);
        let last = self.n_layers() - 1;

        let s = &ws.acts[last + 1];
        let mut loss = 0.5 * s.iter().map(|v| v * v).sum::<f64>();
        for d in 0..channels {
            mode.probe(point, d, dim, &mut ws.probe);
            let r = &ws.tps[last + 1][d * dim..(d + 1) * dim];
            loss += scale * ws.probe.iter().zip(r).map(|(c, v)| c * v).sum::<f64>();
        }

        // Output layer: sbar = s, rbar_d = scale * c_d.
        {
            let (rows, cols) = self.layer_dims(last);
            let w = self.weight(last);
            let s = &ws.acts[last + 1];
            let u_in = &ws.acts[last][..cols];
            let p_in = &ws.tps[last];
            let w_off = self.w_offsets[last];
            let b_off = self.b_offsets[last];
            for r in 0..rows {
                grad[b_off + r] += s[r];
                let grow = &mut grad[w_off + r * cols..w_off + (r + 1) * cols];
                let sr = s[r];
                for (g, uc) in grow.iter_mut().zip(u_in) {
                    *g += sr * uc;
                }
            }
            for d in 0..channels {
                mode.probe(point, d, dim, &mut ws.probe);
                let pin = &p_in[d * cols..(d + 1) * cols];
                for r in 0..rows {
                    let rb = scale * ws.probe[r];
                    if rb == 0.0 {
                        continue;
                    }
                    let grow = &mut grad[w_off + r * cols..w_off + (r + 1) * cols];
                    for (g, pc) in grow.iter_mut().zip(pin) {
                        *g += rb * pc;
                    }
                }
            }
            // Backpropagate to the previous level.
            ws.ubar[..cols].fill(0.0);
            for r in 0..rows {
                let wrow = &w[r * cols..(r + 1) * cols];
                let sr = s[r];
                for (u, wc) in ws.ubar[..cols].iter_mut().zip(wrow) {
                    *u += wc * sr;
                }
            }
            ws.pbar[..channels * cols].fill(0.0);
            for d in 0..channels {
                mode.probe(point, d, dim, &mut ws.probe);
                let pb = &mut ws.pbar[d * cols..(d + 1) * cols];
                for r in 0..rows {
                    let rb = scale * ws.probe[r];
                    if rb == 0.0 {
                        continue;
                    }
                    let wrow = &w[r * cols..(r + 1) * cols];
                    for (p, wc) in pb.iter_mut().zip(wrow) {
                        *p += rb * wc;
                    }
                }
            }
        }

        // Hidden layers, walking backward. At level l+1 the activation is
        // tanh with phi' = 1 - u^2 and phi'' = -2 u phi'.
        for l in (0..last).rev() {
            let (rows, cols) = self.layer_dims(l);
            let w = self.weight(l);
            let u_out = &ws.acts[l + 1];
            let u_in = &ws.acts[l];
            let p_in = &ws.tps[l];
            let q_out = &ws.tqs[l + 1];
            let w_off = self.w_offsets[l];
            let b_off = self.b_offsets[l];

            for r in 0..rows {
                let u = u_out[r];
                let phi1 = 1.0 - u * u;
                let mut a = phi1 * ws.ubar[r];
                for d in 0..channels {
                    let q = q_out[d * rows + r];
                    let pb = ws.pbar[d * rows + r];
                    a += -2.0 * u * phi1 * q * pb;
                }
                ws.abar[r] = a;
            }

            for r in 0..rows {
                grad[b_off + r] += ws.abar[r];
                let grow = &mut grad[w_off + r * cols..w_off + (r + 1) * cols];
                let ab = ws.abar[r];
                for (g, uc) in grow.iter_mut().zip(&u_in[..cols]) {
                    *g += ab * uc;
                }
            }
            for d in 0..channels {
                let pin = &p_in[d * cols..(d + 1) * cols];
                for r in 0..rows {
                    let u = u_out[r];
                    let qb = (1.0 - u * u) * ws.pbar[d * rows + r];
                    if qb == 0.0 {
                        continue;
                    }
                    let grow = &mut grad[w_off + r * cols..w_off + (r + 1) * cols];
                    for (g, pc) in grow.iter_mut().zip(pin) {
                        *g += qb * pc;
                    }
                }
            }

            if l > 0 {
                ws.ubar2[..cols].fill(0.0);
                for r in 0..rows {
                    let ab = ws.abar[r];
                    let wrow = &w[r * cols..(r + 1) * cols];
                    for (u, wc) in ws.ubar2[..cols].iter_mut().zip(wrow) {
                        *u += wc * ab;
                    }
                }
                ws.pbar2[..channels * cols].fill(0.0);
                for d in 0..channels {
                    let pb2 = &mut ws.pbar2[d * cols..(d + 1) * cols];
                    for r in 0..rows {
                        let u = u_out[r];
                        let qb = (1.0 - u * u) * ws.pbar[d * rows + r];
                        let wrow = &w[r * cols..(r + 1) * cols];
                        for (p, wc) in pb2.iter_mut().zip(wrow) {
                            *p += qb * wc;
                        }
                    }
                }
                std::mem::swap(&mut ws.ubar, &mut ws.ubar2);
                std::mem::swap(&mut ws.pbar, &mut ws.pbar2);
            }
        }

        loss
    }
}

/// Mean loss over a batch together with its parameter gradient.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Fixed chunk length for deterministic parallel accumulation.
const GRAD_CHUNK: usize = 64;

fn loss_batch(
    net: &MlpScoreNetwork,
    points: &[(&[f64], f64)],
    mode: &DirMode<'_>,
) -> Result<LossValue> {
    if points.is_empty() {
        return Err(Error::Precondition("loss needs a nonempty batch".into()));
    }
    let n_params = net.n_params();
    let dim = net.dim();
    let channels = mode.channels(dim);

    let partials: Vec<(f64, Vec<f64>)> = points
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(chunk_idx, chunk)| {
            let mut ws = Workspace::new(net, channels);
            let mut grad = vec![0.0; n_params];
            let mut loss = 0.0;
            for (i, (x, t)) in chunk.iter().enumerate() {
                let point = chunk_idx * GRAD_CHUNK + i;
                loss += net.point_loss_grad(x, *t, point, mode, &mut ws, &mut grad);
            }
            (loss, grad)
        })
        .collect();

    let mut grad = vec![0.0; n_params];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv = 1.0 / points.len() as f64;
    loss *= inv;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteValue("score-matching loss".into()));
    }
    Ok(LossValue { loss, grad })
}

/// Implicit score-matching loss: mean of `1/2 ||s||^2 + div_x s` over the
/// batch, with its exact parameter gradient.
pub fn loss_implicit(net: &MlpScoreNetwork, points: &[(&[f64], f64)]) -> Result<LossValue> {
    loss_batch(net, points, &DirMode::Basis)
}

/// Sliced score-matching loss with the given probe directions (shared by
/// the whole batch): the divergence term becomes the average of
/// `v^T grad_x (s^T v)` over the probes.
pub fn loss_sliced(
    net: &MlpScoreNetwork,
    points: &[(&[f64], f64)],
    directions: &[Vec<f64>],
) -> Result<LossValue> {
    if directions.is_empty() {
        return Err(Error::Precondition("sliced loss needs at least one direction".into()));
    }
    if directions.iter().any(|d| d.len() != net.dim()) {
        return Err(Error::DimensionMismatch {
            expected: net.dim(),
            got: directions.iter().map(|d| d.len()).find(|l| *l != net.dim()).unwrap_or(0),
        });
    }
    loss_batch(net, points, &DirMode::Shared(directions))
}

/// Which loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Implicit,
    /// Sliced score matching with `n_directions` fresh Gaussian probes per
    /// sample per step.
    Sliced { n_directions: usize },
}

/// Minibatch Adam configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Optimizer steps; each draws a fresh uniform minibatch of
    /// `(time, path)` pairs with replacement.
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_opt: f64,
    /// Loss magnitude that aborts training as diverged.
    pub divergence_abort: f64,
}

impl TrainConfig {
    pub fn new(
        batch_size: usize,
        epochs: usize,
        learning_rate: f64,
        loss: LossKind,
        seed: u64,
    ) -> Self {
        Self {
            batch_size,
            epochs,
            learning_rate,
            loss,
            seed,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_opt: 1e-8,
            divergence_abort: 1e8,
        }
    }
}

/// Trains the network on an ensemble of forward paths, sampling batch
/// points uniformly over time indices `1..=steps` and all paths. Returns
/// the per-epoch loss history.
pub fn train(
    net: &mut MlpScoreNetwork,
    ensemble: &PathEnsemble,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::Precondition("batch size must be >= 1".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Precondition("learning rate must be positive".into()));
    }
    let n = ensemble.dim();
    if net.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: net.dim() });
    }
    let grid = ensemble.grid();
    let flat = ensemble.values().as_slice().expect("ensemble is contiguous");
    let stride = grid.n_nodes() * n;
    let n_paths = ensemble.n_paths();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut m = vec![0.0; net.n_params()];
    let mut v = vec![0.0; net.n_params()];
    let mut dirs_flat: Vec<f64> = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut points: Vec<(&[f64], f64)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let k = rng.random_range(1..=grid.steps);
            let j = rng.random_range(0..n_paths);
            let off = j * stride + k * n;
            points.push((&flat[off..off + n], grid.node(k)));
        }

        let result = match cfg.loss {
            LossKind::Implicit => loss_batch(net, &points, &DirMode::Basis),
            LossKind::Sliced { n_directions } => {
                dirs_flat.clear();
                dirs_flat.reserve(cfg.batch_size * n_directions * n);
                for _ in 0..cfg.batch_size * n_directions * n {
                    dirs_flat.push(StandardNormal.sample(&mut rng));
                }
                loss_batch(net, &points, &DirMode::PerPoint {
                    dirs: &dirs_flat,
                    n_v: n_directions,
                })
            }
        };
        let LossValue { loss, grad } = match result {
            Ok(v) => v,
            Err(Error::NonFiniteValue(_)) => {
                return Err(Error::TrainingDiverged { epoch, loss: f64::NAN, history })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss.abs() > cfg.divergence_abort {
            return Err(Error::TrainingDiverged { epoch, loss, history });
        }

        let step = (epoch + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(step);
        let bc2 = 1.0 - cfg.beta2.powi(step);
        let params = net.params_mut();
        for i in 0..params.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon_opt);
        }
        history.push(loss);
    }
    Ok(history)
}

/// Control field `(x, tau) -> eps * s_W(x, T - tau)` backed by a trained
/// network.
pub struct ScoreControl {
    net: MlpScoreNetwork,
    eps: f64,
    horizon: f64,
}

/// Wraps a trained network as the sampler's control.
pub fn score_control(net: MlpScoreNetwork, eps: f64, horizon: f64) -> ScoreControl {
    ScoreControl { net, eps, horizon }
}

impl ScoreControl {
    pub fn network(&self) -> &MlpScoreNetwork {
        &self.net
    }
}

thread_local! {
    static FORWARD_BUFS: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

impl ControlField for ScoreControl {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn evaluate_into(&self, x: &[f64], tau: f64, out: &mut [f64]) {
        let t = self.horizon - tau;
        FORWARD_BUFS.with(|bufs| {
            let mut bufs = bufs.borrow_mut();
            let w = self.net.max_width();
            if bufs.0.len() < w {
                bufs.0.resize(w, 0.0);
                bufs.1.resize(w, 0.0);
            }
            let (a, b) = &mut *bufs;
            self.net.forward_into(x, t, out, a, b);
        });
        for v in out.iter_mut() {
            *v *= self.eps;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{simulate_forward, SdeModel, TimeGrid};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    /// Network computing exactly `s(x, t) = -x`: single linear layer with
    /// `W = [-I | 0]`.
    fn negation_net(dim: usize) -> MlpScoreNetwork {
        let mut net = MlpScoreNetwork::zeros(dim, &[]).unwrap();
        let cols = dim + 1;
        for i in 0..dim {
            net.params_mut()[i * cols + i] = -1.0;
        }
        net
    }

    fn small_random_net(dim: usize, seed: u64) -> MlpScoreNetwork {
        MlpScoreNetwork::new(dim, &[8, 8], seed).unwrap()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = MlpScoreNetwork::zeros(2, &[5]).unwrap();
        assert_eq!(net.forward(&[0.7, -0.3], 0.5), vec![0.0, 0.0]);
        assert_eq!(net.divergence(&[0.7, -0.3], 0.5), 0.0);
    }

    #[test]
    fn negation_net_and_divergence() {
        let net = negation_net(3);
        assert_eq!(net.forward(&[1.0, -2.0, 0.5], 0.9), vec![-1.0, 2.0, -0.5]);
        assert_eq!(net.divergence(&[1.0, -2.0, 0.5], 0.9), -3.0);
    }

    #[test]
    fn output_stays_finite_for_large_inputs() {
        let net = small_random_net(1, 3);
        let out = net.forward(&[1e6], 1.0);
        assert!(out[0].is_finite());
    }

    #[test]
    fn divergence_matches_finite_differences() {
        let net = small_random_net(2, 11);
        let x = [0.3, -0.8];
        let t = 0.4;
        let h = 1e-4;
        let mut fd = 0.0;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            fd += (net.forward(&xp, t)[i] - net.forward(&xm, t)[i]) / (2.0 * h);
        }
        let exact = net.divergence(&x, t);
        assert!(
            ((exact - fd) / fd.abs().max(1e-12)).abs() <= 1e-5,
            "divergence {exact} vs fd {fd}"
        );
    }

    #[test]
    fn implicit_loss_values() {
        let net = negation_net(1);
        let x0 = [0.0];
        let v = loss_implicit(&net, &[(&x0, 0.1)]).unwrap();
        assert_abs_diff_eq!(v.loss, -1.0, epsilon = 1e-15);
        let x2 = [2.0];
        let v = loss_implicit(&net, &[(&x2, 0.1)]).unwrap();
        assert_abs_diff_eq!(v.loss, 1.0, epsilon = 1e-15);

        // Zero net: loss 0 and the ||s||^2 term contributes no gradient.
        let zero = MlpScoreNetwork::zeros(1, &[4]).unwrap();
        let v = loss_implicit(&zero, &[(&x2, 0.1)]).unwrap();
        assert_eq!(v.loss, 0.0);
    }

    #[test]
    fn sliced_equals_implicit_in_1d_with_unit_probe() {
        let net = small_random_net(1, 5);
        let pts: Vec<(Vec<f64>, f64)> =
            (0..16).map(|i| (vec![-2.0 + 0.25 * i as f64], 0.1 + 0.05 * i as f64)).collect();
        let pts_ref: Vec<(&[f64], f64)> = pts.iter().map(|(x, t)| (&x[..], *t)).collect();
        let a = loss_implicit(&net, &pts_ref).unwrap();
        let b = loss_sliced(&net, &pts_ref, &[vec![1.0]]).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn sliced_divergence_is_unbiased() {
        let net = small_random_net(2, 9);
        let x = [0.4, 0.2];
        let t = 0.7;
        let exact = net.divergence(&x, t);
        // Estimate the divergence from single-probe sliced terms.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reps = 100_000;
        let mut values = Vec::with_capacity(reps);
        let base = loss_implicit(&net, &[(&x, t)]).unwrap().loss;
        let s_norm_half = base - exact;
        for _ in 0..reps {
            let v: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let l = loss_sliced(&net, &[(&x, t)], &[v]).unwrap().loss;
            values.push(l - s_norm_half);
        }
        let mean: f64 = values.iter().sum::<f64>() / reps as f64;
        let var: f64 =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / reps as f64;
        let se = (var / reps as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * se + 1e-12,
            "sliced mean {mean} vs exact {exact} (3se = {})",
            3.0 * se
        );
    }

    fn finite_diff_grad(
        net: &MlpScoreNetwork,
        pts: &[(&[f64], f64)],
        dirs: Option<&[Vec<f64>]>,
        h: f64,
    ) -> Vec<f64> {
        let mut base = net.clone();
        let mut out = vec![0.0; net.n_params()];
        for i in 0..net.n_params() {
            let orig = base.params()[i];
            base.params_mut()[i] = orig + h;
            let lp = match dirs {
                None => loss_implicit(&base, pts).unwrap().loss,
                Some(d) => loss_sliced(&base, pts, d).unwrap().loss,
            };
            base.params_mut()[i] = orig - h;
            let lm = match dirs {
                None => loss_implicit(&base, pts).unwrap().loss,
                Some(d) => loss_sliced(&base, pts, d).unwrap().loss,
            };
            base.params_mut()[i] = orig;
            out[i] = (lp - lm) / (2.0 * h);
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = small_random_net(2, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let pts: Vec<(Vec<f64>, f64)> = (0..16)
            .map(|_| {
                (
                    vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
                    rng.random_range(0.05..1.0),
                )
            })
            .collect();
        let pts_ref: Vec<(&[f64], f64)> = pts.iter().map(|(x, t)| (&x[..], *t)).collect();

        let analytic = loss_implicit(&net, &pts_ref).unwrap();
        let fd = finite_diff_grad(&net, &pts_ref, None, 1e-5);
        for i in 0..net.n_params() {
            let tol = 1e-4 * fd[i].abs().max(1.0);
            assert!(
                (analytic.grad[i] - fd[i]).abs() <= tol,
                "implicit grad[{i}]: {} vs fd {}",
                analytic.grad[i],
                fd[i]
            );
        }

        let dirs = vec![vec![0.3, -1.1], vec![0.9, 0.4]];
        let analytic = loss_sliced(&net, &pts_ref, &dirs).unwrap();
        let fd = finite_diff_grad(&net, &pts_ref, Some(&dirs), 1e-5);
        for i in 0..net.n_params() {
            let tol = 1e-4 * fd[i].abs().max(1.0);
            assert!(
                (analytic.grad[i] - fd[i]).abs() <= tol,
                "sliced grad[{i}]: {} vs fd {}",
                analytic.grad[i],
                fd[i]
            );
        }
    }

    fn tiny_ensemble() -> PathEnsemble {
        let model = SdeModel::brownian(1, 1.0, 1.0).unwrap();
        let grid = TimeGrid::span(0.0, 1.0, 20).unwrap();
        let x0 = Array2::from_shape_fn((200, 1), |(j, _)| -1.0 + 0.01 * j as f64);
        simulate_forward(&model, &x0, &grid, 17).unwrap()
    }

    #[test]
    fn zero_epoch_training_is_identity() {
        let ens = tiny_ensemble();
        let mut net = small_random_net(1, 2);
        let before = net.params().to_vec();
        let cfg = TrainConfig::new(32, 0, 1e-3, LossKind::Implicit, 0);
        let history = train(&mut net, &ens, &cfg).unwrap();
        assert!(history.is_empty());
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn training_is_deterministic() {
        let ens = tiny_ensemble();
        let cfg = TrainConfig::new(64, 50, 1e-3, LossKind::Implicit, 7);
        let mut a = small_random_net(1, 2);
        let mut b = small_random_net(1, 2);
        let ha = train(&mut a, &ens, &cfg).unwrap();
        let hb = train(&mut b, &ens, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn loss_history_trends_downward() {
        let ens = tiny_ensemble();
        let mut net = small_random_net(1, 2);
        let cfg = TrainConfig::new(128, 400, 3e-3, LossKind::Implicit, 7);
        let history = train(&mut net, &ens, &cfg).unwrap();
        // Compare windowed averages after the initial 10%, allowing a 5%
        // noise band.
        let window = 50;
        let start = history.len() / 10;
        let avg = |lo: usize| -> f64 {
            history[lo..lo + window].iter().sum::<f64>() / window as f64
        };
        let early = avg(start);
        let late = avg(history.len() - window);
        assert!(
            late <= early + 0.05 * early.abs(),
            "loss did not trend down: early {early}, late {late}"
        );
    }

    #[test]
    fn diverged_training_reports_history() {
        let ens = tiny_ensemble();
        let mut net = small_random_net(1, 2);
        // An absurd learning rate blows the parameters up.
        let cfg = TrainConfig::new(32, 400, 1e6, LossKind::Implicit, 1);
        match train(&mut net, &ens, &cfg) {
            Err(Error::TrainingDiverged { history, .. }) => assert!(!history.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn score_control_scales_and_shifts_time() {
        let net = negation_net(1);
        let ctrl = score_control(net, 2.0, 1.0);
        assert_abs_diff_eq!(ctrl.evaluate(&[1.0], 0.3)[0], -2.0, epsilon = 1e-15);

        let zero = MlpScoreNetwork::zeros(1, &[4]).unwrap();
        let ctrl = score_control(zero, 1.5, 1.0);
        assert_eq!(ctrl.evaluate(&[0.7], 0.2)[0], 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = small_random_net(2, 77);
        net.save_checkpoint(&path).unwrap();
        let loaded = MlpScoreNetwork::load_checkpoint(&path).unwrap();
        assert_eq!(net, loaded);
    }
}
