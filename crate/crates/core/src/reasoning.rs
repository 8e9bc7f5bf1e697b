//! Structure-agnostic graph reasoning and the full feature-enhancement block.
//!
//! Reasoning is deliberately minimal so it works for any node count and any
//! adjacency: average the neighbors of each node (rows of A are treated as
//! constant data), apply a shared linear update, and counter over-smoothing
//! with a gated residual. Updated nodes are remapped to feature elements
//! through the soft association matrix and fused back into the input
//! features with a per-layer learned gate.

use crate::autodiff::DiffOp;
use crate::dfp::{
    add_tensors, gelu, gelu_prime, run_dfp_backward, run_dfp_trace, ChannelReducer, DfpConfig,
    DfpTrace, PartitionMode,
};
use crate::error::{Error, Result};
use crate::graph::{
    aggregate_nodes, aggregate_nodes_vjp, build_adjacency_parallel, project_nodes,
    project_nodes_vjp, stack_index_maps, AdjacencyMatrix, AdjacencyOptions, Hierarchy,
    StackedIndexVolume,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

/// How the node graph is built: the hierarchical sliding-window adjacency,
/// or an all-ones matrix (the linear / fully-connected reasoning ablation).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum GraphMode {
    SlidingWindow,
    FullyConnected,
}

/// Configuration of the full block.
#[derive(Clone, Debug)]
pub struct HrgrConfig {
    /// Regions per layer, one entry per feature layer.
    pub regions: Vec<usize>,
    /// Clustering iterations T.
    pub iters: usize,
    /// Target reduced channel count c''; clamped per layer to stay below
    /// that layer's input channels.
    pub c_reduced: usize,
    /// Common node channel count C.
    pub c_latent: usize,
    pub use_coords: bool,
    pub coord_scale: Option<f64>,
    pub partition_mode: PartitionMode,
    pub graph_mode: GraphMode,
    pub hierarchy: Hierarchy,
    pub self_loops: bool,
    /// Message-pass + regularize repetitions.
    pub rounds: usize,
    pub epsilon: f64,
    pub threads: usize,
}

impl HrgrConfig {
    /// Defaults derived from the layer channel list: C is the widest layer.
    pub fn defaults_for(channels: &[usize], regions: Vec<usize>) -> Self {
        let c_latent = channels.iter().copied().max().unwrap_or(1);
        HrgrConfig {
            regions,
            iters: 5,
            c_reduced: 16,
            c_latent,
            use_coords: true,
            coord_scale: None,
            partition_mode: PartitionMode::SoftDfp,
            graph_mode: GraphMode::SlidingWindow,
            hierarchy: Hierarchy::Inter,
            self_loops: true,
            rounds: 1,
            epsilon: 1e-8,
            threads: 1,
        }
    }

    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if self.regions.len() != layer_count {
            return Err(Error::config(
                "reasoning",
                format!(
                    "{} region counts for {layer_count} layers",
                    self.regions.len()
                ),
            ));
        }
        if self.c_latent < 1 {
            return Err(Error::config("reasoning", "c_latent must be at least 1"));
        }
        if self.threads < 1 {
            return Err(Error::config("reasoning", "threads must be at least 1"));
        }
        self.dfp_config(0).validate()
    }

    /// Per-layer partition config.
    pub fn dfp_config(&self, layer: usize) -> DfpConfig {
        DfpConfig {
            regions: self.regions.get(layer).copied().unwrap_or(1),
            iters: self.iters,
            coord_scale: self.coord_scale,
            use_coords: self.use_coords,
            partition_mode: self.partition_mode,
            epsilon: self.epsilon,
        }
    }

    /// Reduced channel count for a layer with `c_in` raw channels.
    pub fn reduced_channels(&self, c_in: usize) -> Result<usize> {
        let c_prime = if self.use_coords { c_in + 2 } else { c_in };
        if c_prime < 2 {
            return Err(Error::config(
                "reasoning",
                format!("layer with {c_in} channels cannot be reduced"),
            ));
        }
        Ok(self.c_reduced.min(c_prime - 1).max(1))
    }
}

/// All learnable tensors of the block.
#[derive(Clone, Debug)]
pub struct HrgrParams {
    /// Per-layer channel reducers feeding the partition.
    pub phi: Vec<ChannelReducer>,
    /// Per-layer c_i x C node projections.
    pub w_proj: Vec<Tensor>,
    /// Shared C x C update matrix of the message pass.
    pub w_g: Tensor,
    /// C x C matrices of the anti-over-smoothing residual.
    pub w_alpha: Tensor,
    pub w_beta: Tensor,
    /// Per-layer C x c_i inverse projections for the remap.
    pub w_inv: Vec<Tensor>,
    /// Per-layer fusion gates, initialized to 1.
    pub mu: Vec<f64>,
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::from_f64(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("init shape")
}

impl HrgrParams {
    /// Seeded initialization for the given per-layer channel counts:
    /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases,
    /// mu = 1.
    pub fn init(channels: &[usize], cfg: &HrgrConfig, seed: u64) -> Result<Self> {
        cfg.validate(channels.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.c_latent;
        let mut phi = Vec::new();
        let mut w_proj = Vec::new();
        let mut w_inv = Vec::new();
        for &c_i in channels {
            let c_in = if cfg.use_coords { c_i + 2 } else { c_i };
            let c_out = cfg.reduced_channels(c_i)?;
            phi.push(ChannelReducer {
                weight: uniform_init(&mut rng, c_in, c_out),
                bias: Tensor::zeros_f64(&[c_out])?,
            });
            w_proj.push(uniform_init(&mut rng, c_i, c));
            w_inv.push(uniform_init(&mut rng, c, c_i));
        }
        Ok(HrgrParams {
            phi,
            w_proj,
            w_g: uniform_init(&mut rng, c, c),
            w_alpha: uniform_init(&mut rng, c, c),
            w_beta: uniform_init(&mut rng, c, c),
            w_inv,
            mu: vec![1.0; channels.len()],
        })
    }

    pub fn layer_count(&self) -> usize {
        self.mu.len()
    }

    /// Number of tensors [`flatten`](Self::flatten) produces for k layers.
    pub fn flat_len(layers: usize) -> usize {
        5 * layers + 3
    }

    /// Names matching the [`flatten`](Self::flatten) order.
    pub fn param_names(layers: usize) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..layers {
            names.push(format!("phi_weight_{i}"));
            names.push(format!("phi_bias_{i}"));
        }
        for i in 0..layers {
            names.push(format!("w_proj_{i}"));
        }
        names.push("w_g".into());
        names.push("w_alpha".into());
        names.push("w_beta".into());
        for i in 0..layers {
            names.push(format!("w_inv_{i}"));
        }
        for i in 0..layers {
            names.push(format!("mu_{i}"));
        }
        names
    }

    /// Flat tensor list: per-layer phi weight/bias pairs, projections, the
    /// three shared matrices, inverse projections, then mu gates as scalars.
    pub fn flatten(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(Self::flat_len(self.layer_count()));
        for reducer in &self.phi {
            out.push(reducer.weight.clone());
            out.push(reducer.bias.clone());
        }
        out.extend(self.w_proj.iter().cloned());
        out.push(self.w_g.clone());
        out.push(self.w_alpha.clone());
        out.push(self.w_beta.clone());
        out.extend(self.w_inv.iter().cloned());
        out.extend(self.mu.iter().map(|&m| Tensor::scalar(m)));
        out
    }

    /// Rebuild from a [`flatten`](Self::flatten)-ordered tensor list.
    pub fn from_flat(layers: usize, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != Self::flat_len(layers) {
            return Err(Error::shape(
                "reasoning",
                format!(
                    "expected {} parameter tensors for {layers} layers, got {}",
                    Self::flat_len(layers),
                    tensors.len()
                ),
            ));
        }
        let mut it = tensors.iter().cloned();
        let mut phi = Vec::with_capacity(layers);
        for _ in 0..layers {
            let weight = it.next().unwrap();
            let bias = it.next().unwrap();
            phi.push(ChannelReducer { weight, bias });
        }
        let w_proj: Vec<Tensor> = (0..layers).map(|_| it.next().unwrap()).collect();
        let w_g = it.next().unwrap();
        let w_alpha = it.next().unwrap();
        let w_beta = it.next().unwrap();
        let w_inv: Vec<Tensor> = (0..layers).map(|_| it.next().unwrap()).collect();
        let mu: Vec<f64> = (0..layers)
            .map(|_| it.next().unwrap().as_f64().map(|v| v[0]))
            .collect::<Result<_>>()?;
        Ok(HrgrParams {
            phi,
            w_proj,
            w_g,
            w_alpha,
            w_beta,
            w_inv,
            mu,
        })
    }
}

/// Gradients for every tensor in [`HrgrParams`], in
/// [`HrgrParams::flatten`] order.
#[derive(Clone, Debug)]
pub struct HrgrGrads(pub Vec<Tensor>);

/// Neighbor-mean message passing with a shared linear update:
/// R_hat = ((1 / N_A) o (A R_G)) W_G. A is constant data.
pub fn message_pass(r_g: &Tensor, a: &AdjacencyMatrix, w_g: &Tensor) -> Result<Tensor> {
    Ok(neighbor_mean(r_g, a)?.matmul(w_g)?)
}

/// The (1 / N_A) o (A R_G) part of the message pass.
fn neighbor_mean(r_g: &Tensor, a: &AdjacencyMatrix) -> Result<Tensor> {
    let m = a.order();
    let shape = r_g.shape();
    if shape.len() != 2 || shape[0] != m {
        return Err(Error::shape(
            "message_pass",
            format!("nodes {:?} do not match adjacency order {m}", shape),
        ));
    }
    let c = shape[1];
    let sums = a.row_sums();
    if let Some(node) = sums.iter().position(|&s| s == 0) {
        return Err(Error::ZeroRowSum { node });
    }
    let rv = r_g.as_f64()?;
    let mut out = vec![0.0; m * c];
    for u in 0..m {
        for v in 0..m {
            if a.get(u, v) {
                for k in 0..c {
                    out[u * c + k] += rv[v * c + k];
                }
            }
        }
        let inv = 1.0 / sums[u] as f64;
        for k in 0..c {
            out[u * c + k] *= inv;
        }
    }
    Tensor::from_f64(&[m, c], out)
}

/// VJP of [`message_pass`] w.r.t. the node matrix and W_G.
pub fn message_pass_vjp(
    r_g: &Tensor,
    a: &AdjacencyMatrix,
    w_g: &Tensor,
    cot: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let p = neighbor_mean(r_g, a)?;
    let cot_w_g = p.transpose()?.matmul(cot)?;
    let cot_p = cot.matmul(&w_g.transpose()?)?;
    let m = a.order();
    let c = r_g.shape()[1];
    let sums = a.row_sums();
    let cp = cot_p.as_f64()?;
    let mut cot_r = vec![0.0; m * c];
    // cot_R = A^T diag(1/N_A) cot_P, written as row scatter
    for u in 0..m {
        let inv = 1.0 / sums[u] as f64;
        for v in 0..m {
            if a.get(u, v) {
                for k in 0..c {
                    cot_r[v * c + k] += cp[u * c + k] * inv;
                }
            }
        }
    }
    Ok((Tensor::from_f64(&[m, c], cot_r)?, cot_w_g))
}

/// Anti-over-smoothing residual: sigma(R_hat W_alpha) W_beta + R_hat.
pub fn regularize(r_hat: &Tensor, w_alpha: &Tensor, w_beta: &Tensor) -> Result<Tensor> {
    let h = r_hat.matmul(w_alpha)?;
    let g = Tensor::from_f64(
        h.shape(),
        h.as_f64()?.iter().map(|&x| gelu(x)).collect(),
    )?;
    add_tensors(&g.matmul(w_beta)?, r_hat)
}

/// VJP of [`regularize`] w.r.t. the nodes and both matrices.
pub fn regularize_vjp(
    r_hat: &Tensor,
    w_alpha: &Tensor,
    w_beta: &Tensor,
    cot: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let h = r_hat.matmul(w_alpha)?;
    let hv = h.as_f64()?;
    let g = Tensor::from_f64(h.shape(), hv.iter().map(|&x| gelu(x)).collect())?;
    let cot_g = cot.matmul(&w_beta.transpose()?)?;
    let cot_w_beta = g.transpose()?.matmul(cot)?;
    let cot_h = Tensor::from_f64(
        h.shape(),
        cot_g
            .as_f64()?
            .iter()
            .zip(hv)
            .map(|(&cg, &x)| cg * gelu_prime(x))
            .collect(),
    )?;
    let cot_w_alpha = r_hat.transpose()?.matmul(&cot_h)?;
    let cot_r_hat = add_tensors(&cot_h.matmul(&w_alpha.transpose()?)?, cot)?;
    Ok((cot_r_hat, cot_w_alpha, cot_w_beta))
}

fn slice_rows(t: &Tensor, range: Range<usize>) -> Result<Tensor> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    if range.end > rows {
        return Err(Error::shape(
            "remap",
            format!("row range {range:?} exceeds {rows} rows"),
        ));
    }
    let v = t.as_f64()?;
    Tensor::from_f64(
        &[range.len(), cols],
        v[range.start * cols..range.end * cols].to_vec(),
    )
}

/// Distribute a layer's updated node representations back to its feature
/// elements: F_G = D (R_G[layer] W_inv).
pub fn remap(r_g: &Tensor, range: Range<usize>, d: &Tensor, w_inv: &Tensor) -> Result<Tensor> {
    if range.len() != d.shape()[1] {
        return Err(Error::shape(
            "remap",
            format!(
                "layer slice holds {} nodes but D has {} columns",
                range.len(),
                d.shape()[1]
            ),
        ));
    }
    let nodes = slice_rows(r_g, range)?.matmul(w_inv)?;
    d.matmul(&nodes)
}

/// VJP of [`remap`]: cotangents w.r.t. the full node matrix (zero outside
/// the layer's slice), the association matrix, and W_inv.
pub fn remap_vjp(
    r_g: &Tensor,
    range: Range<usize>,
    d: &Tensor,
    w_inv: &Tensor,
    cot: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let r_slice = slice_rows(r_g, range.clone())?;
    let nodes = r_slice.matmul(w_inv)?; // m_i x c_i
    let cot_nodes = d.transpose()?.matmul(cot)?;
    let cot_d = cot.matmul(&nodes.transpose()?)?;
    let cot_w_inv = r_slice.transpose()?.matmul(&cot_nodes)?;
    let cot_slice = cot_nodes.matmul(&w_inv.transpose()?)?;

    let (rows, cols) = (r_g.shape()[0], r_g.shape()[1]);
    let mut full = vec![0.0; rows * cols];
    full[range.start * cols..range.end * cols].copy_from_slice(cot_slice.as_f64()?);
    Ok((Tensor::from_f64(&[rows, cols], full)?, cot_d, cot_w_inv))
}

/// Gated residual fusion: out = mu * f_g + f.
pub fn fuse(f: &Tensor, f_g: &Tensor, mu: f64) -> Result<Tensor> {
    if f.numel() != f_g.numel() {
        return Err(Error::shape(
            "fuse",
            format!("{:?} vs {:?}", f.shape(), f_g.shape()),
        ));
    }
    Tensor::from_f64(
        f.shape(),
        f.as_f64()?
            .iter()
            .zip(f_g.as_f64()?)
            .map(|(&a, &b)| mu * b + a)
            .collect(),
    )
}

/// VJP of [`fuse`]: (cot_f, cot_f_g, cot_mu).
pub fn fuse_vjp(f_g: &Tensor, mu: f64, cot: &Tensor) -> Result<(Tensor, Tensor, f64)> {
    let cot_f = cot.clone();
    let cot_fg = Tensor::from_f64(
        f_g.shape(),
        cot.as_f64()?.iter().map(|&c| mu * c).collect(),
    )?;
    let mut cot_mu = 0.0;
    for (c, g) in cot.as_f64()?.iter().zip(f_g.as_f64()?) {
        cot_mu += c * g;
    }
    Ok((cot_f, cot_fg, cot_mu))
}

struct RoundTrace {
    input: Tensor,
    r_hat: Tensor,
}

/// Forward intermediates of a block run.
pub struct BlockTrace {
    dfp_traces: Vec<DfpTrace>,
    node_values: Vec<Tensor>,
    pub volume: StackedIndexVolume,
    pub adjacency: AdjacencyMatrix,
    rounds: Vec<RoundTrace>,
    r_g_final: Tensor,
    remapped: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
}

/// Labels and adjacency produced alongside the enhanced features.
pub struct BlockDiagnostics {
    pub labels: Vec<Tensor>,
    pub adjacency: AdjacencyMatrix,
}

fn layer_dims(f: &Tensor) -> Result<(usize, usize, usize)> {
    match f.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        other => Err(Error::shape(
            "reasoning",
            format!("feature layers must be h x w x c, got {other:?}"),
        )),
    }
}

/// Run the full block and keep every intermediate for the reverse pass.
pub fn hrgr_block_trace(
    features: &[Tensor],
    params: &HrgrParams,
    cfg: &HrgrConfig,
) -> Result<BlockTrace> {
    let k = features.len();
    cfg.validate(k)?;
    if params.layer_count() != k {
        return Err(Error::shape(
            "reasoning",
            format!("params cover {} layers, got {k} feature layers", params.layer_count()),
        ));
    }

    let mut dfp_traces = Vec::with_capacity(k);
    let mut node_values = Vec::with_capacity(k);
    let mut label_maps = Vec::with_capacity(k);
    for (i, f) in features.iter().enumerate() {
        let (h, w, c) = layer_dims(f)?;
        let trace = run_dfp_trace(f, &params.phi[i], &cfg.dfp_config(i))?;
        let f_mat = f.clone().reshape(&[h * w, c])?;
        let nodes = aggregate_nodes(&trace.d_final, &f_mat, cfg.epsilon)?;
        label_maps.push(trace.labels.clone());
        node_values.push(nodes.values);
        dfp_traces.push(trace);
    }

    let volume = stack_index_maps(&label_maps, &cfg.regions)?;
    let adjacency = match cfg.graph_mode {
        GraphMode::SlidingWindow => build_adjacency_parallel(
            &volume,
            cfg.threads,
            &AdjacencyOptions {
                self_loops: cfg.self_loops,
                hierarchy: cfg.hierarchy,
            },
        )?,
        GraphMode::FullyConnected => AdjacencyMatrix::fully_connected(volume.total_nodes()),
    };

    let mut r_g = project_nodes(&node_values, &params.w_proj)?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let input = r_g.clone();
        let r_hat = message_pass(&input, &adjacency, &params.w_g)?;
        r_g = regularize(&r_hat, &params.w_alpha, &params.w_beta)?;
        rounds.push(RoundTrace { input, r_hat });
    }

    let mut remapped = Vec::with_capacity(k);
    let mut outputs = Vec::with_capacity(k);
    for (i, f) in features.iter().enumerate() {
        let (h, w, c) = layer_dims(f)?;
        let f_g = remap(
            &r_g,
            volume.layer_range(i),
            &dfp_traces[i].d_final,
            &params.w_inv[i],
        )?;
        let f_g = f_g.reshape(&[h, w, c])?;
        outputs.push(fuse(f, &f_g, params.mu[i])?);
        remapped.push(f_g);
    }

    Ok(BlockTrace {
        dfp_traces,
        node_values,
        volume,
        adjacency,
        rounds,
        r_g_final: r_g,
        remapped,
        outputs,
    })
}

/// Enhance a pyramid of feature layers; output shapes equal input shapes.
pub fn hrgr_block(
    features: &[Tensor],
    params: &HrgrParams,
    cfg: &HrgrConfig,
) -> Result<(Vec<Tensor>, BlockDiagnostics)> {
    let trace = hrgr_block_trace(features, params, cfg)?;
    Ok((
        trace.outputs.clone(),
        BlockDiagnostics {
            labels: trace.dfp_traces.iter().map(|t| t.labels.clone()).collect(),
            adjacency: trace.adjacency,
        },
    ))
}

/// Reverse pass of the block: cotangents for every input feature layer plus
/// gradients for every parameter, with fan-out accumulated additively (each
/// feature layer feeds the partition, the aggregation, and the residual).
pub fn hrgr_block_backward(
    features: &[Tensor],
    params: &HrgrParams,
    cfg: &HrgrConfig,
    trace: &BlockTrace,
    cot_outputs: &[Tensor],
) -> Result<(Vec<Tensor>, HrgrGrads)> {
    let k = features.len();
    if cot_outputs.len() != k {
        return Err(Error::shape(
            "reasoning",
            format!("{} cotangents for {k} outputs", cot_outputs.len()),
        ));
    }

    let c_latent = cfg.c_latent;
    let m_total = trace.volume.total_nodes();
    let mut cot_features: Vec<Tensor> = features
        .iter()
        .map(|f| Tensor::zeros_f64(f.shape()))
        .collect::<Result<_>>()?;
    let mut grad_mu = vec![0.0; k];
    let mut grad_w_inv: Vec<Option<Tensor>> = vec![None; k];
    let mut cot_d: Vec<Option<Tensor>> = vec![None; k];
    let mut cot_r_g = Tensor::zeros_f64(&[m_total, c_latent])?;

    // fuse + remap, per layer
    for i in 0..k {
        let (h, w, c) = layer_dims(&features[i])?;
        if cot_outputs[i].shape() != features[i].shape() {
            return Err(Error::shape(
                "reasoning",
                format!(
                    "cotangent {i} shape {:?} does not match output {:?}",
                    cot_outputs[i].shape(),
                    features[i].shape()
                ),
            ));
        }
        let (cot_f, cot_fg, g_mu) = fuse_vjp(&trace.remapped[i], params.mu[i], &cot_outputs[i])?;
        cot_features[i] = add_tensors(&cot_features[i], &cot_f)?;
        grad_mu[i] = g_mu;

        let cot_fg_mat = cot_fg.reshape(&[h * w, c])?;
        let (cot_rg_part, cot_d_i, cot_winv) = remap_vjp(
            &trace.r_g_final,
            trace.volume.layer_range(i),
            &trace.dfp_traces[i].d_final,
            &params.w_inv[i],
            &cot_fg_mat,
        )?;
        cot_r_g = add_tensors(&cot_r_g, &cot_rg_part)?;
        cot_d[i] = Some(cot_d_i);
        grad_w_inv[i] = Some(cot_winv);
    }

    // reasoning rounds, reversed; the shared matrices accumulate over rounds
    let mut grad_w_g = Tensor::zeros_f64(&[c_latent, c_latent])?;
    let mut grad_w_alpha = Tensor::zeros_f64(&[c_latent, c_latent])?;
    let mut grad_w_beta = Tensor::zeros_f64(&[c_latent, c_latent])?;
    for round in trace.rounds.iter().rev() {
        let (cot_r_hat, g_alpha, g_beta) =
            regularize_vjp(&round.r_hat, &params.w_alpha, &params.w_beta, &cot_r_g)?;
        grad_w_alpha = add_tensors(&grad_w_alpha, &g_alpha)?;
        grad_w_beta = add_tensors(&grad_w_beta, &g_beta)?;
        let (cot_input, g_wg) =
            message_pass_vjp(&round.input, &trace.adjacency, &params.w_g, &cot_r_hat)?;
        grad_w_g = add_tensors(&grad_w_g, &g_wg)?;
        cot_r_g = cot_input;
    }

    // projection back to per-layer nodes
    let (cot_nodes, grad_w_proj) = project_nodes_vjp(&trace.node_values, &params.w_proj, &cot_r_g)?;

    // aggregation and partition, per layer
    let mut grad_phi_w = Vec::with_capacity(k);
    let mut grad_phi_b = Vec::with_capacity(k);
    for i in 0..k {
        let (h, w, c) = layer_dims(&features[i])?;
        let f_mat = features[i].clone().reshape(&[h * w, c])?;
        let (cot_d_agg, cot_f_mat) = aggregate_nodes_vjp(
            &trace.dfp_traces[i].d_final,
            &f_mat,
            cfg.epsilon,
            &cot_nodes[i],
        )?;
        cot_features[i] = add_tensors(&cot_features[i], &cot_f_mat.reshape(&[h, w, c])?)?;
        let total_cot_d = add_tensors(cot_d[i].as_ref().unwrap(), &cot_d_agg)?;

        let dfp_grads = run_dfp_backward(
            &features[i],
            &params.phi[i],
            &cfg.dfp_config(i),
            &trace.dfp_traces[i],
            Some(&total_cot_d),
            None,
        )?;
        cot_features[i] = add_tensors(&cot_features[i], &dfp_grads.wrt_features)?;
        grad_phi_w.push(dfp_grads.wrt_weight);
        grad_phi_b.push(dfp_grads.wrt_bias);
    }

    // assemble in flatten order
    let mut grads = Vec::with_capacity(HrgrParams::flat_len(k));
    for i in 0..k {
        grads.push(grad_phi_w[i].clone());
        grads.push(grad_phi_b[i].clone());
    }
    grads.extend(grad_w_proj);
    grads.push(grad_w_g);
    grads.push(grad_w_alpha);
    grads.push(grad_w_beta);
    grads.extend(grad_w_inv.into_iter().map(|g| g.unwrap()));
    grads.extend(grad_mu.into_iter().map(Tensor::scalar));
    Ok((cot_features, HrgrGrads(grads)))
}

// ---- DiffOp adapters -------------------------------------------------------

/// [`message_pass`] as a checkable op over inputs [r_g, w_g]; the adjacency
/// matrix is constant data.
pub struct MessagePassOp {
    pub adjacency: AdjacencyMatrix,
}

impl DiffOp for MessagePassOp {
    fn name(&self) -> &str {
        "message_pass"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![message_pass(&inputs[0], &self.adjacency, &inputs[1])?])
    }
    fn vjp(&self, inputs: &[Tensor], cots: &[Tensor]) -> Result<Vec<Tensor>> {
        let (a, b) = message_pass_vjp(&inputs[0], &self.adjacency, &inputs[1], &cots[0])?;
        Ok(vec![a, b])
    }
}

/// [`regularize`] as a checkable op over inputs [r_hat, w_alpha, w_beta].
pub struct RegularizeOp;

impl DiffOp for RegularizeOp {
    fn name(&self) -> &str {
        "regularize"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![regularize(&inputs[0], &inputs[1], &inputs[2])?])
    }
    fn vjp(&self, inputs: &[Tensor], cots: &[Tensor]) -> Result<Vec<Tensor>> {
        let (a, b, c) = regularize_vjp(&inputs[0], &inputs[1], &inputs[2], &cots[0])?;
        Ok(vec![a, b, c])
    }
}

/// [`remap`] as a checkable op over inputs [r_g, d, w_inv].
pub struct RemapOp {
    pub range: Range<usize>,
}

impl DiffOp for RemapOp {
    fn name(&self) -> &str {
        "remap"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![remap(
            &inputs[0],
            self.range.clone(),
            &inputs[1],
            &inputs[2],
        )?])
    }
    fn vjp(&self, inputs: &[Tensor], cots: &[Tensor]) -> Result<Vec<Tensor>> {
        let (a, b, c) = remap_vjp(
            &inputs[0],
            self.range.clone(),
            &inputs[1],
            &inputs[2],
            &cots[0],
        )?;
        Ok(vec![a, b, c])
    }
}

/// [`fuse`] as a checkable op over inputs [f, f_g, mu(scalar)].
pub struct FuseOp;

impl DiffOp for FuseOp {
    fn name(&self) -> &str {
        "fuse"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mu = inputs[2].as_f64()?[0];
        Ok(vec![fuse(&inputs[0], &inputs[1], mu)?])
    }
    fn vjp(&self, inputs: &[Tensor], cots: &[Tensor]) -> Result<Vec<Tensor>> {
        let mu = inputs[2].as_f64()?[0];
        let (cot_f, cot_fg, cot_mu) = fuse_vjp(&inputs[1], mu, &cots[0])?;
        Ok(vec![cot_f, cot_fg, Tensor::scalar(cot_mu)])
    }
}

/// The whole block as a checkable op over inputs
/// [f_1..f_k, params in flatten order], emitting the enhanced features.
pub struct HrgrBlockOp {
    pub cfg: HrgrConfig,
    pub layers: usize,
}

impl HrgrBlockOp {
    fn split<'a>(&self, inputs: &'a [Tensor]) -> Result<(&'a [Tensor], HrgrParams)> {
        let (features, rest) = inputs.split_at(self.layers);
        Ok((features, HrgrParams::from_flat(self.layers, rest)?))
    }
}

impl DiffOp for HrgrBlockOp {
    fn name(&self) -> &str {
        "hrgr_block"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let (features, params) = self.split(inputs)?;
        let trace = hrgr_block_trace(features, &params, &self.cfg)?;
        Ok(trace.outputs)
    }
    fn vjp(&self, inputs: &[Tensor], cots: &[Tensor]) -> Result<Vec<Tensor>> {
        let (features, params) = self.split(inputs)?;
        let trace = hrgr_block_trace(features, &params, &self.cfg)?;
        let (cot_features, grads) =
            hrgr_block_backward(features, &params, &self.cfg, &trace, cots)?;
        Ok(cot_features.into_iter().chain(grads.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::graph::build_adjacency_oracle;

    fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_f64(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_f64(&[n, n], data).unwrap()
    }

    #[test]
    fn message_pass_identity_is_exact() {
        let r = random_tensor(&[4, 3], 1, -2.0, 2.0);
        let a = AdjacencyMatrix::identity(4);
        let out = message_pass(&r, &a, &eye(3)).unwrap();
        assert_eq!(out.as_f64().unwrap(), r.as_f64().unwrap());
    }

    #[test]
    fn message_pass_two_connected_nodes_average() {
        let r = Tensor::from_f64(&[2, 1], vec![2.0, 4.0]).unwrap();
        let a = AdjacencyMatrix::fully_connected(2);
        let out = message_pass(&r, &a, &eye(1)).unwrap();
        assert_eq!(out.as_f64().unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn message_pass_matches_loop_oracle() {
        let map = Tensor::from_u32(&[5, 5], (0..25).map(|i| 1 + (i as u32 % 4)).collect()).unwrap();
        let vol = stack_index_maps(&[map], &[4]).unwrap();
        let a = build_adjacency_oracle(&vol, &AdjacencyOptions::default()).unwrap();
        let r = random_tensor(&[4, 3], 2, -1.0, 1.0);
        let w = random_tensor(&[3, 3], 3, -1.0, 1.0);
        let got = message_pass(&r, &a, &w).unwrap();

        let rv = r.as_f64().unwrap();
        let wv = w.as_f64().unwrap();
        let mut want = vec![0.0; 4 * 3];
        for u in 0..4 {
            let mut mean = [0.0; 3];
            let mut count = 0.0;
            for v in 0..4 {
                if a.get(u, v) {
                    count += 1.0;
                    for k in 0..3 {
                        mean[k] += rv[v * 3 + k];
                    }
                }
            }
            for k in 0..3 {
                mean[k] /= count;
            }
            for j in 0..3 {
                for k in 0..3 {
                    want[u * 3 + j] += mean[k] * wv[k * 3 + j];
                }
            }
        }
        for (g, w) in got.as_f64().unwrap().iter().zip(want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn message_pass_zero_row_sum_is_named_error() {
        let map = Tensor::from_u32(&[2, 2], vec![1; 4]).unwrap();
        let vol = stack_index_maps(&[map], &[1]).unwrap();
        let a = build_adjacency_oracle(
            &vol,
            &AdjacencyOptions {
                self_loops: false,
                ..Default::default()
            },
        )
        .unwrap();
        let r = random_tensor(&[1, 2], 4, -1.0, 1.0);
        let err = message_pass(&r, &a, &eye(2)).unwrap_err();
        assert!(matches!(err, Error::ZeroRowSum { node: 0 }));
    }

    #[test]
    fn message_pass_gradcheck() {
        let map = Tensor::from_u32(&[4, 4], (0..16).map(|i| 1 + (i as u32 % 3)).collect()).unwrap();
        let vol = stack_index_maps(&[map], &[3]).unwrap();
        let a = build_adjacency_oracle(&vol, &AdjacencyOptions::default()).unwrap();
        let r = random_tensor(&[3, 4], 5, -1.0, 1.0);
        let w = random_tensor(&[4, 4], 6, -1.0, 1.0);
        let report = grad_check(&MessagePassOp { adjacency: a }, &[r, w], 1e-5, 1e-4, 7).unwrap();
        assert!(report.pass, "{}", report.to_text());
    }

    #[test]
    fn regularize_zero_beta_is_pure_residual() {
        let r = random_tensor(&[3, 2], 8, -1.0, 1.0);
        let wa = random_tensor(&[2, 2], 9, -1.0, 1.0);
        let wb = Tensor::zeros_f64(&[2, 2]).unwrap();
        let out = regularize(&r, &wa, &wb).unwrap();
        assert_eq!(out.as_f64().unwrap(), r.as_f64().unwrap());
    }

    #[test]
    fn regularize_zero_input_is_zero() {
        let r = Tensor::zeros_f64(&[3, 2]).unwrap();
        let wa = random_tensor(&[2, 2], 10, -1.0, 1.0);
        let wb = random_tensor(&[2, 2], 11, -1.0, 1.0);
        let out = regularize(&r, &wa, &wb).unwrap();
        assert!(out.as_f64().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn regularize_gradcheck() {
        let r = random_tensor(&[3, 3], 12, -1.0, 1.0);
        let wa = random_tensor(&[3, 3], 13, -1.0, 1.0);
        let wb = random_tensor(&[3, 3], 14, -1.0, 1.0);
        let report = grad_check(&RegularizeOp, &[r, wa, wb], 1e-5, 1e-4, 15).unwrap();
        assert!(report.pass, "{}", report.to_text());
    }

    #[test]
    fn remap_one_hot_copies_node_values() {
        // 3 elements, 2 regions; element regions: 1, 1, 2
        let d = Tensor::from_f64(&[3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let r_g = Tensor::from_f64(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = remap(&r_g, 0..2, &d, &eye(2)).unwrap();
        assert_eq!(
            out.as_f64().unwrap(),
            &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn remap_uniform_rows_give_mean_node() {
        let d = Tensor::from_f64(&[2, 2], vec![0.5; 4]).unwrap();
        let r_g = Tensor::from_f64(&[2, 1], vec![2.0, 6.0]).unwrap();
        let out = remap(&r_g, 0..2, &d, &eye(1)).unwrap();
        assert_eq!(out.as_f64().unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn remap_inverts_aggregate_on_hard_partition() {
        // piecewise-constant features over a one-hot partition round-trip
        let d = Tensor::from_f64(
            &[4, 2],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let f = Tensor::from_f64(&[4, 2], vec![1.0, -1.0, 1.0, -1.0, 5.0, 2.0, 5.0, 2.0]).unwrap();
        let nodes = aggregate_nodes(&d, &f, 1e-12).unwrap().values;
        let back = remap(&nodes, 0..2, &d, &eye(2)).unwrap();
        for (a, b) in back.as_f64().unwrap().iter().zip(f.as_f64().unwrap()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn remap_gradcheck() {
        let r_g = random_tensor(&[5, 3], 16, -1.0, 1.0);
        let d = random_tensor(&[6, 2], 17, 0.05, 1.0);
        let w_inv = random_tensor(&[3, 4], 18, -1.0, 1.0);
        let report = grad_check(&RemapOp { range: 1..3 }, &[r_g, d, w_inv], 1e-5, 1e-4, 19).unwrap();
        assert!(report.pass, "{}", report.to_text());
    }

    #[test]
    fn fuse_gates() {
        let f = random_tensor(&[2, 2, 2], 20, -1.0, 1.0);
        let f_g = random_tensor(&[2, 2, 2], 21, -1.0, 1.0);
        let out = fuse(&f, &f_g, 0.0).unwrap();
        assert_eq!(out.as_f64().unwrap(), f.as_f64().unwrap());

        let neg = Tensor::from_f64(
            f.shape(),
            f.as_f64().unwrap().iter().map(|x| -x).collect(),
        )
        .unwrap();
        let out = fuse(&f, &neg, 1.0).unwrap();
        assert!(out.as_f64().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fuse_mu_gradient_is_inner_product() {
        let f = random_tensor(&[2, 3, 1], 22, -1.0, 1.0);
        let f_g = random_tensor(&[2, 3, 1], 23, -1.0, 1.0);
        let cot = random_tensor(&[2, 3, 1], 24, -1.0, 1.0);
        let (_, _, cot_mu) = fuse_vjp(&f_g, 0.7, &cot).unwrap();
        let want: f64 = cot
            .as_f64()
            .unwrap()
            .iter()
            .zip(f_g.as_f64().unwrap())
            .map(|(a, b)| a * b)
            .sum();
        assert!((cot_mu - want).abs() < 1e-12);
        let _ = f;
    }

    #[test]
    fn fuse_gradcheck() {
        let f = random_tensor(&[2, 2, 2], 25, -1.0, 1.0);
        let f_g = random_tensor(&[2, 2, 2], 26, -1.0, 1.0);
        let mu = Tensor::scalar(0.8);
        let report = grad_check(&FuseOp, &[f, f_g, mu], 1e-5, 1e-4, 27).unwrap();
        assert!(report.pass, "{}", report.to_text());
    }

    fn small_block_setup(seed: u64) -> (Vec<Tensor>, HrgrParams, HrgrConfig) {
        let features = vec![
            random_tensor(&[8, 8, 4], seed, -1.0, 1.0),
            random_tensor(&[4, 4, 8], seed + 1, -1.0, 1.0),
        ];
        let mut cfg = HrgrConfig::defaults_for(&[4, 8], vec![4, 4]);
        cfg.iters = 2;
        cfg.c_reduced = 4;
        cfg.c_latent = 8;
        let params = HrgrParams::init(&[4, 8], &cfg, seed + 2).unwrap();
        (features, params, cfg)
    }

    #[test]
    fn block_preserves_shapes() {
        let features = vec![
            random_tensor(&[32, 32, 8], 30, -1.0, 1.0),
            random_tensor(&[16, 16, 16], 31, -1.0, 1.0),
        ];
        let mut cfg = HrgrConfig::defaults_for(&[8, 16], vec![16, 4]);
        cfg.iters = 2;
        let params = HrgrParams::init(&[8, 16], &cfg, 32).unwrap();
        let (outputs, diag) = hrgr_block(&features, &params, &cfg).unwrap();
        assert_eq!(outputs[0].shape(), &[32, 32, 8]);
        assert_eq!(outputs[1].shape(), &[16, 16, 16]);
        assert_eq!(diag.labels[0].shape(), &[32, 32]);
        assert_eq!(diag.labels[1].shape(), &[16, 16]);
        assert_eq!(diag.adjacency.order(), 20);
        assert!(diag.adjacency.is_symmetric());
    }

    #[test]
    fn block_with_zero_mu_is_identity() {
        let (features, mut params, cfg) = small_block_setup(40);
        params.mu = vec![0.0, 0.0];
        let (outputs, _) = hrgr_block(&features, &params, &cfg).unwrap();
        for (out, f) in outputs.iter().zip(&features) {
            assert_eq!(out.as_f64().unwrap(), f.as_f64().unwrap());
        }
    }

    #[test]
    fn block_fully_connected_round_averages_to_global_mean() {
        let (features, params, mut cfg) = small_block_setup(50);
        cfg.graph_mode = GraphMode::FullyConnected;
        let trace = hrgr_block_trace(&features, &params, &cfg).unwrap();
        let r0 = &trace.rounds[0].input;
        let m = r0.shape()[0];
        let c = r0.shape()[1];
        let rv = r0.as_f64().unwrap();
        let mut mean = vec![0.0; c];
        for u in 0..m {
            for k in 0..c {
                mean[k] += rv[u * c + k] / m as f64;
            }
        }
        // R_hat rows should equal mean * W_G
        let want_row = Tensor::from_f64(&[1, c], mean)
            .unwrap()
            .matmul(&params.w_g)
            .unwrap();
        let rh = trace.rounds[0].r_hat.as_f64().unwrap();
        for u in 0..m {
            for k in 0..c {
                assert!((rh[u * c + k] - want_row.as_f64().unwrap()[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn block_gradcheck_tiny() {
        let features = vec![random_tensor(&[4, 4, 2], 60, -1.0, 1.0)];
        let mut cfg = HrgrConfig::defaults_for(&[2], vec![4]);
        cfg.iters = 1;
        cfg.c_reduced = 3;
        cfg.c_latent = 3;
        let params = HrgrParams::init(&[2], &cfg, 61).unwrap();
        let mut inputs = features.clone();
        inputs.extend(params.flatten());
        let op = HrgrBlockOp { cfg, layers: 1 };
        let report = grad_check(&op, &inputs, 1e-5, 1e-4, 62).unwrap();
        assert!(report.pass, "{}", report.to_text());
    }

    #[test]
    fn param_flatten_round_trips() {
        let cfg = HrgrConfig::defaults_for(&[4, 8], vec![4, 4]);
        let params = HrgrParams::init(&[4, 8], &cfg, 70).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), HrgrParams::flat_len(2));
        assert_eq!(HrgrParams::param_names(2).len(), flat.len());
        let back = HrgrParams::from_flat(2, &flat).unwrap();
        assert_eq!(back.w_g, params.w_g);
        assert_eq!(back.mu, params.mu);
        assert_eq!(back.phi[1].weight, params.phi[1].weight);
    }
}
