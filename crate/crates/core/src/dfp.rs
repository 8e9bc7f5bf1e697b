//! Differentiable feature partition.
//!
//! Partitions a feature map into content-coherent regions by soft clustering:
//! coordinates are appended to the channels, a pointwise affine+GeLU block
//! reduces the channel count, centers are initialized from a regular grid,
//! and a softmax-over-negative-squared-distance association matrix is
//! alternated with weighted center updates for a fixed number of iterations.
//! The soft association matrix is differentiable end to end; hard labels are
//! taken by argmax and treated as piecewise-constant data.

use crate::autodiff::DiffOp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Partition strategy: learned soft clustering, or the fixed regular grid
/// used as an ablation baseline.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PartitionMode {
    SoftDfp,
    RegularGrid,
}

/// Configuration for [`run_dfp`].
#[derive(Clone, Debug)]
pub struct DfpConfig {
    /// Number of regions m.
    pub regions: usize,
    /// Clustering iterations T.
    pub iters: usize,
    /// Multiplier applied to the appended normalized coordinates. `None`
    /// selects sqrt(m / (h*w)), keeping coordinate distances comparable to
    /// feature distances across resolutions.
    pub coord_scale: Option<f64>,
    /// Append x/y coordinate channels before clustering.
    pub use_coords: bool,
    pub partition_mode: PartitionMode,
    /// Denominator guard for soft column sums.
    pub epsilon: f64,
}

impl Default for DfpConfig {
    fn default() -> Self {
        DfpConfig {
            regions: 64,
            iters: 5,
            coord_scale: None,
            use_coords: true,
            partition_mode: PartitionMode::SoftDfp,
            epsilon: 1e-8,
        }
    }
}

impl DfpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions < 1 {
            return Err(Error::config("dfp", "regions must be at least 1"));
        }
        if self.iters < 1 {
            return Err(Error::config("dfp", "iters must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("dfp", "epsilon must be positive"));
        }
        if let Some(s) = self.coord_scale {
            if !s.is_finite() {
                return Err(Error::config("dfp", "coord_scale must be finite"));
            }
        }
        Ok(())
    }

    pub fn effective_coord_scale(&self, h: usize, w: usize) -> f64 {
        self.coord_scale
            .unwrap_or_else(|| (self.regions as f64 / (h * w) as f64).sqrt())
    }
}

/// Pointwise channel reducer: per-element affine map followed by GeLU.
#[derive(Clone, Debug)]
pub struct ChannelReducer {
    /// c_in x c_out weight matrix.
    pub weight: Tensor,
    /// c_out bias vector.
    pub bias: Tensor,
}

impl ChannelReducer {
    /// Seeded uniform(-1/sqrt(c_in), +1/sqrt(c_in)) weights, zero bias.
    /// The reducer must actually reduce: c_out < c_in.
    pub fn init(c_in: usize, c_out: usize, seed: u64) -> Result<Self> {
        if c_out >= c_in {
            return Err(Error::config(
                "dfp",
                format!("channel reducer must shrink: c_out {c_out} >= c_in {c_in}"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (c_in as f64).sqrt();
        let weight = Tensor::from_f64(
            &[c_in, c_out],
            (0..c_in * c_out).map(|_| rng.gen_range(-bound..bound)).collect(),
        )?;
        let bias = Tensor::zeros_f64(&[c_out])?;
        Ok(ChannelReducer { weight, bias })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Row-stochastic soft assignment of feature elements to regions.
#[derive(Clone, Debug)]
pub struct AssociationMatrix {
    /// n x m matrix; row i gives element i's membership over the m regions.
    pub values: Tensor,
}

impl AssociationMatrix {
    /// Check every entry lies in (0, 1] and every row sums to 1 within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let (n, m) = (self.values.shape()[0], self.values.shape()[1]);
        let v = self.values.as_f64()?;
        for i in 0..n {
            let row = &v[i * m..(i + 1) * m];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::value(
                    "dfp",
                    format!("association row {i} sums to {sum}, not 1"),
                ));
            }
            if row.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
                return Err(Error::value(
                    "dfp",
                    format!("association row {i} has an entry outside (0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

/// Region center matrix, m x c.
#[derive(Clone, Debug)]
pub struct RegionCenters {
    pub values: Tensor,
}

/// Exact Gaussian-CDF GeLU: x * Phi(x).
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Derivative of [`gelu`]: Phi(x) + x * pdf(x).
pub fn gelu_prime(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi + x * pdf
}

fn hw_c(t: &Tensor, module: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        other => Err(Error::shape(
            module,
            format!("expected h x w x c tensor, got shape {other:?}"),
        )),
    }
}

/// Append raw x/y coordinate channels, each multiplied by `scale`.
/// Channel c holds scale*x and channel c+1 holds scale*y.
pub fn append_coords(f: &Tensor, scale: f64) -> Result<Tensor> {
    append_coords_impl(f, scale, false)
}

/// Append coordinates normalized to [0, 1] per axis (x / (w-1), y / (h-1);
/// an axis of size 1 maps to 0), multiplied by `scale`. This is the variant
/// the partition pipeline uses so distance scales match across resolutions.
pub fn append_normalized_coords(f: &Tensor, scale: f64) -> Result<Tensor> {
    append_coords_impl(f, scale, true)
}

fn append_coords_impl(f: &Tensor, scale: f64, normalized: bool) -> Result<Tensor> {
    if !scale.is_finite() {
        return Err(Error::value("dfp", "coordinate scale must be finite"));
    }
    let (h, w, c) = hw_c(f, "append_coords")?;
    let src = f.as_f64()?;
    let mut out = Vec::with_capacity(h * w * (c + 2));
    let x_denom = if w > 1 { (w - 1) as f64 } else { 1.0 };
    let y_denom = if h > 1 { (h - 1) as f64 } else { 1.0 };
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            out.extend_from_slice(&src[base..base + c]);
            let (mut xf, mut yf) = (x as f64, y as f64);
            if normalized {
                xf = if w > 1 { xf / x_denom } else { 0.0 };
                yf = if h > 1 { yf / y_denom } else { 0.0 };
            }
            out.push(scale * xf);
            out.push(scale * yf);
        }
    }
    Tensor::from_f64(&[h, w, c + 2], out)
}

/// Drop the two appended coordinate channels from a cotangent; the inverse
/// wiring of [`append_coords`] for the reverse pass (coordinates are
/// constants, so their cotangent is discarded).
pub fn append_coords_vjp(cot: &Tensor) -> Result<Tensor> {
    let (h, w, c2) = hw_c(cot, "append_coords_vjp")?;
    if c2 < 2 {
        return Err(Error::shape("append_coords_vjp", "needs >= 2 channels"));
    }
    let c = c2 - 2;
    let src = cot.as_f64()?;
    let mut out = Vec::with_capacity(h * w * c);
    for p in 0..h * w {
        out.extend_from_slice(&src[p * c2..p * c2 + c]);
    }
    Tensor::from_f64(&[h, w, c], out)
}

/// Per-element affine map + GeLU over the channel dimension.
pub fn reduce_channels(f_prime: &Tensor, reducer: &ChannelReducer) -> Result<Tensor> {
    Ok(reduce_channels_with_preact(f_prime, reducer)?.0)
}

fn reduce_channels_with_preact(
    f_prime: &Tensor,
    reducer: &ChannelReducer,
) -> Result<(Tensor, Tensor)> {
    let (h, w, c_in) = hw_c(f_prime, "reduce_channels")?;
    if reducer.weight.shape()[0] != c_in {
        return Err(Error::shape(
            "reduce_channels",
            format!(
                "input has {c_in} channels but reducer weight is {:?}",
                reducer.weight.shape()
            ),
        ));
    }
    let c_out = reducer.c_out();
    if reducer.bias.shape() != [c_out] {
        return Err(Error::shape(
            "reduce_channels",
            format!("bias shape {:?} does not match c_out {c_out}", reducer.bias.shape()),
        ));
    }
    let n = h * w;
    let flat = f_prime.clone().reshape(&[n, c_in])?;
    let pre = flat.matmul(&reducer.weight)?; // n x c_out
    let b = reducer.bias.as_f64()?;
    let mut pre_data = pre.as_f64()?.to_vec();
    for i in 0..n {
        for j in 0..c_out {
            pre_data[i * c_out + j] += b[j];
        }
    }
    let act: Vec<f64> = pre_data.iter().map(|&x| gelu(x)).collect();
    Ok((
        Tensor::from_f64(&[h, w, c_out], act)?,
        Tensor::from_f64(&[n, c_out], pre_data)?,
    ))
}

/// VJP of [`reduce_channels`] with respect to the input, weight, and bias.
pub fn reduce_channels_vjp(
    f_prime: &Tensor,
    reducer: &ChannelReducer,
    cot_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w, c_in) = hw_c(f_prime, "reduce_channels")?;
    let (_, pre) = reduce_channels_with_preact(f_prime, reducer)?;
    let n = h * w;
    let c_out = reducer.c_out();
    if cot_out.numel() != n * c_out {
        return Err(Error::shape(
            "reduce_channels_vjp",
            format!("cotangent has {} elements, expected {}", cot_out.numel(), n * c_out),
        ));
    }
    let pre_v = pre.as_f64()?;
    let cot_v = cot_out.as_f64()?;
    let cot_pre: Vec<f64> = pre_v
        .iter()
        .zip(cot_v)
        .map(|(&p, &c)| c * gelu_prime(p))
        .collect();
    let cot_pre_m = Tensor::from_f64(&[n, c_out], cot_pre)?;
    let flat = f_prime.clone().reshape(&[n, c_in])?;
    let cot_weight = flat.transpose()?.matmul(&cot_pre_m)?;
    let cot_input = cot_pre_m.matmul(&reducer.weight.transpose()?)?;
    let mut cot_bias = vec![0.0; c_out];
    let cp = cot_pre_m.as_f64()?;
    for i in 0..n {
        for j in 0..c_out {
            cot_bias[j] += cp[i * c_out + j];
        }
    }
    Ok((
        cot_input.reshape(&[h, w, c_in])?,
        cot_weight,
        Tensor::from_f64(&[c_out], cot_bias)?,
    ))
}

/// Pick the divisor pair (g_h, g_w) of m, with g_h <= h and g_w <= w, whose
/// aspect ratio is closest to the map's. Errors when m has no pair that fits
/// the map (e.g. a large prime m on a strongly non-square map).
pub fn grid_layout(h: usize, w: usize, m: usize) -> Result<(usize, usize)> {
    if m > h * w {
        return Err(Error::config(
            "dfp",
            format!("more regions ({m}) than elements ({})", h * w),
        ));
    }
    let target = h as f64 / w as f64;
    let mut best: Option<(usize, usize, f64)> = None;
    for g_h in 1..=m {
        if m % g_h != 0 {
            continue;
        }
        let g_w = m / g_h;
        if g_h > h || g_w > w {
            continue;
        }
        let score = (g_h as f64 / g_w as f64 - target).abs();
        if best.map_or(true, |(_, _, b)| score < b) {
            best = Some((g_h, g_w, score));
        }
    }
    best.map(|(g_h, g_w, _)| (g_h, g_w)).ok_or_else(|| {
        Error::config(
            "dfp",
            format!("regions {m} admits no grid factorization fitting a {h}x{w} map"),
        )
    })
}

/// 1-based grid cell id for element (y, x) under the `grid_layout` tiling
/// with boundaries at floor(i*h/g_h), floor(i*w/g_w).
fn grid_cell(y: usize, x: usize, h: usize, w: usize, g_h: usize, g_w: usize) -> usize {
    // The largest i with floor(i*h/g_h) <= y is ceil((y+1)*g_h/h) - 1,
    // i.e. ((y+1)*g_h - 1) / h in integer arithmetic.
    let gy = ((y + 1) * g_h - 1) / h;
    let gx = ((x + 1) * g_w - 1) / w;
    gy * g_w + gx + 1
}

/// Mean of the reduced features inside each grid cell; the clustering
/// initializer.
pub fn init_centers_grid(f2: &Tensor, m: usize) -> Result<RegionCenters> {
    let (h, w, c) = hw_c(f2, "init_centers_grid")?;
    let (g_h, g_w) = grid_layout(h, w, m)?;
    let src = f2.as_f64()?;
    let mut sums = vec![0.0; m * c];
    let mut counts = vec![0usize; m];
    for y in 0..h {
        for x in 0..w {
            let cell = grid_cell(y, x, h, w, g_h, g_w) - 1;
            counts[cell] += 1;
            let base = (y * w + x) * c;
            for j in 0..c {
                sums[cell * c + j] += src[base + j];
            }
        }
    }
    for (cell, &count) in counts.iter().enumerate() {
        debug_assert!(count > 0, "grid_layout guarantees nonempty cells");
        for j in 0..c {
            sums[cell * c + j] /= count as f64;
        }
    }
    Ok(RegionCenters {
        values: Tensor::from_f64(&[m, c], sums)?,
    })
}

/// VJP of [`init_centers_grid`] w.r.t. the reduced features.
pub fn init_centers_grid_vjp(f2_shape: &[usize], m: usize, cot_centers: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match f2_shape {
        [h, w, c] => (*h, *w, *c),
        other => return Err(Error::shape("init_centers_grid", format!("bad shape {other:?}"))),
    };
    let (g_h, g_w) = grid_layout(h, w, m)?;
    let mut counts = vec![0usize; m];
    for y in 0..h {
        for x in 0..w {
            counts[grid_cell(y, x, h, w, g_h, g_w) - 1] += 1;
        }
    }
    let cot = cot_centers.as_f64()?;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let cell = grid_cell(y, x, h, w, g_h, g_w) - 1;
            let base = (y * w + x) * c;
            for j in 0..c {
                out[base + j] = cot[cell * c + j] / counts[cell] as f64;
            }
        }
    }
    Tensor::from_f64(&[h, w, c], out)
}

/// One-hot grid-membership association matrix plus 1-based labels, for the
/// regular-grid ablation mode.
pub fn grid_assignment(h: usize, w: usize, m: usize) -> Result<(Tensor, Tensor)> {
    let (g_h, g_w) = grid_layout(h, w, m)?;
    let n = h * w;
    let mut d = vec![0.0; n * m];
    let mut labels = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let cell = grid_cell(y, x, h, w, g_h, g_w);
            d[(y * w + x) * m + cell - 1] = 1.0;
            labels.push(cell as u32);
        }
    }
    Ok((
        Tensor::from_f64(&[n, m], d)?,
        Tensor::from_u32(&[h, w], labels)?,
    ))
}

fn as_matrix(t: &Tensor, module: &'static str) -> Result<(usize, usize, Tensor)> {
    match t.shape() {
        [n, c] => Ok((*n, *c, t.clone())),
        [h, w, c] => Ok((h * w, *c, t.clone().reshape(&[h * w, *c])?)),
        other => Err(Error::shape(
            module,
            format!("expected rank-2 or rank-3 tensor, got {other:?}"),
        )),
    }
}

/// Softmax over negative squared distances to the centers (row-stochastic).
/// Stabilized by subtracting each row's minimum squared distance before
/// exponentiation, which leaves the result mathematically unchanged.
pub fn association(f2: &Tensor, centers: &Tensor) -> Result<Tensor> {
    let (n, c, e) = as_matrix(f2, "association")?;
    let (m, c2, r) = as_matrix(centers, "association")?;
    if c != c2 {
        return Err(Error::shape(
            "association",
            format!("feature channels {c} != center channels {c2}"),
        ));
    }
    let ev = e.as_f64()?;
    let rv = r.as_f64()?;
    if ev.iter().chain(rv.iter()).any(|x| !x.is_finite()) {
        return Err(Error::non_finite("association", "inputs must be finite"));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        let mut min_d2 = f64::INFINITY;
        for j in 0..m {
            let mut d2 = 0.0;
            for k in 0..c {
                let diff = ev[i * c + k] - rv[j * c + k];
                d2 += diff * diff;
            }
            row[j] = d2;
            min_d2 = min_d2.min(d2);
        }
        let mut denom = 0.0;
        for j in 0..m {
            row[j] = (-(row[j] - min_d2)).exp();
            denom += row[j];
        }
        for j in 0..m {
            row[j] /= denom;
        }
    }
    Tensor::from_f64(&[n, m], out)
}

/// VJP of [`association`]: cotangents w.r.t. the features and the centers.
pub fn association_vjp(f2: &Tensor, centers: &Tensor, cot_d: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, e) = as_matrix(f2, "association")?;
    let (m, _, r) = as_matrix(centers, "association")?;
    let d = association(&e, &r)?;
    let dv = d.as_f64()?;
    let cot = cot_d.as_f64()?;
    if cot.len() != n * m {
        return Err(Error::shape(
            "association_vjp",
            format!("cotangent has {} elements, expected {}", cot.len(), n * m),
        ));
    }
    let ev = e.as_f64()?;
    let rv = r.as_f64()?;
    let mut cot_e = vec![0.0; n * c];
    let mut cot_r = vec![0.0; m * c];
    for i in 0..n {
        // softmax backward on logits l = -d2: g = D * (cot - <cot, D>)
        let mut dot = 0.0;
        for j in 0..m {
            dot += cot[i * m + j] * dv[i * m + j];
        }
        for j in 0..m {
            let g_logit = dv[i * m + j] * (cot[i * m + j] - dot);
            let g_d2 = -g_logit;
            for k in 0..c {
                let diff = ev[i * c + k] - rv[j * c + k];
                cot_e[i * c + k] += g_d2 * 2.0 * diff;
                cot_r[j * c + k] -= g_d2 * 2.0 * diff;
            }
        }
    }
    Ok((
        Tensor::from_f64(f2.shape(), cot_e)?,
        Tensor::from_f64(centers.shape(), cot_r)?,
    ))
}

/// Column-sum-weighted mean: R = (1 / (N_D + eps)) o (D^T F). Shared by the
/// center update and by node aggregation.
pub(crate) fn weighted_region_mean(d: &Tensor, f: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (n, m, dm) = as_matrix(d, "update_centers")?;
    let (n2, c, fm) = as_matrix(f, "update_centers")?;
    if n != n2 {
        return Err(Error::shape(
            "update_centers",
            format!("association rows {n} != feature rows {n2}"),
        ));
    }
    let t = dm.transpose()?.matmul(&fm)?; // m x c
    let dv = dm.as_f64()?;
    let mut col_sums = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            col_sums[j] += dv[i * m + j];
        }
    }
    let mut out = t.as_f64()?.to_vec();
    for j in 0..m {
        let denom = col_sums[j] + epsilon;
        for k in 0..c {
            out[j * c + k] /= denom;
        }
    }
    Tensor::from_f64(&[m, c], out)
}

/// VJP of [`weighted_region_mean`] w.r.t. D and F.
pub(crate) fn weighted_region_mean_vjp(
    d: &Tensor,
    f: &Tensor,
    epsilon: f64,
    cot_r: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, m, dm) = as_matrix(d, "update_centers")?;
    let (_, c, fm) = as_matrix(f, "update_centers")?;
    let r = weighted_region_mean(&dm, &fm, epsilon)?;
    let dv = dm.as_f64()?;
    let fv = fm.as_f64()?;
    let rv = r.as_f64()?;
    let cot = cot_r.as_f64()?;
    if cot.len() != m * c {
        return Err(Error::shape(
            "update_centers_vjp",
            format!("cotangent has {} elements, expected {}", cot.len(), m * c),
        ));
    }
    let mut col_sums = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            col_sums[j] += dv[i * m + j];
        }
    }
    let mut cot_d = vec![0.0; n * m];
    let mut cot_f = vec![0.0; n * c];
    for j in 0..m {
        let denom = col_sums[j] + epsilon;
        for i in 0..n {
            let mut acc_d = 0.0;
            for k in 0..c {
                let g = cot[j * c + k] / denom;
                acc_d += g * (fv[i * c + k] - rv[j * c + k]);
                cot_f[i * c + k] += g * dv[i * m + j];
            }
            cot_d[i * m + j] += acc_d;
        }
    }
    Ok((
        Tensor::from_f64(d.shape(), cot_d)?,
        Tensor::from_f64(f.shape(), cot_f)?,
    ))
}

/// Eq.-style center update from the current association matrix.
pub fn update_centers(d: &Tensor, f2: &Tensor, epsilon: f64) -> Result<RegionCenters> {
    Ok(RegionCenters {
        values: weighted_region_mean(d, f2, epsilon)?,
    })
}

pub fn update_centers_vjp(
    d: &Tensor,
    f2: &Tensor,
    epsilon: f64,
    cot_r: &Tensor,
) -> Result<(Tensor, Tensor)> {
    weighted_region_mean_vjp(d, f2, epsilon, cot_r)
}

/// Argmax over each association row, 1-based; ties break toward the lowest
/// region index. Not differentiable.
pub fn hard_assign(d: &Tensor) -> Result<Tensor> {
    let (n, m, dm) = as_matrix(d, "hard_assign")?;
    let dv = dm.as_f64()?;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0usize;
        for j in 1..m {
            if dv[i * m + j] > dv[i * m + best] {
                best = j;
            }
        }
        labels.push((best + 1) as u32);
    }
    Tensor::from_u32(&[n], labels)
}

/// Forward intermediates of a partition run, kept for the reverse pass.
pub struct DfpTrace {
    pub f_prime: Tensor,
    /// Pre-activation of the channel reducer, n x c_out.
    pub pre_act: Tensor,
    /// Reduced features, h x w x c_out.
    pub f2: Tensor,
    /// Centers R_0 ..= R_T (R_0 is the grid init).
    pub centers_seq: Vec<Tensor>,
    /// Associations D_1 ..= D_T computed inside the loop.
    pub assoc_seq: Vec<Tensor>,
    /// Final association computed from the final centers.
    pub d_final: Tensor,
    pub labels: Tensor,
    mode: PartitionMode,
}

/// Output of [`run_dfp`]: the differentiable soft association, the final
/// centers, and the piecewise-constant hard labels.
pub struct DfpOutput {
    pub assoc: AssociationMatrix,
    pub centers: RegionCenters,
    /// h x w, 1-based region labels.
    pub labels: Tensor,
}

/// Gradients of a partition run w.r.t. its differentiable inputs.
pub struct DfpGrads {
    pub wrt_features: Tensor,
    pub wrt_weight: Tensor,
    pub wrt_bias: Tensor,
}

/// Run the full partition pipeline and keep intermediates for
/// [`run_dfp_backward`].
pub fn run_dfp_trace(f: &Tensor, reducer: &ChannelReducer, cfg: &DfpConfig) -> Result<DfpTrace> {
    cfg.validate()?;
    let (h, w, _c) = hw_c(f, "run_dfp")?;
    let f_prime = if cfg.use_coords {
        append_normalized_coords(f, cfg.effective_coord_scale(h, w))?
    } else {
        f.clone()
    };
    let (f2, pre_act) = reduce_channels_with_preact(&f_prime, reducer)?;
    let n = h * w;
    let c_out = reducer.c_out();
    let f2_mat = f2.clone().reshape(&[n, c_out])?;

    match cfg.partition_mode {
        PartitionMode::RegularGrid => {
            let (d, labels) = grid_assignment(h, w, cfg.regions)?;
            let centers = init_centers_grid(&f2, cfg.regions)?;
            Ok(DfpTrace {
                f_prime,
                pre_act,
                f2,
                centers_seq: vec![centers.values],
                assoc_seq: Vec::new(),
                d_final: d,
                labels,
                mode: PartitionMode::RegularGrid,
            })
        }
        PartitionMode::SoftDfp => {
            let mut centers_seq = vec![init_centers_grid(&f2, cfg.regions)?.values];
            let mut assoc_seq = Vec::with_capacity(cfg.iters);
            for _ in 0..cfg.iters {
                let d = association(&f2_mat, centers_seq.last().unwrap())?;
                let r = weighted_region_mean(&d, &f2_mat, cfg.epsilon)?;
                assoc_seq.push(d);
                centers_seq.push(r);
            }
            // One more association so the returned D is consistent with the
            // returned centers.
            let d_final = association(&f2_mat, centers_seq.last().unwrap())?;
            let labels = hard_assign(&d_final)?.reshape(&[h, w])?;
            Ok(DfpTrace {
                f_prime,
                pre_act,
                f2,
                centers_seq,
                assoc_seq,
                d_final,
                labels,
                mode: PartitionMode::SoftDfp,
            })
        }
    }
}

/// Content-coherent soft partition of a feature map into `cfg.regions`
/// regions (grid-initialized, iterated `cfg.iters` times).
pub fn run_dfp(f: &Tensor, reducer: &ChannelReducer, cfg: &DfpConfig) -> Result<DfpOutput> {
    let trace = run_dfp_trace(f, reducer, cfg)?;
    Ok(DfpOutput {
        assoc: AssociationMatrix {
            values: trace.d_final.clone(),
        },
        centers: RegionCenters {
            values: trace.centers_seq.last().unwrap().clone(),
        },
        labels: trace.labels.clone(),
    })
}

/// Reverse pass of [`run_dfp_trace`], unrolling every clustering iteration.
/// `cot_d` seeds the final association matrix, `cot_centers` the final
/// centers; either may be None for a zero cotangent.
pub fn run_dfp_backward(
    f: &Tensor,
    reducer: &ChannelReducer,
    cfg: &DfpConfig,
    trace: &DfpTrace,
    cot_d: Option<&Tensor>,
    cot_centers: Option<&Tensor>,
) -> Result<DfpGrads> {
    let (h, w, c) = hw_c(f, "run_dfp")?;
    let n = h * w;
    let c_out = reducer.c_out();
    let f2_mat = trace.f2.clone().reshape(&[n, c_out])?;
    let m = cfg.regions;

    let mut cot_f2 = vec![0.0; n * c_out];
    let add_into = |acc: &mut Vec<f64>, t: &Tensor| -> Result<()> {
        for (a, b) in acc.iter_mut().zip(t.as_f64()?) {
            *a += b;
        }
        Ok(())
    };

    match trace.mode {
        PartitionMode::RegularGrid => {
            // D is one-hot data; only the grid-mean centers carry gradient.
            if let Some(cr) = cot_centers {
                let g = init_centers_grid_vjp(trace.f2.shape(), m, cr)?;
                add_into(&mut cot_f2, &g)?;
            }
        }
        PartitionMode::SoftDfp => {
            let zeros_r = Tensor::zeros_f64(&[m, c_out])?;
            let mut cot_r = match cot_centers {
                Some(t) => t.clone().reshape(&[m, c_out])?,
                None => zeros_r.clone(),
            };
            if let Some(cd) = cot_d {
                let (ce, cr) = association_vjp(&f2_mat, trace.centers_seq.last().unwrap(), cd)?;
                add_into(&mut cot_f2, &ce)?;
                cot_r = add_tensors(&cot_r, &cr)?;
            }
            for t in (0..cfg.iters).rev() {
                let d_t = &trace.assoc_seq[t];
                let (cot_dt, cot_f2_u) =
                    weighted_region_mean_vjp(d_t, &f2_mat, cfg.epsilon, &cot_r)?;
                add_into(&mut cot_f2, &cot_f2_u)?;
                let (ce, cr_prev) = association_vjp(&f2_mat, &trace.centers_seq[t], &cot_dt)?;
                add_into(&mut cot_f2, &ce)?;
                cot_r = cr_prev;
            }
            let g = init_centers_grid_vjp(trace.f2.shape(), m, &cot_r)?;
            add_into(&mut cot_f2, &g)?;
        }
    }

    let cot_f2_t = Tensor::from_f64(&[h, w, c_out], cot_f2)?;
    let (cot_fprime, cot_weight, cot_bias) =
        reduce_channels_vjp(&trace.f_prime, reducer, &cot_f2_t)?;
    let wrt_features = if cfg.use_coords {
        append_coords_vjp(&cot_fprime)?
    } else {
        cot_fprime
    };
    debug_assert_eq!(wrt_features.shape(), &[h, w, c]);
    Ok(DfpGrads {
        wrt_features,
        wrt_weight: cot_weight,
        wrt_bias: cot_bias,
    })
}

pub(crate) fn add_tensors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a
        .as_f64()?
        .iter()
        .zip(b.as_f64()?)
        .map(|(x, y)| x + y)
        .collect();
    Tensor::from_f64(a.shape(), data)
}

/// Run the clustering loop from externally supplied initial centers.
/// Used to probe equivariance properties of the iteration itself.
pub fn iterate_from(
    f2_mat: &Tensor,
    centers0: &Tensor,
    iters: usize,
    epsilon: f64,
) -> Result<(Tensor, Tensor)> {
    let mut centers = centers0.clone();
    for _ in 0..iters {
        let d = association(f2_mat, &centers)?;
        centers = weighted_region_mean(&d, f2_mat, epsilon)?;
    }
    let d_final = association(f2_mat, &centers)?;
    Ok((d_final, centers))
}

// ---- DiffOp adapters -------------------------------------------------------

/// [`reduce_channels`] as a checkable op over inputs [f_prime, weight, bias].
pub struct ReduceChannelsOp;

impl DiffOp for ReduceChannelsOp {
    fn name(&self) -> &str {
        "reduce_channels"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let reducer = ChannelReducer {
            weight: inputs[1].clone(),
            bias: inputs[2].clone(),
        };
        Ok(vec![reduce_channels(&inputs[0], &reducer)?])
    }
    fn vjp(&self, inputs: &[Tensor], cots: &[Tensor]) -> Result<Vec<Tensor>> {
        let reducer = ChannelReducer {
            weight: inputs[1].clone(),
            bias: inputs[2].clone(),
        };
        let (a, b, c) = reduce_channels_vjp(&inputs[0], &reducer, &cots[0])?;
        Ok(vec![a, b, c])
    }
}

/// [`association`] as a checkable op over inputs [features, centers].
pub struct AssociationOp;

impl DiffOp for AssociationOp {
    fn name(&self) -> &str {
        "association"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![association(&inputs[0], &inputs[1])?])
    }
    fn vjp(&self, inputs: &[Tensor], cots: &[Tensor]) -> Result<Vec<Tensor>> {
        let (a, b) = association_vjp(&inputs[0], &inputs[1], &cots[0])?;
        Ok(vec![a, b])
    }
}

/// [`update_centers`] as a checkable op over inputs [d, features].
pub struct UpdateCentersOp {
    pub epsilon: f64,
}

impl DiffOp for UpdateCentersOp {
    fn name(&self) -> &str {
        "update_centers"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![weighted_region_mean(&inputs[0], &inputs[1], self.epsilon)?])
    }
    fn vjp(&self, inputs: &[Tensor], cots: &[Tensor]) -> Result<Vec<Tensor>> {
        let (a, b) = weighted_region_mean_vjp(&inputs[0], &inputs[1], self.epsilon, &cots[0])?;
        Ok(vec![a, b])
    }
}

/// The whole partition pipeline as a checkable op over inputs
/// [features, weight, bias], emitting [d_final, centers].
pub struct DfpOp {
    pub cfg: DfpConfig,
}

impl DiffOp for DfpOp {
    fn name(&self) -> &str {
        "run_dfp"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let reducer = ChannelReducer {
            weight: inputs[1].clone(),
            bias: inputs[2].clone(),
        };
        let trace = run_dfp_trace(&inputs[0], &reducer, &self.cfg)?;
        Ok(vec![
            trace.d_final.clone(),
            trace.centers_seq.last().unwrap().clone(),
        ])
    }
    fn vjp(&self, inputs: &[Tensor], cots: &[Tensor]) -> Result<Vec<Tensor>> {
        let reducer = ChannelReducer {
            weight: inputs[1].clone(),
            bias: inputs[2].clone(),
        };
        let trace = run_dfp_trace(&inputs[0], &reducer, &self.cfg)?;
        let grads = run_dfp_backward(
            &inputs[0],
            &reducer,
            &self.cfg,
            &trace,
            Some(&cots[0]),
            Some(&cots[1]),
        )?;
        Ok(vec![grads.wrt_features, grads.wrt_weight, grads.wrt_bias])
    }
}
