//! Volume rendering of the signed-distance and color fields.
//!
//! Opacity comes from logistic-transformed SDF differences between
//! consecutive samples; transmittance is the running product of survival
//! probabilities. The same math exists twice: plain functions over slices
//! (sampling, image rendering, oracles) and tape ops (training), and tests
//! pin the two against each other.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::graph::GraphError;
use crate::autodiff::{sigmoid_scalar, Activation, BoundMlp, EncodingSpec, Mlp, NodeId, Tape, Tensor};
use crate::camera::{Camera, Ray};
use crate::fields::SdfField;
use crate::geom::{self, Vec3};
use crate::scene::Image;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("field produced a non-finite value at sample {sample} of ray {ray}")]
    NonFinite { ray: usize, sample: usize },
    #[error("ray misses the scene bounding ball")]
    MissesScene,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Radius of the ball rays are clipped against; the unit scene plus margin.
pub const SCENE_BALL_RADIUS: f64 = 1.3;

/// Anything that yields signed distances for batches of points.
pub trait DistanceSource: Sync {
    fn values(&self, positions: &Tensor) -> Tensor;
}

impl DistanceSource for SdfField {
    fn values(&self, positions: &Tensor) -> Tensor {
        self.eval_batch(positions)
    }
}

/// Analytic closure wrapper, used by oracles and tests.
pub struct FnField<F: Fn(Vec3) -> f64 + Sync>(pub F);

impl<F: Fn(Vec3) -> f64 + Sync> DistanceSource for FnField<F> {
    fn values(&self, positions: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(positions.rows(), 1);
        for r in 0..positions.rows() {
            out.set(r, 0, (self.0)(positions.point(r)));
        }
        out
    }
}

/// Per-sample radiance for batches of (position, view direction) pairs.
pub trait ColorSource: Sync {
    fn colors(&self, positions: &Tensor, dirs: &Tensor) -> Tensor;
}

/// View-conditioned color network: encoded position concatenated with the
/// raw unit view direction.
#[derive(Clone, Debug)]
pub struct ColorField {
    pub pos_encoding: EncodingSpec,
    pub net: Mlp,
}

impl ColorField {
    /// 3 hidden layers x 64 units, sigmoid output.
    pub fn new(rng: &mut impl Rng) -> Self {
        let pos_encoding = EncodingSpec::new(4, true);
        let input_dim = pos_encoding.output_dim(3) + 3;
        ColorField {
            pos_encoding,
            net: Mlp::new(
                input_dim,
                &[64, 64, 64],
                3,
                EncodingSpec::raw(),
                Activation::Softplus(crate::fields::SDF_SOFTPLUS_BETA),
                Activation::Sigmoid,
                rng,
            ),
        }
    }

    pub fn forward(&self, positions: &Tensor, dirs: &Tensor) -> Tensor {
        let enc = self.pos_encoding.encode(positions);
        let mut cat = Tensor::zeros(enc.rows(), enc.cols() + 3);
        for r in 0..enc.rows() {
            let dst = cat.row_mut(r);
            dst[..enc.cols()].copy_from_slice(enc.row(r));
            dst[enc.cols()..].copy_from_slice(dirs.row(r));
        }
        self.net.forward(&cat)
    }

    /// Record the forward pass on a tape. `positions` may be any node
    /// (constant samples or differentiable pseudo points).
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        bound: &BoundMlp,
        positions: NodeId,
        dirs: NodeId,
    ) -> Result<NodeId, GraphError> {
        let enc = self.pos_encoding.encode_graph(tape, positions)?;
        let cat = tape.concat_cols(&[enc.encoded, dirs])?;
        let (out, _) = bound.forward(tape, cat)?;
        Ok(out)
    }
}

impl ColorSource for ColorField {
    fn colors(&self, positions: &Tensor, dirs: &Tensor) -> Tensor {
        self.forward(positions, dirs)
    }
}

/// Constant-albedo color source for tests and diagnostics.
pub struct FnColor<F: Fn(Vec3, Vec3) -> [f64; 3] + Sync>(pub F);

impl<F: Fn(Vec3, Vec3) -> [f64; 3] + Sync> ColorSource for FnColor<F> {
    fn colors(&self, positions: &Tensor, dirs: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(positions.rows(), 3);
        for r in 0..positions.rows() {
            let c = (self.0)(positions.point(r), dirs.point(r));
            out.row_mut(r).copy_from_slice(&c);
        }
        out
    }
}

/// Logistic transform of a signed distance with sharpness s.
pub fn phi_s(x: f64, s: f64) -> f64 {
    debug_assert!(s > 0.0);
    sigmoid_scalar(s * x)
}

/// Opacity of one interval from the signed distances at its endpoints.
pub fn alpha_value(f_i: f64, f_next: f64, s: f64) -> f64 {
    let phi_i = phi_s(f_i, s);
    let phi_next = phi_s(f_next, s);
    ((phi_i - phi_next) / phi_i).max(0.0)
}

/// Front-to-back compositing. Returns the color, the per-interval weights
/// `w_i = T_i alpha_i`, and the transmittances (T_1 = 1).
pub fn composite(alphas: &[f64], colors: &[[f64; 3]]) -> ([f64; 3], Vec<f64>, Vec<f64>) {
    assert_eq!(alphas.len(), colors.len(), "composite length mismatch");
    let mut trans = Vec::with_capacity(alphas.len());
    let mut weights = Vec::with_capacity(alphas.len());
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for (&a, c) in alphas.iter().zip(colors) {
        trans.push(t);
        let w = t * a;
        weights.push(w);
        for k in 0..3 {
            color[k] += w * c[k];
        }
        t *= 1.0 - a;
    }
    (color, weights, trans)
}

/// Index of the first sign change in the sampled distances, if any.
pub fn first_crossing(f: &[f64]) -> Option<usize> {
    f.windows(2).position(|w| w[0] * w[1] < 0.0)
}

/// Linear zero crossing between two samples (exact for affine fields).
pub fn intersection_t(t_i: f64, t_next: f64, f_i: f64, f_next: f64) -> f64 {
    (f_i * t_next - f_next * t_i) / (f_i - f_next)
}

/// First ray-surface intersection from sampled distances: earliest sign
/// change wins; absence is a valid outcome.
pub fn ray_surface_intersection(ray: &Ray, t: &[f64], f: &[f64]) -> Option<(f64, Vec3)> {
    assert_eq!(t.len(), f.len());
    let i = first_crossing(f)?;
    let t_star = intersection_t(t[i], t[i + 1], f[i], f[i + 1]);
    Some((t_star, ray.at(t_star)))
}

/// Hierarchical sampling configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub n_coarse: usize,
    /// Total importance samples, split across `rounds`.
    pub n_importance: usize,
    pub rounds: usize,
    /// Sharpness of the first upsampling round; doubles each round.
    pub up_sharpness: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n_coarse: 64,
            n_importance: 32,
            rounds: 2,
            up_sharpness: 32.0,
        }
    }
}

impl SampleConfig {
    pub fn total(&self) -> usize {
        self.n_coarse + self.n_importance
    }
}

/// One stratified sample per uniform bin of [near, far].
pub fn stratified_ts(ray: &Ray, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    assert!(n >= 2, "need at least two samples per ray");
    let span = (ray.far - ray.near) / n as f64;
    (0..n)
        .map(|i| ray.near + (i as f64 + rng.gen_range(0.0..1.0)) * span)
        .collect()
}

/// Draw `count` samples from the piecewise-constant distribution over the
/// sample intervals given interval weights.
fn importance_draw(t: &[f64], weights: &[f64], count: usize, rng: &mut impl Rng) -> Vec<f64> {
    debug_assert_eq!(weights.len() + 1, t.len());
    let adjusted: Vec<f64> = weights.iter().map(|w| w.max(0.0) + 1e-5).collect();
    let total: f64 = adjusted.iter().sum();
    let mut cdf = Vec::with_capacity(adjusted.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in &adjusted {
        acc += w / total;
        cdf.push(acc);
    }
    *cdf.last_mut().unwrap() = 1.0;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        // Stratified u over (0, 1).
        let u = (k as f64 + rng.gen_range(0.0..1.0)) / count as f64;
        let idx = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => i.min(adjusted.len() - 1),
            Err(i) => i.saturating_sub(1).min(adjusted.len() - 1),
        };
        let lo = cdf[idx];
        let hi = cdf[idx + 1];
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.5 };
        out.push(t[idx] + frac * (t[idx + 1] - t[idx]));
    }
    out
}

/// Coarse stratified samples plus importance rounds concentrated where the
/// field is near zero. Field evaluations are batched across all rays per
/// round. Output is sorted and strictly increasing, `cfg.total()` per ray.
pub fn sample_rays(
    sdf: &dyn DistanceSource,
    rays: &[Ray],
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let mut ts: Vec<Vec<f64>> = rays
        .iter()
        .map(|ray| stratified_ts(ray, cfg.n_coarse, rng))
        .collect();
    if cfg.n_importance == 0 || cfg.rounds == 0 {
        return ts;
    }
    let per_round = cfg.n_importance / cfg.rounds;
    let mut extra_last = cfg.n_importance - per_round * cfg.rounds;
    for round in 0..cfg.rounds {
        let count = if round + 1 == cfg.rounds {
            let c = per_round + extra_last;
            extra_last = 0;
            c
        } else {
            per_round
        };
        if count == 0 {
            continue;
        }
        // Batched field evaluation at all current samples.
        let total: usize = ts.iter().map(Vec::len).sum();
        let mut positions = Tensor::zeros(total, 3);
        let mut row = 0;
        for (ray, t) in rays.iter().zip(&ts) {
            for &ti in t {
                let p = ray.at(ti);
                positions.row_mut(row).copy_from_slice(&p);
                row += 1;
            }
        }
        let f = sdf.values(&positions);
        let s = cfg.up_sharpness * (1u64 << round) as f64;
        let mut offset = 0;
        for (ray_idx, t) in ts.iter_mut().enumerate() {
            let n = t.len();
            let fv = &f.data()[offset..offset + n];
            offset += n;
            let alphas: Vec<f64> = (0..n - 1)
                .map(|i| alpha_value(fv[i], fv[i + 1], s))
                .collect();
            let (_, weights, _) = composite(&alphas, &vec![[0.0; 3]; alphas.len()]);
            let _ = ray_idx;
            let extra = importance_draw(t, &weights, count, rng);
            t.extend(extra);
            t.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // Enforce strict monotonicity.
            for i in 1..t.len() {
                if t[i] <= t[i - 1] {
                    t[i] = t[i - 1] + 1e-9;
                }
            }
        }
    }
    ts
}

/// Everything produced for one rendered ray (detached path).
#[derive(Clone, Debug)]
pub struct RayRender {
    pub color: [f64; 3],
    pub t: Vec<f64>,
    pub f: Vec<f64>,
    pub alphas: Vec<f64>,
    pub weights: Vec<f64>,
    pub transmittances: Vec<f64>,
    pub crossing: Option<(f64, Vec3)>,
}

/// Render rays without a tape: used by image rendering, diagnostics, and
/// oracle tests. All field evaluations are batched across rays.
pub fn render_rays(
    sdf: &dyn DistanceSource,
    color: &dyn ColorSource,
    s: f64,
    rays: &[Ray],
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<Vec<RayRender>, RenderError> {
    let ts = sample_rays(sdf, rays, cfg, rng);
    let n = cfg.total();
    let mut positions = Tensor::zeros(rays.len() * n, 3);
    let mut dirs = Tensor::zeros(rays.len() * n, 3);
    for (ri, (ray, t)) in rays.iter().zip(&ts).enumerate() {
        for (si, &ti) in t.iter().enumerate() {
            positions.row_mut(ri * n + si).copy_from_slice(&ray.at(ti));
            dirs.row_mut(ri * n + si).copy_from_slice(&ray.dir);
        }
    }
    let f = sdf.values(&positions);
    let c = color.colors(&positions, &dirs);
    let mut out = Vec::with_capacity(rays.len());
    for (ri, (ray, t)) in rays.iter().zip(ts).enumerate() {
        let fv: Vec<f64> = (0..n).map(|si| f.get(ri * n + si, 0)).collect();
        for (si, v) in fv.iter().enumerate() {
            if !v.is_finite() {
                return Err(RenderError::NonFinite { ray: ri, sample: si });
            }
        }
        let alphas: Vec<f64> = (0..n - 1)
            .map(|i| alpha_value(fv[i], fv[i + 1], s))
            .collect();
        let interval_colors: Vec<[f64; 3]> = (0..n - 1)
            .map(|i| {
                let row = c.row(ri * n + i);
                [row[0], row[1], row[2]]
            })
            .collect();
        let (col, weights, trans) = composite(&alphas, &interval_colors);
        let crossing = ray_surface_intersection(ray, &t, &fv);
        out.push(RayRender {
            color: col,
            t,
            f: fv,
            alphas,
            weights,
            transmittances: trans,
            crossing,
        });
    }
    Ok(out)
}

/// Render a single pixel; the camera ray is clipped to the scene ball.
pub fn render_pixel(
    sdf: &dyn DistanceSource,
    color: &dyn ColorSource,
    s: f64,
    cam: &Camera,
    u: f64,
    v: f64,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<RayRender, RenderError> {
    use rand::SeedableRng;
    let mut ray = cam.ray(u, v);
    if !ray.clip_to_ball(SCENE_BALL_RADIUS) {
        return Err(RenderError::MissesScene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rendered = render_rays(sdf, color, s, &[ray], cfg, &mut rng)?;
    Ok(rendered.into_iter().next().unwrap())
}

/// Render every `stride`-th pixel and bilinearly upsample to full
/// resolution. Rays that miss the scene ball stay black.
pub fn render_image(
    sdf: &dyn DistanceSource,
    color: &dyn ColorSource,
    s: f64,
    cam: &Camera,
    stride: usize,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<Image, RenderError> {
    use rand::SeedableRng;
    assert!(stride >= 1);
    let gw = cam.width.div_ceil(stride);
    let gh = cam.height.div_ceil(stride);
    // Parallel over rows of the strided grid; each row draws from its own
    // seeded stream so the result is independent of scheduling.
    let rows: Vec<Vec<[f64; 3]>> = (0..gh)
        .into_par_iter()
        .map(|gy| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (gy as u64).wrapping_mul(0x9e3779b9));
            let mut rays = Vec::with_capacity(gw);
            let mut hit = Vec::with_capacity(gw);
            for gx in 0..gw {
                let u = (gx * stride) as f64 + 0.5;
                let v = (gy * stride) as f64 + 0.5;
                let mut ray = cam.ray(u, v);
                if ray.clip_to_ball(SCENE_BALL_RADIUS) {
                    rays.push(ray);
                    hit.push(true);
                } else {
                    hit.push(false);
                }
            }
            let rendered = render_rays(sdf, color, s, &rays, cfg, &mut rng)
                .map(|rr| rr.into_iter().map(|r| r.color).collect::<Vec<_>>())
                .unwrap_or_else(|_| vec![[f64::NAN; 3]; rays.len()]);
            let mut row = Vec::with_capacity(gw);
            let mut k = 0;
            for h in hit {
                if h {
                    row.push(rendered[k]);
                    k += 1;
                } else {
                    row.push([0.0; 3]);
                }
            }
            row
        })
        .collect();
    for row in &rows {
        for c in row {
            if !c[0].is_finite() {
                return Err(RenderError::NonFinite { ray: 0, sample: 0 });
            }
        }
    }
    // Bilinear upsample of the strided grid back to full resolution.
    let mut img = Image::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let fx = (x as f64 / stride as f64).min((gw - 1) as f64);
            let fy = (y as f64 / stride as f64).min((gh - 1) as f64);
            let x0 = (fx.floor() as usize).min(gw.saturating_sub(2));
            let y0 = (fy.floor() as usize).min(gh.saturating_sub(2));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let mut px = [0.0; 3];
            for c in 0..3 {
                let x1 = (x0 + 1).min(gw - 1);
                let y1 = (y0 + 1).min(gh - 1);
                px[c] = (1.0 - ty) * ((1.0 - tx) * rows[y0][x0][c] + tx * rows[y0][x1][c])
                    + ty * ((1.0 - tx) * rows[y1][x0][c] + tx * rows[y1][x1][c]);
            }
            img.set_pixel(x, y, px);
        }
    }
    Ok(img)
}

/// Normal map: the SDF gradient at each pixel's first surface crossing,
/// colorized as (n+1)/2; misses stay black.
pub fn render_normal_image(
    sdf: &SdfField,
    s: f64,
    cam: &Camera,
    stride: usize,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<Image, RenderError> {
    use rand::SeedableRng;
    let _ = s;
    let gw = cam.width.div_ceil(stride);
    let gh = cam.height.div_ceil(stride);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits: Vec<Option<Vec3>> = Vec::with_capacity(gw * gh);
    let mut rays = Vec::new();
    let mut ray_slots = Vec::new();
    for gy in 0..gh {
        for gx in 0..gw {
            let mut ray = cam.ray((gx * stride) as f64 + 0.5, (gy * stride) as f64 + 0.5);
            hits.push(None);
            if ray.clip_to_ball(SCENE_BALL_RADIUS) {
                ray_slots.push(gy * gw + gx);
                rays.push(ray);
            }
        }
    }
    let ts = sample_rays(sdf, &rays, cfg, &mut rng);
    let mut crossing_points = Vec::new();
    let mut crossing_slots = Vec::new();
    for ((ray, t), slot) in rays.iter().zip(&ts).zip(&ray_slots) {
        let mut positions = Tensor::zeros(t.len(), 3);
        for (i, &ti) in t.iter().enumerate() {
            positions.row_mut(i).copy_from_slice(&ray.at(ti));
        }
        let f = sdf.eval_batch(&positions);
        if let Some((_, p)) = ray_surface_intersection(ray, t, f.data()) {
            crossing_points.push(p);
            crossing_slots.push(*slot);
        }
    }
    if !crossing_points.is_empty() {
        let (_, grads) = sdf.eval_with_gradient_batch(&Tensor::from_points(&crossing_points));
        for (i, slot) in crossing_slots.iter().enumerate() {
            let g = grads.point(i);
            let n = geom::norm(g);
            if n > 1e-12 {
                hits[*slot] = Some(geom::scale(g, 1.0 / n));
            }
        }
    }
    let mut img = Image::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let slot = (y / stride).min(gh - 1) * gw + (x / stride).min(gw - 1);
            if let Some(nrm) = hits[slot] {
                img.set_pixel(
                    x,
                    y,
                    [
                        0.5 * (nrm[0] + 1.0),
                        0.5 * (nrm[1] + 1.0),
                        0.5 * (nrm[2] + 1.0),
                    ],
                );
            }
        }
    }
    Ok(img)
}

/// Graph-path render of a ray batch for training.
pub struct GraphRender {
    /// Sample positions, one row per (ray, sample): constants.
    pub positions: Tensor,
    /// Node holding the positions (useful for gathers).
    pub positions_node: NodeId,
    /// Per-ray sample parameters.
    pub ts: Vec<Vec<f64>>,
    /// SDF values at every sample [R*N x 1].
    pub f: NodeId,
    /// Composited colors [R x 3].
    pub color: NodeId,
    /// Interval weights [R*(N-1) x 1].
    pub weights: NodeId,
    /// Interval opacities [R*(N-1) x 1].
    pub alphas: NodeId,
    /// Interval transmittances [R*(N-1) x 1].
    pub transmittances: NodeId,
    pub n_samples: usize,
}

/// Build the differentiable rendering graph for a batch of pre-sampled rays.
#[allow(clippy::too_many_arguments)]
pub fn render_rays_graph(
    tape: &mut Tape,
    sdf_bound: &BoundMlp,
    color_field: &ColorField,
    color_bound: &BoundMlp,
    log_s: NodeId,
    rays: &[Ray],
    ts: &[Vec<f64>],
) -> Result<GraphRender, RenderError> {
    let r = rays.len();
    let n = ts[0].len();
    debug_assert!(ts.iter().all(|t| t.len() == n));
    let mut positions = Tensor::zeros(r * n, 3);
    let mut dirs = Tensor::zeros(r * n, 3);
    for (ri, (ray, t)) in rays.iter().zip(ts).enumerate() {
        for (si, &ti) in t.iter().enumerate() {
            positions.row_mut(ri * n + si).copy_from_slice(&ray.at(ti));
            dirs.row_mut(ri * n + si).copy_from_slice(&ray.dir);
        }
    }
    let positions_node = tape.constant(positions.clone());
    let dirs_node = tape.constant(dirs);
    let (f, _trace) = sdf_bound.forward(tape, positions_node)?;
    if !tape.value(f).is_finite() {
        let bad = tape
            .value(f)
            .data()
            .iter()
            .position(|v| !v.is_finite())
            .unwrap_or(0);
        return Err(RenderError::NonFinite {
            ray: bad / n,
            sample: bad % n,
        });
    }
    let colors = color_field.forward_graph(tape, color_bound, positions_node, dirs_node)?;

    // Interval endpoint gathers: start rows skip the last sample of each
    // ray, end rows skip the first.
    let mut start_rows = Vec::with_capacity(r * (n - 1));
    let mut end_rows = Vec::with_capacity(r * (n - 1));
    for ri in 0..r {
        for si in 0..n - 1 {
            start_rows.push(ri * n + si);
            end_rows.push(ri * n + si + 1);
        }
    }
    let f_i = tape.gather_rows(f, &start_rows)?;
    let f_next = tape.gather_rows(f, &end_rows)?;
    let s_node = tape.exp(log_s)?;
    let sf_i = tape.scale_by_scalar(f_i, s_node)?;
    let sf_next = tape.scale_by_scalar(f_next, s_node)?;
    // Clamp keeps the logistic ratio representable; gradients vanish out
    // there anyway.
    let sf_i = tape.clamp(sf_i, -40.0, 40.0)?;
    let sf_next = tape.clamp(sf_next, -40.0, 40.0)?;
    let phi_i = tape.sigmoid(sf_i)?;
    let phi_next = tape.sigmoid(sf_next)?;
    let diff = tape.sub(phi_i, phi_next)?;
    let ratio = tape.div(diff, phi_i)?;
    let alphas = tape.relu(ratio)?;
    let neg = tape.neg(alphas)?;
    let one_minus = tape.add_const(neg, 1.0)?;
    let transmittances = tape.seg_cumprod_excl(one_minus, n - 1)?;
    let weights = tape.mul(transmittances, alphas)?;
    let interval_colors = tape.gather_rows(colors, &start_rows)?;
    let weighted = tape.mul_col(interval_colors, weights)?;
    let color = tape.seg_sum(weighted, n - 1)?;
    Ok(GraphRender {
        positions,
        positions_node,
        ts: ts.to_vec(),
        f,
        color,
        weights,
        alphas,
        transmittances,
        n_samples: n,
    })
}

/// Pseudo on-surface points of the current batch: the first sign change per
/// ray, with the crossing parameter differentiable through the two samples
/// that bracket it. Returns the [k x 3] point node and the ray indices that
/// produced a crossing.
pub fn pseudo_points_graph(
    tape: &mut Tape,
    render: &GraphRender,
    rays: &[Ray],
) -> Result<Option<(NodeId, Vec<usize>)>, GraphError> {
    let n = render.n_samples;
    let f_values = tape.value(render.f).clone();
    let mut cross_rows = Vec::new();
    let mut ray_ids = Vec::new();
    for (ri, t) in render.ts.iter().enumerate() {
        let fv = &f_values.data()[ri * n..(ri + 1) * n];
        if let Some(i) = first_crossing(fv) {
            cross_rows.push(ri * n + i);
            ray_ids.push(ri);
            let _ = t;
        }
    }
    if cross_rows.is_empty() {
        return Ok(None);
    }
    let next_rows: Vec<usize> = cross_rows.iter().map(|&r| r + 1).collect();
    let f_i = tape.gather_rows(render.f, &cross_rows)?;
    let f_next = tape.gather_rows(render.f, &next_rows)?;
    // t* = (f_i t_{i+1} - f_{i+1} t_i) / (f_i - f_{i+1})
    let mut t_i = Tensor::zeros(cross_rows.len(), 1);
    let mut t_next = Tensor::zeros(cross_rows.len(), 1);
    let mut origins = Tensor::zeros(cross_rows.len(), 3);
    let mut dirs = Tensor::zeros(cross_rows.len(), 3);
    for (k, &row) in cross_rows.iter().enumerate() {
        let ri = row / n;
        let si = row % n;
        t_i.set(k, 0, render.ts[ri][si]);
        t_next.set(k, 0, render.ts[ri][si + 1]);
        origins.row_mut(k).copy_from_slice(&rays[ri].origin);
        dirs.row_mut(k).copy_from_slice(&rays[ri].dir);
    }
    let t_i = tape.constant(t_i);
    let t_next = tape.constant(t_next);
    let origins = tape.constant(origins);
    let dirs = tape.constant(dirs);
    let num_a = tape.mul(f_i, t_next)?;
    let num_b = tape.mul(f_next, t_i)?;
    let num = tape.sub(num_a, num_b)?;
    let den = tape.sub(f_i, f_next)?;
    let t_star = tape.div(num, den)?;
    let offset = tape.mul_col(dirs, t_star)?;
    let points = tape.add(origins, offset)?;
    Ok(Some((points, ray_ids)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::numeric_gradient;
    use rand::SeedableRng;

    fn sphere_field(radius: f64) -> FnField<impl Fn(Vec3) -> f64 + Sync> {
        FnField(move |p: Vec3| geom::norm(p) - radius)
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_s(0.0, 7.0), 0.5);
        assert!((phi_s(1.0, 1.0) - 0.7311).abs() < 1e-4);
        assert!(phi_s(500.0, 1.0) > 1.0 - 1e-12);
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_value(0.3, 0.3, 5.0), 0.0);
        // (sigmoid(1) - sigmoid(-1)) / sigmoid(1)
        assert!((alpha_value(1.0, -1.0, 1.0) - 0.6322).abs() < 1e-4);
        // Receding surface clamps to zero.
        assert_eq!(alpha_value(-0.5, 0.5, 10.0), 0.0);
        // Always within [0, 1].
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = alpha_value(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..200.0),
            );
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn composite_examples() {
        let (c, w, t) = composite(&[1.0], &[[1.0, 0.0, 0.0]]);
        assert_eq!(c, [1.0, 0.0, 0.0]);
        assert_eq!((w[0], t[0]), (1.0, 1.0));

        let (c, _, t) = composite(&[0.0, 0.0, 0.0], &[[1.0; 3]; 3]);
        assert_eq!(c, [0.0; 3]);
        assert!(t.iter().all(|&x| x == 1.0));

        let c1 = [0.2, 0.4, 0.6];
        let c2 = [0.8, 0.1, 0.3];
        let (c, w, _) = composite(&[0.5, 1.0], &[c1, c2]);
        for k in 0..3 {
            assert!((c[k] - (0.5 * c1[k] + 0.5 * c2[k])).abs() < 1e-12);
        }
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn transmittance_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alphas: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let colors = vec![[0.5; 3]; 32];
        let (_, w, t) = composite(&alphas, &colors);
        for i in 0..31 {
            assert_eq!(t[i + 1], t[i] * (1.0 - alphas[i]));
        }
        let total: f64 = w.iter().sum();
        assert!(total <= 1.0 + 1e-6);
    }

    #[test]
    fn crossing_formula_exact_for_affine() {
        // f(r(t)) = 3 - t sampled at 2 and 4.
        let t = intersection_t(2.0, 4.0, 1.0, -1.0);
        assert_eq!(t, 3.0);
        let ray = Ray {
            origin: [0.0; 3],
            dir: [1.0, 0.0, 0.0],
            near: 0.0,
            far: 10.0,
        };
        let ts = [2.0, 4.0];
        let fs = [1.0, -1.0];
        let (t_star, p) = ray_surface_intersection(&ray, &ts, &fs).unwrap();
        assert_eq!(t_star, 3.0);
        assert_eq!(p, [3.0, 0.0, 0.0]);
        // No sign change -> no intersection.
        assert!(ray_surface_intersection(&ray, &ts, &[1.0, 2.0]).is_none());
        // Two sign changes -> earliest wins.
        let ts = [0.0, 1.0, 2.0, 3.0];
        let fs = [1.0, -1.0, 1.0, -1.0];
        let (t_star, _) = ray_surface_intersection(&ray, &ts, &fs).unwrap();
        assert_eq!(t_star, 0.5);
    }

    #[test]
    fn stratified_sampling_one_per_bin() {
        let ray = Ray {
            origin: [0.0; 3],
            dir: [0.0, 0.0, 1.0],
            near: 2.0,
            far: 6.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = stratified_ts(&ray, 16, &mut rng);
        assert_eq!(t.len(), 16);
        let bin = 4.0 / 16.0;
        for (i, &ti) in t.iter().enumerate() {
            assert!(ti >= 2.0 + i as f64 * bin && ti < 2.0 + (i + 1) as f64 * bin);
        }
    }

    #[test]
    fn sampler_no_importance_is_pure_stratified() {
        let ray = Ray {
            origin: [0.0, 0.0, -3.0],
            dir: [0.0, 0.0, 1.0],
            near: 1.0,
            far: 5.0,
        };
        let cfg = SampleConfig {
            n_coarse: 32,
            n_importance: 0,
            rounds: 0,
            up_sharpness: 32.0,
        };
        let sdf = sphere_field(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ts = sample_rays(&sdf, &[ray], &cfg, &mut rng);
        assert_eq!(ts[0].len(), 32);
    }

    #[test]
    fn sampler_deterministic() {
        let ray = Ray {
            origin: [0.0, 0.0, -3.0],
            dir: [0.0, 0.0, 1.0],
            near: 1.0,
            far: 5.0,
        };
        let sdf = sphere_field(1.0);
        let cfg = SampleConfig::default();
        let a = sample_rays(&sdf, &[ray], &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_rays(&sdf, &[ray], &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn importance_concentrates_near_crossing() {
        // Linear field crossing zero at t = 3 on [0, 6].
        let field = FnField(|p: Vec3| 3.0 - p[2]);
        let ray = Ray {
            origin: [0.0, 0.0, 0.0],
            dir: [0.0, 0.0, 1.0],
            near: 0.0,
            far: 6.0,
        };
        let cfg = SampleConfig {
            n_coarse: 64,
            n_importance: 32,
            rounds: 2,
            up_sharpness: 32.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ts = sample_rays(&field, &[ray], &cfg, &mut rng);
        let t = &ts[0];
        assert_eq!(t.len(), 96);
        for w in t.windows(2) {
            assert!(w[1] > w[0]);
        }
        // At least half of the added samples land within 0.5 of the surface.
        // Count samples near t = 3 beyond the coarse baseline density.
        let near: usize = t.iter().filter(|&&ti| (ti - 3.0).abs() < 0.5).count();
        // Coarse alone would put about 64/6 ~ 11 samples there; require the
        // importance rounds to have added at least 16 (half of 32).
        assert!(near >= 11 + 16, "only {near} samples near the crossing");
    }

    #[test]
    fn render_sphere_hit_and_miss() {
        let sdf = sphere_field(0.5);
        let red = FnColor(|_, _| [1.0, 0.0, 0.0]);
        let cam = Camera::look_at(
            [0.0, -2.5, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            110.0,
            110.0,
            96,
            96,
        );
        // Center pixel hits the sphere head on.
        let hit = render_pixel(&sdf, &red, 300.0, &cam, 48.0, 48.0, &SampleConfig::default(), 1)
            .unwrap();
        assert!(
            (hit.color[0] - 1.0).abs() < 0.05 && hit.color[1] < 0.05,
            "{:?}",
            hit.color
        );
        let (t_star, p) = hit.crossing.expect("should cross");
        assert!((t_star - 2.0).abs() < 0.02);
        assert!((geom::norm(p) - 0.5).abs() < 0.01);
        // Corner pixel passes through empty space inside the ball.
        let miss = render_pixel(&sdf, &red, 300.0, &cam, 2.0, 2.0, &SampleConfig::default(), 1)
            .unwrap();
        assert!(miss.color[0].abs() < 0.05, "{:?}", miss.color);
        assert!(miss.crossing.is_none());
    }

    #[test]
    fn batch_invariants_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(4..32);
            let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = rng.gen_range(1.0..500.0);
            let alphas: Vec<f64> = (0..n - 1)
                .map(|i| alpha_value(f[i], f[i + 1], s))
                .collect();
            let colors = vec![[0.3; 3]; n - 1];
            let (_, w, t) = composite(&alphas, &colors);
            assert!(t[0] == 1.0);
            for i in 0..n - 2 {
                assert!(t[i + 1] <= t[i] + 1e-15);
            }
            assert!(alphas.iter().all(|&a| (0.0..=1.0).contains(&a)));
            assert!(w.iter().sum::<f64>() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn monotone_sharpening_concentrates_weight() {
        // Fixed geometry: a sphere crossing; increasing s must not decrease
        // the max interval weight.
        let sdf = sphere_field(0.6);
        let ray = Ray {
            origin: [0.0, -2.0, 0.0],
            dir: [0.0, 1.0, 0.0],
            near: 0.5,
            far: 3.5,
        };
        let cfg = SampleConfig {
            n_coarse: 64,
            n_importance: 0,
            rounds: 0,
            up_sharpness: 32.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts = sample_rays(&sdf, &[ray], &cfg, &mut rng);
        let t = &ts[0];
        let f: Vec<f64> = t.iter().map(|&ti| geom::norm(ray.at(ti)) - 0.6).collect();
        let mut prev_max = 0.0;
        for s in [10.0, 20.0, 40.0, 80.0, 160.0, 320.0] {
            let alphas: Vec<f64> = (0..t.len() - 1)
                .map(|i| alpha_value(f[i], f[i + 1], s))
                .collect();
            let (_, w, _) = composite(&alphas, &vec![[0.0; 3]; alphas.len()]);
            let m = w.iter().cloned().fold(0.0, f64::max);
            assert!(
                m >= prev_max - 1e-9,
                "max weight decreased: {m} < {prev_max} at s = {s}"
            );
            prev_max = m;
        }
    }

    #[test]
    fn graph_render_matches_detached() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let sdf = SdfField::with_sphere_init(0.5, &mut rng);
        let colorf = ColorField::new(&mut rng);
        let cam = Camera::look_at(
            [0.0, -2.5, 0.3],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            110.0,
            110.0,
            96,
            96,
        );
        let mut rays = Vec::new();
        for &(u, v) in &[(48.0, 48.0), (30.0, 60.0), (10.0, 10.0)] {
            let mut ray = cam.ray(u, v);
            assert!(ray.clip_to_ball(SCENE_BALL_RADIUS));
            rays.push(ray);
        }
        let cfg = SampleConfig {
            n_coarse: 24,
            n_importance: 8,
            rounds: 2,
            up_sharpness: 32.0,
        };
        let s: f64 = 55.0;
        let ts = sample_rays(&sdf, &rays, &cfg, &mut ChaCha8Rng::seed_from_u64(7));

        let mut tape = Tape::new();
        let sdf_bound = sdf.net.bind(&mut tape);
        let color_bound = colorf.net.bind(&mut tape);
        let log_s = tape.scalar_input(s.ln());
        let gr = render_rays_graph(
            &mut tape,
            &sdf_bound,
            &colorf,
            &color_bound,
            log_s,
            &rays,
            &ts,
        )
        .unwrap();

        // Detached render with the same precomputed samples.
        let n = cfg.total();
        let mut positions = Tensor::zeros(rays.len() * n, 3);
        let mut dirs = Tensor::zeros(rays.len() * n, 3);
        for (ri, (ray, t)) in rays.iter().zip(&ts).enumerate() {
            for (si, &ti) in t.iter().enumerate() {
                positions.row_mut(ri * n + si).copy_from_slice(&ray.at(ti));
                dirs.row_mut(ri * n + si).copy_from_slice(&ray.dir);
            }
        }
        let f = sdf.eval_batch(&positions);
        let c = colorf.forward(&positions, &dirs);
        for ri in 0..rays.len() {
            let fv: Vec<f64> = (0..n).map(|si| f.get(ri * n + si, 0)).collect();
            let alphas: Vec<f64> = (0..n - 1)
                .map(|i| alpha_value(fv[i], fv[i + 1], s))
                .collect();
            let cols: Vec<[f64; 3]> = (0..n - 1)
                .map(|i| {
                    let row = c.row(ri * n + i);
                    [row[0], row[1], row[2]]
                })
                .collect();
            let (col, w, _) = composite(&alphas, &cols);
            for k in 0..3 {
                assert!(
                    (tape.value(gr.color).get(ri, k) - col[k]).abs() < 1e-10,
                    "ray {ri} channel {k}"
                );
            }
            for (i, wv) in w.iter().enumerate() {
                assert!((tape.value(gr.weights).get(ri * (n - 1) + i, 0) - wv).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn render_gradient_matches_finite_differences() {
        // d/dparams of |C - target|^2 for a small SDF net.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let sdf_net = Mlp::new(
            3,
            &[16, 16],
            1,
            EncodingSpec::new(2, true),
            Activation::Softplus(10.0),
            Activation::None,
            &mut rng,
        );
        let colorf = ColorField {
            pos_encoding: EncodingSpec::new(1, true),
            net: Mlp::new(
                12,
                &[16],
                3,
                EncodingSpec::raw(),
                Activation::Softplus(10.0),
                Activation::Sigmoid,
                &mut rng,
            ),
        };
        let ray = Ray {
            origin: [0.0, 0.0, -2.0],
            dir: [0.0, 0.0, 1.0],
            near: 1.0,
            far: 3.0,
        };
        let ts = vec![(0..12).map(|i| 1.0 + i as f64 * 0.17).collect::<Vec<_>>()];
        let mut tape = Tape::new();
        let sdf_bound = sdf_net.bind(&mut tape);
        let color_bound = colorf.net.bind(&mut tape);
        let log_s = tape.scalar_input((3.0f64).ln());
        let gr = render_rays_graph(
            &mut tape,
            &sdf_bound,
            &colorf,
            &color_bound,
            log_s,
            &[ray],
            &ts,
        )
        .unwrap();
        let target = tape.constant(Tensor::from_vec(1, 3, vec![0.9, 0.1, 0.4]));
        let diff = tape.sub(gr.color, target).unwrap();
        let sq = tape.square(diff).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Check a sample of SDF parameters and s against finite differences.
        for &pid in &[sdf_bound.weights[0], sdf_bound.weights[2], sdf_bound.biases[1], log_s] {
            let (r, c) = tape.shape(pid);
            let ad = grads.get_or_zeros(pid, r, c);
            let fd = numeric_gradient(&mut tape, loss, pid, 1e-5).unwrap();
            for j in 0..ad.len().min(40) {
                let (a, f) = (ad.data()[j], fd.data()[j]);
                assert!(
                    (a - f).abs() <= 1e-3 * a.abs().max(f.abs()).max(1e-2),
                    "param entry {j}: ad={a} fd={f}"
                );
            }
        }
    }

    #[test]
    fn pseudo_points_lie_on_crossings() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let sdf = SdfField::with_sphere_init(0.5, &mut rng);
        let colorf = ColorField::new(&mut rng);
        let cam = Camera::look_at(
            [0.0, -2.5, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            110.0,
            110.0,
            96,
            96,
        );
        let mut rays = Vec::new();
        for &(u, v) in &[(48.0, 48.0), (44.0, 52.0), (2.0, 2.0)] {
            let mut ray = cam.ray(u, v);
            assert!(ray.clip_to_ball(SCENE_BALL_RADIUS));
            rays.push(ray);
        }
        let cfg = SampleConfig::default();
        let ts = sample_rays(&sdf, &rays, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let mut tape = Tape::new();
        let sdf_bound = sdf.net.bind(&mut tape);
        let color_bound = colorf.net.bind(&mut tape);
        let log_s = tape.scalar_input((20.0f64).ln());
        let gr = render_rays_graph(
            &mut tape,
            &sdf_bound,
            &colorf,
            &color_bound,
            log_s,
            &rays,
            &ts,
        )
        .unwrap();
        let (points, ray_ids) = pseudo_points_graph(&mut tape, &gr, &rays)
            .unwrap()
            .expect("center rays cross the init sphere");
        // The corner ray misses; the two center rays cross near radius 0.5.
        assert_eq!(ray_ids, vec![0, 1]);
        let pv = tape.value(points);
        for k in 0..pv.rows() {
            let p = pv.point(k);
            assert!(
                (geom::norm(p) - 0.5).abs() < 0.05,
                "pseudo point {p:?} not near surface"
            );
            assert!(sdf.eval(p).abs() < 0.02);
        }
    }

    #[test]
    fn sphere_silhouette_iou_vs_traced_oracle() {
        let shape = crate::scene::ShapeSpec::Sphere { radius: 0.55 };
        let sdf = FnField(move |p: Vec3| shape.sdf(p));
        let tex = FnColor(|p: Vec3, _| crate::scene::synth::texture(p));
        let cam = Camera::look_at(
            [0.0, -2.2, 0.5],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            110.0,
            110.0,
            64,
            64,
        );
        let img = render_image(&sdf, &tex, 400.0, &cam, 1, &SampleConfig::default(), 5).unwrap();
        let oracle = crate::scene::synth::render_shape_image(&shape, &cam);
        let mut inter = 0usize;
        let mut union = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                let a = img.pixel(x, y).iter().sum::<f64>() > 0.15;
                let b = oracle.pixel(x, y).iter().sum::<f64>() > 0.15;
                if a && b {
                    inter += 1;
                }
                if a || b {
                    union += 1;
                }
            }
        }
        let iou = inter as f64 / union.max(1) as f64;
        assert!(iou > 0.9, "silhouette IoU {iou}");
    }

    #[test]
    fn constant_scene_renders_constant_image() {
        // A field with no zero crossing inside the ball and a constant color:
        // everything composites toward black uniformly.
        let sdf = FnField(|_p: Vec3| 0.9);
        let col = FnColor(|_, _| [0.2, 0.7, 0.4]);
        let cam = Camera::look_at(
            [0.0, -2.5, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            60.0,
            60.0,
            16,
            16,
        );
        let img = render_image(&sdf, &col, 50.0, &cam, 1, &SampleConfig::default(), 3).unwrap();
        let first = img.pixel(8, 8);
        for y in 0..16 {
            for x in 0..16 {
                let p = img.pixel(x, y);
                for k in 0..3 {
                    assert!((p[k] - first[k]).abs() < 0.08, "pixel varies: {p:?} vs {first:?}");
                }
            }
        }
    }

    #[test]
    fn render_image_covers_all_pixels() {
        let sdf = sphere_field(0.5);
        let col = FnColor(|_, _| [1.0, 1.0, 1.0]);
        let cam = Camera::look_at(
            [0.0, -2.5, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            8.0,
            8.0,
            8,
            8,
        );
        let img = render_image(&sdf, &col, 200.0, &cam, 1, &SampleConfig::default(), 1).unwrap();
        assert_eq!(img.width * img.height, 64);
    }
}
