//! Tile-parallel front-to-back compositing and its exact adjoint.

use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::{Matrix2, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::project::{project, project_backward, Projected};
use super::{Gaussian, COLOR_DIM};
use crate::error::{Error, Result};
use crate::store::CameraPose;

pub const TILE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Contributions with alpha below this are skipped; also sets the
    /// footprint radius used for tile culling. Zero disables both.
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Compositing stops once transmittance drops below this.
    pub transmittance_min: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { alpha_min: 1.0 / 255.0, alpha_max: 0.99, transmittance_min: 1e-4 }
    }
}

impl RenderOptions {
    /// Smooth variant with no alpha floor and no early termination, used
    /// where the image must be a differentiable function of geometry.
    pub fn smooth() -> Self {
        Self { alpha_min: 0.0, alpha_max: 0.99, transmittance_min: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Contribution {
    gaussian: u32,
    alpha: f64,
    /// Transmittance in front of this Gaussian.
    transmittance: f64,
}

/// Saved forward state: per-pixel contributor lists plus the projections
/// they came from. Valid for any colors/features as long as geometry,
/// opacity, camera and image size are unchanged.
#[derive(Debug, Clone)]
pub struct RenderState {
    width: usize,
    height: usize,
    fingerprint: u64,
    projected: Vec<Option<Projected>>,
    offsets: Vec<usize>,
    entries: Vec<Contribution>,
}

#[derive(Debug, Clone)]
pub struct SplatOutput {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    /// Row-major `H*W*3`.
    pub color: Vec<f64>,
    /// Row-major `H*W*d_f`.
    pub feature: Vec<f64>,
    pub blend_weight_sum: Vec<f64>,
    pub state: RenderState,
}

impl SplatOutput {
    pub fn feature_at(&self, x: usize, y: usize) -> &[f64] {
        let p = y * self.width + x;
        &self.feature[p * self.feature_dim..(p + 1) * self.feature_dim]
    }

    pub fn color_at(&self, x: usize, y: usize) -> [f64; 3] {
        let p = (y * self.width + x) * COLOR_DIM;
        [self.color[p], self.color[p + 1], self.color[p + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub color: Vec<[f64; COLOR_DIM]>,
    pub feature: Vec<Vec<f64>>,
    pub alpha_logit: Vec<f64>,
    /// Present only when geometry gradients were requested.
    pub position: Option<Vec<Vector3<f64>>>,
    pub rotation: Option<Vec<Vector4<f64>>>,
    pub scale: Option<Vec<Vector3<f64>>>,
}

fn fingerprint(scene: &[Gaussian], camera: &CameraPose, width: usize, height: usize, options: &RenderOptions) -> u64 {
    let mut h = DefaultHasher::new();
    (scene.len(), width, height).hash(&mut h);
    let mut put = |v: f64| v.to_bits().hash(&mut h);
    for g in scene {
        g.position.iter().chain(g.rotation.iter()).chain(g.scale.iter()).for_each(|&v| put(v));
        put(g.alpha_logit);
    }
    camera.intrinsics.iter().chain(camera.world_to_camera.iter()).for_each(|&v| put(v));
    put(options.alpha_min);
    put(options.alpha_max);
    put(options.transmittance_min);
    h.finish()
}

fn feature_dim(scene: &[Gaussian]) -> Result<usize> {
    let d = scene.first().map_or(0, |g| g.feature.len());
    if let Some(g) = scene.iter().find(|g| g.feature.len() != d) {
        return Err(Error::ShapeError(format!(
            "Gaussian feature widths differ: {d} vs {}",
            g.feature.len()
        )));
    }
    Ok(d)
}

/// Alpha of a projected Gaussian at a pixel center, with its falloff and
/// offset from the mean.
fn eval_alpha(p: &Projected, px: f64, py: f64, alpha_max: f64) -> (f64, f64, Vector2<f64>) {
    let d = Vector2::new(px - p.mean2d.x, py - p.mean2d.y);
    let q = d.dot(&(p.conic * d));
    let falloff = (-0.5 * q).exp();
    ((p.opacity * falloff).min(alpha_max), falloff, d)
}

pub fn render(scene: &[Gaussian], camera: &CameraPose, width: usize, height: usize) -> Result<SplatOutput> {
    render_with(scene, camera, width, height, &RenderOptions::default())
}

pub fn render_with(
    scene: &[Gaussian],
    camera: &CameraPose,
    width: usize,
    height: usize,
    options: &RenderOptions,
) -> Result<SplatOutput> {
    let d_f = feature_dim(scene)?;
    let projected: Vec<Option<Projected>> = scene
        .iter()
        .map(|g| project(g, camera, width, height, options.alpha_min))
        .collect::<Result<_>>()?;

    // Global front-to-back order, ties broken by input index.
    let mut order: Vec<u32> = (0..scene.len() as u32).filter(|&i| projected[i as usize].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (projected[a as usize].as_ref().unwrap().depth, projected[b as usize].as_ref().unwrap().depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let tile_lists: Vec<Vec<Contribution>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
            let (x1, y1) = ((x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height));
            // Pixel centers of this tile span [x0+0.5, x1-0.5] x [y0+0.5, y1-0.5].
            let members: Vec<u32> = order
                .iter()
                .copied()
                .filter(|&i| {
                    let p = projected[i as usize].as_ref().unwrap();
                    let (m, r) = (p.mean2d, p.radius);
                    m.x + r >= x0 as f64 + 0.5
                        && m.x - r <= x1 as f64 - 0.5
                        && m.y + r >= y0 as f64 + 0.5
                        && m.y - r <= y1 as f64 - 0.5
                })
                .collect();
            let mut out = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let start = out.len();
                    let mut t_acc = 1.0;
                    for &i in &members {
                        let p = projected[i as usize].as_ref().unwrap();
                        let (alpha, _, _) = eval_alpha(p, px, py, options.alpha_max);
                        if alpha < options.alpha_min || alpha <= 0.0 {
                            continue;
                        }
                        out.push(Contribution { gaussian: i, alpha, transmittance: t_acc });
                        t_acc *= 1.0 - alpha;
                        if t_acc < options.transmittance_min {
                            break;
                        }
                    }
                    // Sentinel carrying the pixel's list length in `gaussian`.
                    let n = out.len() - start;
                    out.push(Contribution { gaussian: n as u32, alpha: f64::NAN, transmittance: t_acc });
                }
            }
            out
        })
        .collect();

    // Reassemble tile-major lists into row-major per-pixel lists.
    let n_pixels = width * height;
    let mut per_pixel: Vec<(usize, usize)> = vec![(0, 0); n_pixels];
    let mut tile_pos = vec![0usize; tile_lists.len()];
    for (t, list) in tile_lists.iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
        for y in y0..(y0 + TILE_SIZE).min(height) {
            for x in x0..(x0 + TILE_SIZE).min(width) {
                let mut k = tile_pos[t];
                let start = k;
                while !list[k].alpha.is_nan() {
                    k += 1;
                }
                per_pixel[y * width + x] = (t, start);
                tile_pos[t] = k + 1;
            }
        }
    }
    let mut offsets = Vec::with_capacity(n_pixels + 1);
    let mut entries = Vec::new();
    offsets.push(0);
    for &(t, start) in &per_pixel {
        let list = &tile_lists[t];
        let mut k = start;
        while !list[k].alpha.is_nan() {
            entries.push(list[k]);
            k += 1;
        }
        offsets.push(entries.len());
    }

    let state = RenderState {
        width,
        height,
        fingerprint: fingerprint(scene, camera, width, height, options),
        projected,
        offsets,
        entries,
    };
    let features: Vec<&[f64]> = scene.iter().map(|g| g.feature.as_slice()).collect();
    let feature = state.blend(&features, d_f);
    let colors: Vec<&[f64]> = scene.iter().map(|g| g.color.as_slice()).collect();
    let color = state.blend(&colors, COLOR_DIM);
    let blend_weight_sum = (0..n_pixels)
        .map(|p| state.pixel(p).iter().map(|c| c.alpha * c.transmittance).sum())
        .collect();
    Ok(SplatOutput { width, height, feature_dim: d_f, color, feature, blend_weight_sum, state })
}

impl RenderState {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn pixel(&self, p: usize) -> &[Contribution] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    /// Number of (pixel, Gaussian) contributions in this render.
    pub fn num_contributions(&self) -> usize {
        self.entries.len()
    }

    /// Indices of Gaussians contributing to pixel `(x, y)`, front to back,
    /// with their blend weights `alpha * T`.
    pub fn contributors(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pixel(y * self.width + x).iter().map(|c| (c.gaussian as usize, c.alpha * c.transmittance))
    }

    /// Whether this state was produced from geometry/opacity identical to
    /// `scene` under the same camera, size and options.
    pub fn matches(&self, scene: &[Gaussian], camera: &CameraPose, options: &RenderOptions) -> bool {
        self.fingerprint == fingerprint(scene, camera, self.width, self.height, options)
    }

    /// Re-composites arbitrary per-Gaussian values of width `dim` with the
    /// saved weights. Bit-identical to the values a fresh render produces.
    pub fn blend(&self, values: &[&[f64]], dim: usize) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; n * dim];
        out.par_chunks_mut(dim.max(1)).enumerate().take(n).for_each(|(p, px)| {
            if dim == 0 {
                return;
            }
            for c in self.pixel(p) {
                let w = c.alpha * c.transmittance;
                for (o, v) in px.iter_mut().zip(values[c.gaussian as usize]) {
                    *o += v * w;
                }
            }
        });
        out
    }

    /// Adjoint of [`RenderState::blend`]: per-Gaussian sums of `w * grad`.
    pub fn blend_backward(&self, grad: &[f64], dim: usize, n_gaussians: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; dim]; n_gaussians];
        for p in 0..self.width * self.height {
            let gp = &grad[p * dim..(p + 1) * dim];
            for c in self.pixel(p) {
                let w = c.alpha * c.transmittance;
                for (o, g) in out[c.gaussian as usize].iter_mut().zip(gp) {
                    *o += w * g;
                }
            }
        }
        out
    }
}

#[derive(Clone)]
struct Accum {
    color: [f64; COLOR_DIM],
    feature: Vec<f64>,
    alpha_logit: f64,
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
}

/// Reverse-mode pass over a saved render. `d_color` is `H*W*3`,
/// `d_feature` is `H*W*d_f`. Geometry gradients are returned only when
/// `with_geometry` is set.
pub fn render_backward(
    state: &RenderState,
    scene: &[Gaussian],
    camera: &CameraPose,
    options: &RenderOptions,
    d_color: &[f64],
    d_feature: &[f64],
    with_geometry: bool,
) -> Result<GaussianGrads> {
    if !state.matches(scene, camera, options) {
        return Err(Error::StaleState);
    }
    let d_f = feature_dim(scene)?;
    let n_pixels = state.width * state.height;
    if d_color.len() != n_pixels * COLOR_DIM || d_feature.len() != n_pixels * d_f {
        return Err(Error::ShapeError(format!(
            "upstream gradients have {} color / {} feature values, expected {} / {}",
            d_color.len(),
            d_feature.len(),
            n_pixels * COLOR_DIM,
            n_pixels * d_f
        )));
    }

    let zero = Accum {
        color: [0.0; COLOR_DIM],
        feature: vec![0.0; d_f],
        alpha_logit: 0.0,
        mean2d: Vector2::zeros(),
        conic: Matrix2::zeros(),
    };
    // Per row band of TILE_SIZE rows, sparse accumulators keyed by Gaussian,
    // then a fixed-order reduction across bands.
    let bands = state.height.div_ceil(TILE_SIZE);
    let partials: Vec<Vec<(u32, Accum)>> = (0..bands)
        .into_par_iter()
        .map(|b| {
            let mut slot: Vec<u32> = vec![u32::MAX; scene.len()];
            let mut acc: Vec<(u32, Accum)> = Vec::new();
            for y in b * TILE_SIZE..((b + 1) * TILE_SIZE).min(state.height) {
                for x in 0..state.width {
                    let p = y * state.width + x;
                    let list = state.pixel(p);
                    if list.is_empty() {
                        continue;
                    }
                    let gc = &d_color[p * COLOR_DIM..(p + 1) * COLOR_DIM];
                    let gf = &d_feature[p * d_f..(p + 1) * d_f];
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    // Sum over Gaussians behind the current one of v_j * w_j.
                    let mut behind = 0.0;
                    for c in list.iter().rev() {
                        let i = c.gaussian as usize;
                        let g = &scene[i];
                        let w = c.alpha * c.transmittance;
                        if slot[i] == u32::MAX {
                            slot[i] = acc.len() as u32;
                            acc.push((i as u32, zero.clone()));
                        }
                        let a = &mut acc[slot[i] as usize].1;
                        let mut v = 0.0;
                        for k in 0..COLOR_DIM {
                            a.color[k] += w * gc[k];
                            v += g.color[k] * gc[k];
                        }
                        for k in 0..d_f {
                            a.feature[k] += w * gf[k];
                            v += g.feature[k] * gf[k];
                        }
                        let d_alpha = c.transmittance * v - behind / (1.0 - c.alpha);
                        behind += v * w;

                        let proj = state.projected[i].as_ref().expect("contributor was projected");
                        let (_, falloff, d) = eval_alpha(proj, px, py, f64::INFINITY);
                        if proj.opacity * falloff >= options.alpha_max {
                            continue; // clamped: alpha is locally constant
                        }
                        let o = proj.opacity;
                        a.alpha_logit += d_alpha * falloff * o * (1.0 - o);
                        let d_q = -0.5 * o * falloff * d_alpha;
                        a.mean2d += -2.0 * (proj.conic * d) * d_q;
                        a.conic += d * d.transpose() * d_q;
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = vec![zero; scene.len()];
    for band in partials {
        for (i, a) in band {
            let t = &mut total[i as usize];
            for k in 0..COLOR_DIM {
                t.color[k] += a.color[k];
            }
            for k in 0..d_f {
                t.feature[k] += a.feature[k];
            }
            t.alpha_logit += a.alpha_logit;
            t.mean2d += a.mean2d;
            t.conic += a.conic;
        }
    }

    let (position, rotation, scale) = if with_geometry {
        let mut dp = Vec::with_capacity(scene.len());
        let mut dr = Vec::with_capacity(scene.len());
        let mut ds = Vec::with_capacity(scene.len());
        for (i, g) in scene.iter().enumerate() {
            match &state.projected[i] {
                Some(proj) => {
                    let (p, r, s) = project_backward(g, camera, proj, &total[i].mean2d, &total[i].conic);
                    dp.push(p);
                    dr.push(r);
                    ds.push(s);
                }
                None => {
                    dp.push(Vector3::zeros());
                    dr.push(Vector4::zeros());
                    ds.push(Vector3::zeros());
                }
            }
        }
        (Some(dp), Some(dr), Some(ds))
    } else {
        (None, None, None)
    };

    let mut color = Vec::with_capacity(scene.len());
    let mut feature = Vec::with_capacity(scene.len());
    let mut alpha_logit = Vec::with_capacity(scene.len());
    for a in total {
        color.push(a.color);
        feature.push(a.feature);
        alpha_logit.push(a.alpha_logit);
    }
    let grads = GaussianGrads { color, feature, alpha_logit, position, rotation, scale };
    let finite = grads.alpha_logit.iter().chain(grads.feature.iter().flatten()).all(|v| v.is_finite());
    if !finite {
        return Err(Error::NumericalFailure { step: 0, what: "non-finite render gradient".into() });
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(w: usize, h: usize) -> CameraPose {
        CameraPose::look_at(w, h, 0.9, Vector3::new(0.4, -2.5, 0.8), Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0))
            .unwrap()
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, d_f: usize, max_opacity: f64) -> Vec<Gaussian> {
        (0..n)
            .map(|_| {
                let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
                Gaussian {
                    position: Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6)),
                    rotation: q / q.norm(),
                    scale: Vector3::from_fn(|_, _| rng.random_range(0.05..0.35)),
                    alpha_logit: super::super::logit(rng.random_range(0.1..max_opacity)),
                    color: [rng.random(), rng.random(), rng.random()],
                    feature: (0..d_f).map(|_| rng.random_range(-1.0..1.0)).collect(),
                }
            })
            .collect()
    }

    /// Per-pixel compositing written directly from the blending equations,
    /// with the 2D covariance inverted by nalgebra instead of the conic.
    fn oracle_pixel(scene: &[Gaussian], cam: &CameraPose, w: usize, h: usize, x: usize, y: usize) -> (f64, [f64; 3]) {
        let mut items: Vec<(f64, usize, f64)> = Vec::new();
        for (i, g) in scene.iter().enumerate() {
            let Some(p) = project(g, cam, w, h, 0.0).unwrap() else { continue };
            let inv = p.cov2d.try_inverse().unwrap();
            let d = Vector2::new(x as f64 + 0.5, y as f64 + 0.5) - p.mean2d;
            let alpha = (g.opacity() * (-0.5 * (d.transpose() * inv * d)[0]).exp()).min(0.99);
            items.push((p.depth, i, alpha));
        }
        items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut t, mut c) = (1.0, [0.0; 3]);
        for (_, i, alpha) in items {
            if alpha < 1.0 / 255.0 {
                continue;
            }
            for k in 0..3 {
                c[k] += scene[i].color[k] * alpha * t;
            }
            t *= 1.0 - alpha;
            if t < 1e-4 {
                break;
            }
        }
        (1.0 - t, c)
    }

    #[test]
    fn empty_scene_renders_zero() {
        let out = render(&[], &camera(8, 6), 8, 6).unwrap();
        assert!(out.color.iter().chain(&out.blend_weight_sum).all(|&v| v == 0.0));
        assert!(out.feature.is_empty());
    }

    #[test]
    fn two_coincident_gaussians() {
        let cam = CameraPose::from_fov(1, 1, 1.0, Matrix4::identity()).unwrap();
        let front = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5, [1.0; 3], vec![]);
        let back = Gaussian::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.1, 0.999, [0.0; 3], vec![]);
        let out = render(&[back, front], &cam, 1, 1).unwrap();
        assert_eq!(out.color_at(0, 0), [0.5; 3]);
        assert!((out.blend_weight_sum[0] - (1.0 - 0.5 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn blend_weight_matches_transmittance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (37, 29);
        let cam = camera(w, h);
        for _ in 0..10 {
            let n = rng.random_range(1..40);
            let scene = random_scene(&mut rng, n, 2, 0.98);
            let out = render(&scene, &cam, w, h).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let (bws, c) = oracle_pixel(&scene, &cam, w, h, x, y);
                    assert!((out.blend_weight_sum[y * w + x] - bws).abs() < 1e-9, "pixel ({x},{y})");
                    let got = out.color_at(x, y);
                    for k in 0..3 {
                        assert!((got[k] - c[k]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_feature_scales_with_blend_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut scene = random_scene(&mut rng, 30, 3, 0.95);
        let f = vec![0.3, -1.2, 2.0];
        scene.iter_mut().for_each(|g| g.feature = f.clone());
        let out = render(&scene, &camera(20, 20), 20, 20).unwrap();
        for p in 0..400 {
            for k in 0..3 {
                assert!((out.feature[p * 3 + k] - f[k] * out.blend_weight_sum[p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_leaves_output_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scene = random_scene(&mut rng, 25, 4, 0.95);
        // Duplicate depths exercise the index tie-break.
        scene[3] = scene[7].clone();
        let cam = camera(24, 18);
        let a = render(&scene, &cam, 24, 18).unwrap();
        let mut perm = scene.clone();
        perm.reverse();
        let b = render(&perm, &cam, 24, 18).unwrap();
        assert_eq!(a.color, b.color);
        assert_eq!(a.feature, b.feature);
        assert_eq!(a.blend_weight_sum, b.blend_weight_sum);
    }

    #[test]
    fn blend_replays_render_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scene = random_scene(&mut rng, 20, 5, 0.9);
        let out = render(&scene, &camera(16, 16), 16, 16).unwrap();
        let feats: Vec<&[f64]> = scene.iter().map(|g| g.feature.as_slice()).collect();
        assert_eq!(out.state.blend(&feats, 5), out.feature);
    }

    #[test]
    fn single_gaussian_color_grad_is_alpha() {
        let cam = CameraPose::from_fov(1, 1, 1.0, Matrix4::identity()).unwrap();
        let g = Gaussian::isotropic(Vector3::new(0.01, 0.0, 2.0), 0.2, 0.6, [0.3; 3], vec![0.5]);
        let scene = [g];
        let opts = RenderOptions::default();
        let out = render_with(&scene, &cam, 1, 1, &opts).unwrap();
        let grads = render_backward(&out.state, &scene, &cam, &opts, &[1.0, 0.0, 0.0], &[0.0], false).unwrap();
        let alpha = out.blend_weight_sum[0];
        assert_eq!(grads.color[0], [alpha, 0.0, 0.0]);
        assert!(grads.position.is_none());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scene = random_scene(&mut rng, 8, 2, 0.9);
        let cam = camera(16, 16);
        let opts = RenderOptions::default();
        let out = render_with(&scene, &cam, 16, 16, &opts).unwrap();
        let g = render_backward(&out.state, &scene, &cam, &opts, &vec![0.0; 768], &vec![0.0; 512], true).unwrap();
        assert!(g.alpha_logit.iter().all(|&v| v == 0.0));
        assert!(g.position.unwrap().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn stale_state_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut scene = random_scene(&mut rng, 4, 1, 0.9);
        let cam = camera(8, 8);
        let opts = RenderOptions::default();
        let out = render_with(&scene, &cam, 8, 8, &opts).unwrap();
        // Features do not invalidate the state; geometry does.
        scene[0].feature[0] += 1.0;
        assert!(render_backward(&out.state, &scene, &cam, &opts, &[0.0; 192], &[0.0; 64], false).is_ok());
        scene[0].position.x += 1e-3;
        assert!(matches!(
            render_backward(&out.state, &scene, &cam, &opts, &[0.0; 192], &[0.0; 64], false),
            Err(Error::StaleState)
        ));
    }

    fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(floor)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (w, h, d_f) = (16, 16, 3);
        let cam = camera(w, h);
        let opts = RenderOptions::smooth();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let scene = random_scene(&mut rng, 8, d_f, 0.9);
            let wc: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wf: Vec<f64> = (0..w * h * d_f).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |s: &[Gaussian]| {
                let o = render_with(s, &cam, w, h, &opts).unwrap();
                o.color.iter().zip(&wc).map(|(a, b)| a * b).sum::<f64>()
                    + o.feature.iter().zip(&wf).map(|(a, b)| a * b).sum::<f64>()
            };
            let out = render_with(&scene, &cam, w, h, &opts).unwrap();
            let g = render_backward(&out.state, &scene, &cam, &opts, &wc, &wf, true).unwrap();

            // (analytic, parameter accessor) for every scalar parameter.
            type Access = fn(&mut Gaussian) -> &mut f64;
            let mut checks: Vec<(f64, usize, Box<dyn Fn(&mut Gaussian) -> &mut f64>)> = Vec::new();
            for i in 0..scene.len() {
                for k in 0..3 {
                    checks.push((g.position.as_ref().unwrap()[i][k], i, Box::new(move |g| &mut g.position[k])));
                    checks.push((g.scale.as_ref().unwrap()[i][k], i, Box::new(move |g| &mut g.scale[k])));
                    checks.push((g.color[i][k], i, Box::new(move |g| &mut g.color[k])));
                    checks.push((g.feature[i][k], i, Box::new(move |g| &mut g.feature[k])));
                }
                for k in 0..4 {
                    checks.push((g.rotation.as_ref().unwrap()[i][k], i, Box::new(move |g| &mut g.rotation[k])));
                }
                let f: Access = |g| &mut g.alpha_logit;
                checks.push((g.alpha_logit[i], i, Box::new(f)));
            }
            let scale = checks.iter().map(|c| c.0.abs()).fold(0.0, f64::max);
            let step = 1e-6;
            for (analytic, i, access) in &checks {
                let mut plus = scene.clone();
                *access(&mut plus[*i]) += step;
                let mut minus = scene.clone();
                *access(&mut minus[*i]) -= step;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
                let e = rel_err(*analytic, numeric, 1e-3 * scale);
                assert!(e < 1e-4, "gaussian {i}: analytic {analytic} numeric {numeric} rel {e}");
            }
        }
    }
}
