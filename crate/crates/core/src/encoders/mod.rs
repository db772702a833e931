//! Toy dual-stream sensory encoders: a grouping + max-pool point encoder
//! producing geometry tokens, and a linear patch encoder over splat views.

mod npy;

pub use npy::{read_views, write_views};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, k_nearest, sub, CameraRig, Point3, PointCloud};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Two-channel splat image: per-pixel point count and nearest depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewImage {
    pub size: usize,
    pub occupancy: Vec<f64>,
    pub depth: Vec<f64>,
    /// Depth stored in empty pixels: the far bound `radius + 1` of the view.
    pub far: f64,
}

impl ViewImage {
    pub fn empty(size: usize, far: f64) -> Self {
        Self {
            size,
            occupancy: vec![0.0; size * size],
            depth: vec![far; size * size],
            far,
        }
    }

    pub fn occupied_pixels(&self) -> usize {
        self.occupancy.iter().filter(|&&c| c > 0.0).count()
    }

    /// Horizontally mirrored copy.
    pub fn flipped_horizontal(&self) -> Self {
        let s = self.size;
        let mut out = self.clone();
        for r in 0..s {
            for c in 0..s {
                out.occupancy[r * s + c] = self.occupancy[r * s + (s - 1 - c)];
                out.depth[r * s + c] = self.depth[r * s + (s - 1 - c)];
            }
        }
        out
    }
}

/// Project every visible point into each view, accumulating counts and the
/// minimum depth per pixel.
pub fn render_splat_views(cloud: &PointCloud, rig: &CameraRig) -> Vec<ViewImage> {
    rig.views
        .iter()
        .map(|view| {
            let s = view.image_size;
            let mut img = ViewImage::empty(s, view.radius + 1.0);
            for p in &cloud.points {
                let pr = view.project(*p);
                if !pr.visible {
                    continue;
                }
                let col = ((pr.uv[0] * s as f64).floor() as usize).min(s - 1);
                let row = ((pr.uv[1] * s as f64).floor() as usize).min(s - 1);
                let k = row * s + col;
                img.occupancy[k] += 1.0;
                if pr.depth < img.depth[k] {
                    img.depth[k] = pr.depth;
                }
            }
            img
        })
        .collect()
}

/// Spectral mapping: each coordinate becomes (sin 2^k πx, cos 2^k πx) for
/// k = 0..bands, coordinate-major.
pub fn fourier_features(x: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * bands * 2);
    for &v in x {
        for k in 0..bands {
            let a = (1u64 << k) as f64 * std::f64::consts::PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// N_p: geometry tokens.
    pub n_tokens: usize,
    /// Neighbors pooled per token.
    pub knn: usize,
    pub point_hidden: usize,
    /// D: sensory feature width.
    pub d_model: usize,
    /// G: patches per image side.
    pub patch_grid: usize,
    pub n_views: usize,
    pub image_size: usize,
    pub fourier_bands: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_tokens: 32,
            knn: 16,
            point_hidden: 32,
            d_model: 64,
            patch_grid: 4,
            n_views: 8,
            image_size: 64,
            fourier_bands: 4,
        }
    }
}

impl EncoderConfig {
    pub fn patch_pixels(&self) -> usize {
        self.image_size / self.patch_grid
    }

    pub fn patch_inputs(&self) -> usize {
        2 * self.patch_pixels() * self.patch_pixels()
    }

    pub fn n_vis_tokens(&self) -> usize {
        self.n_views * self.patch_grid * self.patch_grid
    }
}

/// Fixed (non-learned) grouping of a cloud: FPS centroids, neighbor offsets,
/// and centroid Fourier features.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGroups {
    pub indices: Vec<usize>,
    pub centroids: Vec<Point3>,
    /// [N_p · knn, 3] neighbor offsets, grouped by centroid.
    pub local: Tensor,
    /// [N_p, 3 · 2 · bands]
    pub fourier: Tensor,
}

pub fn group_points(cloud: &PointCloud, cfg: &EncoderConfig) -> Result<PointGroups> {
    let n = cloud.len();
    if cfg.n_tokens > n {
        return Err(Error::InvalidArgument(format!("{} tokens requested from {n} points", cfg.n_tokens)));
    }
    let knn = cfg.knn.min(n);
    let indices = farthest_point_sample(&cloud.points, cfg.n_tokens, 0)?;
    let centroids: Vec<Point3> = indices.iter().map(|&i| cloud.points[i]).collect();
    let mut local = Vec::with_capacity(cfg.n_tokens * knn * 3);
    let mut fourier = Vec::new();
    for &c in &centroids {
        for j in k_nearest(&cloud.points, c, knn) {
            local.extend_from_slice(&sub(cloud.points[j], c));
        }
        fourier.extend(fourier_features(&c, cfg.fourier_bands));
    }
    let fw = 6 * cfg.fourier_bands;
    Ok(PointGroups {
        indices,
        centroids,
        local: Tensor::from_parts(vec![cfg.n_tokens * knn, 3], local),
        fourier: Tensor::from_parts(vec![cfg.n_tokens, fw], fourier),
    })
}

/// Flattened patches in view-major, then row-major patch order, with the
/// fixed per-pixel transform (count, far − depth on occupied pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchInputs {
    /// [N_v, 2 · P²]
    pub patches: Tensor,
    pub patch_centers: Vec<[f64; 2]>,
    pub view_index: Vec<usize>,
}

pub fn extract_patches(images: &[ViewImage], grid: usize) -> Result<PatchInputs> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no view images".into()));
    }
    let size = images[0].size;
    if grid == 0 || size % grid != 0 {
        return Err(Error::InvalidArgument(format!("image size {size} not divisible by patch grid {grid}")));
    }
    let p = size / grid;
    let width = 2 * p * p;
    let mut data = Vec::with_capacity(images.len() * grid * grid * width);
    let mut centers = Vec::new();
    let mut view_index = Vec::new();
    for (v, img) in images.iter().enumerate() {
        if img.size != size {
            return Err(Error::InvalidArgument("view images differ in size".into()));
        }
        for pr in 0..grid {
            for pc in 0..grid {
                for r in 0..p {
                    for c in 0..p {
                        let k = (pr * p + r) * size + pc * p + c;
                        let occ = img.occupancy[k];
                        data.push(occ);
                        data.push(if occ > 0.0 { img.far - img.depth[k] } else { 0.0 });
                    }
                }
                centers.push([(pc as f64 + 0.5) / grid as f64, (pr as f64 + 0.5) / grid as f64]);
                view_index.push(v);
            }
        }
    }
    Ok(PatchInputs {
        patches: Tensor::from_parts(vec![centers.len(), width], data),
        patch_centers: centers,
        view_index,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoTokens {
    /// H_geo: [N_p, D]
    pub features: Tensor,
    /// C_3D: the FPS-selected points.
    pub centroids: Vec<Point3>,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisTokens {
    /// H_vis: [N_v, D]
    pub features: Tensor,
    /// C_2D on the regular G×G grid.
    pub patch_centers: Vec<[f64; 2]>,
    pub view_index: Vec<usize>,
}

/// Tape-resident geometry tokens.
#[derive(Debug, Clone)]
pub struct GeoTokenVars {
    pub features: Var,
    pub centroids: Vec<Point3>,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct VisTokenVars {
    pub features: Var,
    pub patch_centers: Vec<[f64; 2]>,
    pub view_index: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointEncoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl PointEncoder {
    pub fn init(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let h = cfg.point_hidden;
        let fin = h + 6 * cfg.fourier_bands;
        Self {
            w1: store.add_normal("point.w1", 3, h, (2.0 / 3.0f64).sqrt() * 2.0, rng),
            b1: store.add_filled("point.b1", 1, h, 0.0),
            w2: store.add_normal("point.w2", h, h, (2.0 / h as f64).sqrt(), rng),
            b2: store.add_filled("point.b2", 1, h, 0.0),
            w_out: store.add_normal("point.w_out", fin, cfg.d_model, (1.0 / fin as f64).sqrt(), rng),
            b_out: store.add_filled("point.b_out", 1, cfg.d_model, 0.0),
        }
    }

    /// Shared 2-layer perceptron on neighbor offsets, max-pooled per group,
    /// joined with centroid Fourier features and projected to D.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, groups: &PointGroups) -> Var {
        let n_tokens = groups.centroids.len();
        let knn = groups.local.rows() / n_tokens;
        let local = g.constant(groups.local.clone());
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(local, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let h = g.matmul(h, w2);
        let h = g.add_row(h, b2);
        let h = g.relu(h);
        let pooled = g.group_max(h, knn);
        let fourier = g.constant(groups.fourier.clone());
        let joined = g.concat_cols(&[pooled, fourier]);
        let w = g.param(store, self.w_out);
        let b = g.param(store, self.b_out);
        let out = g.matmul(joined, w);
        g.add_row(out, b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewEncoder {
    pub w: ParamId,
    pub b: ParamId,
    /// Per-view additive embedding, [n_views, D].
    pub view_embed: ParamId,
    /// Grid-cell embedding shared by all views, [G², D].
    pub grid_embed: ParamId,
}

impl ViewEncoder {
    pub fn init(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let fin = cfg.patch_inputs();
        Self {
            w: store.add_normal("view.w", fin, cfg.d_model, 0.5 / (fin as f64).sqrt() * 4.0, rng),
            b: store.add_filled("view.b", 1, cfg.d_model, 0.0),
            view_embed: store.add_normal("view.embed", cfg.n_views, cfg.d_model, 0.1, rng),
            grid_embed: store.add_normal("view.grid", cfg.patch_grid * cfg.patch_grid, cfg.d_model, 0.1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: &PatchInputs) -> Var {
        let x = g.constant(patches.patches.clone());
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let e = g.param(store, self.view_embed);
        let h = g.matmul(x, w);
        let h = g.add_row(h, b);
        let ve = g.gather_rows(e, &patches.view_index);
        let h = g.add(h, ve);
        // Patches come view by view in row-major grid order.
        let cells = store.value(self.grid_embed).rows();
        let cell: Vec<usize> = (0..patches.view_index.len()).map(|j| j % cells).collect();
        let ge = g.param(store, self.grid_embed);
        let ge = g.gather_rows(ge, &cell);
        g.add(h, ge)
    }
}

pub fn encode_points_var(g: &mut Graph, store: &ParamStore, enc: &PointEncoder, groups: &PointGroups) -> GeoTokenVars {
    GeoTokenVars {
        features: enc.forward(g, store, groups),
        centroids: groups.centroids.clone(),
        indices: groups.indices.clone(),
    }
}

pub fn encode_views_var(g: &mut Graph, store: &ParamStore, enc: &ViewEncoder, patches: &PatchInputs) -> VisTokenVars {
    VisTokenVars {
        features: enc.forward(g, store, patches),
        patch_centers: patches.patch_centers.clone(),
        view_index: patches.view_index.clone(),
    }
}

/// Value-level point encoding.
pub fn encode_points(cloud: &PointCloud, cfg: &EncoderConfig, store: &ParamStore, enc: &PointEncoder) -> Result<GeoTokens> {
    let groups = group_points(cloud, cfg)?;
    let mut g = Graph::new();
    let v = encode_points_var(&mut g, store, enc, &groups);
    Ok(GeoTokens {
        features: g.value(v.features).clone(),
        centroids: v.centroids,
        indices: v.indices,
    })
}

/// Value-level view encoding.
pub fn encode_views(images: &[ViewImage], cfg: &EncoderConfig, store: &ParamStore, enc: &ViewEncoder) -> Result<VisTokens> {
    let patches = extract_patches(images, cfg.patch_grid)?;
    if patches.patches.cols() != cfg.patch_inputs() {
        return Err(Error::InvalidArgument(format!(
            "patch width {} does not match encoder width {}",
            patches.patches.cols(),
            cfg.patch_inputs()
        )));
    }
    let mut g = Graph::new();
    let v = encode_views_var(&mut g, store, enc, &patches);
    Ok(VisTokens {
        features: g.value(v.features).clone(),
        patch_centers: v.patch_centers,
        view_index: v.view_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalize_to_unit_sphere;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = Rng::new(seed);
        let pts: Vec<Point3> = (0..n).map(|_| [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)]).collect();
        normalize_to_unit_sphere("r", &pts).unwrap()
    }

    #[test]
    fn empty_regions_hold_sentinel() {
        let rig = CameraRig::default();
        let cloud = random_cloud(1, 64);
        let views = render_splat_views(&cloud, &rig);
        assert_eq!(views.len(), 8);
        let img = &views[0];
        assert_eq!(img.occupancy[0], 0.0);
        assert_eq!(img.depth[0], rig.view(0).radius + 1.0);
        assert_eq!(img.occupancy.iter().sum::<f64>() as usize, 64);
    }

    #[test]
    fn origin_splats_to_center_pixel() {
        let rig = CameraRig::default();
        let cloud = PointCloud::new("o", vec![[0.0; 3]]);
        for img in render_splat_views(&cloud, &rig) {
            assert_eq!(img.occupied_pixels(), 1);
            let k = img.occupancy.iter().position(|&c| c > 0.0).unwrap();
            let (r, c) = (k / img.size, k % img.size);
            assert_eq!((r, c), (32, 32));
        }
    }

    #[test]
    fn mirrored_cloud_mirrors_front_and_rear_views() {
        // A cloud symmetric under x → −x: the rear view is the horizontal
        // mirror of the front view.
        let rig = CameraRig::default();
        let mut rng = Rng::new(9);
        let mut pts = Vec::new();
        for _ in 0..300 {
            let p = [rng.range(0.05, 0.7), rng.range(-0.7, 0.7), rng.range(-0.7, 0.7)];
            pts.push(p);
            pts.push([-p[0], p[1], p[2]]);
        }
        let cloud = PointCloud::new("sym", pts);
        let views = render_splat_views(&cloud, &rig);
        let flipped = views[3].flipped_horizontal();
        assert_eq!(views[0].occupancy, flipped.occupancy);
        for (a, b) in views[0].depth.iter().zip(&flipped.depth) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fourier_at_zero() {
        let f = fourier_features(&[0.0, 0.0], 4);
        assert_eq!(f.len(), 16);
        for pair in f.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn patch_grid_must_divide_image() {
        let img = ViewImage::empty(64, 3.2);
        assert!(extract_patches(&[img.clone()], 5).is_err());
        let p = extract_patches(&[img.clone(), img], 4).unwrap();
        assert_eq!(p.patches.rows(), 32);
        assert_eq!(p.patch_centers[0], [0.125, 0.125]);
        assert_eq!(p.patch_centers[1], [0.375, 0.125]);
        assert_eq!(p.view_index[16], 1);
    }

    #[test]
    fn all_zero_images_give_only_embeddings() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let enc = ViewEncoder::init(&mut store, &cfg, &mut rng);
        let img = ViewImage {
            size: 64,
            occupancy: vec![0.0; 4096],
            depth: vec![0.0; 4096],
            far: 3.2,
        };
        let images = vec![img; 8];
        let toks = encode_views(&images, &cfg, &store, &enc).unwrap();
        assert_eq!(toks.features.rows(), 8 * 16);
        let embed = store.value(enc.view_embed);
        let grid = store.value(enc.grid_embed);
        for j in 0..toks.features.rows() {
            let v = toks.view_index[j];
            for d in 0..cfg.d_model {
                let expect = store.value(enc.b).at(0, d) + embed.at(v, d) + grid.at(j % 16, d);
                assert_eq!(toks.features.at(j, d), expect);
            }
        }
    }

    #[test]
    fn too_many_tokens_rejected() {
        let cfg = EncoderConfig::default();
        let cloud = random_cloud(2, 16);
        assert!(group_points(&cloud, &cfg).is_err());
    }
}
