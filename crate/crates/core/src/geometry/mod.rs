//! Canonical point-cloud preprocessing and the spherical 8-view camera rig.
//!
//! World frame: +Z is up, objects face +X, and the object's left is +Y.

mod io;

pub use io::{read_cloud, write_cloud};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot3(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Point3) -> f64 {
    dot3(a, a).sqrt()
}

fn normalized(a: Point3) -> Point3 {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot3(d, d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub object_id: String,
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(object_id: impl Into<String>, points: Vec<Point3>) -> Self {
        Self {
            object_id: object_id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    pub fn max_radius(&self) -> f64 {
        self.points.iter().map(|p| norm3(*p)).fold(0.0, f64::max)
    }
}

fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    [c[0] / n, c[1] / n, c[2] / n]
}

/// Center on the centroid and scale so the farthest point has norm 1.
pub fn normalize_to_unit_sphere(object_id: &str, points: &[Point3]) -> Result<PointCloud> {
    if points.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "point cloud needs at least 4 points, got {}",
            points.len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite coordinate".into()));
    }
    let c = centroid(points);
    let centered: Vec<Point3> = points.iter().map(|p| sub(*p, c)).collect();
    let r = centered.iter().map(|p| norm3(*p)).fold(0.0, f64::max);
    if r < 1e-12 {
        return Err(Error::DegenerateGeometry);
    }
    let s = 1.0 / r;
    let scaled = centered.iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect();
    Ok(PointCloud::new(object_id, scaled))
}

/// Greedy max-min selection. Ties go to the smallest index; the result is in
/// selection order.
pub fn farthest_point_sample(points: &[Point3], k: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot sample {k} of {n} points")));
    }
    if start_index >= n {
        return Err(Error::InvalidArgument(format!("start index {start_index} out of {n}")));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start_index;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == k {
            break;
        }
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, anchor);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

/// Indices of the `k` nearest points to `center` (ties by index), nearest first.
pub fn k_nearest(points: &[Point3], center: Point3, k: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(*p, center), i)).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.into_iter().take(k).map(|(_, i)| i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Normalized image coordinates; meaningful only when `projectable`.
    pub uv: [f64; 2],
    /// Signed distance along the optical axis.
    pub depth: f64,
    /// False at or behind the camera plane (depth < 1e-9).
    pub projectable: bool,
    /// In front of the camera and inside [0,1]².
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub name: String,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_deg: f64,
    pub image_size: usize,
    pub position: Point3,
    /// Rows: image-right, image-down, forward.
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
    /// Π = K [R | t], mapping homogeneous world points to homogeneous
    /// normalized image coordinates.
    pub projection: [[f64; 4]; 3],
}

impl CameraView {
    pub fn look_at_origin(name: &str, azimuth_deg: f64, elevation_deg: f64, radius: f64, fov_deg: f64, image_size: usize, up: Point3) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let position = [radius * el.cos() * az.cos(), radius * el.cos() * az.sin(), radius * el.sin()];
        let forward = normalized([-position[0], -position[1], -position[2]]);
        let right = normalized(cross(forward, up));
        let true_up = cross(right, forward);
        let down = [-true_up[0], -true_up[1], -true_up[2]];
        let rotation = [right, down, forward];
        let translation = [
            -dot3(right, position),
            -dot3(down, position),
            -dot3(forward, position),
        ];
        let f = focal_length(fov_deg);
        let k = [[f, 0.0, 0.5], [0.0, f, 0.5], [0.0, 0.0, 1.0]];
        let mut projection = [[0.0; 4]; 3];
        for (i, krow) in k.iter().enumerate() {
            for j in 0..4 {
                projection[i][j] = (0..3)
                    .map(|m| krow[m] * if j < 3 { rotation[m][j] } else { translation[m] })
                    .sum();
            }
        }
        Self {
            name: name.to_string(),
            azimuth_deg,
            elevation_deg,
            radius,
            fov_deg,
            image_size,
            position,
            rotation,
            translation,
            projection,
        }
    }

    pub fn focal(&self) -> f64 {
        focal_length(self.fov_deg)
    }

    /// Horizontal image axis expressed in world coordinates.
    pub fn right_axis(&self) -> Point3 {
        self.rotation[0]
    }

    pub fn forward_axis(&self) -> Point3 {
        self.rotation[2]
    }

    pub fn project(&self, p: Point3) -> Projection {
        let h = [p[0], p[1], p[2], 1.0];
        let row = |i: usize| (0..4).map(|j| self.projection[i][j] * h[j]).sum::<f64>();
        let (x, y, w) = (row(0), row(1), row(2));
        if w < 1e-9 {
            return Projection {
                uv: [f64::NAN, f64::NAN],
                depth: w,
                projectable: false,
                visible: false,
            };
        }
        let uv = [x / w, y / w];
        let inside = (0.0..=1.0).contains(&uv[0]) && (0.0..=1.0).contains(&uv[1]);
        Projection {
            uv,
            depth: w,
            projectable: true,
            visible: inside,
        }
    }
}

/// Normalized focal length: the frame spans [0,1] across the field of view.
pub fn focal_length(fov_deg: f64) -> f64 {
    0.5 / (fov_deg.to_radians() / 2.0).tan()
}

pub fn project_point(p: Point3, view: &CameraView) -> Projection {
    view.project(p)
}

pub const VIEW_NAMES: [&str; 8] = [
    "front",
    "front-left",
    "rear-left",
    "rear",
    "rear-right",
    "front-right",
    "top",
    "bottom",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub views: Vec<CameraView>,
}

pub const DEFAULT_RADIUS: f64 = 2.2;
pub const DEFAULT_FOV_DEG: f64 = 50.0;
pub const DEFAULT_IMAGE_SIZE: usize = 64;

impl CameraRig {
    pub fn view(&self, index: usize) -> &CameraView {
        &self.views[index]
    }

    pub fn view_by_name(&self, name: &str) -> Option<(usize, &CameraView)> {
        self.views.iter().enumerate().find(|(_, v)| v.name == name)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

impl Default for CameraRig {
    fn default() -> Self {
        build_spherical_rig(DEFAULT_RADIUS, DEFAULT_FOV_DEG, DEFAULT_IMAGE_SIZE).expect("default rig is valid")
    }
}

/// Six ring views at 30° elevation every 60° of azimuth, then zenith and nadir.
pub fn build_spherical_rig(radius: f64, fov_deg: f64, image_size: usize) -> Result<CameraRig> {
    if !(radius > 1.0) {
        return Err(Error::CameraInsideSphere(radius));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::InvalidArgument(format!("field of view {fov_deg} outside (0, 180)")));
    }
    if image_size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let mut views = Vec::with_capacity(8);
    for (i, name) in VIEW_NAMES.iter().enumerate().take(6) {
        views.push(CameraView::look_at_origin(name, 60.0 * i as f64, 30.0, radius, fov_deg, image_size, [0.0, 0.0, 1.0]));
    }
    views.push(CameraView::look_at_origin(VIEW_NAMES[6], 0.0, 90.0, radius, fov_deg, image_size, [0.0, 1.0, 0.0]));
    views.push(CameraView::look_at_origin(VIEW_NAMES[7], 0.0, -90.0, radius, fov_deg, image_size, [0.0, 1.0, 0.0]));
    Ok(CameraRig { views })
}
