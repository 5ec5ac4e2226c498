//! Dense mapping from sparse landmarks and LiDAR-style super-resolution.
//!
//! Pixel coordinates are `(u, v)` = (column, row) with the pixel center at
//! the integer coordinate, so a landmark projecting to `(u, v)` rounds to
//! the pixel whose center is nearest.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, shape_err, Error, Result};
use crate::image::{DepthMap, RgbImage, SparseDepth};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::sampling::{make_input, scanline_sample, Normalization, Problem};
use crate::trainer::Predictor;

const ROTATION_TOL: f64 = 1e-9;

/// Pinhole intrinsics for an `height × width` image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    height: usize,
    width: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, height: usize, width: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return invalid(format!("focal lengths must be positive, got fx={fx} fy={fy}"));
        }
        if !((0.0..width as f64).contains(&cx) && (0.0..height as f64).contains(&cy)) {
            return invalid(format!("principal point ({cx}, {cy}) outside a {height}x{width} image"));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, height, width })
    }

    /// Parses `fx fy cx cy height width`, separated by whitespace or commas.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.len() != 6 {
            return Err(Error::Parse(format!(
                "intrinsics need 6 values (fx fy cx cy height width), got {}",
                tokens.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            tokens[i].parse().map_err(|_| Error::Parse(format!("bad intrinsics value '{}'", tokens[i])))
        };
        let n = |i: usize| -> Result<usize> {
            tokens[i].parse().map_err(|_| Error::Parse(format!("bad image size '{}'", tokens[i])))
        };
        CameraIntrinsics::new(f(0)?, f(1)?, f(2)?, f(3)?, n(4)?, n(5)?)
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }

    pub fn fy(&self) -> f64 {
        self.fy
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Continuous image coordinates `(u, v)` of a camera-frame point.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }

    /// Camera-frame point seen at pixel `(u, v)` with depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }

    fn check_image(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.height, self.width) {
            return shape_err(format!(
                "image is {h}x{w} but intrinsics describe {}x{}",
                self.height, self.width
            ));
        }
        Ok(())
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Pose {
    /// Fails unless `RᵀR = I` and `det R = 1` to within 1e-9.
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let r = rotation;
        if r.iter().flatten().chain(&translation).any(|v| !v.is_finite()) {
            return invalid("pose contains non-finite values");
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > ROTATION_TOL {
                    return invalid(format!("rotation is not orthonormal: (RᵀR)[{i}][{j}] = {dot}"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > ROTATION_TOL {
            return invalid(format!("rotation determinant is {det}, expected 1"));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        self.rotation
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }
}

/// Points in meters with optional 8-bit colors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, colors: Option<Vec<[u8; 3]>>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("point cloud contains non-finite coordinates");
        }
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return shape_err(format!("{} colors for {} points", c.len(), points.len()));
            }
        }
        Ok(PointCloud { points, colors })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// ASCII PLY with `x y z` and, when present, `red green blue`.
    pub fn write_ply<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = String::from("ply\nformat ascii 1.0\n");
        let _ = writeln!(header, "element vertex {}", self.points.len());
        header.push_str("property double x\nproperty double y\nproperty double z\n");
        if self.colors.is_some() {
            header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        }
        header.push_str("end_header\n");
        out.write_all(header.as_bytes())?;
        let mut line = String::new();
        for (i, p) in self.points.iter().enumerate() {
            line.clear();
            let _ = write!(line, "{} {} {}", p[0], p[1], p[2]);
            if let Some(c) = &self.colors {
                let _ = write!(line, " {} {} {}", c[i][0], c[i][1], c[i][2]);
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ply(file)
    }
}

/// Numbers of a whitespace-separated text file, line by line. Blank lines
/// and `#` comments are skipped.
fn numeric_lines(text: &str, per_line: usize, what: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse(format!("{what} line {}: not a number in '{line}'", no + 1)))?;
        if values.len() != per_line {
            return Err(Error::Parse(format!(
                "{what} line {}: expected {per_line} numbers, found {}",
                no + 1,
                values.len()
            )));
        }
        rows.push(values);
    }
    Ok(rows)
}

/// Landmarks as `x y z` per line, camera frame, meters.
pub fn parse_landmarks(text: &str) -> Result<Vec<[f64; 3]>> {
    Ok(numeric_lines(text, 3, "landmark")?
        .into_iter()
        .map(|v| [v[0], v[1], v[2]])
        .collect())
}

/// Poses as 12 numbers per line: row-major `R | t`, i.e.
/// `r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2`.
pub fn parse_poses(text: &str) -> Result<Vec<Pose>> {
    numeric_lines(text, 12, "pose")?
        .into_iter()
        .map(|v| {
            Pose::new(
                [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]],
                [v[3], v[7], v[11]],
            )
        })
        .collect()
}

/// Sparse depth image built from landmarks plus the counts of those that
/// could not be placed.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkProjection {
    pub sparse: SparseDepth,
    pub out_of_frame: usize,
    pub behind_camera: usize,
}

/// Rounds each landmark to its nearest pixel and writes its depth; the
/// nearer landmark wins a shared pixel.
pub fn landmarks_to_sparse(landmarks: &[[f64; 3]], k: &CameraIntrinsics) -> Result<LandmarkProjection> {
    let mut sparse = DepthMap::zeros(k.height, k.width);
    let (mut out_of_frame, mut behind_camera) = (0, 0);
    for (i, &p) in landmarks.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return invalid(format!("landmark {i} has non-finite coordinates"));
        }
        if p[2] <= 0.0 {
            behind_camera += 1;
            continue;
        }
        let (u, v) = k.project(p);
        let (u, v) = (u.round(), v.round());
        if !(u >= 0.0 && v >= 0.0 && u < k.width as f64 && v < k.height as f64) {
            out_of_frame += 1;
            continue;
        }
        let (x, y) = (u as usize, v as usize);
        let old = sparse.get(y, x);
        if old == 0.0 || p[2] < old {
            sparse.set(y, x, p[2]);
        }
    }
    Ok(LandmarkProjection {
        sparse,
        out_of_frame,
        behind_camera,
    })
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise hull (in `(u, v)`) without collinear vertices.
/// Returns 1 vertex for a single point and 2 for a collinear set.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    if hull.len() < 3 {
        // All points collinear: the chain degenerates to the two extremes.
        return vec![pts[0], pts[pts.len() - 1]];
    }
    hull
}

/// Whether `p` lies inside or on the hull returned by [`convex_hull`].
pub fn hull_contains(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            cross(a, b, p) == 0 && p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
    }
}

/// Row-major mask of pixels whose centers lie inside or on the convex hull
/// of the sample pixels.
pub fn trusted_region_mask(sparse: &SparseDepth) -> Result<Vec<bool>> {
    let (h, w) = (sparse.height(), sparse.width());
    let samples: Vec<(i64, i64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| sparse.get(y, x) > 0.0)
        .map(|(y, x)| (x as i64, y as i64))
        .collect();
    if samples.is_empty() {
        return invalid("trusted region needs at least one sample");
    }
    let hull = convex_hull(&samples);
    let (u0, u1) = (hull.iter().map(|p| p.0).min().unwrap(), hull.iter().map(|p| p.0).max().unwrap());
    let (v0, v1) = (hull.iter().map(|p| p.1).min().unwrap(), hull.iter().map(|p| p.1).max().unwrap());
    let mut mask = vec![false; h * w];
    for v in v0..=v1 {
        for u in u0..=u1 {
            if hull_contains(&hull, (u, v)) {
                mask[v as usize * w + u as usize] = true;
            }
        }
    }
    Ok(mask)
}

/// Camera-frame points of the masked pixels, colored from `rgb` if given.
pub fn back_project(depth: &DepthMap, k: &CameraIntrinsics, mask: &[bool], rgb: Option<&RgbImage>) -> Result<PointCloud> {
    let (h, w) = (depth.height(), depth.width());
    k.check_image(h, w)?;
    if mask.len() != h * w {
        return shape_err(format!("mask of {} entries for a {h}x{w} image", mask.len()));
    }
    if let Some(img) = rgb {
        if (img.height(), img.width()) != (h, w) {
            return shape_err(format!("rgb is {}x{}, depth is {h}x{w}", img.height(), img.width()));
        }
    }
    let mut points = Vec::new();
    let mut colors = rgb.map(|_| Vec::new());
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let z = depth.get(y, x);
            if z <= 0.0 {
                return invalid(format!("masked pixel ({x}, {y}) has no depth"));
            }
            points.push(k.unproject(x as f64, y as f64, z));
            if let (Some(c), Some(img)) = (colors.as_mut(), rgb) {
                let q = |ch| (img.get(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                c.push([q(0), q(1), q(2)]);
            }
        }
    }
    PointCloud::new(points, colors)
}

/// Maps every cloud into the world frame and concatenates. Colors survive
/// only if every input has them.
pub fn stitch(frames: &[(PointCloud, Pose)]) -> Result<PointCloud> {
    let total = frames.iter().map(|(c, _)| c.len()).sum();
    let mut points = Vec::with_capacity(total);
    let keep_colors = !frames.is_empty() && frames.iter().all(|(c, _)| c.colors.is_some());
    let mut colors = keep_colors.then(|| Vec::with_capacity(total));
    for (cloud, pose) in frames {
        let pose = Pose::new(pose.rotation, pose.translation)?;
        points.extend(cloud.points.iter().map(|&p| pose.apply(p)));
        if let (Some(out), Some(c)) = (colors.as_mut(), &cloud.colors) {
            out.extend_from_slice(c);
        }
    }
    PointCloud::new(points, colors)
}

/// Result of densifying one scanline-sampled frame.
#[derive(Clone, Debug)]
pub struct SuperResolution {
    pub prediction: DepthMap,
    pub metrics: MetricsReport,
    pub cloud: Option<PointCloud>,
}

/// Keeps every `row_stride`-th row of `gt` as input, predicts dense depth
/// with an RGBd predictor and scores it against all valid pixels of `gt`.
/// Predictions are clamped to `depth_range`.
pub fn lidar_superres(
    predictor: &Predictor,
    normalization: &Normalization,
    rgb: &RgbImage,
    gt: &DepthMap,
    row_stride: usize,
    depth_range: (f64, f64),
    k: Option<&CameraIntrinsics>,
) -> Result<SuperResolution> {
    if row_stride < 2 {
        return invalid(format!("row_stride must be at least 2, got {row_stride}"));
    }
    if let Predictor::Network(m) = predictor {
        if m.config().input_channels != Problem::Rgbd.input_channels() {
            return invalid("super-resolution needs a model trained on RGBd input");
        }
    }
    let (h, w) = (gt.height(), gt.width());
    if let Some(size) = predictor.input_size() {
        if size != (h, w) {
            return shape_err(format!("model expects {}x{}, frame is {h}x{w}", size.0, size.1));
        }
    }
    let sparse = scanline_sample(gt, row_stride, 0)?;
    let input = make_input(Some(&normalization.apply(rgb)), Some(&sparse), Problem::Rgbd)?;
    let out = predictor.predict(&input)?;
    let mut prediction = DepthMap::from_tensor(&out, 0, 0);
    for v in prediction.as_mut_slice() {
        *v = v.clamp(depth_range.0, depth_range.1);
    }
    let metrics = compute_metrics(prediction.as_slice(), gt.as_slice(), &gt.valid_mask())?;
    let cloud = match k {
        Some(k) => Some(back_project(&prediction, k, &prediction.valid_mask(), Some(rgb))?),
        None => None,
    };
    Ok(SuperResolution {
        prediction,
        metrics,
        cloud,
    })
}
