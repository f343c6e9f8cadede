//! Geometric and grid types shared by the whole pipeline.
//!
//! Image coordinates have their origin at the top-left corner, x grows to
//! the right and y grows downward. Map coordinates are image coordinates
//! divided by the output stride, so cell `(ix, iy)` covers the continuous
//! square `[ix, ix + 1) x [iy, iy + 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input resolution and output stride of the dense maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub height_in: usize,
    pub width_in: usize,
    pub stride: usize,
    pub height_out: usize,
    pub width_out: usize,
}

impl GridSpec {
    pub fn new(width_in: usize, height_in: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::GridSpec("stride must be at least 1".into()));
        }
        if width_in == 0 || height_in == 0 {
            return Err(Error::GridSpec("image dimensions must be nonzero".into()));
        }
        if !width_in.is_multiple_of(stride) || !height_in.is_multiple_of(stride) {
            return Err(Error::GridSpec(format!(
                "{width_in}x{height_in} is not a multiple of stride {stride}"
            )));
        }
        Ok(Self {
            height_in,
            width_in,
            stride,
            height_out: height_in / stride,
            width_out: width_in / stride,
        })
    }

    pub fn cells(&self) -> usize {
        self.height_out * self.width_out
    }

    pub fn contains(&self, p: Keypoint) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width_in as f64 && p.y < self.height_in as f64
    }
}

/// A point in image space, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Where an image point lands on the downscaled map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapCoords {
    pub mx: f64,
    pub my: f64,
    pub ix: usize,
    pub iy: usize,
    pub qx: f64,
    pub qy: f64,
}

pub fn to_map_coords(p: Keypoint, spec: &GridSpec) -> Result<MapCoords> {
    if !spec.contains(p) {
        return Err(Error::OutOfBounds {
            x: p.x,
            y: p.y,
            width: spec.width_in,
            height: spec.height_in,
        });
    }
    let r = spec.stride as f64;
    let (mx, my) = (p.x / r, p.y / r);
    // p.x < W keeps floor(mx) < W' even after rounding in the division.
    let ix = (mx.floor() as usize).min(spec.width_out - 1);
    let iy = (my.floor() as usize).min(spec.height_out - 1);
    Ok(MapCoords {
        mx,
        my,
        ix,
        iy,
        qx: mx - ix as f64,
        qy: my - iy as f64,
    })
}

/// Ordered keypoints of one lane, bottom-most (the starting point) first.
#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    points: Vec<Keypoint>,
}

impl Lane {
    pub fn new(points: Vec<Keypoint>) -> Result<Self> {
        validate_polyline(&points)?;
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Keypoint] {
        &self.points
    }

    pub fn start(&self) -> Keypoint {
        self.points[0]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Keypoint> {
        self.points
    }

    /// Bottom and top y of the lane.
    pub fn y_span(&self) -> (f64, f64) {
        (self.points[0].y, self.points[self.points.len() - 1].y)
    }

    /// Linearly interpolated x at row `y`, or `None` outside the lane's span.
    pub fn x_at(&self, y: f64) -> Option<f64> {
        let (bottom, top) = self.y_span();
        if y > bottom || y < top {
            return None;
        }
        // y decreases along the lane.
        let seg = self.points.windows(2).find(|w| y <= w[0].y && y >= w[1].y)?;
        let (a, b) = (seg[0], seg[1]);
        let t = (a.y - y) / (a.y - b.y);
        Some(a.x + t * (b.x - a.x))
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        for p in &self.points {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64) {
                return Err(Error::OutOfBounds {
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_polyline(points: &[Keypoint]) -> Result<()> {
    if points.len() < 2 {
        return Err(Error::InvalidLane(format!(
            "a lane needs at least 2 points, got {}",
            points.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::InvalidLane(format!("non-finite point ({}, {})", p.x, p.y)));
    }
    for (i, w) in points.windows(2).enumerate() {
        if w[1].y >= w[0].y {
            return Err(Error::InvalidLane(format!(
                "y must strictly decrease along the lane (point {} at y={} follows y={})",
                i + 1,
                w[1].y,
                w[0].y
            )));
        }
    }
    Ok(())
}

/// All lanes of one image. Lanes may cross.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LaneSet {
    pub lanes: Vec<Lane>,
}

impl LaneSet {
    pub fn new(lanes: Vec<Lane>) -> Self {
        Self { lanes }
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }
}

/// Lane JSON document: `{"width": W, "height": H, "lanes": [[[x, y], ...], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub width: usize,
    pub height: usize,
    pub lanes: Vec<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

/// A validated lane set together with its image dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub lanes: LaneSet,
    pub tag: Option<String>,
}

impl Scene {
    pub fn new(width: usize, height: usize, lanes: LaneSet) -> Result<Self> {
        for lane in &lanes.lanes {
            lane.check_within(width, height)?;
        }
        Ok(Self {
            width,
            height,
            lanes,
            tag: None,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text)?;
        Self::try_from(file)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(&SceneFile::from(self)).expect("scene serializes");
        s.push('\n');
        s
    }
}

impl TryFrom<SceneFile> for Scene {
    type Error = Error;

    fn try_from(file: SceneFile) -> Result<Self> {
        let lanes = file
            .lanes
            .into_iter()
            .map(|pts| Lane::new(pts.into_iter().map(|[x, y]| Keypoint::new(x, y)).collect()))
            .collect::<Result<Vec<_>>>()?;
        let mut scene = Scene::new(file.width, file.height, LaneSet::new(lanes))?;
        scene.tag = file.tag;
        Ok(scene)
    }
}

impl From<&Scene> for SceneFile {
    fn from(scene: &Scene) -> Self {
        SceneFile {
            width: scene.width,
            height: scene.height,
            lanes: scene
                .lanes
                .lanes
                .iter()
                .map(|l| l.points().iter().map(|p| [p.x, p.y]).collect())
                .collect(),
            tag: scene.tag.clone(),
        }
    }
}

/// Dense multi-channel map stored row-major as `(channel, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    spec: GridSpec,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        Self::filled(spec, channels, 0.0)
    }

    pub fn filled(spec: GridSpec, channels: usize, value: f64) -> Self {
        Self {
            spec,
            channels,
            data: vec![value; channels * spec.cells()],
        }
    }

    pub fn from_vec(spec: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * spec.cells() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {} channel(s) of {}x{}, got {}",
                channels * spec.cells(),
                channels,
                spec.height_out,
                spec.width_out,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid data".into()));
        }
        Ok(Self { spec, channels, data })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.spec.height_out
    }

    pub fn width(&self) -> usize {
        self.spec.width_out
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        debug_assert!(channel < self.channels && row < self.height() && col < self.width());
        (channel * self.spec.height_out + row) * self.spec.width_out + col
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(channel, row, col)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        let i = self.index(channel, row, col);
        self.data[i] = value;
    }

    /// Single channel as a slice of `height * width` values.
    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.spec.cells();
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.spec == other.spec && self.channels == other.channels
    }

    pub fn ensure_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.channels,
                self.height(),
                self.width(),
                other.channels,
                other.height(),
                other.width()
            )))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}
