//! ALS point cloud data model and text I/O.
//!
//! File format: one point per line, fields separated by single spaces,
//! `x y z intensity return_number [label]`, floats written in shortest
//! round-trip decimal. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A single georeferenced LiDAR return.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    pub return_number: u32,
    pub label: Option<usize>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64, return_number: u32) -> Self {
        Point {
            x,
            y,
            z,
            intensity,
            return_number,
            label: None,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// The full 5D per-point input vector, coordinates first.
    pub fn feature_vector(&self) -> [f64; 5] {
        [
            self.x,
            self.y,
            self.z,
            self.intensity,
            self.return_number as f64,
        ]
    }

    /// The attribute part of the input vector; the network's initial fully
    /// connected layer consumes these, never the coordinates.
    pub fn non_coordinate_features(&self) -> [f64; 2] {
        [self.intensity, self.return_number as f64]
    }
}

/// Ordered class names for a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "class map needs at least 2 classes, got {}",
                names.len()
            )));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::Config(format!("duplicate class name '{a}'")));
            }
        }
        Ok(ClassMap { names })
    }

    /// The nine ISPRS benchmark categories.
    pub fn isprs() -> Self {
        ClassMap {
            names: [
                "powerline",
                "low_vegetation",
                "impervious_surfaces",
                "car",
                "fence_hedge",
                "roof",
                "facade",
                "shrub",
                "tree",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    /// Anonymous `class_0 .. class_{n-1}` map.
    pub fn numbered(n: usize) -> Result<Self> {
        ClassMap::new((0..n).map(|i| format!("class_{i}")).collect())
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }
}

/// An ordered collection of points with its class map.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub class_map: ClassMap,
    /// Free-text provenance (source file, CRS remarks).
    pub crs_note: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, class_map: ClassMap) -> Self {
        PointCloud {
            points,
            class_map,
            crs_note: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.points.iter().map(|p| p.label).collect()
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for (d, v) in p.coords().iter().enumerate() {
                lo[d] = lo[d].min(*v);
                hi[d] = hi[d].max(*v);
            }
        }
        (lo, hi)
    }
}

fn parse_field<T: std::str::FromStr>(
    field: &str,
    what: &str,
    path: &Path,
    line: usize,
) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("invalid {what} '{field}'"),
    })
}

/// Reads a whitespace-separated `.pts` file. Each non-comment line must
/// carry 5 fields, or 6 when `has_labels` is set.
pub fn read_pts(
    path: impl AsRef<Path>,
    has_labels: bool,
    class_map: ClassMap,
) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let expected = if has_labels { 6 } else { 5 };
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != expected {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        let x: f64 = parse_field(fields[0], "x coordinate", path, lineno)?;
        let y: f64 = parse_field(fields[1], "y coordinate", path, lineno)?;
        let z: f64 = parse_field(fields[2], "z coordinate", path, lineno)?;
        let intensity: f64 = parse_field(fields[3], "intensity", path, lineno)?;
        let return_number: u32 = parse_field(fields[4], "return number", path, lineno)?;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: "non-finite coordinate".into(),
            });
        }
        let mut point = Point::new(x, y, z, intensity, return_number);
        if has_labels {
            let label: usize = parse_field(fields[5], "label", path, lineno)?;
            if label >= class_map.count() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!(
                        "label {label} out of range for {} classes",
                        class_map.count()
                    ),
                });
            }
            point.label = Some(label);
        }
        points.push(point);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: text.lines().count().max(1),
            msg: "empty point cloud".into(),
        });
    }
    let mut cloud = PointCloud::new(points, class_map);
    cloud.crs_note = format!("read from {}", path.display());
    Ok(cloud)
}

/// Detects labeled vs unlabeled files from the first data line.
pub fn sniff_labels(path: impl AsRef<Path>) -> Result<bool> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        return match line.split_whitespace().count() {
            5 => Ok(false),
            6 => Ok(true),
            n => Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected 5 or 6 fields, found {n}"),
            }),
        };
    }
    Err(Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "empty point cloud".into(),
    })
}

fn point_fields(p: &Point) -> String {
    let mut s = String::new();
    // `{}` on f64 is the shortest decimal that round-trips exactly.
    write!(
        s,
        "{} {} {} {} {}",
        p.x, p.y, p.z, p.intensity, p.return_number
    )
    .unwrap();
    if let Some(label) = p.label {
        write!(s, " {label}").unwrap();
    }
    s
}

/// Writes the cloud's lines with the predicted class index appended.
pub fn write_labels(cloud: &PointCloud, predicted: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if predicted.len() != cloud.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} points",
            predicted.len(),
            cloud.len()
        )));
    }
    let mut out = String::new();
    for (p, &pred) in cloud.points.iter().zip(predicted) {
        out.push_str(&point_fields(p));
        writeln!(out, " {pred}").unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the cloud's lines with a 1/0 correctness flag appended
/// (1 where prediction equals the ground-truth label).
pub fn write_error_map(
    cloud: &PointCloud,
    predicted: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if predicted.len() != cloud.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} points",
            predicted.len(),
            cloud.len()
        )));
    }
    let mut out = String::new();
    for (p, &pred) in cloud.points.iter().zip(predicted) {
        let truth = p.label.ok_or_else(|| {
            Error::Contract("error map requires ground-truth labels on every point".into())
        })?;
        let flag = if truth == pred { 1 } else { 0 };
        out.push_str(&point_fields(p));
        writeln!(out, " {flag}").unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Replaces each z by its height above the minimum z of its grid cell
/// (a stand-in for DTM-based height-above-ground normalization).
pub fn normalize_hag(cloud: &PointCloud, cell_size: f64) -> Result<PointCloud> {
    if cell_size <= 0.0 {
        return Err(Error::Contract(format!(
            "cell size must be positive, got {cell_size}"
        )));
    }
    if cloud.is_empty() {
        return Err(Error::Contract("empty point cloud".into()));
    }
    let (lo, _) = cloud.bounds();
    let cell_of = |p: &Point| {
        let cx = ((p.x - lo[0]) / cell_size).floor() as i64;
        let cy = ((p.y - lo[1]) / cell_size).floor() as i64;
        (cx, cy)
    };
    let mut min_z: std::collections::HashMap<(i64, i64), f64> = std::collections::HashMap::new();
    for p in &cloud.points {
        let e = min_z.entry(cell_of(p)).or_insert(f64::INFINITY);
        *e = e.min(p.z);
    }
    let mut out = cloud.clone();
    for p in &mut out.points {
        p.z -= min_z[&cell_of(p)];
    }
    Ok(out)
}
