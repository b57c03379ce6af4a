//! Scan, label and pose ingestion plus synthetic scene generation.
//!
//! File layouts follow the SemanticKITTI conventions: `.bin` scans are
//! little-endian `f32` quadruples `(x, y, z, r)`, `.label` files are one
//! little-endian `u32` per point with the semantic class in the low 16 bits,
//! and `poses.txt` holds one row-major 3x4 matrix per line.

mod classmap;
mod synth;

pub use classmap::ClassMap;
pub use synth::{generate_synthetic_frame, generate_synthetic_sequence, SceneSpec, SensorFrame};

use crate::{Error, Result};

/// One LiDAR return. Coordinates in meters, reflectance in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Raw 16-bit class ids, one per point, when labels were loaded.
    pub raw_class: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self {
            points,
            raw_class: None,
        }
    }

    pub fn with_raw_class(points: Vec<Point>, raw_class: Vec<u16>) -> Result<Self> {
        if raw_class.len() != points.len() {
            return Err(Error::Invalid(format!(
                "{} class ids for {} points",
                raw_class.len(),
                points.len()
            )));
        }
        Ok(Self {
            points,
            raw_class: Some(raw_class),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Serializes the points in the `.bin` layout. Values are narrowed to
    /// `f32`, so the round trip is exact for clouds parsed from files.
    pub fn to_bin(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.r] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }
}

/// A point cloud together with merged (post-remap) class indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub classes: Vec<u16>,
}

impl LabeledCloud {
    pub fn new(cloud: PointCloud, classes: Vec<u16>) -> Result<Self> {
        if classes.len() != cloud.len() {
            return Err(Error::Invalid(format!(
                "{} classes for {} points",
                classes.len(),
                cloud.len()
            )));
        }
        Ok(Self { cloud, classes })
    }

    pub fn from_raw(cloud: PointCloud, map: &ClassMap) -> Result<Self> {
        let raw = cloud
            .raw_class
            .as_ref()
            .ok_or_else(|| Error::Invalid("cloud carries no raw class ids".into()))?;
        let classes = raw.iter().map(|&id| map.remap(id)).collect();
        Self::new(cloud, classes)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Parses a `.bin` scan.
pub fn parse_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "scan length {} is not a multiple of 16",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let mut v = [0f64; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            let f = f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
            if !f.is_finite() {
                return Err(Error::Format(format!("non-finite value in record {i}")));
            }
            *slot = f as f64;
        }
        points.push(Point::new(v[0], v[1], v[2], v[3]));
    }
    Ok(PointCloud::new(points))
}

/// Parses a `.label` file, keeping the semantic low 16 bits of each record.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u16>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "label length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|rec| (u32::from_le_bytes(rec.try_into().unwrap()) & 0xFFFF) as u16)
        .collect())
}

pub fn labels_to_bytes(ids: &[u16]) -> Vec<u8> {
    ids.iter()
        .flat_map(|&id| (id as u32).to_le_bytes())
        .collect()
}

/// Rigid sensor pose: `world = rotation * local + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation about +z by `yaw` radians followed by translation `t`.
    pub fn from_yaw(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: t,
        }
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

    pub fn inverse(&self) -> Pose {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for (i, row) in rt.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[j][i];
            }
        }
        let t = &self.translation;
        let mut ti = [0.0; 3];
        for (i, v) in ti.iter_mut().enumerate() {
            *v = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Pose {
            rotation: rt,
            translation: ti,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Pose {
            rotation: r,
            translation: self.apply(other.translation),
        }
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        let d: f64 = (0..3)
            .map(|i| (self.translation[i] - other.translation[i]).powi(2))
            .sum();
        d.sqrt()
    }

    /// Frobenius norm of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                acc += (dot - target).powi(2);
            }
        }
        acc.sqrt()
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn to_line(&self) -> String {
        let r = &self.rotation;
        let t = &self.translation;
        let vals = [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ];
        vals.iter()
            .map(|v| format!("{v:e}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

const POSE_WARN: f64 = 1e-3;
const POSE_REJECT: f64 = 1e-1;

/// Parses `poses.txt`: twelve numbers per nonempty line, row-major 3x4.
pub fn parse_poses(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 12 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 12 numbers, found {}", toks.len()),
            });
        }
        let mut v = [0f64; 12];
        for (slot, tok) in v.iter_mut().zip(&toks) {
            *slot = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("`{tok}` is not a number"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "non-finite value".into(),
                });
            }
        }
        let pose = Pose {
            rotation: [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]],
            translation: [v[3], v[7], v[11]],
        };
        let err = pose.orthonormality_error();
        if err > POSE_REJECT || pose.determinant() <= 0.0 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("rotation is not a proper rotation (orthonormality error {err:.3e})"),
            });
        }
        if err > POSE_WARN {
            log::warn!("poses line {line_no}: rotation orthonormality error {err:.3e}");
        }
        poses.push(pose);
    }
    Ok(poses)
}

pub fn poses_to_text(poses: &[Pose]) -> String {
    let mut out = String::new();
    for p in poses {
        out.push_str(&p.to_line());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(v: [f32; 4]) -> Vec<u8> {
        v.iter().flat_map(|f| f.to_le_bytes()).collect()
    }

    #[test]
    fn parses_single_record() {
        let cloud = parse_point_cloud(&record([1.0, 2.0, 3.0, 0.5])).unwrap();
        assert_eq!(cloud.points, vec![Point::new(1.0, 2.0, 3.0, 0.5)]);
    }

    #[test]
    fn empty_scan_is_empty_cloud() {
        assert!(parse_point_cloud(&[]).unwrap().is_empty());
    }

    #[test]
    fn rejects_truncated_scan() {
        let mut b = record([1.0, 2.0, 3.0, 0.5]);
        b.push(0);
        assert!(matches!(parse_point_cloud(&b), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_nan_with_record_index() {
        let mut b = record([0.0; 4]);
        b.extend(record([f32::NAN, 0.0, 0.0, 0.0]));
        match parse_point_cloud(&b) {
            Err(Error::Format(msg)) => assert!(msg.contains("record 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_low_bits() {
        let b = 0x0002_000Au32.to_le_bytes();
        assert_eq!(parse_labels(&b).unwrap(), vec![10]);
        assert_eq!(parse_labels(&0u32.to_le_bytes()).unwrap(), vec![0]);
        assert!(parse_labels(&[]).unwrap().is_empty());
        assert!(parse_labels(&[1, 2, 3]).is_err());
    }

    #[test]
    fn pose_lines() {
        let p = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert_eq!(p, vec![Pose::identity()]);
        let p = parse_poses("1 0 0 5 0 1 0 0 0 0 1 0").unwrap();
        assert_eq!(p[0].translation, [5.0, 0.0, 0.0]);
        assert_eq!(p[0].rotation, Pose::identity().rotation);
        assert!(matches!(
            parse_poses("1 0 0"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn pose_rejects_non_rotation() {
        assert!(parse_poses("2 0 0 0 0 1 0 0 0 0 1 0").is_err());
        // slightly off: accepted with a warning
        assert!(parse_poses("1.0005 0 0 0 0 1 0 0 0 0 1 0").is_ok());
        // reflection
        assert!(parse_poses("-1 0 0 0 0 1 0 0 0 0 1 0").is_err());
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let p = Pose::from_yaw(0.7, [1.0, -2.0, 0.5]);
        let q = p.compose(&p.inverse());
        for i in 0..3 {
            for j in 0..3 {
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((q.rotation[i][j] - t).abs() < 1e-12);
            }
            assert!(q.translation[i].abs() < 1e-12);
        }
    }

    #[test]
    fn pose_text_round_trip() {
        let poses = vec![Pose::from_yaw(0.3, [1.5, 2.0, -0.25]), Pose::identity()];
        let back = parse_poses(&poses_to_text(&poses)).unwrap();
        assert_eq!(back, poses);
    }

    proptest! {
        #[test]
        fn scan_round_trip(vals in proptest::collection::vec((-100f32..100f32, -100f32..100f32, -5f32..5f32, 0f32..1f32), 0..64)) {
            let cloud = PointCloud::new(vals.iter().map(|&(x, y, z, r)| Point::new(x as f64, y as f64, z as f64, r as f64)).collect());
            let back = parse_point_cloud(&cloud.to_bin()).unwrap();
            prop_assert_eq!(back, cloud);
        }
    }
}
