//! Rectified pinhole stereo: disparity/depth conversion and keypoint
//! triangulation.
//!
//! Both cameras share focal length and principal point; the right camera is
//! displaced by `baseline_mm` along +x, so a point at depth `z` appears
//! `focal_px * baseline_mm / z` pixels further left in the right image.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map_io::{FloatMap, StereoKeypoint};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera rig: {0}")]
    InvalidRig(String),
    #[error("cannot triangulate keypoint {id}: disparity {disparity} px is not positive")]
    NonPositiveDisparity { id: u64, disparity: f64 },
    #[error("cannot project point with z = {0} mm")]
    BehindCamera(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRig")]
pub struct CameraRig {
    pub focal_px: f64,
    pub baseline_mm: f64,
    pub cx_px: f64,
    pub cy_px: f64,
}

#[derive(Deserialize)]
struct RawRig {
    focal_px: f64,
    baseline_mm: f64,
    cx_px: f64,
    cy_px: f64,
}

impl TryFrom<RawRig> for CameraRig {
    type Error = GeometryError;

    fn try_from(r: RawRig) -> Result<Self, Self::Error> {
        CameraRig::new(r.focal_px, r.baseline_mm, r.cx_px, r.cy_px)
    }
}

impl CameraRig {
    pub fn new(focal_px: f64, baseline_mm: f64, cx_px: f64, cy_px: f64) -> Result<Self, GeometryError> {
        if !(focal_px > 0.0 && focal_px.is_finite()) {
            return Err(GeometryError::InvalidRig(format!("focal_px must be > 0, got {focal_px}")));
        }
        if !(baseline_mm > 0.0 && baseline_mm.is_finite()) {
            return Err(GeometryError::InvalidRig(format!(
                "baseline_mm must be > 0, got {baseline_mm}"
            )));
        }
        if !cx_px.is_finite() || !cy_px.is_finite() {
            return Err(GeometryError::InvalidRig("principal point must be finite".into()));
        }
        Ok(Self {
            focal_px,
            baseline_mm,
            cx_px,
            cy_px,
        })
    }

    /// `focal_px * baseline_mm`, the constant relating depth and disparity.
    pub fn fb(&self) -> f64 {
        self.focal_px * self.baseline_mm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3D {
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

/// `Z = f * B / d`. Non-positive disparities become invalid pixels.
pub fn disparity_to_depth(disp: &FloatMap, rig: &CameraRig) -> FloatMap {
    reciprocal_map(disp, rig.fb())
}

/// `d = f * B / Z`. Non-positive depths become invalid pixels.
pub fn depth_to_disparity(depth: &FloatMap, rig: &CameraRig) -> FloatMap {
    reciprocal_map(depth, rig.fb())
}

fn reciprocal_map(m: &FloatMap, fb: f64) -> FloatMap {
    let mut out = m.clone();
    for i in 0..m.len() {
        if m.is_valid(i) {
            let v = m.value(i);
            if v > 0.0 {
                out.set(i, fb / v);
            } else {
                out.invalidate(i);
            }
        }
    }
    out
}

pub fn triangulate_keypoint(kp: &StereoKeypoint, rig: &CameraRig) -> Result<Point3D, GeometryError> {
    let disparity = kp.u_left - kp.u_right;
    if !(disparity > 0.0) {
        return Err(GeometryError::NonPositiveDisparity { id: kp.id, disparity });
    }
    let z = rig.fb() / disparity;
    Ok(Point3D {
        x_mm: (kp.u_left - rig.cx_px) * z / rig.focal_px,
        y_mm: (kp.v_left - rig.cy_px) * z / rig.focal_px,
        z_mm: z,
    })
}

/// Inverse of [`triangulate_keypoint`]; both rows are set to the left row.
pub fn project_keypoint(p: &Point3D, rig: &CameraRig, id: u64) -> Result<StereoKeypoint, GeometryError> {
    if !(p.z_mm > 0.0) {
        return Err(GeometryError::BehindCamera(p.z_mm));
    }
    let u_left = rig.focal_px * p.x_mm / p.z_mm + rig.cx_px;
    let v = rig.focal_px * p.y_mm / p.z_mm + rig.cy_px;
    Ok(StereoKeypoint {
        id,
        u_left,
        v_left: v,
        u_right: u_left - rig.fb() / p.z_mm,
        v_right: v,
    })
}
