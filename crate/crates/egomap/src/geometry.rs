//! Camera, pose, and map-frame geometry. Everything here runs in f64
//! regardless of the training precision; errors compound over hundreds of
//! steps, so the transforms stay exact and only network tensors are cast.
//!
//! Conventions:
//! - World frame: x/y plane, heading phi in radians, counterclockwise
//!   positive, wrapped to (-pi, pi].
//! - Ego frame: `forward` along the heading, `lateral` positive to the
//!   agent's right.
//! - Map frame: axis-aligned allocentric grid; row 0 sits at the largest
//!   world x, column 0 at the largest world y, so a pose at the map center
//!   with heading 0 sees the map as-is (row 0 ahead, column 0 to its left).
//! - Pixel space: index coordinates, where pixel `p` has center `p` and the
//!   image center is `(n - 1) / 2`.

use serde::{Deserialize, Serialize};

/// Pinhole camera for the horizontal scan plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, radians.
    pub fov_h: f64,
    /// Focal length in pixels.
    pub focal: f64,
}

impl CameraIntrinsics {
    pub fn new(width: usize, height: usize, fov_h: f64) -> Self {
        let focal = width as f64 / 2.0 / (fov_h / 2.0).tan();
        CameraIntrinsics {
            width,
            height,
            fov_h,
            focal,
        }
    }

    /// Tangent of the ray angle for a (possibly fractional) pixel column,
    /// positive to the right of the optical axis.
    pub fn tan_offset(&self, col: f64) -> f64 {
        (col - (self.width as f64 - 1.0) / 2.0) / self.focal
    }

    /// Ego-frame point for a pixel column at a given perpendicular depth
    /// (distance along the optical axis, not along the ray).
    pub fn unproject(&self, col: f64, depth: f64) -> (f64, f64) {
        (depth, depth * self.tan_offset(col))
    }
}

/// Centers of each output unit's receptive field, in input pixel-index
/// coordinates, for a stack of valid (unpadded) conv layers given as
/// `(kernel, stride)` pairs.
pub fn receptive_field_centers(input: usize, layers: &[(usize, usize)]) -> Vec<f64> {
    let mut first = 0.0;
    let mut step = 1.0;
    let mut count = input;
    for &(k, s) in layers {
        first += (k as f64 - 1.0) / 2.0 * step;
        step *= s as f64;
        count = (count - k) / s + 1;
    }
    (0..count).map(|j| first + j as f64 * step).collect()
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    PI - (PI - a).rem_euclid(2.0 * PI)
}

/// Agent position and heading in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

/// Egocentric motion between two poses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseDelta {
    pub forward: f64,
    pub lateral: f64,
    pub rotation: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Pose {
            x,
            y,
            phi: wrap_angle(phi),
        }
    }

    /// World point for an ego-frame offset.
    pub fn ego_to_world(&self, forward: f64, lateral: f64) -> (f64, f64) {
        let (s, c) = self.phi.sin_cos();
        (
            self.x + forward * c + lateral * s,
            self.y + forward * s - lateral * c,
        )
    }

    /// Ego-frame offset of a world point.
    pub fn world_to_ego(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (s, c) = self.phi.sin_cos();
        let dx = wx - self.x;
        let dy = wy - self.y;
        (dx * c + dy * s, dx * s - dy * c)
    }

    /// Apply an egocentric motion. Translation happens in the frame of the
    /// starting heading; rotation is added afterwards.
    pub fn integrate(&self, d: &PoseDelta) -> Pose {
        let (x, y) = self.ego_to_world(d.forward, d.lateral);
        Pose::new(x, y, self.phi + d.rotation)
    }

    /// Egocentric motion that carries `self` onto `other`.
    pub fn delta_to(&self, other: &Pose) -> PoseDelta {
        let (forward, lateral) = self.world_to_ego(other.x, other.y);
        PoseDelta {
            forward,
            lateral,
            rotation: wrap_angle(other.phi - self.phi),
        }
    }
}

/// Placement of the allocentric grid in the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapGeometry {
    pub rows: usize,
    pub cols: usize,
    /// World units per cell.
    pub cell_size: f64,
    /// World position of the map center.
    pub center_x: f64,
    pub center_y: f64,
}

impl MapGeometry {
    /// Grid covering a square arena of the given extent with fractional
    /// padding on each side (0.2 pads the span to 1.2x the extent).
    pub fn covering(extent: f64, rows: usize, cols: usize, padding: f64, cx: f64, cy: f64) -> Self {
        let span = extent * (1.0 + padding);
        MapGeometry {
            rows,
            cols,
            cell_size: span / rows as f64,
            center_x: cx,
            center_y: cy,
        }
    }

    /// Continuous (row, col) for a world point.
    pub fn world_to_cell(&self, wx: f64, wy: f64) -> (f64, f64) {
        (
            (self.rows as f64 - 1.0) / 2.0 - (wx - self.center_x) / self.cell_size,
            (self.cols as f64 - 1.0) / 2.0 - (wy - self.center_y) / self.cell_size,
        )
    }

    /// World point at the center of a continuous (row, col).
    pub fn cell_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.center_x + ((self.rows as f64 - 1.0) / 2.0 - row) * self.cell_size,
            self.center_y + ((self.cols as f64 - 1.0) / 2.0 - col) * self.cell_size,
        )
    }

    /// Flat index of the nearest cell, or None if the point falls outside
    /// the grid.
    pub fn nearest_cell(&self, wx: f64, wy: f64) -> Option<usize> {
        let (r, c) = self.world_to_cell(wx, wy);
        let (ri, ci) = (r.round(), c.round());
        if ri < 0.0 || ci < 0.0 || ri >= self.rows as f64 || ci >= self.cols as f64 {
            None
        } else {
            Some(ri as usize * self.cols + ci as usize)
        }
    }

    /// Continuous map (row, col) seen at view cell (vr, vc) by an observer
    /// at `pose`: view row 0 lies ahead, view column 0 to the left.
    pub fn view_to_map_point(&self, pose: &Pose, vr: f64, vc: f64) -> (f64, f64) {
        let forward = ((self.rows as f64 - 1.0) / 2.0 - vr) * self.cell_size;
        let lateral = (vc - (self.cols as f64 - 1.0) / 2.0) * self.cell_size;
        let (wx, wy) = pose.ego_to_world(forward, lateral);
        self.world_to_cell(wx, wy)
    }

    /// Inverse of [`view_to_map_point`]: where a map cell lands in the
    /// egocentric view of `pose`.
    pub fn map_to_view_point(&self, pose: &Pose, mr: f64, mc: f64) -> (f64, f64) {
        let (wx, wy) = self.cell_to_world(mr, mc);
        let (forward, lateral) = pose.world_to_ego(wx, wy);
        (
            (self.rows as f64 - 1.0) / 2.0 - forward / self.cell_size,
            (self.cols as f64 - 1.0) / 2.0 + lateral / self.cell_size,
        )
    }

    /// Normalize a continuous (row, col) so -1/+1 hit the centers of the
    /// first/last cells.
    pub fn normalize(&self, row: f64, col: f64) -> [f64; 2] {
        [
            2.0 * row / (self.rows as f64 - 1.0) - 1.0,
            2.0 * col / (self.cols as f64 - 1.0) - 1.0,
        ]
    }

    /// Sampling grid that resamples the allocentric map into the egocentric
    /// frame of `pose`; one normalized source coordinate per view cell.
    pub fn ego_view_grid(&self, pose: &Pose) -> Vec<[f64; 2]> {
        let mut grid = Vec::with_capacity(self.rows * self.cols);
        for vr in 0..self.rows {
            for vc in 0..self.cols {
                let (mr, mc) = self.view_to_map_point(pose, vr as f64, vc as f64);
                grid.push(self.normalize(mr, mc));
            }
        }
        grid
    }

    /// Sampling grid for the reverse resample, view frame back to map frame.
    pub fn map_from_view_grid(&self, pose: &Pose) -> Vec<[f64; 2]> {
        let mut grid = Vec::with_capacity(self.rows * self.cols);
        for mr in 0..self.rows {
            for mc in 0..self.cols {
                let (vr, vc) = self.map_to_view_point(pose, mr as f64, mc as f64);
                grid.push(self.normalize(vr, vc));
            }
        }
        grid
    }

    /// Normalized ego-frame coordinate planes appended to egocentric views:
    /// plane 0 ramps -1..1 down the rows, plane 1 across the columns.
    pub fn coordinate_planes(&self) -> Vec<f64> {
        let mut planes = Vec::with_capacity(2 * self.rows * self.cols);
        for r in 0..self.rows {
            let v = 2.0 * r as f64 / (self.rows as f64 - 1.0) - 1.0;
            planes.extend(std::iter::repeat(v).take(self.cols));
        }
        for _ in 0..self.rows {
            for c in 0..self.cols {
                planes.push(2.0 * c as f64 / (self.cols as f64 - 1.0) - 1.0);
            }
        }
        planes
    }
}
