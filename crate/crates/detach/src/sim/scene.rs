//! Scenes composed of yaw-rotated boxes: geometry queries, surface
//! heightmaps, and interaction targets (sit / climb / carry).
//!
//! Conventions:
//! * `position` is the **center** of an object's bounding box; `extents`
//!   are full side lengths, so the top surface sits at
//!   `position.z + extents.z / 2`.
//! * The sit target is 0.1 m above the top surface; the climb target is
//!   the top surface itself.
//! * Ground level is z = 0 everywhere; objects rest on it or on each
//!   other, and height queries return the highest surface under a point.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("carriable object {index} ({name}) spawns inside static geometry (object {other})")]
    CarriableOverlap { index: usize, name: String, other: usize },
    #[error("object {index} has non-positive extents")]
    BadExtents { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Box,
    Chair,
    Sofa,
    Bed,
    Table,
    Platform,
    Wall,
    Nightstand,
    TvStand,
    Television,
    Car,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub kind: ObjectKind,
    /// Center of the bounding box, meters.
    pub position: [f64; 3],
    /// Rotation about the vertical axis, radians.
    #[serde(default)]
    pub yaw: f64,
    /// Full side lengths (x, y, z) in the object frame, meters.
    pub extents: [f64; 3],
    #[serde(default)]
    pub carriable: bool,
}

impl SceneObject {
    pub fn base_height(&self) -> f64 {
        self.position[2] - self.extents[2] / 2.0
    }

    /// Height of the top surface.
    pub fn surface_height(&self) -> f64 {
        self.position[2] + self.extents[2] / 2.0
    }

    /// Where an agent should sit: 0.1 m above the top surface.
    pub fn sit_target(&self) -> [f64; 3] {
        [self.position[0], self.position[1], self.surface_height() + 0.1]
    }

    /// Where a climb counts: the top surface itself.
    pub fn climb_target(&self) -> [f64; 3] {
        [self.position[0], self.position[1], self.surface_height()]
    }

    /// World point expressed in the object's yaw-aligned local frame.
    fn to_local_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.position[0];
        let dy = y - self.position[1];
        let (s, c) = self.yaw.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Does the vertical column at (x, y) pass through this object?
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.to_local_xy(x, y);
        lx.abs() <= self.extents[0] / 2.0 && ly.abs() <= self.extents[1] / 2.0
    }

    /// Intersect a downward vertical ray with the box via the slab method
    /// in the object frame; returns the entry (top) height if hit.
    pub fn raycast_down(&self, x: f64, y: f64, from_z: f64) -> Option<f64> {
        let (lx, ly) = self.to_local_xy(x, y);
        // A vertical ray has zero direction in x/y: it hits iff the point
        // lies inside both horizontal slabs.
        if lx.abs() > self.extents[0] / 2.0 || ly.abs() > self.extents[1] / 2.0 {
            return None;
        }
        let top = self.surface_height();
        if from_z >= top {
            Some(top)
        } else if from_z >= self.base_height() {
            Some(from_z) // ray starts inside the box
        } else {
            None // ray starts below; a downward ray never reaches it
        }
    }

    /// Horizontal overlap test between two yaw-rotated rectangles
    /// (separating-axis over both objects' edge normals), with vertical
    /// interval overlap.
    pub fn intersects(&self, other: &SceneObject) -> bool {
        let eps = 1e-9;
        let z_overlap = self.base_height() < other.surface_height() - eps
            && other.base_height() < self.surface_height() - eps;
        if !z_overlap {
            return false;
        }
        let corners = |o: &SceneObject| -> Vec<(f64, f64)> {
            let (s, c) = o.yaw.sin_cos();
            let hx = o.extents[0] / 2.0;
            let hy = o.extents[1] / 2.0;
            [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)]
                .iter()
                .map(|(x, y)| (o.position[0] + c * x - s * y, o.position[1] + s * x + c * y))
                .collect()
        };
        let axes = |o: &SceneObject| -> Vec<(f64, f64)> {
            let (s, c) = o.yaw.sin_cos();
            vec![(c, s), (-s, c)]
        };
        let ca = corners(self);
        let cb = corners(other);
        for (ax, ay) in axes(self).into_iter().chain(axes(other)) {
            let proj = |pts: &[(f64, f64)]| {
                let ps: Vec<f64> = pts.iter().map(|(x, y)| x * ax + y * ay).collect();
                (
                    ps.iter().cloned().fold(f64::INFINITY, f64::min),
                    ps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                )
            };
            let (amin, amax) = proj(&ca);
            let (bmin, bmax) = proj(&cb);
            if amax < bmin + eps || bmax < amin + eps {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub name: String,
    #[serde(default = "default_world_half_extent")]
    pub world_half_extent: f64,
    pub objects: Vec<SceneObject>,
}

fn default_world_half_extent() -> f64 {
    30.0
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub world_half_extent: f64,
    pub objects: Vec<SceneObject>,
}

/// Validate a parsed config into a usable scene. Carriable objects must
/// not interpenetrate static geometry at spawn.
pub fn build_scene(cfg: &SceneConfig) -> Result<Scene, SceneError> {
    for (i, o) in cfg.objects.iter().enumerate() {
        if o.extents.iter().any(|e| *e <= 0.0) {
            return Err(SceneError::BadExtents { index: i });
        }
    }
    for (i, o) in cfg.objects.iter().enumerate() {
        if !o.carriable {
            continue;
        }
        for (j, other) in cfg.objects.iter().enumerate() {
            if i != j && !other.carriable && o.intersects(other) {
                return Err(SceneError::CarriableOverlap { index: i, name: o.name.clone(), other: j });
            }
        }
    }
    Ok(Scene {
        name: cfg.name.clone(),
        world_half_extent: cfg.world_half_extent,
        objects: cfg.objects.clone(),
    })
}

impl Scene {
    /// Highest surface under (x, y): analytic union-of-boxes maximum.
    /// `exclude` skips one object (e.g. the one being carried).
    pub fn ground_height(&self, x: f64, y: f64, exclude: Option<usize>) -> f64 {
        let mut h: f64 = 0.0;
        for (i, o) in self.objects.iter().enumerate() {
            if Some(i) == exclude {
                continue;
            }
            if o.footprint_contains(x, y) {
                h = h.max(o.surface_height());
            }
        }
        h
    }

    /// Same query via per-object vertical raycasts from `camera_z`.
    /// Exists as an independent implementation to cross-check the
    /// analytic path; both must agree everywhere.
    pub fn ground_height_raycast(&self, x: f64, y: f64, camera_z: f64, exclude: Option<usize>) -> f64 {
        let mut h: f64 = 0.0;
        for (i, o) in self.objects.iter().enumerate() {
            if Some(i) == exclude {
                continue;
            }
            if let Some(top) = o.raycast_down(x, y, camera_z) {
                h = h.max(top);
            }
        }
        h
    }

    pub fn first_carriable(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.carriable)
    }

    /// 128x128 surface heightmap over one object's axis-aligned footprint
    /// bounds (padded slightly so the edge cells fall outside), sampled
    /// against the whole scene.
    pub fn object_heightmap(&self, index: usize, n: usize) -> Heightmap {
        let o = &self.objects[index];
        let (s, c) = o.yaw.sin_cos();
        let hx = o.extents[0] / 2.0;
        let hy = o.extents[1] / 2.0;
        // axis-aligned bounds of the rotated footprint
        let rx = (c * hx).abs() + (s * hy).abs();
        let ry = (s * hx).abs() + (c * hy).abs();
        let pad = 0.05;
        let x0 = o.position[0] - rx - pad;
        let y0 = o.position[1] - ry - pad;
        let dx = (2.0 * (rx + pad)) / (n.max(2) - 1) as f64;
        let dy = (2.0 * (ry + pad)) / (n.max(2) - 1) as f64;
        let mut values = Vec::with_capacity(n * n);
        for iy in 0..n {
            for ix in 0..n {
                let x = x0 + ix as f64 * dx;
                let y = y0 + iy as f64 * dy;
                values.push(self.ground_height(x, y, None));
            }
        }
        Heightmap { nx: n, ny: n, x0, y0, dx, dy, values }
    }

    /// Egocentric perception grid: `n × n` height samples at `spacing`
    /// meters, centered on the agent and rotated by its yaw, heights
    /// relative to the agent's root z. Cells outside the world read the
    /// ground plane (0) minus root z.
    pub fn perception_grid(
        &self,
        agent_xy: [f64; 2],
        agent_yaw: f64,
        agent_z: f64,
        n: usize,
        spacing: f64,
        exclude: Option<usize>,
    ) -> Vec<f64> {
        let (s, c) = agent_yaw.sin_cos();
        let half = (n as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(n * n);
        for iy in 0..n {
            for ix in 0..n {
                let lx = (ix as f64 - half) * spacing;
                let ly = (iy as f64 - half) * spacing;
                let x = agent_xy[0] + c * lx - s * ly;
                let y = agent_xy[1] + s * lx + c * ly;
                let h = if x.abs() > self.world_half_extent || y.abs() > self.world_half_extent {
                    0.0
                } else {
                    self.ground_height(x, y, exclude)
                };
                out.push(h - agent_z);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Heightmap {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    /// Row-major, `ny` rows of `nx` samples.
    pub values: Vec<f64>,
}
