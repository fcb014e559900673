//! Reference trajectories: timed XY waypoint chains.
//!
//! Waypoints are spaced `dt = 0.5 s` apart; segment speeds stay within
//! `[1.4, 1.5] m/s` subject to a `2.0 m/s²` acceleration limit, and heading
//! changes are small except for rare *sharp turns* of exactly 1.57 rad
//! (probability 0.02 per segment in the generator).

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("trajectory needs at least 2 waypoints")]
    TooShort,
    #[error("segment {segment} speed {speed:.3} m/s outside [{lo}, {hi}]")]
    SpeedOutOfRange { segment: usize, speed: f64, lo: f64, hi: f64 },
    #[error("acceleration {accel:.3} m/s^2 between segments {segment} exceeds {max}")]
    AccelTooHigh { segment: usize, accel: f64, max: f64 },
    #[error("segment {segment} turn angle {angle:.3} rad is neither small nor a sharp-turn event")]
    BadTurn { segment: usize, angle: f64 },
    #[error("line from {from:?} to {to:?} is too short to fit one constraint-satisfying segment")]
    LineTooShort { from: [f64; 2], to: [f64; 2] },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrajParams {
    pub n_points: usize,
    /// Seconds between waypoints.
    pub dt: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub sharp_prob: f64,
    pub sharp_angle: f64,
    /// Std-dev of the ordinary (non-sharp) per-segment heading change.
    pub heading_sigma: f64,
}

impl Default for TrajParams {
    fn default() -> Self {
        TrajParams {
            n_points: 10,
            dt: 0.5,
            v_min: 1.4,
            v_max: 1.5,
            a_max: 2.0,
            sharp_prob: 0.02,
            sharp_angle: 1.57,
            heading_sigma: 0.12,
        }
    }
}

/// The largest heading change the validator accepts as "small".
pub const SMALL_TURN_LIMIT: f64 = 0.45;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<[f64; 2]>,
    pub dt: f64,
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        (self.points.len().saturating_sub(1)) as f64 * self.dt
    }

    /// Time-parameterised reference position, clamped to the endpoints.
    pub fn ref_point(&self, t: f64) -> [f64; 2] {
        let n = self.points.len();
        if n == 1 || t <= 0.0 {
            return self.points[0];
        }
        let last = (n - 1) as f64 * self.dt;
        if t >= last {
            return self.points[n - 1];
        }
        let i = (t / self.dt).floor() as usize;
        let frac = (t - i as f64 * self.dt) / self.dt;
        let a = self.points[i];
        let b = self.points[i + 1];
        [a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])]
    }

    pub fn end(&self) -> [f64; 2] {
        *self.points.last().expect("validated trajectories are non-empty")
    }

    /// Distance from `p` to the nearest point on the waypoint polyline
    /// (the path corridor, independent of reference timing).
    pub fn nearest_dist(&self, p: [f64; 2]) -> f64 {
        let mut best = f64::INFINITY;
        for w in self.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            best = best.min(d);
        }
        if self.points.len() == 1 {
            let a = self.points[0];
            best = ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
        }
        best
    }

    /// Check every declared constraint.
    pub fn validate(&self, p: &TrajParams) -> Result<(), TrajectoryError> {
        if self.points.len() < 2 {
            return Err(TrajectoryError::TooShort);
        }
        let mut prev_speed: Option<f64> = None;
        let mut prev_heading: Option<f64> = None;
        for i in 0..self.points.len() - 1 {
            let dx = self.points[i + 1][0] - self.points[i][0];
            let dy = self.points[i + 1][1] - self.points[i][1];
            let dist = (dx * dx + dy * dy).sqrt();
            let speed = dist / self.dt;
            let tol = 1e-9;
            if speed < p.v_min - tol || speed > p.v_max + tol {
                return Err(TrajectoryError::SpeedOutOfRange {
                    segment: i,
                    speed,
                    lo: p.v_min,
                    hi: p.v_max,
                });
            }
            if let Some(ps) = prev_speed {
                let accel = (speed - ps).abs() / self.dt;
                if accel > p.a_max + tol {
                    return Err(TrajectoryError::AccelTooHigh { segment: i, accel, max: p.a_max });
                }
            }
            let heading = dy.atan2(dx);
            if let Some(ph) = prev_heading {
                let mut turn = heading - ph;
                while turn > std::f64::consts::PI {
                    turn -= 2.0 * std::f64::consts::PI;
                }
                while turn < -std::f64::consts::PI {
                    turn += 2.0 * std::f64::consts::PI;
                }
                let small = turn.abs() <= SMALL_TURN_LIMIT;
                let sharp = (turn.abs() - p.sharp_angle).abs() < 1e-9;
                if !small && !sharp {
                    return Err(TrajectoryError::BadTurn { segment: i, angle: turn });
                }
            }
            prev_speed = Some(speed);
            prev_heading = Some(heading);
        }
        Ok(())
    }
}

/// Random constraint-satisfying trajectory starting at `start` with the
/// given initial heading.
pub fn gen_trajectory(
    rng: &mut impl Rng,
    start: [f64; 2],
    heading0: f64,
    p: &TrajParams,
) -> Trajectory {
    let mut points = Vec::with_capacity(p.n_points);
    points.push(start);
    let mut heading = heading0;
    let mut prev_speed: Option<f64> = None;
    for _ in 1..p.n_points {
        // respect the acceleration limit when drawing the next speed
        let (lo, hi) = match prev_speed {
            None => (p.v_min, p.v_max),
            Some(v) => ((v - p.a_max * p.dt).max(p.v_min), (v + p.a_max * p.dt).min(p.v_max)),
        };
        let speed = rng.gen_range(lo..=hi);
        let turn = if rng.gen_bool(p.sharp_prob) {
            if rng.gen_bool(0.5) {
                p.sharp_angle
            } else {
                -p.sharp_angle
            }
        } else {
            // small Gaussian heading change, kept clear of the sharp band
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            (z * p.heading_sigma).clamp(-SMALL_TURN_LIMIT, SMALL_TURN_LIMIT)
        };
        heading += turn;
        let last = *points.last().expect("points starts non-empty");
        points.push([
            last[0] + speed * p.dt * heading.cos(),
            last[1] + speed * p.dt * heading.sin(),
        ]);
        prev_speed = Some(speed);
    }
    Trajectory { points, dt: p.dt }
}

/// Straight-line trajectory from `from` toward `to`, resampled so every
/// segment satisfies the speed envelope. The waypoint count adapts to the
/// line length; the geometric path is preserved exactly.
pub fn line_trajectory(from: [f64; 2], to: [f64; 2], p: &TrajParams) -> Result<Trajectory, TrajectoryError> {
    let len = ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2)).sqrt();
    let v_mid = 0.5 * (p.v_min + p.v_max);
    let mut segs = (len / (v_mid * p.dt)).round() as usize;
    // nudge the segment count into the feasible speed band
    loop {
        if segs == 0 {
            return Err(TrajectoryError::LineTooShort { from, to });
        }
        let v = len / (segs as f64 * p.dt);
        if v > p.v_max + 1e-12 {
            segs += 1;
        } else if v < p.v_min - 1e-12 {
            segs -= 1;
            if segs == 0 || len / (segs as f64 * p.dt) > p.v_max + 1e-12 {
                return Err(TrajectoryError::LineTooShort { from, to });
            }
        } else {
            break;
        }
    }
    let n = segs + 1;
    let points = (0..n)
        .map(|i| {
            let f = i as f64 / segs as f64;
            [from[0] + f * (to[0] - from[0]), from[1] + f * (to[1] - from[1])]
        })
        .collect();
    let t = Trajectory { points, dt: p.dt };
    t.validate(p)?;
    Ok(t)
}

/// How a task config names a trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// Straight line, resampled to the speed envelope.
    Line { from: [f64; 2], to: [f64; 2] },
    /// Seeded random generation.
    Generate { seed: u64, start: [f64; 2], heading: f64, n_points: Option<usize> },
    /// Verbatim waypoints (must already satisfy the constraints).
    Explicit { points: Vec<[f64; 2]> },
}

pub fn resolve_spec(spec: &TrajectorySpec, p: &TrajParams) -> Result<Trajectory, TrajectoryError> {
    match spec {
        TrajectorySpec::Line { from, to } => line_trajectory(*from, *to, p),
        TrajectorySpec::Generate { seed, start, heading, n_points } => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
            let mut params = *p;
            if let Some(n) = n_points {
                params.n_points = *n;
            }
            let t = gen_trajectory(&mut rng, *start, *heading, &params);
            t.validate(&params)?;
            Ok(t)
        }
        TrajectorySpec::Explicit { points } => {
            let t = Trajectory { points: clone_points(points), dt: p.dt };
            t.validate(p)?;
            Ok(t)
        }
    }
}

fn clone_points(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    points.to_vec()
}
