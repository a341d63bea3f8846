//! Synthetic worlds with known geometry, a point-sampling range sensor and
//! ground-truth trajectories/priors for them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::{so3_exp, PoseSE3, Vec3};
use crate::pointcloud::{ensure_shape, CloudError, PointCloud, DEFAULT_NORMAL_K};
use crate::trajectory::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error("invalid sensor: {0}")]
    InvalidSensor(String),
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

/// Geometry of a synthetic world. All dimensions in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SceneKind {
    /// Walls at `y = ±width/2`, floor `z = 0`, ceiling `z = height`, for
    /// `x ∈ [0, length]`; both ends open.
    Corridor {
        length: f64,
        width: f64,
        height: f64,
    },
    /// Cylindrical wall of `radius` around the x axis, `x ∈ [0, length]`.
    Tunnel { length: f64, radius: f64 },
    /// The plane `z = 0`, centered on the origin.
    Plane { size_x: f64, size_y: f64 },
    /// Closed box `[0, length] × [0, width] × [0, height]` with a square
    /// pillar off its center.
    Room {
        length: f64,
        width: f64,
        height: f64,
    },
    /// `steps` treads climbing along +x between two side walls at `y = ±width/2`.
    Staircase {
        steps: usize,
        step_rise: f64,
        step_run: f64,
        width: f64,
    },
}

fn default_density() -> f64 {
    100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(flatten)]
    pub kind: SceneKind,
    /// Surface samples per square meter.
    #[serde(default = "default_density", alias = "density")]
    pub surface_sample_density: f64,
    /// Standard deviation of the offset along the surface normal (m).
    #[serde(default)]
    pub noise_sigma: f64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, surface_sample_density: f64, noise_sigma: f64) -> Self {
        Self {
            kind,
            surface_sample_density,
            noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        let dims: Vec<(&str, f64)> = match &self.kind {
            SceneKind::Corridor {
                length,
                width,
                height,
            }
            | SceneKind::Room {
                length,
                width,
                height,
            } => {
                vec![("length", *length), ("width", *width), ("height", *height)]
            }
            SceneKind::Tunnel { length, radius } => vec![("length", *length), ("radius", *radius)],
            SceneKind::Plane { size_x, size_y } => vec![("size_x", *size_x), ("size_y", *size_y)],
            SceneKind::Staircase {
                steps,
                step_rise,
                step_run,
                width,
            } => {
                if *steps == 0 {
                    return bad("steps must be at least 1".into());
                }
                vec![
                    ("step_rise", *step_rise),
                    ("step_run", *step_run),
                    ("width", *width),
                ]
            }
        };
        for (name, v) in dims {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.surface_sample_density > 0.0) || !self.surface_sample_density.is_finite() {
            return bad("surface_sample_density must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// A planar rectangle `origin + a·u + b·v`, `a, b ∈ [0, 1]`.
struct Patch {
    origin: Vec3,
    u: Vec3,
    v: Vec3,
    normal: Vec3,
}

impl Patch {
    fn new(origin: Vec3, u: Vec3, v: Vec3, normal: Vec3) -> Self {
        Self {
            origin,
            u,
            v,
            normal,
        }
    }

    fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }
}

/// Axis-aligned box faces, normals pointing inward when `inward`.
fn box_faces(min: Vec3, max: Vec3, inward: bool, skip_bottom_top: bool) -> Vec<Patch> {
    let d = max - min;
    let (ex, ey, ez) = (Vec3::x() * d.x, Vec3::y() * d.y, Vec3::z() * d.z);
    let s = if inward { 1.0 } else { -1.0 };
    let mut faces = vec![
        Patch::new(min, ey, ez, Vec3::x() * s),
        Patch::new(min + ex, ey, ez, -Vec3::x() * s),
        Patch::new(min, ex, ez, Vec3::y() * s),
        Patch::new(min + ey, ex, ez, -Vec3::y() * s),
    ];
    if !skip_bottom_top {
        faces.push(Patch::new(min, ex, ey, Vec3::z() * s));
        faces.push(Patch::new(min + ez, ex, ey, -Vec3::z() * s));
    }
    faces
}

fn patches(kind: &SceneKind) -> Vec<Patch> {
    match *kind {
        SceneKind::Corridor {
            length,
            width,
            height,
        } => {
            let (x, y, z) = (Vec3::x() * length, Vec3::y() * width, Vec3::z() * height);
            let o = Vec3::new(0.0, -width / 2.0, 0.0);
            vec![
                Patch::new(o, x, z, Vec3::y()),
                Patch::new(o + y, x, z, -Vec3::y()),
                Patch::new(o, x, y, Vec3::z()),
                Patch::new(o + z, x, y, -Vec3::z()),
            ]
        }
        SceneKind::Plane { size_x, size_y } => vec![Patch::new(
            Vec3::new(-size_x / 2.0, -size_y / 2.0, 0.0),
            Vec3::x() * size_x,
            Vec3::y() * size_y,
            Vec3::z(),
        )],
        SceneKind::Room {
            length,
            width,
            height,
        } => {
            let mut faces = box_faces(Vec3::zeros(), Vec3::new(length, width, height), true, false);
            let side = 0.1 * length.min(width);
            let center = Vec3::new(0.7 * length, 0.3 * width, 0.0);
            let half = Vec3::new(side / 2.0, side / 2.0, 0.0);
            faces.extend(box_faces(
                center - half,
                center + half + Vec3::z() * height,
                false,
                true,
            ));
            faces
        }
        SceneKind::Staircase {
            steps,
            step_rise,
            step_run,
            width,
        } => {
            let mut faces = Vec::new();
            let y0 = -width / 2.0;
            for k in 0..=steps {
                let z = k as f64 * step_rise;
                let x = k as f64 * step_run;
                faces.push(Patch::new(
                    Vec3::new(x, y0, z),
                    Vec3::x() * step_run,
                    Vec3::y() * width,
                    Vec3::z(),
                ));
                if k > 0 {
                    faces.push(Patch::new(
                        Vec3::new(x, y0, z - step_rise),
                        Vec3::y() * width,
                        Vec3::z() * step_rise,
                        -Vec3::x(),
                    ));
                }
            }
            let run = (steps + 1) as f64 * step_run;
            let wall_height = steps as f64 * step_rise + 2.5;
            faces.push(Patch::new(
                Vec3::new(0.0, y0, 0.0),
                Vec3::x() * run,
                Vec3::z() * wall_height,
                Vec3::y(),
            ));
            faces.push(Patch::new(
                Vec3::new(0.0, -y0, 0.0),
                Vec3::x() * run,
                Vec3::z() * wall_height,
                -Vec3::y(),
            ));
            faces
        }
        SceneKind::Tunnel { .. } => Vec::new(),
    }
}

fn sample_count(area: f64, density: f64) -> usize {
    (area * density).round() as usize
}

/// Samples the scene surfaces uniformly with analytic normals; planarity
/// comes from PCA over the sampled neighborhoods.
pub fn generate_map(spec: &SceneSpec, seed: u64) -> Result<PointCloud, SceneError> {
    let cloud = sample_surfaces(spec, seed)?;
    Ok(ensure_shape(&cloud, DEFAULT_NORMAL_K)?)
}

/// Uniform surface samples with analytic normals only. Enough for simulating
/// scans, which carry no per-point shape channels.
pub fn sample_surfaces(spec: &SceneSpec, seed: u64) -> Result<PointCloud, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut points = Vec::new();
    let mut normals = Vec::new();
    if let SceneKind::Tunnel { length, radius } = spec.kind {
        let area = 2.0 * std::f64::consts::PI * radius * length;
        for _ in 0..sample_count(area, spec.surface_sample_density) {
            let x = rng.random_range(0.0..length);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let radial = Vec3::new(0.0, theta.cos(), theta.sin());
            let offset = noise.sample(&mut rng);
            points.push(Vec3::new(x, 0.0, 0.0) + radial * (radius + offset));
            normals.push(-radial);
        }
    } else {
        for patch in patches(&spec.kind) {
            for _ in 0..sample_count(patch.area(), spec.surface_sample_density) {
                let a: f64 = rng.random();
                let b: f64 = rng.random();
                let offset = noise.sample(&mut rng);
                points.push(patch.origin + patch.u * a + patch.v * b + patch.normal * offset);
                normals.push(patch.normal);
            }
        }
    }
    let cloud = PointCloud::new(points)
        .with_frame_id("map")
        .with_normals(normals)?;
    if cloud.len() < DEFAULT_NORMAL_K {
        return Err(SceneError::InvalidSpec(format!(
            "only {} surface samples; raise the density",
            cloud.len()
        )));
    }
    Ok(cloud)
}

fn default_max_range() -> f64 {
    10.0
}
fn default_rays() -> usize {
    10_000
}
fn default_vertical_fov() -> f64 {
    90.0
}
fn default_horizontal_fov() -> f64 {
    360.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    #[serde(default = "default_max_range")]
    pub max_range: f64,
    /// Upper bound on points per scan.
    #[serde(default = "default_rays")]
    pub rays: usize,
    /// Full vertical opening angle in degrees, centered on the horizon.
    #[serde(default = "default_vertical_fov")]
    pub vertical_fov: f64,
    /// Full horizontal opening angle in degrees, centered on +x.
    #[serde(default = "default_horizontal_fov")]
    pub horizontal_fov: f64,
    #[serde(default)]
    pub range_noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            max_range: default_max_range(),
            rays: default_rays(),
            vertical_fov: default_vertical_fov(),
            horizontal_fov: default_horizontal_fov(),
            range_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidSensor(m.to_string()));
        if !(self.max_range > 0.0) {
            return bad("max_range must be positive");
        }
        if self.rays < 1 {
            return bad("rays must be at least 1");
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov <= 180.0) {
            return bad("vertical_fov must be in (0, 180]");
        }
        if !(self.horizontal_fov > 0.0 && self.horizontal_fov <= 360.0) {
            return bad("horizontal_fov must be in (0, 360]");
        }
        if !(self.range_noise_sigma >= 0.0) || !self.range_noise_sigma.is_finite() {
            return bad("range_noise_sigma must be non-negative");
        }
        Ok(())
    }

    fn sees(&self, p: &Vec3) -> bool {
        let horizontal = (p.x * p.x + p.y * p.y).sqrt();
        let azimuth = p.y.atan2(p.x).to_degrees().abs();
        let elevation = p.z.atan2(horizontal).to_degrees().abs();
        azimuth <= self.horizontal_fov / 2.0 && elevation <= self.vertical_fov / 2.0
    }
}

/// Takes the map points a sensor at `pose` would see, expressed in the sensor
/// frame: range and field-of-view gating, seeded subsampling to at most
/// `rays` points, then radial range noise.
pub fn simulate_scan(
    map: &PointCloud,
    pose: &PoseSE3,
    sensor: &SensorModel,
) -> Result<PointCloud, SceneError> {
    sensor.validate()?;
    let inv = pose.inverse();
    let center = pose.translation();
    let r2 = sensor.max_range * sensor.max_range;
    let mut visible: Vec<Vec3> = map
        .points()
        .iter()
        .filter(|q| (*q - center).norm_squared() <= r2)
        .map(|q| inv.apply(q))
        .filter(|p| p.norm() > 1e-9 && sensor.sees(p))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(sensor.seed);
    if visible.len() > sensor.rays {
        let mut keep = sample(&mut rng, visible.len(), sensor.rays).into_vec();
        keep.sort_unstable();
        visible = keep.into_iter().map(|i| visible[i]).collect();
    }
    // sweep order (azimuth, then elevation), as a spinning sensor returns them
    visible.sort_by_cached_key(|p| {
        let horizontal = (p.x * p.x + p.y * p.y).sqrt();
        let az = (p.y.atan2(p.x).to_degrees() * 10.0).floor() as i64;
        (az, ordered(p.z.atan2(horizontal)))
    });
    if sensor.range_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, sensor.range_noise_sigma).expect("validated sigma");
        for p in &mut visible {
            let r = p.norm();
            *p *= (r + noise.sample(&mut rng)).max(0.0) / r;
        }
    }
    Ok(PointCloud::new(visible).with_frame_id("sensor"))
}

fn ordered(v: f64) -> i64 {
    (v * 1e9) as i64
}

/// Evenly spaced poses with fixed orientation, starting at `t = 0`.
pub fn straight_trajectory(
    start: &PoseSE3,
    velocity: &Vec3,
    duration: f64,
    rate: f64,
) -> Trajectory {
    assert!(rate > 0.0, "rate must be positive");
    let n = (duration.max(0.0) * rate + 1e-9).floor() as usize + 1;
    let poses = (0..n)
        .map(|k| {
            let t = k as f64 / rate;
            (
                t,
                PoseSE3::new(*start.rotation(), start.translation() + velocity * t),
            )
        })
        .collect();
    Trajectory::new(poses).expect("timestamps increase by construction")
}

/// Ground-truth relative motions corrupted by zero-mean Gaussian noise:
/// `sigma_trans` (m) per translation axis and `sigma_rot` (rad) per rotation axis.
pub fn synthetic_priors(
    gt: &Trajectory,
    sigma_trans: f64,
    sigma_rot: f64,
    seed: u64,
) -> Vec<(f64, PoseSE3)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trans = Normal::new(0.0, sigma_trans.max(0.0)).expect("finite sigma");
    let rot = Normal::new(0.0, sigma_rot.max(0.0)).expect("finite sigma");
    gt.relative_motions()
        .into_iter()
        .map(|(t, rel)| {
            let dt = Vec3::new(
                trans.sample(&mut rng),
                trans.sample(&mut rng),
                trans.sample(&mut rng),
            );
            let dr = Vec3::new(
                rot.sample(&mut rng),
                rot.sample(&mut rng),
                rot.sample(&mut rng),
            );
            let noisy = PoseSE3::new(rel.rotation() * so3_exp(&dr), rel.translation() + dt);
            (t, noisy)
        })
        .collect()
}

/// Scans along `gt`, taken from `world` (usually an independently seeded
/// sample of the same scene as the map). Scan `k` uses sensor seed `seed + k`.
pub fn simulate_sequence(
    world: &PointCloud,
    gt: &Trajectory,
    sensor: &SensorModel,
) -> Result<Vec<(f64, PointCloud)>, SceneError> {
    gt.iter()
        .enumerate()
        .map(|(k, (t, pose))| {
            let s = SensorModel {
                seed: sensor.seed.wrapping_add(k as u64),
                ..sensor.clone()
            };
            simulate_scan(world, pose, &s).map(|c| (*t, c.with_timestamp(Some(*t))))
        })
        .collect()
}

fn default_start() -> [f64; 3] {
    [0.0, 0.0, 0.0]
}
fn default_velocity() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}
fn default_duration() -> f64 {
    10.0
}
fn default_rate() -> f64 {
    10.0
}

/// A straight constant-velocity path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    #[serde(default = "default_start")]
    pub start: [f64; 3],
    /// Heading about +z in degrees.
    #[serde(default)]
    pub yaw_deg: f64,
    /// World-frame velocity (m/s).
    #[serde(default = "default_velocity")]
    pub velocity: [f64; 3],
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            start: default_start(),
            yaw_deg: 0.0,
            velocity: default_velocity(),
            duration: default_duration(),
            rate: default_rate(),
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.rate > 0.0) || !(self.duration >= 0.0) {
            return Err(SceneError::InvalidSpec(
                "trajectory needs rate > 0 and duration >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Trajectory {
        let start = PoseSE3::from_rotation_vector(
            Vec3::new(0.0, 0.0, self.yaw_deg.to_radians()),
            Vec3::from(self.start),
        );
        straight_trajectory(&start, &Vec3::from(self.velocity), self.duration, self.rate)
    }
}

/// Noise of the synthetic relative-motion priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorNoise {
    /// Per-axis translation noise (m).
    #[serde(default)]
    pub sigma_trans: f64,
    /// Per-axis rotation noise (rad).
    #[serde(default)]
    pub sigma_rot: f64,
}

impl Default for PriorNoise {
    fn default() -> Self {
        Self {
            sigma_trans: 0.01,
            sigma_rot: 0.0,
        }
    }
}

/// A complete synthetic localization problem.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    /// The published map, with normals and planarity.
    pub map: PointCloud,
    pub ground_truth: Trajectory,
    /// Sensor-frame scans, one per ground-truth pose.
    pub scans: Vec<(f64, PointCloud)>,
    /// Noisy relative motions stamped at the later scan.
    pub priors: Vec<(f64, PoseSE3)>,
}

/// Builds map, scans, ground truth and priors from one seed. Scans are taken
/// from a second, independently sampled copy of the scene so that scan points
/// never coincide with map points.
pub fn synthesize(
    scene: &SceneSpec,
    sensor: &SensorModel,
    trajectory: &TrajectorySpec,
    priors: &PriorNoise,
    seed: u64,
) -> Result<SyntheticSequence, SceneError> {
    scene.validate()?;
    sensor.validate()?;
    trajectory.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let (map_seed, world_seed, sensor_seed, prior_seed): (u64, u64, u64, u64) = (
        seeds.random(),
        seeds.random(),
        seeds.random(),
        seeds.random(),
    );
    let map = generate_map(scene, map_seed)?;
    let world = sample_surfaces(scene, world_seed)?;
    let ground_truth = trajectory.build();
    let sensor = SensorModel {
        seed: sensor.seed ^ sensor_seed,
        ..sensor.clone()
    };
    let scans = simulate_sequence(&world, &ground_truth, &sensor)?;
    let priors = synthetic_priors(
        &ground_truth,
        priors.sigma_trans,
        priors.sigma_rot,
        prior_seed,
    );
    Ok(SyntheticSequence {
        map,
        ground_truth,
        scans,
        priors,
    })
}
