//! Synthetic sequences with exact ground truth: a smooth height-field surface
//! seen by a pinhole camera along one of several trajectories, with depth
//! priors, view-consistent feature and descriptor maps and analytic flow.

use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::camera::Camera;
use crate::depth::DepthPrior;
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::frame::Frame;
use crate::geometry::Pose;
use crate::map::{circular_mask, mask_cell, DenseMap};

/// Tolerances quoted as "% of scene diameter" use this unit.
pub const SCENE_DIAMETER: f64 = 1.0;

// Nominal distance from the camera plane to the surface.
const SURFACE_DEPTH: f64 = 0.35;
// Basis amplitude relative to the true depth.
const BASIS_GAIN: f64 = 0.1;
const FEATURE_SPACINGS: [f64; 4] = [0.04, 0.06, 0.09, 0.14];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryKind {
    Orbit,
    Sweep,
    Loop,
    RandomWalk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Full,
    Circular,
}

/// Standard deviations of the injected noise.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct NoiseConfig {
    /// Relative error of the average depth.
    pub depth_rel: f64,
    /// Per-pixel additive noise on features and descriptors.
    pub feature_abs: f64,
    /// Rotation (rad) and translation (scene units) noise of initial poses.
    pub pose_init: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub trajectory: TrajectoryKind,
    pub basis_count: usize,
    pub noise: NoiseConfig,
    pub mask: MaskKind,
    /// Surface height amplitude; zero gives a fronto-parallel plane.
    pub relief: f64,
    pub levels: usize,
    pub feature_channels: usize,
    pub descriptor_channels: usize,
    /// Multiplies the per-frame motion of sweep, orbit and random-walk paths.
    pub motion: f64,
    /// Replaces the generated trajectory; its length must equal `frames`.
    pub poses: Option<Vec<Pose>>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 80,
            frames: 30,
            trajectory: TrajectoryKind::Sweep,
            basis_count: 8,
            noise: NoiseConfig::default(),
            mask: MaskKind::Full,
            relief: 0.035,
            levels: 4,
            feature_channels: 16,
            descriptor_channels: 16,
            motion: 1.0,
            poses: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.frames == 0 {
            return err("frames must be positive");
        }
        if self.levels == 0 {
            return err("levels must be positive");
        }
        let div = 1usize << (self.levels - 1);
        if self.height < 2 * div
            || self.width < 2 * div
            || !self.height.is_multiple_of(div)
            || !self.width.is_multiple_of(div)
        {
            return Err(Error::Config(format!(
                "resolution {}x{} not divisible by {div}",
                self.height, self.width
            )));
        }
        let n = &self.noise;
        for v in [n.depth_rel, n.feature_abs, n.pose_init, self.relief, self.motion] {
            if !(v >= 0.0) || !v.is_finite() {
                return err("noise, relief and motion must be finite and non-negative");
            }
        }
        if n.depth_rel >= 0.5 {
            return err("depth_rel must be below 0.5");
        }
        if self.relief > 0.1 {
            return err("relief must not exceed 0.1");
        }
        if self.poses.as_ref().is_some_and(|p| p.len() != self.frames) {
            return err("explicit poses must match the frame count");
        }
        if self.feature_channels == 0 || self.descriptor_channels == 0 {
            return err("feature and descriptor channels must be positive");
        }
        Ok(())
    }

    pub fn camera(&self) -> Camera {
        let f = 0.5 * self.width as f64;
        Camera {
            fx: f,
            fy: f,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

/// Smooth random field over 3D points: cubic B-spline interpolation of a
/// lattice of uniform values.
struct NoiseLattice {
    origin: Vector3<f64>,
    spacing: f64,
    dims: [usize; 3],
    channels: usize,
    values: Vec<f64>,
}

impl NoiseLattice {
    fn new(rng: &mut ChaCha8Rng, channels: usize, spacing: f64) -> Self {
        let origin = Vector3::new(-1.5, -1.5, -0.5);
        let extent = Vector3::new(3.0, 3.0, 2.0);
        let dims = [0, 1, 2].map(|i| (extent[i] / spacing).ceil() as usize + 4);
        let n = dims[0] * dims[1] * dims[2] * channels;
        let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            origin,
            spacing,
            dims,
            channels,
            values,
        }
    }

    fn weights(t: f64) -> [f64; 4] {
        let t2 = t * t;
        let t3 = t2 * t;
        [
            (1.0 - t).powi(3) / 6.0,
            (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
            (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
            t3 / 6.0,
        ]
    }

    fn eval(&self, p: &Vector3<f64>, out: &mut [f64]) {
        out.fill(0.0);
        let mut base = [0usize; 3];
        let mut w = [[0.0; 4]; 3];
        for i in 0..3 {
            let g = ((p[i] - self.origin[i]) / self.spacing).clamp(1.0, (self.dims[i] - 3) as f64 - 1e-9);
            let g0 = g.floor();
            base[i] = g0 as usize - 1;
            w[i] = Self::weights(g - g0);
        }
        let [nx, ny, _] = self.dims;
        for (a, wa) in w[2].iter().enumerate() {
            for (b, wb) in w[1].iter().enumerate() {
                for (c, wc) in w[0].iter().enumerate() {
                    let cell = ((base[2] + a) * ny + base[1] + b) * nx + base[0] + c;
                    let k = wa * wb * wc;
                    let vals = &self.values[cell * self.channels..(cell + 1) * self.channels];
                    for (o, v) in out.iter_mut().zip(vals) {
                        *o += k * v;
                    }
                }
            }
        }
    }
}

/// Channels split across lattices of increasing spacing.
struct MultiScaleField {
    parts: Vec<NoiseLattice>,
}

impl MultiScaleField {
    fn new(rng: &mut ChaCha8Rng, channels: usize, spacings: &[f64]) -> Self {
        let k = spacings.len();
        let parts = spacings
            .iter()
            .enumerate()
            .map(|(i, &sp)| NoiseLattice::new(rng, channels / k + usize::from(i < channels % k), sp))
            .filter(|l| l.channels > 0)
            .collect();
        Self { parts }
    }

    fn eval(&self, p: &Vector3<f64>, out: &mut [f64]) {
        let mut o = 0;
        for l in &self.parts {
            l.eval(p, &mut out[o..o + l.channels]);
            o += l.channels;
        }
    }
}

/// Height field `z = SURFACE_DEPTH + relief * h(x, y)` with `|h| <= 1`.
struct Surface {
    relief: f64,
    waves: Vec<(Vector2<f64>, f64, f64)>,
}

impl Surface {
    fn new(rng: &mut ChaCha8Rng, relief: f64) -> Self {
        let k = 4;
        let waves = (0..k)
            .map(|_| {
                let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let freq: f64 = rng.random_range(4.0..12.0);
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                (Vector2::new(ang.cos(), ang.sin()) * freq, phase, 1.0 / k as f64)
            })
            .collect();
        Self { relief, waves }
    }

    fn height(&self, x: f64, y: f64) -> (f64, Vector2<f64>) {
        let mut h = SURFACE_DEPTH;
        let mut g = Vector2::zeros();
        for (w, ph, a) in &self.waves {
            let arg = w.x * x + w.y * y + ph;
            h += self.relief * a * arg.sin();
            g += w * (self.relief * a * arg.cos());
        }
        (h, g)
    }

    /// Camera-frame depth of the surface along the unit-z ray of a pixel.
    fn raycast(&self, pose: &Pose, ray: &Vector3<f64>) -> f64 {
        let c = pose.translation;
        let d = pose.rotation * ray;
        let mut t = (SURFACE_DEPTH - c.z) / d.z;
        for _ in 0..50 {
            let p = c + d * t;
            let (h, g) = self.height(p.x, p.y);
            let f = p.z - h;
            let df = d.z - g.x * d.x - g.y * d.y;
            let step = f / df;
            t -= step;
            if step.abs() < 1e-15 * t.abs().max(1.0) {
                break;
            }
        }
        t
    }
}

fn trajectory(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    use std::f64::consts::TAU;
    let n = cfg.frames;
    let m = cfg.motion;
    let mut out = Vec::with_capacity(n);
    match cfg.trajectory {
        TrajectoryKind::Loop => {
            // slightly more than one turn so the end revisits the start
            let r = 0.15;
            for i in 0..n {
                let th = 1.1 * TAU * i as f64 / n as f64;
                let t = Vector3::new(r * th.cos(), r * th.sin(), 0.02 * (2.0 * th).sin());
                let phi = Vector3::new(0.06 * th.sin(), -0.06 * th.cos(), 0.05 * th.sin());
                out.push(Pose::from_axis_angle(phi, t));
            }
        }
        TrajectoryKind::Sweep => {
            let step = 0.0103 * m;
            let half = 0.5 * step * (n as f64 - 1.0);
            for i in 0..n {
                let s = i as f64 * step - half;
                let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                let t = Vector3::new(s, 0.03 * (TAU * u).sin() * m, 0.02 * (0.5 * TAU * u).sin() * m);
                let phi = Vector3::new(0.05 * (TAU * u).sin(), 0.2 * s, 0.03 * (0.5 * TAU * u).sin()) * m.min(1.0);
                out.push(Pose::from_axis_angle(phi, t));
            }
        }
        TrajectoryKind::Orbit => {
            let step = 0.02 * m;
            let half = 0.5 * step * (n as f64 - 1.0);
            let centre = Vector3::new(0.0, 0.0, SURFACE_DEPTH);
            for i in 0..n {
                let a = i as f64 * step - half;
                let rot = Pose::from_axis_angle(Vector3::new(0.1 * a, a, 0.0), Vector3::zeros());
                let t = centre - rot.rotation * Vector3::new(0.0, 0.0, SURFACE_DEPTH);
                out.push(Pose::new(rot.rotation, t));
            }
        }
        TrajectoryKind::RandomWalk => {
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut t = Vector3::zeros();
            let mut phi = Vector3::zeros();
            let mut v = Vector3::zeros();
            let mut w = Vector3::zeros();
            for _ in 0..n {
                out.push(Pose::from_axis_angle(phi, t));
                let dv = Vector3::from_fn(|_, _| normal.sample(rng)) * 0.003 * m;
                let dw = Vector3::from_fn(|_, _| normal.sample(rng)) * 0.005 * m;
                v = v * 0.8 + dv - t * 0.05;
                v.z *= 0.3;
                w = w * 0.8 + dw - phi * 0.05;
                t += v;
                phi += w;
            }
        }
    }
    out
}

/// One generated frame with its ground truth.
#[derive(Clone, Debug)]
pub struct SimFrame {
    pub id: usize,
    /// Camera-to-world pose.
    pub gt_pose: Pose,
    /// Noisy pose guess; equals `gt_pose` for the first frame.
    pub init_pose: Pose,
    pub gt_depth: DenseMap,
    /// Prior with zero code and unit scale.
    pub prior: DepthPrior,
    /// Code and scale whose composed depth equals `gt_depth`.
    pub gt_code: DVector<f64>,
    pub gt_scale: f64,
    pub features: DenseMap,
    pub descriptors: DenseMap,
}

impl SimFrame {
    pub fn mask(&self) -> &[bool] {
        self.gt_depth.mask()
    }

    pub fn to_frame(&self, camera: Camera, levels: usize) -> Result<Frame> {
        Frame::new(
            self.id,
            camera,
            self.prior.clone(),
            self.features.clone(),
            self.descriptors.clone(),
            levels,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub config: SceneConfig,
    pub camera: Camera,
    pub frames: Vec<SimFrame>,
    /// Analytic flow from frame `i` to frame `i + 1`.
    pub flows: Vec<Flow>,
}

impl Sequence {
    pub fn frame(&self, i: usize) -> Result<Frame> {
        self.frames[i].to_frame(self.camera, self.config.levels)
    }

    pub fn gt_poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.gt_pose).collect()
    }
}

fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Generates a sequence; identical configurations give identical sequences.
pub fn generate_sequence(cfg: &SceneConfig) -> Result<Sequence> {
    cfg.validate()?;
    let camera = cfg.camera();
    let (h, w) = (cfg.height, cfg.width);
    let mut scene_rng = frame_rng(cfg.seed, 0);
    let surface = Surface::new(&mut scene_rng, cfg.relief);
    let features = MultiScaleField::new(&mut scene_rng, cfg.feature_channels, &FEATURE_SPACINGS);
    let descriptors = NoiseLattice::new(&mut scene_rng, cfg.descriptor_channels, 0.05);
    let poses = match &cfg.poses {
        Some(p) => p.clone(),
        None => trajectory(cfg, &mut frame_rng(cfg.seed, 1)),
    };
    let mask = match cfg.mask {
        MaskKind::Full => vec![true; h * w],
        MaskKind::Circular => circular_mask(h, w, 1.0),
    };
    let mut frames = Vec::with_capacity(cfg.frames);
    for (i, pose) in poses.iter().enumerate() {
        let mut rng = frame_rng(cfg.seed, 2 + i as u64);
        frames.push(render_frame(
            cfg,
            &camera,
            i,
            pose,
            &mask,
            &surface,
            &features,
            &descriptors,
            &mut rng,
        )?);
    }
    let flows = frames
        .windows(2)
        .map(|p| analytic_flow(&camera, &p[0], &p[1]))
        .collect();
    Ok(Sequence {
        config: cfg.clone(),
        camera,
        frames,
        flows,
    })
}

#[allow(clippy::too_many_arguments)]
fn render_frame(
    cfg: &SceneConfig,
    camera: &Camera,
    id: usize,
    pose: &Pose,
    mask: &[bool],
    surface: &Surface,
    feat: &MultiScaleField,
    desc: &NoiseLattice,
    rng: &mut ChaCha8Rng,
) -> Result<SimFrame> {
    let (h, w) = (cfg.height, cfg.width);
    let b = cfg.basis_count;
    let n = h * w;
    let mut depth = vec![0.0; n];
    let mut fdata = vec![0.0; cfg.feature_channels * n];
    let mut ddata = vec![0.0; cfg.descriptor_channels * n];
    let mut fbuf = vec![0.0; cfg.feature_channels];
    let mut dbuf = vec![0.0; cfg.descriptor_channels];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ray = camera.ray(x as f64, y as f64);
            let z = surface.raycast(pose, &ray);
            depth[i] = z;
            let p = pose.transform_point(&(ray * z));
            feat.eval(&p, &mut fbuf);
            desc.eval(&p, &mut dbuf);
            for (c, v) in fbuf.iter().enumerate() {
                fdata[c * n + i] = (2.5 * v).tanh();
            }
            for (c, v) in dbuf.iter().enumerate() {
                ddata[c * n + i] = (2.5 * v).tanh();
            }
        }
    }
    if cfg.noise.feature_abs > 0.0 {
        let s = cfg.noise.feature_abs;
        for v in fdata.iter_mut().chain(ddata.iter_mut()) {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }
    // smooth basis shapes over the image plane
    let mut shapes = vec![0.0; b * n];
    for j in 0..b {
        let kx = rng.random_range(0..3) as f64;
        let ky = rng.random_range(0..3) as f64;
        let ph: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let arg = std::f64::consts::TAU * (kx * x as f64 / w as f64 + ky * y as f64 / h as f64) + ph;
                shapes[j * n + y * w + x] = arg.cos();
            }
        }
    }
    let a: Vec<f64> = (0..b).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let k = cfg.noise.depth_rel / (b.max(1) as f64).sqrt();
    let mut avg = vec![0.0; n];
    let mut bases = vec![0.0; b * n];
    for i in 0..n {
        let mut e = 0.0;
        for j in 0..b {
            e += a[j] * shapes[j * n + i];
            bases[j * n + i] = BASIS_GAIN * depth[i] * shapes[j * n + i];
        }
        avg[i] = depth[i] * (1.0 + k * e);
    }
    let gt_code = DVector::from_iterator(b, a.iter().map(|aj| -k * aj / BASIS_GAIN));
    let gt_depth = DenseMap::new(1, h, w, depth, mask.to_vec())?;
    let prior = DepthPrior::new(
        DenseMap::new(1, h, w, avg, mask.to_vec())?,
        DenseMap::new(b, h, w, bases, mask.to_vec())?,
        DVector::zeros(b),
        1.0,
    )?;
    let init_pose = if id == 0 || cfg.noise.pose_init == 0.0 {
        *pose
    } else {
        let s = cfg.noise.pose_init;
        let mut xi = nalgebra::Vector6::zeros();
        for v in xi.iter_mut() {
            *v = s * rng.sample::<f64, _>(StandardNormal);
        }
        pose.retract(&xi)
    };
    Ok(SimFrame {
        id,
        gt_pose: *pose,
        init_pose,
        gt_depth,
        prior,
        gt_code,
        gt_scale: 1.0,
        features: DenseMap::new(cfg.feature_channels, h, w, fdata, mask.to_vec())?,
        descriptors: DenseMap::new(cfg.descriptor_channels, h, w, ddata, mask.to_vec())?,
    })
}

/// Exact flow from `a` to `b` using the true depth of `a` and the true
/// relative pose; `omega` marks pixels whose projection has a full valid
/// neighbourhood in the mask of `b`.
pub fn analytic_flow(camera: &Camera, a: &SimFrame, b: &SimFrame) -> Flow {
    let (h, w) = (camera.height, camera.width);
    let n = h * w;
    let rot = b.gt_pose.rotation.transpose() * a.gt_pose.rotation;
    let trans = b.gt_pose.rotation.transpose() * (a.gt_pose.translation - b.gt_pose.translation);
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut omega = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !a.mask()[i] {
                continue;
            }
            let z = a.gt_depth.at_index(0, i);
            let p = Vector3::new(
                (x as f64 - camera.cx) / camera.fx * z,
                (y as f64 - camera.cy) / camera.fy * z,
                z,
            );
            let q = rot * p + trans;
            if q.z <= 0.0 {
                continue;
            }
            let qx = camera.fx * q.x / q.z + camera.cx;
            let qy = camera.fy * q.y / q.z + camera.cy;
            if mask_cell(b.mask(), h, w, qx, qy).is_some() {
                u[i] = qx - x as f64;
                v[i] = qy - y as f64;
                omega[i] = true;
            }
        }
    }
    Flow {
        height: h,
        width: w,
        u,
        v,
        omega,
    }
}
