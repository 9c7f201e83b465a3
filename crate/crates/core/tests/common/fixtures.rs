//! Random frames, states and matches.

use std::sync::Arc;

use fgslam::factors::{GraphState, SlotState};
use fgslam::map::circular_mask;
use fgslam::{Camera, DenseMap, DepthPrior, Frame, Pose};
use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn camera(h: usize, w: usize) -> Camera {
    let f = 0.5 * w as f64;
    Camera::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap()
}

/// Raw inputs of a frame. Oracles read these directly instead of the
/// derived data held by [`Frame`].
#[derive(Clone, Debug)]
pub struct FrameData {
    pub cam: Camera,
    pub avg: DenseMap,
    pub bases: DenseMap,
    pub feat: DenseMap,
    pub levels: usize,
}

impl FrameData {
    pub fn h(&self) -> usize {
        self.cam.height
    }
    pub fn w(&self) -> usize {
        self.cam.width
    }
    pub fn b(&self) -> usize {
        self.bases.channels()
    }
    pub fn mask(&self) -> &[bool] {
        self.avg.mask()
    }

    pub fn frame(&self, id: usize) -> Arc<Frame> {
        let prior = DepthPrior::new(self.avg.clone(), self.bases.clone(), DVector::zeros(self.b()), 1.0).unwrap();
        let desc = DenseMap::filled(1, self.h(), self.w(), 0.0);
        Arc::new(Frame::new(id, self.cam, prior, self.feat.clone(), desc, self.levels).unwrap())
    }

    /// Composed depth at a full-resolution pixel, unclamped.
    pub fn depth(&self, x: usize, y: usize, s: f64, c: &[f64]) -> f64 {
        let mut d = self.avg.get(0, y, x);
        for (j, cj) in c.iter().enumerate() {
            d += cj * self.bases.get(j, y, x);
        }
        s * d
    }
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, valid: f64) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < valid).collect();
    m[n / 2] = true;
    m
}

/// Independent random values everywhere, for the oracle comparisons.
pub fn random_frame(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    levels: usize,
    b: usize,
    c: usize,
    valid: f64,
) -> FrameData {
    let mask = random_mask(rng, h * w, valid);
    let avg = DenseMap::from_fn(1, h, w, |_, _, _| rng.random_range(0.8..1.2));
    let bases = DenseMap::from_fn(b, h, w, |_, _, _| rng.random_range(-0.3..0.3));
    let feat = DenseMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0));
    FrameData {
        cam: camera(h, w),
        avg: avg.with_mask(mask.clone()).unwrap(),
        bases: bases.with_mask(mask).unwrap(),
        feat,
        levels,
    }
}

/// `a + b x + c y + d x y` in coordinates normalized by the image size.
/// Bilinear interpolation and the symmetric pyramid kernel both reproduce
/// such a field exactly, so costs built on it are smooth.
fn bilinear_field(
    rng: &mut ChaCha8Rng,
    channels: usize,
    h: usize,
    w: usize,
    offset: f64,
    a: f64,
    slope: f64,
) -> DenseMap {
    let coef: Vec<[f64; 4]> = (0..channels)
        .map(|_| {
            [
                offset + rng.random_range(-a..a),
                rng.random_range(-slope..slope),
                rng.random_range(-slope..slope),
                rng.random_range(-slope..slope),
            ]
        })
        .collect();
    DenseMap::from_fn(channels, h, w, |ch, y, x| {
        let (xn, yn) = (x as f64 / w as f64, y as f64 / h as f64);
        let k = coef[ch];
        k[0] + k[1] * xn + k[2] * yn + k[3] * xn * yn
    })
}

/// Smooth frame for finite differences. `radius` is the circular mask radius
/// as a fraction of the half-size; `None` gives a full mask.
pub fn smooth_frame(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    levels: usize,
    b: usize,
    c: usize,
    radius: Option<f64>,
) -> FrameData {
    let mask = match radius {
        Some(r) => circular_mask(h, w, r),
        None => vec![true; h * w],
    };
    let avg = bilinear_field(rng, 1, h, w, 1.0, 0.1, 0.2);
    let bases = bilinear_field(rng, b, h, w, 0.0, 0.15, 0.15);
    let feat = bilinear_field(rng, c, h, w, 0.0, 0.5, 2.0);
    FrameData {
        cam: camera(h, w),
        avg: avg.with_mask(mask.clone()).unwrap(),
        bases: bases.with_mask(mask).unwrap(),
        feat,
        levels,
    }
}

pub fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
    let mut v = || {
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    };
    let phi = v() * rot;
    let t = v() * trans;
    Pose::from_axis_angle(phi, t)
}

pub fn random_code(rng: &mut ChaCha8Rng, b: usize, amp: f64) -> DVector<f64> {
    DVector::from_fn(b, |_, _| rng.random_range(-amp..amp))
}

/// Two slots, source first, whose relative pose `T_tgt^-1 T_src` is `rel`.
pub fn pair_state(rel: &Pose, world: &Pose, src: (f64, DVector<f64>), tgt: (f64, DVector<f64>)) -> GraphState {
    let src_pose = *world;
    let tgt_pose = src_pose * rel.inverse();
    GraphState::new(vec![
        SlotState::new(src_pose, src.0, src.1),
        SlotState::new(tgt_pose, tgt.0, tgt.1),
    ])
}

/// Matches from source mask pixels, jittered within their pixel, to the
/// projection of the composed source depth under `rel` plus pixel noise.
pub fn matches(
    rng: &mut ChaCha8Rng,
    src: &FrameData,
    rel: &Pose,
    s: f64,
    c: &[f64],
    n: usize,
    noise: f64,
) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    let idx: Vec<usize> = (0..src.mask().len()).filter(|&i| src.mask()[i]).collect();
    let cam = src.cam;
    (0..n)
        .map(|_| {
            let i = idx[rng.random_range(0..idx.len())];
            let (x, y) = (i % src.w(), i / src.w());
            let d = src.depth(x, y, s, c);
            let p = rel.transform_point(&(cam.ray(x as f64, y as f64) * d));
            let q = cam.project_unchecked(&p);
            let xs = Vector2::new(
                x as f64 + rng.random_range(-0.3..0.3),
                y as f64 + rng.random_range(-0.3..0.3),
            );
            let xt = q + Vector2::new(rng.random_range(-noise..noise), rng.random_range(-noise..noise));
            (xs, xt)
        })
        .collect()
}
