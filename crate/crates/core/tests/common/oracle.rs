//! Straightforward reference implementations, written from the definitions
//! and sharing no code with the library beyond plain data access.

use fgslam::{DenseMap, Pose};
use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

use super::fixtures::FrameData;

const FLOOR: f64 = 1e-4;
const MIN_Z: f64 = 1e-6;

/// Plain multi-channel grid with a validity mask.
#[derive(Clone, Debug)]
pub struct Grid {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
    pub m: Vec<bool>,
}

impl Grid {
    pub fn from_map(map: &DenseMap, mask: &[bool]) -> Grid {
        let (c, h, w) = (map.channels(), map.height(), map.width());
        let mut v = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    v.push(map.get(ch, y, x));
                }
            }
        }
        Grid {
            c,
            h,
            w,
            v,
            m: mask.to_vec(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn valid(&self, y: usize, x: usize) -> bool {
        self.m[y * self.w + x]
    }

    /// Bilinear value, or `None` unless all four neighbours are valid.
    /// Coordinates within 1e-9 of the image edge count as on the edge.
    pub fn bilinear(&self, c: usize, u: f64, v: f64) -> Option<f64> {
        let x0 = corner(u, self.w)?;
        let y0 = corner(v, self.h)?;
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            if !self.valid(y0 + dy, x0 + dx) {
                return None;
            }
        }
        let (a, b) = (u - x0 as f64, v - y0 as f64);
        Some(
            self.at(c, y0, x0) * (1.0 - a) * (1.0 - b)
                + self.at(c, y0, x0 + 1) * a * (1.0 - b)
                + self.at(c, y0 + 1, x0) * (1.0 - a) * b
                + self.at(c, y0 + 1, x0 + 1) * a * b,
        )
    }

    /// Every `2^l`-th sample.
    pub fn subsample(&self, l: usize) -> Grid {
        let s = 1 << l;
        let (h, w) = (self.h / s, self.w / s);
        let mut v = Vec::new();
        for c in 0..self.c {
            for y in 0..h {
                for x in 0..w {
                    v.push(self.at(c, y * s, x * s));
                }
            }
        }
        let m = (0..h * w).map(|i| self.valid((i / w) * s, (i % w) * s)).collect();
        Grid { c: self.c, h, w, v, m }
    }

    /// One 5x5, sigma 1 Gaussian smoothing and 2x decimation step; coarse
    /// pixels need every tap inside the image and valid.
    pub fn reduce(&self) -> Grid {
        let k: Vec<f64> = (-2i32..=2).map(|d| (-(d * d) as f64 / 2.0).exp()).collect();
        let ksum: f64 = k.iter().sum::<f64>().powi(2);
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = vec![0.0; self.c * h * w];
        let mut m = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let ok = (-2i64..=2).all(|dy| {
                    (-2i64..=2).all(|dx| {
                        let (yy, xx) = (2 * y as i64 + dy, 2 * x as i64 + dx);
                        yy >= 0
                            && xx >= 0
                            && yy < self.h as i64
                            && xx < self.w as i64
                            && self.valid(yy as usize, xx as usize)
                    })
                });
                if !ok {
                    continue;
                }
                m[y * w + x] = true;
                for c in 0..self.c {
                    let mut acc = 0.0;
                    for dy in 0..5 {
                        for dx in 0..5 {
                            acc += k[dy] * k[dx] * self.at(c, 2 * y + dy - 2, 2 * x + dx - 2);
                        }
                    }
                    v[(c * h + y) * w + x] = acc / ksum;
                }
            }
        }
        Grid { c: self.c, h, w, v, m }
    }
}

fn corner(t: f64, n: usize) -> Option<usize> {
    if n < 2 || !(t >= -1e-9 && t <= (n - 1) as f64 + 1e-9) {
        return None;
    }
    Some((t.floor().max(0.0) as usize).min(n - 2))
}

pub fn fair(a: f64, b: f64) -> f64 {
    let r = (a / b).sqrt();
    2.0 * (r - (1.0 + r).ln())
}

pub fn cauchy(a: f64, b: f64) -> f64 {
    (1.0 + a / b).ln()
}

fn mean_avg(f: &FrameData) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for y in 0..f.h() {
        for x in 0..f.w() {
            if f.mask()[y * f.w() + x] {
                s += f.avg.get(0, y, x);
                n += 1.0;
            }
        }
    }
    s / n
}

struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl Intrinsics {
    fn of(f: &FrameData, l: usize) -> Self {
        let s = (1u32 << l) as f64;
        Self {
            fx: f.cam.fx / s,
            fy: f.cam.fy / s,
            cx: f.cam.cx / s,
            cy: f.cam.cy / s,
        }
    }
    fn lift(&self, x: f64, y: f64, d: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx * d, (y - self.cy) / self.fy * d, d)
    }
    fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Composed target depth interpolated at a sub-pixel location.
fn tgt_depth(avg: &Grid, bases: &Grid, u: f64, v: f64, s: f64, c: &[f64]) -> Option<f64> {
    let mut d = avg.bilinear(0, u, v)?;
    for (j, cj) in c.iter().enumerate() {
        d += cj * bases.bilinear(j, u, v)?;
    }
    Some((s * d).max(FLOOR))
}

fn grids(f: &FrameData) -> (Grid, Grid) {
    (Grid::from_map(&f.avg, f.mask()), Grid::from_map(&f.bases, f.mask()))
}

/// Multi-level feature-metric objective; `None` when no level has a sample.
pub fn fm(src: &FrameData, tgt: &FrameData, rel: &Pose, s: f64, c: &[f64], lw: &[f64]) -> Option<f64> {
    let nl = lw.len();
    let mut sp = vec![Grid::from_map(&src.feat, src.mask())];
    let mut tp = vec![Grid::from_map(&tgt.feat, tgt.mask())];
    for l in 1..nl {
        sp.push(sp[l - 1].reduce());
        tp.push(tp[l - 1].reduce());
    }
    let (avg, bases) = grids(src);
    let (r, t) = (rel.rotation, rel.translation);
    let mut total = 0.0;
    let mut any = false;
    for l in 0..nl {
        let (a, b) = (avg.subsample(l), bases.subsample(l));
        let k = Intrinsics::of(src, l);
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..a.h {
            for x in 0..a.w {
                if !(sp[l].valid(y, x) && a.valid(y, x)) {
                    continue;
                }
                let mut d = a.at(0, y, x);
                for (j, cj) in c.iter().enumerate() {
                    d += cj * b.at(j, y, x);
                }
                let p = r * k.lift(x as f64, y as f64, (s * d).max(FLOOR)) + t;
                if p.z <= MIN_Z {
                    continue;
                }
                let (u, v) = k.project(&p);
                let mut e = 0.0;
                let mut ok = true;
                for ch in 0..sp[l].c {
                    match tp[l].bilinear(ch, u, v) {
                        Some(f) => e += (f - sp[l].at(ch, y, x)).powi(2),
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    sum += e;
                    n += 1;
                }
            }
        }
        if n > 0 {
            total += lw[l] / (nl as f64 * n as f64) * sum;
            any = true;
        }
    }
    any.then_some(total)
}

/// Mean Fair-robust 3D distance of matched points.
#[allow(clippy::too_many_arguments)]
pub fn smg(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    src: &FrameData,
    tgt: &FrameData,
    rel: &Pose,
    s: f64,
    c: &[f64],
    st: f64,
    ct: &[f64],
    sigma: f64,
) -> f64 {
    let bound = sigma * mean_avg(src);
    let (ta, tb) = grids(tgt);
    let k = Intrinsics::of(src, 0);
    let (w, h) = (src.w() as f64, src.h() as f64);
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in matches {
        if !(a.x >= -0.5 && a.y >= -0.5 && a.x < w - 0.5 && a.y < h - 0.5) {
            continue;
        }
        let (x, y) = (a.x.round() as usize, a.y.round() as usize);
        if !src.mask()[y * src.w() + x] {
            continue;
        }
        let Some(dt) = tgt_depth(&ta, &tb, b.x, b.y, st, ct) else {
            continue;
        };
        let p = rel.rotation * k.lift(x as f64, y as f64, src.depth(x, y, s, c).max(FLOOR)) + rel.translation;
        let q = k.lift(b.x, b.y, dt);
        sum += fair((p - q).norm_squared(), bound);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean Fair-robust reprojection error; samples behind the target camera
/// still count in the mean.
pub fn rp(matches: &[(Vector2<f64>, Vector2<f64>)], src: &FrameData, rel: &Pose, s: f64, c: &[f64], sigma: f64) -> f64 {
    let bound = sigma * (src.w() * src.w()) as f64;
    let k = Intrinsics::of(src, 0);
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in matches {
        let (x, y) = (a.x.round() as usize, a.y.round() as usize);
        if !src.mask()[y * src.w() + x] {
            continue;
        }
        n += 1;
        let p = rel.rotation * k.lift(x as f64, y as f64, src.depth(x, y, s, c).max(FLOOR)) + rel.translation;
        if p.z <= MIN_Z {
            continue;
        }
        let (u, v) = k.project(&p);
        sum += fair((u - b.x).powi(2) + (v - b.y).powi(2), bound);
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean Cauchy-robust depth disagreement over every source mask pixel.
#[allow(clippy::too_many_arguments)]
pub fn gc(
    src: &FrameData,
    tgt: &FrameData,
    rel: &Pose,
    s: f64,
    c: &[f64],
    st: f64,
    ct: &[f64],
    sigma: f64,
) -> Option<f64> {
    let bound = sigma * mean_avg(src);
    let (ta, tb) = grids(tgt);
    let k = Intrinsics::of(src, 0);
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..src.h() {
        for x in 0..src.w() {
            if !src.mask()[y * src.w() + x] {
                continue;
            }
            let p = rel.rotation * k.lift(x as f64, y as f64, src.depth(x, y, s, c).max(FLOOR)) + rel.translation;
            if p.z <= MIN_Z {
                continue;
            }
            let (u, v) = k.project(&p);
            let Some(dt) = tgt_depth(&ta, &tb, u, v, st, ct) else {
                continue;
            };
            sum += cauchy((p.z - dt).powi(2), bound);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Scale-invariant loss as half the mean squared pairwise log-ratio difference.
pub fn scale_invariant(est: &[f64], gt: &[f64], mask: &[bool], eps: f64) -> f64 {
    let r: Vec<f64> = (0..est.len())
        .filter(|&i| mask[i])
        .map(|i| (est[i] + eps).ln() - (gt[i] + eps).ln())
        .collect();
    let n = r.len() as f64;
    let mut s = 0.0;
    for a in &r {
        for b in &r {
            s += (a - b) * (a - b);
        }
    }
    s / (2.0 * n * n)
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

pub fn histogram(values: &[f64], mask: &[bool], k: usize, beta: f64) -> Vec<f64> {
    let kf = k as f64;
    let n = mask.iter().filter(|&&m| m).count() as f64;
    (0..k)
        .map(|i| {
            let mu = -1.0 + (2.0 * i as f64 + 1.0) / kf;
            let mut s = 0.0;
            for (v, &m) in values.iter().zip(mask) {
                if m {
                    s += sigmoid((v - mu + 1.0 / kf) / beta) - sigmoid((v - mu - 1.0 / kf) / beta);
                }
            }
            s / n
        })
        .collect()
}

pub fn emd(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..a.len() {
        let mut d = 0.0;
        for j in 0..=k {
            d += a[j] - b[j];
        }
        total += d * d;
    }
    total
}

pub fn triplet(src: &DenseMap, tgt: &DenseMap, far: &DenseMap, k: usize, beta: f64, margin: f64) -> f64 {
    let c = src.channels();
    let mut total = 0.0;
    for ch in 0..c {
        let hs = histogram(src.channel(ch), src.mask(), k, beta);
        let ht = histogram(tgt.channel(ch), tgt.mask(), k, beta);
        let hf = histogram(far.channel(ch), far.mask(), k, beta);
        let x = emd(&hs, &ht) / k as f64 - emd(&hs, &hf) / k as f64 + margin;
        total += if x > 0.0 { x } else { 0.0 };
    }
    total / c as f64
}

#[allow(clippy::needless_range_loop)]
pub fn flow(gt: (&[f64], &[f64]), est: (&[f64], &[f64]), mask: &[bool]) -> f64 {
    let (mut num, mut norm, mut n) = (0.0, 0.0, 0.0);
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        num += (gt.0[i] - est.0[i]).powi(2) + (gt.1[i] - est.1[i]).powi(2);
        norm += gt.0[i].powi(2) + gt.1[i].powi(2) + est.0[i].powi(2) + est.1[i].powi(2);
        n += 1.0;
    }
    let omega = norm / 2.0;
    if omega == 0.0 {
        0.0
    } else {
        num / (omega * n)
    }
}

fn mat(p: &Pose) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&p.rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.translation);
    m
}

/// Rotation angle in degrees from the skew part and the trace.
pub fn angle_deg(r: &Matrix3<f64>) -> f64 {
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    let c = (r.trace() - 1.0) / 2.0;
    s.atan2(c).to_degrees()
}

fn rmse(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// `(rot deg, trans)` RMSE of already aligned poses.
pub fn ate(est: &[Pose], gt: &[Pose]) -> (f64, f64) {
    let mut rot = Vec::new();
    let mut tr = Vec::new();
    for (e, g) in est.iter().zip(gt) {
        let r = g.rotation * e.rotation.transpose();
        rot.push(angle_deg(&r));
        tr.push((g.translation - r * e.translation).norm());
    }
    (rmse(&rot), rmse(&tr))
}

pub fn rpe(est: &[Pose], gt: &[Pose], delta: usize) -> (f64, f64) {
    let mut rot = Vec::new();
    let mut tr = Vec::new();
    for i in 0..est.len() - delta {
        let dg = mat(&gt[i]).try_inverse().unwrap() * mat(&gt[i + delta]);
        let de = mat(&est[i]).try_inverse().unwrap() * mat(&est[i + delta]);
        let d = dg.try_inverse().unwrap() * de;
        rot.push(angle_deg(&d.fixed_view::<3, 3>(0, 0).into_owned()));
        tr.push(d.fixed_view::<3, 1>(0, 3).norm());
    }
    (rmse(&rot), rmse(&tr))
}

/// Least-squares similarity `(s, R, t)` mapping `src` onto `dst`.
pub fn similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let ms: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let md: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut sigma = Matrix3::zeros();
    let mut var = 0.0;
    for (a, b) in src.iter().zip(dst) {
        sigma += (b - md) * (a - ms).transpose() / n;
        var += (a - ms).norm_squared() / n;
    }
    let svd = sigma.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sgn = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        sgn[(2, 2)] = -1.0;
    }
    let r = u * sgn * vt;
    let s = (Matrix3::from_diagonal(&svd.singular_values) * sgn).trace() / var;
    (s, r, md - s * r * ms)
}

/// `(ARD, thresholds)` averaged over frames; `scale = None` selects per-frame median scaling.
pub fn depth(est: &[DenseMap], gt: &[DenseMap], scale: Option<f64>, thetas: &[f64]) -> (f64, Vec<f64>) {
    let mut ard = 0.0;
    let mut th = vec![0.0; thetas.len()];
    let mut frames = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let mut pairs = Vec::new();
        for y in 0..g.height() {
            for x in 0..g.width() {
                let (de, dg) = (e.get(0, y, x), g.get(0, y, x));
                if e.is_valid(y, x) && g.is_valid(y, x) && de > 0.0 && dg > 0.0 {
                    pairs.push((de, dg));
                }
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let s = scale.unwrap_or_else(|| {
            let mut r: Vec<f64> = pairs.iter().map(|(de, dg)| dg / de).collect();
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = r.len();
            if m % 2 == 1 {
                r[m / 2]
            } else {
                (r[m / 2 - 1] + r[m / 2]) / 2.0
            }
        });
        let n = pairs.len() as f64;
        ard += pairs.iter().map(|(de, dg)| (s * de - dg).abs() / dg).sum::<f64>() / n;
        for (acc, &t) in th.iter_mut().zip(thetas) {
            let hits = pairs
                .iter()
                .filter(|(de, dg)| f64::max(s * de / dg, dg / (s * de)) < t)
                .count();
            *acc += hits as f64 / n;
        }
        frames += 1.0;
    }
    (ard / frames, th.iter().map(|t| t / frames).collect())
}
