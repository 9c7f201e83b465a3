use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::cli::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{ate, depth_metrics, rpe, sync_and_align, DepthScaling, Trajectory};
use crate::io::{self, read_sequence, write_sequence};
use crate::map::DenseMap;
use crate::sim::generate_sequence;
use crate::slam::{Pipeline, PipelineStats};

pub const CONFIG_FILE: &str = "config.txt";
/// Keyframe poses, the trajectory that is evaluated.
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
/// Poses of every tracked frame.
pub const FRAMES_FILE: &str = "frames.txt";
pub const DEPTH_DIR: &str = "depths";
pub const GRAPH_FILE: &str = "graph.txt";
pub const LOG_FILE: &str = "run.log";
pub const TIMING_FILE: &str = "timing.txt";
pub const METRICS_FILE: &str = "metrics.txt";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_threads<T: Send>(deterministic: bool, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if !deterministic {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(f)
}

/// Generates a synthetic sequence and writes it, with the config echo, to `out`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let seq = generate_sequence(&cfg.scene)?;
    write_sequence(out, &seq)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())
}

/// Depth file name of the keyframe built from frame `id`.
pub fn depth_file(id: usize) -> String {
    format!("frame_{id:05}.sgdm")
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub stats: PipelineStats,
    /// Keyframe poses.
    pub trajectory: Trajectory,
    /// Every tracked frame.
    pub frames: Trajectory,
    pub seconds: f64,
}

/// Runs the pipeline over a stored sequence. Writes the keyframe and frame
/// trajectories, one depth map per keyframe, the keyframe graph, a log with the config echo and the
/// wall-clock timing.
pub fn cmd_run(seq_dir: &Path, cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let seq = read_sequence(seq_dir)?;
    let start = Instant::now();
    let pipeline = with_threads(cfg.deterministic, || {
        let mut p = Pipeline::new(cfg.slam.clone())?;
        for i in 0..seq.frames.len() {
            let frame = seq.frame(i)?;
            let hint = seq.init.as_ref().and_then(|t| t.get(frame.id).copied());
            p.process(frame, hint)?;
        }
        p.finish()?;
        Ok(p)
    })?;
    let seconds = start.elapsed().as_secs_f64();

    io::create_dir(&out.join(DEPTH_DIR))?;
    let trajectory = keyframe_trajectory(&pipeline)?;
    let frames = pipeline.trajectory();
    io::write_trajectory(&out.join(TRAJECTORY_FILE), &trajectory)?;
    io::write_trajectory(&out.join(FRAMES_FILE), &frames)?;
    for (id, depth) in pipeline.keyframe_depths() {
        io::write_map(&out.join(DEPTH_DIR).join(depth_file(id)), &depth)?;
    }
    write_text(&out.join(GRAPH_FILE), &graph_dump(&pipeline))?;

    let stats = pipeline.stats();
    let mut log = String::from("# config\n");
    log.push_str(&cfg.to_text());
    log.push_str("# events\n");
    for e in pipeline.events() {
        log.push_str(e);
        log.push('\n');
    }
    log.push_str("# stats\n");
    let _ = writeln!(log, "frames = {}", stats.frames);
    let _ = writeln!(log, "keyframes = {}", stats.keyframes);
    let _ = writeln!(log, "lost = {}", stats.lost);
    let _ = writeln!(log, "local_loops = {}", stats.local_loops);
    let _ = writeln!(log, "global_loops = {}", stats.global_loops);
    let _ = writeln!(log, "rejected_closures = {}", stats.rejected_closures);
    let _ = writeln!(log, "mapping_rounds = {}", stats.mapping_rounds);
    write_text(&out.join(LOG_FILE), &log)?;
    write_text(
        &out.join(TIMING_FILE),
        &format!(
            "seconds = {seconds:.3}\nframes_per_second = {:.3}\n",
            stats.frames as f64 / seconds.max(1e-9)
        ),
    )?;
    Ok(RunSummary {
        stats,
        trajectory,
        frames,
        seconds,
    })
}

fn keyframe_trajectory(p: &Pipeline) -> Result<Trajectory> {
    let g = p.graph();
    Trajectory::new((0..g.len()).map(|i| (g.keyframe(i).frame.id, g.pose(i))).collect())
}

fn graph_dump(p: &Pipeline) -> String {
    let g = p.graph();
    let mut s = String::from("# keyframe index frame_id log_scale tx ty tz qx qy qz qw\n");
    for i in 0..g.len() {
        let pose = g.pose(i);
        let t = pose.translation;
        let q = pose.quaternion();
        let _ = writeln!(
            s,
            "keyframe {i} {} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
            g.keyframe(i).frame.id,
            g.state().slots[i].log_scale,
            t.x,
            t.y,
            t.z,
            q[0],
            q[1],
            q[2],
            q[3]
        );
    }
    s.push_str("# connection src tgt kind\n");
    for c in g.connections() {
        let _ = writeln!(s, "connection {} {} {}", c.src, c.tgt, c.kind.as_str());
    }
    s
}

/// Metric name and value pairs in report order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == key).map(|e| e.1)
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_table(&self) -> String {
        let w = self.entries.iter().map(|e| e.0.len()).max().unwrap_or(0);
        self.entries.iter().map(|(k, v)| format!("{k:<w$}  {v:.6}\n")).collect()
    }
}

/// Trajectory and depth metrics. Every estimated id must exist in the
/// reference; depths are compared under the trajectory alignment scale and
/// under per-frame median scaling.
pub fn evaluate(
    est: &Trajectory,
    gt: &Trajectory,
    est_depths: &[(usize, DenseMap)],
    gt_depths: &[(usize, DenseMap)],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    if let Some((id, _)) = est.entries().iter().find(|(id, _)| gt.get(*id).is_none()) {
        return Err(Error::Config(format!("estimated frame {id} has no reference pose")));
    }
    let a = sync_and_align(est, gt)?;
    let ate = ate(&a.est, &a.gt)?;
    let rpe = rpe(&a.est, &a.gt, cfg.rpe_interval)?;
    let mut e = Vec::new();
    let mut g = Vec::new();
    for (id, d) in est_depths {
        let r = gt_depths
            .iter()
            .find(|x| x.0 == *id)
            .ok_or_else(|| Error::Config(format!("estimated depth {id} has no reference depth")))?;
        e.push(d.clone());
        g.push(r.1.clone());
    }
    let traj = depth_metrics(&e, &g, DepthScaling::Trajectory(a.transform.scale), &cfg.thresholds)?;
    let frame = depth_metrics(&e, &g, DepthScaling::Median, &cfg.thresholds)?;
    let mut entries = vec![
        ("ate_trans".to_string(), ate.trans),
        ("ate_rot".to_string(), ate.rot),
        ("rpe_trans".to_string(), rpe.trans),
        ("rpe_rot".to_string(), rpe.rot),
        ("ard_traj".to_string(), traj.ard),
        ("ard_frame".to_string(), frame.ard),
    ];
    for (&(t, ft), &(_, ff)) in traj.thresholds.iter().zip(&frame.thresholds) {
        entries.push((format!("thresh_traj_{t}"), ft));
        entries.push((format!("thresh_frame_{t}"), ff));
    }
    Ok(EvalReport { entries })
}

/// Reads the depth maps written by [`cmd_run`], sorted by frame id.
pub fn read_depths(dir: &Path) -> Result<Vec<(usize, DenseMap)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some(id) = name
            .strip_prefix("frame_")
            .and_then(|n| n.strip_suffix(".sgdm"))
            .and_then(|n| n.parse().ok())
        else {
            continue;
        };
        out.push((id, io::read_map(&path)?));
    }
    out.sort_by_key(|e| e.0);
    Ok(out)
}

/// Evaluates a run directory against the sequence it was run on and writes
/// the report to the run directory.
pub fn cmd_eval(run_dir: &Path, seq_dir: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let est = io::read_trajectory(&run_dir.join(TRAJECTORY_FILE))?;
    let seq = read_sequence(seq_dir)?;
    let gt = seq
        .gt
        .clone()
        .ok_or_else(|| Error::format(seq_dir, "sequence has no ground-truth trajectory"))?;
    let gt_depths: Vec<(usize, DenseMap)> = seq
        .frames
        .iter()
        .filter_map(|f| f.gt_depth.clone().map(|d| (f.id, d)))
        .collect();
    let est_depths = read_depths(&run_dir.join(DEPTH_DIR))?;
    let report = evaluate(&est, &gt, &est_depths, &gt_depths, cfg)?;
    write_text(&run_dir.join(METRICS_FILE), &report.to_text())?;
    Ok(report)
}
