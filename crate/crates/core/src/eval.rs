//! Evaluation utilities: trajectory comparison and cross-scene metric
//! aggregation with mean and standard error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpm::Trajectory;
use crate::predictor::Metrics;
use crate::real::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectories have {a} and {b} frames")]
    FrameCountMismatch { a: usize, b: usize },
    #[error("frame {frame} has {a} and {b} particles")]
    ParticleCountMismatch { frame: usize, a: usize, b: usize },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("no per-scene metrics to aggregate")]
    NoScenes,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-frame position RMSE between two trajectories plus its mean over
/// frames. Frame `f` scores `sqrt(mean_p |a_fp - b_fp|^2)` where the mean
/// runs over particles and `|.|` is the Euclidean norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRmse<T> {
    pub per_frame: Vec<T>,
    pub mean: T,
}

pub fn trajectory_rmse<T: Real>(
    a: &Trajectory<T>,
    b: &Trajectory<T>,
) -> Result<TrajectoryRmse<T>, EvalError> {
    if a.positions.is_empty() || b.positions.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    if a.positions.len() != b.positions.len() {
        return Err(EvalError::FrameCountMismatch {
            a: a.positions.len(),
            b: b.positions.len(),
        });
    }
    let mut per_frame = Vec::with_capacity(a.positions.len());
    for (frame, (fa, fb)) in a.positions.iter().zip(&b.positions).enumerate() {
        if fa.len() != fb.len() {
            return Err(EvalError::ParticleCountMismatch {
                frame,
                a: fa.len(),
                b: fb.len(),
            });
        }
        if fa.is_empty() {
            return Err(EvalError::EmptyTrajectory);
        }
        let mut sum = T::zero();
        for (pa, pb) in fa.iter().zip(fb) {
            for axis in 0..3 {
                let d = pa[axis] - pb[axis];
                sum += d * d;
            }
        }
        per_frame.push((sum / T::of(fa.len() as f64)).sqrt());
    }
    let mean = per_frame.iter().fold(T::zero(), |acc, v| acc + *v)
        / T::of(per_frame.len() as f64);
    Ok(TrajectoryRmse { per_frame, mean })
}

/// Mean and standard error of one scalar metric across scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

fn mean_stderr(values: &[f64]) -> MeanStderr {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    MeanStderr { mean, stderr }
}

/// Cross-scene aggregate of prediction metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenes: usize,
    pub mat_acc: MeanStderr,
    pub mse_log_e: MeanStderr,
    pub mse_nu: MeanStderr,
    pub mse_log_rho: MeanStderr,
    pub avg_cont_mse: MeanStderr,
}

/// Aggregates per-scene metrics into means with standard errors
/// (sample standard deviation over `sqrt(n)`; zero when `n = 1`).
pub fn aggregate(per_scene: &[Metrics]) -> Result<MetricReport, EvalError> {
    if per_scene.is_empty() {
        return Err(EvalError::NoScenes);
    }
    let column = |f: fn(&Metrics) -> f64| -> MeanStderr {
        let values: Vec<f64> = per_scene.iter().map(f).collect();
        mean_stderr(&values)
    };
    Ok(MetricReport {
        scenes: per_scene.len(),
        mat_acc: column(|m| m.mat_acc),
        mse_log_e: column(|m| m.mse_log_e),
        mse_nu: column(|m| m.mse_nu),
        mse_log_rho: column(|m| m.mse_log_rho),
        avg_cont_mse: column(|m| m.avg_cont_mse),
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-column CSV: one row per metric with mean and stderr.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,stderr\n");
        let rows: [(&str, MeanStderr); 5] = [
            ("mat_acc", self.mat_acc),
            ("mse_log_e", self.mse_log_e),
            ("mse_nu", self.mse_nu),
            ("mse_log_rho", self.mse_log_rho),
            ("avg_cont_mse", self.avg_cont_mse),
        ];
        for (name, ms) in rows {
            out.push_str(&format!("{name},{},{}\n", ms.mean, ms.stderr));
        }
        out
    }
}

impl<T: Real> TrajectoryRmse<T> {
    /// Fixed-column CSV: per-frame rows, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,rmse\n");
        for (f, v) in self.per_frame.iter().enumerate() {
            out.push_str(&format!("{f},{}\n", v.to64()));
        }
        out.push_str(&format!("mean,{}\n", self.mean.to64()));
        out
    }
}
