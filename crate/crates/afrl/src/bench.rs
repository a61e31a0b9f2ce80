//! Policy evaluation over scan sets: per-frame focal paths, MAE and
//! error spread, in-focus percentage, smoothed path export, and a paired
//! bootstrap significance test.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicySpec;
use crate::scan::ScanSet;

/// A frame is "in focus" when its absolute focal-power error is strictly
/// below this threshold.
pub const IN_FOCUS_THRESHOLD: f64 = 0.1;

/// Moving-average window used for path export.
pub const DEFAULT_SMOOTHING_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: usize,
    /// Focal power after the policy's step at this frame.
    pub f: f64,
    pub f_star: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEval {
    pub scan_id: String,
    pub frames: Vec<FrameRecord>,
}

/// Aggregate evaluation of one policy over a scan set. `error_std` is
/// the population standard deviation of the pooled per-frame errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub initial_f: f64,
    pub seed: u64,
    pub mae: f64,
    pub error_std: f64,
    pub in_focus_fraction: f64,
    pub frames: usize,
    pub in_focus_threshold: f64,
    pub error_std_convention: String,
    pub per_scan: Vec<ScanEval>,
}

/// Starting focal power for each rollout.
#[derive(Debug, Clone)]
pub enum InitialFocus {
    Fixed(f64),
    PerScan(Vec<f64>),
}

impl InitialFocus {
    fn for_scan(&self, index: usize) -> f64 {
        match self {
            InitialFocus::Fixed(f) => *f,
            InitialFocus::PerScan(v) => v[index],
        }
    }
}

impl Default for InitialFocus {
    fn default() -> Self {
        InitialFocus::Fixed(0.5)
    }
}

/// Rolls `policy` greedily across every frame of every scan, recording
/// the post-action error per frame. Scans evaluate independently (in
/// parallel when a rayon pool is installed); aggregation is an ordered
/// reduction so worker count never changes the result.
pub fn evaluate_policy(
    policy: &PolicySpec,
    scans: &ScanSet,
    initial: &InitialFocus,
    patch_size: usize,
    seed: u64,
) -> Result<EvalReport> {
    if scans.is_empty() {
        return Err(Error::Config("no scans to evaluate".into()));
    }
    if let InitialFocus::PerScan(v) = initial {
        if v.len() != scans.len() {
            return Err(Error::Config(format!(
                "{} initial focal powers for {} scans",
                v.len(),
                scans.len()
            )));
        }
    }

    let per_scan: Vec<ScanEval> = (0..scans.len())
        .into_par_iter()
        .map(|i| {
            scans.with_scan(i, |scan| {
                let mut instance = policy.instantiate(initial.for_scan(i));
                let needs_patch = policy.needs_observation();
                let mut frames = Vec::with_capacity(scan.frame_count());
                for t in 0..scan.frame_count() {
                    let f_next = if needs_patch {
                        let patch = scan.observe_patch(t, instance.focal_power(), patch_size)?;
                        instance.step(&patch)?
                    } else {
                        instance.focal_power()
                    };
                    let f_star = scan.f_star(t).ok_or_else(|| {
                        Error::Incompatible(format!(
                            "scan {} has no ground-truth focus at frame {t}",
                            scans.id(i)
                        ))
                    })?;
                    frames.push(FrameRecord {
                        t,
                        f: f_next,
                        f_star,
                        abs_error: (f_star - f_next).abs(),
                    });
                }
                Ok(ScanEval {
                    scan_id: scans.id(i).to_string(),
                    frames,
                })
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_scan = per_scan;
    per_scan.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));

    let errors: Vec<f64> = per_scan
        .iter()
        .flat_map(|s| s.frames.iter().map(|f| f.abs_error))
        .collect();
    let n = errors.len();
    let mae = errors.iter().sum::<f64>() / n as f64;
    let var = errors.iter().map(|e| (e - mae) * (e - mae)).sum::<f64>() / n as f64;
    let in_focus =
        errors.iter().filter(|&&e| e < IN_FOCUS_THRESHOLD).count() as f64 / n as f64;

    Ok(EvalReport {
        policy: policy.descriptor(),
        initial_f: match initial {
            InitialFocus::Fixed(f) => *f,
            InitialFocus::PerScan(_) => f64::NAN,
        },
        seed,
        mae,
        error_std: var.sqrt(),
        in_focus_fraction: in_focus,
        frames: n,
        in_focus_threshold: IN_FOCUS_THRESHOLD,
        error_std_convention: "population std of pooled per-frame errors".into(),
        per_scan,
    })
}

/// Centred moving average with the window truncated at sequence ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1);
    let half_lo = (window - 1) / 2;
    let half_hi = window / 2;
    (0..values.len())
        .map(|t| {
            let lo = t.saturating_sub(half_lo);
            let hi = (t + half_hi + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Writes the per-frame focal paths as CSV with a smoothed column.
/// Smoothing affects this export only, never the report metrics.
pub fn export_paths(report: &EvalReport, out: &mut dyn Write, window: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scan_id", "t", "f_raw", "f_smooth", "f_star", "abs_error"])?;
    for scan in &report.per_scan {
        let raw: Vec<f64> = scan.frames.iter().map(|f| f.f).collect();
        let smooth = moving_average(&raw, window);
        for (frame, s) in scan.frames.iter().zip(&smooth) {
            w.write_record([
                scan.scan_id.as_str(),
                &frame.t.to_string(),
                &frame.f.to_string(),
                &s.to_string(),
                &frame.f_star.to_string(),
                &frame.abs_error.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_paths_to_file(report: &EvalReport, path: &Path, window: usize) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    export_paths(report, &mut file, window)
}

/// Writes the aggregate report (everything except the per-frame data,
/// which lives in the paths CSV).
pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Aggregate<'a> {
        policy: &'a str,
        initial_f: f64,
        seed: u64,
        mae: f64,
        error_std: f64,
        in_focus_fraction: f64,
        frames: usize,
        in_focus_threshold: f64,
        error_std_convention: &'a str,
        scans: usize,
    }
    let agg = Aggregate {
        policy: &report.policy,
        initial_f: report.initial_f,
        seed: report.seed,
        mae: report.mae,
        error_std: report.error_std,
        in_focus_fraction: report.in_focus_fraction,
        frames: report.frames,
        in_focus_threshold: report.in_focus_threshold,
        error_std_convention: &report.error_std_convention,
        scans: report.per_scan.len(),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&agg)?)?;
    Ok(())
}

/// Two-sided paired bootstrap p-value for the mean difference of
/// per-frame absolute errors. Both reports must cover the same (scan,
/// frame) index set. Deterministic given `seed`.
pub fn paired_significance(
    a: &EvalReport,
    b: &EvalReport,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    let mut diffs = Vec::new();
    if a.per_scan.len() != b.per_scan.len() {
        return Err(Error::ReportMismatch);
    }
    for (sa, sb) in a.per_scan.iter().zip(&b.per_scan) {
        if sa.scan_id != sb.scan_id || sa.frames.len() != sb.frames.len() {
            return Err(Error::ReportMismatch);
        }
        for (fa, fb) in sa.frames.iter().zip(&sb.frames) {
            if fa.t != fb.t {
                return Err(Error::ReportMismatch);
            }
            diffs.push(fa.abs_error - fb.abs_error);
        }
    }
    let n = diffs.len();
    let observed = diffs.iter().sum::<f64>() / n as f64;
    // Resample the mean of the centred differences; the p-value is the
    // fraction of resamples at least as extreme as the observed mean
    // (add-one smoothed so identical reports give exactly 1).
    let centred: Vec<f64> = diffs.iter().map(|d| d - observed).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..iterations {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += centred[rng.random_range(0..n)];
        }
        if (sum / n as f64).abs() >= observed.abs() {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (iterations + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricKind;
    use crate::scan::{build_simulated_scan, Scan, SimulatedScan, WalkConfig};
    use crate::texture::generate_texture;

    fn constant_fstar_scan(f_star: f64, frames: usize) -> Scan {
        let tex = generate_texture(64, 64, 40);
        let base = build_simulated_scan(
            std::slice::from_ref(&tex),
            "tex",
            frames,
            48,
            &WalkConfig {
                seed: 9,
                ..WalkConfig::default()
            },
        )
        .unwrap();
        Scan::Simulated(SimulatedScan {
            f_star: vec![f_star; frames],
            ..base
        })
    }

    fn alternating_scan(frames: usize) -> Scan {
        let tex = generate_texture(64, 64, 41);
        let base = build_simulated_scan(
            std::slice::from_ref(&tex),
            "tex",
            frames,
            48,
            &WalkConfig {
                seed: 10,
                ..WalkConfig::default()
            },
        )
        .unwrap();
        let f_star = (0..frames)
            .map(|t| if t % 2 == 0 { 0.3 } else { 0.7 })
            .collect();
        Scan::Simulated(SimulatedScan { f_star, ..base })
    }

    #[test]
    fn fixed_policy_on_matching_scan_is_perfect() {
        let scans = ScanSet::from_memory(vec![("s0".into(), constant_fstar_scan(0.5, 10))]);
        let report = evaluate_policy(
            &PolicySpec::Fixed { f0: 0.5 },
            &scans,
            &InitialFocus::Fixed(0.5),
            32,
            0,
        )
        .unwrap();
        assert_eq!(report.mae, 0.0);
        assert_eq!(report.in_focus_fraction, 1.0);
        assert_eq!(report.frames, 10);
    }

    #[test]
    fn fixed_policy_alternating_error() {
        let scans = ScanSet::from_memory(vec![("s0".into(), alternating_scan(10))]);
        let report = evaluate_policy(
            &PolicySpec::Fixed { f0: 0.5 },
            &scans,
            &InitialFocus::Fixed(0.5),
            32,
            0,
        )
        .unwrap();
        assert!((report.mae - 0.2).abs() < 1e-12);
        assert_eq!(report.in_focus_fraction, 0.0);
    }

    #[test]
    fn constant_f0_grid_search_floor() {
        // On a symmetric trajectory the mean of f_star is (close to) the
        // best constant policy; grid search confirms it is not beaten by
        // more than a grid step.
        let frames = 40;
        let tex = generate_texture(64, 64, 42);
        let base = build_simulated_scan(
            std::slice::from_ref(&tex),
            "tex",
            frames,
            48,
            &WalkConfig::default(),
        )
        .unwrap();
        let f_star: Vec<f64> = (0..frames)
            .map(|t| 0.5 + 0.3 * (t as f64 * std::f64::consts::TAU / frames as f64).sin())
            .collect();
        let scan = Scan::Simulated(SimulatedScan { f_star: f_star.clone(), ..base });
        let scans = ScanSet::from_memory(vec![("s0".into(), scan)]);

        let mae_at = |f0: f64| {
            evaluate_policy(
                &PolicySpec::Fixed { f0 },
                &scans,
                &InitialFocus::Fixed(f0),
                32,
                0,
            )
            .unwrap()
            .mae
        };
        let mean_fstar = f_star.iter().sum::<f64>() / frames as f64;
        let best_grid = (0..=100)
            .map(|k| mae_at(k as f64 / 100.0))
            .fold(f64::INFINITY, f64::min);
        assert!(mae_at(mean_fstar) <= best_grid + 0.011);
    }

    #[test]
    fn hill_climber_beats_fixed_on_static_target() {
        let scans = ScanSet::from_memory(vec![("s0".into(), constant_fstar_scan(0.8, 60))]);
        let hc = evaluate_policy(
            &PolicySpec::HillClimb {
                kind: MetricKind::Mgm,
            },
            &scans,
            &InitialFocus::Fixed(0.2),
            32,
            0,
        )
        .unwrap();
        let fixed = evaluate_policy(
            &PolicySpec::Fixed { f0: 0.2 },
            &scans,
            &InitialFocus::Fixed(0.2),
            32,
            0,
        )
        .unwrap();
        assert!(hc.mae < fixed.mae, "{} vs {}", hc.mae, fixed.mae);
    }

    #[test]
    fn moving_average_cases() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0], 1), vec![1.0, 2.0, 3.0]);
        let smooth = moving_average(&[0.0, 0.0, 1.0, 0.0, 0.0], 5);
        assert!((smooth[2] - 0.2).abs() < 1e-12);
        let c = moving_average(&[0.4; 7], 5);
        assert!(c.iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn export_then_recompute_mae_matches() {
        let scans = ScanSet::from_memory(vec![("s0".into(), alternating_scan(12))]);
        let report = evaluate_policy(
            &PolicySpec::Fixed { f0: 0.4 },
            &scans,
            &InitialFocus::Fixed(0.4),
            32,
            0,
        )
        .unwrap();
        let mut buf = Vec::new();
        export_paths(&report, &mut buf, DEFAULT_SMOOTHING_WINDOW).unwrap();
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in rdr.records() {
            let row = row.unwrap();
            sum += row[5].parse::<f64>().unwrap();
            count += 1;
        }
        assert_eq!(count, report.frames);
        assert!((sum / count as f64 - report.mae).abs() < 1e-9);
    }

    #[test]
    fn significance_identical_reports_give_p_one() {
        let scans = ScanSet::from_memory(vec![("s0".into(), alternating_scan(30))]);
        let a = evaluate_policy(
            &PolicySpec::Fixed { f0: 0.5 },
            &scans,
            &InitialFocus::Fixed(0.5),
            32,
            0,
        )
        .unwrap();
        let p = paired_significance(&a, &a, 2000, 7).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn significance_detects_uniform_gap_and_is_deterministic() {
        let scans = ScanSet::from_memory(vec![("s0".into(), constant_fstar_scan(0.5, 1000))]);
        let a = evaluate_policy(
            &PolicySpec::Fixed { f0: 0.4 },
            &scans,
            &InitialFocus::Fixed(0.4),
            32,
            0,
        )
        .unwrap();
        let b = evaluate_policy(
            &PolicySpec::Fixed { f0: 0.5 },
            &scans,
            &InitialFocus::Fixed(0.5),
            32,
            0,
        )
        .unwrap();
        // a is uniformly 0.1 worse per frame.
        let p1 = paired_significance(&a, &b, 10_000, 3).unwrap();
        assert!(p1 < 0.001, "p = {p1}");
        let p2 = paired_significance(&a, &b, 10_000, 3).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn significance_rejects_mismatched_reports() {
        let scans_a = ScanSet::from_memory(vec![("s0".into(), alternating_scan(10))]);
        let scans_b = ScanSet::from_memory(vec![("s0".into(), alternating_scan(12))]);
        let a = evaluate_policy(
            &PolicySpec::Fixed { f0: 0.5 },
            &scans_a,
            &InitialFocus::Fixed(0.5),
            32,
            0,
        )
        .unwrap();
        let b = evaluate_policy(
            &PolicySpec::Fixed { f0: 0.5 },
            &scans_b,
            &InitialFocus::Fixed(0.5),
            32,
            0,
        )
        .unwrap();
        assert!(matches!(
            paired_significance(&a, &b, 100, 0),
            Err(Error::ReportMismatch)
        ));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let scans = ScanSet::from_memory(vec![
            ("s0".into(), alternating_scan(20)),
            ("s1".into(), constant_fstar_scan(0.7, 20)),
        ]);
        let spec = PolicySpec::HillClimb {
            kind: MetricKind::Mgm,
        };
        let a = evaluate_policy(&spec, &scans, &InitialFocus::Fixed(0.5), 32, 0).unwrap();
        let b = evaluate_policy(&spec, &scans, &InitialFocus::Fixed(0.5), 32, 0).unwrap();
        assert_eq!(a, b);
    }
}
