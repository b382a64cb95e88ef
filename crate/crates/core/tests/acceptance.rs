//! End-to-end acceptance gate. Runs every criterion, prints one PASS/FAIL
//! line each and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};

use wheelvo::config::PipelineConfig;
use wheelvo::eval::{align_horn, evaluate, Alignment};
use wheelvo::factors::{AnyLinearized, Calibration, Factor, FrameState, PriorState, Vector9};
use wheelvo::manifold::{exp_so3, log_so3, Pose, Rotation};
use wheelvo::optimizer::{FrameVar, LandmarkVar, Problem, SolveOptions};
use wheelvo::pipeline::{run, RunOutput};
use wheelvo::preintegration::{monte_carlo_covariance, PreintegratedOdometer};
use wheelvo::rng::{NoiseRng, Stream};
use wheelvo::sensors::{project, CameraModel, CameraMount, Extrinsics, NoiseParams, OdometerStep};
use wheelvo::sim::{generate, Fault, Scenario, SimTrace};
use wheelvo::tracking::{predict, TrackingMode};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn scenario(name: &str) -> Scenario {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", &format!("{name}.toml")].iter().collect();
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Scenario::from_toml(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn simulate(name: &str, seed: u64) -> (SimTrace, RunOutput) {
    let trace = generate(&scenario(name), seed).expect("scenario generates");
    let out = run(&trace, &PipelineConfig::default()).expect("pipeline runs");
    (trace, out)
}

fn centers(out: &RunOutput) -> Vec<Vector3<f64>> {
    out.frames.iter().map(|f| f.state.pose.center()).collect()
}

fn truth_centers(trace: &SimTrace) -> Vec<Vector3<f64>> {
    trace.frames.iter().map(|f| f.truth.center()).collect()
}

fn nominal_noise() -> NoiseParams<f64> {
    NoiseParams::from_sigmas(1e-3, 1e-3, 1e-5, 2e-4, 1e-3, 0.5)
}

// ---------------------------------------------------------------------------
// 1, 9 and the nominal half of 5 share the loop runs.

struct LoopRuns {
    runs: Vec<(SimTrace, RunOutput)>,
    seconds: f64,
}

fn loop_runs() -> LoopRuns {
    let t0 = Instant::now();
    let runs = (1..=10).map(|seed| simulate("loop200", seed)).collect();
    LoopRuns { runs, seconds: t0.elapsed().as_secs_f64() }
}

fn criterion_loop(lr: &LoopRuns) -> Verdict {
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut beaten = 0;
    for (trace, out) in &lr.runs {
        let truth = truth_centers(trace);
        let dist = trace.travelled_distance();
        let est = evaluate(&centers(out), &truth, false, dist).expect("alignment");
        let dr: Vec<_> = out.dead_reckoning.iter().map(|s| s.pose.center()).collect();
        let dr = evaluate(&dr, &truth, false, dist).expect("alignment");
        worst = worst.max(est.percent_of_distance);
        if est.rmse < dr.rmse {
            beaten += 1;
        }
        ok &= est.percent_of_distance <= 0.3 && est.rmse < dr.rmse;
    }
    ok &= lr.seconds <= 60.0;
    verdict(
        ok,
        format!(
            "worst ATE {worst:.4}% of path (<= 0.3%), below dead reckoning on {beaten}/10 seeds, {:.1} s (<= 60 s)",
            lr.seconds
        ),
    )
}

/// Metric scale of each initial map: the mean ratio of estimated to true
/// landmark depth over every initial observation. Single two-view depths
/// scatter by a few percent with half-pixel noise, so those are reported
/// alongside.
fn criterion_scale(lr: &LoopRuns) -> Verdict {
    let mut worst_scale = 0.0f64;
    let mut worst_point = 0.0f64;
    let mut deviations = Vec::new();
    for (trace, out) in &lr.runs {
        let Some(map) = &out.init_map else {
            return verdict(false, "no initial map");
        };
        let mut ratios = Vec::new();
        for p in map.points.values() {
            for kf in p.observations.keys() {
                let est_c = trace.ext.camera_pose(&map.keyframes[kf].state.pose).transform(&p.position);
                let true_c = trace.ext.camera_pose(&trace.frames[*kf].truth).transform(&trace.landmarks[p.source]);
                ratios.push(est_c.z / true_c.z);
            }
        }
        if ratios.is_empty() {
            return verdict(false, "empty initial map");
        }
        let scale = ratios.iter().sum::<f64>() / ratios.len() as f64;
        worst_scale = worst_scale.max((scale - 1.0).abs());
        for r in &ratios {
            worst_point = worst_point.max((r - 1.0).abs());
            deviations.push((r - 1.0).abs());
        }
    }
    deviations.sort_by(f64::total_cmp);
    let median = deviations[deviations.len() / 2];
    verdict(
        worst_scale <= 0.01,
        format!(
            "worst map scale error {:.3}% over 10 seeds (<= 1%); single depths: median {:.2}%, worst {:.2}% over {} depths",
            100.0 * worst_scale,
            100.0 * median,
            100.0 * worst_point,
            deviations.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Bias-corrected preintegration against re-integration.

fn wavy_steps(n: usize) -> Vec<OdometerStep<f64>> {
    (0..n)
        .map(|k| {
            let t = k as f64 * 0.02;
            OdometerStep {
                timestamp: t + 0.02,
                omega: Vector3::new(0.2 * (3.0 * t).sin(), -0.1, 0.6 + 0.3 * (2.0 * t).cos()),
                dist_left: 0.018,
                dist_right: 0.022,
                dt: 0.02,
            }
        })
        .collect()
}

fn criterion_bias_correction() -> Verdict {
    let ext = Extrinsics::default();
    let noise = nominal_noise();
    let steps = wavy_steps(50);
    let b0 = Vector3::new(0.001, -0.002, 0.003);
    let p = PreintegratedOdometer::from_steps(&steps, b0, &ext, &noise).expect("integrates");
    let dir = Vector3::new(1.0, 2.0, -1.0).normalize();
    let mut pts = Vec::new();
    for mag in [1e-4, 1e-3, 1e-2] {
        let b = b0 + dir * mag;
        let (r, pos) = p.correct_for_bias(&b);
        let re = PreintegratedOdometer::from_steps(&steps, b, &ext, &noise).expect("integrates");
        let err = log_so3(&(r.transpose() * re.delta_r)).norm() + (pos - re.delta_p).norm();
        pts.push((mag.ln(), err.ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let c = (my - slope * mx).exp();
    verdict((slope - 2.0).abs() <= 0.2, format!("log-log slope {slope:.3} (2.0 +/- 0.2), fitted C {c:.3e}"))
}

// ---------------------------------------------------------------------------
// 3. Propagated covariance against Monte-Carlo.

fn criterion_covariance() -> Verdict {
    let t0 = Instant::now();
    let ext = Extrinsics::default();
    let noise = nominal_noise();
    let step = |wz: f64, d: f64| OdometerStep { timestamp: 0.0, omega: Vector3::new(0.0, 0.0, wz), dist_left: d, dist_right: d, dt: 0.02 };
    let cases = [("straight", step(0.0, 0.02)), ("arc", step(0.5, 0.02)), ("spin", step(1.0, 0.0))];
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (k, (name, s)) in cases.iter().enumerate() {
        let steps = vec![*s; 50];
        let p = PreintegratedOdometer::from_steps(&steps, Vector3::zeros(), &ext, &noise).expect("integrates");
        let mc = monte_carlo_covariance(&steps, &ext, &noise, 10_000, 100 + k as u64).expect("monte carlo");
        let rel = (0..6).map(|i| (p.cov[(i, i)] / mc[(i, i)] - 1.0).abs()).fold(0.0, f64::max);
        worst = worst.max(rel);
        lines.push(format!("{name} {:.1}%", 100.0 * rel));
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(worst <= 0.15 && secs <= 30.0, format!("worst diagonal deviation {} (<= 15%), {secs:.1} s (<= 30 s)", lines.join(", ")))
}

// ---------------------------------------------------------------------------
// 4. Analytic Jacobians against central differences.

struct Lin {
    residual: DVector<f64>,
    frames: Vec<(usize, DMatrix<f64>)>,
    landmark: Option<(usize, DMatrix<f64>)>,
}

fn dynamic(l: AnyLinearized<f64>) -> Lin {
    macro_rules! conv {
        ($l:expr) => {
            Lin {
                residual: DVector::from_column_slice($l.residual.as_slice()),
                frames: $l
                    .frames
                    .iter()
                    .flatten()
                    .map(|(id, j)| (*id, DMatrix::from_column_slice(j.nrows(), 9, j.as_slice())))
                    .collect(),
                landmark: $l.landmark.map(|(id, j)| (id, DMatrix::from_column_slice(j.nrows(), 3, j.as_slice()))),
            }
        };
    }
    match l {
        AnyLinearized::Two(l) => conv!(l),
        AnyLinearized::Three(l) => conv!(l),
        AnyLinearized::Six(l) => conv!(l),
        AnyLinearized::Nine(l) => conv!(l),
    }
}

fn residual(prob: &Problem<f64>, f: &Factor<f64>) -> DVector<f64> {
    dynamic(f.linearize(prob, &prob.calib).expect("linearizes")).residual
}

/// Largest Jacobian deviation relative to the block's largest entry (floored at 1).
fn jacobian_deviation(prob: &Problem<f64>, f: &Factor<f64>) -> f64 {
    let h = 1e-6;
    let lin = dynamic(f.linearize(prob, &prob.calib).expect("linearizes"));
    let mut worst = 0.0f64;
    for (id, ja) in &lin.frames {
        let mut fd = DMatrix::zeros(ja.nrows(), 9);
        for k in 0..9 {
            let mut d = Vector9::zeros();
            d[k] = h;
            let mut plus = prob.clone();
            let mut minus = prob.clone();
            let s = prob.frames[id].state;
            plus.frames.get_mut(id).unwrap().state = s.retract(&d);
            minus.frames.get_mut(id).unwrap().state = s.retract(&(-d));
            fd.set_column(k, &((residual(&plus, f) - residual(&minus, f)) / (2.0 * h)));
        }
        worst = worst.max((ja - &fd).amax() / fd.amax().max(1.0));
    }
    if let Some((id, ja)) = &lin.landmark {
        let mut fd = DMatrix::zeros(ja.nrows(), 3);
        for k in 0..3 {
            let mut plus = prob.clone();
            let mut minus = prob.clone();
            plus.landmarks.get_mut(id).unwrap().position[k] += h;
            minus.landmarks.get_mut(id).unwrap().position[k] -= h;
            fd.set_column(k, &((residual(&plus, f) - residual(&minus, f)) / (2.0 * h)));
        }
        worst = worst.max((ja - &fd).amax() / fd.amax().max(1.0));
    }
    worst
}

fn cam() -> CameraModel<f64> {
    CameraModel { fx: 458.0, fy: 457.0, cx: 320.0, cy: 240.0, width: 640.0, height: 480.0 }
}

fn to_world(camera: &Pose<f64>, p_c: &Vector3<f64>) -> Vector3<f64> {
    camera.rotation.transpose() * (p_c - camera.position)
}

fn random_state(rng: &mut NoiseRng) -> FrameState<f64> {
    let r = Rotation::about_z(rng.uniform_range(-3.0, 3.0)) * exp_so3(&(rng.normal3() * 0.1));
    let c = Vector3::new(rng.uniform_range(-10.0, 10.0), rng.uniform_range(-10.0, 10.0), rng.gaussian(0.2));
    FrameState::new(Pose::from_world(r, c), rng.normal3() * 0.01)
}

fn random_spd(rng: &mut NoiseRng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.normal());
    &a * a.transpose() + DMatrix::identity(n, n) * n as f64
}

fn random_factor(kind: usize, rng: &mut NoiseRng, calib: &Calibration<f64>) -> Problem<f64> {
    let mut prob = Problem::new(*calib);
    let xi = random_state(rng);
    prob.frames.insert(0, FrameVar::free(xi));
    match kind {
        0 => {
            let steps: Vec<OdometerStep<f64>> = (0..20)
                .map(|_| OdometerStep {
                    timestamp: 0.0,
                    omega: rng.normal3() * 0.3,
                    dist_left: rng.uniform_range(0.0, 0.03),
                    dist_right: rng.uniform_range(0.0, 0.03),
                    dt: 0.02,
                })
                .collect();
            let preint = PreintegratedOdometer::from_steps(&steps, rng.normal3() * 0.01, &calib.ext, &nominal_noise()).expect("integrates");
            let mut xj = predict(&xi, &preint);
            xj.pose = xj.pose.retract(&(rng.normal3() * 0.05), &(rng.normal3() * 0.05));
            xj.bias += rng.normal3() * 0.01;
            prob.frames.insert(1, FrameVar::free(xj));
            prob.factors.push(Factor::Odometer { i: 0, j: 1, preint: Arc::new(preint) });
        }
        1 => {
            prob.frames.insert(1, FrameVar::free(random_state(rng)));
            prob.factors.push(Factor::BiasWalk { i: 0, j: 1, information: Matrix3::identity() * 1e4 });
        }
        2 => {
            let pixel = Vector2::new(rng.uniform_range(10.0, 630.0), rng.uniform_range(10.0, 470.0));
            let depth = rng.uniform_range(1.0, 20.0);
            let f = to_world(&calib.ext.camera_pose(&xi.pose), &calib.cam.backproject(&pixel, depth));
            prob.landmarks.insert(7, LandmarkVar { position: f, fixed: false });
            let observed = pixel + Vector2::new(rng.gaussian(2.0), rng.gaussian(2.0));
            prob.factors.push(Factor::Reprojection { frame: 0, landmark: 7, pixel: observed, information: Matrix2::identity() * 4.0, huber: None });
        }
        3 => {
            prob.frames.insert(1, FrameVar::free(random_state(rng)));
            prob.factors.push(Factor::Plane { frame: 0, anchor: 1, information: Matrix3::from_diagonal(&Vector3::new(1e6, 1e6, 1e4)) });
        }
        _ => {
            let mut mean = xi;
            mean.pose = mean.pose.retract(&(rng.normal3() * 0.1), &(rng.normal3() * 0.3));
            mean.bias += rng.normal3() * 0.01;
            let info = random_spd(rng, 9);
            let prior = PriorState { mean, information: nalgebra::SMatrix::<f64, 9, 9>::from_column_slice(info.as_slice()) };
            prob.factors.push(Factor::Prior { frame: 0, prior: Arc::new(prior) });
        }
    }
    prob
}


fn criterion_jacobians() -> Verdict {
    let calib = Calibration { ext: Extrinsics::mounted(CameraMount::Forward, Vector3::new(0.1, 0.02, 0.3)), cam: cam() };
    let names = ["odometer", "bias walk", "reprojection", "plane", "prior"];
    let mut rng = NoiseRng::new(4, Stream::Test);
    let mut worst = Vec::new();
    for (kind, name) in names.iter().enumerate() {
        let mut w = 0.0f64;
        for _ in 0..100 {
            let prob = random_factor(kind, &mut rng, &calib);
            w = w.max(jacobian_deviation(&prob, &prob.factors[0]));
        }
        worst.push((name, w));
    }
    let pass = worst.iter().all(|(_, w)| *w <= 1e-5);
    let detail = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(pass, format!("worst relative deviation over 100 configurations: {detail} (<= 1e-5)"))
}

// ---------------------------------------------------------------------------
// 5. Wheel slip.

fn criterion_slip(lr: &LoopRuns) -> Verdict {
    let sc = scenario("slip");
    let Some(&Fault::WheelSlip { start, duration, .. }) = sc.faults.first() else {
        return verdict(false, "slip scenario has no wheel slip");
    };
    let (trace, out) = simulate("slip", sc.seed);
    let period = 1.0 / sc.rates.camera;
    let end = start + duration;
    let in_fault = |t: f64| t > start - 1e-9 && t <= end + period + 1e-9;
    let flagged: Vec<usize> = out.frames.iter().filter(|f| f.slippage).map(|f| f.frame).collect();
    let fired = !flagged.is_empty() && flagged.iter().all(|&k| in_fault(out.frames[k].timestamp));

    // Truth is static during the slip, so the estimate should not move either.
    let before = out.frames.iter().rposition(|f| f.timestamp <= start + 1e-9).expect("frames before the slip");
    let after = out.frames.iter().rposition(|f| f.timestamp <= end + 1e-9).expect("frames in the slip");
    let moved = out.frames[after].state.pose.center() - out.frames[before].state.pose.center();
    let truth_moved = trace.frames[after].truth.center() - trace.frames[before].truth.center();
    let recovered = (moved - truth_moved).norm();

    let map = out.map.as_ref().expect("map exists");
    let flagged_kfs: BTreeSet<usize> = map.keyframes.values().filter(|k| k.slippage).map(|k| k.id).collect();
    // An odometer factor belongs to the keyframe it ends at.
    let audit = out.odometer_factors().iter().filter(|(_, j)| flagged_kfs.contains(j)).count()
        + map.keyframes.values().filter(|k| k.slippage && k.has_odometer_factor()).count();

    let mut nominal = 0;
    let mut false_pos = 0;
    for f in out.frames.iter().filter(|f| !in_fault(f.timestamp)) {
        nominal += 1;
        false_pos += usize::from(f.slippage);
    }
    for (_, o) in &lr.runs {
        nominal += o.frames.len();
        false_pos += o.frames.iter().filter(|f| f.slippage).count();
    }
    let pass = fired && recovered <= 0.02 && !flagged_kfs.is_empty() && audit == 0 && nominal >= 500 && false_pos == 0;
    verdict(
        pass,
        format!(
            "flagged frames {flagged:?} in [{start}, {end}] s, recovered error {recovered:.4} m (<= 0.02), \
             {audit} odometer factors on {} flagged keyframes, {false_pos} false positives over {nominal} nominal frames",
            flagged_kfs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Visual loss.

fn continuous(trace: &SimTrace, out: &RunOutput) -> (bool, f64) {
    let mut max_jump = 0.0f64;
    let mut ok = out.frames.len() == trace.frames.len();
    for (k, w) in out.frames.windows(2).enumerate() {
        ok &= w[0].frame == k && w[1].frame == k + 1;
        let step = (w[1].state.pose.center() - w[0].state.pose.center()).norm();
        let true_step = (trace.frames[k + 1].truth.center() - trace.frames[k].truth.center()).norm();
        if w[1].mode == TrackingMode::OdomOnly {
            max_jump = max_jump.max((step - true_step).abs());
        }
        ok &= step.is_finite();
    }
    (ok && max_jump <= 0.05, max_jump)
}

fn criterion_reloc() -> (Verdict, Verdict) {
    let (trace, out) = simulate("blackout_reloc", scenario("blackout_reloc").seed);
    let (cont, jump) = continuous(&trace, &out);
    let odom_only = out.frames.iter().filter(|f| f.mode == TrackingMode::OdomOnly).count();
    let continuity = verdict(
        cont && odom_only > 0,
        format!("{} of {} frames reported, {odom_only} ODOM_ONLY, largest ODOM_ONLY step deviation {jump:.4} m (<= 0.05)", out.frames.len(), trace.frames.len()),
    );

    let visual: Vec<usize> = out.frames.iter().filter(|f| f.mode.is_visual()).map(|f| f.frame).collect();
    let est: Vec<_> = visual.iter().map(|&k| out.frames[k].state.pose.center()).collect();
    let tru: Vec<_> = visual.iter().map(|&k| trace.frames[k].truth.center()).collect();
    let align = align_horn(&est, &tru, false).expect("alignment");
    let err = |k: usize| (align.apply(&out.frames[k].state.pose.center()) - trace.frames[k].truth.center()).norm();
    let Some(r) = out.frames.iter().position(|f| f.mode == TrackingMode::Reloc) else {
        return (continuity, verdict(false, "no RELOC frame"));
    };
    let Some(b) = out.frames[..r].iter().rposition(|f| f.mode == TrackingMode::OdomOnly) else {
        return (continuity, verdict(false, "RELOC without a preceding ODOM_ONLY frame"));
    };
    let before = err(b);
    let after = (r..(r + 3).min(out.frames.len())).map(err).fold(f64::INFINITY, f64::min);
    let reduction = 1.0 - after / before;
    (
        continuity,
        verdict(
            reduction >= 0.8,
            format!("RELOC at frame {r}: error {before:.3} m -> {after:.3} m within 3 frames, reduction {:.1}% (>= 80%)", 100.0 * reduction),
        ),
    )
}

fn non_collinear(points: &[Vector3<f64>]) -> bool {
    if points.len() < 3 {
        return false;
    }
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let cov = points.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>();
    let mut ev = cov.symmetric_eigenvalues().as_slice().to_vec();
    ev.sort_by(f64::total_cmp);
    ev[1] > 1e-6 * ev[2].max(1e-12)
}

struct Segment {
    alignment: Alignment,
    rmse: f64,
    inliers: usize,
    points: usize,
}

/// Rigid alignment of a map segment to the true landmarks. Points farther
/// than three times the median residual are dropped and the fit repeated,
/// since low-parallax points carry depth errors of metres.
fn trimmed_alignment(est: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Option<Segment> {
    let mut keep: Vec<usize> = (0..est.len()).collect();
    for round in 0..10 {
        let e: Vec<_> = keep.iter().map(|&i| est[i]).collect();
        if !non_collinear(&e) {
            return None;
        }
        let t: Vec<_> = keep.iter().map(|&i| truth[i]).collect();
        let a = align_horn(&e, &t, false).ok()?;
        let mut res: Vec<f64> = (0..est.len()).map(|i| (a.apply(&est[i]) - truth[i]).norm()).collect();
        let all = res.clone();
        res.sort_by(f64::total_cmp);
        let cut = 3.0 * res[res.len() / 2];
        let next: Vec<usize> = (0..est.len()).filter(|&i| all[i] <= cut).collect();
        if next == keep || round == 9 {
            let rmse = (keep.iter().map(|&i| all[i] * all[i]).sum::<f64>() / keep.len() as f64).sqrt();
            return Some(Segment { alignment: a, rmse, inliers: keep.len(), points: est.len() });
        }
        keep = next;
    }
    None
}

fn criterion_new_map() -> (Verdict, Verdict) {
    let (trace, out) = simulate("blackout_newmap", scenario("blackout_newmap").seed);
    let (cont, jump) = continuous(&trace, &out);
    let continuity = verdict(cont, format!("new-map run: {} of {} frames, largest ODOM_ONLY step deviation {jump:.4} m", out.frames.len(), trace.frames.len()));
    let created = out.frames.iter().filter(|f| f.mode == TrackingMode::NewMapLocal).count();
    let Some(map) = &out.map else {
        return (continuity, verdict(false, "no map"));
    };
    let mut epochs: BTreeMap<u32, (Vec<Vector3<f64>>, Vec<Vector3<f64>>)> = BTreeMap::new();
    for p in map.points.values() {
        let e = epochs.entry(p.epoch).or_default();
        e.0.push(p.position);
        e.1.push(trace.landmarks[p.source]);
    }
    let mut segments = Vec::new();
    for (epoch, (est, tru)) in &epochs {
        if let Some(seg) = trimmed_alignment(est, tru) {
            segments.push((*epoch, seg));
        }
    }
    let aligned = |s: &Segment| s.rmse <= 0.1 && s.inliers * 2 >= s.points;
    let good: Vec<_> = segments.iter().filter(|(_, s)| aligned(s)).collect();
    let pass = created > 0 && good.len() >= 2 && good[0].0 == 0;
    let detail = segments
        .iter()
        .map(|(e, s)| {
            let tag = if aligned(s) { "ok" } else { "not aligned" };
            format!("epoch {e}: {} of {} points, RMSE {:.3} m {tag}", s.inliers, s.points, s.rmse)
        })
        .collect::<Vec<_>>()
        .join(", ");
    let offset = if good.len() >= 2 {
        let between = good[0].1.alignment.inverse().apply(&good[1].1.alignment.translation);
        format!(", segment offset {:.3} m", between.norm())
    } else {
        String::new()
    };
    (continuity, verdict(pass, format!("{created} NEW_MAP_LOCAL frames; {detail}; epoch 0 and one later map must align (RMSE <= 0.1 m, at least half the points){offset}")))
}

// ---------------------------------------------------------------------------
// 7. Noise-free closure.

fn criterion_noise_free() -> Verdict {
    let (trace, out) = simulate("noise_free", 1);
    let worst = out
        .frames
        .iter()
        .zip(&trace.frames)
        .map(|(e, t)| (e.state.pose.center() - t.truth.center()).norm())
        .fold(0.0, f64::max);
    verdict(
        trace.frames.len() >= 1000 && worst <= 1e-6,
        format!("max position error {worst:.2e} m (<= 1e-6) over {} frames", trace.frames.len()),
    )
}

// ---------------------------------------------------------------------------
// 8. Statistical consistency of three-keyframe problems.

fn three_keyframe_problem(seed: u64) -> Problem<f64> {
    let mut rng = NoiseRng::new(seed, Stream::Test);
    let sigma_g = 1e-3;
    let sigma_e = 1e-3;
    let sigma_bw = 1e-4;
    let sigma_px = 0.5;
    let noise = NoiseParams::from_sigmas(sigma_g, sigma_e, sigma_bw, 2e-4, 1e-3, sigma_px);
    let calib = Calibration { ext: Extrinsics::mounted(CameraMount::Forward, Vector3::new(0.1, 0.0, 0.3)), cam: cam() };
    let dt = 0.02;
    let per = 25;
    let interval = dt * per as f64;

    let mut truth = vec![FrameState::new(Pose::from_planar(0.0, 0.0, rng.uniform_range(-0.2, 0.2)), Vector3::new(1e-3, -1e-3, 2e-3) + rng.normal3() * 1e-3)];
    let mut preints = Vec::new();
    for _ in 0..2 {
        let xi = *truth.last().unwrap();
        let wz = rng.uniform_range(-0.3, 0.3);
        let d = rng.uniform_range(0.01, 0.02);
        let psi_sqrt = Matrix3::from_diagonal(&noise.displacement_cov().diagonal().map(f64::sqrt));
        let mut clean = PreintegratedOdometer::new(xi.bias);
        let mut meas = PreintegratedOdometer::new(xi.bias);
        for _ in 0..per {
            let w = Vector3::new(0.0, 0.0, wz);
            let psi = Vector3::new(d, 0.0, 0.0);
            clean = clean.integrate_displacement(&(w + xi.bias), &psi, dt, &Rotation::identity(), &noise.gyro, &noise.displacement_cov()).unwrap();
            let w_m = w + xi.bias + rng.normal3() * sigma_g;
            let psi_m = psi + psi_sqrt * rng.normal3();
            meas = meas.integrate_displacement(&w_m, &psi_m, dt, &Rotation::identity(), &noise.gyro, &noise.displacement_cov()).unwrap();
        }
        let mut xj = predict(&xi, &clean);
        xj.bias = xi.bias + rng.normal3() * sigma_bw * interval.sqrt();
        truth.push(xj);
        preints.push(meas);
    }

    let mut prob = Problem::new(calib);
    // Landmarks ahead of the middle frame, visible from all three.
    let mut points = Vec::new();
    while points.len() < 20 {
        let pixel = Vector2::new(rng.uniform_range(60.0, 580.0), rng.uniform_range(60.0, 420.0));
        let depth = rng.uniform_range(3.0, 12.0);
        let f = to_world(&calib.ext.camera_pose(&truth[1].pose), &calib.cam.backproject(&pixel, depth));
        if truth.iter().all(|x| project(&f, &x.pose, &calib.ext, &calib.cam).is_ok_and(|z| calib.cam.in_bounds(&z))) {
            points.push(f);
        }
    }

    let prior_sigma = [1e-3, 1e-3, 1e-3, 1e-2, 1e-2, 1e-2, 1e-3, 1e-3, 1e-3];
    let mut delta = Vector9::zeros();
    for k in 0..9 {
        delta[k] = rng.gaussian(prior_sigma[k]);
    }
    let info = nalgebra::SMatrix::<f64, 9, 9>::from_diagonal(&Vector9::from_fn(|k, _| prior_sigma[k].powi(-2)));
    prob.factors.push(Factor::Prior { frame: 0, prior: Arc::new(PriorState::from_tangent_information(truth[0].retract(&delta), &info)) });
    for (k, p) in preints.into_iter().enumerate() {
        prob.factors.push(Factor::Odometer { i: k, j: k + 1, preint: Arc::new(p) });
        prob.factors.push(Factor::BiasWalk { i: k, j: k + 1, information: (noise.bias_walk * interval).try_inverse().unwrap() });
        prob.factors.push(Factor::Plane { frame: k + 1, anchor: 0, information: noise.plane.try_inverse().unwrap() });
    }
    let pixel_info = noise.pixel.try_inverse().unwrap();
    for (l, f) in points.iter().enumerate() {
        for (k, x) in truth.iter().enumerate() {
            let z = project(f, &x.pose, &calib.ext, &calib.cam).unwrap() + Vector2::new(rng.gaussian(sigma_px), rng.gaussian(sigma_px));
            prob.factors.push(Factor::Reprojection { frame: k, landmark: l, pixel: z, information: pixel_info, huber: None });
        }
        prob.landmarks.insert(l, LandmarkVar { position: f + rng.normal3() * 0.05, fixed: false });
    }
    for (k, x) in truth.iter().enumerate() {
        let mut guess = *x;
        guess.pose = guess.pose.retract(&(rng.normal3() * 0.01), &(rng.normal3() * 0.05));
        guess.bias += rng.normal3() * 1e-3;
        prob.frames.insert(k, FrameVar::free(guess));
    }
    prob
}

fn criterion_consistency() -> Verdict {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut grad_ok = 0;
    let mut cost_ok = 0;
    for seed in 1..=50 {
        let mut prob = three_keyframe_problem(seed);
        let rep = match prob.solve(&SolveOptions::default()) {
            Ok(r) => r,
            Err(e) => return verdict(false, format!("seed {seed}: {e}")),
        };
        let ratio = rep.chi2 / rep.dof as f64;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
        grad_ok += usize::from(rep.gradient_inf_norm <= 1e-6 * (1.0 + rep.final_cost));
        cost_ok += usize::from(rep.final_cost <= rep.initial_cost);
    }
    verdict(
        lo >= 0.5 && hi <= 2.0 && grad_ok == 50 && cost_ok == 50,
        format!("chi2/dof in [{lo:.3}, {hi:.3}] (within [0.5, 2]), gradient criterion on {grad_ok}/50, cost decreased on {cost_ok}/50"),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    // Let `cargo test -- <filter>` skip the gate unless it names it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let t0 = Instant::now();
    let lr = loop_runs();
    let (cont, reloc) = criterion_reloc();
    let (new_cont, new_map) = criterion_new_map();
    let visual_loss = verdict(
        cont.pass && reloc.pass && new_cont.pass && new_map.pass,
        format!("{}; {}; {}; {}", cont.detail, reloc.detail, new_cont.detail, new_map.detail),
    );
    let results = [
        ("1 loop200 accuracy", criterion_loop(&lr)),
        ("2 bias correction order", criterion_bias_correction()),
        ("3 covariance vs Monte-Carlo", criterion_covariance()),
        ("4 factor Jacobians", criterion_jacobians()),
        ("5 wheel slip", criterion_slip(&lr)),
        ("6 visual loss", visual_loss),
        ("7 noise-free closure", criterion_noise_free()),
        ("8 estimator consistency", criterion_consistency()),
        ("9 initial map scale", criterion_scale(&lr)),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} of {} criteria passed in {:.1} s", results.len() - failed, results.len(), t0.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
