//! Acceptance gate. Each criterion is one test that writes a PASS/FAIL line
//! straight to stderr, so the verdicts show up without `--nocapture`.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, Point2, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use priorloc::config::PipelineConfig;
use priorloc::dataset::{read_truth, Dataset};
use priorloc::eval::{evaluate, EvalThresholds};
use priorloc::pipeline::localize_all;
use priorloc::scene::{generate_scene, SceneSpec};
use priorloc_core::geom::{pose_error, project, CameraIntrinsics, Pose, Rotation};
use priorloc_core::gtopt::synth::{ate_rmse, median, rotation_errors_deg, synthesize, SynthConfig};
use priorloc_core::gtopt::{apply_update, build_residuals, rigid_align, solve, IcpOptions, ParamBlock, SolveOptions, Term};
use priorloc_core::matching::{coarse_match, dual_softmax, fine_refine, FeatureMaps, IdentityTransform, MatchConfig, FINE_STRIDE};
use priorloc_core::pnp::{lo_ransac, p3p_solve, Correspondence2D3D, RansacConfig};
use priorloc_core::retrieval::{filter_candidates, top_k, DescriptorIndex, IndexEntry, RetrievalConfig};
use priorloc_core::sensors::SensorNoiseModel;

fn report(id: u32, name: &str, pass: bool, secs: f64, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} criterion {id} ({name}) [{secs:.1} s]: {detail}");
}

/// Runs `body`, checks its runtime against `limit_s` and reports.
fn criterion(id: u32, name: &str, limit_s: f64, body: impl FnOnce() -> (bool, String)) {
    let t = Instant::now();
    let (ok, detail) = body();
    let secs = t.elapsed().as_secs_f64();
    let in_time = secs < limit_s;
    let detail = if in_time { detail } else { format!("{detail}; runtime {secs:.1} s over {limit_s} s") };
    report(id, name, ok && in_time, secs, &detail);
    assert!(ok && in_time, "criterion {id} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Brute-force oracles.

fn naive_dual_softmax(c: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = c.shape();
    DMatrix::from_fn(n, m, |i, j| {
        let row: f64 = (0..m).map(|k| (c[(i, k)] - c[(i, j)]).exp()).sum();
        let col: f64 = (0..n).map(|k| (c[(k, j)] - c[(i, j)]).exp()).sum();
        1.0 / (row * col)
    })
}

/// Mutual nearest neighbors by enumerating all pairs; ties go to the lowest
/// index.
fn naive_coarse(q: &DMatrix<f64>, p: &DMatrix<f64>, tau: f64, theta: f64) -> Vec<(usize, usize, f64)> {
    let (n, m) = (q.nrows(), p.nrows());
    let c = DMatrix::from_fn(n, m, |i, j| (0..q.ncols()).map(|k| q[(i, k)] * p[(j, k)]).sum::<f64>() / tau);
    let pr = naive_dual_softmax(&c);
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let v = pr[(i, j)];
            let row_best = (0..m).all(|k| pr[(i, k)] < v || (pr[(i, k)] == v && k >= j));
            let col_best = (0..n).all(|k| pr[(k, j)] < v || (pr[(k, j)] == v && k >= i));
            if row_best && col_best && v >= theta {
                out.push((i, j, v));
            }
        }
    }
    out
}

fn naive_fine(maps: &FeatureMaps, cell: usize, point: &[f64], cfg: &MatchConfig) -> Point2<f64> {
    let (gw, _) = maps.coarse_shape();
    let (fw, fh) = maps.fine_shape();
    let ratio = 4;
    let (cx, cy) = ((cell % gw) * ratio, (cell / gw) * ratio);
    let (w, h) = (cfg.window.min(fw), cfg.window.min(fh));
    let x0 = (cx as i64 - (cfg.window / 2) as i64).clamp(0, (fw - w) as i64) as usize;
    let y0 = (cy as i64 - (cfg.window / 2) as i64).clamp(0, (fh - h) as i64) as usize;
    let mut logits = Vec::new();
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let f = maps.fine_at(x, y);
            logits.push((x, y, f.iter().zip(point).map(|(a, b)| *a as f64 * b).sum::<f64>() / cfg.temperature));
        }
    }
    let mx = logits.iter().map(|l| l.2).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l.2 - mx).exp()).sum();
    let (mut ex, mut ey) = (0.0, 0.0);
    for (x, y, l) in logits {
        let p = (l - mx).exp() / z;
        ex += p * x as f64;
        ey += p * y as f64;
    }
    Point2::new(ex * FINE_STRIDE as f64, ey * FINE_STRIDE as f64)
}

fn naive_filter(entries: &[IndexEntry], prior: &Pose, tau_t: f64, tau_o: f64) -> BTreeSet<u32> {
    let pc = prior.center();
    let pa = prior.orientation() * Vector3::z();
    entries
        .iter()
        .filter(|e| {
            let c = e.pose.center();
            let d = ((c.x - pc.x).powi(2) + (c.y - pc.y).powi(2)).sqrt();
            let a = e.pose.orientation() * Vector3::z();
            let ang = a.dot(&pa).clamp(-1.0, 1.0).acos().to_degrees();
            d <= tau_t && ang <= tau_o
        })
        .map(|e| e.image_id)
        .collect()
}

fn naive_top_k(entries: &[IndexEntry], cands: &BTreeSet<u32>, q: &[f32], k: usize) -> Vec<u32> {
    let mut s: Vec<(u32, f64)> = entries
        .iter()
        .filter(|e| cands.contains(&e.image_id))
        .map(|e| (e.image_id, e.descriptor.iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum()))
        .collect();
    // Selection sort: highest score first, lowest id on ties.
    let mut out = Vec::new();
    while out.len() < k && !s.is_empty() {
        let mut best = 0;
        for i in 1..s.len() {
            if s[i].1 > s[best].1 || (s[i].1 == s[best].1 && s[i].0 < s[best].0) {
                best = i;
            }
        }
        out.push(s.remove(best).0);
    }
    out
}

// ---------------------------------------------------------------------------
// Random instances.

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.random_range(-scale..scale))
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Rotation::from_axis_angle(&axis.normalize(), rng.random_range(0.0..std::f64::consts::PI))
}

fn unit_f32(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DescriptorIndex {
    let entries = (0..n as u32)
        .map(|id| IndexEntry {
            image_id: id * 3 + 1,
            pose: Pose::new(
                random_rotation(rng),
                Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(0.0..3.0)),
            ),
            descriptor: unit_f32(rng, dim),
            observed_point_ids: Vec::new(),
        })
        .collect();
    DescriptorIndex::new(dim, entries).unwrap()
}

/// Query cells that are noisy copies of some point rows, so matches exist.
fn matching_instance(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m, c) = (rng.random_range(1..40), rng.random_range(1..40), rng.random_range(2..16));
    let p = random_matrix(rng, m, c, 1.0);
    let mut q = random_matrix(rng, n, c, 0.3);
    for i in 0..n {
        if rng.random_bool(0.6) {
            let j = rng.random_range(0..m);
            for k in 0..c {
                q[(i, k)] += p[(j, k)];
            }
        }
    }
    // Exact duplicates exercise the tie rule.
    if m > 1 && rng.random_bool(0.2) {
        let row = p.row(0).clone_owned();
        let mut p = p;
        p.set_row(m - 1, &row);
        return (q, p);
    }
    (q, p)
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_1_oracle_equivalence() {
    criterion(1, "oracle equivalence", 30.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let cases = 200;
        let mut failures = Vec::new();

        for _ in 0..cases {
            let (n, m) = (rng.random_range(1..30), rng.random_range(1..30));
            let c = random_matrix(&mut rng, n, m, 15.0);
            let (a, b) = (dual_softmax(&c), naive_dual_softmax(&c));
            if (a - b).amax() > 1e-9 {
                failures.push("dual_softmax");
            }
        }

        for _ in 0..cases {
            let (q, p) = matching_instance(&mut rng);
            let cfg = MatchConfig { temperature: rng.random_range(0.05..1.0), theta: rng.random_range(0.0..0.3), window: 5 };
            let got = coarse_match(&q, &p, &cfg, &IdentityTransform).unwrap();
            let want = naive_coarse(&q, &p, cfg.temperature, cfg.theta);
            let same = got.len() == want.len()
                && got.iter().zip(&want).all(|(g, w)| g.cell == w.0 && g.point == w.1 && (g.probability - w.2).abs() <= 1e-9);
            if !same {
                failures.push("coarse_match");
            }
        }

        for _ in 0..cases {
            let (cc, cf) = (rng.random_range(1..8), rng.random_range(1..8));
            let (h, w) = (8 * rng.random_range(1..6), 8 * rng.random_range(1..6));
            let mut maps = FeatureMaps::zeros(h, w, cc, cf).unwrap();
            maps.fine_raw_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0f32..1.0));
            let (gw, gh) = maps.coarse_shape();
            let cell = rng.random_range(0..gw * gh);
            let point: Vec<f64> = (0..cf).map(|_| rng.random_range(-1.0..1.0)).collect();
            let window = [1, 3, 5, 7][rng.random_range(0..4)];
            let cfg = MatchConfig { temperature: rng.random_range(0.05..1.0), theta: 0.0, window };
            let got = fine_refine(cell, &maps, &point, &cfg, &IdentityTransform).unwrap().pixel;
            if (got - naive_fine(&maps, cell, &point, &cfg)).norm() > 1e-9 {
                failures.push("fine_refine");
            }
        }

        for _ in 0..cases {
            let n = rng.random_range(1..80);
            let index = random_index(&mut rng, n, 8);
            let prior = Pose::new(random_rotation(&mut rng), Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 1.6));
            let cfg = RetrievalConfig { tau_t: rng.random_range(0.0..80.0), tau_o: rng.random_range(0.0..180.0), k: 10 };
            let got = filter_candidates(&index, &prior, &cfg);
            if got != naive_filter(index.entries(), &prior, cfg.tau_t, cfg.tau_o) {
                failures.push("filter_candidates");
            }
        }

        for _ in 0..cases {
            let n = rng.random_range(1..80);
            let index = random_index(&mut rng, n, 16);
            let cands: BTreeSet<u32> = index.ids().into_iter().filter(|_| rng.random_bool(0.7)).collect();
            let q = unit_f32(&mut rng, 16);
            let k = rng.random_range(0..20);
            if top_k(&index, &cands, &q, k) != naive_top_k(index.entries(), &cands, &q, k) {
                failures.push("top_k");
            }
        }

        let detail = if failures.is_empty() {
            format!("{cases} instances each of dual_softmax, coarse_match, fine_refine, filter_candidates, top_k agree")
        } else {
            let set: BTreeSet<_> = failures.iter().collect();
            format!("{} mismatches in {set:?}", failures.len())
        };
        (failures.is_empty(), detail)
    });
}

#[test]
fn criterion_2_p3p_recovery() {
    criterion(2, "P3P recovery", f64::INFINITY, || {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let trials = 1000;
        let mut ok = 0;
        for _ in 0..trials {
            let pose = Pose::new(
                random_rotation(&mut rng),
                Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            );
            let sample: [Correspondence2D3D; 3] = std::array::from_fn(|_| {
                let px = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                let b = k.bearing(&px).into_inner();
                let pw = pose.orientation() * (b * (rng.random_range(2.0..20.0) / b.z)) + pose.center();
                Correspondence2D3D::new(project(&pose, &k, &pw).unwrap(), pw, 1.0)
            });
            let found = p3p_solve(&sample, &k).map(|c| {
                c.iter().any(|p| {
                    let (dt, dr) = pose_error(p, &pose);
                    dt <= 1e-6 && dr <= 1e-6
                })
            });
            if found.unwrap_or(false) {
                ok += 1;
            }
        }
        let rate = ok as f64 / trials as f64;
        (rate >= 0.999, format!("{ok}/{trials} triplets recovered ({:.1}%)", 100.0 * rate))
    });
}

#[test]
fn criterion_3_gravity_gate() {
    criterion(3, "gravity gate", 60.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let noise = Normal::new(0.0, 1.0).unwrap();
        let (mut scored_on, mut scored_off) = (0usize, 0usize);
        let (mut err_on, mut err_off) = (Vec::new(), Vec::new());
        for scene in 0..50u64 {
            let pose = Pose::new(random_rotation(&mut rng), Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 1.6));
            let n = 150;
            let corrs: Vec<_> = (0..n)
                .map(|i| {
                    let px = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                    let b = k.bearing(&px).into_inner();
                    let pw = pose.orientation() * (b * (rng.random_range(2.0..30.0) / b.z)) + pose.center();
                    let obs = if i < n * 3 / 10 {
                        let p = project(&pose, &k, &pw).unwrap();
                        Point2::new(p.x + noise.sample(&mut rng), p.y + noise.sample(&mut rng))
                    } else {
                        Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
                    };
                    Correspondence2D3D::new(obs, pw, 1.0)
                })
                .collect();
            // Sensor prior: true orientation tilted by 0.5 degrees.
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let tilt = Rotation::from_axis_angle(&Vector3::new(a.cos(), a.sin(), 0.0), 0.5f64.to_radians());
            let prior = Pose::from_orientation(tilt * pose.orientation(), pose.center());
            let on = RansacConfig { seed: scene, gravity_gate: true, ..RansacConfig::default() };
            let off = RansacConfig { gravity_gate: false, ..on };
            let r_on = lo_ransac(&corrs, &k, &prior, &on).unwrap();
            let r_off = lo_ransac(&corrs, &k, &prior, &off).unwrap();
            scored_on += r_on.hypotheses_scored;
            scored_off += r_off.hypotheses_scored;
            err_on.push(pose_error(&r_on.pose, &pose));
            err_off.push(pose_error(&r_off.pose, &pose));
        }
        let med = |v: &[(f64, f64)]| (median(&v.iter().map(|e| e.0).collect::<Vec<_>>()), median(&v.iter().map(|e| e.1).collect::<Vec<_>>()));
        let (mon, moff) = (med(&err_on), med(&err_off));
        let ratio = scored_off as f64 / scored_on.max(1) as f64;
        let ok = ratio >= 2.0 && mon.0 <= moff.0 && mon.1 <= moff.1;
        (
            ok,
            format!(
                "scored {scored_off} ungated vs {scored_on} gated ({ratio:.1}x); median error gated {:.4} m {:.4} deg, ungated {:.4} m {:.4} deg",
                mon.0, mon.1, moff.0, moff.1
            ),
        )
    });
}

struct RunSummary {
    r1: f64,
    recall: f64,
}

fn run_pipeline(ds: &Dataset, use_prior: bool) -> RunSummary {
    let cfg = PipelineConfig { use_prior, ..PipelineConfig::default() };
    let (results, _) = localize_all(ds, &cfg).unwrap();
    let truth = read_truth(&ds.root.join("groundtruth.csv")).unwrap();
    let rep = evaluate(&results, &truth, Some(&ds.index), &EvalThresholds::default()).unwrap();
    let r1 = rep.retrieval.as_ref().map_or(0.0, |t| 100.0 * t.recall[0]);
    RunSummary { r1, recall: rep.recall[0].recall }
}

#[test]
fn criterion_4_retrieval_prior() {
    criterion(4, "retrieval prior", 60.0, || {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { n_queries: 50, descriptor_corruption: 0.6, seed: 1, ..SceneSpec::default() };
        generate_scene(&spec, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let with = run_pipeline(&ds, true);
        let without = run_pipeline(&ds, false);
        let dr1 = with.r1 - without.r1;
        let drec = with.recall - without.recall;
        (
            dr1 >= 10.0 && drec >= 10.0,
            format!(
                "R@1 {:.0}% with prior vs {:.0}% without (+{dr1:.0}); recall@(25cm,2deg) {:.0}% vs {:.0}% (+{drec:.0})",
                with.r1, without.r1, with.recall, without.recall
            ),
        )
    });
}

#[test]
fn criterion_5_filter_and_matching_invariants() {
    criterion(5, "monotonicity and partial injection", f64::INFINITY, || {
        let mut runner = TestRunner::new(PropConfig { cases: 1000, failure_persistence: None, ..PropConfig::default() });
        let mono = runner.run(
            &(any::<u64>(), 0.0..60.0f64, 0.0..180.0f64, 0.0..40.0f64, 0.0..90.0f64),
            |(seed, tau_t, tau_o, dt, d_o)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let index = random_index(&mut rng, 60, 4);
                let prior = Pose::new(random_rotation(&mut rng), Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 1.6));
                let small = filter_candidates(&index, &prior, &RetrievalConfig { tau_t, tau_o, k: 10 });
                let large = filter_candidates(&index, &prior, &RetrievalConfig { tau_t: tau_t + dt, tau_o: tau_o + d_o, k: 10 });
                prop_assert!(small.is_subset(&large));
                Ok(())
            },
        );
        let mut runner = TestRunner::new(PropConfig { cases: 1000, failure_persistence: None, ..PropConfig::default() });
        let inj = runner.run(&(any::<u64>(), 0.0..0.5f64, 0.02..1.0f64), |(seed, theta, temperature)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, p) = matching_instance(&mut rng);
            let cfg = MatchConfig { temperature, theta, window: 5 };
            let m = coarse_match(&q, &p, &cfg, &IdentityTransform).unwrap();
            let cells: HashSet<_> = m.iter().map(|c| c.cell).collect();
            let points: HashSet<_> = m.iter().map(|c| c.point).collect();
            prop_assert_eq!(cells.len(), m.len());
            prop_assert_eq!(points.len(), m.len());
            Ok(())
        });
        let ok = mono.is_ok() && inj.is_ok();
        let detail = match (&mono, &inj) {
            (Ok(()), Ok(())) => "1000 cases each: filter monotone in both thresholds, coarse matches injective".to_string(),
            _ => format!("monotonicity {mono:?}; injection {inj:?}"),
        };
        (ok, detail)
    });
}

#[test]
fn criterion_6_trajectory_optimizer() {
    criterion(6, "trajectory optimizer", 120.0, || {
        let cfg = SynthConfig::default();
        let s = synthesize(&cfg);
        let (out, rep) = solve(&s.problem, &cfg.weights(), &SolveOptions::default()).unwrap();
        let ate = ate_rmse(&out.frames, &s.truth_frames);
        let rot = median(&rotation_errors_deg(&out.frames, &s.truth_frames));
        let monotone = rep.cost_history.windows(2).all(|w| w[1] <= w[0]);

        // Jacobians at 100 random states of a short trajectory; every term,
        // every parameter block it touches.
        let small = SynthConfig { frames: 6, n_map_points: 120, n_landmarks: 60, seed: 11, ..SynthConfig::default() };
        let base = synthesize(&small).problem;
        let w = small.weights();
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let h = 1e-6;
        let (mut worst, mut checked) = (0.0f64, 0usize);
        let mut terms_seen = HashSet::new();
        for _ in 0..100 {
            let mut p = base.clone();
            for i in 0..p.frames.len() {
                let d: Vec<f64> = (0..9).map(|_| rng.random_range(-0.02..0.02)).collect();
                p = apply_update(&p, ParamBlock::Frame(i), &d);
            }
            let d: Vec<f64> = (0..6).map(|_| rng.random_range(-0.01..0.01)).collect();
            p = apply_update(&p, ParamBlock::Bias, &d);
            let set = build_residuals(&p, &w, true);
            for term in Term::ALL {
                let idx: Vec<usize> = set.blocks.iter().enumerate().filter(|(_, b)| b.term == term).map(|(i, _)| i).collect();
                if idx.is_empty() {
                    continue;
                }
                let bi = idx[rng.random_range(0..idx.len())];
                let block = &set.blocks[bi];
                terms_seen.insert(format!("{term:?}"));
                for (pb, j) in &block.jacobians {
                    for c in 0..pb.dim() {
                        let mut d = vec![0.0; pb.dim()];
                        d[c] = h;
                        let plus = build_residuals(&apply_update(&p, *pb, &d), &w, false);
                        d[c] = -h;
                        let minus = build_residuals(&apply_update(&p, *pb, &d), &w, false);
                        let fd = (&plus.blocks[bi].whitened - &minus.blocks[bi].whitened) / (2.0 * h);
                        for r in 0..fd.len() {
                            let (a, b) = (fd[r], j[(r, c)]);
                            worst = worst.max((a - b).abs() / (1.0 + a.abs().max(b.abs())));
                        }
                        checked += 1;
                    }
                }
            }
        }
        let ok = ate <= 0.05 && rot <= 0.2 && monotone && worst <= 1e-5 && terms_seen.len() == Term::ALL.len();
        (
            ok,
            format!(
                "ATE {:.2} cm, median rotation {rot:.3} deg, {} LM iterations, cost non-increasing: {monotone}; \
                 {checked} Jacobian columns over 100 states, worst relative error {worst:.2e}",
                100.0 * ate,
                rep.iterations
            ),
        )
    });
}

#[test]
fn criterion_7_rigid_align() {
    criterion(7, "rigid align", f64::INFINITY, || {
        let mut rng = ChaCha8Rng::seed_from_u64(707);
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<Vector3<f64>> {
            (0..300)
                .map(|_| Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(0.0..10.0)))
                .collect()
        };
        let pairs: Vec<_> = (0..300).map(|i| (i, i)).collect();
        let mut worst_exact = 0.0f64;
        for _ in 0..100 {
            let src = cloud(&mut rng);
            let r = random_rotation(&mut rng);
            let t = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let dst: Vec<_> = src.iter().map(|p| r * *p + t).collect();
            let a = rigid_align(&src, &dst, &pairs, &IcpOptions::default()).unwrap();
            worst_exact = worst_exact.max((a.rotation.matrix() - r.matrix()).amax()).max((a.translation - t).amax());
        }
        // 1.5 cm RMS displacement in 3D.
        let n = Normal::new(0.0, 0.015 / 3f64.sqrt()).unwrap();
        let mut worst_dev = 0.0f64;
        for _ in 0..100 {
            let src = cloud(&mut rng);
            let r = Rotation::from_axis_angle(&Vector3::z(), rng.random_range(-0.5..0.5));
            let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.1..0.1));
            let dst: Vec<_> =
                src.iter().map(|p| r * *p + t + Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng))).collect();
            let a = rigid_align(&src, &dst, &pairs, &IcpOptions::default()).unwrap();
            worst_dev = worst_dev.max((a.rmse - 0.015).abs() / 0.015);
        }
        (
            worst_exact <= 1e-9 && worst_dev <= 0.2,
            format!("noiseless worst deviation {worst_exact:.1e}; noisy RMSE within {:.1}% of 1.5 cm over 100 trials", 100.0 * worst_dev),
        )
    });
}

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_priorloc")).args(args).output().unwrap();
    assert!(out.status.success(), "priorloc {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn full_run(root: &Path, threads: &str) -> Vec<(String, Vec<u8>)> {
    let data = root.join("data");
    let run = root.join("run");
    let eval = root.join("eval");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    cli(&["gen", "--out", &s(&data), "--seed", "5", "--n-queries", "20", "--corruption", "0.3", "--outlier-fraction", "0.2"]);
    cli(&["localize", "--data", &s(&data), "--out", &s(&run), "--threads", threads]);
    cli(&[
        "eval",
        "--results",
        &s(&run.join("results.csv")),
        "--groundtruth",
        &s(&data.join("groundtruth.csv")),
        "--index",
        &s(&data.join("index.sldx")),
        "--out",
        &s(&eval),
    ]);
    let mut files = vec![("results.csv".to_string(), std::fs::read(run.join("results.csv")).unwrap())];
    for f in ["recall.csv", "recall_curve.csv", "retrieval.csv"] {
        files.push((f.to_string(), std::fs::read(eval.join(f)).unwrap()));
    }
    files
}

#[test]
fn criterion_8_end_to_end_determinism() {
    criterion(8, "end-to-end determinism", f64::INFINITY, || {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = full_run(a.path(), "1");
        let second = full_run(b.path(), "4");
        let differing: Vec<_> = first.iter().zip(&second).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.clone()).collect();
        let ok = differing.is_empty();
        let detail = if ok {
            format!("{} result CSVs byte-identical across two runs (1 and 4 worker threads)", first.len())
        } else {
            format!("differing files: {differing:?}")
        };
        (ok, detail)
    });
}

#[test]
fn criterion_9_noiseless_end_to_end() {
    criterion(9, "noiseless end-to-end", 30.0, || {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            n_queries: 50,
            noise: SensorNoiseModel::noiseless(),
            outlier_fraction: 0.0,
            descriptor_corruption: 0.0,
            seed: 9,
            ..SceneSpec::default()
        };
        generate_scene(&spec, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let s = run_pipeline(&ds, true);
        (s.recall >= 100.0, format!("recall@(25cm,2deg) {:.0}% on 50 queries", s.recall))
    });
}
