//! End-to-end acceptance checks. Runs every criterion in order on one thread
//! (wall-clock limits are part of the checks) and prints one line each.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pchier_core::analysis::{decompose_motion, export_motion, motion_variance_profile, read_motion_csv};
use pchier_core::cell::{cell_step, init_cell_params, reset_state, CellState};
use pchier_core::data::{generate_sequence, MotionPreset, PointCloudSequence, PresetKind};
use pchier_core::diffcore::{finite_difference_check, ParamStore, Tape};
use pchier_core::geometry::{farthest_point_sample, knn, sq_dist, PointCloud};
use pchier_core::metrics::{chamfer_distance, emd};
use pchier_core::network::{de_forward, init_params, ArchitectureConfig, Variant};
use pchier_core::training::{evaluate, evaluate_copy_last, sequence_loss, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Inconclusive,
}

struct Outcome {
    status: Status,
    detail: String,
    /// False when a failure is an empirical finding rather than a defect.
    enforced: bool,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        Self {
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
            enforced: true,
        }
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
}

/// Small integer coordinates so that distance ties are common.
fn grid_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let c = |rng: &mut ChaCha8Rng| rng.random_range(0..4) as f64;
    PointCloud::new((0..n).map(|_| [c(rng), c(rng), c(rng)]).collect()).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let perms: Vec<Vec<Vec<usize>>> = (0..=6).map(permutations).collect();
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=6);
        let a = random_cloud(&mut rng, n);
        let b = random_cloud(&mut rng, m);
        let c = random_cloud(&mut rng, n);
        let mut cd = 0.0;
        for &p in a.points() {
            cd += b.points().iter().map(|&q| sq_dist(p, q)).fold(f64::INFINITY, f64::min) / n as f64;
        }
        for &q in b.points() {
            cd += a.points().iter().map(|&p| sq_dist(p, q)).fold(f64::INFINITY, f64::min) / m as f64;
        }
        let emd_oracle = perms[n]
            .iter()
            .map(|perm| perm.iter().enumerate().map(|(i, &j)| sq_dist(a.point(i), c.point(j))).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((chamfer_distance(&a, &b) - cd).abs());
        worst = worst.max((emd(&a, &c).unwrap() - emd_oracle).abs());
    }
    let t = start.elapsed();
    Outcome::check(
        worst <= 1e-12 && t < Duration::from_secs(10),
        format!("200 instances, max |diff| {worst:.2e}, {:.2} s", t.as_secs_f64()),
    )
}

fn randomize_head(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in store.iter_mut() {
        if name.starts_with("head.") {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
        }
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let cfg = ArchitectureConfig {
        variant: Variant::Classic,
        levels: 2,
        downsample_factor: 4,
        k: vec![4, 4],
        feature_widths: vec![6, 8],
        fp_widths: vec![vec![8], vec![6]],
        seed: 5,
    };
    let mut preset = MotionPreset::new(PresetKind::TranslatingRotor, 7);
    preset.noise_sigma = 0.01;
    let seq = generate_sequence(&preset, 16, 3).unwrap();
    let mut store = init_params(&cfg).unwrap();
    // a zero head would give every other parameter an exactly zero gradient,
    // and zero biases put whole layers exactly on a ReLU kink
    randomize_head(&mut store, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
    }
    let tcfg = TrainConfig::default();
    let report = finite_difference_check(
        &store,
        |tape: &mut Tape, s: &ParamStore| Ok(sequence_loss(tape, s, &cfg, &seq, &tcfg)?.0),
        1e-5,
        1e-4,
    )
    .unwrap();
    let uncovered: Vec<&str> = report.params.iter().filter(|p| p.checked == 0).map(|p| p.name.as_str()).collect();
    let t = start.elapsed();
    Outcome::check(
        report.passed() && uncovered.is_empty() && t < Duration::from_secs(60),
        format!(
            "{} coordinates checked, {} kink-skipped, max rel err {:.2e}, {:.1} s{}",
            report.checked(),
            report.skipped(),
            report.max_rel_err,
            t.as_secs_f64(),
            if uncovered.is_empty() { String::new() } else { format!(", unchecked params {uncovered:?}") }
        ),
    )
}

fn criterion_3() -> Outcome {
    let seq = generate_sequence(&MotionPreset::new(PresetKind::RigidTranslation, 0), 256, 2).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let cfg = ArchitectureConfig {
            variant: v,
            feature_widths: vec![4, 4, 4],
            fp_widths: vec![vec![4], vec![4], vec![4]],
            ..ArchitectureConfig::default()
        };
        let params = init_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let (levels, _) = de_forward(&mut tape, &params, &cfg, &seq.frames()[0], &reset_state(3)).unwrap();
        let sizes: Vec<usize> = levels.coords.iter().map(PointCloud::len).collect();
        let expect = if v == Variant::SingleScale { vec![256; 3] } else { vec![64, 16, 4] };
        ok &= sizes == expect && cfg.level_sizes(256).unwrap() == expect;
        parts.push(format!("{v} {}", sizes.iter().map(usize::to_string).collect::<Vec<_>>().join("/")));
    }
    Outcome::check(ok, parts.join(", "))
}

fn desk_cfg(variant: Variant, seed: u64) -> ArchitectureConfig {
    ArchitectureConfig {
        variant,
        feature_widths: vec![16, 32, 64],
        fp_widths: vec![vec![64, 32], vec![32, 32], vec![32, 32]],
        seed,
        ..ArchitectureConfig::default()
    }
}

fn sequences(kind: PresetKind, seeds: impl Iterator<Item = u64>) -> Vec<PointCloudSequence> {
    seeds.map(|s| generate_sequence(&MotionPreset::new(kind, s), 256, 12).unwrap()).collect()
}

fn named(seqs: Vec<PointCloudSequence>) -> Vec<(String, PointCloudSequence)> {
    seqs.into_iter().map(|s| (format!("seed{:04}", s.seed.unwrap()), s)).collect()
}

/// Training seeds 0..8, test seeds 100 and 101.
fn split(kind: PresetKind) -> (Vec<PointCloudSequence>, Vec<(String, PointCloudSequence)>) {
    (sequences(kind, 0..8), named(sequences(kind, 100..102)))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let (train_set, test_set) = split(PresetKind::RigidTranslation);
    let cfg = desk_cfg(Variant::Classic, 0);
    let out = train(&cfg, &train_set, &TrainConfig::default()).unwrap();
    let model = evaluate(&out.params, &cfg, &test_set, 1, 512, 1).unwrap().aggregate.cd;
    let base = evaluate_copy_last(&test_set, 1, 512).unwrap().aggregate.cd;
    let t = start.elapsed();
    Outcome::check(
        model < 0.1 * base && t < Duration::from_secs(300),
        format!("test CD {model:.3e} vs copy-last {base:.3e} (ratio {:.2e}), {:.0} s", model / base, t.as_secs_f64()),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (train_set, test_set) = split(PresetKind::ArticulatedWalker);
    let base = evaluate_copy_last(&test_set, 1, 512).unwrap().aggregate.cd;
    let mut means = Vec::new();
    for v in Variant::ALL {
        let mut cds = Vec::new();
        for seed in 0..3 {
            let cfg = desk_cfg(v, seed);
            let tcfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let out = train(&cfg, &train_set, &tcfg).unwrap();
            cds.push(evaluate(&out.params, &cfg, &test_set, 1, 512, 1).unwrap().aggregate.cd);
        }
        let mean = cds.iter().sum::<f64>() / cds.len() as f64;
        eprintln!(
            "    {v:<20} seeds {}  mean CD {mean:.4e}",
            cds.iter().map(|c| format!("{c:.3e}")).collect::<Vec<_>>().join(" ")
        );
        means.push((v, mean));
    }
    let t = start.elapsed();
    let classic = means[0].1;
    let beats_base = means.iter().all(|(_, m)| 2.0 * m <= base);
    let classic_best = means.iter().all(|(_, m)| classic <= *m);
    let shallow = means.iter().find(|(v, _)| *v == Variant::Shallow).unwrap().1;
    let close = (classic - shallow).abs() < 0.05 * classic.max(shallow);
    let in_time = t < Duration::from_secs(45 * 60);
    let status = if !beats_base || !in_time {
        Status::Fail
    } else if classic_best {
        Status::Pass
    } else if close && means.iter().filter(|(v, _)| *v != Variant::Shallow).all(|(_, m)| classic <= *m) {
        Status::Inconclusive
    } else {
        Status::Fail
    };
    let listing: Vec<String> = means.iter().map(|(v, m)| format!("{v} {m:.3e}")).collect();
    Outcome {
        status,
        detail: format!(
            "{}; copy-last {base:.3e}; classic best: {classic_best}; all >= 2x better than copy-last: {beats_base}; {:.0} s",
            listing.join(", "),
            t.as_secs_f64()
        ),
        // the ordering is an empirical comparison; baseline margin and runtime are enforced
        enforced: !(status == Status::Fail && beats_base && in_time),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let frame = random_cloud(&mut rng, 64);

    // (a) one level
    let one = ArchitectureConfig {
        variant: Variant::Classic,
        levels: 1,
        downsample_factor: 4,
        k: vec![4],
        feature_widths: vec![6],
        fp_widths: vec![vec![6]],
        seed: 1,
    };
    let mut p1 = init_params(&one).unwrap();
    randomize_head(&mut p1, 2);
    let mut tape = Tape::new();
    let (levels, _) = de_forward(&mut tape, &p1, &one, &frame, &reset_state(1)).unwrap();
    let ra = decompose_motion(&frame, &levels.snapshot(&tape), &p1, &one).unwrap().residual;

    // (b) affine propagation: non-negative weights keep ReLUs in their linear regime
    let three = ArchitectureConfig {
        levels: 3,
        k: vec![4; 3],
        feature_widths: vec![4, 6, 8],
        fp_widths: vec![vec![8], vec![6], vec![6]],
        ..one.clone()
    };
    let mut p3 = init_params(&three).unwrap();
    randomize_head(&mut p3, 3);
    let mut tape = Tape::new();
    let (levels, _) = de_forward(&mut tape, &p3, &three, &frame, &reset_state(3)).unwrap();
    let snap = levels.snapshot(&tape);
    for (name, t) in p3.iter_mut() {
        if name.starts_with("fp.") {
            t.data_mut().iter_mut().for_each(|x| *x = x.abs() + 0.01);
        }
    }
    let rb = decompose_motion(&frame, &snap, &p3, &three).unwrap().residual;

    // (c) trained model on the rotor
    let (train_set, test_set) = split(PresetKind::TranslatingRotor);
    let cfg = desk_cfg(Variant::Classic, 0);
    let trained = train(&cfg, &train_set, &TrainConfig::default()).unwrap().params;
    let seq = &test_set[0].1;
    let t_frame = 6;
    let mut tape = Tape::new();
    let mut states = reset_state(cfg.levels);
    let mut snap = None;
    for f in &seq.frames()[..=t_frame] {
        let (lv, next) = de_forward(&mut tape, &trained, &cfg, f, &states).unwrap();
        snap = Some(lv.snapshot(&tape));
        states = next;
    }
    let frame = &seq.frames()[t_frame];
    let decomp = decompose_motion(frame, &snap.unwrap(), &trained, &cfg).unwrap();
    let profile = motion_variance_profile(&decomp, seq.labels()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut finite = decomp.residual.is_finite();
    for (l, m) in decomp.levels.iter().enumerate() {
        let path = dir.path().join(format!("decomp_level{}.csv", l + 1));
        let ply = export_motion(frame, &[m], &path).unwrap();
        let (_, fields) = read_motion_csv(&path).unwrap();
        finite &= ply.is_file() && fields[0].vectors.iter().flatten().all(|x| x.is_finite());
    }
    let v_top = profile.levels[2].overall;
    let v_bottom = profile.levels[0].overall;
    let soft = if v_top < v_bottom { "pass" } else { "WARN" };
    Outcome::check(
        ra <= 1e-12 && rb < 1e-9 && finite,
        format!(
            "(a) residual {ra:.1e}; (b) residual {rb:.1e}; (c) exports finite: {finite}, residual {:.3e}, \
             var(M^3) {v_top:.3e} vs var(M^1) {v_bottom:.3e} [{soft}]",
            decomp.residual
        ),
    )
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_pchier")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (d1, d2) = (dir.path().join("d1"), dir.path().join("d2"));
    for d in [&d1, &d2] {
        run_cli(&["generate", "--preset", "translating_rotor", "--points", "64", "--frames", "5", "--seeds", "0..2", "--noise", "0.01", "--out", &s(d), "--quiet"]);
    }
    let data_same = files(&d1) == files(&d2);
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    for r in [&r1, &r2] {
        run_cli(&[
            "train", "--variant", "classic", "--data", &s(&d1), "--steps", "25", "--seed", "3", "--feature-widths", "8,8,8",
            "--fp-widths", "8;8;8", "--k", "4,4,4", "--out", &s(r), "--quiet",
        ]);
    }
    let mut train_same = true;
    for f in ["loss.csv", "checkpoint.json", "checkpoint.bin"] {
        train_same &= fs::read(r1.join(f)).unwrap() == fs::read(r2.join(f)).unwrap();
    }
    Outcome::check(
        data_same && train_same,
        format!("generate identical: {data_same}; loss CSV and checkpoint identical: {train_same}"),
    )
}

fn fps_oracle(c: &PointCloud, m: usize) -> Vec<usize> {
    let mut picks = vec![0];
    while picks.len() < m {
        let mut best = (f64::NEG_INFINITY, 0);
        for i in (0..c.len()).filter(|i| !picks.contains(i)) {
            let d = picks.iter().map(|&j| sq_dist(c.point(i), c.point(j))).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        picks.push(best.1);
    }
    picks
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut fps_bad = 0;
    for i in 0..500 {
        let n = rng.random_range(1..=64);
        let c = if i % 2 == 0 { random_cloud(&mut rng, n) } else { grid_cloud(&mut rng, n) };
        let m = rng.random_range(1..=n);
        if farthest_point_sample(&c, m, 0).unwrap() != fps_oracle(&c, m) {
            fps_bad += 1;
        }
    }
    let mut knn_bad = 0;
    for i in 0..500 {
        let (nq, nr) = (rng.random_range(1..=20), rng.random_range(1..=40));
        let (q, r) = if i % 2 == 0 {
            (random_cloud(&mut rng, nq), random_cloud(&mut rng, nr))
        } else {
            (grid_cloud(&mut rng, nq), grid_cloud(&mut rng, nr))
        };
        let k = rng.random_range(1..=nr);
        let idx = knn(&q, &r, k).unwrap();
        for a in 0..nq {
            let mut order: Vec<(f64, usize)> = (0..nr).map(|b| (sq_dist(q.point(a), r.point(b)), b)).collect();
            order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            if idx.neighbors(a) != order[..k].iter().map(|x| x.1).collect::<Vec<_>>() {
                knn_bad += 1;
            }
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(4..=20);
        let frames = rng.random_range(2..=4);
        let (din, dout) = (rng.random_range(0..=3), rng.random_range(1..=6));
        let k = rng.random_range(1..=n);
        let mut store = ParamStore::new();
        init_cell_params(&mut store, "c", din, dout, &mut rng);
        let seq: Vec<PointCloud> = (0..frames).map(|_| random_cloud(&mut rng, n)).collect();
        let feats: Vec<Vec<f64>> = (0..frames).map(|_| (0..n * din).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let shift = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let run = |clouds: &[PointCloud]| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut state = CellState::Empty;
            let mut out = Vec::new();
            for (c, f) in clouds.iter().zip(&feats) {
                let input = (din > 0).then(|| tape.constant(n, din, f.clone()).unwrap());
                let o = cell_step(&mut tape, &store, "c", c, input, &state, k, dout).unwrap();
                out.extend_from_slice(tape.value(o.feats));
                state = o.new_state;
            }
            out
        };
        let moved: Vec<PointCloud> = seq.iter().map(|c| c.translated(shift)).collect();
        for (a, b) in run(&seq).iter().zip(run(&moved)) {
            worst = worst.max((a - b).abs());
        }
    }
    Outcome::check(
        fps_bad == 0 && knn_bad == 0 && worst <= 1e-12,
        format!("FPS mismatches {fps_bad}/500; kNN mismatched queries {knn_bad}; cell translation max diff {worst:.1e}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    // numeric arguments select criteria; libtest flags such as --nocapture are ignored
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 8] = [
        ("metric oracle equivalence", criterion_1),
        ("gradient fidelity", criterion_2),
        ("hierarchy arithmetic", criterion_3),
        ("learning beats the baseline", criterion_4),
        ("ablation ordering", criterion_5),
        ("decomposition faithfulness", criterion_6),
        ("determinism", criterion_7),
        ("geometry properties", criterion_8),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome {
                status: Status::Fail,
                detail: format!("panicked: {msg}"),
                enforced: true,
            }
        });
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Inconclusive => "INCONCLUSIVE",
        };
        let note = if outcome.enforced { "" } else { " (reported, not enforced)" };
        eprintln!("criterion {n} [{tag}] {name}: {}{note}", outcome.detail);
        if outcome.status == Status::Fail && note.is_empty() {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        eprintln!("acceptance: all enforced criteria passed");
    } else {
        eprintln!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
