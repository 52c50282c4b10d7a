//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when
//! any criterion fails. Run with `cargo test -p brachy-cli --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod oracles;
#[path = "../../service/tests/common/mod.rs"]
mod service_harness;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use axum::http::StatusCode;
use brachy_core::dosimetry::{
    check_constraints, dvh, metric_d_percent, metric_dxcc, prescription_total, ConstraintSet, DoseGrid, Verdict,
};
use brachy_core::igtlink::{
    body_crc, decode, decode_with_limit, encode, Body, Decoded, FrameDecoder, ImageBody, Message, StatusBody, HEADER_SIZE,
    IMAGE, STATUS, TRANSFORM,
};
use brachy_core::mesh::{
    make_obturator, make_tandem_ring, make_template, parse_stl, sample_surface, LoadOptions, MeshBuilder, ObturatorSpec,
    TemplateSpec, TriangleMesh,
};
use brachy_core::phantom::{pelvis, PhantomSpec};
use brachy_core::registration::{
    apply_transform, fit_landmarks, icp_refine, landmark_residual, IcpConfig, LandmarkPairs, RigidTransform,
};
use brachy_core::segmentation::{expand_margin, growcut};
use brachy_core::volume::{DType, Grid, LabelMap, ScalarVolume, StructureKind};
use brachy_service::WorkflowStage;
use nalgebra::{Point3, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use service_harness::{small_phantom, Harness};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ms(d: Duration) -> String {
    format!("{:.1} ms", d.as_secs_f64() * 1e3)
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_rigid(rng: &mut impl Rng, max_angle_deg: f64, max_shift: f64) -> RigidTransform {
    let angle = rng.random_range(0.0..=max_angle_deg).to_radians();
    let shift = random_unit(rng) * rng.random_range(0.0..=max_shift);
    RigidTransform::from_axis_angle(random_unit(rng), angle, shift)
}

fn random_point(rng: &mut impl Rng, half: f64) -> Point3<f64> {
    Point3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half))
}

// ---------------------------------------------------------------- registration

fn landmark_registration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut cases = Vec::with_capacity(1000);
    while cases.len() < 1000 {
        let model: Vec<Point3<f64>> = (0..3).map(|_| random_point(&mut rng, 60.0)).collect();
        let area = (model[1] - model[0]).cross(&(model[2] - model[0])).norm() / 2.0;
        // well spread: every side ≥ 20 mm and no sliver triangles
        let sides = [(0, 1), (1, 2), (0, 2)].map(|(a, b)| (model[a] - model[b]).norm());
        if sides.iter().any(|&s| s < 20.0) || area < 200.0 {
            continue;
        }
        let truth = random_rigid(&mut rng, 180.0, 100.0);
        let image = apply_transform(&truth, &model);
        cases.push((truth, LandmarkPairs::new(model, image).map_err(|e| e.to_string())?));
    }
    let start = Instant::now();
    let fits: Vec<RigidTransform> = cases.iter().map(|(_, p)| fit_landmarks(p)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut worst_residual = 0f64;
    let mut worst_entry = 0f64;
    for ((truth, pairs), fit) in cases.iter().zip(&fits) {
        worst_residual = worst_residual.max(landmark_residual(fit, pairs));
        worst_entry = worst_entry.max(fit.max_abs_diff(truth));
    }
    let detail = format!("1000 fits, max residual {worst_residual:.1e} mm, max matrix error {worst_entry:.1e}, total {}", ms(elapsed));
    ensure(worst_residual < 1e-9, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(1), || detail.clone())?;
    Ok(detail)
}

fn icp_convergence() -> Outcome {
    let device = make_template(&TemplateSpec::default()).map_err(|e| e.to_string())?;
    let fiducials: Vec<Point3<f64>> =
        ["A1", "A6", "F1"].iter().map(|id| device.hole(id).map(|h| h.position).ok_or(format!("no hole {id}"))).collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = IcpConfig::default();
    let (mut within, mut monotone) = (0, 0);
    let (mut worst_rot, mut worst_trans) = (0f64, 0f64);
    let start = Instant::now();
    for trial in 0..100u64 {
        let truth = random_rigid(&mut rng, 10.0, 5.0);
        let model = sample_surface(&device.mesh, 2000, trial).map_err(|e| e.to_string())?;
        let target = apply_transform(&truth, &model);
        // fiducial picks on the image carry up to 1 mm of error
        let picked: Vec<Point3<f64>> =
            fiducials.iter().map(|p| truth.apply(p) + random_unit(&mut rng) * rng.random_range(0.0..=1.0)).collect();
        let init = fit_landmarks(&LandmarkPairs::new(fiducials.clone(), picked).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let report = icp_refine(&model, &target, &init, &cfg).map_err(|e| e.to_string())?;
        let rot = report.transform.rotation_error_deg(&truth);
        let trans = report.transform.translation_error(&truth);
        worst_rot = worst_rot.max(rot);
        worst_trans = worst_trans.max(trans);
        if rot <= 0.1 && trans <= 0.1 {
            within += 1;
        }
        if report.rms_history.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    let detail = format!(
        "{within}/100 within 0.1 mm and 0.1 deg, {monotone}/100 non-increasing RMS, worst {worst_rot:.2e} deg {worst_trans:.2e} mm, {}",
        ms(start.elapsed())
    );
    ensure(within >= 95 && monotone == 100, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- segmentation

fn growcut_matches_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let legend: BTreeMap<u8, StructureKind> =
        [(1, StructureKind::HrCtv), (2, StructureKind::Other("BACKGROUND".into()))].into_iter().collect();
    let mut cases = 0;
    while cases < 100 {
        let dims = [rng.random_range(2..=6), rng.random_range(2..=6), rng.random_range(1..=3)];
        let grid = Grid::axis_aligned(dims, [1.0; 3], [0.0; 3]).map_err(|e| e.to_string())?;
        let n = grid.voxel_count();
        let voxels: Vec<f32> = (0..n).map(|_| rng.random_range(0..=255) as f32).collect();
        let mut seeds: Vec<u8> = (0..n).map(|_| if rng.random::<f64>() < 0.2 { rng.random_range(1..=2) } else { 0 }).collect();
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n)) % n;
        seeds[a] = 1;
        seeds[b] = 2;
        let intensity: Vec<f64> = voxels.iter().map(|&v| v as f64).collect();
        let vol = ScalarVolume::new(grid.clone(), DType::Float32, voxels, "MR-T2").map_err(|e| e.to_string())?;
        let seed_map = LabelMap::new(grid, seeds.clone(), legend.clone()).map_err(|e| e.to_string())?;
        let got = growcut(&vol, &seed_map, 1000).map_err(|e| e.to_string())?;
        let expected = oracles::growcut_oracle(&intensity, dims, &seeds, 1000);
        ensure(got.voxels == expected, || format!("case {cases} ({dims:?}) differs from the reference automaton"))?;
        cases += 1;
    }
    Ok("100/100 random cases identical to the reference automaton".into())
}

fn margin_matches_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let run = |dims: [usize; 3], spacing: [f64; 3], margin: f64, rng: &mut ChaCha8Rng| -> Result<usize, String> {
        let grid = Grid::axis_aligned(dims, spacing, [0.0; 3]).map_err(|e| e.to_string())?;
        let mut labels = LabelMap::empty(grid);
        let hr = labels.ensure_code(&StructureKind::HrCtv);
        let ir = labels.ensure_code(&StructureKind::IrCtv);
        let bladder = labels.ensure_code(&StructureKind::OarBladder);
        for v in labels.voxels.iter_mut() {
            let r: f64 = rng.random();
            *v = if r < 0.03 {
                hr
            } else if r < 0.06 {
                ir
            } else if r < 0.1 {
                bladder
            } else {
                0
            };
        }
        let i = rng.random_range(0..labels.voxels.len());
        labels.voxels[i] = hr;
        let expected = oracles::margin_oracle(&labels.voxels, dims, spacing, hr, ir, margin);
        let got = expand_margin(&labels, &StructureKind::HrCtv, &StructureKind::IrCtv, margin, None).map_err(|e| e.to_string())?;
        ensure(got.voxels == expected, || format!("{dims:?} spacing {spacing:?} margin {margin} differs from brute force"))?;
        Ok(got.count(&StructureKind::IrCtv))
    };
    for case in 0..50 {
        let dims = [rng.random_range(1..=20), rng.random_range(1..=20), rng.random_range(1..=20)];
        let spacing = if case % 2 == 0 {
            [rng.random_range(0.5..3.0); 3]
        } else {
            [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.5..5.0)]
        };
        let margin = if case == 0 { 10.0 } else { rng.random_range(0.0..12.0) };
        run(dims, spacing, margin, &mut rng)?;
    }
    // the clinical default on a clinically spaced grid
    let ir = run([20, 20, 20], [1.0, 1.0, 2.5], 10.0, &mut rng)?;
    Ok(format!("50/50 random maps (iso and aniso) plus a 10 mm HR to IR case ({ir} IR voxels) match brute force"))
}

// ---------------------------------------------------------------- dosimetry

fn dvh_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let kind = StructureKind::OarBladder;
    for case in 0..100 {
        let dims = [rng.random_range(1..=32), rng.random_range(1..=32), rng.random_range(1..=32)];
        let spacing = [rng.random_range(0.5..4.0), rng.random_range(0.5..4.0), rng.random_range(0.5..4.0)];
        let grid = Grid::axis_aligned(dims, spacing, [0.0; 3]).map_err(|e| e.to_string())?;
        let mut labels = LabelMap::empty(grid.clone());
        let code = labels.ensure_code(&kind);
        let fill: f64 = rng.random_range(0.05..1.0);
        for v in labels.voxels.iter_mut() {
            if rng.random::<f64>() < fill {
                *v = code;
            }
        }
        let i = rng.random_range(0..labels.voxels.len());
        labels.voxels[i] = code;
        let mut dose = DoseGrid::zeros(grid.clone());
        // coarse levels produce ties
        let levels = rng.random_range(1..=20) as f64;
        for d in dose.dose.iter_mut() {
            *d = (rng.random::<f64>() * levels).floor() / levels * 12.0;
        }
        let doses: Vec<f64> = labels.voxels.iter().zip(&dose.dose).filter(|(&l, _)| l == code).map(|(_, &d)| d).collect();
        let curve = dvh(&dose, &labels, &kind).map_err(|e| e.to_string())?;
        let vcc = grid.voxel_volume_cc();
        for x in [2.0, 0.1] {
            let m = metric_dxcc(&curve, x);
            let (d, undersized) = oracles::dx_oracle(&doses, vcc, x);
            ensure(m.dose_gy == d && m.undersized == undersized, || {
                format!("case {case}: D{x}cc {} ({}) vs sort-and-scan {d} ({undersized})", m.dose_gy, m.undersized)
            })?;
        }
        let d90 = metric_d_percent(&curve, 90.0);
        let (o90, _) = oracles::dx_oracle(&doses, vcc, 0.9 * doses.len() as f64 * vcc);
        ensure(d90 == o90, || format!("case {case}: D90 {d90} vs sort-and-scan {o90}"))?;
    }

    // verdict flips across each OAR limit
    let rx = ConstraintSet::default();
    let l = rx.d2cc_limits;
    ensure((l.bladder, l.rectum_sigmoid, l.small_bowel) == (90.0, 70.0, 55.0), || format!("default limits {l:?}"))?;
    let grid = Grid::axis_aligned([20, 20, 20], [2.0; 3], [0.0; 3]).map_err(|e| e.to_string())?;
    let mut flips = 0;
    for (kind, limit) in [
        (StructureKind::OarBladder, l.bladder),
        (StructureKind::OarRectumSigmoid, l.rectum_sigmoid),
        (StructureKind::OarSmallBowel, l.small_bowel),
    ] {
        let mut labels = LabelMap::empty(grid.clone());
        let code = labels.ensure_code(&kind);
        for (v, slot) in labels.voxels.iter_mut().enumerate() {
            if v < 500 {
                *slot = code;
            }
        }
        for (offset, want) in [(-0.1, Verdict::Pass), (0.1, Verdict::Fail)] {
            let f = (limit + offset - 50.0) / 5.0;
            let mut dose = DoseGrid::zeros(grid.clone());
            for (d, &lab) in dose.dose.iter_mut().zip(&labels.voxels) {
                if lab == code {
                    *d = f;
                }
            }
            let rows = check_constraints(&dose, &labels, &rx, 50.0, 5).map_err(|e| e.to_string())?;
            let row = rows
                .iter()
                .find(|r| r.structure == kind.name() && r.metric == "D2cc_total")
                .ok_or_else(|| format!("no D2cc_total row for {kind}"))?;
            ensure(row.verdict == want && row.limit_gy == Some(limit), || format!("{kind} at limit {offset:+}: {row:?}"))?;
            flips += 1;
        }
    }
    Ok(format!("100/100 random grids: D2cc, D0.1cc and D90 equal sort-and-scan; {flips}/6 verdicts flip at limit -0.1/+0.1 Gy"))
}

fn prescription_arithmetic() -> Outcome {
    let grid = Grid::axis_aligned([10, 10, 10], [2.0; 3], [0.0; 3]).map_err(|e| e.to_string())?;
    let mut labels = LabelMap::empty(grid.clone());
    let hr = labels.ensure_code(&StructureKind::HrCtv);
    for (v, slot) in labels.voxels.iter_mut().enumerate() {
        if v % 3 == 0 {
            *slot = hr;
        }
    }
    let rx = ConstraintSet::default();
    let (mut passes, mut fails) = (0, 0);
    for ebrt in [40.0, 45.0, 50.0] {
        for n in [3u32, 4, 5] {
            for d in [5.5, 6.25, 7.0] {
                let total = prescription_total(ebrt, n, d);
                let summed = (0..n).fold(ebrt, |acc, _| acc + d);
                ensure((total - summed).abs() < 1e-12, || format!("{ebrt} + {n} x {d} = {total}, expected {summed}"))?;
                let mut dose = DoseGrid::zeros(grid.clone());
                for (x, &lab) in dose.dose.iter_mut().zip(&labels.voxels) {
                    *x = if lab == hr { d } else { 0.0 };
                }
                let rows = check_constraints(&dose, &labels, &rx, ebrt, n).map_err(|e| e.to_string())?;
                let row = rows.iter().find(|r| r.metric == "D90_total").ok_or("no D90_total row")?;
                let want = if (80.0..=90.0).contains(&summed) { Verdict::Pass } else { Verdict::Fail };
                ensure(row.verdict == want && (row.value_gy.unwrap_or(f64::NAN) - summed).abs() < 1e-9, || {
                    format!("{ebrt} + {n} x {d}: {row:?}")
                })?;
                if want == Verdict::Pass {
                    passes += 1;
                } else {
                    fails += 1;
                }
            }
        }
    }
    Ok(format!("27/27 combinations sum correctly; D90_total verdict {passes} pass / {fails} fail as expected"))
}

// ---------------------------------------------------------------- protocol

fn ascii_name(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let len = rng.random_range(min..=max);
    (0..len).map(|_| rng.random_range(0x20u8..0x7f) as char).collect()
}

fn random_message(rng: &mut impl Rng) -> Message {
    let device_name = ascii_name(rng, 0, 20);
    let timestamp = rng.random();
    let (type_name, body) = match rng.random_range(0..4) {
        0 => (TRANSFORM.to_string(), Body::Transform { matrix: std::array::from_fn(|_| rng.random_range(-1e4f32..1e4)) }),
        1 => (
            STATUS.to_string(),
            Body::Status(StatusBody {
                code: rng.random(),
                subcode: rng.random(),
                error_name: ascii_name(rng, 0, 20),
                message: ascii_name(rng, 0, 80),
            }),
        ),
        2 => {
            let dims = [rng.random_range(0..=4u16), rng.random_range(0..=4u16), rng.random_range(0..=3u16)];
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let (dtype, voxels) = if rng.random() {
                (DType::Float32, (0..n).map(|_| rng.random_range(-1e3f32..1e3)).collect())
            } else {
                (DType::Uint8, (0..n).map(|_| rng.random_range(0..=255u8) as f32).collect())
            };
            let spacing = std::array::from_fn(|_| rng.random_range(0.1f32..5.0));
            (IMAGE.to_string(), Body::Image(ImageBody { dims, spacing, dtype, voxels }))
        }
        _ => {
            let mut name = ascii_name(rng, 1, 12);
            if [TRANSFORM, STATUS, IMAGE].contains(&name.as_str()) {
                name = "CUSTOM".into();
            }
            let len = rng.random_range(0..64);
            (name, Body::Unknown { raw: (0..len).map(|_| rng.random()).collect() })
        }
    };
    Message { type_name, device_name, timestamp, body }
}

fn protocol_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    ensure(HEADER_SIZE == 58, || format!("header size {HEADER_SIZE}"))?;
    for i in 0..10_000 {
        let msg = random_message(&mut rng);
        let bytes = encode(&msg).map_err(|e| format!("encode {i}: {e}"))?;
        let body_size = u64::from_be_bytes(bytes[42..50].try_into().unwrap()) as usize;
        ensure(bytes.len() - body_size == 58, || format!("message {i}: {} bytes for a {body_size}-byte body", bytes.len()))?;
        match decode(&bytes) {
            Ok(Decoded::Message { message, consumed }) => {
                ensure(message == msg && consumed == bytes.len(), || format!("message {i} did not round-trip"))?
            }
            other => return Err(format!("message {i}: {other:?}")),
        }
    }

    // interleaved known and unknown types through the streaming decoder
    let sent: Vec<Message> = (0..1000).map(|_| random_message(&mut rng)).collect();
    let stream: Vec<u8> = sent.iter().flat_map(|m| encode(m).unwrap()).collect();
    let unknown = sent.iter().filter(|m| matches!(m.body, Body::Unknown { .. })).count();
    let mut decoder = FrameDecoder::new(1 << 20);
    let mut received = Vec::new();
    let mut at = 0;
    while at < stream.len() {
        let step = rng.random_range(1..=300).min(stream.len() - at);
        decoder.push(&stream[at..at + step]);
        at += step;
        while let Some(m) = decoder.next_message() {
            received.push(m.map_err(|e| format!("stream: {e}"))?);
        }
    }
    ensure(received == sent && decoder.buffered() == 0, || format!("stream yielded {} of 1000 messages", received.len()))?;
    Ok(format!("10000/10000 round trips, header 58 bytes, 1000-message stream ({unknown} unknown types) in random chunks"))
}

fn mutate(rng: &mut impl Rng, pool: &[Vec<u8>]) -> Vec<u8> {
    let mut b = pool[rng.random_range(0..pool.len())].clone();
    for _ in 0..rng.random_range(1..=4) {
        match rng.random_range(0..6) {
            0 if !b.is_empty() => {
                let i = rng.random_range(0..b.len());
                b[i] ^= 1 << rng.random_range(0..8);
            }
            1 if !b.is_empty() => {
                let i = rng.random_range(0..b.len());
                b[i] = rng.random();
            }
            2 => b.truncate(rng.random_range(0..=b.len())),
            3 => b.extend((0..rng.random_range(1..32)).map(|_| rng.random::<u8>())),
            4 if b.len() >= HEADER_SIZE => {
                let size: u64 = match rng.random_range(0..3) {
                    0 => rng.random(),
                    1 => rng.random_range(0..256),
                    _ => (b.len() - HEADER_SIZE) as u64,
                };
                b[42..50].copy_from_slice(&size.to_be_bytes());
            }
            _ if b.len() >= HEADER_SIZE => {
                // also mutate the type field so every body parser sees garbage
                let name: &[u8] = [TRANSFORM, STATUS, IMAGE][rng.random_range(0..3)].as_bytes();
                b[2..14].fill(0);
                b[2..2 + name.len()].copy_from_slice(name);
            }
            _ => {}
        }
    }
    // half the time make the checksum agree so the body decoders run
    if b.len() >= HEADER_SIZE && rng.random() {
        let size = u64::from_be_bytes(b[42..50].try_into().unwrap());
        if size <= (b.len() - HEADER_SIZE) as u64 {
            let crc = body_crc(&b[HEADER_SIZE..HEADER_SIZE + size as usize]);
            b[50..58].copy_from_slice(&crc.to_be_bytes());
        }
    }
    b
}

fn protocol_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let pool: Vec<Vec<u8>> = (0..256).map(|_| encode(&random_message(&mut rng)).unwrap()).collect();
    let (mut messages, mut errors, mut partial) = (0u64, 0u64, 0u64);
    let start = Instant::now();
    let mut buf = Vec::new();
    for i in 0..1_000_000u64 {
        if i % 2 == 0 {
            buf.clear();
            buf.resize(rng.random_range(0..=200), 0);
            rng.fill_bytes(&mut buf);
        } else {
            buf = mutate(&mut rng, &pool);
        }
        let result = catch_unwind(AssertUnwindSafe(|| decode_with_limit(&buf, 1 << 16)));
        match result {
            Err(_) => return Err(format!("decoder panicked on buffer {i}: {:02x?}", &buf)),
            Ok(Ok(Decoded::Message { consumed, .. })) => {
                ensure(consumed <= buf.len(), || format!("buffer {i}: consumed {consumed} of {}", buf.len()))?;
                messages += 1;
            }
            Ok(Ok(Decoded::NeedMore { .. })) => partial += 1,
            Ok(Err(e)) => {
                ensure(e.consumed().is_none_or(|c| c <= buf.len()), || format!("buffer {i}: {e:?}"))?;
                errors += 1;
            }
        }
    }
    Ok(format!(
        "1000000 buffers without a panic ({messages} decoded, {errors} rejected, {partial} incomplete), {}",
        ms(start.elapsed())
    ))
}

// ---------------------------------------------------------------- service

fn replan_latency(rt: &tokio::runtime::Runtime) -> Outcome {
    rt.block_on(async {
        let ph = pelvis(&PhantomSpec::default());
        let h = Harness::new();
        h.case_in_preplan("replan", &ph).await;
        let (model, image) = ph.fiducials();
        let pts = |v: &[Point3<f64>]| v.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        let (s, v) = h
            .call("POST", "/cases/replan/registration", Some(json!({ "model_points": pts(&model), "image_points": pts(&image) })))
            .await;
        ensure(s == StatusCode::OK, || format!("registration: {v}"))?;
        let holes: Vec<String> = ph.device.holes.iter().map(|h| h.id.clone()).collect();
        ensure(holes.len() == 36, || format!("{} holes", holes.len()))?;
        let active = &holes[..30];
        let mut v = Value::Null;
        for id in active {
            let (s, body) = h.call("PATCH", "/cases/replan/plan", Some(json!({ "hole_id": id, "edit": { "op": "place", "depth_mm": 60.0 } }))).await;
            ensure(s == StatusCode::OK, || format!("place {id}: {body}"))?;
            v = body;
        }
        let plan = &v["plan"];
        let on = plan["needles"].as_array().map(|n| n.iter().filter(|x| x["active"] == true).count()).unwrap_or(0);
        ensure(on == 30 && plan["needles"][0]["dwell_step_mm"] == 5.0, || format!("plan before timing: {on} active"))?;

        let mut rng = ChaCha8Rng::seed_from_u64(808);
        let mut times = Vec::with_capacity(100);
        for _ in 0..100 {
            let id = &active[rng.random_range(0..active.len())];
            let depth = rng.random_range(60..=180) as f64 / 2.0;
            let edit = json!({ "hole_id": id, "edit": { "op": "set_depth", "depth_mm": depth } });
            let start = Instant::now();
            let (s, body) = h.call("PATCH", "/cases/replan/plan", Some(edit)).await;
            times.push(start.elapsed());
            ensure(s == StatusCode::OK && body["report"]["verdicts"].is_array(), || format!("edit {id} to {depth}: {body}"))?;
        }
        times.sort();
        let p95 = times[94];
        let detail = format!("100 edits on 64^3 with 30/36 needles: median {}, P95 {}, max {}", ms(times[49]), ms(p95), ms(times[99]));
        ensure(p95 < Duration::from_secs(1), || detail.clone())?;
        Ok(detail)
    })
}

fn workflow_run(dir: &std::path::Path) -> Result<(Vec<u8>, Value), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_brachy"))
        .args(["--json", "workflow", "--data", dir.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let v: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    Ok((out.stdout, v))
}

/// Drives a fresh case to `stage` through the HTTP API.
async fn case_at(h: &Harness, id: &str, stage: WorkflowStage) -> Result<(), String> {
    use WorkflowStage::*;
    let p = small_phantom();
    let advance = |to: WorkflowStage| {
        let uri = format!("/cases/{id}/advance");
        async move {
            let (s, v) = h.call("POST", &uri, Some(json!({ "to": to }))).await;
            ensure(s == StatusCode::OK, || format!("advance to {to}: {v}"))
        }
    };
    match stage {
        Arrival => {
            let (s, v) = h.call("POST", "/cases", Some(json!({ "case_id": id }))).await;
            ensure(s == StatusCode::CREATED, || format!("create: {v}"))?;
        }
        Diagnosis => {
            Box::pin(case_at(h, id, Arrival)).await?;
            let (s, v) = h.upload(&format!("/cases/{id}/volumes"), p.volume.to_svol_bytes().unwrap()).await;
            ensure(s == StatusCode::OK, || format!("upload: {v}"))?;
            let (s, v) = h.upload(&format!("/cases/{id}/labels"), p.labels.to_svol_bytes().unwrap()).await;
            ensure(s == StatusCode::OK, || format!("labels: {v}"))?;
        }
        DeviceSelection => {
            Box::pin(case_at(h, id, Diagnosis)).await?;
            let (s, v) = h.call("POST", &format!("/cases/{id}/eligibility"), Some(json!({ "eligibility": "eligible" }))).await;
            ensure(s == StatusCode::OK, || format!("eligibility: {v}"))?;
        }
        Preplan => {
            Box::pin(case_at(h, id, DeviceSelection)).await?;
            let (s, v) = h.call("POST", &format!("/cases/{id}/device-comparison"), Some(json!({ "candidates": ["template-6x6"] }))).await;
            ensure(s == StatusCode::OK, || format!("comparison: {v}"))?;
            let (s, v) = h.call("POST", &format!("/cases/{id}/device-selection"), Some(json!({ "device": "template-6x6" }))).await;
            ensure(s == StatusCode::OK, || format!("selection: {v}"))?;
        }
        Intraop => {
            Box::pin(case_at(h, id, Preplan)).await?;
            advance(Intraop).await?;
        }
        Postop => {
            Box::pin(case_at(h, id, Intraop)).await?;
            advance(Postop).await?;
        }
        Closed => {
            Box::pin(case_at(h, id, Postop)).await?;
            advance(Closed).await?;
        }
    }
    let (_, v) = h.call("GET", &format!("/cases/{id}"), None).await;
    ensure(v["workflow"]["stage"] == stage.as_str(), || format!("{id} expected at {stage}: {}", v["workflow"]["stage"]))
}

fn end_to_end(rt: &tokio::runtime::Runtime) -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (out_a, va) = workflow_run(a.path())?;
    let (out_b, vb) = workflow_run(b.path())?;
    let elapsed = start.elapsed();
    ensure(out_a == out_b, || "workflow stdout differs between runs".into())?;
    ensure(va["archive_sha256"] == vb["archive_sha256"] && va["archive_sha256"].is_string(), || "archive digests differ".into())?;
    let overlay = &va["overlay"];
    ensure(
        overlay["status"] == "complete" && ["volume", "device", "transform"].iter().all(|k| overlay[k]["hash"].is_string()),
        || format!("overlay {overlay}"),
    )?;
    let stages: Vec<&str> = va["steps"].as_array().ok_or("no steps")?.iter().filter_map(|s| s["stage"].as_str()).collect();
    ensure(stages.first() == Some(&"ARRIVAL") && stages.last() == Some(&"POSTOP"), || format!("stages {stages:?}"))?;

    // the workflow graph
    use WorkflowStage::*;
    let edges = [
        (Arrival, Diagnosis),
        (Diagnosis, DeviceSelection),
        (Diagnosis, Closed),
        (DeviceSelection, Preplan),
        (Preplan, Intraop),
        (Intraop, Postop),
        (Postop, Closed),
    ];
    for from in WorkflowStage::ALL {
        for to in WorkflowStage::ALL {
            ensure(from.can_advance_to(to) == edges.contains(&(from, to)), || format!("graph disagrees on {from} -> {to}"))?;
        }
    }
    let (rejected, taken) = rt.block_on(async {
        let h = Harness::new();
        let (mut rejected, mut taken) = (0, 0);
        for from in WorkflowStage::ALL {
            let id = format!("m-{}", from.as_str().to_lowercase().replace('_', "-"));
            case_at(&h, &id, from).await?;
            for to in WorkflowStage::ALL {
                if edges.contains(&(from, to)) {
                    continue;
                }
                let (s, v) = h.call("POST", &format!("/cases/{id}/advance"), Some(json!({ "to": to }))).await;
                ensure(s == StatusCode::CONFLICT && v["error"] == "state_error", || format!("{from} -> {to}: {s} {v}"))?;
                let (_, now) = h.call("GET", &format!("/cases/{id}"), None).await;
                ensure(now["workflow"]["stage"] == from.as_str(), || format!("{from} -> {to} moved the case"))?;
                rejected += 1;
            }
        }
        for (n, (from, to)) in edges.iter().enumerate() {
            let id = format!("e-{n}");
            case_at(&h, &id, *from).await?;
            let (s, v) = match (from, to) {
                (Diagnosis, DeviceSelection) => h.call("POST", &format!("/cases/{id}/eligibility"), Some(json!({ "eligibility": "eligible" }))).await,
                (Diagnosis, Closed) => h.call("POST", &format!("/cases/{id}/eligibility"), Some(json!({ "eligibility": "ineligible" }))).await,
                (DeviceSelection, Preplan) => {
                    h.call("POST", &format!("/cases/{id}/device-comparison"), Some(json!({ "candidates": ["template-6x6"] }))).await;
                    h.call("POST", &format!("/cases/{id}/device-selection"), Some(json!({ "device": "template-6x6" }))).await
                }
                _ => h.call("POST", &format!("/cases/{id}/advance"), Some(json!({ "to": to }))).await,
            };
            ensure(s == StatusCode::OK, || format!("{from} -> {to}: {v}"))?;
            let (_, now) = h.call("GET", &format!("/cases/{id}"), None).await;
            ensure(now["workflow"]["stage"] == to.as_str(), || format!("{from} -> {to} ended at {}", now["workflow"]["stage"]))?;
            taken += 1;
        }
        Ok::<_, String>((rejected, taken))
    })?;
    Ok(format!(
        "two workflow runs byte-identical ({}), overlay complete with 3 refs; {rejected}/42 non-edges rejected, {taken}/7 edges taken",
        ms(elapsed)
    ))
}

// ---------------------------------------------------------------- meshes

fn random_mesh(rng: &mut impl Rng, name: &str) -> TriangleMesh {
    let mut b = MeshBuilder::default();
    for _ in 0..rng.random_range(1..200) {
        let a = random_point(rng, 100.0);
        b.triangle(a, a + random_unit(rng) * rng.random_range(1.0..20.0), a + random_unit(rng) * rng.random_range(1.0..20.0));
    }
    b.build(name)
}

fn stl_round_trips() -> Outcome {
    let err = |e: brachy_core::mesh::MeshError| e.to_string();
    let mut corpus = vec![
        make_template(&TemplateSpec::default()).map_err(err)?.mesh,
        make_template(&TemplateSpec { name: "template-fine".into(), rows: 9, cols: 9, pitch: 5.0, ..TemplateSpec::default() })
            .map_err(err)?
            .mesh,
        make_obturator(&ObturatorSpec::default()).map_err(err)?.mesh,
        make_tandem_ring(30.0, 3.0, 60.0, 24).map_err(err)?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    while corpus.len() < 10 {
        let name = format!("random-{}", corpus.len());
        corpus.push(random_mesh(&mut rng, &name));
    }
    let mut worst = 0f32;
    for mesh in &corpus {
        let binary = mesh.to_binary_stl();
        let back = parse_stl(&binary, LoadOptions::default()).map_err(err)?;
        ensure(back.to_binary_stl() == binary, || format!("{}: binary re-encode differs", mesh.name))?;
        ensure(back.vertices.len() == mesh.vertices.len() && back.triangles.len() == mesh.triangles.len(), || {
            format!("{}: topology changed", mesh.name)
        })?;
        for t in 0..mesh.triangles.len() {
            for c in 0..3 {
                let (a, b) = (mesh.vertices[mesh.triangles[t][c] as usize], back.vertices[back.triangles[t][c] as usize]);
                ensure(a.map(f32::to_bits) == b.map(f32::to_bits), || format!("{}: vertex bits changed", mesh.name))?;
            }
        }
        let ascii = parse_stl(mesh.to_ascii_stl().as_bytes(), LoadOptions::default()).map_err(err)?;
        ensure(ascii.triangles.len() == back.triangles.len(), || format!("{}: ascii triangle count", mesh.name))?;
        for t in 0..back.triangles.len() {
            for c in 0..3 {
                let (a, b) = (ascii.vertices[ascii.triangles[t][c] as usize], back.vertices[back.triangles[t][c] as usize]);
                for k in 0..3 {
                    worst = worst.max((a[k] - b[k]).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("ascii and binary differ by {worst}"))?;
    Ok(format!("10 meshes: binary round trip bit-exact, ascii vs binary max difference {worst:e}"))
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("registration.landmarks", Box::new(landmark_registration)),
        ("registration.icp", Box::new(icp_convergence)),
        ("segmentation.growcut", Box::new(growcut_matches_oracle)),
        ("segmentation.margin", Box::new(margin_matches_oracle)),
        ("dosimetry.dvh", Box::new(dvh_metrics)),
        ("dosimetry.prescription", Box::new(prescription_arithmetic)),
        ("igtlink.round_trip", Box::new(protocol_round_trips)),
        ("igtlink.fuzz", Box::new(protocol_fuzz)),
        ("service.replan_latency", Box::new(|| replan_latency(&rt))),
        ("workflow.end_to_end", Box::new(|| end_to_end(&rt))),
        ("mesh.stl", Box::new(stl_round_trips)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = ms(start.elapsed());
        match outcome {
            Ok(detail) => println!("PASS {name:<24} {detail} [{took}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name:<24} {detail} [{took}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
