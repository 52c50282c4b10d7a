use brachy_wasm_demo::{fraction_dose_for, isodose_levels, Demo};
use serde_json::Value;

fn demo() -> Demo {
    Demo::new(40, 7).unwrap()
}

fn verdict<'a>(rows: &'a Value, structure: &str, metric: &str) -> &'a Value {
    rows.as_array().unwrap().iter().find(|r| r["structure"] == structure && r["metric"] == metric).unwrap()
}

#[test]
fn starts_from_the_reference_plan() {
    let d = demo();
    let holes: Value = serde_json::from_str(&d.holes_json()).unwrap();
    let holes = holes.as_array().unwrap();
    assert_eq!(holes.len(), 36);
    let active = holes.iter().filter(|h| h["active"] == true).count();
    assert_eq!(active, d.plan().active_needles().count());
    assert!(active > 0);
    assert!(d.dose().max() > 0.0);
}

#[test]
fn needle_edits_update_the_verdicts() {
    let mut d = demo();
    let before: Value = serde_json::from_str(&d.verdicts_json()).unwrap();
    let hr_before = verdict(&before, "HR_CTV", "D90_total")["value_gy"].as_f64().unwrap();

    let active: Vec<String> = d.plan().active_needles().map(|n| n.hole_id.clone()).collect();
    for id in &active {
        d.set_needle(id, false, 0.0).unwrap();
    }
    let after: Value = serde_json::from_str(&d.verdicts_json()).unwrap();
    assert_eq!(d.dose().max(), 0.0);
    let hr_after = verdict(&after, "HR_CTV", "D90_total")["value_gy"].as_f64().unwrap();
    assert_eq!(hr_after, 50.0);
    assert!(hr_before > hr_after);
    assert_eq!(verdict(&after, "HR_CTV", "D90_total")["verdict"], "fail");

    let out: Value = serde_json::from_str(&d.set_needle(&active[0], true, 60.0).unwrap()).unwrap();
    assert!(verdict(&out, "HR_CTV", "D90_total")["value_gy"].as_f64().unwrap() > 50.0);
}

#[test]
fn invalid_edits_leave_the_plan_alone() {
    let mut d = demo();
    let before = d.verdicts_json();
    assert!(d.set_needle("Z9", true, 40.0).is_err());
    assert!(d.set_needle("A1", true, 1e6).is_err());
    assert_eq!(d.verdicts_json(), before);
}

#[test]
fn slices_are_rgba_with_isodose_lines() {
    let d = demo();
    for axis in 0..3 {
        let (w, h) = (d.slice_width(axis), d.slice_height(axis));
        let px = d.slice_rgba(axis, d.slice_count(axis) / 2).unwrap();
        assert_eq!(px.len(), w * h * 4);
        assert!(px.chunks(4).all(|p| p[3] == 255));
    }
    assert!(d.slice_rgba(2, 400).is_err());

    // the prescription isodose crosses the axial slice through the target center
    let g = &d.dose().grid;
    let k = ((60.0 - g.origin[2]) / g.spacing[2]).round() as usize;
    let px = d.slice_rgba(2, k).unwrap();
    let [_, (_, rx_color), _] = isodose_levels();
    assert!(px.chunks(4).any(|p| p[..3] == rx_color));
    assert_eq!(fraction_dose_for(85.0), 7.0);
}

#[test]
fn dvh_curves_are_monotone() {
    let d = demo();
    let curves: Value = serde_json::from_str(&d.dvh_json()).unwrap();
    let names: Vec<&str> = curves.as_array().unwrap().iter().map(|c| c["structure"].as_str().unwrap()).collect();
    for s in ["HR_CTV", "OAR_BLADDER", "OAR_RECTUM_SIGMOID"] {
        assert!(names.contains(&s), "{names:?}");
    }
    for c in curves.as_array().unwrap() {
        let pts = c["points"].as_array().unwrap();
        assert_eq!(pts[0][1], 100.0);
        for w in pts.windows(2) {
            assert!(w[1][0].as_f64() >= w[0][0].as_f64());
            assert!(w[1][1].as_f64() <= w[0][1].as_f64(), "{} {:?}", c["structure"], w);
        }
    }
}

#[test]
fn icp_demo_recovers_a_small_motion() {
    let d = demo();
    let r: Value = serde_json::from_str(&d.icp_demo(3.0, 2.0, 1).unwrap()).unwrap();
    assert!(r["rotation_error_deg"].as_f64().unwrap() < 0.1, "{r}");
    assert!(r["translation_error_mm"].as_f64().unwrap() < 0.1, "{r}");
    let hist: Vec<f64> = serde_json::from_value(r["rms_history"].clone()).unwrap();
    assert!(hist.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn rejects_unreasonable_sizes() {
    assert!(Demo::new(4, 1).is_err());
}
