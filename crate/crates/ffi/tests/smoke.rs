//! Exercises every exported C-ABI function through the Rust side of the
//! boundary: success paths against the underlying library, error codes for
//! null pointers, bad UTF-8, bad files, and bad values, and string/handle
//! ownership round-trips.

use std::ffi::{c_char, CStr, CString};

use iqa_rl_ffi::*;

/// Reads and frees a string returned by the library.
unsafe fn take_string(ptr: *mut c_char) -> String {
    assert!(!ptr.is_null());
    let text = unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .expect("library strings are UTF-8")
        .to_string();
    unsafe { iqarl_string_free(ptr) };
    text
}

unsafe fn last_error() -> String {
    unsafe { take_string(iqarl_last_error_message()) }
}

#[test]
fn engine_lifecycle_and_score_reward() {
    unsafe {
        let engine = iqarl_engine_new();
        assert!(!engine.is_null());

        // One bandwidth from the target: exp(-1/2) under the default sigma.
        let mut reward = 0.0;
        assert_eq!(iqarl_score_reward(engine, 3.35, 3.0, &mut reward), IQARL_OK);
        assert!((reward - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(last_error(), "");

        // Null handle and null out pointer are rejected, not dereferenced.
        assert_eq!(
            iqarl_score_reward(std::ptr::null(), 3.0, 3.0, &mut reward),
            IQARL_ERR_NULL_POINTER
        );
        assert_eq!(
            iqarl_score_reward(engine, 3.0, 3.0, std::ptr::null_mut()),
            IQARL_ERR_NULL_POINTER
        );
        assert!(!last_error().is_empty());

        iqarl_engine_free(engine);
        iqarl_engine_free(std::ptr::null_mut()); // no-op
    }
}

#[test]
fn engine_from_file_distinguishes_failure_kinds() {
    unsafe {
        // A valid file overrides the bandwidth.
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("engine.conf");
        std::fs::write(&good, "sigma = 0.5\n").unwrap();
        let path = CString::new(good.to_str().unwrap()).unwrap();
        let engine = iqarl_engine_from_file(path.as_ptr());
        assert!(!engine.is_null());
        let mut reward = 0.0;
        assert_eq!(iqarl_score_reward(engine, 3.5, 3.0, &mut reward), IQARL_OK);
        assert!((reward - (-0.5f64).exp()).abs() < 1e-12, "sigma override applies");
        iqarl_engine_free(engine);

        // Missing file: null handle, I/O-flavored message.
        let missing = CString::new(dir.path().join("void.conf").to_str().unwrap()).unwrap();
        assert!(iqarl_engine_from_file(missing.as_ptr()).is_null());
        assert!(!last_error().is_empty());

        // Unknown key: null handle, validation message naming the key.
        let bad = dir.path().join("bad.conf");
        std::fs::write(&bad, "warp_drive = 9\n").unwrap();
        let path = CString::new(bad.to_str().unwrap()).unwrap();
        assert!(iqarl_engine_from_file(path.as_ptr()).is_null());
        assert!(last_error().contains("warp_drive"));

        // Null path.
        assert!(iqarl_engine_from_file(std::ptr::null()).is_null());
    }
}

#[test]
fn format_reward_is_total_over_the_boundary() {
    let valid = iqa_rl::response::serialize_response(&iqa_rl::response::StructuredResponse {
        think: iqa_rl::response::ThinkBlock {
            summary: "sharp capture".to_string(),
            improvements: "reduce noise".to_string(),
            issues: "avoid halos".to_string(),
            decision_rationale: "noise settles it".to_string(),
            raw: String::new(),
        },
        answer: iqa_rl::response::AnswerBlock {
            bbox: iqa_rl::response::BBox::SENTINEL,
            rating: 3.75,
            tool: iqa_rl::response::Tool::Final,
        },
        turn_index: 1,
    });
    unsafe {
        let text = CString::new(valid).unwrap();
        let mut reward = -1.0;
        assert_eq!(
            iqarl_format_reward(text.as_ptr(), 640, 480, 1, &mut reward),
            IQARL_OK
        );
        assert_eq!(reward, 1.0);

        // Garbage parses to a zero reward, not an error.
        let garbage = CString::new("<think>eh</think> no answer").unwrap();
        assert_eq!(
            iqarl_format_reward(garbage.as_ptr(), 640, 480, 1, &mut reward),
            IQARL_OK
        );
        assert_eq!(reward, 0.0);

        // Invalid UTF-8 is reported as such.
        let bytes = CString::new(vec![0xffu8, 0xfe, 0x80]).unwrap();
        assert_eq!(
            iqarl_format_reward(bytes.as_ptr(), 640, 480, 1, &mut reward),
            IQARL_ERR_UTF8
        );

        // Null text.
        assert_eq!(
            iqarl_format_reward(std::ptr::null(), 640, 480, 1, &mut reward),
            IQARL_ERR_NULL_POINTER
        );
    }
}

fn rollout_line(query_id: &str, rollout_index: usize, r_gt: f64, rating: f64) -> String {
    let turn_text = iqa_rl::response::serialize_response(&iqa_rl::response::StructuredResponse {
        think: iqa_rl::response::ThinkBlock {
            summary: "fine".to_string(),
            improvements: "denoise".to_string(),
            issues: "halos".to_string(),
            decision_rationale: "texture".to_string(),
            raw: String::new(),
        },
        answer: iqa_rl::response::AnswerBlock {
            bbox: iqa_rl::response::BBox::SENTINEL,
            rating,
            tool: iqa_rl::response::Tool::Final,
        },
        turn_index: 1,
    });
    serde_json::json!({
        "query_id": query_id,
        "rollout_index": rollout_index,
        "r_gt": r_gt,
        "turns": [{
            "text": turn_text,
            "tokens": [{
                "pos": 0,
                "text": format!("{rating:.2}"),
                "lp_old": -1.0,
                "lp_new": -0.9,
                "valid": 1,
                "in_answer": true,
                "is_numeric": true,
                "dist_old": {"a": 0.5, "b": 0.5},
                "dist_new": {"a": 0.5, "b": 0.5},
            }],
        }],
    })
    .to_string()
}

#[test]
fn reward_rollouts_round_trips_jsonl() {
    let jsonl = [
        rollout_line("qa", 0, 4.2, 4.0),
        rollout_line("qa", 1, 4.2, 3.5),
        rollout_line("qb", 0, 2.1, 2.0),
        rollout_line("qb", 1, 2.1, 2.5),
    ]
    .join("\n");
    unsafe {
        let engine = iqarl_engine_new();
        let input = CString::new(jsonl).unwrap();
        let mut annotated: *mut c_char = std::ptr::null_mut();
        let mut report: *mut c_char = std::ptr::null_mut();
        assert_eq!(
            iqarl_reward_rollouts(engine, input.as_ptr(), &mut annotated, &mut report),
            IQARL_OK
        );
        let annotated = take_string(annotated);
        assert_eq!(annotated.lines().count(), 4);
        assert!(annotated.lines().all(|l| l.contains("\"rewards\"")));
        let report: serde_json::Value = serde_json::from_str(&take_string(report)).unwrap();
        assert_eq!(report["groups"], 2);
        assert_eq!(report["format_rate"], 1.0);
        assert!(report["objective"]["objective"].is_f64());

        // Malformed input: validation, and the error names the line.
        let bad = CString::new("{broken").unwrap();
        assert_eq!(
            iqarl_reward_rollouts(engine, bad.as_ptr(), std::ptr::null_mut(), std::ptr::null_mut()),
            IQARL_ERR_VALIDATION
        );
        assert!(last_error().contains("line 1"));
        iqarl_engine_free(engine);
    }
}

#[test]
fn vrf_filter_builds_outcome_document() {
    let answer = serde_json::json!({"bbox_2d": [0,0,0,0], "rating": 3.0, "tool": "final"});
    let record = serde_json::json!({
        "sample_id": "s0",
        "image_path": "s0.ppm",
        "with_image": {"answer": answer, "entropy": 0.5},
        "without_image": {"answer": answer, "entropy": 0.5},
    })
    .to_string();
    unsafe {
        let engine = iqarl_engine_new();
        let input = CString::new(record).unwrap();
        let mut out: *mut c_char = std::ptr::null_mut();
        assert_eq!(iqarl_vrf_filter(engine, input.as_ptr(), &mut out), IQARL_OK);
        let doc: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
        // Identical generations mean the image contributed nothing.
        assert_eq!(doc["outcomes"][0]["verdict"], "discard");
        assert_eq!(doc["summary"]["total"], 1);
        assert_eq!(doc["summary"]["vrf_discarded"], 1);
        iqarl_engine_free(engine);
    }
}

#[test]
fn compute_hints_matches_library() {
    let mut rgb = Vec::new();
    for i in 0..(4 * 3 * 3) {
        rgb.push((i * 17 % 251) as u8);
    }
    unsafe {
        let mut hints = IqarlHints {
            brightness: 0.0,
            contrast: 0.0,
            colorfulness: 0.0,
            sharpness: 0.0,
        };
        assert_eq!(
            iqarl_compute_hints(rgb.as_ptr(), rgb.len(), 4, 3, &mut hints),
            IQARL_OK
        );
        let expect = iqa_rl::hints::compute_hints(&rgb, 4, 3).unwrap();
        assert!((hints.brightness - expect.brightness).abs() < 1e-15);
        assert!((hints.contrast - expect.contrast).abs() < 1e-15);
        assert!((hints.colorfulness - expect.colorfulness).abs() < 1e-15);
        assert!((hints.sharpness - expect.sharpness).abs() < 1e-15);

        // Buffer/dimension mismatch is a validation failure.
        assert_eq!(
            iqarl_compute_hints(rgb.as_ptr(), rgb.len() - 1, 4, 3, &mut hints),
            IQARL_ERR_VALIDATION
        );
        assert_eq!(
            iqarl_compute_hints(std::ptr::null(), 0, 4, 3, &mut hints),
            IQARL_ERR_NULL_POINTER
        );
    }
}

#[test]
fn correlation_and_diversity_metrics() {
    let xs = [1.0, 2.0, 2.0, 3.0, 5.0];
    let ys = [1.2, 1.9, 2.4, 2.9, 4.1];
    unsafe {
        let mut out = 0.0;
        assert_eq!(iqarl_plcc(xs.as_ptr(), ys.as_ptr(), 5, &mut out), IQARL_OK);
        assert!((out - iqa_rl::metrics::plcc(&xs, &ys).unwrap()).abs() < 1e-15);
        assert_eq!(iqarl_srcc(xs.as_ptr(), ys.as_ptr(), 5, &mut out), IQARL_OK);
        assert!((out - iqa_rl::metrics::srcc(&xs, &ys).unwrap()).abs() < 1e-15);
        assert_eq!(
            iqarl_unique_score_ratio(xs.as_ptr(), 5, 2, &mut out),
            IQARL_OK
        );
        assert!((out - 0.8).abs() < 1e-15, "four distinct of five");

        // Degenerate inputs surface as validation errors.
        assert_eq!(
            iqarl_plcc(xs.as_ptr(), ys.as_ptr(), 1, &mut out),
            IQARL_ERR_VALIDATION
        );
        assert!(!last_error().is_empty());
        assert_eq!(
            iqarl_plcc(std::ptr::null(), ys.as_ptr(), 5, &mut out),
            IQARL_ERR_NULL_POINTER
        );
    }
}

#[test]
fn train_sim_reports_run() {
    unsafe {
        let mut out: *mut c_char = std::ptr::null_mut();
        assert_eq!(iqarl_train_sim(true, 11, 3, &mut out), IQARL_OK);
        let report: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
        assert_eq!(report["klc_on"], true);
        assert_eq!(report["seed"], 11);
        assert_eq!(report["steps"].as_array().unwrap().len(), 3);
        assert!(report["final"]["unique_score_ratio"].as_f64().unwrap() > 0.0);

        assert_eq!(
            iqarl_train_sim(true, 11, 3, std::ptr::null_mut()),
            IQARL_ERR_NULL_POINTER
        );
    }
}

#[test]
fn generated_header_covers_the_abi() {
    let header = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/include/iqa_rl.h"
    ))
    .expect("header generated by the build script");
    for needle in [
        "typedef struct IqarlEngine IqarlEngine;",
        "typedef struct IqarlHints",
        "#define IQARL_OK 0",
        "#define IQARL_ERR_PANIC 5",
        "iqarl_engine_from_file",
        "iqarl_reward_rollouts",
        "iqarl_vrf_filter",
        "iqarl_unique_score_ratio",
        "iqarl_train_sim",
        "iqarl_string_free",
    ] {
        assert!(header.contains(needle), "header is missing {needle:?}");
    }
}
