mod common;

use common::*;

#[test]
fn qvff_is_flagged_in_llama2_population() {
    let sb = Sandbox::new();
    let manifest = sb.llama2_manifest();
    let out = sb.run(&["audit", "--manifest", path_str(&manifest), "QVFF"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("verdict: FLAGGED"), "{text}");
    assert!(text.contains("observed: 0 of 1765"));
}

#[test]
fn qkvoff_passes_in_llama2_population() {
    let sb = Sandbox::new();
    let manifest = sb.llama2_manifest();
    let out = sb.run(&["--json", "audit", "--manifest", path_str(&manifest), "QKVOFF"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = json(&out);
    assert_eq!(doc["report"]["observed_count"], 343);
    assert_eq!(doc["report"]["flagged"], false);
}

#[test]
fn ff_at_threshold_is_flagged_and_threshold_is_adjustable() {
    let sb = Sandbox::new();
    let manifest = sb.llama2_manifest();
    let out = sb.run(&["audit", "--manifest", path_str(&manifest), "FF"]);
    assert_eq!(code(&out), 4);
    let out = sb.run(&["audit", "--manifest", path_str(&manifest), "FF", "--threshold", "9"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn audit_of_adapter_path_uses_its_signature() {
    let sb = Sandbox::new();
    let manifest = sb.llama2_manifest();
    let qv = sb.adapter("qv", "QV", 1, 2);
    let out = sb.run(&["--json", "audit", "--manifest", path_str(&manifest), path_str(&qv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(json(&out)["target_signature"], "QV");

    // ff-only on a QV task predicts QVFF, which is rare
    let out = sb.run(&["--json", "audit", "--manifest", path_str(&manifest), path_str(&qv), "--recipe", "ff-only"]);
    assert_eq!(code(&out), 4);
    assert_eq!(json(&out)["report"]["signature"], "QVFF");

    // 3way always lands on the common full configuration
    let out = sb.run(&["audit", "--manifest", path_str(&manifest), "QV", "--recipe", "3way"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn missing_manifest_exits_2() {
    let sb = Sandbox::new();
    let out = sb.run(&["audit", "--manifest", "absent.ndjson", "QV"]);
    assert_eq!(code(&out), 2);
    let out = sb.run(&["stats", "absent.ndjson"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn malformed_manifest_and_signature_exit_2() {
    let sb = Sandbox::new();
    let path = sb.path("bad.ndjson");
    std::fs::write(&path, "{\"adapter_id\": \"a\"}\nnot json\n").unwrap();
    let out = sb.run(&["audit", "--manifest", path_str(&path), "QV"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let manifest = sb.llama2_manifest();
    let out = sb.run(&["audit", "--manifest", path_str(&manifest), "QXV"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn stats_ranks_signatures() {
    let sb = Sandbox::new();
    let manifest = sb.llama2_manifest();
    let out = sb.run(&["--json", "stats", path_str(&manifest)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = json(&out);
    let h = &doc["histograms"][0];
    assert_eq!(h["total_adapters"], 1765);
    assert_eq!(h["lora_count"], 1765);
    let sigs: Vec<&str> = h["signatures"].as_array().unwrap().iter().map(|r| r["signature"].as_str().unwrap()).collect();
    assert_eq!(sigs, ["QV", "QKVOFF", "QKVO", "FF"]);
    assert_eq!(h["signatures"][3]["flagged"], true);

    let text = stdout(&sb.run(&["stats", path_str(&manifest)]));
    assert!(text.contains("QV") && text.contains("1271"), "{text}");
}

#[test]
fn stats_over_adapter_tree_and_base_filter() {
    let sb = Sandbox::new();
    sb.adapter("tree/a", "QV", 1, 2);
    sb.adapter("tree/b", "QV", 2, 2);
    sb.adapter("tree/nested/c", "FF", 3, 2);
    let out = sb.run(&["--json", "stats", "tree"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = json(&out);
    assert_eq!(doc["histograms"][0]["total_adapters"], 3);

    let out = sb.run(&["--json", "stats", "tree", "--base-model", "other/model"]);
    assert_eq!(json(&out)["histograms"][0]["total_adapters"], 0);

    let out = sb.run(&["--json", "stats", "tree", "--per-base-model"]);
    let doc = json(&out);
    assert_eq!(doc["histograms"].as_array().unwrap().len(), 1);
    assert_eq!(doc["histograms"][0]["base_model_id"], LLAMA);
}
