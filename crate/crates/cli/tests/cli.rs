use std::fs;
use std::process::Command;

fn lab() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dilution-lab"));
    cmd.env("RUST_LOG", "error");
    cmd
}

#[test]
fn generate_then_featurize_from_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let gen_cfg = tmp.path().join("gen.toml");
    fs::write(&gen_cfg, "[data]\nsource = \"synthetic\"\n[data.generator]\nn_invoices = 300\n").unwrap();
    let status = lab()
        .args(["generate", "--config"])
        .arg(&gen_cfg)
        .arg("--out-dir")
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["invoices.csv", "macro.csv", "ground_truth.json"] {
        assert!(data.join(f).is_file());
    }

    let cfg = tmp.path().join("files.toml");
    fs::write(
        &cfg,
        format!(
            "[data]\nsource = \"files\"\ninvoices = {:?}\nmacro_file = {:?}\n",
            data.join("invoices.csv"),
            data.join("macro.csv")
        ),
    )
    .unwrap();
    let out = tmp.path().join("features");
    let status = lab().args(["featurize", "--config"]).arg(&cfg).arg("--out-dir").arg(&out).status().unwrap();
    assert!(status.success());
    let text = fs::read_to_string(out.join("features.csv")).unwrap();
    assert_eq!(text.lines().count(), 301);
    assert!(text.starts_with("buyer_id,supplier_id,invoice_number,issue_date,"));

    let flagged = tmp.path().join("no_macro.csv");
    let status = lab()
        .arg("featurize")
        .arg("--invoices")
        .arg(data.join("invoices.csv"))
        .arg("--out")
        .arg(&flagged)
        .args(["--no-macro", "--history-knowledge", "payment"])
        .status()
        .unwrap();
    assert!(status.success());
    let narrow = fs::read_to_string(&flagged).unwrap();
    let width = |t: &str| t.lines().next().unwrap().split(',').count();
    assert_eq!(width(&text) - width(&narrow), 20);
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "not_a_field = 1\n").unwrap();
    let out = lab().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let missing = tmp.path().join("missing.toml");
    fs::write(
        &missing,
        format!("[data]\nsource = \"files\"\ninvoices = {:?}\n", tmp.path().join("nope.csv")),
    )
    .unwrap();
    let out = lab().args(["featurize", "--config"]).arg(&missing).arg("--out-dir").arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));

    let out = lab().args(["report", "--out-dir"]).arg(tmp.path().join("empty")).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}
