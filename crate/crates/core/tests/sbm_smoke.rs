mod common;

#[test]
fn sbm_pipeline_is_fast_and_separates_ood() {
    let report = common::smoke_run(0);
    eprintln!(
        "smoke: {:.2}s, ID ACC {:.4}, entropy ID {:.4} / OOD {:.4}",
        report.seconds, report.id_acc, report.mean_id_entropy, report.mean_ood_entropy
    );
    assert!(report.seconds < 10.0, "took {:.2}s", report.seconds);
    assert!(report.id_acc > 0.6);
    assert!(report.mean_ood_entropy > report.mean_id_entropy);
}
