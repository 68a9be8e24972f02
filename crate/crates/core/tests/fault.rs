//! Runs alone in its own binary: the scan fault switch is process-wide.

use hdc_core::verify;
use hdc_tensor::ops::scan::inject_fault;

#[test]
fn broken_scan_is_caught() {
    inject_fault(true);
    let checks = verify::verify(0);
    inject_fault(false);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().any(|c| c.op.contains("selective_scan")));
    // Nothing that avoids the scan may be affected.
    for c in &failed {
        assert!(c.group <= 2, "{c}");
    }
    assert!(checks.iter().filter(|c| c.group >= 3).all(|c| c.passed));
}
