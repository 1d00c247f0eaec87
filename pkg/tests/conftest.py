"""Prints one pass/fail line per acceptance criterion after the run."""

ACCEPTANCE_LABELS = {
    "test_ac01_shares_normalize": "AC1 epoch shares sum to 1.0 within 1e-9",
    "test_ac02_oracle_equivalence": "AC2 shares match a high-precision oracle within 1e-12",
    "test_ac03_reference_run": "AC3 reference scenario completes in under 10s with exact conservation",
    "test_ac04_conservation_identity": "AC4 final pools drain and distributed == settled rewards + forfeited bonds",
    "test_ac05_settlement_paths": "AC5 every settlement path is exercised and mirrored consistently",
    "test_ac06_tamper_detection": "AC6 50 random single-byte ledger flips all detected at the right height",
    "test_ac07_penalty_lowers_share": "AC7 a proof penalty strictly lowers that epoch's reward share",
    "test_ac08_determinism_and_seed": "AC8 same seed is byte-identical, new seed changes the jury",
    "test_ac09_three_worker_demo": "AC9 three-worker demo aggregate matches independent recomputation",
    "test_ac10_plugin_vetting": "AC10 vetting corpus has zero misses and 100/100 tamper rejections",
}

_results: dict[str, bool] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1].split("[")[0]
    if name not in ACCEPTANCE_LABELS:
        return
    if report.when == "call":
        _results[name] = report.passed
    elif report.failed:
        _results[name] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    seen = [name for name in ACCEPTANCE_LABELS if name in _results]
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for name in seen:
        status = "PASS" if _results[name] else "FAIL"
        terminalreporter.write_line(f"{status}  {ACCEPTANCE_LABELS[name]}")
