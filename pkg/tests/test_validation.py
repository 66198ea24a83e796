import math
import pytest
import xml.etree.ElementTree as ET
from gfcast.exceptions import ConfigError
from gfcast.mapping import build_mapper
from gfcast.models import CriterionResult, EstimandDescriptor
from gfcast.services import validation
from gfcast.services.estimator import estimate_att
from gfcast.services.oracle import oracle_estimand
from gfcast.services.simulator import load_dgp, simulate
from gfcast.services.validation import ValidationSuite, summary_text, write_junit, write_summary

RESULTS = [
    CriterionResult(name="null-effect", passed=True, message="ATT 0.01 vs 0 (se 0.02)", seconds=1.5),
    CriterionResult(name="overlap", passed=False, message="failed: refusal rate 0.5", seconds=0.25),
]


def test_junit_and_summary(tmp_path):
    """Test the XML counts and the one-line-per-criterion summary."""
    write_junit(RESULTS, tmp_path / "junit.xml")
    suite = ET.parse(tmp_path / "junit.xml").getroot()
    assert suite.get("tests") == "2" and suite.get("failures") == "1"
    cases = suite.findall("testcase")
    assert [case.get("name") for case in cases] == ["null-effect", "overlap"]
    assert cases[1].find("failure") is not None
    write_summary(RESULTS, tmp_path / "summary.txt")
    text = (tmp_path / "summary.txt").read_text(encoding="utf-8")
    assert text == summary_text(RESULTS)
    assert text.splitlines() == [
        "[PASS] null-effect: ATT 0.01 vs 0 (se 0.02)",
        "[FAIL] overlap: failed: refusal rate 0.5",
        "1/2 criteria passed",
    ]


def test_missing_bundled_configs(tmp_path, monkeypatch):
    """Test that the suite refuses to start without its bundled configs."""
    monkeypatch.setattr(validation, "CONFIGS_DIR", tmp_path)
    with pytest.raises(ConfigError, match="missing"):
        ValidationSuite().run(["oracle-cross-check"])


def test_unknown_criterion():
    """Test that an unknown criterion name is a configuration error."""
    with pytest.raises(ConfigError):
        ValidationSuite().run(["no-such-criterion"])


def test_oracle_cross_check_and_cap_fault():
    """Test the oracle cross-check, and that a zero cap makes it fail."""
    result, = ValidationSuite(seed=1, replications=20_000).run(["oracle-cross-check"])
    assert result.passed, result.message
    tampered, = ValidationSuite(seed=1, cap=0, replications=20_000).run(["oracle-cross-check"])
    assert not tampered.passed
    assert "OracleError" in tampered.message


def test_transport_factorization():
    """Test that the outcome law given R̄ transports on the confounded model."""
    result, = ValidationSuite(seed=1).run(["transport-factorization"])
    assert result.passed, result.message


@pytest.fixture(scope="module")
def suite():
    return ValidationSuite()


@pytest.mark.parametrize("criterion", [
    "null-effect",
    "g-formula-correctness",
    "degenerate-equivalence",
    "transport-consistency",
    "violation-sensitivity",
    "overlap",
    "exposure-suite",
    "reproducibility",
    "table-fidelity",
])
def test_acceptance_criterion(suite, criterion):
    """Test that each acceptance criterion passes at the default seed."""
    result, = suite.run([criterion])
    assert result.name == criterion
    assert result.passed, result.message


def test_g_formula_consistency_at_a_thousand_rows():
    """Test the g-formula ATT against the oracle on a 20 x 50 confounded panel."""
    dgp = load_dgp("tdc-on")
    panel = simulate(dgp, 20, 50, seed=17)
    config = ValidationSuite.analysis("tdc-k2")
    spec = config.window
    mapper = build_mapper(config.mapper, spec)
    report = estimate_att(panel, spec, mapper, config)
    truth = oracle_estimand(dgp, EstimandDescriptor(kind="ATT", members=report.members()), panel, spec, mapper)
    assert truth.method == "enumeration"
    se = math.hypot(report.se, report.mc_se)
    assert abs(report.value - truth.value) <= 3 * se, (report.value, truth.value, se)
