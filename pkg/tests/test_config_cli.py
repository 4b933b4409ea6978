import json
from pathlib import Path

import pytest

from organseg import bundled_config_path
from organseg.cli import STAGE_NAMES, main
from organseg.config import FIELDS, ConfigError, PipelineConfig, parse_config, validate_config

TINY = Path(__file__).parent / "data" / "tiny.cfg"


def test_empty_config_is_all_defaults(tmp_path):
    p = tmp_path / "e.cfg"
    p.write_text("# nothing\n\n")
    cfg = validate_config(p)
    assert cfg == PipelineConfig() == validate_config(None)
    assert cfg["regionnet.scales"] == (1.0, 1.5, 2.0, 3.0)
    assert len(cfg["regionnet.scales"]) == 4
    assert all(cfg[k] == f.default for k, f in FIELDS.items())


def test_sections_and_dotted_keys():
    cfg = parse_config("[aggregate]\nsigma = 2.5\nforest.cut = 0.3  # inline comment\n")
    assert cfg["aggregate.sigma"] == 2.5
    assert cfg["forest.cut"] == 0.3


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("aggregate.sigma = -1", "out of range"),
        ("bogus.key = 1", "unknown config key"),
        ("forest.cut = 1.0", "out of range"),
        ("cv.folds = 3\ncv.folds = 3", "duplicate"),
        ("net.lr = fast", "cannot parse"),
        ("justtext", "expected"),
        ("regionnet.keep_original = maybe", "cannot parse"),
        ("net.widths = 1, 2", "five values"),
    ],
)
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_error_reports_line_number():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("# c\n[aggregate]\nsigma = -1\n")


def test_text_roundtrip_and_digest():
    cfg = validate_config(bundled_config_path())
    again = parse_config(cfg.to_text())
    assert again == cfg and again.digest() == cfg.digest()
    assert cfg.with_values({"run.seed": 5}).digest() != cfg.digest()


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus.key = 1\n")
    assert main(["phantom", "--config", str(bad), "--workdir", str(tmp_path / "w")]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert main(["no-such-stage"]) == 2
    # a later stage without its inputs
    assert main(["candidates", "--config", str(TINY), "--workdir", str(tmp_path / "w")]) == 1


def test_staged_run_writes_manifests(tmp_path):
    work = tmp_path / "w"
    for stage in STAGE_NAMES:
        if stage == "cv":
            continue
        assert main([stage, "--config", str(TINY), "--workdir", str(work)]) == 0, stage
        man = json.loads((work / "manifests" / f"{stage}.json").read_text())
        assert man["outputs"]
    cases = sorted((work / "cases").iterdir())
    assert len(cases) == 4
    for c in cases:
        for name in ("ct.mhd", "gt.mhd", "sp.mhd"):
            assert (c / name).exists()
    assert (work / "models" / "pnet.cnvn").exists()
    assert (work / "reports" / "eval" / "summary.csv").exists()
    # rerunning a stage reproduces its outputs
    before = (work / "manifests" / "train-patchnet.json").read_text()
    assert main(["train-patchnet", "--config", str(TINY), "--workdir", str(work)]) == 0
    assert (work / "manifests" / "train-patchnet.json").read_text() == before
