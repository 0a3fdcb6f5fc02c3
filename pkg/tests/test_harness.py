import csv
import gzip
import json

import pytest

from drainsim.cli import default_config_path, main
from drainsim.harness import EXPERIMENTS, ExperimentError, ExperimentSpec, file_sha256, run_experiment


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


@pytest.fixture(scope="module")
def e3_twice(tmp_path_factory):
    outs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"e3_{i}")
        outs.append(run_experiment(ExperimentSpec("E3_llc_hit_miss", out=str(out), seed=3)))
    return outs


def test_outputs_and_manifest(e3_twice):
    res = e3_twice[0]
    names = {p.name for p in res.files}
    assert {"raw.csv.gz", "summary.csv"} <= names
    assert any(n.endswith(".png") for n in names)
    man = _manifest(res.out_dir)
    assert man["status"] == "complete" and man["failure_reason"] is None
    assert man["seed"] == 3 and len(man["config_hash"]) == 16
    for f in man["files"]:
        assert f["sha256"] == file_sha256(res.out_dir / f["path"])
    with gzip.open(res.out_dir / "raw.csv.gz", "rt") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) == {"run_id", "sample_index", "issue_ps", "latency_cycles", "addr_hex"}
    assert set(man["trace_hashes"]) == {r["run_id"] for r in rows}


def test_rerun_is_byte_identical(e3_twice):
    a, b = (_manifest(r.out_dir) for r in e3_twice)
    assert a["trace_hashes"] == b["trace_hashes"]
    assert [f["sha256"] for f in a["files"]] == [f["sha256"] for f in b["files"]]


def test_hit_is_cheaper_than_miss(e3_twice):
    assert e3_twice[0].extra["miss_over_hit"] > 2


def test_failure_leaves_aborted_manifest(tmp_path):
    with pytest.raises(ExperimentError):
        run_experiment(ExperimentSpec("E7_covert_eval", out=str(tmp_path), repetitions=1,
                                      options={"variants": [7], "bits": 128}))
    d = tmp_path / "E7_covert_eval"
    man = _manifest(d)
    assert man["status"] == "aborted" and "variant" in man["failure_reason"]
    assert (d / "error.txt").exists()


def test_unknown_experiment_raises_keyerror(tmp_path):
    with pytest.raises(KeyError):
        run_experiment(ExperimentSpec("E42", out=str(tmp_path)))


def test_cli_list(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in EXPERIMENTS)


def test_cli_validate(tmp_path, capsys):
    assert main(["validate", str(default_config_path())]) == 0
    bad = tmp_path / "bad.ini"
    bad.write_text("[cache]\nllc_ways = 0\n")
    assert main(["validate", str(bad)]) == 1
    assert "llc_ways" in capsys.readouterr().err


def test_cli_run_exit_codes(tmp_path, capsys):
    assert main(["run", "E42", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "E1_cpu_cpu" in err and "E9_recover_mapping" in err
    assert main(["run", "E3_llc_hit_miss", "--out", str(tmp_path), "--override", "cache.llc_ways=0"]) == 1
    assert main(["run", "E7_covert_eval", "--out", str(tmp_path), "--repetitions", "1",
                 "--option", "variants=[7]"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 1


def test_cli_run_prints_written_paths(tmp_path, capsys):
    assert main(["run", "E9_recover_mapping", "--out", str(tmp_path), "--option", "random_masks=1"]) == 0
    lines = capsys.readouterr().out.split()
    assert any(line.endswith("manifest.json") for line in lines)
    assert any(line.endswith("recovered_mapping.ini") for line in lines)


def test_cli_recover_mapping(tmp_path, capsys):
    out = tmp_path / "m.ini"
    assert main(["recover-mapping", "--bits", "6..20", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "matches configured partition: True" in text
    assert out.read_text().startswith("[mapping]")
    with pytest.raises(SystemExit):
        main(["recover-mapping", "--bits", "20..6"])
