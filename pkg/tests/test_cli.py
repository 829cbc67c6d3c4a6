import json
import subprocess
import sys

import numpy as np
import pytest

from cdcl.cli import DEFAULTS, main, resolve_config
from cdcl.data import Dataset, load_dataset, save_dataset, save_labels
from cdcl.errors import InvalidConfigError
from cdcl.model import EncoderConfig, init_model, load_checkpoint, save_checkpoint

SMALL = ["--set", "per_class_count=30", "--set", "epochs=3", "--set", "hidden_dims=8"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(d), "--seed", "1", *SMALL]) == 0
    pre = d / "pre"
    pre.mkdir()
    assert main(["pretrain", "--source", str(d / "source.ds"), "--out", str(pre), "--seed", "1", *SMALL]) == 0
    return d


# -- configuration -----------------------------------------------------------

def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("tau = 0.2  # file value\nlam=0.5\nseed=4\n")
    cfg = resolve_config(cfg_file, ["lam=0.7"], seed=9)
    assert cfg["tau"] == 0.2 and cfg["lam"] == 0.7 and cfg["seed"] == 9
    assert cfg["batch_size"] == DEFAULTS["batch_size"]
    assert resolve_config(None, ["hidden_dims=4,3", "bottleneck=false"])["hidden_dims"] == (4, 3)


def test_unknown_key_is_error(tmp_path, capsys):
    with pytest.raises(InvalidConfigError):
        resolve_config(None, ["temperature=0.1"])
    code, _, err = run(capsys, "gen-data", "--out", tmp_path, "--set", "nope=1")
    assert code == 2 and "nope" in err


def test_bad_value_is_error(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", tmp_path, "--set", "epochs=many")
    assert code == 2 and "epochs" in err


# -- gen-data ----------------------------------------------------------------

def test_gen_data_outputs(work):
    for name in ("source.ds", "target.ds", "target.labels", "config.resolved"):
        assert (work / name).is_file()
    assert load_dataset(work / "source.ds").is_labeled
    assert not load_dataset(work / "target.ds").labels.max() >= 0
    assert "seed = 1" in (work / "config.resolved").read_text()


def test_gen_data_reproducible(work, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--seed", "1", *SMALL]) == 0
    for name in ("source.ds", "target.ds", "target.labels"):
        assert (tmp_path / name).read_bytes() == (work / name).read_bytes()


def test_missing_out_dir(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    code, _, err = run(capsys, "gen-data", "--out", missing)
    assert code == 3 and str(missing) in err


# -- pretrain ----------------------------------------------------------------

def test_pretrain_default_data(tmp_path, capsys):
    assert run(capsys, "gen-data", "--out", tmp_path)[0] == 0
    code, out, _ = run(capsys, "pretrain", "--source", tmp_path / "source.ds", "--out", tmp_path)
    assert code == 0
    rep = json.loads((tmp_path / "pretrain_report.json").read_text())
    assert rep["val_accuracy"] >= 0.95
    assert (tmp_path / "source_model.ckpt").is_file() and "val_accuracy" in out


def test_pretrain_eval_consistency(work, capsys):
    rep = json.loads((work / "pre" / "pretrain_report.json").read_text())
    code, out, _ = run(capsys, "eval", "--model", work / "pre" / "source_model.ckpt",
                       "--data", work / "pre" / "source_val.ds")
    assert code == 0
    payload = json.loads(out.strip().splitlines()[-1])
    assert abs(payload["accuracy"] - rep["val_accuracy"]) <= 1e-12


def test_pretrain_corrupt_dataset(tmp_path, work, capsys):
    lines = (work / "source.ds").read_text().splitlines()
    lines[5] = "0 1.0 oops 2.0 3.0"
    bad = tmp_path / "bad.ds"
    bad.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "pretrain", "--source", bad, "--out", tmp_path)
    assert code == 2 and "line 6" in err


# -- adapt -------------------------------------------------------------------

def test_source_free_rejects_source(work, tmp_path, capsys):
    code, _, err = run(capsys, "adapt", "--mode", "source-free", "--source", work / "source.ds",
                       "--target", work / "target.ds", "--model", work / "pre" / "source_model.ckpt",
                       "--out", tmp_path)
    assert code == 2 and "source data forbidden in source-free mode" in err


def test_standard_adapt_matches_eval(work, tmp_path, capsys):
    code, _, _ = run(capsys, "adapt", "--mode", "standard", "--source", work / "source.ds",
                     "--target", work / "target.ds", "--target-labels", work / "target.labels",
                     "--model", work / "pre" / "source_model.ckpt", "--out", tmp_path, "--seed", "1", *SMALL)
    assert code == 0
    rep = json.loads((tmp_path / "train_report.json").read_text())
    code, out, _ = run(capsys, "eval", "--model", tmp_path / "adapted_model.ckpt",
                       "--data", work / "target.ds", "--labels", work / "target.labels", "--out", tmp_path)
    assert code == 0
    ev = json.loads((tmp_path / "eval_report.json").read_text())
    assert abs(ev["accuracy"] - rep["target_accuracy"]) <= 1e-12
    assert "mean_class_accuracy" in out
    tsv = (tmp_path / "embeddings.tsv").read_text().splitlines()
    assert tsv[0].split("\t")[:5] == ["id", "domain", "label", "pseudo_label", "confidence"]
    assert {ln.split("\t")[1] for ln in tsv[1:]} == {"source", "target"}
    assert (tmp_path / "timing.json").is_file() and (tmp_path / "config.resolved").is_file()


def test_ablation_mode_recorded(work, tmp_path, capsys):
    code, _, _ = run(capsys, "adapt", "--mode", "ablation:in-domain", "--source", work / "source.ds",
                     "--target", work / "target.ds", "--model", work / "pre" / "source_model.ckpt",
                     "--out", tmp_path, *SMALL)
    assert code == 0
    rep = json.loads((tmp_path / "train_report.json").read_text())
    assert rep["config"]["mode"] == "ablation:in-domain"
    assert rep["config"]["pair_mode"] == "in-domain"


def test_unknown_mode(work, tmp_path, capsys):
    code, _, _ = run(capsys, "adapt", "--mode", "ablation:sideways", "--source", work / "source.ds",
                     "--target", work / "target.ds", "--out", tmp_path)
    assert code == 2


def test_source_free_adapt_without_source_file(work, tmp_path, capsys):
    d = tmp_path / "sf"
    d.mkdir()
    assert main(["gen-data", "--out", str(d), "--seed", "1", *SMALL]) == 0
    pre = d / "pre"
    pre.mkdir()
    assert main(["pretrain", "--source", str(d / "source.ds"), "--out", str(pre),
                 *SMALL, "--set", "classifier_bias=false"]) == 0
    (d / "source.ds").unlink()
    (pre / "source_val.ds").unlink()
    code, _, _ = run(capsys, "adapt", "--mode", "source-free", "--target", d / "target.ds",
                     "--model", pre / "source_model.ckpt", "--out", d, *SMALL)
    assert code == 0
    before, after = load_checkpoint(pre / "source_model.ckpt"), load_checkpoint(d / "adapted_model.ckpt")
    np.testing.assert_allclose(np.linalg.norm(after.params["cls.W"], axis=1), 1, atol=1e-9)
    assert after.classifier_frozen
    tsv = (d / "embeddings.tsv").read_text().splitlines()
    assert all(ln.split("\t")[1] == "target" for ln in tsv[1:])
    assert before.params["cls.W"].shape == after.params["cls.W"].shape


# -- eval --------------------------------------------------------------------

def test_eval_requires_labels(work, capsys):
    code, _, err = run(capsys, "eval", "--model", work / "pre" / "source_model.ckpt", "--data", work / "target.ds")
    assert code == 2 and "labels required" in err


@pytest.mark.parametrize("seed", range(5))
def test_untrained_model_near_chance(tmp_path, capsys, seed):
    rng = np.random.default_rng(seed)
    M, N = 4, 400
    ds = Dataset(rng.normal(size=(N, 4)), rng.permutation(np.arange(N) % M), M)
    save_dataset(ds, tmp_path / "d.ds")
    save_checkpoint(init_model(EncoderConfig(input_dim=4), M, seed), tmp_path / "m.ckpt")
    code, out, _ = run(capsys, "eval", "--model", tmp_path / "m.ckpt", "--data", tmp_path / "d.ds")
    acc = json.loads(out.strip().splitlines()[-1])["accuracy"]
    p = 1 / M
    assert abs(acc - p) <= 3 * np.sqrt(p * (1 - p) / N)


def test_export_embeddings(work, tmp_path, capsys):
    code, _, _ = run(capsys, "export-embeddings", "--model", work / "pre" / "source_model.ckpt",
                     "--target", work / "target.ds", "--source", work / "source.ds",
                     "--target-labels", work / "target.labels", "--out", tmp_path)
    assert code == 0
    rows = (tmp_path / "embeddings.tsv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 120
    z = np.array([[float(v) for v in r.split("\t")[5:]] for r in rows[1:]])
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1, atol=1e-9)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cdcl.cli", "gen-data", "--out", str(tmp_path), *SMALL],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "source.ds").is_file()


def test_labels_sidecar_length_mismatch(work, tmp_path, capsys):
    save_labels([0, 1], 4, tmp_path / "short.labels")
    code, _, _ = run(capsys, "eval", "--model", work / "pre" / "source_model.ckpt",
                     "--data", work / "target.ds", "--labels", tmp_path / "short.labels")
    assert code == 2
