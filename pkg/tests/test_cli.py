import json

import numpy as np
import pytest

from conftest import tiny_pipeline_config
from latentaug.cli import main
from latentaug.store import read_dataset


@pytest.fixture
def synth_config(tmp_path):
    cfg = {
        "m": 4, "c": 2, "k": 2,
        "class_offsets": [[3, 0, 0, 0], [-3, 0, 0, 0]],
        "subdomain_offsets": [[0, 1, 0, 0], [0, -1, 0, 0]],
        "per_cell_std": 1.0,
        "n_train": 10, "n_test": 4, "seed": 3,
    }
    path = tmp_path / "synth.json"
    path.write_text(json.dumps(cfg))
    return path


def test_synth_writes_readable_dataset(tmp_path, synth_config, capsys):
    out = tmp_path / "data.geld"
    assert main(["synth", "--config", str(synth_config), "--out", str(out)]) == 0
    ds = read_dataset(out)
    assert len(ds) == (10 + 4) * 4
    assert "wrote" in capsys.readouterr().out


def test_usage_error_exit_code():
    assert main(["synth"]) == 1  # missing --config
    assert main(["no-such-command"]) == 1


def test_data_error_exit_code(tmp_path, capsys):
    missing = tmp_path / "nope.geld"
    assert main(["train-adapter", "--data", str(missing), "--out", str(tmp_path)]) == 2


def test_run_and_evaluate(tmp_path, synth_config, capsys):
    cfg = tiny_pipeline_config(tmp_path)
    cfg_path = tmp_path / "pipeline.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    out = tmp_path / "cli_run"
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "baseline UA" in text and "GeLDA UA" in text

    assert (
        main(
            [
                "evaluate",
                "--adapter", str(out / "adapter_gelda.gelw"),
                "--data", str(out / "dataset.geld"),
                "--subdomain", "1",
                "--out", str(tmp_path / "eval"),
            ]
        )
        == 0
    )
    assert (tmp_path / "eval" / "metrics.csv").exists()


def test_ingest_pools_frames(tmp_path, capsys):
    rng = np.random.default_rng(0)
    rows = ["path,class,subdomain,split"]
    for i in range(4):
        path = tmp_path / f"vec{i}.npy"
        # two of them are frame stacks that need pooling
        arr = rng.standard_normal((5, 3)) if i % 2 else rng.standard_normal(3)
        np.save(path, arr)
        rows.append(f"{path},c{i % 2},s0,{'train' if i < 3 else 'test'}")
    listing = tmp_path / "listing.csv"
    listing.write_text("\n".join(rows) + "\n")
    out = tmp_path / "ingested.geld"
    assert main(["ingest", "--listing", str(listing), "--out", str(out)]) == 0
    ds = read_dataset(out)
    assert len(ds) == 4
    assert ds.manifest.m == 3


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--cases", "6"]) == 0
    assert "max relative gradient error" in capsys.readouterr().out


def test_sweep_command(tmp_path):
    cfg = tiny_pipeline_config(tmp_path)
    cfg_path = tmp_path / "p.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(cfg_path), "--out", str(out),
                 "--axis", "n_aug", "--values", "0,2"]) == 0
    assert (out / "sweep.csv").exists()
