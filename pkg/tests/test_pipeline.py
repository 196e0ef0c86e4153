import json

import numpy as np
import pytest

from digression.config import resolve_config
from digression.errors import StageError
from digression.masking import InpaintMask, write_mask_png
from digression.pipeline import file_sha256, immunize

FAST = {"budget.iterations": "3", "budget.grad_avg": "1", "inversion.steps": "2", "centroid.n_samples": "2"}


def test_artifacts_and_manifest(tmp_path, backend, sample_paths):
    res = immunize(*sample_paths, resolve_config(None, FAST), backend, tmp_path)
    names = {"immunized.png", "delta.npy", "tau.npy", "pi.npy", "tokens.json", "centroid.npz", "centroid.json",
             "trace.csv", "inversion_loss.csv", "manifest.json"}
    assert names <= {p.name for p in tmp_path.iterdir()}
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    for name, art in manifest["artifacts"].items():
        if art["sha256"] is not None:
            assert file_sha256(art["path"]) == art["sha256"], name
    assert manifest["inputs"]["image"]["sha256"] == file_sha256(sample_paths[0])
    assert manifest["backend"]["checkpoint"] == backend.checkpoint_hash
    delta = np.load(tmp_path / "delta.npy")
    assert np.abs(delta).max() <= 12 / 255 + 1e-9
    assert len(res.trace.losses) == 3


def test_all_context_mask_is_legal(tmp_path, backend, sample_paths):
    mask = tmp_path / "ones.png"
    write_mask_png(mask, InpaintMask.full((64, 64), 4))
    res = immunize(sample_paths[0], mask, resolve_config(None, FAST), backend, tmp_path / "out")
    assert res.manifest.status == "ok"


def test_stage_failure_keeps_partial_artifacts(tmp_path, backend, sample_paths, monkeypatch):
    import digression.pipeline as pipeline

    def boom(*a, **k):
        raise RuntimeError("no centroid today")

    monkeypatch.setattr(pipeline, "estimate_centroid", boom)
    with pytest.raises(StageError, match=r"\[centroid\]"):
        immunize(*sample_paths, resolve_config(None, FAST), backend, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "failed" and "centroid" in manifest["error"]
    assert (tmp_path / "tau.npy").exists()
