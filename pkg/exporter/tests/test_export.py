"""Exporter contract tests against the installed segmentation engine.

The engine is driven through its public surfaces only: the bundle
directory layout, the .glat container, and the winseg CLI.
"""

import json
import subprocess
import sys

import numpy as np
import pytest

from winseg_exporter import ClassSpec, ExportConfig, export
from winseg_exporter.geometry import resize_short_side, window_origins
from winseg_exporter.glat import read_tensor as glat_read


def run_winseg(*args):
    return subprocess.run(
        [sys.executable, "-m", "winseg", *args], capture_output=True, text=True
    )


@pytest.fixture(scope="session")
def sclip_bundle(tmp_path_factory, toy_clip_dir, toy_vfm_dir, photo_path):
    out = tmp_path_factory.mktemp("bundle") / "sclip"
    cfg = ExportConfig(
        image=photo_path,
        out_dir=out,
        classes=[
            ClassSpec("background", prompts=["wall", "sky"], background=True),
            ClassSpec("cat"),
            ClassSpec("grass"),
        ],
        setting="sclip",
        clip_model=toy_clip_dir,
        vfm_model=toy_vfm_dir,
        templates="ensemble",
    )
    return export(cfg)


def read_pgm_shape(path):
    blob = path.read_bytes()
    assert blob[:2] == b"P5"
    fields = blob.split(maxsplit=4)
    return int(fields[2]), int(fields[1])  # (h, w)


def test_bundle_layout(sclip_bundle):
    names = {p.name for p in sclip_bundle.iterdir()}
    manifest = json.loads((sclip_bundle / "manifest.json").read_text())
    assert {"manifest.json", "text.glat", "proj_w.glat", "proj_b.glat"} <= names
    assert len(manifest["files"]["windows"]) == len(manifest["windows"])
    for entry in manifest["files"]["windows"]:
        assert entry["vfm"] in names and entry["val"] in names
    # 375x500 photo resized to short side 336 -> 336x448, crop 224, stride 112
    assert manifest["grid"] == {
        "image_h": 336, "image_w": 448, "crop": 224, "stride": 112, "patch": 16,
    }
    assert len(manifest["windows"]) == 6


def test_segment_completes_with_exported_bundle(sclip_bundle, tmp_path):
    pred = tmp_path / "pred.pgm"
    proc = run_winseg("segment", "--bundle", str(sclip_bundle), "--out", str(pred))
    assert proc.returncode == 0, proc.stderr
    assert read_pgm_shape(pred) == (336, 448)  # label map matches resized image
    proc = run_winseg(
        "segment", "--bundle", str(sclip_bundle), "--out", str(tmp_path / "bg.pgm"),
        "--bg-threshold", "0.1",
    )
    assert proc.returncode == 0, proc.stderr


def test_manifest_grid_matches_engine_cli(sclip_bundle):
    manifest = json.loads((sclip_bundle / "manifest.json").read_text())
    g = manifest["grid"]
    proc = run_winseg(
        "grid", "--height", str(g["image_h"]), "--width", str(g["image_w"]),
        "--crop", str(g["crop"]), "--stride", str(g["stride"]), "--json",
    )
    assert proc.returncode == 0, proc.stderr
    engine = json.loads(proc.stdout)
    ours = json.dumps(manifest["windows"], separators=(",", ":"))
    theirs = json.dumps(engine["origins"], separators=(",", ":"))
    assert ours == theirs  # byte-for-byte on the origin list
    assert engine["L"] == len(manifest["windows"])


def test_tensors_reparse_bit_exactly_in_engine(sclip_bundle):
    from winseg.tensor_io import read_tensor as engine_read

    for name in ("text.glat", "proj_w.glat", "win_0_vfm.glat", "win_0_val.glat"):
        ours = glat_read(sclip_bundle / name)
        theirs = engine_read(sclip_bundle / name)
        assert ours.shape == theirs.shape
        assert ours.tobytes() == theirs.tobytes()


def test_text_rows_are_unit_norm(sclip_bundle):
    text = glat_read(sclip_bundle / "text.glat")
    manifest = json.loads((sclip_bundle / "manifest.json").read_text())
    assert text.shape[0] == len(manifest["classes"]) == 5  # 3 classes + 2 aliases
    np.testing.assert_allclose(np.linalg.norm(text, axis=1), 1.0, atol=1e-5)


def test_vfm_features_are_unit_norm(sclip_bundle):
    feats = glat_read(sclip_bundle / "win_0_vfm.glat")
    assert feats.shape == (196, 24)  # 14x14 tokens after 2x2 pooling of patch-8 grid
    np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-5)


def test_values_match_clip_width(sclip_bundle):
    vals = glat_read(sclip_bundle / "win_0_val.glat")
    proj_w = glat_read(sclip_bundle / "proj_w.glat")
    text = glat_read(sclip_bundle / "text.glat")
    assert vals.shape == (196, 32)
    assert proj_w.shape == (32, 24)
    assert text.shape[1] == 24


def test_resize_math():
    assert resize_short_side(500, 375, 336) == (448, 336)
    assert resize_short_side(375, 500, 336) == (336, 448)
    assert resize_short_side(448, 448, 448) == (448, 448)


def test_window_origins_clamp():
    assert window_origins(336, 448, 224, 112) == [
        (0, 0), (0, 112), (0, 224),
        (112, 0), (112, 112), (112, 224),
    ]


def test_export_rejects_unknown_setting(toy_clip_dir, toy_vfm_dir, photo_path, tmp_path):
    cfg = ExportConfig(
        image=photo_path, out_dir=tmp_path / "x",
        classes=[ClassSpec("a"), ClassSpec("b")],
        setting="unknown", clip_model=toy_clip_dir, vfm_model=toy_vfm_dir,
    )
    with pytest.raises(ValueError, match="unknown setting"):
        export(cfg)


def test_export_rejects_missing_model(photo_path, tmp_path):
    from winseg_exporter.models import ModelLoadError

    cfg = ExportConfig(
        image=photo_path, out_dir=tmp_path / "x",
        classes=[ClassSpec("a"), ClassSpec("b")],
        clip_model=str(tmp_path / "no_model"), vfm_model=str(tmp_path / "no_model"),
    )
    with pytest.raises(ModelLoadError):
        export(cfg)


def test_cli_end_to_end(toy_clip_dir, toy_vfm_dir, photo_path, tmp_path):
    out = tmp_path / "bundle"
    proc = subprocess.run(
        [
            sys.executable, "-m", "winseg_exporter",
            "--image", photo_path, "--out", str(out),
            "--classes", "background,cat,grass", "--background", "background",
            "--alias", "background=sky", "--setting", "sclip",
            "--clip", toy_clip_dir, "--vfm", toy_vfm_dir,
        ],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    seg = run_winseg(
        "segment", "--bundle", str(out), "--out", str(tmp_path / "pred.pgm")
    )
    assert seg.returncode == 0, seg.stderr
