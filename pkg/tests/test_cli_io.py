"""CLI dispatch, config parsing, fixture generation, and checkpoint IO."""

import hashlib
import io
import sys
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from tuvf import meshio
from tuvf.checkpoint import load_checkpoint, save_checkpoint
from tuvf.cli import main
from tuvf.config import ConfigError, default_config, format_config, load_config, \
    parse_config
from tuvf.fixtures import generate_fixtures


def _run(argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


# -- dispatch ---------------------------------------------------------------------

def test_no_args_usage_exit_1():
    code, _, err = _run([])
    assert code == 1
    assert "usage" in err.lower()


def test_unknown_command_exit_1():
    code, _, err = _run(["frobnicate"])
    assert code == 1
    assert "usage" in err.lower()


def test_missing_checkpoint_exit_2_with_path(tmp_path):
    code, _, err = _run(["render", "--csae", str(tmp_path / "nope.tuvf"),
                         "--tex", str(tmp_path / "nope.tuvf"),
                         "--shape", str(tmp_path / "nope.obj"),
                         "--out", str(tmp_path / "out.png")])
    assert code == 2
    assert "nope.tuvf" in err


def test_selfcheck_exit_0_and_deterministic():
    code1, out1, _ = _run(["selfcheck", "--seed", "3"])
    code2, out2, _ = _run(["selfcheck", "--seed", "3"])
    assert code1 == code2 == 0
    assert out1 == out2
    assert all(line.startswith(("PASS", "selfcheck:")) for line in
               out1.strip().splitlines())


def test_seed_env_fallback(monkeypatch):
    from tuvf.cli import build_parser

    monkeypatch.setenv("TUVF_SEED", "777")
    args = build_parser().parse_args(["selfcheck"])
    assert args.seed == 777


# -- config -------------------------------------------------------------------------

def test_empty_config_gives_paper_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = load_config(path)
    assert cfg["render.gamma"] == pytest.approx(5e-4)
    assert cfg["render.knn"] == 4
    assert cfg["geometry.uv_level"] == 4
    assert cfg["dpsr.resolution"] == 128
    assert cfg["render.coarse_samples"] == 256
    assert cfg["render.shading_points"] == 3


def test_config_rejects_invalid_values():
    with pytest.raises(ConfigError, match="invalid value"):
        parse_config("render.gamma = -1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("render.new_thing = 3\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("render.gamma = 1e-4\nrender.knn = soup\n")


def test_config_round_trip():
    cfg = default_config()
    cfg.values["render.gamma"] = 1e-3
    cfg.values["gan.patch_resolution"] = 64
    text = format_config(cfg)
    again = parse_config(text)
    assert again.values == cfg.values


def test_config_builders_map_onto_dataclasses():
    cfg = parse_config("geometry.decoder_width = 96\nrender.knn = 2\n"
                       "texgen.layers = 4\ngan.min_scale = 0.25\n")
    assert cfg.csae().decoder_width == 96
    assert cfg.renderer().knn == 2
    assert cfg.texgen().n_layers == 4
    assert cfg.gan().min_scale == pytest.approx(0.25)


# -- fixtures -------------------------------------------------------------------------

def _tree_hashes(root):
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_fixtures_deterministic_under_seed(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_fixtures(a, seed=9, n_shapes=2, n_views=2, image_size=32)
    generate_fixtures(b, seed=9, n_shapes=2, n_views=2, image_size=32)
    assert _tree_hashes(a) == _tree_hashes(b)


def test_fixture_dataset_floor_and_mesh_round_trip(fixture_dataset):
    manifest = fixture_dataset.manifest
    assert len(manifest["shapes"]) >= 10
    assert manifest["views_per_shape"] >= 8
    for name in manifest["shapes"][:3]:
        path = fixture_dataset.root / "shapes" / name
        mesh = meshio.load_mesh(path)
        again_path = fixture_dataset.root / "shapes" / f"rt_{name}"
        meshio.save_obj(mesh, again_path)
        again = meshio.load_mesh(again_path)
        assert np.allclose(mesh.vertices, again.vertices, atol=1e-7)
        assert np.array_equal(mesh.faces, again.faces)


def test_gen_fixtures_cli(tmp_path):
    code, out, _ = _run(["gen-fixtures", "--out", str(tmp_path / "fx"),
                         "--shapes", "2", "--views", "2", "--size", "32",
                         "--seed", "4"])
    assert code == 0
    assert (tmp_path / "fx" / "manifest.json").exists()


# -- checkpoints -----------------------------------------------------------------------

def test_checkpoint_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    entries = {"csae.encoder.ec0.w": rng.normal(size=(6, 4)).astype(np.float32),
               "tex.field": rng.normal(size=(162, 32)).astype(np.float32),
               "meta.one": np.array([1.0], np.float32)}
    p1 = tmp_path / "a.tuvf"
    p2 = tmp_path / "b.tuvf"
    save_checkpoint(entries, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for k, v in entries.items():
        assert np.array_equal(loaded[k], v)


def test_checkpoint_rejects_bad_names(tmp_path):
    with pytest.raises(ValueError, match="name"):
        save_checkpoint({"bad name": np.zeros(3, np.float32)}, tmp_path / "x.tuvf")


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.tuvf"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


# -- png io ------------------------------------------------------------------------------

def test_png_round_trip(tmp_path):
    from tuvf.imgio import load_png, save_png

    rng = np.random.default_rng(1)
    img = (rng.integers(0, 256, size=(16, 16, 3)) / 255.0).astype(np.float32)
    path = tmp_path / "img.png"
    save_png(path, img)
    again = load_png(path)
    assert np.allclose(again, img, atol=1 / 255)


def test_png_deterministic_bytes(tmp_path):
    from tuvf.imgio import save_png

    rng = np.random.default_rng(2)
    img = rng.random((24, 24, 3)).astype(np.float32)
    alpha = rng.random((24, 24)).astype(np.float32)
    p1 = tmp_path / "one.png"
    p2 = tmp_path / "two.png"
    save_png(p1, img, alpha)
    save_png(p2, img, alpha)
    assert p1.read_bytes() == p2.read_bytes()
