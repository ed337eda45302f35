import hashlib
import io
import itertools
import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from fastsplat import cli
from fastsplat.bench import COLUMNS, bench, write_bench_csv
from fastsplat.config import ConfigError, TrainConfig
from fastsplat.dataset import load_dataset, render_target, save_dataset, synth_scene
from fastsplat.gauss4d import Store4D
from fastsplat.loss_metrics import psnr
from fastsplat.plyio import read_ply, write_ply
from fastsplat.train import evaluate, load_checkpoint, save_checkpoint, train

from conftest import random_store


@pytest.fixture(scope="module")
def tiny():
    return synth_scene(3, n_gaussians=80, n_cameras=6, resolution=32, n_init=40, n_test=2)


def tiny_config(**kw):
    base = dict(total_iterations=12, densify_warmup=4, densify_interval=4, densify_end=10,
                morton_interval=6, grad_threshold=1e-5, sh_ramp=4, aa_recompute_interval=5)
    base.update(kw)
    return TrainConfig(**base)


def digest(store):
    h = hashlib.sha256()
    for v in store.arrays().values():
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


# config -------------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = TrainConfig(aa="full", bounding="rect", background=[0.1, 0.2, 0.3], gauss4d=True)
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == cfg


def test_config_rejects_unknown_keys_and_values():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"total_iterations": 10, "colour": "red"})
    with pytest.raises(ConfigError):
        TrainConfig(aa="mip")
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="fused_backward", backward="per_pixel")
    with pytest.raises(ConfigError):
        TrainConfig.from_json("[1, 2]")


def test_config_overrides():
    cfg = TrainConfig().with_overrides(["aa=full", "total_iterations=5", "lr_opacity=1",
                                        "morton=false", "background=[1, 1, 1]"])
    assert (cfg.aa, cfg.total_iterations, cfg.lr_opacity, cfg.morton) == ("full", 5, 1.0, False)
    assert cfg.background == [1, 1, 1]
    for bad in (["nokey=1"], ["total_iterations=many"], ["aa"]):
        with pytest.raises(ConfigError):
            TrainConfig().with_overrides(bad)


def test_toy_config_compresses_schedule():
    cfg = TrainConfig.toy(2000)
    s = cfg.densify_schedule()
    assert (s.warmup, s.interval, s.end, s.morton_interval) == (100, 100, 1500, 500)
    assert cfg.lr_schedule().rates(2000)["means"] == pytest.approx(1.6e-6, rel=1e-12)


# synthetic scenes -----------------------------------------------------------------

def test_synth_is_deterministic():
    a = synth_scene(5, 30, 3, 24, n_init=10, n_test=1)
    b = synth_scene(5, 30, 3, 24, n_init=10, n_test=1)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a.frames, b.frames))
    assert digest(a.init) == digest(b.init) and digest(a.ground_truth) == digest(b.ground_truth)


def test_single_camera_scene():
    ds = synth_scene(0, 10, 1, 16, n_test=0)
    assert len(ds.frames) == 1 and len(ds.train) == 1


def test_targets_are_self_consistent(tiny):
    f = tiny.frames[0]
    assert psnr(render_target(f.camera, tiny.ground_truth), f.image) == float("inf")


def test_synth_validates_counts():
    with pytest.raises(ConfigError):
        synth_scene(0, 0, 3, 16)


# training ----------------------------------------------------------------------

def test_zero_iterations_returns_initialization(tiny):
    res = train(tiny_config(total_iterations=0), tiny)
    assert digest(res.store) == digest(tiny.init)


def test_training_reduces_loss(tiny):
    res = train(tiny_config(total_iterations=60), tiny)
    assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])
    assert res.events, "densification never fired"


def test_reference_and_fused_agree_in_float64(tiny):
    out = [train(tiny_config(dtype="float64", optimizer=m), tiny).store
           for m in ("reference", "fused", "fused_backward")]
    assert digest(out[0]) == digest(out[1]) == digest(out[2])


def test_skip_invisible_diverges_when_views_see_part_of_the_scene():
    # cameras just outside the box: every view misses some Gaussians
    ds = synth_scene(3, n_gaussians=80, n_cameras=6, resolution=32, n_init=40, n_test=0, radius=0.9)
    ds.init.log_scales[:] = np.log(0.03)
    cfg = dict(dtype="float64", total_iterations=6)
    runs = [train(tiny_config(optimizer=m, **cfg), ds, store=ds.init.astype(np.float64)).store
            for m in ("reference", "fused_backward_skip_invisible", "fused_backward")]
    a, b, c = runs
    assert digest(a) != digest(b) and digest(a) == digest(c)


FLAG_VALUES = {
    "bounding": ("square", "rect", "rect_opacity", "exact"),
    "sort": ("combined", "two_stage"),
    "truncation": ("classic", "response"),
    "early_stop": ("blend_then_stop", "skip_before_blend"),
    "aa": ("off", "filter3d_original", "filter3d_clip", "full"),
    "optimizer": ("reference", "fused", "fused_backward", "fused_backward_skip_invisible"),
    "backward": ("per_gaussian", "per_pixel"),
    "morton": (True, False),
    "gauss4d": (False, True),
    "batch_size": (1, 2),
}


def flag_matrix():
    """Eight configurations that together use every value of every flag."""
    rng = np.random.default_rng(4)
    order = {k: rng.permutation(8) for k in FLAG_VALUES}
    rows = []
    for i in range(8):
        row = {k: v[order[k][i] % len(v)] for k, v in FLAG_VALUES.items()}
        if row["optimizer"].startswith("fused_backward"):
            row["backward"] = "per_gaussian"
        rows.append(row)
    return rows


def test_flag_matrix_covers_every_value():
    rows = flag_matrix()
    for k, values in FLAG_VALUES.items():
        assert {r[k] for r in rows} == set(values), k


@pytest.mark.parametrize("flags", flag_matrix(), ids=lambda f: "-".join(str(v) for v in f.values()))
def test_flag_combination_trains(tiny, flags):
    res = train(tiny_config(**flags), tiny)
    assert np.all(np.isfinite(res.losses)) and len(res.store) > 0
    assert isinstance(res.store, Store4D) == flags["gauss4d"]
    scores = evaluate(res.store, tiny.test, tiny_config(**flags), nu_hat=res.nu_hat)
    assert all(np.isfinite(p) for p, _ in scores)


def test_validation_errors_abort_before_training(tiny):
    bad = synth_scene(0, 10, 2, 16, n_test=0)
    bad.init = None
    with pytest.raises(ConfigError):
        train(tiny_config(), bad)
    with pytest.raises(ConfigError):
        train(tiny_config(), tiny, store=Store4D.zeros(3, np.float32))


def test_checkpoint_round_trip(tiny, tmp_path):
    cfg = tiny_config(total_iterations=8, output=str(tmp_path / "run"), checkpoint_interval=4)
    res = train(cfg, tiny)
    assert (tmp_path / "run" / "checkpoint_00004" / "model.ply").exists()
    store, state, cfg2, it = load_checkpoint(tmp_path / "run" / "final")
    assert it == 8 and cfg2 == cfg
    assert digest(store) == digest(res.store)
    for k in state.m:
        assert np.array_equal(state.m[k], res.state.m[k]) and np.array_equal(state.v[k], res.state.v[k])
    assert state.step == res.state.step


def test_dataset_round_trip(tiny, tmp_path):
    save_dataset(tmp_path / "ds", tiny)
    back = load_dataset(tmp_path / "ds")
    assert len(back.frames) == len(tiny.frames) and len(back.test) == len(tiny.test)
    for a, b in zip(tiny.frames, back.frames):
        assert np.abs(np.clip(a.image, 0, 1) - b.image).max() <= 0.5 / 255 + 1e-12
        assert np.array_equal(a.camera.world_to_camera, b.camera.world_to_camera)
    assert digest(back.init) == digest(tiny.init)


def test_dataset_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset(tmp_path / "missing")


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(rng, tmp_path, binary):
    s = random_store(rng, 7, np.float32)
    write_ply(tmp_path / "a.ply", s, binary=binary)
    assert digest(read_ply(tmp_path / "a.ply")) == digest(s)
    s4 = Store4D.from_static(s)
    write_ply(tmp_path / "b.ply", s4, binary=binary)
    back = read_ply(tmp_path / "b.ply")
    assert isinstance(back, Store4D) and digest(back) == digest(s4)


def test_bench_rows_and_csv(tiny):
    rows = bench(tiny_config(), tiny, n_frames=2)
    assert len(rows) == 2
    for r in rows:
        assert r["instances_exact"] <= r["instances_rect_opacity"] <= r["instances_rect"]
        assert r["merge_ops_per_gaussian"] == r["instances_exact"] <= r["merge_ops_per_pixel"]
        assert 384 * r["sort_key_bytes_two_stage"] <= 384 * r["sort_key_bytes_combined"]
    buf = io.StringIO()
    write_bench_csv(buf, rows)
    lines = buf.getvalue().splitlines()
    assert lines[0].split(",") == list(COLUMNS) and len(lines) == 3


# command line ------------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert cli.main(["synth", "--out", str(ds), "--gaussians", "40", "--cameras", "3",
                     "--resolution", "24", "--init", "20", "--test", "1"]) == cli.EXIT_OK
    run = tmp_path / "run"
    assert cli.main(["train", "--dataset", str(ds), "--out", str(run),
                     "--set", "total_iterations=3"]) == cli.EXIT_OK
    assert (run / "metrics.csv").exists() and (run / "final" / "model.ply").exists()
    assert cli.main(["render", "--model", str(run / "final"), "--cameras", str(ds / "cameras.txt"),
                     "--out", str(tmp_path / "img")]) == cli.EXIT_OK
    assert len(list((tmp_path / "img").glob("*.ppm"))) == 4
    assert cli.main(["bench", "--dataset", str(ds), "--frames", "1", "--repeats", "1",
                     "--out", str(tmp_path / "b.csv")]) == cli.EXIT_OK
    assert (tmp_path / "b.csv").read_text().startswith("frame,")


def test_cli_validation_exit_codes(tmp_path):
    assert cli.main(["train", "--dataset", str(tmp_path / "nope")]) == cli.EXIT_VALIDATION
    assert cli.main(["train", "--set", "bogus=1"]) == cli.EXIT_VALIDATION
    (tmp_path / "c.json").write_text("{not json")
    assert cli.main(["train", "--config", str(tmp_path / "c.json")]) == cli.EXIT_VALIDATION
    assert cli.main(["render", "--model", str(tmp_path / "x.ply"), "--cameras", "c.txt",
                     "--out", str(tmp_path)]) == cli.EXIT_VALIDATION


def test_cli_check_failure_exit_code(monkeypatch):
    from fastsplat import gradcheck

    monkeypatch.setitem(gradcheck.TOLERANCE, "float64", 0.0)
    monkeypatch.setitem(gradcheck.TOLERANCE, "float32", 0.0)
    assert cli.main(["grad-check", "--scenes", "1", "--gaussians", "2", "--size", "8",
                     "--dtype", "float64"]) == cli.EXIT_CHECK_FAILED


def test_cli_grad_check_passes():
    assert cli.main(["grad-check", "--scenes", "1", "--gaussians", "4", "--size", "16"]) == cli.EXIT_OK


def test_worker_env_validation(monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "zero")
    with pytest.raises(ConfigError):
        cli.set_workers()
    monkeypatch.setenv(cli.WORKERS_ENV, "1")
    assert cli.set_workers() == 1


TRAIN_SCRIPT = textwrap.dedent("""
    import hashlib
    from fastsplat.config import TrainConfig
    from fastsplat.dataset import synth_scene
    from fastsplat.train import train
    ds = synth_scene(3, n_gaussians=80, n_cameras=6, resolution=48, n_init=60, n_test=0)
    cfg = TrainConfig(total_iterations=10, densify_warmup=4, densify_interval=4, densify_end=8,
                      morton_interval=6, grad_threshold=1e-5)
    s = train(cfg, ds).store
    h = hashlib.sha256()
    for v in s.arrays().values():
        h.update(v.tobytes())
    print(h.hexdigest())
""")


def test_training_is_bitwise_reproducible_across_worker_counts():
    out = []
    for n in ("1", "3"):
        env = dict(os.environ, NUMBA_NUM_THREADS="3", FASTSPLAT_WORKERS=n, PYTHONWARNINGS="ignore")
        code = "from fastsplat.cli import set_workers; set_workers()\n" + TRAIN_SCRIPT
        r = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                           check=True)
        out.append(r.stdout.strip().splitlines()[-1])
    assert out[0] == out[1]
