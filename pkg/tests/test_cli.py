import shutil

import numpy as np
import pytest
from PIL import Image

from maptrack import cli, se3, synthetic
from maptrack.camera import CameraModel
from maptrack.renderer import load_depth, nadir_pose

SMALL_CAM = CameraModel(100.0, 100.0, 94.0, 60.0, 188, 120)


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    cfg = synthetic.write_demo_maps(root, size=(400, 400), strength=0.5, seed=2, camera=SMALL_CAM)
    cfg.write_text(cfg.read_text() + "\n[dataset]\nn_samples = 4\naltitude_min = 30\naltitude_max = 40\n"
                   "sigma_t = 2 2 0.5\nsigma_r = 0.01\npair_mode = all\n")
    e0, n0 = 500000.0, 5200000.0
    return dict(root=root, config=cfg, center=(e0 + 100.0, n0 - 100.0))


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_render(demo, capsys, tmp_path):
    e, n = demo["center"]
    code, out, _ = run(capsys, "render", "--config", demo["config"], "--nadir", e, n, 450, 0.3,
                       "-o", tmp_path / "a" / "view")
    assert code == 0
    assert (tmp_path / "a" / "view.png").exists() and (tmp_path / "a" / "view.dpth").exists()
    assert float(out.split("valid_fraction")[1]) > 0.99
    pose_text = nadir_pose(e, n, 450, 0.3).to_text()
    code, _, _ = run(capsys, "render", "--config", demo["config"], "--pose", pose_text, "-o", tmp_path / "b" / "view",
                     "--workers", "2")
    assert code == 0
    for suffix in (".png", ".dpth"):
        assert (tmp_path / "a" / f"view{suffix}").read_bytes() == (tmp_path / "b" / f"view{suffix}").read_bytes()


def test_render_errors(demo, capsys, tmp_path):
    e, n = demo["center"]
    code, _, err = run(capsys, "render", "--config", demo["config"], "--nadir", e + 5000, n, 450, "-o", tmp_path / "x")
    assert code == 1 and "easting" in err
    code, _, err = run(capsys, "render", "--config", demo["config"], "--nadir", e, n, 450, "--layer", "1999",
                       "-o", tmp_path / "x")
    assert code == 1 and "2013" in err
    code, _, err = run(capsys, "render", "--config", demo["config"], "-o", tmp_path / "x")
    assert code == 1 and "pose" in err
    code, _, err = run(capsys, "render", "--config", demo["config"], "--nadir", e, n, "-o", tmp_path / "x")
    assert code == 1 and "nadir" in err


def test_config_errors(demo, capsys, tmp_path):
    base = demo["config"].read_text()
    cases = {
        "typo.ini": (base.replace("fx =", "fxx ="), "fxx"),
        "section.ini": (base + "\n[extra]\na = 1\n", "extra"),
        "path.ini": (base.replace("ortho_2010.png", "missing.png"), "missing.png"),
    }
    for name, (text, needle) in cases.items():
        p = demo["root"] / name
        p.write_text(text)
        code, _, err = run(capsys, "dataset", "--config", p, "--out-dir", tmp_path / name)
        assert code == 1 and needle in err, (name, err)
    code, _, err = run(capsys, "dataset", "--config", tmp_path / "none.ini")
    assert code == 1 and "not found" in err


def test_dataset(demo, capsys, tmp_path):
    code, out, _ = run(capsys, "dataset", "--config", demo["config"], "--out-dir", tmp_path / "a")
    assert code == 0 and "samples 4" in out
    lines = [l for l in (tmp_path / "a" / "manifest.txt").read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 4
    code, _, _ = run(capsys, "dataset", "--config", demo["config"], "--out-dir", tmp_path / "b", "--workers", "1")
    assert (tmp_path / "a" / "manifest.txt").read_bytes() == (tmp_path / "b" / "manifest.txt").read_bytes()
    # flags win over the config
    code, _, _ = run(capsys, "dataset", "--config", demo["config"], "--out-dir", tmp_path / "c", "--seed", 9,
                     "-n", 2, "--pair-mode", "cross")
    text = (tmp_path / "c" / "manifest.txt").read_text()
    assert code == 0 and text != (tmp_path / "a" / "manifest.txt").read_text()
    assert len([l for l in text.splitlines() if not l.startswith("#")]) == 2
    code, _, err = run(capsys, "dataset", "--config", demo["config"], "--out-dir", tmp_path / "d", "-n", 0)
    assert code == 1 and "at least 1" in err


@pytest.fixture(scope="module")
def dataset(demo, tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert cli.main(["dataset", "--config", str(demo["config"]), "--out-dir", str(out), "-n", "10",
                     "--pair-mode", "same"]) == 0
    from maptrack.eval import load_manifest
    return load_manifest(out / "manifest.txt")


def test_align(demo, dataset, capsys, tmp_path):
    s = dataset.samples[0]
    code, out, _ = run(capsys, "align", "--config", demo["config"], "--ref-image", s.ref_image,
                       "--ref-depth", s.ref_depth, "--query-image", s.query_image, "--gt", s.pose.to_text(),
                       "--iterations", 50, "--overlay", tmp_path / "ov.png", "--report", tmp_path / "r.txt")
    assert code == 0
    vals = dict(l.split(" ", 1) for l in out.splitlines() if " " in l)
    assert float(vals["final_epe"]) < float(vals["init_epe"])
    assert vals["converged"] == "1"
    assert Image.open(tmp_path / "ov.png").size == (188, 120)
    assert (tmp_path / "r.txt").read_text() in out
    trace = [l for l in out.splitlines() if l.startswith("trace")]
    assert len(trace) == int(vals["iterations"]) > 0


def test_align_missing_depth(demo, dataset, capsys, tmp_path):
    s = dataset.samples[0]
    code, _, err = run(capsys, "align", "--config", demo["config"], "--ref-image", s.ref_image,
                       "--ref-depth", tmp_path / "nope.dpth", "--query-image", s.query_image)
    assert code == 1 and "nope.dpth" in err


def test_track(demo, capsys, tmp_path):
    from maptrack.renderer import build_mesh, render
    from maptrack.cli import load_config
    cfg = load_config(demo["config"])
    maps = cfg.load_maps()
    layer = maps.most_recent()
    mesh = build_mesh(layer.ortho, layer.elevation)
    e, n = demo["center"]
    from maptrack.geodata import sample_elevation
    start = nadir_pose(e, n, float(sample_elevation(layer.elevation, e, n)) + 35.0, 0.2)
    frames = tmp_path / "frames"
    frames.mkdir()
    gts = []
    for i in range(4):
        pose = se3.compose(start, se3.PoseSE3(np.eye(3), np.array([0.5 * (i + 1), 0.2 * i, 0.0])))
        gts.append(pose.to_text())
        Image.fromarray(render(mesh, pose, cfg.camera()).image).save(frames / f"f{i:03d}.png")
    (tmp_path / "gt.txt").write_text("\n".join(gts) + "\n")
    code, out, _ = run(capsys, "track", "--config", demo["config"], "--pose", start.to_text(), "--frames", frames,
                       "--gt", tmp_path / "gt.txt", "-o", tmp_path / "traj.txt")
    assert code == 0
    rows = [l.split() for l in (tmp_path / "traj.txt").read_text().splitlines()[1:]]
    assert len(rows) == 4 and all(r[1] == "1" for r in rows)
    assert max(float(r[4]) for r in rows) < 0.1
    # a blank frame fails to converge: nonzero exit
    Image.fromarray(np.full((120, 188, 3), 80, np.uint8)).save(frames / "f999.png")
    code, _, _ = run(capsys, "track", "--config", demo["config"], "--pose", start.to_text(), "--frames", frames)
    assert code == 1


def test_bench(demo, dataset, capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--config", demo["config"], "--manifest", dataset.path,
                       "--out-dir", tmp_path / "a", "--workers", 1)
    assert code == 0 and "failures 0/30" in out
    stats = (tmp_path / "a" / "stats.csv").read_text().splitlines()[1:]
    assert len({tuple(l.split(",")[:2]) for l in stats}) == 18
    assert len({(l.split(",")[0], l.split(",")[1].rsplit("_", 1)[0]) for l in stats}) == 9
    assert len((tmp_path / "a" / "runtime.csv").read_text().splitlines()) == 4
    code, _, _ = run(capsys, "bench", "--manifest", dataset.path, "--out-dir", tmp_path / "b", "--workers", 2)
    assert code == 0
    for name in ("stats.csv", "samples.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bench_errors(dataset, capsys, tmp_path):
    code, _, err = run(capsys, "bench", "--manifest", dataset.path, "--variants", "nn-20")
    assert code == 1 and "no-nn-20" in err and "huber-50" in err
    # every sample failing is a nonzero exit, some failing is not
    copy = tmp_path / "copy"
    shutil.copytree(dataset.path.parent, copy)
    for f in copy.glob("*.dpth"):
        f.write_bytes(b"XXXX")
    code, out, _ = run(capsys, "bench", "--manifest", copy / "manifest.txt", "--variants", "no-nn-20",
                       "--out-dir", tmp_path / "o")
    assert code == 1 and "failures 10/10" in out
    shutil.copy(dataset.samples[0].ref_depth, copy / dataset.samples[0].ref_depth.name)
    code, out, _ = run(capsys, "bench", "--manifest", copy / "manifest.txt", "--variants", "no-nn-20",
                       "--out-dir", tmp_path / "o")
    assert code == 0 and "failures 9/10" in out


def test_workers_flag(demo, capsys):
    assert run(capsys, "dataset", "--config", demo["config"], "--workers", 0)[0] == 2
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])


def test_inline_comments(demo, tmp_path):
    text = demo["config"].read_text().replace("fx = 100.0", "fx = 100.0   ; focal length, px")
    p = demo["root"] / "commented.ini"
    p.write_text(text + "\n[align]\nweighting = huber  # robust\n")
    cfg = cli.load_config(p)
    assert cfg.camera().fx == 100.0 and cfg.align.weighting == "huber"
