import json

import numpy as np
import pytest

from gradleak import data, experiment, flsim, nn
from gradleak.config import ConfigError, from_sections


def tiny(tmp_path, **over):
    sections = {
        "experiment": {"images": "2", "seeds": "0", "output_dir": str(tmp_path / "run")},
        "dataset": {"n": "6", "size": "8"},
        "model": {"arch": "mlp", "size": "8"},
        "fl": {"clients": "2"},
        "attack": {"iterations": "3", "checkpoint_every": "1"},
    }
    for sec, body in over.items():
        sections.setdefault(sec, {}).update(body)
    return from_sections(sections)


def strip_time(text):
    return [line.rsplit(",", 1)[0] for line in text.splitlines()]


def test_smallest_run(tmp_path):
    cfg = tiny(tmp_path, experiment={"images": "1"})
    out = experiment.run_experiment(cfg, workers=1)
    rows = experiment.read_report(out / "report.csv")
    assert len(rows) == 1 and rows[0]["success"] in ("true", "false")
    assert (out / "report.csv").read_text().splitlines()[0] == ",".join(experiment.REPORT_COLUMNS)
    strip = sorted(p.name for p in (out / "recon" / "0").iterdir())
    assert strip == ["0.ppm", "1.ppm", "2.ppm", "3.ppm", "truth.ppm"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["rows"] == 1 and manifest["failed_runs"] == []
    assert manifest["config"]["model"]["activation"] == "sigmoid"


def test_grid_counting_and_summary(tmp_path):
    cfg = tiny(tmp_path, experiment={"images": "10", "seeds": "0, 1"},
               dataset={"n": "10"}, attack={"iterations": "1", "checkpoint_every": "0"},
               defense={"grid": "none, laplace:0.001, laplace:0.01, laplace:0.1"})
    out = experiment.run_experiment(cfg, workers=1, write_strips=False)
    rows = experiment.read_report(out / "report.csv")
    assert len(rows) == 80
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["groups"]) == 4 and all(g["runs"] == 20 for g in summary["groups"])
    for g in summary["groups"]:
        mine = [r for r in rows if r["noise_kind"] == g["noise_kind"]
                and float(r["noise_scale"]) == g["noise_scale"]]
        ssim = np.array([float(r["final_ssim"]) for r in mine])
        mse = np.array([float(r["final_mse"]) for r in mine])
        assert abs(g["ssim_mean"] - ssim.mean()) < 1e-9 and abs(g["ssim_std"] - ssim.std()) < 1e-9
        assert abs(g["mse_mean"] - mse.mean()) < 1e-9 and abs(g["mse_std"] - mse.std()) < 1e-9
        assert g["asr"] == pytest.approx(np.mean([r["success"] == "true" for r in mine]))
    keys = [(int(r["image_id"]), float(r["noise_scale"])) for r in rows]
    assert keys == sorted(keys)


def test_rerun_and_worker_count_agree(tmp_path):
    base = tiny(tmp_path, experiment={"images": "3", "seeds": "0, 5"},
                defense={"grid": "none, gaussian:0.01"})
    a = experiment.run_experiment(base.with_output(tmp_path / "a"), workers=1)
    b = experiment.run_experiment(base.with_output(tmp_path / "b"), workers=1)
    c = experiment.run_experiment(base.with_output(tmp_path / "c"), workers=2)
    ta, tb, tc = ((p / "report.csv").read_text() for p in (a, b, c))
    assert strip_time(ta) == strip_time(tb) == strip_time(tc)
    assert (a / "recon" / "0__gaussian-0.01__s5" / "truth.ppm").is_file()


def test_intercepted_update_is_the_targets_gradient(tmp_path):
    cfg = tiny(tmp_path, experiment={"images": "0, 3, 5"}, fl={"clients": "2", "lr": "0.5"})
    corpus = experiment.prepare_corpus(cfg)
    params0 = experiment.initial_params(cfg, corpus)
    tasks = experiment.build_tasks(cfg, corpus, params0)
    assert [(t.image_id, t.round) for t in tasks] == [(0, 0), (3, 1), (5, 2)]
    for t in tasks:
        _, g = nn.loss_and_grad(t.params, cfg.model, corpus.model_input(t.image_id),
                                corpus.pixels[t.image_id].label)
        assert all(np.array_equal(a, b) for a, b in zip(g.tensors, t.update.tensors))
    assert tasks[0].params.equals(params0) and not tasks[1].params.equals(params0)


def test_training_and_normalization(tmp_path):
    cfg = tiny(tmp_path, dataset={"n": "8", "normalize": "true"}, train={"epochs": "1"})
    corpus = experiment.prepare_corpus(cfg)
    assert corpus.norm is not None
    x = corpus.model_input(0)
    assert np.allclose(x, data.normalize(corpus.pixels[0].image, *corpus.norm))
    trained = experiment.initial_params(cfg, corpus)
    assert not trained.equals(nn.build_model(cfg.model, cfg.model_seed))


def test_directory_dataset(tmp_path):
    samples = data.phantom_dataset(3, 2, seed=1, size=12)
    grey = [data.ImageSample(s.image.mean(axis=0, keepdims=True), s.label, s.source_id)
            for s in samples]
    data.write_dataset(tmp_path / "ds", data.DatasetManifest("g", grey, ["a", "b"]))
    cfg = tiny(tmp_path, dataset={"source": str(tmp_path / "ds")})
    corpus = experiment.prepare_corpus(cfg)
    assert all(s.image.shape == (3, 8, 8) for s in corpus.pixels)
    with pytest.raises(ConfigError):
        experiment.prepare_corpus(tiny(tmp_path, dataset={"source": str(tmp_path / "none")}))
    with pytest.raises(ConfigError):
        experiment.prepare_corpus(tiny(tmp_path, dataset={"classes": "3"}))


def test_topk_rows_report_keep_fraction(tmp_path):
    cfg = tiny(tmp_path, defense={"grid": "topk:0.5"})
    tasks, results = experiment.execute(cfg, workers=1)
    row = experiment.report_row(tasks[0], results[0], cfg)
    assert row["noise_kind"] == "topk" and row["noise_scale"] == "0.5"
    nz = sum(np.count_nonzero(t) for t in tasks[0].update.tensors)
    total = sum(t.size for t in tasks[0].update.tensors)
    assert nz <= total // 2 + len(tasks[0].update.tensors)


def test_sweep_points():
    rows = [{"noise_kind": k, "noise_scale": s, "final_ssim": v, "final_mse": m}
            for k, s, v, m in [("none", "0", "0.9", "0.1"), ("laplace", "0.1", "0.3", "0.5"),
                               ("laplace", "0.1", "0.5", "0.3"), ("gaussian", "0.1", "0", "1")]]
    assert experiment.sweep_points(rows, "laplace") == [(0.0, 0.9, 0.1), (0.1, 0.4, 0.4)]
    assert len(experiment.sweep_points(rows)) == 2


def test_round_robin_clients(tmp_path):
    cfg = tiny(tmp_path, dataset={"n": "7"}, fl={"clients": "3"})
    corpus = experiment.prepare_corpus(cfg)
    clients = experiment._clients(cfg, corpus, cfg.defense_grid[0])
    assert [len(c.local_data) for c in clients] == [3, 2, 2]
    assert np.array_equal(clients[1].local_data[1][0], corpus.model_input(4))
    assert flsim.round_batch(clients[1], 1, 1) == (1,)
