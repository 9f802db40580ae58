import csv

import numpy as np
import pytest
import torch

import emnet.train as train_mod
from emnet import tensor_core as tc
from emnet.data import load_manifest, synth_generate, write_synth_dataset
from emnet.errors import CheckpointError, ConfigError, TrainingDivergedError
from emnet.train import (ABLATION_GRID, RunConfig, ablation_suite, audit, dump_attention, dump_em_trace, evaluate,
                         load_run, load_split, mean_angular_error, train_loop, variant_label, write_audit_csv,
                         write_eval_csv, write_predictions)


def tiny(tmp_path, name="run", **kw):
    base = dict(image_size=112, synth_train=8, synth_eval=4, epochs=1, batch_size=4, out_dir=str(tmp_path / name))
    base.update(kw)
    return RunConfig(**base)


def _read(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_config_dumps_parse_round_trip():
    cfg = RunConfig(attention="cbam", em=False, lr=1e-3, epochs=7, train_manifest="a/b.txt", subsample=True)
    assert RunConfig.parse(cfg.dumps()) == cfg


def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.lr, cfg.lr_decay_epoch, cfg.lr_decay_factor) == (5e-4, 60, 0.5)
    assert (cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.batch_size, cfg.epochs) == (0.9, 0.999, 1e-8, 32, 100)
    assert cfg.image_size == 224 and cfg.noise_placement == "test"


def test_config_errors_name_the_line(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("epochs = 3\nlr = fast\n")
    with pytest.raises(ConfigError, match=r"run\.cfg:2: lr"):
        RunConfig.load(p)
    with pytest.raises(ConfigError, match=r":1: expected key = value"):
        RunConfig.parse("epochs 3\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.parse("colour = red\n")
    with pytest.raises(ConfigError, match="em"):
        RunConfig.parse("em = maybe\n")


@pytest.mark.parametrize("kw", [dict(attention="transformer"), dict(noise_placement="both"), dict(batch_size=1),
                                dict(lr=-1.0), dict(image_size=16)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_lr_schedule_halves_at_sixty():
    cfg = RunConfig()
    assert cfg.lr_at(0) == 5e-4 and cfg.lr_at(59) == 5e-4
    assert cfg.lr_at(60) == 2.5e-4 and cfg.lr_at(99) == 2.5e-4


def test_synthetic_splits_are_disjoint():
    cfg = RunConfig(synth_train=6, synth_eval=3, image_size=32)
    tr, ev = load_split(cfg, "train"), load_split(cfg, "eval")
    assert list(tr.serials) == [1, 2, 3, 4, 5, 6] and list(ev.serials) == [7, 8, 9]
    sub = load_split(cfg.replace(subsample=True), "train")
    assert list(sub.serials) == [1, 3, 5]


def test_zero_lr_keeps_weights(tmp_path):
    cfg = tiny(tmp_path, lr=0.0, synth_train=32, batch_size=8)
    res = train_loop(cfg)
    tc.seed_everything(cfg.seed)
    init = cfg.build_model()
    for (name, p0), (_, p1) in zip(init.named_parameters(), res.model.named_parameters()):
        assert torch.equal(p0, p1), name


def test_training_is_deterministic(tmp_path):
    a = train_loop(tiny(tmp_path, "a", epochs=2))
    b = train_loop(tiny(tmp_path, "b", epochs=2))
    for name in ("metrics.csv", "final.csv", "model.ckpt"):
        assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes(), name
    rows = _read(a.out_dir / "metrics.csv")
    assert rows[0] == ["epoch", "lr", "train_mae", "eval_angular_error_deg"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert all(np.isfinite(float(v)) for r in rows[1:] for v in r)


def test_eval_on_own_training_manifest_reproduces_train_metric(tmp_path):
    man = write_synth_dataset(tmp_path / "data", synth_generate(8, 0, size=112))
    cfg = tiny(tmp_path, train_manifest=str(man), eval_manifest=str(man))
    res = train_loop(cfg)
    model, loaded = load_run(res.checkpoint)
    assert loaded == cfg
    images = load_split(loaded, "train")
    rows = evaluate(model, images, [])
    assert len(rows) == 1 and rows[0][0] == 0.0 and rows[0][2] == 8
    logged = dict(_read(res.out_dir / "final.csv")[1:])
    assert abs(rows[0][1] - float(logged["train_angular_error_deg"])) < 1e-4


def test_nan_loss_aborts_with_batch_dump(tmp_path, monkeypatch):
    monkeypatch.setattr(train_mod, "mae_loss", lambda p, t: (p - t).abs().mean() * float("nan"))
    with pytest.raises(TrainingDivergedError, match="epoch 0, batch 0"):
        train_loop(tiny(tmp_path))
    dump = (tmp_path / "run" / "diverged_batch.txt").read_text()
    assert dump.startswith("epoch 0 batch 0\nserials ")


def test_eval_rows_and_csv(tmp_path):
    res = train_loop(tiny(tmp_path))
    images = load_split(RunConfig.load(res.out_dir / "run.cfg"), "eval")
    rows = evaluate(res.model, images, [0.7, 1.0], noise_seed=1)
    assert [r[0] for r in rows] == [0.0, 0.7, 1.0]
    assert rows[0][1] == pytest.approx(mean_angular_error(res.model, images), abs=1e-9)
    write_eval_csv(tmp_path / "e1.csv", rows)
    write_eval_csv(tmp_path / "e2.csv", evaluate(res.model, images, [0.7, 1.0], noise_seed=1))
    assert (tmp_path / "e1.csv").read_bytes() == (tmp_path / "e2.csv").read_bytes()
    assert _read(tmp_path / "e1.csv")[0] == ["sigma", "mean_angular_error_deg", "n"]
    write_predictions(tmp_path / "p.csv", res.model, images)
    pred = _read(tmp_path / "p.csv")
    assert pred[0] == ["sample_id", "yaw_pred", "pitch_pred", "yaw_true", "pitch_true", "angular_error_deg"]
    assert [r[0] for r in pred[1:]] == ["9", "10", "11", "12"]
    assert np.mean([float(r[5]) for r in pred[1:]]) == pytest.approx(rows[0][1], abs=1e-4)


def test_checkpoint_architecture_mismatch(tmp_path):
    res = train_loop(tiny(tmp_path))
    with pytest.raises(CheckpointError, match="backbone.layers.gam1"):
        load_run(res.checkpoint, RunConfig.load(res.out_dir / "run.cfg").replace(attention="se"))


def test_debug_dumps(tmp_path):
    res = train_loop(tiny(tmp_path))
    images = load_split(RunConfig.load(res.out_dir / "run.cfg"), "eval")
    paths = dump_attention(res.model, images, tmp_path / "attn")
    assert [p.name for p in paths] == [f"gam{i}_{p}.txt" for i in (1, 2, 3) for p in ("attn", "shifted_attn")]
    lines = paths[0].read_text().splitlines()
    assert lines[0] == "# gam1_attn window=0 head=0 rows=49 cols=49"
    block = np.array([[float(v) for v in ln.split()] for ln in lines[1:50]])
    assert np.allclose(block.sum(1), 1.0, atol=1e-5)
    dump_em_trace(res.model, images, tmp_path / "trace.csv")
    rows = _read(tmp_path / "trace.csv")
    assert rows[0] == ["sample", "iteration", "value"] and len(rows) == 1 + 4 * 3
    for s in range(4):
        vals = [float(r[2]) for r in rows[1 + 3 * s:4 + 3 * s]]
        assert all(b - a >= -1e-5 * max(1.0, abs(a)) for a, b in zip(vals, vals[1:]))


def test_tiny_ablation_grid(tmp_path):
    rows = ablation_suite(tiny(tmp_path, "abl"))
    assert [r["variant"] for r in rows] == [variant_label(a, e) for a, e in ABLATION_GRID]
    assert rows[0]["variant"] == "GAM + EM" and rows[-1]["variant"] == "no GAM + no EM"
    assert rows[-1]["params"] < rows[0]["params"]
    table = _read(tmp_path / "abl" / "ablation.csv")
    assert table[0] == ["variant", "gam", "em", "params", "eval_angular_error_deg"] and len(table) == 5


def test_audit_reconciles_and_hits_band(tmp_path):
    rep = audit()
    assert sum(p for _, p, _ in rep.layers) == rep.total_params
    assert sum(m for _, _, m in rep.layers) == rep.total_macs
    assert rep.params_ok and rep.macs_ok and rep.ok
    assert rep.flops == 2 * rep.total_macs
    write_audit_csv(tmp_path / "a.csv", rep)
    rows = _read(tmp_path / "a.csv")
    assert rows[-1] == ["total", str(rep.total_params), str(rep.total_macs)]
    assert "PASS" in rep.to_text()


def test_manifest_training_honours_subsample(tmp_path):
    man = write_synth_dataset(tmp_path / "data", synth_generate(6, 0, size=112))
    cfg = tiny(tmp_path, train_manifest=str(man), eval_manifest=str(man), subsample=True)
    assert len(load_split(cfg, "train")) == 3
    assert len(load_manifest(man)) == 6
