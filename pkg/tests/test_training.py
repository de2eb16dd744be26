import json

import numpy as np
import pytest
import torch

from octuplet.errors import ConfigError, DataError, NumericError
from octuplet.synthetic import make_dataset
from octuplet.training import (PRESETS, FineTuneConfig, augment, fine_tune, hflip,
                               learning_rate, load_checkpoint, save_checkpoint, seed_streams,
                               toy_backbone)


def test_augment_identity_settings(rng):
    img = rng.random((112, 112, 3)).astype(np.float32)
    out = augment(img, np.random.default_rng(0), flip_prob=0.0, brightness=(1, 1), saturation=(1, 1))
    np.testing.assert_allclose(out, img, atol=1e-6)
    flipped = augment(img, np.random.default_rng(0), flip_prob=1.0, brightness=(1, 1), saturation=(1, 1))
    np.testing.assert_allclose(flipped, hflip(img), atol=1e-6)
    np.testing.assert_array_equal(hflip(hflip(img)), img)


def test_augment_range_and_determinism(rng):
    img = rng.random((112, 112, 3)).astype(np.float32)
    a = augment(img, np.random.default_rng(5), brightness=(1.5, 2.0))
    b = augment(img, np.random.default_rng(5), brightness=(1.5, 2.0))
    assert np.array_equal(a, b) and a.dtype == np.float32
    assert a.min() >= 0.0 and a.max() <= 1.0
    # zero saturation leaves a gray image
    g = augment(img, np.random.default_rng(1), saturation=(0, 0))
    np.testing.assert_allclose(g[..., 0], g[..., 1], atol=1e-6)


def test_learning_rate_schedule():
    assert [learning_rate(0.01, e, (2, 4, 5)) for e in range(1, 7)] == pytest.approx(
        [0.01, 0.01, 0.001, 0.001, 1e-4, 1e-5])
    assert learning_rate(0.1, 9, ()) == 0.1


def test_presets_and_config_defaults():
    c = FineTuneConfig()
    assert (c.lr, c.epochs, c.decay_epochs, c.margin, c.metric, c.normalize) == (
        0.01, 6, (2, 4, 5), 25.0, "euclidean", False)
    assert c.batch_size == 64 and c.mask == "hh,hl,lh,ll"
    assert FineTuneConfig(preset="sgd-magface").lr == 0.001
    assert FineTuneConfig(preset="adamw-transformer").lr == 0.0005
    assert set(PRESETS) == {"adagrad-default", "sgd-magface", "adamw-transformer"}
    assert FineTuneConfig.from_dict(c.to_dict()) == c


@pytest.mark.parametrize("kw", [dict(preset="nope"), dict(lr=0), dict(epochs=0), dict(batch_size=7),
                                dict(batch_size=2), dict(margin=-1), dict(decay_epochs=(3, 2)),
                                dict(metric="manhattan"), dict(mask="hh,xx"), dict(mask=""),
                                dict(resolutions=(1,))])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        FineTuneConfig(**kw)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        FineTuneConfig.from_dict({"margn": 3})


def test_seed_streams_are_distinct_and_stable():
    s = seed_streams(7)
    assert s == seed_streams(7) and len(set(s.values())) == 4
    assert s != seed_streams(8)


@pytest.fixture(scope="module")
def tiny():
    pool, store = make_dataset(8, 4, seed=0, prefix="t")
    return pool, store


def small_config(**kw):
    base = dict(epochs=2, batch_size=8, margin=1.0, val_per_epoch=0, decay_epochs=(1,))
    base.update(kw)
    return FineTuneConfig(**base)


def test_fine_tune_is_deterministic(tiny, tmp_path):
    pool, store = tiny
    runs = []
    for k in range(2):
        torch.manual_seed(123 + k)  # global state must not matter
        model = toy_backbone(8, seed=1, width=4)
        _, hist = fine_tune(model, pool, store, small_config(), out_dir=tmp_path / str(k))
        runs.append((hist.to_csv(), model.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k, v in runs[0][1].items():
        assert torch.equal(v, runs[1][1][k])
    assert (tmp_path / "0" / "history.csv").read_text() == runs[0][0]
    assert (tmp_path / "0" / "last.pt").exists()


def test_history_columns_follow_mask(tiny):
    pool, store = tiny
    _, hist = fine_tune(toy_backbone(8, seed=1, width=4), pool, store, small_config(mask="hh,ll", epochs=1))
    header = hist.to_csv().splitlines()[0].split(",")
    assert header == ["step", "epoch", "loss", "loss_hh", "loss_ll", "lr", "val_accuracy"]
    for r in hist.steps:
        assert r["loss"] == pytest.approx(r["terms"]["hh"] + r["terms"]["ll"], rel=1e-5, abs=1e-6)


def test_lr_decay_recorded(tiny):
    pool, store = tiny
    _, hist = fine_tune(toy_backbone(8, seed=1, width=4), pool, store, small_config())
    lrs = {r["epoch"]: r["lr"] for r in hist.steps}
    assert lrs == {1: 0.01, 2: pytest.approx(0.001)}
    assert [e["epoch"] for e in hist.epochs] == [1, 2]


def test_validation_checkpoints(tiny, tmp_path):
    from octuplet.evaluation import generate_pairs
    pool, store = tiny
    protocol = generate_pairs(pool, 10, 10, k=2, seed=0)
    cfg = small_config(epochs=1, val_per_epoch=2, val_resolutions=(14, 112))
    _, hist = fine_tune(toy_backbone(8, seed=1, width=4), pool, store, cfg, protocol, store, tmp_path)
    vals = [r["val_accuracy"] for r in hist.steps if "val_accuracy" in r]
    assert len(vals) == 2
    _, payload = load_checkpoint(tmp_path / "best.pt")
    assert payload["val_accuracy"] == max(vals)


def test_backbone_frozen_only_embedding_trains(tiny):
    pool, store = tiny
    model = toy_backbone(8, seed=1, width=4)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    fine_tune(model, pool, store, small_config(epochs=1))
    after = model.state_dict()
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    assert changed  # something moved
    assert any(k.startswith("embedding") for k in changed)


def test_checkpoint_roundtrip(tmp_path, rng):
    model = toy_backbone(8, seed=2, width=4)
    cfg = FineTuneConfig(margin=3.0)
    save_checkpoint(tmp_path / "m.pt", model, cfg, {"note": 1})
    loaded, payload = load_checkpoint(tmp_path / "m.pt")
    assert payload["config"]["margin"] == 3.0 and payload["note"] == 1
    assert payload["seeds"] == seed_streams(0)
    x = rng.random((3, 112, 112, 3)).astype(np.float32)
    assert np.array_equal(model.embed(x), loaded.embed(x))


def test_bad_checkpoint(tmp_path):
    (tmp_path / "bad.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.pt")
    torch.save({"x": 1}, tmp_path / "odd.pt")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "odd.pt")


def test_nonfinite_loss_raises_and_dumps(tiny, tmp_path):
    pool, store = tiny
    model = toy_backbone(8, seed=1, width=4)
    with torch.no_grad():
        model.embedding.weight.fill_(float("nan"))
    with pytest.raises(NumericError):
        fine_tune(model, pool, store, small_config(epochs=1), out_dir=tmp_path)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["step"] == 1 and "embedding.weight" in dump["nonfinite_params"]
