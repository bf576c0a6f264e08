"""Training loop, checkpoint container, evaluation reports, history CSV."""

import json
import struct

import numpy as np
import pytest
from PIL import Image

from faceattr.data import (AttributeSchema, AugmentConfig, DataSource,
                           SampleRecord)
from faceattr.errors import (CheckpointError, CheckpointFormatError,
                             CheckpointVersionError, ContractError,
                             NumericError)
from faceattr.model import HeadSpec, Model, small_spec
from faceattr.optim import AdamConfig
from faceattr.tensor import Tensor
from faceattr.train import (Checkpoint, EvalReport, TrainConfig, evaluate,
                            export_history, load_checkpoint, parse_history,
                            report_from_obj, report_jsonl, report_table,
                            save_checkpoint, train, EpochStats)

QUIET = AugmentConfig(flip=False, shift=False, zoom=False)


# ---------------------------------------------------------------------------
# fixtures: a 12-image dataset of single pixels, and tiny models


def _toy_dataset(root):
    """Twelve 1x1 RGB images; the label is whether red exceeds 127."""
    rng = np.random.default_rng(11)
    raw = rng.integers(0, 256, size=(12, 3), dtype=np.uint8)
    img_dir = root / "images"
    img_dir.mkdir()
    records = []
    for i in range(12):
        Image.fromarray(raw[i].reshape(1, 1, 3)).save(img_dir / f"{i:05d}.png")
        records.append(SampleRecord(image=f"images/{i:05d}.png",
                                    labels={"gender": int(raw[i, 0] > 127)}))
    labels = np.array([r.labels["gender"] for r in records])
    assert set(labels.tolist()) == {0, 1}
    return raw, records


def _toy_model():
    """Five scalar parameters: 3 stem conv weights, head weight, head bias."""
    spec = small_spec(HeadSpec("sigmoid", 1), stem_channels=1, stage_blocks=(),
                      stage_channels=(), image_size=1, stem_norm=False,
                      stem_pool=False, stem_kernel=1, stem_stride=1)
    return Model.build(spec, seed=7, dtype=np.float64)


def _toy_config(root, **overrides):
    kw = dict(attribute="gender", checkpoint_path=str(root / "toy.ckpt"),
              epochs=25, batch_size=12, loss="binary", seed=3, augment=QUIET)
    kw.update(overrides)
    return TrainConfig(**kw)


GENDER_SCHEMA = AttributeSchema("gender", ("a", "b"), head="sigmoid")


def _small_model(seed=0, dtype=np.float32):
    spec = small_spec(HeadSpec("softmax", 3), stem_channels=4, stage_blocks=(1,),
                      stage_channels=(4,), image_size=8)
    return Model.build(spec, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# the training loop against a hand-rolled scalar reference


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _reference_trace(raw, labels, u0, v0, b0, cfg):
    """Re-derive the whole optimization with plain numpy arithmetic.

    The network is z = v * relu(u . x) + b on single-pixel images, so
    every epoch's loss, gradient, and Adam update can be written out
    directly.  Follows the same float32 image quantization and the same
    (seed, epoch) shuffle as the real loader.
    """
    pix = (raw.astype(np.float32) / 255.0).astype(np.float64)
    y_all = labels.astype(np.float64)
    adam = cfg.adam
    theta = {"u": u0.copy(), "v": float(v0), "b": float(b0)}
    m = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in theta.items()}
    s = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in theta.items()}

    def forward(x):
        h = x @ theta["u"]
        r = np.maximum(h, 0.0)
        z = theta["v"] * r + theta["b"]
        return h, r, z

    def loss_of(z, y):
        return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))

    train_losses = []
    val_losses = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(raw))
        x, y = pix[order], y_all[order]
        h, r, z = forward(x)
        train_losses.append(loss_of(z, y))

        dz = (_sigmoid(z) - y) / len(z)
        grads = {"u": x.T @ (dz * theta["v"] * (h > 0)),
                 "v": float((dz * r).sum()),
                 "b": float(dz.sum())}
        t = epoch + 1
        for k in theta:
            g = np.asarray(grads[k], dtype=np.float64)
            m[k] = adam.beta1 * m[k] + (1 - adam.beta1) * g
            s[k] = adam.beta2 * s[k] + (1 - adam.beta2) * g * g
            m_hat = m[k] / (1 - adam.beta1 ** t)
            s_hat = s[k] / (1 - adam.beta2 ** t)
            theta[k] = theta[k] - adam.lr * m_hat / (np.sqrt(s_hat) + adam.eps)

        _, _, zv = forward(pix)
        val_losses.append(loss_of(zv, y_all))
    return train_losses, val_losses, theta


def test_training_matches_scalar_reference(tmp_path):
    raw, records = _toy_dataset(tmp_path)
    labels = np.array([r.labels["gender"] for r in records])
    model = _toy_model()
    u0 = model.params["stem.conv.w"].data.reshape(3).copy()
    v0 = float(model.params["head.dense.w"].data.reshape(()))
    b0 = float(model.params["head.dense.b"].data.reshape(()))
    cfg = _toy_config(tmp_path)
    source = DataSource(tmp_path, target=1)

    best, history = train(model, source, records, records, cfg,
                          schema=GENDER_SCHEMA)
    want_train, want_val, theta = _reference_trace(raw, labels, u0, v0, b0, cfg)

    got_train = [st.train_loss for st in history]
    got_val = [st.val_loss for st in history]
    assert len(got_train) == cfg.epochs
    assert max(abs(a - b) for a, b in zip(got_train, want_train)) < 1e-12
    assert max(abs(a - b) for a, b in zip(got_val, want_val)) < 1e-12
    assert np.allclose(model.params["stem.conv.w"].data.reshape(3),
                       theta["u"], rtol=0, atol=1e-12)
    assert abs(float(model.params["head.dense.w"].data.reshape(())) - theta["v"]) < 1e-12
    assert abs(float(model.params["head.dense.b"].data.reshape(())) - theta["b"]) < 1e-12
    assert abs(best.val_loss - min(want_val)) < 1e-12


def test_best_checkpoint_tracks_minimum_validation_loss(tmp_path):
    _, records = _toy_dataset(tmp_path)
    cfg = _toy_config(tmp_path, epochs=6)
    best, history = train(_toy_model(), DataSource(tmp_path, target=1),
                          records, records, cfg, schema=GENDER_SCHEMA)

    val = [st.val_loss for st in history]
    assert best.val_loss == min(val)
    assert best.epoch == val.index(min(val))
    assert all(st.seen == 12 for st in history)
    assert [st.epoch for st in history] == list(range(6))

    on_disk = load_checkpoint(cfg.checkpoint_path)
    assert on_disk.val_loss == best.val_loss
    assert on_disk.epoch == best.epoch
    final = load_checkpoint(cfg.checkpoint_path + ".final")
    assert final.epoch == 5
    assert final.provenance["attribute"] == "gender"
    assert final.provenance["classes"] == ["a", "b"]
    assert final.provenance["train_count"] == 12


def test_train_validates_inputs(tmp_path):
    _, records = _toy_dataset(tmp_path)
    source = DataSource(tmp_path, target=1)
    cfg = _toy_config(tmp_path)
    with pytest.raises(ContractError, match="training set is empty"):
        train(_toy_model(), source, [], records, cfg)
    with pytest.raises(ContractError, match="validation set is empty"):
        train(_toy_model(), source, records, [], cfg)

    softmax_model = _small_model()
    with pytest.raises(ContractError, match="binary loss needs a sigmoid head"):
        train(softmax_model, source, records, records, cfg)
    with pytest.raises(ContractError, match="categorical loss needs a softmax"):
        train(_toy_model(), source, records, records,
              _toy_config(tmp_path, loss="categorical"))
    with pytest.raises(ContractError, match="4 classes"):
        train(softmax_model, source, records, records,
              _toy_config(tmp_path, loss="categorical", attribute="height"),
              schema=AttributeSchema("height", ("a", "b", "c", "d")))
    wide = Model.build(small_spec(HeadSpec("sigmoid", 2), stem_channels=1,
                                  stage_blocks=(), stage_channels=(),
                                  image_size=1, stem_norm=False, stem_pool=False,
                                  stem_kernel=1, stem_stride=1), seed=0)
    with pytest.raises(ContractError, match="single sigmoid output"):
        train(wide, source, records, records, cfg, schema=GENDER_SCHEMA)


def test_train_config_validation(tmp_path):
    with pytest.raises(ContractError):
        _toy_config(tmp_path, epochs=0)
    with pytest.raises(ContractError):
        _toy_config(tmp_path, batch_size=0)
    with pytest.raises(ContractError):
        _toy_config(tmp_path, loss="hinge")
    with pytest.raises(ContractError):
        _toy_config(tmp_path, attribute="")


def test_non_finite_loss_aborts_with_location(tmp_path):
    _, records = _toy_dataset(tmp_path)
    model = _toy_model()
    model.params["head.dense.b"].data[:] = np.nan
    with pytest.raises(NumericError, match=r"epoch 0 batch 0"):
        train(model, DataSource(tmp_path, target=1), records, records,
              _toy_config(tmp_path), schema=GENDER_SCHEMA)


def test_train_log_callback_reports_each_epoch(tmp_path):
    _, records = _toy_dataset(tmp_path)
    lines = []
    train(_toy_model(), DataSource(tmp_path, target=1), records, records,
          _toy_config(tmp_path, epochs=3), schema=GENDER_SCHEMA,
          log=lines.append)
    assert len(lines) == 3
    assert lines[0].startswith("epoch=0 train_loss=")
    assert "val_acc=" in lines[2]


# ---------------------------------------------------------------------------
# checkpoint container


def _perturbed_checkpoint():
    model = _small_model(seed=4)
    rng = np.random.default_rng(6)
    for st in model.bn_states.values():
        st.mean[:] = rng.normal(size=st.mean.shape).astype(st.mean.dtype)
        st.var[:] = rng.uniform(0.5, 2.0, size=st.var.shape).astype(st.var.dtype)
    ckpt = Checkpoint.from_model(model, AdamConfig(lr=5e-4), epoch=7,
                                 val_loss=0.25, val_acc=0.875,
                                 provenance={"attribute": "height",
                                             "classes": ["a", "b", "c"],
                                             "seed": 4})
    return model, ckpt


def test_checkpoint_round_trip_preserves_everything(tmp_path):
    model, ckpt = _perturbed_checkpoint()
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)

    assert loaded.arch == ckpt.arch
    assert loaded.adam == {"lr": 5e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
    assert (loaded.epoch, loaded.val_loss, loaded.val_acc) == (7, 0.25, 0.875)
    assert loaded.provenance == ckpt.provenance
    assert set(loaded.params) == set(ckpt.params)
    for name, arr in ckpt.params.items():
        assert np.array_equal(loaded.params[name], arr)
        assert loaded.params[name].dtype == arr.dtype
    for prefix, st in ckpt.bn_stats.items():
        assert np.array_equal(loaded.bn_stats[prefix]["mean"], st["mean"])
        assert np.array_equal(loaded.bn_stats[prefix]["var"], st["var"])

    rebuilt = loaded.to_model()
    x = Tensor(np.random.default_rng(9).random((2, 3, 8, 8)).astype(np.float32))
    assert np.array_equal(rebuilt.forward(x, mode="eval").data,
                          model.forward(x, mode="eval").data)


def test_checkpoint_bytes_are_reproducible(tmp_path):
    _, ckpt = _perturbed_checkpoint()
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    save_checkpoint(ckpt, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_truncation(tmp_path):
    _, ckpt = _perturbed_checkpoint()
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    blob = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    for cut in [0, 4, 8, 10, 19, 25, len(blob) // 2, len(blob) - 1]:
        bad.write_bytes(blob[:cut])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(bad)


def test_checkpoint_rejects_corruption(tmp_path):
    _, ckpt = _perturbed_checkpoint()
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    blob = path.read_bytes()
    bad = tmp_path / "bad.ckpt"

    bad.write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(CheckpointFormatError, match="bad magic"):
        load_checkpoint(bad)

    bad.write_bytes(blob[:8] + struct.pack("<I", 2) + blob[12:])
    with pytest.raises(CheckpointVersionError, match="version 2"):
        load_checkpoint(bad)

    bad.write_bytes(blob + b"\x00")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(bad)

    bad.write_bytes(blob[:20] + b"X" + blob[21:])
    with pytest.raises(CheckpointFormatError, match="corrupt header"):
        load_checkpoint(bad)

    assert b"p/stem.conv.w" in blob
    bad.write_bytes(blob.replace(b"p/stem.conv.w", b"q/stem.conv.w", 1))
    with pytest.raises(CheckpointFormatError, match="unrecognized tensor"):
        load_checkpoint(bad)


def _raw_container(header_obj, entries):
    doc = json.dumps(header_obj, sort_keys=True, separators=(",", ":")).encode()
    out = b"FACEATTR" + struct.pack("<I", 1) + struct.pack("<Q", len(doc)) + doc
    out += struct.pack("<I", len(entries))
    for name, code, arr in entries:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return out


_FULL_HEADER = {"arch": {}, "adam": {}, "epoch": 0, "val_loss": 0.0,
                "val_acc": 0.0, "provenance": {}}


def test_checkpoint_header_and_entry_validation(tmp_path):
    path = tmp_path / "crafted.ckpt"

    incomplete = {k: v for k, v in _FULL_HEADER.items() if k != "epoch"}
    path.write_bytes(_raw_container(incomplete, []))
    with pytest.raises(CheckpointFormatError, match="lacks 'epoch'"):
        load_checkpoint(path)

    vec = np.zeros(3, dtype="<f4")
    path.write_bytes(_raw_container(_FULL_HEADER, [("s/x/mean", 0, vec)]))
    with pytest.raises(CheckpointFormatError, match="incomplete"):
        load_checkpoint(path)

    path.write_bytes(_raw_container(_FULL_HEADER, [("p/w", 7, vec)]))
    with pytest.raises(CheckpointFormatError, match="unknown dtype code"):
        load_checkpoint(path)


def test_zero_tensor_container_round_trip(tmp_path):
    ckpt = Checkpoint(arch={"note": "empty"}, params={}, bn_stats={}, adam={},
                      epoch=0, val_loss=0.0, val_acc=0.0, provenance={})
    path = tmp_path / "empty.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.arch == {"note": "empty"}
    assert loaded.params == {} and loaded.bn_stats == {}


# ---------------------------------------------------------------------------
# evaluation reports


def test_eval_report_derives_metrics_from_confusion():
    report = EvalReport(attribute="gender", classes=["female", "male"],
                        confusion=np.array([[3, 1], [2, 4]]), count=10)
    assert report.accuracy == 0.7
    assert report.precision == [0.6, 0.8]
    assert report.recall == [0.75, 4 / 6]
    assert report.lines() == [
        "attribute=gender",
        "samples=10",
        "accuracy=0.7000",
        "class=female precision=0.6000 recall=0.7500",
        "class=male precision=0.8000 recall=0.6667",
    ]


def test_eval_report_guards_empty_columns():
    report = EvalReport(attribute="x", classes=["a", "b"],
                        confusion=np.array([[2, 0], [3, 0]]), count=5)
    assert report.precision[1] == 0.0
    assert report.recall == [1.0, 0.0]


def test_eval_report_object_round_trip():
    report = EvalReport(attribute="height", classes=["s", "m", "t"],
                        confusion=np.array([[5, 0, 1], [1, 4, 0], [0, 2, 7]]),
                        count=20)
    obj = json.loads(json.dumps(report.to_obj()))
    back = report_from_obj(obj)
    assert back.attribute == "height"
    assert back.accuracy == report.accuracy
    assert np.array_equal(back.confusion, report.confusion)
    with pytest.raises(ContractError):
        report_from_obj({k: v for k, v in obj.items() if k != "confusion"})
    with pytest.raises(ContractError):
        report_from_obj([1, 2])


def test_evaluate_is_order_insensitive(tmp_path):
    _, records = _toy_dataset(tmp_path)
    source = DataSource(tmp_path, target=1)
    best, _ = train(_toy_model(), source, records, records,
                    _toy_config(tmp_path, epochs=4), schema=GENDER_SCHEMA)

    fwd = evaluate(best, records, source)
    rev = evaluate(best, list(reversed(records)), source, batch_size=5)
    assert fwd.attribute == "gender"
    assert fwd.classes == ["a", "b"]
    assert fwd.count == 12
    assert fwd.accuracy == rev.accuracy
    assert np.array_equal(fwd.confusion, rev.confusion)


def test_evaluate_requires_attribute_provenance(tmp_path):
    _, records = _toy_dataset(tmp_path)
    ckpt = Checkpoint.from_model(_toy_model(), AdamConfig(), 0, 0.0, 0.0, {})
    with pytest.raises(CheckpointError, match="no attribute"):
        evaluate(ckpt, records, DataSource(tmp_path, target=1))


# ---------------------------------------------------------------------------
# report formatting


def test_report_table_plain_format():
    table = report_table([("gender", 0.9797)])
    assert table == "attribute  accuracy\ngender     97.97\n"


def test_report_table_alignment_and_average():
    table = report_table([("body", 0.5), ("mind", 0.7)], style="averaged")
    assert table.splitlines() == [
        "attribute  accuracy",
        "body       50.00",
        "mind       70.00",
        "Average    60.00",
    ]


def test_report_table_accepts_eval_reports():
    report = EvalReport(attribute="gender", classes=["f", "m"],
                        confusion=np.array([[4, 0], [1, 5]]), count=10)
    assert "gender     90.00" in report_table([report])


def test_report_table_validation():
    with pytest.raises(ContractError):
        report_table([])
    with pytest.raises(ContractError):
        report_table([("a", 0.5)], style="fancy")


def test_report_jsonl_round_trip():
    reports = [EvalReport(attribute="a", classes=["x", "y"],
                          confusion=np.array([[1, 0], [0, 1]]), count=2),
               EvalReport(attribute="b", classes=["x", "y"],
                          confusion=np.array([[2, 1], [0, 1]]), count=4)]
    text = report_jsonl(reports)
    lines = text.strip().split("\n")
    assert len(lines) == 2
    back = [report_from_obj(json.loads(ln)) for ln in lines]
    assert [r.attribute for r in back] == ["a", "b"]
    assert back[1].accuracy == 0.75


# ---------------------------------------------------------------------------
# history CSV


def test_history_round_trip(tmp_path):
    history = [EpochStats(epoch=i, train_loss=1.0 / (i + 1), train_acc=0.5 + 0.1 * i,
                          val_loss=1.1 / (i + 1), val_acc=0.4 + 0.1 * i, seen=32)
               for i in range(4)]
    path = tmp_path / "history.csv"
    export_history(history, path)
    rows = parse_history(path)
    assert len(rows) == 4
    for st, row in zip(history, rows):
        assert row["epoch"] == st.epoch
        assert abs(row["train_loss"] - st.train_loss) < 1e-5
        assert abs(row["val_acc"] - st.val_acc) < 1e-5


def test_history_validation(tmp_path):
    with pytest.raises(ContractError, match="empty"):
        export_history([], tmp_path / "x.csv")

    path = tmp_path / "h.csv"
    path.write_text("wrong,header\n1,2\n")
    with pytest.raises(ContractError, match="bad header"):
        parse_history(path)

    path.write_text("epoch,train_loss,train_acc,val_loss,val_acc\n1,2,3\n")
    with pytest.raises(ContractError, match="malformed row"):
        parse_history(path)

    path.write_text("epoch,train_loss,train_acc,val_loss,val_acc\na,1,1,1,1\n")
    with pytest.raises(ContractError, match="malformed row"):
        parse_history(path)
