"""Acceptance suite: one test per binding criterion, each printing a verdict.

Run with ``pytest -s tests/test_acceptance.py`` to see the per-criterion
lines. The expensive pipeline runs (backbone pretraining, end-to-end
transfer training) are module-scoped fixtures shared by the criteria that
need them.
"""

import base64
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from pneunet import tensor as T
from pneunet import layers as L
from pneunet.cli import DEFAULT_CONFIG, load_config, run_pretrain
from pneunet.datapipe import ArrayDataset, ImageBuffer, to_tensor
from pneunet.explain import grad_cam
from pneunet.metrics import auc as roc_auc
from pneunet.metrics import roc_curve
from pneunet.model import (CheckpointError, ModelConfig, build_model, forward,
                           freeze_backbone, load_backbone_into,
                           load_checkpoint, predict, save_checkpoint)
from pneunet.service import ServiceState, create_app
from pneunet.synthetic import make_blob_dataset
from pneunet.training import (BestWeightKeeper, EarlyStopState,
                              FocalLossParams, TrainConfig, bce_loss,
                              evaluate_split, focal_loss, train)

from gradcheck import check_op, fd_gradient, max_rel_err
from test_metrics import mann_whitney_auc


@pytest.fixture(autouse=True)
def production_numerics():
    # Criteria carry wall-clock bounds; run with the production fast path.
    T.CHECK_FINITE = False
    yield


def report(name: str, detail: str) -> None:
    print(f"\n[ACCEPTANCE] {name}: PASS ({detail})")


# ---------------------------------------------------------------------------
# Shared pipeline fixtures


@pytest.fixture(scope="module")
def backbone_checkpoint(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("pretrain")
    config = load_config()
    started = time.perf_counter()
    path = run_pretrain(config, out_dir)
    elapsed = time.perf_counter() - started
    model = load_checkpoint(path)
    return {"path": path, "val_acc": model.metadata["pretrain_val_acc"],
            "seconds": elapsed}


@pytest.fixture(scope="module")
def end_to_end(backbone_checkpoint):
    # 500 train / 100 val / 100 test, 64x64, blob-vs-noise, seeded
    images, labels, quadrants = make_blob_dataset(700, 64, seed=11,
                                                  positive_fraction=0.5)
    dataset = ArrayDataset({
        "train": (list(images[:500]), labels[:500]),
        "val": (list(images[500:600]), labels[500:600]),
        "test": (list(images[600:]), labels[600:]),
    }, channels=3)
    model = build_model(ModelConfig(input_shape=(3, 64, 64), seed=11))
    load_backbone_into(model, backbone_checkpoint["path"])
    freeze_backbone(model)
    config = TrainConfig(batch_size=16, max_epochs=30, seed=11, loss="focal",
                         patience=5)
    started = time.perf_counter()
    model, history = train(model, dataset, config)
    seconds = time.perf_counter() - started
    _, test_acc = evaluate_split(model, dataset, "test", config)
    return {"model": model, "dataset": dataset, "history": history,
            "test_acc": test_acc, "seconds": seconds,
            "test_images": images[600:], "test_labels": labels[600:],
            "test_quadrants": quadrants[600:],
            "pretrain_seconds": backbone_checkpoint["seconds"]}


# ---------------------------------------------------------------------------
# Criterion: paper-scale reproduction (optional, ungated documentation run)


def test_paper_scale_reproduction_documented():
    dataset_dir = os.environ.get("PNEUNET_REAL_DATASET")
    if not dataset_dir:
        pytest.skip(
            "paper-scale metrics (accuracy 90.06%, precision 92%, recall 93%, "
            "F1 0.92, AUC 89%) need the real 5,863-image dataset and a "
            "large pretrained backbone; set PNEUNET_REAL_DATASET to run the "
            "optional documentation job — no pass/fail gate either way")
    from pneunet.cli import run_evaluate
    config = load_config()
    out = run_evaluate(config, dataset_dir,
                       os.environ["PNEUNET_CHECKPOINT"], "out/real")
    report("paper-scale documentation run", json.dumps(out))


# ---------------------------------------------------------------------------
# Criterion: gradient integrity (100 seeded cases per layer + focal, < 60 s)


def test_gradient_integrity_all_layers_and_focal():
    started = time.perf_counter()
    cases_per_layer = 100
    worst = {}

    def run(name, make_case):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        errs = []
        for _ in range(cases_per_layer):
            build, arrays = make_case(rng)
            errs.append(check_op(build, arrays, dtype=np.float32, tol=1e-3))
        worst[name] = max(errs)

    def proj(out, r, dtype):
        return T.reduce_sum(T.mul(out, T.from_array(r, dtype=dtype)))

    def conv_case(rng):
        x = rng.uniform(-1, 1, size=(1, 2, 4, 4))
        k = rng.uniform(-1, 1, size=(2, 2, 3, 3))
        b = rng.uniform(-1, 1, size=(2,))
        r = rng.normal(size=(1, 2))
        return (lambda ts: proj(L.global_avg_pool(
            L.conv2d(ts[0], ts[1], ts[2], 1, 1)), r, ts[0].dtype), [x, k, b])

    def pool_case(rng):
        x = rng.permutation(np.arange(32.0)).reshape(1, 2, 4, 4) / 8 - 2
        r = rng.normal(size=(1, 2, 2, 2))
        return (lambda ts: proj(L.maxpool2d(ts[0]), r, ts[0].dtype), [x])

    def gap_case(rng):
        x = rng.uniform(-1, 1, size=(2, 3, 3, 3))
        r = rng.normal(size=(2, 3))
        return (lambda ts: proj(L.global_avg_pool(ts[0]), r, ts[0].dtype), [x])

    def dense_case(rng):
        x = rng.uniform(-1, 1, size=(2, 4))
        w = rng.uniform(-1, 1, size=(4, 3))
        b = rng.uniform(-1, 1, size=(3,))
        r = rng.normal(size=(2, 3))
        return (lambda ts: proj(L.dense(*ts), r, ts[0].dtype), [x, w, b])

    def relu_case(rng):
        x = rng.uniform(-1, 1, size=(3, 4))
        x[np.abs(x) < 0.05] = 0.2
        r = rng.normal(size=(3, 4))
        return (lambda ts: proj(L.relu(ts[0]), r, ts[0].dtype), [x])

    def sigmoid_case(rng):
        x = rng.uniform(-3, 3, size=(3, 4))
        r = rng.normal(size=(3, 4))
        return (lambda ts: proj(L.sigmoid(ts[0]), r, ts[0].dtype), [x])

    def dropout_case(rng):
        x = rng.uniform(-1, 1, size=(3, 4))
        mask = rng.random((3, 4)) >= 0.5
        r = rng.normal(size=(3, 4))
        return (lambda ts: proj(L.dropout(ts[0], 0.5, "train", mask=mask),
                                r, ts[0].dtype), [x])

    def batchnorm_case(rng):
        x = rng.uniform(-2, 2, size=(3, 2, 2, 2))
        g = rng.uniform(0.5, 1.5, size=(2,))
        b = rng.uniform(-0.5, 0.5, size=(2,))
        r = rng.normal(size=(3, 2, 2, 2))

        def build(ts):
            out, _, _ = L.batchnorm(ts[0], ts[1], ts[2], np.full(2, 0.1),
                                    np.full(2, 0.9), "train")
            return proj(out, r, ts[0].dtype)

        return (build, [x, g, b])

    def residual_case(rng):
        x = rng.uniform(-1, 1, size=(1, 2, 4, 4))
        c1 = rng.uniform(-0.5, 0.5, size=(2, 2, 3, 3))
        b1 = rng.uniform(-0.2, 0.2, size=(2,))
        c2 = rng.uniform(-0.5, 0.5, size=(2, 2, 3, 3))
        b2 = rng.uniform(-0.2, 0.2, size=(2,))
        r = rng.normal(size=(1, 2))

        def build(ts):
            params = {"blk.conv1.weight": ts[1], "blk.conv1.bias": ts[2],
                      "blk.conv2.weight": ts[3], "blk.conv2.bias": ts[4]}
            out, _ = L.residual_block(ts[0], params, "blk", stride=1)
            return proj(L.global_avg_pool(out), r, ts[0].dtype)

        return (build, [x, c1, b1, c2, b2])

    def focal_case(rng):
        p = rng.uniform(0.05, 0.95, size=(6,))
        y = rng.integers(0, 2, size=6)
        params = FocalLossParams(alpha=float(rng.uniform(0.1, 0.9)),
                                 gamma=float(rng.choice([0.0, 1.0, 2.0])))
        return (lambda ts: focal_loss(ts[0], y, params), [p])

    for name, case in [("conv2d", conv_case), ("maxpool2d", pool_case),
                       ("global_avg_pool", gap_case), ("dense", dense_case),
                       ("relu", relu_case), ("sigmoid", sigmoid_case),
                       ("dropout", dropout_case), ("batchnorm", batchnorm_case),
                       ("residual_block", residual_case),
                       ("focal_loss", focal_case)]:
        run(name, case)

    elapsed = time.perf_counter() - started
    assert elapsed < 60.0, f"gradient integrity took {elapsed:.1f}s (limit 60s)"
    assert all(err <= 1e-3 for err in worst.values()), worst
    report("gradient integrity",
           f"10 ops x {cases_per_layer} cases, worst rel err "
           f"{max(worst.values()):.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion: loss identities


def test_loss_identities():
    rng = np.random.default_rng(2024)
    balanced_off = FocalLossParams(alpha=1.0, gamma=0.0, balanced=False)
    worst = 0.0
    for _ in range(1000):
        p = T.from_array(np.array([rng.uniform(1e-4, 1 - 1e-4)],
                                  dtype=np.float32))
        y = np.array([int(rng.integers(2))])
        diff = abs(focal_loss(p, y, balanced_off).item()
                   - bce_loss(p, y).item())
        worst = max(worst, diff)
    assert worst <= 1e-12, worst

    canonical = focal_loss(T.from_array(np.array([0.9], dtype=np.float32)),
                           np.array([1]),
                           FocalLossParams(alpha=0.25, gamma=2.0)).item()
    assert abs(canonical - 2.6340e-4) <= 1e-8, canonical
    report("loss identities",
           f"focal==bce worst diff {worst:.1e}; "
           f"focal(0.9,1,0.25,2)={canonical:.6e}")


# ---------------------------------------------------------------------------
# Criterion: AUC oracle


def test_auc_against_mann_whitney_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 201))
        scores = np.round(rng.random(n), 2)  # coarse grid injects ties
        labels = rng.integers(0, 2, n)
        if not labels.any():
            labels[0] = 1
        if labels.all():
            labels[-1] = 0
        got = roc_auc(roc_curve(scores, labels))
        want = mann_whitney_auc(scores, labels)
        worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - started
    assert worst <= 1e-9, worst
    assert elapsed < 10.0, f"AUC oracle took {elapsed:.1f}s (limit 10s)"
    report("AUC oracle", f"200 instances, worst |diff| {worst:.1e}, "
                         f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion: end-to-end desk-scale training


def test_end_to_end_training(end_to_end):
    total = end_to_end["seconds"] + end_to_end["pretrain_seconds"]
    assert len(end_to_end["history"].records) <= 30
    assert end_to_end["test_acc"] >= 0.95, end_to_end["test_acc"]
    assert total < 300.0, f"pipeline took {total:.0f}s (limit 300s)"

    # determinism per seed: repeat the head of the pipeline and compare
    images, labels, _ = make_blob_dataset(700, 64, seed=11,
                                          positive_fraction=0.5)
    dataset = ArrayDataset({"train": (list(images[:500]), labels[:500]),
                            "val": (list(images[500:600]), labels[500:600])},
                           channels=3)

    def short_run():
        model = build_model(ModelConfig(input_shape=(3, 64, 64), seed=11))
        freeze_backbone(model)
        _, history = train(model, dataset,
                           TrainConfig(batch_size=16, max_epochs=2, seed=11))
        return history

    assert short_run().records == short_run().records
    report("end-to-end training",
           f"test acc {end_to_end['test_acc']:.3f} in "
           f"{len(end_to_end['history'].records)} epochs, "
           f"pretrain+train {total:.0f}s, deterministic")


def test_pretrain_accuracy_on_its_own_task(backbone_checkpoint):
    assert backbone_checkpoint["val_acc"] >= 0.9
    report("pretrain accuracy",
           f"synthetic shapes val acc {backbone_checkpoint['val_acc']:.3f}")


# ---------------------------------------------------------------------------
# Criterion: imbalance property (focal vs BCE minority recall)


def test_imbalance_focal_vs_bce(backbone_checkpoint):
    # 9:1 imbalance mirrors the disease-majority skew of the source data:
    # positives dominate training; NORMAL is the minority class whose
    # recall is measured on a balanced held-out set.
    seeds = [101, 102, 103, 104, 105]
    minority_recall = {"focal": [], "bce": []}
    for seed in seeds:
        images, labels, _ = make_blob_dataset(440, 64, seed=seed,
                                              positive_fraction=0.9)
        test_images, test_labels, _ = make_blob_dataset(
            200, 64, seed=seed + 1000, positive_fraction=0.5)
        dataset = ArrayDataset({
            "train": (list(images[:400]), labels[:400]),
            "val": (list(images[400:]), labels[400:]),
            "test": (list(test_images), test_labels),
        }, channels=3)
        for loss_name in ("focal", "bce"):
            model = build_model(ModelConfig(input_shape=(3, 64, 64), seed=seed))
            load_backbone_into(model, backbone_checkpoint["path"])
            freeze_backbone(model)
            config = TrainConfig(batch_size=16, max_epochs=12, seed=seed,
                                 loss=loss_name,
                                 focal=FocalLossParams(alpha=0.25, gamma=2.0),
                                 patience=6)
            model, _ = train(model, dataset, config)
            tn = fp = 0
            for xb, yb in dataset.batches("test", 16):
                out, _ = forward(model, xb, mode="eval")
                pred = out.data.reshape(-1) >= 0.5
                tn += int(np.sum(~pred & (yb == 0)))
                fp += int(np.sum(pred & (yb == 0)))
            minority_recall[loss_name].append(tn / (tn + fp))

    focal_median = float(np.median(minority_recall["focal"]))
    bce_median = float(np.median(minority_recall["bce"]))
    assert focal_median >= bce_median, minority_recall
    for f, b in zip(minority_recall["focal"], minority_recall["bce"]):
        assert f >= b - 0.02, minority_recall
    report("imbalance property",
           f"median minority recall focal {focal_median:.3f} >= "
           f"bce {bce_median:.3f}; per-seed focal-bce "
           f"{[round(f - b, 3) for f, b in zip(minority_recall['focal'], minority_recall['bce'])]}")


# ---------------------------------------------------------------------------
# Criterion: localization


def test_localization_mass_in_blob_quadrant(end_to_end):
    model = end_to_end["model"]
    images = end_to_end["test_images"]
    labels = end_to_end["test_labels"]
    quadrants = end_to_end["test_quadrants"]
    checked = passed = 0
    for img, label, quad in zip(images, labels, quadrants):
        if label != 1:
            continue
        tensor_img = to_tensor(ImageBuffer(img), 3)
        _, predicted = predict(model, tensor_img)
        if predicted != "PNEUMONIA":
            continue
        heatmap = grad_cam(model, tensor_img).upsampled
        h, w = heatmap.shape
        ys = slice(0, h // 2) if quad in (0, 1) else slice(h // 2, h)
        xs = slice(0, w // 2) if quad in (0, 2) else slice(w // 2, w)
        total = heatmap.sum()
        fraction = heatmap[ys, xs].sum() / total if total > 0 else 0.0
        checked += 1
        if fraction >= 0.70:
            passed += 1
    assert checked >= 10, f"too few correctly classified positives ({checked})"
    ratio = passed / checked
    assert ratio >= 0.80, f"{passed}/{checked} images localized"
    report("localization",
           f"{passed}/{checked} correct positives with >=70% mass "
           f"in the blob quadrant ({ratio:.0%})")


# ---------------------------------------------------------------------------
# Criterion: early stopping walk + weight restoration


def test_early_stopping_sequence_and_restore():
    losses = [1.0, 0.9, 0.91, 0.92, 0.93]
    state = EarlyStopState(patience=2, min_delta=0.0)
    model = build_model(ModelConfig(input_shape=(3, 32, 32), seed=1))
    keeper = BestWeightKeeper()
    marker = "head.fc2.bias"  # recorded weight doubles as the loss marker
    stopped_at = None
    for epoch, loss in enumerate(losses, start=1):
        model.parameters[marker].data = np.array([loss], np.float32)
        improved = loss < state.best_loss - state.min_delta
        stop = state.update(epoch, loss)
        if improved:
            keeper.snapshot(model, epoch, loss)
        if stop:
            stopped_at = epoch
            break
    assert stopped_at == 4
    assert state.best_epoch == 2
    keeper.restore(model)
    restored_val_loss = float(model.parameters[marker].data[0])
    assert abs(restored_val_loss - 0.9) <= 1e-7
    report("early stopping",
           f"halted after epoch {stopped_at}, restored epoch-2 weights "
           f"(val loss {restored_val_loss})")


# ---------------------------------------------------------------------------
# Criterion: persistence


def test_persistence_round_trip_and_rejections(tmp_path):
    model = build_model(ModelConfig(input_shape=(3, 32, 32), seed=13))
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()

    raw = bytearray(p1.read_bytes())
    raw[:4] = b"JUNK"
    (tmp_path / "magic.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(tmp_path / "magic.ckpt")

    raw = bytearray(p1.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    (tmp_path / "version.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "version.ckpt")

    (tmp_path / "short.ckpt").write_bytes(p1.read_bytes()[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")

    report("persistence", "save->load->save byte-identical; bad magic, "
                          "version mismatch, truncation all rejected")


# ---------------------------------------------------------------------------
# Criterion: service contract


def test_service_contract(tmp_path):
    model = build_model(ModelConfig(input_shape=(3, 32, 32), seed=21))
    ckpt = tmp_path / "service.ckpt"
    save_checkpoint(model, ckpt)
    state = ServiceState(model=load_checkpoint(ckpt), threshold=0.5)
    client = TestClient(create_app(state))

    rng = np.random.default_rng(4242)
    pixels = rng.integers(0, 256, (48, 48), dtype=np.uint8)
    golden_pgm = f"P5\n48 48\n255\n".encode() + pixels.tobytes()

    def post():
        return client.post("/api/predict", params={"always_cam": 1},
                           files={"image": ("golden.pgm", golden_pgm)})

    first = post()
    assert first.status_code == 200
    body = first.json()
    assert set(body) == {"label", "probability", "threshold", "model_version",
                         "heatmap_png", "latency_ms"}
    png = base64.b64decode(body["heatmap_png"])
    image = Image.open(io.BytesIO(png))
    assert image.size == (32, 32) and image.mode == "RGB"

    second = post().json()
    assert second["probability"] == body["probability"]  # bitwise-stable
    assert second["heatmap_png"] == body["heatmap_png"]

    with ThreadPoolExecutor(max_workers=16) as pool:
        results = [r.json() for r in pool.map(lambda _: post(), range(16))]
    assert {r["probability"] for r in results} == {body["probability"]}
    assert {r["heatmap_png"] for r in results} == {body["heatmap_png"]}
    report("service contract",
           f"golden PGM -> p={body['probability']:.6f} {body['label']}, "
           "PNG decodes, 16 concurrent requests bitwise identical")
