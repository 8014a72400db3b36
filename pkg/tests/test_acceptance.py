"""Acceptance gate: one test per release criterion, each printing a
single PASS/FAIL line. Criteria 5 and 6 train real models on the default
synthetic dataset and dominate the runtime of the suite."""

import time

import numpy as np
import pytest

from msfuse import nn
from msfuse.boxes import BBox, iou, nms
from msfuse.detector import (
    DetectorModel,
    ProposalConfig,
    SampleConfig,
    TrainConfig,
    detector_forward,
    finalize_detections,
    loss_step,
    make_train_sample,
    prepare_targets,
    train_detector,
)
from msfuse.evaluation import EvalConfig, Frame, GtEntry, curve, evaluate, log_average_miss_rate, match_frame
from msfuse.fusion import (
    FusionWeights,
    GateParams,
    GateTrainConfig,
    fuse,
    gate,
    gate_grad_log,
    gate_loss_and_grad,
    optimize_gate,
    weights_for,
)
from msfuse.illumination import DAY_CLASS, IanTrainConfig, ian_train
from msfuse.synth import SceneConfig, generate_pair

from conftest import emit
from test_boxes import brute_force_nms, random_box
from test_detector import TINY_ANCHORS, tiny_cfg, tiny_train_sample
from test_evaluation import brute_force_match, random_frame


def report(name, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    line = f"[{tag}] {name}" + (f" ({detail})" if detail else "")
    emit(line)
    assert ok, f"{name}: {detail}"


def default_dataset(seed=7):
    """The default synthetic benchmark: 400 train / 100 test, half night."""
    cfg = SceneConfig(seed=seed)
    train, test = [], []
    for index in range(500):
        rng = np.random.default_rng([cfg.seed, index])
        pair, entries, condition = generate_pair(cfg, rng)
        (train if index < 400 else test).append((pair, entries, condition))
    return train, test


class TestCriterion1Gradients:
    def test_gradient_suite(self):
        start = time.time()
        rng = np.random.default_rng(0)
        worst_layer = 0.0

        def fd(layer, x):
            nonlocal worst_layer
            dy_shape = layer.forward(x).shape
            dy = rng.standard_normal(dy_shape)

            def loss():
                return float((layer.forward(x) * dy).sum())

            nn.zero_grads(layer.params())
            layer.forward(x)
            layer.backward(dy)
            if layer.params():
                err, _, _ = nn.grad_check(loss, layer.params(),
                                          max_entries_per_param=10, rng=rng)
                worst_layer = max(worst_layer, err)

        fd(nn.Conv2D("c", 3, 3, 2, 4, rng), rng.standard_normal((1, 6, 6, 2)))
        fd(nn.Dense("d", 10, 4, rng), rng.standard_normal((3, 10)))
        fd(nn.Sequential([
            nn.Conv2D("c1", 3, 3, 1, 3, rng), nn.ReLU(), nn.MaxPool2x2(),
            nn.Flatten(), nn.Dense("d1", 3 * 3 * 3, 2, rng),
        ]), rng.standard_normal((2, 6, 6, 1)))

        # joint detector loss on a frozen tiny model
        cfg = tiny_cfg("score2")
        model = DetectorModel("score2", rng, cfg.anchors)
        sample = tiny_train_sample(seed=3)
        targets = prepare_targets(model, sample, cfg, rng)
        nn.zero_grads(model.params())
        loss_step(model, sample, targets, cfg)
        loss_err, _, _ = nn.grad_check(
            lambda: loss_step(model, sample, targets, cfg, compute_grads=False)[0],
            model.params(), max_entries_per_param=2, rng=rng,
        )

        # phase-2 gate gradient
        gate_err = 0.0
        h = 1e-7
        from msfuse.fusion import _ImageCache

        for _ in range(20):
            n = 8
            sc = rng.random((n, 2))
            sc /= sc.sum(axis=1, keepdims=True)
            st = rng.random((n, 2))
            st /= st.sum(axis=1, keepdims=True)
            cache = _ImageCache(
                iv=float(rng.random()),
                scores_color=sc, scores_thermal=st,
                offsets_color=rng.standard_normal((n, 4)),
                offsets_thermal=rng.standard_normal((n, 4)),
                labels=rng.integers(0, 2, size=n),
                reg_targets=rng.standard_normal((n, 4)),
            )
            p = GateParams(alpha=float(rng.uniform(0.05, 2)),
                           beta=float(rng.uniform(0.2, 3)))
            _, ga, gb = gate_loss_and_grad(cache, p)
            la = (gate_loss_and_grad(cache, GateParams(p.alpha * np.exp(h), p.beta))[0]
                  - gate_loss_and_grad(cache, GateParams(p.alpha * np.exp(-h), p.beta))[0]) / (2 * h)
            lb = (gate_loss_and_grad(cache, GateParams(p.alpha, p.beta * np.exp(h)))[0]
                  - gate_loss_and_grad(cache, GateParams(p.alpha, p.beta * np.exp(-h)))[0]) / (2 * h)
            gate_err = max(gate_err,
                           abs(ga - la) / max(abs(la), 1e-4),
                           abs(gb - lb) / max(abs(lb), 1e-4))

        elapsed = time.time() - start
        ok = worst_layer < 1e-5 and loss_err < 1e-4 and gate_err < 1e-4 and elapsed < 60
        report("criterion 1: gradient suite", ok,
               f"layers {worst_layer:.2e}, joint loss {loss_err:.2e}, "
               f"gate {gate_err:.2e}, {elapsed:.1f}s")


class TestCriterion2GateInvariants:
    def test_gate_invariants(self):
        rng = np.random.default_rng(1)
        ok = True
        for _ in range(10_000):
            p = GateParams(alpha=float(rng.uniform(0.01, 10)),
                           beta=float(rng.uniform(0.01, 10)))
            iv = float(rng.random())
            w = gate(iv, p)
            fw = FusionWeights(color=w)
            ok &= 0.0 <= w <= iv
            ok &= gate(min(iv + 1e-3, 1.0), p) > w
            ok &= fw.color + fw.thermal == 1.0
        p = GateParams()
        anchors_ok = (
            gate(0.0, p) == 0.0
            and abs(gate(0.5, p) - 0.454545) < 1e-6
            and abs(gate(1.0, p) - 0.942815) < 1e-6
        )
        report("criterion 2: gate invariants", ok and anchors_ok)


class TestCriterion3EvaluationOracle:
    def test_matcher_and_lamr(self):
        rng = np.random.default_rng(2)
        cfg = EvalConfig()
        agree = True
        for _ in range(1000):
            det_boxes, det_scores, gts = random_frame(rng)
            got = match_frame(det_boxes, det_scores, gts, cfg)
            want_status, want_taken = brute_force_match(det_boxes, det_scores, gts, cfg)
            agree &= got.det_status == want_status and got.gt_matched == want_taken
        const_ok = all(
            abs(log_average_miss_rate([(1e-3, c), (5.0, c)], cfg) - c) < 1e-12
            for c in (1.0, 0.5, 0.05, 1e-4)
        )
        empty = curve([Frame(det_boxes=np.zeros((0, 4)), det_scores=np.zeros(0),
                             gts=[GtEntry(bbox=BBox(0, 0, 20, 60))])], cfg)
        no_det_ok = log_average_miss_rate(empty, cfg) == 1.0
        report("criterion 3: evaluation oracle", agree and const_ok and no_det_ok)


class TestCriterion4NmsOracle:
    def test_nms_oracle(self):
        rng = np.random.default_rng(3)
        ok = True
        for _ in range(1000):
            n = int(rng.integers(0, 21))
            dets = [(random_box(rng, span=30.0), float(rng.random()))
                    for _ in range(n)]
            threshold = float(rng.uniform(0.1, 0.9))
            ok &= nms(dets, threshold) == brute_force_nms(dets, threshold)
        report("criterion 4: NMS oracle", ok)


@pytest.fixture(scope="module")
def benchmark_data():
    return default_dataset()


class TestCriterion5Ian:
    def test_day_night_accuracy(self, benchmark_data):
        start = time.time()
        train, test = benchmark_data
        model, _ = ian_train([(p.color, c) for p, _, c in train], IanTrainConfig())
        correct = sum(
            (model.infer(p.color) >= 0.5) == (c == "day") for p, _, c in test
        )
        accuracy = correct / len(test)
        elapsed = time.time() - start
        ok = accuracy >= 0.95 and elapsed < 180
        report("criterion 5: illumination network", ok,
               f"accuracy {accuracy:.3f}, {elapsed:.0f}s")


def run_pipeline(seed, train, test):
    """Phase-1 trunk training, phase-2 gate fit, then lamr under the three
    weighting modes. Returns {mode: {"all": lamr, "night": lamr}}."""
    sampling = SampleConfig()
    dataset = [make_train_sample(p, g, sampling) for p, g, _ in train]
    det_cfg = TrainConfig(arch="score2", seed=seed)
    model, _ = train_detector(dataset, det_cfg)
    ian, _ = ian_train([(p.color, c) for p, _, c in train],
                       IanTrainConfig(seed=seed))
    gate_params, _ = optimize_gate(model, ian, dataset, GateTrainConfig(seed=seed))

    proposal_cfg = ProposalConfig()
    per_image = []
    for pair, gts, condition in test:
        result = detector_forward(model, pair, proposal_cfg)
        iv = ian.infer(pair.color)
        per_image.append((result, iv, gts, condition, pair))

    out = {}
    for mode in ("average", "hard01", "ia"):
        frames = []
        for result, iv, gts, condition, pair in per_image:
            w = weights_for(mode, iv, gate_params)
            merged = fuse(result.outputs["color"], result.outputs["thermal"], w)
            boxes, scores = finalize_detections(
                result.proposals, merged.scores, merged.offsets,
                pair.color.height, pair.color.width, proposal_cfg,
            )
            frames.append(Frame(det_boxes=boxes, det_scores=scores, gts=gts,
                                condition=condition))
        res = evaluate(frames, EvalConfig())
        out[mode] = {"all": res.lamr, "night": res.per_condition.get("night", 1.0)}
    return out


class TestCriterion6EndToEndOrdering:
    def test_weighting_mode_ordering(self, benchmark_data):
        start = time.time()
        train, test = benchmark_data
        results = [run_pipeline(seed, train, test) for seed in (0, 1, 2)]

        def median(mode, split):
            return float(np.median([r[mode][split] for r in results]))

        ia_all = median("ia", "all")
        avg_all = median("average", "all")
        hard_all = median("hard01", "all")
        hard_night = median("hard01", "night")
        avg_night = median("average", "night")
        elapsed = time.time() - start
        ok = (
            ia_all <= avg_all + 1e-12
            and ia_all <= hard_all + 1e-12
            and hard_night <= avg_night + 1e-12
            and elapsed < 1800
        )
        report(
            "criterion 6: end-to-end weighting ordering", ok,
            f"all: ia {ia_all:.4f} vs avg {avg_all:.4f} vs hard {hard_all:.4f}; "
            f"night: hard {hard_night:.4f} vs avg {avg_night:.4f}; {elapsed:.0f}s",
        )


class TestCriterion7Determinism:
    def test_bit_identical_reruns(self, tmp_path):
        from msfuse import cli

        ds = tmp_path / "ds"
        assert cli.main(["synth", "--out", str(ds), "--n-train", "8",
                         "--n-test", "4", "--seed", "11"]) == 0
        payloads = {}
        for run in ("a", "b"):
            d = tmp_path / run
            d.mkdir()
            assert cli.main(["train-ian", "--data", str(ds), "--out",
                             str(d / "ian.ckpt"), "--epochs", "1"]) == 0
            assert cli.main(["train-detector", "--data", str(ds), "--out",
                             str(d / "det.ckpt"), "--epochs", "1",
                             "--lr-decay-epoch", "1"]) == 0
            assert cli.main(["optimize-gate", "--data", str(ds), "--model",
                             str(d / "det.ckpt"), "--ian", str(d / "ian.ckpt"),
                             "--out", str(d / "gate.txt"), "--epochs", "1"]) == 0
            assert cli.main(["detect", "--data", str(ds), "--model",
                             str(d / "det.ckpt"), "--out", str(d / "dets.txt"),
                             "--weighting", "ia", "--ian", str(d / "ian.ckpt"),
                             "--gate", str(d / "gate.txt")]) == 0
            payloads[run] = [
                (d / name).read_bytes()
                for name in ("ian.ckpt", "det.ckpt", "gate.txt", "dets.txt")
            ]
        report("criterion 7: determinism", payloads["a"] == payloads["b"])


class TestCriterion8RoundTrips:
    def test_formats_byte_identical(self, tmp_path):
        from msfuse import dataio
        from test_dataio import random_annotations

        rng = np.random.default_rng(4)
        ok = True
        for k in range(100):
            ann1 = tmp_path / f"a{k}.txt"
            ann2 = tmp_path / f"a{k}b.txt"
            dataio.write_annotations(ann1, random_annotations(rng, int(rng.integers(0, 6))))
            dataio.write_annotations(ann2, dataio.read_annotations(ann1))
            ok &= ann1.read_bytes() == ann2.read_bytes()

            det1 = tmp_path / f"d{k}.txt"
            det2 = tmp_path / f"d{k}b.txt"
            rows = [(f"f{i}", *(float(v) for v in rng.uniform(0, 40, 4)),
                     float(rng.random())) for i in range(int(rng.integers(0, 5)))]
            dataio.write_detections(det1, rows)
            dataio.write_detections(det2, dataio.read_detections(det1))
            ok &= det1.read_bytes() == det2.read_bytes()

            cfg1 = tmp_path / f"c{k}.txt"
            cfg2 = tmp_path / f"c{k}b.txt"
            values = {"a": float(rng.standard_normal()), "b": int(rng.integers(0, 9))}
            dataio.write_config(cfg1, values)
            schema = {"a": (float, 0.0), "b": (int, 0)}
            dataio.write_config(cfg2, dataio.load_config(cfg1, schema))
            ok &= cfg1.read_bytes() == cfg2.read_bytes()

            ck1 = tmp_path / f"k{k}.ckpt"
            ck2 = tmp_path / f"k{k}b.ckpt"
            named = {f"p{i}": rng.standard_normal((int(rng.integers(1, 4)),
                                                   int(rng.integers(1, 4))))
                     for i in range(int(rng.integers(1, 4)))}
            nn.save_checkpoint(ck1, named, meta={"seed": str(k)})
            loaded, meta = nn.load_checkpoint(ck1)
            nn.save_checkpoint(ck2, loaded, meta)
            ok &= ck1.read_bytes() == ck2.read_bytes()
        report("criterion 8: format round-trips", ok)
