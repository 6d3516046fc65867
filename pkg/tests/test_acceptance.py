"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``; the lines are also
collected in an "acceptance criteria" section of the terminal summary.
"""

import itertools
import re
import time
from dataclasses import replace

import numpy as np
import pytest
from oracles import naive_conv2d, naive_matmul, set_iou

from tmanet import cli
from tmanet.checkpoint import load_checkpoint, save_checkpoint
from tmanet.data import (
    SyntheticSceneSpec,
    VideoClip,
    make_snippets,
    read_dataset,
    write_dataset,
)
from tmanet.gradcheck import OP_SUITE, TOLERANCE
from tmanet.metrics import ConfusionMatrix, accumulate, evaluate, miou
from tmanet.model import EncodedFeatures, ModelConfig, TMANet, temporal_memory_attention
from tmanet.tensor import Tensor, conv2d, matmul
from tmanet.train import TrainConfig, poly_lr, run_training

REPORT_LINE = re.compile(r"^mIoU (\d+\.\d{6}) pixel_acc (\d+\.\d{6})$")


# ---------------------------------------------------------------------------
# 1. gradient suite


def test_1_gradient_suite(criterion, capsys):
    t0 = time.perf_counter()
    code = cli.main(["gradcheck", "--size", "tiny"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    rows = [l.split("\t") for l in out.splitlines() if l.count("\t") == 2]
    names = {r[0] for r in rows}
    worst = max(float(r[1]) for r in rows)
    model_rows = [r for r in rows if r[0].startswith("model:")]
    ok = (
        code == 0
        and set(OP_SUITE) <= names
        and len(model_rows) == len(TMANet(ModelConfig(memory_length=2, key_channels=4, num_classes=3,
                                                      backbone_widths=(4, 6), backbone_strides=(2, 2))).params)
        and worst < TOLERANCE
        and elapsed < 60
    )
    assert criterion(
        "1 gradient suite",
        ok,
        f"{len(rows)} checks ({len(model_rows)} model parameters), worst rel err {worst:.2e} < 1e-4, {elapsed:.1f} s < 60 s, exit {code}",
    )


# ---------------------------------------------------------------------------
# 2. attention invariants


def _random_encoded(rng):
    T, ck, h, w = (int(v) for v in rng.integers(1, 5, size=4))
    cv = 4 * ck
    return EncodedFeatures(
        Q_K=Tensor(rng.standard_normal((ck, h, w)) * 3),
        Q_V=Tensor(rng.standard_normal((cv, h, w))),
        M_K=Tensor(rng.standard_normal((T, ck, h, w)) * 3),
        M_V=Tensor(rng.standard_normal((T, cv, h, w))),
    ), ck


def test_2_attention_invariants(criterion):
    rng = np.random.default_rng(2024)
    row_err = collapse_err = 0.0
    for _ in range(100):
        enc, ck = _random_encoded(rng)
        _, S = temporal_memory_attention(enc, ModelConfig(key_channels=ck))
        row_err = max(row_err, float(np.abs(S.S.data.sum(axis=1) - 1).max()))
        v = rng.standard_normal(enc.M_V.shape[1])
        enc.M_V = Tensor(np.broadcast_to(v[None, :, None, None], enc.M_V.shape).copy())
        readout, _ = temporal_memory_attention(enc, ModelConfig(key_channels=ck))
        collapse_err = max(collapse_err, float(np.abs(readout.data - v[:, None, None]).max()))

    perm_err = 0.0
    spec = SyntheticSceneSpec(num_objects=2, occluder="occlude_query_only")
    for seed in range(5):
        model = TMANet(ModelConfig(memory_length=3, key_channels=8, backbone_widths=(8, 16, 32), backbone_strides=(2, 2, 2)), seed=seed)
        clip = make_snippets(replace(spec, seed=seed), 1, 32, 32, 4)[0]
        base = model.forward(clip).main_logits.data
        for order in itertools.permutations(range(3)):
            perm = VideoClip([clip.memory[i] for i in order], clip.query, clip.label, clip.query_index)
            perm_err = max(perm_err, float(np.abs(model.forward(perm).main_logits.data - base).max()))

    ok = row_err < 1e-9 and perm_err < 1e-9 and collapse_err < 1e-12
    assert criterion(
        "2 attention invariants",
        ok,
        f"row-sum err {row_err:.1e} < 1e-9 (100 inputs), permutation max-abs {perm_err:.1e} < 1e-9, "
        f"constant collapse {collapse_err:.1e} < 1e-12",
    )


# ---------------------------------------------------------------------------
# 3. oracle equivalence


def test_3_oracle_equivalence(criterion):
    rng = np.random.default_rng(3)
    miou_err = 0.0
    for _ in range(5):
        pred = rng.integers(0, 3, size=(8, 8))  # class 3 absent from both maps
        gt = rng.integers(0, 3, size=(8, 8))
        gt[rng.random((8, 8)) < 0.1] = 255
        scores = miou(accumulate(ConfusionMatrix(4), pred, gt))
        oracle = set_iou(pred, gt, 4)
        miou_err = max(miou_err, abs(scores["mean_iou"] - float(np.mean(list(oracle.values())))))
        miou_err = max(miou_err, max(abs(scores["per_class_iou"][c] - v) for c, v in oracle.items()))
        assert np.isnan(scores["per_class_iou"][3])

    mm_err, n_mm = 0.0, 0
    for P, Q, R in itertools.product(range(1, 9), repeat=3):
        a, b = rng.standard_normal((P, Q)), rng.standard_normal((Q, R))
        mm_err = max(mm_err, float(np.abs(matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b)).max()))
        n_mm += 1

    conv_err, n_conv = 0.0, 0
    for H, W, k, stride in itertools.product(range(1, 9), range(1, 9), (1, 3), (1, 2)):
        for pad in {0, k // 2}:
            if H + 2 * pad < k or W + 2 * pad < k:
                continue
            for c_in, c_out in ((1, 1), (3, 2), (8, 8)):
                x = rng.standard_normal((c_in, H, W))
                w = rng.standard_normal((c_out, c_in, k, k))
                b = rng.standard_normal(c_out)
                got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
                conv_err = max(conv_err, float(np.abs(got - naive_conv2d(x, w, b, stride, pad)).max()))
                n_conv += 1

    ok = miou_err < 1e-12 and mm_err < 1e-12 and conv_err < 1e-12
    assert criterion(
        "3 oracle equivalence",
        ok,
        f"mIoU vs set oracle {miou_err:.1e}, matmul {mm_err:.1e} over {n_mm} shapes, "
        f"conv {conv_err:.1e} over {n_conv} cases (all < 1e-12)",
    )


# ---------------------------------------------------------------------------
# 4. poly learning rate


def test_4_poly_lr(criterion):
    got = [poly_lr(0.01, 0, 80000, 0.9), poly_lr(0.01, 80000, 80000, 0.9), poly_lr(0.01, 40000, 80000, 0.9)]
    want = [0.01, 0.0, 0.01 * 0.5**0.9]
    err = max(abs(g - w) for g, w in zip(got, want))
    assert criterion("4 poly lr", err < 1e-12, f"values {got}, max err {err:.1e} < 1e-12")


# ---------------------------------------------------------------------------
# 5. overfit

OVERFIT_MODEL = ModelConfig(memory_length=2, key_channels=8, backbone_widths=(8, 16, 32), backbone_strides=(1, 1, 1))
OVERFIT_TRAIN = TrainConfig(total_iters=500, batch_size=2, base_lr=0.01, augment=False, sampler="continuous", seed=0)


@pytest.mark.slow
def test_5_overfit(criterion, tmp_path):
    # 8 fixed clips: each holds exactly its two memory frames and the labeled query
    clips = make_snippets(SyntheticSceneSpec(num_objects=2, seed=3), 8, 32, 32, 3)
    t0 = time.perf_counter()
    res = run_training(OVERFIT_TRAIN, OVERFIT_MODEL, clips, tmp_path / "a")
    elapsed = time.perf_counter() - t0
    acc = evaluate(res.model, clips, 2, "continuous").pixel_acc
    first, last = res.rows[0]["total_loss"], res.rows[-1]["total_loss"]
    drop = 1 - last / first

    again = run_training(OVERFIT_TRAIN, OVERFIT_MODEL, clips, tmp_path / "b", stop_after=50)
    same = [r["total_loss"] for r in again.rows] == [r["total_loss"] for r in res.rows[:50]]

    ok = acc >= 0.99 and elapsed < 300 and same and drop >= 0.9
    assert criterion(
        "5 overfit",
        ok,
        f"pixel acc {acc:.4%} >= 99% after 500 iters in {elapsed:.0f} s < 300 s, loss {first:.3f} -> {last:.4f} "
        f"({drop:.1%} drop), rerun trace bitwise equal: {same}",
    )


# ---------------------------------------------------------------------------
# 6. directional ablation over memory length

ABLATION_SEEDS = (0, 1, 2)
ABLATION_TS = (0, 1, 2, 4)


def ablation_data():
    spec = SyntheticSceneSpec(num_objects=1, occluder="occlude_query_only", seed=100)
    train = make_snippets(spec, 24, 32, 32, 12)
    test = make_snippets(replace(spec, seed=200), 8, 32, 32, 12)
    return train, test


@pytest.mark.slow
def test_6_directional_ablation(criterion, tmp_path, capsys):
    train, test = ablation_data()
    test_file = tmp_path / "test.tmad"
    write_dataset(test_file, test)
    scores = {}
    for T in ABLATION_TS:
        model_cfg = ModelConfig(memory_length=T, key_channels=8, backbone_widths=(8, 16, 32), backbone_strides=(2, 1, 1))
        for seed in ABLATION_SEEDS:
            train_cfg = TrainConfig(total_iters=1500, sampler="random", augment=True, seed=seed)
            res = run_training(train_cfg, model_cfg, train, tmp_path / f"T{T}_s{seed}")
            scores[T, seed] = evaluate(res.model, test, T, "random").mean_iou
    mean = {T: float(np.mean([scores[T, s] for s in ABLATION_SEEDS])) for T in ABLATION_TS}

    # the same comparison through the command line on seed 0's checkpoints
    reports = {}
    for T in (0, 2):
        capsys.readouterr()
        assert cli.main(["eval", "--ckpt", str(tmp_path / f"T{T}_s0" / "model.tmac"), "--data", str(test_file),
                         "--sampler", "random"]) == 0
        m = REPORT_LINE.match(capsys.readouterr().out.strip().splitlines()[-1])
        reports[T] = float(m.group(1))

    per_seed = ", ".join(f"T{T}=" + "/".join(f"{scores[T, s]:.3f}" for s in ABLATION_SEEDS) for T in ABLATION_TS)
    ok = mean[2] >= mean[0] + 0.05 and mean[4] >= mean[1] and reports[2] > reports[0]
    assert criterion(
        "6 directional ablation",
        ok,
        f"3-seed mean mIoU T0 {mean[0]:.4f}, T1 {mean[1]:.4f}, T2 {mean[2]:.4f}, T4 {mean[4]:.4f}; "
        f"T2-T0 = {mean[2] - mean[0]:+.4f} (need >= +0.05), T4-T1 = {mean[4] - mean[1]:+.4f} (need >= 0); "
        f"cli eval seed 0: T0 {reports[0]:.6f} < T2 {reports[2]:.6f}; per seed {per_seed}",
    )


# ---------------------------------------------------------------------------
# 7. sampler / aggregation plumbing


def test_7_sampler_aggregation_plumbing(criterion, tmp_path, capsys):
    data = tmp_path / "d.tmad"
    assert cli.main(["gen", "--out", str(data), "--clips", "4", "--size", "32", "--length", "12",
                     "--occlude", "query", "--seed", "5", "--verify"]) == 0
    summaries = []
    ok = True
    for sampler, aggregation in itertools.product(("random", "continuous"), ("concat", "sum")):
        out = tmp_path / f"{sampler}_{aggregation}"
        keys = [f"sampler={sampler}", f"aggregation={aggregation}", "total_iters=20", "backbone_strides=2,2,2"]
        code = cli.main(["train", "--data", str(data), "--out", str(out), *sum((["--set", k] for k in keys), [])])
        capsys.readouterr()
        code |= cli.main(["eval", "--ckpt", str(out / "model.tmac"), "--data", str(data), "--sampler", sampler])
        lines = capsys.readouterr().out.strip().splitlines()
        m = REPORT_LINE.match(lines[-1]) if lines else None
        valid = (
            code == 0
            and lines[0] == "class\tIoU"
            and len(lines) == 4 + 2
            and m is not None
            and 0 <= float(m.group(1)) <= 1
            and all(np.isfinite(float(l.split("\t")[2])) for l in (out / "metrics.tsv").read_text().splitlines())
        )
        ok &= valid
        summaries.append(f"{sampler}/{aggregation} mIoU {m.group(1) if m else '?'}")
    assert criterion("7 sampler/aggregation plumbing", ok, "; ".join(summaries))


# ---------------------------------------------------------------------------
# 8. serialization


def test_8_serialization(criterion, tmp_path):
    cfg = ModelConfig(memory_length=2, key_channels=4, backbone_widths=(4, 6, 8), backbone_strides=(2, 1, 2))
    model = TMANet(cfg, seed=8)
    save_checkpoint(tmp_path / "a.tmac", model)
    back, _ = load_checkpoint(tmp_path / "a.tmac")
    save_checkpoint(tmp_path / "b.tmac", back)
    ckpt_ok = (tmp_path / "a.tmac").read_bytes() == (tmp_path / "b.tmac").read_bytes() and all(
        back.params[n].data.tobytes() == p.data.tobytes() for n, p in model.params.items()
    )

    clips = make_snippets(SyntheticSceneSpec(num_objects=2, seed=8, occluder="occlude_query_only"), 4, 16, 16, 8)
    write_dataset(tmp_path / "a.tmad", clips)
    again = read_dataset(tmp_path / "a.tmad")
    write_dataset(tmp_path / "b.tmad", again)
    data_ok = (tmp_path / "a.tmad").read_bytes() == (tmp_path / "b.tmad").read_bytes() and all(
        x.query.tobytes() == y.query.tobytes() and x.label.tobytes() == y.label.tobytes() for x, y in zip(clips, again)
    )

    train_cfg = TrainConfig(total_iters=10, crop=16, seed=8)
    full = run_training(train_cfg, cfg, clips, tmp_path / "full")
    part = run_training(train_cfg, cfg, clips, tmp_path / "part", stop_after=4)
    rest = run_training(train_cfg, cfg, clips, tmp_path / "part", resume=part.checkpoint)
    trace_ok = [r["total_loss"] for r in part.rows + rest.rows] == [r["total_loss"] for r in full.rows]
    trace_ok &= rest.checkpoint.read_bytes() == full.checkpoint.read_bytes()
    trace_ok &= (tmp_path / "part" / "metrics.tsv").read_bytes() == full.log_path.read_bytes()

    assert criterion(
        "8 serialization",
        ckpt_ok and data_ok and trace_ok,
        f"checkpoint bitwise {ckpt_ok}, dataset bitwise {data_ok}, resume 4+6 vs 10 iterations bitwise {trace_ok}",
    )
