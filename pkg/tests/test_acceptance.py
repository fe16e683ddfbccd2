"""Acceptance gate: one test per numbered criterion.

Each test prints a single `[ACCEPTANCE n] <label>: PASS/FAIL` line straight
to the terminal (bypassing capture) so the gate status is visible in any
pytest run.  Criteria 7-9 share session-scoped multi-seed training runs and
dominate the suite's runtime.
"""

import math
import os
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest

from incsr.autograd import Tensor, avg_pool2d, conv2d, dense, transpose_conv2d
from incsr.cli import main as cli_main
from incsr.datagen import gen_source, gen_target, split
from incsr.gradcheck import check_gradients
from incsr.losses import (
    LossWeights, adversarial_loss_d, adversarial_loss_g, edge_loss,
    identity_loss, kd_loss, lce_loss, reconstruction_loss,
)
from incsr.metrics import evaluate, frechet_distance, psnr, ssim
from incsr.networks import (
    Discriminator, EDGE_POOL_KERNELS, Generator, IdentityEmbedder,
    parameter_checksum,
)
from incsr.training import (
    MixSpec, TrainConfig, build_checkpoint, build_mixed_dataset,
    discriminator_from_checkpoint, generator_from_checkpoint,
    incremental_train, load_checkpoint, pretrain_source, save_checkpoint,
    _train_loop,
)

from oracles import (
    avg_pool2d_loops, conv2d_loops, matmul_loops, transpose_conv2d_loops,
)
from test_networks import DISCRIMINATOR_GOLDEN_TRACE, GENERATOR_GOLDEN_TRACE


def _report(capsys, num, label, fn):
    err = None
    try:
        fn()
    except BaseException as exc:  # report, then re-raise
        err = exc
    with capsys.disabled():
        print(f"\n[ACCEPTANCE {num}] {label}: {'PASS' if err is None else 'FAIL'}")
    if err is not None:
        raise err


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


# ----------------------------------------------------------------------
# criterion 1: gradient suite


def test_criterion_1_gradient_suite(capsys):
    def body():
        t0 = time.time()
        rng = np.random.default_rng(0)
        probes = 100

        # layer kernels
        x = t64(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
        w = t64(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        b = t64(rng.standard_normal(4), requires_grad=True)
        for stride in (1, 2):
            check_gradients(
                lambda x, w, b: (conv2d(x, w, b, stride=stride) ** 2).mean(),
                [x, w, b], n_probes=probes, rng=rng)
        xt = t64(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
        wt = t64(rng.standard_normal((4, 3, 4, 4)), requires_grad=True)
        bt = t64(rng.standard_normal(3), requires_grad=True)
        check_gradients(
            lambda x, w, b: (transpose_conv2d(x, w, b, stride=2) ** 2).mean(),
            [xt, wt, bt], n_probes=probes, rng=rng)
        xp = t64(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
        check_gradients(lambda x: (avg_pool2d(x, 5) ** 2).mean(),
                        [xp], n_probes=probes, rng=rng)
        xd = t64(rng.standard_normal((6, 5)), requires_grad=True)
        wd = t64(rng.standard_normal((5, 4)), requires_grad=True)
        bd = t64(rng.standard_normal(4), requires_grad=True)
        check_gradients(lambda x, w, b: (dense(x, w, b) ** 2).mean(),
                        [xd, wd, bd], n_probes=probes, rng=rng)

        # losses
        sr_t = t64(rng.random((1, 3, 6, 6)))
        bn_t = t64(rng.random((1, 2, 3, 3)))
        sr_s = t64(rng.random((1, 3, 6, 6)), requires_grad=True)
        bn_s = t64(rng.random((1, 2, 3, 3)), requires_grad=True)
        check_gradients(lambda s, b: kd_loss(sr_t, s, bn_t, b, 5.0, 0.01)[0],
                        [sr_s, bn_s], n_probes=probes, rng=rng)
        e_hr = t64(rng.random((1, 1, 6, 6)))
        e_sr = t64(rng.random((1, 1, 6, 6)), requires_grad=True)
        check_gradients(lambda e: edge_loss(e, e_hr), [e_sr],
                        n_probes=probes, rng=rng)
        lr = t64(rng.uniform(-4, 4, (10, 1)), requires_grad=True)
        lf = t64(rng.uniform(-4, 4, (10, 1)), requires_grad=True)
        check_gradients(lambda r, f: adversarial_loss_d(r, f), [lr, lf],
                        n_probes=probes, rng=rng)
        lg = t64(rng.uniform(-4, 4, (10, 1)), requires_grad=True)
        check_gradients(lambda f: adversarial_loss_g(f), [lg],
                        n_probes=probes, rng=rng)
        hr = t64(rng.random((1, 3, 5, 5)))
        sr = t64(hr.data + rng.uniform(0.05, 0.2, hr.shape), requires_grad=True)
        check_gradients(lambda s: lce_loss(s, hr), [sr],
                        n_probes=probes, rng=rng)
        from incsr.autograd import softmax
        z = t64(rng.standard_normal((2, 8)), requires_grad=True)
        probs = np.exp(rng.standard_normal((2, 8)))
        v_hr = t64(probs / probs.sum(axis=1, keepdims=True))
        check_gradients(lambda z: identity_loss(softmax(z, axis=1), v_hr),
                        [z], n_probes=probes, rng=rng)
        sr_r = t64(rng.random((1, 3, 5, 5)), requires_grad=True)
        check_gradients(lambda s: reconstruction_loss(s, hr), [sr_r],
                        n_probes=probes, rng=rng)

        elapsed = time.time() - t0
        assert elapsed < 120, f"gradient suite took {elapsed:.1f}s (budget 120s)"

    _report(capsys, 1, "finite-difference gradients, losses + kernels", body)


# ----------------------------------------------------------------------
# criterion 2: kernel oracles


def test_criterion_2_kernel_oracles(capsys):
    def body():
        t0 = time.time()
        rng = np.random.default_rng(1)
        cases = 50
        for _ in range(cases):
            B, C, O = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
            H = int(rng.integers(4, 9))
            k = int(rng.choice([1, 3]))
            stride = int(rng.choice([1, 2]))
            x = rng.standard_normal((B, C, H, H))
            w = rng.standard_normal((O, C, k, k))
            got = conv2d(Tensor(x), Tensor(w), stride=stride).data
            ref = conv2d_loops(x, w, stride=stride)
            np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-7)
        for _ in range(cases):
            B, O, C = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
            H = int(rng.integers(2, 6))
            k = int(rng.choice([2, 3, 4]))
            x = rng.standard_normal((B, O, H, H))
            w = rng.standard_normal((O, C, k, k))
            got = transpose_conv2d(Tensor(x), Tensor(w), stride=2).data
            ref = transpose_conv2d_loops(x, w, stride=2)
            np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-7)
        for _ in range(cases):
            B, C = rng.integers(1, 3), rng.integers(1, 4)
            k = int(rng.choice([2, 3, 5]))
            H = int(rng.integers((k + 1) // 2, 9))
            x = rng.standard_normal((B, C, H, H))
            got = avg_pool2d(Tensor(x), k).data
            np.testing.assert_allclose(got, avg_pool2d_loops(x, k),
                                       rtol=1e-5, atol=1e-7)
        for _ in range(cases):
            n, m, p = rng.integers(1, 6, size=3)
            x = rng.standard_normal((n, m))
            w = rng.standard_normal((m, p))
            got = dense(Tensor(x), Tensor(w)).data
            np.testing.assert_allclose(got, matmul_loops(x, w),
                                       rtol=1e-5, atol=1e-7)
        elapsed = time.time() - t0
        assert elapsed < 60, f"oracle suite took {elapsed:.1f}s (budget 60s)"

    _report(capsys, 2, "conv/transpose/pool/dense vs loop oracles", body)


# ----------------------------------------------------------------------
# criterion 3: architecture contract


def test_criterion_3_architecture(capsys):
    def body():
        assert EDGE_POOL_KERNELS == {32: 5, 64: 7, 128: 10}
        gen = Generator.init(np.random.default_rng(0), feature_width=64)
        trace = []
        rng = np.random.default_rng(1)
        out = gen.forward(Tensor(rng.random((2, 3, 16, 16)).astype(np.float32)),
                          trace=trace)
        assert out.sr.shape == (2, 3, 128, 128)
        assert [m.shape for m in out.edge_maps] == [
            (2, 1, 32, 32), (2, 1, 64, 64), (2, 1, 128, 128)]
        assert trace == GENERATOR_GOLDEN_TRACE
        disc = Discriminator.init(np.random.default_rng(2))
        dtrace = []
        logits = disc.forward(
            Tensor(rng.random((2, 3, 128, 128)).astype(np.float32)), trace=dtrace)
        assert logits.shape == (2, 1)
        assert dtrace == DISCRIMINATOR_GOLDEN_TRACE

    _report(capsys, 3, "16->128 generator + 128->logit discriminator traces", body)


# ----------------------------------------------------------------------
# criterion 4: closed-form metric cases


def test_criterion_4_metric_closed_forms(capsys):
    def body():
        a = np.zeros((8, 8, 3))
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
        img = np.random.default_rng(3).random((32, 32, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)
        s = math.sqrt(2) / 2
        fa = np.array([[-s], [s]])
        fb = np.array([[1 - math.sqrt(2)], [1 + math.sqrt(2)]])
        assert frechet_distance(fa, fb) == pytest.approx(2.0, abs=1e-6)
        rng = np.random.default_rng(4)
        delta = 1.5
        ma = rng.standard_normal((4000, 4))
        mb = rng.standard_normal((4000, 4))
        mb[:, 0] += delta
        assert frechet_distance(ma, mb) == pytest.approx(delta ** 2, rel=0.10)

    _report(capsys, 4, "PSNR/SSIM/Frechet closed forms", body)


# ----------------------------------------------------------------------
# criterion 5: loss identities


def test_criterion_5_loss_identities(capsys):
    def body():
        rng = np.random.default_rng(5)
        sr = t64(rng.random((2, 3, 8, 8)))
        bn = t64(rng.random((2, 2, 4, 4)))
        assert kd_loss(sr, sr, bn, bn, 5.0, 0.01)[0].item() == 0.0
        e = t64(rng.random((2, 1, 8, 8)))
        assert edge_loss(e, e).item() == 0.0
        assert reconstruction_loss(sr, sr).item() == 0.0
        assert lce_loss(sr, sr).item() == pytest.approx(0.0, abs=1e-5)
        z = rng.standard_normal((3, 16))
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        assert identity_loss(t64(p), t64(p)).item() == pytest.approx(0.0, abs=1e-9)
        for _ in range(25):
            za, zb = rng.standard_normal((2, 3, 16))
            pa = np.exp(za - za.max(axis=-1, keepdims=True))
            pa /= pa.sum(axis=-1, keepdims=True)
            pb = np.exp(zb - zb.max(axis=-1, keepdims=True))
            pb /= pb.sum(axis=-1, keepdims=True)
            assert identity_loss(t64(pa), t64(pb)).item() <= math.log(2) + 1e-6
        one_a = np.zeros((2, 8))
        one_b = np.zeros((2, 8))
        one_a[:, 0] = 1.0
        one_b[:, 1] = 1.0
        assert identity_loss(t64(one_a), t64(one_b)).item() == pytest.approx(
            math.log(2), abs=1e-6)

    _report(capsys, 5, "zero identities, JS <= ln 2, one-hot = ln 2", body)


# ----------------------------------------------------------------------
# criterion 6: teacher freeze + KD-zero equivalence


def test_criterion_6_freeze_and_kd_zero(capsys):
    def body():
        cfg = TrainConfig(epochs=1, batch_size=4, feature_width=8,
                          d_width_scale=0.0625, lr=1e-3)
        src = gen_source(11, 8)
        tgt = gen_target(11, 8)
        pre = pretrain_source(cfg, src)
        teacher = build_checkpoint(pre.generator, pre.discriminator, cfg, 1)
        before = {k: v.tobytes() for k, v in teacher.params.items()}
        incremental_train(teacher, MixSpec(3, 5), cfg, src, tgt)
        assert all(teacher.params[k].tobytes() == v for k, v in before.items())

        zero_kd = replace(cfg, weights=LossWeights(kd_response=0, kd_feature=0))
        mix = MixSpec(0, 6)
        via_incremental = incremental_train(teacher, mix, zero_kd, src, tgt)
        student = generator_from_checkpoint(teacher)
        disc = discriminator_from_checkpoint(teacher)
        _train_loop(student, disc, build_mixed_dataset(src, tgt, mix, zero_kd.seed),
                    zero_kd, task_domain="target")
        assert parameter_checksum(via_incremental.generator.params) == \
            parameter_checksum(student.params)

    _report(capsys, 6, "teacher immutability + KD-zero bit-equivalence", body)


# ----------------------------------------------------------------------
# criteria 7-9: forgetting experiments (heavy, session-scoped)

SEEDS = (0, 1, 2)
N_TARGET = 16
REPLAY_LEVELS = (2, 4, 8)
KD_LEVEL = 4          # the replay size used for criterion 7(b)
POOL = 256
PRETRAIN_IMAGES = 12
EVAL_IMAGES = 8


def _experiment_config(seed):
    return TrainConfig(epochs=60, batch_size=8, feature_width=8,
                       d_width_scale=0.0625, lr=1e-3, seed=seed)


@pytest.fixture(scope="session")
def forward_runs():
    """Per seed: PSNR of teacher, fine-tune, and each replay level."""
    embedder = IdentityEmbedder()
    results = {}
    for seed in SEEDS:
        cfg = _experiment_config(seed)
        src_train, src_test = split(gen_source(seed, POOL), 0.75, seed)
        tgt_train, tgt_test = split(gen_target(seed, POOL), 0.75, seed)
        src_test = src_test[:EVAL_IMAGES]
        tgt_test = tgt_test[:EVAL_IMAGES]
        pre = pretrain_source(cfg, src_train[:PRETRAIN_IMAGES])
        teacher = build_checkpoint(pre.generator, pre.discriminator, cfg,
                                   cfg.epochs)

        def psnrs(generator):
            return (evaluate(generator, src_test, embedder)["psnr"],
                    evaluate(generator, tgt_test, embedder)["psnr"])

        entry = {"teacher": psnrs(pre.generator)}
        ft = incremental_train(teacher, MixSpec(0, N_TARGET), cfg,
                               src_train, tgt_train)
        entry["finetune"] = psnrs(ft.generator)
        for ns in REPLAY_LEVELS:
            kd = incremental_train(teacher, MixSpec(ns, N_TARGET), cfg,
                                   src_train, tgt_train)
            entry[f"replay{ns}"] = psnrs(kd.generator)
        results[seed] = entry
    return results


def test_criterion_7_forgetting_mitigation(capsys, forward_runs):
    def body():
        d0, d1, tgt_gain, tgt_gap = [], [], [], []
        for seed in SEEDS:
            r = forward_runs[seed]
            d0.append(r["teacher"][0] - r["finetune"][0])
            d1.append(r["teacher"][0] - r[f"replay{KD_LEVEL}"][0])
            tgt_gain.append(r["finetune"][1] - r["teacher"][1])
            tgt_gap.append(r[f"replay{KD_LEVEL}"][1] - r["finetune"][1])
        assert statistics.median(d0) > 0, (
            f"fine-tuning did not degrade the source domain: {d0}")
        assert statistics.median(tgt_gain) > 0, (
            f"fine-tuning did not improve the target domain: {tgt_gain}")
        assert statistics.median(d1) < statistics.median(d0), (
            f"replay distillation did not reduce forgetting: "
            f"d1={d1} vs d0={d0}")
        assert statistics.median(tgt_gap) > -0.5, (
            f"distilled target PSNR fell more than 0.5 dB below "
            f"fine-tuning: {tgt_gap}")

    _report(capsys, 7, "replay distillation reduces source forgetting", body)


def test_criterion_8_replay_size_trend(capsys, forward_runs):
    def body():
        medians = []
        for ns in REPLAY_LEVELS:
            deltas = [forward_runs[s]["teacher"][0]
                      - forward_runs[s][f"replay{ns}"][0] for s in SEEDS]
            medians.append(statistics.median(deltas))
        slack = 1e-9
        assert all(b <= a + slack for a, b in zip(medians, medians[1:])), (
            f"median source degradation increased with replay size: "
            f"{dict(zip(REPLAY_LEVELS, medians))}")

    _report(capsys, 8, "more replay never increases median forgetting", body)


REVERSE_POOL_SOURCE = 32   # task pool: its train split must cover N_TARGET
REVERSE_POOL_TARGET = 16   # pretrain pool
REVERSE_KD_LEVEL = 2
REVERSE_EVAL = 8


@pytest.fixture(scope="session")
def reverse_runs(tmp_path_factory):
    """Grid CLI with direction=reverse, per seed; returns PSNR tables.

    In reverse the cartoon-like domain is pretrained and the photo-like
    domain is learned incrementally, so "forgetting" is measured on the
    target domain and task progress on the source domain.
    """
    embedder = IdentityEmbedder()
    results = {}
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f"reverse{seed}")
        spec = out / "spec.cfg"
        spec.write_text("\n".join([
            "epochs = 60",
            "batch_size = 8",
            "feature_width = 8",
            "d_width_scale = 0.0625",
            "lr = 0.001",
            f"seed = {seed}",
            "direction = reverse",
            f"pool_source = {REVERSE_POOL_SOURCE}",
            f"pool_target = {REVERSE_POOL_TARGET}",
            f"eval_n = {REVERSE_EVAL}",
            "setting1.name = finetune",
            f"setting1.mix = 0,{N_TARGET}",
            "setting2.name = replay",
            f"setting2.mix = {REVERSE_KD_LEVEL},{N_TARGET}",
            "",
        ]))
        rc = cli_main(["grid", "--spec", str(spec), "--out", str(out / "runs")])
        assert rc == 0
        rows = {}
        with open(out / "runs" / "results.csv", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            for line in fh:
                vals = dict(zip(header, line.strip().split(",")))
                rows[(vals["experiment"], vals["test_domain"])] = float(vals["psnr"])
        # teacher PSNRs on the same held-out splits the grid used
        teacher = generator_from_checkpoint(
            load_checkpoint(out / "runs" / "teacher.ckpt"))
        _, src_test = split(gen_source(seed, REVERSE_POOL_SOURCE), 0.75, seed)
        _, tgt_test = split(gen_target(seed, REVERSE_POOL_TARGET), 0.75, seed)
        rows[("teacher", "source")] = evaluate(
            teacher, src_test[:REVERSE_EVAL], embedder)["psnr"]
        rows[("teacher", "target")] = evaluate(
            teacher, tgt_test[:REVERSE_EVAL], embedder)["psnr"]
        results[seed] = rows
    return results


def test_criterion_9_reverse_direction(capsys, reverse_runs):
    def body():
        d0, d1, task_gap = [], [], []
        for seed in SEEDS:
            r = reverse_runs[seed]
            # pretrained domain is "target"; the incremental task is "source"
            d0.append(r[("teacher", "target")] - r[("finetune", "target")])
            d1.append(r[("teacher", "target")] - r[("replay", "target")])
            task_gap.append(r[("replay", "source")] - r[("finetune", "source")])
        assert statistics.median(d1) < statistics.median(d0), (
            f"reverse direction: replay did not reduce forgetting "
            f"(d1={d1}, d0={d0})")
        assert statistics.median(task_gap) > -0.5, (
            f"reverse direction: distilled task PSNR fell more than "
            f"0.5 dB below fine-tuning: {task_gap}")

    _report(capsys, 9, "reverse-direction grid shows the same mitigation", body)


# ----------------------------------------------------------------------
# criterion 10: reproducibility


def test_criterion_10_reproducibility(capsys, tmp_path):
    def body():
        cfg = tmp_path / "train.cfg"
        cfg.write_text("epochs = 1\nbatch_size = 4\nfeature_width = 8\n"
                       "d_width_scale = 0.0625\nlr = 0.001\n")
        ckpt = tmp_path / "m.ckpt"
        assert cli_main(["pretrain", "--config", str(cfg), "--out", str(ckpt),
                         "--pool", "4"]) == 0
        outputs = []
        for tag in ("a", "b"):
            csv = tmp_path / f"report_{tag}.csv"
            assert cli_main(["eval", "--ckpt", str(ckpt), "--out", str(csv),
                             "--n", "2"]) == 0
            outputs.append(csv.read_bytes())
        assert outputs[0] == outputs[1]

        ckpt2 = tmp_path / "m2.ckpt"
        assert cli_main(["pretrain", "--config", str(cfg), "--out", str(ckpt2),
                         "--pool", "4"]) == 0
        assert ckpt.read_bytes() == ckpt2.read_bytes()
        log1 = (tmp_path / "m.ckpt.log.csv").read_bytes()
        log2 = (tmp_path / "m2.ckpt.log.csv").read_bytes()
        assert log1 == log2

    _report(capsys, 10, "byte-identical CSV/checkpoint outputs per seed", body)
