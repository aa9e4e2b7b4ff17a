"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line through the ``criterion`` fixture;
the lines are repeated in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from pudprune import data, experiments as E, losses, trainer
from pudprune import layers as L
from pudprune import model as M
from pudprune import tensor as T
from pudprune.config import PipelineConfig
from pudprune.errors import FormatError
from pudprune.losses import LossParts, LossWeights, TeacherOutput
from pudprune.tensor import Tensor
from pudprune.verify import (discriminator_optimum, finite_diff, softmax_reference,
                             train_tabular_discriminator)

FD_EPS, FD_REL = 1e-5, 1e-4


# ----------------------------------------------------------------------------
# 1. gradient suite

def _fd_network(seed):
    specs = [L.conv(4, stride=2, padding=1), L.scalednorm(), L.relu(), L.maxpool(2),
             L.conv(5, kernel=2, padding=0), L.scalednorm(), L.relu(), L.avgpool(1),
             L.flatten(), L.dense(6), L.relu(), L.dense(3)]
    model = M.build(specs, seed, (2, 8, 8))
    rng = np.random.default_rng(seed)
    for _, norm in model.norm_layers():
        norm.gamma = Tensor(rng.uniform(0.5, 1.5, norm.channels), True)
        norm.beta = Tensor(rng.normal(0, 0.3, norm.channels), True)
        norm.running_mean = rng.normal(size=norm.channels)
        norm.running_var = rng.uniform(0.5, 2.0, norm.channels)
    for _, p in model.parameters():
        if p.data.ndim == 1 and not np.any(p.data):
            p.data[:] = rng.normal(0, 0.1, p.data.shape)  # non-zero biases
    return model


def _layer_checks(seed):
    rng = np.random.default_rng(seed)
    out = {}
    model = _fd_network(seed)
    x = Tensor(rng.normal(size=(3, 2, 8, 8)), True)
    y = rng.integers(0, 3, 3)
    params = {n: p for n, p in model.parameters()} | {"input": x}
    for mode in ("train", "eval"):
        model.set_modes([mode] * len(model.layers))
        loss = lambda: losses.supervision_loss(model.forward(x), y)
        out[f"network/{mode}"] = finite_diff(loss, params, FD_EPS).overall_rel
    z = Tensor(rng.normal(size=(4, 5)) * 3, True)
    w = Tensor(rng.normal(size=(4, 5)))
    for tau in (1.0, 3.0):
        loss = lambda: T.reduce_sum(T.mul(L.softmax_temperature(z, tau), w))
        out[f"softmax_tau{tau:g}"] = finite_diff(loss, [z], FD_EPS).overall_rel
        loss = lambda: T.reduce_sum(T.mul(L.log_softmax_temperature(z, tau), w))
        out[f"log_softmax_tau{tau:g}"] = finite_diff(loss, [z], FD_EPS).overall_rel
    return out


def _loss_checks(seed):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(6, 4)) * 2, True)
    dl, du = Tensor(rng.normal(size=3), True), Tensor(rng.normal(size=4), True)
    teacher = TeacherOutput.from_logits(rng.normal(size=(3, 4)) * 2, 3.0)
    y = rng.integers(0, 4, 3)
    terms = {
        "supervision": lambda: losses.supervision_loss(T.rows(z, 0, 3), y),
        "distillation": lambda: losses.distillation_loss(T.rows(z, 3, 6), teacher, 3.0),
        "discriminator": lambda: losses.discriminator_loss(T.sigmoid(dl), T.sigmoid(du), 1.7),
        "discriminator_logits": lambda: losses.discriminator_loss_from_logits(dl, du, 1.7),
        "aligner": lambda: losses.aligner_loss(T.sigmoid(du)),
        "aligner_logits": lambda: losses.aligner_loss_from_logits(du, dl),
        "rademacher": lambda: losses.rademacher_loss(z),
        "total": lambda: losses.total_loss(
            LossParts(terms["supervision"](), terms["distillation"](),
                      T.add(terms["aligner"](), terms["discriminator"]()), terms["rademacher"](),
                      l1=1.3),
            LossWeights(lam=0.1, alpha=0.7, beta=0.5, eta=0.3)),
    }
    out = {k: finite_diff(f, {"z": z, "dl": dl, "du": du}, FD_EPS).overall_rel
           for k, f in terms.items()}
    # the L1 term is applied as lam * sign(gamma); compare with central differences
    g = rng.normal(size=12)
    _, sign = losses.l1_sparsity(g)
    worst = 0.0
    for k in range(g.size):
        up, down = g.copy(), g.copy()
        up[k] += FD_EPS
        down[k] -= FD_EPS
        numeric = (losses.l1_sparsity(up)[0] - losses.l1_sparsity(down)[0]) / (2 * FD_EPS)
        worst = max(worst, abs(numeric - sign[k]) / max(abs(numeric), abs(sign[k])))
    out["l1"] = worst
    return out


def test_c1_gradient_suite(criterion):
    t0 = time.time()
    worst, where = 0.0, ""
    for seed in range(10):
        for name, rel in (_layer_checks(seed) | _loss_checks(seed)).items():
            if rel >= worst:
                worst, where = rel, f"{name} seed {seed}"
    secs = time.time() - t0
    ok = worst < FD_REL and secs < 60
    criterion(1, ok, f"max rel err {worst:.2e} at {where}; {secs:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 2. formula exactness

def test_c2_formula_exactness(criterion):
    checks = {}
    for k in (2, 8, 10, 100):
        got = losses.supervision_loss(Tensor(np.full((3, k), 0.7)), [0, 1, k - 1]).item()
        checks[f"lnK K={k}"] = abs(got - math.log(k)) < 1e-12
    checks["rademacher 2.0"] = losses.rademacher_loss(Tensor(np.array([[1.0, -2.0], [3.0, 1.0]]))).item() == 2.0
    half = Tensor(np.full(5, 0.5))
    got = losses.discriminator_loss(half, Tensor(np.full(7, 0.5)), 1.0).item()
    checks["2ln2"] = abs(got - 2 * math.log(2)) < 1e-12
    rng = np.random.default_rng(0)
    worst = 0.0
    for scale in (1.0, 10.0, 100.0, 1000.0):
        z = rng.uniform(-scale, scale, size=(50, 10))
        for tau in (0.5, 1.0, 3.0, 20.0):
            s = L.softmax_temperature(Tensor(z), tau).data
            worst = max(worst, float(np.max(np.abs(s.sum(axis=1) - 1.0))))
    checks["softmax rows"] = worst < 1e-9
    ref = softmax_reference([1000.0, -1000.0, 999.0], 3.0)
    got = L.softmax_temperature(Tensor(np.array([[1000.0, -1000.0, 999.0]])), 3.0).data[0]
    checks["softmax mpmath"] = np.max(np.abs(got - np.array(ref))) < 1e-12
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    criterion(2, ok, f"{len(checks)} checks, max row-sum err {worst:.1e}"
              + (f"; failed {failed}" if failed else ""))
    assert ok


# ----------------------------------------------------------------------------
# 3. surgery equivalence

def test_c3_surgery_equivalence(criterion):
    worst, same = 0.0, True
    for seed in range(3):
        rng = np.random.default_rng(seed)
        m = M.build(M.toy_cnn((6, 8, 12, 12), 8, 3, 32), seed)
        for _, norm in m.norm_layers():
            norm.gamma = Tensor(rng.uniform(-1, 1, norm.channels), True)
            norm.beta = Tensor(rng.normal(size=norm.channels), True)
            norm.running_mean = rng.normal(size=norm.channels)
            norm.running_var = rng.uniform(0.5, 2.0, norm.channels)
        m.input_mean, m.input_std = np.full(3, 0.5), np.full(3, 0.25)
        idx = M.collect_gamma(m)
        quota = M.prune_quota(len(idx), 0.5)
        t = M.global_threshold(idx, 0.5)
        sel, _ = M.select_channels(idx, t, quota)
        masked = M.masked_copy(m, sel).eval()
        pruned, rep = M.prune(M.masked_copy(m, sel), t, quota=quota)
        pruned.eval()
        images = rng.uniform(size=(100, 3, 32, 32))
        a, b = masked.predict(images), pruned.predict(images)
        worst = max(worst, float(np.max(np.abs(a - b))))
        same &= bool(np.array_equal(a.argmax(axis=1), b.argmax(axis=1)))
        assert rep.pruned_count > 0
    ok = worst < 1e-9 and same
    criterion(3, ok, f"max abs diff {worst:.1e} over 100 inputs x 3 models; classes equal={same}")
    assert ok


# ----------------------------------------------------------------------------
# 4. threshold exactness

def test_c4_threshold_exactness(criterion):
    widths = (100, 200, 300, 400)
    details, ok = [], True
    for p in (0.1, 0.5, 0.7):
        rng = np.random.default_rng(int(p * 10))
        m = M.build(M.toy_cnn(widths, 4, 1, 4), 0, (1, 4, 4))
        for _, norm in m.norm_layers():
            norm.gamma = Tensor(rng.normal(size=norm.channels), True)
        entries = M.collect_gamma(m).entries
        assert len(entries) == 1000
        # independent oracle: stable sort of |gamma| in (layer, channel) order
        k = math.ceil(p * 1000)
        order = sorted(range(1000), key=lambda i: (abs(entries[i][2]), i))
        expected = {(entries[i][0], entries[i][1]) for i in order[:k]}
        _, rep = M.prune_fraction(m, p)
        removed = {(l, c) for l, cs in rep.pruned.items() for c in cs}
        good = (rep.pruned_count == k - rep.rescued and removed <= expected
                and rep.threshold == abs(entries[order[k - 1]][2])
                and sum(m.widths()) == 1000 - rep.pruned_count)
        ok &= good
        details.append(f"p={p}: {rep.pruned_count}/{k} (rescued {rep.rescued})")
    criterion(4, ok, "; ".join(details))
    assert ok


# ----------------------------------------------------------------------------
# 5. discriminator optimum

def test_c5_tabular_discriminator(criterion):
    t0 = time.time()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(3):
        pl, pu = rng.dirichlet(np.ones(16)), rng.dirichlet(np.ones(16))
        d = train_tabular_discriminator(pl, pu)
        worst = max(worst, float(np.max(np.abs(d - discriminator_optimum(pl, pu)))))
    p = rng.dirichlet(np.ones(16))
    equal = float(np.max(np.abs(train_tabular_discriminator(p, p) - 0.5)))
    secs = time.time() - t0
    ok = worst < 0.02 and equal < 0.02 and secs < 10
    criterion(5, ok, f"max |D-D*| {worst:.1e}; equal pools max |D-0.5| {equal:.1e}; {secs:.2f}s")
    assert ok


# ----------------------------------------------------------------------------
# 6. sparsity response

def test_c6_sparsity_response(criterion):
    t0 = time.time()
    res = E.sparsity_sweep()
    secs = time.time() - t0
    vals = [res[lam] for lam in sorted(res)]
    ok = all(a > b for a, b in zip(vals, vals[1:])) and secs < 300
    shown = ", ".join(f"{lam:g}: {res[lam]:.3f}" for lam in sorted(res))
    criterion(6, ok, f"||Gamma||_1 by lambda {{{shown}}}; {secs:.0f}s")
    assert ok


# ----------------------------------------------------------------------------
# 7 and 8. end-to-end trend and ablation direction

BASELINE, DISTILL, FULL = (False,) * 4, (True, False, False, False), (True,) * 4


@pytest.fixture(scope="module")
def trend():
    setup = E.TrendSetup()
    t0 = time.time()
    teacher = E.train_teacher(setup)
    rows = E.ablation(teacher, setup, (BASELINE, FULL, DISTILL))
    return setup, teacher, rows, time.time() - t0


def _fmt(values):
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


def test_c7_end_to_end_trend(trend, criterion):
    setup, teacher, rows, secs = trend
    base = E.median(rows[trainer.cell_name(BASELINE)])
    full = E.median(rows[trainer.cell_name(FULL)])
    gain = full - base
    ok = teacher.accuracy >= 0.90 and gain >= 0.05 and secs < 1800
    criterion(7, ok, f"teacher {teacher.accuracy:.3f}; labeled-only {_fmt(rows['d0c0a0r0'])} "
                     f"median {base:.3f}; full pipeline {_fmt(rows['d1c1a1r1'])} median {full:.3f}; "
                     f"gain {100 * gain:+.1f}pp; {secs:.0f}s with criterion 8 cells")
    assert ok


def test_c8_ablation_direction(trend, criterion):
    _, _, rows, _ = trend
    base = E.median(rows[trainer.cell_name(BASELINE)])
    distill = E.median(rows[trainer.cell_name(DISTILL)])
    full = E.median(rows[trainer.cell_name(FULL)])
    ok = distill > base and full >= distill
    def rel(ok_):
        return "ok" if ok_ else "VIOLATED"

    criterion(8, ok, f"medians: none {base:.3f}, distillation {distill:.3f}, all four {full:.3f}; "
                     f"distillation > none {rel(distill > base)}; all four >= distillation "
                     f"{rel(full >= distill)}; all four per seed {rows[trainer.cell_name(FULL)]}, "
                     f"distillation per seed {rows[trainer.cell_name(DISTILL)]}")
    assert ok


# ----------------------------------------------------------------------------
# 9. reproducibility

def test_c9_bitwise_reproducible(tmp_path, criterion):
    lab, unl, test = data.synth_generate(3, 4, 48, 64, 0.3, n_test=40, size=16)
    cfg = PipelineConfig(widths=(4, 6, 8, 8), class_count=4, iterations_sparse=8,
                         batch_labeled=8, batch_unlabeled=8, lr_sparse=0.01, lam=1e-2, seed=11)
    teacher = trainer.new_teacher(cfg, lab, 0)
    trainer.pretrain(teacher, lab, 10, 0.05, 16, seed=0)
    paths = []
    for run in range(2):
        res = trainer.run_pipeline(teacher, lab, unl, cfg, test)
        paths.append(tmp_path / f"run{run}.ckpt")
        M.save(res.model, paths[-1], iteration=cfg.iterations_finetune, rng_state={"seed": cfg.seed})
    a, b = paths[0].read_bytes(), paths[1].read_bytes()
    ok = a == b
    criterion(9, ok, f"two full runs, {len(a)}-byte checkpoints identical={ok}")
    assert ok


# ----------------------------------------------------------------------------
# 10. file formats

def _raises(fn):
    try:
        fn()
    except FormatError:
        return True
    return False


def test_c10_format_round_trips(tmp_path, criterion):
    rng = np.random.default_rng(10)
    checks = {}
    m = M.build(M.toy_cnn((4, 6, 8), 5, 3, 16), 1, (3, 16, 16))
    for _, norm in m.norm_layers():
        norm.gamma = Tensor(rng.normal(size=norm.channels), True)
        norm.running_var = rng.uniform(0.5, 2, norm.channels)
    M.prune_fraction(m, 0.4)
    ck = tmp_path / "m.ckpt"
    M.save(m, ck, iteration=9, rng_state={"seed": 4})
    M.save(M.load(ck).model, tmp_path / "m2.ckpt", iteration=9, rng_state={"seed": 4})
    checks["checkpoint round trip"] = ck.read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
    arr = rng.normal(size=(3, 2, 4, 5))
    td = tmp_path / "a.cftd"
    data.write_tensor_file(td, arr)
    checks["tensor round trip"] = data.read_tensor_file(td).tobytes() == arr.tobytes()

    def corrupt(src, name, edit, loader):
        raw = bytearray(src.read_bytes())
        raw = edit(raw)
        bad = tmp_path / name
        bad.write_bytes(bytes(raw))
        return _raises(lambda: loader(bad))

    def set_magic(raw):
        raw[0:4] = b"ABCD"
        return raw

    def set_version(raw):
        raw[4:8] = (99).to_bytes(4, "little")
        return raw

    for label, src, loader in (("checkpoint", ck, M.load), ("tensor", td, data.read_tensor_file)):
        checks[f"{label} magic"] = corrupt(src, "x1", set_magic, loader)
        checks[f"{label} version"] = corrupt(src, "x2", set_version, loader)
        checks[f"{label} truncated"] = corrupt(src, "x3", lambda r: r[:-3], loader)
        checks[f"{label} header truncated"] = corrupt(src, "x4", lambda r: r[:6], loader)
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    criterion(10, ok, f"{len(checks)} checks" + (f"; failed {failed}" if failed else ""))
    assert ok
