"""Acceptance criteria, one test per criterion.

Each test records PASS or FAIL under its criterion number; the lines are
printed in the terminal summary (see ``conftest.pytest_terminal_summary``).
"""

import contextlib
import itertools
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from capspoe.capsule_core import (
    brute_force_joint,
    conditional_firing_prob,
    energy,
    route,
    squash,
    squash_magnitude_as_sigmoid,
    unnormalized_marginal,
    unsquash,
)
from capspoe.conv_frontend import (
    PARAM_NAMES,
    capsules_to_volume,
    decode,
    encode,
    init_stack,
    loss_and_grads,
    volume_to_capsules,
)
from capspoe.data_io import load_checkpoint, read_pgm, sample_data_path, write_idx_images
from capspoe.numerics import Rng
from capspoe.poe_train import (
    DecoderModel,
    OrientationStats,
    TrainConfig,
    best_capsule_activation,
    cd_gradient,
    generate,
    gradcheck,
    negative_phase,
    positive_phase,
    train_decoder,
    train_encoder,
)
from capspoe.synthetic import two_prototype_dataset
from conftest import digits_28

RESULTS = {}

TITLES = {
    1: "squash/unsquash inversion",
    2: "squash length equals sigmoid(log |z|^2)",
    3: "routing coefficients normalised over inputs",
    4: "firing probability agrees with squash and energy ratio",
    5: "joint factorises; marginal equals enumeration",
    6: "data-term gradient matches finite differences",
    7: "CD update vanishes at perfect reconstruction",
    8: "training moves activation up and angle error down",
    9: "conv shape chain and backprop finite differences",
    10: "end-to-end pipeline on 500 images",
    11: "every command byte-identical under a fixed seed",
}


@contextlib.contextmanager
def criterion(n):
    RESULTS[n] = "FAIL"
    yield
    RESULTS[n] = "PASS"


def sweep_vectors(rng, count=10_000, dims=(2, 8, 16), lo=1e-6, hi=1e3):
    """Random directions with log-uniform norms in [lo, hi], split across dims."""
    out = []
    for k, d in enumerate(dims):
        n = count // len(dims) + (1 if k < count % len(dims) else 0)
        v = rng.normal((n, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        norms = np.exp(np.log(lo) + (np.log(hi) - np.log(lo)) * rng.uniform(n))
        norms[:2] = [lo, hi]
        out.append(v * norms[:, None])
    return out


def random_sizes(rng, count, max_in=8, max_out=6, max_dim=6):
    raw = rng.raw(4 * count).reshape(count, 4)
    return [(1 + int(a % max_in), 1 + int(b % max_out), 1 + int(c % max_dim), 1 + int(d % max_dim)) for a, b, c, d in raw]


def test_criterion_01_inversion():
    with criterion(1):
        rng = Rng(101)
        groups = sweep_vectors(rng)
        assert sum(len(g) for g in groups) == 10_000
        for z in groups:
            back = unsquash(squash(z))
            rel = np.linalg.norm(back - z, axis=1) / np.linalg.norm(z, axis=1)
            assert rel.max() <= 1e-9, rel.max()
        for d in (2, 8, 16):
            x = rng.normal((3000, d))
            x /= np.linalg.norm(x, axis=1, keepdims=True)
            x *= rng.uniform(3000)[:, None] * 0.999999
            back = squash(unsquash(x))
            rel = np.linalg.norm(back - x, axis=1) / np.linalg.norm(x, axis=1)
            assert rel.max() <= 1e-9, rel.max()


def test_criterion_02_sigmoid_identity():
    with criterion(2):
        for z in sweep_vectors(Rng(102)):
            length = np.linalg.norm(squash(z), axis=1)
            sig = squash_magnitude_as_sigmoid(z)
            rel = np.abs(length - sig) / length
            assert rel.max() <= 1e-12, rel.max()


def test_criterion_03_routing_normalisation():
    with criterion(3):
        rng = Rng(103)
        for n_in, n_out, d_in, d_out in random_sizes(rng, 1000):
            x = squash(rng.normal((n_in, d_in)))
            w = rng.normal((n_in, n_out, d_out, d_in))
            state, _ = route(x, w)
            c = state.coeffs
            assert c.shape == (n_in, n_out)
            assert np.all(c >= 0)
            assert np.max(np.abs(c.sum(axis=0) - 1.0)) <= 1e-9


def test_criterion_04_energy_consistency():
    with criterion(4):
        rng = Rng(104)
        for n_in, n_out, d_in, d_out in random_sizes(rng, 1000):
            x = squash(rng.normal((n_in, d_in)))
            w = rng.normal((n_in, n_out, d_out, d_in))
            state, z = route(x, w)
            j = int(rng.raw(1)[0] % n_out)
            p = conditional_firing_prob(x, w, state.coeffs, j)
            assert abs(p - np.linalg.norm(squash(z[j]))) <= 1e-12
            firing = (rng.uniform(n_out) < 0.5).astype(float)
            on, off = firing.copy(), firing.copy()
            on[j], off[j] = 1.0, 0.0
            e_on, e_off = energy(x, on, w, state.coeffs), energy(x, off, w, state.coeffs)
            ratio = 1.0 / (1.0 + np.exp(e_on - e_off))
            assert abs(p - ratio) <= 1e-12


def test_criterion_05_factorisation():
    with criterion(5):
        rng = Rng(105)
        for n_out in range(1, 7):
            for _ in range(5):
                x = squash(rng.normal((3, 4)))
                w = rng.normal((3, n_out, 4, 4), 0.0, 0.7)
                c = route(x, w)[0].coeffs
                probs = [conditional_firing_prob(x, w, c, j) for j in range(n_out)]
                joint = brute_force_joint(x, w, c)
                assert len(joint) == 2**n_out
                for bits, p in joint.items():
                    expect = np.prod([probs[j] if b else 1.0 - probs[j] for j, b in enumerate(bits)])
                    assert abs(p - expect) <= 1e-9
        for n_out in range(1, 11):
            x = squash(rng.normal((4, 3)))
            w = rng.normal((4, n_out, 3, 3), 0.0, 0.7)
            c = route(x, w)[0].coeffs
            total = sum(
                np.exp(-energy(x, np.array(bits, dtype=float), w, c))
                for bits in itertools.product((0, 1), repeat=n_out)
            )
            m = unnormalized_marginal(x, w, c)
            assert abs(m - total) <= 1e-9 * total


def test_criterion_06_gradient():
    with criterion(6):
        rng = Rng(106)
        sizes = [(8, 4, 4)] * 10 + [(1, 1, 1), (2, 3, 2), (5, 2, 3), (8, 1, 4), (3, 4, 1), (7, 3, 4)]
        worst = 0.0
        for n_in, n_out, d in sizes:
            x = squash(rng.normal((n_in, d)))
            w = rng.normal((n_in, n_out, d, d))
            worst = max(worst, gradcheck(w, x, eps=1e-6).max_rel_error)
        assert worst < 1e-5, worst


def test_criterion_07_fixed_point():
    with criterion(7):
        rng = Rng(107)
        for n_in, n_out, d_in, d_out in random_sizes(rng, 200):
            x = squash(rng.normal((3, n_in, d_in)))
            w = rng.normal((n_in, n_out, d_out, d_in))
            pos = positive_phase(x, w)
            negative_phase(pos.routing, pos.x_out, w)
            g = cd_gradient(x, pos.z, x.copy(), pos.z.copy(), pos.routing)
            assert g.shape == w.shape
            assert np.all(g == 0.0)


def test_criterion_08_learning_direction():
    with criterion(8):
        data, _ = two_prototype_dataset(200, seed=0)
        cfg = TrainConfig(epochs=20, batch_size=16, seed=0)
        enc_hist, dec_hist = [], []
        enc, _ = train_encoder(data, cfg, n_out=2, d_out=4, on_epoch=lambda e, m: enc_hist.append(m["activation"]))
        w0 = Rng(cfg.seed).normal(enc.w.shape, 0.0, cfg.init_std)
        before, after = best_capsule_activation(data, w0), best_capsule_activation(data, enc.w)
        assert enc_hist[0] == before
        assert after > before
        train_decoder(data, enc, cfg, on_epoch=lambda e, m: dec_hist.append(m["angle_error"]))
        assert len(dec_hist) == 21
        assert dec_hist[-1] < dec_hist[0]


def test_criterion_09_conv_chain():
    with criterion(9):
        stack = init_stack(Rng(109))
        img = digits_28(1)[0][..., None]
        vol = encode(img, stack)
        assert vol.shape == (6, 6, 128)
        caps = volume_to_capsules(vol)
        assert caps.shape == (576, 8)
        back = capsules_to_volume(caps, stack.volume_shape)
        assert back.shape == (6, 6, 128)
        assert decode(back, stack).shape == (28, 28, 1)

        tiny = init_stack(Rng(9), (4, 4, 1), channels=2, kernel=2, dropout_rate=0.0)
        prng = Rng(10)
        tiny = tiny.with_params({n: prng.normal(getattr(tiny, n).shape, 0.0, 0.5) for n in PARAM_NAMES})
        imgs = prng.uniform(3 * 16).reshape(3, 4, 4, 1)
        _, grads = loss_and_grads(imgs, tiny)
        eps, worst = 1e-5, 0.0
        for name in PARAM_NAMES:
            p = getattr(tiny, name)
            for k in range(p.size):
                plus, minus = p.copy(), p.copy()
                plus.reshape(-1)[k] += eps
                minus.reshape(-1)[k] -= eps
                fd = (loss_and_grads(imgs, tiny.with_params({name: plus}))[0]
                      - loss_and_grads(imgs, tiny.with_params({name: minus}))[0]) / (2 * eps)
                a = grads[name].reshape(-1)[k]
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
        assert worst < 1e-4, worst


def cli(*argv, cwd):
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    cmd = [sys.executable, "-m", "capspoe.cli", *(str(a) for a in argv)]
    return subprocess.run(cmd, cwd=cwd, env=env, capture_output=True, text=True)


@pytest.mark.slow
def test_criterion_10_pipeline(tmp_path):
    with criterion(10):
        data = tmp_path / "digits500-idx3-ubyte"
        write_idx_images(digits_28(500), data)
        caps_flags = ["--epochs", 10, "--lr", 100, "--l2", 0, "--quiet"]
        steps = [
            ("train-conv", "--data", data, "--out", "model.poec", "--epochs", 5, "--quiet"),
            ("train-caps", "--data", data, "--checkpoint", "model.poec", *caps_flags),
            ("train-decoder", "--data", data, "--checkpoint", "model.poec", *caps_flags),
            ("generate", "--checkpoint", "model.poec", "--out", "samples.pgm", "--seed", 3, "--quiet"),
            ("generate", "--checkpoint", "model.poec", "--out", "restricted.pgm", "--seed", 3, "--restricted", "--quiet"),
        ]
        start = time.perf_counter()
        for step in steps:
            res = cli(*step, cwd=tmp_path)
            assert res.returncode == 0, (step[0], res.stderr)
        elapsed = time.perf_counter() - start
        print(f"pipeline wall time {elapsed:.1f}s")
        assert elapsed < 15 * 60

        sections = load_checkpoint(tmp_path / "model.poec")
        n_up = sections["decoder.u"].shape[0]
        assert n_up == 20
        for name in ("samples.pgm", "restricted.pgm"):
            raw = (tmp_path / name).read_bytes()
            assert raw.startswith(b"P5\n560 112\n255\n")
            assert read_pgm(tmp_path / name).shape == (4 * 28, n_up * 28)

        lines = (tmp_path / "restricted.samples.csv").read_text().splitlines()
        header = lines[0].split(",")
        dots = [float(line.split(",")[header.index("dot_mean_direction")]) for line in lines[1:]]
        assert len(dots) == 4 * n_up
        assert min(dots) >= 0.0

        stats = OrientationStats(sections["stats.sums"], sections["stats.counts"])
        decoder = DecoderModel(sections["decoder.u"])
        rng = Rng(3)
        for _ in range(4):
            for j in range(n_up):
                _, g = generate(decoder, stats, rng, j, restricted=True)
                assert g @ stats.directions[j] >= 0.0


def test_criterion_11_determinism(tmp_path):
    with criterion(11):
        data = sample_data_path()
        flags = ["--epochs", 1, "--batch", 16, "--seed", 5, "--quiet"]
        steps = [
            ("train-conv", "--data", data, "--out", "m.poec", *flags),
            ("train-caps", "--data", data, "--checkpoint", "m.poec", *flags, "--epochs", 10, "--batch", 8, "--lr", 100, "--l2", 0),
            ("train-decoder", "--data", data, "--checkpoint", "m.poec", *flags, "--lr", 100, "--l2", 0),
            ("generate", "--checkpoint", "m.poec", "--out", "s.pgm", "--seed", 5, "--quiet"),
            ("generate", "--checkpoint", "m.poec", "--out", "r.pgm", "--seed", 5, "--restricted", "--quiet"),
            ("gradcheck", "--out", "gc.csv", "--seed", 5),
        ]
        runs = []
        for name in ("a", "b"):
            d = tmp_path / name
            d.mkdir()
            stdout = []
            for step in steps:
                res = cli(*step, cwd=d)
                assert res.returncode == 0, (step[0], res.stderr)
                stdout.append(res.stdout)
            runs.append((d, stdout))
        (da, out_a), (db, out_b) = runs
        assert out_a == out_b
        files = sorted(p.name for p in da.iterdir())
        assert files == sorted(p.name for p in db.iterdir())
        for expected in ("m.poec", "s.pgm", "r.pgm", "gc.csv", "s.png", "m.poec.caps-history.png"):
            assert expected in files
        for name in files:
            assert (da / name).read_bytes() == (db / name).read_bytes(), name
