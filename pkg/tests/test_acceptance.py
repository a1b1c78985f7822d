"""End-to-end acceptance checks, each at its stated tolerance.

Every check records one PASS/FAIL line (shown in the terminal summary) and
then asserts, so a failing criterion also fails the run.
"""

import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from acceptance_report import record
from gradcheck import check_grads, model_grad_error
from test_diffusion import VOracle, eps_path_step
from test_metrics import (
    TABLE_CONTRIB,
    loop_bdi,
    loop_pearson,
    loop_rmse,
    loop_ssim_single_scale,
    loop_tg,
    random_instance,
    table_inputs,
)
from precipdiff import pipeline
from precipdiff.condition import (
    IR_TRANSFORM,
    exp_forward,
    exp_inverse,
    logistic_forward,
    mask_apply,
)
from precipdiff.config import RunConfig
from precipdiff.diffusion import ancestral_step, forward_sample, masked_sample, reconstruct, v_target
from precipdiff.metrics import bdi, ms_ssim_hole, pearson_hole, rmse_hole, sensitivity, tg_rmse
from precipdiff.schedule import cosine_schedule, linear_schedule
from precipdiff.tensor import (
    Tensor,
    adaptive_avg_pool3d,
    concat,
    conv3d,
    conv_transpose3d,
    dropout3d,
    group_norm,
    linear,
    maxpool3d,
    sigmoid,
    silu,
    square,
    tabs,
)
from precipdiff.unet import UNet3D, UNetConfig

DESK = RunConfig()


def projected(out, r):
    """Scalar loss sum(out * r) with a fixed random r."""
    return (out * Tensor(r)).sum()


def op_cases(rng):
    """(build, inputs, output shape) for every differentiable primitive."""
    n = rng.standard_normal
    drop_seed = 3
    return {
        "conv3d": (lambda t: conv3d(t[0], t[1], t[2], padding=1), [n((2, 2, 2, 4, 4)), n((3, 2, 3, 3, 3)), n(3)]),
        "conv3d strided": (lambda t: conv3d(t[0], t[1], stride=(1, 2, 2), padding=1),
                           [n((1, 2, 2, 4, 4)), n((2, 2, 3, 3, 3))]),
        "conv_transpose3d": (lambda t: conv_transpose3d(t[0], t[1], t[2], stride=(1, 2, 2)),
                             [n((2, 3, 2, 2, 3)), n((3, 2, 1, 2, 2)), n(2)]),
        "maxpool3d": (lambda t: maxpool3d(t[0]), [n((2, 2, 2, 4, 4))]),
        "group_norm": (lambda t: group_norm(t[0], 2, t[1], t[2]), [n((2, 4, 2, 3, 3)), n(4), n(4)]),
        "linear": (lambda t: linear(t[0], t[1], t[2]), [n((3, 5)), n((4, 5)), n(4)]),
        "silu": (lambda t: silu(t[0]), [n((3, 4))]),
        "sigmoid": (lambda t: sigmoid(t[0]), [n((3, 4))]),
        "abs": (lambda t: tabs(t[0]), [n((3, 4)) + 0.05]),
        "square": (lambda t: square(t[0]), [n((3, 4))]),
        "adaptive_avg_pool3d": (lambda t: adaptive_avg_pool3d(t[0]), [n((2, 3, 2, 2, 2))]),
        "concat": (lambda t: concat([t[0], t[1]], axis=1), [n((2, 2, 3)), n((2, 1, 3))]),
        "broadcast mul/add": (lambda t: t[0] * t[1] + t[2], [n((2, 3, 2, 2, 2)), n((2, 3, 1, 1, 1)), n((2, 3, 1, 1, 1))]),
        "dropout3d": (lambda t: dropout3d(t[0], 0.5, np.random.default_rng(drop_seed)), [n((2, 4, 1, 2, 2))]),
    }


class TestGradientFidelity:
    def test_ops_and_full_network(self):
        rng = np.random.default_rng(0)
        t0 = time.perf_counter()
        op_err = {}
        for name, (op, arrays) in op_cases(rng).items():
            r = rng.standard_normal(op([Tensor(a) for a in arrays]).shape)
            op_err[name] = check_grads(lambda t, op=op, r=r: projected(op(t), r), arrays)
        worst_op = max(op_err, key=op_err.get)

        toy = UNet3D(UNetConfig(base_channels=4, time_dim=8, time_hidden=16), seed=1)
        x = rng.standard_normal((1, 1, 2, 8, 8))
        c = rng.random((1, 10, 2, 8, 8))
        net_err = model_grad_error(toy, x, np.array([7.0]), c, rng, per_param=2)
        elapsed = time.perf_counter() - t0

        ok = op_err[worst_op] < 1e-4 and net_err < 1e-3 and elapsed < 120
        record("gradient fidelity", ok,
               f"{len(op_err)} ops, worst {worst_op} {op_err[worst_op]:.1e} < 1e-4; "
               f"full net {net_err:.1e} < 1e-3; {elapsed:.0f} s < 120 s")
        assert ok


class TestDiffusionAlgebra:
    def test_roundtrip_and_eps_path(self):
        rng = np.random.default_rng(1)
        sched = DESK.noise_schedule()
        worst_rt = 0.0
        for _ in range(1000):
            t = int(rng.integers(1, sched.T + 1))
            x0, eps = rng.random((2, 3, 4)), rng.standard_normal((2, 3, 4))
            xt, _ = forward_sample(x0, t, sched, rng, eps=eps)
            e_hat, x_hat = reconstruct(xt, v_target(x0, eps, t, sched), t, sched)
            worst_rt = max(worst_rt, np.abs(e_hat - eps).max(), np.abs(x_hat - x0).max())
        worst_path = 0.0
        for sch in (sched, cosine_schedule(200), linear_schedule(1000)):
            for t in list(range(1, 6)) + list(rng.integers(1, sch.T + 1, 30)):
                t = int(t)
                x0, eps, z = rng.random((2, 4, 4)), rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))
                xt, _ = forward_sample(x0, t, sch, rng, eps=eps)
                got = ancestral_step(xt, v_target(x0, eps, t, sch), t, sch, z)
                worst_path = max(worst_path, np.abs(got - eps_path_step(xt, eps, t, sch, z)).max())
        ok = worst_rt < 1e-10 and worst_path < 1e-10
        record("diffusion algebra", ok, f"roundtrip {worst_rt:.1e}, v-path vs eps-path {worst_path:.1e}, tol 1e-10")
        assert ok


class TestSchedules:
    def test_invariants(self):
        scheds = [linear_schedule(T) for T in (10, 200, 1000)] + [cosine_schedule(T, 0.008) for T in (10, 200, 1000)]
        scheds.append(DESK.noise_schedule())
        worst, ok = 0.0, True
        for s in scheds:
            ok &= s.alpha_bar[0] == 1.0
            ok &= bool(np.all(np.diff(s.alpha_bar) < 0))
            ok &= bool(np.all((s.beta[1:] > 0) & (s.beta[1:] < 1)))
            prod = 1.0
            for t in range(1, s.T + 1):
                prod *= 1.0 - s.beta[t]
                worst = max(worst, abs(prod - s.alpha_bar[t]))
        ok &= worst < 1e-12
        record("schedule invariants", ok, f"{len(scheds)} schedules; stored vs recomputed alpha_bar {worst:.1e} < 1e-12")
        assert ok


class TestMaskPreservation:
    def test_every_step_bit_exact(self):
        rng = np.random.default_rng(4)
        sched = DESK.noise_schedule()
        violations, steps = 0, 0
        for i in range(100):
            x0 = rng.random((3, 16, 32))
            m = (rng.random((3, 16, 32)) < rng.uniform(0.2, 0.8)).astype(float)
            xbar = mask_apply(x0, m)
            aux = rng.random((8, 3, 16, 32))
            obs = m == 1
            w = rng.standard_normal(3)
            model = lambda x, t, c, w=w: np.tanh(w[0] * x + w[1] * c[:, 2:3] + w[2] * t.reshape(-1, 1, 1, 1, 1) / 200)

            def check(t, x):
                nonlocal violations, steps
                steps += 1
                violations += int(not np.array_equal(x[0][obs], xbar[obs]))

            for sampler in ("ancestral", "ddim"):
                out = masked_sample(xbar, m, aux, model, sched, rng, sampler=sampler, n_steps=50, on_step=check)
                violations += int(not np.array_equal(out[obs], xbar[obs]))
        ok = violations == 0
        record("mask preservation", ok, f"100 pairs x (ancestral {sched.T} + DDIM 50) steps, {steps} checks, {violations} violations")
        assert ok


class TestOracleConvergence:
    def test_ddim50_exact_v(self):
        rng = np.random.default_rng(5)
        t0 = time.perf_counter()
        worst = 0.0
        for sched in (DESK.noise_schedule(), linear_schedule(1000), cosine_schedule(200)):
            x0 = rng.random((4, 3, 16, 32))
            m = (rng.random(x0.shape) < 0.5).astype(float)
            out = masked_sample(mask_apply(x0, m), m, rng.random((4, 8, 3, 16, 32)), VOracle(x0, sched), sched, rng,
                                sampler="ddim", n_steps=50)
            hole = m == 0
            worst = max(worst, np.abs(out[hole] - x0[hole]).max())
        elapsed = time.perf_counter() - t0
        ok = worst < 1e-3 and elapsed < 60
        record("oracle convergence", ok, f"DDIM(50) masked max-abs {worst:.1e} < 1e-3; {elapsed:.1f} s < 60 s")
        assert ok


@pytest.mark.slow
class TestTrainingSmoke:
    EPOCHS = 100

    def test_loss_drop_and_beats_tli(self):
        cfg = RunConfig(epochs=self.EPOCHS, K=8)
        t0 = time.perf_counter()
        with threadpool_limits(1):
            train_c, eval_c = pipeline.synth_corpus(cfg, "train"), pipeline.synth_corpus(cfg, "eval")
            state = pipeline.train(cfg, train_c)
            t_train = time.perf_counter() - t0
            _, mean = pipeline.sample_corpus(cfg, state.ema_model(), eval_c)
        model_rmse = np.mean([w["rmse"] for w in pipeline.window_metrics(mean, eval_c)])
        tli_rmse = np.mean([w["rmse"] for w in pipeline.window_metrics(pipeline.baseline_predict("tli", eval_c), eval_c)])
        lf_rmse = np.mean([w["rmse"] for w in pipeline.window_metrics(pipeline.baseline_predict("tli-lf", eval_c), eval_c)])
        elapsed = time.perf_counter() - t0
        first, tail = state.losses[0], float(np.mean(state.losses[-10:]))
        ok_loss = tail < 0.1 * first
        ok_rmse = model_rmse < tli_rmse
        ok_time = elapsed < 30 * 60
        record("training smoke: loss", ok_loss, f"last-10 mean {tail:.4f} vs 10% of first epoch {0.1 * first:.4f}")
        record("training smoke: hole RMSE", ok_rmse,
               f"model {model_rmse:.4f} vs TLI {tli_rmse:.4f} (TLI-LF {lf_rmse:.4f}), 12 held-out windows, K={cfg.K}")
        record("training smoke: runtime", ok_time, f"{elapsed / 60:.1f} min (train {t_train / 60:.1f}) < 30 min")
        assert ok_loss and ok_rmse and ok_time


class TestMetricOracles:
    def test_brute_force_and_trivial(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            shape = (int(rng.integers(2, 4)), 8, int(rng.choice([8, 12, 16])))
            p, t, M = random_instance(rng, shape)
            pairs = [
                (rmse_hole(p, t, M), loop_rmse(p, t, M)),
                (tg_rmse(p, t, M), loop_tg(p, t, M)),
                (pearson_hole(p, t, M), loop_pearson(p, t, M)),
                (ms_ssim_hole(p, t, M, scales=1), loop_ssim_single_scale(p, t, M)),
                (bdi(p, t, M), loop_bdi(p, t, M)),
            ]
            worst = max(worst, max(abs(a - b) for a, b in pairs))
        _, t, M = random_instance(rng)
        trivial = (rmse_hole(t, t, M), tg_rmse(t, t, M), pearson_hole(t, t, M), ms_ssim_hole(t, t, M), bdi(t, t, M))
        ok = worst < 1e-10 and trivial == (0.0, 0.0, 1.0, 1.0, 0.0)
        record("metric oracles", ok, f"50 instances, worst {worst:.1e} < 1e-10; identity gives {trivial}")
        assert ok


class TestSensitivityReproduction:
    def test_reference_contributions(self):
        full, ablated = table_inputs()
        tab = sensitivity(full, ablated)
        errs = {g: abs(tab.r[g] - v) for g, v in TABLE_CONTRIB.items()}
        total = sum(tab.r.values())
        ok = max(errs.values()) <= 0.02 and abs(total - 1) <= 1e-3
        got = ", ".join(f"{g} {tab.r[g]:.3f}" for g in TABLE_CONTRIB)
        record("sensitivity reproduction", ok, f"{got}; max dev {max(errs.values()):.3f} <= 0.02; sum {total:.6f}")
        assert ok


class TestTransforms:
    def test_forward_anchors(self):
        exp_ok = abs(float(exp_forward(5.0)) - 0.99) < 1e-10
        s = {x: float(logistic_forward(x, IR_TRANSFORM)) for x in (230.0, 270.0, 250.0)}
        log_ok = abs(s[230.0] - 0.8) < 1e-10 and abs(s[270.0] - 0.2) < 1e-10 and abs(s[250.0] - 0.5) < 1e-10
        ok = exp_ok and log_ok
        record("transforms: anchors", ok, f"T(5) = {float(exp_forward(5.0)):.12f}; S(230, 270, 250) = "
               + ", ".join(f"{v:.12f}" for v in s.values()))
        assert ok

    def test_inverse_roundtrip_0_to_100(self):
        x = np.linspace(0.0, 100.0, 10001)
        with np.errstate(all="ignore"):
            y = exp_forward(x)
            try:
                back = exp_inverse(y)
                err = float(np.max(np.abs(back - x)))
                where = float(x[np.argmax(np.abs(back - x) >= 1e-10)])
                detail = f"max error {err:.1e}, first >= 1e-10 at x = {where:.2f}"
            except ValueError:
                ok_part = x[y < 1.0]
                err = float(np.max(np.abs(exp_inverse(y[y < 1.0]) - ok_part)))
                detail = (f"y rounds to 1.0 in float64 for x >= {x[y >= 1.0][0]:.2f}, where the inverse is undefined; "
                          f"max error below that {err:.1e}")
                err = math.inf
        ok = err < 1e-10
        record("transforms: inverse roundtrip on [0, 100]", ok, detail)
        assert ok, detail


class TestDeterminism:
    def test_bitwise_repeat(self, tmp_path):
        cfg = RunConfig(epochs=1, n_train=8, n_eval=2, K=2, sampler_steps=5)
        outs = []
        with threadpool_limits(1):
            for run in ("a", "b"):
                tr, ev = pipeline.synth_corpus(cfg, "train"), pipeline.synth_corpus(cfg, "eval")
                st = pipeline.train(cfg, tr, tmp_path / run)
                members, mean = pipeline.sample_corpus(cfg, st.ema_model(), ev)
                outs.append((members, mean))
        same_ckpt = (tmp_path / "a" / pipeline.CHECKPOINT_NAME).read_bytes() == (
            tmp_path / "b" / pipeline.CHECKPOINT_NAME
        ).read_bytes()
        same_samples = outs[0][0].tobytes() == outs[1][0].tobytes() and outs[0][1].tobytes() == outs[1][1].tobytes()
        ok = same_ckpt and same_samples
        record("determinism", ok, f"checkpoint bytes equal: {same_ckpt}; samples bitwise equal: {same_samples}")
        assert ok
