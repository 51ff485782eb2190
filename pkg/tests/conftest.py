"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's own code paths: gradient
checks use central finite differences on the forward pass only, and the
metric oracles recount misses/false alarms at every threshold in O(n^2).
"""

import numpy as np
import pytest

from nvl import tensor as T
from nvl.config import RunConfig
from nvl.corpus import build_corpus


# -- gradient oracle -------------------------------------------------------------


def finite_difference(f, tensors, step=1e-5):
    """Central-difference gradients of scalar f() w.r.t. each tensor's data."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            original = t.data[idx]
            t.data[idx] = original + step
            up = f()
            t.data[idx] = original - step
            down = f()
            t.data[idx] = original
            g[idx] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def rel_error(approx, exact):
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    return np.max(np.abs(approx - exact)) / (np.max(np.abs(exact)) + 1e-12)


def check_gradients(build_loss, tensors, tol=1e-4, step=1e-5):
    """Backward pass vs finite differences; build_loss() returns a scalar Tensor."""
    loss = build_loss()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]
    for t in tensors:
        t.zero_grad()

    def forward_value():
        with T.no_grad():
            return build_loss().item()

    numeric = finite_difference(forward_value, tensors, step)
    for t, a, n in zip(tensors, analytic, numeric):
        err = rel_error(a, n)
        assert err < tol, f"gradient mismatch (rel err {err:.3e}) for tensor of shape {t.shape}"


# -- metric oracles ----------------------------------------------------------------


def _sweep_thresholds(target, nontarget):
    scores = np.unique(np.concatenate([target, nontarget]))
    mids = (scores[:-1] + scores[1:]) / 2.0
    return np.concatenate([[scores[0] - 1.0], mids, [scores[-1] + 1.0]])


def brute_force_operating_points(target, nontarget):
    """Recount P_miss/P_fa at every threshold (accept iff score >= t)."""
    target = np.asarray(target, dtype=np.float64)
    nontarget = np.asarray(nontarget, dtype=np.float64)
    p_miss, p_fa = [], []
    for t in _sweep_thresholds(target, nontarget):
        p_miss.append(np.count_nonzero(target < t) / len(target))
        p_fa.append(np.count_nonzero(nontarget >= t) / len(nontarget))
    return np.array(p_miss), np.array(p_fa)


def brute_force_eer(target, nontarget):
    p_miss, p_fa = brute_force_operating_points(target, nontarget)
    diff = p_miss - p_fa
    j = int(np.flatnonzero(diff >= 0.0)[0])
    if j == 0:
        return float(p_miss[0])
    gamma = (0.0 - diff[j - 1]) / (diff[j] - diff[j - 1])
    return float(p_miss[j - 1] + gamma * (p_miss[j] - p_miss[j - 1]))


def brute_force_min_dcf(target, nontarget, p_target):
    p_miss, p_fa = brute_force_operating_points(target, nontarget)
    costs = (p_target * p_miss + (1.0 - p_target) * p_fa) / min(p_target, 1.0 - p_target)
    return float(np.min(costs))


# -- shared tiny corpus ------------------------------------------------------------


TINY_OVERRIDES = dict(
    seed=0, train_speakers=3, test_speakers=2, train_utts_per_speaker=4,
    test_utts_per_speaker=2, duration_lo_s=1.5, duration_hi_s=2.0,
    min_train_utts_per_speaker=1, min_train_frames=100,
    enhancer_layers=1, enhancer_hidden=12, tdnn_channels=12,
    tdnn_contexts="-1,0,1;-1,0,1;0;0;0", embed_dim=12, fc2_dim=12,
    batch_utts_stage1=6, batch_pairs_stage2=4, segment_frames=60,
    max_epochs_stage1=3, max_epochs_stage2=2, max_epochs_finetune=1,
    trials_per_speaker=2)


@pytest.fixture(scope="session")
def tiny_cfg():
    return RunConfig(**TINY_OVERRIDES)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_cfg, tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = build_corpus(tiny_cfg, root, force=True)
    return root, manifest
