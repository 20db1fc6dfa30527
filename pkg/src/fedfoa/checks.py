"""Randomized invariant and oracle suites for the numerical core.

Each suite returns a :class:`SuiteResult`; the CLI ``check`` subcommand and
the acceptance tests both run these same functions.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .correlation import extract_correlation
from .linalg import orthogonality_error, procrustes_align, qr_decompose, thin_svd
from .ssl import build_encoder, contrastive_loss, foa_regularizer, forward, gradient_check


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    total: int = 0
    seconds: float = 0.0
    worst: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.total > 0 and self.passed == self.total

    def record(self, ok: bool, label: str, **metrics):
        self.total += 1
        self.passed += int(ok)
        for key, value in metrics.items():
            self.worst[key] = max(self.worst.get(key, 0.0), float(value))
        if not ok:
            self.failures.append(label)

    def summary(self) -> str:
        worst = ", ".join(f"{k}={v:.2e}" for k, v in sorted(self.worst.items()))
        return f"{self.name}: {self.passed}/{self.total} passed in {self.seconds:.2f}s ({worst})"


def qr_suite(count: int = 200, seed: int = 0, tol: float = 1e-8) -> SuiteResult:
    rng = np.random.default_rng(seed)
    res = SuiteResult("qr")
    start = time.perf_counter()
    for k in range(count):
        n = int(rng.integers(2, 33))
        m = int(rng.integers(max(8, n), 129))
        z = rng.normal(size=(m, n))
        q, r = qr_decompose(z)
        recon = np.linalg.norm(q @ r - z) / np.linalg.norm(z)
        orth = orthogonality_error(q)
        ok = (recon <= tol and orth <= tol and not np.any(np.tril(r, -1))
              and bool(np.all(np.diag(r) >= 0)))
        res.record(ok, f"#{k} {m}x{n}", reconstruction=recon, orthogonality=orth)
    res.seconds = time.perf_counter() - start
    return res


def svd_suite(count: int = 100, seed: int = 1, tol: float = 1e-7, max_dim: int = 64) -> SuiteResult:
    rng = np.random.default_rng(seed)
    res = SuiteResult("svd")
    start = time.perf_counter()
    for k in range(count):
        p, q = (int(v) for v in rng.integers(1, max_dim + 1, size=2))
        a = rng.normal(size=(p, q))
        u, s, v = thin_svd(a)
        recon = np.linalg.norm((u * s) @ v.T - a) / np.linalg.norm(a)
        orth = max(orthogonality_error(u), orthogonality_error(v))
        ok = recon <= tol and orth <= tol and bool(np.all(s >= 0)) and bool(np.all(np.diff(s) <= 0))
        res.record(ok, f"#{k} {p}x{q}", reconstruction=recon, orthogonality=orth)
    res.seconds = time.perf_counter() - start
    return res


def _random_orthonormal(rng, count, m, n):
    """Haar-distributed m x n orthonormal-column matrices via QR of Gaussians."""
    q, r = np.linalg.qr(rng.normal(size=(count, m, n)))
    return q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]


def procrustes_suite(count: int = 50, candidates: int = 10_000, m: int = 16, n: int = 4,
                     seed: int = 2, slack: float = 1e-9) -> SuiteResult:
    rng = np.random.default_rng(seed)
    res = SuiteResult("procrustes")
    start = time.perf_counter()
    for k in range(count):
        z = rng.normal(size=(m, n))
        r = np.triu(rng.normal(size=(n, n)))
        q_star, residual = procrustes_align(z, r)
        cands = _random_orthonormal(rng, candidates, m, n)
        best = np.sqrt(np.min(np.sum((z[None] - cands @ r) ** 2, axis=(1, 2))))
        res.record(residual <= best + slack and orthogonality_error(q_star) <= 1e-8, f"#{k}",
                   excess=max(residual - best, 0.0))
    res.seconds = time.perf_counter() - start
    return res


def gradient_suite(count: int = 20, seed: int = 3, tol: float = 1e-4, lam: float = 0.05,
                   tau: float = 0.5) -> SuiteResult:
    """Composite contrastive + gated regularizer loss on small random encoders.

    The peer matrix is built to have a larger trace than the batch, so the gate
    is open and the regularizer gradient is exercised.
    """
    rng = np.random.default_rng(seed)
    archs = ("mlp-6", "mlp-7-5", "mlp-5-6-4")
    res = SuiteResult("gradients")
    start = time.perf_counter()
    for k in range(count):
        arch = archs[k % len(archs)]
        model = build_encoder(arch, 5, 3, rng)
        for layer in model.all_layers:
            layer.bias[:] = rng.normal(0.0, 0.3, size=layer.bias.shape)
        x = rng.normal(size=(10, 5))
        z, _ = forward(model, x)
        r_peer = 2.0 * extract_correlation(z) + np.triu(rng.random((3, 3)))

        def loss_fn(out):
            lc, g = contrastive_loss(out, tau)
            if np.trace(r_peer) > np.trace(extract_correlation(out)):
                la, ga = foa_regularizer(out, r_peer)
                return lc + lam * la, g + lam * ga
            return lc, g

        err = gradient_check(model, x, loss_fn)
        res.record(err <= tol, f"#{k} {arch}", relative_error=err)
    res.seconds = time.perf_counter() - start
    return res


SUITES = {
    "qr": qr_suite,
    "svd": svd_suite,
    "procrustes": procrustes_suite,
    "gradients": gradient_suite,
}


def run_all(names=None) -> list[SuiteResult]:
    return [SUITES[name]() for name in (names or SUITES)]
