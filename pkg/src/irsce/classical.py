"""Classical MMV baselines: weighted simultaneous OMP and untrained AMP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net_rlamp import RlampNet

RIDGE = 1e-10


@dataclass
class SolverReport:
    x: np.ndarray
    iterations: int
    residual_norms: list = field(default_factory=list)
    support: list = field(default_factory=list)
    rank_warning: bool = False
    residuals: list = field(default_factory=list)
    b: list = field(default_factory=list)
    iterates: list = field(default_factory=list)


def _ls(a: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    gram = a.conj().T @ a
    rhs = a.conj().T @ y
    if np.linalg.matrix_rank(a) < a.shape[1]:
        return np.linalg.solve(gram + RIDGE * np.eye(gram.shape[0]), rhs), True
    return np.linalg.solve(gram, rhs), False


def swomp(y: np.ndarray, ups: np.ndarray, max_iter: int = 100, eps: float | None = None,
          weighted: bool = True) -> SolverReport:
    """Greedy joint-support recovery over all subcarriers.

    Each iteration picks the column maximizing the weighted sum over
    subcarriers of squared correlations with the residual.  The weights are
    inverse residual powers per subcarrier, which makes every subcarrier's
    term scale-free; flat weights give plain SOMP.
    Coefficients are refit by least squares on the support.  Stops when the
    squared residual norm drops to ``eps`` or below, after ``max_iter``
    iterations, or when the support reaches ``M`` columns.
    """
    y = np.asarray(y)
    ups = np.asarray(ups)
    m, g = ups.shape
    norms = np.linalg.norm(ups, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    un = ups / norms
    eps = 0.0 if eps is None else eps
    x = np.zeros((g, y.shape[1]), dtype=complex)
    resid = y.copy()
    rep = SolverReport(x, 0, [float(np.linalg.norm(resid))])
    support: list[int] = []
    coef = None
    while rep.iterations < max_iter and len(support) < min(m, g):
        if np.sum(np.abs(resid) ** 2) <= eps or not np.any(resid):
            break
        power = np.sum(np.abs(resid) ** 2, axis=0)
        w = 1.0 / np.maximum(power, 1e-300) if weighted else np.ones_like(power)
        score = (np.abs(un.conj().T @ resid) ** 2) @ w
        score[support] = -np.inf
        support.append(int(np.argmax(score)))
        coef, warn = _ls(un[:, support], y)
        rep.rank_warning |= warn
        new = y - un[:, support] @ coef
        rep.iterations += 1
        rep.residual_norms.append(float(np.linalg.norm(new)))
        resid = new
    if coef is not None:
        x[support] = coef / norms[support, None]
    rep.x = x
    rep.support = support
    return rep


def amp_untrained(y: np.ndarray, ups: np.ndarray, n_iter: int = 10, lam=(1.0, 1.0, 1.0),
                  onsager_norm: str = "sqrtM", shrinkage: str = "entry") -> SolverReport:
    """AMP with ``beta = Ups^H`` and constant shrinkage parameters.

    This is the unrolled recursion without the residual shortcut, so every
    iterate is ``X_n = eta(R_n)``.  The recursion runs on the column-normalized
    ``Ups`` and the iterates are scaled back to the original coefficients.
    Accepts a single ``[M, K]`` problem or a batch ``[B, M, K]``.
    """
    ups = np.asarray(ups)
    norms = np.linalg.norm(ups, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    net = RlampNet("lamp", ups / norms, n_iter, shared_beta=True, residual=False,
                   onsager_norm=onsager_norm, shrinkage=shrinkage)
    for n in range(1, n_iter + 1):
        net.set_lam(n, lam)
    tr = net.forward(y, n_iter)
    single = np.ndim(y) == 2

    def pick(a):
        return a[0] if single else a

    xs = [pick(t.numpy()) / norms[:, None] for t in tr.x]
    x = xs[-1] if xs else np.zeros((ups.shape[1], np.shape(y)[-1]), dtype=complex)
    rep = SolverReport(x, n_iter, [float(np.linalg.norm(pick(v.numpy()))) for v in tr.v])
    rep.residuals = [pick(v.numpy()) for v in tr.v]
    rep.b = [pick(b.data[:, 0, 0]) for b in tr.b]
    rep.iterates = xs
    return rep
