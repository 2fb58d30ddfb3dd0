"""Least squares with high-dimensional fixed effects absorbed by demeaning.

The reference solver is the method of alternating projections: subtract
group means for every fixed-effect dimension in turn until no cell moves by
more than ``tolerance`` in a full sweep.  Columns are scaled to unit standard
deviation before demeaning so the stopping rule does not depend on units.

The default fast path runs conjugate gradient on the symmetric sweep
operator ``T = Q_1 ... Q_K ... Q_1`` (``Q_k`` removes dimension ``k`` means).
Writing ``y = M y + P y`` with ``M`` the annihilator of all dummies gives
``(I - T) P y = y - T y`` on the span of the dummies, where ``I - T`` is
symmetric positive definite, so CG recovers ``P y`` and ``M y = y - P y``.
Both paths share the same stopping metric.

Focal coefficients come from the partialled regression of the demeaned
outcome on the demeaned regressors.  The covariance is the CR1 cluster
sandwich.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
import scipy.stats

from .errors import AllRowsDropped, NoConvergence, RankDeficientFocal

COLLINEARITY_TOL = 1e-9


@dataclass(frozen=True)
class AbsorptionPlan:
    """Which fixed effects to absorb and how.

    ``dof`` picks the parameter count used in the small-sample factor:
    ``"full"`` counts every absorbed level, ``"nested"`` skips dimensions
    nested within the cluster variable, ``"none"`` disables the correction.
    """

    fe_dims: tuple[str, ...]
    tolerance: float = 1e-8
    max_sweeps: int = 10_000
    drop_singletons: bool = True
    method: str = "cg"
    dof: str = "nested"

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if len(self.fe_dims) == 0:
            raise ValueError("at least one fixed-effect dimension is required")
        if self.method not in ("cg", "map"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.dof not in ("full", "nested", "none"):
            raise ValueError(f"unknown dof mode {self.dof!r}")


@dataclass
class FitResult:
    names: list[str]
    params: pd.Series
    cov: pd.DataFrame
    n_obs: int
    n_clusters: int
    n_dropped_singletons: int
    sweeps_used: int
    converged: bool
    r2_within: float
    dof_k: int
    small_sample_factor: float
    fe_values: dict[str, pd.Series] | None = None
    trace: list[float] = field(default_factory=list)
    fe_dims: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def coefficients(self) -> dict[str, float]:
        return {n: float(self.params[n]) for n in self.names}

    @property
    def vcov(self) -> np.ndarray:
        return self.cov.loc[self.names, self.names].to_numpy()

    @property
    def se(self) -> pd.Series:
        return pd.Series(np.sqrt(np.clip(np.diag(self.cov.to_numpy()), 0, None)), index=self.cov.index)

    @property
    def df_resid(self) -> int:
        return max(self.n_clusters - 1, 1)

    def tstat(self, name: str) -> float:
        se = self.se[name]
        b = self.params[name]
        if se == 0:
            return 0.0 if b == 0 else np.inf * np.sign(b)
        return float(b / se)

    def pvalue(self, name: str) -> float:
        t = self.tstat(name)
        return float(2 * scipy.stats.t.sf(abs(t), self.df_resid))

    def conf_int(self, name: str, level: float = 0.95) -> tuple[float, float]:
        q = scipy.stats.t.ppf(0.5 + level / 2, self.df_resid)
        b, s = float(self.params[name]), float(self.se[name])
        return b - q * s, b + q * s

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sweep", "max_change"])
            for i, c in enumerate(self.trace, 1):
                w.writerow([i, repr(float(c))])


def factorize(values) -> tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(np.asarray(values), sort=True)
    if (codes < 0).any():
        raise ValueError("fixed-effect column contains missing values")
    return codes.astype(np.int64), len(uniques)


def singleton_mask(codes: Sequence[np.ndarray]) -> np.ndarray:
    """Boolean mask of rows kept after iteratively removing singletons."""
    keep = np.ones(len(codes[0]), dtype=bool)
    while True:
        bad = np.zeros_like(keep)
        for c in codes:
            counts = np.bincount(c[keep], minlength=c.max() + 1 if len(c) else 0)
            bad[keep] |= counts[c[keep]] == 1
        if not bad.any():
            return keep
        keep &= ~bad


def drop_singletons(frame: pd.DataFrame, plan: AbsorptionPlan) -> tuple[pd.DataFrame, int]:
    """Remove rows alone in any fixed-effect level, until a fixed point."""
    if not plan.drop_singletons or frame.empty:
        return frame, 0
    codes = [factorize(frame[d])[0] for d in plan.fe_dims]
    keep = singleton_mask(codes)
    if not keep.any():
        raise AllRowsDropped("every row is a singleton in some fixed-effect dimension")
    return frame.loc[keep], int((~keep).sum())


class Absorber:
    """Group-mean projections for a fixed set of categorical dimensions."""

    def __init__(self, codes: Sequence[np.ndarray]):
        self.codes = [np.asarray(c, dtype=np.int64) for c in codes]
        self.n = len(self.codes[0])
        self.levels = [int(c.max()) + 1 for c in self.codes]
        self.counts = [np.bincount(c, minlength=L).astype(float) for c, L in zip(self.codes, self.levels)]
        self._sum_ops = [
            scipy.sparse.csr_matrix((np.ones(self.n), (c, np.arange(self.n))), shape=(L, self.n))
            for c, L in zip(self.codes, self.levels)
        ]

    def group_means(self, X: np.ndarray, k: int) -> np.ndarray:
        return (self._sum_ops[k] @ X) / self.counts[k][:, None]

    def project_out(self, X: np.ndarray, k: int) -> np.ndarray:
        return X - self.group_means(X, k)[self.codes[k]]

    def sweep(self, X: np.ndarray) -> np.ndarray:
        for k in range(len(self.codes)):
            X = self.project_out(X, k)
        return X

    def symmetric_sweep(self, X: np.ndarray) -> np.ndarray:
        K = len(self.codes)
        for k in range(K):
            X = self.project_out(X, k)
        for k in range(K - 2, -1, -1):
            X = self.project_out(X, k)
        return X

    def demean(self, X: np.ndarray, tol: float = 1e-8, max_sweeps: int = 10_000, method: str = "cg"):
        """Return ``(demeaned, sweeps_used, converged, trace)``."""
        X = np.array(X, dtype=float, copy=True)
        if X.ndim == 1:
            X = X[:, None]
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        Z = X / scale
        if method == "map":
            out, sweeps, ok, trace = self._demean_map(Z, tol, max_sweeps)
        elif len(self.codes) == 1:
            out = self.project_out(Z, 0)
            sweeps, ok, trace = 1, True, [0.0]
        else:
            out, sweeps, ok, trace = self._demean_cg(Z, tol, max_sweeps)
        return out * scale, sweeps, ok, trace

    def _demean_map(self, Z, tol, max_sweeps):
        active = np.arange(Z.shape[1])
        trace = []
        for it in range(1, max_sweeps + 1):
            sub = Z[:, active]
            new = self.sweep(sub)
            change = np.abs(new - sub).max(axis=0) if len(sub) else np.zeros(len(active))
            Z[:, active] = new
            trace.append(float(change.max()) if len(change) else 0.0)
            active = active[change >= tol]
            if len(active) == 0:
                return Z, it, True, trace
        return Z, max_sweeps, False, trace

    def _demean_cg(self, Z, tol, max_sweeps):
        # Solve (I - T) W = Z - T Z column-wise; the result is Z - W.
        B = Z - self.symmetric_sweep(Z)
        W = np.zeros_like(Z)
        R = B.copy()
        P = R.copy()
        rr = np.einsum("ij,ij->j", R, R)
        floor = rr * 1e-28  # residual at roundoff level: nothing left to solve
        active = np.flatnonzero(rr > 0)
        trace = []
        it = 0
        while len(active) and it < max_sweeps:
            it += 1
            p = P[:, active]
            Ap = p - self.symmetric_sweep(p)
            pAp = np.einsum("ij,ij->j", p, Ap)
            # a direction with no curvature is roundoff in the operator's null space
            safe = pAp > 1e-12 * np.einsum("ij,ij->j", p, p)
            alpha = np.where(safe, rr[active] / np.where(safe, pAp, 1.0), 0.0)
            step = alpha * p
            W[:, active] += step
            R[:, active] -= alpha * Ap
            change = np.abs(step).max(axis=0)
            trace.append(float(change.max()))
            rr_new = np.einsum("ij,ij->j", R[:, active], R[:, active])
            beta = np.where(rr[active] > 0, rr_new / np.where(rr[active] > 0, rr[active], 1.0), 0.0)
            P[:, active] = R[:, active] + beta * p
            rr[active] = rr_new
            done = (change < tol) | ~safe | (rr_new <= floor[active])
            active = active[~done]
        out = self.symmetric_sweep(Z - W)
        return out, it, len(active) == 0, trace

    def recover(self, d: np.ndarray, tol: float, max_sweeps: int, method: str = "cg") -> list[np.ndarray]:
        """Fixed-effect values ``alpha_k`` with ``sum_k alpha_k[codes_k] = d``.

        Dimensions after the first are normalised to row-weighted mean zero,
        the first one absorbing the grand mean.
        """
        scale = float(np.abs(d).max()) or 1.0
        K = len(self.codes)
        if method == "map" or K == 1:
            alphas = [np.zeros(L) for L in self.levels]
            fitted = np.zeros(self.n)
            for _ in range(max_sweeps):
                biggest = 0.0
                for k in range(K):
                    part = fitted - alphas[k][self.codes[k]]
                    new = np.bincount(self.codes[k], weights=d - part, minlength=self.levels[k]) / self.counts[k]
                    biggest = max(biggest, float(np.abs(new - alphas[k]).max()))
                    alphas[k] = new
                    fitted = part + new[self.codes[k]]
                if biggest < tol * scale:
                    break
        else:
            offsets = np.cumsum([0] + self.levels)
            D = scipy.sparse.hstack(
                [op.T for op in self._sum_ops], format="csr"
            )
            DtD = (D.T @ D).tocsr()
            rhs = D.T @ d
            diag = np.concatenate(self.counts)
            M = scipy.sparse.diags(1.0 / diag)
            sol, info = scipy.sparse.linalg.cg(DtD, rhs, rtol=1e-14, atol=0.0, maxiter=max_sweeps, M=M)
            alphas = [sol[offsets[k] : offsets[k + 1]] for k in range(K)]
        for k in range(1, K):
            m = float(np.dot(alphas[k], self.counts[k]) / self.n)
            alphas[k] = alphas[k] - m
            alphas[0] = alphas[0] + m
        return alphas


def demean(X, fe: pd.DataFrame | Sequence, plan: AbsorptionPlan):
    """Demean the columns of ``X`` against the fixed effects in ``fe``.

    ``fe`` is a frame whose columns (named in ``plan.fe_dims``) categorise the
    rows, or a sequence of integer code arrays.  Raises
    :class:`NoConvergence` when the sweep budget is exhausted.
    """
    if isinstance(fe, pd.DataFrame):
        codes = [factorize(fe[d])[0] for d in plan.fe_dims]
    else:
        codes = [factorize(c)[0] for c in fe]
    ab = Absorber(codes)
    out, sweeps, ok, _ = ab.demean(X, plan.tolerance, plan.max_sweeps, plan.method)
    if not ok:
        raise NoConvergence(f"demeaning did not converge in {plan.max_sweeps} sweeps")
    return out[:, 0] if np.ndim(X) == 1 else out


def _independent_columns(G: np.ndarray, tol: float = COLLINEARITY_TOL) -> list[int]:
    """Greedy in-order selection of linearly independent columns from a Gram matrix."""
    keep: list[int] = []
    for j in range(G.shape[0]):
        if G[j, j] <= 0:
            continue
        if keep:
            Gkk = G[np.ix_(keep, keep)]
            g = G[keep, j]
            resid = G[j, j] - g @ np.linalg.lstsq(Gkk, g, rcond=None)[0]
        else:
            resid = G[j, j]
        if resid > tol * G[j, j]:
            keep.append(j)
    return keep


def _nested(fe_codes: np.ndarray, cluster_codes: np.ndarray) -> bool:
    pairs = pd.DataFrame({"f": fe_codes, "c": cluster_codes}).drop_duplicates()
    return not pairs["f"].duplicated().any()


def cluster_vcov(X: np.ndarray, resid: np.ndarray, cluster_codes: np.ndarray, bread: np.ndarray, factor: float):
    scores = X * resid[:, None]
    G = int(cluster_codes.max()) + 1
    n = len(cluster_codes)
    op = scipy.sparse.csr_matrix((np.ones(n), (cluster_codes, np.arange(n))), shape=(G, n))
    summed = op @ scores
    meat = summed.T @ summed
    V = factor * bread @ meat @ bread
    return (V + V.T) / 2


def fit(
    data: pd.DataFrame,
    outcome: str,
    focal: Sequence[str],
    plan: AbsorptionPlan,
    cluster: str,
    controls: Sequence[str] = (),
    recover_fe: bool = False,
) -> FitResult:
    """OLS of ``outcome`` on ``focal`` and ``controls`` with ``plan.fe_dims`` absorbed."""
    focal, controls = list(focal), list(controls)
    used = [outcome] + focal + controls
    frame = data[used + [d for d in plan.fe_dims if d not in used] + ([cluster] if cluster not in used else [])]
    if frame[used].isna().to_numpy().any():
        raise ValueError("regression columns contain missing values")
    frame, n_single = drop_singletons(frame, plan)
    codes = [factorize(frame[d])[0] for d in plan.fe_dims]
    ab = Absorber(codes)

    M = frame[used].to_numpy(dtype=float)
    Md, sweeps, ok, trace = ab.demean(M, plan.tolerance, plan.max_sweeps, plan.method)
    if not ok:
        raise NoConvergence(f"demeaning did not converge in {plan.max_sweeps} sweeps")
    y_t, X_t = Md[:, 0], Md[:, 1:]
    y_c = M[:, 0] - M[:, 0].mean()
    outcome_absorbed = bool(np.sqrt(y_t @ y_t) <= 1e-7 * max(np.sqrt(y_c @ y_c), 1e-300))
    names = focal + controls

    # A focal column living inside the absorbed space has nothing left after demeaning.
    raw = M[:, 1:]
    raw_c = raw - raw.mean(axis=0)
    raw_norm = np.sqrt((raw_c**2).sum(axis=0))
    left_norm = np.sqrt((X_t**2).sum(axis=0))
    G = X_t.T @ X_t
    keep = _independent_columns(G)
    for j, name in enumerate(focal):
        if j not in keep or left_norm[j] <= 1e-7 * max(raw_norm[j], 1e-300):
            raise RankDeficientFocal(f"focal regressor {name!r} is collinear with the absorbed space")
    keep = [j for j in keep if left_norm[j] > 1e-7 * max(raw_norm[j], 1e-300)]
    dropped = [names[j] for j in range(len(names)) if j not in keep]
    X_k = X_t[:, keep]
    kept_names = [names[j] for j in keep]

    Q, R = np.linalg.qr(X_k, mode="reduced")
    b = scipy.linalg.solve_triangular(R, Q.T @ y_t)
    Rinv = scipy.linalg.solve_triangular(R, np.eye(R.shape[0]))
    bread = Rinv @ Rinv.T
    e = y_t - X_k @ b

    cl_codes, n_clusters = factorize(frame[cluster])
    n = len(frame)
    k_explicit = len(kept_names)
    if plan.dof == "none":
        k_total, factor = k_explicit, 1.0
    else:
        counted = [
            L for L, c in zip(ab.levels, codes) if plan.dof == "full" or not _nested(c, cl_codes)
        ]
        k_total = k_explicit + sum(counted) - len(counted)
        if n_clusters < 2 or n <= k_total:
            factor = np.nan
        else:
            factor = n_clusters / (n_clusters - 1) * (n - 1) / (n - k_total)
    V = cluster_vcov(X_k, e, cl_codes, bread, factor)

    params = pd.Series(b, index=kept_names)
    cov = pd.DataFrame(V, index=kept_names, columns=kept_names)
    k_all = k_explicit + sum(ab.levels) - len(ab.levels)
    resid_var = float(e @ e) / max(n - k_all, 1)
    sst = float(y_t @ y_t)
    r2 = 1.0 - float(e @ e) / sst if sst > 0 else 0.0

    fe_values = None
    if recover_fe:
        d = (M[:, 0] - raw[:, keep] @ b) - e
        alphas = ab.recover(d, plan.tolerance, plan.max_sweeps * 10, plan.method)
        fe_values = {}
        for dim, a in zip(plan.fe_dims, alphas):
            levels = pd.factorize(np.asarray(frame[dim]), sort=True)[1]
            fe_values[dim] = pd.Series(a, index=levels)

    return FitResult(
        names=focal,
        params=params,
        cov=cov,
        n_obs=n,
        n_clusters=n_clusters,
        n_dropped_singletons=n_single,
        sweeps_used=sweeps,
        converged=ok,
        r2_within=r2,
        dof_k=k_total,
        small_sample_factor=factor,
        fe_values=fe_values,
        trace=trace,
        fe_dims=tuple(plan.fe_dims),
        meta={"dropped_controls": dropped, "resid_var": resid_var, "outcome_absorbed": outcome_absorbed},
    )
