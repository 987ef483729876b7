"""Closed-form linear-Gaussian model of adapter training with shortcuts.

Data model: x = M_T t + M_C c + sigma * eps with independent standard-normal
factors. A linear adapter E is fit by least squares to reconstruct x through
a fixed decoder P, optionally with a frozen shortcut map S carrying the
confounder c. The leakage operator L = P E M_C measures how much of the
confounder subspace the adapter reproduces. With S = M_C, orthogonal
loadings, and no observation noise, the rerouted solution has exactly zero
leakage; with noise it retains an O(sigma^2) bias, which the sweep exposes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .rng import stream


class LinearOracleError(RuntimeError):
    pass


@dataclass
class LinearWorld:
    M_T: np.ndarray  # (D, d_T)
    M_C: np.ndarray  # (D, d_C)
    sigma: float
    cov_t: np.ndarray | None = None  # diagonal entries, default ones
    cov_c: np.ndarray | None = None

    def __post_init__(self):
        self.M_T = np.asarray(self.M_T, dtype=np.float64)
        self.M_C = np.asarray(self.M_C, dtype=np.float64)
        if self.M_T.ndim != 2 or self.M_C.ndim != 2 or self.M_T.shape[0] != self.M_C.shape[0]:
            raise LinearOracleError("loadings must be (D, d_T) and (D, d_C)")
        if self.M_T.shape[0] < self.M_T.shape[1] + self.M_C.shape[1]:
            raise LinearOracleError("need D >= d_T + d_C")
        if self.sigma < 0:
            raise LinearOracleError("sigma must be >= 0")
        if self.cov_t is None:
            self.cov_t = np.ones(self.M_T.shape[1])
        if self.cov_c is None:
            self.cov_c = np.ones(self.M_C.shape[1])
        self.cov_t = np.asarray(self.cov_t, dtype=np.float64)
        self.cov_c = np.asarray(self.cov_c, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.M_T.shape[0]

    def cov_x(self) -> np.ndarray:
        return (
            self.M_T * self.cov_t @ self.M_T.T
            + self.M_C * self.cov_c @ self.M_C.T
            + self.sigma**2 * np.eye(self.dim)
        )

    def sample(self, n: int, seed: int = 0):
        """Draw (x, t, c) with x: (n, D)."""
        rng = stream("linear-world", seed)
        t = rng.standard_normal((n, self.M_T.shape[1])) * np.sqrt(self.cov_t)
        c = rng.standard_normal((n, self.M_C.shape[1])) * np.sqrt(self.cov_c)
        eps = rng.standard_normal((n, self.dim))
        x = t @ self.M_T.T + c @ self.M_C.T + self.sigma * eps
        return x, t, c

    def to_json(self, path) -> None:
        payload = {
            "M_T": self.M_T.tolist(),
            "M_C": self.M_C.tolist(),
            "sigma": self.sigma,
            "cov_t": self.cov_t.tolist(),
            "cov_c": self.cov_c.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    @staticmethod
    def from_json(path) -> "LinearWorld":
        with open(path) as fh:
            payload = json.load(fh)
        return LinearWorld(
            M_T=np.array(payload["M_T"]),
            M_C=np.array(payload["M_C"]),
            sigma=payload["sigma"],
            cov_t=np.array(payload["cov_t"]),
            cov_c=np.array(payload["cov_c"]),
        )


@dataclass
class LinearAdapterSolution:
    E: np.ndarray  # (m, D)
    P: np.ndarray  # (D, m)
    leak: np.ndarray  # (D, d_C)
    leak_norm: float
    ridge_used: float = 0.0


def _pt_p_inv(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    gram = P.T @ P
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise LinearOracleError("decoder P is rank-deficient")
    return np.linalg.inv(gram)


def _solution(E: np.ndarray, P: np.ndarray, world: LinearWorld, ridge: float = 0.0) -> LinearAdapterSolution:
    leak = P @ E @ world.M_C
    return LinearAdapterSolution(
        E=E, P=P, leak=leak, leak_norm=float(np.linalg.norm(leak)), ridge_used=ridge
    )


def solve_vanilla(world: LinearWorld, P: np.ndarray, samples=None) -> LinearAdapterSolution:
    """min_E E||P E x - x||^2: E* = (P^T P)^-1 P^T in population and sample."""
    E = _pt_p_inv(P) @ np.asarray(P, dtype=np.float64).T
    return _solution(E, np.asarray(P, dtype=np.float64), world)


def solve_sr(world: LinearWorld, P: np.ndarray, S: np.ndarray, samples=None, ridge: float | None = None) -> LinearAdapterSolution:
    """min_E E||P E x + S c - x||^2 with S frozen.

    Population: E* = (P^T P)^-1 P^T Cov(x - S c, x) Cov(x)^-1. Empirical mode
    (samples = (x, c)) solves the sample normal equations the same way. The
    covariance inverse uses no ridge by default so solve_sr(S=0) reduces to
    solve_vanilla exactly; a singular covariance raises unless ``ridge`` is
    given, and any ridge actually applied is reported on the solution.
    """
    P = np.asarray(P, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (world.dim, world.M_C.shape[1]):
        raise LinearOracleError(f"S must be (D, d_C), got {S.shape}")

    if samples is None:
        sxx = world.cov_x()
        # Cov(x - S c, x) = Cov(x) - S Cov(c, x) = Cov(x) - S diag(cov_c) M_C^T
        syx = sxx - S * world.cov_c @ world.M_C.T
    else:
        x, c = samples
        n = x.shape[0]
        y = x - c @ S.T
        sxx = x.T @ x / n
        syx = y.T @ x / n

    used = 0.0
    if np.linalg.cond(sxx) > 1e12:
        if ridge is None:
            raise LinearOracleError("singular covariance: pass a ridge parameter")
        used = ridge
    b = np.linalg.solve(sxx + used * np.eye(world.dim), syx.T).T  # Cov(y,x) Cov(x)^-1
    E = _pt_p_inv(P) @ P.T @ b
    return _solution(E, P, world, ridge=used)


# ---------------------------------------------------------------------------
# brute-force verifier


def solve_gd(
    world: LinearWorld,
    P: np.ndarray,
    S: np.ndarray | None = None,
    samples=None,
    iters: int = 300000,
    tol: float = 1e-10,
) -> LinearAdapterSolution:
    """Gradient descent on the same least-squares objective, for verification.

    Uses the sufficient statistics Sxx = E[x x^T] and Syx = E[(x - S c) x^T]:
    grad_E = 2 (P^T P E Sxx - P^T Syx).
    """
    P = np.asarray(P, dtype=np.float64)
    S = np.zeros((world.dim, world.M_C.shape[1])) if S is None else np.asarray(S, dtype=np.float64)
    if samples is None:
        sxx = world.cov_x()
        syx = sxx - S * world.cov_c @ world.M_C.T
    else:
        x, c = samples
        n = x.shape[0]
        sxx = x.T @ x / n
        syx = (x - c @ S.T).T @ x / n

    gram = P.T @ P
    gram_eigs = np.linalg.eigvalsh(gram)
    sxx_eigs = np.linalg.eigvalsh(sxx)
    lip = 2.0 * gram_eigs[-1] * sxx_eigs[-1]
    mu = 2.0 * gram_eigs[0] * max(sxx_eigs[0], 0.0)
    lr = 2.0 / (lip + mu)  # optimal constant step for a quadratic
    E = np.zeros((P.shape[1], world.dim))
    for _ in range(iters):
        grad = 2.0 * (gram @ E @ sxx - P.T @ syx)
        E = E - lr * grad
        if float(np.abs(grad).max()) < tol:
            break
    return _solution(E, P, world)


# ---------------------------------------------------------------------------
# documented fixed-seed world


def documented_world(seed: int = 7, sigma: float = 0.1, angle_deg: float = 90.0):
    """The fixed study world: D=16, d_T=d_C=2, random decoder with m=4.

    M_C is built from components inside and orthogonal to span(M_T), with
    ``angle_deg`` = 90 giving exactly orthogonal loadings. Returns (world, P).
    """
    rng = stream("linear-doc", seed)
    d, d_t, d_c, m = 16, 2, 2, 4
    basis, _ = np.linalg.qr(rng.standard_normal((d, d_t + d_c)))
    M_T = basis[:, :d_t]
    ortho = basis[:, d_t:]
    phi = np.deg2rad(angle_deg)
    # component inside span(M_T) shrinks as the angle opens toward 90 degrees
    inside = M_T @ rng.standard_normal((d_t, d_c))
    inside /= np.linalg.norm(inside, axis=0)
    M_C = np.cos(phi) * inside + np.sin(phi) * ortho
    P = rng.standard_normal((d, m))
    return LinearWorld(M_T=M_T, M_C=M_C, sigma=sigma), P


# ---------------------------------------------------------------------------
# sweeps


def leakage_sweep(parameter: str, values, path=None, seed: int = 7, n: int = 50000) -> list[tuple]:
    """Tabulate (value, vanilla leak, SR leak) over sigma, angle, or n."""
    if parameter not in ("sigma", "angle", "n"):
        raise LinearOracleError(f"unknown sweep parameter {parameter!r}")
    rows = []
    for value in values:
        if parameter == "sigma":
            world, P = documented_world(seed=seed, sigma=float(value))
            samples = None
        elif parameter == "angle":
            world, P = documented_world(seed=seed, angle_deg=float(value))
            samples = None
        else:
            world, P = documented_world(seed=seed)
            x, _, c = world.sample(int(value), seed=seed)
            samples = (x, c)
        vanilla = solve_vanilla(world, P, samples=samples)
        sr = solve_sr(world, P, world.M_C, samples=samples, ridge=1e-8)
        rows.append((value, vanilla.leak_norm, sr.leak_norm))
    if path is not None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([parameter, "vanilla_leak", "sr_leak"])
            writer.writerows(rows)
    return rows
