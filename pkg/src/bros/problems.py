"""Bilevel test problems and their projected stochastic oracles.

Each problem exposes deterministic first- and second-order evaluators of the
upper objective ``f(x, Y)`` and the strongly convex lower objective
``g(x, Y)``, reference solutions ``Y*(x)`` and ``Z*(x)``, and a sampler that
returns one iteration's bundle of projected oracles.

Projected oracles are built by composition with full-space derivatives:

    V  = P^T (grad_Y g + eps_g)        U_Y = P^T (grad_Y f + eps_f)
    U_x = grad_x f + eps_x
    H~[W] = P^T (H + Xi)[P W]          J~[W] = (J + Psi)[P W]

with the perturbations drawn once per sample, so repeated operator queries
inside one iteration see the same realization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import linalg as sla
from scipy.sparse.linalg import LinearOperator, cg

from bros.blockmat import BlockShape, BlockVar, ShapeError, lift_up, norm, project_down
from bros.randsrc import ProjectorSet, Purpose, RngStream, _haar_columns


class InnerSolveError(RuntimeError):
    """An iterative reference solve stopped before reaching its tolerance."""

    def __init__(self, what: str, residual: float, iterations: int):
        super().__init__(f"{what} did not converge: residual {residual:.3e} after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


@dataclass
class OracleSample:
    """Projected oracle bundle for one iteration.

    ``hvp`` and ``jvp`` are linear maps on the reduced space whose random
    realization is frozen at construction; ``queries`` counts ``hvp`` calls.
    """

    ux: np.ndarray
    uy: BlockVar
    v: BlockVar
    _hvp: Callable[[BlockVar], BlockVar] = field(repr=False)
    _jvp: Callable[[BlockVar], np.ndarray] = field(repr=False)
    queries: int = 0

    def hvp(self, W: BlockVar) -> BlockVar:
        self.queries += 1
        return self._hvp(W)

    def jvp(self, W: BlockVar) -> np.ndarray:
        return self._jvp(W)


class BilevelProblem:
    """Base class; subclasses provide the evaluators below."""

    d_x: int
    shape: BlockShape
    mu_g: float
    sigma_grad: float = 0.0
    sigma_op: float = 0.0
    # symmetric m x m matrix when H[Z] = H @ Z on a single layer, else None
    column_hessian: np.ndarray | None = None
    exact = False

    def f(self, x, Y: BlockVar) -> float:
        raise NotImplementedError

    def g(self, x, Y: BlockVar) -> float:
        raise NotImplementedError

    def grad_x_f(self, x, Y: BlockVar) -> np.ndarray:
        raise NotImplementedError

    def grad_y_f(self, x, Y: BlockVar) -> BlockVar:
        raise NotImplementedError

    def grad_y_g(self, x, Y: BlockVar) -> BlockVar:
        raise NotImplementedError

    def hvp(self, x, Y: BlockVar, W: BlockVar) -> BlockVar:
        raise NotImplementedError

    def jvp(self, x, Y: BlockVar, W: BlockVar) -> np.ndarray:
        raise NotImplementedError

    def lower_solution(self, x) -> BlockVar:
        raise NotImplementedError

    def aux_solution(self, x, Y: BlockVar | None = None) -> BlockVar:
        raise NotImplementedError

    def phi(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return self.f(x, self.lower_solution(x))

    def exact_hypergradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        Y = self.lower_solution(x)
        Z = self.aux_solution(x, Y)
        return self.grad_x_f(x, Y) - self.jvp(x, Y, Z)

    def sample_projected_oracles(self, stream: RngStream, x, Y: BlockVar, P: ProjectorSet) -> OracleSample:
        return _additive_oracles(self, stream, x, Y, P)


def _additive_oracles(problem: BilevelProblem, stream: RngStream, x, Y: BlockVar, P: ProjectorSet) -> OracleSample:
    x = np.asarray(x, dtype=np.float64)
    shape, N, d = problem.shape, problem.shape.size, problem.d_x
    sg, so = problem.sigma_grad, problem.sigma_op
    gen = stream.child(Purpose.ORACLE).generator() if (sg > 0 or so > 0) else None
    gy = problem.grad_y_g(x, Y)
    fy = problem.grad_y_f(x, Y)
    fx = problem.grad_x_f(x, Y)
    if sg > 0:
        gy = gy + BlockVar.from_flat(sg * gen.standard_normal(N), shape)
        fy = fy + BlockVar.from_flat(sg * gen.standard_normal(N), shape)
        fx = fx + sg * gen.standard_normal(d)
    Xi = Psi = None
    if so > 0:
        # (R + R^T)/sqrt(2) with N(0, so^2/N) entries: ||Xi w|| ~ so ||w||
        R = gen.standard_normal((N, N)) * (so / np.sqrt(N))
        Xi = (R + R.T) / np.sqrt(2.0)
        Psi = gen.standard_normal((d, N)) * (so / np.sqrt(N))

    native = None
    if problem.column_hessian is not None and Xi is None and len(shape) == 1:
        # subspace-native path: the r x r matrix P^T H P is formed once
        P0 = P[0]
        native = P0.T @ problem.column_hessian @ P0

    def hvp(W: BlockVar) -> BlockVar:
        if native is not None:
            return BlockVar([native @ W[0]])
        PW = lift_up(P, W)
        out = problem.hvp(x, Y, PW)
        if Xi is not None:
            out = out + BlockVar.from_flat(Xi @ PW.flat(), shape)
        return project_down(P, out)

    def jvp(W: BlockVar) -> np.ndarray:
        PW = lift_up(P, W)
        out = problem.jvp(x, Y, PW)
        if Psi is not None:
            out = out + Psi @ PW.flat()
        return out

    return OracleSample(ux=fx, uy=project_down(P, fy), v=project_down(P, gy), _hvp=hvp, _jvp=jvp)


def sample_projected_oracles(problem: BilevelProblem, stream: RngStream, x, Y: BlockVar, P: ProjectorSet) -> OracleSample:
    return problem.sample_projected_oracles(stream, x, Y, P)


def lower_solution(problem: BilevelProblem, x) -> BlockVar:
    return problem.lower_solution(np.asarray(x, dtype=np.float64))


def aux_solution(problem: BilevelProblem, x) -> BlockVar:
    return problem.aux_solution(np.asarray(x, dtype=np.float64))


def exact_hypergradient(problem: BilevelProblem, x) -> np.ndarray:
    return problem.exact_hypergradient(x)


# -- quadratic family -----------------------------------------------------------


class QuadraticBilevel(BilevelProblem):
    """``g = 1/2 <Y, H Y> - <C x + g0, Y>``, ``f = 1/2 |x|^2 + <D, Y>``.

    ``H`` is an SPD operator on the flattened (row-major) lower variable.
    """

    exact = True

    def __init__(self, shape: BlockShape, H, C, D, g0=None, sigma_grad=0.0, sigma_op=0.0, column_hessian=None):
        self.shape = shape
        N = shape.size
        self.H = np.asarray(H, dtype=np.float64)
        self.C = np.asarray(C, dtype=np.float64).reshape(N, -1)
        self.D = np.asarray(D, dtype=np.float64).reshape(N)
        self.g0 = np.zeros(N) if g0 is None else np.asarray(g0, dtype=np.float64).reshape(N)
        if self.H.shape != (N, N):
            raise ShapeError(f"H must be {N}x{N}, got {self.H.shape}")
        if np.abs(self.H - self.H.T).max() > 1e-12 * max(1.0, np.abs(self.H).max()):
            raise ValueError("lower Hessian must be symmetric")
        eigs = np.linalg.eigvalsh(self.H)
        if eigs[0] <= 0:
            raise ValueError(f"lower Hessian is not positive definite (min eig {eigs[0]:.3e})")
        self.mu_g = float(eigs[0])
        self.d_x = self.C.shape[1]
        self.sigma_grad = float(sigma_grad)
        self.sigma_op = float(sigma_op)
        if sigma_grad < 0 or sigma_op < 0:
            raise ValueError("noise levels must be non-negative")
        self.column_hessian = None if column_hessian is None else np.asarray(column_hessian, dtype=np.float64)
        self._chol = sla.cho_factor(self.H)
        self._zstar = BlockVar.from_flat(sla.cho_solve(self._chol, self.D), shape)

    def _vec(self, Y: BlockVar) -> np.ndarray:
        if Y.dims != self.shape.layers:
            raise ShapeError(f"expected {self.shape.layers}, got {list(Y.dims)}")
        return Y.flat()

    def f(self, x, Y):
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * float(x @ x) + float(self.D @ self._vec(Y))

    def g(self, x, Y):
        y = self._vec(Y)
        return 0.5 * float(y @ self.H @ y) - float((self.C @ x + self.g0) @ y)

    def grad_x_f(self, x, Y):
        return np.array(x, dtype=np.float64).reshape(self.d_x)

    def grad_y_f(self, x, Y):
        return BlockVar.from_flat(self.D, self.shape)

    def grad_y_g(self, x, Y):
        y = self._vec(Y)
        return BlockVar.from_flat(self.H @ y - self.C @ x - self.g0, self.shape)

    def hvp(self, x, Y, W):
        return BlockVar.from_flat(self.H @ self._vec(W), self.shape)

    def jvp(self, x, Y, W):
        return -self.C.T @ self._vec(W)

    def lower_solution(self, x):
        rhs = self.C @ np.asarray(x, dtype=np.float64).reshape(self.d_x) + self.g0
        return BlockVar.from_flat(sla.cho_solve(self._chol, rhs), self.shape)

    def aux_solution(self, x, Y=None):
        return self._zstar

    def exact_hypergradient(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(self.d_x)
        return x + self.C.T @ self._zstar.flat()


def _spd_with_spectrum(gen: np.random.Generator, size: int, conditioning: float) -> np.ndarray:
    if conditioning < 1:
        raise ValueError(f"conditioning must be >= 1, got {conditioning}")
    if conditioning == 1:
        return np.eye(size)
    V = _haar_columns(gen, size, size)
    eigs = np.linspace(1.0, conditioning, size)
    H = (V * eigs) @ V.T
    return 0.5 * (H + H.T)


def make_quadratic(
    stream: RngStream,
    m: int,
    n: int,
    d_x: int,
    conditioning: float = 1.0,
    sigma_grad: float = 0.0,
    sigma_op: float = 0.0,
    structure: str = "columnwise",
) -> QuadraticBilevel:
    """Single-layer quadratic with Hessian eigenvalues in [1, conditioning].

    ``structure="columnwise"`` gives ``H[Z] = H_col @ Z`` (the mean-field
    analysis applies); ``"general"`` draws an SPD operator on all m*n entries.
    """
    if min(m, n, d_x) < 1:
        raise ValueError("dimensions must be >= 1")
    gen = stream.child(Purpose.PROBLEM).generator()
    shape = BlockShape(((m, n),))
    N = m * n
    if structure == "columnwise":
        Hc = _spd_with_spectrum(gen, m, conditioning)
        H = np.kron(Hc, np.eye(n))
    elif structure == "general":
        Hc = None
        H = _spd_with_spectrum(gen, N, conditioning)
    else:
        raise ValueError(f"unknown Hessian structure {structure!r}")
    C = gen.standard_normal((N, d_x)) / np.sqrt(N)
    D = gen.standard_normal(N) / np.sqrt(N)
    return QuadraticBilevel(shape, H, C, D, sigma_grad=sigma_grad, sigma_op=sigma_op, column_hessian=Hc)


def make_block_quadratic(
    stream: RngStream,
    layers: list[tuple[int, int]],
    d_x: int,
    conditioning: float = 4.0,
    coupled: bool = True,
    sigma_grad: float = 0.0,
    sigma_op: float = 0.0,
) -> QuadraticBilevel:
    """Multilayer quadratic; ``coupled=False`` keeps the Hessian block-diagonal."""
    gen = stream.child(Purpose.PROBLEM).generator()
    shape = BlockShape(tuple(layers))
    N = shape.size
    if coupled:
        H = _spd_with_spectrum(gen, N, conditioning)
    else:
        H = sla.block_diag(*(_spd_with_spectrum(gen, m * n, conditioning) for m, n in shape))
    C = gen.standard_normal((N, d_x)) / np.sqrt(N)
    D = gen.standard_normal(N) / np.sqrt(N)
    return QuadraticBilevel(shape, H, C, D, sigma_grad=sigma_grad, sigma_op=sigma_op)


def make_counterexample() -> QuadraticBilevel:
    """Scalar upper variable, 3x1 lower block, H = diag(1, 2, 3), c = d = e1."""
    H = np.diag([1.0, 2.0, 3.0])
    e1 = np.array([1.0, 0.0, 0.0])
    return QuadraticBilevel(BlockShape(((3, 1),)), H, e1.reshape(3, 1), e1, column_hessian=H)


# -- hyper-data cleaning ----------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _cross_entropy(W, A, y):
    Z = A @ W.T
    zmax = Z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(Z - zmax).sum(axis=1))
    return lse - Z[np.arange(len(y)), y]


class HyperCleaning(BilevelProblem):
    """Sample-reweighted multinomial logistic regression.

    Lower variable ``W`` (classes x features).  Sample ``i`` of the noisy
    training set carries weight ``sigmoid(x_i)``; ``g`` is the weighted mean
    cross-entropy plus ``ridge/2 |W|^2`` and ``f`` is the mean cross-entropy
    on the clean validation set.  Stochastic oracles subsample minibatches.
    """

    def __init__(self, A_train, y_train, A_val, y_val, classes: int, ridge: float, batch_size=None, val_batch_size=None):
        if ridge <= 0:
            raise ValueError("ridge must be positive for strong convexity")
        self.A_tr = np.asarray(A_train, dtype=np.float64)
        self.y_tr = np.asarray(y_train, dtype=np.int64)
        self.A_val = np.asarray(A_val, dtype=np.float64)
        self.y_val = np.asarray(y_val, dtype=np.int64)
        self.classes = int(classes)
        for name, y in (("train", self.y_tr), ("validation", self.y_val)):
            if y.min() < 0 or y.max() >= classes:
                raise ValueError(f"{name} labels out of range [0, {classes})")
        if len(np.unique(self.y_val)) < 2 or len(np.unique(self.y_tr)) < 2:
            raise ValueError("degenerate class counts: need at least two classes present")
        self.ridge = float(ridge)
        self.mu_g = self.ridge
        self.d_x = len(self.y_tr)
        self.shape = BlockShape(((self.classes, self.A_tr.shape[1]),))
        self.batch_size = batch_size
        self.val_batch_size = val_batch_size
        self._cache: dict = {}

    # per-sample pieces
    def _weights(self, x):
        return _sigmoid(np.asarray(x, dtype=np.float64))

    def _residual(self, W, A, y):
        R = _softmax(A @ W.T)
        R[np.arange(len(y)), y] -= 1.0
        return R

    def _train_grad(self, w, W, idx, scale):
        A, y = self.A_tr[idx], self.y_tr[idx]
        R = self._residual(W, A, y)
        return scale * (w[idx][:, None] * R).T @ A + self.ridge * W

    def _train_hvp(self, w, W, V, idx, scale):
        A = self.A_tr[idx]
        p = _softmax(A @ W.T)
        dz = A @ V.T
        S = p * dz - p * (p * dz).sum(axis=1, keepdims=True)
        return scale * (w[idx][:, None] * S).T @ A + self.ridge * V

    def _train_jvp(self, x, W, V, idx, scale):
        A, y = self.A_tr[idx], self.y_tr[idx]
        s = _sigmoid(x[idx])
        R = self._residual(W, A, y)
        out = np.zeros(self.d_x)
        out[idx] = scale * s * (1.0 - s) * np.einsum("ic,ic->i", R, A @ V.T)
        return out

    def f(self, x, Y):
        return float(_cross_entropy(Y[0], self.A_val, self.y_val).mean())

    def g(self, x, Y):
        W = Y[0]
        ce = _cross_entropy(W, self.A_tr, self.y_tr)
        return float((self._weights(x) * ce).mean() + 0.5 * self.ridge * np.vdot(W, W))

    def grad_x_f(self, x, Y):
        return np.zeros(self.d_x)

    def grad_y_f(self, x, Y):
        R = self._residual(Y[0], self.A_val, self.y_val)
        return BlockVar([R.T @ self.A_val / len(self.y_val)])

    def grad_y_g(self, x, Y):
        n = self.d_x
        return BlockVar([self._train_grad(self._weights(x), Y[0], slice(None), 1.0 / n)])

    def hvp(self, x, Y, W):
        n = self.d_x
        return BlockVar([self._train_hvp(self._weights(x), Y[0], W[0], slice(None), 1.0 / n)])

    def jvp(self, x, Y, W):
        x = np.asarray(x, dtype=np.float64)
        return self._train_jvp(x, Y[0], W[0], np.arange(self.d_x), 1.0 / self.d_x)

    def hessian_matrix(self, x, Y) -> np.ndarray:
        """Dense lower Hessian on row-major vec(W)."""
        W = Y[0]
        w = self._weights(x)
        p = _softmax(self.A_tr @ W.T)
        S = np.einsum("ic,cd->icd", p, np.eye(self.classes)) - np.einsum("ic,id->icd", p, p)
        T = (w / self.d_x)[:, None, None, None] * S[..., None] * self.A_tr[:, None, None, :]
        H = np.tensordot(T, self.A_tr, axes=([0], [0])).transpose(0, 2, 1, 3)
        N = self.shape.size
        return H.reshape(N, N) + self.ridge * np.eye(N)

    def lower_solution(self, x, tol: float = 1e-10, max_iter: int = 100) -> BlockVar:
        """Damped Newton with backtracking; tolerance on the gradient norm."""
        x = np.asarray(x, dtype=np.float64)
        key = ("y", x.tobytes())
        if key in self._cache:
            return self._cache[key]
        Y = self._cache.get("warm", BlockVar.zeros(self.shape))
        gnorm = np.inf
        for it in range(max_iter):
            G = self.grad_y_g(x, Y)
            gnorm = norm(G)
            if gnorm <= tol:
                break
            step = np.linalg.solve(self.hessian_matrix(x, Y), G.flat())
            step = BlockVar.from_flat(step, self.shape)
            g0, t = self.g(x, Y), 1.0
            slope = float(G.flat() @ step.flat())
            while t > 1e-8 and self.g(x, Y - t * step) > g0 - 1e-4 * t * slope:
                t *= 0.5
            Y = Y - t * step
        else:
            raise InnerSolveError("Newton lower solve", gnorm, max_iter)
        self._cache = {"warm": Y, key: Y}
        return Y

    def aux_solution(self, x, Y=None, tol: float = 1e-12) -> BlockVar:
        """Conjugate gradients on ``H[Z] = grad_Y f`` at the lower solution."""
        x = np.asarray(x, dtype=np.float64)
        if Y is None:
            Y = self.lower_solution(x)
        rhs = self.grad_y_f(x, Y).flat()
        N = self.shape.size
        op = LinearOperator((N, N), matvec=lambda v: self.hvp(x, Y, BlockVar.from_flat(v, self.shape)).flat(), dtype=np.float64)
        z, info = cg(op, rhs, rtol=tol, atol=0.0, maxiter=20 * N)
        resid = float(np.linalg.norm(op.matvec(z) - rhs))
        if resid > 1e-8 * max(1.0, float(np.linalg.norm(rhs))):
            raise InnerSolveError("CG auxiliary solve", resid, 20 * N)
        return BlockVar.from_flat(z, self.shape)

    def sample_projected_oracles(self, stream, x, Y, P):
        x = np.asarray(x, dtype=np.float64)
        w = self._weights(x)
        n, nv = self.d_x, len(self.y_val)
        gen = stream.child(Purpose.ORACLE).generator()
        if self.batch_size is None or self.batch_size >= n:
            idx, scale = np.arange(n), 1.0 / n
        else:
            idx, scale = np.sort(gen.choice(n, size=self.batch_size, replace=False)), 1.0 / self.batch_size
        if self.val_batch_size is None or self.val_batch_size >= nv:
            vidx = np.arange(nv)
        else:
            vidx = np.sort(gen.choice(nv, size=self.val_batch_size, replace=False))
        W = Y[0]
        gy = BlockVar([self._train_grad(w, W, idx, scale)])
        R = self._residual(W, self.A_val[vidx], self.y_val[vidx])
        fy = BlockVar([R.T @ self.A_val[vidx] / len(vidx)])

        def hvp(B):
            V = lift_up(P, B)[0]
            return project_down(P, BlockVar([self._train_hvp(w, W, V, idx, scale)]))

        def jvp(B):
            return self._train_jvp(x, W, lift_up(P, B)[0], idx, scale)

        return OracleSample(ux=np.zeros(n), uy=project_down(P, fy), v=project_down(P, gy), _hvp=hvp, _jvp=jvp)


def make_hypercleaning(
    stream: RngStream,
    n_train: int,
    n_val: int,
    d_feat: int,
    classes: int,
    noise_rate: float,
    ridge: float,
    batch_size: int | None = None,
    val_batch_size: int | None = None,
    separation: float = 1.5,
) -> HyperCleaning:
    """Synthetic Gaussian-mixture instance with a fraction of flipped train labels.

    The indices of corrupted samples are kept on ``problem.corrupted``.
    """
    if not 0 <= noise_rate < 1:
        raise ValueError(f"noise_rate must lie in [0, 1), got {noise_rate}")
    if classes < 2 or n_train < classes or n_val < classes:
        raise ValueError("degenerate class counts")
    gen = stream.child(Purpose.DATA).generator()
    means = separation * gen.standard_normal((classes, d_feat)) / np.sqrt(d_feat)

    def draw(count):
        y = np.arange(count) % classes
        gen.shuffle(y)
        A = means[y] + gen.standard_normal((count, d_feat)) / np.sqrt(d_feat)
        return A, y

    A_tr, y_clean = draw(n_train)
    A_val, y_val = draw(n_val)
    y_tr = y_clean.copy()
    n_bad = int(round(noise_rate * n_train))
    bad = np.sort(gen.choice(n_train, size=n_bad, replace=False)) if n_bad else np.array([], dtype=np.int64)
    if n_bad:
        shift = gen.integers(1, classes, size=n_bad)
        y_tr[bad] = (y_tr[bad] + shift) % classes
    problem = HyperCleaning(A_tr, y_tr, A_val, y_val, classes, ridge, batch_size, val_batch_size)
    problem.corrupted = bad
    problem.clean_labels = y_clean
    return problem


def load_feature_table(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a CSV with the integer label first and features after, one row per sample.

    Lines starting with ``#`` and a non-numeric header row are skipped.
    """
    labels, feats = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                lab = int(float(row[0]))
            except ValueError:
                if not labels:
                    continue
                raise
            labels.append(lab)
            feats.append([float(v) for v in row[1:]])
    if not labels:
        raise ValueError(f"{path}: no samples")
    widths = {len(r) for r in feats}
    if len(widths) != 1:
        raise ValueError(f"{path}: rows have differing feature counts {sorted(widths)}")
    return np.array(feats), np.array(labels, dtype=np.int64)


def make_hypercleaning_from_tables(train_csv, val_csv, ridge: float, classes: int | None = None, batch_size=None, val_batch_size=None) -> HyperCleaning:
    A_tr, y_tr = load_feature_table(train_csv)
    A_val, y_val = load_feature_table(val_csv)
    if A_tr.shape[1] != A_val.shape[1]:
        raise ValueError("train and validation tables have different feature counts")
    if classes is None:
        classes = int(max(y_tr.max(), y_val.max())) + 1
    return HyperCleaning(A_tr, y_tr, A_val, y_val, classes, ridge, batch_size, val_batch_size)
